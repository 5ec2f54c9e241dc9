"""Hand transcription of the certificate formulas for the toy setting.

Toy setting: Lip_L = Lip_f = f_bar = 1, sigma_bar = 0, so the radial growth
bound is 1 and the forecast is y(R; t) = R + t.  The sandwich functions are
power laws, which makes every inverse and every inf-convolution closed form.
Nothing here imports the package; it is the oracle the library is checked
against.
"""

import math


def forecast(R, t, rate=1.0):
    return R + rate * t


def attraction(R, lam, delta, eta=0.0, c2=1.0, c3=1.0, z_bar=0.0, sigma=0.0):
    """One-step radius for alpha2 = c2 s^2, alpha3 = c3 s."""
    alpha2 = c2 * R * R
    root = math.sqrt(2.0 * alpha2)
    y = forecast(R, delta)
    lip_L = lip_f = f_bar = 1.0
    growth = f_bar + sigma * z_bar
    term_lip = 2.0 * lip_L * lip_f * lam * lam
    term_drift = (delta / 2.0) * lip_f * growth
    term_noise = sigma * z_bar
    inside = eta + (root / lam) * (term_lip + term_drift + term_noise) + delta * growth * growth / (2.0 * lam * lam)
    return inside / c3 + lam * root


def mean_attraction(r, lam, delta, eta=0.0, c2=1.0, c3=1.0, mu_bar=0.0, z_bar=0.0, sigma_tilde=0.0, sigma=0.0):
    """Mean radius map with a = lambda; alpha3 = c3 s is its own convex envelope."""
    root = math.sqrt(2.0 * c2 * r * r)
    f_bar = lip_f = lip_L = 1.0
    bracket = (2.0 * lam * lip_L * lip_f
               + delta / (2.0 * lam) * lip_f * (f_bar + sigma * mu_bar)
               + sigma * mu_bar / lam)
    second = (2.0 * delta / (lam * lam)) * ((f_bar + sigma * z_bar) ** 2 + sigma_tilde**2 * sigma**2)
    return (eta + root * bracket + second) / c3 + lam * root


def infconv_quadratic(c, lam, s):
    """inf_t c t^2 + (s - t)^2 / (2 lam^2), attained at t = s / (1 + 2 c lam^2)."""
    return c * s * s / (1.0 + 2.0 * c * lam * lam)


def infconv_quadratic_inverse(c, lam, v):
    return math.sqrt(v * (1.0 + 2.0 * c * lam * lam) / c)


def probability_radius(r_star, lam, delta, c1, c2):
    y = forecast(r_star, delta)
    return infconv_quadratic_inverse(c1, lam, infconv_quadratic(c2, lam, y))


def fixed_point(lam, delta, R, eta=0.0, tol=1e-13):
    """Largest root of attraction(r) = r below R, by bisection."""
    lo, hi = 0.0, R
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if attraction(mid, lam, delta, eta) < mid:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def mean_radius_equal_quadratics(r, lam, delta, grid=512, mu_bar=0.0, sigma=0.0):
    """Mean radius when alpha1 = alpha2 = s^2, alpha3 = s.

    Both inf-convolutions equal k s^2 with k = 1 / (1 + 2 lam^2).  On a
    uniform grid of [0, r] the upper concave envelope of k s^2 is the chord
    k r s; the lower convex envelope is the interpolant, whose last cell has
    slope k (2 r - h) with h = r / (grid - 1).  Past r both are extended
    linearly.
    """
    k = 1.0 / (1.0 + 2.0 * lam * lam)
    arg = mean_attraction(r, lam, delta, mu_bar=mu_bar, sigma=sigma) + (1.0 + sigma * mu_bar) * delta
    target = k * r * arg
    h = r / (grid - 1)
    top = k * r * r
    if target <= top:
        # inside [0, r] the interpolant of a quadratic; solve on the right cell
        return _inverse_interp_quadratic(k, r, grid, target)
    return r + (target - top) / (k * (2.0 * r - h))


def _inverse_interp_quadratic(k, r, grid, target):
    h = r / (grid - 1)
    for i in range(grid - 1):
        a, b = i * h, (i + 1) * h
        va, vb = k * a * a, k * b * b
        if va <= target <= vb:
            return a + (target - va) / (vb - va) * h
    return r
