"""Stage 2: deterministic refinement driven by the stage-1 uncertainty.

Pipeline: threshold the ensemble variance into a certainty mask, clean
it with a morphological opening, keep only reliable conditioned depth,
recover metric scale for the ensemble mean by least squares, build
per-pixel guidance features, then grow and smooth the reliable depth
with K rounds of masked spatial propagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import NormalizationParams, as_depth, as_mask, as_rgb, denormalize_depth
from .errors import DimensionMismatch, EmptyReliableSet, InvalidConfig, SingularFit

N_FEATURES = 8


@dataclass(frozen=True)
class ScaleShiftFit:
    a: float
    b: float
    residual_rms: float
    support_count: int

    def apply(self, mu):
        return self.a * np.asarray(mu) + self.b


@dataclass(frozen=True)
class RefineState:
    depth: np.ndarray
    mask: np.ndarray
    iteration: int = 0


@dataclass(frozen=True)
class RefineConfig:
    eps: float = 0.01
    open_radius: int = 1
    iterations: int = 6
    windows: tuple = (13, 3)
    bandwidth: float = 0.5
    gamma_max: float = 0.3
    use_sigma2: bool = True
    fill_remaining: bool = True

    def __post_init__(self):
        if self.eps <= 0:
            raise InvalidConfig("eps must be positive")
        if self.open_radius < 0 or self.iterations < 0:
            raise InvalidConfig("open_radius and iterations must be non-negative")
        if not self.windows or any(w < 3 or w % 2 == 0 for w in self.windows):
            raise InvalidConfig("propagation windows must be odd and >= 3")
        if self.bandwidth <= 0 or not 0 <= self.gamma_max <= 1:
            raise InvalidConfig("bandwidth must be > 0 and gamma_max in [0, 1]")


def certainty_mask(sigma2_hat, eps: float) -> np.ndarray:
    """1 where the ensemble variance is at most ``eps``, 0 where it exceeds it."""
    if not eps > 0:
        raise InvalidConfig("eps must be positive")
    return np.asarray(sigma2_hat) <= eps


def morphological_open(m, radius: int) -> np.ndarray:
    """Binary opening with a (2r+1)^2 square; the border replicates edge pixels."""
    m = np.asarray(m, dtype=bool)
    if radius < 0:
        raise InvalidConfig("radius must be non-negative")
    if radius == 0:
        return m.copy()
    size = 2 * radius + 1
    eroded = ndimage.minimum_filter(m, size=size, mode="nearest")
    return ndimage.maximum_filter(eroded, size=size, mode="nearest")


def reliable_depth(d_cond, m, m_sigma):
    """Keep conditioned depth where both the validity and certainty masks are set."""
    d_cond = np.asarray(d_cond, dtype=np.float64)
    m = as_mask(m, d_cond.shape)
    m_sigma = as_mask(m_sigma, d_cond.shape, name="certainty mask")
    keep = m & m_sigma
    if not keep.any():
        raise EmptyReliableSet("no pixel is both observed and certain")
    return np.where(keep, d_cond, 0.0), keep


def fit_scale_shift(d_rel, mu_hat, support) -> ScaleShiftFit:
    """Least-squares ``a, b`` minimizing ``sum_support (d_rel - (a mu + b))^2``."""
    d_rel = np.asarray(d_rel, dtype=np.float64)
    mu_hat = np.asarray(mu_hat, dtype=np.float64)
    if d_rel.shape != mu_hat.shape:
        raise DimensionMismatch(f"{d_rel.shape} vs {mu_hat.shape}")
    support = as_mask(support, d_rel.shape)
    y = d_rel[support]
    x = mu_hat[support]
    if x.size < 2:
        raise SingularFit("scale/shift fit needs at least two support pixels")
    xm, ym = x.mean(), y.mean()
    xc = x - xm
    sxx = float(np.dot(xc, xc))
    if sxx <= 1e-12 * max(1.0, float(np.dot(x, x))):
        raise SingularFit("ensemble mean is constant on the fit support")
    a = float(np.dot(xc, y - ym)) / sxx
    b = float(ym - a * xm)
    resid = y - (a * x + b)
    return ScaleShiftFit(a=a, b=b, residual_rms=float(np.sqrt(np.mean(resid ** 2))),
                         support_count=int(x.size))


def _grad_mag(x):
    """Central-difference gradient magnitude with edge replication."""
    p = np.pad(x, [(1, 1), (1, 1)] + [(0, 0)] * (x.ndim - 2), mode="edge")
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    g2 = gx ** 2 + gy ** 2
    if x.ndim == 3:
        g2 = g2.sum(axis=-1)
    return np.sqrt(g2)


def _unit_range(c):
    lo, hi = c.min(), c.max()
    if hi - lo <= 0:
        return np.zeros_like(c)
    return (c - lo) / (hi - lo)


def guidance_features(rgb, d_rel, d_mu, sigma2) -> np.ndarray:
    """Per-pixel guidance vectors, shape ``(H, W, 8)``.

    Channels: R, G, B, RGB gradient magnitude, scaled mean depth, its
    gradient magnitude, ensemble variance, certainty bit (``d_rel > 0``).
    Each channel is rescaled to [0, 1] over the image (constant -> 0),
    which makes the features invariant to affine changes of depth units.
    """
    d_rel = np.asarray(d_rel, dtype=np.float64)
    rgb = as_rgb(rgb, d_rel.shape)
    d_mu = np.asarray(d_mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if d_mu.shape != d_rel.shape or sigma2.shape != d_rel.shape:
        raise DimensionMismatch("guidance inputs must share one shape")
    chans = [rgb[..., 0], rgb[..., 1], rgb[..., 2], _grad_mag(rgb),
             d_mu, _grad_mag(d_mu), sigma2, (d_rel > 0).astype(np.float64)]
    return np.stack([_unit_range(c) for c in chans], axis=-1)


def _shifted(a, dy, dx, fill=0.0):
    """``out[i, j] = a[i + dy, j + dx]``, ``fill`` outside the grid."""
    h, w = a.shape[:2]
    out = np.full_like(a, fill)
    ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
    xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
    out[yd, xd] = a[ys, xs]
    return out


def blend_weights(sigma2, eps: float, gamma_max: float) -> np.ndarray:
    """Uncertainty-adaptive blend ``gamma_max * min(1, sigma2 / eps)``."""
    return gamma_max * np.minimum(1.0, np.asarray(sigma2) / eps)


def mspn_step(state: RefineState, g, window: int, sigma2, bandwidth: float = 0.5,
              gamma_max: float = 0.3, eps: float = 0.01) -> RefineState:
    """One masked spatial propagation step (Jacobi update from the pre-step state).

    With ``a_pq = exp(-|g_p - g_q|^2 / h^2)`` over masked-in ``q`` in the
    window around ``p``:

    * unmasked ``p`` with at least one masked-in neighbour takes the
      ``a``-weighted mean of their depths and joins the mask;
    * masked-in ``p`` moves toward that mean (which includes ``p``) by
      ``gamma_p = gamma_max * min(1, sigma2_p / eps)``.
    """
    if window < 3 or window % 2 == 0:
        raise InvalidConfig("window must be odd and >= 3")
    depth = np.asarray(state.depth, dtype=np.float64)
    mask = np.asarray(state.mask, dtype=bool)
    g = np.asarray(g, dtype=np.float64)
    r = window // 2
    inv_h2 = 1.0 / bandwidth ** 2
    dm = np.where(mask, depth, 0.0)
    mf = mask.astype(np.float64)
    num = np.zeros_like(depth)
    den = np.zeros_like(depth)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            mq = _shifted(mf, dy, dx)
            if not mq.any():
                continue
            diff = g - _shifted(g, dy, dx)
            # channel by channel, so the summation order is fixed
            d2 = diff[..., 0] ** 2
            for k in range(1, g.shape[-1]):
                d2 += diff[..., k] ** 2
            alpha = np.exp(-d2 * inv_h2) * mq
            num += alpha * _shifted(dm, dy, dx)
            den += alpha
    has = den > 0
    avg = np.divide(num, den, out=np.zeros_like(num), where=has)
    gamma = blend_weights(sigma2, eps, gamma_max)
    new_depth = np.where(mask, (1.0 - gamma) * depth + gamma * avg, np.where(has, avg, 0.0))
    new_mask = mask | has
    return RefineState(depth=np.where(new_mask, new_depth, 0.0), mask=new_mask,
                       iteration=state.iteration + 1)


def propagate(d0, m0, g, sigma2, cfg: RefineConfig) -> RefineState:
    """``cfg.iterations`` rounds, each running every window of the schedule in turn."""
    state = RefineState(depth=np.where(m0, d0, 0.0), mask=np.asarray(m0, dtype=bool))
    for _ in range(cfg.iterations):
        for win in cfg.windows:
            state = mspn_step(state, g, win, sigma2, cfg.bandwidth, cfg.gamma_max, cfg.eps)
    return state


@dataclass(frozen=True)
class RefineResult:
    depth: np.ndarray
    mask: np.ndarray
    reliable_mask: np.ndarray
    certainty: np.ndarray
    d_mu: np.ndarray
    fit: ScaleShiftFit


def refine(d_cond, m, stats, rgb, norm: NormalizationParams | None = None,
           cfg: RefineConfig | None = None, return_details: bool = False):
    """Run stage 2 and return the refined metric depth.

    ``stats`` holds the normalized ensemble mean/variance.  ``d_cond`` is
    in scene units, or normalized when ``norm`` is given, in which case it
    is mapped back first.  The scale/shift fit then regresses scene-unit
    depth on the normalized mean.  The opening treats unobserved pixels
    as "don't care" (set) so isolated sparse measurements survive it.
    Pixels still unreached after the last iteration take the scaled mean
    depth.
    """
    cfg = cfg or RefineConfig()
    if norm is not None:
        d_cond = np.asarray(d_cond, dtype=np.float64)
        m = as_mask(m, d_cond.shape)
        d_cond = np.where(m, denormalize_depth(d_cond, norm), 0.0)
    d_cond = as_depth(d_cond, "conditioning depth")
    m = as_mask(m, d_cond.shape) & (d_cond > 0)
    sigma2 = np.asarray(stats.sigma2_hat, dtype=np.float64)
    mu = np.asarray(stats.mu_hat, dtype=np.float64)
    if sigma2.shape != d_cond.shape or mu.shape != d_cond.shape:
        raise DimensionMismatch("ensemble statistics do not match the depth map")

    certain = certainty_mask(sigma2, cfg.eps)
    certain = morphological_open(certain | ~m, cfg.open_radius) & m
    d_rel, m0 = reliable_depth(d_cond, m, certain)
    fit = fit_scale_shift(d_rel, mu, m0)
    d_mu = fit.apply(mu)
    sig_for_guidance = sigma2 if cfg.use_sigma2 else np.zeros_like(sigma2)
    g = guidance_features(rgb, d_rel, d_mu, sig_for_guidance)
    sig_for_blend = sigma2 if cfg.use_sigma2 else np.full_like(sigma2, cfg.eps)
    state = propagate(d_rel, m0, g, sig_for_blend, cfg)
    depth = state.depth
    if cfg.fill_remaining and not state.mask.all():
        depth = np.where(state.mask, depth, d_mu)
    if return_details:
        return RefineResult(depth=depth, mask=state.mask, reliable_mask=m0, certainty=certain,
                            d_mu=d_mu, fit=fit)
    return depth
