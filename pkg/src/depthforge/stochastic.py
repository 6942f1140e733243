"""Stage 1: stochastic reconstruction of a conditioned depth field.

The conditioned posterior over dense (normalized) depth is a Gaussian
Markov random field on the 4-connected pixel grid:

* prior: ``sum_pq w_pq (x_p - x_q)^2`` with image-guided edge weights
  ``w_pq = lam * exp(-beta * |I_p - I_q|^2)``;
* likelihood: ``sum_p tau * m_p * rho_p * (x_p - d_p)^2`` where ``rho``
  are robust weights from iteratively reweighted least squares with a
  Student-t style penalty.  Observations that disagree with their
  surroundings end up with small ``rho``, so the prior dominates there
  and the posterior widens exactly as it does for missing pixels.

Samples are drawn exactly by perturb-and-MAP and reduced to a per-pixel
mean and (population) variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .core import as_mask, as_rgb
from .errors import DimensionMismatch, EmptyConditioning, EmptyEnsemble, InvalidConfig
from .solver import conjugate_gradient


@dataclass(frozen=True)
class GmrfParams:
    lam: float = 5.0
    beta: float = 100.0
    tau: float = 400.0
    nu: float = 4.0
    scale: float = 0.0015
    init_precision: float = 30.0
    weight_floor: float = 0.01
    irls_iters: int = 10
    irls_tol: float = 1e-4
    cg_tol: float = 1e-8
    cg_max_iters: int | None = None

    def __post_init__(self):
        if self.lam <= 0 or self.tau <= 0 or self.nu <= 0 or self.scale <= 0:
            raise InvalidConfig("lam, tau, nu and scale must be positive")
        if self.beta < 0 or self.init_precision <= 0:
            raise InvalidConfig("beta must be >= 0 and init_precision > 0")
        if not 0 <= self.weight_floor <= 1:
            raise InvalidConfig("weight_floor must lie in [0, 1]")
        if self.irls_iters < 0 or self.irls_tol < 0:
            raise InvalidConfig("irls_iters and irls_tol must be non-negative")


@dataclass(frozen=True)
class GmrfModel:
    """Assembled posterior.  Arrays are grids shaped like the image.

    ``w_right[i, j]`` couples ``(i, j)-(i, j+1)``; ``w_down[i, j]``
    couples ``(i, j)-(i+1, j)``.
    """

    w_right: np.ndarray
    w_down: np.ndarray
    obs_mask: np.ndarray
    obs_values: np.ndarray
    rho: np.ndarray
    params: GmrfParams
    irls_trace: tuple = field(default=(), compare=False)

    @property
    def shape(self):
        return self.obs_mask.shape

    @property
    def obs_precision(self) -> np.ndarray:
        return self.params.tau * self.obs_mask * self.rho

    def precision(self, obs_precision=None) -> sp.csr_matrix:
        """Sparse ``Q = L(w) + diag(obs_precision)``."""
        h, w = self.shape
        n = h * w
        idx = np.arange(n).reshape(h, w)
        p = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
        q = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
        wt = np.concatenate([self.w_right.ravel(), self.w_down.ravel()])
        tp = self.obs_precision if obs_precision is None else obs_precision
        deg = np.bincount(p, wt, n) + np.bincount(q, wt, n) + np.ravel(tp)
        rows = np.concatenate([p, q, idx.ravel()])
        cols = np.concatenate([q, p, idx.ravel()])
        vals = np.concatenate([-wt, -wt, deg])
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    def edge_transpose(self, v_right, v_down) -> np.ndarray:
        """Apply the incidence transpose: push per-edge values onto pixels (+p, -q)."""
        out = np.zeros(self.shape + np.shape(v_right)[2:])
        out[:, :-1] += v_right
        out[:, 1:] -= v_right
        out[:-1, :] += v_down
        out[1:, :] -= v_down
        return out

    def solve(self, rhs, x0=None, obs_precision=None) -> np.ndarray:
        """``Q^{-1} rhs`` for a grid or a stack of grids ``(H, W, k)``."""
        rhs = np.asarray(rhs, dtype=np.float64)
        h, w = self.shape
        flat = rhs.reshape(h * w, -1)
        x0f = None if x0 is None else np.asarray(x0).reshape(h * w, -1)
        x = conjugate_gradient(self.precision(obs_precision), flat, tol=self.params.cg_tol,
                               max_iters=self.params.cg_max_iters, x0=x0f)
        return x.reshape(rhs.shape)

    def objective(self, x) -> float:
        """Robust energy minimized by :func:`robust_reweight`."""
        x = np.asarray(x)
        pr = self.params
        prior = np.sum(self.w_right * np.diff(x, axis=1) ** 2) + np.sum(self.w_down * np.diff(x, axis=0) ** 2)
        r2 = (self.obs_values - x) ** 2
        c = pr.nu * pr.scale ** 2
        data = np.sum(pr.tau * self.obs_mask * c * np.log1p(r2 / c))
        return float(prior + data)


@dataclass(frozen=True)
class EnsembleStats:
    mu_hat: np.ndarray
    sigma2_hat: np.ndarray
    n_samples: int


def edge_weights(rgb, lam: float, beta: float, floor: float = 0.0):
    """Image-guided 4-neighbour weights ``lam * max(floor, exp(-beta * |I_p - I_q|^2))``.

    The relative floor keeps regions fenced off by strong image edges
    coupled to the rest of the grid, so the prior stays proper there.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    dr = np.sum(np.diff(rgb, axis=1) ** 2, axis=-1)
    dd = np.sum(np.diff(rgb, axis=0) ** 2, axis=-1)
    return (lam * np.maximum(floor, np.exp(-beta * dr)),
            lam * np.maximum(floor, np.exp(-beta * dd)))


def build_gmrf(rgb, d_cond, m, params: GmrfParams | None = None) -> GmrfModel:
    """Assemble the conditioned posterior from an RGB image and normalized depth.

    Only pixels in ``m`` are observed; their robust weights start at 1.
    """
    params = params or GmrfParams()
    d_cond = np.asarray(d_cond, dtype=np.float64)
    if d_cond.ndim != 2:
        raise DimensionMismatch(f"conditioning depth must be 2-D, got {d_cond.shape}")
    rgb = as_rgb(rgb, d_cond.shape)
    m = as_mask(m, d_cond.shape)
    if not m.any():
        raise EmptyConditioning("conditioning mask selects no pixels")
    if not np.all(np.isfinite(d_cond[m])):
        raise DimensionMismatch("conditioning depth has non-finite observed values")
    w_right, w_down = edge_weights(rgb, params.lam, params.beta, params.weight_floor)
    return GmrfModel(w_right=w_right, w_down=w_down, obs_mask=m.astype(np.float64),
                     obs_values=np.where(m, d_cond, 0.0), rho=np.ones(d_cond.shape), params=params)


def posterior_mean_exact(model: GmrfModel, x0=None) -> np.ndarray:
    """MAP / posterior mean: ``Q mu = diag(obs_precision) d``."""
    return model.solve(model.obs_precision * model.obs_values, x0=x0)


def posterior_variance_exact(model: GmrfModel, pixels=None, batch: int = 256) -> np.ndarray:
    """Marginal variances ``e_p^T Q^{-1} e_p``, one SPD solve per pixel.

    ``pixels`` is a sequence of ``(row, col)``; ``None`` means every pixel
    and the result is returned as a grid.  Meant for small grids.
    """
    h, w = model.shape
    n = h * w
    flat = np.arange(n) if pixels is None else np.array([r * w + c for r, c in pixels], dtype=int)
    Q = model.precision()
    out = np.empty(flat.size)
    for start in range(0, flat.size, batch):
        sel = flat[start:start + batch]
        E = np.zeros((n, sel.size))
        E[sel, np.arange(sel.size)] = 1.0
        X = conjugate_gradient(Q, E, tol=model.params.cg_tol, max_iters=model.params.cg_max_iters)
        out[start:start + sel.size] = X[sel, np.arange(sel.size)]
    return out.reshape(h, w) if pixels is None else out


def _member_rng(seed: int, index: int | None = None):
    entropy = [int(seed)] if index is None else [int(seed), int(index)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _draw_noise(model: GmrfModel, rng):
    h, w = model.shape
    z_right = rng.standard_normal((h, w - 1))
    z_down = rng.standard_normal((h - 1, w))
    z_obs = rng.standard_normal((h, w))
    return z_right, z_down, z_obs


def perturbed_rhs(model: GmrfModel, z_right, z_down, z_obs) -> np.ndarray:
    """Right-hand side of the perturbed MAP problem.

    Edge residual targets ``eps_pq ~ N(0, 1/w_pq)`` and observation targets
    ``d_p + eps_p`` with ``eps_p ~ N(0, 1/obs_precision_p)``; the products
    ``w * eps`` are formed as ``sqrt(w) * z`` so zero weights stay finite.
    The rhs is then distributed as ``N(T d, Q)``.
    """
    t = model.obs_precision
    extra = np.ndim(z_obs) - 2
    expand = (lambda a: a[(...,) + (None,) * extra]) if extra else (lambda a: a)
    prior_part = model.edge_transpose(expand(np.sqrt(model.w_right)) * z_right,
                                      expand(np.sqrt(model.w_down)) * z_down)
    return prior_part + expand(t * model.obs_values) + expand(np.sqrt(t)) * z_obs


def sample_posterior(model: GmrfModel, seed: int, noise=None) -> np.ndarray:
    """One exact posterior sample by perturb-and-MAP.

    ``noise`` optionally supplies the standard-normal draws
    ``(z_right, z_down, z_obs)`` directly; all zeros reproduces the MAP.
    """
    if noise is None:
        noise = _draw_noise(model, _member_rng(seed))
    return model.solve(perturbed_rhs(model, *noise))


def sample_posterior_batch(model: GmrfModel, seeds, x0=None) -> np.ndarray:
    """Samples for several seeds, solved together; returns ``(k, H, W)``.

    Each member uses the same noise stream :func:`sample_posterior` would
    draw for its seed, so results match one-at-a-time sampling.
    """
    draws = [_draw_noise(model, _member_rng(s)) for s in seeds]
    z_right = np.stack([d[0] for d in draws], axis=-1)
    z_down = np.stack([d[1] for d in draws], axis=-1)
    z_obs = np.stack([d[2] for d in draws], axis=-1)
    rhs = perturbed_rhs(model, z_right, z_down, z_obs)
    if x0 is not None:
        x0 = np.repeat(np.asarray(x0)[..., None], len(draws), axis=-1)
    x = model.solve(rhs, x0=x0)
    return np.moveaxis(x, -1, 0)


def member_seed(master: int, index: int) -> int:
    """Deterministic per-member seed derived from the master seed."""
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1, dtype=np.uint32)[0])


def robust_weights(residual, nu: float, scale: float) -> np.ndarray:
    return nu / (nu + (np.asarray(residual) / scale) ** 2)


def robust_reweight(model: GmrfModel, max_iters: int | None = None, tol: float | None = None,
                    x_init=None) -> GmrfModel:
    """IRLS on the robust energy ``prior + tau * sum_p c log(1 + r_p^2 / c)``, ``c = nu s^2``.

    Iteration starts from ``x_init`` or, by default, from a heavily
    smoothed fit in which every observation gets precision
    ``init_precision`` instead of ``tau``.  Starting from the
    interpolating fit would hide outliers, since with large ``tau`` every
    observation is matched almost exactly.  Each step sets
    ``rho = nu / (nu + r^2 / s^2)`` from the current residuals and
    re-solves for the posterior mean; this is a majorize-minimize scheme,
    so the energy never increases (the values are kept in
    ``irls_trace``).  Stops after ``max_iters`` or once ``max |d rho| < tol``.
    """
    pr = model.params
    max_iters = pr.irls_iters if max_iters is None else max_iters
    tol = pr.irls_tol if tol is None else tol
    if max_iters == 0:
        return model
    m = model.obs_mask
    if x_init is None:
        x = model.solve(pr.init_precision * m * model.obs_values, obs_precision=pr.init_precision * m)
    else:
        x = np.asarray(x_init, dtype=np.float64)
    trace = [model.objective(x)]
    rho = model.rho
    for _ in range(max_iters):
        new_rho = np.where(m > 0, robust_weights(model.obs_values - x, pr.nu, pr.scale), 1.0)
        delta = float(np.max(np.abs(new_rho - rho)))
        rho = new_rho
        model = replace(model, rho=rho)
        x = posterior_mean_exact(model, x0=x)
        trace.append(model.objective(x))
        if delta < tol:
            break
    return replace(model, irls_trace=tuple(trace))


def ensemble_stats(samples) -> EnsembleStats:
    """Per-pixel mean and population variance (divide by N) over the samples."""
    if len(samples) == 0:
        raise EmptyEnsemble("need at least one sample")
    shapes = {np.shape(s) for s in samples}
    if len(shapes) != 1:
        raise DimensionMismatch(f"samples have differing shapes {sorted(shapes)}")
    stack = np.asarray(samples, dtype=np.float64)
    mu = stack.mean(axis=0)
    var = np.mean((stack - mu) ** 2, axis=0)
    return EnsembleStats(mu_hat=mu, sigma2_hat=var, n_samples=stack.shape[0])


def estimate(rgb, d_cond, m, n_samples: int = 10, seed: int = 0, params: GmrfParams | None = None,
             return_model: bool = False):
    """Build, robustly reweight, sample ``n_samples`` members and reduce them.

    ``d_cond`` must already be normalized.  Member ``i`` draws with
    ``member_seed(seed, i)``.
    """
    if n_samples < 1:
        raise EmptyEnsemble("n_samples must be >= 1")
    model = robust_reweight(build_gmrf(rgb, d_cond, m, params))
    mean = posterior_mean_exact(model)
    samples = sample_posterior_batch(model, [member_seed(seed, i) for i in range(n_samples)], x0=mean)
    stats = ensemble_stats(list(samples))
    return (stats, model) if return_model else stats
