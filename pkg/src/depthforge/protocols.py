"""End-to-end pipeline, baselines and the synthetic evaluation protocols.

A trial generates one scene, corrupts it, runs the two stages and keeps
every output needed for evaluation.  Seeds: the scene uses the trial
seed, the corruption and the ensemble use seeds derived from it, so a
trial is fully determined by ``(seed, condition, config)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import NormalizationParams, as_depth, as_mask, normalize_depth
from .errors import EmptyMask, InvalidConfig
from .metrics import EvalReport, evaluate
from .refine import RefineConfig, RefineResult, ScaleShiftFit, fit_scale_shift, guidance_features, propagate, refine
from .stochastic import EnsembleStats, GmrfParams, estimate, member_seed
from .synth import CorruptionSpec, SceneConfig, corrupt, generate_scene

NOISE_RATIOS = (0.05, 0.10, 0.20)
H2I_BINS = ((0.01, 0.1), (0.1, 0.2), (0.2, 0.3), (0.3, 0.4), (0.4, 0.5))
N_SWEEP = (1, 2, 5, 10, 20, 50)
EPS_SWEEP = (0.001, 0.003, 0.01, 0.03, 0.1)
# predictions are clamped here before evaluation; depth is positive by definition
MIN_DEPTH = 1e-3


@dataclass(frozen=True)
class PipelineResult:
    stats: EnsembleStats
    norm: NormalizationParams
    diff_only: np.ndarray
    diff_fit: ScaleShiftFit
    refined: RefineResult | None = None

    @property
    def depth(self) -> np.ndarray:
        return self.diff_only if self.refined is None else self.refined.depth


def run_pipeline(rgb, d_cond, m=None, n_samples: int = 10, seed: int = 0, params: GmrfParams | None = None,
                 refine_cfg: RefineConfig | None = None, mode: str = "full",
                 quantiles: tuple | None = None) -> PipelineResult:
    """Normalize, estimate, then refine (``mode="full"``) or stop at the rescaled mean.

    The rescaled mean (``diff_only``) is always produced: the ensemble
    mean mapped to scene units by a least-squares fit over all
    conditioned pixels, with no masking or propagation.
    """
    if mode not in ("full", "diff-only"):
        raise InvalidConfig(f"unknown pipeline mode {mode!r}")
    d_cond = as_depth(d_cond, "conditioning depth")
    valid = d_cond > 0
    m = valid if m is None else as_mask(m, d_cond.shape) & valid
    d_norm, norm = normalize_depth(d_cond, m, quantiles)
    stats = estimate(rgb, d_norm, m, n_samples=n_samples, seed=seed, params=params)
    diff_fit = fit_scale_shift(np.where(m, d_cond, 0.0), stats.mu_hat, m)
    diff_only = diff_fit.apply(stats.mu_hat)
    refined = None
    if mode == "full":
        refined = refine(d_cond, m, stats, rgb, cfg=refine_cfg, return_details=True)
    return PipelineResult(stats=stats, norm=norm, diff_only=diff_only, diff_fit=diff_fit, refined=refined)


def raw_completion(d_cond, m, rgb, cfg: RefineConfig | None = None) -> np.ndarray:
    """Conventional completion of the corrupted input, with no uncertainty.

    Every conditioned pixel seeds the same propagation as stage 2, guided
    by the image and the validity bit only (the depth and variance
    channels are blank), and seeds are never blended.  Pixels left
    unreached take the mean conditioned depth.
    """
    cfg = cfg or RefineConfig()
    d_cond = as_depth(d_cond, "conditioning depth")
    m = as_mask(m, d_cond.shape) & (d_cond > 0)
    if not m.any():
        raise EmptyMask("raw completion needs at least one conditioned pixel")
    blank = np.zeros(d_cond.shape)
    seeds = np.where(m, d_cond, 0.0)
    g = guidance_features(rgb, seeds, blank, blank)
    state = propagate(seeds, m, g, blank, cfg)
    return np.where(state.mask, state.depth, float(d_cond[m].mean()))


def vertical_prior(shape) -> np.ndarray:
    """Relative depth from image position alone: rows higher up read as farther.

    Values span [-1, 1] from the bottom row to the top row.
    """
    h, w = shape
    rows = np.linspace(1.0, -1.0, h) if h > 1 else np.zeros(1)
    return np.repeat(rows[:, None], w, axis=1)


def prior_only(d_cond, m) -> np.ndarray:
    """Reconstruction that uses no depth conditioning in the estimate itself.

    The relative map from :func:`vertical_prior` is only rescaled to scene
    units by the least-squares fit over the conditioned pixels.
    """
    d_cond = as_depth(d_cond, "conditioning depth")
    m = as_mask(m, d_cond.shape) & (d_cond > 0)
    rel = vertical_prior(d_cond.shape)
    return fit_scale_shift(np.where(m, d_cond, 0.0), rel, m).apply(rel)


def trial_seeds(seed: int):
    """``(corruption seed, ensemble seed)`` derived from a trial seed."""
    return member_seed(seed, 1), member_seed(seed, 2)


@dataclass(frozen=True)
class ProtocolConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    params: GmrfParams = field(default_factory=GmrfParams)
    refine: RefineConfig = field(default_factory=RefineConfig)
    n_samples: int = 10
    sparse_count: int = 500
    noise_sigma: float | None = None
    ks: tuple = (1.25,)


@dataclass(frozen=True)
class Trial:
    protocol: str
    seed: int
    condition: object
    d_true: np.ndarray
    eval_mask: np.ndarray
    outputs: dict

    def report(self, name: str, ks=(1.25,)) -> EvalReport:
        d = np.maximum(self.outputs[name], MIN_DEPTH)
        return evaluate(d, self.d_true, self.eval_mask, ks)


def noisy_completion_trial(seed: int, ratio: float, cfg: ProtocolConfig | None = None,
                           ablation: bool = False) -> Trial:
    """Sparse samples with a fraction made noisy; evaluated on every pixel.

    Outputs: ``refined``, ``diff_only``, ``raw`` (conventional completion)
    and, with ``ablation``, ``no_sigma2`` (stage 2 without the variance).
    """
    cfg = cfg or ProtocolConfig()
    scene = generate_scene(seed, cfg.scene)
    c_seed, e_seed = trial_seeds(seed)
    spec = CorruptionSpec(mode="sparse+noise", noise_ratio=ratio, noise_sigma=cfg.noise_sigma,
                          sparse_count=cfg.sparse_count, seed=c_seed)
    d_cond, _ = corrupt(scene.depth_true, spec)
    m = d_cond > 0
    res = run_pipeline(scene.rgb, d_cond, m, cfg.n_samples, e_seed, cfg.params, cfg.refine)
    outputs = {"refined": res.depth, "diff_only": res.diff_only,
               "raw": raw_completion(d_cond, m, scene.rgb, cfg.refine)}
    if ablation:
        no_sig = replace(cfg.refine, use_sigma2=False)
        outputs["no_sigma2"] = refine(d_cond, m, res.stats, scene.rgb, cfg=no_sig)
    return Trial("noisy-completion", seed, ratio, scene.depth_true,
                 np.ones(m.shape, dtype=bool), outputs)


def inpainting_trial(seed: int, h2i, cfg: ProtocolConfig | None = None) -> Trial:
    """Dense depth with holes; evaluated on the removed pixels only.

    Outputs: ``refined``, ``diff_only`` and ``prior_only``.
    """
    cfg = cfg or ProtocolConfig()
    scene = generate_scene(seed, cfg.scene)
    c_seed, e_seed = trial_seeds(seed)
    spec = CorruptionSpec(mode="holes", h2i_range=tuple(h2i), seed=c_seed)
    d_cond, removed = corrupt(scene.depth_true, spec)
    m = d_cond > 0
    res = run_pipeline(scene.rgb, d_cond, m, cfg.n_samples, e_seed, cfg.params, cfg.refine)
    outputs = {"refined": res.depth, "diff_only": res.diff_only, "prior_only": prior_only(d_cond, m)}
    return Trial("inpainting", seed, tuple(h2i), scene.depth_true, removed, outputs)


def n_samples_sweep(seed: int, ratio: float = 0.10, values=N_SWEEP, cfg: ProtocolConfig | None = None):
    """Noisy-completion pipeline output for each ensemble size; ``{N: (depth, sigma2)}``."""
    cfg = cfg or ProtocolConfig()
    scene = generate_scene(seed, cfg.scene)
    c_seed, e_seed = trial_seeds(seed)
    spec = CorruptionSpec(mode="sparse+noise", noise_ratio=ratio, noise_sigma=cfg.noise_sigma,
                          sparse_count=cfg.sparse_count, seed=c_seed)
    d_cond, _ = corrupt(scene.depth_true, spec)
    out = {}
    for n in values:
        res = run_pipeline(scene.rgb, d_cond, d_cond > 0, n, e_seed, cfg.params, cfg.refine)
        out[n] = (res.depth, res.stats.sigma2_hat)
    return scene.depth_true, out


def epsilon_sweep(seed: int, ratio: float = 0.10, values=EPS_SWEEP, cfg: ProtocolConfig | None = None):
    """Stage 2 rerun for each threshold on one shared ensemble; ``{eps: (depth, certainty)}``."""
    cfg = cfg or ProtocolConfig()
    scene = generate_scene(seed, cfg.scene)
    c_seed, e_seed = trial_seeds(seed)
    spec = CorruptionSpec(mode="sparse+noise", noise_ratio=ratio, noise_sigma=cfg.noise_sigma,
                          sparse_count=cfg.sparse_count, seed=c_seed)
    d_cond, _ = corrupt(scene.depth_true, spec)
    m = d_cond > 0
    d_norm, _ = normalize_depth(d_cond, m)
    stats = estimate(scene.rgb, d_norm, m, cfg.n_samples, e_seed, cfg.params)
    out = {}
    for eps in values:
        r = refine(d_cond, m, stats, scene.rgb, cfg=replace(cfg.refine, eps=eps), return_details=True)
        out[eps] = (r.depth, r.certainty)
    return scene.depth_true, out
