"""Run configuration: every tunable in one flat, key=value serializable record."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from .errors import InvalidConfig
from .protocols import ProtocolConfig
from .refine import RefineConfig
from .stochastic import GmrfParams
from .synth import SceneConfig, parse_dims, read_kv_file


def parse_seeds(text: str) -> tuple:
    """``"0..9"`` (inclusive), ``"3,5,8"``, a mix of both, or empty."""
    text = str(text).strip()
    if not text:
        return ()
    out = []
    for part in text.split(","):
        part = part.strip()
        try:
            if ".." in part:
                lo, hi = (int(v) for v in part.split(".."))
                if hi < lo:
                    raise InvalidConfig(f"empty seed range {part!r}")
                out.extend(range(lo, hi + 1))
            elif part:
                out.append(int(part))
        except ValueError as e:
            raise InvalidConfig(f"bad seed list entry {part!r}") from e
    return tuple(out)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return "" if v is None else str(v)


@dataclass(frozen=True)
class RunConfig:
    # stage 1
    n_samples: int = 10
    lam: float = GmrfParams.lam
    beta: float = GmrfParams.beta
    tau: float = GmrfParams.tau
    nu: float = GmrfParams.nu
    scale: float = GmrfParams.scale
    init_precision: float = GmrfParams.init_precision
    weight_floor: float = GmrfParams.weight_floor
    irls_iters: int = GmrfParams.irls_iters
    irls_tol: float = GmrfParams.irls_tol
    cg_tol: float = GmrfParams.cg_tol
    # stage 2
    eps: float = 0.01
    iterations: int = 6
    windows: tuple = (13, 3)
    open_radius: int = 1
    bandwidth: float = 0.5
    gamma_max: float = 0.3
    use_sigma2: bool = True
    # input handling
    max_depth: float | None = None
    quantiles: tuple | None = None
    # scenes and protocols
    dims: str = "64x64"
    objects: tuple = (1, 8)
    d_min: float = 1.0
    d_max: float = 5.0
    sparse_count: int = 500
    noise_ratios: tuple = (0.05, 0.10, 0.20)
    noise_sigma: float | None = None
    h2i_bins: tuple = ((0.01, 0.1), (0.1, 0.2), (0.2, 0.3), (0.3, 0.4), (0.4, 0.5))
    coverage: float = 0.5
    seeds: tuple = tuple(range(10))
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvalidConfig("n_samples must be >= 1")
        if self.sparse_count < 1:
            raise InvalidConfig("sparse_count must be >= 1")
        if any(not 0 <= r <= 1 for r in self.noise_ratios):
            raise InvalidConfig("noise ratios must lie in [0, 1]")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise InvalidConfig("noise_sigma must be non-negative")
        if self.max_depth is not None and self.max_depth <= 0:
            raise InvalidConfig("max_depth must be positive")
        if self.quantiles is not None and not (len(self.quantiles) == 2 and 0 <= self.quantiles[0] < self.quantiles[1] <= 1):
            raise InvalidConfig("quantiles must be 'lo,hi' with 0 <= lo < hi <= 1")
        for lo, hi in self.h2i_bins:
            if not 0 <= lo <= hi <= 1:
                raise InvalidConfig(f"bad H2I bin ({lo}, {hi})")
        # build every derived config once so range errors surface here
        self.gmrf_params()
        self.refine_config()
        self.scene_config()

    def gmrf_params(self) -> GmrfParams:
        return GmrfParams(lam=self.lam, beta=self.beta, tau=self.tau, nu=self.nu, scale=self.scale,
                          init_precision=self.init_precision, weight_floor=self.weight_floor,
                          irls_iters=self.irls_iters, irls_tol=self.irls_tol, cg_tol=self.cg_tol)

    def refine_config(self) -> RefineConfig:
        return RefineConfig(eps=self.eps, open_radius=self.open_radius, iterations=self.iterations,
                            windows=tuple(self.windows), bandwidth=self.bandwidth,
                            gamma_max=self.gamma_max, use_sigma2=self.use_sigma2)

    def scene_config(self) -> SceneConfig:
        h, w = parse_dims(self.dims)
        return SceneConfig(height=h, width=w, min_objects=self.objects[0], max_objects=self.objects[1],
                           d_min=self.d_min, d_max=self.d_max).validate()

    def protocol_config(self) -> ProtocolConfig:
        return ProtocolConfig(scene=self.scene_config(), params=self.gmrf_params(),
                              refine=self.refine_config(), n_samples=self.n_samples,
                              sparse_count=self.sparse_count, noise_sigma=self.noise_sigma)

    def to_kv(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if k == "h2i_bins":
                v = ";".join(f"{lo},{hi}" for lo, hi in v)
            elif k == "seeds":
                v = ",".join(str(s) for s in v)
            else:
                v = _fmt(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, values: dict) -> "RunConfig":
        """Apply ``key -> string`` overrides (config file entries or CLI flags)."""
        kinds = {f.name: f for f in fields(self)}
        updates = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise InvalidConfig(f"unknown config key {key!r}")
            updates[key] = _parse_field(key, raw, getattr(self, key))
        try:
            return replace(self, **updates)
        except (TypeError, ValueError) as e:
            if isinstance(e, InvalidConfig):
                raise
            raise InvalidConfig(str(e)) from e


def _parse_field(key: str, raw, current):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if key == "seeds":
            return parse_seeds(raw)
        if key == "h2i_bins":
            return tuple(tuple(float(v) for v in b.split(",")) for b in raw.split(";") if b.strip())
        if key in ("windows", "objects"):
            return tuple(int(v) for v in raw.split(","))
        if key in ("noise_ratios", "quantiles"):
            return tuple(float(v) for v in raw.split(",")) if raw else None
        if key in ("max_depth", "noise_sigma"):
            return float(raw) if raw and raw.lower() != "none" else None
        if key == "dims":
            parse_dims(raw)
            return raw
        if isinstance(current, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        return float(raw)
    except ValueError as e:
        raise InvalidConfig(f"bad value for {key!r}: {raw!r}") from e


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the key=value file, then explicit overrides."""
    cfg = RunConfig()
    if path is not None:
        cfg = cfg.with_overrides(read_kv_file(path))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg
