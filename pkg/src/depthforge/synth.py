"""Procedural RGB-D scenes and the corruption protocols used in experiments.

Scenes are a pinhole camera at the origin looking down +z (y pointing
down) at a floor plane and a back wall, populated with boxes and spheres
resting on the floor.  Depth is the z coordinate of the first ray hit,
computed in closed form, so every depth value is exact.  Each surface
gets its own albedo from a palette, which makes every depth
discontinuity coincide with an albedo change in the RGB image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .core import as_depth
from .errors import InfeasibleRange, InvalidConfig, InvalidRange, TooFewValidPixels

PALETTE = (
    (0.85, 0.82, 0.75),  # back wall
    (0.45, 0.33, 0.22),  # floor
    (0.90, 0.20, 0.15),
    (0.15, 0.55, 0.90),
    (0.20, 0.80, 0.30),
    (0.95, 0.80, 0.10),
    (0.60, 0.25, 0.75),
    (0.10, 0.10, 0.10),
    (0.95, 0.50, 0.70),
    (0.10, 0.70, 0.70),
    (1.00, 1.00, 1.00),
    (0.50, 0.50, 0.20),
)


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    min_objects: int = 1
    max_objects: int = 8
    d_min: float = 1.0
    d_max: float = 5.0
    fov_deg: float = 60.0
    ambient: float = 0.35
    light: tuple = (-0.4, -0.8, -0.45)
    palette: tuple = PALETTE

    def validate(self) -> "SceneConfig":
        if self.height < 16 or self.width < 16:
            raise InvalidConfig(f"scene dims must be >= 16x16, got {self.height}x{self.width}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise InvalidConfig("object count range must satisfy 0 <= min <= max")
        if self.max_objects > len(self.palette) - 2:
            raise InvalidConfig(f"at most {len(self.palette) - 2} objects fit the albedo palette")
        if not 0 < self.d_min < self.d_max:
            raise InvalidConfig("depth range must satisfy 0 < d_min < d_max")
        if not 10.0 <= self.fov_deg <= 120.0:
            raise InvalidConfig("fov_deg must lie in [10, 120]")
        if not 0.0 <= self.ambient <= 1.0:
            raise InvalidConfig("ambient must lie in [0, 1]")
        pal = np.asarray(self.palette, dtype=float)
        if pal.ndim != 2 or pal.shape[1] != 3 or pal.min() < 0 or pal.max() > 1:
            raise InvalidConfig("palette must be a list of RGB triples in [0, 1]")
        return self


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    if key == "dims":
        return raw
    if isinstance(default, tuple):
        if key == "palette":
            triples = [t for t in raw.split(";") if t.strip()]
            return tuple(tuple(float(v) for v in t.split(",")) for t in triples)
        return tuple(float(v) for v in raw.split(","))
    if isinstance(default, int):
        return int(raw)
    return float(raw)


def parse_dims(text: str) -> tuple[int, int]:
    """Parse ``"HxW"``; raises InvalidConfig for anything else or non-positive sizes."""
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as e:
        raise InvalidConfig(f"dims must look like 64x64, got {text!r}") from e
    if h <= 0 or w <= 0:
        raise InvalidConfig(f"dims must be positive, got {text!r}")
    return h, w


def scene_config_from_mapping(values: dict, base: SceneConfig | None = None) -> SceneConfig:
    """Build a config from ``key -> string`` pairs (key=value file or CLI).

    Recognized keys are the dataclass fields plus ``dims`` (``HxW``) and
    ``objects`` (``lo,hi``).  Unknown keys raise InvalidConfig.
    """
    cfg = base or SceneConfig()
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    updates = {}
    for key, raw in values.items():
        try:
            if key == "dims":
                updates["height"], updates["width"] = parse_dims(str(raw))
            elif key == "objects":
                lo, hi = (int(v) for v in str(raw).split(","))
                updates["min_objects"], updates["max_objects"] = lo, hi
            elif key in known:
                updates[key] = _parse_value(key, str(raw), known[key])
            else:
                raise InvalidConfig(f"unknown scene config key {key!r}")
        except ValueError as e:
            raise InvalidConfig(f"bad value for {key!r}: {raw!r}") from e
    return replace(cfg, **updates).validate()


def read_kv_file(path) -> dict:
    """Read a plain ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        from .errors import IoFailure
        raise IoFailure(f"cannot read config {path}: {e}") from e
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass
class SceneSample:
    rgb: np.ndarray
    depth_true: np.ndarray
    labels: np.ndarray = field(repr=False)
    seed: int = 0


def _camera(cfg: SceneConfig):
    f = (cfg.width / 2.0) / math.tan(math.radians(cfg.fov_deg) / 2.0)
    cx = (cfg.width - 1) / 2.0
    cy = (cfg.height - 1) / 2.0
    u = np.arange(cfg.width, dtype=np.float64)
    v = np.arange(cfg.height, dtype=np.float64)
    xn = np.broadcast_to((u - cx) / f, (cfg.height, cfg.width))
    yn = np.broadcast_to(((v - cy) / f)[:, None], (cfg.height, cfg.width))
    return f, xn, yn


def floor_height(cfg: SceneConfig) -> float:
    """Floor plane offset below the camera; the bottom image row sees it at ``d_min``."""
    f, _, _ = _camera(cfg)
    return cfg.d_min * ((cfg.height - 1) / 2.0) / f


def empty_room_depth(cfg: SceneConfig) -> np.ndarray:
    """Closed-form depth of the bare room: floor where it is nearer than the wall."""
    _, _, yn = _camera(cfg)
    h = floor_height(cfg)
    with np.errstate(divide="ignore"):
        t_floor = np.where(yn > 0, h / np.where(yn > 0, yn, 1.0), np.inf)
    return np.minimum(t_floor, cfg.d_max)


def _hit_box(xn, yn, lo, hi):
    """Slab test for rays (xn, yn, 1) against an axis-aligned box; returns (t, face normal)."""
    dirs = (xn, yn, np.ones_like(xn))
    t_near = np.full(xn.shape, -np.inf)
    t_far = np.full(xn.shape, np.inf)
    normal = np.zeros(xn.shape + (3,))
    for axis in range(3):
        dvec = dirs[axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = lo[axis] / dvec
            t2 = hi[axis] / dvec
        parallel = dvec == 0
        inside = (lo[axis] <= 0) & (0 <= hi[axis])
        t1 = np.where(parallel, -np.inf if inside else np.inf, t1)
        t2 = np.where(parallel, np.inf if inside else -np.inf, t2)
        ta = np.minimum(t1, t2)
        tb = np.maximum(t1, t2)
        entering = ta > t_near
        n_axis = np.zeros(xn.shape + (3,))
        n_axis[..., axis] = np.where(t1 < t2, -1.0, 1.0)
        normal = np.where(entering[..., None], n_axis, normal)
        t_near = np.maximum(t_near, ta)
        t_far = np.minimum(t_far, tb)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf), normal


def _hit_sphere(xn, yn, c, r):
    a = xn * xn + yn * yn + 1.0
    bc = xn * c[0] + yn * c[1] + c[2]
    disc = bc * bc - a * (c[0] ** 2 + c[1] ** 2 + c[2] ** 2 - r * r)
    ok = disc >= 0
    t = (bc - np.sqrt(np.where(ok, disc, 0.0))) / a
    t = np.where(ok & (t > 0), t, np.inf)
    pts = np.stack([xn * t, yn * t, t], axis=-1)
    with np.errstate(invalid="ignore"):
        normal = (pts - np.asarray(c)) / r
    return t, normal


def generate_scene(seed: int, cfg: SceneConfig | None = None) -> SceneSample:
    """Render one deterministic RGB-D scene for ``seed``."""
    cfg = (cfg or SceneConfig()).validate()
    rng = np.random.default_rng(seed)
    _, xn, yn = _camera(cfg)
    h_floor = floor_height(cfg)
    tan_half = math.tan(math.radians(cfg.fov_deg) / 2.0)

    depth = empty_room_depth(cfg)
    labels = np.where(depth < cfg.d_max, 1, 0)
    normals = np.zeros(depth.shape + (3,))
    normals[labels == 0] = (0.0, 0.0, -1.0)
    normals[labels == 1] = (0.0, -1.0, 0.0)

    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    albedo_ids = [0, 1] + list(2 + rng.permutation(len(cfg.palette) - 2)[:n_obj])
    span = cfg.d_max - cfg.d_min
    for k in range(n_obj):
        size = rng.uniform(0.1, 0.3) * span
        # bias placement toward the camera so objects cover more pixels
        zc = cfg.d_min + size + (span - 2.0 * size) * rng.random() ** 1.5
        xc = rng.uniform(-0.75, 0.75) * zc * tan_half
        if rng.random() < 0.5:
            half = size * rng.uniform(0.5, 1.0, size=3) / 2.0
            height = rng.uniform(0.5, 2.5) * half[1] * 2.0
            lo = np.array([xc - half[0], h_floor - height, zc - half[2]])
            hi = np.array([xc + half[0], h_floor, zc + half[2]])
            t, nrm = _hit_box(xn, yn, lo, hi)
        else:
            r = size / 2.0
            t, nrm = _hit_sphere(xn, yn, (xc, h_floor - r, zc), r)
        closer = t < depth
        depth = np.where(closer, t, depth)
        labels = np.where(closer, k + 2, labels)
        normals = np.where(closer[..., None], nrm, normals)

    light = np.asarray(cfg.light, dtype=float)
    light = light / np.linalg.norm(light)
    lambert = np.clip(normals @ light, 0.0, None)
    shade = cfg.ambient + (1.0 - cfg.ambient) * lambert
    pal = np.asarray(cfg.palette, dtype=float)[np.asarray(albedo_ids)]
    rgb = np.clip(pal[labels] * shade[..., None], 0.0, 1.0)
    return SceneSample(rgb=rgb, depth_true=depth, labels=labels, seed=seed)


# ---------------------------------------------------------------------------
# corruption protocols


@dataclass(frozen=True)
class CorruptionSpec:
    mode: str = "sparse+noise"
    noise_ratio: float = 0.1
    noise_sigma: float | None = None
    sparse_count: int = 500
    h2i_range: tuple = (0.01, 0.1)
    coverage: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("sparse+noise", "holes", "structured-mask"):
            raise InvalidConfig(f"unknown corruption mode {self.mode!r}")
        if not 0.0 <= self.noise_ratio <= 1.0:
            raise InvalidConfig("noise_ratio must lie in [0, 1]")
        if self.sparse_count < 1:
            raise InvalidConfig("sparse_count must be >= 1")
        lo, hi = self.h2i_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise InvalidConfig("h2i_range must be a sub-interval of [0, 1]")


def random_structured_mask(shape, seed: int, coverage: float) -> np.ndarray:
    """Random keep-mask whose kept fraction lands within 1% above ``coverage``.

    Pixels are removed by random rectangles and horizontal scanline runs,
    each sized so the kept fraction never drops below ``coverage``.
    """
    if not 0.0 < coverage <= 1.0:
        raise InvalidRange(f"coverage must lie in (0, 1], got {coverage}")
    h, w = shape
    n = h * w
    rng = np.random.default_rng(seed)
    keep = np.ones((h, w), dtype=bool)
    floor_count = math.ceil(coverage * n - 1e-9)
    kept = n
    while kept / n - coverage >= 0.01 and kept > floor_count:
        budget = min(kept - floor_count, max(1, n // 8))
        idx = rng.choice(np.flatnonzero(keep))
        r0, c0 = divmod(int(idx), w)
        if rng.random() < 0.5:
            rh = int(rng.integers(1, max(1, min(h, int(math.sqrt(budget)))) + 1))
            rw = max(1, min(w, budget // rh))
            r0 = max(0, min(r0, h - rh))
            c0 = max(0, min(c0, w - rw))
            keep[r0:r0 + rh, c0:c0 + rw] = False
        else:
            run = int(rng.integers(1, min(w, budget) + 1))
            c0 = max(0, min(c0, w - run))
            keep[r0, c0:c0 + run] = False
        kept = int(keep.sum())
    return keep


def sample_sparse(d_true, n: int, seed: int) -> np.ndarray:
    """Keep ``n`` valid pixels chosen uniformly without replacement."""
    d = as_depth(d_true)
    valid = np.flatnonzero(d > 0)
    if n < 1 or n > valid.size:
        raise TooFewValidPixels(f"requested {n} samples from {valid.size} valid pixels")
    rng = np.random.default_rng(seed)
    keep = rng.choice(valid, size=n, replace=False)
    out = np.zeros_like(d)
    out.flat[keep] = d.flat[keep]
    return out


def default_noise_sigma(d) -> float:
    """15% of the valid depth range."""
    v = np.asarray(d)[np.asarray(d) > 0]
    return 0.15 * float(v.max() - v.min()) if v.size else 0.0


def inject_gaussian_noise(d, ratio: float, sigma: float | None, seed: int):
    """Add N(0, sigma^2) to ``round(ratio * #valid)`` random valid pixels, clamped at 0.

    Returns ``(noisy, corrupted_mask)``.  A clamped pixel ends up at 0 and
    therefore reads as missing downstream.
    """
    d = as_depth(d)
    if not 0.0 <= ratio <= 1.0:
        raise InvalidRange(f"noise ratio must lie in [0, 1], got {ratio}")
    if sigma is None:
        sigma = default_noise_sigma(d)
    valid = np.flatnonzero(d > 0)
    k = int(math.floor(ratio * valid.size + 0.5))
    rng = np.random.default_rng(seed)
    picked = rng.choice(valid, size=k, replace=False)
    out = d.copy()
    out.flat[picked] = np.maximum(0.0, d.flat[picked] + rng.normal(0.0, sigma, size=k))
    corrupted = np.zeros(d.shape, dtype=bool)
    corrupted.flat[picked] = True
    return out, corrupted


def _check_h2i(h2i, n: int):
    lo, hi = (float(v) for v in h2i)
    if not 0.0 <= lo <= hi <= 1.0:
        raise InvalidRange(f"h2i range must lie in [0, 1] and be ordered, got {h2i}")
    if lo == hi:
        k = lo * n
        if abs(k - round(k)) > 1e-9:
            raise InfeasibleRange(f"no pixel count gives an exact hole fraction of {lo}")
        k = int(round(k))
        return k, k
    k_min = math.floor(lo * n + 1e-9) + 1
    k_max = math.floor(hi * n + 1e-9)
    if k_min > k_max:
        raise InfeasibleRange(f"h2i range {h2i} holds no achievable pixel count at {n} pixels")
    return k_min, k_max


def mask_holes(d, h2i, seed: int):
    """Remove random rectangles/ellipses until the hole-to-image ratio lies in ``h2i``.

    The interval is half-open ``(lo, hi]`` like the usual H2I bins; a
    degenerate ``[x, x]`` asks for exactly that fraction.  Returns
    ``(holed_depth, removed)`` where ``removed`` marks previously valid
    pixels that were cut out.
    """
    d = as_depth(d)
    h, w = d.shape
    n = h * w
    k_min, k_max = _check_h2i(h2i, n)
    rng = np.random.default_rng(seed)
    target = int(rng.integers(k_min, k_max + 1))
    holes = np.zeros((h, w), dtype=bool)
    rr, cc = np.mgrid[0:h, 0:w]
    covered = 0
    scale = 1.0
    misses = 0
    while covered < target:
        remaining = target - covered
        area = max(1.0, scale * rng.uniform(0.2, 1.0) * min(remaining, 0.06 * n))
        if area < 2.0:
            idx = rng.choice(np.flatnonzero(~holes))
            holes.flat[idx] = True
            covered += 1
            continue
        aspect = math.exp(rng.uniform(-0.8, 0.8))
        hh = max(1.0, math.sqrt(area / aspect))
        ww = max(1.0, area / hh)
        r0 = rng.uniform(0, h)
        c0 = rng.uniform(0, w)
        if rng.random() < 0.5:
            shape = (np.abs(rr - r0) <= hh / 2) & (np.abs(cc - c0) <= ww / 2)
        else:
            # ellipse with the same bounding box
            shape = ((rr - r0) / (hh / 2 + 0.5)) ** 2 + ((cc - c0) / (ww / 2 + 0.5)) ** 2 <= 1.0
        new = holes | shape
        new_count = int(new.sum())
        if new_count > k_max or new_count == covered:
            misses += 1
            if misses >= 20:
                scale *= 0.5
                misses = 0
            continue
        holes = new
        covered = new_count
    removed = holes & (d > 0)
    out = np.where(holes, 0.0, d)
    return out, removed


def corrupt(d_true, spec: CorruptionSpec):
    """Apply one corruption protocol; returns ``(d_cond, corruption_mask)``.

    ``sparse+noise`` returns the mask of noisy pixels; ``holes`` and
    ``structured-mask`` return the mask of removed pixels.
    """
    d = as_depth(d_true)
    if spec.mode == "sparse+noise":
        sparse = sample_sparse(d, spec.sparse_count, spec.seed)
        return inject_gaussian_noise(sparse, spec.noise_ratio, spec.noise_sigma, spec.seed + 1)
    if spec.mode == "holes":
        return mask_holes(d, spec.h2i_range, spec.seed)
    keep = random_structured_mask(d.shape, spec.seed, spec.coverage)
    return np.where(keep, d, 0.0), ~keep & (d > 0)
