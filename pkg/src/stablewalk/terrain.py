"""Procedural heightmaps, height queries, egocentric scans and a difficulty curriculum.

Grids are row-major with rows along world x and columns along world y:
``heights[i, j]`` is the elevation of the cell centred at
``(origin[0] + i * resolution, origin[1] + j * resolution)``.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from stablewalk.errors import ConfigurationError

KINDS = ("flat", "stairs", "slope", "discrete", "rough", "composite")

# Hardest settings of the evaluation terrains; every generator reaches them at difficulty 1.
MAX_STAIR_HEIGHT = 0.20
MAX_SLOPE_DEG = 32.10
ROUGH_HEIGHT_RANGE = (0.02, 0.15)
DISCRETE_HEIGHT_RANGE = (0.02, 0.36)

SCAN_SIDE = 21
SCAN_SPACING = 0.10


@dataclass(frozen=True)
class Heightmap:
    resolution: float
    origin: tuple[float, float]
    heights: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=np.float64)
        if h.ndim != 2 or h.size == 0:
            raise ConfigurationError(f"heights must be a non-empty 2-D grid, got shape {h.shape}")
        if not np.all(np.isfinite(h)):
            raise ConfigurationError("heights must be finite")
        if not self.resolution > 0:
            raise ConfigurationError(f"resolution must be positive, got {self.resolution}")
        h = h.copy()
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def extent(self) -> tuple[int, int]:
        return self.heights.shape

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        return (self.origin[0] + i * self.resolution, self.origin[1] + j * self.resolution)

    def to_csv(self, path: str | Path) -> None:
        """Write one CSV row per grid row, elevations in metres."""
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            for row in self.heights:
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path, resolution: float, origin=(0.0, 0.0)) -> "Heightmap":
        with open(path, newline="") as f:
            rows = [[float(v) for v in row] for row in csv.reader(f) if row]
        return cls(resolution=resolution, origin=tuple(origin), heights=np.array(rows))


@dataclass(frozen=True)
class TerrainSpec:
    """Recipe for one terrain instance.

    Magnitudes are the difficulty-1 values; the generated terrain scales them
    linearly by ``difficulty``.
    """

    kind: str = "flat"
    difficulty: float = 1.0
    seed: int = 0
    size: tuple[float, float] = (12.0, 12.0)
    resolution: float = 0.05
    platform: float = 0.5
    stair_height: float = MAX_STAIR_HEIGHT
    stair_run: float = 0.30
    slope_deg: float = MAX_SLOPE_DEG
    rough_range: tuple[float, float] = ROUGH_HEIGHT_RANGE
    rough_patch: float = 0.10
    discrete_range: tuple[float, float] = DISCRETE_HEIGHT_RANGE
    discrete_count: int = 60
    discrete_size: tuple[float, float] = (0.3, 1.0)
    segment_length: float = 2.0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown terrain kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ConfigurationError(f"difficulty must lie in [0, 1], got {self.difficulty}")
        if not (0.0 <= self.stair_height <= MAX_STAIR_HEIGHT + 1e-12):
            raise ConfigurationError(f"stair_height outside [0, {MAX_STAIR_HEIGHT}]")
        if not (0.0 <= self.slope_deg <= MAX_SLOPE_DEG + 1e-12):
            raise ConfigurationError(f"slope_deg outside [0, {MAX_SLOPE_DEG}]")
        for name, (lo, hi), (env_lo, env_hi) in (
            ("rough_range", self.rough_range, ROUGH_HEIGHT_RANGE),
            ("discrete_range", self.discrete_range, DISCRETE_HEIGHT_RANGE),
        ):
            if not (env_lo - 1e-12 <= lo <= hi <= env_hi + 1e-12):
                raise ConfigurationError(f"{name}={lo, hi} outside the envelope {env_lo, env_hi}")
        if self.stair_run <= 0 or self.resolution <= 0 or min(self.size) <= 0:
            raise ConfigurationError("stair_run, resolution and size must be positive")


def _grid(spec: TerrainSpec):
    nx = int(round(spec.size[0] / spec.resolution))
    ny = int(round(spec.size[1] / spec.resolution))
    origin = (-(nx - 1) * spec.resolution / 2.0, -(ny - 1) * spec.resolution / 2.0)
    xs = origin[0] + spec.resolution * np.arange(nx)
    ys = origin[1] + spec.resolution * np.arange(ny)
    return origin, xs[:, None], ys[None, :]


def _stairs_profile(dist: np.ndarray, spec: TerrainSpec) -> np.ndarray:
    rise = spec.stair_height * spec.difficulty
    n_steps = np.ceil(np.maximum(dist - spec.platform, 0.0) / spec.stair_run - 1e-9)
    return rise * n_steps


def _slope_profile(dist: np.ndarray, spec: TerrainSpec) -> np.ndarray:
    grade = np.tan(np.deg2rad(spec.slope_deg * spec.difficulty))
    return grade * np.maximum(dist - spec.platform, 0.0)


def _rough_field(shape, xs, ys, spec: TerrainSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.rough_range
    px = int(np.floor((xs[-1, 0] - xs[0, 0]) / spec.rough_patch)) + 2
    py = int(np.floor((ys[0, -1] - ys[0, 0]) / spec.rough_patch)) + 2
    unit = rng.uniform(0.0, 1.0, size=(px, py))
    ii = np.floor((xs - xs[0, 0]) / spec.rough_patch + 1e-9).astype(int)
    jj = np.floor((ys - ys[0, 0]) / spec.rough_patch + 1e-9).astype(int)
    u = unit[np.broadcast_to(ii, shape), np.broadcast_to(jj, shape)]
    return spec.difficulty * (lo + (hi - lo) * u)


def _discrete_field(shape, xs, ys, spec: TerrainSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.discrete_range
    h = np.zeros(shape)
    x_lo, x_hi = xs[0, 0], xs[-1, 0]
    y_lo, y_hi = ys[0, 0], ys[0, -1]
    for _ in range(spec.discrete_count):
        cx = rng.uniform(x_lo, x_hi)
        cy = rng.uniform(y_lo, y_hi)
        w, l = rng.uniform(*spec.discrete_size, size=2)
        u = rng.uniform()
        mask = (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= l / 2)
        h = np.where(mask, np.maximum(h, spec.difficulty * (lo + (hi - lo) * u)), h)
    keep_clear = (np.abs(xs) <= spec.platform) & (np.abs(ys) <= spec.platform)
    return np.where(keep_clear, 0.0, h)


def _composite_field(shape, xs, ys, spec: TerrainSpec, rng: np.random.Generator) -> np.ndarray:
    # Flat start around the origin, then seeded segments stacked along +x, each
    # continuing from the previous segment's end height.
    order = list(rng.permutation(["slope", "stairs", "rough", "discrete"]))
    x = np.broadcast_to(xs, shape)
    h = np.zeros(shape)
    base = 0.0
    start = spec.platform
    seg_spec = replace(spec, platform=0.0)
    for kind in order:
        local = x - start
        inside = (local >= 0) & (local < spec.segment_length)
        if kind == "slope":
            prof = _slope_profile(local, seg_spec)
            end = _slope_profile(np.array(spec.segment_length), seg_spec)
        elif kind == "stairs":
            prof = _stairs_profile(local, seg_spec)
            end = _stairs_profile(np.array(spec.segment_length), seg_spec)
        elif kind == "rough":
            prof = _rough_field(shape, xs, ys, spec, rng)
            end = 0.0
        else:
            prof = _discrete_field(shape, xs, ys, replace(spec, platform=0.0), rng)
            end = 0.0
        h = np.where(inside, base + prof, h)
        base += float(end)
        start += spec.segment_length
    return np.where(x >= start, base, h)


def generate_terrain(spec: TerrainSpec) -> Heightmap:
    """Build the heightmap described by ``spec``; a pure function of the spec."""
    spec.validate()
    origin, xs, ys = _grid(spec)
    shape = (xs.shape[0], ys.shape[1])
    rng = np.random.default_rng(spec.seed)
    # Chebyshev distance gives square pyramids centred on the spawn platform.
    dist = np.maximum(np.abs(xs), np.abs(ys))
    if spec.kind == "flat":
        h = np.zeros(shape)
    elif spec.kind == "stairs":
        h = _stairs_profile(dist, spec)
    elif spec.kind == "slope":
        h = _slope_profile(dist, spec)
    elif spec.kind == "rough":
        h = _rough_field(shape, xs, ys, spec, rng)
    elif spec.kind == "discrete":
        h = _discrete_field(shape, xs, ys, spec, rng)
    else:
        h = _composite_field(shape, xs, ys, spec, rng)
    return Heightmap(resolution=spec.resolution, origin=origin, heights=np.broadcast_to(h, shape))


def height_at(hmap: Heightmap, x, y):
    """Nearest-cell elevation; queries outside the grid clamp to the border cell."""
    i = np.rint((np.asarray(x, dtype=np.float64) - hmap.origin[0]) / hmap.resolution).astype(np.int64)
    j = np.rint((np.asarray(y, dtype=np.float64) - hmap.origin[1]) / hmap.resolution).astype(np.int64)
    nx, ny = hmap.heights.shape
    out = hmap.heights[np.clip(i, 0, nx - 1), np.clip(j, 0, ny - 1)]
    return float(out) if np.ndim(out) == 0 else out


def scan_offsets(side: int = SCAN_SIDE, spacing: float = SCAN_SPACING) -> np.ndarray:
    """Base-frame (forward, lateral) offsets of a square scan, row-major by forward offset."""
    ticks = (np.arange(side) - (side - 1) / 2.0) * spacing
    fwd, lat = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([fwd.ravel(), lat.ravel()], axis=-1)


_SCAN_OFFSETS = scan_offsets()


def height_scan(hmap: Heightmap, base_pose, reference: float | None = None) -> np.ndarray:
    """441 elevations on a yaw-aligned 21 x 21 grid around the base.

    ``base_pose`` is ``(x, y, yaw)``. Values are relative to ``reference``,
    which defaults to the terrain height directly under the base.
    """
    x, y, yaw = (float(v) for v in base_pose)
    c, s = np.cos(yaw), np.sin(yaw)
    px = x + c * _SCAN_OFFSETS[:, 0] - s * _SCAN_OFFSETS[:, 1]
    py = y + s * _SCAN_OFFSETS[:, 0] + c * _SCAN_OFFSETS[:, 1]
    # Snap to a nanometre grid so rounding noise in cos/sin cannot flip a
    # sample that sits exactly on a cell boundary.
    px, py = np.round(px, 9), np.round(py, 9)
    ref = height_at(hmap, x, y) if reference is None else reference
    return height_at(hmap, px, py) - ref


class HeightmapStack:
    """Several equally shaped heightmaps queried together by per-environment index."""

    def __init__(self, maps: list[Heightmap]):
        if not maps:
            raise ConfigurationError("HeightmapStack needs at least one map")
        first = maps[0]
        for m in maps:
            if m.heights.shape != first.heights.shape or m.resolution != first.resolution \
                    or m.origin != first.origin:
                raise ConfigurationError("all maps in a stack must share shape, resolution and origin")
        self.maps = list(maps)
        self.heights = np.stack([m.heights for m in maps])
        self.resolution = first.resolution
        self.origin = np.array(first.origin)

    def __len__(self) -> int:
        return len(self.maps)

    def height_at(self, idx, x, y) -> np.ndarray:
        """Heights at world points; ``idx`` broadcasts against ``x`` and ``y``."""
        _, nx, ny = self.heights.shape
        i = np.rint((x - self.origin[0]) / self.resolution).astype(np.int64)
        j = np.rint((y - self.origin[1]) / self.resolution).astype(np.int64)
        np.clip(i, 0, nx - 1, out=i)
        np.clip(j, 0, ny - 1, out=j)
        return self.heights[idx, i, j]


@dataclass
class CurriculumConfig:
    levels: int = 10
    window: int = 4
    promote_rate: float = 0.75
    demote_streak: int = 3
    start_level: int = 0


@dataclass
class TerrainCurriculum:
    """Per-environment difficulty levels driven by episode outcomes.

    A level is promoted once the rolling success rate over the last ``window``
    episodes reaches ``promote_rate`` and demoted after ``demote_streak``
    consecutive failures. Histories reset on every level change.
    """

    n_envs: int
    config: CurriculumConfig = field(default_factory=CurriculumConfig)

    def __post_init__(self):
        self.levels = np.full(self.n_envs, self.config.start_level, dtype=np.int64)
        self._history = [deque(maxlen=self.config.window) for _ in range(self.n_envs)]
        self._fail_streak = np.zeros(self.n_envs, dtype=np.int64)

    def difficulty(self, level) -> np.ndarray:
        return (np.asarray(level) + 1) / self.config.levels

    def record(self, env: int, success: bool) -> int:
        hist = self._history[env]
        hist.append(bool(success))
        self._fail_streak[env] = 0 if success else self._fail_streak[env] + 1
        level = self.levels[env]
        if len(hist) == hist.maxlen and sum(hist) / len(hist) >= self.config.promote_rate:
            level = min(level + 1, self.config.levels - 1)
        elif self._fail_streak[env] >= self.config.demote_streak:
            level = max(level - 1, 0)
        if level != self.levels[env]:
            self.levels[env] = level
            hist.clear()
            self._fail_streak[env] = 0
        return int(self.levels[env])
