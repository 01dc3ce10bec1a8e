"""Event streams: CSV parsing, synthetic scenes, voxelization and per-bin sparsity.

An event stream is a 1-D structured array with fields ``t`` (microseconds),
``x``, ``y`` and ``p`` (polarity 0/1), sorted non-strictly by ``t``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np

from . import kernels
from ._backend import float_dtype
from .tensorkit import ShapeError

EVENT_DTYPE = np.dtype([("t", np.int64), ("x", np.int32), ("y", np.int32), ("p", np.int8)])


class EventParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EventOrderError(EventParseError):
    pass


def empty_events() -> np.ndarray:
    return np.zeros(0, dtype=EVENT_DTYPE)


def make_events(t, x, y, p) -> np.ndarray:
    ev = np.zeros(len(t), dtype=EVENT_DTYPE)
    ev["t"], ev["x"], ev["y"], ev["p"] = t, x, y, p
    return ev


def parse_events(text: str | TextIO | Iterable[str], width: int | None = None,
                 height: int | None = None) -> np.ndarray:
    """Parse ``t,x,y,p`` lines. Blank lines and lines starting with ``#`` are skipped.

    Raises :class:`EventParseError` (with the 1-based line number) on malformed
    or out-of-range lines and :class:`EventOrderError` on decreasing timestamps.
    """
    if isinstance(text, str):
        text = io.StringIO(text)
    rows = []
    last_t = None
    for line_no, raw in enumerate(text, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise EventParseError(line_no, f"expected 4 comma-separated fields, got {len(parts)}")
        try:
            t, x, y, p = (int(v.strip()) for v in parts)
        except ValueError:
            raise EventParseError(line_no, f"non-integer field in {line!r}") from None
        if t < 0:
            raise EventParseError(line_no, f"negative timestamp {t}")
        if p not in (0, 1):
            raise EventParseError(line_no, f"polarity must be 0 or 1, got {p}")
        if x < 0 or (width is not None and x >= width):
            raise EventParseError(line_no, f"x={x} outside sensor width {width}")
        if y < 0 or (height is not None and y >= height):
            raise EventParseError(line_no, f"y={y} outside sensor height {height}")
        if last_t is not None and t < last_t:
            raise EventOrderError(line_no, f"timestamp {t} decreases (previous {last_t})")
        last_t = t
        rows.append((t, x, y, p))
    if not rows:
        return empty_events()
    return np.array(rows, dtype=EVENT_DTYPE)


def read_events(path, width: int | None = None, height: int | None = None) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_events(fh, width, height)


def format_events(events: np.ndarray) -> str:
    lines = ["# t,x,y,p"]
    lines += [f"{int(e['t'])},{int(e['x'])},{int(e['y'])},{int(e['p'])}" for e in events]
    return "\n".join(lines) + "\n"


def voxelize(events: np.ndarray, H: int, W: int, n_time_bins: int, sample_duration_us: int,
             t_start: int = 0) -> np.ndarray:
    """Count events into a [2 * n_time_bins, H, W] voxel.

    Bin index is ``p * n_time_bins + floor((t - t_start) / (duration / n_time_bins))``,
    clamped into ``[0, n_time_bins - 1]`` so an event at exactly the sample end
    lands in the last time bin.
    """
    if sample_duration_us <= 0:
        raise ValueError("sample_duration_us must be positive")
    if n_time_bins < 1:
        raise ValueError("n_time_bins must be >= 1")
    out = np.zeros((2 * n_time_bins, H, W), dtype=float_dtype())
    if len(events) == 0:
        return out
    if events["x"].min() < 0 or events["x"].max() >= W or events["y"].min() < 0 or events["y"].max() >= H:
        raise ShapeError(f"event coordinates outside {W}x{H} sensor")
    return kernels.accumulate_events(events["t"], events["x"], events["y"], events["p"], out,
                                     n_time_bins, sample_duration_us, t_start)


def event_sparsity(voxel: np.ndarray) -> np.ndarray:
    """Per-bin fraction of non-zero cells, shape [B]."""
    B, H, W = voxel.shape
    return np.count_nonzero(voxel.reshape(B, -1), axis=1) / float(H * W)


def downsample_voxel(voxel: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool each bin over ``factor x factor`` patches (a patch is non-zero iff any pixel fired)."""
    if factor < 1:
        raise ShapeError(f"pooling factor must be positive, got {factor}")
    _, H, W = voxel.shape
    if H % factor or W % factor:
        raise ShapeError(f"pooling factor {factor} must divide voxel {H}x{W}")
    if factor == 1:
        return voxel.copy()
    return kernels.max_pool(voxel, factor)


def split_samples(events: np.ndarray, sample_duration_us: int) -> list[tuple[int, np.ndarray]]:
    """Cut a stream into consecutive ``[k * d, (k + 1) * d)`` samples; returns ``(t_start, events)`` pairs.

    An empty stream yields one empty sample.
    """
    if len(events) == 0:
        return [(0, events)]
    n = int(events["t"][-1] // sample_duration_us) + 1
    edges = np.searchsorted(events["t"], np.arange(n + 1) * sample_duration_us, side="left")
    return [(k * sample_duration_us, events[edges[k]:edges[k + 1]]) for k in range(n)]


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    """Synthetic scene: moving rectangles plus density-driven clutter and uniform noise.

    ``density_level`` sets the fraction of the sensor covered by flickering
    clutter patches (up to ``clutter_fraction``); a density of 0 is a static
    scene with no object or clutter events. Per-pixel event rates stay fixed so
    that denser scenes light up more pixels rather than brighter ones.
    ``noise_rate`` is uniform noise in events per pixel per sample.
    """
    density_level: float = 0.5
    n_objects: int = 3
    object_size: int = 10
    seed: int = 0
    noise_rate: float = 0.0
    width: int = 64
    height: int = 64
    duration_us: int = 50_000
    edge_rate: float = 6.0  # events per object edge pixel
    clutter_fraction: float = 0.6
    clutter_patch: int = 8
    clutter_rate: float = 1.5  # events per clutter pixel

    def __post_init__(self):
        if not 0.0 <= self.density_level <= 1.0:
            raise ValueError("density_level must lie in [0, 1]")
        if self.noise_rate < 0 or self.n_objects < 0 or self.object_size < 1 or self.clutter_patch < 1:
            raise ValueError("invalid scene spec")

    def expected_event_count(self) -> float:
        perim = max(4 * self.object_size - 4, 1)
        obj = self.n_objects * perim * self.edge_rate if self.density_level > 0 else 0.0
        clutter = self.density_level * self.clutter_fraction * self.width * self.height * self.clutter_rate
        return obj + clutter + self.noise_rate * self.width * self.height


def synth_scene(spec: SceneSpec) -> np.ndarray:
    """Deterministic event stream for ``spec`` (same seed, same stream)."""
    rng = np.random.default_rng(spec.seed)
    W, H, D, s = spec.width, spec.height, spec.duration_us, spec.object_size
    chunks = []
    active = spec.density_level > 0

    perim = max(4 * s - 4, 1)
    for _ in range(spec.n_objects):
        x0 = rng.uniform(0, max(W - s, 1))
        y0 = rng.uniform(0, max(H - s, 1))
        vx, vy = rng.uniform(-0.3, 0.3, size=2) * s / D  # px per us
        n = rng.poisson(perim * spec.edge_rate) if active else 0
        t = rng.integers(0, D, size=n)
        # sides: 0 left, 1 right, 2 top, 3 bottom
        side = rng.integers(0, 4, size=n)
        u = rng.uniform(0, s, size=n)
        ox = np.select([side == 0, side == 1], [0.0, s - 1.0], default=u)
        oy = np.select([side == 2, side == 3], [0.0, s - 1.0], default=u)
        px = np.clip(np.floor(x0 + vx * t + ox), 0, W - 1)
        py = np.clip(np.floor(y0 + vy * t + oy), 0, H - 1)
        # leading edge along the motion direction fires ON events
        lead_x = (side == 1) if vx >= 0 else (side == 0)
        lead_y = (side == 3) if vy >= 0 else (side == 2)
        pol = (lead_x | lead_y).astype(np.int8)
        chunks.append((t, px, py, pol))

    # clutter patch count has expectation exactly linear in density
    cp = min(spec.clutter_patch, W, H)
    n_patch_f = spec.density_level * spec.clutter_fraction * W * H / (cp * cp)
    n_patch = int(np.floor(n_patch_f)) + int(rng.uniform() < n_patch_f - np.floor(n_patch_f))
    for _ in range(n_patch):
        px0 = rng.integers(0, W - cp + 1)
        py0 = rng.integers(0, H - cp + 1)
        n = rng.poisson(spec.clutter_rate * cp * cp)
        chunks.append((rng.integers(0, D, size=n), px0 + rng.integers(0, cp, size=n),
                       py0 + rng.integers(0, cp, size=n), rng.integers(0, 2, size=n)))

    n = rng.poisson(spec.noise_rate * W * H)
    chunks.append((rng.integers(0, D, size=n), rng.integers(0, W, size=n),
                   rng.integers(0, H, size=n), rng.integers(0, 2, size=n)))

    t = np.concatenate([c[0] for c in chunks]).astype(np.int64)
    x = np.concatenate([c[1] for c in chunks]).astype(np.int32)
    y = np.concatenate([c[2] for c in chunks]).astype(np.int32)
    p = np.concatenate([c[3] for c in chunks]).astype(np.int8)
    order = np.argsort(t, kind="stable")
    return make_events(t[order], x[order], y[order], p[order])
