"""Pressure-image preprocessing: resizing, channel replication, augmentation."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy import ndimage

FULL_SCALE_KPA = 34.0
SENSOR_SHAPE = (28, 50)
N_CLASSES = 22

# tactel grid produced by each software resolution level
RESOLUTION_LADDER = {
    Fraction(1, 16): (7, 13),
    Fraction(1, 8): (10, 18),
    Fraction(1, 4): (14, 25),
    Fraction(1, 2): (20, 35),
    Fraction(1): (28, 50),
}

MAX_ROTATION_DEG = 15.0
MAX_SHIFT_X = 7
MAX_SHIFT_Y = 4


@dataclass
class TactileFrame:
    """One pressure image with values normalized to ``[0, 1]`` of full scale."""

    values: np.ndarray
    label: Optional[int] = None
    source_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or min(v.shape) < 1:
            raise ValueError(f"a tactile frame must be a non-empty 2-d map, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise ValueError("frame values must be finite and lie in [0, 1]")
        if self.label is not None:
            if not 0 <= int(self.label) < N_CLASSES:
                raise ValueError(f"label {self.label} outside 0..{N_CLASSES - 1}")
            self.label = int(self.label)
        self.values = v

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def origin(self) -> str:
        """``source_id`` of the un-augmented frame this one derives from."""
        return self.source_id.split("#", 1)[0]

    def derive(self, values, tag: str) -> "TactileFrame":
        return TactileFrame(values, self.label, f"{self.source_id}#{tag}" if tag else self.source_id)


def normalize_pressure(kpa, full_scale: float = FULL_SCALE_KPA) -> np.ndarray:
    """Map raw pressures onto ``[0, 1]`` of the sensor's full scale."""
    return np.clip(np.asarray(kpa, dtype=np.float64) / full_scale, 0.0, 1.0)


# -- bicubic resize -----------------------------------------------------------

@functools.lru_cache(maxsize=64)
def lagrange_weights(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic ``(n_out, n_in)`` matrix of cubic Lagrange weights.

    Output sample ``o`` sits at source coordinate ``(o + 0.5) * n_in/n_out - 0.5``
    (pixel centres aligned). Its four nodes are the nearest source indices with
    the window clamped inside ``[0, n_in)``; sources shorter than four samples
    use all of theirs (lower-degree Lagrange).
    """
    scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    width = min(4, n_in)
    for o in range(n_out):
        u = (o + 0.5) * scale - 0.5
        start = min(max(math.floor(u) - 1, 0), n_in - width)
        nodes = range(start, start + width)
        for i in nodes:
            w = 1.0
            for k in nodes:
                if k != i:
                    w *= (u - k) / (i - k)
            m[o, i] = w
    m.flags.writeable = False
    return m


def _resize_values(values, rows, cols):
    r, c = values.shape
    if r < 2 or c < 2:
        raise ValueError(f"bicubic resize needs a source of at least 2x2, got {r}x{c}")
    if rows < 2 or cols < 2:
        raise ValueError(f"bicubic resize target must be at least 2x2, got {rows}x{cols}")
    if (rows, cols) == (r, c):
        return np.array(values, dtype=np.float64)
    out = lagrange_weights(rows, r) @ np.asarray(values, dtype=np.float64) @ lagrange_weights(cols, c).T
    return np.clip(out, 0.0, 1.0)


def bicubic_resize(frame: TactileFrame, rows: int, cols: int) -> TactileFrame:
    """Resample ``frame`` onto a ``rows x cols`` grid from 4x4 neighbourhoods."""
    return frame.derive(_resize_values(frame.values, rows, cols), "")


def replicate_channels(frame: TactileFrame) -> np.ndarray:
    """Stack the pressure map into an ``R x C x 3`` image, all channels equal."""
    return np.repeat(np.asarray(frame.values)[:, :, None], 3, axis=2)


def parse_level(level) -> Fraction:
    if isinstance(level, str):
        level = Fraction(level.strip())
    try:
        frac = Fraction(level).limit_denominator(64)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"unrecognised resolution level {level!r}") from exc
    if frac not in RESOLUTION_LADDER:
        allowed = ", ".join(str(k) for k in RESOLUTION_LADDER)
        raise ValueError(f"resolution level {level} not in the ladder ({allowed})")
    return frac


def degrade_resolution(frame: TactileFrame, level) -> TactileFrame:
    """Simulate a coarser sensor by bicubic resizing onto the ladder grid."""
    rows, cols = RESOLUTION_LADDER[parse_level(level)]
    return bicubic_resize(frame, rows, cols)


# -- augmentation -------------------------------------------------------------

AUG_KINDS = ("identity", "hflip", "vflip", "rotation", "translation")


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str = "identity"
    angle: float = 0.0
    dx: int = 0
    dy: int = 0
    fill: float = field(default=0.0, repr=False)

    def __post_init__(self):
        if self.kind not in AUG_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if abs(self.angle) > MAX_ROTATION_DEG:
            raise ValueError(f"rotation {self.angle} exceeds +/-{MAX_ROTATION_DEG} degrees")
        if abs(self.dx) > MAX_SHIFT_X or abs(self.dy) > MAX_SHIFT_Y:
            raise ValueError(f"translation ({self.dx}, {self.dy}) exceeds +/-{MAX_SHIFT_X}/+/-{MAX_SHIFT_Y} tactels")

    @property
    def tag(self) -> str:
        if self.kind == "rotation":
            return f"rot{self.angle:+g}"
        if self.kind == "translation":
            return f"shift({self.dx},{self.dy})"
        return self.kind


def _shift(values, dx, dy):
    out = np.zeros_like(values)
    r, c = values.shape
    if abs(dx) >= c or abs(dy) >= r:
        return out
    src_r = slice(max(-dy, 0), r - max(dy, 0))
    dst_r = slice(max(dy, 0), r - max(-dy, 0))
    src_c = slice(max(-dx, 0), c - max(dx, 0))
    dst_c = slice(max(dx, 0), c - max(-dx, 0))
    out[dst_r, dst_c] = values[src_r, src_c]
    return out


def augment(frame: TactileFrame, spec: AugmentationSpec) -> TactileFrame:
    """Apply one label-preserving transform; vacated cells are zero.

    Positive ``dx`` moves content toward higher column indices, positive
    ``dy`` toward higher rows. Rotation is bilinear about the frame centre.
    """
    v = frame.values
    if spec.kind == "identity":
        out = v.copy()
    elif spec.kind == "hflip":
        out = v[:, ::-1].copy()
    elif spec.kind == "vflip":
        out = v[::-1, :].copy()
    elif spec.kind == "rotation":
        out = ndimage.rotate(v, spec.angle, reshape=False, order=1, mode="constant", cval=spec.fill)
        out = np.clip(out, 0.0, 1.0).astype(v.dtype, copy=False)
    else:
        out = _shift(v, spec.dx, spec.dy)
    return frame.derive(out, spec.tag)


EXPANSION_ANGLE = 10.0


def expansion_specs(rng: np.random.Generator) -> list[AugmentationSpec]:
    """The six-way expansion: identity, two reflections, +/-10 deg, one shift."""
    while True:
        dx = int(rng.integers(-MAX_SHIFT_X, MAX_SHIFT_X + 1))
        dy = int(rng.integers(-MAX_SHIFT_Y, MAX_SHIFT_Y + 1))
        if dx or dy:
            break
    return [
        AugmentationSpec("identity"),
        AugmentationSpec("hflip"),
        AugmentationSpec("vflip"),
        AugmentationSpec("rotation", angle=EXPANSION_ANGLE),
        AugmentationSpec("rotation", angle=-EXPANSION_ANGLE),
        AugmentationSpec("translation", dx=dx, dy=dy),
    ]


def expand_set(frames, factor: int = 6, rng_seed: int = 0) -> list[TactileFrame]:
    """Emit ``factor`` variants per frame (first ``factor`` of the expansion list)."""
    if not 1 <= factor <= 6:
        raise ValueError("expansion factor must be between 1 and 6")
    rng = np.random.default_rng(rng_seed)
    out = []
    for frame in frames:
        for spec in expansion_specs(rng)[:factor]:
            out.append(augment(frame, spec))
    return out
