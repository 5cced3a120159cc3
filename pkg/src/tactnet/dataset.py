"""Tactile datasets: persistence, per-class split sampling, synthetic imprints.

The ``TDAT`` container is little-endian::

    b"TDAT" | u16 version | u16 n_names | n_names x (u16 len | utf-8 bytes)
    | u32 N | u16 R | u16 C | N x (u8 label | R*C float32)
"""

from __future__ import annotations

import hashlib
import io
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image_ops import N_CLASSES, SENSOR_SHAPE, TactileFrame, bicubic_resize, normalize_pressure

CLASS_NAMES = (
    "Adhesive", "allen key", "arm", "ball", "bottle", "box", "branch", "cable",
    "cable pipe", "caliper", "can", "finger", "hand", "highlighter pen", "key",
    "pen", "pliers", "rock", "rubber", "scissors", "sticky tape", "tube",
)

TDAT_MAGIC = b"TDAT"
TDAT_VERSION = 1

SPLIT_COUNTS = (32, 8, 10)


class DatasetFormatError(ValueError):
    """Raised for malformed dataset containers or frame files."""


@dataclass
class Dataset:
    frames: list
    class_names: tuple = CLASS_NAMES

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        if len(self.class_names) != N_CLASSES:
            raise ValueError(f"expected {N_CLASSES} class names, got {len(self.class_names)}")
        shapes = {f.values.shape for f in self.frames}
        if len(shapes) > 1:
            raise ValueError(f"frames have mixed shapes {sorted(shapes)}")
        for i, f in enumerate(self.frames):
            if f.label is None:
                raise ValueError(f"frame {i} ({f.source_id or 'unnamed'}) has no label")

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self) -> tuple:
        return self.frames[0].values.shape if self.frames else SENSOR_SHAPE

    @property
    def labels(self) -> np.ndarray:
        return np.array([f.label for f in self.frames], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=N_CLASSES)

    def values(self, idx=None) -> np.ndarray:
        """Stacked ``N x R x C`` float32 pressure maps."""
        frames = self.frames if idx is None else [self.frames[i] for i in idx]
        return stack_frames(frames, self.shape)

    def checksum(self) -> str:
        return hashlib.sha256(dataset_bytes(self)).hexdigest()


def stack_frames(frames, shape=SENSOR_SHAPE) -> np.ndarray:
    if not frames:
        return np.zeros((0, *shape), dtype=np.float32)
    return np.stack([f.values for f in frames]).astype(np.float32, copy=False)


# -- TDAT container --------------------------------------------------------------

def dataset_bytes(dataset: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(TDAT_MAGIC)
    buf.write(struct.pack("<HH", TDAT_VERSION, len(dataset.class_names)))
    for name in dataset.class_names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
    r, c = dataset.shape
    buf.write(struct.pack("<IHH", len(dataset), r, c))
    record = np.dtype([("label", "u1"), ("values", "<f4", (r * c,))])
    recs = np.zeros(len(dataset), dtype=record)
    recs["label"] = dataset.labels
    recs["values"] = dataset.values().reshape(len(dataset), r * c)
    buf.write(recs.tobytes())
    return buf.getvalue()


def save_dataset(dataset: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(dataset))


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if data[:4] != TDAT_MAGIC:
        raise DatasetFormatError(f"{path}: not a TDAT container")

    def take(fmt, offset):
        size = struct.calcsize(fmt)
        if offset + size > len(data):
            raise DatasetFormatError(f"{path}: truncated header")
        return struct.unpack_from(fmt, data, offset), offset + size

    (version, n_names), off = take("<HH", 4)
    if version != TDAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported TDAT version {version}")
    names = []
    for _ in range(n_names):
        (length,), off = take("<H", off)
        if off + length > len(data):
            raise DatasetFormatError(f"{path}: truncated class-name table")
        names.append(data[off:off + length].decode("utf-8"))
        off += length
    (n, r, c), off = take("<IHH", off)
    record = np.dtype([("label", "u1"), ("values", "<f4", (r * c,))])
    expected = off + n * record.itemsize
    if len(data) < expected:
        raise DatasetFormatError(f"{path}: truncated, expected {n} frames of {r}x{c}")
    if len(data) > expected:
        raise DatasetFormatError(f"{path}: {len(data) - expected} trailing bytes")
    recs = np.frombuffer(data, dtype=record, count=n, offset=off)
    bad = np.flatnonzero(recs["label"] >= n_names)
    if bad.size:
        raise DatasetFormatError(f"{path}: frame {bad[0]} has label {recs['label'][bad[0]]} out of range")
    frames = [TactileFrame(recs["values"][i].reshape(r, c).astype(np.float32), int(recs["label"][i]), f"f{i:05d}")
              for i in range(n)]
    return Dataset(frames, tuple(names))


# -- frame CSV import ---------------------------------------------------------------

_CSV_NAME = re.compile(r"^(?P<cls>.+)_(?P<id>[^_]+)\.csv$")


def _class_index(token, class_names):
    lowered = [n.lower() for n in class_names]
    if token.lower() in lowered:
        return lowered.index(token.lower())
    if token.isdigit() and int(token) < len(class_names):
        return int(token)
    raise DatasetFormatError(f"unknown class {token!r}")


def read_frame_csv(path, class_names=CLASS_NAMES, units="normalized", resize=False) -> TactileFrame:
    """Read one ``<class>_<id>.csv`` frame (R lines of C comma-separated values).

    ``units="kpa"`` divides by the sensor full scale. Frames off the native
    grid are rejected unless ``resize`` is set, which resamples bicubically.
    """
    path = Path(path)
    m = _CSV_NAME.match(path.name)
    if not m:
        raise DatasetFormatError(f"{path.name}: file name must look like <class>_<id>.csv")
    label = _class_index(m.group("cls").replace("-", " "), class_names)
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError as exc:
            raise DatasetFormatError(f"{path.name}:{lineno}: {exc}") from None
        if len(rows[-1]) != len(rows[0]):
            raise DatasetFormatError(f"{path.name}:{lineno}: expected {len(rows[0])} values, got {len(rows[-1])}")
    if not rows:
        raise DatasetFormatError(f"{path.name}: empty frame")
    values = np.array(rows)
    if units == "kpa":
        values = normalize_pressure(values)
    elif units != "normalized":
        raise ValueError(f"unknown units {units!r}")
    frame = TactileFrame(values.astype(np.float32), label, path.stem)
    if frame.values.shape != SENSOR_SHAPE:
        if not resize:
            raise DatasetFormatError(f"{path.name}: frame is {frame.rows}x{frame.cols}, expected "
                                     f"{SENSOR_SHAPE[0]}x{SENSOR_SHAPE[1]}")
        frame = bicubic_resize(frame, *SENSOR_SHAPE)
        frame.values = frame.values.astype(np.float32)
    return frame


def import_frame_csvs(directory, class_names=CLASS_NAMES, units="normalized", resize=False) -> Dataset:
    paths = sorted(Path(directory).glob("*.csv"))
    if not paths:
        raise DatasetFormatError(f"{directory}: no .csv frames found")
    return Dataset([read_frame_csv(p, class_names, units, resize) for p in paths], class_names)


def write_frame_csv(values, path) -> None:
    """Write one frame as plain comma-separated rows with round-trip precision."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in np.asarray(values):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# -- splits ----------------------------------------------------------------------------

@dataclass
class SplitPlan:
    seed: int
    train: list
    val: list
    test: list

    def __post_init__(self):
        seen = set()
        for part in (self.train, self.val, self.test):
            if seen & set(part):
                raise ValueError("split subsets overlap")
            seen |= set(part)

    def sizes(self) -> tuple:
        return len(self.train), len(self.val), len(self.test)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": list(self.train), "val": list(self.val), "test": list(self.test)}


def make_splits(dataset: Dataset, trial_seed: int, counts=SPLIT_COUNTS) -> SplitPlan:
    """Seeded per-class shuffle taking ``counts`` = (train, val, test) frames from each class."""
    need = sum(counts)
    labels = dataset.labels
    short = [k for k in range(N_CLASSES) if np.count_nonzero(labels == k) < need]
    if short:
        names = ", ".join(f"{dataset.class_names[k]!r}" for k in short[:5])
        raise ValueError(f"classes {names} have fewer than {need} frames")
    rng = np.random.default_rng(trial_seed)
    parts = ([], [], [])
    for k in range(N_CLASSES):
        idx = rng.permutation(np.flatnonzero(labels == k))
        start = 0
        for part, n in zip(parts, counts):
            part.extend(int(i) for i in idx[start:start + n])
            start += n
    return SplitPlan(int(trial_seed), *(sorted(p) for p in parts))


# -- synthetic imprints ------------------------------------------------------------------
#
# Each class is a signed distance field in tactel units (negative inside),
# evaluated on a posed coordinate grid and mapped to pressure through a
# smooth edge falloff.

def _circle(x, y, r):
    return np.hypot(x, y) - r


def _box(x, y, hx, hy, rounding=0.0):
    qx, qy = np.abs(x) - hx + rounding, np.abs(y) - hy + rounding
    return np.hypot(np.maximum(qx, 0), np.maximum(qy, 0)) + np.minimum(np.maximum(qx, qy), 0) - rounding


def _segment(x, y, ax, ay, bx, by, r):
    px, py, dx, dy = x - ax, y - ay, bx - ax, by - ay
    t = np.clip((px * dx + py * dy) / (dx * dx + dy * dy), 0, 1)
    return np.hypot(px - t * dx, py - t * dy) - r


def _ring(x, y, radius, half_width):
    return np.abs(np.hypot(x, y) - radius) - half_width


def _union(*fields):
    return np.minimum.reduce(fields)


def _polyline(x, y, pts, r):
    return _union(*[_segment(x, y, *a, *b, r) for a, b in zip(pts[:-1], pts[1:])])


def _adhesive(x, y):  # wedge
    return np.maximum.reduce([-x - 7, (0.42 * x + y - 3) / 1.09, (0.42 * x - y - 3) / 1.09, x - 9])


def _allen_key(x, y):  # L-shape of thin bars
    return _union(_segment(x, y, -12, -4, 8, -4, 1.0), _segment(x, y, 8, -4, 8, 5, 1.0))


def _arm(x, y):  # long, tapering thick bar
    taper = 3.0 + 1.6 * np.clip((x + 15) / 30, 0, 1)
    return np.maximum(np.abs(y) - taper, np.abs(x) - 15)


def _ball(x, y):
    return _circle(x, y, 6.0)


def _bottle(x, y):  # wide body plus a collinear neck
    return _union(_box(x, y, 9, 4.5, 2.0), _box(x - 12, y, 4, 1.8, 0.8))


def _box_outline(x, y):
    return np.abs(_box(x, y, 10, 7)) - 1.1


def _branch(x, y):  # curved limb with a side twig
    main = np.abs(np.hypot(x, y - 22) - 22) - 1.4
    main = np.maximum(main, np.abs(x) - 17)
    return _union(main, _segment(x, y, 3, 0.2, 9, -7, 1.1))


def _cable(x, y):  # thin sinuous line across the frame
    return np.maximum(np.abs(y - 3.0 * np.sin(x / 4.5)) - 0.9, np.abs(x) - 22)


def _cable_pipe(x, y):  # two parallel bars
    return _union(_box(x, y - 3.5, 16, 1.3), _box(x, y + 3.5, 16, 1.3))


def _caliper(x, y):  # long beam with two jaws
    return _union(_box(x, y + 3, 17, 1.2), _box(x + 12, y - 2, 1.2, 5), _box(x + 6, y - 2, 1.2, 5))


def _can(x, y):
    return _ring(x, y, 7.5, 1.0)


def _finger(x, y):  # elongated ellipse, approximated by a capsule
    return _segment(x, y, -6, 0, 6, 0, 3.2)


def _hand(x, y):  # palm with five lobes
    palm = _circle(x + 2, y, 5.5)
    fingers = [_segment(x, y, 2, 0, 2 + 9 * np.cos(a), 9 * np.sin(a), 1.5) for a in (-1.1, -0.55, 0.0, 0.55)]
    thumb = _segment(x, y, -2, 3, -6, 9, 1.6)
    return _union(palm, thumb, *fingers)


def _highlighter(x, y):  # medium bar with a wider cap
    return _union(_box(x, y, 11, 1.8, 0.8), _box(x - 10, y, 3, 2.6, 0.8))


def _key(x, y):  # ring head, shaft, teeth
    head = _ring(x + 10, y, 3.5, 1.2)
    shaft = _box(x - 2, y, 9, 0.9)
    teeth = _union(*[_circle(x - t, y - 2.0, 1.0) for t in (0.0, 3.0, 6.0)])
    return _union(head, shaft, teeth)


def _pen(x, y):
    return _segment(x, y, -14, 0, 14, 0, 0.8)


def _pliers(x, y):  # two splayed handles joined at a pivot
    return _union(_segment(x, y, -4, 0, 12, 5, 1.6), _segment(x, y, -4, 0, 12, -5, 1.6),
                  _circle(x + 5, y, 2.8))


def _rock(x, y):  # irregular cluster of overlapping lobes
    return _union(_circle(x, y, 4.5), _circle(x - 4, y + 2, 3.5), _circle(x + 3.5, y - 2.5, 3.0),
                  _circle(x + 1, y + 3.5, 2.8))


def _rubber(x, y):  # small solid eraser block
    return _box(x, y, 5, 3, 1.0)


def _scissors(x, y):  # crossed blades and two ring handles
    blades = _union(_segment(x, y, -2, -2.5, 14, 1.5, 0.9), _segment(x, y, -2, 2.5, 14, -1.5, 0.9))
    handles = _union(_ring(x + 7, y - 4, 2.6, 0.8), _ring(x + 7, y + 4, 2.6, 0.8))
    return _union(blades, handles)


def _sticky_tape(x, y):  # thick annulus section
    return np.maximum(_ring(x, y, 8.0, 2.4), -(y + 3.0))


def _tube(x, y):  # long uniform thick bar
    return _box(x, y, 17, 2.8, 2.8)


GENERATORS = (
    _adhesive, _allen_key, _arm, _ball, _bottle, _box_outline, _branch, _cable,
    _cable_pipe, _caliper, _can, _finger, _hand, _highlighter, _key, _pen,
    _pliers, _rock, _rubber, _scissors, _sticky_tape, _tube,
)

POSE_ROTATION_DEG = 20.0
POSE_SHIFT = (3.0, 4.0)  # rows, cols
POSE_SCALE = (0.9, 1.1)
EDGE_SOFTNESS = 1.5
NOISE_SIGMA = 0.02


def render_imprint(label: int, rng: np.random.Generator, shape=SENSOR_SHAPE) -> np.ndarray:
    """One posed, noisy, clamped pressure imprint of class ``label``."""
    rows, cols = shape
    theta = np.deg2rad(rng.uniform(-POSE_ROTATION_DEG, POSE_ROTATION_DEG))
    cy = (rows - 1) / 2 + rng.uniform(-POSE_SHIFT[0], POSE_SHIFT[0])
    cx = (cols - 1) / 2 + rng.uniform(-POSE_SHIFT[1], POSE_SHIFT[1])
    scale = rng.uniform(*POSE_SCALE)
    peak = rng.uniform(0.3, 1.0)
    tilt = rng.uniform(-0.015, 0.015, size=2)
    r, c = np.mgrid[:rows, :cols].astype(np.float64)
    dy, dx = r - cy, c - cx
    x = (np.cos(theta) * dx + np.sin(theta) * dy) / scale
    y = (-np.sin(theta) * dx + np.cos(theta) * dy) / scale
    depth = np.clip(-GENERATORS[label](x, y) * scale / EDGE_SOFTNESS, 0.0, 1.0)
    profile = depth * depth * (3 - 2 * depth)
    # uneven contact: a gentle pressure gradient across the object
    gain = np.clip(1.0 + tilt[0] * x + tilt[1] * y, 0.6, 1.4)
    values = peak * profile * gain + rng.normal(0.0, NOISE_SIGMA, size=shape)
    return np.clip(values, 0.0, 1.0).astype(np.float32)


def synthesize_dataset(n_per_class: int = 50, seed: int = 0) -> Dataset:
    """Procedural 22-class dataset on the native 28x50 grid, class-major order."""
    if n_per_class < 0:
        raise ValueError("n_per_class must be non-negative")
    rng = np.random.default_rng(seed)
    frames = []
    for label in range(N_CLASSES):
        for _ in range(n_per_class):
            frames.append(TactileFrame(render_imprint(label, rng), label, f"f{len(frames):05d}"))
    return Dataset(frames)
