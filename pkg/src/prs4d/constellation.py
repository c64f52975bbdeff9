"""
Four-dimensional constellations for dual-polarization coherent transmission.

A 4D point is stored as ``[Re Ex, Im Ex, Re Ey, Im Ey]``. Every
:class:`Constellation4D` is normalized to unit mean symbol energy.

Built-in formats
----------------
pm8qam :
    Cartesian product of a star (two-ring) 8QAM with itself.
pm8qam-hex :
    Cartesian product of a hexagonal-lattice 8QAM with itself.
2a8psk :
    6b4D-2A8PSK, two-amplitude 8PSK in each polarization with complementary
    ring selection, so every symbol has the same 4D energy.
4d-64prs :
    Constant-modulus polarization-ring-switching format with 16 states of
    polarization and 4 absolute phases per state (coordinates shipped as a
    CSV produced by :mod:`prs4d.optimizer`).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

CSV_HEADER = ["x1", "x2", "x3", "x4", "label"]

# GMI-maximizing ring ratio r_inner/r_outer of 6b4D-2A8PSK near NGMI 0.85.
DEFAULT_RING_RATIO = 0.65

_POINT_TOL = 1e-9


class ConstellationError(ValueError):
    """Invalid constellation geometry, labeling or file."""


def _gray(n: int) -> np.ndarray:
    i = np.arange(1 << n)
    return i ^ (i >> 1)


def label_bits(labels: np.ndarray, m: int) -> np.ndarray:
    """Bits of integer labels, most-significant first, shape ``(len, m)``."""
    labels = np.asarray(labels, dtype=np.int64)
    return ((labels[..., None] >> np.arange(m - 1, -1, -1)) & 1).astype(np.int8)


def bits_to_labels(bits: np.ndarray) -> np.ndarray:
    """Inverse of :func:`label_bits` along the last axis."""
    bits = np.asarray(bits, dtype=np.int64)
    m = bits.shape[-1]
    return bits @ (1 << np.arange(m - 1, -1, -1))


@dataclass(frozen=True)
class Constellation4D:
    """
    Labeled set of ``M = 2**m`` points in four real dimensions.

    ``points[i]`` carries label ``labels[i]``. Points are rescaled to unit mean
    energy on construction.
    """

    points: np.ndarray
    labels: np.ndarray
    name: str = "custom"
    _index_of_label: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        labs = np.array(self.labels, dtype=np.int64).reshape(-1)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ConstellationError(f"points must have shape (M, 4), got {pts.shape}")
        n = pts.shape[0]
        m = int(round(np.log2(n))) if n > 0 else 0
        if n < 2 or (1 << m) != n:
            raise ConstellationError(f"point count must be a power of two >= 2, got {n}")
        if labs.shape != (n,):
            raise ConstellationError("one label per point required")
        if not np.all(np.isfinite(pts)):
            raise ConstellationError("non-finite coordinates")
        if np.any(labs < 0) or np.any(labs >= n) or len(np.unique(labs)) != n:
            raise ConstellationError("label collision: labels must be a bijection onto 0..M-1")
        energy = np.mean(np.sum(pts**2, axis=1))
        if energy <= 0:
            raise ConstellationError("zero-energy constellation")
        pts = pts / np.sqrt(energy)
        if _min_pair_distance(pts) <= _POINT_TOL:
            raise ConstellationError("coincident points")
        pts.setflags(write=False)
        labs.setflags(write=False)
        inv = np.empty(n, dtype=np.int64)
        inv[labs] = np.arange(n)
        inv.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labs)
        object.__setattr__(self, "_index_of_label", inv)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def bits_per_symbol(self) -> int:
        return int(round(np.log2(self.size)))

    @property
    def bits(self) -> np.ndarray:
        """Label bits per point index, shape ``(M, m)``."""
        return label_bits(self.labels, self.bits_per_symbol)

    @property
    def by_label(self) -> np.ndarray:
        """Points reordered so that row ``l`` carries label ``l``."""
        return self.points[self._index_of_label]

    def index_of_label(self, labels) -> np.ndarray:
        return self._index_of_label[np.asarray(labels, dtype=np.int64)]

    def complex_points(self) -> np.ndarray:
        """``(M, 2)`` complex view ``[Ex, Ey]``."""
        return self.points[:, 0::2] + 1j * self.points[:, 1::2]

    def with_labels(self, labels, name: str | None = None) -> "Constellation4D":
        return Constellation4D(self.points, labels, name or self.name)

    def with_points(self, points, name: str | None = None) -> "Constellation4D":
        return Constellation4D(points, self.labels, name or self.name)


@dataclass(frozen=True)
class JonesSymbol:
    ex: complex
    ey: complex

    def __post_init__(self):
        if not (np.isfinite(self.ex) and np.isfinite(self.ey)):
            raise ValueError("Jones components must be finite")


@dataclass(frozen=True)
class StokesVector:
    s0: float
    s1: float
    s2: float
    s3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.s0, self.s1, self.s2, self.s3])


@dataclass(frozen=True)
class PrsParams:
    """
    Structure of a polarization-ring-switching format.

    Point ``k * base_phase_count + q`` is the Jones vector of SOP ``k`` with
    absolute phase ``phase_offsets[k] + 2*pi*q/base_phase_count``.
    """

    sop_directions: np.ndarray
    phase_offsets: np.ndarray
    base_phase_count: int = 4
    labels: np.ndarray | None = None

    def __post_init__(self):
        dirs = np.array(self.sop_directions, dtype=float)
        phases = np.array(self.phase_offsets, dtype=float).reshape(-1)
        if dirs.ndim != 2 or dirs.shape[1] != 3:
            raise ConstellationError("sop_directions must have shape (K, 3)")
        if phases.shape != (dirs.shape[0],):
            raise ConstellationError("one phase offset per SOP required")
        if np.max(np.abs(np.linalg.norm(dirs, axis=1) - 1)) > 1e-12:
            raise ConstellationError("SOP directions must be unit vectors")
        if self.base_phase_count < 1:
            raise ConstellationError("base_phase_count must be positive")
        object.__setattr__(self, "sop_directions", dirs)
        object.__setattr__(self, "phase_offsets", phases)


def _min_pair_distance(points: np.ndarray) -> float:
    sq = np.sum(points**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2 * points @ points.T
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(max(d2.min(), 0.0)))


def _from_jones(ex: np.ndarray, ey: np.ndarray) -> np.ndarray:
    return np.stack([ex.real, ex.imag, ey.real, ey.imag], axis=-1)


# --------------------------------------------------------------------------
# 2D building blocks
# --------------------------------------------------------------------------


def star_8qam() -> tuple[np.ndarray, np.ndarray]:
    """
    Star 8QAM: outer square on the axes, inner square rotated by 45 degrees.

    The ring ratio (sqrt(2) + sqrt(6)) / 2 equalizes inner-inner and
    inner-outer distances. The labeling is the best binary labeling found by
    exhaustive search of the 2D GMI near 9 dB.
    """
    r_in = 1.0
    r_out = (np.sqrt(2) + np.sqrt(6)) / 2
    outer = r_out * np.exp(0.5j * np.pi * np.arange(4))
    inner = r_in * np.exp(1j * (np.pi / 4 + 0.5 * np.pi * np.arange(4)))
    pts = np.concatenate([outer, inner])
    labels = np.array([1, 5, 2, 7, 0, 4, 6, 3])
    return pts, labels


def hex_8qam() -> tuple[np.ndarray, np.ndarray]:
    """Minimum-energy 8-point subset of the hexagonal lattice, zero mean."""
    h = np.sqrt(3) / 2
    pts = np.array(
        [
            0 - 0.25j * h,
            -0.5 - 1.25j * h,
            -0.5 + 0.75j * h,
            -1 - 0.25j * h,
            0.5 + 0.75j * h,
            0.5 - 1.25j * h,
            1 - 0.25j * h,
            0 + 1.75j * h,
        ]
    )
    labels = np.array([0, 4, 2, 6, 3, 5, 1, 7])
    return pts, labels


# --------------------------------------------------------------------------
# Generators
# --------------------------------------------------------------------------


def make_pm8qam(variant: str = "star-2ring") -> Constellation4D:
    """
    PM-8QAM as the product of one 2D 8QAM per polarization.

    The 6-bit label is ``3 bits X | 3 bits Y``.
    """
    if variant == "star-2ring":
        pts2, lab2 = star_8qam()
        name = "pm8qam"
    elif variant == "optimum-hex":
        pts2, lab2 = hex_8qam()
        name = "pm8qam-hex"
    else:
        raise ConstellationError(f"unknown PM-8QAM variant {variant!r}")
    ix, iy = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    ix, iy = ix.ravel(), iy.ravel()
    points = _from_jones(pts2[ix], pts2[iy])
    labels = lab2[ix] * 8 + lab2[iy]
    return Constellation4D(points, labels, name)


def make_2a8psk_6b(ring_ratio: float = DEFAULT_RING_RATIO) -> Constellation4D:
    """
    6b4D-2A8PSK.

    Bits ``b0..b2`` pick the X phase and ``b3..b5`` the Y phase (Gray-coded
    8PSK). The parity of all six bits selects which polarization uses the
    inner ring, so ``|Ex|^2 + |Ey|^2`` is identical for every symbol.
    """
    if not 0.0 < ring_ratio < 1.0:
        raise ConstellationError(f"ring_ratio must lie in (0, 1), got {ring_ratio}")
    gray = _gray(3)
    phase_index = np.empty(8, dtype=np.int64)
    phase_index[gray] = np.arange(8)
    labels = np.arange(64)
    px = phase_index[labels >> 3]
    py = phase_index[labels & 7]
    parity = label_bits(labels, 6).sum(axis=1) % 2
    rx = np.where(parity == 0, ring_ratio, 1.0)
    ry = np.where(parity == 0, 1.0, ring_ratio)
    ex = rx * np.exp(2j * np.pi * px / 8)
    ey = ry * np.exp(2j * np.pi * py / 8)
    return Constellation4D(_from_jones(ex, ey), labels, "2a8psk")


def jones_from_sop(direction: np.ndarray, phase: np.ndarray | float = 0.0) -> np.ndarray:
    """
    Unit-power Jones vectors ``(..., 2)`` with the given Stokes directions.

    ``Ex`` is real and non-negative before the absolute phase is applied.
    """
    d = np.asarray(direction, dtype=float)
    s1, s2, s3 = d[..., 0], d[..., 1], d[..., 2]
    ax = np.sqrt(np.clip((1 + s1) / 2, 0, 1))
    ay = np.sqrt(np.clip((1 - s1) / 2, 0, 1))
    delta = np.arctan2(s3, s2)
    rot = np.exp(1j * np.asarray(phase))
    return np.stack([ax * rot, ay * np.exp(1j * delta) * rot], axis=-1)


def make_prs64(params: PrsParams, name: str = "prs64") -> Constellation4D:
    """Constant-modulus PRS format from SOP directions and phase offsets."""
    q = params.base_phase_count
    k = params.sop_directions.shape[0]
    phases = params.phase_offsets[:, None] + 2 * np.pi * np.arange(q)[None, :] / q
    jones = jones_from_sop(params.sop_directions[:, None, :], phases).reshape(k * q, 2)
    points = _from_jones(jones[:, 0], jones[:, 1])
    labels = np.arange(k * q) if params.labels is None else params.labels
    if _min_pair_distance(points) <= _POINT_TOL:
        raise ConstellationError("PRS parameters yield coincident points")
    return Constellation4D(points, labels, name)


def prs_params_from(c: Constellation4D, phase_count: int = 4, tol: float = 1e-9) -> PrsParams:
    """
    Decompose a constellation into PRS parameters.

    Requires the point set to be closed under a common rotation by
    ``2*pi/phase_count``; raises :class:`ConstellationError` otherwise.
    """
    orbits = rotation_orbits(c, phase_count, tol)
    jones = c.complex_points()
    reps = jones[orbits[:, 0]]
    s = stokes_vectors(c.points[orbits[:, 0]])
    dirs = s[:, 1:] / s[:, :1]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ref = jones_from_sop(dirs)
    # Ex of the reference is real; phase taken from whichever component is larger.
    use_x = np.abs(ref[:, 0]) >= np.abs(ref[:, 1])
    phase = np.where(
        use_x,
        np.angle(reps[:, 0]) - np.angle(ref[:, 0]),
        np.angle(reps[:, 1]) - np.angle(ref[:, 1]),
    )
    labels = c.labels[orbits.reshape(-1)]
    return PrsParams(dirs, phase, phase_count, labels)


def rotation_orbits(c: Constellation4D, count: int = 4, tol: float = 1e-9) -> np.ndarray:
    """
    Group points into orbits of the common phase rotation by ``2*pi/count``.

    Returns an ``(M // count, count)`` index array whose row ``k`` holds the
    point indices of orbit ``k`` in rotation order.
    """
    jones = c.complex_points()
    rot = np.exp(2j * np.pi / count)
    n = c.size
    if n % count:
        raise ConstellationError(f"{n} points cannot form orbits of size {count}")
    seen = np.zeros(n, dtype=bool)
    rows = []
    for i in range(n):
        if seen[i]:
            continue
        row = [i]
        cur = jones[i]
        for _ in range(count - 1):
            cur = cur * rot
            d = np.sum(np.abs(jones - cur) ** 2, axis=1)
            j = int(np.argmin(d))
            if d[j] > tol**2 or seen[j] or j in row:
                raise ConstellationError("point set is not closed under the common phase rotation")
            row.append(j)
        seen[row] = True
        rows.append(row)
    return np.array(rows, dtype=np.int64)


# --------------------------------------------------------------------------
# CSV import / export
# --------------------------------------------------------------------------


def load_constellation(path, name: str | None = None, expected_points: int | None = 64) -> Constellation4D:
    """
    Read a constellation CSV (``x1,x2,x3,x4,label`` header plus one row per point).

    Raises :class:`ConstellationError` on parse failure, wrong row count,
    duplicate labels or duplicate points.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_constellation(text, name or path.stem, expected_points)


def parse_constellation(text: str, name: str = "custom", expected_points: int | None = 64) -> Constellation4D:
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")]
    if not rows or [h.strip() for h in rows[0]] != CSV_HEADER:
        raise ConstellationError(f"parse failure: expected header {','.join(CSV_HEADER)}")
    data = rows[1:]
    if expected_points is not None and len(data) != expected_points:
        raise ConstellationError(f"wrong row count: expected {expected_points}, got {len(data)}")
    points = np.empty((len(data), 4))
    labels = np.empty(len(data), dtype=np.int64)
    for i, row in enumerate(data, start=2):
        if len(row) != 5:
            raise ConstellationError(f"parse failure on line {i}: expected 5 fields")
        try:
            points[i - 2] = [float(v) for v in row[:4]]
            labels[i - 2] = int(row[4])
        except ValueError as exc:
            raise ConstellationError(f"parse failure on line {i}: {exc}") from None
    if len(np.unique(labels)) != len(labels):
        raise ConstellationError("label collision")
    if len(points) >= 2 and _min_pair_distance(points) <= _POINT_TOL:
        raise ConstellationError("duplicate point")
    return Constellation4D(points, labels, name)


def format_constellation(c: Constellation4D) -> str:
    out = io.StringIO()
    out.write(",".join(CSV_HEADER) + "\n")
    for p, lab in zip(c.points, c.labels):
        out.write(",".join(repr(float(v)) for v in p) + f",{int(lab)}\n")
    return out.getvalue()


def save_constellation(c: Constellation4D, path) -> None:
    Path(path).write_text(format_constellation(c), encoding="utf-8", newline="\n")


# --------------------------------------------------------------------------
# Built-in registry
# --------------------------------------------------------------------------

PRS_RESOURCE = "4d-64prs.csv"


def load_builtin_prs() -> Constellation4D:
    text = resources.files("prs4d.data").joinpath(PRS_RESOURCE).read_text(encoding="utf-8")
    return parse_constellation(text, "4d-64prs")


BUILTIN_FORMATS = {
    "pm8qam": lambda: make_pm8qam("star-2ring"),
    "pm8qam-hex": lambda: make_pm8qam("optimum-hex"),
    "2a8psk": lambda: make_2a8psk_6b(DEFAULT_RING_RATIO),
    "4d-64prs": load_builtin_prs,
}


def get_format(name: str) -> Constellation4D:
    """Built-in format by name, or a CSV path."""
    if name in BUILTIN_FORMATS:
        return BUILTIN_FORMATS[name]()
    if Path(name).suffix == ".csv" and Path(name).exists():
        return load_constellation(name)
    raise ConstellationError(f"unknown format {name!r}; built-ins: {', '.join(BUILTIN_FORMATS)}")


# --------------------------------------------------------------------------
# Stokes-space analysis
# --------------------------------------------------------------------------


def to_stokes(s: JonesSymbol) -> StokesVector:
    """Jones to Stokes with ``s3 = -2 Im(Ex conj(Ey))``."""
    ex, ey = complex(s.ex), complex(s.ey)
    cross = ex * np.conj(ey)
    return StokesVector(
        abs(ex) ** 2 + abs(ey) ** 2,
        abs(ex) ** 2 - abs(ey) ** 2,
        2 * cross.real,
        -2 * cross.imag,
    )


def stokes_vectors(points: np.ndarray) -> np.ndarray:
    """Vectorized :func:`to_stokes` on ``(N, 4)`` real points, returns ``(N, 4)``."""
    p = np.asarray(points, dtype=float)
    ex = p[:, 0] + 1j * p[:, 1]
    ey = p[:, 2] + 1j * p[:, 3]
    px, py = np.abs(ex) ** 2, np.abs(ey) ** 2
    cross = ex * np.conj(ey)
    return np.stack([px + py, px - py, 2 * cross.real, -2 * cross.imag], axis=1)


def distinct_sops(c: Constellation4D, tol: float = 1e-6) -> int:
    """Number of distinct normalized Stokes directions (greedy clustering at ``tol``)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    s = stokes_vectors(c.points)
    dirs = s[:, 1:] / s[:, :1]
    reps: list[np.ndarray] = []
    for d in dirs:
        if not any(np.linalg.norm(d - r) <= tol for r in reps):
            reps.append(d)
    return len(reps)


def energy_variance(c: Constellation4D | np.ndarray) -> float:
    pts = c.points if isinstance(c, Constellation4D) else np.asarray(c, dtype=float)
    return float(np.var(np.sum(pts**2, axis=1)))


def min_distance(c: Constellation4D | np.ndarray) -> float:
    pts = c.points if isinstance(c, Constellation4D) else np.asarray(c, dtype=float)
    return _min_pair_distance(pts)


# --------------------------------------------------------------------------
# Mapping
# --------------------------------------------------------------------------


def map_bits(c: Constellation4D, bits: Sequence[int] | np.ndarray) -> np.ndarray:
    """Map a flat bit stream (MSB first per symbol) to point indices."""
    bits = np.asarray(bits, dtype=np.int64).reshape(-1)
    m = c.bits_per_symbol
    if bits.size % m:
        raise ValueError(f"bit stream length {bits.size} not divisible by {m}")
    return c.index_of_label(bits_to_labels(bits.reshape(-1, m)))


def nearest_index(c: Constellation4D, y: np.ndarray) -> np.ndarray:
    """
    Index of the nearest point for each row of ``y``.

    Ties go to the point with the lowest label.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    by_label = c.by_label
    d = np.sum(y**2, axis=1)[:, None] - 2 * y @ by_label.T + np.sum(by_label**2, axis=1)[None, :]
    # Columns are ordered by label; argmax picks the first (lowest) label among
    # near-equal minima so that geometric ties survive rounding.
    near = d <= d.min(axis=1, keepdims=True) + 1e-12 * (1.0 + np.abs(d).max(axis=1, keepdims=True))
    return c.index_of_label(np.argmax(near, axis=1))


def demap_hard(c: Constellation4D, y: np.ndarray) -> np.ndarray:
    """Label bits of the minimum-distance point; ``(m,)`` for one point, ``(N, m)`` for many."""
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    bits = c.bits[nearest_index(c, y)]
    return bits[0] if single else bits
