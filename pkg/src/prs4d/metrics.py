"""
Bit-metric figures of merit: LLRs, GMI/NGMI, BER and threshold crossings.

SNR convention
--------------
``snr_db`` is Es/N0 per 4D symbol with Es = 1 and N0 = 4 * sigma2, where
``sigma2`` is the noise variance per real dimension. Because each
polarization carries Es/2 against 2 * sigma2 of noise, the per-polarization
Es/N0 has the same value.

LLR sign convention: ``L > 0`` favors bit 0.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from prs4d.constellation import Constellation4D

LLR_CLIP = 50.0
CHUNK_SYMBOLS = 1 << 14


def noise_variance(snr_db) -> np.ndarray | float:
    """Noise variance per real dimension for a unit-energy 4D symbol."""
    return 1.0 / (4.0 * 10.0 ** (np.asarray(snr_db, dtype=float) / 10.0))


def snr_db_from_variance(sigma2) -> np.ndarray | float:
    return 10.0 * np.log10(1.0 / (4.0 * np.asarray(sigma2, dtype=float)))


@dataclass(frozen=True)
class GmiEstimate:
    value: float
    std_error: float
    sample_count: int


@dataclass(frozen=True)
class CurvePoint:
    snr_db: float
    gmi: GmiEstimate
    ber: float

    def ngmi(self, m: int) -> float:
        return ngmi(self.gmi, m)


def _sq_distances(c: Constellation4D, y: np.ndarray) -> np.ndarray:
    p = c.points
    d = np.sum(y**2, axis=1)[:, None] - 2.0 * y @ p.T + np.sum(p**2, axis=1)[None, :]
    return np.maximum(d, 0.0)


def _bit_partitions(c: Constellation4D) -> tuple[np.ndarray, np.ndarray]:
    """Point indices with bit i equal to 0 (resp. 1), each ``(m, M/2)``."""
    bits = c.bits
    zeros = np.stack([np.flatnonzero(bits[:, i] == 0) for i in range(bits.shape[1])])
    ones = np.stack([np.flatnonzero(bits[:, i] == 1) for i in range(bits.shape[1])])
    return zeros, ones


def _lse(a: np.ndarray) -> np.ndarray:
    amax = a.max(axis=-1, keepdims=True)
    return amax[..., 0] + np.log(np.sum(np.exp(a - amax), axis=-1))


def _check_sigma2(sigma2: float) -> None:
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")


def llr_exact(c: Constellation4D, y: np.ndarray, sigma2: float) -> np.ndarray:
    """
    Exact bitwise LLRs for Gaussian noise of variance ``sigma2`` per real dimension.

    Returns an ``(N, m)`` array.
    """
    _check_sigma2(sigma2)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    metric = -_sq_distances(c, y) / (2.0 * sigma2)
    zeros, ones = _bit_partitions(c)
    return _lse(metric[:, zeros]) - _lse(metric[:, ones])


def llr_maxlog(c: Constellation4D, y: np.ndarray, sigma2: float) -> np.ndarray:
    """Max-log approximation of :func:`llr_exact`."""
    _check_sigma2(sigma2)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    metric = -_sq_distances(c, y) / (2.0 * sigma2)
    zeros, ones = _bit_partitions(c)
    return metric[:, zeros].max(axis=-1) - metric[:, ones].max(axis=-1)


def gmi_summands(tx_bits: np.ndarray, llrs: np.ndarray) -> np.ndarray:
    """Per-symbol bit-metric loss ``sum_i log2(1 + exp(-(1 - 2 b) L))`` after clipping."""
    tx_bits = np.asarray(tx_bits)
    llrs = np.asarray(llrs, dtype=float)
    if tx_bits.shape != llrs.shape:
        raise ValueError(f"bit/LLR shape mismatch: {tx_bits.shape} vs {llrs.shape}")
    if llrs.ndim == 1:
        llrs = llrs[:, None]
        tx_bits = tx_bits[:, None]
    signed = (1.0 - 2.0 * tx_bits) * np.clip(llrs, -LLR_CLIP, LLR_CLIP)
    return np.sum(np.logaddexp(0.0, -signed), axis=1) / np.log(2.0)


def gmi_from_llrs(tx_bits: np.ndarray, llrs: np.ndarray) -> GmiEstimate:
    """
    Monte-Carlo GMI in bits per symbol from transmitted bits and LLRs, both ``(N, m)``.

    The standard error is that of the mean of the per-symbol summand.
    """
    llrs = np.asarray(llrs, dtype=float)
    m = 1 if llrs.ndim == 1 else llrs.shape[1]
    loss = gmi_summands(tx_bits, llrs)
    n = loss.size
    se = float(np.std(loss, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return GmiEstimate(float(m - loss.mean()), se, int(n))


def ngmi(gmi: GmiEstimate | float, m: int) -> float:
    if m <= 0:
        raise ValueError("m must be positive")
    value = gmi.value if isinstance(gmi, GmiEstimate) else float(gmi)
    return value / m


def ber_count(tx_bits, rx_bits) -> tuple[int, int, float]:
    tx = np.asarray(tx_bits).reshape(-1)
    rx = np.asarray(rx_bits).reshape(-1)
    if tx.shape != rx.shape:
        raise ValueError(f"length mismatch: {tx.size} vs {rx.size}")
    errors = int(np.count_nonzero(tx != rx))
    total = int(tx.size)
    return errors, total, errors / total if total else 0.0


def _chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    # Counter-based stream per chunk: results do not depend on how chunks are
    # distributed over workers.
    return np.random.Generator(np.random.Philox(key=np.uint64(seed), counter=[0, 0, 0, chunk]))


def awgn_batch(c: Constellation4D, snr_db: float, n: int, seed: int, chunk: int = 0):
    """
    One chunk of AWGN symbols: ``(indices, y, sigma2)``.

    The same ``(seed, chunk)`` produces the same indices and unit-variance noise
    for every constellation and SNR (common random numbers).
    """
    rng = _chunk_rng(seed, chunk)
    idx = rng.integers(0, c.size, n)
    z = rng.standard_normal((n, 4))
    sigma2 = float(noise_variance(snr_db))
    return idx, c.points[idx] + np.sqrt(sigma2) * z, sigma2


def _llr_fused(c: Constellation4D, y: np.ndarray, sigma2: float):
    """
    LLRs via one exponential per point and a matmul over bit partitions.

    Agrees with :func:`llr_exact` wherever ``|L|`` stays below ~700 nats; larger
    magnitudes saturate, which the GMI clip makes irrelevant. Also returns the
    nearest-point index.
    """
    d = _sq_distances(c, y)
    nearest = np.argmin(d, axis=1)
    metric = d[np.arange(len(d)), nearest][:, None] - d
    metric /= 2.0 * sigma2
    e = np.exp(metric)
    bits = c.bits.astype(float)
    s1 = e @ bits
    s0 = e @ (1.0 - bits)
    tiny = np.finfo(float).tiny
    return np.log(np.maximum(s0, tiny)) - np.log(np.maximum(s1, tiny)), nearest


def _sweep_chunk(c, snr_db, n, seed, chunk, maxlog):
    idx, y, sigma2 = awgn_batch(c, snr_db, n, seed, chunk)
    bits = c.bits[idx]
    if maxlog:
        llr = llr_maxlog(c, y, sigma2)
        nearest = np.argmin(_sq_distances(c, y), axis=1)
    else:
        llr, nearest = _llr_fused(c, y, sigma2)
    loss = gmi_summands(bits, llr)
    errs = int(np.count_nonzero(c.bits[nearest] != bits))
    return loss.sum(), np.sum(loss**2), errs


def awgn_gmi_sweep(
    c: Constellation4D,
    snr_grid: Sequence[float],
    n_symbols: int,
    seed: int,
    maxlog: bool = False,
    workers: int = 1,
    chunk_symbols: int = CHUNK_SYMBOLS,
) -> list[CurvePoint]:
    """
    GMI and hard-decision BER versus SNR on the AWGN channel.

    Noise is drawn in fixed-size chunks from counter-based streams, so the
    result is bit-identical for any ``workers``.
    """
    grid = [float(s) for s in snr_grid]
    if not grid:
        raise ValueError("empty SNR grid")
    if n_symbols < 2:
        raise ValueError("n_symbols must be at least 2")
    sizes = [min(chunk_symbols, n_symbols - s) for s in range(0, n_symbols, chunk_symbols)]
    m = c.bits_per_symbol
    jobs = [(snr, j, size) for snr in grid for j, size in enumerate(sizes)]

    def run(job):
        snr, j, size = job
        return _sweep_chunk(c, snr, size, seed, j, maxlog)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(job) for job in jobs]

    curve = []
    per = len(sizes)
    for g, snr in enumerate(grid):
        block = parts[g * per:(g + 1) * per]
        s1 = float(sum(p[0] for p in block))
        s2 = float(sum(p[1] for p in block))
        errs = sum(p[2] for p in block)
        mean = s1 / n_symbols
        var = max(s2 / n_symbols - mean**2, 0.0) * n_symbols / (n_symbols - 1)
        est = GmiEstimate(m - mean, float(np.sqrt(var / n_symbols)), n_symbols)
        curve.append(CurvePoint(snr, est, errs / (n_symbols * m)))
    return curve


def required_snr_at(curve: Iterable, threshold_bits: float) -> float:
    """
    SNR where the curve first reaches ``threshold_bits``, by linear interpolation.

    ``curve`` holds :class:`CurvePoint` items or ``(snr_db, value)`` pairs and
    must be sorted by SNR.
    """
    pts = [_as_pair(p) for p in curve]
    if not pts:
        raise ValueError("empty curve")
    for (s0, g0), (s1, g1) in zip(pts, pts[1:]):
        if g0 == threshold_bits:
            return s0
        if (g0 - threshold_bits) * (g1 - threshold_bits) < 0 or g1 == threshold_bits:
            return s0 + (threshold_bits - g0) * (s1 - s0) / (g1 - g0)
    if pts[-1][1] == threshold_bits:
        return pts[-1][0]
    raise ValueError(f"threshold {threshold_bits} not bracketed by the curve")


def snr_at_ber(curve: Iterable, ber_threshold: float) -> float:
    """SNR where BER falls to ``ber_threshold``, interpolating log10(BER) linearly in dB."""
    pts = [(p.snr_db, p.ber) if isinstance(p, CurvePoint) else tuple(p) for p in curve]
    logged = [(s, np.log10(max(b, 1e-300))) for s, b in pts]
    return required_snr_at(logged, float(np.log10(ber_threshold)))


def _as_pair(p) -> tuple[float, float]:
    if isinstance(p, CurvePoint):
        return p.snr_db, p.gmi.value
    s, g = p
    return float(s), float(g.value if isinstance(g, GmiEstimate) else g)


CURVE_SCHEMA = "gmi_curve/1"


def write_curve_csv(curve: Sequence[CurvePoint], m: int, path) -> None:
    path = Path(path)
    with path.open("w", newline="\n", encoding="utf-8") as fh:
        fh.write(f"# schema={CURVE_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snr_db", "gmi", "gmi_stderr", "ngmi", "ber"])
        for p in curve:
            w.writerow(
                [
                    f"{p.snr_db:.4f}",
                    f"{p.gmi.value:.8f}",
                    f"{p.gmi.std_error:.8f}",
                    f"{ngmi(p.gmi, m):.8f}",
                    f"{p.ber:.8e}",
                ]
            )
