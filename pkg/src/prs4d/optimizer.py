"""
GMI-maximizing geometric shaping of 4D constellations.

Coordinates are moved by projected gradient ascent on a Monte-Carlo GMI
estimate. Every iteration draws a fresh noise batch; a step is kept only if
it does not lower the GMI on that same batch (common random numbers). The
trace reports every iterate on one fixed evaluation batch. Labels are improved separately by pairwise-swap hill climbing.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from prs4d.constellation import Constellation4D, ConstellationError, rotation_orbits
from prs4d.metrics import awgn_batch, awgn_gmi_sweep, required_snr_at

log = logging.getLogger(__name__)

CONSTRAINTS = ("constant-modulus", "prs-structured", "unconstrained")
GRADIENTS = ("reparameterized-analytic", "finite-difference")
MAX_HALVINGS = 5
# Seed offset separating the fixed evaluation batch from per-iteration batches.
_EVAL_STREAM = 1 << 20


class OptimizerError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    target_snr_db: float | None = None
    max_iters: int = 300
    step_size: float = 0.5
    n_mc_symbols: int = 10000
    seed: int = 0
    constraint: str = "constant-modulus"
    gradient: str = "reparameterized-analytic"
    prs_phase_count: int = 4
    # Random perturbation of the start point; symmetric starts are saddle points.
    init_jitter: float = 0.0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.constraint not in CONSTRAINTS:
            raise ValueError(f"constraint must be one of {CONSTRAINTS}")
        if self.gradient not in GRADIENTS:
            raise ValueError(f"gradient must be one of {GRADIENTS}")
        if self.init_jitter < 0:
            raise ValueError("init_jitter must be non-negative")
        if self.n_mc_symbols < 2:
            raise ValueError("n_mc_symbols must be at least 2")


@dataclass(frozen=True)
class TraceRow:
    iter: int
    gmi: float
    gmi_stderr: float
    step: float


@dataclass
class OptimizationResult:
    constellation: Constellation4D
    trace: list[TraceRow] = field(default_factory=list)
    target_snr_db: float = float("nan")


# --------------------------------------------------------------------------
# GMI estimate and its gradient on a fixed batch
# --------------------------------------------------------------------------


def _softmax_terms(points, bits, sigma2, idx, z):
    y = points[idx] + z
    diff = y[:, None, :] - points[None, :, :]
    d = np.sum(diff**2, axis=2)
    a = -d / (2.0 * sigma2)
    a -= a.max(axis=1, keepdims=True)
    e = np.exp(a)
    s_all = e.sum(axis=1)
    s1 = e @ bits
    s0 = e @ (1.0 - bits)
    tx = bits[idx]
    s_match = np.where(tx == 1, s1, s0)
    return diff, e, s_all, s_match, tx


def batch_gmi(points: np.ndarray, bits: np.ndarray, sigma2: float, idx: np.ndarray, z: np.ndarray):
    """GMI (bits/symbol) and its standard error on one fixed batch."""
    _, _, s_all, s_match, _ = _softmax_terms(points, bits, sigma2, idx, z)
    loss = np.sum(np.log(s_all)[:, None] - np.log(s_match), axis=1) / np.log(2.0)
    m = bits.shape[1]
    return float(m - loss.mean()), float(loss.std(ddof=1) / np.sqrt(len(loss)))


def gmi_gradient(points: np.ndarray, bits: np.ndarray, sigma2: float, idx: np.ndarray, z: np.ndarray):
    """
    GMI estimate and its exact gradient w.r.t. the point coordinates.

    The received samples are ``points[idx] + z`` with ``z`` held fixed, so the
    gradient flows both through the candidate points in the metric and through
    the transmitted point.

    Returns ``(gmi, std_error, grad)`` with ``grad`` of shape ``points.shape``.
    """
    diff, e, s_all, s_match, tx = _softmax_terms(points, bits, sigma2, idx, z)
    n = len(idx)
    m = bits.shape[1]
    loss = np.sum(np.log(s_all)[:, None] - np.log(s_match), axis=1)
    # d(loss)/d(metric_j) = m * p_j - sum_i q_ij, q_i the softmax over the matching subset.
    inv = 1.0 / s_match
    q = e * ((inv * tx) @ bits.T + (inv * (1.0 - tx)) @ (1.0 - bits).T)
    g = m * e / s_all[:, None] - q
    weighted = g[:, :, None] * diff
    grad_pts = weighted.sum(axis=0) / sigma2
    grad_y = -weighted.sum(axis=1) / sigma2
    np.add.at(grad_pts, idx, grad_y)
    grad = -grad_pts / (n * np.log(2.0))
    loss_bits = loss / np.log(2.0)
    return float(m - loss_bits.mean()), float(loss_bits.std(ddof=1) / np.sqrt(n)), grad


def finite_difference_gradient(points, bits, sigma2, idx, z, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of :func:`batch_gmi` on the same batch."""
    grad = np.zeros_like(points)
    for j in range(points.shape[0]):
        for k in range(points.shape[1]):
            up = points.copy()
            dn = points.copy()
            up[j, k] += h
            dn[j, k] -= h
            grad[j, k] = (batch_gmi(up, bits, sigma2, idx, z)[0] - batch_gmi(dn, bits, sigma2, idx, z)[0]) / (2 * h)
    return grad


def _batch(c: Constellation4D, snr_db: float, n: int, seed: int, stream: int):
    idx, y, sigma2 = awgn_batch(c, snr_db, n, seed, stream)
    return idx, y - c.points[idx], sigma2


# --------------------------------------------------------------------------
# Constraint sets
# --------------------------------------------------------------------------


def project_constant_modulus(c: Constellation4D | np.ndarray):
    """Rescale every point to unit norm (which also gives unit mean energy)."""
    pts = c.points if isinstance(c, Constellation4D) else np.asarray(c, dtype=float)
    norms = np.linalg.norm(pts, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ConstellationError("cannot project a zero-norm point")
    out = pts / norms
    if isinstance(c, Constellation4D):
        return c.with_points(out)
    return out


def _project_energy(points: np.ndarray) -> np.ndarray:
    return points / np.sqrt(np.mean(np.sum(points**2, axis=1)))


def _rotate(points: np.ndarray, angle: float) -> np.ndarray:
    ca, sa = np.cos(angle), np.sin(angle)
    out = np.empty_like(points)
    out[..., 0::2] = ca * points[..., 0::2] - sa * points[..., 1::2]
    out[..., 1::2] = sa * points[..., 0::2] + ca * points[..., 1::2]
    return out


class _Parametrization:
    """Maps free parameters to point coordinates and gradients back."""

    def __init__(self, c0: Constellation4D, cfg: OptimizerConfig):
        self.constraint = cfg.constraint
        if self.constraint == "prs-structured":
            self.count = cfg.prs_phase_count
            self.orbits = rotation_orbits(c0, self.count, tol=1e-6)
            self.angle = 2 * np.pi / self.count
            self.theta = c0.points[self.orbits[:, 0]].copy()
        else:
            self.theta = c0.points.copy()
        self.theta = self.project(self.theta)

    def project(self, theta):
        if self.constraint == "unconstrained":
            return _project_energy(theta)
        return project_constant_modulus(theta)

    def points(self, theta):
        if self.constraint != "prs-structured":
            return theta
        pts = np.empty((self.orbits.size, 4))
        for q in range(self.count):
            pts[self.orbits[:, q]] = _rotate(theta, q * self.angle)
        return pts

    def pullback(self, grad_points):
        if self.constraint != "prs-structured":
            return grad_points
        g = np.zeros_like(self.theta)
        for q in range(self.count):
            g += _rotate(grad_points[self.orbits[:, q]], -q * self.angle)
        return g


# --------------------------------------------------------------------------
# Drivers
# --------------------------------------------------------------------------


def operating_snr(c: Constellation4D, ngmi_target: float = 0.85, n_symbols: int = 20000, seed: int = 0) -> float:
    """SNR (dB) at which ``c`` reaches the given NGMI on the AWGN channel."""
    grid = np.arange(0.0, 30.01, 0.5)
    curve = awgn_gmi_sweep(c, grid, n_symbols, seed)
    return required_snr_at(curve, ngmi_target * c.bits_per_symbol)


def optimize_gmi(c0: Constellation4D, cfg: OptimizerConfig) -> OptimizationResult:
    """
    Projected gradient ascent of the Monte-Carlo GMI at ``cfg.target_snr_db``.

    Each iteration tries the current step and up to five halvings and keeps
    the first candidate that does not lower the GMI on that iteration's batch.
    Halvings persist, so the step anneals from ``step_size`` as progress
    slows. The trace has ``max_iters + 1`` rows (row 0 is the start point).
    """
    snr = cfg.target_snr_db if cfg.target_snr_db is not None else operating_snr(c0, seed=cfg.seed)
    bits = c0.bits.astype(float)
    param = _Parametrization(c0, cfg)
    theta = param.theta
    if cfg.init_jitter and cfg.max_iters:
        rng = np.random.default_rng(cfg.seed)
        theta = param.project(theta + cfg.init_jitter * rng.standard_normal(theta.shape))
    eval_idx, eval_z, sigma2 = _batch(c0, snr, cfg.n_mc_symbols, cfg.seed, _EVAL_STREAM)
    cur, cur_se = batch_gmi(param.points(theta), bits, sigma2, eval_idx, eval_z)
    trace = [TraceRow(0, cur, cur_se, 0.0)]
    step = cfg.step_size

    for it in range(1, cfg.max_iters + 1):
        idx, z, _ = _batch(c0, snr, cfg.n_mc_symbols, cfg.seed, it)
        pts = param.points(theta)
        base, _, grad = gmi_gradient(pts, bits, sigma2, idx, z)
        if cfg.gradient == "finite-difference":
            grad = finite_difference_gradient(pts, bits, sigma2, idx, z)
        grad = param.pullback(grad)
        if not np.all(np.isfinite(grad)):
            raise OptimizerError(f"non-finite gradient at iteration {it}")
        taken = 0.0
        for _ in range(MAX_HALVINGS + 1):
            cand = param.project(theta + step * grad)
            if batch_gmi(param.points(cand), bits, sigma2, idx, z)[0] >= base:
                theta, taken = cand, step
                break
            step /= 2
        if taken:
            cur, cur_se = batch_gmi(param.points(theta), bits, sigma2, eval_idx, eval_z)
        trace.append(TraceRow(it, cur, cur_se, taken))
        if it % 50 == 0:
            log.info("iter %d gmi %.5f step %.4g", it, cur, taken)

    if cfg.max_iters == 0:
        return OptimizationResult(c0, trace, snr)
    out = Constellation4D(param.points(theta), c0.labels, c0.name)
    return OptimizationResult(out, trace, snr)


def _label_gmi(e: np.ndarray, e_sum_log: np.ndarray, idx: np.ndarray, labels: np.ndarray, m: int) -> float:
    bits = ((labels[:, None] >> np.arange(m - 1, -1, -1)) & 1).astype(float)
    s1 = e @ bits
    s0 = e @ (1.0 - bits)
    tx = bits[idx]
    s_match = np.where(tx == 1, s1, s0)
    return m - float(np.mean(np.sum(e_sum_log[:, None] - np.log(s_match), axis=1))) / np.log(2.0)


def labeling_search(c: Constellation4D, cfg: OptimizerConfig, max_swaps: int | None = None) -> Constellation4D:
    """
    First-improvement pairwise label swapping on a fixed noise batch.

    A swap is kept only if it strictly raises the batch GMI. Stops after
    ``max_swaps`` accepted swaps (default ``cfg.max_iters``) or a full pass
    without improvement.
    """
    budget = cfg.max_iters if max_swaps is None else max_swaps
    snr = cfg.target_snr_db if cfg.target_snr_db is not None else operating_snr(c, seed=cfg.seed)
    idx, z, sigma2 = _batch(c, snr, cfg.n_mc_symbols, cfg.seed, _EVAL_STREAM + 1)
    y = c.points[idx] + z
    d = np.sum((y[:, None, :] - c.points[None, :, :]) ** 2, axis=2)
    a = -d / (2.0 * sigma2)
    a -= a.max(axis=1, keepdims=True)
    e = np.exp(a)
    e_sum_log = np.log(e.sum(axis=1))
    m = c.bits_per_symbol
    labels = np.array(c.labels)
    cur = _label_gmi(e, e_sum_log, idx, labels, m)
    accepted = 0
    improved = True
    while improved and accepted < budget:
        improved = False
        for i in range(c.size):
            for j in range(i + 1, c.size):
                trial = labels.copy()
                trial[i], trial[j] = trial[j], trial[i]
                g = _label_gmi(e, e_sum_log, idx, trial, m)
                if g > cur + 1e-12:
                    labels, cur = trial, g
                    accepted += 1
                    improved = True
                    if accepted >= budget:
                        break
            if accepted >= budget:
                break
    log.info("labeling search: %d swaps, gmi %.5f", accepted, cur)
    return c.with_labels(labels)


def shape_format(c0: Constellation4D, cfg: OptimizerConfig, rounds: int = 1) -> OptimizationResult:
    """Alternate coordinate ascent and labeling search for ``rounds`` rounds."""
    snr = cfg.target_snr_db if cfg.target_snr_db is not None else operating_snr(c0, seed=cfg.seed)
    cfg = replace(cfg, target_snr_db=snr)
    c = c0
    trace: list[TraceRow] = []
    for r in range(rounds):
        res = optimize_gmi(c, replace(cfg, seed=cfg.seed + r))
        offset = trace[-1].iter + 1 if trace else 0
        trace.extend(TraceRow(t.iter + offset, t.gmi, t.gmi_stderr, t.step) for t in res.trace)
        c = labeling_search(res.constellation, replace(cfg, seed=cfg.seed + r), max_swaps=10**6)
    return OptimizationResult(c, trace, snr)


TRACE_SCHEMA = "optimizer_trace/1"


def write_trace_csv(trace: list[TraceRow], path) -> None:
    with Path(path).open("w", newline="\n", encoding="utf-8") as fh:
        fh.write(f"# schema={TRACE_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "gmi", "gmi_stderr", "step"])
        for t in trace:
            w.writerow([t.iter, f"{t.gmi:.8f}", f"{t.gmi_stderr:.8f}", f"{t.step:.6g}"])
