"""
Receiver DSP: dispersion compensation, frequency-offset recovery, adaptive
2x2 MIMO equalization with in-loop blind phase search, synchronization, EVM.

Symbol streams are ``(N, 4)`` real arrays in constellation coordinates
unless noted otherwise. The equalizer expects 2 samples per symbol with the
first sample of the waveform on a symbol instant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy import constants

from prs4d.channel import (
    REFERENCE_WAVELENGTH_NM,
    Waveform,
    dispersion_response,
    jones_to_symbols,
    matched_filter,
    symbols_to_jones,
)
from prs4d.constellation import Constellation4D


class SyncError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Chromatic dispersion
# --------------------------------------------------------------------------


def accumulated_beta2(dispersion_ps_nm: float, wavelength_nm: float = REFERENCE_WAVELENGTH_NM) -> float:
    """Convert accumulated dispersion D*L (ps/nm) to beta2*L (s^2)."""
    lam = wavelength_nm * 1e-9
    return -dispersion_ps_nm * 1e-3 * lam**2 / (2 * np.pi * constants.c)


def cd_apply(wf: Waveform, dispersion_ps_nm: float, wavelength_nm: float = REFERENCE_WAVELENGTH_NM) -> Waveform:
    """Apply the all-pass response of ``dispersion_ps_nm`` of accumulated dispersion."""
    h = dispersion_response(wf, accumulated_beta2(dispersion_ps_nm, wavelength_nm))
    return wf.with_fields(np.fft.ifft(np.fft.fft(wf.x) * h), np.fft.ifft(np.fft.fft(wf.y) * h))


def cd_compensate(wf: Waveform, dispersion_ps_nm: float, wavelength_nm: float = REFERENCE_WAVELENGTH_NM) -> Waveform:
    """Exact inverse of :func:`cd_apply`."""
    return cd_apply(wf, -dispersion_ps_nm, wavelength_nm)


# --------------------------------------------------------------------------
# Frequency offset
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FrequencyEstimate:
    offset_hz: float
    power_order: int
    ambiguous: bool


_FO_ZERO_PAD = 8


def _mth_power_spectrum(x: np.ndarray, y: np.ndarray, m: int) -> np.ndarray:
    n = _FO_ZERO_PAD * x.size
    return np.abs(np.fft.fft(x**m, n)) ** 2 + np.abs(np.fft.fft(y**m, n)) ** 2


def _parabolic_peak(spec: np.ndarray, k: int) -> float:
    a, b, c = spec[k - 1], spec[k], spec[(k + 1) % spec.size]
    den = a - 2 * b + c
    return k + (0.5 * (a - c) / den if den != 0 else 0.0)


def _spectral_centroid(wf: Waveform) -> float:
    """Circular centroid of the power spectrum: a coarse, alias-free offset estimate."""
    n = len(wf)
    p = np.abs(np.fft.fft(wf.x)) ** 2 + np.abs(np.fft.fft(wf.y)) ** 2
    ang = 2 * np.pi * np.fft.fftfreq(n)
    return float(np.angle(np.sum(p * np.exp(1j * ang))) / (2 * np.pi) * wf.sample_rate)


def freq_offset_recover(
    wf: Waveform,
    max_offset: float | None = None,
    power_order: int | None = None,
    sps: int = 2,
) -> tuple[Waveform, FrequencyEstimate]:
    """
    Estimate and remove a carrier frequency offset.

    Expects a matched-filtered waveform whose samples ``0, sps, 2 sps, ...``
    fall on symbol instants. The M-th power periodogram of those samples
    (M = 4 or 8; with ``power_order=None`` the order with the stronger tone
    relative to the median level wins) gives a fine estimate modulo
    ``symbol_rate / M``; the alias nearest to the spectral centroid is kept.
    The estimate is flagged ambiguous when the tone is not a unique peak or
    when the offset exceeds ``max_offset`` (default ``fs / 8``).
    """
    fs = wf.sample_rate
    limit = fs / 8 if max_offset is None else max_offset
    xs, ys = wf.x[::sps], wf.y[::sps]
    rs = fs / sps
    best = None
    for m in (power_order,) if power_order else (4, 8):
        spec = _mth_power_spectrum(xs, ys, m)
        k = int(np.argmax(spec))
        strength = spec[k] / np.median(spec)
        if best is None or strength > best[3]:
            best = (m, spec, k, strength)
    m, spec, k, _ = best
    guard = 4 * _FO_ZERO_PAD
    others = np.delete(spec, (k + np.arange(-guard, guard + 1)) % spec.size)
    unique = others.size == 0 or spec[k] > 4.0 * others.max()

    kk = _parabolic_peak(spec, k)
    if kk > spec.size / 2:
        kk -= spec.size
    fine = kk * rs / spec.size / m
    coarse = _spectral_centroid(wf)
    period = rs / m
    offset = fine + period * np.round((coarse - fine) / period)
    # a centroid far from every alias means the band is clipped or aliased
    margin = abs(coarse - offset) < period / 4
    ambiguous = (not unique) or (not margin) or abs(offset) > limit or abs(coarse) > limit
    t = np.arange(len(wf)) / fs
    rot = np.exp(-2j * np.pi * offset * t)
    out = replace(wf, x=wf.x * rot, y=wf.y * rot, center_frequency_offset=wf.center_frequency_offset - offset)
    return out, FrequencyEstimate(float(offset), m, bool(ambiguous))


def frontend(
    wf: Waveform,
    dispersion_ps_nm: float = 0.0,
    rolloff: float = 0.01,
    sps: int = 2,
    recover_frequency: bool = True,
) -> tuple[Waveform, FrequencyEstimate | None]:
    """
    CD compensation, frequency-offset removal and matched filtering.

    The offset is estimated on a matched-filtered copy but removed before the
    real matched filter: with a 1% roll-off even a 100 MHz offset would
    otherwise clip a band edge.
    """
    out = cd_compensate(wf, dispersion_ps_nm) if dispersion_ps_nm else wf
    est = None
    if recover_frequency:
        probe = matched_filter(out, rolloff, sps, downsample=False)
        _, est = freq_offset_recover(probe, sps=sps)
        t = np.arange(len(out)) / out.sample_rate
        rot = np.exp(-2j * np.pi * est.offset_hz * t)
        out = replace(out, x=out.x * rot, y=out.y * rot)
    return matched_filter(out, rolloff, sps, downsample=False), est


# --------------------------------------------------------------------------
# Blind phase search
# --------------------------------------------------------------------------


def symmetry_order(c: Constellation4D, tol: float = 1e-6) -> int:
    """Largest S in (8, 4, 2) such that a common phase rotation by 2 pi / S maps ``c`` onto itself."""
    z = c.complex_points()
    for s in (8, 4, 2):
        r = z * np.exp(2j * np.pi / s)
        d = np.abs(r[:, None, 0] - z[None, :, 0]) ** 2 + np.abs(r[:, None, 1] - z[None, :, 1]) ** 2
        if np.all(d.min(axis=1) < tol**2):
            return s
    return 1


@numba.njit(cache=True)
def _nearest(ux, uy, px, py):
    best = np.inf
    j = 0
    for i in range(px.size):
        d = (ux.real - px[i].real) ** 2 + (ux.imag - px[i].imag) ** 2
        d += (uy.real - py[i].real) ** 2 + (uy.imag - py[i].imag) ** 2
        if d < best:
            best = d
            j = i
    return j, best


@numba.njit(cache=True)
def _bps_distances(sx, sy, px, py, rot):
    n = sx.size
    b = rot.size
    out = np.empty((n, b))
    for k in range(n):
        for i in range(b):
            _, d = _nearest(sx[k] * rot[i], sy[k] * rot[i], px, py)
            out[k, i] = d
    return out


@numba.njit(cache=True)
def _vertex(left, mid, right):
    """Offset (in grid steps) of the parabola vertex through three samples."""
    den = left - 2.0 * mid + right
    if den <= 0.0:
        return 0.0
    return min(max(0.5 * (left - right) / den, -0.5), 0.5)


def _unwrap_to(prev: float, phi: float, period: float) -> float:
    return phi + period * np.round((prev - phi) / period)


def bps(
    symbols: np.ndarray,
    c: Constellation4D,
    test_phases: int = 32,
    window: int = 64,
    reference: np.ndarray | None = None,
):
    """
    Feed-forward blind phase search.

    ``test_phases`` candidates are spread over one symmetry period
    ``2 pi / S`` of ``c``; the distance to the nearest point is summed over a
    centered window of ``window`` symbols and the minimum is refined by
    parabolic interpolation between neighboring candidates. The trajectory is unwrapped
    continuously and, when ``reference`` (known leading symbols) is given, the
    symmetry ambiguity is fixed against it.

    Returns ``(rotated_symbols, phase)``, where ``phase`` is the estimated
    carrier phase per symbol (the symbols were rotated by ``-phase``).
    """
    if test_phases < 1 or window < 1:
        raise ValueError("test_phases and window must be positive")
    s = symmetry_order(c)
    period = 2 * np.pi / s
    grid = np.arange(test_phases) * period / test_phases
    sx, sy = symbols_to_jones(symbols)
    cp = c.complex_points()
    d = _bps_distances(sx, sy, cp[:, 0].copy(), cp[:, 1].copy(), np.exp(-1j * grid))
    # circular centered window sum per test phase
    padded = np.concatenate([d[-(window // 2):], d, d[: window - window // 2 - 1]]) if window > 1 else d
    csum = np.cumsum(np.vstack([np.zeros((1, test_phases)), padded]), axis=0)
    score = csum[window:] - csum[:-window]
    ib = np.argmin(score, axis=1)
    rows = np.arange(len(ib))
    left = score[rows, (ib - 1) % test_phases]
    mid = score[rows, ib]
    right = score[rows, (ib + 1) % test_phases]
    den = left - 2 * mid + right
    frac = np.where(den > 0, 0.5 * (left - right) / np.where(den > 0, den, 1.0), 0.0)
    raw = grid[ib] + np.clip(frac, -0.5, 0.5) * period / test_phases
    phase = np.empty_like(raw)
    prev = raw[0]
    for k, phi in enumerate(raw):
        prev = _unwrap_to(prev, phi, period)
        phase[k] = prev
    if reference is not None and s > 1:
        ref_x, ref_y = symbols_to_jones(reference)
        n_ref = len(ref_x)
        best, shift = -np.inf, 0.0
        for q in range(s):
            rot = np.exp(-1j * (phase[:n_ref] + q * period))
            score_q = np.real(np.vdot(ref_x, sx[:n_ref] * rot) + np.vdot(ref_y, sy[:n_ref] * rot))
            if score_q > best:
                best, shift = score_q, q * period
        phase = phase + shift
    rot = np.exp(-1j * phase)
    return jones_to_symbols(sx * rot, sy * rot), phase


# --------------------------------------------------------------------------
# MIMO equalizer
# --------------------------------------------------------------------------


@dataclass
class EqualizerState:
    """
    Butterfly taps ``(2, 2, T)`` plus adaptation settings.

    ``mu`` is the LMS step during training, ``mu_dd`` in decision-directed
    mode (defaults to ``mu / 10``).
    """

    taps: np.ndarray
    mu: float = 1e-3
    mu_dd: float | None = None
    bps_test_phases: int = 32
    bps_window: int = 64
    converged: bool = False
    update_norm: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=complex)
        if self.taps.ndim != 3 or self.taps.shape[:2] != (2, 2):
            raise ValueError("taps must have shape (2, 2, T)")
        if self.taps.shape[2] % 2 == 0:
            raise ValueError("tap count must be odd")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.bps_test_phases < 8:
            raise ValueError("BPS needs at least 8 test phases")
        if self.bps_window < 1:
            raise ValueError("BPS window must be positive")

    @classmethod
    def identity(cls, n_taps: int = 15, **kw) -> "EqualizerState":
        taps = np.zeros((2, 2, n_taps), dtype=complex)
        taps[0, 0, n_taps // 2] = 1.0
        taps[1, 1, n_taps // 2] = 1.0
        return cls(taps, **kw)

    @property
    def n_taps(self) -> int:
        return self.taps.shape[2]


@numba.njit(cache=True)
def _equalize_kernel(xin, taps, n_sym, train, n_train, px, py, mu, mu_dd, rot, period, window):
    n_samp = xin.shape[1]
    t_len = taps.shape[2]
    half = t_len // 2
    b = rot.size
    out = np.empty((n_sym, 2), dtype=np.complex128)
    phase = np.empty(n_sym)
    upd = np.empty(n_sym)
    ring = np.zeros((window, b))
    score = np.zeros(b)
    da_ring = np.zeros(window, dtype=np.complex128)
    da_sum = 0j
    prev = 0.0
    win = np.empty((2, t_len), dtype=np.complex128)
    for k in range(n_sym):
        center = 2 * k
        xnorm = 0.0
        for q in range(2):
            for t in range(t_len):
                v = xin[q, (center + half - t) % n_samp]
                win[q, t] = v
                xnorm += v.real**2 + v.imag**2
        ux = 0j
        uy = 0j
        for t in range(t_len):
            ux += taps[0, 0, t] * win[0, t] + taps[0, 1, t] * win[1, t]
            uy += taps[1, 0, t] * win[0, t] + taps[1, 1, t] * win[1, t]

        slot = k % window
        for i in range(b):
            _, d = _nearest(ux * rot[i], uy * rot[i], px, py)
            score[i] += d - ring[slot, i]
            ring[slot, i] = d

        if k < n_train:
            ax = train[k, 0]
            ay = train[k, 1]
            corr = ux * np.conj(ax) + uy * np.conj(ay)
            da_sum += corr - da_ring[slot]
            da_ring[slot] = corr
            phi = np.angle(da_sum)
            two_pi = 2 * np.pi
            phi = phi + two_pi * np.round((prev - phi) / two_pi)
            step = mu
        else:
            ib = 0
            for i in range(1, b):
                if score[i] < score[ib]:
                    ib = i
            phi = ib * period / b + _vertex(score[(ib - 1) % b], score[ib], score[(ib + 1) % b]) * period / b
            phi = phi + period * np.round((prev - phi) / period)
            step = mu_dd
        prev = phi
        cr = np.exp(-1j * phi)
        zx = ux * cr
        zy = uy * cr
        if k < n_train:
            rx = ax
            ry = ay
        else:
            j, _ = _nearest(zx, zy, px, py)
            rx = px[j]
            ry = py[j]
        ex = rx / cr - ux
        ey = ry / cr - uy
        for t in range(t_len):
            c0 = np.conj(win[0, t])
            c1 = np.conj(win[1, t])
            taps[0, 0, t] += step * ex * c0
            taps[0, 1, t] += step * ex * c1
            taps[1, 0, t] += step * ey * c0
            taps[1, 1, t] += step * ey * c1
        out[k, 0] = zx
        out[k, 1] = zy
        phase[k] = phi
        upd[k] = step * np.sqrt((abs(ex) ** 2 + abs(ey) ** 2) * xnorm)
    return out, phase, upd


CONVERGENCE_WINDOW = 1000
LS_INIT_SYMBOLS = 2048


def _window_matrix(xin: np.ndarray, n_sym: int, n_taps: int) -> np.ndarray:
    """Rows are the equalizer input windows ``[x window, y window]`` per symbol."""
    n_samp = xin.shape[1]
    half = n_taps // 2
    pos = (2 * np.arange(n_sym)[:, None] + half - np.arange(n_taps)[None, :]) % n_samp
    return np.concatenate([xin[0][pos], xin[1][pos]], axis=1)


def ls_taps(xin: np.ndarray, train: np.ndarray, n_taps: int, ridge: float = 1e-6) -> np.ndarray:
    """
    Ridge least-squares butterfly taps from known symbols.

    A 1%-roll-off signal at 2 samples per symbol leaves half the band empty,
    so the input correlation is nearly singular and LMS alone converges very
    slowly in some directions. A one-shot solve on the training block fixes
    the starting point.
    """
    a = _window_matrix(xin, len(train), n_taps)
    g = a.conj().T @ a
    g += ridge * np.trace(g).real / g.shape[0] * np.eye(g.shape[0])
    w = np.linalg.solve(g, a.conj().T @ train)  # (2T, 2)
    taps = np.empty((2, 2, n_taps), dtype=complex)
    for p in range(2):
        taps[p, 0] = w[:n_taps, p]
        taps[p, 1] = w[n_taps:, p]
    return taps


def mimo_equalize(
    wf: Waveform,
    c: Constellation4D,
    state: EqualizerState,
    training: np.ndarray,
    training_len: int | None = None,
    convergence_tol: float = 1e-4,
    ls_init: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """
    2x2 fractionally spaced butterfly with data-aided then decision-directed LMS.

    Parameters
    ----------
    wf : Waveform
        Two samples per symbol; treated as one period of a circular frame.
    c : Constellation4D
        Decision alphabet.
    state : EqualizerState
        Initial taps; updated in place, including ``converged`` and
        ``update_norm``.
    training : ndarray
        Known transmitted symbols aligned with the frame, ``(>= training_len, 4)``.
    training_len : int, optional
        Symbols used for data-aided adaptation (default ``len(training)``).
    ls_init : bool
        Replace the initial taps by a least-squares solve on the first
        ``min(training_len, 2048)`` training symbols (see :func:`ls_taps`).

    Returns
    -------
    symbols : ndarray
        ``(N, 4)`` phase-corrected equalizer outputs, one per symbol.
    phase : ndarray
        In-loop carrier phase trajectory.

    Notes
    -----
    The carrier phase is tracked inside the loop: during training from the
    windowed correlation with the known symbols, afterwards by causal BPS
    over the same window, unwrapped against the previous estimate. Taps are
    adapted on the error re-rotated to the equalizer output's phase, so the
    phase tracker and the taps do not fight. ``state.converged`` is set when
    the mean relative tap-update norm over the last 1000 symbols is below
    ``convergence_tol``.
    """
    if len(wf) % 2:
        raise ValueError("expected 2 samples per symbol")
    n_sym = len(wf) // 2
    n_train = len(training) if training_len is None else training_len
    if n_train > len(training) or n_train > n_sym:
        raise ValueError("training longer than the available symbols")
    scale = 1.0 / np.sqrt(wf.power) if wf.power > 0 else 1.0
    xin = np.stack([wf.x, wf.y]) * scale
    tx, ty = symbols_to_jones(np.asarray(training)[:max(n_train, 1)])
    train = np.stack([tx, ty], axis=1).astype(complex)
    if ls_init and n_train > 0:
        state.taps = ls_taps(xin, train[:min(n_train, LS_INIT_SYMBOLS)], state.n_taps)
    s = symmetry_order(c)
    period = 2 * np.pi / s
    grid = np.arange(state.bps_test_phases) * period / state.bps_test_phases
    cp = c.complex_points()
    mu_dd = state.mu / 10 if state.mu_dd is None else state.mu_dd
    out, phase, upd = _equalize_kernel(
        xin, state.taps, n_sym, train, n_train, cp[:, 0].copy(), cp[:, 1].copy(),
        state.mu, mu_dd, np.exp(-1j * grid), period, state.bps_window,
    )
    rel = upd / max(np.linalg.norm(state.taps), 1e-300)
    state.update_norm = rel
    tail = rel[-CONVERGENCE_WINDOW:]
    state.converged = bool(np.all(np.isfinite(out))) and float(np.mean(tail)) < convergence_tol
    return jones_to_symbols(out[:, 0], out[:, 1]), phase


PILOT_INTERVAL = 1024
PILOT_BLOCK = 4


def pilot_slip_correction(
    rx_symbols: np.ndarray,
    ref_symbols: np.ndarray,
    c: Constellation4D,
    start: int = 0,
    interval: int = PILOT_INTERVAL,
    block: int = PILOT_BLOCK,
    phase: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """
    Undo carrier-phase cycle slips using sparse pilot blocks.

    A block of ``block`` known symbols sits every ``interval`` symbols from
    ``start`` on. For each block the multiple of the symmetry angle that best
    aligns the received pilots with ``ref_symbols`` is applied up to the next
    block. The default 4 in 1024 costs 0.4% overhead.

    With ``phase`` (the carrier phase trajectory of the tracker), a change of
    rotation between two blocks is applied from the symbol where the
    trajectory moved by the matching number of symmetry periods instead of
    from the later block, so only the few symbols around the slip itself
    stay rotated.

    Returns
    -------
    symbols : ndarray
        Corrected ``(N, 4)`` symbols.
    slips : int
        Number of changes of the applied rotation.
    """
    if block < 1 or interval < block:
        raise ValueError("need 1 <= block <= interval")
    ex, ey = symbols_to_jones(rx_symbols)
    rx = np.stack([ex, ey], axis=1)
    rx_ref = np.stack(symbols_to_jones(ref_symbols), axis=1)
    if rx.shape != rx_ref.shape:
        raise ValueError("received and reference symbols differ in length")
    if phase is not None and len(phase) != rx.shape[0]:
        raise ValueError("phase trajectory and symbols differ in length")
    s = symmetry_order(c)
    period = 2 * np.pi / s
    rot = np.exp(-2j * np.pi * np.arange(s) / s)
    out = rx.copy()
    slips = 0
    prev, prev_start = 0, None
    n = rx.shape[0]
    for p0 in range(start, n - block + 1, interval):
        pil = rx[p0:p0 + block]
        d = [np.sum(np.abs(pil * r - rx_ref[p0:p0 + block]) ** 2) for r in rot]
        k = int(np.argmin(d))
        if k != prev:
            slips += 1
            if phase is not None and prev_start is not None:
                # rotating by -k periods undoes a trajectory jump of +k periods
                jump = -((k - prev + s // 2) % s - s // 2)
                seg = phase[prev_start:p0]
                steps = np.round((seg - np.median(phase[prev_start:prev_start + block])) / period)
                hit = np.flatnonzero(steps == jump)
                if hit.size:
                    out[prev_start + hit[0]:p0] = rx[prev_start + hit[0]:p0] * rot[k]
        prev, prev_start = k, p0
        out[p0:p0 + interval] = rx[p0:p0 + interval] * rot[k]
    return jones_to_symbols(out[:, 0], out[:, 1]), slips


# --------------------------------------------------------------------------
# Synchronization and quality
# --------------------------------------------------------------------------


SYNC_PEAK_RATIO = 5.0
MIN_OVERLAP = 4096


def synchronize(tx_symbols: np.ndarray, rx_symbols: np.ndarray) -> int:
    """
    Circular delay ``d`` such that ``rx[k]`` matches ``tx[(k - d) mod L]``.

    ``tx_symbols`` is one period of the transmitted frame. Correlation uses
    all four polarization pairings so polarization swaps and phase rotations
    do not hide the peak. Raises :class:`SyncError` when the peak is below
    five times the RMS sidelobe level.
    """
    tx_x, tx_y = symbols_to_jones(tx_symbols)
    rx_x, rx_y = symbols_to_jones(rx_symbols)
    period = tx_x.size
    n = min(rx_x.size, period)
    if n < MIN_OVERLAP:
        raise SyncError(f"need at least {MIN_OVERLAP} overlapping symbols, got {n}")

    def fold(v):
        out = np.zeros(period, dtype=complex)
        out[:n] = v[:n]
        return out

    fr = [np.fft.fft(fold(rx_x)), np.fft.fft(fold(rx_y))]
    ft = [np.fft.fft(tx_x), np.fft.fft(tx_y)]
    corr = np.zeros(period)
    for a in fr:
        for b in ft:
            corr += np.abs(np.fft.ifft(a * np.conj(b))) ** 2
    k = int(np.argmax(corr))
    side = np.delete(corr, k)
    rms = np.sqrt(np.mean(side**2)) if side.size else 0.0
    if not corr[k] > SYNC_PEAK_RATIO * rms:
        raise SyncError("no significant correlation peak")
    return k


def evm(rx_symbols: np.ndarray, ref_symbols: np.ndarray) -> float:
    """RMS error vector magnitude relative to the reference RMS amplitude (fraction, not %)."""
    rx = np.asarray(rx_symbols, dtype=float)
    ref = np.asarray(ref_symbols, dtype=float)
    if rx.shape != ref.shape:
        raise ValueError("shape mismatch")
    return float(np.sqrt(np.mean(np.sum((rx - ref) ** 2, axis=1)) / np.mean(np.sum(ref**2, axis=1))))
