"""
Transmission channels: symbol-level AWGN and waveform-level fiber links.

Fields are in sqrt(W), so ``|x|**2 + |y|**2`` is the instantaneous optical
power. Propagation follows the Manakov equation with a symmetric split-step
scheme; amplifiers add ASE with per-polarization PSD ``(G * NF - 1) h nu / 2``.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numba
import numpy as np
from scipy import constants

from prs4d.metrics import noise_variance

SYMBOL_RATE = 41.79e9
# Truncated 1%-rolloff taps need about this span for -40 dB stopband at 0.505 Rs.
LONG_RRC_SPAN = 2048
REFERENCE_WAVELENGTH_NM = 1550.0
MANAKOV_FACTOR = 8.0 / 9.0

CHECKPOINT_MAGIC = b"PRSW"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIdQ")


@dataclass(frozen=True)
class Waveform:
    """Dual-polarization complex baseband samples."""

    x: np.ndarray
    y: np.ndarray
    sample_rate: float
    center_frequency_offset: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=complex)
        y = np.asarray(self.y, dtype=complex)
        if x.shape != y.shape or x.ndim != 1:
            raise ValueError("X and Y streams must be 1-D and of equal length")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.x.size

    @property
    def power(self) -> float:
        """Mean total power over both polarizations (W)."""
        if self.x.size == 0:
            return 0.0
        return float(np.mean(np.abs(self.x) ** 2 + np.abs(self.y) ** 2))

    def scaled(self, factor: float) -> "Waveform":
        return replace(self, x=self.x * factor, y=self.y * factor)

    def with_fields(self, x: np.ndarray, y: np.ndarray) -> "Waveform":
        return replace(self, x=x, y=y)


@dataclass(frozen=True)
class FiberParams:
    """
    Single-mode fiber span.

    Only the 75 km length comes from the experiment; attenuation, dispersion
    and nonlinear coefficient are textbook SSMF values.
    """

    length_km: float = 75.0
    alpha_db_per_km: float = 0.20
    dispersion_ps_nm_km: float = 17.0
    gamma_per_w_km: float = 1.3
    wavelength_nm: float = REFERENCE_WAVELENGTH_NM

    def __post_init__(self):
        if not self.length_km > 0:
            raise ValueError("fiber length must be positive")
        if self.alpha_db_per_km < 0:
            raise ValueError("attenuation must be non-negative")

    @property
    def alpha_per_km(self) -> float:
        """Power attenuation coefficient in 1/km."""
        return self.alpha_db_per_km * np.log(10) / 10

    @property
    def beta2_s2_per_km(self) -> float:
        lam = self.wavelength_nm * 1e-9
        d = self.dispersion_ps_nm_km * 1e-3  # s/m per km
        return -d * lam**2 / (2 * np.pi * constants.c)

    @property
    def span_loss_db(self) -> float:
        return self.alpha_db_per_km * self.length_km


@dataclass(frozen=True)
class AmplifierModel:
    gain_db: float
    noise_figure_db: float = 5.0
    wavelength_nm: float = REFERENCE_WAVELENGTH_NM

    def __post_init__(self):
        if self.gain_db < 0:
            raise ValueError("gain must be non-negative")

    @classmethod
    def edfa(cls, fiber: FiberParams, noise_figure_db: float = 5.0) -> "AmplifierModel":
        return cls(fiber.span_loss_db, noise_figure_db, fiber.wavelength_nm)

    @classmethod
    def raman_hybrid(cls, fiber: FiberParams, noise_figure_db: float = 3.0) -> "AmplifierModel":
        """EDFA plus backward Raman, lumped into an effective noise figure."""
        return cls(fiber.span_loss_db, noise_figure_db, fiber.wavelength_nm)

    @property
    def ase_psd_per_pol(self) -> float:
        """ASE power spectral density per polarization (W/Hz)."""
        g = 10 ** (self.gain_db / 10)
        nf = 10 ** (self.noise_figure_db / 10)
        nu = constants.c / (self.wavelength_nm * 1e-9)
        return max(g * nf - 1.0, 0.0) * constants.h * nu / 2


@dataclass(frozen=True)
class LoopConfig:
    spans_per_circulation: int = 5
    circulations: int = 10
    launch_power_dbm: float = 0.0
    polarization_scrambling: bool = False

    def __post_init__(self):
        if self.spans_per_circulation < 1 or self.circulations < 1:
            raise ValueError("span and circulation counts must be positive")

    @property
    def launch_power_w(self) -> float:
        return dbm_to_w(self.launch_power_dbm)


def dbm_to_w(p_dbm: float) -> float:
    return 1e-3 * 10 ** (p_dbm / 10)


# --------------------------------------------------------------------------
# AWGN
# --------------------------------------------------------------------------


def awgn_symbols(symbols: np.ndarray, snr_db: float, seed: int) -> np.ndarray:
    """Add Gaussian noise to unit-energy 4D symbols at ``snr_db`` (Es/N0 per 4D symbol)."""
    symbols = np.asarray(symbols, dtype=float)
    rng = np.random.default_rng(seed)
    sigma = np.sqrt(noise_variance(snr_db))
    return symbols + sigma * rng.standard_normal(symbols.shape)


# --------------------------------------------------------------------------
# Pulse shaping
# --------------------------------------------------------------------------


def rrc_taps(rolloff: float, sps: int, span_symbols: int) -> np.ndarray:
    """Unit-energy root-raised-cosine taps, ``span_symbols * sps + 1`` long."""
    if sps < 2:
        raise ValueError("sps must be at least 2")
    if not 0 < rolloff <= 1:
        raise ValueError("rolloff must lie in (0, 1]")
    n = span_symbols * sps + 1
    if n % 2 == 0:
        raise ValueError("span_symbols * sps must be even (odd tap count)")
    t = (np.arange(n) - (n - 1) / 2) / sps
    b = rolloff
    h = np.empty(n)
    center = np.isclose(t, 0.0)
    edge = np.isclose(np.abs(t), 1 / (4 * b))
    reg = ~(center | edge)
    tr = t[reg]
    h[reg] = (np.sin(np.pi * tr * (1 - b)) + 4 * b * tr * np.cos(np.pi * tr * (1 + b))) / (
        np.pi * tr * (1 - (4 * b * tr) ** 2)
    )
    h[center] = 1 - b + 4 * b / np.pi
    h[edge] = b / np.sqrt(2) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * b)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b)))
    return h / np.linalg.norm(h)


def rrc_spectrum(n_samples: int, sample_rate: float, symbol_rate: float, rolloff: float) -> np.ndarray:
    """Root-raised-cosine amplitude response on the FFT grid (peak 1)."""
    f = np.abs(np.fft.fftfreq(n_samples, 1 / sample_rate)) / symbol_rate
    lo = (1 - rolloff) / 2
    hi = (1 + rolloff) / 2
    h = np.zeros(n_samples)
    h[f <= lo] = 1.0
    band = (f > lo) & (f <= hi)
    h[band] = np.sqrt(0.5 * (1 + np.cos(np.pi / rolloff * (f[band] - lo))))
    return h


def _circular_filter(v: np.ndarray, taps: np.ndarray) -> np.ndarray:
    n = v.size
    if taps.size > n:
        raise ValueError("filter longer than the frame")
    kernel = np.zeros(n, dtype=complex)
    half = taps.size // 2
    kernel[: taps.size - half] = taps[half:]
    kernel[n - half:] = taps[:half]
    return np.fft.ifft(np.fft.fft(v) * np.fft.fft(kernel))


def _pulse(v: np.ndarray, rolloff: float, sps: int, span: int | None) -> np.ndarray:
    if span is None:
        return np.fft.ifft(np.fft.fft(v) * rrc_spectrum(v.size, sps, 1.0, rolloff) * np.sqrt(sps))
    return _circular_filter(v, rrc_taps(rolloff, sps, span))


def symbols_to_jones(symbols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(symbols)
    if np.iscomplexobj(s):
        return s[:, 0], s[:, 1]
    return s[:, 0] + 1j * s[:, 1], s[:, 2] + 1j * s[:, 3]


def jones_to_symbols(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.stack([x.real, x.imag, y.real, y.imag], axis=1)


def rrc_shape(
    symbols: np.ndarray,
    rolloff: float = 0.01,
    sps: int = 2,
    filter_span_symbols: int | None = None,
    symbol_rate: float = SYMBOL_RATE,
) -> Waveform:
    """
    Pulse-shape a periodic frame of 4D symbols.

    The frame is treated as one period of a repeating sequence, so filtering
    is circular. ``filter_span_symbols=None`` applies the exact frequency
    response; otherwise truncated time-domain taps are used. Output power
    equals the mean symbol energy.
    """
    if sps < 2:
        raise ValueError("sps must be at least 2")
    ex, ey = symbols_to_jones(symbols)
    out = []
    for v in (ex, ey):
        up = np.zeros(v.size * sps, dtype=complex)
        up[::sps] = v
        out.append(_pulse(up, rolloff, sps, filter_span_symbols) * np.sqrt(sps))
    return Waveform(out[0], out[1], symbol_rate * sps)


def matched_filter(
    wf: Waveform,
    rolloff: float = 0.01,
    sps: int = 2,
    filter_span_symbols: int | None = None,
    downsample: bool = True,
) -> np.ndarray | Waveform:
    """RRC matched filter; returns ``(N, 4)`` symbol-rate samples or a filtered waveform."""
    x = _pulse(wf.x, rolloff, sps, filter_span_symbols) / np.sqrt(sps)
    y = _pulse(wf.y, rolloff, sps, filter_span_symbols) / np.sqrt(sps)
    if not downsample:
        return wf.with_fields(x * np.sqrt(sps), y * np.sqrt(sps))
    return jones_to_symbols(x[::sps], y[::sps])


def resample(wf: Waveform, sps_in: int, sps_out: int) -> Waveform:
    """Periodic (FFT) resampling between integer oversampling factors."""
    if sps_in == sps_out:
        return wf
    n_out = wf.x.size * sps_out // sps_in

    def rs(v):
        spec = np.fft.fft(v)
        n_in = v.size
        out = np.zeros(n_out, dtype=complex)
        keep = min(n_in, n_out) // 2
        out[:keep] = spec[:keep]
        out[-keep:] = spec[-keep:]
        return np.fft.ifft(out) * n_out / n_in

    return Waveform(rs(wf.x), rs(wf.y), wf.sample_rate * sps_out / sps_in, wf.center_frequency_offset)


def frequency_shift(wf: Waveform, offset_hz: float) -> Waveform:
    t = np.arange(len(wf)) / wf.sample_rate
    rot = np.exp(2j * np.pi * offset_hz * t)
    return replace(wf, x=wf.x * rot, y=wf.y * rot, center_frequency_offset=wf.center_frequency_offset + offset_hz)


def wdm_multiplex(
    symbols: np.ndarray,
    n_channels: int,
    sps: int,
    spacing_hz: float = 50e9,
    rolloff: float = 0.01,
    symbol_rate: float = SYMBOL_RATE,
    decorrelation_shifts: Sequence[int] = (10200, 40800),
) -> Waveform:
    """
    Channel under test in the middle plus loading channels on a fixed grid.

    Loading channels reuse the same symbols circularly shifted by
    ``decorrelation_shifts`` (alternating), as with a split-and-delay loader.
    Each channel has the same power as the channel under test. Carriers are
    rounded to a whole number of cycles per frame (at most ``Fs / 2N`` away
    from the grid) so the circular frame has no phase jump at the wrap.
    """
    if n_channels < 1:
        raise ValueError("n_channels must be positive")
    if n_channels * spacing_hz >= sps * symbol_rate:
        raise ValueError("sample rate too low for the WDM grid")
    offsets = (np.arange(n_channels) - (n_channels - 1) / 2) * spacing_hz
    fs = sps * symbol_rate
    n_samples = len(symbols) * sps
    offsets = np.round(offsets * n_samples / fs) * fs / n_samples
    total = None
    for ch, f in enumerate(offsets):
        if f == 0:
            sym = symbols
        else:
            shift = decorrelation_shifts[ch % len(decorrelation_shifts)] % len(symbols)
            sym = np.roll(symbols, shift, axis=0)
        wf = rrc_shape(sym, rolloff, sps, None, symbol_rate)
        wf = frequency_shift(wf, f) if f else wf
        total = wf if total is None else total.with_fields(total.x + wf.x, total.y + wf.y)
    return replace(total, center_frequency_offset=0.0)


# --------------------------------------------------------------------------
# Fiber propagation
# --------------------------------------------------------------------------


def _omega(wf: Waveform) -> np.ndarray:
    return 2 * np.pi * np.fft.fftfreq(len(wf), 1 / wf.sample_rate)


def dispersion_response(wf: Waveform, beta2_s2: float) -> np.ndarray:
    """All-pass response of accumulated ``beta2 * L`` (s^2)."""
    w = _omega(wf)
    return np.exp(0.5j * beta2_s2 * w**2)


@numba.njit(cache=True)
def _kerr_phase(u, gh):
    # in place: both polarizations rotate by gh * total power
    for i in range(u.shape[1]):
        a = u[0, i]
        b = u[1, i]
        phi = gh * (a.real * a.real + a.imag * a.imag + b.real * b.real + b.imag * b.imag)
        r = complex(np.cos(phi), np.sin(phi))
        u[0, i] = a * r
        u[1, i] = b * r


def ssfm_propagate(
    wf: Waveform,
    fiber: FiberParams,
    step_km: float | None = None,
    max_nl_phase: float = 5e-3,
    max_step_km: float = 1.0,
) -> Waveform:
    """
    Symmetric split-step Manakov propagation over one span.

    Each step applies half the dispersion and loss, the Kerr phase
    ``gamma * 8/9 * (|x|^2 + |y|^2) * dz``, then the other half; adjacent
    half steps are merged. With ``step_km=None`` the step is the smaller of
    ``max_step_km`` and the length giving a peak nonlinear phase of
    ``max_nl_phase``.
    """
    length = fiber.length_km
    if step_km is not None and step_km > length:
        raise ValueError(f"step {step_km} km exceeds span length {length} km")
    if step_km is not None and step_km <= 0:
        raise ValueError("step must be positive")
    w = _omega(wf)
    lin_rate = 0.5j * fiber.beta2_s2_per_km * w**2 - fiber.alpha_per_km / 2
    gamma = fiber.gamma_per_w_km * MANAKOV_FACTOR
    f = np.fft.fft(np.stack([wf.x, wf.y]), axis=1)

    if gamma == 0:
        f *= np.exp(lin_rate * length)
        u = np.fft.ifft(f, axis=1)
        return wf.with_fields(u[0], u[1])

    def next_step(z, u):
        if step_km is not None:
            return min(step_km, length - z)
        p_peak = float(np.max(u[0].real ** 2 + u[0].imag ** 2 + u[1].real ** 2 + u[1].imag ** 2))
        h = max_step_km if p_peak == 0 else min(max_step_km, max_nl_phase / (gamma * p_peak))
        # snap down to max_step_km / 2**k so linear operators are reused
        h = max_step_km * 2.0 ** np.floor(np.log2(h / max_step_km))
        return min(h, length - z)

    ops: dict[float, np.ndarray] = {}

    def lin(dz):
        if dz not in ops:
            ops[dz] = np.exp(lin_rate * dz)
        return ops[dz]

    u = np.stack([wf.x, wf.y])
    z = 0.0
    h = next_step(z, u)
    f *= lin(h / 2)
    while True:
        u = np.fft.ifft(f, axis=1)
        _kerr_phase(u, gamma * h)
        f = np.fft.fft(u, axis=1)
        z += h
        if z >= length - 1e-12:
            f *= lin(h / 2)
            break
        h_next = next_step(z, u)
        # the field keeps decaying over the half step, so using the current
        # peak power errs on the short side
        f *= lin((h + h_next) / 2)
        h = h_next
    u = np.fft.ifft(f, axis=1)
    return wf.with_fields(u[0], u[1])


def random_polarization_rotation(wf: Waveform, rng: np.random.Generator) -> Waveform:
    """Apply a Haar-random 2x2 unitary (lossless polarization scrambler)."""
    a = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    q, r = np.linalg.qr(a)
    u = q * (np.diag(r) / np.abs(np.diag(r)))
    return wf.with_fields(u[0, 0] * wf.x + u[0, 1] * wf.y, u[1, 0] * wf.x + u[1, 1] * wf.y)


# --------------------------------------------------------------------------
# Amplification and loop
# --------------------------------------------------------------------------


def amplify(wf: Waveform, amp: AmplifierModel, seed) -> Waveform:
    """
    Lumped gain plus ASE noise over the full simulation bandwidth.

    ``seed`` may be an int or a :class:`numpy.random.SeedSequence`.
    """
    if amp.noise_figure_db < 3.0:
        warnings.warn(
            f"noise figure {amp.noise_figure_db} dB is below the 3 dB quantum limit of a high-gain amplifier",
            stacklevel=2,
        )
    g = 10 ** (amp.gain_db / 10)
    n = len(wf)
    if n == 0:
        return wf
    var = amp.ase_psd_per_pol * wf.sample_rate
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((4, n)) * np.sqrt(var / 2)
    return wf.with_fields(
        wf.x * np.sqrt(g) + noise[0] + 1j * noise[1],
        wf.y * np.sqrt(g) + noise[2] + 1j * noise[3],
    )


def _seed(seed: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, *path])


def run_loop(
    wf: Waveform,
    fiber: FiberParams,
    amp: AmplifierModel,
    loop: LoopConfig,
    seed: int,
    start_circulation: int = 0,
    step_km: float | None = None,
    max_nl_phase: float = 5e-3,
    max_step_km: float = 1.0,
) -> Iterator[tuple[int, Waveform]]:
    """
    Recirculating-loop emulation yielding ``(circulation, waveform)`` after each pass.

    The input is scaled to the launch power. Each pass is
    ``spans_per_circulation`` x (fiber, amplifier), then ideal gain flattening
    renormalizes the total power to the launch power. Noise for span ``s`` of
    circulation ``k`` comes from ``SeedSequence([seed, k, s, 0])``, so resuming
    from a checkpoint with ``start_circulation`` reproduces an uninterrupted run.
    ``start_circulation > 0`` expects ``wf`` already at launch power. The step
    arguments are passed to :func:`ssfm_propagate`.
    """
    p_launch = loop.launch_power_w
    cur = wf if start_circulation else wf.scaled(np.sqrt(p_launch / wf.power))
    for k in range(start_circulation, loop.circulations):
        for s in range(loop.spans_per_circulation):
            if loop.polarization_scrambling:
                cur = random_polarization_rotation(cur, np.random.default_rng(_seed(seed, k, s, 1)))
            cur = ssfm_propagate(cur, fiber, step_km, max_nl_phase, max_step_km)
            cur = amplify(cur, amp, _seed(seed, k, s, 0))
        cur = cur.scaled(np.sqrt(p_launch / cur.power))
        yield k + 1, cur


def loop_snr_db(
    fiber: FiberParams,
    amp: AmplifierModel,
    loop: LoopConfig,
    symbol_rate: float,
    sample_rate: float,
) -> np.ndarray:
    """
    Linear-regime SNR (signal over in-band ASE, both polarizations) after each circulation.

    Accounts for the flattening step, which rescales signal and the
    accumulated full-band noise together.
    """
    p_launch = loop.launch_power_w
    g = 10 ** ((amp.gain_db - fiber.span_loss_db) / 10)
    ase = 2 * amp.ase_psd_per_pol
    sig, n_in, n_full = p_launch, 0.0, 0.0
    out = []
    for _ in range(loop.circulations):
        for _ in range(loop.spans_per_circulation):
            sig, n_in, n_full = sig * g, n_in * g + ase * symbol_rate, n_full * g + ase * sample_rate
        f = p_launch / (sig + n_full)
        sig, n_in, n_full = sig * f, n_in * f, n_full * f
        out.append(10 * np.log10(sig / n_in))
    return np.array(out)


# --------------------------------------------------------------------------
# Checkpoint files
# --------------------------------------------------------------------------


def save_waveform(wf: Waveform, path) -> None:
    """
    Write a checkpoint: header ``<4sIdQ`` (magic, version, sample rate, length)
    followed by complex64 X samples then complex64 Y samples, little-endian.
    """
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, float(wf.sample_rate), len(wf)))
        fh.write(wf.x.astype("<c8").tobytes())
        fh.write(wf.y.astype("<c8").tobytes())


def load_waveform(path) -> Waveform:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError("truncated checkpoint header")
    magic, version, rate, n = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError("not a waveform checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    body = np.frombuffer(data, dtype="<c8", offset=_HEADER.size)
    if body.size != 2 * n:
        raise ValueError("checkpoint length mismatch")
    return Waveform(body[:n].astype(complex), body[n:].astype(complex), rate)
