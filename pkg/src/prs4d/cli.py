"""
Command-line experiment driver.

Subcommands
-----------
formats list | formats export NAME PATH
gmi-sweep      GMI/BER versus SNR on AWGN, one CSV per format
reach-sweep    recirculating-loop simulation, per-checkpoint CSV plus JSON report
optimize       geometric shaping, constellation CSV plus trace CSV
fec-eval       pre/post-FEC BER versus SNR, one CSV per format

Every command reads an optional INI file (``--config``); ``--seed`` and
``--out`` override the ``[experiment]`` section. Outputs are first written as
``<name>.partial`` and renamed when complete, so an interrupted run never
leaves a file that looks finished.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import os
import re
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from prs4d import channel, fec, metrics, optimizer, rxdsp
from prs4d.constellation import (
    BUILTIN_FORMATS,
    Constellation4D,
    ConstellationError,
    format_constellation,
    get_format,
    nearest_index,
)

log = logging.getLogger("prs4d")

CONSTELLATION_SCHEMA = "constellation/1"
REACH_SCHEMA = "reach_sweep/1"
REPORT_SCHEMA = "reach_report/1"

BER_THRESHOLD = 4e-2
NGMI_THRESHOLD = 0.85


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# Config file
# --------------------------------------------------------------------------


class Config:
    """
    INI file with remembered line numbers, so value errors point at the source.

    Unknown sections or keys are rejected when a command reads its section.
    """

    def __init__(self, path: str | None = None):
        self.path = path
        self.parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        self.lines: dict[tuple[str, str], int] = {}
        if path is None:
            return
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"{path}: config file not found")
        text = p.read_text(encoding="utf-8")
        try:
            self.parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        section = None
        for no, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            m = re.match(r"^\[([^\]]+)\]", line)
            if m:
                section = m.group(1).strip()
            elif section and line and line[0] not in ";#":
                key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
                self.lines[(section, key)] = no
        known = set(SECTIONS)
        for s in self.parser.sections():
            if s not in known:
                raise ConfigError(f"{self._where(s, None)}: unknown section [{s}]")

    def _where(self, section: str, key: str | None) -> str:
        no = self.lines.get((section, key)) if key else None
        if no is None and key is None:
            for (s, _), n in sorted(self.lines.items(), key=lambda kv: kv[1]):
                if s == section:
                    no = n - 1
                    break
        return f"{self.path}:{no}" if no else str(self.path or "<defaults>")

    def section(self, name: str) -> "Section":
        values = dict(self.parser[name]) if self.parser.has_section(name) else {}
        allowed = SECTIONS[name]
        for key in values:
            if key not in allowed:
                raise ConfigError(f"{self._where(name, key)}: unknown key {key!r} in [{name}]")
        return Section(self, name, values)


@dataclass
class Section:
    config: Config
    name: str
    values: dict

    def _fail(self, key: str, msg: str):
        raise ConfigError(f"{self.config._where(self.name, key)}: [{self.name}] {key}: {msg}")

    def _raw(self, key: str, default):
        v = self.values.get(key)
        return default if v is None or v.strip() == "" else v.strip()

    def str(self, key: str, default: str | None = None) -> str | None:
        return self._raw(key, default)

    def float(self, key: str, default: float | None = None) -> float | None:
        v = self._raw(key, default)
        if v is None or isinstance(v, float):
            return v
        try:
            return float(v)
        except (TypeError, ValueError):
            self._fail(key, f"expected a number, got {v!r}")

    def int(self, key: str, default: int | None = None) -> int | None:
        v = self._raw(key, default)
        if v is None or isinstance(v, int):
            return v
        try:
            return int(v)
        except (TypeError, ValueError):
            self._fail(key, f"expected an integer, got {v!r}")

    def bool(self, key: str, default: bool) -> bool:
        v = self._raw(key, default)
        if isinstance(v, bool):
            return v
        low = v.lower()
        if low in ("1", "yes", "true", "on"):
            return True
        if low in ("0", "no", "false", "off"):
            return False
        self._fail(key, f"expected a boolean, got {v!r}")

    def choice(self, key: str, default: str, options: Sequence[str]) -> str:
        v = self._raw(key, default)
        if v not in options:
            self._fail(key, f"expected one of {', '.join(options)}, got {v!r}")
        return v

    def list(self, key: str, default: Sequence[str]) -> list[str]:
        v = self._raw(key, None)
        if v is None:
            return list(default)
        return [t.strip() for t in v.split(",") if t.strip()]

    def grid(self, key: str, default: Sequence[float]) -> list[float]:
        """Comma list, or ``start:stop:step`` with ``stop`` included."""
        v = self._raw(key, None)
        if v is None:
            return [float(x) for x in default]
        try:
            if ":" in v:
                start, stop, step = (float(t) for t in v.split(":"))
                if step <= 0:
                    self._fail(key, "range step must be positive")
                n = int(math.floor((stop - start) / step + 1e-9)) + 1
                return [round(start + i * step, 10) for i in range(max(n, 0))]
            return [float(t) for t in v.split(",") if t.strip()]
        except ValueError:
            self._fail(key, f"cannot parse grid {v!r}")


SECTIONS: dict[str, tuple[str, ...]] = {
    "experiment": ("seed", "out", "formats"),
    "gmi-sweep": ("snr_db", "n_symbols", "maxlog", "workers"),
    "reach-sweep": (
        "launch_power_dbm", "circulations", "spans_per_circulation", "seeds", "n_symbols",
        "training_symbols", "taps", "mu", "bps_window", "pilot_interval", "amplifier", "noise_figure_db", "span_km",
        "alpha_db_per_km", "dispersion_ps_nm_km", "gamma_per_w_km", "max_nl_phase",
        "max_step_km", "stop_ngmi", "channels", "symbol_rate_gbd", "fec_overhead",
        "total_overhead", "polarization_scrambling",
    ),
    "optimize": (
        "initial", "name", "target_snr_db", "max_iters", "step_size", "n_mc_symbols",
        "constraint", "gradient", "init_jitter", "label_search",
    ),
    "fec-eval": ("code", "snr_db", "frames", "max_iters", "algorithm", "alpha"),
}


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------


@contextmanager
def atomic_output(path: Path) -> Iterator[Path]:
    """Yield ``path.partial``; rename to ``path`` only if the block succeeds."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    yield tmp
    os.replace(tmp, path)


def _resolve_format(name: str) -> Constellation4D:
    try:
        return get_format(name)
    except ConstellationError as exc:
        raise ConfigError(str(exc)) from None


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", Path(name).stem if name.endswith(".csv") else name)


@dataclass
class Context:
    seed: int
    out: Path
    formats: list[str]
    config: Config


def _context(args) -> Context:
    cfg = Config(args.config)
    exp = cfg.section("experiment")
    seed = args.seed if args.seed is not None else exp.int("seed", None)
    if seed is None:
        raise ConfigError("a seed is required: set [experiment] seed or pass --seed")
    if seed < 0 or seed >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    out = Path(args.out if args.out is not None else exp.str("out", "."))
    formats = exp.list("formats", ["pm8qam", "2a8psk", "4d-64prs"])
    if not formats:
        raise ConfigError(f"{cfg._where('experiment', 'formats')}: empty format list")
    return Context(seed, out, formats, cfg)


# --------------------------------------------------------------------------
# formats
# --------------------------------------------------------------------------


def cmd_formats(args) -> int:
    if args.action == "list":
        for name in BUILTIN_FORMATS:
            print(name)
        return 0
    if not args.name or not args.path:
        raise ConfigError("usage: formats export NAME PATH")
    c = _resolve_format(args.name)
    path = Path(args.path)
    with atomic_output(path) as tmp:
        tmp.write_text(f"# schema={CONSTELLATION_SCHEMA}\n" + format_constellation(c), encoding="utf-8", newline="\n")
    print(f"wrote {path}")
    return 0


# --------------------------------------------------------------------------
# gmi-sweep
# --------------------------------------------------------------------------


def cmd_gmi_sweep(args) -> int:
    ctx = _context(args)
    sec = ctx.config.section("gmi-sweep")
    grid = sec.grid("snr_db", np.arange(6.0, 14.01, 0.5))
    if not grid:
        raise ConfigError(f"{ctx.config._where('gmi-sweep', 'snr_db')}: empty SNR grid")
    n = sec.int("n_symbols", 1 << 20)
    maxlog = sec.bool("maxlog", False)
    workers = sec.int("workers", 1)
    for name in ctx.formats:
        c = _resolve_format(name)
        curve = metrics.awgn_gmi_sweep(c, grid, n, ctx.seed, maxlog=maxlog, workers=workers)
        path = ctx.out / f"gmi_{_slug(name)}.csv"
        with atomic_output(path) as tmp:
            metrics.write_curve_csv(curve, c.bits_per_symbol, tmp)
        try:
            req = f"{metrics.required_snr_at(curve, NGMI_THRESHOLD * c.bits_per_symbol):.3f} dB"
        except ValueError:
            req = "not bracketed"
        print(f"{name}: SNR at NGMI {NGMI_THRESHOLD} = {req} -> {path}")
    return 0


# --------------------------------------------------------------------------
# optimize
# --------------------------------------------------------------------------


def cmd_optimize(args) -> int:
    ctx = _context(args)
    sec = ctx.config.section("optimize")
    c0 = _resolve_format(sec.str("initial", "2a8psk"))
    name = sec.str("name", "optimized")
    try:
        cfg = optimizer.OptimizerConfig(
            target_snr_db=sec.float("target_snr_db", None),
            max_iters=sec.int("max_iters", 300),
            step_size=sec.float("step_size", 0.5),
            n_mc_symbols=sec.int("n_mc_symbols", 10000),
            seed=ctx.seed,
            constraint=sec.choice("constraint", "prs-structured", optimizer.CONSTRAINTS),
            gradient=sec.choice("gradient", "reparameterized-analytic", optimizer.GRADIENTS),
            init_jitter=sec.float("init_jitter", 0.02),
        )
    except ValueError as exc:
        raise ConfigError(f"{ctx.config._where('optimize', None)}: [optimize] {exc}") from None
    if cfg.max_iters == 0:
        result = optimizer.optimize_gmi(c0, cfg)
    elif sec.bool("label_search", True):
        result = optimizer.shape_format(c0, cfg, rounds=1)
    else:
        result = optimizer.optimize_gmi(c0, cfg)
    c = result.constellation.with_points(result.constellation.points, name)
    cpath = ctx.out / f"{_slug(name)}.csv"
    tpath = ctx.out / f"{_slug(name)}_trace.csv"
    with atomic_output(cpath) as tmp:
        tmp.write_text(f"# schema={CONSTELLATION_SCHEMA}\n" + format_constellation(c), encoding="utf-8", newline="\n")
    with atomic_output(tpath) as tmp:
        optimizer.write_trace_csv(result.trace, tmp)
    print(f"GMI {result.trace[0].gmi:.4f} -> {result.trace[-1].gmi:.4f} at {result.target_snr_db:.3f} dB")
    print(f"wrote {cpath} and {tpath}")
    return 0


# --------------------------------------------------------------------------
# fec-eval
# --------------------------------------------------------------------------


def _code(spec: str, where: str) -> fec.LdpcCode:
    if spec == "full":
        return fec.builtin_code(short=False)
    if spec == "desk":
        return fec.builtin_code(short=True)
    if not Path(spec).is_file():
        raise ConfigError(f"{where}: code file {spec!r} not found")
    try:
        return fec.load_code(spec)
    except fec.CodeFileError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def cmd_fec_eval(args) -> int:
    ctx = _context(args)
    sec = ctx.config.section("fec-eval")
    code = _code(sec.str("code", "desk"), ctx.config._where("fec-eval", "code"))
    grid = sec.grid("snr_db", [8.0, 8.5, 9.0, 9.5])
    if not grid:
        raise ConfigError(f"{ctx.config._where('fec-eval', 'snr_db')}: empty SNR grid")
    frames = sec.int("frames", 20)
    max_iters = sec.int("max_iters", 50)
    algorithm = sec.choice("algorithm", "normalized-min-sum", ("normalized-min-sum", "sum-product"))
    alpha = sec.float("alpha", 0.75)
    for name in ctx.formats:
        c = _resolve_format(name)
        pts = [fec.post_fec_chain(c, code, s, frames, ctx.seed, max_iters, algorithm, alpha) for s in grid]
        path = ctx.out / f"fec_{_slug(name)}.csv"
        with atomic_output(path) as tmp:
            fec.write_fec_csv(pts, tmp)
        for p in pts:
            print(f"{name} {p.snr_db:6.2f} dB  NGMI {p.ngmi:.4f}  pre {p.pre_fec_ber:.3e}  post {p.post_fec_ber:.3e}")
    return 0


# --------------------------------------------------------------------------
# reach-sweep
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ReachConfig:
    fiber: channel.FiberParams = field(default_factory=channel.FiberParams)
    amplifier: str = "edfa"
    noise_figure_db: float | None = None
    spans_per_circulation: int = 5
    circulations: int = 60
    n_symbols: int = 1 << 16
    training_symbols: int = 8192
    taps: int = 15
    mu: float = 3e-3
    # no laser phase noise in the loop model, so a long window only helps
    bps_window: int = 128
    pilot_interval: int = rxdsp.PILOT_INTERVAL
    max_nl_phase: float = 1e-2
    max_step_km: float = 2.0
    stop_ngmi: float | None = 0.8
    channels: int = 1
    symbol_rate: float = channel.SYMBOL_RATE
    polarization_scrambling: bool = False

    def amplifier_model(self) -> channel.AmplifierModel:
        make = channel.AmplifierModel.edfa if self.amplifier == "edfa" else channel.AmplifierModel.raman_hybrid
        amp = make(self.fiber)
        if self.noise_figure_db is not None:
            amp = replace(amp, noise_figure_db=self.noise_figure_db)
        return amp

    @property
    def circulation_km(self) -> float:
        return self.spans_per_circulation * self.fiber.length_km


@dataclass(frozen=True)
class Checkpoint:
    format: str
    launch_power_dbm: float
    seed: int
    circulation: int
    distance_km: float
    snr_db: float
    gmi: float
    gmi_stderr: float
    ngmi: float
    ber: float


def _tx_indices(seed: int, n: int, m: int) -> np.ndarray:
    # format-independent stream: every format sends the same label sequence
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed), counter=[0, 0, 2, 0]))
    return rng.integers(0, 1 << m, n)


def _transmit(c: Constellation4D, symbols: np.ndarray, cfg: ReachConfig) -> tuple[channel.Waveform, int]:
    if cfg.channels == 1:
        return channel.rrc_shape(symbols, 0.01, 2, None, cfg.symbol_rate), 2
    sps = 2 * int(math.ceil(cfg.channels * 50e9 / cfg.symbol_rate))
    return channel.wdm_multiplex(symbols, cfg.channels, sps, 50e9, 0.01, cfg.symbol_rate), sps


def _receive(wf: channel.Waveform, sps: int, dispersion_ps_nm: float) -> channel.Waveform:
    out = rxdsp.cd_compensate(wf, dispersion_ps_nm)
    if sps != 2:
        # channel under test sits at baseband; the matched filter in the
        # frontend rejects what is left of the neighbors after resampling
        out = channel.resample(out, sps, 2)
    out, _ = rxdsp.frontend(out, 0.0, recover_frequency=False)
    return out


def evaluate_symbols(c: Constellation4D, rx: np.ndarray, tx_idx: np.ndarray) -> tuple[float, metrics.GmiEstimate, float]:
    """Data-aided noise estimate, exact-LLR GMI and hard-decision BER of an equalized block."""
    ref = c.points[tx_idx]
    sigma2 = float(np.mean(np.sum((rx - ref) ** 2, axis=1)) / 4)
    sigma2 = max(sigma2, 1e-12)
    llr = metrics.llr_exact(c, rx, sigma2)
    est = metrics.gmi_from_llrs(c.bits[tx_idx], llr)
    ber = metrics.ber_count(c.bits[tx_idx], c.bits[nearest_index(c, rx)])[2]
    return float(metrics.snr_db_from_variance(sigma2)), est, ber


def simulate_reach(
    c: Constellation4D,
    cfg: ReachConfig,
    launch_power_dbm: float,
    seed: int,
    name: str | None = None,
) -> list[Checkpoint]:
    """
    Loop transmission of one frame with DSP and metrics at every circulation.

    Transmitted labels and amplifier noise depend only on ``seed``, so two
    formats run with the same seed see paired realizations. Stops early once
    NGMI drops below ``cfg.stop_ngmi``. Cycle slips are undone with pilot
    blocks every ``cfg.pilot_interval`` symbols after the training sequence.
    """
    m = c.bits_per_symbol
    idx = c.index_of_label(_tx_indices(seed, cfg.n_symbols, m))
    symbols = c.points[idx]
    wf, sps = _transmit(c, symbols, cfg)
    loop = channel.LoopConfig(cfg.spans_per_circulation, cfg.circulations, launch_power_dbm, cfg.polarization_scrambling)
    amp = cfg.amplifier_model()
    rows = []
    payload = slice(cfg.training_symbols, None)
    stream = channel.run_loop(wf, cfg.fiber, amp, loop, seed, max_nl_phase=cfg.max_nl_phase, max_step_km=cfg.max_step_km)
    for k, out in stream:
        distance = k * cfg.circulation_km
        rx_wf = _receive(out, sps, cfg.fiber.dispersion_ps_nm_km * distance)
        state = rxdsp.EqualizerState.identity(cfg.taps, mu=cfg.mu, bps_window=cfg.bps_window)
        rx, phase = rxdsp.mimo_equalize(rx_wf, c, state, symbols, cfg.training_symbols)
        if cfg.pilot_interval:
            rx, _ = rxdsp.pilot_slip_correction(rx, symbols, c, cfg.training_symbols, cfg.pilot_interval, phase=phase)
        snr, est, ber = evaluate_symbols(c, rx[payload], idx[payload])
        row = Checkpoint(name or c.name, launch_power_dbm, seed, k, distance, snr, est.value, est.std_error, metrics.ngmi(est, m), ber)
        rows.append(row)
        log.info("%s P=%.1f dBm seed=%d %6.0f km NGMI %.4f BER %.3e", row.format, launch_power_dbm, seed, distance, row.ngmi, ber)
        if cfg.stop_ngmi is not None and row.ngmi < cfg.stop_ngmi:
            break
    return rows


def first_crossing(x: Sequence[float], y: Sequence[float], threshold: float, log_y: bool = False) -> float:
    """
    First ``x`` where ``y`` crosses ``threshold``, by linear interpolation.

    ``log_y`` interpolates ``log10(y)``. Returns ``nan`` if ``y`` never
    crosses and ``x[0]`` if it starts on the far side.
    """
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    if xs.size == 0:
        return float("nan")
    if log_y:
        ys = np.log10(np.maximum(ys, 1e-300))
        threshold = math.log10(threshold)
    side = np.sign(ys - threshold)
    if side[0] == 0:
        return float(xs[0])
    for i in range(1, xs.size):
        if side[i] == 0:
            return float(xs[i])
        if side[i] != side[0]:
            return float(xs[i - 1] + (threshold - ys[i - 1]) * (xs[i] - xs[i - 1]) / (ys[i] - ys[i - 1]))
    return float("nan")


def reach_crossings(rows: Sequence[Checkpoint]) -> tuple[float, float]:
    """NGMI-0.85 and BER-4e-2 crossing distances of one run (distance 0 is error-free)."""
    dist = [0.0] + [r.distance_km for r in rows]
    ngmi_vals = [1.0] + [r.ngmi for r in rows]
    ber_vals = [1e-12] + [r.ber for r in rows]
    return first_crossing(dist, ngmi_vals, NGMI_THRESHOLD), first_crossing(dist, ber_vals, BER_THRESHOLD, log_y=True)


def net_rate(symbol_rate: float, bits_per_symbol: int, total_overhead: float) -> float:
    return symbol_rate * bits_per_symbol / (1 + total_overhead)


def net_spectral_efficiency(bits_per_symbol: int, fec_overhead: float) -> float:
    return bits_per_symbol / (1 + fec_overhead)


def cmd_reach_sweep(args) -> int:
    ctx = _context(args)
    sec = ctx.config.section("reach-sweep")
    fiber = channel.FiberParams(
        length_km=sec.float("span_km", 75.0),
        alpha_db_per_km=sec.float("alpha_db_per_km", 0.20),
        dispersion_ps_nm_km=sec.float("dispersion_ps_nm_km", 17.0),
        gamma_per_w_km=sec.float("gamma_per_w_km", 1.3),
    )
    cfg = ReachConfig(
        fiber=fiber,
        amplifier=sec.choice("amplifier", "edfa", ("edfa", "raman")),
        noise_figure_db=sec.float("noise_figure_db", None),
        spans_per_circulation=sec.int("spans_per_circulation", 5),
        circulations=sec.int("circulations", 60),
        n_symbols=sec.int("n_symbols", 1 << 16),
        training_symbols=sec.int("training_symbols", 8192),
        taps=sec.int("taps", 15),
        mu=sec.float("mu", 3e-3),
        bps_window=sec.int("bps_window", 128),
        pilot_interval=sec.int("pilot_interval", rxdsp.PILOT_INTERVAL),
        max_nl_phase=sec.float("max_nl_phase", 1e-2),
        max_step_km=sec.float("max_step_km", 2.0),
        stop_ngmi=sec.float("stop_ngmi", 0.8),
        channels=sec.int("channels", 1),
        symbol_rate=sec.float("symbol_rate_gbd", channel.SYMBOL_RATE / 1e9) * 1e9,
        polarization_scrambling=sec.bool("polarization_scrambling", False),
    )
    if not 1 <= cfg.channels <= 3:
        raise ConfigError(f"{ctx.config._where('reach-sweep', 'channels')}: channels must be 1, 2 or 3")
    if cfg.training_symbols >= cfg.n_symbols:
        raise ConfigError(f"{ctx.config._where('reach-sweep', 'training_symbols')}: training must be shorter than the frame")
    powers = sec.grid("launch_power_dbm", [0.0])
    if not powers:
        raise ConfigError(f"{ctx.config._where('reach-sweep', 'launch_power_dbm')}: empty launch power grid")
    seeds = [ctx.seed + i for i in range(sec.int("seeds", 1))]
    fec_oh = sec.float("fec_overhead", 0.25)
    total_oh = sec.float("total_overhead", 0.255)

    rows: list[Checkpoint] = []
    for name in ctx.formats:
        c = _resolve_format(name)
        for p in powers:
            for s in seeds:
                rows.extend(simulate_reach(c, cfg, p, s, name))

    csv_path = ctx.out / "reach.csv"
    with atomic_output(csv_path) as tmp:
        with tmp.open("w", newline="\n", encoding="utf-8") as fh:
            fh.write(f"# schema={REACH_SCHEMA}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["format", "launch_power_dbm", "seed", "circulation", "distance_km", "snr_db", "gmi", "gmi_stderr", "ngmi", "ber"])
            for r in rows:
                w.writerow([r.format, f"{r.launch_power_dbm:.2f}", r.seed, r.circulation, f"{r.distance_km:.1f}",
                            f"{r.snr_db:.4f}", f"{r.gmi:.6f}", f"{r.gmi_stderr:.6f}", f"{r.ngmi:.6f}", f"{r.ber:.6e}"])

    m = _resolve_format(ctx.formats[0]).bits_per_symbol
    report = {
        "schema": REPORT_SCHEMA,
        "net_rate_gbps": net_rate(cfg.symbol_rate, m, total_oh) / 1e9,
        "net_spectral_efficiency_bits_per_4d": net_spectral_efficiency(m, fec_oh),
        "thresholds": {"ngmi": NGMI_THRESHOLD, "ber": BER_THRESHOLD},
        "crossings": [],
    }
    for name in ctx.formats:
        for p in powers:
            for s in seeds:
                run = [r for r in rows if r.format == name and r.launch_power_dbm == p and r.seed == s]
                d_ngmi, d_ber = reach_crossings(run)
                report["crossings"].append(
                    {"format": name, "launch_power_dbm": p, "seed": s, "ngmi_distance_km": _json_num(d_ngmi), "ber_distance_km": _json_num(d_ber)}
                )
    json_path = ctx.out / "reach_report.json"
    with atomic_output(json_path) as tmp:
        tmp.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")

    print(f"net rate: {report['net_rate_gbps']:.1f} Gbit/s ({cfg.symbol_rate / 1e9:.2f} GBd x {m} bit / {1 + total_oh:.3f})")
    print(f"net SE: {report['net_spectral_efficiency_bits_per_4d']:.2f} bit/4D ({m} bit / {1 + fec_oh:.2f})")
    for x in report["crossings"]:
        print(
            f"{x['format']} P={x['launch_power_dbm']:+.1f} dBm seed={x['seed']}: "
            f"NGMI {NGMI_THRESHOLD} at {_fmt_km(x['ngmi_distance_km'])}, BER {BER_THRESHOLD:g} at {_fmt_km(x['ber_distance_km'])}"
        )
    print(f"wrote {csv_path} and {json_path}")
    return 0


def _json_num(v: float):
    return None if v is None or not math.isfinite(v) else round(v, 3)


def _fmt_km(v) -> str:
    return "beyond sweep" if v is None else f"{v:.0f} km"


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment file")
    common.add_argument("--seed", type=int, help="override [experiment] seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory (default: [experiment] out or .)")
    common.add_argument("-v", "--verbose", action="store_true", help="progress logging")

    p = argparse.ArgumentParser(prog="prs4d", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    f = sub.add_parser("formats", parents=[common], help="list or export built-in formats")
    f.add_argument("action", choices=["list", "export"])
    f.add_argument("name", nargs="?")
    f.add_argument("path", nargs="?")
    f.set_defaults(func=cmd_formats)
    for name, func, text in [
        ("gmi-sweep", cmd_gmi_sweep, "GMI/BER versus SNR on AWGN"),
        ("reach-sweep", cmd_reach_sweep, "loop transmission reach sweep"),
        ("optimize", cmd_optimize, "GMI-maximizing geometric shaping"),
        ("fec-eval", cmd_fec_eval, "pre/post-FEC BER versus SNR"),
    ]:
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.set_defaults(func=func)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConstellationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
