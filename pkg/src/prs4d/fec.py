"""
IRA-structured LDPC codes (DVB-S2 layout), encoder, iterative decoders and a
bit-interleaved coded-modulation chain for post-FEC evaluation.

Code-definition file
--------------------
Plain text. Line 1 is ``n k``; then one line per information column listing
its (0-based) check indices, space-separated. Parity column ``k + j`` connects
checks ``j`` and ``j + 1`` (the accumulator chain) and is not listed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from prs4d.constellation import Constellation4D, nearest_index
from prs4d.metrics import LLR_CLIP, gmi_from_llrs, llr_exact, ngmi, noise_variance

NORMAL_CODE = "ldpc_r45_n64800.txt"
SHORT_CODE = "ldpc_r45_n6480.txt"

_PAD_LLR = 1e9


class CodeFileError(ValueError):
    pass


@dataclass(frozen=True)
class LdpcCode:
    """
    Parity-check structure ``H = [H_info | accumulator]`` over GF(2).

    ``check_vars`` lists the variable nodes of every check, padded with ``n``.
    """

    n: int
    k: int
    info_checks: tuple[np.ndarray, ...]
    check_vars: np.ndarray
    h_info: sp.csr_matrix

    @property
    def n_checks(self) -> int:
        return self.n - self.k

    @property
    def rate(self) -> float:
        return self.k / self.n

    def syndrome(self, codeword: np.ndarray) -> np.ndarray:
        cw = np.asarray(codeword, dtype=np.int64)
        padded = np.concatenate([cw, np.zeros(cw.shape[:-1] + (1,), dtype=np.int64)], axis=-1)
        return padded[..., self.check_vars].sum(axis=-1) % 2


@dataclass(frozen=True)
class DecodeResult:
    bits: np.ndarray
    iterations_used: int
    converged: bool
    # full hard-decision word; a codeword whenever ``converged``
    codeword: np.ndarray | None = None


def _build(n: int, k: int, info_checks: Sequence[np.ndarray]) -> LdpcCode:
    nc = n - k
    rows = np.concatenate(info_checks)
    cols = np.repeat(np.arange(k), [len(c) for c in info_checks])
    h_info = sp.csr_matrix((np.ones(rows.size, dtype=np.int64), (rows, cols)), shape=(nc, k))
    h_info.sum_duplicates()
    if np.any(h_info.data > 1):
        raise CodeFileError("repeated check index within an information column")
    # Parity column k + j sits in checks j and j + 1.
    p_rows = np.concatenate([np.arange(nc), np.arange(1, nc)])
    p_cols = np.concatenate([k + np.arange(nc), k + np.arange(nc - 1)])
    all_rows = np.concatenate([rows, p_rows])
    all_cols = np.concatenate([cols, p_cols])
    order = np.lexsort((all_cols, all_rows))
    all_rows, all_cols = all_rows[order], all_cols[order]
    degree = np.bincount(all_rows, minlength=nc)
    if np.any(degree == 0):
        raise CodeFileError("empty check row")
    dmax = int(degree.max())
    check_vars = np.full((nc, dmax), n, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(degree)[:-1]])
    pos = np.arange(all_rows.size) - starts[all_rows]
    check_vars[all_rows, pos] = all_cols
    return LdpcCode(n, k, tuple(np.asarray(c, dtype=np.int64) for c in info_checks), check_vars, h_info)


def load_code(path) -> LdpcCode:
    """Parse a code-definition file; raises :class:`CodeFileError` if malformed."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return _parse_code(lines)


def _parse_code(lines: list[str]) -> LdpcCode:
    if not lines:
        raise CodeFileError("empty code file")
    try:
        n, k = (int(v) for v in lines[0].split())
    except ValueError:
        raise CodeFileError("line 1 must be 'n k'") from None
    if not 0 < k < n:
        raise CodeFileError(f"invalid dimensions n={n} k={k}")
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != k:
        raise CodeFileError(f"expected {k} information columns, found {len(body)}")
    info = []
    for i, ln in enumerate(body, start=2):
        try:
            idx = np.array([int(v) for v in ln.split()], dtype=np.int64)
        except ValueError:
            raise CodeFileError(f"line {i}: non-integer check index") from None
        if idx.size == 0 or idx.min() < 0 or idx.max() >= n - k:
            raise CodeFileError(f"line {i}: check index out of range")
        info.append(idx)
    return _build(n, k, info)


def builtin_code(short: bool = False) -> LdpcCode:
    name = SHORT_CODE if short else NORMAL_CODE
    with resources.files("prs4d.data").joinpath(name).open("r", encoding="utf-8") as fh:
        return _parse_code(fh.read().splitlines())


# --------------------------------------------------------------------------
# Code construction
# --------------------------------------------------------------------------


def make_ira_table(
    n: int,
    k: int,
    group: int,
    degrees: Sequence[tuple[int, int]],
    seed: int = 0,
    max_restarts: int = 200,
) -> list[list[int]]:
    """
    Random quasi-cyclic IRA address table in the DVB-S2 layout.

    Information bit ``m`` of table row ``g`` with entry ``x`` connects to check
    ``(x + (m % group) * q) % (n - k)`` with ``q = (n - k) / group``.
    ``degrees`` lists ``(row_count, column_degree)``. The table keeps every
    check at the same information degree and has no length-4 cycles,
    including those through the accumulator chain.
    """
    nc = n - k
    if k % group or nc % group:
        raise ValueError("group size must divide k and n - k")
    q = nc // group
    rows = [deg for count, deg in degrees for _ in range(count)]
    if len(rows) != k // group:
        raise ValueError("degree profile does not cover k / group rows")
    total = sum(rows)
    if total % q:
        raise ValueError("entries cannot be spread evenly over residues")
    per_residue = total // q
    rng = np.random.default_rng(seed)
    for _ in range(max_restarts):
        budget = np.full(q, per_residue)
        keys: set[tuple[int, int]] = set()
        table: list[list[int]] = []
        ok = True
        for deg in rows:
            row = _table_row(deg, nc, q, budget, keys, rng)
            if row is None:
                ok = False
                break
            table.append(row)
        if ok:
            return table
    raise RuntimeError("could not construct a 4-cycle-free table")


def _table_row(deg, nc, q, budget, keys, rng, tries: int = 2000):
    row: list[int] = []
    new_keys: list[tuple[int, int]] = []
    for _ in range(deg):
        for _ in range(tries):
            open_res = np.flatnonzero(budget > 0)
            if open_res.size == 0:
                return None
            r = int(rng.choice(open_res))
            x = r + q * int(rng.integers(0, nc // q))
            cand = []
            for y in row:
                d1 = (x - y) % nc
                d2 = (y - x) % nc
                if d1 in (1, nc - 1):
                    break
                cand.append((d1, x % q))
                cand.append((d2, y % q))
            else:
                if x not in row and not any(c in keys for c in cand) and len(set(cand)) == len(cand):
                    if not any(c in new_keys for c in cand):
                        row.append(x)
                        new_keys.extend(cand)
                        budget[r] -= 1
                        break
                continue
        else:
            for y in row:
                budget[y % q] += 1
            return None
    keys.update(new_keys)
    return row


def expand_table(table: Sequence[Sequence[int]], n: int, k: int, group: int) -> list[np.ndarray]:
    nc = n - k
    q = nc // group
    cols = []
    for row in table:
        base = np.asarray(row, dtype=np.int64)
        for m in range(group):
            cols.append((base + m * q) % nc)
    return cols


def write_code(path, n: int, k: int, info_checks: Sequence[np.ndarray]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{n} {k}\n")
        for c in info_checks:
            fh.write(" ".join(str(int(v)) for v in c) + "\n")


# Rate 4/5: 18 x 11-degree and 126 x 3-degree table rows, 36 residues.
RATE_45_DEGREES = ((18, 11), (126, 3))
# Seed of the shipped code files.
BUILTIN_CODE_SEED = 2024


def make_rate45_code(n: int = 64800, seed: int = BUILTIN_CODE_SEED) -> LdpcCode:
    """Rate-4/5 IRA code with the DVB-S2 degree profile, scaled by ``n / 64800``."""
    if n % 180:
        raise ValueError("n must be a multiple of 180")
    k = n * 4 // 5
    group = k // 144
    table = make_ira_table(n, k, group, RATE_45_DEGREES, seed)
    return _build(n, k, expand_table(table, n, k, group))


# --------------------------------------------------------------------------
# Encoder
# --------------------------------------------------------------------------


def encode(code: LdpcCode, info_bits: np.ndarray) -> np.ndarray:
    """Systematic encoding ``[u | p]`` with ``p_j = p_{j-1} xor (H_info u)_j``."""
    u = np.asarray(info_bits, dtype=np.int64)
    if u.shape[-1] != code.k:
        raise ValueError(f"expected {code.k} information bits, got {u.shape[-1]}")
    s = (code.h_info @ u.reshape(-1, code.k).T) % 2
    parity = (np.cumsum(s, axis=0) % 2).T
    return np.concatenate([u.reshape(-1, code.k), parity], axis=1).reshape(u.shape[:-1] + (code.n,)).astype(np.int8)


# --------------------------------------------------------------------------
# Decoder
# --------------------------------------------------------------------------


def _phi(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 1e-12, 40.0)
    return -np.log(np.tanh(x / 2.0))


def _edge_matrix(code: LdpcCode) -> sp.csr_matrix:
    flat = code.check_vars.reshape(-1)
    real = flat < code.n
    e = np.flatnonzero(real)
    return sp.csr_matrix((np.ones(e.size), (flat[real], e)), shape=(code.n, flat.size))


def decode_batch(
    code: LdpcCode,
    llrs: np.ndarray,
    max_iters: int = 50,
    algorithm: str = "normalized-min-sum",
    alpha: float = 0.75,
) -> list[DecodeResult]:
    """
    Flooding belief propagation on ``(F, n)`` channel LLRs (positive favors 0).

    Frames leave the active set once every parity check is satisfied.
    """
    if algorithm not in ("normalized-min-sum", "sum-product"):
        raise ValueError(f"unknown algorithm {algorithm!r}")
    llr = np.atleast_2d(np.asarray(llrs, dtype=float))
    if llr.shape[1] != code.n:
        raise ValueError(f"expected {code.n} LLRs per frame, got {llr.shape[1]}")
    frames = llr.shape[0]
    cv = code.check_vars
    pad = cv == code.n
    edges = _edge_matrix(code)
    ch = np.concatenate([llr, np.full((frames, 1), _PAD_LLR)], axis=1)

    out_bits = (llr < 0).astype(np.int8)
    iters = np.zeros(frames, dtype=np.int64)
    done = np.zeros(frames, dtype=bool)

    hard = out_bits
    synd_ok = ~np.any(code.syndrome(hard), axis=1)
    done |= synd_ok

    active = np.flatnonzero(~done)
    c2v = np.zeros((active.size,) + cv.shape)
    for it in range(1, max_iters + 1):
        if active.size == 0:
            break
        tot = ch[active]
        tot_vars = tot[:, :-1] + (edges @ c2v.reshape(active.size, -1).T).T
        tot = np.concatenate([tot_vars, tot[:, -1:]], axis=1)
        v2c = tot[:, cv] - c2v
        v2c[:, pad] = _PAD_LLR
        sign = np.where(v2c < 0, -1.0, 1.0)
        sign_prod = np.prod(sign, axis=2, keepdims=True)
        mag = np.abs(v2c)
        if algorithm == "normalized-min-sum":
            first = np.argmin(mag, axis=2)
            min1 = np.take_along_axis(mag, first[..., None], axis=2)
            masked = mag.copy()
            np.put_along_axis(masked, first[..., None], np.inf, axis=2)
            min2 = masked.min(axis=2, keepdims=True)
            pos = np.arange(cv.shape[1])[None, None, :]
            new_mag = alpha * np.where(pos == first[..., None], min2, min1)
        else:
            ph = _phi(mag)
            new_mag = _phi(ph.sum(axis=2, keepdims=True) - ph)
        c2v = sign_prod * sign * new_mag
        c2v[:, pad] = 0.0
        post = ch[active, :-1] + (edges @ c2v.reshape(active.size, -1).T).T
        hard = (post < 0).astype(np.int8)
        ok = ~np.any(code.syndrome(hard), axis=1)
        out_bits[active] = hard
        iters[active] = it
        if np.any(ok):
            done[active[ok]] = True
            keep = ~ok
            active = active[keep]
            c2v = c2v[keep]

    return [DecodeResult(out_bits[f, : code.k].copy(), int(iters[f]), bool(done[f]), out_bits[f].copy()) for f in range(frames)]


def decode(code: LdpcCode, llrs: np.ndarray, max_iters: int = 50, algorithm: str = "normalized-min-sum", alpha: float = 0.75) -> DecodeResult:
    return decode_batch(code, np.asarray(llrs)[None, :], max_iters, algorithm, alpha)[0]


# --------------------------------------------------------------------------
# BICM chain
# --------------------------------------------------------------------------


def interleave(codeword: np.ndarray, m: int) -> np.ndarray:
    """Row-column interleaver: bit ``i`` of symbol ``s`` is ``codeword[i * S + s]``."""
    cw = np.asarray(codeword)
    if cw.shape[-1] % m:
        raise ValueError(f"codeword length {cw.shape[-1]} not divisible by {m}")
    return np.swapaxes(cw.reshape(cw.shape[:-1] + (m, -1)), -1, -2)


def deinterleave(symbol_values: np.ndarray) -> np.ndarray:
    v = np.asarray(symbol_values)
    return np.swapaxes(v, -1, -2).reshape(v.shape[:-2] + (-1,))


@dataclass(frozen=True)
class FecPoint:
    snr_db: float
    pre_fec_ber: float
    ngmi: float
    post_fec_ber: float
    frames: int
    frames_failed: int


def _frame_rng(seed: int, frame: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed), counter=[0, 0, 1, frame]))


def post_fec_chain(
    c: Constellation4D,
    code: LdpcCode,
    snr_db: float,
    n_frames: int,
    seed: int,
    max_iters: int = 50,
    algorithm: str = "normalized-min-sum",
    alpha: float = 0.75,
    batch: int = 8,
) -> FecPoint:
    """
    Bits -> LDPC -> interleaver -> symbols -> AWGN -> exact LLRs -> decoder.

    Pre-FEC BER (hard symbol decisions), NGMI and post-FEC BER (information
    bits) are measured on the same noise. Frame ``f`` draws its bits and
    noise from a stream keyed by ``(seed, f)`` only, so different formats
    and SNRs see common random numbers.
    """
    m = c.bits_per_symbol
    if code.n % m:
        raise ValueError(f"code length {code.n} is not a multiple of {m} bits per symbol")
    n_sym = code.n // m
    sigma2 = float(noise_variance(snr_db))
    pre_err = post_err = failed = 0
    all_bits, all_llr = [], []
    for start in range(0, n_frames, batch):
        fids = range(start, min(start + batch, n_frames))
        infos, llrs = [], []
        for f in fids:
            rng = _frame_rng(seed, f)
            info = rng.integers(0, 2, code.k).astype(np.int8)
            z = rng.standard_normal((n_sym, 4))
            cw = encode(code, info)
            sym_bits = interleave(cw, m)
            idx = c.index_of_label(sym_bits.astype(np.int64) @ (1 << np.arange(m - 1, -1, -1)))
            y = c.points[idx] + np.sqrt(sigma2) * z
            llr = llr_exact(c, y, sigma2)
            pre_err += int(np.count_nonzero(c.bits[nearest_index(c, y)] != sym_bits))
            all_bits.append(sym_bits)
            all_llr.append(np.clip(llr, -LLR_CLIP, LLR_CLIP))
            infos.append(info)
            llrs.append(deinterleave(np.clip(llr, -LLR_CLIP, LLR_CLIP)))
        for info, res in zip(infos, decode_batch(code, np.array(llrs), max_iters, algorithm, alpha)):
            e = int(np.count_nonzero(res.bits != info))
            post_err += e
            failed += int(e > 0 or not res.converged)
    est = gmi_from_llrs(np.concatenate(all_bits), np.concatenate(all_llr))
    return FecPoint(
        float(snr_db),
        pre_err / (n_frames * code.n),
        ngmi(est, m),
        post_err / (n_frames * code.k),
        n_frames,
        failed,
    )


FEC_SCHEMA = "fec_eval/1"


def write_fec_csv(points: Sequence[FecPoint], path) -> None:
    with Path(path).open("w", newline="\n", encoding="utf-8") as fh:
        fh.write(f"# schema={FEC_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snr_db", "pre_fec_ber", "ngmi", "post_fec_ber", "frames"])
        for p in points:
            w.writerow([f"{p.snr_db:.4f}", f"{p.pre_fec_ber:.8e}", f"{p.ngmi:.8f}", f"{p.post_fec_ber:.8e}", p.frames])
