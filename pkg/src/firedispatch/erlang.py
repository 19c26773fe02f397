"""Tail probabilities of Erlang sums and minima, and dispatch costs.

All Erlang variables have unit-mean phases. The response-time cost of a
dispatch is ``P(R > t_star)`` where ``R`` is the arrival time of the first
of the two trucks.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import gmpy2
import numpy as np

from .graph import Instance

# digits the alternating sum may lose before the extended path is used
MAX_LOST_DIGITS = 6.0
_GUARD_DIGITS = 40


def _check(w: int, t: float) -> None:
    if int(w) != w or w < 1:
        raise ValueError(f"phase count must be a positive integer, got {w}")
    if not t >= 0:
        raise ValueError(f"time must be nonnegative, got {t}")


def _clamp(p: float) -> float:
    return min(1.0, max(0.0, p))


@lru_cache(maxsize=None)
def erlang_tail(w: int, t: float) -> float:
    """P(Y > t) for Y ~ Erlang(w) with unit-mean phases."""
    _check(w, t)
    if t == 0:
        return 1.0
    log_t = math.log(t)
    return _clamp(math.fsum(math.exp(n * log_t - t - math.lgamma(n + 1)) for n in range(w)))


def min_tail(w1: int, w2: int, t: float) -> float:
    """P(min(Y1, Y2) > t) for independent Erlang(w1), Erlang(w2)."""
    _check(w1, t)
    _check(w2, t)
    return erlang_tail(w1, t) * erlang_tail(w2, t)


@lru_cache(maxsize=None)
def _pair_counts(w1: int, w2: int) -> tuple[int, ...]:
    # E[s] = sum over n + m = s, n < w1, m < w2 of s! / (n! m!)
    return tuple(
        sum(math.comb(s, n) for n in range(max(0, s - w2 + 1), min(s, w1 - 1) + 1))
        for s in range(w1 + w2 - 1)
    )


def _sum_min_body_float(w0: int, w1: int, w2: int, t: float) -> tuple[float, float]:
    """Triple-sum part of P(Y0 + min(Y1, Y2) > t) and its cancellation scale.

    Grouping the sum by ``s = n + m`` and ``k = s - l`` gives
    ``e**(-2t) / (w0-1)! * sum_s E[s] sum_(l+k=s) t**l / l! * (-1)**k I_(k+w0-1) / k!``.
    The scale is the larger of the biggest term and the rounding error of
    the recurrence in units of machine epsilon, so ``scale / result``
    measures how many digits the sum has lost.
    """
    kmax = w0 + w1 + w2 - 3
    et = math.exp(t)
    integrals = [math.expm1(t)]
    # forward error of I_k in units of machine epsilon
    amplification = [et]
    for k in range(1, kmax + 1):
        lead = t ** k * et
        amplification.append(k * amplification[-1] + lead + k * abs(integrals[-1]))
        integrals.append(lead - k * integrals[-1])
    smax = w1 + w2 - 2
    idx = np.arange(smax + 1)
    inv_fact = np.exp(-np.array([math.lgamma(i + 1) for i in idx]))
    powers = t ** idx * inv_fact
    sign = np.where(idx % 2, -1.0, 1.0)
    b = np.array(integrals[w0 - 1:]) * inv_fact
    err = np.array(amplification[w0 - 1:]) * inv_fact
    counts = np.array(_pair_counts(w1, w2), dtype=float)
    s_of = idx[:, None] + idx[None, :]
    mask = s_of <= smax
    weight = np.where(mask, counts[np.minimum(s_of, smax)], 0.0) * powers[:, None]
    scale = math.exp(-2 * t - math.lgamma(w0))
    terms = weight * (sign * b)[None, :] * scale
    total = float(terms.sum())
    biggest = float(np.abs(terms).max())
    error_units = float((weight * err[None, :]).sum() * scale)
    return total, max(biggest, error_units)


def _sum_min_body_exact(w0: int, w1: int, w2: int, t: float, bits: int) -> tuple[float, float]:
    """Same sum in binary fixed point with ``bits`` fractional bits.

    The convolution over ``l + k = s`` is done by packing both sequences
    into single integers (Kronecker substitution), so one evaluation costs
    O(w1 + w2) big-integer operations.
    """
    num, den = map(gmpy2.mpz, t.as_integer_ratio())
    one = gmpy2.mpz(1) << bits
    kmax = w0 + w1 + w2 - 3
    smax = w1 + w2 - 2
    with gmpy2.context(gmpy2.get_context(), precision=bits + int(2 * t) + 64):
        et = gmpy2.mpz(gmpy2.exp(gmpy2.mpfr(num) / den) * one)
    integrals = [et - one]
    lead = et
    for k in range(1, kmax + 1):
        lead = lead * num // den
        integrals.append(lead - k * integrals[-1])
    powers = [one]
    for l in range(1, smax + 1):
        powers.append(powers[-1] * num // (den * l))
    b = [integrals[k + w0 - 1] // math.factorial(k) for k in range(smax + 1)]
    width = max(powers).bit_length() + max(abs(x) for x in b).bit_length() + (smax + 1).bit_length() + 2
    packed_a = sum((a << (width * l) for l, a in enumerate(powers)), gmpy2.mpz(0))
    mask = (1 << width) - 1
    # packing needs nonnegative slots; rounding can leave tiny integrals negative
    slots = {}
    for parity in (0, 1):
        for sign in (1, -1):
            packed = sum((max(sign * b[k], 0) << (width * k) for k in range(parity, smax + 1, 2)),
                         gmpy2.mpz(0))
            slots[parity, sign] = packed_a * packed
    total = biggest = 0
    for s, count in enumerate(_pair_counts(w1, w2)):
        parts = {key: (prod >> (width * s)) & mask for key, prod in slots.items()}
        pos = parts[0, 1] + parts[1, -1]
        neg = parts[1, 1] + parts[0, -1]
        total += count * (pos - neg)
        biggest = max(biggest, count * (pos + neg))
    with gmpy2.context(gmpy2.get_context(), precision=bits + 64):
        scale = gmpy2.exp(-2 * gmpy2.mpfr(num) / den) / math.factorial(w0 - 1) / one ** 2
        return float(total * scale), float(biggest * scale)


def _lost_digits(result: float, scale: float, floor: float) -> float:
    if not -1e-9 <= result <= 1 + 1e-9:
        return math.inf
    return math.log10(max(scale, floor) / min(1.0, max(abs(result), floor)))


def _fixed_point_bits(w0: int, w1: int, w2: int, t: float, lost_digits: float) -> int:
    # Rounding in the recurrence grows like k! ulps; cover that, the observed
    # cancellation, and the scale of e**t * t**k.
    kmax = w0 + w1 + w2 - 3
    growth = math.lgamma(kmax + 2) + t + kmax * math.log(max(t, 1.0))
    return int((growth / math.log(10) + lost_digits + 16 + _GUARD_DIGITS) * 3.33)


@lru_cache(maxsize=None)
def _sum_min_tail(w0: int, w1: int, w2: int, t: float) -> float:
    tail0 = erlang_tail(w0, t)
    # both are lower bounds on the answer, used as the reference magnitude
    floor = max(tail0, min_tail(w1, w2, t), 1e-300)
    try:
        body, scale = _sum_min_body_float(w0, w1, w2, t)
        finite = math.isfinite(body) and math.isfinite(scale)
    except OverflowError:
        finite = False
    lost = 0.0
    if finite:
        lost = _lost_digits(body + tail0, scale, floor)
        if lost <= MAX_LOST_DIGITS:
            return _clamp(body + tail0)
    bits = _fixed_point_bits(w0, w1, w2, t, lost if math.isfinite(lost) else 0.0)
    while True:
        body, scale = _sum_min_body_exact(w0, w1, w2, t, bits)
        lost = _lost_digits(body + tail0, scale, floor)
        if (lost + 26) * 3.33 < bits:
            return _clamp(body + tail0)
        bits = max(2 * bits, _fixed_point_bits(w0, w1, w2, t, lost if math.isfinite(lost) else 0.0))


def sum_min_tail(w0: int, w1: int, w2: int, t: float) -> float:
    """P(Y0 + min(Y1, Y2) > t) for independent Erlang(w0), Erlang(w1), Erlang(w2).

    The integral of ``y**k * exp(y)`` over ``[0, t]`` is evaluated by the
    upward recurrence ``I_k = t**k e**t - k I_(k-1)``. The alternating sum
    is first accumulated in double precision. When its largest term (or
    the rounding carried through the recurrence) exceeds the result by
    more than ``MAX_LOST_DIGITS`` orders of magnitude, the sum is redone
    in fixed-point integer arithmetic wide enough to absorb the loss.
    """
    for w in (w0, w1, w2):
        _check(w, t)
    if t == 0:
        return 1.0
    w1, w2 = sorted((int(w1), int(w2)))
    return _sum_min_tail(int(w0), w1, w2, float(t))


def shared_edge_count(inst: Instance, k1: int, k2: int, j: int) -> int:
    return len(inst.paths[k1][j].edge_set & inst.paths[k2][j].edge_set)


def dispatch_cost(inst: Instance, pair: tuple[int, int], j: int, correlated: bool | None = None) -> float:
    """P(R > t_star) when the trucks of ``pair`` answer an incident at ``j``.

    ``pair`` holds cost-table indices: 0 is the outside region, ``k + 1``
    is station ``k``. Equal indices mean two trucks from one station.
    """
    if correlated is None:
        correlated = inst.correlated
    i1, i2 = sorted(int(x) for x in pair)
    n_st = inst.station_count
    if not (0 <= i1 <= n_st and 0 <= i2 <= n_st):
        raise ValueError(f"pair {pair} references a station outside 0..{n_st}")
    if not 0 <= j < inst.node_count:
        raise ValueError(f"node {j} not in graph")
    t = inst.t_star
    w_out = inst.outside_phases
    if i2 == 0:
        return min_tail(w_out, w_out, t)
    l2 = int(inst.phases[i2 - 1, j])
    if i1 == 0:
        return 0.0 if l2 == 0 else min_tail(l2, w_out, t)
    l1 = int(inst.phases[i1 - 1, j])
    if l1 == 0 or l2 == 0:
        return 0.0
    if not correlated:
        return min_tail(l1, l2, t)
    if i1 == i2:
        return erlang_tail(l1, t)
    shared = shared_edge_count(inst, i1 - 1, i2 - 1, j)
    if shared == 0:
        return min_tail(l1, l2, t)
    if shared == min(l1, l2):
        return erlang_tail(min(l1, l2), t)
    return sum_min_tail(shared, l1 - shared, l2 - shared, t)


@dataclass(frozen=True)
class CostTable:
    """Tardiness probabilities, ``values[j, i1, i2]`` symmetric in the pair."""
    values: np.ndarray
    correlated: bool

    def __post_init__(self):
        self.values.setflags(write=False)

    def __getitem__(self, key):
        return self.values[key]


def build_cost_table(inst: Instance, correlated: bool | None = None) -> CostTable:
    if correlated is None:
        correlated = inst.correlated
    n = inst.station_count + 1
    values = np.zeros((inst.node_count, n, n))
    for j in range(inst.node_count):
        for i1 in range(n):
            for i2 in range(i1, n):
                values[j, i1, i2] = values[j, i2, i1] = dispatch_cost(inst, (i1, i2), j, correlated)
    return CostTable(values, correlated)


def write_cost_csv(inst: Instance, path) -> None:
    """Both correlation modes, one row per location and unordered pair."""
    unc = build_cost_table(inst, correlated=False)
    cor = build_cost_table(inst, correlated=True)
    n = inst.station_count + 1
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["j", "i1", "i2", "cost_uncorrelated", "cost_correlated"])
        for j in range(inst.node_count):
            for i1 in range(n):
                for i2 in range(i1, n):
                    writer.writerow([j, i1, i2, f"{unc[j, i1, i2]:.12g}", f"{cor[j, i1, i2]:.12g}"])
