"""Event-by-event simulation of killed-chain epochs and rebirthed traces.

This is the reference engine: it keeps every hold of every path, so exact
path identities (occupation identity, epoch decomposition, inverse local
times) can be re-derived from raw data and checked to roundoff.  The bulk
harnesses use the vectorised twin in :mod:`rklab.batch`; agreement between
the two engines is itself a test.

Local time of a chain at x is occupation time at x divided by m_x, which
pins the normalisation against the exact kernels with no free constant.

Death causes: ``EXPONENTIAL`` (the beta-clock fired), ``HIT_ZERO_ABSORBED``
(the path attempted to enter the distinguished state of an absorbing chain,
so the hitting time of the left limit equals the lifetime), and ``STOPPED``
for the final, truncated epoch of a trace cut at its stop time.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .chains import RebirthMeasure, SymmetricChain
from .errors import (
    DecompositionMismatch,
    EpochBudgetExceeded,
    InvariantError,
    LevelExceedsTotal,
)

DECOMP_ATOL = 1e-12


class DeathCause(enum.Enum):
    EXPONENTIAL = "EXPONENTIAL"
    HIT_ZERO_ABSORBED = "HIT_ZERO_ABSORBED"
    STOPPED = "STOPPED"


class Mode(enum.Enum):
    KILL_ONLY = "KILL_ONLY"
    KILL_OR_ABSORB_AT_ZERO = "KILL_OR_ABSORB_AT_ZERO"


class StopKind(enum.Enum):
    HIT_ZERO = "HIT_ZERO"
    HIT_ZERO_LEFT = "HIT_ZERO_LEFT"
    INVERSE_LT_FIXED = "INVERSE_LT_FIXED"
    INVERSE_LT_EXP = "INVERSE_LT_EXP"


@dataclass(frozen=True)
class StopRule:
    kind: StopKind
    level: float | None = None  # INVERSE_LT_FIXED
    rate: float | None = None   # INVERSE_LT_EXP

    def validate(self, chain: SymmetricChain):
        if self.kind is StopKind.HIT_ZERO and not chain.zero_accessible:
            raise InvariantError("HIT_ZERO needs the zero state in the space")
        if self.kind is StopKind.HIT_ZERO_LEFT:
            if chain.zero_accessible or not np.any(chain.absorb_rate > 0):
                raise InvariantError(
                    "HIT_ZERO_LEFT needs an absorbing chain (jumps into 0 kill)"
                )
        if self.kind is StopKind.INVERSE_LT_FIXED:
            if not chain.zero_accessible:
                raise InvariantError("inverse local time needs the zero state")
            if self.level is None or self.level <= 0:
                raise InvariantError("inverse-local-time level must be > 0")
        if self.kind is StopKind.INVERSE_LT_EXP:
            if not chain.zero_accessible:
                raise InvariantError("inverse local time needs the zero state")
            if self.rate is None or self.rate <= 0:
                raise InvariantError("exponential level rate must be > 0")


@dataclass
class EpochRecord:
    """One life of the killed chain, possibly truncated at a trace stop."""

    chain: SymmetricChain
    start: int
    holds: list          # (state index, duration)
    zeta: float
    death_cause: DeathCause
    hit_zero_at: float | None
    local_field_total: np.ndarray
    local_field_at_t0: np.ndarray | None = None

    def occupation_defect(self) -> float:
        elapsed = sum(d for _, d in self.holds)
        return abs(float(self.local_field_total @ self.chain.measure) - elapsed)


@dataclass
class RebirthTrace:
    """Concatenated epochs of the rebirthed process up to a stop rule."""

    chain: SymmetricChain
    epochs: list
    boundaries: list      # zeta_0 = 0 < zeta_1 < ... (last entry = stop time)
    stop: StopRule
    stop_epoch: int       # 1-based index of the epoch containing the stop
    stop_time: float
    final_field: np.ndarray
    zero_local_time_path: list
    level: float | None = None  # realised level for inverse-local-time rules

    @property
    def holds(self):
        out = []
        for ep in self.epochs:
            out.extend(ep.holds)
        return out


def _draw_outcome(chain, i, rng):
    """(hold, next_index) with next -1 = killed, -2 = absorbed into 0."""
    rates = chain.generator[i].copy()
    rates[i] = 0.0
    total = rates.sum() + chain.absorb_rate[i] + chain.kill_rate
    hold = rng.exponential(1.0 / total)
    u = rng.random() * total
    acc = 0.0
    for j in np.nonzero(rates)[0]:
        acc += rates[j]
        if u < acc:
            return hold, int(j)
    if u < acc + chain.absorb_rate[i]:
        return hold, -2
    return hold, -1


def run_epoch(chain: SymmetricChain, start, mode: Mode, rng) -> EpochRecord:
    """Simulate a single life.

    In ``KILL_OR_ABSORB_AT_ZERO`` a jump towards 0 kills the path
    immediately (either through an absorption rate of an absorbing chain or
    through an ordinary jump into an accessible 0), so the first left-limit
    hit of 0 coincides with the lifetime.
    """
    i = chain.state_index(start)
    n = chain.n_states
    zero = chain.zero_index
    holds = []
    fld = np.zeros(n)
    t = 0.0
    t0 = None
    fld_t0 = None
    if mode is Mode.KILL_ONLY and zero is not None and i == zero:
        t0 = 0.0
        fld_t0 = np.zeros(n)
    while True:
        hold, nxt = _draw_outcome(chain, i, rng)
        holds.append((i, hold))
        fld[i] += hold / chain.measure[i]
        t += hold
        if nxt == -1:
            cause = DeathCause.EXPONENTIAL
            break
        if nxt == -2:
            if mode is not Mode.KILL_OR_ABSORB_AT_ZERO:
                raise InvariantError("absorbing chain simulated in KILL_ONLY mode")
            cause = DeathCause.HIT_ZERO_ABSORBED
            t0 = t
            break
        if zero is not None and nxt == zero:
            if mode is Mode.KILL_OR_ABSORB_AT_ZERO:
                cause = DeathCause.HIT_ZERO_ABSORBED
                t0 = t
                break
            if t0 is None:
                t0 = t
                fld_t0 = fld.copy()
        i = nxt
    return EpochRecord(
        chain=chain,
        start=chain.state_index(start),
        holds=holds,
        zeta=t,
        death_cause=cause,
        hit_zero_at=t0,
        local_field_total=fld,
        local_field_at_t0=fld_t0,
    )


def _mu_drawer(chain, mu, rng):
    labels = [x for x, w in mu.weights.items() if w > 0]
    idx = np.array([chain.state_index(x) for x in labels])
    cum = np.cumsum([mu.weights[x] for x in labels])
    cum[-1] = 1.0

    def draw():
        return int(idx[np.searchsorted(cum, rng.random(), side="right")])

    return draw


def run_rebirthed(
    chain: SymmetricChain,
    mu: RebirthMeasure,
    start,
    stop: StopRule,
    rng,
    epoch_budget: int = 10**6,
) -> RebirthTrace:
    """Concatenate lives (each new start drawn from mu) until the stop fires.

    For the inverse-local-time rules stopping happens mid-hold at 0: the
    final partial hold is split so that the accumulated zero local time
    equals the level exactly, and the final field entry at 0 is set to the
    level bit for bit.
    """
    stop.validate(chain)
    zero = chain.zero_index
    if stop.kind in (StopKind.HIT_ZERO, StopKind.HIT_ZERO_LEFT):
        if chain.zero_accessible and chain.state_index(start) == zero:
            raise InvariantError("trace start must differ from the zero state")
        mu.validate(chain)
    level = None
    if stop.kind is StopKind.INVERSE_LT_FIXED:
        level = float(stop.level)
    elif stop.kind is StopKind.INVERSE_LT_EXP:
        level = float(rng.exponential(1.0 / stop.rate))
    draw_mu = _mu_drawer(chain, mu, rng)
    m0 = chain.measure[zero] if zero is not None else None

    epochs = []
    boundaries = [0.0]
    zero_lt_path = [0.0]
    final = np.zeros(chain.n_states)
    t = 0.0
    lt0 = 0.0
    mode = (
        Mode.KILL_OR_ABSORB_AT_ZERO
        if stop.kind is StopKind.HIT_ZERO_LEFT
        else Mode.KILL_ONLY
    )
    for ep_no in range(1, epoch_budget + 1):
        i = chain.state_index(start) if ep_no == 1 else draw_mu()
        holds = []
        fld = np.zeros(chain.n_states)
        ep_t = 0.0
        t0 = None
        while True:
            hold, nxt = _draw_outcome(chain, i, rng)
            if stop.kind in (StopKind.INVERSE_LT_FIXED, StopKind.INVERSE_LT_EXP) \
                    and i == zero:
                gained = hold / m0
                if lt0 + gained > level:  # strict: right-continuous inverse
                    partial = (level - lt0) * m0
                    holds.append((i, partial))
                    fld[i] += level - lt0
                    ep_t += partial
                    t += partial
                    lt0 = level
                    rec = EpochRecord(
                        chain=chain, start=holds[0][0] if holds else i,
                        holds=holds, zeta=ep_t,
                        death_cause=DeathCause.STOPPED, hit_zero_at=t0,
                        local_field_total=fld,
                    )
                    epochs.append(rec)
                    final += fld
                    final[zero] = level  # exact by construction
                    boundaries.append(t)
                    zero_lt_path.append(lt0)
                    return RebirthTrace(
                        chain=chain, epochs=epochs, boundaries=boundaries,
                        stop=stop, stop_epoch=ep_no, stop_time=t,
                        final_field=final, zero_local_time_path=zero_lt_path,
                        level=level,
                    )
                lt0 += gained
            holds.append((i, hold))
            fld[i] += hold / chain.measure[i]
            ep_t += hold
            t += hold
            if nxt == -1:
                cause = DeathCause.EXPONENTIAL
                break
            if nxt == -2:
                cause = DeathCause.HIT_ZERO_ABSORBED
                t0 = ep_t
                break
            if zero is not None and nxt == zero:
                if stop.kind is StopKind.HIT_ZERO:
                    rec = EpochRecord(
                        chain=chain, start=holds[0][0], holds=holds, zeta=ep_t,
                        death_cause=DeathCause.STOPPED, hit_zero_at=ep_t,
                        local_field_total=fld,
                    )
                    epochs.append(rec)
                    final += fld
                    boundaries.append(t)
                    zero_lt_path.append(lt0)
                    return RebirthTrace(
                        chain=chain, epochs=epochs, boundaries=boundaries,
                        stop=stop, stop_epoch=ep_no, stop_time=t,
                        final_field=final, zero_local_time_path=zero_lt_path,
                    )
                if t0 is None:
                    t0 = ep_t
            i = nxt
        rec = EpochRecord(
            chain=chain, start=holds[0][0], holds=holds, zeta=ep_t,
            death_cause=cause, hit_zero_at=t0, local_field_total=fld,
        )
        epochs.append(rec)
        final += fld
        boundaries.append(t)
        zero_lt_path.append(lt0)
        if stop.kind is StopKind.HIT_ZERO_LEFT \
                and cause is DeathCause.HIT_ZERO_ABSORBED:
            return RebirthTrace(
                chain=chain, epochs=epochs, boundaries=boundaries,
                stop=stop, stop_epoch=ep_no, stop_time=t,
                final_field=final, zero_local_time_path=zero_lt_path,
            )
    raise EpochBudgetExceeded(
        f"stop rule {stop.kind.value} did not fire within {epoch_budget} epochs"
    )


# inverse local times ------------------------------------------------------

def _zero_holds(record, chain):
    """(absolute start, duration) of every hold at the zero state."""
    zero = chain.zero_index
    if zero is None:
        raise InvariantError("inverse local time needs the zero state")
    out = []
    t = 0.0
    for s, d in (record.holds if hasattr(record, "holds") else record):
        if s == zero:
            out.append((t, d))
        t += d
    return out, t


def inverse_local_time(record, level: float, side: str = "RIGHT") -> float:
    """Exact inverse of the piecewise-linear zero local time of a path.

    RIGHT returns inf{s : L0_s > level}; LEFT returns inf{s : L0_s >= level}
    and clamps levels above the total.  RIGHT above (or at) the total raises
    LevelExceedsTotal.
    """
    if level < 0:
        raise InvariantError("level must be >= 0")
    chain = record.chain
    m0 = chain.measure[chain.zero_index]
    zholds, _ = _zero_holds(record, chain)
    # cumulative zero local time after each hold, accumulated once so that
    # clamping at the total is float-consistent with the scan below
    after = []
    acc = 0.0
    for _, d in zholds:
        acc += d / m0
        after.append(acc)
    total = acc
    if side == "RIGHT":
        if level >= total:
            raise LevelExceedsTotal(
                f"level {level!r} >= total zero local time {total!r}"
            )
        before = 0.0
        for (a, _), aft in zip(zholds, after):
            if aft > level:
                return a + (level - before) * m0
            before = aft
        raise LevelExceedsTotal("unreachable")  # guarded above
    if side == "LEFT":
        lvl = min(level, total)
        if lvl == 0.0:
            return 0.0
        before = 0.0
        for (a, _), aft in zip(zholds, after):
            if aft >= lvl:
                return a + (lvl - before) * m0
            before = aft
        raise LevelExceedsTotal("unreachable")  # lvl <= total by clamping
    raise ValueError(f"side must be RIGHT or LEFT, got {side!r}")


def field_up_to(record, cutoff: float) -> np.ndarray:
    """Local-time field of the path truncated at an absolute time."""
    chain = record.chain
    fld = np.zeros(chain.n_states)
    t = 0.0
    for s, d in record.holds:
        if t >= cutoff:
            break
        dd = min(d, cutoff - t)
        fld[s] += dd / chain.measure[s]
        t += d
    return fld


def f_field(chain, mu, t_level, rng, start=None) -> np.ndarray:
    """Hitting-plus-inverse-time field of a single epoch drawn from mu.

    Runs one life; if it never reaches 0 the total field is returned (the
    shifted term vanishes).  Otherwise the field at the first hit of 0 plus
    the post-hit field run to the left inverse of the zero local time at
    ``t_level`` (total field when the level exceeds what the life accrued).
    """
    if start is None:
        start = chain.states[_mu_drawer(chain, mu, rng)()]
    rec = run_epoch(chain, start, Mode.KILL_ONLY, rng)
    if rec.hit_zero_at is None:
        return rec.local_field_total.copy()
    total0 = rec.local_field_total[chain.zero_index]
    if t_level >= total0:
        return rec.local_field_total.copy()
    cut = inverse_local_time(rec, t_level, side="LEFT")
    return field_up_to(rec, cut)


# decomposition ------------------------------------------------------------

def _recompute_field(rec) -> np.ndarray:
    fld = np.zeros(rec.chain.n_states)
    for s, d in rec.holds:
        fld[s] += d / rec.chain.measure[s]
    return fld


def decompose_check(trace: RebirthTrace) -> bool:
    """Re-derive the final field from raw epoch holds and compare entrywise.

    Full epochs contribute their whole field; the stopping epoch contributes
    the field up to the stop.  For inverse-local-time rules the final epoch
    is additionally split at its first zero hit and the shifted inverse time
    is recomputed from its own holds, checking the trace-time offset
    identity as well.  Raises DecompositionMismatch with the worst entry.
    """
    chain = trace.chain
    r = trace.stop_epoch
    if len(trace.epochs) != r:
        raise DecompositionMismatch(
            f"trace stores {len(trace.epochs)} epochs but stopped at {r}"
        )
    expected = np.zeros(chain.n_states)
    for rec in trace.epochs[:-1]:
        expected += _recompute_field(rec)
    last = trace.epochs[-1]
    kind = trace.stop.kind
    if kind in (StopKind.HIT_ZERO, StopKind.HIT_ZERO_LEFT):
        expected += _recompute_field(last)
    else:
        # split the final epoch at its first zero hit and add the inverse-time
        # part computed on its own zero local time
        u = trace.level - trace.zero_local_time_path[r - 1]
        if not 0.0 < u <= trace.level:
            raise DecompositionMismatch(f"bad residual level {u!r}")
        own_total0 = _recompute_field(last)[chain.zero_index]
        if abs(own_total0 - u) > DECOMP_ATOL * max(1.0, abs(u)):
            raise DecompositionMismatch(
                f"final epoch zero local time {own_total0!r} != residual {u!r}"
            )
        if last.hit_zero_at is None:
            raise DecompositionMismatch("stopping epoch never hit zero")
        pre = field_up_to(last, last.hit_zero_at)
        tau_r = last.zeta  # stop cut the epoch exactly at its inverse time
        if tau_r <= 0.0:
            raise DecompositionMismatch("inverse time must be strictly positive")
        offset = trace.stop_time - trace.boundaries[r - 1]
        if abs(offset - tau_r) > DECOMP_ATOL * max(1.0, tau_r):
            raise DecompositionMismatch(
                f"trace offset {offset!r} != epoch inverse time {tau_r!r}"
            )
        post = _recompute_field(last) - pre
        expected += pre + post
    diff = np.abs(expected - trace.final_field)
    worst = int(np.argmax(diff))
    scale = np.maximum(1.0, np.abs(trace.final_field))
    if (diff / scale).max() > DECOMP_ATOL:
        raise DecompositionMismatch(
            f"worst entry at state {chain.states[worst]!r}: "
            f"recomputed {expected[worst]!r} vs stored {trace.final_field[worst]!r}"
        )
    return True


def dump_trace(trace: RebirthTrace, fileobj):
    """CSV debug dump: one line per hold (epoch, state, duration, death flag)."""
    fileobj.write("epoch,state,duration,death\n")
    for k, rec in enumerate(trace.epochs, start=1):
        for j, (s, d) in enumerate(rec.holds):
            flag = rec.death_cause.value if j == len(rec.holds) - 1 else ""
            fileobj.write(f"{k},{trace.chain.states[s]},{d!r},{flag}\n")
