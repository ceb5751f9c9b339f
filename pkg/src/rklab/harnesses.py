"""Statistical harnesses comparing Markov-side and Gaussian-side ensembles.

Each harness realises one identity in law as a two-sample (or
sample-vs-exact) comparison of first and second moments and Laplace probes
at the test points, with verdicts at ``z_max`` pooled standard errors.
Before any simulation runs, the first-moment identity behind the harness is
evaluated analytically on both sides from the exact kernels and must agree
to 1e-12; a failure there means mis-wired ensembles, not bad luck.

Injected defects (``plan.defect``) deliberately break one ingredient so the
test suite can demonstrate statistical power: ``unit-weights`` freezes the
tilt weights at one, ``wrong-cov`` swaps the killed-at-zero covariance for
the plain one, ``unconditioned-marginal``/``unconditioned-last`` drop the
conditioning of an independent ensemble, ``no-rebirth-target`` compares the
rebirthed normalisation against the unrebirthed kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import batch
from .batch import (
    ABSORB_DEATH,
    EXP_DEATH,
    ZERO_STOP,
    block_plan,
    block_rng,
    make_kernel,
    map_blocks,
    mu_tables,
    run_epochs,
    run_epochs_levelstop,
    run_traces_inverse_lt,
    run_traces_stop_absorb,
    run_traces_stop_zero,
)
from .chains import (
    RebirthMeasure,
    SymmetricChain,
    hitting_profile,
    killed_at_zero_potential,
    potential_matrix,
    rebirthed_potential,
)
from .errors import ConditioningTooRare, InvariantError
from .gaussfield import (
    factor_covariance,
    first_rk_composite_block,
    sample_block,
    second_rk_composites_block,
)
from .stats import (
    ComparisonReport,
    StatRow,
    compare_fields,
    compare_sides,
    covariance_zero_rows,
    default_probes,
    product_fraction_row,
    rows_vs_exact,
    side_estimates,
    zscore,
)

ANALYTIC_ATOL = 1e-12
MIN_CONDITIONED = 1000
TRUNCATION_EPS = 1e-10

HARNESS_NUM = {
    "normalization": 1,
    "eisenbaum": 2,
    "first-rk": 3,
    "first-rk-cond": 4,
    "tminus": 5,
    "second-rk": 6,
    "second-rk-cond": 7,
    "reduction": 8,
    "modulus-local": 9,
    "modulus-uniform": 10,
    "lil": 11,
}


def tag_for(harness: str, role: int) -> int:
    return HARNESS_NUM[harness] * 1000 + role


@dataclass
class TestPlan:
    """One harness invocation: chain, rebirth measure, sizes, parameters."""

    __test__ = False  # bare "Test" prefix; not a pytest class

    chain: SymmetricChain
    mu: RebirthMeasure | None
    start: object
    replicates: int
    seed: int
    test_points: tuple
    laplace_probes: tuple = ()
    moment_orders: tuple = (1, 2)
    r: int = 2
    s: float = 1.0
    p: float = 1.0
    t: float = 1.0
    z_max: float = 4.0
    workers: int = 1
    defect: str | None = None

    def __post_init__(self):
        if self.replicates < 10**4:
            raise InvariantError("replicates must be at least 1e4")
        if not self.test_points:
            raise InvariantError("test_points must be nonempty")
        for x in self.test_points:
            self.chain.state_index(x)
        if self.start is not None:
            if self.chain.zero_accessible \
                    and self.chain.state_index(self.start) == self.chain.zero_index:
                raise InvariantError("start state must differ from 0")
            self.chain.state_index(self.start)
        if self.mu is not None:
            self.mu.validate(self.chain)
        if not self.laplace_probes:
            self.laplace_probes = tuple(
                tuple(v) for v in default_probes(len(self.test_points))
            )
        for nu in self.laplace_probes:
            if len(nu) != len(self.test_points) or min(nu) < 0:
                raise InvariantError(
                    "each Laplace probe needs one nonnegative weight per test point"
                )

    @property
    def tp_cols(self) -> np.ndarray:
        return np.array([self.chain.state_index(x) for x in self.test_points])

    @property
    def point_labels(self):
        return [str(x) for x in self.test_points]


# block workers (top level so process pools can pickle them) ----------------

def _starts(start_spec, size, rng):
    kind = start_spec[0]
    if kind == "fixed":
        return np.full(size, start_spec[1], dtype=np.int64)
    mu_idx, mu_cum = start_spec[1], start_spec[2]
    return batch._draw_mu(mu_idx, mu_cum, rng.random(size))


def _blk_full_epochs(kernel, start_spec, snapshot_t0, size, seed, tag, b):
    rng = block_rng(seed, tag, b)
    starts = _starts(start_spec, size, rng)
    return run_epochs(kernel, starts, rng, stop_on_zero=False,
                      snapshot_t0=snapshot_t0)


def _blk_killed_epochs(kernel, start_spec, size, seed, tag, b):
    rng = block_rng(seed, tag, b)
    starts = _starts(start_spec, size, rng)
    return run_epochs(kernel, starts, rng, stop_on_zero=True)


def _blk_levelstop(kernel, start_spec, level_spec, clamp, size, seed, tag, b):
    rng = block_rng(seed, tag, b)
    starts = _starts(start_spec, size, rng)
    if level_spec[0] == "fixed":
        levels = np.full(size, float(level_spec[1]))
    else:
        levels = rng.exponential(1.0 / float(level_spec[1]), size)
    out = run_epochs_levelstop(kernel, starts, rng, levels, clamp=clamp)
    out["levels"] = levels
    return out


def _blk_full_epochs_with_levels(kernel, start_spec, p, size, seed, tag, b):
    rng = block_rng(seed, tag, b)
    starts = _starts(start_spec, size, rng)
    levels = rng.exponential(1.0 / p, size)
    out = run_epochs(kernel, starts, rng)
    out["levels"] = levels
    return out


def _blk_traces_zero(kernel, mu_pack, start_idx, r_max, size, seed, tag, b):
    rng = block_rng(seed, tag, b)
    starts = np.full(size, start_idx, dtype=np.int64)
    return run_traces_stop_zero(kernel, mu_pack[0], mu_pack[1], starts, rng, r_max)


def _blk_traces_absorb(kernel, mu_pack, start_idx, r_max, size, seed, tag, b):
    rng = block_rng(seed, tag, b)
    starts = np.full(size, start_idx, dtype=np.int64)
    return run_traces_stop_absorb(kernel, mu_pack[0], mu_pack[1], starts, rng, r_max)


def _blk_traces_invlt(kernel, mu_pack, start_idx, p, r_max, size, seed, tag, b):
    rng = block_rng(seed, tag, b)
    starts = np.full(size, start_idx, dtype=np.int64)
    levels = rng.exponential(1.0 / p, size)
    return run_traces_inverse_lt(kernel, mu_pack[0], mu_pack[1], starts, rng,
                                 levels, r_max)


def _blk_discount(kernel, mu_pack, start_idx, p, horizon, target_cols, size,
                  seed, tag, b):
    rng = block_rng(seed, tag, b)
    starts = np.full(size, start_idx, dtype=np.int64)
    return batch.run_traces_discount(kernel, mu_pack[0], mu_pack[1], starts,
                                     rng, p, horizon, target_cols)


def _blk_gauss_shift_sq(factor, s, y_idx, size, seed, tag, b):
    rng = block_rng(seed, tag, b)
    eta = sample_block(factor, size, rng)
    return {"vals": 0.5 * (eta + s) ** 2, "tilt": 1.0 + eta[:, y_idx] / s}


def _blk_gauss_square(factor, size, seed, tag, b):
    rng = block_rng(seed, tag, b)
    eta = sample_block(factor, size, rng)
    return {"vals": 0.5 * eta ** 2}


def _blk_gauss_first(r, s, u0f, utf, y_idx, mu_vec, size, seed, tag, b):
    rng = block_rng(seed, tag, b)
    fields, weights, _ = first_rk_composite_block(
        r, s, u0f, utf, y_idx, mu_vec, size, rng
    )
    return {"field": fields, "weight": weights}


def _blk_gauss_second(r, s, t, profile, u0f, utf, y_idx, mu_vec, size, seed,
                      tag, b):
    rng = block_rng(seed, tag, b)
    g_hat, g_bar, weights, rho, _ = second_rk_composites_block(
        r, s, t, profile, u0f, utf, y_idx, mu_vec, size, rng
    )
    return {"g_hat": g_hat, "g_bar": g_bar, "weight": weights, "rho": rho}


def _blk_gauss_standalone_rhs(utf, profile, t, size, seed, tag, b):
    rng = block_rng(seed, tag, b)
    eta2 = sample_block(utf, size, rng)
    rho = rng.exponential(scale=profile.u00, size=size)
    bump = profile.h[None, :] * np.sqrt(2.0 * np.minimum(t, rho))[:, None]
    return {"vals": 0.5 * (eta2 + bump) ** 2}


def _collect(plan, fn, static_args, role):
    """Run one ensemble of plan.replicates lanes, block by block."""
    tag = static_args[0]
    payloads = []
    for b, size in enumerate(block_plan(plan.replicates)):
        fn_args = static_args[1] + (size, plan.seed, tag, b)
        payloads.append((fn, fn_args))
    results = map_blocks(payloads, plan.workers)
    merged = {}
    for key in results[0]:
        if np.isscalar(results[0][key]):
            merged[key] = sum(r[key] for r in results)
        else:
            merged[key] = np.concatenate([r[key] for r in results])
    return merged


def _ensemble(plan, harness, role, fn, *args):
    return _collect(plan, fn, (tag_for(harness, role), tuple(args)), role)


# shared bits ----------------------------------------------------------------

def _mu_vec(plan):
    return plan.mu.vector(plan.chain)


def _factors(plan):
    u0 = potential_matrix(plan.chain, 0.0)
    ut = killed_at_zero_potential(u0)
    u0f = factor_covariance(u0)
    utf = factor_covariance(ut)
    if plan.defect == "wrong-cov":
        utf = u0f
    return u0, ut, u0f, utf


def _first_rk_analytic(plan, u0, ut):
    """First-moment formulas of both sides; must agree to ANALYTIC_ATOL."""
    cols = plan.tp_cols
    y = plan.chain.state_index(plan.start)
    s, r = plan.s, plan.r
    base = (r - 1) * 0.5 * (np.diag(u0.table)[cols] + s**2) \
        + 0.5 * (np.diag(ut.table)[cols] + s**2)
    if r == 1:
        markov = ut.table[y, cols]
        tilt = ut.table[y, cols]
    else:
        mu_vec = _mu_vec(plan)
        markov = u0.table[y, cols] + (r - 2) * (u0.table @ mu_vec)[cols] \
            + (ut.table @ mu_vec)[cols]
        tilt = u0.table[y, cols] + (r - 2) * (u0.table @ mu_vec)[cols] \
            + (ut.table @ mu_vec)[cols]
    return markov + base, base + tilt


def _second_rk_analytic(plan, u0, ut, profile):
    cols = plan.tp_cols
    y = plan.chain.state_index(plan.start)
    s, r, t = plan.s, plan.r, plan.t
    h2 = profile.h[cols] ** 2
    clamp_mean = profile.u00 * -np.expm1(-t / profile.u00)  # E[t ^ rho]
    base = (r - 1) * 0.5 * (np.diag(u0.table)[cols] + s**2) \
        + 0.5 * (np.diag(ut.table)[cols] + s**2) \
        + 0.5 * np.diag(ut.table)[cols]
    if r == 1:
        killed = ut.table[y, cols]
        tilt = ut.table[y, cols]
    else:
        mu_vec = _mu_vec(plan)
        killed = u0.table[y, cols] + (r - 2) * (u0.table @ mu_vec)[cols] \
            + (ut.table @ mu_vec)[cols]
        tilt = u0.table[y, cols] + (r - 2) * (u0.table @ mu_vec)[cols] \
            + (ut.table @ mu_vec)[cols]
    markov = killed + h2 * clamp_mean + base
    gauss = base + tilt + h2 * clamp_mean
    return markov, gauss


def _check_analytic(markov, gauss, metadata):
    gap = float(np.abs(markov - gauss).max())
    metadata["analytic_first_moment_gap"] = gap
    if gap > ANALYTIC_ATOL:
        raise InvariantError(
            f"analytic first-moment identity violated by {gap:.3e}"
        )


# harnesses ------------------------------------------------------------------

def run_normalization(plan: TestPlan) -> ComparisonReport:
    """Simulated discounted local times of the rebirthed process against the
    exact rebirthed kernel, for every (start, target) pair of test points."""
    if plan.p <= 0:
        raise InvariantError("normalization needs p > 0")
    if plan.chain.n_states < 2:
        raise InvariantError(
            "rebirth verification needs at least two states"
        )
    if plan.mu is None:
        raise InvariantError("normalization needs a rebirth measure")
    chain = plan.chain
    wmat = rebirthed_potential(chain, plan.mu, plan.p)
    target = wmat.table
    if plan.defect == "no-rebirth-target":
        target = potential_matrix(chain, plan.p).table
    kernel = make_kernel(chain)
    mu_pack = mu_tables(chain, plan.mu)
    cols = plan.tp_cols
    # horizon: the exponential envelope of the tail is below TRUNCATION_EPS
    # of the smallest tracked kernel value
    wmin = max(target[np.ix_(cols, cols)].min(), 1e-12)
    horizon = max(
        float(np.log(1.0 / (TRUNCATION_EPS * plan.p * chain.measure[c] * wmin))
              / plan.p)
        for c in cols
    )
    rows = []
    all_states = len(cols) == chain.n_states
    for k, x in enumerate(plan.test_points):
        out = _ensemble(
            plan, "normalization", 10 + k, _blk_discount,
            kernel, mu_pack, chain.state_index(x), plan.p, horizon, cols,
        )
        labels = [f"w[{x},{y}]" for y in plan.test_points]
        rows += rows_vs_exact(out["V"], target[chain.state_index(x), cols],
                              labels)
        if all_states:
            rows += rows_vs_exact(
                out["rowsum"][:, None],
                [-np.expm1(-plan.p * horizon) / plan.p],
                [f"rowsum[{x}]"],
            )
    return ComparisonReport(
        test_id="normalization", rows=rows, seed=plan.seed,
        n_lhs=plan.replicates * len(plan.test_points), n_rhs=0,
        z_max=plan.z_max,
        metadata={"horizon": horizon, "p": plan.p, "defect": plan.defect},
    )


def run_eisenbaum(plan: TestPlan) -> ComparisonReport:
    """One killed life plus an independent shifted square against the tilted
    shifted square."""
    if plan.s == 0:
        raise InvariantError("eisenbaum harness needs s != 0")
    chain = plan.chain
    u0 = potential_matrix(chain, 0.0)
    u0f = factor_covariance(u0)
    y = chain.state_index(plan.start)
    cols = plan.tp_cols
    metadata = {"defect": plan.defect}
    markov = u0.table[y, cols] + 0.5 * (np.diag(u0.table)[cols] + plan.s**2)
    gauss = 0.5 * (np.diag(u0.table)[cols] + plan.s**2) + u0.table[y, cols]
    _check_analytic(markov, gauss, metadata)

    kernel = make_kernel(chain)
    eps = _ensemble(plan, "eisenbaum", 1, _blk_full_epochs,
                    kernel, ("fixed", y), False)
    gl = _ensemble(plan, "eisenbaum", 2, _blk_gauss_shift_sq, u0f, plan.s, y)
    lhs = eps["field"][:, cols] + gl["vals"][:, cols]
    gr = _ensemble(plan, "eisenbaum", 3, _blk_gauss_shift_sq, u0f, plan.s, y)
    rhs = gr["vals"][:, cols]
    weights = np.ones(rhs.shape[0]) if plan.defect == "unit-weights" \
        else gr["tilt"]
    return compare_fields(
        "eisenbaum", lhs, rhs, plan.point_labels, plan.laplace_probes,
        plan.seed, rhs_weights=weights, z_max=plan.z_max,
        moment_orders=plan.moment_orders, metadata=metadata,
    )


def _first_rk_markov_fields(plan, kernel, mu_pack, harness="first-rk"):
    """Sum of the lives on the Markov side of the hitting-time identity."""
    chain = plan.chain
    y = chain.state_index(plan.start)
    total = None
    if plan.r >= 2:
        ep = _ensemble(plan, harness, 20, _blk_full_epochs,
                       kernel, ("fixed", y), False)
        total = ep["field"]
        for i in range(2, plan.r):
            ep = _ensemble(plan, harness, 20 + i, _blk_full_epochs,
                           kernel, ("mu",) + mu_pack, False)
            total = total + ep["field"]
        killed = _ensemble(plan, harness, 40, _blk_killed_epochs,
                           kernel, ("mu",) + mu_pack)
    else:
        killed = _ensemble(plan, harness, 40, _blk_killed_epochs,
                           kernel, ("fixed", y))
    total = killed["field"] if total is None else total + killed["field"]
    return total


def run_first_rk(plan: TestPlan) -> ComparisonReport:
    """Generalised hitting-time identity: lives plus fresh composites,
    unweighted, against tilted composites."""
    if plan.r < 1:
        raise InvariantError("first-rk needs r >= 1")
    if plan.mu is None and plan.r >= 2:
        raise InvariantError("first-rk with r >= 2 needs a rebirth measure")
    chain = plan.chain
    u0, ut, u0f, utf = _factors(plan)
    metadata = {"defect": plan.defect, "r": plan.r, "s": plan.s}
    if plan.defect != "wrong-cov":
        markov, gauss = _first_rk_analytic(plan, u0, ut)
        _check_analytic(markov, gauss, metadata)
    kernel = make_kernel(chain)
    mu_pack = mu_tables(chain, plan.mu) if plan.mu is not None else None
    y = chain.state_index(plan.start)
    mu_vec = _mu_vec(plan) if plan.mu is not None else np.zeros(chain.n_states)

    markov_fields = _first_rk_markov_fields(plan, kernel, mu_pack)
    gl = _ensemble(plan, "first-rk", 60, _blk_gauss_first,
                   plan.r, plan.s, u0f, utf, y, mu_vec)
    cols = plan.tp_cols
    lhs = markov_fields[:, cols] + gl["field"][:, cols]
    gr = _ensemble(plan, "first-rk", 61, _blk_gauss_first,
                   plan.r, plan.s, u0f, utf, y, mu_vec)
    rhs = gr["field"][:, cols]
    weights = np.ones(rhs.shape[0]) if plan.defect == "unit-weights" \
        else gr["weight"]
    return compare_fields(
        "first-rk", lhs, rhs, plan.point_labels, plan.laplace_probes,
        plan.seed, rhs_weights=weights, z_max=plan.z_max,
        moment_orders=plan.moment_orders, metadata=metadata,
    )


def run_first_rk_cond(plan: TestPlan) -> ComparisonReport:
    """Conditional factorisation at the hitting time: the stopping epoch's
    field matches an independently conditioned life, transformed early and
    late epochs are uncorrelated, and the stop-epoch probability factorises."""
    if plan.r < 2:
        raise InvariantError("conditional harness needs r >= 2")
    chain = plan.chain
    kernel = make_kernel(chain)
    mu_pack = mu_tables(chain, plan.mu)
    y = chain.state_index(plan.start)
    cols = plan.tp_cols
    r = plan.r

    traces = _ensemble(plan, "first-rk-cond", 1, _blk_traces_zero,
                       kernel, mu_pack, y, r)
    kept = traces["stop_epoch"] == r
    n_kept = int(np.count_nonzero(kept))
    if n_kept < MIN_CONDITIONED:
        raise ConditioningTooRare(
            f"only {n_kept} of {plan.replicates} traces stopped at epoch {r}"
        )
    early = traces["fields"][kept][:, 0, :][:, cols]
    last = traces["fields"][kept][:, r - 1, :][:, cols]

    marginal = _ensemble(plan, "first-rk-cond", 2, _blk_killed_epochs,
                         kernel, ("mu",) + mu_pack)
    if plan.defect == "unconditioned-marginal":
        ref = marginal["field"][:, cols]
    else:
        ref = marginal["field"][marginal["cause"] == ZERO_STOP][:, cols]

    rows = compare_sides(
        side_estimates(last, plan.point_labels, plan.laplace_probes,
                       moment_orders=plan.moment_orders),
        side_estimates(ref, plan.point_labels, plan.laplace_probes,
                       moment_orders=plan.moment_orders),
    )
    rows = [StatRow(f"marginal:{row.statistic}", row.lhs, row.rhs, row.se,
                    row.z) for row in rows]
    rows += covariance_zero_rows(np.exp(-early), np.exp(-last),
                                 plan.point_labels, plan.point_labels)

    # stop-epoch probability against the product of per-life factors
    fracs, ns = [], []
    for i in range(1, r + 1):
        spec = ("fixed", y) if i == 1 else ("mu",) + mu_pack
        ens = _ensemble(plan, "first-rk-cond", 10 + i, _blk_killed_epochs,
                        kernel, spec)
        frac_hit = float(np.mean(ens["cause"] == ZERO_STOP))
        fracs.append(frac_hit if i == r else 1.0 - frac_hit)
        ns.append(ens["cause"].shape[0])
    rows.append(product_fraction_row(
        "factorization", n_kept / plan.replicates, plan.replicates, fracs, ns,
    ))
    return ComparisonReport(
        test_id="first-rk-cond", rows=rows, seed=plan.seed,
        n_lhs=n_kept, n_rhs=ref.shape[0], z_max=plan.z_max,
        metadata={"defect": plan.defect, "r": r,
                  "conditioned_fraction": n_kept / plan.replicates},
    )


def run_tminus(plan: TestPlan) -> ComparisonReport:
    """Left-limit hitting on an absorbing chain: traces stopped at the first
    absorption against sums of independently conditioned lives."""
    if plan.r < 2:
        raise InvariantError("tminus harness needs r >= 2")
    chain = plan.chain
    if chain.zero_accessible or not np.any(chain.absorb_rate > 0):
        raise InvariantError("tminus needs an absorbing chain")
    kernel = make_kernel(chain)
    mu_pack = mu_tables(chain, plan.mu)
    y = chain.state_index(plan.start)
    cols = plan.tp_cols
    r = plan.r

    traces = _ensemble(plan, "tminus", 1, _blk_traces_absorb,
                       kernel, mu_pack, y, r)
    kept = traces["stop_epoch"] == r
    n_kept = int(np.count_nonzero(kept))
    if n_kept < MIN_CONDITIONED:
        raise ConditioningTooRare(
            f"only {n_kept} of {plan.replicates} traces absorbed at epoch {r}"
        )
    lhs = traces["fields"][kept].sum(axis=1)[:, cols]

    parts = []
    qc_violations = 0
    for i in range(1, r + 1):
        spec = ("fixed", y) if i == 1 else ("mu",) + mu_pack
        ens = _ensemble(plan, "tminus", 10 + i, _blk_full_epochs,
                        kernel, spec, False)
        absorbed = ens["cause"] == ABSORB_DEATH
        qc_violations += int(np.count_nonzero(
            absorbed & (ens["t0"] != ens["zeta"])
        ))
        if i == r and plan.defect != "unconditioned-last":
            keep = absorbed
        elif i == r:
            keep = np.ones_like(absorbed)
        else:
            keep = ~absorbed
        parts.append(ens["field"][keep][:, cols])
    m = min(pt.shape[0] for pt in parts)
    rhs = sum(pt[:m] for pt in parts)

    report = compare_fields(
        "tminus", lhs, rhs, plan.point_labels, plan.laplace_probes,
        plan.seed, z_max=plan.z_max, moment_orders=plan.moment_orders,
        metadata={"defect": plan.defect, "r": r,
                  "conditioned_fraction": n_kept / plan.replicates},
    )
    report.rows.append(StatRow("qc_violations", float(qc_violations), 0.0,
                               0.0, zscore(float(qc_violations), 0.0)))
    return report


def run_second_rk(plan: TestPlan) -> ComparisonReport:
    """Inverse-local-time identity, standalone and combined forms."""
    if plan.r < 1:
        raise InvariantError("second-rk needs r >= 1")
    if plan.t <= 0:
        raise InvariantError("second-rk needs t > 0")
    chain = plan.chain
    u0, ut, u0f, utf = _factors(plan)
    profile = hitting_profile(u0)
    metadata = {"defect": plan.defect, "r": plan.r, "s": plan.s, "t": plan.t}
    if plan.defect != "wrong-cov":
        markov, gauss = _second_rk_analytic(plan, u0, ut, profile)
        _check_analytic(markov, gauss, metadata)
    kernel = make_kernel(chain)
    mu_pack = mu_tables(chain, plan.mu) if plan.mu is not None else None
    y = chain.state_index(plan.start)
    zero = chain.zero_index
    cols = plan.tp_cols
    mu_vec = _mu_vec(plan) if plan.mu is not None else np.zeros(chain.n_states)

    # standalone: life from 0 run to the inverse time, plus a plain square,
    # against the bumped square (both sides unweighted)
    tau_ep = _ensemble(plan, "second-rk", 1, _blk_levelstop,
                       kernel, ("fixed", zero), ("fixed", plan.t), "strict")
    sq = _ensemble(plan, "second-rk", 2, _blk_gauss_square, utf)
    lhs_sa = tau_ep["field"][:, cols] + sq["vals"][:, cols]
    rhs_sa = _ensemble(plan, "second-rk", 3, _blk_gauss_standalone_rhs,
                       utf, profile, plan.t)["vals"][:, cols]
    rows = compare_sides(
        side_estimates(lhs_sa, plan.point_labels, plan.laplace_probes,
                       moment_orders=plan.moment_orders),
        side_estimates(rhs_sa, plan.point_labels, plan.laplace_probes,
                       moment_orders=plan.moment_orders),
    )
    rows = [StatRow(f"standalone:{r_.statistic}", r_.lhs, r_.rhs, r_.se, r_.z)
            for r_ in rows]

    # combined: lives + killed life + inverse-time life + plain composite,
    # against the bumped composite under the tilt
    markov_fields = _first_rk_markov_fields(plan, kernel, mu_pack,
                                            harness="second-rk")
    tau_ep2 = _ensemble(plan, "second-rk", 4, _blk_levelstop,
                        kernel, ("fixed", zero), ("fixed", plan.t), "strict")
    gl = _ensemble(plan, "second-rk", 60, _blk_gauss_second,
                   plan.r, plan.s, plan.t, profile, u0f, utf, y, mu_vec)
    lhs = markov_fields[:, cols] + tau_ep2["field"][:, cols] \
        + gl["g_hat"][:, cols]
    gr = _ensemble(plan, "second-rk", 61, _blk_gauss_second,
                   plan.r, plan.s, plan.t, profile, u0f, utf, y, mu_vec)
    rhs = gr["g_bar"][:, cols]
    weights = np.ones(rhs.shape[0]) if plan.defect == "unit-weights" \
        else gr["weight"]
    combined = compare_fields(
        "second-rk", lhs, rhs, plan.point_labels, plan.laplace_probes,
        plan.seed, rhs_weights=weights, z_max=plan.z_max,
        moment_orders=plan.moment_orders, metadata=metadata,
    )
    combined.rows = rows + [
        StatRow(f"combined:{r_.statistic}", r_.lhs, r_.rhs, r_.se, r_.z,
                r_.gating)
        for r_ in combined.rows
    ]
    combined.n_lhs = lhs.shape[0]
    return combined


def run_second_rk_cond(plan: TestPlan) -> ComparisonReport:
    """Conditional factorisation at an exponential inverse-local-time level:
    marginal of the stopping epoch against independent clamped lives,
    decorrelation of transformed epochs, path identities, factorisation."""
    if plan.r < 2:
        raise InvariantError("conditional harness needs r >= 2")
    if plan.p <= 0:
        raise InvariantError("second-rk-cond needs p > 0")
    chain = plan.chain
    kernel = make_kernel(chain)
    mu_pack = mu_tables(chain, plan.mu)
    y = chain.state_index(plan.start)
    cols = plan.tp_cols
    r = plan.r

    traces = _ensemble(plan, "second-rk-cond", 1, _blk_traces_invlt,
                       kernel, mu_pack, y, plan.p, r)
    kept = traces["stop_epoch"] == r
    n_kept = int(np.count_nonzero(kept))
    if n_kept < MIN_CONDITIONED:
        raise ConditioningTooRare(
            f"only {n_kept} of {plan.replicates} traces crossed at epoch {r}"
        )
    early = traces["fields"][kept][:, 0, :][:, cols]
    last = traces["fields"][kept][:, r - 1, :][:, cols]

    # path identities on every conditioned trace (exact bookkeeping)
    zero = chain.zero_index
    lam = traces["levels"][kept]
    l0_final = traces["fields"][kept].sum(axis=1)[:, zero]
    id_viol = int(np.count_nonzero(
        np.abs(l0_final - lam) > 1e-12 * np.maximum(1.0, lam)
    ))
    offs = traces["stop_time"][kept] - traces["bounds"][kept][:, r - 2]
    tau_viol = int(np.count_nonzero(~(offs > 0.0)))
    hit_viol = int(np.count_nonzero(np.isnan(traces["ep_t0"][kept][:, r - 1])))

    marginal = _ensemble(plan, "second-rk-cond", 2, _blk_levelstop,
                         kernel, ("mu",) + mu_pack, ("exp", plan.p), "total")
    if plan.defect == "unconditioned-marginal":
        ref = marginal["field"][:, cols]
    else:
        ref = marginal["field"][marginal["reached"]][:, cols]

    rows = compare_sides(
        side_estimates(last, plan.point_labels, plan.laplace_probes,
                       moment_orders=plan.moment_orders),
        side_estimates(ref, plan.point_labels, plan.laplace_probes,
                       moment_orders=plan.moment_orders),
    )
    rows = [StatRow(f"marginal:{row.statistic}", row.lhs, row.rhs, row.se,
                    row.z) for row in rows]
    rows += covariance_zero_rows(np.exp(-early), np.exp(-last),
                                 plan.point_labels, plan.point_labels)
    for name, count in [("level_identity_violations", id_viol),
                        ("tau_offset_violations", tau_viol),
                        ("stop_epoch_hit_violations", hit_viol)]:
        rows.append(StatRow(name, float(count), 0.0, 0.0,
                            zscore(float(count), 0.0)))

    fracs, ns = [], []
    for i in range(1, r + 1):
        spec = ("fixed", y) if i == 1 else ("mu",) + mu_pack
        ens = _ensemble(plan, "second-rk-cond", 10 + i,
                        _blk_full_epochs_with_levels, kernel, spec, plan.p)
        below = ens["l0_total"] < ens["levels"]
        frac = float(np.mean(~below)) if i == r else float(np.mean(below))
        fracs.append(frac)
        ns.append(below.shape[0])
    rows.append(product_fraction_row(
        "factorization", n_kept / plan.replicates, plan.replicates, fracs, ns,
    ))
    return ComparisonReport(
        test_id="second-rk-cond", rows=rows, seed=plan.seed,
        n_lhs=n_kept, n_rhs=ref.shape[0], z_max=plan.z_max,
        metadata={"defect": plan.defect, "r": r, "p": plan.p,
                  "conditioned_fraction": n_kept / plan.replicates,
                  "level_ties": int(traces["ties"])},
    )


REGISTRY = {
    "normalization": run_normalization,
    "eisenbaum": run_eisenbaum,
    "first-rk": run_first_rk,
    "first-rk-cond": run_first_rk_cond,
    "tminus": run_tminus,
    "second-rk": run_second_rk,
    "second-rk-cond": run_second_rk_cond,
}
