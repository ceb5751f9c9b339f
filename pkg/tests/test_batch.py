"""Vectorised engine: agreement with the scalar engine and path bookkeeping."""

import numpy as np

from rklab.batch import (
    ABSORB_DEATH,
    EXP_DEATH,
    ZERO_STOP,
    block_plan,
    block_rng,
    make_kernel,
    mu_tables,
    run_epochs,
    run_epochs_levelstop,
    run_traces_final,
    run_traces_inverse_lt,
    run_traces_stop_zero,
)
from rklab.chains import RebirthMeasure, potential_matrix
from rklab.pathsim import Mode, run_epoch
from rklab.selftest import absorbed_path_chain


def test_block_plan():
    assert block_plan(5) == [5]
    sizes = block_plan(20_000)
    assert sum(sizes) == 20_000
    assert all(s <= 8192 for s in sizes)


def test_batch_determinism(ref_chain):
    k = make_kernel(ref_chain)
    a = run_epochs(k, np.zeros(500, dtype=np.int64), block_rng(1, 2, 3))
    b = run_epochs(k, np.zeros(500, dtype=np.int64), block_rng(1, 2, 3))
    assert np.array_equal(a["field"], b["field"])
    c = run_epochs(k, np.zeros(500, dtype=np.int64), block_rng(1, 2, 4))
    assert not np.array_equal(a["field"], c["field"])


def test_batch_epochs_match_kernel(ref_chain):
    k = make_kernel(ref_chain)
    u0 = potential_matrix(ref_chain, 0.0)
    n = 200_000
    out = run_epochs(k, np.full(n, 2, dtype=np.int64), block_rng(9, 1, 0))
    mean = out["field"].mean(axis=0)
    se = out["field"].std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(mean - u0.table[2]) <= 4 * se)
    # occupation identity holds for the bulk engine too
    elapsed = out["field"] @ ref_chain.measure
    assert np.abs(elapsed - out["zeta"]).max() < 1e-10


def test_batch_scalar_two_sample(ref_chain):
    # same law from both engines: killed-life hit fraction and field moments
    k = make_kernel(ref_chain)
    n = 30_000
    out = run_epochs(k, np.full(n, 0, dtype=np.int64), block_rng(4, 1, 0),
                     stop_on_zero=True)
    hit_batch = out["cause"] == ZERO_STOP
    rng = np.random.default_rng(21)
    fields = []
    hits = []
    for _ in range(n // 3):
        rec = run_epoch(ref_chain, -1, Mode.KILL_ONLY, rng)
        hits.append(rec.hit_zero_at is not None)
        fields.append(rec.local_field_at_t0 if rec.hit_zero_at is not None
                      else rec.local_field_total)
    p1, p2 = hit_batch.mean(), np.mean(hits)
    se = np.sqrt(p1 * (1 - p1) / n + np.var(hits) / len(hits))
    assert abs(p1 - p2) < 4 * se
    f_scalar = np.array(fields)
    f_batch = out["field"]
    diff = f_batch.mean(0) - f_scalar.mean(0)
    se = np.sqrt(f_batch.var(0) / n + f_scalar.var(0) / len(fields))
    assert np.all(np.abs(diff) <= 4 * se)


def test_levelstop_zero_entry_bookkeeping(ref_chain):
    k = make_kernel(ref_chain)
    n = 20_000
    t = 0.4
    zi = ref_chain.zero_index
    out = run_epochs_levelstop(k, np.full(n, zi, dtype=np.int64),
                               block_rng(5, 1, 0), np.full(n, t))
    reached = out["reached"]
    # the zero local time of the result equals level ^ total, exactly
    assert np.all(out["field"][reached][:, zi] == t)
    clamped = out["field"][~reached][:, zi]
    assert np.all(np.abs(clamped - out["l0"][~reached]) < 1e-12)
    assert np.all(out["reached"] == ~out["clamped"])


def test_traces_stop_zero_bookkeeping(ref_chain, mu_plus):
    k = make_kernel(ref_chain)
    mu_idx, mu_cum = mu_tables(ref_chain, mu_plus)
    n = 20_000
    out = run_traces_stop_zero(k, mu_idx, mu_cum,
                               np.full(n, 0, dtype=np.int64),
                               block_rng(6, 1, 0), r_max=3)
    stop = out["stop_epoch"]
    assert set(np.unique(stop)) <= {0, 1, 2, 3}
    kept = stop == 2
    # the stopping epoch never holds the zero state; earlier epochs neither
    zi = ref_chain.zero_index
    assert np.all(out["fields"][kept][:, :, zi] == 0.0)
    # the stop lands strictly inside the final life
    assert np.all(out["stop_time"][kept] > out["bounds"][kept][:, 0])


def test_traces_inverse_lt_bookkeeping(ref_chain, mu_plus):
    k = make_kernel(ref_chain)
    mu_idx, mu_cum = mu_tables(ref_chain, mu_plus)
    n = 20_000
    rng = block_rng(7, 1, 0)
    levels = rng.exponential(1.0, n)
    out = run_traces_inverse_lt(k, mu_idx, mu_cum,
                                np.full(n, 0, dtype=np.int64), rng, levels,
                                r_max=2)
    kept = out["stop_epoch"] == 2
    zi = ref_chain.zero_index
    total0 = out["fields"][kept].sum(axis=1)[:, zi]
    lam = out["levels"][kept]
    assert np.abs(total0 - lam).max() < 1e-12 * max(1.0, lam.max())
    assert out["ties"] == 0
    # crossing epoch saw the zero state
    assert not np.any(np.isnan(out["ep_t0"][kept][:, 1]))
    # first epoch ended below its level
    assert np.all(out["l0_bounds"][kept][:, 0] < lam)


def test_traces_final_stops(ref_chain, mu_plus):
    k = make_kernel(ref_chain)
    mu_idx, mu_cum = mu_tables(ref_chain, mu_plus)
    n = 5_000
    zi = ref_chain.zero_index
    out = run_traces_final(k, mu_idx, mu_cum, np.full(n, 0, dtype=np.int64),
                           block_rng(8, 1, 0), "zero")
    assert np.all(out["field"][:, zi] == 0.0)
    out = run_traces_final(k, mu_idx, mu_cum, np.full(n, 0, dtype=np.int64),
                           block_rng(8, 2, 0), "invlt",
                           levels=np.full(n, 0.3))
    assert np.all(out["field"][:, zi] == 0.3)

    chain = absorbed_path_chain()
    k2 = make_kernel(chain)
    mu2 = RebirthMeasure(weights={2: 1.0})
    mi, mc = mu_tables(chain, mu2)
    out = run_traces_final(k2, mi, mc, np.full(n, 0, dtype=np.int64),
                           block_rng(8, 3, 0), "absorb")
    assert np.all(np.isfinite(out["stop_time"]))


def test_absorbed_epochs_batch():
    chain = absorbed_path_chain()
    k = make_kernel(chain)
    out = run_epochs(k, np.full(10_000, 1, dtype=np.int64),
                     block_rng(12, 1, 0))
    absorbed = out["cause"] == ABSORB_DEATH
    assert absorbed.mean() > 0.2
    assert np.all(out["t0"][absorbed] == out["zeta"][absorbed])
    assert np.all(np.isnan(out["t0"][out["cause"] == EXP_DEATH]))
