"""Built-in default suite: every harness once, reference chains, fixed seeds.

Used by ``rklab self-test`` and by the determinism checks.  Sizes are chosen
so the whole suite stays well under ten minutes on a laptop-class machine.
"""

from __future__ import annotations

import time

from . import diagnostics
from .chains import (
    ChainSpec,
    RebirthMeasure,
    SymmetricChain,
    birth_death_chain,
    build_chain,
    reference_chain,
)
from .diagnostics import SweepConfig
from .harnesses import REGISTRY, TestPlan

DEFAULT_SEED = 20260810


def absorbed_path_chain(kill_rate=1.0) -> SymmetricChain:
    """Four-state path -2 -1 | +1 +2 whose inner states absorb into 0."""
    spec = ChainSpec(
        states=(-2, -1, 1, 2),
        rates={(-2, -1): 1.0, (-1, -2): 1.0, (1, 2): 1.0, (2, 1): 1.0,
               (-1, 0): 1.0, (1, 0): 1.0},
        measure={x: 1.0 for x in (-2, -1, 1, 2)},
        kill_rate=kill_rate,
        zero_state=0,
        zero_accessible=False,
    )
    return build_chain(spec, coords=(-2.0, -1.0, 1.0, 2.0))


def reduction_chain(n=128, rate=160.0, kill_rate=1.0) -> SymmetricChain:
    return birth_death_chain(n, rate, kill_rate=kill_rate)


def _ref_plan(seed, workers, replicates=100_000, **kw):
    chain = reference_chain()
    base = dict(
        chain=chain,
        mu=RebirthMeasure(weights={1: 1.0}),
        start=-1,
        replicates=replicates,
        seed=seed,
        test_points=(-1, 0, 1),
        workers=workers,
    )
    base.update(kw)
    return TestPlan(**base)


def default_suite(seed=DEFAULT_SEED, workers=1):
    """(name, callable) pairs; each callable returns a report or sweep."""
    jobs = []

    jobs.append(("normalization", lambda: REGISTRY["normalization"](
        _ref_plan(seed, workers, replicates=50_000, start=None, p=1.0))))
    jobs.append(("eisenbaum", lambda: REGISTRY["eisenbaum"](
        _ref_plan(seed, workers))))
    jobs.append(("first-rk", lambda: REGISTRY["first-rk"](
        _ref_plan(seed, workers, r=2, s=1.0))))
    jobs.append(("first-rk-cond", lambda: REGISTRY["first-rk-cond"](
        _ref_plan(seed, workers, r=2))))
    jobs.append(("second-rk", lambda: REGISTRY["second-rk"](
        _ref_plan(seed, workers, r=2, s=1.0, t=1.0))))
    jobs.append(("second-rk-cond", lambda: REGISTRY["second-rk-cond"](
        _ref_plan(seed, workers, r=2, p=1.0))))

    def tminus():
        chain = absorbed_path_chain()
        plan = TestPlan(
            chain=chain, mu=RebirthMeasure(weights={2: 1.0}), start=-1,
            replicates=100_000, seed=seed, test_points=(-1, 1, 2), r=2,
            workers=workers,
        )
        return REGISTRY["tminus"](plan)

    jobs.append(("tminus", tminus))

    def reduction():
        chain = reduction_chain()
        plan = TestPlan(
            chain=chain, mu=RebirthMeasure(weights={32: 1.0}), start=64,
            replicates=50_000, seed=seed, test_points=(16, 32, 64), r=2,
            workers=workers,
        )
        return diagnostics.reduction_identity_test(
            plan, (0.25, 0.125, 0.0625)
        )

    jobs.append(("reduction", reduction))

    def modulus_local():
        chain = birth_death_chain(512, 2048.0)
        cfg = SweepConfig(
            chain=chain, mu=RebirthMeasure(weights={128: 1.0}), start=256,
            replicates=200, seed=seed, scales=(0.25, 0.125, 0.0625, 0.03125),
            stop_kind="zero", d=256, workers=workers,
        )
        return diagnostics.local_modulus_sweep(cfg)

    jobs.append(("modulus-local", modulus_local))

    def modulus_uniform():
        chain = birth_death_chain(512, 2048.0)
        cfg = SweepConfig(
            chain=chain, mu=RebirthMeasure(weights={128: 1.0}), start=256,
            replicates=200, seed=seed, scales=(0.25, 0.125, 0.0625, 0.03125),
            stop_kind="zero", interval=(0.25, 0.75), phi_kind="log",
            workers=workers,
        )
        return diagnostics.uniform_modulus_sweep(cfg)

    jobs.append(("modulus-uniform", modulus_uniform))

    def lil():
        chain = birth_death_chain(1024, 4096.0)
        cfg = SweepConfig(
            chain=chain, mu=RebirthMeasure(weights={64: 1.0}), start=128,
            replicates=200, seed=seed,
            scales=(0.25, 0.125, 0.0625, 0.03125),
            stop_kind="zero", workers=workers,
        )
        return diagnostics.lil_sweep(cfg)

    jobs.append(("lil", lil))
    return jobs


def run(workers=1, seed=None) -> int:
    """Execute the default suite; one pass/fail line per harness."""
    seed = DEFAULT_SEED if seed is None else seed
    failures = 0
    t_start = time.perf_counter()
    for name, job in default_suite(seed=seed, workers=workers):
        t0 = time.perf_counter()
        result = job()
        dt = time.perf_counter() - t0
        if hasattr(result, "verdict"):
            ok = result.verdict
            detail = f"max |z| = {result.max_abs_z():.2f}"
        else:
            ok = True
            detail = f"finest median = {result.finest_median:.3g} (info)"
        print(f"self-test {name:<16} "
              f"{'PASS' if ok else 'FAIL'}  {detail}  [{dt:.1f}s]")
        failures += 0 if ok else 1
    print(f"self-test total wall time {time.perf_counter() - t_start:.1f}s")
    return 0 if failures == 0 else 1
