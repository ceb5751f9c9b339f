"""Experiment configuration: YAML schema, validation, object construction.

One document describes one harness invocation.  Unknown keys are rejected
with their path, model invariants (rebirth mass at 0, missing zero state,
plan sizes) are enforced at parse time, and the assembled objects are the
same ones the test suite drives directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from .chains import (
    ChainSpec,
    RebirthMeasure,
    SymmetricChain,
    birth_death_chain,
    build_chain,
    path_chain,
)
from .diagnostics import SweepConfig
from .errors import InvariantError, SchemaError
from .harnesses import HARNESS_NUM, TestPlan

SWEEP_HARNESSES = ("modulus-local", "modulus-uniform", "lil")

_TOP_KEYS = {"harness", "chain", "mu", "start", "plan", "seed", "output",
             "workers", "figures"}
_CHAIN_KEYS = {"kind", "states", "rates", "measure", "n", "rate",
               "absorb_at_zero", "kill_rate", "zero_state", "zero_accessible"}
_PLAN_KEYS = {"r", "s", "p", "t", "replicates", "test_points",
              "laplace_probes", "moment_orders", "scales", "d", "interval",
              "stop", "level", "phi_kind", "phi_scale", "defect", "z_max"}


@dataclass
class ExperimentConfig:
    harness: str
    chain: SymmetricChain
    mu: RebirthMeasure | None
    start: object
    plan: dict
    seed: int
    output: str | None
    workers: int = 1
    figures: bool = True

    def test_plan(self) -> TestPlan:
        p = self.plan
        kwargs = dict(
            chain=self.chain, mu=self.mu, start=self.start,
            replicates=int(p.get("replicates", 200_000)),
            seed=self.seed,
            test_points=tuple(p.get("test_points", ())),
            laplace_probes=tuple(tuple(v) for v in p.get("laplace_probes", ())),
            moment_orders=tuple(p.get("moment_orders", (1, 2))),
            workers=self.workers,
            defect=p.get("defect"),
        )
        for key in ("r",):
            if key in p:
                kwargs[key] = int(p[key])
        for key in ("s", "p", "t", "z_max"):
            if key in p:
                kwargs[key] = float(p[key])
        return TestPlan(**kwargs)

    def sweep_config(self) -> SweepConfig:
        p = self.plan
        if "scales" not in p:
            raise InvariantError("sweep plans need a scales list")
        return SweepConfig(
            chain=self.chain, mu=self.mu, start=self.start,
            replicates=int(p.get("replicates", 200)),
            seed=self.seed,
            scales=tuple(float(v) for v in p["scales"]),
            stop_kind=p.get("stop", "zero"),
            level=float(p["level"]) if "level" in p else None,
            d=p.get("d"),
            interval=tuple(p["interval"]) if "interval" in p else None,
            phi_kind=p.get("phi_kind",
                           "log" if self.harness == "modulus-uniform"
                           else "loglog"),
            phi_scale=float(p.get("phi_scale", 2.0)),
            workers=self.workers,
        )

    def scales(self):
        if "scales" not in self.plan:
            raise InvariantError("this harness needs a scales list")
        return tuple(float(v) for v in self.plan["scales"])


def _require_mapping(obj, path):
    if not isinstance(obj, dict):
        raise SchemaError(f"{path}: expected a mapping, got {type(obj).__name__}")
    return obj


def _reject_unknown(d, allowed, path):
    for key in d:
        if key not in allowed:
            raise SchemaError(f"{path}: unknown key {key!r}")


def _build_chain(doc) -> SymmetricChain:
    _require_mapping(doc, "chain")
    _reject_unknown(doc, _CHAIN_KEYS, "chain")
    kind = doc.get("kind", "explicit")
    kill = float(doc.get("kill_rate", 1.0))
    zero = doc.get("zero_state", 0)
    if kind == "birth-death":
        for key in ("n", "rate"):
            if key not in doc:
                raise SchemaError(f"chain: birth-death needs {key!r}")
        return birth_death_chain(
            int(doc["n"]), float(doc["rate"]), kill_rate=kill,
            absorb_at_zero=bool(doc.get("absorb_at_zero", False)),
        )
    if kind == "path":
        if "states" not in doc:
            raise SchemaError("chain: path needs a states list")
        return path_chain(
            tuple(doc["states"]), rate=float(doc.get("rate", 1.0)),
            measure=doc.get("measure", 1.0), kill_rate=kill, zero_state=zero,
        )
    if kind == "explicit":
        for key in ("states", "rates", "measure"):
            if key not in doc:
                raise SchemaError(f"chain: explicit needs {key!r}")
        rates = {}
        for triple in doc["rates"]:
            if not isinstance(triple, (list, tuple)) or len(triple) != 3:
                raise SchemaError("chain.rates: entries must be [from, to, rate]")
            rates[(triple[0], triple[1])] = float(triple[2])
        measure = doc["measure"]
        states = tuple(doc["states"])
        if not isinstance(measure, dict):
            measure = {x: float(measure) for x in states}
        spec = ChainSpec(
            states=states, rates=rates, measure=measure, kill_rate=kill,
            zero_state=zero,
            zero_accessible=bool(doc.get("zero_accessible", zero in states)),
        )
        return build_chain(spec)
    raise SchemaError(f"chain.kind: unknown kind {kind!r}")


def parse_config(text: str) -> ExperimentConfig:
    """Validated configuration or the first schema/invariant error."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SchemaError(f"malformed document: {exc}") from exc
    _require_mapping(doc, "top level")
    _reject_unknown(doc, _TOP_KEYS, "top level")
    for key in ("harness", "chain", "seed"):
        if key not in doc:
            raise SchemaError(f"top level: missing key {key!r}")
    harness = doc["harness"]
    if harness not in HARNESS_NUM:
        raise SchemaError(
            f"harness: unknown id {harness!r}; expected one of "
            f"{sorted(HARNESS_NUM)}"
        )
    chain = _build_chain(doc["chain"])
    mu = None
    if "mu" in doc and doc["mu"] is not None:
        weights = _require_mapping(doc["mu"], "mu")
        mu = RebirthMeasure(weights={k: float(v) for k, v in weights.items()})
        mu.validate(chain)
    plan = _require_mapping(doc.get("plan", {}), "plan")
    _reject_unknown(plan, _PLAN_KEYS, "plan")
    cfg = ExperimentConfig(
        harness=harness,
        chain=chain,
        mu=mu,
        start=doc.get("start"),
        plan=dict(plan),
        seed=int(doc["seed"]),
        output=doc.get("output"),
        workers=int(doc.get("workers", 1)),
        figures=bool(doc.get("figures", True)),
    )
    # eager validation so configuration errors surface at parse time
    if harness in SWEEP_HARNESSES:
        cfg.sweep_config()
    else:
        cfg.test_plan()
        if harness == "reduction":
            cfg.scales()
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
