"""Scenario driver: generate one seeded stream, replay it through several
policies, run comparison directives and collect report records.

Randomness derives from the scenario seed only. Frame ``i`` (block id ``i``)
draws its features from ``Rng(seed).split("block", i)``; query ``q`` draws
its token ids from ``Rng(seed).split("query", q)`` and has block id
``frames + q``. Model weights use the model's own seed.
"""

from __future__ import annotations

import dataclasses
import json
import os
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Annotated, Any, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, model_validator

from .errors import ConfigurationError
from .kvstore import ExplicitPositions, PositionAssignment
from .model import Model, ModelSpec, TokenBlock, Trace, build_model
from .policies import PolicyConfig, QueryOutput, StreamEvent, UniformPolicy, make_policy
from .tensorcore import Rng, seeded_gaussian


class ScenarioError(ConfigurationError):
    """Malformed or inconsistent scenario; ``diagnostics`` holds one line per problem."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(diagnostics))


# -- scenario document --------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class StreamSpec(_Strict):
    frames: int = Field(ge=0)
    tokens_per_frame: int = Field(default=8, ge=1)


class QuerySchedule(_Strict):
    """Explicit ``steps`` or ``count`` queries every ``every`` frames from ``start``.

    A query at step ``s`` arrives right after frame ``s``.
    """

    steps: list[int] | None = None
    start: int = Field(default=0, ge=0)
    every: int = Field(default=1, ge=1)
    count: int = Field(default=0, ge=0)
    tokens: int = Field(default=4, ge=1)
    max_new: int = Field(default=4, ge=0)

    def resolved_steps(self) -> list[int]:
        if self.steps is not None:
            return sorted(self.steps)
        return [self.start + i * self.every for i in range(self.count)]


class Equivalence(_Strict):
    type: Literal["equivalence"]
    a: str
    b: str
    tolerance: float = Field(default=0.0, ge=0)
    expect: Literal["match", "differ"] = "match"
    name: str | None = None


ORDER_RELATIONS = ("non_increasing", "non_decreasing", "strictly_increasing",
                   "strictly_decreasing", "equal")


class Ordering(_Strict):
    """``metric`` compared across ``policies`` in the listed order.

    ``aggregate="mean"`` compares per-policy means; ``"each"`` requires the
    relation on every query step.
    """

    type: Literal["ordering"]
    metric: str
    policies: list[str] = Field(min_length=2)
    relation: Literal[ORDER_RELATIONS] = "non_increasing"
    aggregate: Literal["mean", "each"] = "mean"
    name: str | None = None


class Rebasing(_Strict):
    """Attention outputs with re-based positions against ``control`` positions on
    the same stored keys, at every frame of a sink-free rolling window."""

    type: Literal["rebasing"]
    l_W: int = Field(ge=1)
    control: Literal["absolute", "shuffled"] = "absolute"
    tolerance: float = Field(default=1e-10, ge=0)
    expect: Literal["match", "differ"] = "match"
    name: str | None = None


Comparison = Annotated[Union[Equivalence, Ordering, Rebasing], Field(discriminator="type")]


class Scenario(_Strict):
    id: str
    seed: int = Field(default=0, ge=0, lt=2**64)
    model: dict[str, Any] = Field(default_factory=dict)
    stream: StreamSpec
    queries: QuerySchedule = Field(default_factory=QuerySchedule)
    policies: dict[str, dict[str, Any]] = Field(min_length=1)
    comparisons: list[Comparison] = Field(default_factory=list)

    @model_validator(mode="after")
    def _queries_within_stream(self):
        bad = [s for s in self.queries.resolved_steps() if not 0 <= s < self.stream.frames]
        if bad:
            raise ValueError(f"query steps {bad} outside stream of {self.stream.frames} frames")
        return self

    def model_spec(self) -> ModelSpec:
        return _build_dataclass(ModelSpec, self.model, ("model",))

    def policy_config(self, pid: str) -> PolicyConfig:
        raw = dict(self.policies[pid])
        raw.setdefault("tokens_per_frame", self.stream.tokens_per_frame)
        return _build_dataclass(PolicyConfig, _complete_budgets(raw), ("policies", pid))


def _complete_budgets(raw: dict) -> dict:
    """Fill in whichever of l_W / l_I / l_U the policy kind implies."""
    kind = raw.get("kind", "dscache")
    if kind == "uniform":
        raw.setdefault("l_I", 0)
        if "l_W" in raw:
            raw.setdefault("l_U", raw["l_W"])
    elif kind == "offline":
        raw.setdefault("l_U", 0)
        if "l_W" in raw:
            raw.setdefault("l_I", raw["l_W"])
    if "l_W" not in raw and isinstance(raw.get("l_I"), int) and isinstance(raw.get("l_U"), int):
        raw["l_W"] = raw["l_I"] + raw["l_U"]
    return raw


def _build_dataclass(cls, raw: dict, where: tuple):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ScenarioError([f"{_path(where + (k,))}: unknown field" for k in unknown])
    try:
        return TypeAdapter(cls).validate_python(raw)
    except ValidationError as e:
        raise ScenarioError([f"{_path(where + tuple(err['loc']))}: {err['msg']}" for err in e.errors()])


def _path(loc) -> str:
    return ".".join(str(x) for x in loc) or "<root>"


def _locate(text: str, loc) -> int | None:
    """Best-effort line number of a field path: walk the object keys in order."""
    offset, line = 0, None
    for key in loc:
        if not isinstance(key, str):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, offset)
        if m is None:
            break
        offset = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError([f"{source}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}"]) from None
    try:
        scenario = Scenario.model_validate(doc)
    except ValidationError as e:
        diags = []
        for err in e.errors():
            loc = err["loc"]
            line = _locate(text, loc)
            where = f"{source}:{line}" if line else source
            diags.append(f"{where}: {_path(loc)}: {err['msg']}")
        raise ScenarioError(diags) from None
    try:
        validate_scenario(scenario)
    except ScenarioError as e:
        diags = []
        for d in e.diagnostics:
            path = d.split(":", 1)[0].split(".")
            line = _locate(text, path)
            diags.append(f"{source}:{line}: {d}" if line else f"{source}: {d}")
        raise ScenarioError(diags) from None
    return scenario


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as f:
        return parse_scenario(f.read(), str(path))


def override(scenario: Scenario, seed: int | None = None, precision: str | None = None,
             policies: list[str] | None = None) -> Scenario:
    """Apply CLI overrides. Selecting policies drops comparisons that need others."""
    update: dict[str, Any] = {}
    if seed is not None:
        update["seed"] = seed
    if precision is not None:
        update["model"] = {**scenario.model, "precision": precision}
    if policies is not None:
        missing = [p for p in policies if p not in scenario.policies]
        if missing:
            raise ScenarioError([f"--policy: unknown policy id {m!r}" for m in missing])
        update["policies"] = {p: scenario.policies[p] for p in policies}
        update["comparisons"] = [c for c in scenario.comparisons if set(_needs(c)) <= set(policies)]
    try:
        out = Scenario.model_validate({**scenario.model_dump(), **update})
    except ValidationError as e:
        raise ScenarioError([f"{_path(err['loc'])}: {err['msg']}" for err in e.errors()]) from None
    validate_scenario(out)
    return out


def _needs(c) -> list[str]:
    if isinstance(c, Equivalence):
        return [c.a, c.b]
    if isinstance(c, Ordering):
        return list(c.policies)
    return []


def validate_scenario(s: Scenario) -> None:
    """Budget and position checks; everything here runs before any compute."""
    errors: list[str] = []
    try:
        spec = s.model_spec()
    except ScenarioError as e:
        raise ScenarioError(e.diagnostics) from None
    q = s.queries
    n_queries = len(q.resolved_steps())
    tpf = s.stream.tokens_per_frame
    for pid in s.policies:
        try:
            cfg = s.policy_config(pid)
        except ScenarioError as e:
            errors.extend(e.diagnostics)
            continue
        if cfg.tokens_per_frame != tpf:
            errors.append(f"policies.{pid}.tokens_per_frame: {cfg.tokens_per_frame} != stream tokens_per_frame {tpf}")
        bound = policy_position_bound(cfg, s.stream.frames, n_queries, q.tokens, q.max_new)
        if bound > spec.max_position:
            errors.append(f"policies.{pid}: positions reach {bound}, above max_position {spec.max_position}")
    for i, c in enumerate(s.comparisons):
        for pid in _needs(c):
            if pid not in s.policies:
                errors.append(f"comparisons.{i}: unknown policy id {pid!r}")
        if isinstance(c, Ordering) and c.metric not in METRIC_FIELDS:
            errors.append(f"comparisons.{i}.metric: unknown metric {c.metric!r}")
        if isinstance(c, Rebasing):
            if c.control == "absolute" and s.stream.frames * tpf > spec.max_position + 1:
                errors.append(f"comparisons.{i}: absolute positions reach {s.stream.frames * tpf - 1}, "
                              f"above max_position {spec.max_position}")
    if errors:
        raise ScenarioError(errors)


def policy_position_bound(cfg: PolicyConfig, frames: int, n_queries: int, q_tokens: int, max_new: int) -> int:
    if cfg.kind == "uniform" and (cfg.storage == "encoded" or cfg.positions == "absolute"):
        stream = frames * cfg.tokens_per_frame
        if not cfg.strip_text_on_evict:
            stream += n_queries * (q_tokens + max_new)
        return stream + q_tokens + max(0, max_new - 1) - 1
    return cfg.position_bound(q_tokens, max_new)


# -- stream generation ----------------------------------------------------------

def generate_events(scenario: Scenario, model: Model) -> list[StreamEvent]:
    root = Rng(scenario.seed)
    tpf = scenario.stream.tokens_per_frame
    q = scenario.queries
    by_step = Counter(q.resolved_steps())
    events: list[StreamEvent] = []
    qi = 0
    for i in range(scenario.stream.frames):
        emb = seeded_gaussian(root.split("block", i), tpf, model.hidden, 1.0, model.dtype)
        events.append(StreamEvent.frame(TokenBlock.visual(emb, i, i), i))
        for _ in range(by_step[i]):
            ids = root.split("query", qi).generator().integers(0, model.spec.vocab_size, q.tokens)
            block = TokenBlock.text(model.embed_tokens(ids), scenario.stream.frames + qi)
            events.append(StreamEvent.query(block, q.max_new, i))
            qi += 1
    return events


# -- records --------------------------------------------------------------------

METRIC_FIELDS = ("cache_rows", "stored_rows", "memory_bytes", "max_position_used", "prefill_macs",
                 "decode_macs", "value_cosine_vs_reference", "attention_mass_sink",
                 "attention_mass_past", "attention_mass_recent")

RECORD_FIELDS = ("scenario", "record", "policy", "step", "tokens") + METRIC_FIELDS + (
    "comparison", "kind", "passed", "delta", "detail")


def query_record(scenario_id: str, policy: str, out: QueryOutput) -> dict:
    m = out.metrics.to_dict()
    rec = {"scenario": scenario_id, "record": "query", "policy": policy, "step": out.step,
           "tokens": list(out.tokens)}
    rec.update({k: m[k] for k in METRIC_FIELDS})
    return rec


def comparison_record(scenario_id: str, name: str, kind: str, passed: bool, delta: float,
                      detail: str = "") -> dict:
    return {"scenario": scenario_id, "record": "comparison", "comparison": name, "kind": kind,
            "passed": bool(passed), "delta": _finite(delta), "detail": detail}


def _finite(x: float):
    x = float(x)
    return x if np.isfinite(x) else None


# -- comparisons ------------------------------------------------------------------

@dataclass
class Verdict:
    passed: bool
    delta: float
    detail: str = ""


def check_equivalence(a: list[QueryOutput], b: list[QueryOutput], tolerance: float = 0.0) -> Verdict:
    """Decoded tokens must match exactly and pre-logit hidden states within
    ``tolerance`` (max-abs), query by query."""
    if len(a) != len(b):
        return Verdict(False, float("inf"), f"{len(a)} vs {len(b)} queries")
    worst = 0.0
    mismatched = []
    for x, y in zip(a, b):
        if x.step != y.step:
            return Verdict(False, float("inf"), f"query steps differ ({x.step} vs {y.step})")
        if x.tokens != y.tokens:
            mismatched.append(x.step)
        if x.hidden.shape != y.hidden.shape:
            worst = float("inf")
            continue
        if x.hidden.size:
            worst = max(worst, float(np.max(np.abs(x.hidden.astype(np.float64) - y.hidden.astype(np.float64)))))
    ok = not mismatched and worst <= tolerance
    detail = f"token mismatch at steps {mismatched}" if mismatched else ""
    return Verdict(ok, worst, detail)


def check_ordering(values: list[float], relation: str) -> Verdict:
    """``delta`` is the smallest margin by which the relation holds (negative = violated)."""
    diffs = np.diff(np.asarray(values, dtype=np.float64))
    if diffs.size == 0:
        return Verdict(True, 0.0)
    if relation == "non_increasing":
        margin = float(np.min(-diffs))
        return Verdict(margin >= 0, margin)
    if relation == "non_decreasing":
        margin = float(np.min(diffs))
        return Verdict(margin >= 0, margin)
    if relation == "strictly_increasing":
        margin = float(np.min(diffs))
        return Verdict(margin > 0, margin)
    if relation == "strictly_decreasing":
        margin = float(np.min(-diffs))
        return Verdict(margin > 0, margin)
    if relation == "equal":
        spread = float(np.max(np.abs(diffs)))
        return Verdict(spread == 0, -spread if spread else 0.0)
    raise ConfigurationError(f"unknown relation {relation!r}")


def _metric(out: QueryOutput, metric: str) -> float:
    v = getattr(out.metrics, metric)
    if isinstance(v, list):
        v = v[0] if v else 0
    return float("nan") if v is None else float(v)


def rebasing_check(model: Model, frames: list[TokenBlock], l_W: int, control: str = "absolute") -> float:
    """Largest attention-output gap between re-based and control positions.

    A sink-free rolling window of ``l_W`` frames is maintained; before each
    frame is ingested, the new frame is encoded against the current stored
    keys once with positions ``0..L-1`` (re-based) and once with the control
    layout: the keys' original stream positions, or a random permutation.
    """
    if not frames:
        return 0.0
    tpf = len(frames[0])
    policy = UniformPolicy(model, PolicyConfig.uniform(l_W, l_A=0, tokens_per_frame=tpf))
    gen = Rng(0).split("rebasing-control").generator()
    worst = 0.0
    for block in frames:
        win = policy.window
        n, L = len(block), len(win)
        rebased = PositionAssignment.contiguous(L)
        if control == "absolute":
            other = ExplicitPositions(policy.window_pos, policy.next_position + np.arange(n))
        else:
            other = ExplicitPositions(gen.permutation(L).astype(np.int64), L + np.arange(n))
        ta, tb = Trace(), Trace()
        model.encode(block, win, rebased, trace=ta)
        model.encode(block, win, other, trace=tb)
        for x, y in zip(ta.attn_outputs, tb.attn_outputs):
            worst = max(worst, float(np.max(np.abs(x - y))))
        policy.ingest(block)
    return worst


# -- driver -----------------------------------------------------------------------

@dataclass
class ScenarioResult:
    scenario: Scenario
    outputs: dict[str, list[QueryOutput]]
    verdicts: list[tuple[str, str, Verdict]] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(v.passed for _, _, v in self.verdicts)


def thread_cap() -> int:
    raw = os.environ.get("DSCACHE_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigurationError(f"DSCACHE_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise ConfigurationError("DSCACHE_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def run_policy(model: Model, config: PolicyConfig, events: list[StreamEvent], name: str, seed: int) -> list[QueryOutput]:
    return make_policy(model, config, name, seed).run(events)


def run_scenario(scenario: Scenario, include_metrics: bool = True) -> ScenarioResult:
    validate_scenario(scenario)
    spec = scenario.model_spec()
    configs = {pid: scenario.policy_config(pid) for pid in scenario.policies}
    model = build_model(spec)
    events = generate_events(scenario, model)

    pids = list(configs)
    workers = max(1, min(len(pids), thread_cap()))
    if workers == 1:
        results = [run_policy(model, configs[p], events, p, scenario.seed) for p in pids]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_policy, model, configs[p], events, p, scenario.seed) for p in pids]
            results = [f.result() for f in futures]
    outputs = dict(zip(pids, results))

    result = ScenarioResult(scenario, outputs)
    if include_metrics:
        for pid in pids:
            for out in outputs[pid]:
                result.records.append(query_record(scenario.id, pid, out))
    frames = [e.block for e in events if e.kind == "frame"]
    for i, c in enumerate(scenario.comparisons):
        name = c.name or f"{c.type}-{i}"
        v = _run_comparison(c, outputs, model, frames)
        result.verdicts.append((name, c.type, v))
        result.records.append(comparison_record(scenario.id, name, c.type, v.passed, v.delta, v.detail))
    return result


def _run_comparison(c, outputs, model, frames) -> Verdict:
    if isinstance(c, Equivalence):
        v = check_equivalence(outputs[c.a], outputs[c.b], c.tolerance)
        matched = v.passed
        return Verdict(matched == (c.expect == "match"), v.delta, v.detail or ("matched" if matched else "differs"))
    if isinstance(c, Rebasing):
        gap = rebasing_check(model, frames, c.l_W, c.control)
        matched = gap <= c.tolerance
        return Verdict(matched == (c.expect == "match"), gap, "matched" if matched else "differs")
    per_policy = [[_metric(o, c.metric) for o in outputs[p]] for p in c.policies]
    if c.aggregate == "mean":
        return check_ordering([float(np.mean(v)) if v else float("nan") for v in per_policy], c.relation)
    if len({len(v) for v in per_policy}) != 1:
        return Verdict(False, float("inf"), "policies answered different numbers of queries")
    worst = Verdict(True, float("inf"))
    for column in zip(*per_policy):
        v = check_ordering(list(column), c.relation)
        if not v.passed or v.delta < worst.delta:
            worst = Verdict(worst.passed and v.passed, min(worst.delta, v.delta))
    return worst
