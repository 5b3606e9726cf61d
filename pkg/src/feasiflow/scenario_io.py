"""Loading and validation of scenario files.

Scenarios are YAML documents with a `kind` discriminator; the exact grammar
ships in the README. Built-in scenario names bypass file parsing entirely so
the standard experiments run with no external inputs. Validation failures
are collected into a single ScenarioError carrying one (line, message) entry
per problem found, with line numbers from the parsed document.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .cbf import AffineBarrier, CbfScenario, FormationSpec, MasState
from .flows import VARIANTS, FlowParams
from .network import Graph
from .problem import AgentSpec, CoupledProblem, QuadraticCost
from .scenarios import (
    BUILTIN_SCENARIOS,
    build_formation9,
    build_static9,
    random_coupled_problem,
)

KINDS = ("static_opt", "cbf_sim", "random_static")

FLOW_KEYS = ("k0", "dt", "horizon", "variant", "sat_band", "sat_slope")


@dataclass
class ScenarioIssue:
    line: int | None
    message: str

    def __str__(self) -> str:
        where = f"line {self.line}: " if self.line is not None else ""
        return where + self.message


class ScenarioError(Exception):
    """One or more validation problems in a scenario file."""

    def __init__(self, source: str, issues: list):
        self.source = source
        self.issues = list(issues)
        lines = "\n".join(f"  {issue}" for issue in self.issues)
        super().__init__(f"invalid scenario {source}:\n{lines}")


@dataclass
class LoadedScenario:
    """A validated scenario ready to run.

    kind is "static" (allocation flow on a fixed problem) or "cbf"
    (closed-loop simulation). flow_defaults carries file-level parameter
    choices; command-line flags override them downstream.
    """

    kind: str
    name: str
    problem: CoupledProblem | None = None
    cbf: CbfScenario | None = None
    flow_defaults: dict = field(default_factory=dict)
    seed: int | None = None


def _line_map(text: str) -> dict:
    """Map tuple paths into the document to 1-based line numbers."""
    marks: dict = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return marks

    def walk(node, path):
        if node is None:
            return
        marks[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                walk(value_node, path + (getattr(key_node, "value", "?"),))
        elif isinstance(node, yaml.SequenceNode):
            for idx, item in enumerate(node.value):
                walk(item, path + (idx,))

    walk(root, ())
    return marks


class _Checker:
    """Accumulates issues against a parsed document with its line map."""

    def __init__(self, marks: dict):
        self.marks = marks
        self.issues: list[ScenarioIssue] = []

    def line(self, *path):
        best = None
        for cut in range(len(path), -1, -1):
            best = self.marks.get(tuple(path[:cut]))
            if best is not None:
                break
        return best

    def add(self, message: str, *path) -> None:
        self.issues.append(ScenarioIssue(self.line(*path), message))


def _load_graph(data, check: _Checker, *base) -> Graph | None:
    if not isinstance(data, dict):
        check.add("graph must be a mapping with nodes and edges", *base)
        return None
    nodes = data.get("nodes")
    edges = data.get("edges", [])
    if not isinstance(nodes, int) or nodes < 1:
        check.add("graph.nodes must be a positive integer", *base, "nodes")
        return None
    pairs = []
    ok = True
    for idx, edge in enumerate(edges or []):
        if not isinstance(edge, (list, tuple)) or len(edge) != 2:
            check.add("each edge must be a pair [i, j]", *base, "edges", idx)
            ok = False
            continue
        i, j = edge
        if not all(isinstance(v, int) and 1 <= v <= nodes for v in (i, j)) or i == j:
            check.add(f"edge [{i}, {j}] must join two distinct agents in 1..{nodes}", *base, "edges", idx)
            ok = False
            continue
        pairs.append((i, j))
    if not ok:
        return None
    try:
        return Graph(nodes, frozenset(pairs))
    except ValueError as exc:
        check.add(str(exc), *base)
        return None


def _load_flow(data, check: _Checker) -> dict:
    flow = data.get("flow", {})
    if flow is None:
        return {}
    if not isinstance(flow, dict):
        check.add("flow must be a mapping of parameter overrides", "flow")
        return {}
    out = {}
    for key, value in flow.items():
        if key not in FLOW_KEYS:
            check.add(f"unknown flow parameter {key!r} (expected one of {FLOW_KEYS})", "flow", key)
            continue
        if key == "variant":
            if value not in VARIANTS:
                check.add(f"variant must be one of {VARIANTS}", "flow", key)
                continue
            out[key] = value
        else:
            try:
                out[key] = float(value)
            except (TypeError, ValueError):
                check.add(f"flow parameter {key} must be a number", "flow", key)
    return out


def _matrix(value, rows: int | None, cols: int | None, what: str, check: _Checker, *path):
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        check.add(f"{what} must be a numeric matrix", *path)
        return None
    if arr.ndim == 1 and cols == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        check.add(f"{what} must be two-dimensional", *path)
        return None
    if rows is not None and arr.shape[0] != rows:
        check.add(f"{what} must have {rows} rows, got {arr.shape[0]}", *path)
        return None
    if cols is not None and arr.shape[1] != cols:
        check.add(f"{what} must have {cols} columns, got {arr.shape[1]}", *path)
        return None
    return arr


def _vector(value, length: int | None, what: str, check: _Checker, *path):
    try:
        arr = np.array(value, dtype=float).ravel()
    except (TypeError, ValueError):
        check.add(f"{what} must be a numeric vector", *path)
        return None
    if length is not None and arr.shape[0] != length:
        check.add(f"{what} must have length {length}, got {arr.shape[0]}", *path)
        return None
    return arr


def _load_static(data, check: _Checker, name: str) -> LoadedScenario | None:
    graph = _load_graph(data.get("graph"), check, "graph")
    agents_data = data.get("agents")
    if not isinstance(agents_data, list) or not agents_data:
        check.add("agents must be a nonempty list", "agents")
        return None
    if graph is None:
        return None
    if len(agents_data) != graph.node_count:
        check.add(f"expected {graph.node_count} agents for the graph, got {len(agents_data)}", "agents")
        return None

    m_count = None
    specs = []
    for idx, raw in enumerate(agents_data):
        if not isinstance(raw, dict):
            check.add("each agent must be a mapping", "agents", idx)
            return None
        dim = raw.get("dim")
        if not isinstance(dim, int) or dim < 1:
            check.add("agent dim must be a positive integer", "agents", idx, "dim")
            return None
        hess = _matrix(raw.get("hessian"), dim, dim, "hessian", check, "agents", idx, "hessian")
        lin = _vector(raw.get("linear", [0.0] * dim), dim, "linear", check, "agents", idx, "linear")
        coupling = _matrix(raw.get("coupling"), dim, m_count, "coupling", check, "agents", idx, "coupling")
        if coupling is not None and m_count is None:
            m_count = coupling.shape[1]
        offsets = _vector(raw.get("offsets"), m_count, "offsets", check, "agents", idx, "offsets")
        if any(v is None for v in (hess, lin, coupling, offsets)):
            return None
        try:
            cost = QuadraticCost(hess, lin, float(raw.get("constant", 0.0)))
            specs.append(AgentSpec(dim, cost, coupling, offsets))
        except ValueError as exc:
            check.add(str(exc), "agents", idx)
            return None

    try:
        problem = CoupledProblem(tuple(specs), graph)
    except ValueError as exc:
        check.add(str(exc))
        return None
    return LoadedScenario("static", name, problem=problem, flow_defaults=_load_flow(data, check))


def _load_cbf(data, check: _Checker, name: str) -> LoadedScenario | None:
    graph = _load_graph(data.get("graph"), check, "graph")
    if graph is None:
        return None
    n = graph.node_count
    init = _matrix(data.get("initial_positions"), n, 2, "initial_positions", check, "initial_positions")
    target = _matrix(data.get("target_positions"), n, 2, "target_positions", check, "target_positions")
    leader = data.get("leader")
    if leader is not None and not (isinstance(leader, int) and 1 <= leader <= n):
        check.add(f"leader must be an agent index in 1..{n}", "leader")
        leader = None
    mode = data.get("mode", "distributed")

    barriers = []
    raw_barriers = data.get("barriers")
    if not isinstance(raw_barriers, list) or not raw_barriers:
        check.add("barriers must be a nonempty list", "barriers")
        raw_barriers = []
    for idx, raw in enumerate(raw_barriers):
        if not isinstance(raw, dict):
            check.add("each barrier must be a mapping", "barriers", idx)
            continue
        weights = _matrix(raw.get("weights"), n, 2, "weights", check, "barriers", idx, "weights")
        if weights is None:
            continue
        try:
            barriers.append(
                AffineBarrier(
                    float(raw.get("offset", 0.0)),
                    float(raw.get("time_slope", 0.0)),
                    weights,
                    float(raw.get("gain", 1.0)),
                )
            )
        except (TypeError, ValueError) as exc:
            check.add(str(exc), "barriers", idx)

    if init is None or target is None or not barriers or check.issues:
        return None

    flow = _load_flow(data, check)
    params_kwargs = {k: v for k, v in flow.items() if k != "variant"}
    try:
        params = FlowParams(variant="sign", **params_kwargs)
        formation = FormationSpec.from_targets(target, graph, leader)
        cbf = CbfScenario(
            graph=graph,
            formation=formation,
            barriers=barriers,
            initial_state=MasState(init, 0.0),
            target_positions=target,
            controller_mode=mode,
            flow_params=params,
        )
    except (TypeError, ValueError) as exc:
        check.add(str(exc))
        return None
    return LoadedScenario("cbf", name, cbf=cbf, flow_defaults=flow)


def _load_random(data, check: _Checker, name: str, seed_override: int | None) -> LoadedScenario | None:
    seed = seed_override if seed_override is not None else data.get("seed", 0)
    if not isinstance(seed, int):
        check.add("seed must be an integer", "seed")
        return None
    kwargs = {}
    for key in ("n_agents", "constraint_count"):
        if key in data:
            if not isinstance(data[key], int) or data[key] < 1:
                check.add(f"{key} must be a positive integer", key)
                return None
            kwargs[key] = data[key]
    if "pattern" in data:
        if data["pattern"] not in ("dense", "random"):
            check.add("pattern must be 'dense' or 'random'", "pattern")
            return None
        kwargs["pattern"] = data["pattern"]
    if "ensure_local_rank" in data:
        kwargs["ensure_local_rank"] = bool(data["ensure_local_rank"])
    problem = random_coupled_problem(np.random.default_rng(seed), **kwargs)
    return LoadedScenario(
        "static", name, problem=problem, flow_defaults=_load_flow(data, check), seed=seed
    )


def load_scenario(path_or_name: str, seed: int | None = None) -> LoadedScenario:
    """Load a built-in scenario by name or a YAML scenario from a path.

    `seed` overrides the file's own seed for randomized kinds. Raises
    ScenarioError with per-issue line numbers on any validation failure.
    """
    if path_or_name == "static9":
        return LoadedScenario("static", "static9", problem=build_static9())
    if path_or_name == "formation9":
        return LoadedScenario("cbf", "formation9", cbf=build_formation9())

    try:
        with open(path_or_name, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioError(
            path_or_name,
            [ScenarioIssue(None, f"cannot read scenario (not a built-in name {BUILTIN_SCENARIOS}): {exc}")],
        ) from exc

    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        line = None
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            line = mark.line + 1
        raise ScenarioError(path_or_name, [ScenarioIssue(line, f"YAML parse error: {exc}")]) from exc

    if not isinstance(data, dict):
        raise ScenarioError(path_or_name, [ScenarioIssue(1, "scenario document must be a mapping")])

    check = _Checker(_line_map(text))
    kind = data.get("kind")
    if kind not in KINDS:
        check.add(f"kind must be one of {KINDS}, got {kind!r}", "kind")
        raise ScenarioError(path_or_name, check.issues)

    name = data.get("name", path_or_name)
    if kind == "static_opt":
        loaded = _load_static(data, check, name)
    elif kind == "cbf_sim":
        loaded = _load_cbf(data, check, name)
    else:
        loaded = _load_random(data, check, name, seed)

    if check.issues or loaded is None:
        if not check.issues:
            check.add("scenario could not be constructed")
        raise ScenarioError(path_or_name, check.issues)
    return loaded
