"""Verbalized PGM structures: latent variables, dependency edges and
natural-language CPDs, plus the graph checks that keep them well formed.

Nodes are identified by short ids. ``X`` is the observed input, ``Y`` the
output, and latent variables are ``Z1``, ``Z2``, ... A structure is a
frozen value; build a new one instead of mutating.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import networkx as nx

from .errors import CyclicGraph, StructureFormatError, UnknownVariable

OBSERVED_ID = "X"
OUTPUT_ID = "Y"
DEFAULT_MAX_LATENTS = 8
BINARY_DOMAIN = ("holds", "fails")
VERBALIZED = "verbalized"

_LATENT_RE = re.compile(r"^Z([1-9][0-9]*)$")


def is_latent_id(var_id: str) -> bool:
    return bool(_LATENT_RE.match(var_id))


def id_key(var_id: str) -> tuple:
    """Sort key: X first, then Z1 < Z2 < ... < Z10, then Y, then anything else."""
    if var_id == OBSERVED_ID:
        return (0, 0, "")
    m = _LATENT_RE.match(var_id)
    if m:
        return (1, int(m.group(1)), "")
    if var_id == OUTPUT_ID:
        return (2, 0, "")
    return (3, 0, var_id)


def sort_ids(ids: Iterable[str]) -> list[str]:
    return sorted(ids, key=id_key)


@dataclass(frozen=True)
class LatentVariable:
    id: str
    name: str = ""
    description: str = ""
    # tuple of states, or the string "verbalized" for free-form values
    value_domain: tuple[str, ...] | str = BINARY_DOMAIN

    def to_dict(self) -> dict:
        domain = self.value_domain
        return {
            "id": self.id,
            "name": self.name,
            "description": self.description,
            "value_domain": domain if isinstance(domain, str) else list(domain),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatentVariable":
        if "id" not in d:
            raise StructureFormatError(f"variable entry without id: {d!r}")
        domain = d.get("value_domain", BINARY_DOMAIN)
        if not isinstance(domain, str):
            domain = tuple(str(v) for v in domain)
        return cls(str(d["id"]), str(d.get("name", "")), str(d.get("description", "")), domain)


@dataclass(frozen=True)
class DependencyEdge:
    """``parent -> child``: the child is conditionally dependent on the parent."""

    parent: str
    child: str

    def __str__(self) -> str:
        return f"{self.parent}→{self.child}"

    def to_dict(self) -> dict:
        return {"from": self.parent, "to": self.child}

    @classmethod
    def from_dict(cls, d: dict) -> "DependencyEdge":
        try:
            return cls(str(d["from"]), str(d["to"]))
        except KeyError as exc:
            raise StructureFormatError(f"edge entry missing {exc}: {d!r}") from None

    @classmethod
    def parse(cls, text: str) -> "DependencyEdge":
        """Parse ``"Z1->Z2"`` or ``"Z1→Z2"``."""
        parts = re.split(r"\s*(?:->|→)\s*", text.strip())
        if len(parts) != 2 or not all(parts):
            raise StructureFormatError(f"cannot parse edge {text!r}")
        return cls(parts[0], parts[1])


@dataclass(frozen=True)
class VerbalizedCpd:
    child: str
    parents: tuple[str, ...]
    description: str

    def to_dict(self) -> dict:
        return {"child": self.child, "parents": list(self.parents), "description": self.description}

    @classmethod
    def from_dict(cls, d: dict) -> "VerbalizedCpd":
        if "child" not in d:
            raise StructureFormatError(f"cpd entry without child: {d!r}")
        return cls(str(d["child"]), tuple(str(p) for p in d.get("parents", ())), str(d.get("description", "")))


@dataclass(frozen=True)
class Violation:
    code: str
    element: str
    message: str

    def __str__(self) -> str:
        return self.message


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[Violation, ...] = ()
    warnings: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def messages(self) -> list[str]:
        return [v.message for v in self.violations]


@dataclass(frozen=True)
class PgmStructure:
    """A verbalized PGM. ``variables`` may or may not list X and Y; both
    are always implicitly part of the graph."""

    variables: tuple[LatentVariable, ...]
    edges: tuple[DependencyEdge, ...]
    cpds: tuple[VerbalizedCpd, ...] = ()
    task_description: str = ""
    _index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "cpds", tuple(self.cpds))
        object.__setattr__(self, "_index", {v.id: v for v in self.variables})

    @classmethod
    def from_edges(
        cls,
        edges: Iterable[DependencyEdge | tuple[str, str] | str],
        task_description: str = "",
        names: dict[str, str] | None = None,
    ) -> "PgmStructure":
        """Build a structure from bare edges, with placeholder CPD text."""
        es = []
        for e in edges:
            if isinstance(e, str):
                e = DependencyEdge.parse(e)
            elif not isinstance(e, DependencyEdge):
                e = DependencyEdge(*e)
            es.append(e)
        names = names or {}
        ids = {OBSERVED_ID, OUTPUT_ID}
        for e in es:
            ids.update((e.parent, e.child))
        variables = [LatentVariable(i, names.get(i, i)) for i in sort_ids(ids)]
        cpds = []
        for v in variables:
            if is_latent_id(v.id):
                parents = sort_ids({e.parent for e in es if e.child == v.id})
                cpds.append(VerbalizedCpd(v.id, tuple(parents), f"How {v.id} depends on {', '.join(parents) or 'nothing'}."))
        return cls(tuple(variables), tuple(es), tuple(cpds), task_description)

    # -- node bookkeeping ------------------------------------------------
    @property
    def node_ids(self) -> list[str]:
        ids = {OBSERVED_ID, OUTPUT_ID} | set(self._index)
        return sort_ids(ids)

    @property
    def latent_ids(self) -> list[str]:
        return sort_ids(i for i in self.node_ids if i not in (OBSERVED_ID, OUTPUT_ID))

    def variable(self, var_id: str) -> LatentVariable:
        if var_id in self._index:
            return self._index[var_id]
        if var_id in (OBSERVED_ID, OUTPUT_ID):
            return LatentVariable(var_id, "input" if var_id == OBSERVED_ID else "answer", "", VERBALIZED)
        raise UnknownVariable(var_id)

    def cpd(self, child: str) -> VerbalizedCpd | None:
        for c in self.cpds:
            if c.child == child:
                return c
        return None

    def digraph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(self.node_ids)
        g.add_edges_from((e.parent, e.child) for e in self.edges)
        return g

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "task_description": self.task_description,
            "variables": [v.to_dict() for v in self.variables],
            "edges": [e.to_dict() for e in self.edges],
            "cpds": [c.to_dict() for c in self.cpds],
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "PgmStructure":
        if not isinstance(d, dict):
            raise StructureFormatError("PGM document must be a JSON object")
        for key in ("variables", "edges"):
            if not isinstance(d.get(key), list):
                raise StructureFormatError(f"PGM document needs a list under {key!r}")
        return cls(
            tuple(LatentVariable.from_dict(v) for v in d["variables"]),
            tuple(DependencyEdge.from_dict(e) for e in d["edges"]),
            tuple(VerbalizedCpd.from_dict(c) for c in d.get("cpds", [])),
            str(d.get("task_description", "")),
        )

    @classmethod
    def from_json(cls, text: str) -> "PgmStructure":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise StructureFormatError(f"invalid JSON: {exc}") from None
        return cls.from_dict(d)

    def structure_id(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def load_structure(path) -> PgmStructure:
    with open(path, encoding="utf-8") as fh:
        return PgmStructure.from_json(fh.read())


def save_structure(structure: PgmStructure, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(structure.to_json() + "\n")


def _cycle_in(g: nx.DiGraph, component: set[str]) -> list[str]:
    """One directed cycle inside a strongly connected component, rotated so
    that it starts at the smallest id."""
    start = sort_ids(component)[0]
    sub = g.subgraph(component)
    # BFS back to start through the component gives a shortest cycle
    prev = {start: None}
    frontier = [start]
    while frontier:
        nxt = []
        for u in frontier:
            for v in sort_ids(sub.successors(u)):
                if v == start:
                    path = [u]
                    while prev[path[-1]] is not None:
                        path.append(prev[path[-1]])
                    path.reverse()
                    return path + [start]
                if v not in prev:
                    prev[v] = u
                    nxt.append(v)
        frontier = nxt
    raise AssertionError("component without a cycle")


def validate(structure: PgmStructure, max_latents: int = DEFAULT_MAX_LATENTS) -> ValidationResult:
    """Check every structural invariant and list all violations found.

    Never raises; an invalid structure is reported, not rejected.
    Unreachable latents (not on any X-to-Y path) are warnings only.
    """
    out: list[Violation] = []
    warnings: list[str] = []

    seen = set()
    for v in structure.variables:
        if v.id in seen:
            out.append(Violation("duplicate-id", v.id, f"duplicate variable id {v.id}"))
        seen.add(v.id)
        if not (is_latent_id(v.id) or v.id in (OBSERVED_ID, OUTPUT_ID)):
            out.append(Violation("bad-id", v.id, f"variable id {v.id!r} is not X, Y or Z<n>"))
        if isinstance(v.value_domain, str):
            if v.value_domain != VERBALIZED:
                out.append(Violation("bad-domain", v.id, f"unknown value domain {v.value_domain!r} at {v.id}"))
        elif len(v.value_domain) == 0:
            out.append(Violation("empty-domain", v.id, f"empty value domain at {v.id}"))

    n_latent = sum(1 for i in seen if is_latent_id(i))
    if n_latent > max_latents:
        out.append(Violation("too-many-latents", "", f"{n_latent} latent variables exceed the limit of {max_latents}"))

    known = set(structure.node_ids)
    valid_edges = []
    for e in structure.edges:
        bad = False
        for end in (e.parent, e.child):
            if end not in known:
                out.append(Violation("unknown-endpoint", end, f"edge {e} references unknown variable {end}"))
                bad = True
        if e.parent == e.child:
            out.append(Violation("self-loop", e.parent, f"self-loop at {e.parent}"))
            bad = True
        if not bad:
            valid_edges.append(e)

    g = nx.DiGraph()
    g.add_nodes_from(known)
    g.add_edges_from((e.parent, e.child) for e in valid_edges)

    sccs = [c for c in nx.strongly_connected_components(g) if len(c) > 1]
    for comp in sorted(sccs, key=lambda c: id_key(sort_ids(c)[0])):
        cycle = _cycle_in(g, comp)
        out.append(Violation("cycle", cycle[0], "cycle: " + "→".join(cycle)))

    for p in sort_ids(g.predecessors(OBSERVED_ID)):
        out.append(Violation("observed-has-parent", OBSERVED_ID, f"{OBSERVED_ID} has parent {p}"))
    for c in sort_ids(g.successors(OUTPUT_ID)):
        out.append(Violation("output-has-child", OUTPUT_ID, f"{OUTPUT_ID} has child {c}"))

    cpd_children = set()
    for cpd in structure.cpds:
        if cpd.child in cpd_children:
            out.append(Violation("duplicate-cpd", cpd.child, f"more than one CPD for {cpd.child}"))
        cpd_children.add(cpd.child)
        if cpd.child not in known:
            out.append(Violation("unknown-cpd-child", cpd.child, f"CPD for unknown variable {cpd.child}"))
            continue
        if not cpd.description.strip():
            out.append(Violation("empty-cpd", cpd.child, f"CPD for {cpd.child} has no description"))
        if set(cpd.parents) != set(g.predecessors(cpd.child)) or len(set(cpd.parents)) != len(cpd.parents):
            expected = ", ".join(sort_ids(g.predecessors(cpd.child)))
            out.append(Violation(
                "cpd-parents", cpd.child,
                f"CPD parents of {cpd.child} are [{', '.join(cpd.parents)}], edges give [{expected}]",
            ))

    from_x = nx.descendants(g, OBSERVED_ID)
    to_y = nx.ancestors(g, OUTPUT_ID)
    for z in structure.latent_ids:
        if z not in from_x:
            warnings.append(f"{z} is not reachable from {OBSERVED_ID}")
        if z not in to_y:
            warnings.append(f"{z} does not reach {OUTPUT_ID}")
        if z not in cpd_children:
            warnings.append(f"{z} has no verbalized CPD")

    return ValidationResult(tuple(out), tuple(warnings))


def topological_order(structure: PgmStructure) -> list[str]:
    """Deterministic topological order; ties go to the smaller id, so X
    comes first and Y last."""
    g = structure.digraph()
    try:
        return list(nx.lexicographical_topological_sort(g, key=id_key))
    except nx.NetworkXUnfeasible:
        raise CyclicGraph("structure contains a cycle") from None


def parents_of(structure: PgmStructure, var_id: str) -> list[str]:
    if var_id not in structure.node_ids:
        raise UnknownVariable(var_id)
    return sort_ids({e.parent for e in structure.edges if e.child == var_id})


def children_of(structure: PgmStructure, var_id: str) -> list[str]:
    if var_id not in structure.node_ids:
        raise UnknownVariable(var_id)
    return sort_ids({e.child for e in structure.edges if e.parent == var_id})


FOUR_LATENT_EXAMPLE_EDGES: Sequence[str] = (
    "X->Z1", "X->Z2", "X->Z3", "X->Z4",
    "Z1->Z3", "Z2->Z3", "Z2->Z4", "Z3->Z4", "Z4->Y",
)
