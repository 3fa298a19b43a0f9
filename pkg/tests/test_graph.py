import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpgm.errors import CyclicGraph, StructureFormatError, UnknownVariable
from vpgm.graph import (
    FOUR_LATENT_EXAMPLE_EDGES,
    DependencyEdge,
    LatentVariable,
    PgmStructure,
    VerbalizedCpd,
    children_of,
    load_structure,
    parents_of,
    save_structure,
    topological_order,
    validate,
)


@pytest.fixture
def four():
    return PgmStructure.from_edges(FOUR_LATENT_EXAMPLE_EDGES, "science QA")


def codes(result):
    return [v.code for v in result.violations]


class TestValidate:
    def test_four_latent_example_is_ok(self, four):
        res = validate(four)
        assert res.ok
        assert res.warnings == ()

    def test_two_cycle_reported(self):
        s = PgmStructure.from_edges(FOUR_LATENT_EXAMPLE_EDGES + ("Z4->Z3",))
        msgs = validate(s).messages()
        assert "cycle: Z3→Z4→Z3" in msgs

    def test_self_loop(self):
        s = PgmStructure.from_edges(["X->Z1", "Z1->Z1", "Z1->Y"])
        assert "self-loop at Z1" in validate(s).messages()

    def test_every_violation_listed(self):
        s = PgmStructure.from_edges(["X->Z1", "Z1->Z1", "Z2->Z3", "Z3->Z2", "Y->Z1", "Z1->X"])
        got = set(codes(validate(s)))
        assert {"self-loop", "cycle", "observed-has-parent", "output-has-child"} <= got

    def test_unknown_endpoint(self):
        s = PgmStructure((LatentVariable("Z1"),), (DependencyEdge("X", "Z1"), DependencyEdge("Z1", "Z9")))
        res = validate(s)
        assert "unknown-endpoint" in codes(res)
        assert any(v.element == "Z9" for v in res.violations)

    def test_bad_id_and_duplicate(self):
        s = PgmStructure((LatentVariable("Z1"), LatentVariable("Z1"), LatentVariable("Q")), ())
        assert {"duplicate-id", "bad-id"} <= set(codes(validate(s)))

    def test_too_many_latents(self):
        edges = [f"X->Z{i}" for i in range(1, 10)] + [f"Z{i}->Y" for i in range(1, 10)]
        s = PgmStructure.from_edges(edges)
        assert "too-many-latents" in codes(validate(s))
        assert validate(s, max_latents=9).ok

    def test_cpd_parents_must_match_edges(self):
        s = PgmStructure(
            (LatentVariable("Z1"), LatentVariable("Z2")),
            (DependencyEdge("X", "Z1"), DependencyEdge("Z1", "Z2"), DependencyEdge("Z2", "Y")),
            (VerbalizedCpd("Z1", ("X",), "d"), VerbalizedCpd("Z2", ("X",), "d")),
        )
        assert codes(validate(s)) == ["cpd-parents"]

    def test_empty_domain_and_empty_cpd(self):
        s = PgmStructure(
            (LatentVariable("Z1", value_domain=()),),
            (DependencyEdge("X", "Z1"), DependencyEdge("Z1", "Y")),
            (VerbalizedCpd("Z1", ("X",), "  "),),
        )
        assert {"empty-domain", "empty-cpd"} <= set(codes(validate(s)))

    def test_disconnected_latent_is_warning_only(self):
        s = PgmStructure.from_edges(["X->Z1", "Z1->Y", "X->Z2"])
        res = validate(s)
        assert res.ok
        assert "Z2 does not reach Y" in res.warnings

    def test_idempotent(self, four):
        bad = PgmStructure.from_edges(FOUR_LATENT_EXAMPLE_EDGES + ("Z4->Z3", "Z1->Z1"))
        for s in (four, bad):
            assert validate(s) == validate(s)


class TestOrderAndParents:
    def test_topological_order_example(self, four):
        order = topological_order(four)
        assert order == ["X", "Z1", "Z2", "Z3", "Z4", "Y"]
        pos = {v: i for i, v in enumerate(order)}
        assert all(pos[e.parent] < pos[e.child] for e in four.edges)

    @pytest.mark.parametrize("edges", [["X->Y"], []])
    def test_trivial_orders(self, edges):
        assert topological_order(PgmStructure.from_edges(edges)) == ["X", "Y"]

    def test_cycle_raises(self):
        with pytest.raises(CyclicGraph):
            topological_order(PgmStructure.from_edges(["X->Z1", "Z1->Z2", "Z2->Z1", "Z2->Y"]))

    def test_parents(self, four):
        assert parents_of(four, "Z3") == ["X", "Z1", "Z2"]
        assert parents_of(four, "Z1") == ["X"]
        assert parents_of(four, "X") == []
        assert children_of(four, "Z2") == ["Z3", "Z4"]
        with pytest.raises(UnknownVariable):
            parents_of(four, "Z7")

    def test_parents_agree_with_cpds(self, four):
        for cpd in four.cpds:
            assert parents_of(four, cpd.child) == list(cpd.parents)

    def test_order_ties_by_number_not_text(self):
        s = PgmStructure.from_edges(["X->Z10", "X->Z2", "Z10->Y", "Z2->Y"])
        assert topological_order(s) == ["X", "Z2", "Z10", "Y"]


class TestSerialization:
    def test_round_trip(self, four, tmp_path):
        path = tmp_path / "pgm.json"
        save_structure(four, path)
        back = load_structure(path)
        assert back == four
        assert back.structure_id() == four.structure_id()

    def test_file_format_keys(self, four):
        doc = json.loads(four.to_json())
        assert set(doc) == {"task_description", "variables", "edges", "cpds"}
        assert doc["edges"][0] == {"from": "X", "to": "Z1"}

    @pytest.mark.parametrize("text", ["[]", "{\"edges\": 3}", "not json"])
    def test_bad_documents(self, text):
        with pytest.raises(StructureFormatError):
            PgmStructure.from_json(text)


# -- random DAGs against a brute-force oracle ---------------------------------

def _closure(nodes, edges):
    """Transitive closure by repeated squaring over explicit pairs."""
    reach = {(a, b) for a, b in edges}
    while True:
        extra = {(a, d) for (a, b) in reach for (c, d) in reach if b == c} - reach
        if not extra:
            return reach
        reach |= extra


@st.composite
def random_graphs(draw):
    n = draw(st.integers(0, 10))  # latents; with X and Y at most 12 nodes
    nodes = ["X"] + [f"Z{i}" for i in range(1, n + 1)] + ["Y"]
    pairs = [(a, b) for a, b in itertools.permutations(nodes, 2) if a != "Y" and b != "X"]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=min(len(pairs), 30))) if pairs else []
    return nodes, chosen


def _structure(nodes, edges):
    variables = [LatentVariable(v) for v in nodes if v not in ("X", "Y")]
    return PgmStructure(variables, [DependencyEdge(a, b) for a, b in edges])


def check_against_reachability(graph):
    nodes, edges = graph
    s = _structure(nodes, edges)
    reach = _closure(nodes, edges)
    has_cycle = any((v, v) in reach for v in nodes)
    res = validate(s, max_latents=12)
    assert ("cycle" in codes(res)) == has_cycle
    if has_cycle:
        with pytest.raises(CyclicGraph):
            topological_order(s)
        for v in res.violations:
            if v.code == "cycle":
                path = v.message.removeprefix("cycle: ").split("→")
                assert path[0] == path[-1]
                assert all((a, b) in set(edges) for a, b in zip(path, path[1:]))
    else:
        assert res.ok
        order = topological_order(s)
        assert sorted(order) == sorted(nodes)
        assert order[0] == "X" and order[-1] == "Y"
        pos = {v: i for i, v in enumerate(order)}
        for a, b in reach:
            assert pos[a] < pos[b]


@settings(max_examples=300, deadline=None)
@given(random_graphs())
def test_cycle_detection_matches_reachability_oracle(graph):
    check_against_reachability(graph)


@settings(max_examples=100, deadline=None)
@given(random_graphs())
def test_random_structures_round_trip(graph):
    s = _structure(*graph)
    assert PgmStructure.from_json(s.to_json()) == s
