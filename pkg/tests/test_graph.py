import collections
import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgimportance.graph import (
    IN, OUT, SELF, DimensionError, EmptyGraphError, KnowledgeGraph, NodeFeatures, ParseError,
    load_features, load_triples, validate, write_triples,
)
from kgimportance.signals import InputSignal, SignalSet, load_signals
from kgimportance.evalbench.synth import SynthConfig, default_signals, synth_generate

from conftest import random_kg


def write(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def test_parallel_edges_are_kept(tmp_path):
    kg = load_triples(write(tmp_path / "t.tsv", ["a\tP\tb", "a\tP\tb"]))
    assert kg.num_entities == 2 and kg.num_predicates == 1 and kg.num_triples == 2
    assert kg.in_degree[kg.entity_index["b"]] == 2
    ords = [ordinal for _, ordinal, _, _ in kg.neighbors(kg.entity_index["a"])]
    assert len(set(ords)) == 2


def test_neighbor_index_holds_both_directions(tmp_path):
    kg = load_triples(write(tmp_path / "t.tsv", ["a\tP\tb", "b\tQ\ta"]))
    a, b = kg.entity_index["a"], kg.entity_index["b"]
    nb = kg.neighbors(a)
    assert sorted((o, kg.predicate_names[p], d) for o, _, p, d in nb) == [(b, "P", OUT), (b, "Q", IN)]


def test_round_trip_reproduces_line_multiset(tmp_path, rng):
    names = ["x", "y", "z", "w"]
    lines = [f"{rng.choice(names)}\t{rng.choice(['R', 'S'])}\t{rng.choice(names)}" for _ in range(10)]
    kg = load_triples(write(tmp_path / "t.tsv", lines))
    write_triples(kg, tmp_path / "out.tsv")
    again = (tmp_path / "out.tsv").read_text(encoding="utf-8").splitlines()
    assert collections.Counter(again) == collections.Counter(lines)


def test_ids_follow_first_appearance(tmp_path):
    kg = load_triples(write(tmp_path / "t.tsv", ["# comment", "c\tP\ta", "a\tQ\tb"]))
    assert kg.entity_names == ["c", "a", "b"]
    assert kg.predicate_names == ["P", "Q"]


def test_malformed_line_reports_line_number(tmp_path):
    with pytest.raises(ParseError, match=":3"):
        load_triples(write(tmp_path / "t.tsv", ["a\tP\tb", "# c", "a\tP"]))


def test_empty_file(tmp_path):
    with pytest.raises(EmptyGraphError):
        load_triples(write(tmp_path / "t.tsv", ["# nothing"]))


def test_self_predicate_is_reserved(tmp_path):
    with pytest.raises(ParseError):
        load_triples(write(tmp_path / "t.tsv", ["a\tSELF\tb"]))


def test_metadata_types_and_timestamps(tmp_path):
    write(tmp_path / "t.tsv", ["a\tP\tb"])
    write(tmp_path / "m.tsv", ["a\tmovie\t2014-03-01", "b\tperson", "lonely\tperson\t2001-01-01"])
    kg = load_triples(tmp_path / "t.tsv", tmp_path / "m.tsv")
    assert kg.entity_types == ["movie", "person", "person"]
    assert kg.timestamps[0] == dt.date(2014, 3, 1) and kg.timestamps[1] is None
    assert kg.entity_names[2] == "lonely" and kg.in_degree[2] == 0


def test_features_exact_values(tmp_path):
    write(tmp_path / "t.tsv", ["a\tP\tb"])
    kg = load_triples(tmp_path / "t.tsv")
    write(tmp_path / "f.tsv", ["b\t5 6 7 8", "a\t1 2 3 4.5"])
    f = load_features(tmp_path / "f.tsv", kg)
    assert f.dim == 4 and f.warning_count == 0
    np.testing.assert_array_equal(f.matrix, [[1, 2, 3, 4.5], [5, 6, 7, 8]])


def test_missing_entity_gets_zero_row(tmp_path):
    write(tmp_path / "t.tsv", ["a\tP\tb", "b\tP\tc"])
    kg = load_triples(tmp_path / "t.tsv")
    write(tmp_path / "f.tsv", ["a\t1 2", "c\t3 4", "ghost\t9 9"])
    f = load_features(tmp_path / "f.tsv", kg)
    np.testing.assert_array_equal(f.matrix[kg.entity_index["b"]], [0, 0])
    assert f.warning_count == 1
    assert f.skipped == ("ghost",)


def test_permuted_feature_lines_give_same_matrix(tmp_path, rng):
    names = [f"n{i}" for i in range(6)]
    write(tmp_path / "t.tsv", [f"{names[i]}\tP\t{names[i + 1]}" for i in range(5)])
    kg = load_triples(tmp_path / "t.tsv")
    lines = [f"{n}\t" + " ".join(repr(v) for v in rng.normal(size=3).tolist()) for n in names]
    a = load_features(write(tmp_path / "f1.tsv", lines), kg)
    b = load_features(write(tmp_path / "f2.tsv", [lines[k] for k in rng.permutation(6)]), kg)
    np.testing.assert_array_equal(a.matrix, b.matrix)


def test_inconsistent_feature_width(tmp_path):
    write(tmp_path / "t.tsv", ["a\tP\tb"])
    kg = load_triples(tmp_path / "t.tsv")
    with pytest.raises(DimensionError):
        load_features(write(tmp_path / "f.tsv", ["a\t1 2", "b\t1 2 3"]), kg)


def test_validate_consistent_inputs(tmp_path):
    write(tmp_path / "t.tsv", ["a\tP\tb", "b\tP\tc", "c\tP\td"])
    kg = load_triples(tmp_path / "t.tsv")
    feats = NodeFeatures(np.ones((4, 2)))
    sigs = load_signals(write(tmp_path / "s.tsv", ["v\ta\t1", "v\tb\t2", "w\tc\t3"]), kg)
    rep = validate(kg, feats, sigs)
    assert rep["violations"] == []
    assert rep["coverage_percent"] == {"v": 50.0, "w": 25.0}
    assert (rep["num_entities"], rep["num_predicates"], rep["num_triples"]) == (4, 1, 3)


def test_validate_names_unknown_signal_entity(tmp_path):
    write(tmp_path / "t.tsv", ["a\tP\tb"])
    kg = load_triples(tmp_path / "t.tsv")
    sigs = load_signals(write(tmp_path / "s.tsv", ["v\ta\t1", "v\tnobody\t2"]), kg)
    rep = validate(kg, NodeFeatures(np.zeros((2, 1))), sigs)
    assert len(rep["violations"]) == 1
    assert "nobody" in rep["violations"][0]["detail"]


def test_validate_flags_nonfinite_features():
    kg = KnowledgeGraph(["a", "b"], ["P"], [[0, 0, 1]])
    rep = validate(kg, NodeFeatures(np.array([[1.0], [np.nan]])), SignalSet([]))
    assert [v["kind"] for v in rep["violations"]] == ["nonfinite_feature"]


@pytest.mark.parametrize("seed", range(3))
def test_validate_synthetic_has_no_violations(seed):
    ds = synth_generate(SynthConfig(num_nodes=150, num_types=2, seed=seed, num_rebels=1,
                                    signals=default_signals(3, 0.1, 0.3)))
    assert validate(ds.kg, ds.features, ds.signals)["violations"] == []


@st.composite
def graphs(draw):
    n = draw(st.integers(1, 12))
    t = draw(st.integers(0, 30))
    seed = draw(st.integers(0, 2**32 - 1))
    return random_kg(np.random.default_rng(seed), n=n, num_predicates=3, num_triples=t)


@settings(max_examples=60, deadline=None)
@given(graphs())
def test_neighbor_index_invariants(kg):
    e = kg.edges
    assert kg.in_degree.sum() == kg.out_degree.sum() == kg.num_triples
    for i in range(kg.num_entities):
        assert len(kg.neighbors(i)) == kg.in_degree[i] + kg.out_degree[i]
        block = slice(e.offsets[i], e.offsets[i + 1])
        assert np.sum(e.direction[block] == SELF) == 1
    # every triple shows up once as OUT at its subject and once as IN at its object
    for m, (s, p, o) in enumerate(kg.triples.tolist()):
        hits = np.flatnonzero(e.ordinal == m)
        assert sorted((int(e.node[h]), int(e.direction[h])) for h in hits) == sorted([(s, OUT), (o, IN)])
        assert all(e.predicate[h] == p for h in hits)
    assert np.all(e.predicate[e.direction == SELF] == kg.self_predicate)


def test_loading_is_deterministic(tmp_path, rng):
    lines = [f"n{rng.integers(20)}\tP{rng.integers(3)}\tn{rng.integers(20)}" for _ in range(40)]
    path = write(tmp_path / "t.tsv", lines)
    a, b = load_triples(path), load_triples(path)
    assert a.entity_names == b.entity_names
    np.testing.assert_array_equal(a.triples, b.triples)
