import json
import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsracer.depgraph import (
    BEFORE,
    NOTIFY,
    CatalogError,
    CycleError,
    DependencyGraph,
    canonical_ref,
    happens_before,
    load_catalog,
    load_catalog_file,
    notifies,
)
from graph_oracle import closure, dag_mismatches, random_dag

NTP = Path(__file__).parent / "fixtures" / "ntp"


def res(type_, title, **params):
    return {"type": type_, "title": title, "parameters": params}


@pytest.fixture(scope="module")
def ntp():
    return load_catalog_file(NTP / "catalog.json")


def test_subscribe_and_require_collapse_to_notify(ntp):
    assert ntp.label("File[/etc/ntp.conf]", "Service[ntp]") == NOTIFY


def test_quoted_require_reference(ntp):
    assert ntp.label("Package[ntp]", "File[/etc/default/ntp]") == BEFORE


def test_isolated_node():
    g = load_catalog({"resources": [res("File", "/a")]})
    assert g.nodes == {"File[/a]"} and g.edges == set()


def test_before_queries(ntp):
    assert happens_before(ntp, "Package[ntp]", "Service[ntp]")
    assert not happens_before(ntp, "File[/etc/default/ntp]", "Service[ntp]")
    assert not happens_before(ntp, "Service[ntp]", "File[/etc/default/ntp]")
    assert not happens_before(ntp, "Service[ntp]", "Service[ntp]")


def test_notify_queries(ntp):
    assert notifies(ntp, "File[/etc/ntp.conf]", "Service[ntp]")
    assert not notifies(ntp, "Package[ntp]", "Service[ntp]")
    assert not notifies(DependencyGraph(), "A[a]", "B[b]")


def test_containment_orders_class_members(ntp):
    assert happens_before(ntp, "Stage[main]", "Service[ntp]")
    assert not happens_before(ntp, "File[/etc/default/ntp]", "File[/etc/ntp.conf]")


def test_class_relationship_reaches_contents():
    doc = {
        "resources": [
            res("Class", "A"),
            res("Class", "B", require="Class[A]"),
            res("File", "/a"),
            res("Service", "b"),
        ],
        "edges": [{"source": "Class[A]", "target": "File[/a]"}, {"source": "Class[B]", "target": "Service[b]"}],
    }
    assert happens_before(load_catalog(doc), "File[/a]", "Service[b]")
    assert not happens_before(load_catalog(doc, containment=False), "File[/a]", "Service[b]")


def test_unknown_node_is_false_with_diagnostic(ntp):
    before = ntp.stats["unknown-node"]
    assert not happens_before(ntp, "Exec[ghost]", "Service[ntp]")
    assert ntp.stats["unknown-node"] == before + 1


def test_dangling_reference_dropped():
    g = load_catalog({"resources": [res("File", "/a", require=["Package[missing]"])]})
    assert g.edges == set() and g.stats["dangling-edge"] == 1


def test_cycle_rejected():
    doc = {"resources": [res("File", "/a", require="File[/b]"), res("File", "/b", require="File[/a]")]}
    with pytest.raises(CycleError) as exc:
        load_catalog(doc)
    assert exc.value.cycle[0] == exc.value.cycle[-1]
    assert "File[/a]" in str(exc.value) and "File[/b]" in str(exc.value)


def test_missing_resources_rejected(tmp_path):
    with pytest.raises(CatalogError):
        load_catalog({"edges": []})
    bad = tmp_path / "c.json"
    bad.write_text("{not json")
    with pytest.raises(CatalogError):
        load_catalog_file(bad)


def test_data_wrapper_accepted():
    assert load_catalog({"data": {"resources": [res("File", "/a")]}}).nodes == {"File[/a]"}


def test_notify_not_downgraded():
    g = DependencyGraph()
    g.add_edge("A[a]", "B[b]", NOTIFY)
    g.add_edge("A[a]", "B[b]", BEFORE)
    assert g.label("A[a]", "B[b]") == NOTIFY
    with pytest.raises(ValueError):
        g.add_edge("A[a]", "B[b]", "requires")


@pytest.mark.parametrize(
    "raw, ref",
    [
        ('Package["ntp"]', "Package[ntp]"),
        ("file[/etc/x]", "File[/etc/x]"),
        ("apt::source[main]", "Apt::Source[main]"),
        ("Service['ntp']", "Service[ntp]"),
    ],
)
def test_canonical_ref(raw, ref):
    assert canonical_ref(raw) == ref


def test_dot_output(ntp):
    dot = ntp.to_dot()
    assert '"File[/etc/ntp.conf]" -> "Service[ntp]" [label=notify];' in dot
    assert "->" not in DependencyGraph().to_dot()


def test_load_is_deterministic():
    doc = json.loads((NTP / "catalog.json").read_text())
    a, b = load_catalog(doc), load_catalog(json.loads(json.dumps(doc)))
    assert a.edges == b.edges and a.nodes == b.nodes and a.to_dot() == b.to_dot()


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_reachability_matches_closure(seed):
    assert dag_mismatches(seed) == []


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_transitivity_and_notify_soundness(seed):
    nodes, edges = random_dag(random.Random(seed))
    g = DependencyGraph(nodes, edges)
    for a in nodes:
        for b in nodes:
            if g.notifies(a, b):
                assert g.happens_before(a, b)
            for c in nodes:
                if g.happens_before(a, b) and g.happens_before(b, c):
                    assert g.happens_before(a, c)
                if g.notifies(a, b) and g.notifies(b, c):
                    assert g.notifies(a, c)


def test_closure_oracle_sanity():
    edges = [("a", "b", BEFORE), ("b", "c", NOTIFY)]
    assert closure("abc", edges, {BEFORE, NOTIFY}) == {("a", "b"), ("b", "c"), ("a", "c")}
    assert closure("abc", edges, {NOTIFY}) == {("b", "c")}
