import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsracer.block_tagger import BOTTOM, BlockID
from fsracer.depgraph import BEFORE, NOTIFY, DependencyGraph
from fsracer.detector import (
    DEFAULT_IGNORE,
    MN,
    MOR,
    detect,
    ignore_list,
    is_ignored,
    is_service,
)
from fsracer.fstrace.syntax import Effect
from graph_oracle import detector_mismatch, random_instance

P, C, X = Effect.PRODUCED, Effect.CONSUMED, Effect.EXPUNGED
CONF = BlockID("File[/etc/default/ntp]", 2)
SVC = BlockID("Service[ntp]", 3)


def ntp_graph(extra=()):
    g = DependencyGraph(
        ["Package[ntp]", "File[/etc/ntp.conf]", "File[/etc/default/ntp]", "Service[ntp]"],
        [
            ("Package[ntp]", "File[/etc/ntp.conf]", BEFORE),
            ("Package[ntp]", "File[/etc/default/ntp]", BEFORE),
            ("File[/etc/ntp.conf]", "Service[ntp]", NOTIFY),
        ],
    )
    for e in extra:
        g.add_edge(*e)
    return g


RHO = {"/etc/default/ntp": {(P, CONF), (C, SVC)}, "/usr/sbin/ntpd": {(C, SVC)}}


def test_ntp_scenario():
    reports = detect(RHO, ntp_graph())
    assert [(r.kind, r.producer, r.consumer, r.paths) for r in reports] == [
        (MN, "File[/etc/default/ntp]", "Service[ntp]", ["/etc/default/ntp"]),
        (MOR, "File[/etc/default/ntp]", "Service[ntp]", ["/etc/default/ntp"]),
    ]
    assert "missing ordering" in reports[0].detail and "missing notifier" in reports[1].detail


def test_notify_edge_clears_both():
    assert detect(RHO, ntp_graph([("File[/etc/default/ntp]", "Service[ntp]", NOTIFY)])) == []


def test_before_edge_leaves_mn():
    reports = detect(RHO, ntp_graph([("File[/etc/default/ntp]", "Service[ntp]", BEFORE)]))
    assert [r.kind for r in reports] == [MN]


def test_empty_rho():
    assert detect({}, ntp_graph()) == []


@pytest.mark.parametrize(
    "name, expected",
    [("Service[ntp]", True), ("File[/etc/ntp.conf]", False), ("Exec[download]", False), (BOTTOM, False)],
)
def test_is_service(name, expected):
    assert is_service(name) is expected


def test_unknown_node_flagged():
    rho = {"/tmp/x": {(P, BlockID("Exec[dl]", 1)), (C, BlockID("Package[p]", 2))}}
    (r,) = detect(rho, DependencyGraph())
    assert r.kind == MOR and "unknown-node" in r.detail


def test_bottom_and_same_block_skipped():
    b = BlockID("File[/a]", 1)
    rho = {"/a": {(P, b), (C, b), (P, BOTTOM), (C, BOTTOM)}}
    assert detect(rho, DependencyGraph()) == []


def test_paths_merged_and_sorted():
    a, s = BlockID("File[/a]", 1), BlockID("Service[s]", 2)
    rho = {p: {(P, a), (C, s)} for p in ("/z", "/b", "/m")}
    reports = detect(rho, DependencyGraph(["File[/a]", "Service[s]"]))
    assert {r.kind for r in reports} == {MOR, MN}
    assert all(r.paths == ["/b", "/m", "/z"] for r in reports)


def test_expunge_switch():
    rho = {"/f": {(X, BlockID("Exec[rm]", 1)), (C, BlockID("File[/f]", 2))}}
    assert len(detect(rho, DependencyGraph())) == 1
    assert detect(rho, DependencyGraph(), expunge_as_produce=False) == []


def test_ignore_prefixes():
    rho = {
        "/proc/self/stat": {(P, BlockID("A[a]", 1)), (C, BlockID("B[b]", 2))},
        "/var/lib/puppet/state": {(P, BlockID("A[a]", 1)), (C, BlockID("B[b]", 2))},
        "/procfs": {(P, BlockID("A[a]", 1)), (C, BlockID("B[b]", 2))},
    }
    (r,) = detect(rho, DependencyGraph(), ignore=ignore_list())
    assert r.paths == ["/procfs"]
    assert is_ignored("/run/lock", DEFAULT_IGNORE)
    assert not is_ignored("/run", DEFAULT_IGNORE)
    assert is_ignored("/var/lib/puppet", DEFAULT_IGNORE)


def test_env_ignore(monkeypatch):
    monkeypatch.setenv("FSRACER_IGNORE", "/srv/cache:/tmp/scratch/")
    ig = ignore_list()
    assert is_ignored("/srv/cache/x", ig) and is_ignored("/tmp/scratch/y", ig)
    assert ignore_list(defaults=False) == ("/srv/cache", "/tmp/scratch/")


def test_render_and_json():
    (mn, mor) = detect(RHO, ntp_graph())
    assert mor.render().startswith("[MOR] File[/etc/default/ntp] <-> Service[ntp]")
    assert "path: /etc/default/ntp" in mn.render()
    assert mn.to_json()["kind"] == MN and mn.to_json()["paths"] == ["/etc/default/ntp"]


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_literal_algorithm(seed):
    assert detector_mismatch(seed) is None


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.data())
def test_monotone_in_edges(seed, data):
    rho, g = random_instance(random.Random(seed))
    nodes = sorted(g.nodes)
    if len(nodes) < 2:
        return
    before = {r.key() + (p,) for r in detect(rho, g) for p in r.paths}
    i = data.draw(st.integers(0, len(nodes) - 2))
    j = data.draw(st.integers(i + 1, len(nodes) - 1))
    # random_dag orders nodes by index, so a forward edge keeps the graph acyclic
    order = {n: int(n.split("[n")[1].rstrip("]")) if "[n" in n else -1 for n in nodes}
    a, b = sorted((nodes[i], nodes[j]), key=order.get)
    if order[a] < 0:
        return
    g.add_edge(a, b, data.draw(st.sampled_from([BEFORE, NOTIFY])))
    assert g.find_cycle() is None
    after = {r.key() + (p,) for r in detect(rho, g) for p in r.paths}
    assert after <= before


@settings(max_examples=100)
@given(st.sampled_from(["File[/a]", "Exec[e]"]), st.sampled_from(["File[/b]", "Package[p]"]))
def test_mor_symmetric(x, y):
    g = DependencyGraph([x, y])
    fwd = detect({"/f": {(P, BlockID(x, 1)), (C, BlockID(y, 2))}}, g)
    rev = detect({"/f": {(P, BlockID(y, 2)), (C, BlockID(x, 1))}}, g)
    assert [r.kind for r in fwd] == [r.kind for r in rev] == [MOR]
