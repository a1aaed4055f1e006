"""Scenario file parsing: includes, sweeps, faults, and error reporting."""

import pytest

from ringshard import scenario
from ringshard.scenario import ParseError, expand, parse_scenario


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_basic_keys_and_comments(tmp_path):
    path = write(tmp_path, "a.scn", """
# a comment line
name = demo
shards = 5          # trailing comment
cross_pct = 12.5
track_cross = true
intra_ms = 2,6
""")
    sc = parse_scenario(path)
    assert sc.name == "demo"
    assert sc.shards == 5
    assert sc.cross_pct == 12.5
    assert sc.track_cross is True
    assert sc.intra_ms == (2.0, 6.0)
    # untouched keys keep defaults
    assert sc.replicas == 4 and sc.seed == 1


def test_include_merges_under_current(tmp_path):
    write(tmp_path, "base.scn", "name = base\nshards = 7\ntxns = 999\n"
                                "fault = crash shard=1 index=3\n")
    path = write(tmp_path, "top.scn",
                 "txns = 50\ninclude = base.scn\nname = top\n"
                 "fault = silent shard=2 index=0 at_ms=100\n")
    sc = parse_scenario(path)
    assert sc.name == "top"  # current file wins
    assert sc.shards == 7  # inherited
    assert sc.txns == 50  # override kept even though include came later
    kinds = [f.kind for f in sc.fault_specs]
    assert kinds == ["crash", "silent"]  # included faults first, accumulated


def test_include_nesting_cap(tmp_path):
    write(tmp_path, "l0.scn", "include = l0.scn\n")
    with pytest.raises(ParseError, match="nesting"):
        parse_scenario(str(tmp_path / "l0.scn"))


def test_sweep_cartesian_expansion(tmp_path):
    path = write(tmp_path, "s.scn", """
name = sweepy
sweep shards = 3,5
sweep seed = 1..3
""")
    combos = expand(parse_scenario(path))
    assert len(combos) == 6
    assert [(c.shards, c.seed) for c in combos] == [
        (3, 1), (3, 2), (3, 3), (5, 1), (5, 2), (5, 3)]
    assert combos[0].name == "sweepy[shards=3][seed=1]"
    assert all(c.sweeps == () for c in combos)


def test_expand_without_sweeps_is_identity(tmp_path):
    path = write(tmp_path, "p.scn", "name = plain\n")
    combos = expand(parse_scenario(path))
    assert len(combos) == 1 and combos[0].name == "plain"


def test_fault_and_partition_lines(tmp_path):
    path = write(tmp_path, "f.scn", """
name = faulty
fault = keep_dark shard=1 index=0 dark=2,3
fault = eat_cross shard=2 index=1 drops=5
partition = start_ms=10 end_ms=90 src_shard=1 dst_shard=2 kinds=forward,execute
""")
    sc = parse_scenario(path)
    kd, ec = sc.fault_specs
    assert kd.kind == "keep_dark" and kd.dark == (2, 3)
    assert ec.kind == "eat_cross" and ec.drops == 5
    (pt,) = sc.partitions
    assert (pt.start_ms, pt.end_ms) == (10, 90)
    assert pt.kinds == ("forward", "execute")
    # specs build into simulator objects
    assert kd.behavior().name == "keep_dark"
    assert pt.window().blocks(50_000, __import__("ringshard.core",
        fromlist=["ReplicaId"]).ReplicaId(1, 0),
        __import__("ringshard.core", fromlist=["ReplicaId"]).ReplicaId(2, 1),
        "forward")


@pytest.mark.parametrize("line,match", [
    ("shards", "expected key = value"),
    ("shards = notanint", "bad value"),
    ("mystery = 5", "unknown key"),
    ("fault = melt shard=1 index=0", "unknown fault kind"),
    ("fault = crash index=0", "fault missing shard"),
    ("fault = crash shard=1 index=0 color=red", "unknown fault keys"),
    ("partition = start_ms=1", "partition missing end_ms"),
    ("sweep txns = ", "empty sweep"),
    ("sweep track_cross = true,false", "cannot sweep"),
    ("intra_ms = 5", "bad value"),
])
def test_parse_errors_carry_line_numbers(tmp_path, line, match):
    path = write(tmp_path, "bad.scn", f"name = x\n{line}\n")
    with pytest.raises(ParseError, match=match) as exc:
        parse_scenario(path)
    assert exc.value.line_no == 2


def test_sweep_name_and_spans(tmp_path):
    path = write(tmp_path, "sp.scn", "name = n\nsweep batch_size = 10,20..22\n")
    combos = expand(parse_scenario(path))
    assert [c.batch_size for c in combos] == [10, 20, 21, 22]


def test_packaged_scenarios_all_parse():
    from ringshard import cli
    names = cli._packaged_scenarios()
    assert "smoke" in names and "byzantine" in names
    for name, path in names.items():
        sc = parse_scenario(path)
        combos = expand(sc)
        assert combos, name
        for combo in combos:
            scenario.build(combo)  # constructible: spec values in range


def test_faults_zero_derives_from_replicas(tmp_path):
    path = write(tmp_path, "auto.scn", "name = a\nfaults = 0\nreplicas = 7\n"
                                       "shards = 1\n")
    sc = parse_scenario(path)
    sim, spec, batches = build_parts(sc)
    assert sim.config.faults == 2  # (7-1)//3


def build_parts(sc):
    return scenario.build(sc)
