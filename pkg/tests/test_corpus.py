"""Corpus slicing, rarity tagging, and the binary/CSV formats."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evtraf.corpus import Corpus, Sample, make_corpus, window_count
from evtraf.errors import CorpusFormatError, ValidationError
from evtraf.lwr import FundamentalDiagram, Incident, Scenario, TrafficField, simulate
from evtraf.roadgraph import chain_graph


def _field(graph, steps, seed=0):
    rng = np.random.default_rng(seed)
    n = len(graph)
    return TrafficField(
        speed=rng.uniform(20.0, 120.0, (n, steps)),
        flow=rng.uniform(100.0, 1800.0, (n, steps)),
        density=rng.uniform(1.0, 100.0, (n, steps)),
        delta_t=graph.delta_t,
        delta_x=graph.delta_x,
    )


def _sample(n=3, width=7, rare=False, sid=0, offset=0, seed=0):
    rng = np.random.default_rng(seed)
    return Sample(
        scenario_id=sid,
        offset=offset,
        rare=rare,
        window_in=4,
        speed=rng.uniform(0, 130, (n, width)).astype("<f4"),
        flow=rng.uniform(0, 2000, (n, width)).astype("<f4"),
    )


@settings(max_examples=120, deadline=None)
@given(
    st.integers(min_value=0, max_value=300),
    st.integers(min_value=1, max_value=50),
    st.integers(min_value=1, max_value=10),
)
def test_window_count_matches_enumeration(steps, window, stride):
    want = len(range(0, steps - window + 1, stride)) if steps >= window else 0
    assert window_count(steps, window, stride) == want


def test_make_corpus_window_arithmetic(chain5):
    fields = [(Scenario(graph=chain5, demand_profile={}), _field(chain5, 40))]
    corp = make_corpus(chain5, fields, window_in=20, window_out=15, stride=1)
    assert len(corp) == 6  # 40 - 35 + 1
    assert [s.offset for s in corp.samples] == [0, 1, 2, 3, 4, 5]
    corp2 = make_corpus(chain5, fields, window_in=20, window_out=15, stride=3)
    assert [s.offset for s in corp2.samples] == [0, 3]


def test_make_corpus_single_window(chain5):
    fields = [(Scenario(graph=chain5, demand_profile={}), _field(chain5, 35))]
    corp = make_corpus(chain5, fields, window_in=20, window_out=15)
    assert len(corp) == 1
    assert corp.samples[0].obs_speed.shape == (5, 20)
    assert corp.samples[0].target_speed.shape == (5, 15)


def test_sample_obs_target_split_views():
    s = _sample(width=7)
    assert np.array_equal(np.hstack([s.obs_speed, s.target_speed]), s.speed)
    assert np.array_equal(np.hstack([s.obs_flow, s.target_flow]), s.flow)


def test_rare_tag_from_incident_overlap(chain5):
    sc = Scenario(
        graph=chain5,
        demand_profile={},
        incidents=[Incident(node="s2", start=10, duration=4, capacity_drop=0.5)],
    )
    corp = make_corpus(chain5, [(sc, _field(chain5, 30))], window_in=4, window_out=4)
    # window [o, o+8) overlaps incident [10, 14) iff o in (2, 14) => 3..13
    for s in corp.samples:
        want = s.offset + 8 > 10 and s.offset < 14
        assert s.rare == want
    assert sum(s.rare for s in corp.samples) == 11


def test_rare_tag_false_without_incidents(chain5):
    sc = Scenario(graph=chain5, demand_profile={})
    corp = make_corpus(chain5, [(sc, _field(chain5, 40))], window_in=4, window_out=4)
    assert not any(s.rare for s in corp.samples)


def test_scenario_ids_are_positions(chain5):
    fields = [
        (Scenario(graph=chain5, demand_profile={}), _field(chain5, 36, seed=k))
        for k in range(3)
    ]
    corp = make_corpus(chain5, fields, window_in=20, window_out=15)
    assert sorted({s.scenario_id for s in corp.samples}) == [0, 1, 2]


def test_make_corpus_validations(chain5):
    fields = [(Scenario(graph=chain5, demand_profile={}), _field(chain5, 40))]
    with pytest.raises(ValidationError):
        make_corpus(chain5, fields, window_in=0, window_out=5)
    with pytest.raises(ValidationError):
        make_corpus(chain5, fields, stride=0)
    other = chain_graph(7)
    with pytest.raises(ValidationError):
        make_corpus(other, fields)


def test_corpus_block_shape_validation():
    bad = _sample(n=3, width=7)
    with pytest.raises(ValidationError):
        Corpus([bad], node_count=4, window_in=4, window_out=3, delta_t=2, delta_x=0.4)
    with pytest.raises(ValidationError):
        Corpus([], 3, 4, 3, 2.0, 0.4, config_hash="tooshort")


def test_binary_roundtrip(tmp_path, chain5):
    sc = Scenario(
        graph=chain5,
        demand_profile={"s0": np.full(45, 900.0)},
        incidents=[Incident(node="s3", start=10, duration=8, capacity_drop=0.9)],
        seed=11,
    )
    field = simulate(sc, 45, FundamentalDiagram())
    corp = make_corpus(
        chain5, [(sc, field)], window_in=20, window_out=15, seed=11,
        config_hash="deadbeef01234567",
    )
    p = tmp_path / "c.evtc"
    corp.save(str(p))
    back = Corpus.load(str(p))
    assert len(back) == len(corp)
    assert back.node_count == 5 and back.window_in == 20 and back.window_out == 15
    assert back.seed == 11 and back.config_hash == "deadbeef01234567"
    assert back.delta_t == 2.0 and back.delta_x == 0.4
    for a, b in zip(corp.samples, back.samples):
        assert a.scenario_id == b.scenario_id and a.offset == b.offset
        assert a.rare == b.rare
        assert np.array_equal(a.speed, b.speed)
        assert np.array_equal(a.flow, b.flow)


def test_save_twice_is_byte_identical(tmp_path, chain5):
    corp = make_corpus(
        chain5,
        [(Scenario(graph=chain5, demand_profile={}), _field(chain5, 40))],
        window_in=4,
        window_out=4,
    )
    p1, p2 = tmp_path / "a.evtc", tmp_path / "b.evtc"
    corp.save(str(p1))
    corp.save(str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "x.evtc"
    p.write_bytes(b"NOPE" + b"\0" * 60)
    with pytest.raises(CorpusFormatError) as exc:
        Corpus.load(str(p))
    assert "magic" in str(exc.value)


def test_load_rejects_bad_version(tmp_path, chain5):
    corp = make_corpus(
        chain5,
        [(Scenario(graph=chain5, demand_profile={}), _field(chain5, 10))],
        window_in=4,
        window_out=4,
    )
    p = tmp_path / "v.evtc"
    corp.save(str(p))
    raw = bytearray(p.read_bytes())
    raw[4] = 99  # version field
    p.write_bytes(bytes(raw))
    with pytest.raises(CorpusFormatError) as exc:
        Corpus.load(str(p))
    assert "version" in str(exc.value)


def test_load_rejects_truncation_and_trailing(tmp_path, chain5):
    corp = make_corpus(
        chain5,
        [(Scenario(graph=chain5, demand_profile={}), _field(chain5, 10))],
        window_in=4,
        window_out=4,
    )
    p = tmp_path / "t.evtc"
    corp.save(str(p))
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) - 7])
    with pytest.raises(CorpusFormatError) as exc:
        Corpus.load(str(p))
    assert "truncated" in str(exc.value)
    p.write_bytes(raw + b"\0")
    with pytest.raises(CorpusFormatError) as exc:
        Corpus.load(str(p))
    assert "trailing" in str(exc.value)
    p.write_bytes(raw[:10])
    with pytest.raises(CorpusFormatError) as exc:
        Corpus.load(str(p))
    assert "header" in str(exc.value)


def test_subset_and_merge(chain5):
    corp = make_corpus(
        chain5,
        [(Scenario(graph=chain5, demand_profile={}), _field(chain5, 42))],
        window_in=4,
        window_out=4,
    )
    sub = corp.subset([0, 2, 4])
    assert [s.offset for s in sub.samples] == [0, 2, 4]
    both = sub.merged_with(corp.subset([1]))
    assert [s.offset for s in both.samples] == [0, 2, 4, 1]
    other = make_corpus(
        chain_graph(5),
        [(Scenario(graph=chain_graph(5), demand_profile={}), _field(chain_graph(5), 12))],
        window_in=5,
        window_out=4,
    )
    with pytest.raises(CorpusFormatError):
        corp.merged_with(other)


def test_csv_export(tmp_path, chain5):
    corp = make_corpus(
        chain5,
        [(Scenario(graph=chain5, demand_profile={}), _field(chain5, 9))],
        window_in=4,
        window_out=4,
        seed=5,
        config_hash="abcd" * 4,
    )
    p = tmp_path / "c.csv"
    corp.to_csv(str(p))
    lines = p.read_text().splitlines()
    assert lines[0].startswith("# evtraf-corpus v1 seed=5 config=abcdabcdabcd")
    assert lines[1] == "sample,scenario,offset,rare,node,step,speed_kmh,flow_vphpl"
    # 2 samples x 5 nodes x 8 steps data rows
    assert len(lines) == 2 + 2 * 5 * 8
    first = lines[2].split(",")
    assert first[:6] == ["0", "0", "0", "0", "0", "0"]
    assert float(first[6]) == pytest.approx(
        float(corp.samples[0].speed[0, 0]), rel=1e-5
    )
