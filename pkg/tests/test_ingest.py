import math
import zlib
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fmkr import ingest
from fmkr.ingest import (AlignConfig, FlowRecord, LabelFusionRule, ParseError, SyslogRecord,
                         align_and_fuse, compute_class_weights, split_support_query)
from fmkr.stages import StageLabel


# --- alignment oracle ----------------------------------------------------------

def oracle_fuse(flows, syslogs, window, rule, sdim):
    """All-pairs search: minimal (|dt|, syslog ts, file index) inside the window."""
    out = []
    for i in sorted(range(len(flows)), key=lambda i: flows[i].timestamp):
        f = flows[i]
        cands = [(abs(s.timestamp - f.timestamp), s.timestamp, j)
                 for j, s in enumerate(syslogs) if abs(s.timestamp - f.timestamp) <= window]
        if not cands:
            out.append(ingest.FusedSample(f.timestamp, np.concatenate([f.features, np.zeros(sdim)]),
                                          f.label, False, sdim))
            continue
        s = syslogs[min(cands)[2]]
        label = f.label if rule is LabelFusionRule.FLOW_WINS else max(f.label, s.label)
        out.append(ingest.FusedSample(f.timestamp, np.concatenate([f.features, s.features]),
                                      label, True, sdim))
    return out


def random_instance(rng, max_flows=200, max_sys=200):
    n_f, n_s = rng.integers(0, max_flows + 1), rng.integers(0, max_sys + 1)
    span = rng.uniform(5, 400)
    # half-second grid makes ties and exact-window distances common
    fts = np.round(rng.uniform(0, span, n_f) * 2) / 2
    sts = np.round(rng.uniform(0, span, n_s) * 2) / 2
    flows = [FlowRecord(t, rng.standard_normal(3), StageLabel(rng.integers(5))) for t in fts]
    syslogs = [SyslogRecord(t, [float(j), t], StageLabel(rng.integers(5))) for j, t in enumerate(sts)]
    return flows, syslogs


@pytest.mark.parametrize("rule", list(LabelFusionRule))
def test_alignment_matches_oracle_random(rule):
    rng = np.random.default_rng(42)
    for _ in range(25):
        flows, syslogs = random_instance(rng)
        got = align_and_fuse(flows, syslogs, AlignConfig(2.0, rule), syslog_dim=2)
        want = oracle_fuse(flows, syslogs, 2.0, rule, 2)
        assert got == want


@settings(max_examples=60, deadline=None)
@given(fts=st.lists(st.integers(0, 40), max_size=25), sts=st.lists(st.integers(0, 40), max_size=25),
       window=st.sampled_from([0.5, 1.0, 2.0, 3.0]))
def test_alignment_matches_oracle_property(fts, sts, window):
    flows = [FlowRecord(t / 2, [float(i)], StageLabel(i % 5)) for i, t in enumerate(fts)]
    syslogs = [SyslogRecord(t / 2, [float(j)], StageLabel((j * 3) % 5)) for j, t in enumerate(sts)]
    got = align_and_fuse(flows, syslogs, AlignConfig(window), syslog_dim=1)
    assert got == oracle_fuse(flows, syslogs, window, LabelFusionRule.MAX_SEVERITY, 1)


def test_alignment_hand_example():
    flows = [FlowRecord(10.0, [1.0], "NT"), FlowRecord(5.0, [2.0], "RN"), FlowRecord(20.0, [3.0], "LM")]
    syslogs = [SyslogRecord(11.0, [7.0], "EF"), SyslogRecord(9.0, [8.0], "NT"),
               SyslogRecord(22.0, [9.0], "DE")]
    got = align_and_fuse(flows, syslogs, AlignConfig(2.0), syslog_dim=1)
    assert [s.timestamp for s in got] == [5.0, 10.0, 20.0]
    # t=10: 9.0 and 11.0 tie at 1s; earlier wins -> NT syslog, label max(NT, NT)
    assert got[1].features.tolist() == [1.0, 8.0] and got[1].label is StageLabel.NT
    # t=5: nothing within 2s
    assert got[0].features.tolist() == [2.0, 0.0] and not got[0].syslog_matched
    # t=20: 22.0 sits exactly on the window edge
    assert got[2].label is StageLabel.DE and got[2].syslog_matched
    flow_wins = align_and_fuse(flows, syslogs, AlignConfig(2.0, "flow-wins"), syslog_dim=1)
    assert flow_wins[2].label is StageLabel.LM


def test_alignment_same_timestamp_prefers_file_order():
    flows = [FlowRecord(1.0, [0.0], "NT")]
    syslogs = [SyslogRecord(1.5, [1.0], "RN"), SyslogRecord(1.5, [2.0], "EF")]
    assert align_and_fuse(flows, syslogs)[0].features.tolist() == [0.0, 1.0]


def test_alignment_rejects_bad_config_and_mixed_dims():
    with pytest.raises(ValueError):
        AlignConfig(window=0)
    with pytest.raises(ValueError):
        align_and_fuse([], [SyslogRecord(0, [1.0], "NT"), SyslogRecord(0, [1.0, 2.0], "NT")])


def test_split_routes_every_de_to_query():
    rng = np.random.default_rng(7)
    for _ in range(20):
        flows, syslogs = random_instance(rng, 60, 60)
        ds = split_support_query(align_and_fuse(flows, syslogs, syslog_dim=2))
        assert all(s.label is not StageLabel.DE for s in ds.support)
        assert all(s.label is StageLabel.DE for s in ds.query)
        assert len(ds.support) + len(ds.query) == len(flows)
        assert sum(ds.class_counts.values()) == len(flows)


# --- class weights -------------------------------------------------------------------

def test_class_weights_oracle():
    counts = {StageLabel.NT: 30000, StageLabel.RN: 300, StageLabel.EF: 150,
              StageLabel.LM: 40, StageLabel.DE: 10}
    lam = compute_class_weights(counts, exact=True)
    assert lam == {StageLabel.NT: 1, StageLabel.RN: 100, StageLabel.EF: 200,
                   StageLabel.LM: 750, StageLabel.DE: 3000}
    assert compute_class_weights({"a": 3, "b": 2}, exact=True)["b"] == Fraction(3, 2)
    assert compute_class_weights({"a": 3, "b": 2})["b"] == 1.5


@settings(max_examples=100)
@given(st.dictionaries(st.integers(0, 9), st.integers(1, 10**6), min_size=1))
def test_class_weight_law(counts):
    lam = compute_class_weights(counts, exact=True)
    m_max = max(counts.values())
    assert all(lam[c] * counts[c] == m_max for c in counts)
    assert min(lam.values()) == 1
    floats = compute_class_weights(counts)
    assert all(floats[c] == m_max / counts[c] for c in counts)


@pytest.mark.parametrize("bad", [{}, {"a": 0}, {"a": -1}, {"a": 1.5}])
def test_class_weights_reject_bad_counts(bad):
    with pytest.raises(ValueError):
        compute_class_weights(bad)


# --- flow files ----------------------------------------------------------------------

def _flow_csv(tmp_path, rows, dim=2, header=None):
    header = header or ["ts", *(f"f{i}" for i in range(dim)), "label"]
    p = tmp_path / "flows.csv"
    p.write_text("\n".join([",".join(header), *rows]) + "\n")
    return p


def test_parse_flow_file(tmp_path):
    p = _flow_csv(tmp_path, ["1.5,0.1,0.2,NT", "", "2,3,4,de", "3,5,6,2"])
    recs = ingest.parse_flow_file(p, flow_dim=2)
    assert [r.label for r in recs] == [StageLabel.NT, StageLabel.DE, StageLabel.EF]
    assert recs[1].features.tolist() == [3.0, 4.0]
    assert not recs[0].features.flags.writeable


def test_parse_flow_file_header_any_order(tmp_path):
    p = _flow_csv(tmp_path, ["NT,9,1.0,2.0"], header=["label", "ts", "f1", "f0"])
    (r,) = ingest.parse_flow_file(p, flow_dim=2)
    assert r.timestamp == 9.0 and r.features.tolist() == [2.0, 1.0]


@pytest.mark.parametrize("row,needle", [
    ("1,2,NT", "columns"), ("1,x,2,NT", "non-numeric"), ("1,2,3,XX", "unknown label"),
    ("nan,2,3,NT", "non-finite"),
])
def test_parse_flow_file_errors(tmp_path, row, needle):
    p = _flow_csv(tmp_path, ["0,0,0,NT", row])
    with pytest.raises(ParseError, match=needle) as info:
        ingest.parse_flow_file(p, flow_dim=2)
    assert info.value.line == 3
    lenient = ingest.parse_flow_file(p, flow_dim=2, strict=False)
    assert len(lenient) == 1 and len(lenient.errors) == 1 and lenient.errors[0].line == 3


def test_parse_flow_file_bad_header(tmp_path):
    with pytest.raises(ParseError):
        ingest.parse_flow_file(_flow_csv(tmp_path, [], header=["ts", "f0", "label"]), flow_dim=2)


def test_flow_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    recs = [FlowRecord(float(t), rng.standard_normal(4), StageLabel(i % 5))
            for i, t in enumerate(rng.uniform(0, 1e9, 30))]
    ingest.write_flow_file(tmp_path / "f.csv", recs)
    assert ingest.parse_flow_file(tmp_path / "f.csv", flow_dim=4) == recs


# --- syslog --------------------------------------------------------------------------

def test_featurize_oracle():
    text = "sshd[42]: Failed password for ROOT"
    v = ingest.featurize_syslog_line(text)
    assert v.shape == (14,)
    assert v[0] == len(text) and v[1] == 5
    assert v[2] == pytest.approx(2 / len(text))
    assert v[3] == pytest.approx(5 / len(text))  # F, R, O, O, T
    assert v[4] == 3  # [ ] :
    assert v[5] == 1.0
    buckets = np.zeros(8)
    for tok in text.split():
        buckets[zlib.crc32(tok.encode()) % 8] += 1 / 5
    np.testing.assert_allclose(v[6:], buckets)
    assert v[6:].sum() == pytest.approx(1.0)


def test_featurize_empty_is_zero():
    assert not ingest.featurize_syslog_line("").any()


@pytest.mark.parametrize("token,expected", [
    ("1600000000.5", 1600000000.5),
    ("2020-09-13T12:26:40Z", 1600000000.0),
    ("2020-09-13T12:26:40", 1600000000.0),
    ("2020-09-13T14:26:40+02:00", 1600000000.0),
])
def test_parse_timestamp(token, expected):
    assert ingest.parse_timestamp(token) == expected


def test_parse_timestamp_rejects_garbage():
    with pytest.raises(ValueError):
        ingest.parse_timestamp("yesterday")
    with pytest.raises(ValueError):
        ingest.parse_timestamp("inf")


def test_label_token_not_featurized():
    a = ingest.parse_syslog_line("5 kernel: oops label=NT")
    b = ingest.parse_syslog_line("5 kernel: oops label=DE")
    np.testing.assert_array_equal(a.features, b.features)
    assert a.label is StageLabel.NT and b.label is StageLabel.DE


@pytest.mark.parametrize("line", ["abc text label=NT", "5 text", "5 text label=ZZ", "   "])
def test_parse_syslog_line_errors(line):
    with pytest.raises(ParseError):
        ingest.parse_syslog_line(line)


def test_syslog_file_round_trip_and_lenient(tmp_path):
    lines = [(1.25, "cron[1]: job ok", StageLabel.NT), (2.0, "scp upload done", StageLabel.DE)]
    p = tmp_path / "s.log"
    ingest.write_syslog_file(p, lines)
    recs = ingest.parse_syslog_file(p)
    assert [(r.timestamp, r.label) for r in recs] == [(1.25, StageLabel.NT), (2.0, StageLabel.DE)]
    with open(p, "a") as fh:
        fh.write("broken line\n")
    with pytest.raises(ParseError):
        ingest.parse_syslog_file(p)
    lenient = ingest.parse_syslog_file(p, strict=False)
    assert len(lenient) == 2 and lenient.errors[0].line == 3


def test_fused_file_round_trip(tmp_path, small_samples):
    p = tmp_path / "fused.csv"
    ingest.write_fused_file(p, small_samples)
    back = ingest.read_fused_file(p)
    assert back == small_samples


def test_records_are_immutable():
    r = FlowRecord(0.0, [1.0], "NT")
    with pytest.raises(ValueError):
        r.features[0] = 2.0
    with pytest.raises(Exception):
        r.timestamp = 1.0
    with pytest.raises(ValueError):
        FlowRecord(math.inf, [1.0], "NT")


def test_dataset_arrays(small_ds):
    X, y = small_ds.arrays("query")
    assert (y == int(StageLabel.DE)).all() and X.shape == (len(small_ds.query), small_ds.feature_dim)
    Xa, _ = small_ds.arrays("all")
    assert len(Xa) == len(small_ds.support) + len(small_ds.query)
