"""End-to-end CLI flows, exit codes, config files, reproducibility."""

import math

import numpy as np
import pytest

from evtraf.checkpoint import read_checkpoint
from evtraf.cli import main
from evtraf.corpus import Corpus
from evtraf.distill import DistillReport

GRAPH = """\
[nodes]
s0 0.4 2
s1 0.4 2
s2 0.4 2
s3 0.4 2
s4 0.4 2
s5 0.4 2
[edges]
s0 s1
s1 s2
s2 s3
s3 s4
s4 s5
"""

SIM_ARGS = [
    "--horizon", "16", "--incident-horizon", "16",
    "--recurrent", "1", "--freeflow", "1", "--incidents", "1",
    "--window-in", "6", "--window-out", "4", "--stride", "2",
    "--seed", "3",
]

TRAIN_ARGS = [
    "--hidden-dim", "8", "--kernel-dim", "4", "--feat-hidden", "4",
    "--epochs", "2", "--batch-size", "8", "--seed", "3",
]


@pytest.fixture(scope="module")
def arts(tmp_path_factory):
    """One tiny simulate -> train pipeline shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    graph = root / "net.graph"
    graph.write_text(GRAPH)
    corpus = root / "corpus.bin"
    ckpt = root / "model.ckpt"
    log = root / "train.csv"
    assert main(["simulate", "--graph", str(graph), "--out", str(corpus)]
                + SIM_ARGS) == 0
    assert main(["train", "--graph", str(graph), "--corpus", str(corpus),
                 "--out", str(ckpt), "--log", str(log)] + TRAIN_ARGS) == 0
    return {"root": root, "graph": graph, "corpus": corpus,
            "ckpt": ckpt, "log": log}


def test_simulate_corpus_contents(arts):
    corp = Corpus.load(arts["corpus"])
    assert corp.node_count == 6
    assert corp.window_in == 6 and corp.window_out == 4
    # 3 scenarios x 4 windows of 16 steps at stride 2
    assert len(corp) == 12
    assert any(s.rare for s in corp.samples)


def test_simulate_is_reproducible(arts, tmp_path):
    out2 = tmp_path / "again.bin"
    assert main(["simulate", "--graph", str(arts["graph"]),
                 "--out", str(out2)] + SIM_ARGS) == 0
    assert out2.read_bytes() == arts["corpus"].read_bytes()


def test_simulate_csv_out(arts, tmp_path):
    out = tmp_path / "c.bin"
    csv = tmp_path / "c.csv"
    assert main(["simulate", "--graph", str(arts["graph"]), "--out", str(out),
                 "--csv-out", str(csv)] + SIM_ARGS) == 0
    header = csv.read_text().splitlines()[1]
    assert header.split(",")[:3] == ["sample", "scenario", "offset"]


def test_train_checkpoint_header(arts):
    header, blocks = read_checkpoint(arts["ckpt"])
    assert header["nodes"] == 6
    assert header["seed"] == 3
    assert header["train_config"]["epochs"] == 2
    assert header["model_config"]["hidden_dim"] == 8
    assert header["model_config"]["encoder_steps"] == 6
    # derived degrees: 18 and 120 km/h waves on 0.4 km cells at 2 min
    assert header["model_config"]["degree_speed"] == 2
    assert header["model_config"]["degree_flow"] == 11
    assert header["iteration"] == 2 * math.ceil(12 / 8)
    assert any(k.startswith("adam_m.") for k in blocks)


def test_train_log_schedule_identity(arts):
    lines = arts["log"].read_text().splitlines()
    assert lines[1] == "epoch,iteration,loss,sampling_p"
    for row in lines[2:]:
        _, it, _, p = row.split(",")
        assert float(p) == math.exp(-1.25e-4 * int(it))


def test_train_is_reproducible(arts, tmp_path):
    out2 = tmp_path / "again.ckpt"
    assert main(["train", "--graph", str(arts["graph"]),
                 "--corpus", str(arts["corpus"]), "--out", str(out2)]
                + TRAIN_ARGS) == 0
    assert out2.read_bytes() == arts["ckpt"].read_bytes()


def test_train_resume_continues(arts, tmp_path):
    out2 = tmp_path / "more.ckpt"
    assert main(["train", "--graph", str(arts["graph"]),
                 "--corpus", str(arts["corpus"]), "--out", str(out2),
                 "--resume", str(arts["ckpt"]), "--epochs", "1",
                 "--seed", "3"]) == 0
    h1, _ = read_checkpoint(arts["ckpt"])
    h2, _ = read_checkpoint(out2)
    assert h2["iteration"] == h1["iteration"] + math.ceil(12 / 16)
    assert h2["model_config"] == h1["model_config"]


def test_evaluate_writes_metrics_and_calibration(arts, tmp_path):
    metrics = tmp_path / "metrics.csv"
    cal = tmp_path / "cal.csv"
    assert main(["evaluate", "--graph", str(arts["graph"]),
                 "--corpus", str(arts["corpus"]),
                 "--checkpoint", str(arts["ckpt"]),
                 "--out", str(metrics), "--calibration-out", str(cal)]) == 0
    rows = dict(
        line.split(",") for line in metrics.read_text().splitlines()[2:]
    )
    assert set(rows) == {
        "speed_mae", "speed_rmse", "speed_mape", "speed_weighted_mae",
        "flow_mae", "flow_rmse", "flow_mape",
    }
    cal_lines = cal.read_text().splitlines()
    assert [ln.split(",")[0] for ln in cal_lines[2:]] == ["1", "2", "3", "4"]


def test_distill_report_filter_retrain(arts, tmp_path):
    report = tmp_path / "report.txt"
    filtered = tmp_path / "kept.bin"
    retrained = tmp_path / "retrained.ckpt"
    assert main(["distill", "--graph", str(arts["graph"]),
                 "--corpus", str(arts["corpus"]),
                 "--checkpoint", str(arts["ckpt"]),
                 "--report", str(report), "--pct", "50",
                 "--filtered-out", str(filtered),
                 "--retrain", "--retrain-out", str(retrained)]) == 0
    rep = DistillReport.load(report)
    assert rep.mode == "remove-lowest"
    assert len(rep.kept) == 6 and len(rep.removed) == 6
    kept = Corpus.load(filtered)
    assert len(kept) == 6
    h, _ = read_checkpoint(retrained)
    assert h["train_config"]["epochs"] == 2


def test_distill_retrain_requires_out(arts, tmp_path):
    assert main(["distill", "--graph", str(arts["graph"]),
                 "--corpus", str(arts["corpus"]),
                 "--checkpoint", str(arts["ckpt"]),
                 "--report", str(tmp_path / "r.txt"), "--retrain"]) == 1


def test_stream_with_report_and_merge(arts, tmp_path):
    report = tmp_path / "report.txt"
    assert main(["distill", "--graph", str(arts["graph"]),
                 "--corpus", str(arts["corpus"]),
                 "--checkpoint", str(arts["ckpt"]),
                 "--report", str(report), "--pct", "50",
                 "--filtered-out", str(tmp_path / "base.bin")]) == 0
    out = tmp_path / "kept.bin"
    slog = tmp_path / "stream.csv"
    assert main(["stream", "--graph", str(arts["graph"]),
                 "--incoming", str(arts["corpus"]),
                 "--checkpoint", str(arts["ckpt"]),
                 "--out", str(out), "--report", str(report),
                 "--log", str(slog), "--window", "5"]) == 0
    kept = Corpus.load(out)
    thr = DistillReport.load(report).threshold
    assert 0 < len(kept) <= 12
    log_lines = slog.read_text().splitlines()[2:]
    assert sum(int(ln.split(",")[1]) for ln in log_lines) == 12
    # merged output grows the base corpus by the kept samples
    merged = tmp_path / "merged.bin"
    assert main(["stream", "--graph", str(arts["graph"]),
                 "--incoming", str(arts["corpus"]),
                 "--checkpoint", str(arts["ckpt"]),
                 "--out", str(merged), "--threshold", str(thr),
                 "--merge-with", str(tmp_path / "base.bin")]) == 0
    base = Corpus.load(tmp_path / "base.bin")
    assert len(Corpus.load(merged)) == len(base) + len(kept)


def test_stream_threshold_xor_report(arts, tmp_path):
    base = ["stream", "--graph", str(arts["graph"]),
            "--incoming", str(arts["corpus"]),
            "--checkpoint", str(arts["ckpt"]), "--out", str(tmp_path / "o.bin")]
    assert main(base) == 1
    assert main(base + ["--threshold", "1.0",
                        "--report", str(tmp_path / "r.txt")]) == 1


def test_config_file_equivalence_and_precedence(arts, tmp_path):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text(
        "# tiny corpus\n"
        "graph = {g}\n"
        "horizon = 16\nincident-horizon = 16\n"
        "recurrent = 1\nfreeflow = 1\nincidents = 1\n"
        "window-in = 6\nwindow-out = 4\nstride = 2\n"
        "seed = 3\n".format(g=arts["graph"])
    )
    out = tmp_path / "fromcfg.bin"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    assert out.read_bytes() == arts["corpus"].read_bytes()
    # an explicit flag beats the file
    out2 = tmp_path / "override.bin"
    assert main(["simulate", "--config", str(cfg), "--out", str(out2),
                 "--seed", "4"]) == 0
    assert out2.read_bytes() != arts["corpus"].read_bytes()


def test_unknown_config_key(arts, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("graph = x\nwarp_speed = 9\n")
    assert main(["simulate", "--config", str(cfg),
                 "--out", str(tmp_path / "o.bin")]) == 1


def test_usage_errors_exit_1(tmp_path):
    assert main([]) == 1
    assert main(["teleport"]) == 1
    assert main(["simulate", "--graph", "g"]) == 1  # missing --out


def test_missing_files_exit_2(arts, tmp_path):
    assert main(["simulate", "--graph", str(tmp_path / "absent.graph"),
                 "--out", str(tmp_path / "o.bin")]) == 2
    assert main(["train", "--graph", str(arts["graph"]),
                 "--corpus", str(tmp_path / "absent.bin"),
                 "--out", str(tmp_path / "o.ckpt")]) == 2


def test_malformed_graph_exits_2(tmp_path):
    bad = tmp_path / "bad.graph"
    bad.write_text("[nodes]\na 0.4 1\na 0.4 1\n")
    assert main(["simulate", "--graph", str(bad),
                 "--out", str(tmp_path / "o.bin")] + SIM_ARGS) == 2


def test_window_mismatch_exits_2(arts, tmp_path):
    other = tmp_path / "other.bin"
    assert main(["simulate", "--graph", str(arts["graph"]), "--out", str(other),
                 "--horizon", "16", "--incident-horizon", "16",
                 "--recurrent", "1", "--freeflow", "1", "--incidents", "1",
                 "--window-in", "7", "--window-out", "4", "--stride", "2"]) == 0
    assert main(["evaluate", "--graph", str(arts["graph"]),
                 "--corpus", str(other), "--checkpoint", str(arts["ckpt"]),
                 "--out", str(tmp_path / "m.csv")]) == 2


def test_non_finite_corpus_exits_3(arts, tmp_path):
    corp = Corpus.load(arts["corpus"])
    corp.samples[0].speed[0, -1] = np.nan
    poisoned = tmp_path / "poisoned.bin"
    corp.save(poisoned)
    assert main(["train", "--graph", str(arts["graph"]),
                 "--corpus", str(poisoned), "--out", str(tmp_path / "o.ckpt"),
                 "--epochs", "1", "--batch-size", "64"] + TRAIN_ARGS[:6]) == 3
