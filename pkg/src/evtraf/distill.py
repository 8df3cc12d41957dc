"""Knowledge-uncertainty scoring, dataset distillation, stream filtering.

A trained evidential forecaster assigns every sample a knowledge
uncertainty: the square root of the mean epistemic variance over all
nodes and forecast steps, in km/h.  Frequent patterns earn low scores,
rare ones high scores.  Distillation keeps or removes a percentile
slice of the ranking; the same threshold then filters a stream of
incoming samples.  Model quality is compared with a congestion-weighted
MAE so that sparse congested points keep their influence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus
from .errors import ValidationError
from .evidential import decompose_arrays

CONGESTION_SPEED = 60.0  # km/h; below this a point counts as congested
CONGESTION_WEIGHT = 4.0
MAPE_MIN_TRUE = 1.0  # km/h; slower true points are excluded from MAPE


@dataclass(frozen=True)
class SampleScore:
    sample_id: int
    ku_mean: float  # km/h
    congested: bool


def score_samples(model, corpus: Corpus, batch_size=64):
    """Knowledge-uncertainty score per sample, in corpus order.

    ku_mean is sqrt(mean knowledge variance over nodes x steps), in
    km/h; `congested` flags samples whose true target dips below the
    congestion speed.
    """
    if corpus.node_count != model.n:
        raise ValidationError(
            f"corpus has {corpus.node_count} nodes, model expects {model.n}"
        )
    pred = model.predict(corpus.samples, batch_size=batch_size)
    _, know, _ = decompose_arrays(pred["nu"], pred["alpha"], pred["beta"])
    know = know * model.cfg.speed_scale**2
    scores = []
    for i, sample in enumerate(corpus.samples):
        ku = float(np.sqrt(know[i].mean()))
        congested = bool((sample.target_speed < CONGESTION_SPEED).any())
        scores.append(SampleScore(sample_id=i, ku_mean=ku, congested=congested))
    return scores


def ranking(scores):
    """Scores sorted by ascending ku_mean, ties broken by sample id."""
    return sorted(scores, key=lambda s: (s.ku_mean, s.sample_id))


def threshold_at_percentile(scores, percentile):
    """Linear-interpolation percentile of the ku scores."""
    if not scores:
        raise ValidationError("cannot take a percentile of zero scores")
    if not 0.0 <= percentile <= 100.0:
        raise ValidationError(f"percentile must be in [0, 100], got {percentile}")
    values = np.array([s.ku_mean for s in scores], dtype=np.float64)
    return float(np.percentile(values, percentile, method="linear"))


def split_preserve_remove(scores, percentile, mode):
    """Rank-based split at a percentile of the scored samples.

    ``remove-lowest`` drops the lowest `percentile` percent of samples
    by ku rank (ties broken by id) and keeps the rest;
    ``preserve-lowest`` keeps exactly that slice instead.  Returns
    (kept_ids, removed_ids), each ascending by id.
    """
    if mode not in ("preserve-lowest", "remove-lowest"):
        raise ValidationError(f"unknown split mode {mode!r}")
    if not 0.0 <= percentile <= 100.0:
        raise ValidationError(f"percentile must be in [0, 100], got {percentile}")
    ordered = ranking(scores)
    cut = int(round(len(ordered) * percentile / 100.0))
    lowest = [s.sample_id for s in ordered[:cut]]
    rest = [s.sample_id for s in ordered[cut:]]
    if mode == "remove-lowest":
        kept, removed = rest, lowest
    else:
        kept, removed = lowest, rest
    return sorted(kept), sorted(removed)


@dataclass
class DistillReport:
    """Everything needed to reproduce and reuse one distillation pass."""

    mode: str
    percentile: float
    threshold: float
    scores: list  # SampleScore, ascending ku (ties by id)
    kept: list
    removed: list
    seed: int = 0
    config_hash: str = "0" * 16

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("# evtraf-distill-report v1\n")
            fh.write(f"seed = {self.seed}\n")
            fh.write(f"config_hash = {self.config_hash}\n")
            fh.write(f"mode = {self.mode}\n")
            fh.write(f"percentile = {self.percentile:.10g}\n")
            fh.write(f"threshold_kmh = {self.threshold:.10g}\n")
            fh.write(f"n_total = {len(self.scores)}\n")
            fh.write(f"n_kept = {len(self.kept)}\n")
            fh.write(f"n_removed = {len(self.removed)}\n")
            fh.write("[ranking]\n")
            for s in self.scores:
                fh.write(f"{s.sample_id} {s.ku_mean:.10g} {int(s.congested)}\n")
            fh.write("[kept]\n")
            fh.write(" ".join(str(i) for i in self.kept) + "\n")
            fh.write("[removed]\n")
            fh.write(" ".join(str(i) for i in self.removed) + "\n")

    @classmethod
    def load(cls, path):
        meta = {}
        section = None
        scores, kept, removed = [], [], []
        with open(path, "r", encoding="utf-8") as fh:
            for raw in fh:
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if line in ("[ranking]", "[kept]", "[removed]"):
                    section = line
                    continue
                if section is None:
                    key, _, value = line.partition("=")
                    meta[key.strip()] = value.strip()
                elif section == "[ranking]":
                    sid, ku, cong = line.split()
                    scores.append(
                        SampleScore(int(sid), float(ku), bool(int(cong)))
                    )
                elif section == "[kept]":
                    kept.extend(int(v) for v in line.split())
                else:
                    removed.extend(int(v) for v in line.split())
        try:
            return cls(
                mode=meta["mode"],
                percentile=float(meta["percentile"]),
                threshold=float(meta["threshold_kmh"]),
                scores=scores,
                kept=kept,
                removed=removed,
                seed=int(meta.get("seed", 0)),
                config_hash=meta.get("config_hash", "0" * 16),
            )
        except KeyError as exc:
            raise ValidationError(f"{path}: missing report field {exc}") from None


def build_report(scores, percentile, mode, seed=0, config_hash="0" * 16):
    kept, removed = split_preserve_remove(scores, percentile, mode)
    return DistillReport(
        mode=mode,
        percentile=percentile,
        threshold=threshold_at_percentile(scores, percentile),
        scores=ranking(scores),
        kept=kept,
        removed=removed,
        seed=seed,
        config_hash=config_hash,
    )


def stream_filter(model, corpus: Corpus, threshold, window=100, batch_size=64):
    """Keep incoming samples whose knowledge uncertainty exceeds the
    threshold.

    Samples with non-finite payloads are skipped (counted, not kept).
    Returns (kept_indices, acceptance_log) where the log rows are
    (window_index, samples_in, samples_kept, acceptance_rate) and the
    samples_in column sums to the incoming corpus size.
    """
    if window < 1:
        raise ValidationError(f"window must be >= 1, got {window}")
    valid = []
    malformed = set()
    for i, s in enumerate(corpus.samples):
        if np.isfinite(s.speed).all() and np.isfinite(s.flow).all():
            valid.append(i)
        else:
            malformed.add(i)
    score_by_id = {}
    if valid:
        sub = corpus.subset(valid)
        for pos, sc in enumerate(score_samples(model, sub, batch_size=batch_size)):
            score_by_id[valid[pos]] = sc.ku_mean
    kept = []
    log = []
    total = len(corpus)
    for w_start in range(0, total, window):
        w_ids = range(w_start, min(w_start + window, total))
        n_in = len(w_ids)
        n_kept = 0
        for i in w_ids:
            if i in malformed:
                continue
            if score_by_id[i] > threshold:
                kept.append(i)
                n_kept += 1
        log.append((w_start // window, n_in, n_kept, n_kept / n_in))
    return kept, log


def write_acceptance_log(path, log, seed=0, config_hash="0" * 16):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# evtraf-stream-log v1 seed={seed} config={config_hash}\n")
        fh.write("window,samples_in,samples_kept,acceptance_rate\n")
        for row in log:
            fh.write(f"{row[0]},{row[1]},{row[2]},{row[3]:.10g}\n")


# -- error metrics -----------------------------------------------------------


def mae(pred, true):
    return float(np.mean(np.abs(np.asarray(pred) - np.asarray(true))))


def rmse(pred, true):
    d = np.asarray(pred) - np.asarray(true)
    return float(np.sqrt(np.mean(d * d)))


def mape(pred, true, min_true=MAPE_MIN_TRUE):
    """Mean absolute percentage error, excluding near-zero true values."""
    pred, true = np.asarray(pred), np.asarray(true)
    keep = np.abs(true) >= min_true
    if not keep.any():
        return float("nan")
    return float(np.mean(np.abs(pred[keep] - true[keep]) / np.abs(true[keep])))


def weighted_mae(pred, true, cutoff=CONGESTION_SPEED, weight=CONGESTION_WEIGHT):
    """MAE with congested points (true < cutoff) weighted `weight` times."""
    pred, true = np.asarray(pred), np.asarray(true)
    coef = np.where(true < cutoff, weight, 1.0)
    return float(np.mean(coef * np.abs(pred - true)))


def evaluate_predictions(pred_speed, true_speed, pred_flow, true_flow):
    """Standard metric table for a prediction set."""
    return {
        "speed_mae": mae(pred_speed, true_speed),
        "speed_rmse": rmse(pred_speed, true_speed),
        "speed_mape": mape(pred_speed, true_speed),
        "speed_weighted_mae": weighted_mae(pred_speed, true_speed),
        "flow_mae": mae(pred_flow, true_flow),
        "flow_rmse": rmse(pred_flow, true_flow),
        "flow_mape": mape(pred_flow, true_flow),
    }


@dataclass
class CalibrationRow:
    horizon: int
    rmse: float
    data_std: float
    knowledge_std: float
    total_std: float
    data_var: float
    knowledge_var: float
    total_var: float


def calibration_report(model, corpus: Corpus, batch_size=64):
    """Per-horizon speed RMSE next to the predicted uncertainty bands.

    Variances are converted to km/h units.  The std columns are means of
    per-point square roots; the var columns are means of variances, with
    total_var the elementwise sum of the other two before the root.
    """
    pred = model.predict(corpus.samples, batch_size=batch_size)
    true = np.stack([s.target_speed for s in corpus.samples]).astype(np.float64)
    data, know, total = decompose_arrays(pred["nu"], pred["alpha"], pred["beta"])
    s2 = model.cfg.speed_scale**2
    data, know, total = data * s2, know * s2, total * s2
    rows = []
    for k in range(corpus.window_out):
        err = pred["speed"][:, :, k] - true[:, :, k]
        rows.append(
            CalibrationRow(
                horizon=k + 1,
                rmse=float(np.sqrt(np.mean(err * err))),
                data_std=float(np.mean(np.sqrt(data[:, :, k]))),
                knowledge_std=float(np.mean(np.sqrt(know[:, :, k]))),
                total_std=float(np.mean(np.sqrt(total[:, :, k]))),
                data_var=float(np.mean(data[:, :, k])),
                knowledge_var=float(np.mean(know[:, :, k])),
                total_var=float(np.mean(total[:, :, k])),
            )
        )
    return rows


def write_calibration_csv(path, rows, seed=0, config_hash="0" * 16):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# evtraf-calibration v1 seed={seed} config={config_hash}\n")
        fh.write(
            "horizon,rmse_kmh,data_std_kmh,knowledge_std_kmh,total_std_kmh,"
            "data_var,knowledge_var,total_var\n"
        )
        for r in rows:
            fh.write(
                f"{r.horizon},{r.rmse:.10g},{r.data_std:.10g},"
                f"{r.knowledge_std:.10g},{r.total_std:.10g},{r.data_var:.10g},"
                f"{r.knowledge_var:.10g},{r.total_var:.10g}\n"
            )


def write_metrics_csv(path, metrics, seed=0, config_hash="0" * 16):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# evtraf-metrics v1 seed={seed} config={config_hash}\n")
        fh.write("metric,value\n")
        for key in sorted(metrics):
            fh.write(f"{key},{metrics[key]:.10g}\n")
