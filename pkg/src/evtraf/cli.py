"""Command-line interface.

Subcommands: simulate, train, evaluate, distill, stream.  Every run is
reproducible from its flags: artifacts embed the seed and a hash of the
effective configuration, and rerunning a command with identical inputs
produces byte-identical outputs.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical failure.

Options may also come from a ``--config`` file with ``key = value``
lines (keys match the long flags); explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

import numpy as np

from . import checkpoint as ckpt
from . import distill as ds
from .corpus import Corpus, make_corpus
from .errors import (
    EvtrafError,
    TrainingDivergedError,
    UsageError,
    ValidationError,
)
from .lwr import FundamentalDiagram, scenario_mix, simulate
from .model import DgcrnnModel, ModelConfig
from .roadgraph import load_graph, select_degree
from .training import Adam, TrainConfig, TrainingLog, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class Opt:
    def __init__(self, name, type_, default=None, required=False, help=""):
        self.name = name
        self.type = type_
        self.default = default
        self.required = required
        self.help = help


_COMMON = [Opt("config", str, help="key = value file supplying defaults")]

_SPECS = {
    "simulate": [
        Opt("graph", str, required=True, help="road-graph file"),
        Opt("out", str, required=True, help="output corpus file"),
        Opt("seed", int, 0),
        Opt("horizon", int, 185, help="output steps per long scenario"),
        Opt("incident_horizon", int, 39, help="output steps per incident scenario"),
        Opt("recurrent", int, 10, help="duplicated congestion scenarios"),
        Opt("freeflow", int, 3, help="light-demand scenarios"),
        Opt("incidents", int, 35, help="unique incident scenarios"),
        Opt("stride", int, 1),
        Opt("window_in", int, 20),
        Opt("window_out", int, 15),
        Opt("noise", float, 0.1, help="lognormal demand noise sigma"),
        Opt("measurement_noise", float, 0.0, help="relative speed-sensor noise"),
        Opt("base_demand", float, 400.0, help="veh/h/lane off peak"),
        Opt("peak_demand", float, 1800.0, help="veh/h/lane at the peak"),
        Opt("incident_demand", float, 900.0, help="veh/h/lane in incident runs"),
        Opt("bottleneck_factor", float, 0.55),
        Opt("incident_drop", float, 0.9),
        Opt("delta_t", float, 2.0, help="output step, minutes"),
        Opt("csv_out", str, help="optional CSV dump of the corpus"),
    ],
    "train": [
        Opt("graph", str, required=True),
        Opt("corpus", str, required=True),
        Opt("out", str, required=True, help="checkpoint file to write"),
        Opt("log", str, help="training-log CSV to write"),
        Opt("resume", str, help="checkpoint to continue from"),
        Opt("seed", int, 0),
        Opt("epochs", int, 10),
        Opt("batch_size", int, 16),
        Opt("lr", float, 1e-3),
        Opt("hidden_dim", int, 64),
        Opt("kernel_dim", int, 16),
        Opt("feat_hidden", int, 16),
        Opt("epsilon", float, 0.01, help="regularizer weight in the speed loss"),
        Opt("flow_loss_weight", float, 1.0),
        Opt("decay_c", float, 1.25e-4, help="scheduled-sampling decay"),
        Opt("teacher_variance", float, 0.4, help="(km/h)^2 for forced inputs"),
        Opt("clip_bracket", bool, False),
        Opt("wave_speed_congested", float, 18.0, help="km/h, sizes the speed mask"),
        Opt("wave_speed_free", float, 120.0, help="km/h, sizes the flow mask"),
        Opt("degree_speed", int, help="override the derived speed degree"),
        Opt("degree_flow", int, help="override the derived flow degree"),
    ],
    "evaluate": [
        Opt("graph", str, required=True),
        Opt("corpus", str, required=True),
        Opt("checkpoint", str, required=True),
        Opt("out", str, required=True, help="metrics CSV"),
        Opt("calibration_out", str, help="per-horizon calibration CSV"),
    ],
    "distill": [
        Opt("graph", str, required=True),
        Opt("corpus", str, required=True),
        Opt("checkpoint", str, required=True),
        Opt("report", str, required=True, help="distillation report to write"),
        Opt("pct", float, 70.0),
        Opt("mode", str, "remove-lowest", help="remove-lowest or preserve-lowest"),
        Opt("filtered_out", str, help="write the kept samples as a corpus"),
        Opt("retrain", bool, False, help="retrain on the kept samples"),
        Opt("retrain_out", str, help="checkpoint for the retrained model"),
    ],
    "stream": [
        Opt("graph", str, required=True),
        Opt("incoming", str, required=True, help="corpus of incoming samples"),
        Opt("checkpoint", str, required=True),
        Opt("out", str, required=True, help="kept (optionally merged) corpus"),
        Opt("threshold", float, help="ku threshold in km/h"),
        Opt("report", str, help="take the threshold from this report"),
        Opt("log", str, help="acceptance-log CSV"),
        Opt("window", int, 100, help="acceptance-log window size"),
        Opt("merge_with", str, help="merge kept samples into this corpus"),
    ],
}


def _build_parser():
    parser = _Parser(prog="evtraf", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command")
    for command, spec in _SPECS.items():
        p = sub.add_parser(command, description=f"evtraf {command}")
        for opt in _COMMON + spec:
            flag = "--" + opt.name.replace("_", "-")
            if opt.type is bool:
                p.add_argument(flag, dest=opt.name, action="store_true", default=None)
            else:
                p.add_argument(
                    flag, dest=opt.name, type=opt.type, default=None, help=opt.help
                )
    return parser


def _read_config_file(path):
    values = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config file {path}: {exc}") from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce_config_value(opt, text, path):
    if opt.type is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{path}: option {opt.name} expects a boolean, got {text!r}")
    try:
        return opt.type(text)
    except ValueError:
        raise UsageError(
            f"{path}: option {opt.name} expects {opt.type.__name__}, got {text!r}"
        ) from None


def _effective_options(command, args):
    spec = _SPECS[command]
    file_values = {}
    if args.config:
        file_values = _read_config_file(args.config)
        known = {o.name for o in spec}
        unknown = set(file_values) - known
        if unknown:
            raise UsageError(
                f"{args.config}: unknown option(s) {sorted(unknown)} for "
                f"'evtraf {command}'"
            )
    eff = {}
    for opt in spec:
        value = getattr(args, opt.name)
        if value is None and opt.name in file_values:
            value = _coerce_config_value(opt, file_values[opt.name], args.config)
        if value is None:
            value = opt.default
        if value is None and opt.required:
            raise UsageError(f"evtraf {command}: missing required option --"
                             + opt.name.replace("_", "-"))
        eff[opt.name] = value
    return eff


# Options that only say where to write results.  They are excluded from
# the config hash so the fingerprint describes what produced an artifact,
# not where it landed.  (stream --report is an input and stays hashed.)
_OUTPUT_OPTS = {
    "simulate": {"out", "csv_out"},
    "train": {"out", "log"},
    "evaluate": {"out", "calibration_out"},
    "distill": {"report", "filtered_out", "retrain_out"},
    "stream": {"out", "log"},
}


def _config_hash(command, eff):
    hashed = {k: v for k, v in eff.items() if k not in _OUTPUT_OPTS[command]}
    payload = json.dumps({"command": command, **hashed}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# -- commands ------------------------------------------------------------


def _cmd_simulate(eff, chash):
    graph = load_graph(eff["graph"], delta_t=eff["delta_t"])
    scenarios, horizons = scenario_mix(
        graph,
        seed=eff["seed"],
        recurrent=eff["recurrent"],
        freeflow=eff["freeflow"],
        incident_count=eff["incidents"],
        horizon=eff["horizon"],
        incident_horizon=eff["incident_horizon"],
        base_demand=eff["base_demand"],
        peak_demand=eff["peak_demand"],
        incident_demand=eff["incident_demand"],
        bottleneck_factor=eff["bottleneck_factor"],
        incident_drop=eff["incident_drop"],
        noise_sigma=eff["noise"],
        measurement_sigma=eff["measurement_noise"],
    )
    fd = FundamentalDiagram()
    pairs = [(sc, simulate(sc, hz, fd)) for sc, hz in zip(scenarios, horizons)]
    corp = make_corpus(
        graph,
        pairs,
        window_in=eff["window_in"],
        window_out=eff["window_out"],
        stride=eff["stride"],
        seed=eff["seed"],
        config_hash=chash,
    )
    corp.save(eff["out"])
    if eff["csv_out"]:
        corp.to_csv(eff["csv_out"])
    rare = sum(1 for s in corp.samples if s.rare)
    print(
        f"simulate: wrote {len(corp)} samples ({rare} rare) over "
        f"{len(scenarios)} scenarios to {eff['out']}"
    )
    return 0


def _model_config_from_options(eff, corp, graph):
    degree_speed = eff["degree_speed"]
    if degree_speed is None:
        degree_speed = select_degree(eff["wave_speed_congested"] / 60.0, graph)
    degree_flow = eff["degree_flow"]
    if degree_flow is None:
        degree_flow = select_degree(eff["wave_speed_free"] / 60.0, graph)
    return ModelConfig(
        hidden_dim=eff["hidden_dim"],
        kernel_dim=eff["kernel_dim"],
        feat_hidden=eff["feat_hidden"],
        degree_speed=degree_speed,
        degree_flow=degree_flow,
        encoder_steps=corp.window_in,
        decoder_steps=corp.window_out,
        epsilon=eff["epsilon"],
        flow_loss_weight=eff["flow_loss_weight"],
        decay_c=eff["decay_c"],
        teacher_total_variance=eff["teacher_variance"],
        clip_bracket=eff["clip_bracket"],
    )


def _cmd_train(eff, chash):
    graph = load_graph(eff["graph"])
    corp = Corpus.load(eff["corpus"])
    train_cfg = TrainConfig(
        epochs=eff["epochs"],
        batch_size=eff["batch_size"],
        learning_rate=eff["lr"],
        seed=eff["seed"],
    )
    start_iteration = 0
    optimizer = None
    log = TrainingLog()
    if eff["resume"]:
        model, header, blocks = ckpt.load_model(eff["resume"], graph)
        optimizer = Adam(model.params, lr=train_cfg.learning_rate)
        optimizer.load_state(blocks, header.get("optimizer_step", 0))
        start_iteration = header.get("iteration", 0)
    else:
        cfg = _model_config_from_options(eff, corp, graph)
        model = DgcrnnModel(cfg, graph, seed=eff["seed"])
    log, optimizer, iteration = train(
        model,
        corp,
        train_cfg,
        start_iteration=start_iteration,
        optimizer=optimizer,
        log=log,
    )
    ckpt.save_checkpoint(
        eff["out"],
        model,
        train_config=train_cfg.to_dict(),
        iteration=iteration,
        seed=eff["seed"],
        config_hash=chash,
        optimizer=optimizer,
    )
    if eff["log"]:
        log.to_csv(eff["log"], seed=eff["seed"], config_hash=chash)
    final = log.rows[-1]
    print(
        f"train: {len(corp)} samples, {train_cfg.epochs} epochs, "
        f"final loss {final.loss:.6g}, sampling p {final.sampling_p:.6g}, "
        f"checkpoint {eff['out']}"
    )
    return 0


def _cmd_evaluate(eff, chash):
    graph = load_graph(eff["graph"])
    corp = Corpus.load(eff["corpus"])
    model, header, _ = ckpt.load_model(eff["checkpoint"], graph)
    _check_windows(corp, model)
    pred = model.predict(corp.samples)
    true_speed = np.stack([s.target_speed for s in corp.samples]).astype(np.float64)
    true_flow = np.stack([s.target_flow for s in corp.samples]).astype(np.float64)
    metrics = ds.evaluate_predictions(pred["speed"], true_speed, pred["flow"], true_flow)
    ds.write_metrics_csv(eff["out"], metrics, seed=header["seed"], config_hash=chash)
    if eff["calibration_out"]:
        rows = ds.calibration_report(model, corp)
        ds.write_calibration_csv(
            eff["calibration_out"], rows, seed=header["seed"], config_hash=chash
        )
    print(
        f"evaluate: {len(corp)} samples, speed MAE {metrics['speed_mae']:.4g} km/h, "
        f"weighted MAE {metrics['speed_weighted_mae']:.4g} km/h -> {eff['out']}"
    )
    return 0


def _check_windows(corp, model):
    if corp.window_in != model.cfg.encoder_steps or corp.window_out != model.cfg.decoder_steps:
        raise ValidationError(
            f"corpus windows ({corp.window_in}, {corp.window_out}) do not match "
            f"the checkpoint ({model.cfg.encoder_steps}, {model.cfg.decoder_steps})"
        )


def _cmd_distill(eff, chash):
    graph = load_graph(eff["graph"])
    corp = Corpus.load(eff["corpus"])
    model, header, _ = ckpt.load_model(eff["checkpoint"], graph)
    _check_windows(corp, model)
    if eff["mode"] not in ("remove-lowest", "preserve-lowest"):
        raise UsageError(f"--mode must be remove-lowest or preserve-lowest, got {eff['mode']}")
    scores = ds.score_samples(model, corp)
    report = ds.build_report(
        scores, eff["pct"], eff["mode"], seed=header["seed"], config_hash=chash
    )
    report.save(eff["report"])
    kept_corpus = corp.subset(report.kept)
    if eff["filtered_out"]:
        kept_corpus.save(eff["filtered_out"])
    print(
        f"distill: kept {len(report.kept)} of {len(corp)} samples "
        f"({eff['mode']} at pct {eff['pct']:g}, threshold "
        f"{report.threshold:.4g} km/h) -> {eff['report']}"
    )
    if eff["retrain"]:
        if not eff["retrain_out"]:
            raise UsageError("--retrain requires --retrain-out")
        t_cfg = header.get("train_config") or {}
        if not t_cfg:
            raise ValidationError(
                "checkpoint lacks the training configuration needed to retrain"
            )
        train_cfg = TrainConfig.from_dict(t_cfg)
        fresh = DgcrnnModel(
            ModelConfig.from_dict(header["model_config"]), graph, seed=header["seed"]
        )
        log, optimizer, iteration = train(fresh, kept_corpus, train_cfg)
        ckpt.save_checkpoint(
            eff["retrain_out"],
            fresh,
            train_config=train_cfg.to_dict(),
            iteration=iteration,
            seed=header["seed"],
            config_hash=chash,
            optimizer=optimizer,
        )
        print(
            f"distill: retrained on {len(kept_corpus)} samples, final loss "
            f"{log.rows[-1].loss:.6g} -> {eff['retrain_out']}"
        )
    return 0


def _cmd_stream(eff, chash):
    if (eff["threshold"] is None) == (eff["report"] is None):
        raise UsageError("provide exactly one of --threshold or --report")
    graph = load_graph(eff["graph"])
    incoming = Corpus.load(eff["incoming"])
    model, header, _ = ckpt.load_model(eff["checkpoint"], graph)
    _check_windows(incoming, model)
    threshold = eff["threshold"]
    if threshold is None:
        threshold = ds.DistillReport.load(eff["report"]).threshold
    kept_ids, log = ds.stream_filter(model, incoming, threshold, window=eff["window"])
    kept = incoming.subset(kept_ids)
    out = kept
    if eff["merge_with"]:
        base = Corpus.load(eff["merge_with"])
        out = base.merged_with(kept)
    out.save(eff["out"])
    if eff["log"]:
        ds.write_acceptance_log(
            eff["log"], log, seed=header["seed"], config_hash=chash
        )
    rate = len(kept_ids) / len(incoming) if len(incoming) else 0.0
    print(
        f"stream: kept {len(kept_ids)} of {len(incoming)} samples "
        f"({100.0 * rate:.1f}% above threshold {threshold:.4g} km/h) -> {eff['out']}"
    )
    return 0


_HANDLERS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "distill": _cmd_distill,
    "stream": _cmd_stream,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("missing subcommand (simulate, train, evaluate, distill, stream)")
        eff = _effective_options(args.command, args)
        chash = _config_hash(args.command, eff)
        return _HANDLERS[args.command](eff, chash)
    except UsageError as exc:
        print(f"evtraf: usage error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"evtraf: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"evtraf: numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValidationError as exc:
        print(f"evtraf: invalid input: {exc}", file=sys.stderr)
        return 2
    except EvtrafError as exc:
        print(f"evtraf: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
