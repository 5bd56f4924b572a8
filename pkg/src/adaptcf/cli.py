"""Command-line pipeline: synth/ingest -> pairs -> score -> label -> calibrate-fixed -> train -> evaluate -> report."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .calib import LabelDataset, label_windows
from .carfollow import KRAUSS
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, NumericError, StateError
from .evalharness import (evaluate_clusters, evaluate_with, fixed_for_pair, histogram_table,
                          write_cluster_reports, write_pair_reports)
from .grunet import GruModel, build_samples, load_model, save_model, train
from .stylescore import score_vehicles
from .synth import planted_constant_pair, planted_sinusoid_pair, style_corpus
from .trajdata import (VehiclePair, compute_features, extract_pairs, parse_ngsim, read_trajectories,
                       slice_windows, write_trajectories)

logger = logging.getLogger("adaptcf")

SUBCOMMANDS = ("synth", "ingest", "pairs", "score", "label", "calibrate-fixed", "train", "simulate",
               "evaluate", "report")
MANIFEST = "manifest.json"
# artifact file -> subcommand that produces it
PRODUCER = {
    "synth_trajectories.csv": "synth",
    "trajectories.csv": "ingest",
    "pairs.csv": "pairs",
    "scores.csv": "score",
    "labels.csv": "label",
    "fixed_params.csv": "calibrate-fixed",
    "gru_model.json": "train",
    "evaluation.csv": "evaluate",
}
REFERENCE_PAIR = (1, 11)
REFERENCE_DEFAULT_RMSE = 3.393

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3


class MissingArtifact(Exception):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"missing {path.name} in {path.parent}; run `adaptcf {stage}` first")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _csv(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


class Stage:
    """Context for one subcommand run: resolves inputs and records outputs in the manifest."""

    def __init__(self, name: str, cfg: RunConfig):
        self.name, self.cfg = name, cfg
        self.out = cfg.output_dir
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    def need(self, filename: str) -> Path:
        path = self.out / filename
        if not path.is_file():
            raise MissingArtifact(path, PRODUCER.get(filename, "?"))
        self.inputs[filename] = sha256_file(path)
        return path

    def path(self, filename: str) -> Path:
        path = self.out / filename
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def done(self, *filenames: str) -> None:
        for name in filenames:
            self.outputs[name] = sha256_file(self.out / name)
        self._write_manifest()

    def _write_manifest(self) -> None:
        path = self.out / MANIFEST
        doc = json.loads(path.read_text()) if path.is_file() else {}
        doc.update({"tool": "adaptcf", "version": __version__, "config_hash": self.cfg.config_hash,
                    "seed": self.cfg.seed, "config": self.cfg.raw})
        doc.setdefault("stages", {})[self.name] = {
            "config_hash": self.cfg.config_hash,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# loaders shared by several stages

def _load_pairs(st: Stage) -> list[VehiclePair]:
    trajs = {t.vehicle_id: t for t in read_trajectories(st.need("trajectories.csv"))}
    table = pd.read_csv(st.need("pairs.csv"), float_precision="round_trip")
    pairs = []
    for r in table.itertuples(index=False):
        pair = VehiclePair(trajs[int(r.leader_id)].between(int(r.start_frame), int(r.stop_frame)),
                           trajs[int(r.follower_id)].between(int(r.start_frame), int(r.stop_frame)))
        pairs.append(pair)
    return pairs


def _selected(st: Stage, pairs: list[VehiclePair]) -> list[VehiclePair]:
    if st.cfg.pairs is None:
        return pairs
    by_id = {p.pair_id: p for p in pairs}
    missing = [pid for pid in st.cfg.pairs if pid not in by_id]
    if missing:
        raise DataError(f"eval.pairs lists pairs not found in pairs.csv: {missing}")
    return [by_id[pid] for pid in st.cfg.pairs]


def _load_fixed(st: Stage) -> dict[tuple[int, int], np.ndarray]:
    df = pd.read_csv(st.need("fixed_params.csv"), float_precision="round_trip")
    names = list(st.cfg.model.param_names)
    return {(int(r["leader_id"]), int(r["follower_id"])): r[names].to_numpy(float)
            for _, r in df.iterrows()}


def _load_labels(st: Stage) -> LabelDataset:
    return LabelDataset.from_csv(st.need("labels.csv"), st.cfg.model.name)


# subcommands

def cmd_synth(st: Stage) -> None:
    cfg = st.cfg
    truth = []
    if cfg.synth_corpus == "style":
        trajs = style_corpus(cfg.synth_n_pairs, cfg.synth_n_frames, cfg.seed, cfg.ctx)
    else:
        trajs = []
        for i in range(cfg.synth_n_pairs):
            ids = dict(leader_id=2 * i + 1, follower_id=2 * i + 2)
            if cfg.synth_corpus == "constant":
                if len(cfg.synth_params) != KRAUSS.n_params:
                    raise ConfigError("synth.params needs t_r,t_i for the constant corpus")
                pair = planted_constant_pair(cfg.synth_params, cfg.synth_n_frames, cfg.seed + i, ctx=cfg.ctx, **ids)
                rows = [cfg.synth_params]
            else:
                pair, rows = planted_sinusoid_pair(cfg.synth_n_frames, cfg.window_len, cfg.seed + i,
                                                   period_s=cfg.synth_period_s, ctx=cfg.ctx, **ids)
            trajs.extend([pair.leader, pair.follower])
            for j, p in enumerate(rows):
                truth.append({"leader_id": ids["leader_id"], "follower_id": ids["follower_id"],
                              "window_index": j if cfg.synth_corpus == "sinusoid" else -1,
                              "t_r": p[0], "t_i": p[1]})
    write_trajectories(trajs, st.path("synth_trajectories.csv"))
    outputs = ["synth_trajectories.csv"]
    if truth:
        _csv(pd.DataFrame(truth), st.path("synth_truth.csv"))
        outputs.append("synth_truth.csv")
    st.done(*outputs)


def cmd_ingest(st: Stage) -> None:
    cfg = st.cfg
    if cfg.source == "synth":
        trajs = read_trajectories(st.need("synth_trajectories.csv"))
    else:
        if not cfg.data_path.is_file():
            raise ConfigError(f"data.path: file {cfg.data_path} does not exist")
        if cfg.source == "ngsim":
            trajs = parse_ngsim(cfg.data_path, cfg.column_map, cfg.unit_mode)
        else:
            trajs = read_trajectories(cfg.data_path)
        st.inputs[str(cfg.data_path)] = sha256_file(cfg.data_path)
    write_trajectories(trajs, st.path("trajectories.csv"))
    st.done("trajectories.csv")


def cmd_pairs(st: Stage) -> None:
    trajs = read_trajectories(st.need("trajectories.csv"))
    pairs = extract_pairs(trajs, st.cfg.min_frames)
    rows = [{"leader_id": p.pair_id[0], "follower_id": p.pair_id[1], "start_frame": p.overlap[0],
             "stop_frame": p.overlap[1] + 1, "n_frames": p.n_frames,
             "n_windows": len(slice_windows(p, st.cfg.window_len, st.cfg.stride))
             if p.n_frames >= st.cfg.window_len else 0}
            for p in pairs]
    _csv(pd.DataFrame(rows, columns=["leader_id", "follower_id", "start_frame", "stop_frame",
                                     "n_frames", "n_windows"]), st.path("pairs.csv"))
    logger.info("%d pairs with at least %d frames", len(pairs), st.cfg.min_frames)
    st.done("pairs.csv")


def cmd_score(st: Stage) -> None:
    pairs = _load_pairs(st)
    if len(pairs) < 4:
        raise DataError(f"scoring needs at least 4 pairs, found {len(pairs)}")
    feats = np.array([compute_features(p).as_array() for p in pairs])
    report = score_vehicles(feats, [p.pair_id[1] for p in pairs], st.cfg.orientation, st.cfg.cuts)
    df = report.to_frame()
    df.insert(0, "leader_id", [p.pair_id[0] for p in pairs])
    _csv(df, st.path("scores.csv"))
    report.write_sidecar(st.path("scores.json"))
    logger.info("cluster sizes %s, cuts %s", report.cluster_sizes(), report.cut_values)
    st.done("scores.csv", "scores.json")


def cmd_label(st: Stage) -> None:
    cfg = st.cfg
    pairs = _selected(st, _load_pairs(st))
    labels = label_windows(pairs, cfg.model, cfg.window_len, cfg.stride, cfg.bo, cfg.ctx,
                           cfg.train_fraction, cfg.workers)
    labels.to_csv(st.path("labels.csv"))
    st.done("labels.csv")


def cmd_calibrate_fixed(st: Stage) -> None:
    cfg = st.cfg
    ec = cfg.eval_config()
    rows = []
    for pair in _selected(st, _load_pairs(st)):
        params = fixed_for_pair(pair, cfg.model, ec)
        rows.append({"leader_id": pair.pair_id[0], "follower_id": pair.pair_id[1],
                     **dict(zip(cfg.model.param_names, params.tolist()))})
    _csv(pd.DataFrame(rows), st.path("fixed_params.csv"))
    st.done("fixed_params.csv")


def cmd_train(st: Stage) -> None:
    cfg = st.cfg
    pairs = _selected(st, _load_pairs(st))
    labels = _load_labels(st)
    samples = build_samples(pairs, labels.subset("train", [p.pair_id for p in pairs]))
    model = GruModel.init(samples.inputs.shape[2], cfg.hidden_dim, cfg.model.n_params, seed=cfg.seed,
                          model_kind=cfg.model.name, bounds=cfg.model.bounds)
    result = train(model, samples, cfg.training)
    save_model(result.model, st.path("gru_model.json"))
    _csv(pd.DataFrame({"epoch": np.arange(len(result.train_loss)), "train_loss": result.train_loss,
                       "val_loss": result.val_loss}), st.path("training_curves.csv"))
    st.done("gru_model.json", "training_curves.csv")


def _pair_reports(st: Stage, keep_traces: bool):
    cfg = st.cfg
    model = load_model(st.need("gru_model.json"))
    fixed = _load_fixed(st)
    ec = cfg.eval_config()
    reports = []
    for pair in _selected(st, _load_pairs(st)):
        if pair.pair_id not in fixed:
            raise MissingArtifact(st.out / "fixed_params.csv", "calibrate-fixed")
        reports.append(evaluate_with(pair, cfg.model, fixed[pair.pair_id], model, ec, keep_traces))
    return reports


def cmd_simulate(st: Stage) -> None:
    frames = []
    for rep in _pair_reports(st, keep_traces=True):
        df = pd.DataFrame(rep.traces)
        df.insert(0, "follower_id", rep.pair_id[1])
        df.insert(0, "leader_id", rep.pair_id[0])
        frames.append(df)
    _csv(pd.concat(frames, ignore_index=True), st.path("simulations.csv"))
    st.done("simulations.csv")


def cmd_evaluate(st: Stage) -> None:
    cfg = st.cfg
    outputs = []
    if cfg.eval_mode in ("pair", "both"):
        write_pair_reports(_pair_reports(st, keep_traces=False), st.path("evaluation.csv"))
        outputs.append("evaluation.csv")
    if cfg.eval_mode in ("cluster", "both"):
        pairs = _load_pairs(st)
        scores = pd.read_csv(st.need("scores.csv"), float_precision="round_trip")
        clusters = {(int(r.leader_id), int(r.vehicle_id)): int(r.cluster) for r in scores.itertuples()}
        reports = evaluate_clusters(pairs, clusters, cfg.model, cfg.eval_config(),
                                    labels=_load_labels(st), fixed=_load_fixed(st))
        write_cluster_reports(reports, st.path("cluster_folds.csv"), st.path("cluster_summary.csv"))
        outputs += ["cluster_folds.csv", "cluster_summary.csv"]
    st.done(*outputs)


def cmd_report(st: Stage) -> None:
    out = []
    lines = [f"adaptcf report (model {st.cfg.model.name}, seed {st.cfg.seed})", ""]
    if (st.out / "evaluation.csv").is_file():
        ev = pd.read_csv(st.need("evaluation.csv"), float_precision="round_trip")
        _csv(ev, st.path("report/pair_report.csv"))
        _csv(histogram_table(ev["improvement"]), st.path("report/improvement_hist_pairs.csv"))
        out += ["report/pair_report.csv", "report/improvement_hist_pairs.csv"]
        for r in ev.itertuples(index=False):
            lines.append(f"pair {r.leader_id}-{r.follower_id}: default {r.rmse_default:.3f}  "
                         f"fixed {r.rmse_fixed:.3f}  adaptive {r.rmse_proposed:.3f}  "
                         f"improvement {100 * r.improvement:.1f}%")
            if (r.leader_id, r.follower_id) == REFERENCE_PAIR and st.cfg.model.name == "krauss":
                lines.append(f"  note: the reference default-parameter RMSE for this pair is "
                             f"{REFERENCE_DEFAULT_RMSE} m/s; an exact match is not expected because "
                             f"safe-speed formulations differ between implementations "
                             f"(observed {r.rmse_default:.3f}).")
    if (st.out / "cluster_summary.csv").is_file():
        summary = pd.read_csv(st.need("cluster_summary.csv"), float_precision="round_trip")
        folds = pd.read_csv(st.need("cluster_folds.csv"), float_precision="round_trip")
        _csv(summary, st.path("report/cluster_summary.csv"))
        _csv(folds, st.path("report/cluster_folds.csv"))
        dist = folds[["cluster", "leader_id", "follower_id", "improvement"]]
        _csv(dist, st.path("report/improvement_by_cluster.csv"))
        out += ["report/cluster_summary.csv", "report/cluster_folds.csv", "report/improvement_by_cluster.csv"]
        for r in summary.itertuples(index=False):
            lines.append(f"cluster {r.cluster}: trimmed mean improvement {100 * r.mean_improvement:.1f}% "
                         f"(quartiles {100 * r.q1:.1f} / {100 * r.median:.1f} / {100 * r.q3:.1f} %)")
    if (st.out / "scores.csv").is_file():
        scores = pd.read_csv(st.need("scores.csv"), float_precision="round_trip")
        _csv(histogram_table(scores["score"], bins=20, value_range=(0.0, 1.0)),
             st.path("report/score_hist.csv"))
        out.append("report/score_hist.csv")
        sizes = scores["cluster"].value_counts().reindex([0, 1, 2], fill_value=0).tolist()
        lines.append(f"style clusters (conservative/normal/aggressive): {sizes[0]}/{sizes[1]}/{sizes[2]}")
    if not out:
        raise MissingArtifact(st.out / "evaluation.csv", "evaluate")
    st.path("report/summary.txt").write_text("\n".join(lines) + "\n")
    out.append("report/summary.txt")
    st.done(*out)


COMMANDS: dict[str, Callable[[Stage], None]] = {
    "synth": cmd_synth, "ingest": cmd_ingest, "pairs": cmd_pairs, "score": cmd_score,
    "label": cmd_label, "calibrate-fixed": cmd_calibrate_fixed, "train": cmd_train,
    "simulate": cmd_simulate, "evaluate": cmd_evaluate, "report": cmd_report,
}

HELP = {
    "synth": "generate a synthetic corpus with planted parameters",
    "ingest": "read the trajectory source into the canonical CSV",
    "pairs": "extract leader-follower pairs",
    "score": "entropy-weight style scores and clusters",
    "label": "per-window BO parameter labels",
    "calibrate-fixed": "one BO-calibrated parameter set per pair",
    "train": "train the GRU on the training-split labels",
    "simulate": "simulate test segments with default, fixed and adaptive parameters",
    "evaluate": "RMSE reports per pair and/or per cluster",
    "report": "collect report tables and plot data",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--workers", type=int, help="worker processes; never changes outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="adaptcf", description="Adaptive car-following calibration pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def run(subcommand: str, config_path: str | None = None, overrides: Sequence[str] = ()) -> int:
    """Run one subcommand; returns the process exit status."""
    if subcommand not in COMMANDS:
        print(f"adaptcf: unknown subcommand {subcommand!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(config_path, overrides)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[subcommand](Stage(subcommand, cfg))
    except ConfigError as exc:
        print(f"adaptcf {subcommand}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"adaptcf {subcommand}: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DataError, NumericError, StateError) as exc:
        print(f"adaptcf {subcommand}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.workers is not None:
        overrides.append(f"run.workers={args.workers}")
    return run(args.command, args.config, overrides)


if __name__ == "__main__":
    sys.exit(main())
