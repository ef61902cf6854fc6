"""Command-line entry point: ``painnet {synth,train,crossval,predict,gradcheck}``.

Every run writes ``config.resolved`` into its output directory. Timestamps
go only to ``run.meta`` so all other outputs are reproducible byte for byte.
Failures print one line ``error: <category>: <message>`` and exit nonzero.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import SCHEMA, Config, ConfigError, load_config
from .diffcore import CheckpointError, NonFiniteError, load_checkpoint, save_checkpoint
from .episodic import VideoBank, sample_eval_sets, train
from .evaluation import (MetricReport, checkpoint_meta, cross_validate, evaluate_trial,
                         predict_videos, write_report)
from .features import (Dataset, FeatureFileError, ManifestError, VideoRecord,
                       VideoTooShortError, load_manifest, make_folds)
from .gradcheck import LAYERS, run_gradchecks
from .model import PainNet

EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "checkpoint": 5, "numeric": 6,
              "gradcheck": 7, "io": 8}

# short flags for the most used overrides
SHORT_FLAGS = {
    "--videos-per-class": "synth.videos_per_class",
    "--signal-strength": "synth.signal_strength",
    "--subjects": "synth.subjects",
    "--loss": "train.loss",
    "--mode": "train.mode",
    "--episodes": "train.episodes",
    "--comparison": "relation.comparison",
    "--operators": "stats.operators",
    "--au-columns": "au.columns",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_CODES["usage"], f"error: usage: {' '.join(message.split())}\n")


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=str, help="random seed (overrides config)")
    p.add_argument("--out", help="output directory")
    g = p.add_argument_group("config overrides")
    for key in SCHEMA:
        if key == "seed":
            continue
        g.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE")
    for flag, key in SHORT_FLAGS.items():
        g.add_argument(flag, dest=f"cfg:{key}", metavar="VALUE", help=f"alias of --{key}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="painnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"painnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic AU dataset")
    _common(p)

    p = sub.add_parser("train", help="train one cross-validation trial")
    _common(p)
    p.add_argument("--data", required=True, help="manifest.csv")
    p.add_argument("--trial", type=int, default=0, help="trial (test fold) index")

    p = sub.add_parser("crossval", help="subject-wise k-fold cross-validation")
    _common(p)
    p.add_argument("--data", required=True, help="manifest.csv")
    p.add_argument("--trials", help="comma-separated subset of trial indices")

    p = sub.add_parser("predict", help="predict VAS for feature files")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="manifest providing the sample pool")
    p.add_argument("--video", required=True, nargs="+", help="per-frame AU feature CSV(s)")
    p.add_argument("--emit-probs", action="store_true",
                   help="print the per-set probability table")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks per layer")
    _common(p)
    p.add_argument("--seeds", type=int, default=10, help="draws per layer")
    p.add_argument("--layers", help=f"comma-separated subset of: {', '.join(LAYERS)}")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--inject-bug", metavar="LAYER",
                   help="scale one layer's backward output (mutation self-test)")
    return parser


def resolve_config(args, base: dict | None = None) -> Config:
    overrides = dict(base or {})
    for k, v in vars(args).items():
        if k.startswith("cfg:") and v is not None:
            overrides[k[4:]] = v
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("io", f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _write_run_files(out: Path, config: Config, command: str):
    (out / "config.resolved").write_text(config.dumps(), encoding="utf-8")
    meta = {"command": command, "version": __version__,
            "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    (out / "run.meta").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def _load_data(path, config) -> Dataset:
    return load_manifest(path, config["au.columns"])


def cmd_synth(args) -> int:
    from .synth import SynthSpec, synth_generate

    config = resolve_config(args)
    out = _out_dir(args, "synth_data")
    spec = SynthSpec(config["synth.subjects"], config["synth.videos_per_class"],
                     config["synth.min_frames"], config["synth.max_frames"],
                     config["synth.signal_strength"],
                     config["seed"] if config["synth.seed"] is None else config["synth.seed"])
    ds = synth_generate(spec, out)
    _write_run_files(out, config, "synth")
    print(f"videos,{len(ds)}")
    print(f"subjects,{len(ds.subjects())}")
    print(f"manifest,{out / 'manifest.csv'}")
    return 0


def _split(config, ds):
    return make_folds(ds, config["folds.k"], config["folds.val_count"],
                      np.random.default_rng(config["seed"]))


def cmd_train(args) -> int:
    config = resolve_config(args)
    ds = _load_data(args.data, config)
    split = _split(config, ds)
    if not 0 <= args.trial < len(split.trials):
        raise CliError("usage", f"--trial must be in [0, {len(split.trials) - 1}]")
    out = _out_dir(args, "run")
    trial = split.trials[args.trial]
    res = train(config, ds, trial, args.trial)
    save_checkpoint(out / "ckpt" / "best.ckpt", res.model.params, res.state,
                    checkpoint_meta(config, trial, args.trial, res))
    (out / "train.log").write_text(res.log_lines(), encoding="utf-8")
    fm, rows = evaluate_trial(res, ds, trial, args.trial, config["eval.sample_sets"],
                              config["seed"])
    write_report(MetricReport([fm], rows), out / "report")
    _write_run_files(out, config, "train")
    print("trial,best_episode,val_icc,val_mae,test_icc,test_mae,test_rmse,baseline_mae")
    print(f"{args.trial},{res.best_episode},{fm.val_icc:.4f},{fm.val_mae:.4f},"
          f"{fm.icc:.4f},{fm.mae:.4f},{fm.rmse:.4f},{fm.baseline_mae:.4f}")
    return 0


def cmd_crossval(args) -> int:
    config = resolve_config(args)
    ds = _load_data(args.data, config)
    split = _split(config, ds)
    trials = None
    if args.trials:
        try:
            trials = [int(t) for t in args.trials.split(",")]
        except ValueError:
            raise CliError("usage", "--trials must be comma-separated integers") from None
        if any(not 0 <= t < len(split.trials) for t in trials):
            raise CliError("usage", f"--trials entries must be in [0, {len(split.trials) - 1}]")
    out = _out_dir(args, "crossval")
    report = cross_validate(config, ds, out, split, trials)
    _write_run_files(out, config, "crossval")
    print("fold,icc,mae,rmse,mae_per_intensity_macro,baseline_mae")
    for f in report.folds:
        print(f"{f.fold},{f.icc:.4f},{f.mae:.4f},{f.rmse:.4f},"
              f"{f.mae_per_intensity_macro:.4f},{f.baseline_mae:.4f}")
    m, p = report.mean, report.pooled
    print(f"mean,{m['icc']:.4f},{m['mae']:.4f},{m['rmse']:.4f},"
          f"{m['mae_per_intensity_macro']:.4f},{m['baseline_mae']:.4f}")
    print(f"pooled,{p['icc']:.4f},{p['mae']:.4f},{p['rmse']:.4f},"
          f"{p['mae_per_intensity_macro']:.4f},")
    return 0


def cmd_predict(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError("checkpoint", f"checkpoint not found: {ckpt}")
    _, _, meta = load_checkpoint(ckpt)
    base = {k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")}
    if args.config:
        base = {}   # an explicit config file replaces the checkpoint's own settings
    config = resolve_config(args, base)
    model = PainNet(config, len(config["au.columns"]), rng=None)
    tensors, _, _ = load_checkpoint(ckpt, expected=model.params)
    model.params.restore(tensors)

    ds = _load_data(args.data, config)
    ids = [v for v in meta.get("run.train_ids", "").split(",") if v]
    pool = [ds[v] for v in ids if v in ds] or list(ds.records)
    sets = sample_eval_sets(pool, config["eval.sample_sets"],
                            np.random.default_rng(config["seed"]))

    queries = []
    for i, path in enumerate(args.video):
        queries.append(VideoRecord(f"query{i}", "query", 0, Path(path)))
    qds = Dataset(list(ds.records) + queries, ds.au_names)
    bank = VideoBank(qds, config["segment.length"])
    preds = predict_videos(model, bank, [q.video_id for q in queries], sets)

    print("video,vas,set_labels")
    for path, p in zip(args.video, preds):
        print(f"{path},{p.label},{' '.join(str(s) for s in p.set_labels)}")
    if args.emit_probs:
        print("video,set," + ",".join(f"p{c}" for c in range(11)))
        for path, p in zip(args.video, preds):
            for si, row in enumerate(p.probs):
                print(f"{path},{si}," + ",".join(f"{v:.6f}" for v in row))
    if args.out:
        out = _out_dir(args, "predict")
        _write_run_files(out, config, "predict")
    return 0


def cmd_gradcheck(args) -> int:
    config = resolve_config(args)
    layers = [x.strip() for x in args.layers.split(",")] if args.layers else None
    if args.seeds < 1:
        raise CliError("usage", "--seeds must be positive")
    try:
        results = run_gradchecks(layers, args.seeds, args.step, args.tol,
                                 base_seed=config["seed"], corrupt=args.inject_bug)
    except ValueError as exc:
        raise CliError("usage", str(exc)) from None
    for r in results:
        print(r.line())
    failed = [r.layer for r in results if not r.passed]
    if args.out:
        out = _out_dir(args, "gradcheck")
        (out / "gradcheck.txt").write_text("".join(r.line() + "\n" for r in results),
                                           encoding="utf-8")
        _write_run_files(out, config, "gradcheck")
    if failed:
        raise CliError("gradcheck", f"failed layers: {','.join(failed)}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "crossval": cmd_crossval,
            "predict": cmd_predict, "gradcheck": cmd_gradcheck}


def _category(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, (ManifestError, FeatureFileError, VideoTooShortError)):
        return "data"
    if isinstance(exc, NonFiniteError):
        return "numeric"
    if isinstance(exc, OSError):
        return "io"
    return "data"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CliError, ConfigError, CheckpointError, ManifestError, FeatureFileError,
            VideoTooShortError, NonFiniteError, OSError, ValueError) as exc:
        cat = _category(exc)
        msg = " ".join(str(exc).split())
        print(f"error: {cat}: {msg}", file=sys.stderr)
        return EXIT_CODES.get(cat, 1)


if __name__ == "__main__":
    sys.exit(main())
