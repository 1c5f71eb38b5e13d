"""Command line entry point: ``dpkws {gen,train,eval,report}``.

Every option can come from a YAML/JSON config file (``--config``); flags
given on the command line win.  The resolved configuration is written to
the output directory as ``config.yaml`` and can be fed back with
``--config`` to reproduce a run.

Exit codes: 0 success, 2 configuration error, 3 runtime fault.
"""

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import yaml

from .corpus import (
    CV_FRACTION,
    CorpusCounts,
    CorpusError,
    KeywordSpec,
    assign_cv_split,
    build_multicondition,
    generate_corpus,
    make_noise_bank,
    read_corpus,
    read_manifest,
    write_corpus,
)
from .dataparams import read_snapshot_csv
from .evaluation import (
    DEFAULT_FA_PER_HOUR,
    det_curve,
    frr_at_fa_rate,
    render_svg,
    sigma_distribution_report,
    write_det_csv,
    write_report_csv,
)
from .features import FeatureError, FrameSpec
from .kws import KeywordHmm, read_scores, write_scores
from .netcore import AcousticModel
from .pipeline import detection_trials, fit_keyword_hmm, score_corpus_split, split_frame_data
from .trainer import MODES, ConfigError, TrainConfig, train

logger = logging.getLogger("dpkws")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3
RUN_ROOT_ENV = "DPKWS_RUN_ROOT"

# key -> default; None means "derived" (TABLE1 lookup or corpus contents)
DEFAULTS = {
    "gen": {
        "out": "corpus", "seed": 0, "positives": 1000, "negatives": 1000,
        "eval_positives": 200, "eval_negatives": 600, "clean_only": False,
        "n_noise_clips": 12, "snr_low": -10.0, "snr_high": 10.0, "cv_fraction": CV_FRACTION,
        "near_miss_fraction": 0.25,
        **FrameSpec().to_dict(),
    },
    "train": {
        "corpus": "corpus", "run_dir": "run", "seed": 0, "mode": "baseline", "data": None,
        "class_lr": None, "class_init": None, "instance_lr": None, "instance_init": None,
        "weight_decay": None, "model_lr": 0.01, "batch_utterances": 256, "max_epochs": 50,
        "early_stop_patience": 9, "plateau_patience": 2, "plateau_factor": 0.5,
        "hidden": 64, "n_layers": 5,
    },
    "eval": {
        "corpus": "corpus", "run_dir": "run", "split": "eval", "fa_per_hour": DEFAULT_FA_PER_HOUR,
        "det_points": 50, "method": "forward", "max_window": 300,
    },
    "report": {
        "corpus": "corpus", "run_dir": "run", "svg": False,
    },
}

_HELP = {
    "clean_only": "skip the noisy copies",
    "data": "training condition for the data-parameter defaults: clean or noisy (default: from corpus)",
    "mode": "baseline, class, instance or joint",
    "fa_per_hour": "false-alarm budget of the operating point",
    "svg": "also render report.svg",
}


class RuntimeFault(RuntimeError):
    pass


def _flag(key):
    return "--" + key.replace("_", "-")


def build_parser():
    parser = argparse.ArgumentParser(prog="dpkws", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults in DEFAULTS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON file with option values")
        for key, default in defaults.items():
            kwargs = {"dest": key, "default": argparse.SUPPRESS, "help": _HELP.get(key)}
            if isinstance(default, bool):
                p.add_argument(_flag(key), action="store_true", **kwargs)
            elif key == "mode":
                p.add_argument(_flag(key), choices=MODES, **kwargs)
            elif key == "data":
                p.add_argument(_flag(key), choices=["clean", "noisy"], **kwargs)
            elif isinstance(default, int):
                p.add_argument(_flag(key), type=int, **kwargs)
            elif isinstance(default, float) or default is None:
                p.add_argument(_flag(key), type=float, **kwargs)
            else:
                p.add_argument(_flag(key), **kwargs)
    return parser


def resolve_config(command, args):
    """Defaults < config file < flags.  Unknown config keys are an error."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML/JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        loaded.pop("command", None)
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for '{command}': {', '.join(unknown)}")
        cfg.update(loaded)
    for key in DEFAULTS[command]:
        if hasattr(args, key):
            cfg[key] = getattr(args, key)
    return cfg


def _resolve_path(p):
    p = Path(p)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _echo_config(directory, command, cfg):
    with open(Path(directory) / "config.yaml", "w") as fh:
        yaml.safe_dump({"command": command, **cfg}, fh, sort_keys=True)


@contextmanager
def run_lock(directory):
    """Exclusive lock file so one process writes a run directory at a time."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeFault(f"{directory} is locked by another process ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def _load_corpus(path):
    path = _resolve_path(path)
    if not (path / "manifest.jsonl").exists():
        raise RuntimeFault(f"no corpus at {path} (missing manifest.jsonl)")
    return read_corpus(path)


def cmd_gen(cfg):
    try:
        spec = FrameSpec(**{k: cfg[k] for k in FrameSpec().to_dict()})
        counts = CorpusCounts(cfg["positives"], cfg["negatives"], cfg["eval_positives"],
                              cfg["eval_negatives"])
    except (CorpusError, FeatureError) as exc:
        raise ConfigError(str(exc)) from exc
    if not cfg["snr_low"] < cfg["snr_high"]:
        raise ConfigError("snr_low must be below snr_high")
    if not 0 <= cfg["near_miss_fraction"] <= 1:
        raise ConfigError("near_miss_fraction must lie in [0, 1]")
    kw = KeywordSpec(near_miss_fraction=cfg["near_miss_fraction"])
    out = _resolve_path(cfg["out"])
    with run_lock(out):
        clean = generate_corpus(cfg["seed"], counts, keyword_spec=kw, frame_spec=spec)
        if cfg["clean_only"]:
            corpus = assign_cv_split(clean, cfg["seed"], cfg["cv_fraction"])
        else:
            bank = make_noise_bank(cfg["seed"], n_clips=cfg["n_noise_clips"])
            corpus = build_multicondition(clean, bank, cfg["seed"],
                                          snr_range=(cfg["snr_low"], cfg["snr_high"]),
                                          cv_fraction=cfg["cv_fraction"])
        write_corpus(corpus, out)
        _echo_config(out, "gen", cfg)
    logger.info("wrote %d utterances to %s", len(corpus), out)
    return out


def train_config_from(cfg, corpus):
    data = cfg["data"]
    if data is None:
        data = "noisy" if any(u.is_noisy for u in corpus) else "clean"
    overrides = {k: cfg[k] for k in ("class_lr", "class_init", "instance_lr", "instance_init",
                                     "weight_decay") if cfg[k] is not None}
    for k in ("model_lr", "batch_utterances", "max_epochs", "early_stop_patience",
              "plateau_patience", "plateau_factor", "hidden", "n_layers", "seed"):
        overrides[k] = cfg[k]
    return TrainConfig.for_table1(cfg["mode"], data, **overrides), data


def cmd_train(cfg):
    corpus = _load_corpus(cfg["corpus"])
    tcfg, data = train_config_from(cfg, corpus)
    run_dir = _resolve_path(cfg["run_dir"])
    with run_lock(run_dir):
        train_data, cv_data = split_frame_data(corpus)
        result = train(tcfg, train_data, cv_data, n_classes=corpus.inventory.n_classes,
                       run_dir=run_dir)
        result.model.save(run_dir / "model.bin",
                          {"train_config": tcfg.to_dict(), "data": data,
                           "best_epoch": result.best_epoch,
                           "frame_spec": corpus.frame_spec.to_dict()})
        hmm = fit_keyword_hmm(corpus)
        (run_dir / "hmm.json").write_text(json.dumps({
            "states": hmm.states, "background": hmm.background,
            "log_self": hmm.log_self.tolist(), "log_forward": hmm.log_forward.tolist()},
            indent=2) + "\n")
        resolved = {k: getattr(tcfg, k) for k in ("class_lr", "class_init", "instance_lr",
                                                 "instance_init", "weight_decay")}
        _echo_config(run_dir, "train", {**cfg, **resolved, "data": data})
    logger.info("best epoch %d, cv loss %.5f", result.best_epoch,
                min(e["cv_loss"] for e in result.log))
    return run_dir


def _load_run(run_dir):
    ckpt = run_dir / "model.bin"
    if not ckpt.exists():
        raise RuntimeFault(f"no checkpoint at {ckpt}")
    h = json.loads((run_dir / "hmm.json").read_text())
    hmm = KeywordHmm(h["states"], h["log_self"], h["log_forward"], h["background"])
    return AcousticModel.load(ckpt), hmm


def cmd_eval(cfg):
    run_dir = _resolve_path(cfg["run_dir"])
    model, hmm = _load_run(run_dir)
    corpus = _load_corpus(cfg["corpus"])
    if not corpus.split(cfg["split"]):
        raise RuntimeFault(f"corpus has no '{cfg['split']}' utterances")
    with run_lock(run_dir):
        rows, durations = score_corpus_split(model, hmm, corpus, cfg["split"], cfg["method"],
                                             cfg["max_window"])
        write_scores(run_dir / "scores.csv", rows)
        trials = detection_trials(rows, durations)
        point = frr_at_fa_rate(trials, cfg["fa_per_hour"])
        write_det_csv(run_dir / "det.csv", det_curve(trials, cfg["det_points"],
                                                     include=(cfg["fa_per_hour"],)))
        metrics = {"fa_per_hour": point.fa_per_hour, "frr": point.frr,
                   "threshold": point.threshold, "unreachable": point.unreachable,
                   "n_positive": sum(r[2] for r in rows), "n_negative": sum(not r[2] for r in rows),
                   "negative_hours": sum(d for r, d in zip(rows, durations) if not r[2]) / 3600}
        (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        _echo_config(run_dir, "eval", cfg)
    print(f"FRR {point.frr:.4f} at {point.fa_per_hour:g} FA/hr (threshold {point.threshold:.4f}"
          f"{', target unreachable' if point.unreachable else ''})")
    return metrics


def cmd_report(cfg):
    run_dir = _resolve_path(cfg["run_dir"])
    corpus_dir = _resolve_path(cfg["corpus"])
    if not (corpus_dir / "manifest.jsonl").exists():
        raise RuntimeFault(f"no corpus at {corpus_dir}")
    snaps = sorted((run_dir / "sigmas").glob("epoch_*.csv")) if (run_dir / "sigmas").exists() else []
    with run_lock(run_dir):
        report = []
        if snaps:
            rows = [r for p in snaps for r in read_snapshot_csv(p)]
            report = sigma_distribution_report(rows, read_manifest(corpus_dir))
            write_report_csv(run_dir / "report.csv", report)
        if cfg["svg"]:
            det = []
            if (run_dir / "scores.csv").exists():
                durations = {r["id"]: r["duration_seconds"] for r in read_manifest(corpus_dir)}
                scored = read_scores(run_dir / "scores.csv")
                det = det_curve(detection_trials(scored, [durations[i] for i, _, _ in scored]))
            render_svg(report, det, run_dir / "report.svg")
    if not snaps:
        logger.info("no sigma snapshots in %s (baseline run?)", run_dir)
    return report


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # every other failure is a runtime fault
        logger.debug("runtime fault", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
