"""Command line interface: ``mtre {synth,train,calibrate,eval,kl}``.

Settings come from an optional JSON config (one section per subcommand) and
are overridden by flags. Outputs go under ``--out`` with fixed file names.
Exit codes: 0 success, 2 config/validation error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from ._rng import substream
from .aggregation import classify_sentence, write_results
from .baselines import ORIENTATION, PTrueConfig, first_token_probe_with_cutoff, score_baseline_with_cutoff
from .calibration import CalibrationParams, classify_sentence_tau, cross_fit, parse_objective
from .classifier import KINDS, AttentionConfig, TrainConfig, load_head, save_head, train_reliability_head
from .dataset import DEFAULT_T_CAP, build_token_dataset, load_dataset, save_dataset
from .divergence import positionwise_kl_curve, write_curves_csv
from .errors import ConfigError, DataError, MTREError
from .metrics import binary_report, format_table, write_report
from .synthgen import SynthConfig, describe, generate

log = logging.getLogger("mtre")

HEAD_FILE = "head.bin"
LOSS_FILE = "train_loss.csv"
PARAMS_FILE = "calibration.json"
RESULTS_FILE = "results.jsonl"
METRICS_FILE = "metrics.json"
KL_FILE = "kl_curve.csv"
GROUND_TRUTH_FILE = "ground_truth.json"

ALL_METHODS = ("mtre", "mtre_tau", "seq_logprob", "lp_first_token", "p_true", "token_sar")
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def derive_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(0, 2**63 - 1))


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return cfg


def _pick(flag, section: dict, key: str, default=None):
    if flag is not None:
        return flag
    return section.get(key, default)


def _train_settings(args, cfg: dict, seed: int):
    """(TrainConfig, kind, t_cap, AttentionConfig) from the ``train`` section and flags."""
    sec = dict(cfg.get("train", {}))
    kind = _pick(args.kind, sec, "kind", "attention")
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}")
    t_cap = int(_pick(args.t_cap, sec, "t_cap", DEFAULT_T_CAP))
    arch = AttentionConfig(**sec.get("attention", {}))
    fields = {k: sec[k] for k in TrainConfig.__dataclass_fields__ if k in sec}
    if args.epochs is not None:
        fields["epochs"] = args.epochs
    if args.lr is not None:
        fields["learning_rate"] = args.lr
    fields.setdefault("seed", derive_seed(seed, "train"))
    try:
        config = TrainConfig(**fields)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return config, kind, t_cap, arch


def _root(flag, cfg: dict, key: str) -> Path:
    path = flag if flag is not None else cfg.get("data", {}).get(key)
    if path is None:
        raise ConfigError(f"no {key} dataset root given (--{key}-root or data.{key} in the config)")
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{key} dataset root not found: {p}")
    return p


def cmd_synth(args, cfg: dict, out: Path) -> None:
    sec = dict(cfg.get("synth", {}))
    test_fraction = float(_pick(args.test_fraction, sec, "test_fraction", 0.0))
    sec.pop("test_fraction", None)
    overrides = {
        "vocab_size": args.vocab_size, "num_sentences": args.num_sentences, "onset": args.onset,
        "signal_strength": args.signal, "noise_scale": args.noise, "tokens_per_sentence": args.tokens,
    }
    sec.update({k: v for k, v in overrides.items() if v is not None})
    sec.setdefault("seed", derive_seed(args.seed, "synth"))
    config = SynthConfig.from_dict(sec)
    if not 0 <= test_fraction < 1:
        raise ConfigError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    meta, records = generate(config)
    out.mkdir(parents=True, exist_ok=True)
    if test_fraction > 0:
        n_test = int(round(test_fraction * len(records)))
        save_dataset(meta, records[:len(records) - n_test], out / "train")
        save_dataset(meta, records[len(records) - n_test:], out / "test")
    else:
        save_dataset(meta, records, out)
    with open(out / GROUND_TRUTH_FILE, "w", encoding="utf-8") as fh:
        json.dump(describe(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("wrote %d sentences to %s", len(records), out)


def cmd_train(args, cfg: dict, out: Path) -> None:
    config, kind, t_cap, arch = _train_settings(args, cfg, args.seed)
    _, records = load_dataset(_root(args.train_root, cfg, "train"))
    head = train_reliability_head(build_token_dataset(records, t_cap, config.seed), config, kind, arch)
    out.mkdir(parents=True, exist_ok=True)
    save_head(head, out / HEAD_FILE)
    with open(out / LOSS_FILE, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(head.history, 1):
            w.writerow([i, repr(float(v))])
    log.info("trained %s head for %d epochs", kind, config.epochs)


def cmd_calibrate(args, cfg: dict, out: Path) -> None:
    config, kind, t_cap, arch = _train_settings(args, cfg, args.seed)
    sec = cfg.get("calibrate", {})
    k_cv = int(_pick(args.k_cv, sec, "k_cv", 5))
    if k_cv < 2:
        raise ConfigError(f"K_cv must be >= 2, got {k_cv}")
    objective = _pick(args.objective, sec, "objective", "auroc")
    parse_objective(objective)
    grid = sec.get("grid")
    if grid is not None:
        grid = [(float(u), float(b), int(t)) for u, b, t in grid]
    _, records = load_dataset(_root(args.train_root, cfg, "train"))
    res = cross_fit(records, k_cv, config, kind, t_cap, objective, arch=arch, grid=grid,
                    seed=derive_seed(args.seed, "split"))
    for s in res.fold_summaries:
        auc = "n/a" if s["auroc"] is None else f"{s['auroc']:.4f}"
        log.info("fold %d: %d sentences, %d tokens, OOF evidence AUROC %s",
                 s["fold"], s["sentences"], s["tokens"], auc)
    out.mkdir(parents=True, exist_ok=True)
    res.params.save(out / PARAMS_FILE)
    save_head(res.head, out / HEAD_FILE)
    p = res.params
    log.info("calibrated C*=%.6g c_u=%s c_b=%s t_max=%d", p.c_star, p.c_u, p.c_b, p.t_max)


def _selected_methods(args, sec: dict, have_head: bool, have_params: bool) -> list[str]:
    requested = args.methods.split(",") if args.methods else sec.get("methods")
    if requested is None:
        methods = [m for m in ALL_METHODS
                   if (m != "mtre" or have_head) and (m != "mtre_tau" or (have_head and have_params))]
    else:
        methods = [m.strip() for m in requested if m.strip()]
    for m in methods:
        if m not in ALL_METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {ALL_METHODS}")
        if m in ("mtre", "mtre_tau") and not have_head:
            raise ConfigError(f"method {m} needs a head file (--head)")
        if m == "mtre_tau" and not have_params:
            raise ConfigError("method mtre_tau needs calibration params (--params)")
    return methods


def cmd_eval(args, cfg: dict, out: Path) -> None:
    sec = cfg.get("eval", {})
    config, _, t_cap, _ = _train_settings(args, cfg, args.seed)
    head_path = _pick(args.head, cfg, "head")
    params_path = _pick(args.params, cfg, "params")
    methods = _selected_methods(args, sec, head_path is not None, params_path is not None)
    meta, test = load_dataset(_root(args.test_root, cfg, "test"))
    train = None
    if any(m in ("seq_logprob", "lp_first_token", "p_true", "token_sar") for m in methods):
        _, train = load_dataset(_root(args.train_root, cfg, "train"))
    head = load_head(head_path, meta.vocab_size) if head_path else None
    params = CalibrationParams.load(params_path) if params_path else None
    delta = float(sec.get("delta", 0.0))
    p_true = PTrueConfig(**sec.get("p_true", {}))
    labels = np.array([r.label for r in test])

    all_results, rows = [], []
    for m in methods:
        if m == "mtre":
            results = [classify_sentence(head, r, t_cap, 1.0, delta) for r in test]
            threshold = delta
        elif m == "mtre_tau":
            results = [classify_sentence_tau(head, r, params) for r in test]
            threshold = 0.0
        elif m == "lp_first_token":
            probe_config = replace(config, seed=derive_seed(args.seed, "probe"))
            results, threshold = first_token_probe_with_cutoff(train, test, probe_config)
        else:
            results, threshold = score_baseline_with_cutoff(m, train, test, t_cap, p_true)
        oriented = ORIENTATION[m] * np.array([r.score for r in results])
        rows.append(binary_report(m, "test", oriented, labels, [r.decision for r in results], threshold))
        all_results.extend(results)

    out.mkdir(parents=True, exist_ok=True)
    write_results(all_results, out / RESULTS_FILE)
    write_report(rows, out / METRICS_FILE)
    print(format_table(rows))


def cmd_kl(args, cfg: dict, out: Path) -> None:
    sec = cfg.get("kl", {})
    t_cap = int(_pick(args.t_cap, sec, "t_cap", DEFAULT_T_CAP))
    by_group = bool(args.by_group or sec.get("by_group", False))
    p_label = int(sec.get("p_label", 0))
    root = args.dataset or sec.get("dataset") or cfg.get("data", {}).get("train")
    if root is None:
        raise ConfigError("no dataset given for kl (--dataset or kl.dataset)")
    _, records = load_dataset(root)
    if by_group:
        if all(r.group is None for r in records):
            raise DataError("group split requested but no record carries a group tag")
    else:
        records = [replace(r, group=None) for r in records]
    curves = positionwise_kl_curve(records, t_cap, p_label)
    out.mkdir(parents=True, exist_ok=True)
    write_curves_csv(curves, out / KL_FILE)
    log.info("wrote %d curves x %d positions to %s", len(curves), t_cap, out / KL_FILE)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "calibrate": cmd_calibrate, "eval": cmd_eval, "kl": cmd_kl}


def _common_flags(default) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=default, help="JSON config with per-subcommand sections")
    common.add_argument("--seed", type=int, default=default, help="global seed (default: config 'seed' or 0)")
    common.add_argument("--out", default=default, help="output directory (default: .)")
    common.add_argument("--threads", type=int, default=default, help="cap on BLAS worker threads")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtre", description=__doc__.splitlines()[0], parents=[_common_flags(None)])
    # suppressed defaults keep flags given before the subcommand from being reset
    common = _common_flags(argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    def train_flags(p):
        p.add_argument("--train-root")
        p.add_argument("--kind", choices=KINDS)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--t-cap", type=int)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--num-sentences", type=int)
    p.add_argument("--tokens", type=int)
    p.add_argument("--onset", type=int)
    p.add_argument("--signal", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--test-fraction", type=float)

    p = sub.add_parser("train", parents=[common], help="train a reliability head")
    train_flags(p)

    p = sub.add_parser("calibrate", parents=[common], help="cross-fit temperature and stopping thresholds")
    train_flags(p)
    p.add_argument("--k-cv", type=int)
    p.add_argument("--objective")

    p = sub.add_parser("eval", parents=[common], help="score a test set with MTRE and baselines")
    train_flags(p)
    p.add_argument("--test-root")
    p.add_argument("--head")
    p.add_argument("--params")
    p.add_argument("--methods", help="comma-separated subset of " + ",".join(ALL_METHODS))

    p = sub.add_parser("kl", parents=[common], help="positionwise KL divergence curve")
    p.add_argument("--dataset")
    p.add_argument("--t-cap", type=int)
    p.add_argument("--by-group", action="store_true")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("MTRE_LOG", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        if args.seed is None:
            args.seed = int(cfg.get("seed", 0))
        out = Path(args.out or cfg.get("out", "."))
        limit = nullcontext()
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError(f"--threads must be >= 1, got {args.threads}")
            from threadpoolctl import threadpool_limits
            limit = threadpool_limits(limits=args.threads)
        with limit:
            COMMANDS[args.command](args, cfg, out)
    except MTREError as exc:
        print(f"mtre {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
