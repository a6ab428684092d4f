"""Command-line entry point.

Every option can come from a flat ``key = value`` file (``--config``) or a
flag; flags win over the file, the file over built-in defaults.  Each run
writes ``config.resolved`` next to its outputs, which can be fed back with
``--config`` to repeat it.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import LabeledDataset, SplitSpec, limited_split, read_idx
from .errors import ConfigError, NNLaunderError
from .glyphs import digit_corpus, synth_letters
from .launder import LaunderConfig
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.model import predict
from .nn.presets import PRESETS, build_preset
from .nn.train import Interleave, OptimizerConfig, train
from .pipeline import (LaunderingData, RoundConfig, derive_seed, evaluate, fmt, matrix_csv,
                       run_laundering, vanilla_curve)
from .reconstruct import ReconstructionConfig, mad_analysis, reconstruct_all, save_trigger
from .watermark import (KINDS, WatermarkScheme, load_watermark_set,
                        interleave_count, make_watermark_set, save_watermark_set, wm_accuracy)

log = logging.getLogger("nnlaunder")

COMMANDS = ("train", "embed", "reconstruct", "launder", "threshold", "eval", "experiment")

# key: (type, default, help)
SCHEMA = {
    "seed": (int, 0, "top-level seed; stages draw named sub-streams from it"),
    "out": (str, "", "output path (checkpoint for train/embed, directory otherwise)"),
    "data": (str, "", "IDX directory or synthetic[:TRAIN_PER_CLASS[:TEST_PER_CLASS]]"),
    "data_cache": (str, "", "directory caching rendered synthetic corpora"),
    "train_limit": (int, 0, "use at most this many training images (0 = all)"),
    "preset": (str, "mnist-zhang", "architecture preset"),
    "model": (str, "", "input checkpoint"),
    "epochs": (int, 5, "training epochs"),
    "lr": (float, 1e-3, "training learning rate"),
    "batch": (int, 64, "training batch size"),
    "scheme": (str, "none", "watermark kind or none"),
    "target": (int, 0, "watermark target label"),
    "wm_count": (int, 0, "training watermark items (0 = 2%% of the training set)"),
    "wm_eval_count": (int, 200, "held-out watermark items for measurement"),
    "noise_sigma": (float, 0.3, "noise watermark standard deviation"),
    "unrelated_letter": (str, "m", "letter glyph used by the unrelated watermark"),
    "wm": (str, "", "saved watermark-set prefix used for measurement"),
    "frac": (float, 0.006, "fraction of the training set available to the adversary"),
    "split_mode": (str, "fraction", "fraction or one-per-class"),
    "rounds": (int, 3, "laundering rounds"),
    "threshold_mode": (str, "", "sigma or absolute (default: absolute when dt/ct given, else sigma)"),
    "dt": (float, 0.0, "dense activation-difference threshold"),
    "ct": (float, 0.0, "conv activation-difference threshold"),
    "k": (float, 2.0, "sigma-mode multiplier"),
    "layer_range": (str, "", "FIRST-LAST over parametric layers, second-half, or empty for all hidden"),
    "reset_mode": (str, "zero", "zero or layer-median"),
    "reset_batchnorm": (bool, False, "reinitialise BatchNorm channels of reset units"),
    "strict_listing": (bool, False, "compare clean averages instead of differences"),
    "retrain_epochs": (int, 20, "retraining epochs per round"),
    "retrain_lr": (float, 1e-3, "retraining learning rate"),
    "mask_copies": (int, -1, "mask renderings per round (-1 = |X|/10)"),
    "recon_steps": (int, 300, "trigger optimisation steps"),
    "recon_lambda": (float, 1e-3, "initial mask penalty"),
    "recon_batch": (int, 32, "trigger optimisation batch size"),
    "recon_step_size": (float, 0.1, "trigger optimiser step size"),
    "recon_tau": (float, 0.99, "target attack success for penalty adaptation"),
    "recon_adapt": (bool, True, "adapt the mask penalty"),
    "threshold": (float, -1.0, "vanilla threshold for the verdict (-1 = unknown)"),
    "threshold_epochs": (int, 0, "epochs for the vanilla curve (0 = epochs)"),
}

BOOL_TRUE = ("1", "true", "yes", "on")
BOOL_FALSE = ("0", "false", "no", "off")


def _coerce(key, raw):
    typ = SCHEMA[key][0]
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            if text.lower() in BOOL_TRUE:
                return True
            if text.lower() in BOOL_FALSE:
                return False
            raise ValueError(text)
        return typ(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    values = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def resolve(file_values: dict, flag_values: dict) -> dict:
    cfg = {k: spec[1] for k, spec in SCHEMA.items()}
    cfg.update(file_values)
    cfg.update({k: _coerce(k, v) for k, v in flag_values.items() if v is not None})
    explicit = set(file_values) | {k for k, v in flag_values.items() if v is not None}
    if not cfg["threshold_mode"]:
        cfg["threshold_mode"] = "absolute" if {"dt", "ct"} & explicit else "sigma"
    validate(cfg)
    return cfg


def validate(cfg):
    if cfg["preset"] not in PRESETS:
        raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {cfg['preset']!r}")
    if cfg["scheme"] != "none" and cfg["scheme"] not in KINDS:
        raise ConfigError(f"scheme must be none or one of {KINDS}")
    if cfg["threshold_mode"] not in ("", "sigma", "absolute"):
        raise ConfigError("threshold_mode must be sigma or absolute")
    if cfg["reset_mode"] not in ("zero", "layer-median"):
        raise ConfigError("reset_mode must be zero or layer-median")
    if cfg["split_mode"] not in ("fraction", "one-per-class"):
        raise ConfigError("split_mode must be fraction or one-per-class")
    if not 0 < cfg["frac"] <= 1:
        raise ConfigError("frac must lie in (0, 1]")
    for key in ("epochs", "retrain_epochs", "train_limit", "wm_count", "threshold_epochs"):
        if cfg[key] < 0:
            raise ConfigError(f"{key} must be non-negative")
    for key in ("rounds", "batch", "recon_steps", "recon_batch", "wm_eval_count"):
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be positive")
    for key in ("lr", "retrain_lr", "recon_lambda", "recon_step_size", "noise_sigma", "k"):
        if not cfg[key] > 0:
            raise ConfigError(f"{key} must be positive")
    if not 0 < cfg["recon_tau"] <= 1:
        raise ConfigError("recon_tau must lie in (0, 1]")
    _layer_range(cfg)


def write_resolved(cfg, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {_render(cfg[k])}" for k in SCHEMA]
    (directory / "config.resolved").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


# -- config -> module objects -------------------------------------------------


def _layer_range(cfg):
    text = cfg["layer_range"].strip()
    if not text:
        return None
    if text == "second-half":
        return text
    try:
        lo, hi = (int(p) for p in text.split("-"))
    except ValueError:
        raise ConfigError(f"layer_range must look like FIRST-LAST, got {text!r}") from None
    if lo < 0 or hi < lo:
        raise ConfigError(f"layer_range {text!r} is empty or negative")
    return (lo, hi)


def round_config(cfg) -> RoundConfig:
    return RoundConfig(
        rounds=cfg["rounds"],
        retrain=OptimizerConfig(learning_rate=cfg["retrain_lr"], batch_size=cfg["batch"], epochs=cfg["retrain_epochs"]),
        recon=recon_config(cfg),
        launder=LaunderConfig(DT=cfg["dt"], CT=cfg["ct"], threshold_mode=cfg["threshold_mode"], k=cfg["k"],
                              layer_range=_layer_range(cfg), reset_mode=cfg["reset_mode"],
                              reset_batchnorm=cfg["reset_batchnorm"], strict_listing=cfg["strict_listing"]),
        split=split_spec(cfg),
        per_image_mask_copies=None if cfg["mask_copies"] < 0 else cfg["mask_copies"],
        seed=derive_seed(cfg["seed"], "launder"),
    )


def recon_config(cfg) -> ReconstructionConfig:
    return ReconstructionConfig(lambda_l1=cfg["recon_lambda"], lambda_adapt=cfg["recon_adapt"],
                                target_success=cfg["recon_tau"], steps=cfg["recon_steps"],
                                step_size=cfg["recon_step_size"], batch_size=cfg["recon_batch"],
                                seed=derive_seed(cfg["seed"], "recon"))


def split_spec(cfg) -> SplitSpec:
    return SplitSpec(mode=cfg["split_mode"], fraction=cfg["frac"], seed=derive_seed(cfg["seed"], "split"))


def train_config(cfg, epochs=None) -> OptimizerConfig:
    return OptimizerConfig(learning_rate=cfg["lr"], batch_size=cfg["batch"],
                           epochs=cfg["epochs"] if epochs is None else epochs,
                           seed=derive_seed(cfg["seed"], "train"))


IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(root: Path, name: str) -> Path:
    for cand in (root / name, root / (name + ".gz"), root / name.replace("-idx", ".idx")):
        if cand.exists():
            return cand
    raise ConfigError(f"{root}: missing {name}[.gz]")


def load_data(cfg) -> tuple[LabeledDataset, LabeledDataset]:
    spec = cfg["data"]
    if not spec:
        raise ConfigError("no data given (--data DIR or --data synthetic)")
    if spec.startswith("synthetic"):
        parts = spec.split(":")
        try:
            per_train = int(parts[1]) if len(parts) > 1 else 1000
            per_test = int(parts[2]) if len(parts) > 2 else 200
        except ValueError:
            raise ConfigError(f"bad synthetic data spec {spec!r}") from None
        train_set, test_set = digit_corpus(per_train, per_test, seed=derive_seed(cfg["seed"], "data"),
                                           cache_dir=cfg["data_cache"] or None)
    else:
        root = Path(spec)
        if not root.is_dir():
            raise ConfigError(f"data directory {root} does not exist")
        train_set = read_idx(*(_find(root, n) for n in IDX_NAMES["train"]))
        test_set = read_idx(*(_find(root, n) for n in IDX_NAMES["test"]), class_count=train_set.class_count)
    if cfg["train_limit"] and cfg["train_limit"] < len(train_set):
        pick = np.random.default_rng(derive_seed(cfg["seed"], "subset")).permutation(len(train_set))
        train_set = train_set.subset(np.sort(pick[:cfg["train_limit"]]))
    return train_set, test_set


def make_scheme(cfg) -> WatermarkScheme:
    kind = cfg["scheme"]
    kw = dict(kind=kind, target_label=cfg["target"], seed=derive_seed(cfg["seed"], "wm-pattern"))
    if kind == "noise":
        kw["sigma"] = cfg["noise_sigma"]
    if kind == "trigger-set":
        kw["label_seed"] = derive_seed(cfg["seed"], "wm-labels")
    return WatermarkScheme(**kw)


def build_watermarks(cfg, scheme, train_set, test_set):
    """(training set, held-out measurement set) for ``scheme``."""
    count = cfg["wm_count"] or max(1, round(0.02 * len(train_set)))
    n_eval = cfg["wm_eval_count"]
    if scheme.kind == "unrelated":
        pool = synth_letters(cfg["unrelated_letter"], count + n_eval, seed=derive_seed(cfg["seed"], "wm-pool"))
        first = dataclasses.replace(scheme, source=pool.subset(np.arange(count)))
        second = dataclasses.replace(scheme, source=pool.subset(np.arange(count, count + n_eval)))
        return (make_watermark_set(None, first, count, class_count=train_set.class_count),
                make_watermark_set(None, second, n_eval, class_count=train_set.class_count))
    if scheme.kind == "trigger-set":
        wm = make_watermark_set(train_set, scheme, count)
        return wm, wm
    return (make_watermark_set(train_set, scheme, count, seed=derive_seed(cfg["seed"], "wm-train")),
            make_watermark_set(test_set, scheme, n_eval, seed=derive_seed(cfg["seed"], "wm-eval")))


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _need(cfg, key):
    if not cfg[key]:
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    return cfg[key]


def _load_model(cfg):
    path = Path(_need(cfg, "model"))
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def _load_wm(cfg):
    prefix = cfg["wm"]
    if not prefix:
        return None
    if not Path(f"{prefix}.json").is_file():
        raise ConfigError(f"watermark set {prefix} not found")
    try:
        wm, _ = load_watermark_set(prefix)
    except ValueError as exc:
        raise ConfigError(f"watermark set {prefix}: {exc}") from exc
    return wm


# -- commands -----------------------------------------------------------------


def _embed_trace(model, train_set, wm_train, opt):
    net = model.copy()
    trace = train(net, train_set, opt, interleave=Interleave(wm_train.images, wm_train.labels,
                                                             interleave_count(opt.batch_size)))
    return net, trace


def cmd_train(cfg):
    """Train a model from scratch, optionally embedding a watermark."""
    out = Path(_need(cfg, "out"))
    train_set, test_set = load_data(cfg)
    model = build_preset(cfg["preset"], seed=derive_seed(cfg["seed"], "init"))
    return _fit_and_save(cfg, out, model, train_set, test_set, train_config(cfg))


def cmd_embed(cfg):
    """Fine-tune a trained checkpoint so that it learns a watermark."""
    if cfg["scheme"] == "none":
        raise ConfigError("embed needs --scheme")
    ck = _load_model(cfg)
    out = Path(_need(cfg, "out"))
    train_set, test_set = load_data(cfg)
    return _fit_and_save(cfg, out, ck.model, train_set, test_set, train_config(cfg))


def _fit_and_save(cfg, out, model, train_set, test_set, opt):
    out.parent.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out.parent)
    scheme = make_scheme(cfg) if cfg["scheme"] != "none" else None
    if scheme is None:
        net = model.copy()
        trace = train(net, train_set, opt)
        wm_train = wm_eval = None
    else:
        wm_train, wm_eval = build_watermarks(cfg, scheme, train_set, test_set)
        net, trace = _embed_trace(model, train_set, wm_train, opt)
    test_acc = float((predict(net, test_set.images) == test_set.labels).mean())
    meta = {"preset": cfg["preset"], "scheme": scheme.kind if scheme else "none", "test_accuracy": fmt(test_acc),
            "epochs": str(opt.epochs), "lr": fmt(opt.learning_rate), "batch": str(opt.batch_size),
            "seed": str(opt.seed)}
    sidecar = {"test_accuracy": test_acc, "scheme": scheme.to_dict() if scheme else None}
    line = f"test_acc={fmt(test_acc)}"
    if scheme is not None:
        stem = out.with_suffix("")
        save_watermark_set(wm_train, scheme, f"{stem}-wm-train")
        save_watermark_set(wm_eval, scheme, f"{stem}-wm-eval")
        acc = wm_accuracy(net, wm_eval)
        sidecar.update(wm_accuracy=acc, wm_eval=f"{stem}-wm-eval")
        meta["wm_accuracy"] = fmt(acc)
        line += f" wm_acc={fmt(acc)}"
    save_checkpoint(net, out, metadata=meta)
    Path(f"{out}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_csv(out.with_suffix(".trace.csv"), ("epoch", "loss", "accuracy"),
               [(i + 1, fmt(l), fmt(a)) for i, (l, a) in enumerate(zip(trace.loss, trace.accuracy))])
    print(line)
    return 0


def cmd_reconstruct(cfg):
    """Reverse-engineer one trigger per class and rank the classes."""
    ck = _load_model(cfg)
    outdir = Path(_need(cfg, "out"))
    train_set, _ = load_data(cfg)
    X, _ = limited_split(train_set, split_spec(cfg))
    write_resolved(cfg, outdir)
    triggers = reconstruct_all(ck.model, X, recon_config(cfg))
    report = mad_analysis([t.l1 for t in triggers])
    tdir = outdir / "triggers"
    tdir.mkdir(exist_ok=True)
    for t in triggers:
        save_trigger(t, tdir / f"class{t.target}")
    _write_csv(outdir / "triggers.csv", ("class", "l1", "attack_success", "anomaly_index"),
               [(t.target, fmt(t.l1), fmt(t.attack_success), fmt(report.anomaly_index[t.target])) for t in triggers])
    summary = {"most_likely": report.most_likely, "least_likely": report.least_likely,
               "flagged": report.flagged, "degenerate": report.degenerate,
               "median": report.median, "mad": report.mad}
    (outdir / "anomaly.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"most_likely={report.most_likely} least_likely={report.least_likely}")
    return 0


def _launder(cfg, model, train_set, test_set, wm_eval, outdir, threshold=None):
    rc = round_config(cfg)
    X, _ = limited_split(train_set, rc.split)
    if threshold is None and cfg["threshold"] >= 0:
        threshold = cfg["threshold"]

    def on_round(rec, net):
        rdir = outdir / f"round{rec.round}"
        (rdir / "triggers").mkdir(parents=True, exist_ok=True)
        for t in rec.triggers:
            save_trigger(t, rdir / "triggers" / f"class{t.target}")
        (rdir / "resets.json").write_text(rec.reset_report.to_json() + "\n", encoding="utf-8")
        save_checkpoint(net, rdir / "model.ckpt", metadata={"round": rec.round})
        if wm_eval is not None:
            ev = evaluate(net, test_set, wm_eval)
            (rdir / "wm_confusion.csv").write_text(matrix_csv(ev.confusion), encoding="utf-8")

    net, report = run_laundering(model, LaunderingData(X, test_set, wm_eval, threshold), rc, on_round=on_round)
    save_checkpoint(net, outdir / "laundered.ckpt", metadata={"rounds": len(report.records)})
    (outdir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (outdir / "rounds.csv").write_text(report.rounds_csv(), encoding="utf-8")
    return net, report


def cmd_launder(cfg):
    """Run laundering rounds on a checkpoint."""
    ck = _load_model(cfg)
    outdir = Path(_need(cfg, "out"))
    train_set, test_set = load_data(cfg)
    wm_eval = _load_wm(cfg)
    write_resolved(cfg, outdir)
    _, report = _launder(cfg, ck.model, train_set, test_set, wm_eval, outdir)
    print(report.rounds_csv(), end="")
    return 0


def _threshold(cfg, train_set, wm_eval, outdir):
    epochs = cfg["threshold_epochs"] or cfg["epochs"]
    if epochs < 1:
        raise ConfigError("the vanilla threshold needs at least one epoch")
    curve = vanilla_curve(cfg["preset"], train_set, wm_eval, train_config(cfg, epochs),
                          seed=derive_seed(cfg["seed"], "vanilla"))
    _write_csv(outdir / "threshold_curve.csv", ("epoch", "wm_acc"), [(i + 1, fmt(v)) for i, v in enumerate(curve)])
    value = max(curve)
    (outdir / "threshold.json").write_text(json.dumps({"vanilla_threshold": value, "epochs": epochs}, indent=2) + "\n",
                                           encoding="utf-8")
    return value


def cmd_threshold(cfg):
    """Measure the vanilla threshold curve of a clean model."""
    outdir = Path(_need(cfg, "out"))
    train_set, test_set = load_data(cfg)
    wm_eval = _load_wm(cfg)
    if wm_eval is None:
        if cfg["scheme"] == "none":
            raise ConfigError("threshold needs --wm or --scheme")
        _, wm_eval = build_watermarks(cfg, make_scheme(cfg), train_set, test_set)
    write_resolved(cfg, outdir)
    print(f"vanilla_threshold={fmt(_threshold(cfg, train_set, wm_eval, outdir))}")
    return 0


def cmd_eval(cfg):
    """Report test and watermark accuracy with confusion matrices."""
    ck = _load_model(cfg)
    outdir = Path(_need(cfg, "out"))
    _, test_set = load_data(cfg)
    wm_eval = _load_wm(cfg)
    write_resolved(cfg, outdir)
    ev = evaluate(ck.model, test_set, wm_eval)
    _write_csv(outdir / "metrics.csv", ("test_acc", "wm_acc"), [(fmt(ev.test_accuracy), fmt(ev.wm_accuracy))])
    (outdir / "test_confusion.csv").write_text(matrix_csv(ev.test_confusion), encoding="utf-8")
    if wm_eval is not None:
        (outdir / "wm_confusion.csv").write_text(matrix_csv(ev.confusion), encoding="utf-8")
    print(f"test_acc={fmt(ev.test_accuracy)} wm_acc={fmt(ev.wm_accuracy)}")
    return 0


def cmd_experiment(cfg):
    """Embed a watermark, measure the vanilla threshold, then launder."""
    if cfg["scheme"] == "none":
        raise ConfigError("experiment needs --scheme")
    outdir = Path(_need(cfg, "out"))
    train_set, test_set = load_data(cfg)
    write_resolved(cfg, outdir)
    scheme = make_scheme(cfg)
    wm_train, wm_eval = build_watermarks(cfg, scheme, train_set, test_set)
    save_watermark_set(wm_eval, scheme, outdir / "wm-eval")
    model = build_preset(cfg["preset"], seed=derive_seed(cfg["seed"], "init"))
    net, _ = _embed_trace(model, train_set, wm_train, train_config(cfg))
    save_checkpoint(net, outdir / "watermarked.ckpt", metadata={"scheme": scheme.kind})
    before = evaluate(net, test_set, wm_eval)
    threshold = _threshold(cfg, train_set, wm_eval, outdir)
    _, report = _launder(cfg, net, train_set, test_set, wm_eval, outdir / "launder", threshold=threshold)
    _write_csv(outdir / "summary.csv", ("stage", "test_acc", "wm_acc"),
               [("original", fmt(before.test_accuracy), fmt(before.wm_accuracy))]
               + [(f"round{r.round}", fmt(r.test_accuracy), fmt(r.wm_accuracy)) for r in report.records])
    print(f"original test_acc={fmt(before.test_accuracy)} wm_acc={fmt(before.wm_accuracy)}")
    print(f"vanilla_threshold={fmt(threshold)} verdict={fmt(report.verdict)}")
    print(report.rounds_csv(), end="")
    return 0


HANDLERS = {
    "train": cmd_train,
    "embed": cmd_embed,
    "reconstruct": cmd_reconstruct,
    "launder": cmd_launder,
    "threshold": cmd_threshold,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nnlaunder", description="Watermark laundering experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=(HANDLERS[name].__doc__ or name).strip().splitlines()[0])
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, (typ, _, text) in SCHEMA.items():
            # everything arrives as text so that flag and file values are coerced alike
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar=typ.__name__.upper(),
                           help=text)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: getattr(args, k) for k in SCHEMA}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(file_values, flags)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NNLaunderError, ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
