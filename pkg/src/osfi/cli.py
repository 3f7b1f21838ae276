"""Command-line driver.

Every command writes into ``--out`` and refreshes ``manifest.json`` there,
which lists each output file with its sha256. Reports are sorted-key JSON
with no timestamps, so reruns with the same inputs are byte-identical.

Settings resolve as built-in defaults, then ``--config`` (``key = value``
lines, ``#`` comments), then explicit flags.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import __version__
from .encoder import (load_checkpoint, manifest_path, parameter_report,
                      save_checkpoint)
from .errors import ConfigurationError, OSFIError, ProtocolError
from .evaluation import REPORT_FARS, histograms_csv
from .experiments import (K_GRID, ExperimentConfig, adapt, evaluate, gallery_sweep,
                          pretrain, resolve_mode, sweep_k)
from .matcher import MatcherConfig
from .protocol import (SyntheticConfig, file_sha256, generate_synthetic,
                       load_embeddings, make_split, save_embeddings)

SYNTH_KEYS = tuple(f.name for f in fields(SyntheticConfig) if f.name != "seed")
DEFAULTS = {"seed": 0, "m": 3, "k": 16, "matcher": "nac", "init": "wi", "mode": "bn",
            "far": ",".join(repr(f) for f in REPORT_FARS), "epochs": None, "lr": None,
            "gallery_pool": SyntheticConfig.gallery_pool, "ms": "1,2,3,4,5",
            "grid": ",".join(str(k) for k in K_GRID)}


def read_config_file(path):
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"{path}:{n}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def resolve(args):
    """Merge defaults, config file and flags into one flat dict of strings/values."""
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config_file(args.config))
    for key, value in vars(args).items():
        if value is not None and key not in ("command", "func", "config"):
            cfg[key] = value
    return cfg


def _typed(cfg, key, kind):
    value = cfg.get(key)
    if value is None:
        return None
    try:
        if kind is bool and isinstance(value, str):
            return value.lower() in ("1", "true", "yes")
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"bad value for {key}: {value!r}") from None


def _floats(text, key):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"{key} must be a comma-separated list of numbers") from None


def _ints(text, key):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"{key} must be a comma-separated list of integers") from None


def synthetic_config(cfg):
    types = {f.name: f.type for f in fields(SyntheticConfig)}
    kw = {"seed": _typed(cfg, "seed", int)}
    for key in SYNTH_KEYS:
        if key in cfg:
            kw[key] = _typed(cfg, key, int if types[key] in ("int", int) else float)
    return SyntheticConfig(**kw)


def experiment_config(cfg):
    exp = ExperimentConfig().with_seed(_typed(cfg, "seed", int))
    return replace(exp, m=_typed(cfg, "m", int), k=_typed(cfg, "k", int))


def matcher_config(cfg):
    kind = str(cfg["matcher"]).lower()
    kind = {"cos": "cosine"}.get(kind, kind)
    return MatcherConfig(kind, _typed(cfg, "k", int))


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(out, name, text):
    path = out / name
    path.write_text(text, encoding="utf-8")
    return path


def write_manifest(out, command, cfg):
    files = {p.name: file_sha256(p) for p in sorted(out.iterdir())
             if p.is_file() and p.name != "manifest.json"}
    _write(out, "manifest.json", _json({"command": command, "config": _echo(cfg), "files": files}))


def _echo(cfg):
    return {k: (v if isinstance(v, (int, float, str, bool)) or v is None else str(v))
            for k, v in sorted(cfg.items())}


def _out_dir(cfg):
    out = Path(cfg.get("out") or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ProtocolError(f"cannot create output directory {out}: {exc}") from None
    return out


def _load_raw(path):
    emb = load_embeddings(path)
    return emb.dataset(), file_sha256(path)


def _split(cfg, data):
    return make_split(data, _typed(cfg, "m", int), _typed(cfg, "seed", int),
                      gallery_pool=_typed(cfg, "gallery_pool", int))


def _require(cfg, key):
    if not cfg.get(key):
        raise ConfigurationError(f"--{key.replace('_', '-')} is required")
    return cfg[key]


def cmd_synth(cfg):
    out = _out_dir(cfg)
    scfg = synthetic_config(cfg)
    pre, ev = generate_synthetic(scfg)
    try:
        save_embeddings(out / "pretrain.txt", pre.x, pre.labels, kind="raw")
        save_embeddings(out / "eval.txt", ev.x, ev.labels, kind="raw")
    except OSError as exc:
        raise ProtocolError(f"cannot write datasets: {exc}") from None
    write_manifest(out, "synth", cfg)
    print(f"pretrain: {len(pre)} rows, {scfg.num_pretrain_ids} ids; "
          f"eval: {len(ev)} rows, {scfg.num_eval_ids} ids; dim {scfg.input_dim}")


def cmd_pretrain(cfg):
    out = _out_dir(cfg)
    data, data_sha = _load_raw(_require(cfg, "data"))
    exp = experiment_config(cfg)
    if cfg.get("epochs") is not None:
        exp = replace(exp, pretrain_epochs=_typed(cfg, "epochs", int))
    if cfg.get("lr") is not None:
        exp = replace(exp, pretrain_lr=_typed(cfg, "lr", float))
    exp = replace(exp, encoder=replace(exp.encoder, input_dim=data.dim))
    enc, clf, result = pretrain(data, exp)
    info = {"epochs": result.epochs, "steps": result.steps, "train_accuracy": result.accuracy,
            "converged": bool(result.converged), "dataset_sha256": data_sha}
    sha = save_checkpoint(out / "encoder.ckpt", enc, clf, meta=info)
    _write(out, "pretrain.json", _json({**info, "checkpoint_sha256": sha, "config": _echo(cfg),
                                        "losses": result.losses}))
    write_manifest(out, "pretrain", cfg)
    flag = "" if result.converged else " (did not reach the accuracy target)"
    print(f"pretrained {result.epochs} epochs, train accuracy {result.accuracy:.4f}{flag}")


def cmd_finetune(cfg):
    out = _out_dir(cfg)
    ckpt = Path(_require(cfg, "checkpoint"))
    data, data_sha = _load_raw(_require(cfg, "data"))
    mode = resolve_mode(cfg["mode"])
    target = out / "finetuned.ckpt"
    if mode == "none":
        load_checkpoint(ckpt)
        if ckpt.resolve() != target.resolve():
            shutil.copyfile(ckpt, target)
            if manifest_path(ckpt).exists():
                shutil.copyfile(manifest_path(ckpt), manifest_path(target))
        enc, _, sha = load_checkpoint(target)
        report = {"init": cfg["init"], "mode": mode, "parameters": parameter_report(enc)}
    else:
        enc, _, _ = load_checkpoint(ckpt)
        split = _split(cfg, data)
        exp = experiment_config(cfg)
        enc, clf, report = adapt(enc, split, cfg["init"], mode, exp,
                                 epochs=_typed(cfg, "epochs", int), lr=_typed(cfg, "lr", float))
        sha = save_checkpoint(target, enc, clf, meta={"init": cfg["init"], "mode": mode})
    report.update({"checkpoint_sha256": sha, "source_checkpoint_sha256": file_sha256(ckpt),
                   "dataset_sha256": data_sha, "config": _echo(cfg)})
    _write(out, "finetune.json", _json(report))
    write_manifest(out, "finetune", cfg)
    p = report["parameters"]
    print(f"mode {mode}: {p['trainable']} of {p['total']} encoder parameters trainable")


def cmd_eval(cfg):
    out = _out_dir(cfg)
    matcher = matcher_config(cfg)
    fars = _floats(cfg["far"], "far")
    if not fars or any(not 0 <= f <= 1 for f in fars):
        raise ConfigurationError("FAR targets must lie in [0, 1]")
    ckpt = _require(cfg, "checkpoint")
    enc, _, ckpt_sha = load_checkpoint(ckpt)
    data, data_sha = _load_raw(_require(cfg, "data"))
    split = _split(cfg, data)
    res = evaluate(enc, split, matcher, fars)
    report = {
        "auc": res["auc"],
        "auc_far_axis": "linear",
        "dir_at_far": res["dir_at_far"],
        "closed_set_accuracy": res["closed_set_accuracy"],
        "histogram_overlap": res["overlap"],
        "intra_deg": res["intra_deg"],
        "inter_deg": res["inter_deg"],
        "dbi": res["dbi"],
        "matcher": {"kind": matcher.kind, "k": matcher.k},
        "counts": {"gallery": len(split.gallery), "known": len(split.known),
                   "unknown": len(split.unknown), "C": int(split.C)},
        "checkpoint_sha256": ckpt_sha,
        "dataset_sha256": data_sha,
        "config": _echo(cfg),
    }
    _write(out, "report.json", _json(report))
    _write(out, "dir_curve.csv", res["curve"].to_csv())
    _write(out, "histograms.csv", histograms_csv(*res["histograms"]))
    _write(out, "scores.csv", res["table"].to_csv())
    write_manifest(out, "eval", cfg)
    print(f"{matcher.kind} AUC {res['auc']:.4f}; "
          + ", ".join(f"DIR@{f}={v:.4f}" for f, v in res["dir_at_far"].items()))


def cmd_sweep_k(cfg):
    out = _out_dir(cfg)
    enc, _, ckpt_sha = load_checkpoint(_require(cfg, "checkpoint"))
    data, data_sha = _load_raw(_require(cfg, "data"))
    rows = sweep_k(enc, _split(cfg, data), _ints(cfg["grid"], "grid"))
    best = max(range(len(rows)), key=lambda i: rows[i][1])
    lines = ["k,auc,best"] + [f"{k},{a!r},{int(i == best)}" for i, (k, a) in enumerate(rows)]
    _write(out, "sweep_k.csv", "\n".join(lines) + "\n")
    _write(out, "sweep_k.json", _json({
        "rows": [{"k": k, "auc": a} for k, a in rows], "best_k": rows[best][0],
        "checkpoint_sha256": ckpt_sha, "dataset_sha256": data_sha, "config": _echo(cfg)}))
    write_manifest(out, "sweep-k", cfg)
    print("\n".join(lines))


def cmd_gallery_sweep(cfg):
    out = _out_dir(cfg)
    enc, _, ckpt_sha = load_checkpoint(_require(cfg, "checkpoint"))
    data, data_sha = _load_raw(_require(cfg, "data"))
    exp = experiment_config(cfg)
    if cfg.get("epochs") is not None:
        exp = replace(exp, finetune_epochs=_typed(cfg, "epochs", int))
    if cfg.get("lr") is not None:
        exp = replace(exp, finetune_lr=_typed(cfg, "lr", float))
    exp = replace(exp, data=replace(exp.data, gallery_pool=_typed(cfg, "gallery_pool", int)))
    rows = gallery_sweep(enc, data, _ints(cfg["ms"], "ms"), exp)
    lines = ["m,baseline_auc,proposed_auc"] + [f"{m},{b!r},{p!r}" for m, b, p in rows]
    _write(out, "gallery_sweep.csv", "\n".join(lines) + "\n")
    _write(out, "gallery_sweep.json", _json({
        "rows": [{"m": m, "baseline_auc": b, "proposed_auc": p} for m, b, p in rows],
        "baseline": "pretrained + cosine", "proposed": f"wi + bn + nac(k={exp.k})",
        "checkpoint_sha256": ckpt_sha, "dataset_sha256": data_sha, "config": _echo(cfg)}))
    write_manifest(out, "gallery-sweep", cfg)
    print("\n".join(lines))


def build_parser():
    parser = argparse.ArgumentParser(prog="osfi", description="Open-set identification toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=None)
        p.set_defaults(func=func)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--out", help="output directory (default: current directory)")
        p.add_argument("--seed", type=int)
        return p

    p = command("synth", cmd_synth, "write synthetic pretrain and eval datasets")
    for key in SYNTH_KEYS:
        kind = next(f.type for f in fields(SyntheticConfig) if f.name == key)
        p.add_argument(f"--{key.replace('_', '-')}", dest=key,
                       type=int if kind in ("int", int) else float)

    p = command("pretrain", cmd_pretrain, "train the encoder on pretraining identities")
    p.add_argument("--data", help="raw pretraining dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    for name, func, text in (("finetune", cmd_finetune, "enroll a gallery and fine-tune"),
                             ("eval", cmd_eval, "open-set evaluation report"),
                             ("sweep-k", cmd_sweep_k, "AUC over the NAC neighborhood size"),
                             ("gallery-sweep", cmd_gallery_sweep, "AUC over gallery size m")):
        p = command(name, func, text)
        p.add_argument("--checkpoint", help="encoder checkpoint")
        p.add_argument("--data", help="raw evaluation dataset")
        p.add_argument("--m", type=int)
        p.add_argument("--gallery-pool", dest="gallery_pool", type=int)
        if name == "finetune":
            p.add_argument("--init", choices=("random", "linprobe", "wi"))
            p.add_argument("--mode", choices=("none", "full", "partial", "adapter", "bn"))
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float)
        if name == "eval":
            p.add_argument("--matcher", choices=("cos", "cosine", "nac"))
            p.add_argument("--k", type=int)
            p.add_argument("--far", help="comma-separated FAR targets")
        if name == "sweep-k":
            p.add_argument("--grid", help="comma-separated k values")
        if name == "gallery-sweep":
            p.add_argument("--ms", help="comma-separated gallery sizes")
            p.add_argument("--k", type=int)
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(resolve(args))
    except OSFIError as exc:
        print(f"osfi {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
