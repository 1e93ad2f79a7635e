"""Command-line entry point.

Every subcommand reads an optional flat ``key=value`` config file plus
``--key value`` overrides, writes its outputs into ``<out>/<cmd>-<hash>``
(hash of the resolved config) together with a manifest, and returns
0 on success, 1 on a contract/config error and 2 on an I/O error.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import sys

import numpy as np

from .attribution import SScoreReport, attention_row_map, gradcam, sscore_report
from .checkpoint import FormatError, canonical_json
from .data import SpuriousDatasetSpec, build_balanced_testset, generate_dataset, load_dataset, save_dataset
from .interventions import (
    DivergenceError,
    MaskConfig,
    dfr_retrain,
    finetune_classifier_balanced,
    group_ablation_experiment,
    prune_classifier_by_sscore,
    train_weight_mask,
)
from .models import SmallCnnConfig, SmallVitConfig, build_model, load_model, save_model
from .reporting import cluster_alignment, export_embeddings, render_heatmap, tsne_project
from .train import TrainConfig, TrainingError, evaluate_groups, minority_ratio_sweep, train, train_accuracy

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2

_DATA = {
    "style": "patch",
    "rho": 0.95,
    "n_per_class": 500,
    "one_sided": False,
    "core_contrast": 0.5,
    "noise": 0.1,
    "patch_size": 6,
}
_TRAIN = {"family": "cnn", "epochs": 30, "lr": 0.1, "weight_decay": 1e-4, "batch_size": 16}
_MASK = {"keep": 0.8, "mask_epochs": 10, "mask_lr": 0.05, "mask_batch_size": 32}

COMMANDS: dict[str, dict] = {
    "gen": {**_DATA, "seed": 0, "balanced_per_group": 0},
    "train": {"data": "", "val": "", **_TRAIN, "seed": 0},
    "eval": {"model": "", "data": ""},
    "sweep": {**_DATA, **_TRAIN, "rhos": "0.5,0.75,0.9,0.95,1.0", "seeds": "0,1,2", "n_test_per_group": 100, "seed": 0},
    "sscore": {"model": "", "data": "", "n": 50, "alpha": 0.5, "seed": 0, "layer": -1, "heatmaps": 2},
    "prune": {"model": "", "sscore": "", "test": "", "tau": 0.7},
    "finetune": {"model": "", "data": "", "test": "", "keep_zero": True, "epochs": 30, "lr": 0.1, "weight_decay": 1e-4, "batch_size": 16, "seed": 0},
    "dfr": {"model": "", "fit": "", "tune": "", "test": "", "sscore_data": "", "lambdas": "0,0.001,0.003,0.01,0.03,0.1", "iterations": 2000, "n": 50, "alpha": 0.5, "seed": 0},
    "mask": {"model": "", "data": "", "test": "", **_MASK, "seed": 0},
    "ablate": {"model": "", "data": "", "test": "", "group": 0, **_MASK, "seed": 0},
    "attn": {"model": "", "data": "", "index": 0, "layer": -1, "head": "mean", "target": 0},
    "embed": {"model": "", "data": ""},
    "tsne": {"model": "", "data": "", "perplexity": 30.0, "iters": 500, "seed": 0, "max_points": 2000},
    "report": {"inputs": ""},
}
COMMON = {"out": "runs"}


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------- config


def _coerce(value: str, default):
    if isinstance(default, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def usage(cmd: str | None = None) -> str:
    if cmd is None:
        return "usage: spurscope <command> [--config FILE] [--key value ...]\ncommands: " + ", ".join(COMMANDS)
    keys = sorted({**COMMANDS[cmd], **COMMON})
    return f"usage: spurscope {cmd} [--config FILE] " + " ".join(f"[--{k} V]" for k in keys)


def resolve_config(cmd: str, argv: list[str]) -> dict:
    defaults = {**COMMANDS[cmd], **COMMON}
    raw: dict[str, str] = {}
    flags: dict[str, str] = {}
    i = 0
    while i < len(argv):
        tok = argv[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}\n{usage(cmd)}")
        key, _, val = tok[2:].partition("=")
        if not _:
            if i + 1 >= len(argv):
                raise UsageError(f"flag --{key} needs a value\n{usage(cmd)}")
            val = argv[i + 1]
            i += 1
        key = key.replace("-", "_")
        if key == "config":
            with open(val, encoding="utf-8") as f:
                raw.update(parse_config_text(f.read()))
        elif key not in defaults:
            raise UsageError(f"unknown flag --{key}\n{usage(cmd)}")
        else:
            flags[key] = val
        i += 1
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(sorted(defaults))}")
    raw.update(flags)
    cfg = dict(defaults)
    for k, v in raw.items():
        try:
            cfg[k] = _coerce(v, defaults[k])
        except ValueError as e:
            raise UsageError(f"bad value for {k}: {e}") from None
    return cfg


def config_hash(cmd: str, cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(canonical_json({"command": cmd, "config": body}).encode()).hexdigest()[:12]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------------- run dirs


class RunDir:
    def __init__(self, cmd: str, cfg: dict):
        self.cmd, self.cfg = cmd, cfg
        self.path = os.path.join(cfg["out"], f"{cmd}-{config_hash(cmd, cfg)}")
        self.artifacts: list[str] = []
        self._lock = os.path.join(self.path, ".lock")

    def __enter__(self):
        os.makedirs(self.path, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OSError(f"run directory {self.path} is locked by another process") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        if exc[0] is None:
            self._manifest()
        os.remove(self._lock)
        return False

    def file(self, name: str) -> str:
        self.artifacts.append(name)
        return os.path.join(self.path, name)

    def write_json(self, name: str, obj) -> str:
        p = self.file(name)
        with open(p, "w", encoding="utf-8") as f:
            json.dump(obj, f, indent=2, sort_keys=True)
            f.write("\n")
        return p

    def write_text(self, name: str, text: str) -> str:
        p = self.file(name)
        with open(p, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        return p

    def _manifest(self):
        inputs = {}
        for k, v in sorted(self.cfg.items()):
            if isinstance(v, str) and v and k != "out":
                for part in v.split(","):
                    if os.path.isfile(part):
                        inputs[part] = file_sha256(part)
        seeds = {k: v for k, v in self.cfg.items() if "seed" in k}
        manifest = {
            "schema": 1,
            "command": self.cmd,
            "config": {k: v for k, v in self.cfg.items() if k != "out"},
            "seeds": seeds,
            "inputs": inputs,
            "artifacts": {a: file_sha256(os.path.join(self.path, a)) for a in sorted(set(self.artifacts))},
        }
        with open(os.path.join(self.path, "manifest.json"), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")


# ------------------------------------------------------------------- helpers


def _need(cfg: dict, *keys):
    missing = [k for k in keys if not cfg[k]]
    if missing:
        raise UsageError(f"missing required key(s): {', '.join(missing)}")


def _spec(cfg: dict, **over) -> SpuriousDatasetSpec:
    fields = {k: cfg[k] for k in _DATA}
    return SpuriousDatasetSpec(**fields, seed=cfg["seed"], **over)


def _model_config(family: str):
    if family == "cnn":
        return SmallCnnConfig()
    if family == "vit":
        return SmallVitConfig()
    raise UsageError(f"family must be 'cnn' or 'vit', got {family!r}")


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(cfg["epochs"], cfg["lr"], cfg["weight_decay"], cfg["batch_size"], cfg["seed"])


def _mask_config(cfg: dict) -> MaskConfig:
    return MaskConfig(epochs=cfg["mask_epochs"], lr=cfg["mask_lr"], batch_size=cfg["mask_batch_size"], seed=cfg["seed"])


def _layer(cfg: dict):
    return None if cfg["layer"] < 0 else cfg["layer"]


def _floats(s: str) -> list[float]:
    return [float(t) for t in s.split(",") if t.strip()]


def _ints(s: str) -> list[int]:
    return [int(t) for t in s.split(",") if t.strip()]


def _rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------- subcommands


def cmd_gen(cfg, run):
    spec = _spec(cfg)
    if cfg["balanced_per_group"] > 0:
        ds = build_balanced_testset(spec, cfg["balanced_per_group"])
    else:
        ds = generate_dataset(spec)
    save_dataset(ds, run.file("dataset.bin"))
    run.write_text("census.csv", ds.census_csv())
    run.write_json("spec.json", {"schema": 1, **spec.to_json(), "census": list(ds.census())})


def cmd_train(cfg, run):
    _need(cfg, "data")
    ds = load_dataset(cfg["data"])
    val = load_dataset(cfg["val"]) if cfg["val"] else None
    model = build_model(_model_config(cfg["family"]), seed=cfg["seed"])
    _, tlog = train(model, ds, _train_config(cfg), val=val)
    save_model(model, run.file("model.ckpt"))
    run.write_json("train_log.json", {"schema": 1, "train_accuracy": train_accuracy(model, ds), **tlog.to_json()})
    run.write_text("train_log.csv", tlog.to_csv())


def cmd_eval(cfg, run):
    _need(cfg, "model", "data")
    m = evaluate_groups(load_model(cfg["model"]), load_dataset(cfg["data"]))
    run.write_json("metrics.json", {"schema": 1, **m.to_json()})


def cmd_sweep(cfg, run):
    rows = minority_ratio_sweep(
        _spec(cfg),
        _floats(cfg["rhos"]),
        _train_config(cfg),
        _model_config(cfg["family"]),
        seeds=_ints(cfg["seeds"]),
        n_test_per_group=cfg["n_test_per_group"],
    )
    table = [r.to_json() for r in rows]
    run.write_json("sweep.json", {"schema": 1, "rows": table})
    flat = [{k: v for k, v in r.items() if not isinstance(v, list)} for r in table]
    run.write_text("sweep.csv", _rows_csv(flat))


def cmd_sscore(cfg, run):
    _need(cfg, "model", "data")
    model, ds = load_model(cfg["model"]), load_dataset(cfg["data"])
    rep = sscore_report(model, ds, cfg["n"], cfg["alpha"], cfg["seed"], _layer(cfg))
    run.write_json("sscore.json", rep.to_json())
    order = np.argsort(rep.scores, kind="stable")
    picks = list(order[::-1][: cfg["heatmaps"]]) + list(order[: cfg["heatmaps"]])
    sid = rep.sample_ids[0]
    for i in dict.fromkeys(int(p) for p in picks):
        cam = gradcam(model, ds.images[sid : sid + 1], [i], _layer(cfg))[0, 0]
        render_heatmap(cam, run.file(f"heatmap_n{i:02d}.pgm"), overlay=ds.images[sid], mask=ds.masks[sid])


def cmd_prune(cfg, run):
    _need(cfg, "model", "sscore")
    model = load_model(cfg["model"])
    with open(cfg["sscore"], encoding="utf-8") as f:
        rep = SScoreReport.from_json(json.load(f))
    edit, pruned = prune_classifier_by_sscore(model, rep, cfg["tau"])
    save_model(pruned, run.file("model.ckpt"))
    out = {"schema": 1, "tau": cfg["tau"], "zeroed": edit.zeroed}
    if cfg["test"]:
        test = load_dataset(cfg["test"])
        out["before"] = evaluate_groups(model, test).to_json()
        out["after"] = evaluate_groups(pruned, test).to_json()
    run.write_json("prune.json", out)


def cmd_finetune(cfg, run):
    _need(cfg, "model", "data")
    model = load_model(cfg["model"])
    zeroed = np.flatnonzero(~model.params["head.weight"].data.any(axis=1)).tolist() if cfg["keep_zero"] else []
    edit, tuned = finetune_classifier_balanced(model, load_dataset(cfg["data"]), _train_config(cfg), zeroed)
    save_model(tuned, run.file("model.ckpt"))
    out = {"schema": 1, "zeroed": edit.zeroed}
    if cfg["test"]:
        test = load_dataset(cfg["test"])
        out["before"] = evaluate_groups(model, test).to_json()
        out["after"] = evaluate_groups(tuned, test).to_json()
    run.write_json("finetune.json", out)


def cmd_dfr(cfg, run):
    _need(cfg, "model", "fit", "tune")
    model = load_model(cfg["model"])
    res = dfr_retrain(
        model,
        load_dataset(cfg["fit"]),
        load_dataset(cfg["tune"]),
        _floats(cfg["lambdas"]),
        eval_set=load_dataset(cfg["test"]) if cfg["test"] else None,
        iterations=cfg["iterations"],
        sscore_data=load_dataset(cfg["sscore_data"]) if cfg["sscore_data"] else None,
        sscore_n=cfg["n"],
        alpha=cfg["alpha"],
        seed=cfg["seed"],
    )
    save_model(res.model, run.file("model.ckpt"))
    run.write_json("dfr.json", res.to_json())


def cmd_mask(cfg, run):
    _need(cfg, "model", "data")
    model = load_model(cfg["model"])
    wm, masked = train_weight_mask(model, load_dataset(cfg["data"]), cfg["keep"], _mask_config(cfg))
    save_model(masked, run.file("model.ckpt"))
    out = {"schema": 1, **wm.to_json()}
    if cfg["test"]:
        test = load_dataset(cfg["test"])
        out["before"] = evaluate_groups(model, test).to_json()
        out["after"] = evaluate_groups(masked, test).to_json()
    run.write_json("mask.json", out)


def cmd_ablate(cfg, run):
    _need(cfg, "model", "data", "test")
    res = group_ablation_experiment(
        load_model(cfg["model"]), load_dataset(cfg["data"]), cfg["group"], load_dataset(cfg["test"]), cfg["keep"], _mask_config(cfg)
    )
    run.write_json("ablate.json", res.to_json())


def cmd_attn(cfg, run):
    _need(cfg, "model", "data")
    model, ds = load_model(cfg["model"]), load_dataset(cfg["data"])
    if not 0 <= cfg["index"] < len(ds):
        raise IndexError(f"sample index {cfg['index']} out of range for {len(ds)} samples")
    layer = model.config.layers - 1 if cfg["layer"] < 0 else cfg["layer"]
    head = cfg["head"] if cfg["head"] == "mean" else int(cfg["head"])
    amap = attention_row_map(model, ds.images[cfg["index"]], layer, head, cfg["target"])
    run.write_json("attn.json", {"schema": 1, "layer": layer, "head": head, "target": cfg["target"], "row": amap.row.tolist()})
    render_heatmap(amap, run.file("attn.pgm"), overlay=ds.images[cfg["index"]], mask=ds.masks[cfg["index"]])


def cmd_embed(cfg, run):
    _need(cfg, "model", "data")
    emb = export_embeddings(load_model(cfg["model"]), load_dataset(cfg["data"]))
    run.write_text("embeddings.csv", emb.to_csv())
    out = {"schema": 1, "n": len(emb), "dim": int(emb.matrix.shape[1]), "model_id": emb.model_id}
    for by in ("y", "s"):
        out[f"silhouette_{by}"] = cluster_alignment(emb, by) if len(np.unique(getattr(emb, by))) > 1 else None
    run.write_json("embed.json", out)


def cmd_tsne(cfg, run):
    _need(cfg, "model", "data")
    ds = load_dataset(cfg["data"])
    if len(ds) > cfg["max_points"]:
        ds = ds.subset(np.sort(np.random.default_rng(cfg["seed"]).choice(len(ds), cfg["max_points"], replace=False)))
    emb = export_embeddings(load_model(cfg["model"]), ds)
    proj = tsne_project(emb, cfg["perplexity"], cfg["iters"], cfg["seed"])
    run.write_json("tsne.json", proj.to_json())
    rows = [{"x": float(a), "y_coord": float(b), "y": int(y), "s": int(s), "g": int(g)} for (a, b), y, s, g in zip(proj.coords, emb.y, emb.s, emb.g)]
    run.write_text("tsne.csv", _rows_csv(rows))


def cmd_report(cfg, run):
    _need(cfg, "inputs")
    parts = {}
    for p in cfg["inputs"].split(","):
        with open(p, encoding="utf-8") as f:
            parts[os.path.basename(os.path.dirname(p)) + "/" + os.path.basename(p)] = json.load(f)
    run.write_json("report.json", {"schema": 1, "parts": parts})


HANDLERS = {name[4:]: fn for name, fn in globals().items() if name.startswith("cmd_")}


def run_cli(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(usage())
        return EXIT_OK if argv else EXIT_CONTRACT
    cmd = argv[0]
    if cmd not in COMMANDS:
        print(f"unknown command {cmd!r}\n{usage()}", file=sys.stderr)
        return EXIT_CONTRACT
    if any(a in ("-h", "--help") for a in argv[1:]):
        print(usage(cmd))
        return EXIT_OK
    try:
        cfg = resolve_config(cmd, argv[1:])
        with RunDir(cmd, cfg) as run:
            HANDLERS[cmd](cfg, run)
        print(run.path)
        return EXIT_OK
    except (OSError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError, IndexError, KeyError, TrainingError, DivergenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT


def main() -> None:
    logging.basicConfig(level=logging.WARNING)
    sys.exit(run_cli())
