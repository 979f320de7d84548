"""Command-line entry point: ``tdam <command> [--config FILE] [--key=value ...]``.

Settings live in four dotted sections (model., train., data., analysis.).
Precedence, lowest first: schema defaults, the ``resolved.cfg`` stored next to
a checkpoint (commands that read one), ``--config`` files in order, then
command-line flags; the last occurrence of a key wins. Every command writes
the fully resolved settings to ``<out>/resolved.cfg``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 cost expectation mismatch.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import analysis, checkpoint
from .attention import KINDS, VARIANTS
from .backbone import Model, ModelConfig, TdSpec, build_model, resnet50_config, toy_config
from .cost import count_macs
from .data import GENERATORS, Dataset, DatasetError, load_image_dir, save_image_dir, split
from .train import TrainConfig, ablation_grid, ablation_to_csv, evaluate, log_to_csv, run_ablation, train

log = logging.getLogger("tdam")

RESOLVED = "resolved.cfg"
CHECKPOINT = "model.ckpt"


class ConfigError(ValueError):
    pass


class ExpectationError(RuntimeError):
    pass


# ------------------------------------------------------------------ schema


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text: str) -> tuple:
    text = text.strip()
    return tuple(int(v) for v in text.split(",")) if text else ()


def _strs(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip() in ("", "none") else float(text)


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    choices: Optional[tuple] = None


SCHEMA = [
    Key("model.arch", str, "toy", "backbone graph", ("toy", "resnet50")),
    Key("model.td", str, "none", "top-down spec such as joint,t2,m1 (or none)"),
    Key("model.td_variant", str, "chn_then_sp", "attention gating variant", VARIANTS),
    Key("model.td_sigmoid_filter", _bool, False, "use sigmoid(S) as the 1x1 searchlight filter"),
    Key("model.td_stages", _ints, (3, 4), "1-based stages whose blocks carry top-down attention"),
    Key("model.baseline", str, "none", "bottom-up attention baseline", ("none", "se", "cbam")),
    Key("model.baseline_reduction", int, 16, "baseline MLP reduction ratio"),
    Key("model.widths", _ints, (), "stage widths (empty: architecture default)"),
    Key("model.blocks", _ints, (), "blocks per stage (empty: architecture default)"),
    Key("model.stem_channels", int, 0, "stem width (0: architecture default)"),
    Key("model.num_classes", int, 0, "classifier outputs (0: taken from the data)"),
    Key("train.epochs", int, 20, "training epochs"),
    Key("train.batch_size", int, 64, "mini-batch size"),
    Key("train.lr", float, 0.05, "peak learning rate"),
    Key("train.momentum", float, 0.9, "SGD momentum"),
    Key("train.weight_decay", float, 1e-4, "L2 weight decay"),
    Key("train.schedule", str, "cosine", "learning rate schedule", ("cosine", "step")),
    Key("train.seed", int, 0, "initialization, split and shuffling seed"),
    Key("train.loss_mode", str, "final_step", "which logits the loss sees", ("final_step", "most_confident_step")),
    Key("train.val_fraction", float, 0.2, "held-out fraction per class"),
    Key("train.flip", _bool, False, "random horizontal flips"),
    Key("train.crop", int, 0, "random-crop padding in pixels"),
    Key("data.kind", str, "fine", "synthetic generator", tuple(GENERATORS)),
    Key("data.classes", int, 10, "number of classes"),
    Key("data.per_class", int, 200, "images per class"),
    Key("data.size", int, 32, "image side length"),
    Key("data.seed", int, 7, "generator seed"),
    Key("data.part_size", int, 8, "texture patch size of the fine-grained generator"),
    Key("data.dir", str, "", "dataset directory to read (empty: generate in memory)"),
    Key("data.out", str, "out", "output directory"),
    Key("analysis.checkpoint", str, "", "checkpoint file to load"),
    Key("analysis.resolutions", _ints, (), "input resolutions (empty: command default)"),
    Key("analysis.frac", float, analysis.DEFAULT_FRAC, "box threshold as a fraction of the map maximum"),
    Key("analysis.step", str, "most_confident", "computation step for CAM boxes (index or most_confident)"),
    Key("analysis.layer", str, "", "CAM layer (empty: final block)"),
    Key("analysis.images", int, 8, "validation images rendered by cam"),
    Key("analysis.kinds", _strs, KINDS, "ablation: searchlight kinds"),
    Key("analysis.ms", _ints, (1, 2), "ablation: feedback distances"),
    Key("analysis.ts", _ints, (1, 2, 3), "ablation: computation steps"),
    Key("analysis.variants", _strs, VARIANTS, "ablation: gating variants"),
    Key("analysis.expect_params", _opt_float, None, "cost: expected parameter count"),
    Key("analysis.expect_macs", _opt_float, None, "cost: expected MAC count"),
    Key("analysis.tol", float, 0.01, "cost: relative tolerance for expectations"),
]
KEYS = {k.name: k for k in SCHEMA}

# short flags; --seed sets both the data and the training seed
ALIASES = {
    "kind": ("data.kind",),
    "classes": ("data.classes",),
    "per-class": ("data.per_class",),
    "size": ("data.size",),
    "seed": ("data.seed", "train.seed"),
    "data": ("data.dir",),
    "out": ("data.out",),
    "checkpoint": ("analysis.checkpoint",),
    "model": ("model.arch",),
    "td": ("model.td",),
    "res": ("analysis.resolutions",),
    "expect-params": ("analysis.expect_params",),
    "expect-macs": ("analysis.expect_macs",),
    "tol": ("analysis.tol",),
}


def _convert(name: str, text: str, flag: str) -> Any:
    key = KEYS[name]
    try:
        value = key.parse(text)
    except ValueError as e:
        raise ConfigError(f"{flag}: {e}") from None
    if key.choices is not None:
        bad = [v for v in (value if isinstance(value, tuple) else (value,)) if v not in key.choices]
        if bad:
            raise ConfigError(f"{flag}: invalid value {bad[0]!r} (choose from {', '.join(key.choices)})")
    return value


def read_config_file(path: str) -> list[tuple[str, str, str]]:
    """``key = value`` lines; ``#`` comments and ``[section]`` headers allowed."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    out, section = [], ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip() + "."
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            key = section + key
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out.append((key, value, f"{path}:{lineno}"))
    return out


def write_resolved(cfg: dict, path: Path) -> None:
    lines = [f"{k.name} = {_fmt(cfg[k.name])}" for k in SCHEMA]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


COMMANDS = {
    "gen": "write a synthetic dataset (PNG tree + boxes.csv + manifest)",
    "train": "train a model; writes model.ckpt and train_log.csv",
    "eval": "evaluate a checkpoint across resolutions; writes eval.csv",
    "cam": "per-step Grad-CAM heatmaps; writes PNGs, cams.npz and divergence.csv",
    "localize": "CAM localization accuracy; writes localization.csv",
    "ablate": "train the attention ablation grid; writes ablation.csv",
    "cost": "parameter and MAC counts; writes cost.csv, checks expectations",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tdam", description="Top-down attention toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", action="append", default=[], metavar="FILE", help="key = value file (repeatable)")
        for key in SCHEMA:
            extra = f" [{'|'.join(key.choices)}]" if key.choices else ""
            p.add_argument(
                f"--{key.name}",
                dest=key.name,
                action=_Ordered,
                metavar="V",
                help=f"{key.help}{extra} (default: {_fmt(key.default)})",
            )
        for alias, targets in ALIASES.items():
            p.add_argument(f"--{alias}", dest="alias:" + alias, action=_Ordered, metavar="V", help=f"alias of {', '.join(targets)}")
    return parser


class _Ordered(argparse.Action):
    """Record flags in command-line order so the last one wins across aliases."""

    def __call__(self, parser, namespace, values, option_string=None):
        seq = getattr(namespace, "_ordered", None) or []
        seq.append((self.dest, values, option_string))
        namespace._ordered = seq


def resolve(argv: list[str]) -> tuple[str, dict]:
    args = build_parser().parse_args(argv)
    flags = []
    for dest, value, flag in getattr(args, "_ordered", None) or []:
        names = ALIASES[dest[6:]] if dest.startswith("alias:") else (dest,)
        flags.extend((n, value, flag) for n in names)
    cfg = {k.name: k.default for k in SCHEMA}
    layers: list = []
    ckpt = next((v for n, v, _ in reversed(flags) if n == "analysis.checkpoint"), None)
    for path in args.config:
        entries = read_config_file(path)
        layers.append(entries)
        ckpt = next((v for n, v, _ in reversed(entries) if n == "analysis.checkpoint"), ckpt)
    if ckpt and args.command in ("eval", "cam", "localize"):
        stored = Path(ckpt).parent / RESOLVED
        if stored.exists():
            base = [(n, v, f"{stored}:{i}") for i, (n, v, _) in enumerate(read_config_file(str(stored)), 1)]
            # the checkpoint's own output directory must not leak into the new run
            layers.insert(0, [e for e in base if e[0] not in ("data.out", "analysis.checkpoint")])
    layers.append(flags)
    for entries in layers:
        for name, value, where in entries:
            cfg[name] = _convert(name, value, where)
    return args.command, cfg


# ------------------------------------------------------------------ builders


def model_config(cfg: dict, num_classes: int) -> ModelConfig:
    k = cfg["model.num_classes"] or num_classes
    try:
        td = TdSpec.parse(cfg["model.td"], variant=cfg["model.td_variant"], sigmoid_filter=cfg["model.td_sigmoid_filter"])
        base = resnet50_config(k) if cfg["model.arch"] == "resnet50" else toy_config(k)
        over: dict = {"td": td, "td_stages": cfg["model.td_stages"]}
        if cfg["model.baseline"] != "none":
            over.update(baseline=cfg["model.baseline"], baseline_reduction=cfg["model.baseline_reduction"])
        if cfg["model.widths"]:
            over["widths"] = cfg["model.widths"]
        if cfg["model.blocks"]:
            over["blocks"] = cfg["model.blocks"]
        if cfg["model.stem_channels"]:
            over["stem_channels"] = cfg["model.stem_channels"]
        mc = replace(base, **over)
        mc.block_specs()
    except (ValueError, TypeError) as e:
        raise ConfigError(f"model: {e}") from None
    return mc


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**{k[6:]: v for k, v in cfg.items() if k.startswith("train.")})
    except ValueError as e:
        raise ConfigError(f"train: {e}") from None


def load_data(cfg: dict) -> Dataset:
    if cfg["data.dir"]:
        return load_image_dir(cfg["data.dir"], cfg["data.size"])
    gen = GENERATORS[cfg["data.kind"]]
    extra = {"part_size": cfg["data.part_size"]} if cfg["data.kind"] == "fine" else {}
    try:
        return gen(cfg["data.classes"], cfg["data.per_class"], cfg["data.size"], cfg["data.seed"], **extra)
    except DatasetError as e:
        raise ConfigError(f"data: {e}") from None


def _split(cfg: dict, ds: Dataset) -> tuple[Dataset, Dataset]:
    return split(ds, cfg["train.val_fraction"], cfg["train.seed"])


def _out(cfg: dict) -> Path:
    out = Path(cfg["data.out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(cfg: dict, num_classes: int) -> Model:
    path = cfg["analysis.checkpoint"]
    if not path:
        raise ConfigError("--checkpoint is required for this command")
    model = build_model(model_config(cfg, num_classes), cfg["train.seed"])
    checkpoint.load(model, path)
    model.eval()
    return model


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


# ------------------------------------------------------------------ commands


def cmd_gen(cfg: dict) -> int:
    ds = load_data({**cfg, "data.dir": ""})
    out = _out(cfg)
    save_image_dir(ds, out)
    manifest = [f"{k} = {_fmt(cfg[k])}" for k in ("data.kind", "data.classes", "data.per_class", "data.size", "data.seed", "data.part_size")]
    _write(out / "manifest.txt", "\n".join(manifest) + "\n")
    write_resolved(cfg, out / RESOLVED)
    print(f"wrote {len(ds)} images in {ds.num_classes} classes to {out}")
    return 0


def cmd_train(cfg: dict) -> int:
    tc = train_config(cfg)
    ds = load_data(cfg)
    mc = model_config(cfg, ds.num_classes)
    train_ds, val_ds = _split(cfg, ds)
    out = _out(cfg)
    write_resolved({**cfg, "model.num_classes": mc.num_classes}, out / RESOLVED)
    model = build_model(mc, tc.seed)
    _, history = train(model, train_ds, tc, val=val_ds)
    checkpoint.save(model, out / CHECKPOINT)
    _write(out / "train_log.csv", log_to_csv(history))
    if history:
        print(f"final val top1 {history[-1].val_top1:.6f}")
    return 0


def cmd_eval(cfg: dict) -> int:
    ds = load_data(cfg)
    _, val_ds = _split(cfg, ds)
    model = _load_model(cfg, ds.num_classes)
    res = cfg["analysis.resolutions"] or (ds.image_size,)
    try:
        report = evaluate(model, val_ds, res, cfg["train.loss_mode"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = _out(cfg)
    write_resolved(cfg, out / RESOLVED)
    _write(out / "eval.csv", report.to_csv())
    for r in report.resolutions:
        print(f"res {r} top1 {report.top1_by_res[r]:.6f}")
    return 0


def _step_arg(cfg: dict):
    s = cfg["analysis.step"]
    if s == "most_confident":
        return s
    try:
        return int(s)
    except ValueError:
        raise ConfigError(f"analysis.step: expected an index or most_confident, got {s!r}") from None


def cmd_cam(cfg: dict) -> int:
    ds = load_data(cfg)
    _, val_ds = _split(cfg, ds)
    model = _load_model(cfg, ds.num_classes)
    n = min(cfg["analysis.images"], len(val_ds))
    sub = val_ds.subset(np.arange(n))
    try:
        cams = analysis.step_cams(model, sub.images, sub.labels, cfg["analysis.layer"] or None)
    except analysis.AnalysisError as e:
        raise ConfigError(str(e)) from None
    out = _out(cfg)
    write_resolved(cfg, out / RESOLVED)
    for i in range(n):
        for t in range(cams.shape[1]):
            analysis.export_heatmap(cams[i, t], sub.images[i], out / f"cam_{i:04d}_step{t}.png")
    analysis.save_cams(out / "cams.npz", cams, sub.labels)
    if cams.shape[1] > 1:
        report = analysis.step_divergence(cams, cfg["analysis.frac"])
        _write(out / "divergence.csv", report.to_csv())
        print(f"mean consecutive-step correlation {report.mean_correlation:.6f}")
    print(f"wrote {n * cams.shape[1]} heatmaps to {out}")
    return 0


def cmd_localize(cfg: dict) -> int:
    ds = load_data(cfg)
    _, val_ds = _split(cfg, ds)
    model = _load_model(cfg, ds.num_classes)
    try:
        report = analysis.localization_accuracy(
            model, val_ds, cfg["analysis.frac"], _step_arg(cfg), cfg["analysis.layer"] or None
        )
    except analysis.AnalysisError as e:
        raise ConfigError(str(e)) from None
    out = _out(cfg)
    write_resolved(cfg, out / RESOLVED)
    _write(out / "localization.csv", report.to_csv())
    top5 = "n/a" if report.top5 is None else f"{report.top5:.6f}"
    print(f"localization top1 {report.top1:.6f} top5 {top5}")
    return 0


def cmd_ablate(cfg: dict) -> int:
    tc = train_config(cfg)
    ds = load_data(cfg)
    base = model_config({**cfg, "model.td": "none"}, ds.num_classes)
    try:
        grid = ablation_grid(cfg["analysis.kinds"], cfg["analysis.ms"], cfg["analysis.ts"], cfg["analysis.variants"])
        for td in grid:
            replace(base, td=td).block_specs()
    except ValueError as e:
        raise ConfigError(f"ablation grid: {e}") from None
    train_ds, val_ds = _split(cfg, ds)
    out = _out(cfg)
    write_resolved(cfg, out / RESOLVED)
    rows = run_ablation(grid, base, tc, train_ds, val_ds)
    _write(out / "ablation.csv", ablation_to_csv(rows))
    print(f"wrote {len(rows)} ablation rows to {out / 'ablation.csv'}")
    return 0


def cmd_cost(cfg: dict) -> int:
    k = cfg["model.num_classes"] or (1000 if cfg["model.arch"] == "resnet50" else cfg["data.classes"])
    mc = model_config({**cfg, "model.num_classes": k}, k)
    res = cfg["analysis.resolutions"] or ((224,) if cfg["model.arch"] == "resnet50" else (cfg["data.size"],))
    model = Model(mc)
    if min(res) < model.min_input:
        raise ConfigError(f"resolution {min(res)} below the model minimum {model.min_input}")
    report = count_macs(model, res[0])
    out = _out(cfg)
    write_resolved(cfg, out / RESOLVED)
    _write(out / "cost.csv", report.to_csv())
    print(f"params {report.total_params} macs {report.total_macs} at {res[0]}x{res[0]}")
    tol = cfg["analysis.tol"]
    failures = []
    for label, got, want in (
        ("params", report.total_params, cfg["analysis.expect_params"]),
        ("macs", report.total_macs, cfg["analysis.expect_macs"]),
    ):
        if want is None:
            continue
        rel = abs(got - want) / abs(want) if want else float(got != 0)
        status = "ok" if rel <= tol else "MISMATCH"
        print(f"{label}: got {got} expected {want:.6g} rel diff {rel:.4%} (tol {tol:.4%}) {status}")
        if rel > tol:
            failures.append(label)
    if failures:
        raise ExpectationError(f"expectation mismatch: {', '.join(failures)}")
    return 0


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "cam": cmd_cam,
    "localize": cmd_localize,
    "ablate": cmd_ablate,
    "cost": cmd_cost,
}


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    argv = sys.argv[1:] if argv is None else list(argv)
    if any(a in ("-h", "--help") for a in argv):
        build_parser().parse_args(argv)  # prints help and exits 0
    try:
        command, cfg = resolve(argv)
        return HANDLERS[command](cfg)
    except ConfigError as e:
        print(f"tdam: config error: {e}", file=sys.stderr)
        return 2
    except ExpectationError as e:
        print(f"tdam: {e}", file=sys.stderr)
        return 3
    except (OSError, ValueError, RuntimeError) as e:
        print(f"tdam: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
