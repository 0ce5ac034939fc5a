"""Command line entry point for the segmentation pipeline.

Subcommands: ``synth`` (generate a synthetic dataset), ``convert``
(rasterize polygon annotations), ``train``, ``eval``, ``predict`` and
``gradcheck``. Every run writes a ``run_manifest.txt`` key=value file into
its output directory before doing any work; feeding that file back through
``--config`` (plus the same ``--data``/``--out`` flags) reproduces the run.

Exit codes are a stable contract: 0 success, 1 usage error, 2 data error,
3 verification or numeric failure. Artifacts contain no timestamps, so a
command rerun with identical flags and seed produces byte-identical files.

The environment variable PRNET_THREADS caps BLAS parallelism; it must be
set before the interpreter imports this package.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from importlib import metadata
from pathlib import Path

import numpy as np

from . import data, gradcheck, report, training
from .data import DatasetError, LabelMap
from .model import PRNetConfig
from .tensor import NonFiniteError


def _version() -> str:
    try:
        return metadata.version("prnet")
    except metadata.PackageNotFoundError:
        return "unknown"


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage problems; the documented contract is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config files and run manifests
# ---------------------------------------------------------------------------


def _parse_config_value(name: str, kind, raw: str):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise UsageError(f"config key {name}: expected true/false, got {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    # remaining config fields are integer tuples ("64,128,256,512")
    return tuple(int(p) for p in raw.split(",") if p.strip())


def read_config_file(path) -> dict[str, str]:
    """Line-based key=value format; '#' starts a comment, blanks ignored."""
    table: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"cannot read config file {path}: {e}") from e
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        table[key.strip()] = value.strip()
    return table


def config_from_table(table: dict[str, str]) -> PRNetConfig:
    """Build a model config from string key=value pairs; ``run.*`` keys are
    run metadata and skipped here. Unknown keys are usage errors."""
    typed = {}
    by_name = {f.name: f.type for f in fields(PRNetConfig)}
    for key, raw in table.items():
        if key.startswith("run."):
            continue
        if key not in by_name:
            raise UsageError(f"unknown config key {key!r} (known: {sorted(by_name)})")
        kind = by_name[key]
        if isinstance(kind, str):
            kind = {"int": int, "float": float, "bool": bool}.get(kind.split("[")[0], kind)
        typed[key] = _parse_config_value(key, kind, raw)
    try:
        return PRNetConfig(**typed)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def write_manifest(out_dir: Path, command: str, run_fields: dict, config: PRNetConfig | None) -> Path:
    lines = [f"run.command={command}", f"run.version={_version()}"]
    lines += [f"run.{k}={_format_value(v)}" for k, v in run_fields.items()]
    if config is not None:
        lines += [f"{k}={_format_value(v)}" for k, v in config.to_dict().items()]
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_manifest.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _resolve(flag_value, table: dict[str, str], key: str, default, cast):
    """Precedence: explicit flag > config-file run.* key > built-in default."""
    if flag_value is not None:
        return flag_value
    if key in table:
        return cast(table[key])
    return default


def _apply_ablation_flags(cfg: PRNetConfig, args) -> PRNetConfig:
    over = {}
    if args.no_cfa:
        over["use_cfa"] = False
    if args.no_gfwm:
        over["use_gfwm"] = False
    if args.plain_unet:
        over["use_mwcn"] = False
    if args.kernels is not None:
        try:
            over["kernel_set"] = tuple(int(k) for k in args.kernels.split(","))
        except ValueError as e:
            raise UsageError(f"--kernels expects 3, 5 or 3,5; got {args.kernels!r}") from e
    if not over:
        return cfg
    try:
        return cfg.with_overrides(**over)
    except ValueError as e:
        raise UsageError(str(e)) from e


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    if args.size < 1:
        raise UsageError(f"--size must be >= 1, got {args.size}")
    out = Path(args.out)
    write_manifest(
        out, "synth",
        {"count": args.count, "size": args.size, "seed": args.seed, "out": args.out},
        None,
    )
    samples = data.synth_generate(args.count, args.size, args.size, seed=args.seed)
    manifest = data.save_dataset(samples, out)
    print(f"wrote {len(samples)} samples under {out} (manifest: {manifest})")
    return 0


def cmd_convert(args) -> int:
    out = Path(args.out)
    label_map = LabelMap.from_file(args.labelmap) if args.labelmap else LabelMap.default()
    write_manifest(
        out, "convert",
        {
            "annotations": args.annotations,
            "images": args.images or "",
            "labelmap": args.labelmap or "",
            "size": args.size or "",
            "split_fraction": args.split_fraction,
            "seed": args.seed,
            "lenient": args.lenient,
            "out": args.out,
        },
        None,
    )
    target_hw = (args.size, args.size) if args.size else None
    samples, warnings = data.convert_annotations(
        args.annotations,
        label_map,
        target_hw=target_hw,
        strict_labels=not args.lenient,
        images_dir=args.images,
    )
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    if 0.0 < args.split_fraction < 1.0:
        train_part, test_part = data.split_dataset(samples, args.split_fraction, seed=args.seed)
        samples = train_part + test_part
    manifest = data.save_dataset(samples, out)
    print(f"converted {len(samples)} annotated images into {out} (manifest: {manifest})")
    return 0


def _load_split(path, split: str):
    samples = data.load_dataset(path, split=None if split == "all" else split)
    if not samples:
        raise DatasetError(f"no samples in {path} for split {split!r}")
    return samples


def cmd_train(args) -> int:
    table = read_config_file(args.config) if args.config else {}
    cfg = _apply_ablation_flags(config_from_table(table), args)
    epochs = _resolve(args.epochs, table, "run.epochs", 200, int)
    batch = _resolve(args.batch, table, "run.batch", 12, int)
    seed = _resolve(args.seed, table, "run.seed", 0, int)
    split = args.split
    out = Path(args.out)
    write_manifest(
        out, "train",
        {
            "data": args.data,
            "split": split,
            "epochs": epochs,
            "batch": batch,
            "seed": seed,
            "lr0": 1e-4,
            "checkpoint_every": args.checkpoint_every,
            "out": args.out,
        },
        cfg,
    )
    dataset = _load_split(args.data, split)
    try:
        result = training.train(
            cfg, dataset, epochs=epochs, batch_size=batch, seed=seed,
            checkpoint_every=args.checkpoint_every, out_dir=out,
        )
    except ValueError as e:
        raise UsageError(str(e)) from e
    (out / "training_log.txt").write_text(training.format_log(result.records), encoding="utf-8")
    report.save_loss_curve(result.records, out / "loss_curve.png")
    training.save_checkpoint(result.checkpoint, out / "checkpoint_final.prnc")
    first, last = result.records[0], result.records[-1]
    print(f"trained {len(result.records)} iterations over {epochs} epochs "
          f"({len(dataset)} samples, batch {batch})")
    print(f"loss {first.loss:.6f} -> {last.loss:.6f}")
    print(f"artifacts in {out}: run_manifest.txt, training_log.txt, "
          f"loss_curve.png, checkpoint_final.prnc")
    return 0


def cmd_eval(args) -> int:
    ckpt = training.load_checkpoint(args.checkpoint)
    model = training.build_model(ckpt)
    dataset = _load_split(args.data, args.split)
    names = None
    if model.config.num_classes == len(data.DEFAULT_CLASS_NAMES):
        names = list(data.DEFAULT_CLASS_NAMES)
    try:
        rep = training.evaluate(model, dataset, class_names=names, per_image=args.per_image)
    except ValueError as e:
        raise DatasetError(str(e)) from e
    text = report.render_report_text(rep)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        write_manifest(
            out, "eval",
            {
                "checkpoint": args.checkpoint,
                "data": args.data,
                "split": args.split,
                "per_image": args.per_image,
                "out": args.out,
            },
            model.config,
        )
        (out / "report.txt").write_text(text, encoding="utf-8")
        (out / "report.tsv").write_text(report.render_report_tsv(rep), encoding="utf-8")
        report.save_dsc_figure(rep, out / "dsc_per_class.png")
        print(f"report written to {out}: report.txt, report.tsv, dsc_per_class.png")
    return 0


def cmd_predict(args) -> int:
    ckpt = training.load_checkpoint(args.checkpoint)
    model = training.build_model(ckpt)
    image = data.load_image(args.image)
    orig_hw = image.shape[1:]
    model_hw = tuple(ckpt.input_hw)
    fed = image
    if orig_hw != model_hw:
        fed = data._bilinear_chw(image, *model_hw)
    mask = training.predict_masks(model, fed[None])[0]
    if orig_hw != model_hw:
        mask = data._nearest_hw(mask, *orig_hw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask_path, overlay_path = report.save_prediction_images(image, mask, out)
    classes = np.unique(mask)
    print(f"predicted classes {classes.tolist()} on {args.image} "
          f"({orig_hw[0]}x{orig_hw[1]})")
    print(f"wrote {mask_path} and {overlay_path}")
    return 0


def cmd_gradcheck(args) -> int:
    dtype = np.float64 if args.fp64 else np.float32
    results, ok = gradcheck.run_suite(size=args.size, seed=args.seed, dtype=dtype)
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        print(f"{mark} {r.name:28s} worst_rel_err={r.worst:.3e} tolerance={r.tolerance:g}")
    mode = "fp64" if args.fp64 else "fp32"
    print(f"gradient checks ({mode}, size {args.size}): "
          f"{'all passed' if ok else 'FAILURES above'}")
    return 0 if ok else 3


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prnet", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"prnet {_version()}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sp = sub.add_parser("synth", help="generate a synthetic shape-segmentation dataset")
    sp.add_argument("--count", type=int, required=True, help="number of samples")
    sp.add_argument("--size", type=int, default=64, help="square image extent (default 64)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.set_defaults(func=cmd_synth)

    cp = sub.add_parser("convert", help="rasterize polygon annotations into a dataset")
    cp.add_argument("--annotations", required=True, help="directory of *.json annotation files")
    cp.add_argument("--images", default=None,
                    help="directory of images paired by stem (default: next to each annotation)")
    cp.add_argument("--labelmap", default=None,
                    help="text file with one class name per line (default: built-in classes)")
    cp.add_argument("--size", type=int, default=None, help="resize output pairs to SIZExSIZE")
    cp.add_argument("--split-fraction", type=float, default=0.8,
                    help="train fraction for split tags; 0 or 1 disables (default 0.8)")
    cp.add_argument("--seed", type=int, default=0, help="split shuffle seed")
    cp.add_argument("--lenient", action="store_true",
                    help="skip unknown labels with a warning instead of failing")
    cp.add_argument("--out", required=True)
    cp.set_defaults(func=cmd_convert)

    tp = sub.add_parser("train", help="train a model on a converted or synthetic dataset")
    tp.add_argument("--data", required=True, help="dataset directory or manifest.tsv")
    tp.add_argument("--config", default=None, help="key=value config file (see README)")
    tp.add_argument("--epochs", type=int, default=None, help="training epochs (default 200)")
    tp.add_argument("--batch", type=int, default=None, help="batch size (default 12)")
    tp.add_argument("--seed", type=int, default=None, help="model init + shuffle seed (default 0)")
    tp.add_argument("--split", choices=("train", "test", "all"), default="all",
                    help="which manifest split to train on (default all)")
    tp.add_argument("--checkpoint-every", type=int, default=0, metavar="E",
                    help="also checkpoint every E epochs (default: final only)")
    tp.add_argument("--no-cfa", action="store_true", help="disable skip-connection attention")
    tp.add_argument("--no-gfwm", action="store_true",
                    help="fix branch blend weights at 0.5 instead of learning them")
    tp.add_argument("--kernels", default=None, help="encoder kernel sizes: 3, 5 or 3,5")
    tp.add_argument("--plain-unet", action="store_true",
                    help="plain double-conv encoder stages (no wavelet blocks)")
    tp.add_argument("--out", required=True)
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", help="score a checkpoint against a dataset")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--split", choices=("train", "test", "all"), default="all")
    ep.add_argument("--per-image", action="store_true",
                    help="average Dice per image instead of pooling counts over the set")
    ep.add_argument("--out", default=None,
                    help="also write report.txt, report.tsv and dsc_per_class.png here")
    ep.set_defaults(func=cmd_eval)

    pp = sub.add_parser("predict", help="segment one image with a checkpoint")
    pp.add_argument("--checkpoint", required=True)
    pp.add_argument("--image", required=True)
    pp.add_argument("--out", required=True, help="directory for mask.png and overlay.png")
    pp.set_defaults(func=cmd_predict)

    gp = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    gp.add_argument("--size", type=int, default=8,
                    help="layer-check extent, a multiple of 8 (default 8); the "
                         "end-to-end model runs at the next valid extent >= 32")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--fp64", action="store_true",
                    help="verification mode: float64 tensors, tolerance 1e-4")
    gp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"prnet {args.command}: error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"prnet {args.command}: error: {e}", file=sys.stderr)
        return 1
    except DatasetError as e:
        print(f"prnet {args.command}: data error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"prnet {args.command}: data error: {e}", file=sys.stderr)
        return 2
    except NonFiniteError as e:
        print(f"prnet {args.command}: numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
