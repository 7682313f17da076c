"""Command-line entry point: ``imems <subcommand> ...``.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
Option precedence is flag > config file > built-in default.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import __version__
from .data import (
    ConfigError,
    DatasetError,
    SyntheticConfig,
    load_dataset,
    resolve_splits,
    synthesize_dataset,
)
from .embedding import (
    IntegrityError,
    LabelRangeError,
    ShapeError,
    decode,
    encode,
    load_bundle,
    save_bundle,
)
from .evaluation import (
    evaluate_maps,
    load_palette,
    mean_report,
    render_overlay,
    report_row,
    table_header,
    write_csv,
)
from .nets import load_checkpoint, save_checkpoint
from .training import (
    GRID_PARAMS,
    METHODS,
    TrainConfig,
    UntrainedModelError,
    grid_search,
    parse_grid,
    predict,
    train,
)
from . import plotting

log = logging.getLogger("imems")

USAGE_ERRORS = (
    ConfigError,
    DatasetError,
    ShapeError,
    LabelRangeError,
    IntegrityError,
    UntrainedModelError,
    FileNotFoundError,
    json.JSONDecodeError,
    ValueError,
)


class UsageError(Exception):
    pass


# -- helpers --------------------------------------------------------------------


def _read_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    data = json.loads(path.read_text())
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _write_run(out: Path, command: str, **fields) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "version": __version__, **fields}
    path = out / "run.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def _read_rgb(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _read_mask(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mask not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im).astype(np.int64)


def _save_mask(path: Path, labels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def _config_flag_names() -> list[tuple[str, str, type]]:
    out = []
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        kind = {"int": int, "float": float, "str": str}.get(str(f.type).split(" ")[0], float)
        out.append((f.name, "--" + f.name.replace("_", "-"), kind))
    return out


def _resolve_train_config(args) -> TrainConfig:
    values = _read_json(args.config) if args.config else {}
    for name, _, _ in _config_flag_names():
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if args.seed is not None:
        values["seed"] = args.seed
    if not isinstance(values.get("method", "imems"), str) or values.get("method", "imems") not in METHODS:
        raise ConfigError(f"unknown method '{values.get('method')}'; valid methods: {', '.join(METHODS)}")
    return TrainConfig.from_dict(values)


def _split_sets(ds, fold, cfg: TrainConfig):
    train_idx, val_idx, test_idx = resolve_splits(ds, fold, cfg.val_fraction, cfg.seed)
    return ds.subset(train_idx), ds.subset(val_idx), ds.subset(test_idx)


# -- subcommands ------------------------------------------------------------------


def cmd_encode(args) -> int:
    image, mask = _read_rgb(args.image), _read_mask(args.mask)
    k = args.num_labels
    names = args.label_names.split(",") if args.label_names else None
    if k is None:
        if names is None:
            raise UsageError("encode needs --num-labels (or --label-names)")
        k = len(names)
    embedded = encode(image, mask, k)
    paths = save_bundle(args.out, embedded, names)
    if args.figure:
        plotting.plot_embedding(image, mask, embedded, Path(str(args.out) + ".png"), names)
    log.info("wrote %d files for stem %s", len(paths), args.out)
    return 0


def cmd_decode(args) -> int:
    embedded, _ = load_bundle(args.bundle)
    out = Path(args.out)
    _save_mask(out, decode(embedded))
    log.info("wrote %s", out)
    return 0


def cmd_synth(args) -> int:
    values = _read_json(args.config) if args.config else {}
    for key in ("num_labels", "width", "height", "train", "val", "test", "region_seeds", "seed"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    cfg = SyntheticConfig.from_dict(values)
    out = Path(args.out)
    manifest = synthesize_dataset(cfg, out)
    _write_run(out, "synth", config=cfg.to_dict(), seed=cfg.seed, manifest=manifest.name)
    log.info("wrote %s", manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    ds = load_dataset(args.manifest)
    train_set, val_set, _ = _split_sets(ds, args.fold, cfg)
    out = Path(args.out)
    _write_run(out, "train", manifest=str(args.manifest), config=cfg.to_dict(), seed=cfg.seed, fold=args.fold)
    model, history = train(train_set, val_set, cfg)
    model.provenance.update({"fold": args.fold, "dataset": ds.name, "config": cfg.to_dict()})
    save_checkpoint(out / "model.ckpt", model)
    history.to_csv(out / "history.csv")
    plotting.plot_history(history.train_loss, history.val_loss, history.selected_epoch, out / "history.png")
    log.info("selected epoch %d (val %.5f)", history.selected_epoch, history.val_loss[history.selected_epoch - 1])
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    palette = load_palette(args.palette) if args.palette else None
    k = model.spec.output_channels
    if args.image:
        items = [(Path(args.image).stem, _read_rgb(args.image))]
    else:
        ds = load_dataset(args.manifest)
        _check_k(model, ds)
        fold = None
        if ds.protocol == "kfold":
            fold = args.fold if args.fold is not None else model.provenance.get("fold")
        _, _, test_idx = resolve_splits(ds, fold, seed=model.provenance.get("seed", 0))
        items = [(ds.ids[i], ds.images[i]) for i in test_idx]
    for name, image in items:
        labels = predict(model, image)
        _save_mask(out / f"{name}.labels.png", labels)
        Image.fromarray(render_overlay(image, labels, palette, num_labels=k)).save(out / f"{name}.overlay.png")
    _write_run(out, "predict", checkpoint=str(args.checkpoint), count=len(items))
    return 0


def _check_k(model, ds) -> None:
    if model.spec.output_channels != ds.num_labels:
        raise ConfigError(
            f"checkpoint predicts K={model.spec.output_channels} labels but manifest has K={ds.num_labels}"
        )


def cmd_evaluate(args) -> int:
    ds = load_dataset(args.manifest)
    palette = load_palette(args.palette) if args.palette else None
    out = Path(args.out)
    rows = [table_header(ds.labels)]
    per_method: dict[str, list] = {}
    for ckpt in args.checkpoint:
        model = load_checkpoint(ckpt)
        _check_k(model, ds)
        method = model.provenance.get("method", "model")
        fold = args.fold if args.fold is not None else model.provenance.get("fold")
        if ds.protocol == "fixed-split":
            fold = None
        seed = model.provenance.get("seed", 0)
        _, _, test_idx = resolve_splits(ds, fold, seed=seed)
        preds = []
        for i in test_idx:
            labels = predict(model, ds.images[i])
            preds.append(labels)
            if not args.no_overlays:
                overlay = render_overlay(ds.images[i], labels, palette, num_labels=ds.num_labels)
                path = out / "overlays" / method / f"{ds.ids[i]}.png"
                path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(overlay).save(path)
        report = evaluate_maps([ds.masks[i] for i in test_idx], preds, ds.num_labels)
        per_method.setdefault(method, []).append((fold, report))
    for method, entries in per_method.items():
        if ds.protocol == "kfold":
            for fold, report in entries:
                rows.append(report_row(f"{method}/fold{fold}", report))
            rows.append(report_row(method, mean_report([r for _, r in entries])))
        else:
            for _, report in entries:
                rows.append(report_row(method, report))
    write_csv(out / "metrics.csv", rows)
    _write_run(out, "evaluate", manifest=str(args.manifest), checkpoints=[str(c) for c in args.checkpoint])
    for row in rows[1:]:
        log.info("%s avg_f=%.4f accuracy=%.4f", row[0], row[-2], row[-1])
    return 0


def cmd_grid_search(args) -> int:
    cfg = _resolve_train_config(args)
    grid = parse_grid(args.grid)
    ds = load_dataset(args.manifest)
    train_set, val_set, test_set = _split_sets(ds, args.fold, cfg)
    eval_set = val_set if args.eval_split == "val" else test_set
    out = Path(args.out)
    _write_run(
        out, "grid-search", manifest=str(args.manifest), config=cfg.to_dict(), seed=cfg.seed,
        fold=args.fold, grid=grid, param=args.param, eval_split=args.eval_split,
    )
    result = grid_search(train_set, val_set, eval_set, cfg, grid, param=args.param)
    header = list(result.rows[0].keys())
    rows = [header] + [[r[h] if r[h] is not None else "" for h in header] for r in result.rows]
    write_csv(out / "grid.csv", rows)
    (out / "best.json").write_text(json.dumps({"param": result.param, "best": result.best_value}, indent=2) + "\n")
    plotting.plot_grid(result.rows, args.param, out / "grid.png")
    log.info("best %s = %g", result.param, result.best_value)
    print(f"best {result.param} = {result.best_value:g}")
    return 0


# -- parser -----------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, *, manifest=False, config=False, fold=False, seed=False) -> None:
    if manifest:
        p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    if config:
        p.add_argument("--config", help="JSON config file; flags override its keys")
    if seed:
        p.add_argument("--seed", type=int, help="run seed (overrides config)")
    if fold:
        p.add_argument("--fold", type=int, help="held-out fold for kfold manifests")
    p.add_argument("--out", required=True, help="output path")


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training overrides")
    for name, flag, kind in _config_flag_names():
        if name == "method":
            g.add_argument(flag, dest=name, help=f"one of: {', '.join(METHODS)}")
        else:
            g.add_argument(flag, dest=name, type=kind)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imems", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="embed an image into its label map")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--num-labels", type=int)
    p.add_argument("--label-names", help="comma-separated label names")
    p.add_argument("--figure", action="store_true", help="also render <out>.png with every channel")
    _common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="argmax-decode an embedded bundle into a label PNG")
    p.add_argument("--bundle", required=True, help="bundle stem (without .chNN.png)")
    _common(p)
    p.set_defaults(func=cmd_decode)

    d = SyntheticConfig()
    p = sub.add_parser(
        "synth",
        help="write a seeded synthetic texture dataset",
        description=(
            f"Defaults: K={d.num_labels}, {d.width}x{d.height} pixels, "
            f"{d.train}/{d.val}/{d.test} train/val/test images, {d.region_seeds} Voronoi seeds."
        ),
    )
    _common(p, config=True, seed=True)
    p.add_argument("--num-labels", type=int, help=f"number of labels (default {d.num_labels})")
    p.add_argument("--width", type=int, help=f"image width (default {d.width})")
    p.add_argument("--height", type=int, help=f"image height (default {d.height})")
    p.add_argument("--train", type=int, help=f"training images (default {d.train})")
    p.add_argument("--val", type=int, help=f"validation images (default {d.val})")
    p.add_argument("--test", type=int, help=f"test images (default {d.test})")
    p.add_argument("--region-seeds", type=int, help=f"Voronoi seeds per image (default {d.region_seeds})")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one method on a manifest")
    _common(p, manifest=True, config=True, fold=True, seed=True)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--manifest")
    p.add_argument("--fold", type=int)
    p.add_argument("--palette", help="JSON array of #rrggbb colours")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics and overlays on the test split / fold")
    p.add_argument("--checkpoint", required=True, action="append", help="repeat for several folds or methods")
    p.add_argument("--palette", help="JSON array of #rrggbb colours")
    p.add_argument("--no-overlays", action="store_true")
    _common(p, manifest=True, fold=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid-search", help="sweep a joint-loss coefficient")
    _common(p, manifest=True, config=True, fold=True, seed=True)
    p.add_argument("--grid", default="0.1:0.9:0.1", help="start:stop:step or comma list (default 0.1:0.9:0.1)")
    p.add_argument("--param", default="lambda_seg", choices=GRID_PARAMS)
    p.add_argument("--eval-split", default="test", choices=("test", "val"))
    _train_flags(p)
    p.set_defaults(func=cmd_grid_search)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    # bit-reproducible reruns on one platform
    torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except USAGE_ERRORS as exc:
        print(f"imems {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"imems {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
