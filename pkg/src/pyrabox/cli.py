"""Command-line entry point: ``pyrabox <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .anchors import ConfigError, build_grid, label_pyramid
from .config import DEFAULTS, KEY_HELP, NetworkConfig, load_config
from .data import (FormatError, ParseError, SampleRecord, data_anchor_sample, letterbox, load_ppm,
                   load_records, parse_annotations, sample_report, synthetic_dataset, transform_boxes,
                   write_annotations, write_ppm)
from .network import ModelFormatError, init_params, load_model, save_model

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config_epilog() -> str:
    lines = ["config keys (JSON object; unknown keys are rejected):"]
    for key, default in DEFAULTS.items():
        lines.append(f"  {key:<22} default {json.dumps(default)}")
        lines.append(f"  {'':<22} {KEY_HELP[key]}")
    lines.append('bundled presets: "toy", "full" (pass as --config toy)')
    return "\n".join(lines)


def _load_cfg(args) -> NetworkConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _records(args, need_images: bool = True) -> list:
    if getattr(args, "synthetic", None):
        return synthetic_dataset(args.synthetic, args.data_seed)
    if not args.annotations:
        raise UsageError("--annotations (or --synthetic N) is required")
    if need_images:
        if not args.images_root:
            raise UsageError("--images-root is required with --annotations")
        return load_records(args.annotations, args.images_root)
    return parse_annotations(args.annotations)


def _add_data_args(p, images=True):
    p.add_argument("--annotations", help="annotation file (path / count / x y w h blocks)")
    if images:
        p.add_argument("--images-root", help="directory the annotation paths are relative to (binary PPM)")
    p.add_argument("--synthetic", type=int, metavar="N", help="use N generated images instead of files")
    p.add_argument("--data-seed", type=int, default=0, help="seed of the generated images (default 0)")


# ---------------------------------------------------------------------------
# commands


def cmd_anchors(args) -> int:
    grid = build_grid(_load_cfg(args))
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in grid.records():
            fh.write(json.dumps(rec) + "\n")
    print(f"wrote {len(grid)} anchors over {len(grid.specs)} layers to {args.out}")
    return EXIT_OK


def cmd_label(args) -> int:
    cfg = _load_cfg(args)
    grid = build_grid(cfg)
    layer = grid.layer_of()
    recs = _records(args, need_images=bool(args.images_root) or bool(args.synthetic))
    K = cfg.pyramid.K
    per_level = np.zeros((K + 1, len(grid.specs)), dtype=np.int64)
    ignored = np.zeros(K + 1, dtype=np.int64)
    faces = unmatched = 0
    for r in recs:
        boxes = r.faces
        if r.image is not None:
            _, scale = letterbox(r.image, cfg.input_size)
            boxes, _ = transform_boxes(boxes, scale, 0.0, 0.0, cfg.input_size, cfg.input_size)
        ls = label_pyramid(grid, boxes, cfg.pyramid)
        faces += len(boxes)
        unmatched += len(set(range(len(boxes))) - set(ls.matched[0][ls.labels[0] == 1].tolist()))
        for k in range(K + 1):
            per_level[k] += np.bincount(layer[ls.labels[k] == 1], minlength=len(grid.specs))
            ignored[k] += int((ls.labels[k] == -1).sum())
    summary = {
        "images": len(recs),
        "faces": faces,
        "faces_without_positive": unmatched,
        "anchors_per_image": len(grid),
        "positives": {f"k{k}": {"total": int(per_level[k].sum()),
                                "per_layer": per_level[k].tolist(),
                                "ignored": int(ignored[k])} for k in range(K + 1)},
    }
    for k in range(K + 1):
        print(f"k={k} positives per layer: {' '.join(str(int(v)) for v in per_level[k])}")
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _load_cfg(args)
    recs = [r for r in _records(args) if r.faces]
    if not recs:
        raise ParseError("no records with faces to sample from")
    rng = np.random.default_rng(cfg.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    draws, written = [], []
    for i in range(args.n):
        rec = recs[int(rng.integers(len(recs)))]
        crop = data_anchor_sample(rec, rng, crop_side=cfg.input_size)
        draws.append(crop.provenance)
        if i < args.write_crops:
            name = f"crop_{i:05d}.ppm"
            write_ppm(out / name, crop.image)
            written.append(SampleRecord(None, crop.faces, name))
    report = sample_report(draws)
    (out / "histogram.csv").write_text(report.to_csv(), encoding="utf-8")
    if written:
        write_annotations(written, out / "crops.txt")
    pre, post = report.mass_below(64)
    print(f"{args.n} draws; mean face size {report.pre_mean:.2f} -> {report.post_mean:.2f}; "
          f"share below 64 px {pre:.3f} -> {post:.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import NumericError, TrainState, train

    cfg = _load_cfg(args)
    recs = _records(args)
    state = TrainState.create(cfg, seed=cfg.seed)
    rows = ["step,loss"]

    def log_row(st, br):
        rows.append(f"{st.step},{br.value:.6f}")
        if args.log_every and st.step % args.log_every == 0:
            print(f"step {st.step} loss {br.value:.4f}", flush=True)

    try:
        state, hist = train(cfg, recs, args.steps, seed=cfg.seed, state=state, callback=log_row, log_every=0)
    except NumericError as exc:
        raise NumericFailure(str(exc)) from None
    save_model(state.params, args.out)
    if args.log:
        Path(args.log).write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"trained {args.steps} steps in {hist.seconds:.1f}s; final loss {hist.losses[-1]:.4f}; saved {args.out}")
    return EXIT_OK


def _model_params(args, cfg):
    expected = init_params(cfg, seed=0)
    return load_model(args.model, expected=expected)


def cmd_infer(args) -> int:
    from .train import infer_batch, write_detections

    cfg = _load_cfg(args)
    params = _model_params(args, cfg)
    if args.images:
        names = list(args.images)
        images = [load_ppm(p) for p in names]
    else:
        recs = _records(args)
        names = [r.source_path for r in recs]
        images = [r.image for r in recs]
    grid = build_grid(cfg)
    dets = []
    for i in range(0, len(images), args.batch):
        dets += infer_batch(params, cfg, images[i:i + args.batch], args.score_threshold, args.nms_threshold, grid=grid)
    write_detections(args.out, names, dets)
    print(f"{sum(len(d) for d in dets)} detections over {len(images)} images written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, read_detections

    recs = _records(args, need_images=False)
    found = read_detections(args.detections)
    unknown = set(found) - {r.source_path for r in recs}
    if unknown:
        raise ParseError(f"detections reference images missing from the annotations: {sorted(unknown)[0]}")
    report = evaluate([found.get(r.source_path, []) for r in recs], [r.faces for r in recs], args.iou)
    if args.out:
        Path(args.out).write_text(report.to_csv(), encoding="utf-8")
    buckets = " ".join(f"{k}={v:.4f}" for k, v in report.bucket_ap.items())
    print(f"AP@{args.iou:g} = {report.ap:.6f} ({report.num_det} detections, {report.num_gt} faces); {buckets}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import format_rows, run_gradcheck_suite

    rows, secs = run_gradcheck_suite(seeds=range(args.seed, args.seed + args.count),
                                     max_coords=None if args.all_coords else args.coords)
    print(format_rows(rows))
    print(f"{secs:.1f}s")
    if not all(r.passed for r in rows):
        raise NumericFailure("gradient check failed for " + ", ".join(r.op for r in rows if not r.passed))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .verify import run_selftest

    rows = run_selftest()
    width = max(len(n) for n, _, _ in rows)
    for name, ok, detail in rows:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
    failed = [n for n, ok, _ in rows if not ok]
    if failed:
        raise NumericFailure("self-test failed: " + ", ".join(failed))
    return EXIT_OK


def cmd_synth(args) -> int:
    recs = synthetic_dataset(args.n, args.data_seed)
    root = Path(args.out_dir)
    for r in recs:
        (root / r.source_path).parent.mkdir(parents=True, exist_ok=True)
        write_ppm(root / r.source_path, r.image)
    write_annotations(recs, root / "annotations.txt")
    print(f"wrote {len(recs)} images and {root / 'annotations.txt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="pyrabox", description="Context-assisted single-shot face detection toolkit.",
                epilog=_config_epilog(), formatter_class=fmt)
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def command(name, fn, help_text, config=True, seed=True):
        c = sub.add_parser(name, help=help_text, description=help_text, epilog=_config_epilog() if config else None,
                           formatter_class=fmt)
        if config:
            c.add_argument("--config", default="toy", help='JSON config path or preset name (default "toy")')
        if seed:
            c.add_argument("--seed", type=int, help="override the config seed")
        c.set_defaults(func=fn)
        return c

    c = command("anchors", cmd_anchors, "dump the anchor grid as JSON lines", seed=False)
    c.add_argument("--out", required=True)

    c = command("label", cmd_label, "pyramid-anchor label statistics for annotated faces", seed=False)
    _add_data_args(c)
    c.add_argument("--out", help="write the JSON summary here instead of stdout")

    c = command("sample", cmd_sample, "run data-anchor-sampling and write a size histogram")
    _add_data_args(c)
    c.add_argument("--n", type=int, default=1000, help="number of draws (default 1000)")
    c.add_argument("--out-dir", required=True)
    c.add_argument("--write-crops", type=int, default=0, metavar="K", help="also save the first K crops")

    c = command("train", cmd_train, "train a model with SGD")
    _add_data_args(c)
    c.add_argument("--steps", type=int, required=True)
    c.add_argument("--out", required=True, help="model file to write")
    c.add_argument("--log", help="CSV of per-step losses")
    c.add_argument("--log-every", type=int, default=50)

    c = command("infer", cmd_infer, "detect faces and write a detections file", seed=False)
    c.add_argument("--model", required=True)
    c.add_argument("--images", nargs="*", help="PPM images (otherwise use the annotation list)")
    _add_data_args(c)
    c.add_argument("--score-threshold", type=float, default=0.05)
    c.add_argument("--nms-threshold", type=float, default=0.3)
    c.add_argument("--batch", type=int, default=25)
    c.add_argument("--out", required=True)

    c = command("eval", cmd_eval, "precision/recall and AP of a detections file", config=False, seed=False)
    c.add_argument("--detections", required=True)
    _add_data_args(c, images=False)
    c.add_argument("--iou", type=float, default=0.5)
    c.add_argument("--out", help="CSV of the PR curve plus the AP row")

    c = command("gradcheck", cmd_gradcheck, "finite-difference check of every differentiable op",
                config=False, seed=False)
    c.add_argument("--seed", type=int, default=0, help="first seed (default 0)")
    c.add_argument("--count", type=int, default=1, help="number of consecutive seeds (default 1)")
    c.add_argument("--coords", type=int, default=12, help="probed entries per input (default 12)")
    c.add_argument("--all-coords", action="store_true", help="probe every entry")

    command("selftest", cmd_selftest, "run the invariant suite and print a pass/fail table", config=False, seed=False)

    c = command("synth", cmd_synth, "write a generated dataset of PPM images plus annotations",
                config=False, seed=False)
    c.add_argument("--n", type=int, default=500)
    c.add_argument("--data-seed", type=int, default=0)
    c.add_argument("--out-dir", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help and --version
            return int(exc.code or 0)
        if not getattr(args, "func", None):
            raise UsageError("a command is required (see --help)")
        return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, FormatError, ModelFormatError, ConfigError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: data: {exc.strerror or exc}: {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, T.NonFiniteError) as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except T.ContractError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
