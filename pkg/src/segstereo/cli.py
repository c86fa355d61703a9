"""Command line: ``segstereo {gen-data,train,predict,eval,render} ...``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics
from . import model as M
from . import train as TR


def _pair(text: str) -> tuple[float, float]:
    lo, hi = (float(v) for v in text.split(","))
    return lo, hi


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="segstereo", description=__doc__)
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic stereo dataset with a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=D.SceneConfig.height)
    g.add_argument("--width", type=int, default=D.SceneConfig.width)
    g.add_argument("--classes", type=int, default=D.SceneConfig.num_classes)
    g.add_argument("--planes", type=int, default=D.SceneConfig.num_planes)
    g.add_argument("--disparity-range", type=_pair, default=D.SceneConfig.disparity_range,
                   metavar="LO,HI")
    g.add_argument("--no-class-bands", action="store_true",
                   help="draw every plane's disparity from the full range regardless of class")

    t = sub.add_parser("train", help="pretrain the segmentation branch, then train disparity")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--data", required=True, help="dataset directory or manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--val", help="validation dataset for periodic evaluation")
    t.add_argument("--preset", choices=sorted(TR.PRESETS))
    t.add_argument("--set", dest="overrides", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (repeatable), e.g. --set model.embed_semantics=false")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, help="stop at this iteration without changing the schedule")
    t.add_argument("--quiet", action="store_true", help="do not echo the metrics log")

    p = sub.add_parser("predict", help="run a checkpoint over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="compare predicted disparities with ground truth")
    e.add_argument("--pred", required=True, help="directory of <name>.png (KITTI) or <name>.pfm maps")
    e.add_argument("--gt", required=True, help="dataset directory or a directory of KITTI PNGs")
    e.add_argument("--noc", nargs="?", const="", default=None, metavar="DIR",
                   help="also report non-occluded pixels; masks come from the dataset or DIR/<name>.png")
    e.add_argument("--abs-thresh", type=float, default=3.0)
    e.add_argument("--rel-thresh", type=float, default=0.05)

    r = sub.add_parser("render", help="colour-map a disparity file, optionally with an error map")
    r.add_argument("--disparity", required=True, help="KITTI PNG or PFM")
    r.add_argument("--out", required=True)
    r.add_argument("--max-disp", type=float, help="upper end of the colour scale (default: map maximum)")
    r.add_argument("--gt", help="ground truth; writes <out>_error.png next to --out")
    r.add_argument("--max-error", type=float, default=5.0)
    r.add_argument("--cmap", default="magma")
    return ap


# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    scene = D.SceneConfig(height=args.height, width=args.width, num_classes=args.classes,
                          num_planes=min(args.planes, args.classes),
                          disparity_range=args.disparity_range, class_bands=not args.no_class_bands)
    scene.validate()
    out = Path(args.out)
    dirs = [D.write_sample(out / s.name, s) for s in D.gen_dataset(args.count, scene, seed=args.seed)]
    D.write_manifest(out / "manifest.txt", dirs)
    print(f"wrote {len(dirs)} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = TR.load_config(args.config, dict(args.overrides), args.preset)
    samples = D.load_dataset(args.data)
    val = D.load_dataset(args.val) if args.val else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(TR.dump_config(cfg))
    logger = TR.MetricsLog(out / "metrics.log", echo=None if args.quiet else print)
    try:
        state, _ = TR.train(cfg, samples, out, val_samples=val, resume=args.resume,
                            stop_after=args.stop_after, logger=logger)
    finally:
        logger.close()
    if val:
        print(TR.evaluate_model(state.model, val).table())
    return 0


def cmd_predict(args) -> int:
    state, _ = M.load_checkpoint(args.checkpoint)
    samples = D.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s, d in zip(samples, TR.predict(state, samples)):
        D.write_kitti_disparity(out / f"{s.name}.png", d)
        D.write_pfm(out / f"{s.name}.pfm", d.astype(np.float32))
    print(f"wrote {len(samples)} predictions to {out}")
    return 0


def _read_disparity(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if path.suffix.lower() == ".pfm":
        d, _ = D.read_pfm(path)
        if d.ndim != 2:
            raise ValueError(f"{path}: expected a single-channel map")
        d = d.astype(np.float64)
        return d, np.isfinite(d)
    return D.read_kitti_disparity(path)


def _find_prediction(pred_dir: Path, name: str) -> Path:
    for ext in (".png", ".pfm"):
        q = pred_dir / f"{name}{ext}"
        if q.exists():
            return q
    raise FileNotFoundError(f"no prediction for {name!r} in {pred_dir}")


def cmd_eval(args) -> int:
    gt_dir, pred_dir = Path(args.gt), Path(args.pred)
    names, gts, valids, nocs = [], [], [], []
    if (gt_dir / "manifest.txt").exists() or gt_dir.suffix == ".txt":
        for s in D.load_dataset(gt_dir):
            if s.gt_disparity is None:
                raise ValueError(f"{s.name}: no ground truth disparity")
            names.append(s.name)
            gts.append(s.gt_disparity)
            valids.append(s.valid)
            nocs.append(s.noc_mask)
    else:
        for f in sorted(gt_dir.glob("*.png")):
            d, v = D.read_kitti_disparity(f)
            names.append(f.stem)
            gts.append(d)
            valids.append(v)
            nocs.append(None)
    if not names:
        raise ValueError(f"no ground truth found in {gt_dir}")
    if args.noc is not None:
        if args.noc:
            nocs = [D.read_labels(Path(args.noc) / f"{n}.png") > 0 for n in names]
        if any(m is None for m in nocs):
            raise ValueError("--noc needs masks: use a dataset directory or pass a mask directory")
    preds = [_read_disparity(_find_prediction(pred_dir, n))[0] for n in names]
    res = metrics.evaluate(preds, gts, valids, nocs if args.noc is not None else None,
                           abs_thresh=args.abs_thresh, rel_thresh=args.rel_thresh)
    print(res.table())
    print(res.key_values())
    return 0


def _colorize(values: np.ndarray, vmax: float, cmap: str, mask: np.ndarray | None = None) -> np.ndarray:
    from matplotlib import colormaps

    norm = np.clip(values / max(vmax, 1e-12), 0.0, 1.0)
    rgb = colormaps[cmap](norm)[..., :3]
    if mask is not None:
        rgb[~mask] = 0.0
    return np.round(rgb * 255).astype(np.uint8).transpose(2, 0, 1)


def cmd_render(args) -> int:
    d, valid = _read_disparity(Path(args.disparity))
    vmax = args.max_disp if args.max_disp else float(d[valid].max(initial=1.0))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.write_image(out, _colorize(d, vmax, args.cmap))
    if args.gt:
        g, gv = _read_disparity(Path(args.gt))
        if g.shape != d.shape:
            raise ValueError(f"ground truth {g.shape} and disparity {d.shape} differ")
        err_path = out.with_name(out.stem + "_error.png")
        D.write_image(err_path, _colorize(np.abs(d - g), args.max_error, "inferno", gv))
        print(f"wrote {out} and {err_path}")
    else:
        print(f"wrote {out}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "predict": cmd_predict,
            "eval": cmd_eval, "render": cmd_render}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, KeyError, FileNotFoundError, FloatingPointError) as exc:
        print(f"segstereo {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
