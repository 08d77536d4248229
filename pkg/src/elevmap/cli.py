"""Command-line entry points: synthgen, train, eval, predict, ablate.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import default_rig
from .config import RunConfig
from .errors import ConfigurationError, DatasetError, GenerationError, TrainingError
from .harness import evaluate, load_checkpoint, run_ablation, train
from .mapspace import GridSpec, save_elevation_map
from .model import ElevationNet
from .synthworld import generate_sequence, generate_terrain, read_dataset, write_dataset


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    p = _Parser(prog="elevmap", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("synthgen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0, help="terrain seed")
    g.add_argument("--traj-seed", type=int, default=None, help="trajectory seed (default: terrain seed)")
    g.add_argument("--style", choices=("desert_flat", "hilly"), default="hilly")
    g.add_argument("--frames", type=int, default=50)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--grid-rows", type=int, default=32)
    g.add_argument("--grid-cols", type=int, default=32)
    g.add_argument("--resolution", type=float, default=1.0)
    g.add_argument("--extent", type=float, default=600.0)
    g.add_argument("--speed", type=float, default=3.0)
    g.add_argument("--dt", type=float, default=0.5)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help="JSON config (defaults otherwise)")
    t.add_argument("--steps", type=int, default=None, help="override train_steps")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--gt-as-pred", action="store_true", help="score ground truth against itself")
    e.add_argument("--frustum", choices=("none", "front", "all"), default="none")
    e.add_argument("--out", default=None, help="write the report JSON here")

    r = sub.add_parser("predict", help="predict one frame and render a comparison image")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--frame-dir", required=True, help="a frames/NNNNNN directory inside a dataset")
    r.add_argument("--out", required=True, help="output prefix (writes .json/.bin/.png)")

    a = sub.add_parser("ablate", help="train + evaluate the 4 ablation rows")
    a.add_argument("--dataset", required=True)
    a.add_argument("--eval-dataset", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config", default=None)
    a.add_argument("--steps", type=int, default=None)
    return p


def _cmd_synthgen(args) -> int:
    grid = GridSpec(args.grid_rows, args.grid_cols, args.resolution)
    rig = default_rig(args.image_size)
    terrain = generate_terrain(args.seed, args.style, extent_m=args.extent)
    traj_seed = args.seed if args.traj_seed is None else args.traj_seed
    samples = generate_sequence(
        terrain, rig, grid, traj_seed, args.frames, speed_mps=args.speed, dt_s=args.dt
    )
    meta = {
        "style": args.style,
        "seeds": {"terrain": args.seed, "trajectory": traj_seed},
        "speed_mps": args.speed,
        "dt_s": args.dt,
    }
    write_dataset(samples, args.out, rig, grid, meta=meta)
    print(f"wrote {len(samples)} frames to {args.out}")
    return 0


def _load_config(path, dataset, steps) -> RunConfig:
    cfg = RunConfig.from_json(path) if path else RunConfig()
    updates = {}
    if steps is not None:
        updates["train_steps"] = steps
    if dataset.grid.rows != cfg.grid_rows or dataset.grid.cols != cfg.grid_cols:
        updates.update(grid_rows=dataset.grid.rows, grid_cols=dataset.grid.cols,
                       resolution_m=dataset.grid.resolution_m)
    if dataset.manifest.get("image_size", cfg.image_size) != cfg.image_size:
        updates["image_size"] = int(dataset.manifest["image_size"])
    return cfg.replace(**updates) if updates else cfg


def _cmd_train(args) -> int:
    dataset = read_dataset(args.dataset)
    cfg = _load_config(args.config, dataset, args.steps)
    result = train(cfg, dataset, args.out, resume_from=args.resume)
    print(f"trained {result.steps} steps, final loss {result.final_loss:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    dataset = read_dataset(args.dataset)
    if args.gt_as_pred:
        cfg = _load_config(None, dataset, None)
        report = evaluate(cfg, dataset, gt_as_pred=True, frustum=args.frustum)
    else:
        if args.checkpoint is None:
            raise ConfigurationError("eval needs --checkpoint (or --gt-as-pred)")
        stored_cfg, _, _, _ = load_checkpoint(args.checkpoint)
        report = evaluate(stored_cfg, dataset, checkpoint=args.checkpoint, frustum=args.frustum)
    print(report.render_table())
    if args.out:
        report.to_json(args.out)
    return 0


_MAP_COLORS = np.array(
    [[0.23, 0.13, 0.45], [0.2, 0.5, 0.73], [0.17, 0.7, 0.5], [0.63, 0.83, 0.26], [0.99, 0.9, 0.15]]
)


def _colorize(values: np.ndarray, lo: float, hi: float, upscale: int) -> np.ndarray:
    t = np.clip((values - lo) / (hi - lo + 1e-12), 0.0, 1.0)
    x = t * (len(_MAP_COLORS) - 1)
    i = np.clip(x.astype(int), 0, len(_MAP_COLORS) - 2)
    f = (x - i)[..., None]
    rgb = _MAP_COLORS[i] * (1 - f) + _MAP_COLORS[i + 1] * f
    img = (rgb * 255 + 0.5).astype(np.uint8)
    img = np.repeat(np.repeat(img, upscale, axis=0), upscale, axis=1)
    return img[::-1]  # forward distance grows upward in the rendering


def _cmd_predict(args) -> int:
    frame_dir = Path(args.frame_dir)
    dataset_dir = frame_dir.parent.parent
    dataset = read_dataset(dataset_dir)
    try:
        index = int(frame_dir.name)
    except ValueError:
        raise ConfigurationError(f"{frame_dir} is not a frames/NNNNNN directory")
    if index >= len(dataset):
        raise ConfigurationError(f"frame {index} out of range ({len(dataset)} frames)")

    stored_cfg, state, _, _ = load_checkpoint(args.checkpoint)
    model = ElevationNet(stored_cfg, dataset.rig)
    model.load_state_dict(state)

    sample = dataset.samples[index]
    pred = model.predict(sample.images, sample.pose, prev_map=None, timestamp=sample.timestamp)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_elevation_map(pred, out)

    gt = sample.gt_map.values
    lo = float(min(pred.values.min(), gt.min()))
    hi = float(max(pred.values.max(), gt.max()))
    upscale = max(1, sample.images.shape[1] // pred.grid.rows)
    pred_img = _colorize(pred.values, lo, hi, upscale)
    gt_img = _colorize(gt, lo, hi, upscale)
    front = sample.images[0]
    h = max(front.shape[0], pred_img.shape[0])

    def pad(im):
        return np.pad(im, ((0, h - im.shape[0]), (0, 4), (0, 0)))

    panel = np.concatenate([pad(front), pad(gt_img), pad(pred_img)], axis=1)
    Image.fromarray(panel, "RGB").save(out.with_suffix(".png"))
    print(f"wrote {out}.json/.bin and {out.with_suffix('.png')} (front | gt | prediction)")
    return 0


def _cmd_ablate(args) -> int:
    train_ds = read_dataset(args.dataset)
    eval_ds = read_dataset(args.eval_dataset)
    cfg = _load_config(args.config, train_ds, args.steps)
    results = run_ablation(cfg, train_ds, eval_ds, args.out)
    print(f"{'OPE':>4s} {'HA':>4s}  {'MAE(full)':>10s} {'SDR':>8s} {'mTC':>8s}")
    for row, report in results:
        full_band = list(report.mae_bands)[-1]
        print(
            f"{'x' if row['use_ope'] else '-':>4s} {'x' if row['use_history'] else '-':>4s}  "
            f"{report.mae_bands[full_band]:>10.3f} {report.sdr:>8.3f} {report.mtc:>8.3f}"
        )
    summary = [
        {"switches": row, "mae_bands": rep.mae_bands, "sdr": rep.sdr, "mtc": rep.mtc}
        for row, rep in results
    ]
    with open(Path(args.out) / "ablation_summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    return 0


_COMMANDS = {
    "synthgen": _cmd_synthgen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, DatasetError, GenerationError, TrainingError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
