"""Training and evaluation drivers.

Training walks the dataset in temporal order, one optimizer step per
frame, recursing the model's own detached previous prediction through
the history path (matching what the model sees at inference time). The
loop is fully seeded: with fixed seeds a run, and a run resumed from any
of its checkpoints, reproduce losses bit-exactly on the same platform.

Checkpoints are npz containers holding every named parameter, the full
Adam state, the loop state (step, frame index, previous prediction) and
the config with its fingerprint; loading verifies the fingerprint
against the active config and refuses mismatches.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigurationError, TrainingError
from .evalkit import EvalReport, band_label, default_bands, frustum_mask, mae_banded, mtc, sdr
from .mapspace import ElevationMap, GridSpec, VehiclePose
from .model import ElevationNet
from .objective import LossWeights, loss_total
from .synthworld import Dataset

__all__ = [
    "Adam",
    "TrainResult",
    "train",
    "evaluate",
    "run_ablation",
    "save_checkpoint",
    "load_checkpoint",
    "ablation_rows",
    "learning_rate_at",
]


def learning_rate_at(config: RunConfig, step: int) -> float:
    """Per-step learning rate; cosine decay to lr_min_factor by the last step."""
    if config.lr_schedule == "constant" or config.train_steps <= 1:
        return config.learning_rate
    lo = config.learning_rate * config.lr_min_factor
    progress = min(step / max(config.train_steps - 1, 1), 1.0)
    return lo + (config.learning_rate - lo) * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Adaptive first-order optimizer over the model's named parameters."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)

    def clip_gradients(self, max_norm: float) -> float:
        """Scale all gradients so their global L2 norm is at most max_norm."""
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        norm = math.sqrt(total)
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = p.grad * scale
        return norm

    def state_arrays(self) -> dict:
        out = {"adam.t": np.array([self.t], dtype=np.int64)}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        self.t = int(arrays["adam.t"][0])
        for k in self.params:
            self.m[k] = np.asarray(arrays[f"adam.m.{k}"], dtype=np.float64).copy()
            self.v[k] = np.asarray(arrays[f"adam.v.{k}"], dtype=np.float64).copy()


# --- checkpoint I/O ---------------------------------------------------------


def _atomic_save_npz(path: Path, arrays: dict) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp.npz")
    os.close(fd)
    try:
        with open(tmp, "wb") as f:
            np.savez(f, **arrays)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def save_checkpoint(
    path: str | Path,
    model: ElevationNet,
    optimizer: Adam | None = None,
    step: int = 0,
    frame_idx: int = 0,
    prev_pred: ElevationMap | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    meta = {
        "fingerprint": cfg.fingerprint(),
        "config": cfg.canonical(),
        "step": step,
        "frame_idx": frame_idx,
        "param_count": model.param_count(),
    }
    arrays = {f"param.{k}": v for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    if prev_pred is not None:
        arrays["state.prev_values"] = prev_pred.values
        arrays["state.prev_pose"] = np.concatenate(
            [prev_pred.frame_pose.position,
             [prev_pred.frame_pose.yaw, prev_pred.frame_pose.roll, prev_pred.frame_pose.pitch,
              prev_pred.timestamp]]
        )
    _atomic_save_npz(path, arrays)


def load_checkpoint(path: str | Path, config: RunConfig | None = None):
    """Load a checkpoint; returns (config, state dict, meta, raw arrays).

    When a config is supplied its fingerprint must match the stored one.
    """
    path = Path(path)
    try:
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as e:
        raise ConfigurationError(f"cannot read checkpoint {path}: {e}")
    if "__meta__" not in arrays:
        raise ConfigurationError(f"checkpoint {path} has no metadata record")
    meta = json.loads(arrays["__meta__"].tobytes().decode())
    stored_cfg = RunConfig(**meta["config"])
    if config is not None and config.fingerprint() != meta["fingerprint"]:
        raise ConfigurationError(
            f"checkpoint fingerprint {meta['fingerprint']} does not match active config "
            f"{config.fingerprint()}; refusing to load"
        )
    state = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
    return stored_cfg, state, meta, arrays


def _restore_prev_pred(arrays: dict, grid: GridSpec) -> ElevationMap | None:
    if "state.prev_values" not in arrays:
        return None
    raw = arrays["state.prev_pose"]
    pose = VehiclePose(position=raw[:3].copy(), yaw=float(raw[3]), roll=float(raw[4]), pitch=float(raw[5]))
    return ElevationMap(grid=grid, values=arrays["state.prev_values"].copy(),
                        frame_pose=pose, timestamp=float(raw[6]))


# --- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path | None
    steps: int
    final_loss: float
    loss_history: list


def frame_gradient(model: ElevationNet, sample, prev_pred: ElevationMap | None, weights: LossWeights, beta: float):
    """Loss breakdown + parameter gradients for one frame (no optimizer step)."""
    hist, aligned, mask = model.history_inputs(prev_pred, sample.pose)
    pred = model.forward(sample.images, sample.pose, hist)
    aligned_vals = aligned.values if aligned is not None else None
    total, breakdown = loss_total(pred, sample.gt_map.values, aligned_vals, mask, weights, beta=beta)
    model.zero_grad()
    total.backward()
    return pred, float(total.data), breakdown


def train(
    config: RunConfig,
    dataset: Dataset,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Run the training loop; writes checkpoints and a JSONL loss log."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = ElevationNet(config, dataset.rig)
    opt = Adam(model.params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    weights = LossWeights(mu=config.mu_grad, lam=config.effective_lambda_tc, gamma=config.gamma_tv)

    step, frame_idx, prev_pred = 0, 0, None
    if resume_from is not None:
        _, state, meta, arrays = load_checkpoint(resume_from, config)
        model.load_state_dict(state)
        opt.load_state_arrays(arrays)
        step = int(meta["step"])
        frame_idx = int(meta["frame_idx"])
        prev_pred = _restore_prev_pred(arrays, model.grid)

    log_path = out_dir / "train_log.jsonl"
    log_f = open(log_path, "a" if resume_from else "w")
    history = []
    final_loss = math.nan
    try:
        while step < config.train_steps:
            if frame_idx == 0:
                prev_pred = None  # sequence restart: no history at the first frame
            sample = dataset.samples[frame_idx]
            pred, total, breakdown = frame_gradient(model, sample, prev_pred, weights, config.smooth_l1_beta)

            if not math.isfinite(total):
                finite = pred.data[np.isfinite(pred.data)]
                dump = {
                    "step": step,
                    "frame_idx": frame_idx,
                    "breakdown": breakdown,
                    "pred_stats": {
                        "min": float(finite.min()) if finite.size else None,
                        "max": float(finite.max()) if finite.size else None,
                        "non_finite_cells": int((~np.isfinite(pred.data)).sum()),
                    },
                }
                dump_path = out_dir / "nan_dump.json"
                with open(dump_path, "w") as f:
                    json.dump(dump, f, indent=2)
                raise TrainingError(
                    f"non-finite loss at step {step} (frame {frame_idx}); diagnostics in {dump_path}"
                )

            opt.clip_gradients(config.grad_clip_norm)
            opt.lr = learning_rate_at(config, step)
            opt.step()
            prev_pred = ElevationMap(
                grid=model.grid, values=pred.data.copy(), frame_pose=sample.pose,
                timestamp=sample.timestamp,
            )

            step += 1
            frame_idx = (frame_idx + 1) % len(dataset)
            final_loss = total
            record = {"step": step, "frame": (frame_idx - 1) % len(dataset), "total": total, **breakdown}
            history.append(record)
            if step % config.log_every == 0 or step == config.train_steps:
                log_f.write(json.dumps(record) + "\n")
                log_f.flush()
            if config.checkpoint_every and step % config.checkpoint_every == 0 and step < config.train_steps:
                save_checkpoint(out_dir / f"ckpt_{step:06d}.npz", model, opt, step, frame_idx, prev_pred)
    finally:
        log_f.close()

    final_path = out_dir / "ckpt_final.npz"
    save_checkpoint(final_path, model, opt, step, frame_idx, prev_pred)
    return TrainResult(
        checkpoint_path=final_path, log_path=log_path, steps=step,
        final_loss=final_loss, loss_history=history,
    )


# --- evaluation -------------------------------------------------------------


def _frustum_cameras(rig, selection: str):
    if selection == "front":
        return [rig[0]]
    if selection == "all":
        return list(rig.cameras)
    raise ConfigurationError(f"unknown frustum selection {selection!r}")


def predict_sequence(model: ElevationNet, dataset: Dataset) -> list[ElevationMap]:
    """Sequence-ordered inference with recursive history."""
    preds = []
    prev = None
    for sample in dataset.samples:
        pred = model.predict(sample.images, sample.pose, prev, timestamp=sample.timestamp)
        preds.append(pred)
        prev = pred
    return preds


def evaluate(
    config: RunConfig,
    dataset: Dataset,
    checkpoint: str | Path | None = None,
    model: ElevationNet | None = None,
    gt_as_pred: bool = False,
    frustum: str = "none",
    frame_filter=None,
) -> EvalReport:
    """Sequence-ordered evaluation producing an EvalReport.

    ``gt_as_pred`` scores the ground truth against itself (oracle mode);
    ``frustum`` restricts MAE/SDR cells to 'front' or 'all' camera
    frusta; ``frame_filter`` takes (index, sample) and selects frames
    for the MAE/SDR averages (mTC always uses the full sequence).
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot evaluate an empty dataset")
    if gt_as_pred:
        preds = [s.gt_map for s in dataset.samples]
    else:
        if model is None:
            if checkpoint is None:
                raise ConfigurationError("evaluate needs a checkpoint or model")
            stored_cfg, state, meta, _ = load_checkpoint(checkpoint, config)
            model = ElevationNet(stored_cfg, dataset.rig)
            model.load_state_dict(state)
        preds = predict_sequence(model, dataset)

    grid = dataset.grid
    bands = default_bands(grid)
    mae_acc = {b: [] for b in bands}
    sdr_acc = []
    for k, (sample, pred) in enumerate(zip(dataset.samples, preds)):
        if frame_filter is not None and not frame_filter(k, sample):
            continue
        cell_mask = None
        if frustum != "none":
            cams = _frustum_cameras(dataset.rig, frustum)
            cell_mask = frustum_mask(cams, sample.pose, grid, heights=sample.gt_map.values)
        m = mae_banded(pred.values, sample.gt_map.values, grid, bands, cell_mask=cell_mask)
        for b in bands:
            mae_acc[b].append(m[b])
        rng = np.random.default_rng([config.eval_sdr_seed, k])
        sdr_acc.append(
            sdr(pred.values, sample.gt_map.values, n=config.eval_sdr_pairs,
                tau=config.eval_sdr_tau, rng=rng, cell_mask=cell_mask)
        )
    if not sdr_acc:
        raise ConfigurationError("frame filter selected no frames")

    mtc_value = mtc(preds) if len(preds) >= 2 else float("nan")
    return EvalReport(
        mae_bands={band_label(b): float(np.mean(mae_acc[b])) for b in bands},
        sdr=float(np.mean(sdr_acc)),
        mtc=mtc_value,
        frames=len(sdr_acc),
        fingerprint=config.fingerprint(),
        extras={"gt_as_pred": gt_as_pred, "frustum": frustum},
    )


# --- ablation sweep ---------------------------------------------------------


def ablation_rows() -> list[dict]:
    """The four switch combinations, in the usual table order."""
    return [
        {"use_ope": False, "use_history": False, "use_tc_loss": False},
        {"use_ope": True, "use_history": False, "use_tc_loss": False},
        {"use_ope": False, "use_history": True, "use_tc_loss": True},
        {"use_ope": True, "use_history": True, "use_tc_loss": True},
    ]


def run_ablation(
    base_config: RunConfig,
    train_dataset: Dataset,
    eval_dataset: Dataset,
    out_dir: str | Path,
) -> list[tuple[dict, EvalReport]]:
    """Train + evaluate the four ablation rows; returns (switches, report) pairs."""
    out_dir = Path(out_dir)
    results = []
    for row in ablation_rows():
        tag = ("ope" if row["use_ope"] else "cpe") + ("_ha" if row["use_history"] else "_noha")
        cfg = dataclasses.replace(base_config, **row)
        run = train(cfg, train_dataset, out_dir / tag)
        report = evaluate(cfg, eval_dataset, checkpoint=run.checkpoint_path)
        report.to_json(out_dir / f"report_{tag}.json")
        results.append((row, report))
    return results
