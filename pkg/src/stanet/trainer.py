"""Optimization loop, hand-written optimizers, checkpoints and the overfit probe."""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint
from .backbone import NetworkConfig, STANet, build_network
from .heads import apply_gating, gate_mask
from .losses import TERMS, LossWeights, TrainingFault, total_loss
from .metrics import classification_metrics, last_step_errors
from .scenegen import keyframes, read_dataset, MIN_DURATION
from .tensor import NonFiniteError, no_grad
from .voxelizer import HISTORY_FRAMES, GridConfig, VoxelClip, build_clip, collate

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd_momentum")
LOG_COLUMNS = ("step",) + TERMS + ("total", "wall_ms")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 2
    max_steps: int = 100
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 0  # 0: final checkpoint only
    grad_clip: float = 5.0
    gate_threshold: float = 0.5
    keyframe_stride: int = 10
    workers: int = 1
    data: str = ""
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights.from_dict(self.loss_weights)
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0 or self.checkpoint_every < 0 or self.workers < 1:
            raise ValueError("max_steps, checkpoint_every must be >= 0 and workers >= 1")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["betas"] = list(self.betas)
        d["network"] = self.network.to_dict()
        d["loss_weights"] = self.loss_weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


# -- optimizers ---------------------------------------------------------------
class Optimizer:
    def __init__(self, named_params):
        self.params = list(named_params)
        self.step_count = 0

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], step: int) -> None:
        self.step_count = step


class SGDMomentum(Optimizer):
    """v <- mu v + g;  w <- w - lr v."""

    def __init__(self, named_params, lr: float, momentum: float = 0.9):
        super().__init__(named_params)
        self.lr, self.momentum = lr, momentum
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self) -> None:
        self.step_count += 1
        for n, p in self.params:
            if p.grad is None:
                continue
            v = self.velocity[n]
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

    def state_arrays(self):
        return {f"optim.velocity.{n}": v for n, v in self.velocity.items()}

    def load_state_arrays(self, arrays, step):
        super().load_state_arrays(arrays, step)
        for n in self.velocity:
            self.velocity[n][...] = arrays[f"optim.velocity.{n}"]


class Adam(Optimizer):
    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(named_params)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for n, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_arrays(self):
        out = {f"optim.m.{n}": a for n, a in self.m.items()}
        out.update({f"optim.v.{n}": a for n, a in self.v.items()})
        return out

    def load_state_arrays(self, arrays, step):
        super().load_state_arrays(arrays, step)
        for n in self.m:
            self.m[n][...] = arrays[f"optim.m.{n}"]
            self.v[n][...] = arrays[f"optim.v.{n}"]


def make_optimizer(cfg: TrainConfig, named_params) -> Optimizer:
    if cfg.optimizer == "adam":
        return Adam(named_params, cfg.lr, cfg.betas, cfg.eps)
    return SGDMomentum(named_params, cfg.lr, cfg.momentum)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for _, p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if not np.isfinite(norm):
        raise TrainingFault("grad_norm", norm)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# -- data ---------------------------------------------------------------------
def load_clips(path: str, keyframe_stride: int = 10, workers: int = 1,
               grid: Optional[GridConfig] = None):
    """Read a dataset file and build every clip. Returns (clips, grid)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    ds = read_dataset(path)
    grid = grid or ds.grid
    jobs = []
    for sc in ds.scenes:
        if sc.duration_frames < MIN_DURATION:
            logger.warning("scene %d too short (%d frames); skipped", sc.id, sc.duration_frames)
            continue
        for k in keyframes(sc.duration_frames, keyframe_stride):
            jobs.append((sc.frames[k - HISTORY_FRAMES + 1:k + 1], sc.actors, k, sc.id))

    def build(job):
        history, actors, k, sid = job
        return build_clip(history, actors, k, grid, scene_id=sid)

    if workers > 1:
        # map() keeps submission order, so the clip list does not depend on scheduling
        with ThreadPoolExecutor(workers) as pool:
            clips = list(pool.map(build, jobs))
    else:
        clips = [build(j) for j in jobs]
    return clips, grid


def batch_indices(n_clips: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Clip indices for optimizer ``step``: a fresh seeded permutation per epoch."""
    per_epoch = -(-n_clips // batch_size)
    epoch, b = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n_clips)
    return perm[b * batch_size:(b + 1) * batch_size]


# -- checkpoints ----------------------------------------------------------------
def save_checkpoint(path: str, net: STANet, opt: Optimizer, cfg: TrainConfig,
                    grid: GridConfig, step: int) -> None:
    arrays = dict(net.state_dict())
    arrays.update(opt.state_arrays())
    meta = {
        "step": step,
        "optimizer_step": opt.step_count,
        "network": net.cfg.to_dict(),
        "grid": grid.to_dict(),
        "grid_hash": grid.config_hash(),
        "train": cfg.to_dict(),
    }
    checkpoint.save(path, arrays, meta)


def load_model(path: str, seed: int = 0):
    """Rebuild a network from a checkpoint. Returns (network, meta)."""
    arrays, meta = checkpoint.load(path)
    net = build_network(NetworkConfig.from_dict(meta["network"]), seed)
    net.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("optim.")})
    net.eval()
    return net, meta


@dataclass
class TrainResult:
    network: STANet
    optimizer: Optimizer
    steps: int
    rows: List[dict]
    checkpoint_path: str
    log_path: str
    grid: GridConfig


def _write_rows(path: str, rows: Sequence[dict], append: bool) -> None:
    new = not (append and os.path.exists(path))
    with open(path, "a" if not new else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["step"]] + [repr(r[t]) for t in TERMS + ("total",)] + [f"{r['wall_ms']:.3f}"])


def read_log(path: str) -> List[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def train(cfg: TrainConfig, out_dir: str, clips: Optional[Sequence[VoxelClip]] = None,
          grid: Optional[GridConfig] = None, resume_from: Optional[str] = None) -> TrainResult:
    """Train for ``cfg.max_steps`` optimizer steps (total, counting resumed ones).

    Clips come from ``clips`` if given, else from the dataset at ``cfg.data``.
    Writes ``checkpoint.stck`` and ``loss_log.csv`` under ``out_dir``.
    """
    cfg.validate()
    if clips is None:
        clips, grid = load_clips(cfg.data, cfg.keyframe_stride,
                                 1 if cfg.deterministic else cfg.workers)
    if grid is None:
        raise ValueError("grid config required when clips are passed directly")
    if not clips:
        raise ValueError("no clips to train on")
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.stck")
    log_path = os.path.join(out_dir, "loss_log.csv")

    net = build_network(cfg.network, cfg.seed)
    opt = make_optimizer(cfg, net.named_parameters())
    start = 0
    if resume_from:
        arrays, meta = checkpoint.load(resume_from)
        if meta["grid_hash"] != grid.config_hash():
            raise ValueError("checkpoint grid does not match the training data grid")
        net.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("optim.")})
        opt.load_state_arrays(arrays, meta["optimizer_step"])
        start = int(meta["step"])
    elif os.path.exists(log_path):
        os.remove(log_path)

    net.train()
    rows: List[dict] = []
    step = start
    try:
        while step < cfg.max_steps:
            t0 = time.perf_counter()
            idx = batch_indices(len(clips), cfg.batch_size, cfg.seed, step)
            batch = collate([clips[i] for i in idx])
            opt.zero_grad()
            bundle = net(batch["frames"])
            loss = total_loss(bundle, batch, cfg.loss_weights)
            loss.total.backward()
            clip_grad_norm(opt.params, cfg.grad_clip)
            opt.step()
            step += 1
            row = {"step": step, **loss.as_dict(), "wall_ms": 1000 * (time.perf_counter() - t0)}
            rows.append(row)
            _write_rows(log_path, [row], append=True)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_path, net, opt, cfg, grid, step)
    except (TrainingFault, NonFiniteError) as exc:
        # parameters still hold the last finite state: the failing update was never applied
        logger.error("aborting at step %d: %s", step + 1, exc)
        save_checkpoint(ckpt_path, net, opt, cfg, grid, step)
        if isinstance(exc, TrainingFault):
            raise
        raise TrainingFault("forward", float("nan")) from exc
    save_checkpoint(ckpt_path, net, opt, cfg, grid, step)
    return TrainResult(net, opt, step, rows, ckpt_path, log_path, grid)


# -- overfit probe --------------------------------------------------------------
def predict(net: STANet, clips: Sequence[VoxelClip], threshold: float = 0.5, batch_size: int = 4):
    """Gated eval-mode predictions: list of (class_pred, gate_mask, gated_motion) per clip."""
    net.eval()
    out = []
    with no_grad():
        for i in range(0, len(clips), batch_size):
            frames = np.stack([c.frames for c in clips[i:i + batch_size]])
            bundle = apply_gating(net(frames), threshold)
            cls = np.argmax(bundle.class_logits.data, axis=-1)
            gate = gate_mask(bundle.class_logits.data, bundle.state_logit.data, threshold)
            for j in range(len(frames)):
                out.append((cls[j], gate[j], bundle.motion_gated[j]))
    return out


def overfit_probe(cfg: TrainConfig, clips: Sequence[VoxelClip], grid: GridConfig,
                  out_dir: str) -> dict:
    """Train on a tiny clip set, then score the network on those same clips."""
    if len(clips) > 16:
        raise ValueError(f"overfit probe expects <= 16 clips, got {len(clips)}")
    result = train(cfg, out_dir, clips=clips, grid=grid)
    preds = predict(result.network, clips, cfg.gate_threshold)
    pred_cls = np.stack([p[0] for p in preds])
    gt_cls = np.stack([c.class_target for c in clips])
    _, oa, mca = classification_metrics(pred_cls, gt_cls)

    # static foreground cells whose motion the gate zeroed
    errs, n_gated = [], 0
    for (_, gate, gated), c in zip(preds, clips):
        gated_cells = (c.class_target != 0) & (c.state_target == 1) & gate
        n_gated += int(gated_cells.sum())
        errs.append(last_step_errors(gated, c.motion_target)[gated_cells])
    errs = np.concatenate(errs)
    return {
        "initial_loss": result.rows[0]["total"] if result.rows else None,
        "final_loss": result.rows[-1]["total"] if result.rows else None,
        "train_OA": oa,
        "train_MCA": mca,
        "static_motion_error": float(errs.max()) if len(errs) else 0.0,
        "static_gated_cells": n_gated,
        "steps": result.steps,
        "log_path": result.log_path,
        "checkpoint_path": result.checkpoint_path,
    }
