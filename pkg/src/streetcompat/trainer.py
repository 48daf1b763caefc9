"""Batch construction and the alternating discriminator / generator+embedding updates."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from ._rng import lane_rng
from .data import group_by_person
from .losses import LossConfig, PairIndex, compatibility_loss, discriminator_loss, generator_loss
from .netcore import (ModelState, forward_discriminator, forward_embedding, forward_generator,
                      save_checkpoint)
from .patching import R_RANGE, crop_to_tensor, sample_patch_spec

log = logging.getLogger(__name__)

DECAY_MODES = ("one_minus_factor", "multiply_by_factor")


@dataclass
class TrainConfig:
    batch_size_source: int = 32
    batch_size_target: int = 32
    persons_per_batch: int = 16
    patches_per_person: int = 2
    lr0: float = 5e-5
    decay_factor: float = 0.015
    decay_every: int = 500
    decay_mode: str = "one_minus_factor"
    momentum: float = 0.9
    disc_lr_scale: float = 1.0  # discriminator lr = disc_lr_scale * lr_at(step)
    max_steps: int = 5000
    early_stop_patience: int = 5
    eval_every: int = 250
    eval_n_patches: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size_source", "batch_size_target", "persons_per_batch",
                     "patches_per_person", "decay_every", "early_stop_patience", "eval_every",
                     "eval_n_patches"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train.{name} must be > 0")
        if self.patches_per_person < 2:
            raise ValueError("train.patches_per_person must be >= 2 to form positive pairs")
        if self.persons_per_batch * self.patches_per_person != self.batch_size_source:
            raise ValueError(
                "train.persons_per_batch * train.patches_per_person must equal "
                f"train.batch_size_source ({self.persons_per_batch} * {self.patches_per_person} "
                f"!= {self.batch_size_source})")
        if not self.lr0 > 0:
            raise ValueError("train.lr0 must be > 0")
        if not 0 <= self.decay_factor <= 1:
            raise ValueError("train.decay_factor must lie in [0, 1]")
        if self.decay_mode not in DECAY_MODES:
            raise ValueError(f"train.decay_mode must be one of {DECAY_MODES}")
        if not self.disc_lr_scale > 0:
            raise ValueError("train.disc_lr_scale must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("train.momentum must lie in [0, 1)")
        if self.max_steps < 0:
            raise ValueError("train.max_steps must be >= 0")


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, values: dict, grad_norms: dict):
        self.step, self.values, self.grad_norms = step, values, grad_norms
        super().__init__(f"non-finite loss at step {step}: losses={values} grad_norms={grad_norms}")


@dataclass
class TrainBatch:
    source: torch.Tensor  # (B_s, 3, R, R)
    pair_index: PairIndex
    target: torch.Tensor  # (B_t, 3, R, R)
    person_ids: tuple = ()
    region_keys: tuple = ()  # (image_id, region_index) per source patch


@dataclass
class StepMetrics:
    step: int
    l_c: float
    L_G: float
    L_D: float
    d_src_mean: float
    d_tgt_mean: float
    lr: float

    def record(self) -> dict:
        return asdict(self)


def lr_at(step: int, config: TrainConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    k = step // config.decay_every
    rate = 1.0 - config.decay_factor if config.decay_mode == "one_minus_factor" else config.decay_factor
    return config.lr0 * rate ** k


def build_batch(source_pool: Sequence, target_pool: Sequence, config: TrainConfig,
                rng: np.random.Generator, out_resolution: int = 32, r_range=R_RANGE) -> TrainBatch:
    """``persons_per_batch`` distinct persons, each contributing patches from distinct regions.

    Every ordered pair of patches from the same person is a positive; all
    other patches in the batch act as negatives.
    """
    if not source_pool or not target_pool:
        raise ValueError("build_batch needs nonempty source and target pools")
    slots = {}
    for pid, images in group_by_person(source_pool).items():
        regions = [(img, k) for img in images for k in range(len(img.regions))]
        if len(regions) >= config.patches_per_person:
            slots[pid] = regions
    persons = sorted(slots)
    if len(persons) < config.persons_per_batch:
        raise ValueError(f"need {config.persons_per_batch} persons with >= "
                         f"{config.patches_per_person} regions, found {len(persons)}")

    chosen = rng.choice(len(persons), config.persons_per_batch, replace=False)
    tensors, groups, pids, keys = [], [], [], []
    for p in chosen:
        pid = persons[int(p)]
        regions = slots[pid]
        picks = rng.choice(len(regions), config.patches_per_person, replace=False)
        group = []
        for r in picks:
            img, k = regions[int(r)]
            spec = sample_patch_spec(img.regions[k], rng, r_range, image_id=img.image_id, region_index=k)
            group.append(len(tensors))
            tensors.append(crop_to_tensor(img.pixels, spec, out_resolution))
            pids.append(pid)
            keys.append((img.image_id, k))
        groups.append(group)

    target = []
    for t in rng.integers(0, len(target_pool), config.batch_size_target):
        img = target_pool[int(t)]
        region = img.regions[0]
        spec = sample_patch_spec(region, rng, r_range, image_id=img.image_id)
        target.append(crop_to_tensor(img.pixels, spec, out_resolution))

    return TrainBatch(torch.stack(tensors), PairIndex.from_groups(groups), torch.stack(target),
                      tuple(pids), tuple(keys))


@dataclass
class Optimizers:
    d: torch.optim.Optimizer
    g: torch.optim.Optimizer

    def as_dict(self) -> dict:
        return {"d": self.d, "g": self.g}

    def load(self, dicts: dict) -> None:
        if dicts:
            self.d.load_state_dict(dicts["d"])
            self.g.load_state_dict(dicts["g"])


def make_optimizers(state: ModelState, config: TrainConfig) -> Optimizers:
    gen_params = list(state.generator.parameters()) + list(state.embedder.parameters())
    return Optimizers(
        d=torch.optim.SGD(state.discriminator.parameters(), lr=config.lr0, momentum=config.momentum),
        g=torch.optim.SGD(gen_params, lr=config.lr0, momentum=config.momentum),
    )


def _grad_norm(module) -> float:
    sq = sum(float((p.grad.double() ** 2).sum()) for p in module.parameters() if p.grad is not None)
    return math.sqrt(sq)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def discriminator_phase(state: ModelState, batch: TrainBatch, optim: Optimizers, lr: float) -> dict:
    """One SGD step on the discriminator; generator and head are not touched."""
    with torch.no_grad():
        f_src = forward_generator(state, batch.source)
        f_tgt = forward_generator(state, batch.target)
    d_src = forward_discriminator(state, f_src)
    d_tgt = forward_discriminator(state, f_tgt)
    loss = discriminator_loss(d_tgt, d_src)
    optim.d.zero_grad(set_to_none=True)
    loss.backward()
    if not torch.isfinite(loss):
        raise NonFiniteLossError(state.step, {"L_D": loss.item()},
                                 {"discriminator": _grad_norm(state.discriminator)})
    _set_lr(optim.d, lr)
    optim.d.step()
    return {"L_D": loss.item(), "d_src_mean": d_src.mean().item(), "d_tgt_mean": d_tgt.mean().item()}


def generator_phase(state: ModelState, batch: TrainBatch, optim: Optimizers, lr: float,
                    loss_config: LossConfig) -> dict:
    """One SGD step on generator + embedding head against a frozen discriminator."""
    f_src = forward_generator(state, batch.source)
    emb = forward_embedding(state, f_src)
    l_c = compatibility_loss(emb, batch.pair_index, loss_config.tau, loss_config.both_orders)
    adversarial = loss_config.lambda1 > 0 or loss_config.lambda2 > 0
    if adversarial:
        for p in state.discriminator.parameters():
            p.requires_grad_(False)
        try:
            d_src = forward_discriminator(state, f_src)
            if loss_config.eq2_variant == "as_written":
                d_tgt = d_src  # unused by this variant
            else:
                d_tgt = forward_discriminator(state, forward_generator(state, batch.target))
        finally:
            for p in state.discriminator.parameters():
                p.requires_grad_(True)
    else:
        d_src = d_tgt = torch.full((1, 1), 0.5, dtype=emb.dtype)
    loss = generator_loss(l_c, d_src, d_tgt, loss_config)
    optim.g.zero_grad(set_to_none=True)
    loss.backward()
    if not torch.isfinite(loss):
        raise NonFiniteLossError(state.step, {"l_c": l_c.item(), "L_G": loss.item()},
                                 {"generator": _grad_norm(state.generator),
                                  "embedder": _grad_norm(state.embedder)})
    _set_lr(optim.g, lr)
    optim.g.step()
    return {"l_c": l_c.item(), "L_G": loss.item()}


def train_step(state: ModelState, batch: TrainBatch, config: TrainConfig, loss_config: LossConfig,
               optim: Optional[Optimizers] = None):
    """Discriminator phase then generator phase on the same batch; one step in total."""
    optim = optim or make_optimizers(state, config)
    state.generator.train()
    state.embedder.train()
    state.discriminator.train()
    lr = lr_at(state.step, config)
    d = discriminator_phase(state, batch, optim, lr * config.disc_lr_scale)
    g = generator_phase(state, batch, optim, lr, loss_config)
    metrics = StepMetrics(state.step, g["l_c"], g["L_G"], d["L_D"], d["d_src_mean"], d["d_tgt_mean"], lr)
    state.step += 1
    return state, metrics


class EarlyStopping:
    """Stop after ``patience`` evaluations without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_step = None
        self.bad = 0

    def update(self, value: float, step: int) -> bool:
        """Record an evaluation; returns True if it is a new best."""
        if value > self.best:
            self.best, self.best_step, self.bad = value, step, 0
            return True
        self.bad += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad >= self.patience


@dataclass
class TrainResult:
    state: ModelState
    log: list = field(default_factory=list)
    best_score: Optional[float] = None
    last_state: Optional[ModelState] = None
    optimizers: Optional[Optimizers] = None


def train(source_pool: Sequence, target_pool: Sequence,
          evaluate_fn: Optional[Callable[[ModelState], dict]], config: TrainConfig,
          loss_config: LossConfig, state: ModelState, optimizers: Optional[Optimizers] = None,
          log_path=None, checkpoint_dir=None) -> TrainResult:
    """Alternate minimax steps until ``max_steps`` or early stopping.

    ``source_pool`` must already be restricted to pairable images.
    ``evaluate_fn(state)`` returns ``{"comp_auc": ..., "fitb_acc": ...}``
    on validation data; its ``comp_auc`` drives early stopping and the
    returned state is the best one seen. Without it the final state is
    returned. Batches depend only on ``(seed, step)``, so a resumed run
    continues the same batch sequence.
    """
    optim = optimizers or make_optimizers(state, config)
    records: list = []
    fh = open(log_path, "a") if log_path else None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None

    def emit(rec):
        records.append(rec)
        if fh:
            fh.write(json.dumps(rec) + "\n")
            fh.flush()

    stopper = EarlyStopping(config.early_stop_patience)
    best_state = None
    try:
        while state.step < config.max_steps:
            rng = lane_rng(config.seed, "batch", state.step)
            batch = build_batch(source_pool, target_pool, config, rng, state.config.input_resolution)
            _, metrics = train_step(state, batch, config, loss_config, optim)
            emit(metrics.record())
            if evaluate_fn is not None and state.step % config.eval_every == 0:
                scores = evaluate_fn(state)
                emit({"step": state.step, "comp_auc": scores["comp_auc"], "fitb_acc": scores["fitb_acc"]})
                improved = stopper.update(scores["comp_auc"], state.step)
                if ckpt_dir:
                    save_checkpoint(ckpt_dir / f"step_{state.step:06d}.pt", state,
                                    optim.as_dict(), {"seed": config.seed, "step": state.step})
                if improved:
                    best_state = state.clone()
                    if ckpt_dir:
                        save_checkpoint(ckpt_dir / "best.pt", state, optim.as_dict(),
                                        {"seed": config.seed, "step": state.step})
                if stopper.should_stop:
                    log.info("early stop at step %d (best comp_auc %.4f at step %s)",
                             state.step, stopper.best, stopper.best_step)
                    break
    finally:
        if fh:
            fh.close()
    if best_state is None:
        best_state = state
    return TrainResult(best_state, records, stopper.best if stopper.best_step is not None else None,
                       last_state=state, optimizers=optim)
