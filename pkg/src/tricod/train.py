"""Training loop: SGD with linear warm-up/decay, BCE + scheduled UAL, CSV loss log."""
from __future__ import annotations

import csv
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader

from .checkpoint import CheckpointRecord, save_checkpoint
from .config import Config, resolve_data_path
from .data import Augmentation, PairDataset, collate_skip_none, normalization_for
from .model import TripletNet, build_model
from .objective import total_loss

log = logging.getLogger(__name__)

LOG_FIELDS = ("iteration", "lr", "lambda", "bcel", "ual", "total")


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def warmup_iters(total: int, warmup_fraction: float) -> int:
    return int(round(warmup_fraction * total))


def lr_at(it: int, total: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear ramp up over the warm-up iterations, then linear decay towards 0 at ``total``."""
    warm = warmup_iters(total, warmup_fraction)
    if it < warm:
        return base_lr * (it + 1) / warm
    return base_lr * max(total - it, 0) / max(total - warm, 1)


def make_optimizer(model: torch.nn.Module, cfg: Config) -> torch.optim.SGD:
    t = cfg.train
    return torch.optim.SGD(model.parameters(), lr=t.base_lr, momentum=t.momentum, weight_decay=t.weight_decay)


def make_train_dataset(cfg: Config) -> PairDataset:
    roots = [resolve_data_path(r) for r in cfg.data.train_roots]
    if not roots:
        raise ValueError("data.train_roots is empty")
    for r in roots:
        if not Path(r).is_dir():
            raise FileNotFoundError(f"dataset root not found: {r}")
    return PairDataset.from_roots(
        roots, main_scale=cfg.train.main_scale, scales=cfg.model.scales,
        aug=Augmentation.from_train(cfg.train), normalize=normalization_for(cfg.model.backbone),
        seed=cfg.train.seed, train=True)


@dataclass
class TrainResult:
    model: TripletNet
    history: list = field(default_factory=list)
    total_iters: int = 0


def train(cfg: Config, dataset: PairDataset | None = None, out_dir=None) -> TrainResult:
    t = cfg.train
    seed_everything(t.seed)
    device = torch.device(cfg.run.device)
    dataset = dataset if dataset is not None else make_train_dataset(cfg)
    model = build_model(cfg.model).to(device)
    optimizer = make_optimizer(model, cfg)
    loader = DataLoader(dataset, batch_size=t.batch_size, shuffle=True, num_workers=t.num_workers,
                        collate_fn=collate_skip_none, drop_last=len(dataset) > t.batch_size,
                        generator=torch.Generator().manual_seed(t.seed))
    per_epoch = len(loader)
    total = t.max_iters or t.epochs * per_epoch
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "loss_log.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_FIELDS)
    history = []
    it, epoch = 0, 0
    model.train()
    try:
        while it < total:
            dataset.set_epoch(epoch)
            for batch in loader:
                if it >= total:
                    break
                if batch is None:
                    continue
                lr = lr_at(it, total, t.base_lr, t.warmup_fraction)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                images = {s: x.to(device) for s, x in batch["image"].items()}
                masks = batch["mask"].to(device)
                prob = model(images)
                losses = total_loss(prob, masks, t.ual, t.schedule, it, total)
                optimizer.zero_grad(set_to_none=True)
                losses.total.backward()
                optimizer.step()
                row = {"iteration": it, "lr": lr, **losses.as_floats()}
                history.append(row)
                if writer is not None:
                    writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOG_FIELDS])
                it += 1
            epoch += 1
            if out is not None:
                log_fh.flush()
                save_checkpoint(CheckpointRecord(model.state_dict(), optimizer.state_dict(), epoch,
                                                 cfg.fingerprint()), out / "last.ckpt")
            log.info("epoch %d done, iteration %d/%d, loss %.5f", epoch, it, total,
                     history[-1]["total"] if history else float("nan"))
    finally:
        if writer is not None:
            log_fh.close()
    return TrainResult(model, history, total)


@torch.no_grad()
def predict(model: TripletNet, images) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        return model(images)
    finally:
        model.train(was_training)
