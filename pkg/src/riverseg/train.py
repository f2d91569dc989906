"""Training, evaluation and single-image prediction.

A run is fully determined by its RunConfig: seeded shuffling, seeded
augmentation, seeded weight init. Checkpoints carry the model (and adapter)
configuration in their manifest metadata, so evaluate/predict can rebuild
the network from the file alone.
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import data as D
from . import tensor as T
from .checkpoint import load_checkpoint, load_model, save_model
from .config import RunConfig
from .lora import inject_lora, trainable_param_report
from .metrics import MetricsReport, evaluate_dataset, predict_mask
from .model import ModelConfig, SegFormer, named_config, param_count
from .tensor import AdamW, Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclasses.dataclass
class RunRecord:
    config: dict
    epoch_seconds: list[float]
    epoch_loss: list[float]
    steps: int
    best_val_iou: Optional[float]
    best_epoch: Optional[int]
    final_metrics: dict
    trainable_params: int
    total_params: int
    best_checkpoint: str
    final_checkpoint: str

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "RunRecord":
        return RunRecord(**json.loads(text))


def load_run_data(config: RunConfig) -> D.DatasetManifest:
    if not config.data_roots:
        raise D.DataError("config.data_roots is empty")
    manifests = [D.load_manifest(root) for root in config.data_roots]
    if len(manifests) > 1:
        return D.merge_datasets(manifests, eval_source=config.eval_source,
                                dedup_mode=config.dedup_mode)
    return D.dedup_cross_split(manifests[0], mode=config.dedup_mode)


def subset_samples(samples: list[D.Sample], fraction: float, seed: int) -> list[D.Sample]:
    """Deterministic fraction of a split, preserving manifest order."""
    if fraction >= 1.0:
        return list(samples)
    k = max(1, int(round(len(samples) * fraction)))
    order = np.random.default_rng([seed, 104729]).permutation(len(samples))
    keep = sorted(order[:k].tolist())
    return [samples[i] for i in keep]


def build_model(config: RunConfig) -> tuple[SegFormer, dict]:
    cfg = named_config(config.model, **config.model_overrides)
    model = SegFormer(cfg, seed=config.seed)
    meta = {"model_config": cfg.to_dict(), "lora": None}
    if config.lora.enabled:
        if config.lora.base_checkpoint:
            load_model(config.lora.base_checkpoint, model)
        inject_lora(model, targets=config.lora.targets, rank=config.lora.rank,
                    alpha=config.lora.alpha, seed=config.seed)
        adapted = next(m for _, m in model.named_modules()
                       if m.__class__.__name__ == "LoraLinear")
        meta["lora"] = {"targets": config.lora.targets if config.lora.targets == "all"
                        else list(config.lora.targets),
                        "rank": config.lora.rank, "alpha": adapted.alpha}
    return model, meta


def rebuild_from_checkpoint(path) -> SegFormer:
    """Reconstruct the exact network a checkpoint was saved from."""
    _, meta = load_checkpoint(path)
    if "model_config" not in meta:
        raise ValueError(f"{path} carries no model configuration")
    model = SegFormer(ModelConfig.from_dict(meta["model_config"]), seed=0)
    lora_meta = meta.get("lora")
    if lora_meta:
        targets = lora_meta["targets"]
        targets = targets if targets == "all" else tuple(targets)
        inject_lora(model, targets=targets, rank=lora_meta["rank"],
                    alpha=lora_meta["alpha"])
    load_model(path, model)
    return model


def _load_pair(sample: D.Sample, image_size: Optional[int]) -> tuple[np.ndarray, np.ndarray]:
    img = D.load_image(sample.image_path)
    mask = D.load_mask(sample.mask_path)
    if image_size and img.shape[:2] != (image_size, image_size):
        img = np.asarray(Image.fromarray(img).resize((image_size, image_size), Image.BILINEAR))
        mask = np.asarray(Image.fromarray(mask * 255).resize(
            (image_size, image_size), Image.NEAREST))
        mask = (mask >= 128).astype(np.uint8)
    return img, mask


def train(config: RunConfig) -> RunRecord:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")

    manifest = load_run_data(config)
    train_samples = subset_samples(manifest.split("train"), config.train_fraction, config.seed)
    val_samples = manifest.split("val")
    if not train_samples:
        raise D.DataError("no training samples after subsetting")

    model, meta = build_model(config)
    trainable = model.parameters(trainable_only=True)
    optimizer = AdamW(trainable, lr=config.optim.lr, betas=config.optim.betas,
                      eps=config.optim.eps, weight_decay=config.optim.weight_decay)

    best_path = out / "best.ckpt"
    final_path = out / "final.ckpt"
    best_iou: Optional[float] = None
    best_epoch: Optional[int] = None
    epoch_seconds: list[float] = []
    epoch_loss: list[float] = []
    steps = 0

    for epoch in range(config.epochs):
        if config.max_steps is not None and steps >= config.max_steps:
            break
        t0 = time.monotonic()
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), config.batch_size):
            if config.max_steps is not None and steps >= config.max_steps:
                break
            idx = order[start:start + config.batch_size]
            xs, ys = [], []
            for i in idx:
                img, mask = _load_pair(train_samples[int(i)], config.image_size)
                if config.augment:
                    img, mask = D.augment(img, mask, seed=[config.seed, 2, epoch, int(i)])
                xs.append(D.to_model_input(img))
                ys.append(mask[None].astype(np.float32))
            x = Tensor(np.stack(xs))
            y = Tensor(np.stack(ys))
            logits = model(x)
            loss = T.binary_cross_entropy_with_logits(logits, y)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at step {steps} (epoch {epoch})")
            loss.backward()
            optimizer.step()
            optimizer.zero_grad()
            T.reset_tape()
            losses.append(value)
            steps += 1
        epoch_seconds.append(round(time.monotonic() - t0, 3))
        epoch_loss.append(float(np.mean(losses)) if losses else float("nan"))
        if val_samples:
            rep = evaluate_dataset(model, val_samples, threshold=config.threshold)
            if rep.iou is not None and (best_iou is None or rep.iou > best_iou):
                best_iou = rep.iou
                best_epoch = epoch
                save_model(best_path, model, meta)

    save_model(final_path, model, meta)
    if best_iou is None:
        save_model(best_path, model, meta)
        best_epoch = len(epoch_seconds) - 1 if epoch_seconds else None

    chosen = rebuild_from_checkpoint(best_path)
    eval_samples = manifest.split(config.eval_split)
    final_metrics = (evaluate_dataset(chosen, eval_samples, threshold=config.threshold)
                     if eval_samples else MetricsReport(None, None, None, None, None))

    record = RunRecord(
        config=config.to_dict(),
        epoch_seconds=epoch_seconds,
        epoch_loss=epoch_loss,
        steps=steps,
        best_val_iou=best_iou,
        best_epoch=best_epoch,
        final_metrics=final_metrics.to_dict(),
        trainable_params=trainable_param_report(model)["trainable"],
        total_params=param_count(model),
        best_checkpoint=str(best_path),
        final_checkpoint=str(final_path),
    )
    (out / "record.json").write_text(record.to_json())
    return record


def evaluate(checkpoint, data_root, split: str = "test", threshold: float = 0.5,
             image_size: Optional[int] = None) -> MetricsReport:
    model = rebuild_from_checkpoint(checkpoint)
    manifest = D.load_manifest(data_root)
    samples = manifest.split(split)
    if image_size:
        model = _ResizingModel(model, image_size)
    return evaluate_dataset(model, samples, threshold=threshold)


class _ResizingModel:
    """Wraps a model so arbitrary-size inputs are resized to a fixed side."""

    def __init__(self, model, side: int):
        self.model = model
        self.side = side

    def __call__(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        if (h, w) != (self.side, self.side):
            x = T.bilinear_upsample2d(x, self.side, self.side)
        out = self.model(x)
        if (h, w) != (self.side, self.side):
            out = T.bilinear_upsample2d(out, h, w)
        return out


def predict(checkpoint, image_path, out_path, threshold: float = 0.5,
            image_size: Optional[int] = None) -> np.ndarray:
    """Write a strictly binary {0,255} mask PNG for one image."""
    model = rebuild_from_checkpoint(checkpoint)
    if image_size:
        model = _ResizingModel(model, image_size)
    img = D.load_image(image_path)
    mask = predict_mask(model, img, threshold=threshold)
    Image.fromarray(mask * 255).save(out_path)
    return mask
