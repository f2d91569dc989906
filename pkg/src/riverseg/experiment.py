"""Experiment matrix: run named variants off one base config with shared
seeds, and render the comparison tables (variant/datasets/IoU plus a
seconds-per-epoch and parameter-count resource table)."""

from __future__ import annotations

import dataclasses
import json
import statistics
from pathlib import Path
from typing import Optional, Sequence

from .config import RunConfig
from .metrics import format_fraction
from .train import RunRecord, train

# variant name -> (train fraction, lora?); "lora" adapts the baseline
# checkpoint on the full pool, mirroring adapter training after expansion.
VARIANTS = {
    "baseline": {"train_fraction": 0.25, "lora": False},
    "expansion": {"train_fraction": 0.5, "lora": False},
    "full": {"train_fraction": 1.0, "lora": False},
    "lora": {"train_fraction": 1.0, "lora": True},
}


class ExperimentError(ValueError):
    pass


@dataclasses.dataclass
class VariantResult:
    name: str
    datasets: str
    records: list[RunRecord]

    @property
    def median_iou(self) -> Optional[float]:
        vals = [r.final_metrics["iou"] for r in self.records
                if r.final_metrics["iou"] is not None]
        return statistics.median(vals) if vals else None

    @property
    def median_epoch_seconds(self) -> float:
        secs = [s for r in self.records for s in r.epoch_seconds]
        return statistics.median(secs) if secs else 0.0


def _variant_config(base: RunConfig, name: str, seed: int, out_root: Path,
                    lora_base: Optional[str]) -> RunConfig:
    if name not in VARIANTS:
        raise ExperimentError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    spec = VARIANTS[name]
    cfg = base.replace(seed=seed, train_fraction=spec["train_fraction"],
                       out_dir=str(out_root / name / f"seed{seed}"))
    if spec["lora"]:
        if lora_base is None:
            raise ExperimentError("the lora variant adapts the baseline checkpoint; "
                                  "include 'baseline' in the variant list")
        cfg = cfg.replace(lora=dataclasses.replace(base.lora, enabled=True,
                                                   base_checkpoint=lora_base))
    else:
        cfg = cfg.replace(lora=dataclasses.replace(base.lora, enabled=False,
                                                   base_checkpoint=None))
    return cfg


def _datasets_label(config: RunConfig, fraction: float) -> str:
    names = [Path(r).name for r in config.data_roots]
    pool = " + ".join(names) if names else "?"
    return pool if fraction >= 1.0 else f"{pool} ({int(fraction * 100)}% train)"


def experiment_matrix(base: RunConfig, variants: Sequence[str],
                      seeds: Optional[Sequence[int]] = None) -> list[VariantResult]:
    """Train every (variant, seed) pair; all variants share the base config's
    data roots, so they are evaluated on the same test split by construction."""
    variants = list(variants)
    if len(variants) < 2:
        raise ExperimentError("an experiment matrix needs at least 2 variants")
    seeds = list(seeds) if seeds else [base.seed]
    out_root = Path(base.out_dir)
    results = []
    lora_bases: dict[int, str] = {}
    ordered = sorted(variants, key=lambda v: 0 if v == "baseline" else 1)
    for name in ordered:
        records = []
        for seed in seeds:
            cfg = _variant_config(base, name, seed, out_root, lora_bases.get(seed))
            rec = train(cfg)
            records.append(rec)
            if name == "baseline":
                lora_bases[seed] = rec.best_checkpoint
        results.append(VariantResult(
            name=name,
            datasets=_datasets_label(base, VARIANTS[name]["train_fraction"]),
            records=records,
        ))
    results.sort(key=lambda r: variants.index(r.name))
    return results


# ---------------------------------------------------------------------------
# Tables

IOU_TABLE_HEADER = ("Configuration", "Training and Validation Datasets", "IoU")
RESOURCE_TABLE_HEADER = ("Model", "Training Time (seconds/epoch)",
                         "Parameter Count (M)", "Trainable (M)")

_DISPLAY = {"baseline": "Baseline", "expansion": "Dataset Expansion",
            "full": "Full Dataset", "lora": "LoRA Training"}


def render_row(cells: Sequence[str]) -> str:
    return " | ".join(cells)


def render_iou_table(rows: Sequence[tuple[str, str, float]]) -> str:
    lines = [render_row(IOU_TABLE_HEADER)]
    for name, datasets, iou in rows:
        lines.append(render_row((name, datasets, format_fraction(iou))))
    return "\n".join(lines)


def render_resource_table(rows: Sequence[tuple[str, float, int, int]]) -> str:
    lines = [render_row(RESOURCE_TABLE_HEADER)]
    for name, sec, total, trainable in rows:
        lines.append(render_row((name, str(int(round(sec))),
                                 f"{total / 1e6:.3f}", f"{trainable / 1e6:.3f}")))
    return "\n".join(lines)


def comparison_tables(results: Sequence[VariantResult]) -> tuple[str, str]:
    iou_rows = [(_DISPLAY.get(r.name, r.name), r.datasets, r.median_iou) for r in results]
    res_rows = [(_DISPLAY.get(r.name, r.name), r.median_epoch_seconds,
                 r.records[0].total_params, r.records[0].trainable_params)
                for r in results]
    return render_iou_table(iou_rows), render_resource_table(res_rows)


def save_results(results: Sequence[VariantResult], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    iou_table, resource_table = comparison_tables(results)
    (out / "comparison.txt").write_text(iou_table + "\n\n" + resource_table + "\n")
    payload = [{
        "variant": r.name,
        "datasets": r.datasets,
        "median_iou": r.median_iou,
        "median_epoch_seconds": r.median_epoch_seconds,
        "runs": [dataclasses.asdict(rec) for rec in r.records],
    } for r in results]
    (out / "comparison.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
