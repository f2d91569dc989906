"""Low-rank adaptation of linear maps.

A wrapped map computes x@W0.T + (alpha/r) * (x@A.T)@B.T with W0 frozen and
only A (r x k) and B (d x r) trainable. B starts at zero so injection never
changes model outputs. merge()/unmerge() fold the update into the stored
weight and back for adapter-free inference.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn import Linear, Module, Parameter
from .tensor import Tensor


class LoraStateError(RuntimeError):
    """merge/unmerge or adapter forward called in the wrong state."""


class LoraConfigError(ValueError):
    pass


DEFAULT_TARGETS = ("attn.q", "attn.v")


class LoraLinear(Module):
    """A Linear frozen in place, plus the trainable (A, B) factor pair."""

    def __init__(self, base: Linear, rank: int, alpha: float,
                 rng: np.random.Generator):
        super().__init__()
        if rank < 1:
            raise LoraConfigError(f"rank must be >= 1, got {rank}")
        d, k = base.weight.shape
        if rank >= min(d, k):
            warnings.warn(f"rank {rank} >= min(d,k)={min(d, k)}: no compression",
                          stacklevel=2)
        self.base = base
        self.base.freeze()
        self.rank = rank
        self.alpha = float(alpha)
        self.merged = False
        self.lora_A = Parameter(rng.normal(0.0, 0.02, size=(rank, k)))
        self.lora_B = Parameter(np.zeros((d, rank)))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta_w(self) -> np.ndarray:
        return self.scaling * (self.lora_B.data @ self.lora_A.data)

    def effective_weight(self) -> np.ndarray:
        if self.merged:
            return self.base.weight.data.copy()
        return self.base.weight.data + self.delta_w()

    def adapter_forward(self, x: Tensor) -> Tensor:
        """The unmerged two-thin-products path; never materializes delta W."""
        if self.merged:
            raise LoraStateError("adapter is merged; unmerge before using the adapter path")
        y = self.base(x)
        low = T.matmul(x, self.lora_A.transpose(1, 0))
        return y + T.scale(T.matmul(low, self.lora_B.transpose(1, 0)), self.scaling)

    def forward(self, x: Tensor) -> Tensor:
        if self.merged:
            return self.base(x)
        return self.adapter_forward(x)

    def merge(self) -> None:
        if self.merged:
            raise LoraStateError("adapter already merged")
        self.base.weight.data = self.base.weight.data + self.delta_w().astype(self.base.weight.dtype)
        self.merged = True

    def unmerge(self) -> None:
        if not self.merged:
            raise LoraStateError("adapter is not merged")
        self.merged = False
        self.base.weight.data = self.base.weight.data - self.delta_w().astype(self.base.weight.dtype)


def _matches(qualified: str, targets) -> bool:
    if targets == "all":
        return True
    return any(t in qualified for t in targets)


def _adapted_modules(model: Module) -> list[tuple[str, LoraLinear]]:
    return [(name, m) for name, m in model.named_modules() if isinstance(m, LoraLinear)]


def inject_lora(model: Module, targets=DEFAULT_TARGETS, rank: int = 4,
                alpha: float | None = None, seed: int = 0) -> Module:
    """Freeze the whole model and wrap every matching Linear with an adapter.

    ``targets`` is a sequence of substrings matched against qualified module
    names (or the string "all" for every linear map). alpha defaults to 2*rank.
    """
    if alpha is None:
        alpha = 2.0 * rank
    rng = np.random.default_rng(seed)
    model.freeze()

    replacements = []

    def walk(mod: Module, prefix: str):
        if isinstance(mod, LoraLinear):
            return
        for name, child in list(mod._modules.items()):
            qualified = prefix + name
            if isinstance(child, Linear) and _matches(qualified, targets):
                replacements.append((mod, name, child))
            else:
                walk(child, qualified + ".")

    walk(model, "")
    if not replacements:
        raise LoraConfigError(f"target selector {targets!r} matched no linear maps")
    for parent, name, base in replacements:
        setattr(parent, name, LoraLinear(base, rank, alpha, rng))
    return model


def merge_all(model: Module) -> None:
    for _, m in _adapted_modules(model):
        m.merge()


def unmerge_all(model: Module) -> None:
    for _, m in _adapted_modules(model):
        m.unmerge()


def trainable_param_report(model: Module) -> dict:
    trainable = sum(p.size for p in model.parameters() if p.requires_grad)
    frozen = sum(p.size for p in model.parameters() if not p.requires_grad)
    total = trainable + frozen
    return {"trainable": int(trainable), "frozen": int(frozen),
            "ratio": trainable / total if total else 0.0}


def save_adapter_checkpoint(path, model: Module) -> None:
    """Write only the adapter factors, with enough metadata to re-inject."""
    adapted = _adapted_modules(model)
    if not adapted:
        raise LoraConfigError("model has no adapters to save")
    params = []
    entries = {}
    for name, m in adapted:
        params.append((f"{name}.lora_A", m.lora_A.data))
        params.append((f"{name}.lora_B", m.lora_B.data))
        entries[name] = {"rank": m.rank, "alpha": m.alpha}
    save_checkpoint(path, params, meta={"kind": "lora-adapters", "adapters": entries})


def load_adapter_checkpoint(path, model: Module) -> None:
    """Load adapter factors onto a model; injects adapters if absent."""
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "lora-adapters":
        raise CheckpointError(f"{path} is not an adapter checkpoint")
    adapters = meta["adapters"]
    existing = dict(_adapted_modules(model))
    if not existing:
        first = next(iter(adapters.values()))
        inject_lora(model, targets=tuple(adapters), rank=first["rank"],
                    alpha=first["alpha"])
        existing = dict(_adapted_modules(model))
    missing = [n for n in adapters if n not in existing]
    if missing:
        raise CheckpointError("adapter targets absent from model: " + ", ".join(missing))
    values = dict(params)
    for name, m in existing.items():
        if name not in adapters:
            continue
        a = values[f"{name}.lora_A"]
        b = values[f"{name}.lora_B"]
        if tuple(a.shape) != m.lora_A.shape or tuple(b.shape) != m.lora_B.shape:
            raise CheckpointError(
                f"adapter {name}: file shapes {list(a.shape)}/{list(b.shape)} vs "
                f"model {list(m.lora_A.shape)}/{list(m.lora_B.shape)}")
        m.lora_A.data = a.astype(m.lora_A.dtype, copy=True)
        m.lora_B.data = b.astype(m.lora_B.dtype, copy=True)
        m.alpha = adapters[name]["alpha"]
