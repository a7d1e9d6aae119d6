"""Low-rank adaptation of the transformer's linear layers.

An adapter owns (A, B) factor pairs for a set of target layers; the
effective map becomes W x + (alpha/r) B (A x). B starts at zero so a
fresh adapter is an exact no-op, and base weights are frozen at attach
time so the factors are the only trainables. Curriculum stages continue
training the same factors (warm start) while the lineage records which
stages an adapter has been through; each stage checkpoints separately.
"""
from __future__ import annotations

import os

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .errors import ConfigError, ContractError
from .rng import Rng

DEFAULT_TARGET_SUFFIXES = ("qkv", "proj", "fc1", "fc2")
INIT_STD = 0.01


class LoraLayer:
    """One (A, B) factor pair bound to a Linear's adapter slot."""

    def __init__(self, in_dim: int, out_dim: int, rank: int, alpha: float,
                 rng, dtype=np.float32):
        if rank < 1 or rank > min(in_dim, out_dim):
            raise ConfigError(
                f"rank {rank} invalid for a {out_dim}x{in_dim} layer")
        self.A = T.param(INIT_STD * rng.standard_normal((rank, in_dim)), dtype)
        self.B = T.param(np.zeros((out_dim, rank)), dtype)
        self.scale = float(alpha) / rank

    def apply(self, x):
        h = T.matmul(x, T.transpose_last(self.A))
        return T.scale(T.matmul(h, T.transpose_last(self.B)), self.scale)

    def delta(self) -> np.ndarray:
        return self.scale * (self.B.data @ self.A.data)


class LoraAdapter:
    def __init__(self, layers: dict, rank: int, alpha: float,
                 lineage: list = None):
        self.layers = layers
        self.rank = rank
        self.alpha = float(alpha)
        self.lineage = list(lineage or [])
        self.merged = False

    def named_parameters(self) -> dict:
        out = {}
        for name, layer in self.layers.items():
            out[f"lora.{name}.A"] = layer.A
            out[f"lora.{name}.B"] = layer.B
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def default_targets(model) -> list:
    return [name for name in model.named_linears()
            if name.startswith("blocks.")
            and name.split(".")[-1] in DEFAULT_TARGET_SUFFIXES]


def attach(model, targets=None, rank: int = 32, alpha: float = None,
           seed: int = 0) -> LoraAdapter:
    """Freeze the base model and hang fresh factors on the target layers."""
    linears = model.named_linears()
    if targets is None:
        targets = default_targets(model)
    unknown = [t for t in targets if t not in linears]
    if unknown:
        raise ConfigError(f"unknown adapter targets: {unknown}")
    if alpha is None:
        alpha = float(rank)
    for p in model.parameters():
        p.requires_grad = False
    root = Rng(seed).child("lora-init")
    layers = {}
    for name in targets:
        lin = linears[name]
        layer = LoraLayer(lin.in_dim, lin.out_dim, rank, alpha,
                          root.child(name).np(), dtype=lin.W.dtype)
        lin.lora = layer
        layers[name] = layer
    return LoraAdapter(layers, rank, alpha)


def merge(model, adapter: LoraAdapter) -> None:
    """Fold each delta into its base weight; runtime factors detach."""
    if adapter.merged:
        raise ContractError("adapter is already merged")
    linears = model.named_linears()
    for name, layer in adapter.layers.items():
        lin = linears.get(name)
        if lin is None or lin.W.shape != (layer.B.shape[0], layer.A.shape[1]):
            raise ContractError(f"adapter layer {name} does not fit the model")
    for name, layer in adapter.layers.items():
        lin = linears[name]
        lin.W.data = lin.W.data + layer.delta().astype(lin.W.dtype)
        lin.lora = None
    adapter.merged = True


def unmerge(model, adapter: LoraAdapter) -> None:
    if not adapter.merged:
        raise ContractError("adapter is not merged")
    linears = model.named_linears()
    for name, layer in adapter.layers.items():
        lin = linears[name]
        lin.W.data = lin.W.data - layer.delta().astype(lin.W.dtype)
        lin.lora = layer
    adapter.merged = False


def chain(adapter: LoraAdapter, stage_name: str) -> LoraAdapter:
    """Continue the same factors into a new stage; lineage grows by one."""
    if stage_name in adapter.lineage:
        raise ConfigError(f"stage name {stage_name!r} already in lineage")
    adapter.lineage.append(stage_name)
    return adapter


def save_adapter(path: str, adapter: LoraAdapter) -> None:
    tensors = {name: p.data for name, p in adapter.named_parameters().items()}
    ckpt.save(path, tensors)
    ckpt.save_sidecar(
        os.path.join(os.path.dirname(path) or ".", "adapter.cfg"),
        {"rank": adapter.rank, "alpha": adapter.alpha,
         "lineage": ",".join(adapter.lineage),
         "targets": ",".join(sorted(adapter.layers))})


def load_adapter(path: str, model) -> LoraAdapter:
    """Rebuild an adapter onto `model` from its checkpoint + sidecar."""
    side = ckpt.load_sidecar(
        os.path.join(os.path.dirname(path) or ".", "adapter.cfg"))
    targets = [t for t in side["targets"].split(",") if t]
    adapter = attach(model, targets=targets, rank=int(side["rank"]),
                     alpha=float(side["alpha"]))
    adapter.lineage = [s for s in side.get("lineage", "").split(",") if s]
    tensors = ckpt.load(path)
    params = adapter.named_parameters()
    if sorted(tensors) != sorted(params):
        raise ContractError("adapter checkpoint does not match its sidecar")
    for name, arr in tensors.items():
        if params[name].shape != arr.shape:
            raise ContractError(
                f"adapter tensor {name} has shape {arr.shape}, "
                f"expected {params[name].shape}")
        params[name].data = arr.astype(params[name].dtype)
    return adapter
