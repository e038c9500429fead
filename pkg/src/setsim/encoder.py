"""Toy-scale set prediction: a per-modality residual-MLP feature projector
followed by a slot-based aggregation module that turns local + global
features into a K-element embedding set.

Slots cross-attend to the projected local features through L aggregation
blocks; the final slot states are layer-normed into residual offsets that
are added to the (layer-normed) global feature and row-normalized.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numgrad as ng
from .fileio import read_container, write_container
from .numgrad import Node

CHECKPOINT_MAGIC = b"SSW1"
CHECKPOINT_VERSION = 1

MEAN_POOL = "mean"
MAX_POOL = "max"


@dataclass
class ModelDims:
    set_size: int = 4
    embed_dim: int = 32
    n_blocks: int = 2
    raw_dim: int = 32

    def to_dict(self):
        return {"set_size": self.set_size, "embed_dim": self.embed_dim,
                "n_blocks": self.n_blocks, "raw_dim": self.raw_dim}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class FeatureBundle:
    """Projected local features (N_loc x D) and the pooled global (1 x D)."""

    local: object
    global_: object


@dataclass
class ProjectorParams:
    w_in: object
    b_in: object
    w1: object
    b1: object
    w2: object
    b2: object


@dataclass
class BlockParams:
    wq: object
    wk: object
    wv: object
    w1: object
    b1: object
    w2: object
    b2: object


@dataclass
class PredictorParams:
    slots: object
    blocks: list
    ln_slot_gain: object
    ln_slot_bias: object
    ln_glob_gain: object
    ln_glob_bias: object


@dataclass
class ModelParams:
    dims: ModelDims
    img_proj: ProjectorParams
    img_pred: PredictorParams
    txt_proj: ProjectorParams
    txt_pred: PredictorParams

    def named_arrays(self):
        out = {}
        for side, proj, pred in (("img", self.img_proj, self.img_pred),
                                 ("txt", self.txt_proj, self.txt_pred)):
            for name in ("w_in", "b_in", "w1", "b1", "w2", "b2"):
                out[f"{side}.proj.{name}"] = getattr(proj, name)
            out[f"{side}.pred.slots"] = pred.slots
            for li, bp in enumerate(pred.blocks):
                for name in ("wq", "wk", "wv", "w1", "b1", "w2", "b2"):
                    out[f"{side}.pred.block{li}.{name}"] = getattr(bp, name)
            for name in ("ln_slot_gain", "ln_slot_bias", "ln_glob_gain", "ln_glob_bias"):
                out[f"{side}.pred.{name}"] = getattr(pred, name)
        return out

    @classmethod
    def from_named(cls, dims: ModelDims, arrays: dict):
        def proj(side):
            return ProjectorParams(**{n: arrays[f"{side}.proj.{n}"]
                                      for n in ("w_in", "b_in", "w1", "b1", "w2", "b2")})

        def pred(side):
            blocks = [BlockParams(**{n: arrays[f"{side}.pred.block{li}.{n}"]
                                     for n in ("wq", "wk", "wv", "w1", "b1", "w2", "b2")})
                      for li in range(dims.n_blocks)]
            return PredictorParams(
                slots=arrays[f"{side}.pred.slots"], blocks=blocks,
                **{n: arrays[f"{side}.pred.{n}"]
                   for n in ("ln_slot_gain", "ln_slot_bias", "ln_glob_gain", "ln_glob_bias")})

        return cls(dims=dims, img_proj=proj("img"), img_pred=pred("img"),
                   txt_proj=proj("txt"), txt_pred=pred("txt"))


def _xavier(rng, rows, cols):
    a = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols))


def init_model(rng, dims: ModelDims) -> ModelParams:
    """Seeded init: uniform Xavier for slots and projections, zero for every
    MLP output layer so slot sets start close to the all-identical state."""
    d, dr, k = dims.embed_dim, dims.raw_dim, dims.set_size

    def proj():
        return ProjectorParams(
            w_in=_xavier(rng, dr, d), b_in=np.zeros((1, d)),
            w1=_xavier(rng, d, d), b1=np.zeros((1, d)),
            w2=np.zeros((d, d)), b2=np.zeros((1, d)))

    def pred():
        blocks = [BlockParams(
            wq=_xavier(rng, d, d), wk=_xavier(rng, d, d), wv=_xavier(rng, d, d),
            w1=_xavier(rng, d, d), b1=np.zeros((1, d)),
            w2=np.zeros((d, d)), b2=np.zeros((1, d)))
            for _ in range(dims.n_blocks)]
        return PredictorParams(
            slots=_xavier(rng, k, d), blocks=blocks,
            ln_slot_gain=np.ones((1, d)), ln_slot_bias=np.zeros((1, d)),
            ln_glob_gain=np.ones((1, d)), ln_glob_bias=np.zeros((1, d)))

    return ModelParams(dims=dims, img_proj=proj(), img_pred=pred(),
                       txt_proj=proj(), txt_pred=pred())


def zeroed_model(dims: ModelDims) -> ModelParams:
    """All residual-path parameters zero: the exact collapse anchor."""
    model = init_model(np.random.default_rng(0), dims)
    for name, arr in model.named_arrays().items():
        if "ln_" in name and "gain" in name:
            arr[...] = 1.0
        elif name.endswith(".proj.w_in"):
            arr[...] = np.eye(dims.raw_dim, dims.embed_dim)
        else:
            arr[...] = 0.0
    return model


def lift_params(model: ModelParams) -> tuple[ModelParams, dict]:
    """Wrap every parameter array in a leaf Node; returns the node-valued
    mirror plus the flat name -> Node map used for gradient extraction."""
    arrays = model.named_arrays()
    nodes = {name: ng.leaf(arr) for name, arr in arrays.items()}
    lifted = ModelParams.from_named(model.dims, nodes)
    return lifted, nodes


def toy_encode(raw, proj: ProjectorParams, pooling: str) -> FeatureBundle:
    """Residual two-layer MLP over raw local rows plus a pooled global."""
    x = raw if isinstance(raw, Node) else ng.leaf(raw)
    p = x @ proj.w_in + proj.b_in
    h = (p @ proj.w1 + proj.b1).relu()
    local = p + (h @ proj.w2 + proj.b2)
    if pooling == MEAN_POOL:
        global_ = local.mean(axis=0)
    elif pooling == MAX_POOL:
        global_ = local.max(axis=0)
    else:
        raise ValueError(f"pooling must be 'mean' or 'max', got {pooling!r}")
    return FeatureBundle(local=local, global_=global_)


ATTENTION_GAIN = 2.0


def agg_block(slots: Node, local: Node, bp: BlockParams,
              gain: float = ATTENTION_GAIN) -> Node:
    """One aggregation block: single-head cross-attention from the slots to
    the local features, then a residual MLP.

    Slot state survives a block only through the attention weights, so the
    logit gain matters: 1/sqrt(D) damping leaves the competition too uniform
    to ever differentiate, while a large gain hard-assigns slots to inputs
    at init, and colliding slots then receive identical gradients forever.
    A gain of 2 keeps rows distinct and lets training sharpen them.
    """
    q = slots @ bp.wq
    keys = local @ bp.wk
    values = local @ bp.wv
    att = ((q @ keys.T) * gain).softmax()
    pooled = att @ values
    h = (pooled @ bp.w1 + bp.b1).relu()
    return pooled + (h @ bp.w2 + bp.b2)


def set_predict(bundle: FeatureBundle, pred: PredictorParams,
                ln_eps: float = 1e-5) -> tuple[Node, Node]:
    """Run the aggregation blocks and fuse with the global feature.

    Returns (unit-normalized K x D embedding set, K x D residual slots).
    The residual is the layer-normed final slot state before the global is
    added; it feeds the diversity regularizer.
    """
    e = pred.slots
    for bp in pred.blocks:
        e = agg_block(e, bundle.local, bp)
    residual = e.layer_norm(pred.ln_slot_gain, pred.ln_slot_bias, eps=ln_eps)
    fused_global = bundle.global_.layer_norm(pred.ln_glob_gain, pred.ln_glob_bias,
                                             eps=ln_eps)
    out = (residual + fused_global).l2_normalize()
    return out, residual


def encode_sample(raw, proj: ProjectorParams, pred: PredictorParams,
                  pooling: str) -> tuple[Node, Node, Node]:
    """raw locals -> (embedding set, residual slots, global feature row)."""
    bundle = toy_encode(raw, proj, pooling)
    out, residual = set_predict(bundle, pred)
    return out, residual, bundle.global_


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, model: ModelParams, meta: dict | None = None):
    arrays = model.named_arrays()
    entries = []
    offset = 0
    chunks = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.reshape(-1))
    header = {
        "version": CHECKPOINT_VERSION,
        "dims": model.dims.to_dict(),
        "arrays": entries,
        "meta": meta or {},
    }
    payload = np.concatenate(chunks) if chunks else np.zeros(0)
    write_container(path, CHECKPOINT_MAGIC, header, payload)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    header, payload = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        start = entry["offset"]
        size = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = payload[start:start + size].reshape(shape).copy()
    dims = ModelDims.from_dict(header["dims"])
    return ModelParams.from_named(dims, arrays), header["meta"]
