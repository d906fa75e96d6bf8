"""Toy-scale classifiers: plain CNN, ViT with configurable patch size, and a
four-stage conv/attention hybrid in the CoAtNet mould.

Parameters live in an ordered ``name -> Tensor`` mapping and the forward pass
is written functionally against it, so naming is deterministic and the
weight groups used by the sparsity analysis can be read straight off the
names.
"""

from __future__ import annotations

import copy
import math
import re
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .formats import load_tensors, save_tensors

FAMILIES = ("CNN", "ViT", "Hybrid")


class ModelSpecError(ValueError):
    pass


@dataclass
class ModelSpec:
    family: str = "Hybrid"
    stages: str = "CTTT"
    patch_size: int = 4
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    heads: int = 4
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    activation: str = "relu"
    blocks: int = 2
    mlp_ratio: int = 2

    def __post_init__(self):
        if isinstance(self.stages, (list, tuple)):
            self.stages = "".join(self.stages)
        self.widths = [int(w) for w in self.widths]
        self.input_shape = tuple(int(v) for v in self.input_shape)

    def problems(self) -> list[str]:
        out = []
        c, h, w = self.input_shape
        if self.family not in FAMILIES:
            out.append(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.activation not in ad.ACTIVATIONS:
            out.append(f"activation must be relu or gelu, got {self.activation!r}")
        if not self.widths or any(v < 1 for v in self.widths):
            out.append(f"widths must be positive, got {self.widths}")
        if min(self.heads, self.num_classes, self.blocks, self.mlp_ratio) < 1:
            out.append("heads, num_classes, blocks and mlp_ratio must be positive")
        if self.family == "Hybrid":
            if len(self.stages) != 4 or set(self.stages) - {"C", "T"}:
                out.append(f"Hybrid needs exactly 4 stages from {{C, T}}, got {self.stages!r}")
            elif self.stages[0] != "C":
                out.append("Hybrid stage 1 must be C (attention is not allowed in the first stage)")
            if len(self.widths) != 4:
                out.append(f"Hybrid needs 4 widths, got {len(self.widths)}")
        if self.family in ("CNN", "Hybrid"):
            n = len(self.widths)
            if h % (2**n) or w % (2**n):
                out.append(f"input {h}x{w} must be divisible by 2**{n} for {n} downsampling stages")
        if self.family == "Hybrid" and self.heads >= 1:
            for kind, width in zip(self.stages, self.widths):
                if kind == "T" and width % self.heads:
                    out.append(f"attention width {width} not divisible by heads={self.heads}")
        if self.family == "ViT":
            if self.patch_size < 1 or h % self.patch_size or w % self.patch_size:
                out.append(f"patch_size {self.patch_size} must divide input {h}x{w}")
            if self.widths and self.heads >= 1 and self.widths[0] % self.heads:
                out.append(f"embedding dim {self.widths[0]} not divisible by heads={self.heads}")
        return out

    def validate(self) -> "ModelSpec":
        problems = self.problems()
        if problems:
            raise ModelSpecError("invalid ModelSpec: " + "; ".join(problems))
        return self

    def stage_kinds(self) -> str:
        if self.family == "Hybrid":
            return self.stages
        if self.family == "CNN":
            return "C" * len(self.widths)
        return ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


class Model:
    """Named parameters, non-trainable buffers, and a train/eval flag."""

    def __init__(self, params: dict[str, Tensor] | None = None, buffers: dict[str, np.ndarray] | None = None):
        self.params: dict[str, Tensor] = params or {}
        self.buffers: dict[str, np.ndarray] = buffers or {}
        self.training = False

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x) -> Tensor:
        return self.forward(ad.as_tensor(x))

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def train(self, mode: bool = True) -> "Model":
        self.training = mode
        return self

    def eval(self) -> "Model":
        return self.train(False)

    @contextmanager
    def frozen(self) -> Iterator["Model"]:
        """Eval mode with parameter gradients switched off; restores both."""
        mode = self.training
        flags = {k: p.requires_grad for k, p in self.params.items()}
        self.eval()
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            self.training = mode
            for k, p in self.params.items():
                p.requires_grad = flags[k]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self(x[i : i + batch_size]).data)
        return np.concatenate(out) if out else np.zeros((0, 0))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.params.items()}
        state.update({f"buffer:{k}": v.copy() for k, v in self.buffers.items()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
        for k in self.buffers:
            self.buffers[k] = np.array(state[f"buffer:{k}"], dtype=np.float64)

    def save(self, path) -> None:
        save_tensors(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(load_tensors(path))

    def clone(self) -> "Model":
        return copy.deepcopy(self)


class _Init:
    """Deterministic parameter factory driven by a single seeded generator."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _add(self, name, data):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = Tensor(data, requires_grad=True)

    def kaiming(self, name, shape, fan_in):
        self._add(name, self.rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape))

    def normal(self, name, shape, std):
        self._add(name, self.rng.normal(0.0, std, size=shape))

    def const(self, name, shape, value):
        self._add(name, np.full(shape, float(value)))

    def linear(self, prefix, d_in, d_out, bias=True):
        self.kaiming(f"{prefix}.weight", (d_in, d_out), d_in)
        if bias:
            self.const(f"{prefix}.bias", (d_out,), 0.0)

    def conv(self, prefix, c_in, c_out, k=3):
        self.kaiming(f"{prefix}.weight", (c_out, c_in, k, k), c_in * k * k)

    def batch_norm(self, prefix, channels):
        self.const(f"{prefix}.scale", (channels,), 1.0)
        self.const(f"{prefix}.shift", (channels,), 0.0)
        self.buffers[f"{prefix}.running_mean"] = np.zeros(channels)
        self.buffers[f"{prefix}.running_var"] = np.ones(channels)

    def layer_norm(self, prefix, dim):
        self.const(f"{prefix}.scale", (dim,), 1.0)
        self.const(f"{prefix}.shift", (dim,), 0.0)


# ------------------------------------------------------------ building blocks


def patch_embed(x: Tensor, weight: Tensor, bias: Tensor, pos: Tensor, patch_size: int) -> Tensor:
    """Split N x C x H x W into non-overlapping patches and project to N x L x dim.

    Patches are flattened channel-major (C, row, col), so an identity-extended
    weight reproduces the raw patch pixels in the first C * p**2 coordinates.
    """
    n, c, h, w = x.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise ModelSpecError(f"patch_size {p} must divide spatial dims {h}x{w}")
    gh, gw = h // p, w // p
    patches = x.reshape(n, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(n, gh * gw, c * p * p)
    return patches @ weight + bias + pos


def attention_mixing(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, rel_bias: Tensor, heads: int) -> Tensor:
    """Multi-head SoftMax(Q K^T / sqrt(d_head) + B) V, heads re-concatenated (no output projection)."""
    n, length, d = x.shape
    if d % heads:
        raise ValueError(f"dim {d} not divisible by heads={heads}")
    dh = d // heads

    def split(t):
        return t.reshape(n, length, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split(x @ wq), split(x @ wk), split(x @ wv)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + rel_bias
    mixed = ad.softmax(scores, axis=-1) @ v
    return mixed.transpose(0, 2, 1, 3).reshape(n, length, d)


def attention_block(x: Tensor, p: Mapping[str, Tensor], prefix: str, heads: int, act) -> Tensor:
    """Self-attention with residual + layer norm, then a residual 2-layer feedforward."""
    g = lambda name: p[f"{prefix}.{name}"]  # noqa: E731
    mixed = attention_mixing(x, g("attn.q.weight"), g("attn.k.weight"), g("attn.v.weight"), g("attn.rel_bias"), heads)
    h = ad.layer_norm(x + mixed @ g("attn.out.weight") + g("attn.out.bias"), g("norm1.scale"), g("norm1.shift"))
    ff = act(h @ g("ffn.fc1.weight") + g("ffn.fc1.bias")) @ g("ffn.fc2.weight") + g("ffn.fc2.bias")
    return h + ff


def _conv_bn_act(x, model: Model, prefix, norm, stride, act):
    y = ad.conv2d(x, model.params[f"{prefix}.weight"], stride=stride, padding=1)
    y = ad.batch_norm(
        y,
        model.params[f"{norm}.scale"],
        model.params[f"{norm}.shift"],
        model.buffers[f"{norm}.running_mean"],
        model.buffers[f"{norm}.running_var"],
        training=model.training,
    )
    return act(y)


def conv_stage(x: Tensor, model: Model, prefix: str, blocks: int, act) -> Tensor:
    """Strided conv downsample, then residual blocks of two conv-norm-act layers."""
    x = _conv_bn_act(x, model, f"{prefix}.down.conv", f"{prefix}.down.norm", 2, act)
    for b in range(1, blocks + 1):
        bp = f"{prefix}.block{b}"
        branch = _conv_bn_act(x, model, f"{bp}.conv1", f"{bp}.norm1", 1, act)
        branch = _conv_bn_act(branch, model, f"{bp}.conv2", f"{bp}.norm2", 1, act)
        x = x + branch
    return x


def patch_merge(tokens: Tensor, h: int, w: int, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    """2x2 neighbourhood concat + linear projection + layer norm; halves h and w."""
    n, _, d = tokens.shape
    t = tokens.reshape(n, h // 2, 2, w // 2, 2, d).transpose(0, 1, 3, 2, 4, 5).reshape(n, (h // 2) * (w // 2), 4 * d)
    t = t @ p[f"{prefix}.proj.weight"] + p[f"{prefix}.proj.bias"]
    return ad.layer_norm(t, p[f"{prefix}.norm.scale"], p[f"{prefix}.norm.shift"])


def _init_attention_block(init: _Init, prefix: str, d: int, length: int, heads: int, mlp_ratio: int):
    for name in ("q", "k", "v"):
        init.linear(f"{prefix}.attn.{name}", d, d, bias=False)
    init.linear(f"{prefix}.attn.out", d, d)
    init.const(f"{prefix}.attn.rel_bias", (heads, length, length), 0.0)
    init.layer_norm(f"{prefix}.norm1", d)
    init.linear(f"{prefix}.ffn.fc1", d, mlp_ratio * d)
    init.linear(f"{prefix}.ffn.fc2", mlp_ratio * d, d)


# ------------------------------------------------------------------ networks


class Network(Model):
    """A classifier assembled from a :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, params, buffers):
        super().__init__(params, buffers)
        self.spec = spec
        self.act = ad.ACTIVATIONS[spec.activation]

    def forward(self, x: Tensor) -> Tensor:
        spec = self.spec
        if tuple(x.shape[1:]) != tuple(spec.input_shape):
            raise ValueError(f"input shape {x.shape[1:]} does not match spec {spec.input_shape}")
        if spec.family == "ViT":
            return self._forward_vit(x)
        return self._forward_staged(x)

    def _forward_vit(self, x):
        p, spec = self.params, self.spec
        t = patch_embed(x, p["embed.proj.weight"], p["embed.proj.bias"], p["embed.pos_embed"], spec.patch_size)
        for i in range(1, len(spec.widths) + 1):
            t = attention_block(t, p, f"block{i}", spec.heads, self.act)
        return t.mean(axis=1) @ p["head.weight"] + p["head.bias"]

    def _forward_staged(self, x):
        spec, p = self.spec, self.params
        h, w = spec.input_shape[1:]
        feat, tokens = x, None  # exactly one is live: NCHW map for C stages, N x L x d tokens for T stages
        for i, kind in enumerate(spec.stage_kinds(), start=1):
            prefix = f"stage{i}"
            if kind == "C":
                if tokens is not None:
                    feat = tokens.reshape(tokens.shape[0], h, w, tokens.shape[2]).transpose(0, 3, 1, 2)
                    tokens = None
                feat = conv_stage(feat, self, prefix, spec.blocks, self.act)
            else:
                if tokens is None:
                    n, c = feat.shape[:2]
                    tokens = feat.transpose(0, 2, 3, 1).reshape(n, h * w, c)
                    feat = None
                tokens = patch_merge(tokens, h, w, p, f"{prefix}.merge")
                for b in range(1, spec.blocks + 1):
                    tokens = attention_block(tokens, p, f"{prefix}.block{b}", spec.heads, self.act)
            h, w = h // 2, w // 2
        pooled = tokens.mean(axis=1) if tokens is not None else feat.mean(axis=(2, 3))
        return pooled @ p["head.weight"] + p["head.bias"]


def build_model(spec: ModelSpec, seed: int = 0) -> Network:
    """Validate ``spec`` and initialise its parameters from ``seed``.

    Conv and linear weights use Kaiming fan-in normal init, biases and
    relative-position tables start at zero, norm scales at one.
    """
    spec.validate()
    init = _Init(seed)
    c, h, w = spec.input_shape
    if spec.family == "ViT":
        d, ps = spec.widths[0], spec.patch_size
        length = (h // ps) * (w // ps)
        init.linear("embed.proj", c * ps * ps, d)
        init.normal("embed.pos_embed", (length, d), 0.02)
        for i in range(1, len(spec.widths) + 1):
            _init_attention_block(init, f"block{i}", d, length, spec.heads, spec.mlp_ratio)
        d_last = d
    else:
        c_in = c
        for i, (kind, width) in enumerate(zip(spec.stage_kinds(), spec.widths), start=1):
            h, w = h // 2, w // 2
            prefix = f"stage{i}"
            if kind == "C":
                init.conv(f"{prefix}.down.conv", c_in, width)
                init.batch_norm(f"{prefix}.down.norm", width)
                for b in range(1, spec.blocks + 1):
                    init.conv(f"{prefix}.block{b}.conv1", width, width)
                    init.batch_norm(f"{prefix}.block{b}.norm1", width)
                    init.conv(f"{prefix}.block{b}.conv2", width, width)
                    init.batch_norm(f"{prefix}.block{b}.norm2", width)
            else:
                init.linear(f"{prefix}.merge.proj", 4 * c_in, width)
                init.layer_norm(f"{prefix}.merge.norm", width)
                for b in range(1, spec.blocks + 1):
                    _init_attention_block(init, f"{prefix}.block{b}", width, h * w, spec.heads, spec.mlp_ratio)
            c_in = width
        d_last = c_in
    init.linear("head", d_last, spec.num_classes)
    return Network(spec, init.params, init.buffers)


class LinearModel(Model):
    """Flatten-then-affine classifier, logits = flatten(x) @ W + b."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.zeros(weight.shape[1]) if bias is None else bias
        super().__init__({"linear.weight": Tensor(weight, True), "linear.bias": Tensor(bias, True)})

    @classmethod
    def zeros(cls, in_dim: int, num_classes: int) -> "LinearModel":
        return cls(np.zeros((in_dim, num_classes)))

    def forward(self, x: Tensor) -> Tensor:
        flat = x.reshape(x.shape[0], -1)
        return flat @ self.params["linear.weight"] + self.params["linear.bias"]


# ------------------------------------------------------------- weight groups

_GROUP_PATTERNS = {
    "conv": re.compile(r"\.conv\d?\.weight$"),
    "qkv": re.compile(r"\.attn\.[qkv]\.weight$"),
    "feedforward": re.compile(r"\.ffn\.fc\d\.weight$"),
}


def weight_group_names(model: Model) -> dict[str, list[str]]:
    names = list(model.params)
    groups = {"all": names}
    for group, pattern in _GROUP_PATTERNS.items():
        groups[group] = [n for n in names if pattern.search(n)]
    return groups


def extract_weight_groups(model: Model) -> dict[str, np.ndarray]:
    """Flat value arrays for the ``all``, ``conv``, ``qkv`` and ``feedforward`` groups.

    ``conv`` holds convolution kernels, ``qkv`` the attention query/key/value
    projections, ``feedforward`` the two MLP matrices of each attention block.
    ``all`` covers every parameter, biases and norm affines included.
    """
    out = {}
    for group, names in weight_group_names(model).items():
        arrays = [model.params[n].data.reshape(-1) for n in names]
        out[group] = np.concatenate(arrays) if arrays else np.zeros(0)
    return out


def is_weight(name: str) -> bool:
    """Conv kernels and linear matrices; biases, norm affines and position tables excluded."""
    return name.endswith(".weight")
