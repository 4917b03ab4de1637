"""Feature extractors and the per-descriptor transform layer.

Three desk-scale backbones stand in for large convolutional stacks; the
selection pipeline downstream is backbone-agnostic:

  identity      passes a precomputed descriptor grid through unchanged
  patch-linear  learned linear map + LeakyReLU over non-overlapping patches
  tiny-conv     two blocks of 3x3 conv, per-channel norm, LeakyReLU, 2x2 pool

The transform layer projects each descriptor through a learned affine map
(a 1x1 convolution), per-channel normalization, and LeakyReLU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .descriptors import DescriptorSet, flatten_feature_map
from .errors import InvalidInputError

LEAKY_SLOPE = 0.01
BACKBONE_KINDS = ("identity", "patch-linear", "tiny-conv")


class ChannelNorm:
    """Per-channel standardization with running statistics.

    Training mode normalizes by the incoming batch's statistics and folds
    them into the running buffers (momentum 0.1); evaluation mode uses the
    frozen running statistics.
    """

    def __init__(self, channels: int, dtype=np.float32, prefix: str = "norm",
                 momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = ad.parameter(np.ones((1, channels), dtype=dtype), f"{prefix}.gamma")
        self.beta = ad.parameter(np.zeros((1, channels), dtype=dtype), f"{prefix}.beta")
        self.running_mean = np.zeros((1, channels), dtype=dtype)
        self.running_var = np.ones((1, channels), dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.prefix = prefix

    def apply(self, x: ad.Node, train: bool, update_running: bool = None) -> ad.Node:
        if update_running is None:
            update_running = train
        if train:
            mu = ad.reduce_mean(x, axis=0, keepdims=True)
            centered = ad.sub(x, mu)
            var = ad.reduce_mean(ad.mul(centered, centered), axis=0, keepdims=True)
            inv = ad.powc(ad.add(var, np.asarray(self.eps, dtype=x.value.dtype)), -0.5)
            normalized = ad.mul(centered, inv)
            if update_running:
                mom = self.momentum
                self.running_mean = ((1 - mom) * self.running_mean + mom * mu.value).astype(self.running_mean.dtype)
                self.running_var = ((1 - mom) * self.running_var + mom * var.value).astype(self.running_var.dtype)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            normalized = ad.mul(ad.sub(x, ad.constant(self.running_mean.astype(x.value.dtype))),
                                ad.constant(inv.astype(x.value.dtype)))
        return ad.add(ad.mul(normalized, self.gamma), self.beta)

    def parameters(self):
        return {self.gamma.name: self.gamma, self.beta.name: self.beta}

    def state(self):
        return {f"{self.prefix}.running_mean": self.running_mean,
                f"{self.prefix}.running_var": self.running_var}

    def load_state(self, arrays):
        self.running_mean = np.asarray(arrays[f"{self.prefix}.running_mean"])
        self.running_var = np.asarray(arrays[f"{self.prefix}.running_var"])


class TransformLayer:
    """Descriptor subspace map: affine projection, optional norm, LeakyReLU."""

    def __init__(self, d_in: int, d_out: int = None, normalize: bool = True,
                 init: str = "identity", rng: np.random.Generator = None,
                 dtype=np.float32, prefix: str = "transform"):
        d_out = d_in if d_out is None else d_out
        if d_out < 1:
            raise InvalidInputError("transform output dimension must be >= 1")
        if init == "identity":
            if d_in != d_out:
                raise InvalidInputError("identity init needs d_in == d_out")
            w = np.eye(d_in, dtype=dtype)
        elif init == "random":
            rng = rng or np.random.default_rng(0)
            w = (rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in)).astype(dtype)
        else:
            raise InvalidInputError(f"unknown transform init {init!r}")
        self.projection = ad.parameter(w, f"{prefix}.weight")
        self.bias = ad.parameter(np.zeros((1, d_out), dtype=dtype), f"{prefix}.bias")
        self.norm = ChannelNorm(d_out, dtype=dtype, prefix=f"{prefix}.norm") if normalize else None
        self.d_in, self.d_out = d_in, d_out
        self.prefix = prefix

    def apply(self, x: ad.Node, train: bool = False, update_running: bool = None) -> ad.Node:
        if x.value.shape[1] != self.d_in:
            raise InvalidInputError(f"transform expects d={self.d_in}, got {x.value.shape[1]}")
        y = ad.add(ad.matmul(x, self.projection), self.bias)
        if self.norm is not None:
            y = self.norm.apply(y, train, update_running)
        return ad.leaky_relu(y, LEAKY_SLOPE)

    def parameters(self):
        out = {self.projection.name: self.projection, self.bias.name: self.bias}
        if self.norm is not None:
            out.update(self.norm.parameters())
        return out

    def state(self):
        return self.norm.state() if self.norm is not None else {}


@dataclass
class Backbone:
    kind: str
    input_shape: tuple  # (h, w, c) or None for identity
    output_dims: tuple  # (h_out, w_out, d_out); identity echoes its input
    params: dict = field(default_factory=dict)
    norms: list = field(default_factory=list)
    patch: int = 0

    def parameters(self):
        return dict(self.params)

    def state(self):
        out = {}
        for n in self.norms:
            out.update(n.state())
        return out


def build_backbone(kind: str, input_shape=None, d_out: int = None, patch: int = 2,
                   rng: np.random.Generator = None, dtype=np.float32) -> Backbone:
    rng = rng or np.random.default_rng(0)
    if kind == "identity":
        dims = input_shape if input_shape is not None else (0, 0, 0)
        return Backbone("identity", input_shape, dims)
    if input_shape is None:
        raise InvalidInputError(f"{kind} backbone needs an input shape")
    h, w, c = input_shape
    if kind == "patch-linear":
        if patch < 1 or h % patch or w % patch:
            raise InvalidInputError(f"grid {h}x{w} not divisible by patch {patch}")
        d_out = d_out or c
        fan_in = patch * patch * c
        weight = (rng.standard_normal((fan_in, d_out)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        params = {
            "backbone.weight": ad.parameter(weight, "backbone.weight"),
            "backbone.bias": ad.parameter(np.zeros((1, d_out), dtype=dtype), "backbone.bias"),
        }
        return Backbone("patch-linear", input_shape, (h // patch, w // patch, d_out),
                        params, patch=patch)
    if kind == "tiny-conv":
        if h < 4 or w < 4:
            raise InvalidInputError("tiny-conv needs at least a 4x4 grid (two 2x2 pools)")
        d_out = d_out or c
        params, norms = {}, []
        c_in = c
        for b in range(2):
            weight = (rng.standard_normal((d_out, c_in, 3, 3)) * np.sqrt(2.0 / (9 * c_in))).astype(dtype)
            params[f"backbone.conv{b}.weight"] = ad.parameter(weight, f"backbone.conv{b}.weight")
            params[f"backbone.conv{b}.bias"] = ad.parameter(np.zeros(d_out, dtype=dtype),
                                                            f"backbone.conv{b}.bias")
            norms.append(ChannelNorm(d_out, dtype=dtype, prefix=f"backbone.conv{b}.norm"))
            c_in = d_out
        return Backbone("tiny-conv", input_shape, (h // 4, w // 4, d_out), params, norms)
    raise InvalidInputError(f"unknown backbone kind: {kind!r}")


def embed_node(backbone: Backbone, raw: np.ndarray, train: bool = False,
               update_running: bool = None):
    """Differentiable embedding: raw (h, w, c) grid -> ((m, d) node, (h_out, w_out))."""
    raw = np.asarray(raw)
    if raw.ndim != 3:
        raise InvalidInputError(f"backbone input must be rank 3, got shape {raw.shape}")
    h, w, c = raw.shape
    if backbone.kind == "identity":
        return ad.constant(raw.reshape(h * w, c)), (h, w)
    if backbone.input_shape is not None and (h, w, c) != tuple(backbone.input_shape):
        raise InvalidInputError(f"backbone expects input {backbone.input_shape}, got {(h, w, c)}")
    if backbone.kind == "patch-linear":
        p = backbone.patch
        hp, wp = h // p, w // p
        # (hp, wp, p, p, c) patches, row-major over the patch grid
        patches = raw.reshape(hp, p, wp, p, c).transpose(0, 2, 1, 3, 4).reshape(hp * wp, p * p * c)
        y = ad.add(ad.matmul(ad.constant(patches), backbone.params["backbone.weight"]),
                   backbone.params["backbone.bias"])
        return ad.leaky_relu(y, LEAKY_SLOPE), (hp, wp)
    if backbone.kind == "tiny-conv":
        x = ad.constant(raw)
        for b, norm in enumerate(backbone.norms):
            x = ad.conv3x3(x, backbone.params[f"backbone.conv{b}.weight"],
                           backbone.params[f"backbone.conv{b}.bias"])
            hh, ww, cc = x.value.shape
            flat = norm.apply(ad.reshape_rows(x, (hh * ww, cc)), train, update_running)
            x = ad.leaky_relu(ad.reshape_rows(flat, (hh, ww, cc)), LEAKY_SLOPE)
            x = ad.maxpool2(x)
        hh, ww, cc = x.value.shape
        return ad.reshape_rows(x, (hh * ww, cc)), (hh, ww)
    raise InvalidInputError(f"unknown backbone kind: {backbone.kind!r}")


def embed(backbone: Backbone, raw: np.ndarray) -> DescriptorSet:
    """Evaluation-mode embedding to a DescriptorSet."""
    with ad.no_grad():
        node, (h, w) = embed_node(backbone, raw, train=False)
    return DescriptorSet(np.asarray(node.value), h, w)


def transform_set(layer: TransformLayer, ds: DescriptorSet, train: bool = False) -> DescriptorSet:
    """Evaluation-mode transform of a DescriptorSet (same m)."""
    with ad.no_grad():
        node = layer.apply(ad.constant(ds.descriptors), train=train, update_running=False)
    return DescriptorSet(np.asarray(node.value), ds.height, ds.width)
