"""Declarative model zoo: six architectures described as ordered node lists with
static shape inference and parameter counting, plus an interpreter that
instantiates and runs them.

Specs serialize to canonical JSON; the sha256 of that document identifies a
checkpoint's architecture.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import capsule as caps
from .layers import (
    BatchNormState,
    ConvParams,
    activation as apply_activation,
    batchnorm,
    conv2d,
    conv_output_size,
    dense,
    dropout,
    flatten as flatten_op,
    gap,
    glorot_uniform,
    kaiming_uniform,
    maxpool2d,
)
from .stn import STNParams, stn_block
from .tensor import Tensor, concat

OUTPUT_KINDS = ("sigmoid-binary", "softmax-2", "capsule-length-2")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple  # (C, H, W)
    metadata_width: int
    nodes: tuple
    output_kind: str


# ---- node constructors -------------------------------------------------------------


def conv_node(filters: int, kernel: int, stride: int = 1, padding: str = "same",
              act: str = "relu") -> dict:
    return {"kind": "conv", "filters": filters, "kernel": [kernel, kernel],
            "stride": [stride, stride], "padding": padding, "activation": act}


def pool_node(window: int = 2, stride: int | None = None) -> dict:
    s = stride if stride is not None else window
    return {"kind": "maxpool", "window": [window, window], "stride": [s, s]}


def dense_node(units: int, act: str = "relu") -> dict:
    return {"kind": "dense", "units": units, "activation": act}


# ---- static shape inference ----------------------------------------------------------


def infer_shapes(spec: ModelSpec) -> list[tuple]:
    """Per-node output shapes (without the batch axis); raises if nodes do not chain."""
    shape = tuple(spec.input_shape)
    out = []
    for node in spec.nodes:
        shape = _node_shape(node, shape, spec.metadata_width)
        out.append(shape)
    return out


def _node_shape(node: dict, s: tuple, metadata_width: int) -> tuple:
    kind = node["kind"]
    if kind == "conv":
        c, h, w = s
        kh, kw = node["kernel"]
        sh, sw = node["stride"]
        if node["padding"] == "valid" and (h < kh or w < kw):
            raise ValueError(f"conv kernel {kh}x{kw} larger than input {h}x{w}")
        return (node["filters"],
                conv_output_size(h, kh, sh, node["padding"]),
                conv_output_size(w, kw, sw, node["padding"]))
    if kind == "maxpool":
        c, h, w = s
        wh, ww = node["window"]
        sh, sw = node["stride"]
        if wh > h or ww > w:
            raise ValueError(f"pool window {wh}x{ww} exceeds input {h}x{w}")
        return (c, (h - wh) // sh + 1, (w - ww) // sw + 1)
    if kind == "dense":
        (d,) = s
        return (node["units"],)
    if kind == "flatten":
        return (int(np.prod(s)),)
    if kind == "gap":
        return (s[0],)
    if kind == "concat_meta":
        (d,) = s
        return (d + metadata_width,)
    if kind in ("dropout", "batchnorm", "lambda_scale", "stn"):
        return s
    if kind == "primary_caps":
        c, h, w = s
        k, st, pad = node["kernel"], node["stride"], node["padding"]
        oh = conv_output_size(h, k, st, pad)
        ow = conv_output_size(w, k, st, pad)
        return (oh * ow * node["channels"], node["dim"])
    if kind == "caps_routing":
        in_caps, in_dim = s
        return (node["n_class"], node["digit_dim"])
    if kind == "caps_length":
        n_class, dim = s
        return (n_class,)
    raise ValueError(f"unknown node kind {kind!r}")


def param_count(spec: ModelSpec) -> int:
    """Learnable element count (batch-norm running statistics excluded)."""
    total = 0
    shape = tuple(spec.input_shape)
    for node in spec.nodes:
        kind = node["kind"]
        if kind == "conv":
            kh, kw = node["kernel"]
            total += node["filters"] * (shape[0] * kh * kw) + node["filters"]
        elif kind == "dense":
            total += shape[0] * node["units"] + node["units"]
        elif kind == "batchnorm":
            total += 2 * shape[0]
        elif kind == "stn":
            total += _stn_param_count(shape)
        elif kind == "primary_caps":
            ch = node["channels"] * node["dim"]
            total += ch * (shape[0] * node["kernel"] ** 2) + ch
        elif kind == "caps_routing":
            in_caps, in_dim = shape
            total += in_caps * node["n_class"] * node["digit_dim"] * in_dim
        shape = _node_shape(node, shape, spec.metadata_width)
    return total


def _stn_param_count(shape: tuple) -> int:
    c, h, w = shape
    bn = 2 * c
    conv1 = 8 * (c * 25) + 8
    conv2 = 8 * (8 * 25) + 8
    flat = 8 * (h // 4) * (w // 4)
    fc1 = flat * 32 + 32
    fc2 = 32 * 6 + 6
    return bn + conv1 + conv2 + fc1 + fc2


# ---- builders --------------------------------------------------------------------------


def build_vanilla_cnn(channels: str, input_hw: int = 64) -> ModelSpec:
    """Four conv+pool blocks growing 16->128, then dense 128 and a sigmoid unit."""
    if channels not in ("gray", "rgb"):
        raise ValueError(f"channels must be 'gray' or 'rgb', got {channels!r}")
    c = 1 if channels == "gray" else 3
    nodes = (
        conv_node(16, 7), pool_node(),
        conv_node(32, 3), pool_node(),
        conv_node(64, 3), pool_node(),
        conv_node(128, 3), pool_node(),
        {"kind": "flatten"},
        dense_node(128, "relu"),
        dense_node(1, "sigmoid"),
    )
    return ModelSpec(f"vanilla_{channels}", (c, input_hw, input_hw), 0, nodes, "sigmoid-binary")


VGG16_WIDTHS = (64, 64, "P", 128, 128, "P", 256, 256, 256, "P",
                512, 512, 512, "P", 512, 512, 512, "P")

VGG16_HEADS = {
    1: (("gap",), ("dense", 4096), ("dense", 4096), ("softmax",)),
    2: (("gap",), ("softmax",)),
    3: (("gap",), ("dense", 512), ("drop",), ("dense", 256), ("drop",),
        ("dense", 128), ("drop",), ("softmax",)),
    4: (("gap",), ("dense", 512), ("drop",), ("softmax",)),
    5: (("gap",), ("dense", 512), ("drop",), ("dense", 512), ("drop",),
        ("dense", 256), ("drop",), ("softmax",)),
}


def _vgg16_backbone() -> list[dict]:
    nodes = []
    for item in VGG16_WIDTHS:
        if item == "P":
            nodes.append(pool_node())
        else:
            nodes.append(conv_node(item, 3))
    return nodes


def build_vgg16(head: int, in_channels: int = 3, input_hw: int = 64) -> ModelSpec:
    if head not in VGG16_HEADS:
        raise ValueError(f"unknown VGG16 head {head!r}, expected 1..5")
    nodes = _vgg16_backbone()
    for step in VGG16_HEADS[head]:
        if step[0] == "gap":
            nodes.append({"kind": "gap"})
        elif step[0] == "dense":
            nodes.append(dense_node(step[1], "relu"))
        elif step[0] == "drop":
            nodes.append({"kind": "dropout", "rate": 0.5})
        elif step[0] == "softmax":
            nodes.append(dense_node(2, "softmax"))
    return ModelSpec(f"vgg16_h{head}", (in_channels, input_hw, input_hw), 0,
                     tuple(nodes), "softmax-2")


def build_vdsnet(input_hw: int = 64, backbone_blocks: int = 5) -> ModelSpec:
    """STN front, VGG16 feature extractor, metadata-fusion classification head.

    backbone_blocks < 5 shrinks the extractor for small-input gradient checks;
    the structure (every node kind) is unchanged.
    """
    blocks, block = [], []
    for item in VGG16_WIDTHS:
        if item == "P":
            block.append(pool_node())
            blocks.append(block)
            block = []
        else:
            block.append(conv_node(item, 3))
    nodes = [{"kind": "stn"}]
    for b in blocks[:backbone_blocks]:
        nodes.extend(b)
    nodes.extend([
        {"kind": "flatten"},
        {"kind": "concat_meta"},
        {"kind": "dropout", "rate": 0.5},
        dense_node(512, "relu"),
        {"kind": "dropout", "rate": 0.5},
        dense_node(128, "relu"),
        dense_node(1, "sigmoid"),
    ])
    name = "vdsnet" if (input_hw, backbone_blocks) == (64, 5) else f"vdsnet_{input_hw}_{backbone_blocks}"
    return ModelSpec(name, (3, input_hw, input_hw), 5, tuple(nodes), "sigmoid-binary")


def build_capsnet(variant: str, input_hw: int = 64, in_channels: int = 3) -> ModelSpec:
    cfg = {"basic": caps.CapsuleConfig.basic, "modified": caps.CapsuleConfig.modified}
    if variant not in cfg:
        raise ValueError(f"unknown capsnet variant {variant!r}")
    c = cfg[variant]()
    nodes = (
        conv_node(c.conv_filters, c.conv_kernel, c.conv_stride, c.conv_padding, "relu"),
        {"kind": "primary_caps", "channels": c.primary_channels, "dim": c.primary_dim,
         "kernel": c.primary_kernel, "stride": c.primary_stride, "padding": c.primary_padding},
        {"kind": "caps_routing", "n_class": c.n_class, "digit_dim": c.digit_dim,
         "routings": c.routings},
        {"kind": "caps_length"},
    )
    return ModelSpec(f"capsnet_{variant}", (in_channels, input_hw, input_hw), 0,
                     nodes, "capsule-length-2")


ZOO = {
    "vanilla_gray": lambda: build_vanilla_cnn("gray"),
    "vanilla_rgb": lambda: build_vanilla_cnn("rgb"),
    "vgg16_h1": lambda: build_vgg16(1),
    "vgg16_h2": lambda: build_vgg16(2),
    "vgg16_h3": lambda: build_vgg16(3),
    "vgg16_h4": lambda: build_vgg16(4),
    "vgg16_h5": lambda: build_vgg16(5),
    "vdsnet": build_vdsnet,
    "capsnet_basic": lambda: build_capsnet("basic"),
    "capsnet_modified": lambda: build_capsnet("modified"),
}


def get_model_spec(name: str) -> ModelSpec:
    try:
        return ZOO[name]()
    except KeyError:
        raise ValueError(f"unknown model {name!r}; known: {', '.join(sorted(ZOO))}") from None


# ---- canonical serialization ---------------------------------------------------------------


def spec_to_json(spec: ModelSpec) -> str:
    doc = {
        "name": spec.name,
        "input_shape": list(spec.input_shape),
        "metadata_width": spec.metadata_width,
        "output_kind": spec.output_kind,
        "nodes": list(spec.nodes),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def spec_digest(spec: ModelSpec) -> str:
    return hashlib.sha256(spec_to_json(spec).encode("utf-8")).hexdigest()


# ---- interpreter -----------------------------------------------------------------------------


class Model:
    """Instantiates a ModelSpec's parameters and runs its node program."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng()
        self._shapes = infer_shapes(spec)
        self._state: list = []
        shape = tuple(spec.input_shape)
        for i, node in enumerate(spec.nodes):
            self._state.append(self._init_node(node, shape, rng))
            shape = self._shapes[i]

    def _init_node(self, node: dict, in_shape: tuple, rng: np.random.Generator):
        kind = node["kind"]
        if kind == "conv":
            return ConvParams.create(
                node["filters"], tuple(node["kernel"]), in_shape[0],
                stride=tuple(node["stride"]), padding=node["padding"], rng=rng,
                init="kaiming" if node["activation"] == "relu" else "glorot")
        if kind == "dense":
            d, u = in_shape[0], node["units"]
            w = (kaiming_uniform((d, u), d, rng) if node["activation"] == "relu"
                 else glorot_uniform((d, u), d, u, rng))
            return {"w": Tensor(w, requires_grad=True),
                    "b": Tensor(np.zeros(u, dtype=np.float32), requires_grad=True)}
        if kind == "batchnorm":
            return BatchNormState.create(in_shape[0])
        if kind == "stn":
            return STNParams.create(in_shape[0], in_shape[1], in_shape[2], rng)
        if kind == "primary_caps":
            return ConvParams.create(
                node["channels"] * node["dim"], node["kernel"], in_shape[0],
                stride=node["stride"], padding=node["padding"], rng=rng, init="glorot")
        if kind == "caps_routing":
            in_caps, in_dim = in_shape
            w = glorot_uniform((in_caps, node["n_class"], node["digit_dim"], in_dim),
                               fan_in=in_dim, fan_out=node["digit_dim"], rng=rng)
            return Tensor(w, requires_grad=True)
        return None

    # -- parameter access ------------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (node, st) in enumerate(zip(self.spec.nodes, self._state)):
            prefix = f"{i:02d}_{node['kind']}"
            if isinstance(st, ConvParams):
                out[f"{prefix}.w"] = st.weights
                out[f"{prefix}.b"] = st.bias
            elif isinstance(st, dict):
                out[f"{prefix}.w"] = st["w"]
                out[f"{prefix}.b"] = st["b"]
            elif isinstance(st, BatchNormState):
                out[f"{prefix}.gamma"] = st.gamma
                out[f"{prefix}.beta"] = st.beta
            elif isinstance(st, STNParams):
                out[f"{prefix}.bn.gamma"] = st.bn.gamma
                out[f"{prefix}.bn.beta"] = st.bn.beta
                ln = st.locnet
                out[f"{prefix}.conv1.w"] = ln.conv1.weights
                out[f"{prefix}.conv1.b"] = ln.conv1.bias
                out[f"{prefix}.conv2.w"] = ln.conv2.weights
                out[f"{prefix}.conv2.b"] = ln.conv2.bias
                out[f"{prefix}.fc1.w"] = ln.fc1_w
                out[f"{prefix}.fc1.b"] = ln.fc1_b
                out[f"{prefix}.fc2.w"] = ln.fc2_w
                out[f"{prefix}.fc2.b"] = ln.fc2_b
            elif isinstance(st, Tensor):
                out[f"{prefix}.w"] = st
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (node, st) in enumerate(zip(self.spec.nodes, self._state)):
            prefix = f"{i:02d}_{node['kind']}"
            if isinstance(st, BatchNormState):
                out[f"{prefix}.running_mean"] = st.running_mean
                out[f"{prefix}.running_var"] = st.running_var
            elif isinstance(st, STNParams):
                out[f"{prefix}.bn.running_mean"] = st.bn.running_mean
                out[f"{prefix}.bn.running_var"] = st.bn.running_var
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        idx = int(name.split("_", 1)[0])
        st = self._state[idx]
        bn = st.bn if isinstance(st, STNParams) else st
        if name.endswith("running_mean"):
            bn.running_mean = value.astype(bn.running_mean.dtype)
        elif name.endswith("running_var"):
            bn.running_var = value.astype(bn.running_var.dtype)
        else:
            raise KeyError(name)

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters().values())

    # -- execution ----------------------------------------------------------------------

    def forward(self, x: Tensor, meta: Tensor | None = None, mode: str = "train",
                rng: np.random.Generator | None = None,
                trace: list | None = None) -> Tensor:
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ValueError(f"input shape {x.shape[1:]} does not match spec {self.spec.input_shape}")
        if self.spec.metadata_width:
            if meta is None:
                raise ValueError(f"model {self.spec.name} requires a metadata tensor "
                                 f"of width {self.spec.metadata_width}")
            if meta.ndim != 2 or meta.shape != (x.shape[0], self.spec.metadata_width):
                raise ValueError(f"metadata shape {meta.shape} != "
                                 f"({x.shape[0]}, {self.spec.metadata_width})")
        rng = rng if rng is not None else np.random.default_rng()
        t = x
        for node, st in zip(self.spec.nodes, self._state):
            t = self._run_node(node, st, t, meta, mode, rng)
            if trace is not None:
                trace.append(t.shape)
        return t

    def _run_node(self, node: dict, st, t: Tensor, meta, mode: str,
                  rng: np.random.Generator) -> Tensor:
        kind = node["kind"]
        if kind == "conv":
            out = conv2d(t, st)
            if node["activation"] != "linear":
                out = apply_activation(node["activation"], out)
            return out
        if kind == "maxpool":
            out, _ = maxpool2d(t, tuple(node["window"]), tuple(node["stride"]))
            return out
        if kind == "dense":
            out = dense(t, st["w"], st["b"])
            if node["activation"] != "linear":
                out = apply_activation(node["activation"], out)
            return out
        if kind == "flatten":
            return flatten_op(t)
        if kind == "gap":
            return gap(t)
        if kind == "dropout":
            return dropout(t, node["rate"], mode, rng)
        if kind == "batchnorm":
            return batchnorm(t, st, mode)
        if kind == "lambda_scale":
            return t - 0.5
        if kind == "stn":
            return stn_block(t, st, mode)
        if kind == "concat_meta":
            return concat([t, meta], axis=1)
        if kind == "primary_caps":
            cfg = caps.CapsuleConfig(primary_dim=node["dim"], primary_channels=node["channels"])
            return caps.primary_caps(t, st, cfg)
        if kind == "caps_routing":
            u_hat = caps.caps_predict(t, st)
            return caps.routing(u_hat, node["routings"])
        if kind == "caps_length":
            return caps.capsule_length(t)
        raise ValueError(f"unknown node kind {kind!r}")
