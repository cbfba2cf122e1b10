"""The four segmentation network variants.

All variants share a four-stage double-conv encoder with channel schedule
(64, 128, 256, 512) and a symmetric transposed-conv decoder:

  * ``unet``        plain encoder/decoder with a 1024-channel bottleneck
  * ``mhsa_nope``   unet plus two self-attention blocks at the bottleneck,
                    run at 512 channels between 1x1 reduce/expand convs,
                    without positional information
  * ``mhsa_pe``     same, with a learnable positional-embedding table added
                    to the token sequence before the projections
  * ``edgeattnet``  512-channel bottleneck whose two attention blocks bias
                    their query/key inputs with a learned edge map computed
                    from the raw input image

Convolutions carry biases; batch norms carry no learnable affine pair.
Attention blocks are projection-only (Q, K, V, output, residual, layer
norm, dropout) with no feed-forward sublayer. This is the configuration
whose computed parameter totals come closest to the published full-scale
figures; residuals against those figures are itemized by `param_report`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("unet", "mhsa_nope", "mhsa_pe", "edgeattnet")

# published full-scale totals the reconstruction is compared against
REFERENCE_TOTALS = {
    "unet": 31_030_593,
    "mhsa_nope": 35_231_041,
    "mhsa_pe": 35_362_113,
    "edgeattnet": 22_658_891,
}


@dataclass
class ModelSpec:
    """Complete architectural description of one variant."""
    variant: str
    in_channels: int = 1
    encoder_channels: tuple = (64, 128, 256, 512)
    bottleneck_channels: int | None = None
    heads: int = 4
    head_dim: int = 128
    n_attention_blocks: int = 2
    dropout_p: float = 0.1
    input_size: tuple = (256, 256)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        self.encoder_channels = tuple(self.encoder_channels)
        self.input_size = tuple(self.input_size)
        if self.bottleneck_channels is None:
            last = self.encoder_channels[-1]
            self.bottleneck_channels = last if self.variant == "edgeattnet" else 2 * last
        if self.variant != "unet" and self.heads * self.head_dim != self.encoder_channels[-1]:
            raise ValueError(
                f"attention width heads*head_dim = {self.heads * self.head_dim} must equal "
                f"the deepest encoder width {self.encoder_channels[-1]}")
        h, w = self.input_size
        if h % 16 or w % 16:
            raise ValueError(f"input size {h}x{w} must be divisible by 16")

    @property
    def attn_width(self) -> int:
        return self.heads * self.head_dim

    @property
    def token_count(self) -> int:
        return (self.input_size[0] // 16) * (self.input_size[1] // 16)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ModelSpec":
        return ModelSpec(**json.loads(text))


@dataclass
class EdgePrior:
    """Learned edge map from the raw input and its bottleneck-shaped projection."""
    edge_map: Tensor        # B,1,H,W, values strictly in (0,1)
    projected: Tensor       # B,C,H/16,W/16


# ---------------------------------------------------------------------------
# parameter layout (single source of truth for init, counting, checkpoints)


def _double_conv_entries(prefix: str, cin: int, cout: int):
    return [
        (f"{prefix}.conv1.weight", (cout, cin, 3, 3)),
        (f"{prefix}.conv1.bias", (cout,)),
        (f"{prefix}.conv2.weight", (cout, cout, 3, 3)),
        (f"{prefix}.conv2.bias", (cout,)),
    ]


def _decoder_plan(spec: ModelSpec):
    enc_rev = list(reversed(spec.encoder_channels))
    ups_in = [spec.bottleneck_channels] + enc_rev[:-1]
    return [(ups_in[i], enc_rev[i], enc_rev[i]) for i in range(len(enc_rev))]


def param_layout(spec: ModelSpec):
    """Ordered (name, shape) pairs for every learnable parameter."""
    entries = []
    cin = spec.in_channels
    for i, cout in enumerate(spec.encoder_channels, start=1):
        entries += _double_conv_entries(f"enc{i}", cin, cout)
        cin = cout
    entries += _double_conv_entries("bottleneck", cin, spec.bottleneck_channels)

    if spec.variant != "unet":
        c = spec.attn_width
        if spec.bottleneck_channels != c:
            entries += [
                ("attn_in.weight", (c, spec.bottleneck_channels, 1, 1)),
                ("attn_in.bias", (c,)),
            ]
        if spec.variant == "edgeattnet":
            entries += [
                ("edge.conv.weight", (1, spec.in_channels, 3, 3)),
                ("edge.conv.bias", (1,)),
                ("edge.project.weight", (c, 1, 1, 1)),
                ("edge.project.bias", (c,)),
            ]
        if spec.variant == "mhsa_pe":
            entries.append(("pos_embed", (spec.token_count, c)))
        for k in range(1, spec.n_attention_blocks + 1):
            for proj in ("wq", "wk", "wv", "wo"):
                entries.append((f"block{k}.{proj}", (c, c)))
                entries.append((f"block{k}.b{proj[-1]}", (c,)))
            entries.append((f"block{k}.ln.scale", (c,)))
            entries.append((f"block{k}.ln.shift", (c,)))
        if spec.bottleneck_channels != c:
            entries += [
                ("attn_out.weight", (spec.bottleneck_channels, c, 1, 1)),
                ("attn_out.bias", (spec.bottleneck_channels,)),
            ]

    for i, (up_in, up_out, skip) in enumerate(_decoder_plan(spec), start=1):
        entries += [
            (f"dec{i}.up.weight", (up_in, up_out, 2, 2)),
            (f"dec{i}.up.bias", (up_out,)),
        ]
        entries += _double_conv_entries(f"dec{i}", up_out + skip, up_out)
    entries += [
        ("head.weight", (1, spec.encoder_channels[0], 1, 1)),
        ("head.bias", (1,)),
    ]
    return entries


def buffer_layout(spec: ModelSpec):
    """Ordered (name, channels) pairs for batch-norm running statistics."""
    entries = []
    for i, cout in enumerate(spec.encoder_channels, start=1):
        entries += [(f"enc{i}.bn1", cout), (f"enc{i}.bn2", cout)]
    entries += [("bottleneck.bn1", spec.bottleneck_channels),
                ("bottleneck.bn2", spec.bottleneck_channels)]
    for i, (_, up_out, _) in enumerate(_decoder_plan(spec), start=1):
        entries += [(f"dec{i}.bn1", up_out), (f"dec{i}.bn2", up_out)]
    return entries


def param_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_layout(spec))


def _layer_of(name: str) -> str:
    if "." not in name:
        return name
    head, leaf = name.rsplit(".", 1)
    return head


def param_report(spec: ModelSpec):
    """Per-layer breakdown plus total and residual vs the published figure."""
    rows = []
    by_layer: dict[str, int] = {}
    order = []
    for name, shape in param_layout(spec):
        layer = _layer_of(name)
        if layer not in by_layer:
            by_layer[layer] = 0
            order.append(layer)
        by_layer[layer] += int(np.prod(shape))
    for layer in order:
        rows.append({"layer": layer, "count": by_layer[layer]})
    total = sum(r["count"] for r in rows)
    reference = REFERENCE_TOTALS.get(spec.variant)
    report = {
        "variant": spec.variant,
        "input_size": list(spec.input_size),
        "layers": rows,
        "total": total,
        "reference_total": reference,
        "residual": total - reference if reference is not None else None,
    }
    return report


# ---------------------------------------------------------------------------
# model


def _kaiming_uniform(shape, fan_in, rng):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _xavier_uniform(shape, rng):
    fan_in, fan_out = shape[0], shape[1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec: ModelSpec, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_layout(spec):
        if name.endswith(".bias") or name.endswith(("bq", "bk", "bv", "bo")) \
                or name.endswith("ln.shift"):
            data = np.zeros(shape)
        elif name.endswith("ln.scale"):
            data = np.ones(shape)
        elif name == "pos_embed":
            data = np.zeros(shape)
        elif name.endswith(("wq", "wk", "wv", "wo")):
            data = _xavier_uniform(shape, rng)
        elif ".up." in name:
            data = _kaiming_uniform(shape, shape[0] * shape[2] * shape[3], rng)
        else:
            data = _kaiming_uniform(shape, shape[1] * shape[2] * shape[3], rng)
        params[name] = Tensor(data, requires_grad=True)
    return params


def init_buffers(spec: ModelSpec) -> dict:
    buffers = {}
    for name, c in buffer_layout(spec):
        buffers[f"{name}.mean"] = np.zeros(c)
        buffers[f"{name}.var"] = np.ones(c)
    return buffers


class Model:
    """A built variant: parameters, running stats, and the forward pass."""

    def __init__(self, spec: ModelSpec, seed: int = 0,
                 params: dict | None = None, buffers: dict | None = None):
        self.spec = spec
        self.params = params if params is not None else init_params(spec, seed)
        self.buffers = buffers if buffers is not None else init_buffers(spec)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    # -- building blocks ----------------------------------------------------

    def _double_conv(self, x, prefix, training):
        p, b = self.params, self.buffers
        x = T.conv2d(x, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"], padding=1)
        x = T.batchnorm2d(x, None, None, b[f"{prefix}.bn1.mean"], b[f"{prefix}.bn1.var"], training)
        x = T.relu(x)
        x = T.conv2d(x, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"], padding=1)
        x = T.batchnorm2d(x, None, None, b[f"{prefix}.bn2.mean"], b[f"{prefix}.bn2.var"], training)
        return T.relu(x)

    def edge_prior(self, x: Tensor) -> EdgePrior:
        """Edge map from the raw input, resized and projected to bottleneck shape."""
        p = self.params
        _, _, h, w = x.shape
        e = T.sigmoid(T.conv2d(x, p["edge.conv.weight"], p["edge.conv.bias"], padding=1))
        resized = T.bilinear_resize(e, h // 16, w // 16)
        projected = T.conv2d(resized, p["edge.project.weight"], p["edge.project.bias"])
        return EdgePrior(edge_map=e, projected=projected)

    def eg_mhsa(self, x: Tensor, block: int, edge_projected: Tensor | None = None,
                pos: Tensor | None = None, training: bool = False,
                rng: np.random.Generator | None = None, return_weights: bool = False):
        """One attention block on a B,C,H',W' map.

        The projected edge bias (same shape as x) is added to the query/key
        inputs only; a positional table (tokens x C) is instead added to the
        whole token sequence. Passing neither gives the plain block.
        """
        p = self.params
        bsz, c, hh, ww = x.shape
        if c != self.spec.attn_width:
            raise ValueError(f"attention expects {self.spec.attn_width} channels, got {c}")
        heads, hd = self.spec.heads, self.spec.head_dim
        tokens = T.flatten_spatial(x)
        if pos is not None:
            tokens = tokens + pos
        if edge_projected is not None:
            qk_in = tokens + T.flatten_spatial(edge_projected)
        else:
            qk_in = tokens
        pre = f"block{block}"
        q = T.matmul(qk_in, p[f"{pre}.wq"]) + p[f"{pre}.bq"]
        k = T.matmul(qk_in, p[f"{pre}.wk"]) + p[f"{pre}.bk"]
        v = T.matmul(tokens, p[f"{pre}.wv"]) + p[f"{pre}.bv"]
        n = hh * ww

        def split(t):
            return T.swapaxes(T.reshape(t, (bsz, n, heads, hd)), 1, 2)

        qh, kh, vh = split(q), split(k), split(v)
        scores = T.matmul(qh, T.transpose_last2(kh)) * (1.0 / math.sqrt(hd))
        weights = T.softmax_lastdim(scores)
        ctx = T.matmul(weights, vh)
        merged = T.reshape(T.swapaxes(ctx, 1, 2), (bsz, n, c))
        out = T.matmul(merged, p[f"{pre}.wo"]) + p[f"{pre}.bo"]
        res = tokens + out
        normed = T.layernorm_lastdim(res, p[f"{pre}.ln.scale"], p[f"{pre}.ln.shift"])
        dropped = T.dropout(normed, self.spec.dropout_p, training, rng)
        result = T.unflatten_spatial(dropped, hh, ww)
        if return_weights:
            return result, weights
        return result

    # -- full pass ------------------------------------------------------------

    def forward(self, x: Tensor, training: bool = False,
                rng: np.random.Generator | None = None,
                trace: list | None = None) -> Tensor:
        spec = self.spec
        if not isinstance(x, Tensor):
            x = Tensor(x)
        bsz, c, h, w = x.shape
        if c != spec.in_channels:
            raise ValueError(f"expected {spec.in_channels} input channels, got {c}")
        if h % 16 or w % 16:
            raise ValueError(f"input {h}x{w} must be divisible by 16")

        def note(label):
            if trace is not None:
                trace.append(label)

        skips = []
        hcur = x
        for i in range(1, len(spec.encoder_channels) + 1):
            hcur = self._double_conv(hcur, f"enc{i}", training)
            skips.append(hcur)
            hcur = T.maxpool2x2(hcur)
            note(f"encoder{i}")
        hcur = self._double_conv(hcur, "bottleneck", training)
        note("bottleneck")

        if spec.variant != "unet":
            p = self.params
            if spec.bottleneck_channels != spec.attn_width:
                hcur = T.conv2d(hcur, p["attn_in.weight"], p["attn_in.bias"])
            edge_projected = None
            pos = None
            if spec.variant == "edgeattnet":
                prior = self.edge_prior(x)
                edge_projected = prior.projected
                note("edge_prior")
            if spec.variant == "mhsa_pe":
                pos = p["pos_embed"]
                if pos.shape[0] != (h // 16) * (w // 16):
                    raise ValueError(
                        f"positional table has {pos.shape[0]} tokens but input "
                        f"{h}x{w} produces {(h // 16) * (w // 16)}")
            for k in range(1, spec.n_attention_blocks + 1):
                hcur = self.eg_mhsa(hcur, k, edge_projected, pos, training, rng)
                note(f"attention{k}")
            if spec.bottleneck_channels != spec.attn_width:
                hcur = T.conv2d(hcur, p["attn_out.weight"], p["attn_out.bias"])

        for i in range(1, len(spec.encoder_channels) + 1):
            pu = self.params
            hcur = T.conv_transpose2d(hcur, pu[f"dec{i}.up.weight"], pu[f"dec{i}.up.bias"])
            skip = skips[-i]
            hcur = T.concat_channels([skip, hcur])
            hcur = self._double_conv(hcur, f"dec{i}", training)
            note(f"decoder{i}")

        logits = T.conv2d(hcur, self.params["head.weight"], self.params["head.bias"])
        note("head")
        return logits

    def predict_proba(self, x, batch_rng=None):
        """Eval-mode sigmoid probabilities, graph-free."""
        with T.no_grad():
            return T.sigmoid(self.forward(x, training=False)).data


# ---------------------------------------------------------------------------
# checkpoint format: one JSON header line, then little-endian float64 blob


def save_checkpoint(path, model: Model):
    params = model.params
    buffers = model.buffers
    entries, offset = [], 0
    for name, t in params.items():
        entries.append({"name": name, "shape": list(t.data.shape),
                        "offset": offset, "kind": "param"})
        offset += t.data.size * 8
    for name, arr in buffers.items():
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "kind": "buffer"})
        offset += arr.size * 8
    header = json.dumps({"dtype": "<f8", "entries": entries, "nbytes": offset})
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for _, t in params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        for _, arr in buffers.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, spec: ModelSpec) -> Model:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        blob = fh.read()
    if len(blob) != header["nbytes"]:
        raise ValueError(f"checkpoint payload is {len(blob)} bytes, expected {header['nbytes']}")
    params, buffers = {}, {}
    for ent in header["entries"]:
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n,
                            offset=ent["offset"]).reshape(ent["shape"]).copy()
        if ent["kind"] == "param":
            params[ent["name"]] = Tensor(arr, requires_grad=True)
        else:
            buffers[ent["name"]] = arr
    expected = {name for name, _ in param_layout(spec)}
    if set(params) != expected:
        missing = expected - set(params)
        extra = set(params) - expected
        raise ValueError(f"checkpoint/spec mismatch: missing={sorted(missing)[:3]} "
                         f"extra={sorted(extra)[:3]}")
    return Model(spec, params=params, buffers=buffers)


def save_model(dir_path, model: Model, name: str = "checkpoint"):
    import os
    os.makedirs(dir_path, exist_ok=True)
    ckpt = os.path.join(dir_path, f"{name}.bin")
    save_checkpoint(ckpt, model)
    with open(os.path.join(dir_path, "model_spec.json"), "w") as fh:
        fh.write(model.spec.to_json())
    return ckpt


def load_model(ckpt_path, spec_path=None) -> Model:
    import os
    if spec_path is None:
        spec_path = os.path.join(os.path.dirname(ckpt_path), "model_spec.json")
    with open(spec_path) as fh:
        spec = ModelSpec.from_json(fh.read())
    return load_checkpoint(ckpt_path, spec)
