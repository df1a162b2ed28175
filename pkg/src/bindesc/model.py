"""Descriptor network: architecture, forward/backward, op counts, file I/O.

Four variants share a six-layer 3x3 stem.  ``hynet_ref`` closes with a single
8x8 conv; the ``didymos*`` family replaces it with Conv(2,2), Conv(2,2),
Conv(2,1).  The binary variants end in a sign head that emits 256 bits.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from bindesc import binquant as bq
from bindesc import tensor as T

VARIANTS = ("hynet_ref", "didymos", "didymos_pm", "didymos_pm_prime")

STEM = [  # (kernel, stride, out_ch)
    (3, 1, 32), (3, 1, 32), (3, 2, 64), (3, 1, 64), (3, 2, 128), (3, 1, 128),
]

# elementwise flops per output element of each non-conv layer
ELEMENTWISE_COST = {"frn_tlu": 5, "batchnorm": 2, "l2_norm": 3, "sign_head": 1}


@dataclass
class LayerSpec:
    kind: str
    kernel: int = 0
    stride: int = 1
    in_ch: int = 0
    out_ch: int = 0
    precision: str = "full"
    padding: int = 0


@dataclass
class ModelSpec:
    variant: str
    layers: list
    descriptor_dim: int
    scaling_variant: str = "none"
    input_size: int = 32

    @property
    def binary_descriptor(self):
        return self.layers[-1].kind == "sign_head"

    def to_dict(self):
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["layers"] = [LayerSpec(**l) for l in d["layers"]]
        return cls(**d)


def build(variant, scaling_variant="none"):
    """Layer plan for one of :data:`VARIANTS`."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if scaling_variant not in bq.SCALING_VARIANTS:
        raise ValueError(f"unknown scaling variant {scaling_variant!r}")
    binary_desc = variant in ("didymos_pm", "didymos_pm_prime")
    dim = 256 if binary_desc else 128

    convs = []
    c = 1
    for k, s, out in STEM:
        convs.append(LayerSpec("conv", k, s, c, out, padding=1))
        c = out
    if variant == "hynet_ref":
        convs.append(LayerSpec("conv", 8, 1, c, dim))
    else:
        convs += [LayerSpec("conv", 2, 2, c, 128), LayerSpec("conv", 2, 2, 128, 128),
                  LayerSpec("conv", 2, 1, 128, dim)]

    last = len(convs) - 1
    for i, conv in enumerate(convs):
        if variant == "hynet_ref" or i == 0:
            continue
        if variant in ("didymos", "didymos_pm") and i == last:
            continue
        conv.kind = "binary_conv"
        conv.precision = "binary"

    layers = []
    for i, conv in enumerate(convs):
        layers.append(conv)
        if i != last:
            layers.append(LayerSpec("frn_tlu", in_ch=conv.out_ch, out_ch=conv.out_ch))
    layers.append(LayerSpec("batchnorm", in_ch=dim, out_ch=dim))
    layers.append(LayerSpec("sign_head" if binary_desc else "l2_norm", in_ch=dim, out_ch=dim,
                            precision="binary" if binary_desc else "full"))
    return ModelSpec(variant, layers, dim, scaling_variant)


# ---------------------------------------------------------------------------
# Operation counting
# ---------------------------------------------------------------------------

@dataclass
class OpCount:
    flops: int
    bops: int
    elementwise: int
    mac_flops: int
    per_layer: list = field(default_factory=list)

    @property
    def mflops_equiv(self):
        return (self.flops + self.bops / 64) / 1e6

    @property
    def mflops_equiv_mac2(self):
        """Same total with one multiply-accumulate counted as two flops."""
        return (self.flops + self.mac_flops + 2 * self.bops / 64) / 1e6

    def to_dict(self):
        return {"flops": self.flops, "bops": self.bops, "elementwise": self.elementwise,
                "mflops_equiv": self.mflops_equiv, "mflops_equiv_mac2": self.mflops_equiv_mac2,
                "per_layer": self.per_layer}


def spatial_plan(spec):
    """Output (height, width) after every layer for the spec's input size."""
    h = w = spec.input_size
    plan = []
    for l in spec.layers:
        if l.kind in ("conv", "binary_conv"):
            h = T.conv_output_size(h, l.kernel, l.stride, l.padding)
            w = T.conv_output_size(w, l.kernel, l.stride, l.padding)
            if h < 1 or w < 1:
                raise T.GeometryError(f"layer {l} collapses the spatial extent")
        plan.append((h, w))
    return plan


def count_ops(spec):
    """Per-descriptor op count; one multiply-accumulate is one flop."""
    flops = bops = elementwise = mac_flops = 0
    rows = []
    for l, (h, w) in zip(spec.layers, spatial_plan(spec)):
        out_elems = h * w * l.out_ch
        if l.kind in ("conv", "binary_conv"):
            macs = out_elems * l.kernel * l.kernel * l.in_ch
            if l.precision == "binary":
                bops += macs
                n = {"none": 0, "per_channel": 1, "spatial_channel": 3}[spec.scaling_variant]
                elementwise += n * out_elems
                rows.append({"kind": l.kind, "bops": macs, "flops": n * out_elems})
            else:
                mac_flops += macs
                rows.append({"kind": l.kind, "bops": 0, "flops": macs})
        else:
            n = ELEMENTWISE_COST[l.kind] * out_elems
            elementwise += n
            rows.append({"kind": l.kind, "bops": 0, "flops": n})
    flops = mac_flops + elementwise
    return OpCount(flops, bops, elementwise, mac_flops, rows)


# ---------------------------------------------------------------------------
# Training graph
# ---------------------------------------------------------------------------

class _Conv:
    def __init__(self, spec, name, rng):
        self.spec = spec
        fan_in = spec.in_ch * spec.kernel * spec.kernel
        w = rng.standard_normal((spec.out_ch, spec.in_ch, spec.kernel, spec.kernel))
        self.w = T.Param(f"{name}.w", (w * math.sqrt(2.0 / fan_in)).astype(T.default_dtype()))
        self.x = None

    def params(self):
        return [self.w]

    def forward(self, x, train, net):
        self.x = x
        return T.conv2d_forward(x, self.w.value, self.spec.stride, self.spec.padding)

    def backward(self, g, net):
        if self.x is None:
            raise RuntimeError("backward called without a saved forward pass")
        gx, gw = T.conv2d_backward(g, self.x, self.w.value, self.spec.stride, self.spec.padding,
                                   need_input=self.spec.in_ch > 1 or net.need_input_grad)
        self.w.grad += gw
        self.x = None
        return gx


class _BinaryConv(_Conv):
    """Standardize -> sign both operands -> conv (pad +1) -> optional scaling."""

    def __init__(self, spec, name, rng, scaling, out_hw):
        super().__init__(spec, name, rng)
        self.scaling = scaling
        dt = T.default_dtype()
        self.lam = self.alpha = self.beta = None
        if scaling in ("per_channel", "spatial_channel"):
            self.lam = T.Param(f"{name}.lam", np.ones(spec.out_ch, dt))
        if scaling == "spatial_channel":
            self.alpha = T.Param(f"{name}.alpha", np.ones(out_hw[0], dt))
            self.beta = T.Param(f"{name}.beta", np.ones(out_hw[1], dt))

    def params(self):
        return [p for p in (self.w, self.lam, self.alpha, self.beta) if p is not None]

    def _quantize(self, v, net):
        if net.relaxed:
            return bq.surrogate(v, net.t, net.k).astype(v.dtype, copy=False)
        return bq.sign_forward(v)

    def quantized_weights(self):
        w_hat, _ = bq.weight_standardize(self.w.value)
        return bq.sign_forward(w_hat)

    def forward(self, x, train, net):
        w_hat, wcache = bq.weight_standardize(self.w.value)
        wb = self._quantize(w_hat, net)
        xb = self._quantize(x, net)
        z = T.conv2d_forward(xb, wb, self.spec.stride, self.spec.padding, pad_value=1.0)
        self.cache = (x, w_hat, wcache, wb, xb, z)
        return self._scale(z)

    def _scale(self, z):
        if self.scaling == "none":
            return z
        return bq.apply_scaling(z, self.scaling, self.lam.value,
                                None if self.alpha is None else self.alpha.value,
                                None if self.beta is None else self.beta.value)

    def backward(self, g, net):
        x, w_hat, wcache, wb, xb, z = self.cache
        if self.scaling != "none":
            lam = self.lam.value[None, :, None, None]
            s = lam
            if self.scaling == "spatial_channel":
                a = self.alpha.value[None, None, :, None]
                b = self.beta.value[None, None, None, :]
                s = lam * a * b
                gz_ab = g * z * lam
                self.alpha.grad += np.sum(gz_ab * b, axis=(0, 1, 3))
                self.beta.grad += np.sum(gz_ab * a, axis=(0, 1, 2))
                self.lam.grad += np.sum(g * z * a * b, axis=(0, 2, 3))
            else:
                self.lam.grad += np.sum(g * z, axis=(0, 2, 3))
            g = g * s
        gxb, gwb = T.conv2d_backward(g, xb, wb, self.spec.stride, self.spec.padding, pad_value=1.0)
        g_what = bq.surrogate_backward(gwb, w_hat, net.t, net.k)
        self.w.grad += bq.weight_standardize_backward(g_what, wcache).astype(self.w.grad.dtype)
        self.cache = None
        return bq.surrogate_backward(gxb, x, net.t, net.k).astype(x.dtype, copy=False)


class _FrnTlu:
    def __init__(self, spec, name, tau0):
        p = T.FrnParams.init(spec.out_ch, tau=tau0)
        self.gamma = T.Param(f"{name}.gamma", p.gamma)
        self.beta = T.Param(f"{name}.beta", p.beta)
        self.tau = T.Param(f"{name}.tau", p.tau)

    def params(self):
        return [self.gamma, self.beta, self.tau]

    def frn(self):
        return T.FrnParams(self.gamma.value, self.beta.value, self.tau.value)

    def forward(self, x, train, net):
        out, self.cache = T.frn_tlu_forward(x, self.frn())
        return out

    def backward(self, g, net):
        gx, gg, gb, gt = T.frn_tlu_backward(g, self.cache, self.frn())
        self.gamma.grad += gg
        self.beta.grad += gb
        self.tau.grad += gt
        self.cache = None
        return gx


class Network:
    """Trainable graph for a :class:`ModelSpec`.

    ``relaxed=True`` swaps sign for k*tanh(t*x) in the forward pass so the
    whole graph is differentiable; it exists for gradient checking.
    """

    def __init__(self, spec: ModelSpec, seed=0, relaxed=False):
        self.spec = spec
        self.relaxed = relaxed
        self.need_input_grad = False
        self.t, self.k = bq.schedule(0, 1)
        rng = np.random.default_rng(seed)
        plan = spatial_plan(spec)
        self.layers = []
        for i, l in enumerate(spec.layers):
            name = f"l{i}"
            if l.kind == "conv":
                self.layers.append(_Conv(l, name, rng))
            elif l.kind == "binary_conv":
                self.layers.append(_BinaryConv(l, name, rng, spec.scaling_variant, plan[i]))
            elif l.kind == "frn_tlu":
                nxt = next((m for m in spec.layers[i + 1:] if m.kind.endswith("conv")), None)
                # a non-negative threshold would pin every sign to +1
                tau0 = -1.0 if nxt is not None and nxt.kind == "binary_conv" else 0.0
                self.layers.append(_FrnTlu(l, name, tau0))
            elif l.kind == "batchnorm":
                self.layers.append(None)
                self.bn_stats = T.RunningStats.init(l.out_ch)
            elif l.kind in ("l2_norm", "sign_head"):
                self.layers.append(None)
            else:
                raise ValueError(f"unknown layer kind {l.kind!r}")
        self._trunk = [(l, s) for l, s in zip(self.layers, spec.layers) if l is not None]

    def params(self):
        out = []
        for l, _ in self._trunk:
            out += l.params()
        return out

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def set_schedule(self, t, k):
        self.t, self.k = t, k

    def forward(self, patches, train=True):
        """Return ``(descriptors, pre)``.

        ``pre`` is the batch-normalized vector before L2 normalization or
        sign.  Descriptors are unit-norm floats, or ±1 for binary heads.
        """
        x = np.asarray(patches, dtype=self.params()[0].value.dtype)
        if x.ndim != 4 or x.shape[1:] != (1, self.spec.input_size, self.spec.input_size):
            raise T.DimensionError(f"expected (N,1,{self.spec.input_size},{self.spec.input_size}) "
                                   f"patches, got {x.shape}")
        for layer, _ in self._trunk:
            x = layer.forward(x, train, self)
        T._check_finite("trunk", x)
        x = x.reshape(x.shape[0], -1)
        pre, self._bn_cache = T.batchnorm_final(x, self.bn_stats, train)
        if self.spec.binary_descriptor:
            self._pre = pre
            if self.relaxed:
                return bq.surrogate(pre, self.t, self.k), pre
            return bq.sign_forward(pre), pre
        desc, self._l2_cache = T.l2_normalize(pre)
        return desc, pre

    def backward(self, grad_desc, grad_pre=None):
        """Accumulate parameter gradients; returns the gradient wrt patches."""
        if not hasattr(self, "_bn_cache") or self._bn_cache is None:
            raise RuntimeError("backward called without a saved forward pass")
        if self.spec.binary_descriptor:
            g = bq.surrogate_backward(grad_desc, self._pre, self.t, self.k)
        else:
            g = T.l2_normalize_backward(grad_desc, self._l2_cache)
        if grad_pre is not None:
            g = g + grad_pre
        g = T.batchnorm_final_backward(g, self._bn_cache)
        self._bn_cache = None
        last = self._trunk[-1][0]
        g = g.reshape(g.shape[0], -1, 1, 1).astype(last.w.value.dtype, copy=False)
        for layer, _ in reversed(self._trunk):
            g = layer.backward(g, self)
        return g

    def describe(self, patches, chunk=256):
        """Inference descriptors: float (N,D), or a packed BitTensor (N,D)."""
        patches = np.asarray(patches)
        outs = []
        for s in range(0, len(patches), chunk):
            d, _ = self.forward(patches[s:s + chunk], train=False)
            outs.append(d)
        desc = np.concatenate(outs) if outs else np.zeros((0, self.spec.descriptor_dim), np.float32)
        if self.spec.binary_descriptor:
            return bq.pack_signs(desc)
        return desc

    # -- state ------------------------------------------------------------

    def state(self):
        """Ordered mapping of every tensor that defines the model."""
        out = {}
        for p in self.params():
            out[p.name] = p.value
        out["bn.mean"] = self.bn_stats.mean
        out["bn.var"] = self.bn_stats.var
        return out

    def load_state(self, tensors):
        for p in self.params():
            p.value[...] = tensors[p.name]
        self.bn_stats.mean[...] = tensors["bn.mean"]
        self.bn_stats.var[...] = tensors["bn.var"]


# ---------------------------------------------------------------------------
# Container format
# ---------------------------------------------------------------------------

MAGIC = b"BDSC"
FORMAT_VERSION = (1, 0)
PAYLOAD_CHECKPOINT = 0
PAYLOAD_PACKED = 1
_PREFIX = struct.Struct("<4sHHBxxxQ")


class CheckpointError(ValueError):
    pass


def _checksum(data):
    return hashlib.blake2b(data, digest_size=8).digest()


def write_container(path, payload_type, header, tensors):
    """Write ``tensors`` (name -> array) with a JSON header and checksum."""
    table = []
    body = io.BytesIO()
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                      "offset": body.tell(), "nbytes": a.nbytes})
        body.write(a.tobytes())
    head = json.dumps({**header, "tensors": table}, sort_keys=True).encode()
    blob = _PREFIX.pack(MAGIC, *FORMAT_VERSION, payload_type, len(head)) + head + body.getvalue()
    blob += _checksum(blob)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def read_container(path, payload_type=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PREFIX.size + 8:
        raise CheckpointError("file truncated")
    magic, major, minor, ptype, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("bad magic")
    if major != FORMAT_VERSION[0]:
        raise CheckpointError(f"unsupported format version {major}.{minor}")
    if _checksum(blob[:-8]) != blob[-8:]:
        raise CheckpointError("checksum mismatch")
    if payload_type is not None and ptype != payload_type:
        raise CheckpointError(f"payload type {ptype}, expected {payload_type}")
    start = _PREFIX.size
    header = json.loads(blob[start:start + hlen])
    data = memoryview(blob)[start + hlen:-8]
    tensors = {}
    for e in header.pop("tensors"):
        if e["offset"] + e["nbytes"] > len(data):
            raise CheckpointError(f"tensor {e['name']} runs past the payload")
        raw = data[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return ptype, header, tensors


@dataclass
class Checkpoint:
    spec: ModelSpec
    tensors: dict
    optimizer: dict = field(default_factory=dict)  # name -> (m, v); plus "step"
    epoch: int = 0
    schedule: tuple = (0.1, 10.0)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net, optimizer_step=0, epoch=0, meta=None):
        opt = {"step": optimizer_step}
        for p in net.params():
            opt[p.name] = (p.m, p.v)
        return cls(net.spec, dict(net.state()), opt, epoch, (net.t, net.k), meta or {})

    def to_network(self, relaxed=False):
        net = Network(self.spec, relaxed=relaxed)
        net.load_state(self.tensors)
        for p in net.params():
            if p.name in self.optimizer:
                p.m[...], p.v[...] = self.optimizer[p.name]
        net.set_schedule(*self.schedule)
        return net


def save(ckpt: Checkpoint, path):
    tensors = dict(ckpt.tensors)
    for name, val in ckpt.optimizer.items():
        if name != "step":
            tensors[f"adam.m/{name}"], tensors[f"adam.v/{name}"] = val
    header = {"spec": ckpt.spec.to_dict(), "epoch": ckpt.epoch,
              "schedule": list(ckpt.schedule), "adam_step": ckpt.optimizer.get("step", 0),
              "meta": ckpt.meta}
    return write_container(path, PAYLOAD_CHECKPOINT, header, tensors)


def load(path):
    _, header, tensors = read_container(path, PAYLOAD_CHECKPOINT)
    opt = {"step": header["adam_step"]}
    model = {}
    for name, arr in tensors.items():
        if name.startswith("adam.m/"):
            key = name[len("adam.m/"):]
            opt[key] = (arr, tensors[f"adam.v/{key}"])
        elif not name.startswith("adam.v/"):
            model[name] = arr
    return Checkpoint(ModelSpec.from_dict(header["spec"]), model, opt, header["epoch"],
                      tuple(header["schedule"]), header["meta"])


# ---------------------------------------------------------------------------
# Packed deployment model
# ---------------------------------------------------------------------------

class PackedModel:
    """Inference-only model with pre-packed binary weights and frozen stats."""

    def __init__(self, spec, tensors, bits):
        self.spec = spec
        self.tensors = tensors
        self.bits = bits  # layer index -> BitTensor

    @classmethod
    def from_network(cls, net: Network):
        tensors = {}
        bits = {}
        for i, (layer, l) in enumerate(zip(net.layers, net.spec.layers)):
            if l.kind == "binary_conv":
                bits[i] = bq.pack_weights(layer.quantized_weights())
                for p in layer.params()[1:]:
                    tensors[p.name] = p.value.copy()
            elif layer is not None:
                for p in layer.params():
                    tensors[p.name] = p.value.copy()
        tensors["bn.mean"] = net.bn_stats.mean.copy()
        tensors["bn.var"] = net.bn_stats.var.copy()
        return cls(net.spec, tensors, bits)

    def _forward(self, x):
        dt = self.tensors["bn.mean"].dtype
        x = np.asarray(x, dtype=dt)
        for i, l in enumerate(self.spec.layers):
            name = f"l{i}"
            if l.kind == "conv":
                x = T.conv2d_forward(x, self.tensors[f"{name}.w"], l.stride, l.padding)
            elif l.kind == "binary_conv":
                z = bq.binary_conv2d(bq.pack_activations(bq.sign_forward(x)), self.bits[i],
                                     l.stride, l.padding).astype(dt)
                if self.spec.scaling_variant != "none":
                    z = bq.apply_scaling(z, self.spec.scaling_variant, self.tensors[f"{name}.lam"],
                                         self.tensors.get(f"{name}.alpha"),
                                         self.tensors.get(f"{name}.beta"))
                x = z
            elif l.kind == "frn_tlu":
                p = T.FrnParams(self.tensors[f"{name}.gamma"], self.tensors[f"{name}.beta"],
                                self.tensors[f"{name}.tau"])
                x, _ = T.frn_tlu_forward(x, p)
            elif l.kind == "batchnorm":
                stats = T.RunningStats(self.tensors["bn.mean"], self.tensors["bn.var"])
                x, _ = T.batchnorm_final(x.reshape(x.shape[0], -1), stats, train=False)
            elif l.kind == "l2_norm":
                x, _ = T.l2_normalize(x)
            elif l.kind == "sign_head":
                x = bq.sign_forward(x)
        return x

    def describe(self, patches, chunk=256):
        patches = np.asarray(patches)
        outs = [self._forward(patches[s:s + chunk]) for s in range(0, len(patches), chunk)]
        desc = np.concatenate(outs) if outs else np.zeros((0, self.spec.descriptor_dim), np.float32)
        if self.spec.binary_descriptor:
            return bq.pack_signs(desc)
        return desc


def export_packed(net: Network, path=None, meta=None):
    """Freeze a network into a :class:`PackedModel`, optionally writing a blob."""
    pm = PackedModel.from_network(net)
    if path is not None:
        tensors = dict(pm.tensors)
        layers = {}
        for i, bt in pm.bits.items():
            tensors[f"bits/l{i}"] = bt.words
            layers[str(i)] = {"shape": list(bt.shape), "pad_bits": bt.pad_bits}
        header = {"spec": pm.spec.to_dict(), "bits": layers, "meta": meta or {}}
        write_container(path, PAYLOAD_PACKED, header, tensors)
    return pm


def load_packed(path):
    _, header, tensors = read_container(path, PAYLOAD_PACKED)
    bits = {}
    for key, info in header["bits"].items():
        words = tensors.pop(f"bits/l{key}").astype(np.uint64)
        bits[int(key)] = bq.BitTensor(words, tuple(info["shape"]), info["pad_bits"])
    return PackedModel(ModelSpec.from_dict(header["spec"]), tensors, bits)


def load_model(path):
    """Inference model from either container kind: a Network for checkpoints
    (inference mode only), a PackedModel for exports."""
    ptype, _, _ = read_container(path)
    if ptype == PAYLOAD_CHECKPOINT:
        return load(path).to_network()
    if ptype == PAYLOAD_PACKED:
        return load_packed(path)
    raise CheckpointError(f"unknown payload type {ptype}")
