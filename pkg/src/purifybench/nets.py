"""ConvNet potential and classifier architectures plus checkpoint files.

Architectures are described by a compact layer string, e.g.::

    energy|in:1x16x16|conv:32x3x3:s1:p0|lrelu:0.05|...|flatten|dense:1

The descriptor is stored in checkpoints and must match on load.  Named
presets cover the desk-scale networks used throughout the toolkit.
"""

from __future__ import annotations

import struct

import numpy as np

from . import tensor as T
from .rng import Rng

LEAKY_SLOPE = 0.05

PRESETS = {
    # scalar-output ConvNet potentials on 1x16x16 images
    "energy-desk16": (
        "energy|in:1x16x16"
        "|conv:32x3x3:s1:p0|lrelu:0.05"
        "|conv:64x4x4:s2:p0|lrelu:0.05"
        "|conv:64x4x4:s2:p0|lrelu:0.05"
        "|flatten|dense:1"
    ),
    # reduced-width potential for long experiment sweeps on small CPUs
    "energy-light16": (
        "energy|in:1x16x16"
        "|conv:8x3x3:s1:p0|lrelu:0.05"
        "|conv:16x4x4:s2:p0|lrelu:0.05"
        "|conv:32x4x4:s2:p0|lrelu:0.05"
        "|flatten|dense:1"
    ),
    # aggressively downsampled potential for very long Langevin budgets
    "energy-mini16": (
        "energy|in:1x16x16"
        "|conv:8x3x3:s2:p0|lrelu:0.05"
        "|conv:16x3x3:s2:p0|lrelu:0.05"
        "|conv:32x3x3:s1:p0|lrelu:0.05"
        "|flatten|dense:1"
    ),
    # full-field (16x16 kernel) potential: 512 learned global linear filters
    # feeding a small smooth MLP.  Wells can form directly along spatially
    # distributed image coordinates, and the softplus head gives the
    # potential genuine curvature (the Benettin diagnostics need a twice-
    # differentiable U; leaky-relu potentials are flat almost everywhere).
    # Width matters: one softplus filter walls off a half-space, so pinning
    # all 256 pixel dimensions from both sides needs >= 512 filters; with
    # fewer, adversarial perturbations have directions the potential cannot
    # restore and purification leaves them intact.
    "energy-global16": (
        "energy|in:1x16x16"
        "|conv:512x16x16:s1:p0|softplus"
        "|flatten|dense:64|softplus|dense:1"
    ),
    # two conv + two dense natural classifier, 4 classes
    "clf-desk16": (
        "classifier|in:1x16x16"
        "|conv:16x3x3:s2:p1|lrelu:0.05"
        "|conv:32x3x3:s2:p1|lrelu:0.05"
        "|flatten|dense:64|lrelu:0.05|dense:4"
    ),
}

MAGIC = b"EBMCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


def resolve_descriptor(name_or_descriptor: str) -> str:
    return PRESETS.get(name_or_descriptor, name_or_descriptor)


def _parse_descriptor(descriptor: str):
    parts = descriptor.split("|")
    kind = parts[0]
    if kind not in ("energy", "classifier"):
        raise ValueError(f"unknown network kind {kind!r}")
    if not parts[1].startswith("in:"):
        raise ValueError("descriptor must declare input shape after the kind")
    in_shape = tuple(int(d) for d in parts[1][3:].split("x"))
    layers = []
    for spec in parts[2:]:
        fields = spec.split(":")
        tag = fields[0]
        if tag == "conv":
            o, kh, kw = (int(v) for v in fields[1].split("x"))
            stride = pad = None
            for f in fields[2:]:
                if f.startswith("s"):
                    stride = int(f[1:])
                elif f.startswith("p"):
                    pad = int(f[1:])
            layers.append(("conv", o, kh, kw, stride or 1, pad or 0))
        elif tag == "lrelu":
            layers.append(("lrelu", float(fields[1])))
        elif tag == "softplus":
            layers.append(("softplus",))
        elif tag == "flatten":
            layers.append(("flatten",))
        elif tag == "dense":
            layers.append(("dense", int(fields[1])))
        else:
            raise ValueError(f"unknown layer spec {spec!r}")
    return kind, in_shape, layers


class ConvNet:
    """Parameterized network built from a layer descriptor.

    Parameters live in ``self.params`` (name -> Tensor); pass an ``Rng`` to
    ``initialize`` for He-style fan-in-scaled uniform weights.
    """

    def __init__(self, descriptor: str, dtype=np.float64):
        self.descriptor = resolve_descriptor(descriptor)
        self.kind, self.in_shape, self.layers = _parse_descriptor(self.descriptor)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, T.Tensor] = {}
        self._build_param_shapes()

    def _build_param_shapes(self):
        self.param_shapes = {}
        c, h, w = self.in_shape
        flat = None
        li = 0
        for layer in self.layers:
            if layer[0] == "conv":
                _, o, kh, kw, s, p = layer
                self.param_shapes[f"conv{li}_w"] = (o, c, kh, kw)
                self.param_shapes[f"conv{li}_b"] = (o,)
                h = (h + 2 * p - kh) // s + 1
                w = (w + 2 * p - kw) // s + 1
                c = o
                li += 1
            elif layer[0] == "flatten":
                flat = c * h * w
            elif layer[0] == "dense":
                n_in = flat if flat is not None else c * h * w
                self.param_shapes[f"dense{li}_w"] = (n_in, layer[1])
                self.param_shapes[f"dense{li}_b"] = (layer[1],)
                flat = layer[1]
                li += 1
        self.out_dim = flat if flat is not None else c * h * w

    def initialize(self, rng: Rng):
        for name, shape in self.param_shapes.items():
            if name.endswith("_b"):
                data = np.zeros(shape, dtype=self.dtype)
            else:
                fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
                bound = np.sqrt(6.0 / fan_in)
                u = rng.spawn("init", name).uniform(shape)
                data = ((2.0 * u - 1.0) * bound).astype(self.dtype)
            self.params[name] = T.Tensor(data, requires_grad=False)
        return self

    def set_trainable(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def astype(self, dtype) -> "ConvNet":
        """Copy of the net with parameters cast to dtype."""
        other = type(self)(self.descriptor, dtype=dtype)
        for name, p in self.params.items():
            other.params[name] = T.Tensor(p.data.astype(dtype), requires_grad=False)
        return other

    def forward(self, x: T.Tensor, upto=None) -> T.Tensor:
        if x.data.ndim != 4 or x.data.shape[1:] != self.in_shape:
            raise T.ShapeError(
                f"expected input (B, {', '.join(map(str, self.in_shape))}), got {x.data.shape}")
        # activations run channels-last internally (cheaper convolutions)
        h = T.nchw_to_nhwc(x)
        li = 0
        for k, layer in enumerate(self.layers):
            if layer[0] == "conv":
                _, o, kh, kw, s, p = layer
                h = T.conv2d_nhwc(h, self.params[f"conv{li}_w"], stride=s, pad=p)
                h = T.add_last_bias(h, self.params[f"conv{li}_b"])
                li += 1
            elif layer[0] == "lrelu":
                h = T.leaky_relu(h, layer[1])
            elif layer[0] == "softplus":
                h = T.softplus(h)
            elif layer[0] == "flatten":
                h = T.reshape(h, (h.data.shape[0], h.data.size // h.data.shape[0]))
            elif layer[0] == "dense":
                if h.data.ndim != 2:
                    h = T.reshape(h, (h.data.shape[0], h.data.size // h.data.shape[0]))
                h = T.matmul(h, self.params[f"dense{li}_w"])
                h = T.add_row_bias(h, self.params[f"dense{li}_b"])
                li += 1
            if upto is not None and k == upto:
                return h
        return h


class EnergyNet(ConvNet):
    """Scalar potential U(x); lower energy = more probable image."""

    def __init__(self, descriptor="energy-desk16", dtype=np.float64):
        super().__init__(descriptor, dtype=dtype)
        if self.kind != "energy":
            raise ArchitectureMismatchError(
                f"descriptor kind {self.kind!r} is not an energy network")
        if self.out_dim != 1:
            raise ValueError("energy network must have scalar output")

    def energy(self, x: T.Tensor) -> T.Tensor:
        """Per-image scalar energies, shape (B,)."""
        out = self.forward(x)
        return T.reshape(out, (x.data.shape[0],))


class ClassifierNet(ConvNet):
    """Deterministic logits network f(x) with J classes."""

    def __init__(self, descriptor="clf-desk16", dtype=np.float64):
        super().__init__(descriptor, dtype=dtype)
        if self.kind != "classifier":
            raise ArchitectureMismatchError(
                f"descriptor kind {self.kind!r} is not a classifier network")
        self.num_classes = self.out_dim
        # penultimate features = activation feeding the final dense layer
        last_dense = max(i for i, l in enumerate(self.layers) if l[0] == "dense")
        self._feature_layer = last_dense - 1

    def logits(self, x: T.Tensor) -> T.Tensor:
        return self.forward(x)

    def features(self, x: T.Tensor) -> T.Tensor:
        """Penultimate-layer features, shape (B, F)."""
        h = self.forward(x, upto=self._feature_layer)
        if h.data.ndim != 2:
            h = T.reshape(h, (h.data.shape[0], h.data.size // h.data.shape[0]))
        return h


def make_net(descriptor: str, dtype=np.float64) -> ConvNet:
    kind = resolve_descriptor(descriptor).split("|", 1)[0]
    cls = EnergyNet if kind == "energy" else ClassifierNet
    return cls(descriptor, dtype=dtype)


def save_checkpoint(net: ConvNet, path, step: int = 0, phase: int = 0):
    """Write the little-endian checkpoint file; parameters stored as f64."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    desc = net.descriptor.encode("utf-8")
    blob += struct.pack("<H", len(desc)) + desc
    blob += struct.pack("<I", len(net.params))
    for name, p in net.params.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(p.data, dtype=np.float64)
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f8").tobytes()
    blob += struct.pack("<Q", step)
    blob += struct.pack("<B", phase)
    with open(path, "wb") as f:
        f.write(bytes(blob))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"checkpoint truncated at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expect_kind=None, dtype=np.float64):
    """Load a checkpoint into a fresh net.

    Returns (net, step, phase).  Raises a distinct error for bad magic,
    version mismatch, truncation, and architecture-kind mismatch.
    """
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(8) != MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    (dlen,) = r.unpack("<H")
    descriptor = r.take(dlen).decode("utf-8")
    kind = descriptor.split("|", 1)[0]
    if expect_kind is not None and kind != expect_kind:
        raise ArchitectureMismatchError(
            f"{path}: checkpoint holds a {kind!r} network, expected {expect_kind!r}")
    net = make_net(descriptor, dtype=dtype)
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        vals = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims)
        tensors[name] = vals
    (step,) = r.unpack("<Q")
    (phase,) = r.unpack("<B")
    if set(tensors) != set(net.param_shapes):
        raise ArchitectureMismatchError(
            f"{path}: parameter names do not match descriptor {descriptor!r}")
    for name, vals in tensors.items():
        if vals.shape != net.param_shapes[name]:
            raise ArchitectureMismatchError(
                f"{path}: tensor {name} shape {vals.shape} != {net.param_shapes[name]}")
        net.params[name] = T.Tensor(vals.astype(dtype), requires_grad=False)
    return net, step, phase
