"""Plain convolutional restoration networks with tape-recording forward passes.

A network is an alternating conv/relu stack that starts and ends with a conv.
Hidden activations (post-relu) are the regularization points recorded on the
tape; the final conv output optionally gets a residual add of the leading
input channels. Also provides a one-layer lifting convolution whose output is
exactly equivariant for quarter-turn groups, used as an oracle elsewhere.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .group import RotationGroup
from .tensor import (
    ConvParams,
    EqtFormatError,
    as_tensor4,
    conv2d_backward,
    conv2d_forward,
    read_tensor,
    relu_backward,
    relu_forward,
    write_tensor,
)

CHECKPOINT_VERSION = "eqnet1"


@dataclass
class LayerSpec:
    kind: str  # "conv" | "relu"
    params: ConvParams | None = None

    def __post_init__(self):
        if self.kind not in ("conv", "relu"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if (self.kind == "conv") != (self.params is not None):
            raise ValueError(f"layer kind {self.kind!r} inconsistent with params presence")


@dataclass
class Network:
    """Conv/relu stack; weights are replaced between steps, never in place."""

    layers: list[LayerSpec]
    group: RotationGroup
    n_hidden: int
    residual: bool = True

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for i, spec in enumerate(self.layers):
            want = "conv" if i % 2 == 0 else "relu"
            if spec.kind != want:
                raise ValueError(f"layer {i} must be {want!r} in an alternating stack, got {spec.kind!r}")
        if self.layers[-1].kind != "conv":
            raise ValueError("network must end with a conv layer")
        convs = self.conv_params
        for a, b in zip(convs, convs[1:]):
            if b.in_channels != a.out_channels:
                raise ValueError(
                    f"channel mismatch between consecutive convs: {a.out_channels} -> {b.in_channels}"
                )
        width = self.n_hidden * self.group.order
        for p in convs[:-1]:
            if p.out_channels != width:
                raise ValueError(
                    f"hidden conv width {p.out_channels} != n_hidden * order = {width}"
                )
        if self.residual and self.in_channels < self.out_channels:
            raise ValueError(
                f"residual add needs in_channels >= out_channels, got {self.in_channels} < {self.out_channels}"
            )

    @property
    def conv_params(self):
        return [s.params for s in self.layers if s.kind == "conv"]

    @property
    def in_channels(self):
        return self.layers[0].params.in_channels

    @property
    def out_channels(self):
        return self.layers[-1].params.out_channels

    @property
    def n_hidden_layers(self):
        return len(self.conv_params) - 1

    def set_conv_params(self, new_params):
        """Swap in one ConvParams per conv layer, preserving structure."""
        new_params = list(new_params)
        convs = [s for s in self.layers if s.kind == "conv"]
        if len(new_params) != len(convs):
            raise ValueError(f"expected {len(convs)} param sets, got {len(new_params)}")
        for spec, p in zip(convs, new_params):
            if p.weight.shape != spec.params.weight.shape:
                raise ValueError(
                    f"weight shape changed: {spec.params.weight.shape} -> {p.weight.shape}"
                )
            spec.params = p


@dataclass
class Tape:
    """Activations recorded by forward_with_tape, in layer order.

    hidden holds the post-relu regularization points; conv_inputs and
    pre_activations carry what the backward sweep needs.
    """

    conv_inputs: list
    pre_activations: list
    hidden: list
    output: np.ndarray

    def __len__(self):
        return len(self.hidden)


def forward_with_tape(net, x):
    """Run the network and record every regularization point.

    Returns (output, Tape). Accepts a LiftingConvOracle as the network, in
    which case the single lifted feature map is both output and tape entry.
    """
    if isinstance(net, LiftingConvOracle):
        out = lifting_forward(net, x)
        return out, Tape(conv_inputs=[x], pre_activations=[], hidden=[out], output=out)
    x = as_tensor4(x)
    if x.shape[1] != net.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, network expects {net.in_channels}")
    conv_inputs, pre_acts, hidden = [], [], []
    convs = net.conv_params
    h = x
    for i, p in enumerate(convs):
        conv_inputs.append(h)
        z = conv2d_forward(h, p)
        if i < len(convs) - 1:
            pre_acts.append(z)
            h = relu_forward(z)
            hidden.append(h)
        else:
            h = z
    out = h + x[:, : net.out_channels] if net.residual else h
    return out, Tape(conv_inputs, pre_acts, hidden, out)


def backprop(net, tape, grad_output=None, hidden_grads=None):
    """Reverse sweep given gradients at the output and/or regularization points.

    hidden_grads[i] adds to the gradient at tape.hidden[i]. Either source may
    be None; a conv whose incoming gradient is entirely absent gets zeros.
    Returns [(grad_w, grad_b), ...] per conv layer.
    """
    convs = net.conv_params
    if hidden_grads is not None and len(hidden_grads) != len(tape.hidden):
        raise ValueError(f"expected {len(tape.hidden)} hidden grads, got {len(hidden_grads)}")
    grads = [None] * len(convs)
    g = grad_output  # residual add passes output gradient through unchanged
    for i in range(len(convs) - 1, -1, -1):
        if i < len(convs) - 1:
            inject = hidden_grads[i] if hidden_grads is not None else None
            if inject is not None:
                g = inject if g is None else g + inject
            if g is not None:
                g = relu_backward(tape.pre_activations[i], g)
        if g is None:
            p = convs[i]
            grads[i] = (np.zeros_like(p.weight), np.zeros_like(p.bias))
            continue
        gx, gw, gb = conv2d_backward(tape.conv_inputs[i], convs[i], g)
        grads[i] = (gw, gb)
        g = gx
    return grads


def build_network(in_channels, out_channels, group, n_hidden=8, depth=3, kernel_size=3,
                  residual=True, dtype=np.float32):
    """Zero-initialized stack of `depth` convs with relus in between."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    width = n_hidden * group.order
    sizes = [in_channels] + [width] * (depth - 1) + [out_channels]
    layers = []
    for i in range(depth):
        if i > 0:
            layers.append(LayerSpec("relu"))
        w = np.zeros((sizes[i + 1], sizes[i], kernel_size, kernel_size), dtype=dtype)
        b = np.zeros(sizes[i + 1], dtype=dtype)
        layers.append(LayerSpec("conv", ConvParams(w, b)))
    return Network(layers, group, n_hidden, residual)


def init_weights(net, seed, dtype=None):
    """Fresh uniform(-a, a) weights with a = sqrt(1 / (C_in * p^2)); zero bias.

    Draw order is fixed (layer order, row-major), so a seed pins every bit.
    """
    rng = np.random.default_rng(seed)
    new_params = []
    for p in net.conv_params:
        dt = dtype or p.weight.dtype
        a = math.sqrt(1.0 / (p.in_channels * p.kernel_size**2))
        w = rng.uniform(-a, a, size=p.weight.shape).astype(dt)
        new_params.append(ConvParams(w, np.zeros(p.out_channels, dtype=dt)))
    out = network_copy(net)
    out.set_conv_params(new_params)
    return out


def network_copy(net):
    specs = [
        LayerSpec(s.kind, None if s.params is None else ConvParams(s.params.weight.copy(), s.params.bias.copy()))
        for s in net.layers
    ]
    return Network(specs, net.group, net.n_hidden, net.residual)


def network_astype(net, dtype):
    out = network_copy(net)
    out.set_conv_params(
        [ConvParams(p.weight.astype(dtype), p.bias.astype(dtype)) for p in out.conv_params]
    )
    return out


# --- lifting convolution oracle -----------------------------------------------


@dataclass(frozen=True)
class LiftingConvOracle:
    """One conv whose output block g correlates with the base kernel rotated by g.

    For exact groups (order 2 or 4) the lifted feature satisfies the
    equivariance identity to machine precision, which makes it the reference
    point for every zero-loss check downstream.
    """

    weight: np.ndarray  # (n, C_in, p, p) base kernel
    group: RotationGroup

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 != 1:
            raise ValueError(f"base kernel must be (n, C_in, p, p) with odd square p, got {w.shape}")

    @property
    def out_channels(self):
        return self.weight.shape[0] * self.group.order

    @property
    def in_channels(self):
        return self.weight.shape[1]


def lifting_forward(oracle, x):
    """Lift an image to a group feature: block g = conv(x, rotate(W, g))."""
    x = as_tensor4(x)
    g = oracle.group
    n = oracle.weight.shape[0]
    zero_bias = np.zeros(n, dtype=oracle.weight.dtype)
    blocks = [
        conv2d_forward(x, ConvParams(g.rotate_image(oracle.weight, k), zero_bias))
        for k in range(g.order)
    ]
    return np.concatenate(blocks, axis=1)


# --- checkpoint format ----------------------------------------------------------
#
# u32 LE length-prefixed ASCII descriptor, then one EQT1 weight and one EQT1
# bias record per conv layer, in layer order.


def describe_architecture(net):
    parts = []
    for s in net.layers:
        if s.kind == "relu":
            parts.append("relu")
        else:
            p = s.params
            parts.append(f"conv:{p.in_channels}:{p.out_channels}:{p.kernel_size}")
    return (
        f"{CHECKPOINT_VERSION} order={net.group.order} n_hidden={net.n_hidden} "
        f"residual={int(net.residual)} layers={','.join(parts)}"
    )


def _parse_architecture(desc):
    fields = desc.split()
    if not fields or fields[0] != CHECKPOINT_VERSION:
        raise EqtFormatError(f"unsupported checkpoint descriptor {desc!r}")
    try:
        kv = dict(f.split("=", 1) for f in fields[1:])
        group = RotationGroup(int(kv["order"]))
        n_hidden = int(kv["n_hidden"])
        residual = bool(int(kv["residual"]))
        layers = []
        for token in kv["layers"].split(","):
            if token == "relu":
                layers.append(LayerSpec("relu"))
                continue
            tag, cin, cout, p = token.split(":")
            if tag != "conv":
                raise ValueError(f"unknown layer token {token!r}")
            w = np.zeros((int(cout), int(cin), int(p), int(p)), dtype=np.float32)
            layers.append(LayerSpec("conv", ConvParams(w, np.zeros(int(cout), dtype=np.float32))))
        return Network(layers, group, n_hidden, residual)
    except (KeyError, ValueError) as exc:
        raise EqtFormatError(f"malformed checkpoint descriptor {desc!r}: {exc}") from exc


def save_checkpoint(path, net):
    desc = describe_architecture(net).encode("ascii")
    with open(path, "wb") as fp:
        fp.write(struct.pack("<I", len(desc)))
        fp.write(desc)
        for p in net.conv_params:
            write_tensor(fp, p.weight)
            write_tensor(fp, p.bias)


def load_checkpoint(path, expect=None):
    """Rebuild a network from disk; refuses shape or architecture mismatches."""
    with open(path, "rb") as fp:
        raw_len = fp.read(4)
        if len(raw_len) < 4:
            raise EqtFormatError("truncated checkpoint: missing descriptor length")
        (n,) = struct.unpack("<I", raw_len)
        raw_desc = fp.read(n)
        if len(raw_desc) < n:
            raise EqtFormatError("truncated checkpoint: short descriptor")
        try:
            desc = raw_desc.decode("ascii")
        except UnicodeDecodeError as exc:
            raise EqtFormatError("checkpoint descriptor is not ASCII") from exc
        net = _parse_architecture(desc)
        new_params = []
        for p in net.conv_params:
            w = read_tensor(fp)
            b = read_tensor(fp)
            if w.shape != p.weight.shape or b.shape != p.bias.shape:
                raise EqtFormatError(
                    f"checkpoint tensor shapes {w.shape}/{b.shape} do not match descriptor {desc!r}"
                )
            new_params.append(ConvParams(w, b))
        net.set_conv_params(new_params)
    if expect is not None:
        got, want = describe_architecture(net), describe_architecture(expect)
        if got != want:
            raise EqtFormatError(f"checkpoint architecture {got!r} does not match expected {want!r}")
    return net
