"""The two layer-synthesis architectures and their on-disk checkpoints.

Stacked CNN: 19 identical [3x3 conv, 64 channels, ReLU] modules (the
first maps the view channels to 64) followed by a 3x3 output conv + ReLU.

U-Net: an input stage bringing channels to 64, pooling stages doubling
channels down to a bottleneck, symmetric 2x2 up-convolutions halving
channels with skip concatenation from the matching encoder stage, and a
final 1x1 conv + ReLU matching the layer count. Fully convolutional, so
inference resolution is independent of the training patch size.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .lightfield import ADDITIVE, LayerStack, LightField

STACKED = "stacked"
UNET = "unet"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    arch: str  # "stacked" | "unet"
    in_channels: int  # U*V, views flattened to channels
    out_channels: int  # display layer count
    base_channels: int = 64
    stacked_modules: int = 19
    unet_depth: int = 4  # pooling levels
    seed: int = 0

    def __post_init__(self):
        if self.arch not in (STACKED, UNET):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.base_channels < 1 or self.stacked_modules < 1 or self.unet_depth < 1:
            raise ValueError("invalid architecture size")

    def to_dict(self):
        return {"arch": self.arch, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "base_channels": self.base_channels,
                "stacked_modules": self.stacked_modules, "unet_depth": self.unet_depth,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _param_shapes(spec):
    """Ordered (name, shape, fan_in) for every trainable parameter.

    fan_in is None for biases (zero-initialized). Up-convolution kernels
    are stored (c_in, c_out, 2, 2), so their fan_in is c_in*4.
    """
    b = spec.base_channels

    def conv(name, cin, cout, k):
        yield f"{name}.weight", (cout, cin, k, k), cin * k * k
        yield f"{name}.bias", (cout,), None

    if spec.arch == STACKED:
        cin = spec.in_channels
        for i in range(spec.stacked_modules):
            yield from conv(f"module{i}", cin, b, 3)
            cin = b
        yield from conv("head", b, spec.out_channels, 3)
    else:
        yield from conv("enc0.conv1", spec.in_channels, b, 3)
        yield from conv("enc0.conv2", b, b, 3)
        for d in range(1, spec.unet_depth):
            c = b << d
            yield from conv(f"enc{d}.conv1", c // 2, c, 3)
            yield from conv(f"enc{d}.conv2", c, c, 3)
        cb = b << spec.unet_depth
        yield from conv("bottleneck.conv1", cb // 2, cb, 3)
        yield from conv("bottleneck.conv2", cb, cb, 3)
        for d in reversed(range(spec.unet_depth)):
            c = b << d
            yield f"up{d}.upconv.weight", (2 * c, c, 2, 2), 2 * c * 4
            yield f"up{d}.upconv.bias", (c,), None
            yield from conv(f"up{d}.conv1", 2 * c, c, 3)
            yield from conv(f"up{d}.conv2", c, c, 3)
        yield from conv("head", b, spec.out_channels, 1)


def param_count(spec):
    """Exact trainable parameter total for a spec."""
    return sum(int(np.prod(shape)) for _, shape, _ in _param_shapes(spec))


class Network:
    """A parameterized architecture: ordered named tensors plus forward."""

    def __init__(self, spec, params):
        self.spec = spec
        self.params = params  # ordered dict name -> Tensor

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def forward(self, x):
        """Forward a Tensor (n, in_channels, h, w) to (n, out_channels, h, w)."""
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"input has {x.shape[1]} channels, "
                             f"network expects {self.spec.in_channels}")
        if self.spec.arch == STACKED:
            return self._forward_stacked(x)
        return self._forward_unet(x)

    def _conv(self, name, x):
        return ad.relu(ad.conv2d(x, self.params[f"{name}.weight"],
                                 self.params[f"{name}.bias"]))

    def forward_training(self, x):
        """Forward returning (layers, head_preactivation).

        The pre-activation is what the range penalty must act on: the
        post-ReLU output is never negative, so a penalty there cannot see
        (or revive) channels the final ReLU has silenced.
        """
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"input has {x.shape[1]} channels, "
                             f"network expects {self.spec.in_channels}")
        if self.spec.arch == STACKED:
            pre = self._head_pre(self._forward_stacked_body(x))
        else:
            pre = self._head_pre(self._forward_unet_body(x))
        return ad.relu(pre), pre

    def _head_pre(self, x):
        return ad.conv2d(x, self.params["head.weight"], self.params["head.bias"])

    def _forward_stacked(self, x):
        return ad.relu(self._head_pre(self._forward_stacked_body(x)))

    def _forward_stacked_body(self, x):
        for i in range(self.spec.stacked_modules):
            x = self._conv(f"module{i}", x)
        return x

    def _forward_unet(self, x):
        return ad.relu(self._head_pre(self._forward_unet_body(x)))

    def _forward_unet_body(self, x):
        depth = self.spec.unet_depth
        if x.shape[2] % (1 << depth) or x.shape[3] % (1 << depth):
            raise ValueError(f"spatial size {x.shape[2:]} not divisible by 2^{depth}")
        skips = []
        x = self._conv("enc0.conv2", self._conv("enc0.conv1", x))
        skips.append(x)
        for d in range(1, depth):
            x = ad.maxpool2x2(x)
            x = self._conv(f"enc{d}.conv2", self._conv(f"enc{d}.conv1", x))
            skips.append(x)
        x = ad.maxpool2x2(x)
        x = self._conv("bottleneck.conv2", self._conv("bottleneck.conv1", x))
        for d in reversed(range(depth)):
            x = ad.relu(ad.conv_transpose2d(x, self.params[f"up{d}.upconv.weight"])
                        + _bias_map(self.params[f"up{d}.upconv.bias"]))
            x = ad.concat_channels(skips[d], x)
            x = self._conv(f"up{d}.conv2", self._conv(f"up{d}.conv1", x))
        return x


def _bias_map(bias):
    """View a per-channel bias as (1, c, 1, 1) for broadcast addition."""

    def bwd(g, _out):
        return (g.reshape(bias.data.shape),)

    return ad.make_op(bias.data.reshape(1, -1, 1, 1), (bias,), bwd, "bias")


def build_network(spec, rng=None, dtype=np.float32):
    """Instantiate a network with Kaiming-uniform weights and zero biases.

    The output head starts almost uniform: its weights are scaled down a
    hundredfold and its bias sits at mid-range, so every layer image
    begins alive at 0.5/out_channels. At full Kaiming scale the head's
    random channel offsets exceed the bias, entire output channels land
    behind the final ReLU's zero region at step one, and their gradient
    never returns — the layer stack collapses onto a single panel.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    params = {}
    for name, shape, fan_in in _param_shapes(spec):
        if fan_in is None:
            data = np.zeros(shape, dtype=dtype)
            if name == "head.bias":
                data += dtype(0.5 / spec.out_channels)
        else:
            data = ad.kaiming_init(shape, rng, fan_in=fan_in, dtype=dtype)
            if name == "head.weight":
                data *= dtype(0.01)
        params[name] = Tensor(data, requires_grad=True)
    return Network(spec, params)


def build_stacked_cnn(spec, rng=None, dtype=np.float32):
    if spec.arch != STACKED:
        raise ValueError("spec.arch must be 'stacked'")
    return build_network(spec, rng, dtype)


def build_unet(spec, rng=None, dtype=np.float32):
    if spec.arch != UNET:
        raise ValueError("spec.arch must be 'unet'")
    return build_network(spec, rng, dtype)


def views_to_input(lf, dtype=np.float32):
    """Flatten a light field's UxV views to input channels (row-major a,b)."""
    u, v, h, w = lf.views.shape
    return lf.views.reshape(u * v, h, w).astype(dtype)[None]


def forward_infer(network, lf, clamp=True, mode=ADDITIVE):
    """Synthesize a layer stack from a target light field, no gradient tape.

    The U-Net path reflect-pads H and W up to a multiple of 2^depth and
    crops the result back; if `clamp`, layer values are clipped to [0,1].
    """
    x = views_to_input(lf)
    if x.shape[1] != network.spec.in_channels:
        raise ValueError(f"light field has {x.shape[1]} views, "
                         f"network expects {network.spec.in_channels}")
    h, w = x.shape[2:]
    ph = pw = 0
    if network.spec.arch == UNET:
        mult = 1 << network.spec.unet_depth
        if h < 2 or w < 2:
            raise ValueError("image too small for the U-Net depth")
        ph = (-h) % mult
        pw = (-w) % mult
        if ph >= h or pw >= w:
            raise ValueError(f"image {h}x{w} too small for reflect-padding to "
                             f"a multiple of {mult}")
        if ph or pw:
            x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    with ad.no_grad():
        out = network.forward(Tensor(x)).data
    layers = out[0, :, :h, :w].astype(np.float64)
    if clamp:
        layers = np.clip(layers, 0.0, 1.0)
    return LayerStack(layers, mode=mode)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict  # name -> float32 ndarray, in _param_shapes order
    metadata: dict = field(default_factory=dict)  # epoch, test_psnr_db, seed, ...

    def network(self):
        tensors = {name: Tensor(np.array(arr, dtype=np.float32), requires_grad=True)
                   for name, arr in self.params.items()}
        return Network(self.spec, tensors)

    @classmethod
    def from_network(cls, network, metadata=None):
        params = {name: np.array(t.data, dtype=np.float32)
                  for name, t in network.named_parameters()}
        return cls(network.spec, params, dict(metadata or {}))


def save_checkpoint(ckpt, dirpath):
    """Persist a checkpoint: spec.json + manifest.json + one blob per param."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    (d / "spec.json").write_text(json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "spec": ckpt.spec.to_dict(),
        "metadata": ckpt.metadata,
    }, indent=2), encoding="utf-8")
    manifest = []
    for i, (name, arr) in enumerate(ckpt.params.items()):
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        (d / f"{name}.bin").write_bytes(blob)
        manifest.append({"name": name, "shape": list(arr.shape),
                         "bytes": len(blob), "index": i})
    (d / "manifest.json").write_text(json.dumps({"parameters": manifest}, indent=2),
                                     encoding="utf-8")


def load_checkpoint(dirpath):
    """Load and validate a checkpoint directory."""
    d = Path(dirpath)
    meta = json.loads((d / "spec.json").read_text(encoding="utf-8"))
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format version "
                         f"{meta.get('format_version')!r}")
    spec = NetworkSpec.from_dict(meta["spec"])
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    entries = sorted(manifest["parameters"], key=lambda e: e["index"])
    expected = {name: shape for name, shape, _ in _param_shapes(spec)}
    params = {}
    for entry in entries:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected or tuple(expected[name]) != shape:
            raise ValueError(f"parameter {name!r} does not match the spec")
        blob = (d / f"{name}.bin").read_bytes()
        if len(blob) != entry["bytes"] or len(blob) != 4 * int(np.prod(shape)):
            raise ValueError(f"parameter blob {name!r} has wrong length")
        params[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        raise ValueError(f"checkpoint missing parameters: {missing}")
    return Checkpoint(spec, params, meta.get("metadata", {}))
