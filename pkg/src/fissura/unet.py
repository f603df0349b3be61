"""3D U-Net assembly and trainable-parameter audit."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ParameterError, ShapeError
from .nn import functional as F
from .nn.layers import BatchNorm3d, Conv3d, Layer, MaxPool3d, ReLU, TransposedConv3d


@dataclass(frozen=True)
class UnetConfig:
    base_filters: int = 16
    levels: int = 3
    kernel_size: int = 3
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.base_filters < 1:
            raise ParameterError("base_filters must be >= 1")
        if self.levels < 1:
            raise ParameterError("levels must be >= 1")
        if self.kernel_size != 3:
            raise ParameterError("only kernel size 3 is supported")
        if self.in_channels != 1 or self.out_channels != 1:
            raise ParameterError("the network maps one gray channel to one crack probability")

    @property
    def divisor(self) -> int:
        return 2 ** self.levels


class _DoubleConv:
    """conv -> BN -> ReLU -> conv -> BN -> ReLU."""

    def __init__(self, in_ch, out_ch, rng, dtype):
        self.layers = [Conv3d(in_ch, out_ch, rng, dtype), BatchNorm3d(out_ch, dtype=dtype), ReLU(),
                       Conv3d(out_ch, out_ch, rng, dtype), BatchNorm3d(out_ch, dtype=dtype), ReLU()]


class Network:
    """Encoder/decoder U-Net with explicit per-layer backward passes.

    ``named_layers`` fixes the layer order used for parameter counting,
    optimizer state and checkpoints.
    """

    def __init__(self, config: UnetConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        f, L = config.base_filters, config.levels
        self.encoders = []
        prev = config.in_channels
        for i in range(L):
            ch = f * 2**i
            self.encoders.append(_DoubleConv(prev, ch, rng, dtype))
            prev = ch
        self.pools = [MaxPool3d() for _ in range(L)]
        self.bottleneck = _DoubleConv(prev, f * 2**L, rng, dtype)
        self.decoders = []
        up_ch = f * 2**L
        for j in reversed(range(L)):
            skip_ch = f * 2**j
            up = [TransposedConv3d(up_ch, up_ch, rng, dtype), BatchNorm3d(up_ch, dtype=dtype), ReLU()]
            self.decoders.append((up, _DoubleConv(up_ch + skip_ch, skip_ch, rng, dtype)))
            up_ch = skip_ch
        self.head = Conv3d(f, config.out_channels, rng, dtype)

    # ------------------------------------------------------------------ structure

    @property
    def named_layers(self) -> list[tuple[str, Layer]]:
        out = []
        for i, block in enumerate(self.encoders):
            out += [(f"enc{i + 1}.{k}", layer) for k, layer in enumerate(block.layers)]
        out += [(f"bottleneck.{k}", layer) for k, layer in enumerate(self.bottleneck.layers)]
        for j, (up, block) in enumerate(self.decoders):
            out += [(f"dec{j + 1}.up{k}", layer) for k, layer in enumerate(up)]
            out += [(f"dec{j + 1}.{k}", layer) for k, layer in enumerate(block.layers)]
        out.append(("head", self.head))
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed ``"<layer>.<param>"``, in checkpoint order."""
        return {f"{name}.{p}": layer.params[p]
                for name, layer in self.named_layers for p in layer.trainable}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{name}.{p}": layer.params[p]
                for name, layer in self.named_layers for p in layer.buffers}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{name}.{p}": layer.grads[p]
                for name, layer in self.named_layers for p in layer.trainable}

    def set_array(self, key: str, value: np.ndarray) -> None:
        name, p = key.rsplit(".", 1)
        layer = dict(self.named_layers)[name]
        layer.params[p] = value

    # ------------------------------------------------------------------ passes

    def _check_input(self, x):
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"network input must be [B,1,D,H,W], got {x.shape}")
        d = self.config.divisor
        if any(n % d for n in x.shape[2:]):
            raise ShapeError(f"spatial dims {x.shape[2:]} must be divisible by {d}")

    def forward_logits(self, x, train=False):
        self._check_input(x)
        h = x.astype(self.dtype, copy=False)
        skips = []
        for block, pool in zip(self.encoders, self.pools):
            for layer in block.layers:
                h = layer.forward(h, train)
            skips.append(h)
            h = pool.forward(h, train)
        for layer in self.bottleneck.layers:
            h = layer.forward(h, train)
        for (up, block), skip in zip(self.decoders, reversed(skips)):
            for layer in up:
                h = layer.forward(h, train)
            h = np.concatenate([h, skip], axis=1)
            for layer in block.layers:
                h = layer.forward(h, train)
        return self.head.forward(h, train)

    def forward(self, x, train=False):
        """Crack probabilities in (0, 1), same shape as ``x``."""
        return F.sigmoid(self.forward_logits(x, train))

    def backward_logits(self, dlogits):
        """Back-propagate a gradient on the logits; fills every layer's ``grads``."""
        dh = self.head.backward(dlogits)
        dskips = []
        for up, block in reversed(self.decoders):
            for layer in reversed(block.layers):
                dh = layer.backward(dh)
            up_ch = up[0].out_ch
            dskips.append(dh[:, up_ch:])
            dh = dh[:, :up_ch]
            for layer in reversed(up):
                dh = layer.backward(dh)
        for layer in reversed(self.bottleneck.layers):
            dh = layer.backward(dh)
        for i in reversed(range(len(self.encoders))):
            dh = self.pools[i].backward(dh)
            dh = dh + dskips[i]
            layers = self.encoders[i].layers
            for k in reversed(range(len(layers))):
                first = i == 0 and k == 0
                dh = layers[k].backward(dh, need_input_grad=not first)
        return dh

    def clear(self):
        for _, layer in self.named_layers:
            layer.clear()


def build_unet(config: UnetConfig = UnetConfig(), seed: int = 0, dtype=np.float32) -> Network:
    """Build a freshly initialized network (Glorot-uniform kernels, zero biases)."""
    return Network(config, np.random.default_rng(seed), dtype)


def count_params(net: Network) -> int:
    """Number of trainable entries (kernels, biases, BN gamma/beta)."""
    return int(sum(a.size for a in net.parameters().values()))


def audit_param_count(base_filters: int = 16, levels: int = 3) -> int:
    """Closed-form trainable parameter count for a given configuration."""
    f, L = base_filters, levels

    def conv(cin, cout):
        return 27 * cin * cout + cout

    def bn(c):
        return 2 * c

    total = 0
    cin = 1
    for i in range(L):
        c = f * 2**i
        total += conv(cin, c) + bn(c) + conv(c, c) + bn(c)
        cin = c
    c = f * 2**L
    total += conv(cin, c) + bn(c) + conv(c, c) + bn(c)
    for j in reversed(range(L)):
        u, s = f * 2 ** (j + 1), f * 2**j
        total += conv(u, u) + bn(u)
        total += conv(u + s, s) + bn(s) + conv(s, s) + bn(s)
    total += conv(f, 1)
    return total
