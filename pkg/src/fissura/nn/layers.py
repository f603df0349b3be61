"""Stateful layer wrappers that cache forward results for the backward pass."""
from __future__ import annotations

import numpy as np

from . import functional as F


class Layer:
    """A pipeline stage with named parameters and matching gradients."""

    #: names of trainable arrays, in checkpoint order
    trainable: tuple[str, ...] = ()
    #: names of non-trainable arrays that still belong in a checkpoint
    buffers: tuple[str, ...] = ()

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy, need_input_grad=True):
        raise NotImplementedError

    def clear(self):
        self._cache = None

    def n_trainable(self) -> int:
        return sum(self.params[k].size for k in self.trainable)


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv3d(Layer):
    trainable = ("kernel", "bias")

    def __init__(self, in_ch, out_ch, rng, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        fan_in, fan_out = in_ch * 27, out_ch * 27
        self.params["kernel"] = glorot_uniform(rng, (out_ch, in_ch, 3, 3, 3), fan_in, fan_out, dtype)
        self.params["bias"] = np.zeros(out_ch, dtype=dtype)

    def forward(self, x, train=False):
        y, cache = F.conv3d(x, self.params["kernel"], self.params["bias"])
        self._cache = cache if train else None
        return y

    def backward(self, dy, need_input_grad=True):
        dx, dk, db = F.conv3d_backward(dy, self._cache, need_input_grad)
        self.grads["kernel"], self.grads["bias"] = dk, db
        self._cache = None
        return dx

    def __repr__(self):
        return f"Conv3d({self.in_ch}->{self.out_ch})"


class TransposedConv3d(Layer):
    """Stride-2 upsampling; kernel layout ``(Cin, Cout, 3, 3, 3)``."""

    trainable = ("kernel", "bias")

    def __init__(self, in_ch, out_ch, rng, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        fan_in, fan_out = in_ch * 27, out_ch * 27
        self.params["kernel"] = glorot_uniform(rng, (in_ch, out_ch, 3, 3, 3), fan_in, fan_out, dtype)
        self.params["bias"] = np.zeros(out_ch, dtype=dtype)

    def forward(self, x, train=False):
        y, cache = F.tconv3d(x, self.params["kernel"], self.params["bias"])
        self._cache = cache if train else None
        return y

    def backward(self, dy, need_input_grad=True):
        dx, dk, db = F.tconv3d_backward(dy, self._cache, need_input_grad)
        self.grads["kernel"], self.grads["bias"] = dk, db
        self._cache = None
        return dx

    def __repr__(self):
        return f"TransposedConv3d({self.in_ch}->{self.out_ch})"


class BatchNorm3d(Layer):
    trainable = ("gamma", "beta")
    buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.params["running_mean"] = np.zeros(channels, dtype=dtype)
        self.params["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False):
        p = self.params
        if not train:
            return F.batchnorm3d_infer(x, p["gamma"], p["beta"], p["running_mean"],
                                       p["running_var"], self.eps)
        y, mean, var, cache = F.batchnorm3d_train(x, p["gamma"], p["beta"], self.eps)
        m = self.momentum
        p["running_mean"] = ((1 - m) * p["running_mean"] + m * mean).astype(x.dtype)
        p["running_var"] = ((1 - m) * p["running_var"] + m * var).astype(x.dtype)
        self._cache = cache
        return y

    def backward(self, dy, need_input_grad=True):
        dx, dg, db = F.batchnorm3d_backward(dy, self._cache)
        self.grads["gamma"], self.grads["beta"] = dg, db
        self._cache = None
        return dx

    def __repr__(self):
        return f"BatchNorm3d({self.channels})"


class ReLU(Layer):
    def forward(self, x, train=False):
        y = F.relu(x)
        self._cache = y if train else None
        return y

    def backward(self, dy, need_input_grad=True):
        dx = F.relu_backward(dy, self._cache)
        self._cache = None
        return dx

    def __repr__(self):
        return "ReLU()"


class MaxPool3d(Layer):
    def forward(self, x, train=False):
        y, cache = F.maxpool3d(x)
        self._cache = cache if train else None
        return y

    def backward(self, dy, need_input_grad=True):
        dx = F.maxpool3d_backward(dy, self._cache)
        self._cache = None
        return dx

    def __repr__(self):
        return "MaxPool3d(2)"


class Sigmoid(Layer):
    def forward(self, x, train=False):
        y = F.sigmoid(x)
        self._cache = y if train else None
        return y

    def backward(self, dy, need_input_grad=True):
        dx = F.sigmoid_backward(dy, self._cache)
        self._cache = None
        return dx

    def __repr__(self):
        return "Sigmoid()"
