"""Training and fine-tuning loops plus the binary checkpoint format."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .exceptions import CheckpointError, DataError, NumericError, ParameterError, ShapeError
from .nn.functional import sigmoid
from .nn.loss import bce_voxelwise
from .nn.optim import AdamState, LrSchedule, adam_step, lr_at
from .synth import PatchSample, PatchSpec, TrainingSet, dataset_patches
from .unet import Network, UnetConfig, build_unet

log = logging.getLogger(__name__)

CKPT_MAGIC = "UNET3DCKPT1"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2
    epochs: int = 20
    schedule: LrSchedule = LrSchedule()
    patch_spec: PatchSpec = PatchSpec(patch_size=32)
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")


FINETUNE_EPOCHS = 10


@dataclass
class Checkpoint:
    config: UnetConfig
    params: dict
    buffers: dict
    adam: Optional[AdamState] = None
    epoch: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def from_network(cls, net: Network, adam=None, epoch=0, history=()):
        return cls(net.config, {k: v.copy() for k, v in net.parameters().items()},
                   {k: v.copy() for k, v in net.buffers().items()}, adam, epoch, list(history))

    def to_network(self, dtype=np.float32) -> Network:
        net = build_unet(self.config, seed=0, dtype=dtype)
        load_into(net, self)
        return net


def load_into(net: Network, ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into ``net``; the first mismatching layer is named."""
    for target, source in ((net.parameters(), ckpt.params), (net.buffers(), ckpt.buffers)):
        for key, arr in target.items():
            if key not in source:
                raise CheckpointError(f"checkpoint lacks layer array {key}")
            if source[key].shape != arr.shape:
                raise CheckpointError(f"layer {key}: checkpoint shape {source[key].shape} "
                                      f"!= network shape {arr.shape}")
        extra = set(source) - set(target)
        if extra:
            raise CheckpointError(f"checkpoint has unknown layer array {sorted(extra)[0]}")
    for key, arr in ckpt.params.items():
        net.set_array(key, arr.astype(net.dtype, copy=True))
    for key, arr in ckpt.buffers.items():
        net.set_array(key, arr.astype(net.dtype, copy=True))


# --------------------------------------------------------------------------- loops


def _batch(patches: list[PatchSample], idx, dtype):
    gray = np.stack([patches[i].gray for i in idx])
    scale = 1.0 if gray.dtype == np.float32 else float(np.iinfo(gray.dtype).max)
    x = (gray.astype(dtype) / dtype(scale))[:, None]
    t = np.stack([patches[i].truth for i in idx]).astype(dtype)[:, None]
    return x, t


def train_patches(net: Network, patches: list[PatchSample], tc: TrainConfig,
                  adam: Optional[AdamState] = None,
                  on_epoch: Optional[Callable[[int, float], None]] = None):
    """Run ``tc.epochs`` epochs of Adam on a fixed patch pool.

    Returns ``(adam_state, epoch_mean_losses)``.
    """
    if not patches:
        raise DataError("no training patches")
    size = patches[0].gray.shape
    if any(p.gray.shape != size for p in patches):
        raise ShapeError("all training patches must share one size")
    if any(n % net.config.divisor for n in size):
        raise ShapeError(f"patch size {size} not divisible by {net.config.divisor}")
    adam = adam if adam is not None else AdamState()
    rng = np.random.default_rng(tc.seed)
    dtype = net.dtype.type
    history = []
    n = len(patches)
    for epoch in range(tc.epochs):
        lr = lr_at(epoch, tc.schedule)
        order = rng.permutation(n) if tc.shuffle else np.arange(n)
        losses = []
        for b, start in enumerate(range(0, n, tc.batch_size)):
            x, t = _batch(patches, order[start:start + tc.batch_size], dtype)
            logits = net.forward_logits(x, train=True)
            q = sigmoid(logits)
            loss = bce_voxelwise(q, t)
            if not np.isfinite(loss) or not np.all(np.isfinite(logits)):
                net.clear()
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            # sigmoid and cross-entropy fused: d loss / d logit = (q - t) / N
            net.backward_logits(((q - t) / q.size).astype(dtype))
            adam_step(net.parameters(), net.gradients(), adam, lr)
            losses.append(loss)
        mean = float(np.mean(losses))
        history.append(mean)
        log.info("epoch %d lr %.6g mean loss %.6f", epoch + 1, lr, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return adam, history


def train(net: Network, data: TrainingSet, tc: TrainConfig = TrainConfig(),
          on_epoch=None) -> Checkpoint:
    """Train ``net`` in place on patches cut from ``data``."""
    patches = dataset_patches(data, tc.patch_spec)
    log.info("training on %d patches of %d^3", len(patches), tc.patch_spec.patch_size)
    adam, history = train_patches(net, patches, tc, on_epoch=on_epoch)
    return Checkpoint.from_network(net, adam, len(history), history)


def finetune(ckpt: Checkpoint, data: TrainingSet, tc: Optional[TrainConfig] = None,
             expected_config: Optional[UnetConfig] = None, on_epoch=None) -> Checkpoint:
    """Continue training from ``ckpt`` with fresh optimizer state; 10 epochs by default."""
    if expected_config is not None and expected_config != ckpt.config:
        raise CheckpointError(f"checkpoint config {ckpt.config} does not match {expected_config}")
    tc = tc if tc is not None else TrainConfig(epochs=FINETUNE_EPOCHS)
    net = ckpt.to_network()
    if tc.epochs == 0:
        return Checkpoint.from_network(net, None, ckpt.epoch, ckpt.history)
    patches = dataset_patches(data, tc.patch_spec)
    adam, history = train_patches(net, patches, tc, adam=AdamState(), on_epoch=on_epoch)
    return Checkpoint.from_network(net, adam, ckpt.epoch + len(history), ckpt.history + history)


# --------------------------------------------------------------------------- serialization


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Header, trainable arrays, BN running statistics, Adam state, loss history."""
    c = ckpt.config
    has_adam = ckpt.adam is not None
    header = (f"{CKPT_MAGIC}\nbase_filters {c.base_filters}\nlevels {c.levels}\n"
              f"epoch {ckpt.epoch}\nhas_adam {int(has_adam)}\nend\n").encode("ascii")
    parts = [header]
    parts += [_f32(a) for a in ckpt.params.values()]
    parts += [_f32(a) for a in ckpt.buffers.values()]
    if has_adam:
        parts.append(np.uint64(ckpt.adam.t).astype("<u8").tobytes())
        for moments in (ckpt.adam.m, ckpt.adam.v):
            for key, a in ckpt.params.items():
                parts.append(_f32(moments.get(key, np.zeros_like(a))))
    parts.append(_f32(np.asarray(ckpt.history, dtype=np.float64)))
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    if len(ckpt.history) != ckpt.epoch:
        raise CheckpointError("loss history length must equal the epoch counter")
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path, expected_config: Optional[UnetConfig] = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    lines, pos = [], 0
    for _ in range(6):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated header")
        lines.append(raw[pos:end].decode("ascii", errors="replace"))
        pos = end + 1
    if lines[0] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a {CKPT_MAGIC} file")
    fields = {}
    for line, key in zip(lines[1:5], ("base_filters", "levels", "epoch", "has_adam")):
        name, _, value = line.partition(" ")
        if name != key:
            raise CheckpointError(f"{path}: expected header field {key!r}, found {name!r}")
        try:
            fields[key] = int(value)
        except ValueError:
            raise CheckpointError(f"{path}: bad value for {key}") from None
    if lines[5] != "end":
        raise CheckpointError(f"{path}: header not terminated by 'end'")
    config = UnetConfig(base_filters=fields["base_filters"], levels=fields["levels"])
    if expected_config is not None and expected_config != config:
        probe = Checkpoint.from_network(build_unet(config))
        load_into(build_unet(expected_config), probe)  # raises naming the offending layer
    template = build_unet(config)
    buf = memoryview(raw)

    def take(shape, dtype="<f4"):
        nonlocal pos
        n = int(np.prod(shape)) * np.dtype(dtype).itemsize
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: payload truncated")
        out = np.frombuffer(buf[pos:pos + n], dtype=dtype).reshape(shape).astype(np.float32 if dtype == "<f4" else np.uint64)
        pos += n
        return out

    params = {k: take(a.shape) for k, a in template.parameters().items()}
    buffers = {k: take(a.shape) for k, a in template.buffers().items()}
    adam = None
    if fields["has_adam"]:
        t = int(take((1,), "<u8")[0])
        m = {k: take(a.shape) for k, a in params.items()}
        v = {k: take(a.shape) for k, a in params.items()}
        adam = AdamState(m=m, v=v, t=t)
    history = [float(h) for h in take((fields["epoch"],))]
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} unexpected trailing bytes")
    return Checkpoint(config, params, buffers, adam, fields["epoch"], history)
