"""NumPy neural-network primitives with hand-written backward passes."""
from .layers import BatchNorm3d, Conv3d, Layer, MaxPool3d, ReLU, Sigmoid, TransposedConv3d
from .loss import bce_voxelwise, cross_entropy
from .optim import AdamState, LrSchedule, adam_step, lr_at
