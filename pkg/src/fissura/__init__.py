"""Crack segmentation in concrete CT volumes with a from-scratch 3D U-Net."""
from .cracks import CrackSpec, FbmParams, Orientation, compose_scene, default_spec, gen_fbm_field
from .estimator import CrackSegmenter, PatchExtractor
from .exceptions import FissuraError
from .segment import (BASE_SCALES, FINETUNED_SCALES, MetricsReport, PostprocessConfig, ScaleSet,
                      binarize, evaluate, multiscale_predict, postprocess, segment)
from .synth import (LabeledVolume, PatchSpec, TrainingSet, build_dataset, fixed_width_dataset,
                    surrogate_background, surrogate_dataset)
from .training import Checkpoint, TrainConfig, finetune, load_checkpoint, save_checkpoint, train
from .unet import UnetConfig, audit_param_count, build_unet, count_params
from .volume import BoxRegion, Mask, Volume, load_mask, load_volume, save_volume

__version__ = "0.1.0"
