from .freeze import UnlabeledParamError, apply_freeze, freeze_all
from .loop import (
    TrainingDivergedError,
    TrainResult,
    evaluate_pck,
    load_training_checkpoint,
    predict,
    read_metric_log,
    save_training_checkpoint,
    train_loop,
)
from .mim import init_mim_params, mim_pretrain_step, random_patch_mask
from .optim import AdamState, AdamW, TrainConfig, adamw_step, layer_lr, param_layer, step_schedule
from .sampler import Batch, EmptyDatasetError, MultiDatasetSampler, multi_dataset_sampler
from .synth import SynthParams, SyntheticDataset, SyntheticSample, synth_generate, synth_sample

__all__ = [name for name in dir() if not name.startswith("_")]
