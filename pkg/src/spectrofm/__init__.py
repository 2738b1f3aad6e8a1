"""Spectrogram foundation model: signal simulation, masked pretraining, MoE routing, few-shot evaluation."""

from .baseband import Code, Mcs, Modulation, ProtocolId, synthesize_frame
from .channel import Mobility, MobilityClass, PathProfile, add_awgn, apply_tdl, jakes_fading
from .encoder import EncoderConfig, Heads, TransformerEncoder, load_model, save_model
from .evaluation import MetricReport, Task, macro_f1, run_task, stratified_split
from .moe import ExpertBank, RouteMode, Router, moe_infer, train_router
from .objectives import AdamW, CosineWarmup, TrainConfig, finetune, loss_recon, loss_supcon, pretrain
from .specgen import DatasetConfig, StftConfig, build_dataset, generate_dataset, load_dataset

__version__ = "0.1.0"

__all__ = [
    "Code",
    "Mcs",
    "Modulation",
    "ProtocolId",
    "synthesize_frame",
    "Mobility",
    "MobilityClass",
    "PathProfile",
    "add_awgn",
    "apply_tdl",
    "jakes_fading",
    "EncoderConfig",
    "Heads",
    "TransformerEncoder",
    "load_model",
    "save_model",
    "MetricReport",
    "Task",
    "macro_f1",
    "run_task",
    "stratified_split",
    "ExpertBank",
    "RouteMode",
    "Router",
    "moe_infer",
    "train_router",
    "AdamW",
    "CosineWarmup",
    "TrainConfig",
    "finetune",
    "loss_recon",
    "loss_supcon",
    "pretrain",
    "DatasetConfig",
    "StftConfig",
    "build_dataset",
    "generate_dataset",
    "load_dataset",
]
