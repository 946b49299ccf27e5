"""actok: discrete semantic action tokens plus a small adapter-tuned
language model that classifies actions and explains them in words."""

from .autograd import ConfigError, Parameter, ShapeError, Tensor
from .data import (ActionSample, DataError, SplitProtocol, SyntheticConfig,
                   generate_synthetic, split)
from .encoder import Encoder, EncoderConfig, TokenSequence
from .evaluate import (EvalReport, ablation_suite, accuracy,
                       efficiency_report, explanation_match_rate,
                       hyperparam_sweep, token_statistics)
from .kernels import BACKEND
from .lm import DEFAULT_INSTRUCTION, LanguageModel, LmConfig, Vocabulary
from .lora import AdapterConfig, attach_adapters, merge_model, trainable_fraction
from .pipeline import PipelineArtifacts, PipelineConfig, run_pipeline
from .train import (AdamW, DivergenceError, TrainConfig, cosine_lr,
                    finetune_lora, resume_lora, resume_vst, train_vst)

__version__ = "0.1.0"

__all__ = [
    "ActionSample", "AdamW", "AdapterConfig", "BACKEND", "ConfigError",
    "DEFAULT_INSTRUCTION", "DataError", "DivergenceError", "Encoder",
    "EncoderConfig", "EvalReport", "LanguageModel", "LmConfig", "Parameter",
    "PipelineArtifacts", "PipelineConfig", "ShapeError", "SplitProtocol",
    "SyntheticConfig", "Tensor", "TokenSequence", "TrainConfig", "Vocabulary",
    "ablation_suite", "accuracy", "attach_adapters", "cosine_lr",
    "efficiency_report", "explanation_match_rate", "finetune_lora",
    "generate_synthetic", "hyperparam_sweep", "merge_model", "resume_lora",
    "resume_vst", "run_pipeline", "split", "token_statistics",
    "trainable_fraction", "train_vst", "__version__",
]
