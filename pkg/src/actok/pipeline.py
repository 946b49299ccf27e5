"""End-to-end run orchestration.

One config describes the whole run: synthesize data, train the tokenizer,
assemble the language model (generic-text pretraining plus installation of
the trained codebook as motion-token embeddings), attach adapters, and
fine-tune. Every stage draws from named substreams of the run seed, so a
config value uniquely determines every artifact byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import (ActionSample, SplitProtocol, SyntheticConfig, build_corpus,
                   explanation_text, generate_synthetic, split, substream)
from .encoder import Encoder, EncoderConfig
from .lm import (DEFAULT_INSTRUCTION, LanguageModel, LmConfig, Vocabulary,
                 install_semantic_embeddings)
from .lora import AdapterConfig, attach_adapters
from .train import (TrainConfig, finetune_lora, lora_train_defaults,
                    pretrain_base, train_vst, vst_train_defaults)

# Substream tags for pipeline-level randomness (data owns 1-5, training 10-24).
_S_LM_INIT = 30
_S_ADAPTER_INIT = 31
_S_ENCODER_INIT = 33


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a full run depends on. ``seed`` covers model/adapter
    initialization and the pretraining corpus; the data and per-stage train
    configs carry their own seeds."""
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    protocol: SplitProtocol = field(default_factory=lambda: SplitProtocol("x-sub"))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    vst_train: TrainConfig = field(default_factory=vst_train_defaults)
    lora_train: TrainConfig = field(default_factory=lora_train_defaults)
    pretrain_iterations: int = 1500
    pretrain_learning_rate: float = 3e-4
    pretrain_batch: int = 16
    corpus_sentences: int = 300
    instruction: str = DEFAULT_INSTRUCTION
    seed: int = 0


@dataclass
class PipelineArtifacts:
    """Outputs of a full run, including the pristine pre-adapter base state
    so evaluation harnesses can rebuild ablation variants without retraining
    the shared stages."""
    config: PipelineConfig
    train_samples: list[ActionSample]
    test_samples: list[ActionSample]
    encoder: Encoder
    model: LanguageModel
    vocab: Vocabulary
    base_state: dict[str, np.ndarray]
    embed_scale: float
    vst_losses: list[float]
    pretrain_losses: list[float]
    lora_losses: list[float]


def build_vocabulary(data_cfg: SyntheticConfig, semantic_size: int) -> Vocabulary:
    """Vocabulary covering the instruction, the bundled word list, and every
    word that can appear in a generated explanation."""
    extra = set()
    for c in range(data_cfg.classes):
        extra.update(explanation_text(data_cfg, c).split())
    return Vocabulary.build(semantic_size, data_cfg.classes,
                            extra_text=tuple(sorted(extra)))


def assemble_base(encoder: Encoder, data_cfg: SyntheticConfig, lm_cfg: LmConfig,
                  *, corpus_sentences: int = 300, pretrain_iterations: int = 1500,
                  pretrain_learning_rate: float = 3e-4, pretrain_batch: int = 16,
                  seed: int = 0, vocab: Vocabulary | None = None,
                  log_lines: list[str] | None = None):
    """Build the frozen base model: initialize, pretrain on generic text
    (never mentioning motion or class tokens), install the trained codebook
    rows as motion-token embeddings, freeze. Returns ``(model, embed_scale,
    pretrain_losses)``. Pass ``vocab`` to cover datasets whose explanation
    text is known only from a manifest."""
    if vocab is None:
        vocab = build_vocabulary(data_cfg, encoder.cfg.codebook_size)
    model = LanguageModel(lm_cfg, vocab, substream(seed, _S_LM_INIT))
    corpus = build_corpus(corpus_sentences, seed)
    losses = pretrain_base(model, corpus, pretrain_iterations,
                           learning_rate=pretrain_learning_rate,
                           batch_size=pretrain_batch, seed=seed,
                           log_lines=log_lines)
    scale = install_semantic_embeddings(model, encoder.codebook.embeddings.data)
    model.freeze()
    return model, scale, losses


def clone_base(cfg: PipelineConfig, vocab: Vocabulary,
               base_state: dict[str, np.ndarray]) -> LanguageModel:
    """Fresh frozen model carrying exactly the recorded base weights."""
    model = LanguageModel(cfg.lm, vocab, substream(cfg.seed, _S_LM_INIT))
    model.load_state(base_state)
    model.freeze()
    return model


def snapshot_state(model) -> dict[str, np.ndarray]:
    return {name: tensor.copy() for name, tensor in model.state().items()}


def run_pipeline(cfg: PipelineConfig, samples: list[ActionSample] | None = None,
                 *, log_lines: list[str] | None = None,
                 vst_checkpoint=None, lm_checkpoint=None) -> PipelineArtifacts:
    """Run every stage and return the artifacts. ``samples`` overrides data
    generation (to evaluate on pre-written datasets)."""
    if samples is None:
        samples = generate_synthetic(cfg.data)
    train_samples, test_samples = split(samples, cfg.protocol)

    encoder = Encoder(cfg.encoder, cfg.data.classes,
                      substream(cfg.seed, _S_ENCODER_INIT))
    vst_losses = train_vst(train_samples, encoder, cfg.vst_train,
                           log_lines=log_lines, checkpoint_path=vst_checkpoint)

    model, scale, pre_losses = assemble_base(
        encoder, cfg.data, cfg.lm,
        corpus_sentences=cfg.corpus_sentences,
        pretrain_iterations=cfg.pretrain_iterations,
        pretrain_learning_rate=cfg.pretrain_learning_rate,
        pretrain_batch=cfg.pretrain_batch,
        seed=cfg.seed, log_lines=log_lines)
    base_state = snapshot_state(model)

    attach_adapters(model, cfg.adapter, substream(cfg.seed, _S_ADAPTER_INIT))
    lora_losses = finetune_lora(train_samples, model, encoder, cfg.lora_train,
                                instruction=cfg.instruction,
                                adapter_cfg=cfg.adapter,
                                log_lines=log_lines,
                                checkpoint_path=lm_checkpoint)

    return PipelineArtifacts(
        config=cfg, train_samples=train_samples, test_samples=test_samples,
        encoder=encoder, model=model, vocab=model.vocab,
        base_state=base_state, embed_scale=scale,
        vst_losses=vst_losses, pretrain_losses=pre_losses,
        lora_losses=lora_losses)
