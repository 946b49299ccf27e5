"""Optimization and training recipes.

AdamW with cosine annealing, gradient accumulation that reproduces full-batch
gradients exactly, the two training stages (tokenizer training on labeled
clips; adapter fine-tuning of the frozen language model), plain-text base
pretraining, and a versioned binary checkpoint format that resumes training
bitwise.

Every random draw comes from a stream keyed by (seed, purpose tag, step), so
batch composition and dropout masks are pure functions of the config — a
resumed run continues the exact same sequence the uninterrupted run would
have produced.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import autograd as ag
from . import kernels
from .autograd import ConfigError, Tensor
from .data import ActionSample, DataError, substream
from .encoder import Encoder, EncoderConfig, stack_features, training_loss
from .lm import (BOS_ID, DEFAULT_INSTRUCTION, EOS_ID, LanguageModel, LmConfig,
                 Vocabulary, build_training_sequence, stack_sequences)
from .lora import AdapterConfig, LoraAdapter, attach_adapters
from .nn import Module

CHECKPOINT_MAGIC = b"VSTLM1"

# keyed substream tags (the data generator owns 1..5)
_S_VST_BATCH = 10
_S_LORA_BATCH = 20
_S_DROPOUT = 21
_S_CORPUS_BATCH = 22
_S_RESEED = 23
_S_BOOK_SEED = 24


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    iterations: int
    learning_rate: float
    batch_size: int = 64
    micro_batch: int = 4
    min_learning_rate: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.stage not in ("vst", "lora"):
            raise ConfigError(f"unknown training stage {self.stage!r}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1 or self.micro_batch < 1:
            raise ConfigError("batch and micro-batch sizes must be >= 1")
        if self.batch_size % self.micro_batch != 0:
            raise ConfigError(
                f"batch size {self.batch_size} is not divisible by "
                f"micro-batch size {self.micro_batch}")
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.min_learning_rate < 0.0 or self.min_learning_rate > self.learning_rate:
            raise ConfigError("min learning rate must sit in [0, learning rate]")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("betas must sit in [0, 1)")
        if self.log_every < 1:
            raise ConfigError(f"log_every must be >= 1, got {self.log_every}")


def vst_train_defaults(**overrides) -> TrainConfig:
    base = dict(stage="vst", iterations=5000, learning_rate=2e-4,
                batch_size=64, micro_batch=64)
    base.update(overrides)
    return TrainConfig(**base)


def lora_train_defaults(**overrides) -> TrainConfig:
    base = dict(stage="lora", iterations=2000, learning_rate=3e-3,
                batch_size=16, micro_batch=4)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# schedule and optimizer


def cosine_lr(t: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max (t=0) to lr_min (t=total), exactly at the
    endpoints; steps past the horizon stay at lr_min."""
    if total < 1:
        raise ConfigError(f"schedule length must be >= 1, got {total}")
    if t < 0:
        raise ConfigError(f"schedule step must be >= 0, got {t}")
    if t == 0:
        return lr_max
    if t >= total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


class AdamW:
    """Adam with decoupled weight decay over named parameters.

    Decay touches only parameters flagged for it — weight matrices, never
    biases, gains, or the codebook. A non-finite gradient aborts the step,
    naming the offending parameter.
    """

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = [(n, p) for n, p in named_params if p.trainable]
        if not self.params:
            raise ConfigError("optimizer got no trainable parameters")
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names in optimizer")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self.params}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        for n, p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient for parameter {n!r}")
        self.step_count += 1
        for n, p in self.params:
            kernels.adamw_update(
                p.data, p.grad, self._m[n], self._v[n], self.step_count,
                lr, self.beta1, self.beta2, self.eps,
                self.weight_decay if p.decay else 0.0)

    def state(self) -> dict[str, np.ndarray]:
        out = {"optim.step": np.array([float(self.step_count)])}
        for n, _ in self.params:
            out[f"optim.m.{n}"] = self._m[n]
            out[f"optim.v.{n}"] = self._v[n]
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        self.step_count = int(tensors["optim.step"][0])
        for n, p in self.params:
            for moments, key in ((self._m, f"optim.m.{n}"), (self._v, f"optim.v.{n}")):
                if key not in tensors:
                    raise DataError(f"checkpoint is missing tensor {key!r}")
                arr = np.asarray(tensors[key], dtype=np.float64)
                if arr.shape != p.data.shape:
                    raise DataError(f"tensor {key!r} has shape {arr.shape}, "
                                    f"expected {p.data.shape}")
                moments[n] = arr.copy()


def accumulate_gradients(loss_of, indices, micro: int) -> float:
    """Backward mean-reduced micro-batch losses, each weighted by its share
    of the batch, so the accumulated gradients equal the gradient of the
    full-batch mean loss. Returns that full-batch loss value.

    ``loss_of(chunk_indices, chunk_number)`` must build the mean loss over
    exactly those samples.
    """
    n = len(indices)
    if n == 0:
        raise ConfigError("cannot accumulate over an empty batch")
    if micro < 1:
        raise ConfigError(f"micro-batch size must be >= 1, got {micro}")
    total = 0.0
    for k, start in enumerate(range(0, n, micro)):
        chunk = indices[start:start + micro]
        weight = len(chunk) / n
        loss = loss_of(chunk, k)
        loss.backward(weight)
        total += weight * loss.item()
    return total


# ---------------------------------------------------------------------------
# checkpoint format: magic, length-prefixed metadata text, named f64 tensors


def save_checkpoint(path, metadata: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    meta_text = "".join(f"{k} = {v}\n" for k, v in sorted(metadata.items()))
    blob = meta_text.encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float64)
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    try:
        raw = open(path, "rb").read()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}")
    cursor = 0

    def take(n: int) -> bytes:
        nonlocal cursor
        if cursor + n > len(raw):
            raise DataError(f"checkpoint truncated: {path}")
        piece = raw[cursor:cursor + n]
        cursor += n
        return piece

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise DataError(f"bad magic bytes: {path} is not a checkpoint")
    (meta_len,) = struct.unpack("<I", take(4))
    metadata = {}
    for line in take(meta_len).decode().splitlines():
        if not line:
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise DataError(f"malformed metadata line {line!r} in {path}")
        metadata[key] = value
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * size), dtype="<f8")
        tensors[name] = data.reshape(shape).astype(np.float64)
    if cursor != len(raw):
        raise DataError(f"trailing bytes after last tensor in {path}")
    return metadata, tensors


def _encode_section(prefix: str, cfg) -> dict[str, str]:
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(x) for x in value)
        out[f"{prefix}.{f.name}"] = str(value)
    return out


def _decode_field(raw: str, annotation: str):
    if annotation == "int":
        return int(raw)
    if annotation == "float":
        return float(raw)
    if annotation == "str":
        return raw
    if annotation == "bool":
        return raw == "True"
    if annotation.startswith("tuple[int"):
        return tuple(int(x) for x in raw.split(",") if x)
    if annotation.startswith("tuple[str"):
        return tuple(x for x in raw.split(",") if x)
    raise ConfigError(f"cannot decode config field of type {annotation!r}")


def _decode_section(metadata: dict[str, str], prefix: str, cls):
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}.{f.name}"
        if key not in metadata:
            raise DataError(f"checkpoint metadata is missing {key!r}")
        kwargs[f.name] = _decode_field(metadata[key], f.type)
    return cls(**kwargs)


def state_digest(module: Module, skip_adapters: bool = False) -> str:
    """SHA-256 over all parameter bytes (sorted by name) — cheap identity
    check that frozen weights really stayed frozen."""
    h = hashlib.sha256()
    for name in sorted(state := module.state()):
        if skip_adapters and ".adapter." in name:
            continue
        h.update(name.encode())
        h.update(state[name].tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# stage 1: tokenizer training


def train_vst(samples: list[ActionSample], encoder: Encoder, cfg: TrainConfig, *,
              optimizer: AdamW | None = None, start_step: int = 0,
              stop_step: int | None = None,
              log_lines: list[str] | None = None, checkpoint_path=None) -> list[float]:
    """Optimize the encoder/codebook on labeled clips. Returns per-step loss
    values. Log lines: step, loss, learning rate, codebook utilization.
    ``stop_step`` pauses early (the checkpoint then resumes mid-schedule)."""
    if cfg.stage != "vst":
        raise ConfigError(f"train_vst got a {cfg.stage!r} config")
    if not samples:
        raise DataError("no training samples")
    labels = np.array([s.label for s in samples], dtype=np.int64)
    opt = optimizer if optimizer is not None else AdamW(
        encoder.trainable_parameters(), cfg.beta1, cfg.beta2, cfg.eps,
        cfg.weight_decay)

    if not encoder.codebook.data_initialized and start_step == 0:
        first = substream(cfg.seed, _S_VST_BATCH, 0).choice(
            len(samples), size=min(cfg.micro_batch, cfg.batch_size),
            replace=len(samples) < cfg.micro_batch)
        stacked, offs = stack_features([samples[i].sequence for i in first])
        z = encoder.project_tokens(Tensor(stacked), offs)
        encoder.codebook.seed_from(z.data, substream(cfg.seed, _S_BOOK_SEED))

    end = cfg.iterations if stop_step is None else min(stop_step, cfg.iterations)
    losses = []
    for t in range(start_step, end):
        rng = substream(cfg.seed, _S_VST_BATCH, t)
        idx = rng.choice(len(samples), size=cfg.batch_size,
                         replace=len(samples) < cfg.batch_size)
        lr = cosine_lr(t, cfg.iterations, cfg.learning_rate, cfg.min_learning_rate)
        opt.zero_grad()
        batch_z, batch_ids = [], []

        def micro_loss(chunk, _k):
            stacked, offs = stack_features([samples[i].sequence for i in chunk])
            z = encoder.project_tokens(Tensor(stacked), offs)
            ids, z_q, z_st = encoder.quantize(z)
            total, _, _, _ = training_loss(encoder, z, z_q, z_st, ids, labels[chunk])
            batch_z.append(z.data)
            batch_ids.append(ids)
            return total

        loss_val = accumulate_gradients(micro_loss, idx, cfg.micro_batch)
        try:
            if not math.isfinite(loss_val):
                raise DivergenceError(f"non-finite loss at step {t}")
            opt.step(lr)
        except DivergenceError:
            if checkpoint_path is not None:
                save_vst_checkpoint(checkpoint_path, encoder, opt, cfg, step=t)
            raise

        z_all = np.concatenate(batch_z, axis=0)
        ids_all = np.concatenate(batch_ids)
        encoder.codebook.ema_update(z_all, ids_all, encoder.cfg.ema_decay, step=t + 1)
        encoder.codebook.reseed_dead(z_all, t + 1, encoder.cfg.reseed_after,
                                     substream(cfg.seed, _S_RESEED, t))
        losses.append(loss_val)
        if log_lines is not None and (t % cfg.log_every == 0 or t == cfg.iterations - 1):
            log_lines.append(f"{t}\t{loss_val:.6f}\t{lr:.8g}\t"
                             f"{encoder.codebook.utilization():.4f}")

    if checkpoint_path is not None:
        save_vst_checkpoint(checkpoint_path, encoder, opt, cfg, step=end)
    return losses


def save_vst_checkpoint(path, encoder: Encoder, optimizer: AdamW,
                        cfg: TrainConfig, step: int) -> None:
    meta = {"format": "vst", "step": str(step),
            "model.num_classes": str(encoder.probe.w.shape[1])}
    meta.update(_encode_section("train", cfg))
    meta.update(_encode_section("encoder", encoder.cfg))
    tensors = {f"model.{n}": p for n, p in encoder.state().items()}
    tensors.update(encoder.codebook.extra_state())
    tensors.update(optimizer.state())
    save_checkpoint(path, meta, tensors)


def load_vst_checkpoint(path):
    """Rebuild (encoder, optimizer, train config, step) from a checkpoint."""
    meta, tensors = load_checkpoint(path)
    if meta.get("format") != "vst":
        raise DataError(f"{path} is not a tokenizer checkpoint "
                        f"(format {meta.get('format')!r})")
    enc_cfg = _decode_section(meta, "encoder", EncoderConfig)
    cfg = _decode_section(meta, "train", TrainConfig)
    encoder = Encoder(enc_cfg, int(meta["model.num_classes"]), substream(0, 0))
    encoder.load_state({n[len("model."):]: a for n, a in tensors.items()
                        if n.startswith("model.")})
    encoder.codebook.load_extra_state(
        {n: a for n, a in tensors.items() if n.startswith("codebook.")})
    optimizer = AdamW(encoder.trainable_parameters(), cfg.beta1, cfg.beta2,
                      cfg.eps, cfg.weight_decay)
    optimizer.load_state(tensors)
    return encoder, optimizer, cfg, int(meta["step"])


def resume_vst(path, samples: list[ActionSample], *,
               log_lines: list[str] | None = None) -> tuple[Encoder, list[float]]:
    """Continue tokenizer training from a checkpoint to its configured end."""
    encoder, optimizer, cfg, step = load_vst_checkpoint(path)
    losses = train_vst(samples, encoder, cfg, optimizer=optimizer,
                       start_step=step, log_lines=log_lines,
                       checkpoint_path=path)
    return encoder, losses


# ---------------------------------------------------------------------------
# base-model pretraining on plain sentences


def _next_token_layout(ids: np.ndarray, offsets: np.ndarray):
    """Rows that predict a next id within their own sequence, the ids they
    predict, and per-row weights averaging within then across sequences."""
    rows, targets, weights = [], [], []
    n_seqs = len(offsets) - 1
    for i in range(n_seqs):
        o, e = int(offsets[i]), int(offsets[i + 1])
        if e - o < 2:
            raise ConfigError("sequences need >= 2 ids for next-token training")
        rows.append(np.arange(o, e - 1))
        targets.append(ids[o + 1:e])
        weights.append(np.full(e - 1 - o, 1.0 / ((e - 1 - o) * n_seqs)))
    return (np.concatenate(rows), np.concatenate(targets),
            np.concatenate(weights))


def corpus_sequences(vocab: Vocabulary, sentences: list[str]) -> list[np.ndarray]:
    return [np.concatenate(([BOS_ID], vocab.encode_text(s), [EOS_ID])).astype(np.int64)
            for s in sentences]


def pretrain_base(model: LanguageModel, sentences: list[str], iterations: int, *,
                  learning_rate: float = 3e-4, batch_size: int = 16,
                  micro_batch: int | None = None, weight_decay: float = 0.01,
                  seed: int = 0, log_lines: list[str] | None = None,
                  log_every: int = 100) -> list[float]:
    """Next-word training on plain sentences, giving the decoder generic
    language behavior to preserve once it is frozen and adapted. Zero
    iterations is a valid degenerate setting (random base)."""
    if iterations == 0:
        return []
    if iterations < 0:
        raise ConfigError(f"iterations must be >= 0, got {iterations}")
    if not sentences:
        raise DataError("empty pretraining corpus")
    seqs = corpus_sequences(model.vocab, sentences)
    micro = batch_size if micro_batch is None else micro_batch
    opt = AdamW(model.trainable_parameters(), weight_decay=weight_decay)
    losses = []
    for t in range(iterations):
        rng = substream(seed, _S_CORPUS_BATCH, t)
        idx = rng.choice(len(seqs), size=batch_size,
                         replace=len(seqs) < batch_size)
        lr = cosine_lr(t, iterations, learning_rate)
        opt.zero_grad()

        def micro_loss(chunk, _k):
            ids, offs = stack_sequences([seqs[i] for i in chunk])
            logits = model(ids, offs)
            rows, targets, weights = _next_token_layout(ids, offs)
            return ag.cross_entropy(ag.gather_rows(logits, rows), targets,
                                    row_weights=weights)

        loss_val = accumulate_gradients(micro_loss, idx, micro)
        if not math.isfinite(loss_val):
            raise DivergenceError(f"non-finite pretraining loss at step {t}")
        opt.step(lr)
        losses.append(loss_val)
        if log_lines is not None and (t % log_every == 0 or t == iterations - 1):
            log_lines.append(f"{t}\t{loss_val:.6f}\t{lr:.8g}")
    return losses


def corpus_perplexity(model: LanguageModel, sentences: list[str]) -> float:
    """exp(mean next-token negative log-likelihood) over the sentences."""
    seqs = corpus_sequences(model.vocab, sentences)
    ids, offs = stack_sequences(seqs)
    logits = model(ids, offs)
    rows, targets, _ = _next_token_layout(ids, offs)
    nll = ag.cross_entropy(ag.gather_rows(logits, rows), targets)
    return ag.perplexity_from_nll(nll.item())


# ---------------------------------------------------------------------------
# stage 2: adapter fine-tuning


def finetune_lora(samples: list[ActionSample], model: LanguageModel,
                  encoder: Encoder, cfg: TrainConfig, *,
                  instruction: str = DEFAULT_INSTRUCTION,
                  adapter_cfg: AdapterConfig | None = None,
                  optimizer: AdamW | None = None, start_step: int = 0,
                  stop_step: int | None = None,
                  log_lines: list[str] | None = None,
                  checkpoint_path=None) -> list[float]:
    """Fine-tune attached adapters on (class token + explanation) targets at
    the answer positions. The base model and tokenizer stay frozen; any base
    drift is detected and raised. Returns per-step loss values."""
    if cfg.stage != "lora":
        raise ConfigError(f"finetune_lora got a {cfg.stage!r} config")
    if not samples:
        raise DataError("no training samples")
    trainable = model.trainable_parameters()
    if not trainable:
        raise ConfigError("no trainable parameters: attach adapters first")
    if not all(".adapter." in n for n, _ in trainable):
        raise ConfigError("freeze the base model before fine-tuning adapters")
    base_before = state_digest(model, skip_adapters=True)

    token_seqs = _encode_all(encoder, samples)
    prepared = []
    for sample, toks in zip(samples, token_seqs):
        ids, ans = build_training_sequence(
            model.vocab, toks, instruction, sample.label, sample.explanation,
            model.cfg.context)
        prepared.append((ids, ans))

    opt = optimizer if optimizer is not None else AdamW(
        trainable, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    end = cfg.iterations if stop_step is None else min(stop_step, cfg.iterations)
    losses = []
    for t in range(start_step, end):
        rng = substream(cfg.seed, _S_LORA_BATCH, t)
        idx = rng.choice(len(prepared), size=cfg.batch_size,
                         replace=len(prepared) < cfg.batch_size)
        lr = cosine_lr(t, cfg.iterations, cfg.learning_rate, cfg.min_learning_rate)
        opt.zero_grad()

        def micro_loss(chunk, k):
            chosen = [prepared[i] for i in chunk]
            ids, offs = stack_sequences([ids for ids, _ in chosen])
            rows, targets, weights = [], [], []
            for i, (seq_ids, ans) in enumerate(chosen):
                o, e = int(offs[i]), int(offs[i + 1])
                span = np.arange(o + ans, e - 1)
                rows.append(span)
                targets.append(seq_ids[ans + 1:])
                weights.append(np.full(span.size, 1.0 / (span.size * len(chosen))))
            logits = model(ids, offs, rng=substream(cfg.seed, _S_DROPOUT, t, k),
                           training=True, logits_rows=np.concatenate(rows))
            return ag.cross_entropy(
                logits, np.concatenate(targets),
                row_weights=np.concatenate(weights))

        loss_val = accumulate_gradients(micro_loss, idx, cfg.micro_batch)
        try:
            if not math.isfinite(loss_val):
                raise DivergenceError(f"non-finite loss at step {t}")
            opt.step(lr)
        except DivergenceError:
            if checkpoint_path is not None and adapter_cfg is not None:
                save_lm_checkpoint(checkpoint_path, model, step=t,
                                   optimizer=opt, train_cfg=cfg,
                                   adapter_cfg=adapter_cfg,
                                   instruction=instruction)
            raise
        losses.append(loss_val)
        if log_lines is not None and (t % cfg.log_every == 0 or t == cfg.iterations - 1):
            log_lines.append(f"{t}\t{loss_val:.6f}\t{lr:.8g}")

    if state_digest(model, skip_adapters=True) != base_before:
        raise RuntimeError("frozen base weights changed during fine-tuning")
    if checkpoint_path is not None:
        if adapter_cfg is None:
            raise ConfigError("adapter_cfg is required to checkpoint adapters")
        save_lm_checkpoint(checkpoint_path, model, step=end,
                           optimizer=opt, train_cfg=cfg, adapter_cfg=adapter_cfg,
                           instruction=instruction)
    return losses


def _encode_all(encoder: Encoder, samples: list[ActionSample],
                chunk: int = 64) -> list[np.ndarray]:
    out = []
    for start in range(0, len(samples), chunk):
        part = [s.sequence for s in samples[start:start + chunk]]
        token_seqs, _ = encoder.encode_batch(part)
        out.extend(ts.ids for ts in token_seqs)
    return out


# ---------------------------------------------------------------------------
# language-model checkpoints (base alone, or base + adapters)


def save_lm_checkpoint(path, model: LanguageModel, *, step: int = 0,
                       optimizer: AdamW | None = None,
                       train_cfg: TrainConfig | None = None,
                       adapter_cfg: AdapterConfig | None = None,
                       instruction: str | None = None) -> None:
    vocab = model.vocab
    has_adapters = any(".adapter." in n for n, _ in model.named_parameters())
    if has_adapters and adapter_cfg is None:
        raise ConfigError("adapter_cfg is required to checkpoint an adapted model")
    meta = {"format": "lm", "step": str(step),
            "adapters": "attached" if has_adapters else "none",
            "vocab.words": ",".join(vocab.words),
            "vocab.semantic_size": str(vocab.semantic_size),
            "vocab.num_classes": str(vocab.num_classes)}
    meta.update(_encode_section("lm", model.cfg))
    if train_cfg is not None:
        meta.update(_encode_section("train", train_cfg))
    if has_adapters:
        meta.update(_encode_section("adapter", adapter_cfg))
    if instruction is not None:
        meta["instruction"] = instruction
    tensors = {f"model.{n}": p for n, p in model.state().items()}
    if optimizer is not None:
        tensors.update(optimizer.state())
    save_checkpoint(path, meta, tensors)


def load_lm_checkpoint(path):
    """Rebuild a language model (attaching adapters when the checkpoint has
    them). Returns (model, adapter config or None, train config or None,
    step, optimizer tensors, instruction or None)."""
    meta, tensors = load_checkpoint(path)
    if meta.get("format") != "lm":
        raise DataError(f"{path} is not a language-model checkpoint "
                        f"(format {meta.get('format')!r})")
    vocab = Vocabulary(tuple(meta["vocab.words"].split(",")),
                       int(meta["vocab.semantic_size"]),
                       int(meta["vocab.num_classes"]))
    model = LanguageModel(_decode_section(meta, "lm", LmConfig), vocab,
                          substream(0, 0))
    adapter_cfg = None
    if meta.get("adapters") == "attached":
        adapter_cfg = _decode_section(meta, "adapter", AdapterConfig)
        model.freeze()
        attach_adapters(model, adapter_cfg, substream(0, 0))
    model.load_state({n[len("model."):]: a for n, a in tensors.items()
                      if n.startswith("model.")})
    train_cfg = (_decode_section(meta, "train", TrainConfig)
                 if "train.stage" in meta else None)
    optim_tensors = {n: a for n, a in tensors.items() if n.startswith("optim.")}
    return (model, adapter_cfg, train_cfg, int(meta["step"]), optim_tensors,
            meta.get("instruction"))


def resume_lora(path, samples: list[ActionSample], encoder: Encoder, *,
                log_lines: list[str] | None = None) -> tuple[LanguageModel, list[float]]:
    """Continue adapter fine-tuning from a checkpoint to its configured end."""
    model, adapter_cfg, cfg, step, optim_tensors, instruction = load_lm_checkpoint(path)
    if adapter_cfg is None or cfg is None:
        raise DataError(f"{path} holds no fine-tuning state to resume")
    optimizer = AdamW(model.trainable_parameters(), cfg.beta1, cfg.beta2,
                      cfg.eps, cfg.weight_decay)
    optimizer.load_state(optim_tensors)
    losses = finetune_lora(samples, model, encoder, cfg,
                           instruction=instruction or DEFAULT_INSTRUCTION,
                           adapter_cfg=adapter_cfg, optimizer=optimizer,
                           start_step=step, log_lines=log_lines,
                           checkpoint_path=path)
    return model, losses
