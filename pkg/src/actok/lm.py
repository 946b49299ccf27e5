"""Decoder-only language model over a mixed vocabulary.

One dense id space covers control tokens, lowercased text words, the discrete
motion-token symbols produced by the tokenizer, and one label token per action
class. A prompt is laid out as ``<bos> tokens <sep> instruction <ans>``; the
model is read out two ways:

* class prediction is the argmax restricted to the class-token block of the
  logits at the answer position (constrained decoding, ties to the lowest id);
* the explanation is greedy decoding continued after the emitted class token,
  stopping at ``<eos>`` or a length cap.

Batched calls stack several sequences on axis 0 and attention stays confined
to each sequence; logits agree with one-at-a-time calls up to floating-point
reduction order, and the discrete readouts agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ConfigError, Parameter, Tensor
from .data import TEMPLATE_WORDS, WORDS
from .nn import LayerNorm, Linear, Module, TransformerBlock

DEFAULT_INSTRUCTION = "Please identify the action in this video. What is happening?"

PAD_ID, BOS_ID, SEP_ID, ANS_ID, EOS_ID, UNK_ID = range(6)
CONTROL_STRINGS = ("<pad>", "<bos>", "<sep>", "<ans>", "<eos>", "<unk>")


class PromptError(ValueError):
    """Prompt or target construction failed: empty parts or context overflow."""


# ---------------------------------------------------------------------------
# vocabulary


@dataclass(frozen=True)
class Vocabulary:
    """Token ids, dense from 0: six control tokens, then the sorted text
    words, then ``<v0>``..``<v{V-1}>`` motion symbols, then ``<cls_c>``
    label tokens. Unknown words map to ``<unk>``."""

    words: tuple[str, ...]
    semantic_size: int
    num_classes: int

    def __post_init__(self):
        if self.semantic_size < 1 or self.num_classes < 1:
            raise ConfigError("vocabulary needs motion tokens and classes")
        if len(set(self.words)) != len(self.words):
            raise ConfigError("vocabulary words must be unique")
        for w in self.words:
            if not w or w != w.lower() or any(ch.isspace() for ch in w):
                raise ConfigError(f"invalid vocabulary word {w!r}")
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})

    @classmethod
    def build(cls, semantic_size: int, num_classes: int,
              extra_text: tuple[str, ...] = ()) -> "Vocabulary":
        """Assemble the standard vocabulary: generator words, template glue
        words, the default instruction, plus any extra text."""
        words = set(WORDS) | set(TEMPLATE_WORDS)
        words.update(DEFAULT_INSTRUCTION.lower().split())
        for text in extra_text:
            words.update(text.lower().split())
        return cls(tuple(sorted(words)), semantic_size, num_classes)

    @property
    def text_offset(self) -> int:
        return len(CONTROL_STRINGS)

    @property
    def semantic_offset(self) -> int:
        return self.text_offset + len(self.words)

    @property
    def class_offset(self) -> int:
        return self.semantic_offset + self.semantic_size

    @property
    def size(self) -> int:
        return self.class_offset + self.num_classes

    def word_id(self, word: str) -> int:
        i = self._index.get(word)
        return UNK_ID if i is None else self.text_offset + i

    def encode_text(self, text: str) -> np.ndarray:
        words = text.lower().split()
        if not words:
            raise PromptError("cannot encode empty text")
        return np.array([self.word_id(w) for w in words], dtype=np.int64)

    def semantic_id(self, v: int) -> int:
        if not 0 <= v < self.semantic_size:
            raise ConfigError(f"motion token {v} outside [0, {self.semantic_size})")
        return self.semantic_offset + v

    def semantic_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            raise PromptError("empty motion-token sequence")
        if ids.min() < 0 or ids.max() >= self.semantic_size:
            raise ConfigError("motion token id outside codebook range")
        return ids + self.semantic_offset

    def class_token_id(self, c: int) -> int:
        if not 0 <= c < self.num_classes:
            raise ConfigError(f"class {c} outside [0, {self.num_classes})")
        return self.class_offset + c

    def is_class_token(self, token_id: int) -> bool:
        return self.class_offset <= token_id < self.size

    def class_of(self, token_id: int) -> int:
        if not self.is_class_token(token_id):
            raise ConfigError(f"token id {token_id} is not a class token")
        return token_id - self.class_offset

    def token_string(self, token_id: int) -> str:
        i = int(token_id)
        if 0 <= i < self.text_offset:
            return CONTROL_STRINGS[i]
        if i < self.semantic_offset:
            return self.words[i - self.text_offset]
        if i < self.class_offset:
            return f"<v{i - self.semantic_offset}>"
        if i < self.size:
            return f"<cls_{i - self.class_offset}>"
        raise ConfigError(f"token id {i} outside vocabulary of size {self.size}")

    def decode(self, ids) -> list[str]:
        return [self.token_string(i) for i in np.asarray(ids, dtype=np.int64)]


# ---------------------------------------------------------------------------
# prompts and training sequences


def build_prompt(vocab: Vocabulary, token_ids, instruction: str,
                 context: int | None = None) -> np.ndarray:
    """``<bos> tokens <sep> instruction <ans>`` as one id array. The answer
    marker is always the final position."""
    semantic = vocab.semantic_ids(token_ids)
    instr = vocab.encode_text(instruction)
    prompt = np.concatenate((
        [BOS_ID], semantic, [SEP_ID], instr, [ANS_ID],
    )).astype(np.int64)
    if context is not None and prompt.size > context:
        raise PromptError(
            f"prompt length {prompt.size} exceeds context {context} "
            f"({semantic.size} motion tokens + {instr.size} instruction words)")
    return prompt


def build_training_sequence(vocab: Vocabulary, token_ids, instruction: str,
                            class_id: int, explanation: str,
                            context: int | None = None):
    """Prompt followed by its supervised answer: the class token, the
    explanation words, ``<eos>``. Returns ``(ids, answer_start)`` where
    positions ``answer_start ..`` each predict the id one to their right."""
    prompt = build_prompt(vocab, token_ids, instruction)
    answer = np.concatenate((
        [vocab.class_token_id(class_id)],
        vocab.encode_text(explanation),
        [EOS_ID],
    )).astype(np.int64)
    ids = np.concatenate((prompt, answer))
    if context is not None and ids.size > context:
        raise PromptError(
            f"training sequence length {ids.size} exceeds context {context} "
            f"(prompt {prompt.size} + answer {answer.size})")
    return ids, prompt.size - 1


def stack_sequences(sequences: list[np.ndarray]):
    """Concatenate id sequences on axis 0 with boundary offsets."""
    if not sequences:
        raise PromptError("no sequences to stack")
    lengths = [len(s) for s in sequences]
    offsets = np.zeros(len(sequences) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    return np.concatenate(sequences).astype(np.int64), offsets


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class LmConfig:
    embed_dim: int = 128
    layers: int = 4
    heads: int = 4
    ffn_dim: int = 256
    context: int = 128

    def __post_init__(self):
        for name in ("embed_dim", "layers", "heads", "ffn_dim", "context"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")


class LanguageModel(Module):
    """Causal decoder with learned positions and an untied output head."""

    def __init__(self, cfg: LmConfig, vocab: Vocabulary, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab = vocab
        self.embed = Parameter(rng.normal(0.0, 0.02, (vocab.size, cfg.embed_dim)),
                               decay=False)
        self.pos = Parameter(rng.normal(0.0, 0.01, (cfg.context, cfg.embed_dim)),
                             decay=False)
        self.blocks = [TransformerBlock(cfg.embed_dim, cfg.heads, cfg.ffn_dim,
                                        rng, causal=True)
                       for _ in range(cfg.layers)]
        self.final_norm = LayerNorm(cfg.embed_dim)
        self.head = Linear(cfg.embed_dim, vocab.size, rng)

    def _positions(self, offsets: np.ndarray) -> np.ndarray:
        lengths = np.diff(offsets)
        if lengths.size == 0 or lengths.min() < 1:
            raise ConfigError("every stacked sequence must be non-empty")
        if lengths.max() > self.cfg.context:
            raise ConfigError(
                f"sequence length {int(lengths.max())} exceeds context "
                f"{self.cfg.context}")
        return np.concatenate([np.arange(m) for m in lengths]).astype(np.int64)

    def forward_embedded(self, x: Tensor, offsets: np.ndarray,
                         rng: np.random.Generator | None = None,
                         training: bool = False,
                         logits_rows: np.ndarray | None = None) -> Tensor:
        """Run the decoder on pre-built input rows (one per position).
        Positional rows are added here. ``logits_rows`` restricts the output
        head to those row indices (logits for other positions are never
        formed), which keeps readout and fine-tuning from paying the full
        vocabulary-width projection at every position."""
        offsets = np.asarray(offsets, dtype=np.int64)
        h = ag.add(x, ag.gather_rows(self.pos, self._positions(offsets)))
        for block in self.blocks:
            h = block(h, offsets, rng, training)
        h = self.final_norm(h)
        if logits_rows is not None:
            h = ag.gather_rows(h, np.asarray(logits_rows, dtype=np.int64))
        return self.head(h, rng, training)

    def __call__(self, token_ids, offsets=None,
                 rng: np.random.Generator | None = None,
                 training: bool = False,
                 logits_rows: np.ndarray | None = None) -> Tensor:
        """Logits [total positions, vocabulary size] for stacked sequences.
        With ``offsets`` omitted the input is one single sequence. With
        ``logits_rows`` the output has one logit row per requested position,
        in the requested order."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ConfigError("token ids must be a non-empty 1-D array")
        if ids.min() < 0 or ids.max() >= self.vocab.size:
            raise ConfigError(
                f"token id outside vocabulary of size {self.vocab.size}")
        if offsets is None:
            offsets = np.array([0, ids.size], dtype=np.int64)
        x = ag.embedding(self.embed, ids)
        return self.forward_embedded(x, offsets, rng, training, logits_rows)


def install_semantic_embeddings(model: LanguageModel,
                                codebook_rows: np.ndarray) -> float:
    """Copy trained codebook rows into the motion-token block of the input
    embedding, globally rescaled to the text block's RMS so the copied rows
    sit at the magnitude the rest of the table was initialized at. Returns
    the scale used. Cluster geometry (relative distances) is preserved."""
    vocab = model.vocab
    rows = np.asarray(codebook_rows, dtype=np.float64)
    if rows.shape != (vocab.semantic_size, model.cfg.embed_dim):
        raise ConfigError(
            f"codebook shape {rows.shape} does not match the motion-token "
            f"block ({vocab.semantic_size}, {model.cfg.embed_dim})")
    text_block = model.embed.data[vocab.text_offset:vocab.semantic_offset]
    target = float(np.sqrt(np.mean(text_block * text_block)))
    source = float(np.sqrt(np.mean(rows * rows)))
    scale = target / source if source > 0.0 else 1.0
    model.embed.data[vocab.semantic_offset:vocab.class_offset] = rows * scale
    return scale


# ---------------------------------------------------------------------------
# readout


def classify_batch(model: LanguageModel, token_seqs: list[np.ndarray],
                   instruction: str = DEFAULT_INSTRUCTION,
                   batch_size: int = 64) -> np.ndarray:
    """Predicted class per sequence: argmax over class-token logits at the
    answer position. ``np.argmax`` keeps the first maximum, so exact ties
    resolve to the lowest class id."""
    vocab = model.vocab
    out = np.empty(len(token_seqs), dtype=np.int64)
    for start in range(0, len(token_seqs), batch_size):
        chunk = token_seqs[start:start + batch_size]
        prompts = [build_prompt(vocab, s, instruction, model.cfg.context)
                   for s in chunk]
        ids, offsets = stack_sequences(prompts)
        logits = model(ids, offsets, logits_rows=offsets[1:] - 1).data
        block = logits[:, vocab.class_offset:vocab.size]
        out[start:start + len(chunk)] = np.argmax(block, axis=1)
    return out


def classify(model: LanguageModel, token_ids,
             instruction: str = DEFAULT_INSTRUCTION) -> int:
    return int(classify_batch(model, [np.asarray(token_ids)], instruction)[0])


def generate_explanations(model: LanguageModel, token_seqs: list[np.ndarray],
                          class_ids, instruction: str = DEFAULT_INSTRUCTION,
                          max_len: int = 32):
    """Greedy explanations decoded in lockstep after each sequence's class
    token. Returns ``(words, truncated)`` lists: per sequence, the decoded
    word strings (``<eos>`` excluded) and whether the length cap cut the
    sequence off before ``<eos>`` appeared."""
    if max_len < 0:
        raise ConfigError(f"max_len must be >= 0, got {max_len}")
    vocab = model.vocab
    class_ids = np.asarray(class_ids, dtype=np.int64)
    if class_ids.shape != (len(token_seqs),):
        raise ConfigError("need exactly one class id per token sequence")

    seqs = []
    for s, c in zip(token_seqs, class_ids):
        prompt = build_prompt(vocab, s, instruction, model.cfg.context)
        seqs.append(list(prompt) + [vocab.class_token_id(int(c))])

    emitted: list[list[int]] = [[] for _ in seqs]
    finished = [False] * len(seqs)
    for _ in range(max_len):
        active = [i for i, done in enumerate(finished)
                  if not done and len(seqs[i]) < model.cfg.context]
        if not active:
            break
        ids, offsets = stack_sequences(
            [np.array(seqs[i], dtype=np.int64) for i in active])
        logits = model(ids, offsets, logits_rows=offsets[1:] - 1).data
        nxt = np.argmax(logits, axis=1)
        for i, t in zip(active, nxt):
            if int(t) == EOS_ID:
                finished[i] = True
            else:
                emitted[i].append(int(t))
                seqs[i].append(int(t))

    words = [[vocab.token_string(t) for t in toks] for toks in emitted]
    truncated = [not done for done in finished]
    return words, truncated


def generate_explanation(model: LanguageModel, token_ids, class_id: int,
                         instruction: str = DEFAULT_INSTRUCTION,
                         max_len: int = 32):
    words, truncated = generate_explanations(
        model, [np.asarray(token_ids)], [class_id], instruction, max_len)
    return words[0], truncated[0]
