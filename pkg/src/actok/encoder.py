"""Feature-sequence encoder: temporal self-attention over frame features,
pooling to a fixed token count, projection into the language model's
embedding space, and vector quantization against a learnable codebook.

The codebook is trained by exponential moving averages of assigned rows
(count-normalized), not by gradient descent; the encoder itself trains
through a straight-through estimator with a commitment penalty plus a
linear class probe on the mean pooled quantized embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import kernels
from .autograd import ConfigError, Parameter, Tensor
from .data import DataError, FeatureSequence
from .nn import Linear, Module, TransformerBlock


@dataclass
class EncoderConfig:
    feature_dim: int = 32
    model_dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    max_positions: int = 128
    tokens_per_clip: int = 16
    codebook_size: int = 512
    embed_dim: int = 128
    commitment_weight: float = 0.25
    smoothness_weight: float = 0.1
    ema_decay: float = 0.99
    reseed_after: int = 2000

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )
        if self.tokens_per_clip < 1:
            raise ConfigError(f"tokens_per_clip must be >= 1, got {self.tokens_per_clip}")
        if self.codebook_size < 2:
            raise ConfigError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.commitment_weight < 0 or self.smoothness_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in (0, 1), got {self.ema_decay}")
        if self.reseed_after < 1:
            raise ConfigError(f"reseed_after must be >= 1, got {self.reseed_after}")


@dataclass(frozen=True)
class TokenSequence:
    """Discrete semantic token ids for one clip."""
    video_id: str
    ids: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.ids, dtype=np.int64)
        if arr.ndim != 1 or arr.size < 1:
            raise DataError(f"token sequence {self.video_id!r} must be a non-empty vector")
        if arr.min() < 0:
            raise DataError(f"token sequence {self.video_id!r} has negative ids")
        object.__setattr__(self, "ids", arr)


class Codebook(Module):
    """Learnable embedding table updated by count-normalized EMA.

    Rows untouched for `reseed_after` consecutive steps are re-seeded to a
    random row of the most recent assignment batch.
    """

    def __init__(self, size: int, dim: int, rng: np.random.Generator):
        self.embeddings = Parameter(rng.normal(0.0, 0.05, (size, dim)),
                                    trainable=False, decay=False)
        self.ema_weight = self.embeddings.data.copy()
        self.ema_count = np.ones(size)
        self.usage_counts = np.zeros(size, dtype=np.int64)
        self.last_used = np.zeros(size, dtype=np.int64)
        self.data_initialized = False

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def assign(self, z: np.ndarray) -> np.ndarray:
        """Nearest row (squared Euclidean, lowest index on ties) per z row."""
        return kernels.nearest_codebook(z, self.embeddings.data)

    def lookup(self, ids: np.ndarray) -> np.ndarray:
        return self.embeddings.data[ids]

    def seed_from(self, z: np.ndarray, rng: np.random.Generator) -> None:
        """Data-dependent init: draw rows from an observed projection batch."""
        picks = rng.integers(0, z.shape[0], self.size)
        jitter = rng.normal(0.0, 0.01, (self.size, self.dim))
        self.embeddings.data = z[picks] + jitter
        self.ema_weight = self.embeddings.data.copy()
        self.ema_count = np.ones(self.size)
        self.data_initialized = True

    def ema_update(self, z: np.ndarray, ids: np.ndarray, decay: float, step: int) -> None:
        """Move assigned rows toward their assigned inputs.

        Count-normalized form: for rows with assignments,
            N <- decay * N + (1 - decay) * n
            m <- decay * m + (1 - decay) * sum(z assigned)
            e <- m / N
        Unassigned rows keep both m and N (decaying them would not change
        the ratio), so their embedding stays bitwise stable.
        """
        n = np.bincount(ids, minlength=self.size).astype(np.float64)
        used = n > 0
        sums = np.zeros_like(self.ema_weight)
        np.add.at(sums, ids, z)
        self.ema_count[used] = decay * self.ema_count[used] + (1.0 - decay) * n[used]
        self.ema_weight[used] = decay * self.ema_weight[used] + (1.0 - decay) * sums[used]
        self.embeddings.data = self.embeddings.data.copy()
        self.embeddings.data[used] = self.ema_weight[used] / self.ema_count[used, None]
        self.usage_counts += n.astype(np.int64)
        self.last_used[used] = step

    def reseed_dead(self, recent_z: np.ndarray, step: int, reseed_after: int,
                    rng: np.random.Generator) -> int:
        """Re-seed rows unused for `reseed_after` consecutive steps."""
        dead = np.flatnonzero(step - self.last_used >= reseed_after)
        if dead.size:
            self.embeddings.data = self.embeddings.data.copy()
            for row in dead:
                z = recent_z[int(rng.integers(0, recent_z.shape[0]))]
                self.embeddings.data[row] = z
                self.ema_weight[row] = z
                self.ema_count[row] = 1.0
                self.last_used[row] = step
        return dead.size

    def utilization(self) -> float:
        return float((self.usage_counts > 0).sum()) / self.size

    def extra_state(self) -> dict[str, np.ndarray]:
        return {
            "codebook.ema_weight": self.ema_weight,
            "codebook.ema_count": self.ema_count,
            "codebook.usage_counts": self.usage_counts.astype(np.float64),
            "codebook.last_used": self.last_used.astype(np.float64),
            "codebook.data_initialized": np.array([float(self.data_initialized)]),
        }

    def load_extra_state(self, tensors: dict[str, np.ndarray]) -> None:
        self.ema_weight = np.asarray(tensors["codebook.ema_weight"], dtype=np.float64).copy()
        self.ema_count = np.asarray(tensors["codebook.ema_count"], dtype=np.float64).copy()
        self.usage_counts = np.asarray(tensors["codebook.usage_counts"]).astype(np.int64)
        self.last_used = np.asarray(tensors["codebook.last_used"]).astype(np.int64)
        self.data_initialized = bool(tensors["codebook.data_initialized"][0])


class Encoder(Module):
    """Maps frame-feature sequences to discrete token sequences."""

    def __init__(self, cfg: EncoderConfig, num_classes: int, rng: np.random.Generator):
        self.cfg = cfg
        self.input_proj = Linear(cfg.feature_dim, cfg.model_dim, rng, std=0.1)
        self.pos = Parameter(rng.normal(0.0, 0.01, (cfg.max_positions, cfg.model_dim)))
        self.blocks = [TransformerBlock(cfg.model_dim, cfg.heads, cfg.ffn_dim, rng)
                       for _ in range(cfg.layers)]
        self.project = Linear(cfg.model_dim, cfg.embed_dim, rng, std=0.1)
        self.probe = Linear(cfg.embed_dim, num_classes, rng, std=0.1)
        self.codebook = Codebook(cfg.codebook_size, cfg.embed_dim, rng)

    # `cfg` is a plain attribute; Module parameter discovery skips it.

    def attend(self, stacked: Tensor, offsets: np.ndarray):
        """Temporal self-attention (non-causal) over each clip segment."""
        lengths = np.diff(offsets)
        if lengths.max(initial=0) > self.cfg.max_positions:
            raise ConfigError(
                f"clip of {int(lengths.max())} frames exceeds positional table "
                f"({self.cfg.max_positions}); raise max_positions or shorten clips"
            )
        positions = np.concatenate([np.arange(m) for m in lengths])
        x = self.input_proj(stacked)
        x = ag.add(x, ag.gather_rows(self.pos, positions))
        for blk in self.blocks:
            x = blk(x, offsets=offsets)
        return x

    def project_tokens(self, stacked: Tensor, offsets: np.ndarray) -> Tensor:
        """Attend, pool every clip to tokens_per_clip rows, and project into
        codebook space. Output is [clips * tokens_per_clip, embed_dim]."""
        attended = self.attend(stacked, offsets)
        pooled = ag.segment_mean_pool(attended, offsets, self.cfg.tokens_per_clip)
        return self.project(pooled)

    def quantize(self, z: Tensor):
        """Straight-through quantization. Returns (ids, z_q data, z_st)."""
        ids = self.codebook.assign(z.data)
        z_q = self.codebook.lookup(ids)
        z_st = ag.add_detached(z, z_q - z.data)
        return ids, z_q, z_st

    def encode_batch(self, sequences: list[FeatureSequence]):
        """Tokens for a batch of clips (no training side effects)."""
        stacked, offsets = stack_features(sequences)
        z = self.project_tokens(Tensor(stacked), offsets)
        ids = self.codebook.assign(z.data)
        k = self.cfg.tokens_per_clip
        return [TokenSequence(seq.video_id, ids[i * k:(i + 1) * k])
                for i, seq in enumerate(sequences)], z

    def encode(self, seq: FeatureSequence) -> TokenSequence:
        return self.encode_batch([seq])[0][0]


def stack_features(sequences: list[FeatureSequence]):
    if not sequences:
        raise DataError("cannot stack an empty batch")
    dims = {s.features.shape[1] for s in sequences}
    if len(dims) != 1:
        raise DataError(f"inconsistent feature dims in batch: {sorted(dims)}")
    stacked = np.concatenate([s.features for s in sequences], axis=0)
    offsets = np.cumsum([0] + [s.features.shape[0] for s in sequences]).astype(np.int64)
    return stacked, offsets


def switch_fraction(ids: np.ndarray, tokens_per_clip: int) -> float:
    """Mean fraction of adjacent token pairs that differ, per clip."""
    if tokens_per_clip < 2:
        return 0.0
    ids = ids.reshape(-1, tokens_per_clip)
    return float((ids[:, 1:] != ids[:, :-1]).mean())


def training_loss(encoder: Encoder, z: Tensor, z_q: np.ndarray, z_st: Tensor,
                  ids: np.ndarray, labels: np.ndarray,
                  sample_weights: np.ndarray | None = None):
    """Composite encoder loss over a stacked batch.

    classification cross-entropy of the linear probe on each clip's mean
    quantized embedding, plus commitment_weight * mean||z - sg(z_q)||^2,
    plus smoothness_weight * (token switch fraction, a reported constant
    with no gradient path).
    """
    cfg = encoder.cfg
    k = cfg.tokens_per_clip
    n_clips = z.shape[0] // k
    clip_offsets = (np.arange(n_clips + 1) * k).astype(np.int64)
    pooled = ag.segment_mean_pool(z_st, clip_offsets, 1)
    logits = encoder.probe(pooled)
    l_cls = ag.cross_entropy(logits, labels, row_weights=sample_weights)
    commit = ag.mean_sq_diff(z, z_q)
    smooth = cfg.smoothness_weight * switch_fraction(ids, k)
    total = ag.add(l_cls, ag.scale(commit, cfg.commitment_weight))
    total = ag.add_detached(total, np.asarray(smooth))
    return total, l_cls, commit, smooth


# ---------------------------------------------------------------------------
# token export format: video_id<TAB>id1,id2,...
# ---------------------------------------------------------------------------

def write_token_lines(path, sequences: list[TokenSequence]) -> None:
    with open(path, "w") as fh:
        for seq in sequences:
            fh.write(f"{seq.video_id}\t{','.join(str(i) for i in seq.ids)}\n")


def read_token_lines(path) -> list[TokenSequence]:
    out = []
    for lineno, line in enumerate(open(path).read().splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected video_id<TAB>ids")
        try:
            ids = np.array([int(tok) for tok in parts[1].split(",")], dtype=np.int64)
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer token id") from None
        out.append(TokenSequence(parts[0], ids))
    if not out:
        raise DataError(f"{path}: no token lines")
    return out
