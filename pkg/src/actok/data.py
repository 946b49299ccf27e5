"""Synthetic action dataset, split protocols, and on-disk interchange
formats (binary feature files and a tab-separated manifest).

Each clip walks through its class's sequence of phase prototypes; frames
add a per-subject offset, pass through a per-view linear map, and receive
Gaussian noise. Magnitudes are chosen so that a nearest-prototype vote is
nearly perfect while subject/view shifts still matter for generalization.

All randomness derives from named substreams of a single integer seed, so
any sample can be regenerated in isolation.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"VSTF1"

SUBJECT_SCALE = 0.4
VIEW_SCALE = 0.15

# Deterministic bundled word list. The first `classes` entries name the
# classes; phase names are drawn further in. Glue words used by sentence
# templates live in TEMPLATE_WORDS.
WORDS = (
    "wave", "clap", "jump", "kick", "punch", "bow", "run", "stretch",
    "crouch", "spin", "reach", "grab", "lift", "drop", "push", "pull",
    "turn", "twist", "bend", "lean", "step", "slide", "hop", "nod",
    "shake", "point", "raise", "lower", "hold", "release", "swing", "throw",
    "catch", "toss", "tap", "touch", "press", "open", "close", "carry",
    "place", "pick", "rest", "pause", "start", "stop", "shift", "glance",
    "look", "watch", "breathe", "curl", "fold", "cross", "extend", "flex",
    "drift", "settle", "rise", "sink", "sway", "tilt", "roll", "kneel",
    "stand", "sit", "walk", "march", "dash", "leap", "duck", "dodge",
    "balance", "freeze", "wiggle", "stomp", "snap", "clasp", "wring", "pat",
    "rub", "scratch", "brush", "sweep", "dig", "pour", "stack", "slidein",
    "draw", "write", "wipe", "polish", "fasten", "loosen", "fling", "crawl",
)

TEMPLATE_WORDS = (
    "subject", "performs", "through", "phases", "the", "video", "shows",
    "then", "follows", "and", "ends", "with", "first", "a", "of",
)

# substream tags
_S_PROTO, _S_SUBJECT, _S_VIEW, _S_SAMPLE, _S_CORPUS = 1, 2, 3, 4, 5


class DataError(ValueError):
    """Malformed input data or files."""


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent RNG stream named by (seed, key...)."""
    return np.random.default_rng([int(seed)] + [int(k) for k in key])


@dataclass(frozen=True)
class FeatureSequence:
    """A clip's per-frame feature rows, shape [frames, feature_dim]."""
    video_id: str
    features: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1:
            raise DataError(f"feature sequence {self.video_id!r} must be [M>=1, d], got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise DataError(f"feature sequence {self.video_id!r} contains non-finite values")
        object.__setattr__(self, "features", f)


@dataclass(frozen=True)
class ActionSample:
    video_id: str
    sequence: FeatureSequence
    label: int
    subject: int
    view: int
    setup: int
    explanation: str


@dataclass
class SyntheticConfig:
    classes: int = 10
    subjects: int = 10
    views: int = 3
    setups: int = 2
    phases: int = 4
    frames_min: int = 40
    frames_max: int = 80
    feature_dim: int = 32
    noise: float = 0.3
    clips_per_combo: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise DataError(f"need at least 2 classes, got {self.classes}")
        if min(self.subjects, self.views, self.setups, self.clips_per_combo) < 1:
            raise DataError("subjects/views/setups/clips_per_combo must be >= 1")
        if self.phases < 1:
            raise DataError(f"phases must be >= 1, got {self.phases}")
        if not 1 <= self.frames_min <= self.frames_max:
            raise DataError(
                f"frame range invalid: [{self.frames_min}, {self.frames_max}]"
            )
        if self.feature_dim < 1:
            raise DataError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.noise < 0:
            raise DataError(f"noise must be >= 0, got {self.noise}")

    @property
    def total_clips(self) -> int:
        return (self.classes * self.subjects * self.views * self.setups
                * self.clips_per_combo)


def class_name(c: int) -> str:
    return WORDS[c % len(WORDS)]


def phase_names(cfg: SyntheticConfig, c: int) -> list[str]:
    base = cfg.classes
    return [WORDS[(base + c * cfg.phases + j) % len(WORDS)] for j in range(cfg.phases)]


def explanation_text(cfg: SyntheticConfig, c: int) -> str:
    return (f"subject performs {class_name(c)} through phases "
            + " ".join(phase_names(cfg, c)))


def class_prototypes(cfg: SyntheticConfig, seed: int, c: int) -> np.ndarray:
    """Per-phase prototype rows for one class, shape [phases, feature_dim]."""
    return substream(seed, _S_PROTO, c).normal(0.0, 1.0, (cfg.phases, cfg.feature_dim))


def subject_offset(cfg: SyntheticConfig, seed: int, s: int) -> np.ndarray:
    return substream(seed, _S_SUBJECT, s).normal(0.0, SUBJECT_SCALE, cfg.feature_dim)


def view_matrix(cfg: SyntheticConfig, seed: int, v: int) -> np.ndarray:
    d = cfg.feature_dim
    g = substream(seed, _S_VIEW, v).normal(0.0, 1.0, (d, d)) / math.sqrt(d)
    return np.eye(d) + VIEW_SCALE * g


def _phase_durations(rng: np.random.Generator, phases: int, frames: int) -> np.ndarray:
    """Random positive phase durations summing exactly to `frames`."""
    if frames < phases:
        raise DataError(f"clip of {frames} frames cannot hold {phases} phases")
    weights = rng.random(phases) + 0.2
    raw = weights / weights.sum() * (frames - phases)
    counts = np.floor(raw).astype(np.int64) + 1
    # distribute the remainder by largest fractional part, ties to low index
    short = frames - counts.sum()
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    for j in range(short):
        counts[order[j]] += 1
    return counts


def _sample_index(cfg: SyntheticConfig, c: int, s: int, v: int, e: int, clip: int) -> int:
    return ((((c * cfg.subjects + s) * cfg.views + v) * cfg.setups + e)
            * cfg.clips_per_combo + clip)


def generate_sample(cfg: SyntheticConfig, seed: int, c: int, s: int, v: int,
                    e: int, clip: int, protos: np.ndarray,
                    offset: np.ndarray, vmat: np.ndarray) -> ActionSample:
    idx = _sample_index(cfg, c, s, v, e, clip)
    rng = substream(seed, _S_SAMPLE, idx)
    frames = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
    durations = _phase_durations(rng, cfg.phases, frames)
    phase_of_frame = np.repeat(np.arange(cfg.phases), durations)
    clean = (protos[phase_of_frame] + offset) @ vmat.T
    noise = rng.normal(0.0, cfg.noise, (frames, cfg.feature_dim)) if cfg.noise > 0 else 0.0
    feats = clean + noise
    vid = f"clip{idx:05d}"
    return ActionSample(
        video_id=vid,
        sequence=FeatureSequence(vid, feats),
        label=c, subject=s, view=v, setup=e,
        explanation=explanation_text(cfg, c),
    )


def generate_synthetic(cfg: SyntheticConfig, seed: int | None = None) -> list[ActionSample]:
    """Full grid of clips: classes x subjects x views x setups x clips."""
    seed = cfg.seed if seed is None else seed
    protos = [class_prototypes(cfg, seed, c) for c in range(cfg.classes)]
    offsets = [subject_offset(cfg, seed, s) for s in range(cfg.subjects)]
    vmats = [view_matrix(cfg, seed, v) for v in range(cfg.views)]
    samples = []
    for c in range(cfg.classes):
        for s in range(cfg.subjects):
            for v in range(cfg.views):
                for e in range(cfg.setups):
                    for clip in range(cfg.clips_per_combo):
                        samples.append(generate_sample(
                            cfg, seed, c, s, v, e, clip,
                            protos[c], offsets[s], vmats[v]))
    return samples


def nearest_prototype_accuracy(samples: list[ActionSample], cfg: SyntheticConfig,
                               seed: int | None = None) -> float:
    """Majority vote of per-frame nearest class-phase prototype. This is the
    sanity ceiling for any learned pipeline on this data."""
    seed = cfg.seed if seed is None else seed
    protos = np.concatenate([class_prototypes(cfg, seed, c) for c in range(cfg.classes)])
    owner = np.repeat(np.arange(cfg.classes), cfg.phases)
    sq = (protos * protos).sum(axis=1)
    correct = 0
    for sample in samples:
        f = sample.sequence.features
        d2 = sq[None, :] - 2.0 * (f @ protos.T)
        votes = owner[d2.argmin(axis=1)]
        counts = np.bincount(votes, minlength=cfg.classes)
        if counts.argmax() == sample.label:
            correct += 1
    return correct / len(samples)


# ---------------------------------------------------------------------------
# split protocols
# ---------------------------------------------------------------------------

PROTOCOL_FIELDS = {"x-sub": "subject", "x-view": "view", "x-set": "setup"}
DEFAULT_HELD_IN = {"x-sub": (0, 2, 4, 6, 8), "x-view": (0, 1), "x-set": (0,)}


@dataclass(frozen=True)
class SplitProtocol:
    kind: str
    held_in: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in PROTOCOL_FIELDS:
            raise DataError(
                f"unknown protocol {self.kind!r}; expected one of {sorted(PROTOCOL_FIELDS)}"
            )
        if not self.held_in:
            object.__setattr__(self, "held_in", DEFAULT_HELD_IN[self.kind])


def split(samples: list[ActionSample], protocol: SplitProtocol):
    """Partition into (train, test) by the protocol's grouping field."""
    attr = PROTOCOL_FIELDS[protocol.kind]
    available = sorted({getattr(s, attr) for s in samples})
    held = set(protocol.held_in)
    if not held:
        raise DataError("held-in set is empty")
    if not held.issubset(available):
        raise DataError(
            f"held-in ids {sorted(held)} not all present; available {attr}s: {available}"
        )
    if held == set(available):
        raise DataError(
            f"held-in set covers every {attr}; nothing left for the test side"
        )
    train = [s for s in samples if getattr(s, attr) in held]
    test = [s for s in samples if getattr(s, attr) not in held]
    return train, test


# ---------------------------------------------------------------------------
# binary feature files
# ---------------------------------------------------------------------------

def write_features(path, seq: FeatureSequence) -> None:
    m, d = seq.features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", m, d))
        fh.write(seq.features.astype("<f8").tobytes(order="C"))


def read_features(path, video_id: str | None = None) -> FeatureSequence:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(FEATURE_MAGIC) + 8:
        raise DataError(f"{path}: truncated feature file ({len(blob)} bytes)")
    if blob[:len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:len(FEATURE_MAGIC)]!r}")
    m, d = struct.unpack_from("<II", blob, len(FEATURE_MAGIC))
    body = blob[len(FEATURE_MAGIC) + 8:]
    want = m * d * 8
    if m < 1 or d < 1 or want > len(body):
        raise DataError(
            f"{path}: extents [{m} x {d}] inconsistent with payload of {len(body)} bytes"
        )
    if want < len(body):
        raise DataError(f"{path}: {len(body) - want} trailing bytes after payload")
    feats = np.frombuffer(body, dtype="<f8").reshape(m, d).astype(np.float64)
    return FeatureSequence(video_id or path.stem, feats)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

MANIFEST_HEADER = "#video_id\tlabel\tsubject\tview\tsetup\tfeatures\texplanation"


def write_manifest(root, samples: list[ActionSample]) -> Path:
    """Write manifest.tsv plus one feature file per sample under root/features/."""
    root = Path(root)
    feat_dir = root / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for s in samples:
        rel = f"features/{s.video_id}.vstf"
        write_features(root / rel, s.sequence)
        if "\t" in s.explanation:
            raise DataError(f"{s.video_id}: explanation text may not contain tabs")
        lines.append(f"{s.video_id}\t{s.label}\t{s.subject}\t{s.view}\t{s.setup}"
                     f"\t{rel}\t{s.explanation}")
    path = root / "manifest.tsv"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> list[ActionSample]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    samples = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise DataError(f"{path}:{lineno}: expected 7 tab-separated fields, got {len(parts)}")
        vid, label, subject, view, setup, rel, explanation = parts
        try:
            label, subject, view, setup = int(label), int(subject), int(view), int(setup)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: non-integer metadata field: {exc}") from None
        feat_path = root / rel
        if not feat_path.exists():
            raise DataError(f"{path}:{lineno}: feature file missing: {feat_path}")
        seq = read_features(feat_path, video_id=vid)
        samples.append(ActionSample(vid, seq, label, subject, view, setup, explanation))
    if not samples:
        raise DataError(f"{path}: manifest has no samples")
    return samples


# ---------------------------------------------------------------------------
# pretraining corpus
# ---------------------------------------------------------------------------

def build_corpus(n_sentences: int, seed: int) -> list[str]:
    """Generic synthetic sentences over the bundled word list. None of them
    mention semantic or class tokens; they only teach word-level structure,
    including the explanation template shape with random fillers."""
    rng = substream(seed, _S_CORPUS)
    sentences = []
    for _ in range(n_sentences):
        w = [WORDS[i] for i in rng.integers(0, len(WORDS), 6)]
        kind = int(rng.integers(0, 5))
        if kind == 0:
            s = f"subject performs {w[0]} through phases {w[1]} {w[2]} {w[3]} {w[4]}"
        elif kind == 1:
            s = f"the video shows {w[0]} then {w[1]}"
        elif kind == 2:
            s = f"{w[0]} follows {w[1]} and ends with {w[2]}"
        elif kind == 3:
            s = f"first {w[0]} then {w[1]} then {w[2]}"
        else:
            s = f"a video of {w[0]} and {w[1]}"
        sentences.append(s)
    return sentences
