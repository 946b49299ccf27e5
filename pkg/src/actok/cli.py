"""Command-line interface wiring configs, data, training, and reports into
reproducible runs.

Commands:
    gen-data   synthesize a labeled dataset into a manifest directory
    train-vst  train the video tokenizer on the training split
    tokenize   write token lines for clips using a trained tokenizer
    finetune   assemble the frozen base model and fine-tune adapters
    eval       classification report on the held-out split
    explain    write per-clip predictions with generated explanations
    report     run the ablation suite and the hyperparameter sweep

Configuration is a flat ``key = value`` file (``#`` starts a comment line);
repeatable ``--set key=value`` flags override the file. Unknown keys are
rejected. The fully resolved configuration is echoed at run start in the
same ``key = value`` form, so a run can be reconstructed from its log.
Seed precedence: ``--seed`` flag, then the ``seed`` config key, then the
``VSTLM_SEED`` environment variable, then 0.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
All artifacts are deterministic given config and seed; wall-clock timings
appear only in log lines, never in artifact files.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
import typing
from dataclasses import fields
from pathlib import Path

from .autograd import ConfigError
from .data import (ActionSample, DataError, SplitProtocol, SyntheticConfig,
                   generate_synthetic, read_manifest, split, substream,
                   write_manifest)
from .encoder import Encoder, EncoderConfig, write_token_lines
from .evaluate import (ablation_suite, accuracy, hyperparam_sweep,
                       render_table)
from .lm import (DEFAULT_INSTRUCTION, LmConfig, PromptError, Vocabulary,
                 classify_batch, generate_explanations)
from .lora import AdapterConfig, attach_adapters
from .pipeline import (PipelineConfig, assemble_base, _S_ADAPTER_INIT,
                       _S_ENCODER_INIT)
from .train import (DivergenceError, TrainConfig, finetune_lora,
                    load_lm_checkpoint, load_vst_checkpoint,
                    lora_train_defaults, train_vst, vst_train_defaults)


class UsageError(Exception):
    """Bad command line or malformed configuration syntax."""


# ---------------------------------------------------------------------------
# configuration: flat key = value, namespaced onto the stage configs


_SECTIONS = {
    "data": SyntheticConfig,
    "vst": EncoderConfig,
    "lm": LmConfig,
    "train": TrainConfig,
    "adapter": AdapterConfig,
    "split": SplitProtocol,
}
_PRETRAIN_FIELDS = {"iterations": int, "learning_rate": float,
                    "batch_size": int}
_SCALARS = {"seed": int, "instruction": str, "corpus_sentences": int}
# structural fields the commands decide for themselves
_HIDDEN = {("train", "stage")}


def _section_types(section: str) -> dict[str, type]:
    hints = typing.get_type_hints(_SECTIONS[section])
    return {name: tp for name, tp in hints.items()
            if (section, name) not in _HIDDEN}


def _parse_value(key: str, raw: str, tp):
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            item = typing.get_args(tp)[0]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(item(p) for p in parts)
        if tp is bool:
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        return tp(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} "
                          f"as {getattr(tp, '__name__', tp)}")


def _validate_key(key: str) -> None:
    if key in _SCALARS:
        return
    section, _, name = key.partition(".")
    if section == "pretrain" and name in _PRETRAIN_FIELDS:
        return
    if section in _SECTIONS and name in _section_types(section):
        return
    raise ConfigError(f"unknown config key {key!r}")


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` lines and blank lines are skipped;
    later occurrences of a key win."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        key, sep, value = text.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected 'key = value', "
                             f"got {line!r}")
        out[key.strip()] = value.strip()
    return out


def merge_config(args) -> dict[str, str]:
    """File contents overlaid with field-by-field ``--set`` flags, every
    key validated against the known namespaces."""
    raw = read_config_file(args.config) if args.config else {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects key=value, got {item!r}")
        raw[key.strip()] = value.strip()
    for key in raw:
        _validate_key(key)
    return raw


def _section_kwargs(raw: dict[str, str], section: str) -> dict:
    types = _section_types(section)
    out = {}
    for key, value in raw.items():
        sec, _, name = key.partition(".")
        if sec == section and name in types:
            out[name] = _parse_value(key, value, types[name])
    return out


def resolve_seed(args, raw: dict[str, str]) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in raw:
        return _parse_value("seed", raw["seed"], int)
    env = os.environ.get("VSTLM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"VSTLM_SEED must be an integer, got {env!r}")
    return 0


class RunConfig:
    """Typed stage configs resolved from the merged key-value map. Seeds
    flow from the run seed into any stage whose own seed key is unset."""

    def __init__(self, args, stage: str | None = None):
        raw = merge_config(args)
        self.seed = resolve_seed(args, raw)
        data_kwargs = _section_kwargs(raw, "data")
        data_kwargs.setdefault("seed", self.seed)
        self.data = SyntheticConfig(**data_kwargs)
        vst_kwargs = _section_kwargs(raw, "vst")
        vst_kwargs.setdefault("feature_dim", self.data.feature_dim)
        self.encoder = EncoderConfig(**vst_kwargs)
        self.lm = LmConfig(**_section_kwargs(raw, "lm"))
        self.adapter = AdapterConfig(**_section_kwargs(raw, "adapter"))
        split_kwargs = _section_kwargs(raw, "split")
        self.protocol = SplitProtocol(split_kwargs.get("kind", "x-sub"),
                                      tuple(split_kwargs.get("held_in", ())))
        train_kwargs = _section_kwargs(raw, "train")
        train_kwargs.setdefault("seed", self.seed)
        self._train_raw = train_kwargs
        defaults = {"vst": vst_train_defaults, "lora": lora_train_defaults}
        self.train = (defaults[stage](**train_kwargs)
                      if stage is not None else None)
        self.pretrain = {
            name: _parse_value(f"pretrain.{name}", raw[f"pretrain.{name}"], tp)
            for name, tp in _PRETRAIN_FIELDS.items()
            if f"pretrain.{name}" in raw}
        self.corpus_sentences = (
            _parse_value("corpus_sentences", raw["corpus_sentences"], int)
            if "corpus_sentences" in raw else 300)
        config_instruction = raw.get("instruction")
        flag = getattr(args, "instruction", None)
        self.instruction = flag if flag is not None else config_instruction
        # may stay None: commands fall back to a checkpoint's stored
        # instruction and finally to the default question

    def echo(self) -> None:
        """Print the fully resolved configuration as reusable config lines."""
        print("# resolved configuration")
        rows: list[tuple[str, object]] = [("seed", self.seed)]
        if self.instruction is not None:
            rows.append(("instruction", self.instruction))
        rows.append(("corpus_sentences", self.corpus_sentences))
        for name, value in sorted(self.pretrain.items()):
            rows.append((f"pretrain.{name}", value))
        sections = [("data", self.data), ("vst", self.encoder),
                    ("lm", self.lm), ("adapter", self.adapter),
                    ("split", self.protocol)]
        if self.train is not None:
            sections.append(("train", self.train))
        else:
            rows.extend((f"train.{k}", v)
                        for k, v in sorted(self._train_raw.items()))
        for section, cfg in sections:
            for f in fields(cfg):
                if (section, f.name) in _HIDDEN:
                    continue
                rows.append((f"{section}.{f.name}",
                             getattr(cfg, f.name)))
        for key, value in rows:
            print(f"{key} = {_config_text(value)}")

    def effective_instruction(self, stored: str | None = None) -> str:
        if self.instruction is not None:
            return self.instruction
        if stored is not None:
            return stored
        return DEFAULT_INSTRUCTION

    def pretrain_kwargs(self) -> dict:
        return {("pretrain_batch" if k == "batch_size" else f"pretrain_{k}"): v
                for k, v in self.pretrain.items()}

    def pipeline(self) -> PipelineConfig:
        # the train.* namespace covers whichever stages a command runs;
        # `report` runs both, so its overrides land on both stage configs
        return PipelineConfig(
            data=self.data, protocol=self.protocol, encoder=self.encoder,
            lm=self.lm, adapter=self.adapter,
            vst_train=vst_train_defaults(**self._train_raw),
            lora_train=lora_train_defaults(**self._train_raw),
            corpus_sentences=self.corpus_sentences,
            instruction=self.effective_instruction(), seed=self.seed,
            **self.pretrain_kwargs())


def _config_text(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# shared command plumbing


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _load_samples(data_arg) -> list[ActionSample]:
    path = Path(data_arg)
    manifest = path / "manifest.tsv" if path.is_dir() else path
    _require(manifest, "dataset manifest")
    return read_manifest(manifest)


def _num_classes(samples: list[ActionSample]) -> int:
    return max(s.label for s in samples) + 1


def _subset(samples, protocol: SplitProtocol, which: str):
    if which == "all":
        return samples
    train, test = split(samples, protocol)
    return train if which == "train" else test


def _encode_ids(encoder, samples, chunk=64):
    out = []
    for start in range(0, len(samples), chunk):
        token_seqs, _ = encoder.encode_batch(
            [s.sequence for s in samples[start:start + chunk]])
        out.extend(token_seqs)
    return out


def _manifest_vocabulary(samples, codebook_size: int) -> Vocabulary:
    extra = sorted({word for s in samples
                    for word in s.explanation.lower().split()})
    return Vocabulary.build(codebook_size, _num_classes(samples),
                            extra_text=tuple(extra))


def _print_losses(stage: str, losses: list[float]) -> None:
    if losses:
        print(f"{stage}: {len(losses)} steps, "
              f"loss {losses[0]:.4f} -> {losses[-1]:.4f}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = RunConfig(args)
    cfg.echo()
    samples = generate_synthetic(cfg.data)
    manifest = write_manifest(args.out, samples)
    print(f"wrote {manifest} ({len(samples)} clips)")
    return 0


def cmd_train_vst(args) -> int:
    cfg = RunConfig(args, stage="vst")
    cfg.echo()
    samples = _load_samples(args.data)
    train_samples, _ = split(samples, cfg.protocol)
    encoder = Encoder(cfg.encoder, _num_classes(samples),
                      substream(cfg.seed, _S_ENCODER_INIT))
    started = time.perf_counter()
    log: list[str] = []
    losses = train_vst(train_samples, encoder, cfg.train,
                       log_lines=log, checkpoint_path=args.out)
    for line in log:
        print(line)
    _print_losses("tokenizer training", losses)
    print(f"wrote {args.out}")
    print(f"finished in {time.perf_counter() - started:.1f}s")
    return 0


def cmd_tokenize(args) -> int:
    cfg = RunConfig(args)
    cfg.echo()
    encoder, _, _, _ = load_vst_checkpoint(
        _require(args.vst, "tokenizer checkpoint"))
    samples = _subset(_load_samples(args.data), cfg.protocol, args.subset)
    if not samples:
        raise DataError(f"no samples in subset {args.subset!r}")
    write_token_lines(args.out, _encode_ids(encoder, samples))
    print(f"wrote {args.out} ({len(samples)} clips)")
    return 0


def cmd_finetune(args) -> int:
    cfg = RunConfig(args, stage="lora")
    cfg.echo()
    encoder, _, _, _ = load_vst_checkpoint(
        _require(args.vst, "tokenizer checkpoint"))
    samples = _load_samples(args.data)
    train_samples, _ = split(samples, cfg.protocol)
    started = time.perf_counter()
    log: list[str] = []
    vocab = _manifest_vocabulary(samples, encoder.cfg.codebook_size)
    model, _, pre_losses = assemble_base(
        encoder, cfg.data, cfg.lm, vocab=vocab,
        corpus_sentences=cfg.corpus_sentences,
        seed=cfg.seed, log_lines=log, **cfg.pretrain_kwargs())
    _print_losses("base pretraining", pre_losses)
    attach_adapters(model, cfg.adapter, substream(cfg.seed, _S_ADAPTER_INIT))
    instruction = cfg.effective_instruction()
    losses = finetune_lora(train_samples, model, encoder, cfg.train,
                           instruction=instruction, adapter_cfg=cfg.adapter,
                           log_lines=log, checkpoint_path=args.out)
    for line in log:
        print(line)
    _print_losses("adapter fine-tuning", losses)
    print(f"wrote {args.out}")
    print(f"finished in {time.perf_counter() - started:.1f}s")
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig(args)
    cfg.echo()
    encoder, _, _, _ = load_vst_checkpoint(
        _require(args.vst, "tokenizer checkpoint"))
    model, _, _, _, _, stored = load_lm_checkpoint(
        _require(args.lm, "model checkpoint"))
    _, test_samples = split(_load_samples(args.data), cfg.protocol)
    report = accuracy(model, encoder, test_samples, cfg.protocol,
                      instruction=cfg.effective_instruction(stored))
    Path(args.out).write_text(report.render())
    print(f"accuracy: {report.accuracy:.4f} on {report.sample_count} clips")
    print(f"wrote {args.out}")
    return 0


def cmd_explain(args) -> int:
    cfg = RunConfig(args)
    cfg.echo()
    encoder, _, _, _ = load_vst_checkpoint(
        _require(args.vst, "tokenizer checkpoint"))
    model, _, _, _, _, stored = load_lm_checkpoint(
        _require(args.lm, "model checkpoint"))
    samples = _subset(_load_samples(args.data), cfg.protocol, args.subset)
    if not samples:
        raise DataError(f"no samples in subset {args.subset!r}")
    instruction = cfg.effective_instruction(stored)
    token_seqs = [ts.ids for ts in _encode_ids(encoder, samples)]
    preds = classify_batch(model, token_seqs, instruction)
    words, truncated = generate_explanations(model, token_seqs, preds,
                                             instruction)
    lines = ["#video_id\tlabel\tpredicted\texplanation"]
    for sample, pred, text, cut in zip(samples, preds, words, truncated):
        suffix = " ..." if cut else ""
        lines.append(f"{sample.video_id}\t{sample.label}\t{int(pred)}"
                     f"\t{' '.join(text)}{suffix}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    correct = sum(int(p) == s.label for p, s in zip(preds, samples))
    print(f"wrote {args.out} ({correct}/{len(samples)} correct)")
    return 0


def cmd_report(args) -> int:
    cfg = RunConfig(args)
    cfg.echo()
    pipeline_cfg = cfg.pipeline()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    rows = ablation_suite(pipeline_cfg)
    ablation_text = render_table(rows)
    (out_dir / "ablation.tsv").write_text(ablation_text)
    print("ablation:")
    print(ablation_text, end="")

    ranks = tuple(args.ranks)
    vocabs = tuple(args.vocab_sizes)
    grid = hyperparam_sweep(pipeline_cfg, ranks=ranks, vocab_sizes=vocabs,
                            baseline_rank=args.baseline_rank,
                            baseline_vocab=args.baseline_vocab)
    sweep_text = render_table(grid)
    (out_dir / "sweep.tsv").write_text(sweep_text)
    print("sweep:")
    print(sweep_text, end="")
    print(f"wrote {out_dir / 'ablation.tsv'} and {out_dir / 'sweep.tsv'}")
    print(f"finished in {time.perf_counter() - started:.1f}s")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in raw.split(",") if p.strip())
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {raw!r}")


def _add_common(sub, instruction=False):
    sub.add_argument("--config", help="key = value configuration file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one config key (repeatable)")
    sub.add_argument("--seed", type=int,
                     help="run seed (overrides config and VSTLM_SEED)")
    if instruction:
        sub.add_argument("--instruction",
                         help="instruction text given to the model "
                              f"(default: {DEFAULT_INSTRUCTION!r})")


def build_parser() -> _Parser:
    parser = _Parser(prog="actok", description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest="command", metavar="COMMAND",
                                 parser_class=_Parser)

    p = commands.add_parser("gen-data",
                            help="synthesize a dataset into a directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = commands.add_parser("train-vst",
                            help="train the video tokenizer")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True, help="tokenizer checkpoint path")
    _add_common(p)
    p.set_defaults(fn=cmd_train_vst)

    p = commands.add_parser("tokenize",
                            help="write token lines for clips")
    p.add_argument("--vst", required=True, help="tokenizer checkpoint")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True, help="token lines output path")
    p.add_argument("--subset", choices=("all", "train", "test"),
                   default="all", help="which protocol subset to tokenize")
    _add_common(p)
    p.set_defaults(fn=cmd_tokenize)

    p = commands.add_parser("finetune",
                            help="assemble the base model and fine-tune adapters")
    p.add_argument("--vst", required=True, help="tokenizer checkpoint")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True, help="model checkpoint path")
    _add_common(p, instruction=True)
    p.set_defaults(fn=cmd_finetune)

    p = commands.add_parser("eval",
                            help="evaluate on the held-out split")
    p.add_argument("--vst", required=True, help="tokenizer checkpoint")
    p.add_argument("--lm", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True, help="report output path")
    _add_common(p, instruction=True)
    p.set_defaults(fn=cmd_eval)

    p = commands.add_parser("explain",
                            help="write predictions with explanations")
    p.add_argument("--vst", required=True, help="tokenizer checkpoint")
    p.add_argument("--lm", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True, help="predictions output path")
    p.add_argument("--subset", choices=("all", "train", "test"),
                   default="test", help="which protocol subset to explain")
    _add_common(p, instruction=True)
    p.set_defaults(fn=cmd_explain)

    p = commands.add_parser("report",
                            help="run the ablation suite and parameter sweep")
    p.add_argument("--out", required=True, help="output directory for tables")
    p.add_argument("--ranks", type=_int_list, default=(4, 8, 16, 32),
                   help="adapter ranks to sweep (comma-separated)")
    p.add_argument("--vocab-sizes", type=_int_list, default=(256, 512, 1024),
                   help="codebook sizes to sweep (comma-separated)")
    p.add_argument("--baseline-rank", type=int, default=8)
    p.add_argument("--baseline-vocab", type=int, default=512)
    _add_common(p, instruction=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "fn", None) is None:
            parser.print_help()
            return 1
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, PromptError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
