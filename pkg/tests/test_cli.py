"""Command-line round-trips at miniature scale: every command runs end to
end, artifacts are byte-identical across reruns, and failures map to the
documented exit codes."""

import os

import pytest

from actok import cli
from actok.data import read_manifest

TINY_CFG = """\
# miniature configuration for command round-trips
seed = 3
data.classes = 3
data.subjects = 4
data.views = 2
data.setups = 1
data.phases = 3
data.frames_min = 12
data.frames_max = 20
data.feature_dim = 8
data.clips_per_combo = 1
split.held_in = 0,2
vst.feature_dim = 8
vst.model_dim = 16
vst.layers = 1
vst.heads = 2
vst.ffn_dim = 32
vst.max_positions = 32
vst.tokens_per_clip = 4
vst.codebook_size = 32
vst.embed_dim = 16
vst.reseed_after = 50
lm.embed_dim = 16
lm.layers = 1
lm.heads = 2
lm.ffn_dim = 32
lm.context = 64
adapter.rank = 4
train.iterations = 10
train.batch_size = 8
train.micro_batch = 8
pretrain.iterations = 10
corpus_sentences = 40
"""

LORA_SET = ["--set", "train.batch_size=4", "--set", "train.micro_batch=2"]


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """Run the full command chain once and hand the artifact paths around."""
    root = tmp_path_factory.mktemp("clirun")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    data = root / "data"
    vst = root / "vst.ckpt"
    lm = root / "lm.ckpt"
    base = ["--config", str(cfg)]
    assert cli.main(["gen-data", *base, "--out", str(data)]) == 0
    assert cli.main(["train-vst", *base, "--data", str(data),
                     "--out", str(vst)]) == 0
    assert cli.main(["finetune", *base, *LORA_SET, "--vst", str(vst),
                     "--data", str(data), "--out", str(lm)]) == 0
    return {"root": root, "cfg": cfg, "data": data, "vst": vst, "lm": lm}


# ---------------------------------------------------------------------------
# artifact round-trips


def test_gen_data_layout(chain):
    samples = read_manifest(chain["data"] / "manifest.tsv")
    assert len(samples) == 24  # 3 classes x 4 subjects x 2 views x 1 clip
    assert sorted({s.label for s in samples}) == [0, 1, 2]
    assert (chain["data"] / "features").is_dir()


def test_gen_data_idempotent(chain, tmp_path):
    again = tmp_path / "data2"
    assert cli.main(["gen-data", "--config", str(chain["cfg"]),
                     "--out", str(again)]) == 0
    first = chain["data"]
    assert (again / "manifest.tsv").read_bytes() == \
        (first / "manifest.tsv").read_bytes()
    names = sorted(p.name for p in (first / "features").iterdir())
    assert names == sorted(p.name for p in (again / "features").iterdir())
    for name in names[:3]:
        assert (again / "features" / name).read_bytes() == \
            (first / "features" / name).read_bytes()


def test_train_vst_idempotent(chain, tmp_path):
    again = tmp_path / "vst2.ckpt"
    assert cli.main(["train-vst", "--config", str(chain["cfg"]),
                     "--data", str(chain["data"]), "--out", str(again)]) == 0
    assert again.read_bytes() == chain["vst"].read_bytes()


def test_finetune_idempotent(chain, tmp_path):
    again = tmp_path / "lm2.ckpt"
    assert cli.main(["finetune", "--config", str(chain["cfg"]), *LORA_SET,
                     "--vst", str(chain["vst"]), "--data", str(chain["data"]),
                     "--out", str(again)]) == 0
    assert again.read_bytes() == chain["lm"].read_bytes()


def test_tokenize_lines(chain, tmp_path):
    out = tmp_path / "tokens.txt"
    assert cli.main(["tokenize", "--config", str(chain["cfg"]),
                     "--vst", str(chain["vst"]), "--data", str(chain["data"]),
                     "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 24
    for line in lines:
        video_id, ids = line.split("\t")
        assert video_id.startswith("clip")
        tokens = [int(t) for t in ids.split(",")]
        assert len(tokens) == 4
        assert all(0 <= t < 32 for t in tokens)


def test_eval_report_file(chain, tmp_path, capsys):
    out = tmp_path / "report.txt"
    assert cli.main(["eval", "--config", str(chain["cfg"]),
                     "--vst", str(chain["vst"]), "--lm", str(chain["lm"]),
                     "--data", str(chain["data"]), "--out", str(out)]) == 0
    text = out.read_text()
    lines = text.splitlines()
    assert lines[0] == "protocol: x-sub"
    assert lines[1] == "samples: 12"  # held-out half of 24 clips
    acc = float(lines[2].split(": ")[1])
    assert 0.0 <= acc <= 1.0
    assert any(line.startswith("tokens.utilization:") for line in lines)
    assert any(line.startswith("efficiency.trainable_fraction:")
               for line in lines)
    assert "accuracy:" in capsys.readouterr().out

    again = tmp_path / "report2.txt"
    assert cli.main(["eval", "--config", str(chain["cfg"]),
                     "--vst", str(chain["vst"]), "--lm", str(chain["lm"]),
                     "--data", str(chain["data"]), "--out", str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_explain_table(chain, tmp_path):
    out = tmp_path / "preds.tsv"
    assert cli.main(["explain", "--config", str(chain["cfg"]),
                     "--vst", str(chain["vst"]), "--lm", str(chain["lm"]),
                     "--data", str(chain["data"]), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "#video_id\tlabel\tpredicted\texplanation"
    assert len(lines) == 13  # header + the 12 held-out clips
    for line in lines[1:]:
        video_id, label, predicted, explanation = line.split("\t")
        assert int(label) in range(3) and int(predicted) in range(3)
        assert explanation


def test_report_tables(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    out = tmp_path / "rep"
    assert cli.main(["report", "--config", str(cfg), *LORA_SET,
                     "--out", str(out), "--ranks", "2,4",
                     "--vocab-sizes", "32", "--baseline-rank", "4",
                     "--baseline-vocab", "32"]) == 0
    ablation = (out / "ablation.tsv").read_text().splitlines()
    assert ablation[0].split("\t")[0] == "variant"
    assert [r.split("\t")[0] for r in ablation[1:]] == \
        ["full", "direct-projection", "zero-shot"]
    sweep = (out / "sweep.tsv").read_text().splitlines()
    header = sweep[0].split("\t")
    rows = [dict(zip(header, r.split("\t"))) for r in sweep[1:]]
    assert [(int(r["rank"]), int(r["vocab_size"])) for r in rows] == \
        [(2, 32), (4, 32)]
    assert [r["baseline"] for r in rows] == ["false", "true"]


# ---------------------------------------------------------------------------
# configuration resolution


def test_echoed_config_is_reusable(chain, tmp_path, capsys):
    out1 = tmp_path / "d1"
    assert cli.main(["gen-data", "--config", str(chain["cfg"]),
                     "--out", str(out1)]) == 0
    echoed = [line for line in capsys.readouterr().out.splitlines()
              if " = " in line]
    replay = tmp_path / "replay.cfg"
    replay.write_text("\n".join(echoed) + "\n")
    out2 = tmp_path / "d2"
    assert cli.main(["gen-data", "--config", str(replay),
                     "--out", str(out2)]) == 0
    assert (out1 / "manifest.tsv").read_bytes() == \
        (out2 / "manifest.tsv").read_bytes()


def test_set_overrides_config(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("seed = 3\ndata.classes = 3\n")
    assert cli.main(["gen-data", "--config", str(cfg),
                     "--set", "data.classes=5", "--set", "data.subjects=2",
                     "--out", str(tmp_path / "d")]) == 0
    echo = capsys.readouterr().out
    assert "data.classes = 5" in echo
    samples = read_manifest(tmp_path / "d" / "manifest.tsv")
    assert sorted({s.label for s in samples}) == [0, 1, 2, 3, 4]


def test_seed_precedence(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("VSTLM_SEED", "99")
    args = ["gen-data", "--set", "data.subjects=2", "--set", "data.classes=2",
            "--out", str(tmp_path / "d")]
    assert cli.main(args) == 0
    assert "seed = 99" in capsys.readouterr().out  # env var as last resort

    assert cli.main([*args[:-1], str(tmp_path / "d2"), "--seed", "5"]) == 0
    assert "seed = 5" in capsys.readouterr().out  # flag beats env

    cfg = tmp_path / "c.cfg"
    cfg.write_text("seed = 7\n")
    assert cli.main([*args[:-1], str(tmp_path / "d3"),
                     "--config", str(cfg)]) == 0
    assert "seed = 7" in capsys.readouterr().out  # config beats env

    monkeypatch.delenv("VSTLM_SEED")
    assert cli.main([*args[:-1], str(tmp_path / "d4")]) == 0
    assert "seed = 0" in capsys.readouterr().out  # default


# ---------------------------------------------------------------------------
# exit codes


def test_usage_errors_exit_1(tmp_path, capsys):
    assert cli.main([]) == 1  # no command prints help
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["gen-data"]) == 1  # missing required --out
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"),
                     "--set", "noequals"]) == 1
    capsys.readouterr()


def test_unknown_config_key_exit_1(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"),
                     "--set", "bogus.key=1"]) == 1
    assert "unknown config key" in capsys.readouterr().err


def test_bad_value_exit_1(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"),
                     "--set", "data.classes=many"]) == 1
    capsys.readouterr()


def test_missing_artifacts_exit_2(chain, tmp_path, capsys):
    missing = str(tmp_path / "nope.ckpt")
    code = cli.main(["eval", "--config", str(chain["cfg"]),
                     "--vst", str(chain["vst"]), "--lm", missing,
                     "--data", str(chain["data"]),
                     "--out", str(tmp_path / "r.txt")])
    assert code == 2
    assert "model checkpoint not found" in capsys.readouterr().err
    code = cli.main(["train-vst", "--config", str(chain["cfg"]),
                     "--data", str(tmp_path / "nodata"),
                     "--out", str(tmp_path / "v.ckpt")])
    assert code == 2
    capsys.readouterr()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(chain, tmp_path, capsys):
    code = cli.main(["train-vst", "--config", str(chain["cfg"]),
                     "--set", "train.learning_rate=1e18",
                     "--data", str(chain["data"]),
                     "--out", str(tmp_path / "v.ckpt")])
    assert code == 3
    capsys.readouterr()
