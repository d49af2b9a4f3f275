from pathlib import Path

import numpy as np
import pytest

from raclap import cli, dataio
from raclap.errors import ConfigurationError

TOY_CONFIG = Path(__file__).resolve().parents[1] / "docs" / "toy.conf"


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-synthetic -> train with the documented toy config."""
    root = tmp_path_factory.mktemp("cli")
    data, run_dir = root / "data", root / "run"
    assert cli.main(["gen-synthetic", "--config", str(TOY_CONFIG), "--out", str(data)]) == 0
    assert cli.main(["train", "--config", str(TOY_CONFIG), "--manifest", str(data / "manifest.tsv"),
                     "--out", str(run_dir)]) == 0
    return data, run_dir


def test_config_precedence(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("seed = 3\ntrain.batch_size = 16  # comment\ntrain.dataset_tags = PS, TS\n")
    cfg = cli.resolve_config(str(conf), ["train.batch_size=4"], None)
    assert (cfg["seed"], cfg["train.batch_size"], cfg["train.dataset_tags"]) == (3, 4, ("PS", "TS"))
    assert cli.resolve_config(str(conf), [], 9)["seed"] == 9
    assert cli.train_config(cfg).batch_size == 4


def test_config_errors(tmp_path):
    with pytest.raises(ConfigurationError, match="unknown"):
        cli.resolve_config(None, ["train.bogus=1"], None)
    with pytest.raises(ConfigurationError):
        cli.resolve_config(None, ["train.epochs=many"], None)
    bad = tmp_path / "bad.conf"
    bad.write_text("no equals sign\n")
    with pytest.raises(ConfigurationError):
        cli.resolve_config(str(bad), [], None)


def test_format_config_round_trips():
    cfg = cli.resolve_config(None, ["train.dataset_tags=PS,TS", "train.grad_clip=1.5"], 4)
    again = cli.resolve_config(None, [], None)
    again.update(cli.resolve_config(None, [
        f"{k}={v}" for k, v in cli.parse_config_text(cli.format_config(cfg)).items()], None))
    assert again == cfg


def test_train_outputs_and_overfit(pipeline):
    _, run_dir = pipeline
    for name in ("model_pretrain.ckpt", "train_log.txt", "config_effective.txt",
                 "metrics_audio_to_text.txt", "metrics_text_to_audio.txt"):
        assert (run_dir / name).is_file(), name
    log_lines = (run_dir / "train_log.txt").read_text().splitlines()
    assert len(log_lines) == 100 and log_lines[0].startswith("0\t")
    for d in ("audio_to_text", "text_to_audio"):
        assert "r_at_1=1.0000" in (run_dir / f"metrics_{d}.txt").read_text()


def test_train_is_deterministic(pipeline, tmp_path):
    data, run_dir = pipeline
    assert cli.main(["train", "--config", str(TOY_CONFIG), "--manifest",
                     str(data / "manifest.tsv"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "model_pretrain.ckpt").read_bytes() == \
        (run_dir / "model_pretrain.ckpt").read_bytes()


def test_eval_twice_is_identical(pipeline, capsys):
    data, run_dir = pipeline
    args = ["eval", "--checkpoint", run_dir / "model_pretrain.ckpt", "--manifest",
            data / "manifest.tsv"]
    code, first, _ = run(capsys, *args)
    assert code == 0 and "r_at_1=1.0000" in first and "R@1 100.0" in first
    assert run(capsys, *args)[1] == first


def test_distill_zero_epochs_is_fixed_point(pipeline, tmp_path, capsys):
    data, run_dir = pipeline
    teacher_path = run_dir / "model_pretrain.ckpt"
    before = teacher_path.read_bytes()
    code, _, _ = run(capsys, "distill", "--config", TOY_CONFIG, "--teacher", teacher_path,
                     "--manifest", data / "manifest.tsv", "--out", tmp_path,
                     "--set", "train.epochs=0")
    assert code == 0
    student = dataio.load_checkpoint(tmp_path / "model_distill.ckpt")
    teacher = dataio.load_checkpoint(teacher_path)
    assert student.stage == "distill"
    assert all(np.array_equal(student.params[k], teacher.params[k]) for k in teacher.params)
    assert teacher_path.read_bytes() == before


def test_distill_log_format(pipeline, tmp_path, capsys):
    data, run_dir = pipeline
    code, _, _ = run(capsys, "distill", "--config", TOY_CONFIG, "--teacher",
                     run_dir / "model_pretrain.ckpt", "--manifest", data / "manifest.tsv",
                     "--out", tmp_path, "--set", "train.epochs=3")
    assert code == 0
    rows = [r.split("\t") for r in (tmp_path / "distill_log.txt").read_text().splitlines()]
    assert [r[0] for r in rows] == ["0", "1", "2"] and all(len(r) == 3 for r in rows)
    # the student starts at the teacher; Adam's unit-scale steps then drift it slightly
    assert float(rows[0][1]) < 1e-3


def test_distill_from_stage_two_warns(pipeline, tmp_path, capsys, caplog):
    data, run_dir = pipeline
    first = tmp_path / "first"
    assert run(capsys, "distill", "--teacher", run_dir / "model_pretrain.ckpt", "--manifest",
               data / "manifest.tsv", "--out", first, "--set", "train.epochs=0",
               "--set", "train.batch_size=8")[0] == 0
    with caplog.at_level("WARNING"):
        code, _, _ = run(capsys, "distill", "--teacher", first / "model_distill.ckpt",
                         "--manifest", data / "manifest.tsv", "--out", tmp_path / "second",
                         "--set", "train.epochs=0", "--set", "train.batch_size=8")
    assert code == 0 and "distilled" in caplog.text


def test_retrieve(pipeline, capsys):
    data, run_dir = pipeline
    ckpt = run_dir / "model_pretrain.ckpt"
    manifest = dataio.load_manifest(data / "manifest.tsv")
    target = next(iter(manifest.entries.values()))
    code, out, _ = run(capsys, "retrieve", "--checkpoint", ckpt, "--manifest",
                       data / "manifest.tsv", "--query", data / target.text_feature_path,
                       "--top-k", 3)
    lines = [l for l in out.splitlines() if not l.startswith("#")]
    assert code == 0 and "text_to_audio" in out and len(lines) == 3
    assert lines[0].split("\t")[:2] == ["1", target.id]
    scores = [float(l.split("\t")[2]) for l in lines]
    assert scores == sorted(scores, reverse=True)
    code, out, _ = run(capsys, "retrieve", "--checkpoint", ckpt, "--manifest",
                       data / "manifest.tsv", "--query", data / target.speech_feature_path,
                       "--top-k", 1000)
    lines = [l for l in out.splitlines() if not l.startswith("#")]
    assert code == 0 and "audio_to_text" in out and len(lines) == len(manifest)
    assert lines[0].split("\t")[1] == target.id


def test_retrieve_single_item_catalogue(pipeline, tmp_path, capsys):
    data, run_dir = pipeline
    manifest = dataio.load_manifest(data / "manifest.tsv")
    entry = next(iter(manifest.entries.values()))
    one = dataio.ManifestEntry(entry.id, entry.dataset_tag, str(data / entry.speech_feature_path),
                               str(data / entry.text_feature_path), entry.caption)
    dataio.write_manifest(tmp_path / "one.tsv", [one])
    code, out, _ = run(capsys, "retrieve", "--checkpoint", run_dir / "model_pretrain.ckpt",
                       "--manifest", tmp_path / "one.tsv", "--query", one.text_feature_path,
                       "--top-k", 1)
    assert code == 0 and out.splitlines()[-1].split("\t")[:2] == ["1", entry.id]


def test_retrieve_malformed_query(pipeline, tmp_path, capsys):
    data, run_dir = pipeline
    bad = tmp_path / "bad.essf"
    bad.write_bytes(b"nope" + bytes(20))
    code, _, err = run(capsys, "retrieve", "--checkpoint", run_dir / "model_pretrain.ckpt",
                       "--manifest", data / "manifest.tsv", "--query", bad)
    assert code == 2 and "magic" in err


def test_inspect(pipeline, capsys):
    _, run_dir = pipeline
    code, out, _ = run(capsys, "inspect", "--checkpoint", run_dir / "model_pretrain.ckpt")
    assert code == 0
    fields = dict(line.split("=", 1) for line in out.splitlines())
    assert fields["stage"] == "pretrain" and fields["num_layers"] == "3"
    alphas = [float(a) for a in fields["layer_weights"].split(",")]
    assert abs(sum(alphas) - 1) < 1e-5 and float(fields["temperature"]) > 0


def test_exit_codes(pipeline, tmp_path, capsys):
    data, run_dir = pipeline
    code, _, err = run(capsys, "train", "--manifest", tmp_path / "missing.tsv", "--out", tmp_path)
    assert code == 2 and "missing.tsv" in err
    (tmp_path / "empty.tsv").write_text("")
    code, _, _ = run(capsys, "eval", "--checkpoint", run_dir / "model_pretrain.ckpt",
                     "--manifest", tmp_path / "empty.tsv")
    assert code == 2
    assert run(capsys, "eval", "--manifest", data / "manifest.tsv")[0] == 2
    assert run(capsys, "inspect", "--checkpoint", tmp_path / "nope.ckpt")[0] == 2


def test_eval_dimension_mismatch(pipeline, tmp_path, capsys):
    _, run_dir = pipeline
    corpus = dataio.generate_synthetic(dataio.SyntheticSpec(num_pairs=4, speech_dim=7), tmp_path)
    code, _, err = run(capsys, "eval", "--checkpoint", run_dir / "model_pretrain.ckpt",
                       "--manifest", corpus.manifest)
    assert code == 2 and "(3, 16, 16)" in err and "(3, 7, 16)" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_one(pipeline, tmp_path, capsys):
    data, _ = pipeline
    code, _, err = run(capsys, "train", "--manifest", data / "manifest.tsv", "--out", tmp_path,
                       "--set", "train.batch_size=8", "--set", "train.epochs=1",
                       "--set", "train.learning_rate=1e308")
    assert code == 1 and "epoch" in err
