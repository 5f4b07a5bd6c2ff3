import json
import struct

import numpy as np
import pytest

from vdpo import checkpoint as ck
from vdpo.cli import main
from vdpo.diffusion import write_pgm

SMALL = {
    "data": {"n_pretrain": 320, "n_stage1": 320, "samples_per_epoch": 128},
    "pretrain": {"epochs": 3, "decoder_epochs": 2},
    "stage1": {"epochs": 2},
    "stage2": {"epochs": 2, "curriculum": [1, 1]},
    "diffusion": {"pretrain_steps": 50},
    "eval": {"n_samples": 20},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """make-data, then pretrain, stage 1 and stage 2 on a small config."""
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["make-data", "--n", "12", "--seed", "3", "--out", str(d / "data.jsonl")]) == 0
    assert main(["train", "--stage", "pretrain", "--config", str(cfg), "--out", str(d / "pre.ckpt")]) == 0
    assert main(["train", "--stage", "1", "--init", str(d / "pre.ckpt"), "--out", str(d / "s1.ckpt"), "--log", str(d / "s1.csv")]) == 0
    assert main(["train", "--stage", "2", "--init", str(d / "s1.ckpt"), "--out", str(d / "s2.ckpt"), "--log", str(d / "s2.csv")]) == 0
    return d


def test_make_data_writes_n_lines_deterministically(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["make-data", "--n", "7", "--seed", "1", "--out", str(a)]) == 0
    assert "wrote 7 samples" in capsys.readouterr().out
    assert main(["make-data", "--n", "7", "--seed", "1", "--out", str(b)]) == 0
    assert len(a.read_text().splitlines()) == 7
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        ["make-data", "--n", "5", "--level", "4", "--out", "x"],
        ["make-data", "--n", "0", "--out", "x"],
        ["train", "--stage", "3", "--out", "x"],
        ["frobnicate"],
    ],
)
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_bad_config_exits_2(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"bogus": 1}')
    assert main(["train", "--stage", "pretrain", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2


def test_missing_files_exit_3(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "nope"), "--data", "d", "--report", "r"]) == 3
    assert main(["train", "--stage", "pretrain", "--config", str(tmp_path / "nope.json"), "--out", "x"]) == 3


def test_stage_ordering(run, capsys):
    assert ck.load(run / "pre.ckpt").stage == "pretrain"
    assert ck.load(run / "s1.ckpt").stage == "stage1"
    assert ck.load(run / "s2.ckpt").stage == "stage2"
    code = main(["generate", "--ckpt", str(run / "s1.ckpt"), "--condition-file", str(run / "data.jsonl"), "--out", str(run / "g")])
    assert code == 3
    assert "stage 2 required" in capsys.readouterr().err
    assert main(["train", "--stage", "2", "--init", str(run / "pre.ckpt"), "--out", str(run / "bad.ckpt")]) == 3
    assert main(["train", "--stage", "1", "--out", str(run / "bad.ckpt")]) == 2


def test_training_logs_written(run):
    assert run.joinpath("s1.csv").read_text().startswith("epoch,loss,retrieval_accuracy")
    lines = run.joinpath("s2.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,level,total") and len(lines) == 3


def test_generate_k1_and_k3(run, caplog):
    out1, out3 = run / "g1", run / "g3"
    data = str(run / "data.jsonl")
    with caplog.at_level("INFO", logger="vdpo"):
        assert main(["generate", "--ckpt", str(run / "s2.ckpt"), "--condition-file", data, "--k", "1", "--out", str(out1), "-v"]) == 0
        assert main(["generate", "--ckpt", str(run / "s2.ckpt"), "--condition-file", data, "--k", "3", "--out", str(out3), "-v"]) == 0
    assert any("k=1 prompt 0" in m for m in caplog.messages)
    assert any("k=3 prompt 0" in m for m in caplog.messages)
    for out in (out1, out3):
        assert len(out.joinpath("prompts.txt").read_text().splitlines()) == 12
        assert len(list(out.glob("image_*.pgm"))) == 12


def test_generate_from_pgm_files(run):
    imgs = []
    for i in range(3):
        p = run / f"cond{i}.pgm"
        write_pgm(np.full((16, 16), float(i % 2)), p)
        imgs.append(str(p))
    out = run / "gp"
    assert main(["generate", "--ckpt", str(run / "s2.ckpt"), "--condition-file", *imgs, "--k", "3", "--out", str(out)]) == 0
    assert len(list(out.glob("image_*.pgm"))) == 1
    assert main(["generate", "--ckpt", str(run / "s2.ckpt"), "--condition-file", *imgs[:2], "--k", "3", "--out", str(out)]) == 2


def test_eval_and_ground_truth(run):
    data = str(run / "data.jsonl")
    assert main(["eval", "--ckpt", str(run / "s2.ckpt"), "--data", data, "--report", str(run / "gt.json"), "--ground-truth"]) == 0
    (gt,) = json.loads(run.joinpath("gt.json").read_text())
    assert gt["fid"] < 1e-6 and gt["lpips_proxy"] == 0.0 and gt["bleu"] == 1.0
    rep = run / "r.json"
    assert main(["eval", "--ckpt", str(run / "s2.ckpt"), "--data", data, "--report", str(rep), "--seeds", "0", "1"]) == 0
    first = rep.read_bytes()
    assert len(json.loads(first)) == 2
    assert main(["eval", "--ckpt", str(run / "s2.ckpt"), "--data", data, "--report", str(rep), "--seeds", "0", "1"]) == 0
    assert rep.read_bytes() == first


def test_report_command(run, capsys):
    data = str(run / "data.jsonl")
    rep = run / "r3.json"
    assert main(["eval", "--ckpt", str(run / "s2.ckpt"), "--data", data, "--report", str(rep), "--seeds", "0", "1", "2"]) == 0
    capsys.readouterr()
    assert main(["report", "--inputs", str(rep), "--format", "md"]) == 0
    out = capsys.readouterr().out
    assert "| full | sketch2img | mean | 1 |" in out
    csv_path = run / "t.csv"
    assert main(["report", "--inputs", str(rep), "--format", "csv", "--out", str(csv_path)]) == 0
    assert len(csv_path.read_text().splitlines()) == 5


def test_format_errors_exit_5(run, tmp_path):
    raw = bytearray((run / "s2.ckpt").read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    bad = tmp_path / "v99.ckpt"
    bad.write_bytes(bytes(raw))
    data = str(run / "data.jsonl")
    assert main(["eval", "--ckpt", str(bad), "--data", data, "--report", str(tmp_path / "r.json")]) == 5
    broken = tmp_path / "broken.jsonl"
    broken.write_text("{}\n")
    assert main(["eval", "--ckpt", str(run / "s2.ckpt"), "--data", str(broken), "--report", str(tmp_path / "r.json")]) == 5


def test_ablate_command(tmp_path, capsys):
    cfg = tmp_path / "tiny.json"
    tiny = json.loads(json.dumps(SMALL))
    tiny["stage2"]["epochs"] = 1
    tiny["eval"]["n_samples"] = 8
    cfg.write_text(json.dumps(tiny))
    rep = tmp_path / "abl.json"
    assert main(["ablate", "--config", str(cfg), "--seeds", "0", "--report", str(rep)]) == 0
    methods = [r["method"] for r in json.loads(rep.read_text())]
    assert methods == ["full", "no_prompt_tuner", "no_dual_modality"]
    assert "no_dual_modality" in capsys.readouterr().out
