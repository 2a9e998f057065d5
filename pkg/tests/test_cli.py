import json

import numpy as np
import pytest

from selfflow import cli
from selfflow import config as C
from selfflow import data as D


def run(capsys, *argv):
    code = cli.main([*map(str, argv)])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


@pytest.fixture
def config_file(tmp_path, tiny_config):
    p = tmp_path / "run.toml"
    C.save(tiny_config.with_overrides(train={"steps": 4}), p)
    return p


@pytest.fixture
def trained(tmp_path, config_file, capsys):
    out = tmp_path / "run"
    code, res, _ = run(capsys, "train", "--config", config_file, "--out", out)
    assert code == 0 and res["step"] == 4
    return out


def test_gen_data_is_byte_identical(tmp_path, capsys):
    spec = tmp_path / "spec.toml"
    spec.write_text("[dataset]\nn_train = 40\nn_eval = 20\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "gen-data", "--spec", spec, "--seed", 3, "--out", a)[0] == 0
    assert run(capsys, "gen-data", "--spec", spec, "--seed", 3, "--out", b)[0] == 0
    for split in D.SPLITS:
        assert (a / f"{split}.bin").read_bytes() == (b / f"{split}.bin").read_bytes()
    header, tokens, labels = D.read_dataset(a / "heldout.bin")
    assert header["n"] == 20 and tokens.shape == (20, 16, 16)


def test_gen_data_refuses_overwrite(tmp_path, capsys):
    spec = tmp_path / "spec.toml"
    spec.write_text("n_train = 8\nn_eval = 8\n")
    assert run(capsys, "gen-data", "--spec", spec, "--out", tmp_path / "d")[0] == 0
    code, _, err = run(capsys, "gen-data", "--spec", spec, "--out", tmp_path / "d")
    assert code == 2 and "--force" in err
    assert run(capsys, "gen-data", "--spec", spec, "--out", tmp_path / "d", "--force")[0] == 0


def test_train_refuses_changed_config(tmp_path, config_file, capsys):
    out = tmp_path / "split"
    assert run(capsys, "train", "--config", config_file, "--out", out, "--steps", 2)[0] == 0
    # --steps is part of the run config, so the directory now holds a different run
    code, _, err = run(capsys, "train", "--config", config_file, "--out", out)
    assert code == 2 and "config hash" in err


def test_train_resume_after_interrupt(tmp_path, config_file, trained, capsys):
    from selfflow import runner as R

    out = tmp_path / "split"
    R.train(C.load(config_file), out, stop_at=3)
    code, res, _ = run(capsys, "train", "--config", config_file, "--out", out)
    assert code == 0 and res["resumed_from"] == 2

    def strip(path):
        return [{k: v for k, v in r.items() if k != "wall_ms"} for r in R.read_metrics(path / R.METRICS)]

    assert strip(out) == strip(trained)


def test_sample_eval_probe(tmp_path, trained, capsys):
    ck = trained / "ckpt_0000004.bin"
    code, res, _ = run(capsys, "sample", "--checkpoint", ck, "--n", 6, "--steps", 3, "--out", tmp_path / "s.bin",
                       "--pgm", tmp_path / "s.pgm", "--class", 2)
    assert code == 0 and res["n"] == 6
    _, tokens, labels = D.read_dataset(tmp_path / "s.bin")
    assert tokens.shape == (6, 16, 16) and (labels == 2).all()
    assert (tmp_path / "s.pgm").read_bytes().startswith(b"P5\n")

    code, res, _ = run(capsys, "eval", "--checkpoint", ck, "--n", 64, "--steps", 3)
    assert code == 0 and res["fd_pixel"] > res["fd_floor"] > 0
    code, res, _ = run(capsys, "probe", "--checkpoint", ck, "--n", 64)
    assert code == 0 and {"probe_acc_layer_0", "probe_acc_layer_1"} <= set(res)
    recs = [json.loads(l) for l in (trained / "eval.jsonl").read_text().splitlines()]
    assert [r["event"] for r in recs] == ["eval", "probe"]


def test_sample_rejects_bad_class(tmp_path, trained, capsys):
    code, _, err = run(capsys, "sample", "--checkpoint", trained / "ckpt_0000004.bin", "--class", 8,
                       "--out", tmp_path / "s.bin")
    assert code == 2 and "--class" in err


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nwidth = 1\n")
    assert run(capsys, "train", "--config", bad, "--out", tmp_path / "r")[0] == 2
    assert run(capsys, "train", "--config", tmp_path / "missing.toml", "--out", tmp_path / "r")[0] == 4
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"\x01")
    assert run(capsys, "eval", "--checkpoint", junk)[0] == 2
    assert run(capsys, "ablate", "--suite", "nope", "--out", tmp_path / "a")[0] == 2


def test_divergence_exit_code(tmp_path, tiny_config, capsys):
    p = tmp_path / "hot.toml"
    C.save(tiny_config.with_overrides(optimizer={"lr": 1e300}), p)
    with np.errstate(all="ignore"):
        code, _, err = run(capsys, "train", "--config", p, "--out", tmp_path / "r")
    assert code == 3 and "non-finite" in err


def test_ablate_small_suite(tmp_path, config_file, capsys):
    code, res, _ = run(capsys, "ablate", "--suite", "fig3b", "--seeds", 1, "--out", tmp_path / "a",
                       "--config", config_file, "--steps", 2)
    assert code == 0 and res["rows"] == 4
    text = (tmp_path / "a" / "summary.csv").read_text()
    assert text.startswith("# config_hash=") and "full_mask" in text
    assert "diffusion_forcing" in (tmp_path / "a" / "report.md").read_text()
    suite = json.loads((tmp_path / "a" / "suite.json").read_text())
    assert set(suite["cpu_seconds_by_variant"]) == set(res["variants"])
    assert sum(suite["cpu_seconds_by_variant"].values()) == pytest.approx(suite["cpu_seconds"])
