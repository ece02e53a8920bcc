import json
import subprocess
import sys

import numpy as np
import pytest

from analogic.cli import DEFAULTS, main, resolve, CliError
from analogic.fog_synth import load_manifest, load_png
from analogic.trainer import read_metrics

from .conftest import tree_hashes

SMALL = ["--size", "16x16", "--source-pairs", "6", "--target", "5", "--heldout", "4"]
TINY_NET = ["--base-width", "4", "--n-res", "1", "--batch-size", "2"]


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "d"
    assert main(["gen-data", "--out", str(out), *SMALL, "--seed", "7"]) == 0
    return out


@pytest.fixture(scope="module")
def cli_ckpt(cli_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    assert main(["train", "--data", str(cli_data / "manifest.json"), "--out", str(out), "--steps", "3",
                 "--checkpoint-interval", "3", *TINY_NET]) == 0
    return out / "ckpt_3.analogic"


# ---------------------------------------------------------------- gen-data


def test_gen_data_counts_and_echo(cli_data, capsys):
    m = load_manifest(cli_data / "manifest.json")
    assert len(m.entries) == 15
    counts = json.loads((cli_data / "counts.json").read_text())
    assert counts == {"entries": 15, "source_pairs": 6, "target_train": 5, "heldout_oracle": 4}
    echoed = json.loads((cli_data / "config.resolved.json").read_text())
    assert echoed["seed"] == 7 and echoed["size"] == "16x16"


def test_gen_data_rerun_identical(cli_data, tmp_path):
    out = tmp_path / "again"
    assert main(["gen-data", "--out", str(out), *SMALL, "--seed", "7"]) == 0
    a, b = tree_hashes(cli_data), tree_hashes(out)
    a.pop("config.resolved.json"), b.pop("config.resolved.json")
    assert a == b


@pytest.mark.slow
def test_gen_data_full_counting_contract(tmp_path):
    out = tmp_path / "d"
    assert main(["gen-data", "--out", str(out), "--size", "64x32", "--source-pairs", "256", "--target", "256",
                 "--heldout", "64", "--seed", "7"]) == 0
    m = load_manifest(out / "manifest.json")
    assert len(m.entries) == 576
    assert sum(e.foggy_path is not None for e in m.source_pairs) == 256
    assert sum(e.foggy_path is not None for e in m.heldout) == 64


def test_gen_data_indivisible_size(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--size", "63x32"]) == 2
    assert "divisible" in capsys.readouterr().err
    assert not (tmp_path / "x" / "manifest.json").exists()


def test_gen_data_bad_config_values(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--size", "big"]) == 2
    assert main(["gen-data", "--out", str(tmp_path / "x"), *SMALL, "--beta-range", "1.5,0.3"]) == 2
    assert main(["gen-data", *SMALL]) == 2


# ---------------------------------------------------------------- config resolution


def test_precedence_flag_file_default(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"steps": 50, "seed": 3}, "gen-data": {"seed": 99}}))
    r = resolve("train", {"steps": 10}, cfg)
    assert r["steps"] == 10 and r["seed"] == 3 and r["lr"] == 0.0002
    assert resolve("gen-data", {}, cfg)["seed"] == 99
    flat = tmp_path / "flat.json"
    flat.write_text(json.dumps({"steps": 7}))
    assert resolve("train", {}, flat)["steps"] == 7


def test_unknown_config_key(tmp_path, cli_data):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
    with pytest.raises(CliError) as info:
        resolve("train", {}, cfg)
    assert info.value.code == 2
    assert main(["train", "--config", str(cfg), "--data", str(cli_data / "manifest.json"),
                 "--out", str(tmp_path / "o")]) == 2


def test_missing_config_file_is_io_error(tmp_path):
    assert main(["gradcheck", "--loss", "sup", "--config", str(tmp_path / "nope.json")]) == 3


# ---------------------------------------------------------------- train


def test_train_echoes_default_lr(cli_ckpt):
    echoed = json.loads((cli_ckpt.parent / "config.resolved.json").read_text())
    assert echoed["lr"] == 0.0002
    assert echoed["effective_weights"]["w_gist_adv"] == 3.0
    assert len(read_metrics(cli_ckpt.parent / "metrics.jsonl")) == 3


def test_train_ablate_dep(cli_data, tmp_path):
    out = tmp_path / "r"
    assert main(["train", "--data", str(cli_data / "manifest.json"), "--out", str(out), "--steps", "10",
                 "--ablate", "dep", *TINY_NET]) == 0
    recs = read_metrics(out / "metrics.jsonl")
    assert len(recs) == 10 and all(r["losses"]["dep"] == 0.0 for r in recs)
    assert all(r["losses"]["sup"] > 0 for r in recs)


def test_train_invalid_config(cli_data, tmp_path):
    m = str(cli_data / "manifest.json")
    assert main(["train", "--data", m, "--out", str(tmp_path / "a"), "--lr", "-1"]) == 2
    assert main(["train", "--data", m, "--out", str(tmp_path / "b"), "--ablate", "everything"]) == 2
    assert main(["train", "--data", m, "--out", str(tmp_path / "c"), "--n-down", "5"]) == 2


def test_train_missing_manifest(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == 3


def test_train_non_finite_abort(cli_data, tmp_path, capsys):
    out = tmp_path / "r"
    code = main(["train", "--data", str(cli_data / "manifest.json"), "--out", str(out), "--steps", "5",
                 "--lr", "1e30", *TINY_NET])
    assert code == 4
    assert "step" in capsys.readouterr().err


# ---------------------------------------------------------------- translate / interpolate


def test_translate_preset_and_zero(cli_ckpt, cli_data, tmp_path):
    clear_dir = cli_data / "clear"
    inputs = sorted(clear_dir.glob("hld-*.png"))[:2]
    assert main(["translate", "--ckpt", str(cli_ckpt), "--input", *map(str, inputs), "--out",
                 str(tmp_path / "z0"), "--z", "0"]) == 0
    for p in inputs:
        assert np.array_equal(load_png(tmp_path / "z0" / p.name), load_png(p))
    assert main(["translate", "--ckpt", str(cli_ckpt), "--input", str(inputs[0]), "--out",
                 str(tmp_path / "p"), "--z", "synscapes"]) == 0
    assert json.loads((tmp_path / "p" / "config.resolved.json").read_text())["z"] == 0.9
    assert DEFAULTS["translate"]["z"] == 0.9


def test_translate_errors(cli_ckpt, cli_data, tmp_path):
    img = str(next((cli_data / "clear").glob("*.png")))
    assert main(["translate", "--ckpt", str(cli_ckpt), "--input", img, "--out", str(tmp_path), "--z", "1.5"]) == 2
    assert main(["translate", "--ckpt", str(cli_ckpt), "--input", str(tmp_path / "no.png"),
                 "--out", str(tmp_path)]) == 3
    big = tmp_path / "big.png"
    from analogic.fog_synth import save_png
    save_png(big, np.zeros((32, 64, 3)))
    assert main(["translate", "--ckpt", str(cli_ckpt), "--input", str(big), "--out", str(tmp_path / "o")]) == 5
    junk = tmp_path / "junk.analogic"
    junk.write_bytes(b"not a checkpoint")
    assert main(["translate", "--ckpt", str(junk), "--input", img, "--out", str(tmp_path / "o")]) == 5


def test_interpolate_outputs(cli_ckpt, cli_data, tmp_path):
    img = sorted((cli_data / "clear").glob("hld-*.png"))[0]
    assert main(["interpolate", "--ckpt", str(cli_ckpt), "--input", str(img), "--out", str(tmp_path),
                 "--z-steps", "11"]) == 0
    strip = load_png(tmp_path / "filmstrip.png")
    assert strip.shape == (16, 16 * 11, 3)
    rows = (tmp_path / "fog_effect.csv").read_text().splitlines()
    assert rows[0] == "z,mean_abs_effect" and len(rows) == 12
    assert float(rows[1].split(",")[1]) == 0.0


# ---------------------------------------------------------------- evaluate / gradcheck


def test_evaluate_z0_matches_baseline(cli_ckpt, cli_data, tmp_path, capsys):
    assert main(["evaluate", "--ckpt", str(cli_ckpt), "--data", str(cli_data / "manifest.json"),
                 "--out", str(tmp_path), "--z", "0"]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["zero_shot_l1"] == rep["baseline_l1"]
    assert "NOT reproducible" in rep["statement"]
    assert "source_gist_M_mae" in rep
    assert "NOT reproducible" in capsys.readouterr().out


def test_evaluate_calibrate(cli_ckpt, cli_data, tmp_path):
    assert main(["evaluate", "--ckpt", str(cli_ckpt), "--data", str(cli_data / "manifest.json"),
                 "--out", str(tmp_path), "--calibrate", "--val-count", "2", "--sheets"]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["n_images"] == 2 and len(rep["calibration"]["validation_ids"]) == 2
    assert not set(rep["calibration"]["validation_ids"]) & {r["id"] for r in rep["per_image"]}
    assert len(list((tmp_path / "sheets").glob("*.png"))) == 2
    assert main(["evaluate", "--ckpt", str(cli_ckpt), "--data", str(cli_data / "manifest.json"),
                 "--out", str(tmp_path), "--calibrate", "--val-count", "4"]) == 2


def test_evaluate_mismatch(cli_ckpt, tmp_path):
    other = tmp_path / "d"
    assert main(["gen-data", "--out", str(other), "--size", "32x16", "--source-pairs", "2", "--target", "2",
                 "--heldout", "2"]) == 0
    assert main(["evaluate", "--ckpt", str(cli_ckpt), "--data", str(other / "manifest.json"),
                 "--out", str(tmp_path / "e")]) == 5


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--loss", "full"]) == 0
    out = capsys.readouterr().out
    assert "full: max relative error" in out and "ok" in out


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "analogic.cli", "gradcheck", "--loss", "sup"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "sup" in r.stdout
