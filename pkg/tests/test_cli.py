import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from qfpn.cli import main
from qfpn.dataio import parse_pgm, pgm_bytes

TINY = {
    "model": {"encoder_widths": [4, 8, 8, 8], "resolution": 16},
    "train": {"stage1_epochs": 1, "stage2_epochs": 1, "batch_size": 8},
}


def run(*argv):
    return main([str(a) for a in argv])


def cli(*argv, stdin=b""):
    return subprocess.run([sys.executable, "-m", "qfpn", *map(str, argv)], input=stdin, capture_output=True)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--n", "20", "--resolution", "16", "--seed", "2", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestSynth:
    def test_layout_and_determinism(self, tmp_path, capsys):
        assert run("synth", "--n", 30, "--resolution", 16, "--seed", 7, "--out", tmp_path / "a") == 0
        assert run("synth", "--n", 30, "--resolution", 16, "--seed", 7, "--out", tmp_path / "b") == 0
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert a == b
        assert len([k for k in a if k.startswith("images/")]) == 30
        assert "wrote 30 samples (6 empty)" in capsys.readouterr().out

    def test_bad_fraction(self, tmp_path, capsys):
        assert run("synth", "--empty-fraction", 1.5, "--out", tmp_path) == 2
        assert "empty-fraction" in capsys.readouterr().err


class TestTrain:
    def test_quantum_run(self, corpus, config, tmp_path, capsys):
        assert run("train", "--data", corpus, "--config", config, "--folds", 2, "--out", tmp_path) == 0
        out = capsys.readouterr().out
        assert out.startswith("oof_tgs_map ") and "best_threshold " in out
        assert (tmp_path / "oof_report.json").is_file()
        assert json.loads((tmp_path / "config.json").read_text())["model_summary"]["n_quantum_params"] == 72

    def test_classical_has_no_quantum_params(self, corpus, config, tmp_path):
        assert run("train", "--data", corpus, "--config", config, "--folds", 2, "--merge", "classical",
                   "--out", tmp_path) == 0
        cfg = json.loads((tmp_path / "config.json").read_text())
        assert cfg["model_summary"]["n_quantum_params"] == 0
        assert cfg["model"]["merge_kind"] == "classical"

    def test_flags_override_config(self, corpus, config, tmp_path):
        assert run("train", "--data", corpus, "--config", config, "--folds", 2, "--topology", "unet_skip",
                   "--merge", "skip", "--no-reupload", "--seed", 4, "--out", tmp_path) == 0
        cfg = json.loads((tmp_path / "config.json").read_text())
        assert cfg["model"]["topology"] == "unet_skip" and cfg["model"]["merge_kind"] == "quantum"
        assert cfg["model"]["reupload"] is False and cfg["train"]["seed"] == 4
        assert cfg["model"]["encoder_widths"] == [4, 8, 8, 8]

    def test_conflicting_flags(self, corpus, tmp_path, capsys):
        assert run("train", "--data", corpus, "--topology", "unet_skip", "--merge", "quantum",
                   "--out", tmp_path) == 2
        assert "--merge skip" in capsys.readouterr().err
        assert run("train", "--data", corpus, "--merge", "identity", "--out", tmp_path) == 2

    def test_unknown_config_key(self, corpus, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {"width": 3}}))
        assert run("train", "--data", corpus, "--config", bad, "--out", tmp_path / "r") == 2

    def test_missing_corpus(self, tmp_path, capsys):
        assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "r") == 1
        assert "train.csv" in capsys.readouterr().err

    def test_unknown_flag(self, corpus, tmp_path):
        with pytest.raises(SystemExit) as info:
            run("train", "--data", corpus, "--out", tmp_path, "--learning-rate", 3)
        assert info.value.code == 2


@pytest.fixture(scope="module")
def ablation(corpus, config, tmp_path_factory):
    out = tmp_path_factory.mktemp("ablate")
    assert main(["ablate", "--data", str(corpus), "--config", str(config), "--folds", "2", "--out", str(out)]) == 0
    return out


class TestAblate:
    def test_rows(self, ablation):
        rows = read_rows(ablation / "ablation.csv")
        assert [r["merge"] for r in rows] == ["classical", "quantum"]
        c, q = rows
        assert c["batch_order_hash"] == q["batch_order_hash"]
        assert c["shared_init_hash"] == q["shared_init_hash"]
        assert float(q["delta_pp"]) == pytest.approx(100 * (float(q["oof_tgs_map"]) - float(c["oof_tgs_map"])))
        assert c["delta_pp"] == ""
        assert (int(c["n_quantum_params"]), int(q["n_quantum_params"])) == (0, 72)

    def test_configs_differ_only_in_gates(self, ablation):
        names = {}
        for merge in ("classical", "quantum"):
            summary = json.loads((ablation / merge / "config.json").read_text())["model_summary"]
            names[merge] = {p["name"] for p in summary["parameters"]}
        assert names["classical"] <= names["quantum"]
        assert all(".gate" in n for n in names["quantum"] - names["classical"])

    def test_rejects_unet(self, corpus, tmp_path):
        cfg = tmp_path / "u.json"
        cfg.write_text(json.dumps({"model": {"topology": "unet_skip", "merge_kind": "identity"}}))
        assert run("ablate", "--data", corpus, "--config", cfg, "--out", tmp_path / "o") == 2


class TestEval:
    def test_reports(self, ablation, corpus, tmp_path, capsys):
        assert run("eval", "--run", ablation / "quantum", "--data", corpus, "--out", tmp_path) == 0
        rows = read_rows(tmp_path / "eval.csv")
        assert len(rows) == 21 and rows[-1]["id"] == "mean"
        report = json.loads((tmp_path / "eval.json").read_text())
        oof = json.loads((ablation / "quantum" / "oof_report.json").read_text())
        assert report["tgs_map"] == oof["tgs_map"]
        assert report["best_threshold"] == oof["best_threshold"]


class TestDiagnose:
    def test_circuit_origin(self, capsys):
        assert run("diagnose", "circuit") == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert [r["value"] for r in rows if r["quantity"] == "expval"] == ["1", "1", "1", "1"]
        assert len([r for r in rows if r["quantity"] == "d_angle"]) == 24

    def test_circuit_bad_x(self):
        assert run("diagnose", "circuit", "--x", "0,1") == 2

    def test_gradients(self, ablation, capsys):
        assert run("diagnose", "gradients", "--run", ablation / "quantum") == 0
        stats = {r["statistic"]: r["value"] for r in csv.DictReader(io.StringIO(capsys.readouterr().out))}
        assert stats["bp_floor"] == "0.0625"
        assert stats["n_epochs"] == "4"
        assert float(stats["min_ratio_to_floor"]) == pytest.approx(float(stats["min_variance"]) / 0.0625, rel=1e-5)

    def test_gradients_classical(self, ablation):
        assert run("diagnose", "gradients", "--run", ablation / "classical") == 2


class TestRle:
    def test_decode_empty(self):
        res = cli("rle", "decode", "--height", 3, "--width", 2, stdin=b"")
        assert res.returncode == 0
        assert not parse_pgm(res.stdout).any()

    def test_round_trip_canonical(self):
        res = cli("rle", "decode", "--height", 4, "--width", 4, stdin=b"1 2 3 2 9 1")
        assert res.returncode == 0
        enc = cli("rle", "encode", stdin=res.stdout)
        assert enc.stdout.decode().strip() == "1 4 9 1"

    def test_encode_pgm(self):
        mask = np.zeros((3, 3), dtype=np.uint8)
        mask[:, 1] = 255
        assert cli("rle", "encode", stdin=pgm_bytes(mask)).stdout == b"4 3\n"

    def test_bad_token(self):
        res = cli("rle", "decode", "--height", 4, "--width", 4, stdin=b"1 x")
        assert res.returncode == 2
        assert b"token 1" in res.stderr


@pytest.mark.parametrize("verb", ["synth", "train", "ablate", "eval", "rle", "diagnose circuit", "diagnose gradients"])
def test_help_lists_defaults(verb, capsys):
    with pytest.raises(SystemExit) as info:
        main(verb.split() + ["--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    assert "--" in text
    assert "default" in text


def test_rerun_byte_identical(corpus, config, tmp_path):
    outs = []
    for name in ("a", "b"):
        assert run("train", "--data", corpus, "--config", config, "--folds", 2, "--out", tmp_path / name) == 0
        outs.append(tree_bytes(tmp_path / name))
    assert outs[0] == outs[1]
