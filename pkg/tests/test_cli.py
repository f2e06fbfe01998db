import json
import subprocess
import sys

import numpy as np
import pytest

from sgpnet import io
from sgpnet.cli import main


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture
def feats(tmp_path, rng):
    io.write_sgt(tmp_path / "x.sgt", rng.standard_normal((1, 4, 16, 16)))
    m = np.zeros((1, 64, 64))
    m[:, 20:44, 16:40] = 1
    io.write_sgt(tmp_path / "m.sgt", m)
    return tmp_path


def test_spb_then_gm(feats, capsys):
    d = feats
    assert run("spb-decompose", "--in", d / "x.sgt", "--mask", d / "m.sgt", "--out", d / "b.sgt",
               "--proto", d / "p.sgt", "--export-pgm", d / "pgm") == 0
    assert io.read_sgt(d / "b.sgt").shape == (1, 4, 3, 16, 16)
    assert io.read_sgt(d / "p.sgt").shape == (1, 4, 3)
    assert sorted(p.name for p in (d / "pgm").iterdir()) == ["band0.pgm", "band1.pgm", "band2.pgm"]
    assert run("gm-match", "--bands", d / "b.sgt", "--protos", d / "p.sgt", "--fq", d / "x.sgt",
               "--out", d / "mt.sgt", "--dump-maps", d / "maps") == 0
    matched = io.read_sgt(d / "mt.sgt")
    assert matched.shape == (1, 11, 16, 16)
    np.testing.assert_allclose(matched[:, :4], io.read_sgt(d / "x.sgt"), rtol=1e-6)
    assert len(list((d / "maps").glob("*.pgm"))) == 15


def test_errors_are_one_line(feats, capsys):
    assert run("gm-match", "--bands", feats / "nope.sgt", "--protos", feats / "p.sgt",
               "--fq", feats / "x.sgt", "--out", feats / "o.sgt") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: io: ")
    assert run("spb-decompose", "--in", feats / "x.sgt", "--mask", feats / "m.sgt",
               "--out", feats / "b.sgt", "--k", 7) == 1
    assert capsys.readouterr().err.startswith("error: config: ")


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        run("props", "--nonsense")
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_oracle_fixture(tmp_path, capsys):
    assert run("oracle", "fixture", "--seed", 2, "--out", tmp_path) == 0
    pts = json.loads((tmp_path / "points.json").read_text())
    assert pts["cos_B"] > pts["cos_A"] and pts["geo_A"] > pts["geo_B"]
    assert pts["dist_A"] < pts["dist_B"]
    assert io.read_sgt(tmp_path / "geo.sgt").shape == (16, 16)
    for name in ("cos", "geo", "dijkstra"):
        assert (tmp_path / f"{name}.pgm").exists()


def test_train_zero_lr_checkpoint_equals_init(tmp_path, capsys):
    from sgpnet.episodes import ModelConfig, ToyModel
    assert run("train-toy", "--iters", 1, "--lr", 0, "--eval-every", 0, "--out", tmp_path) == 0
    ck = io.read_checkpoint(tmp_path / "ckpt")
    for p in ToyModel(ModelConfig(), seed=0).params():
        np.testing.assert_array_equal(ck[p.name].value, p.value)
    rows = (tmp_path / "radii.csv").read_text().splitlines()
    assert rows[0] == "iter,r1,r2" and len(rows) == 2
    log = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert {"iter", "L_prim", "L_b", "L_align", "L_total"} <= set(log[0])


def test_same_invocation_same_bytes(tmp_path, capsys):
    for sub in ("a", "b"):
        run("train-toy", "--iters", 2, "--eval-every", 0, "--out", tmp_path / sub)
    for name in ("metrics.jsonl", "radii.csv", "ckpt/enc.conv1.w.sgt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_export_maps(tmp_path, capsys):
    assert run("export-maps", "--out", tmp_path) == 0
    for name in ("low", "mid", "high"):
        img = io.read_pgm(tmp_path / f"{name}.pgm")
        assert img.shape == (64, 64) and img.min() == 0 and img.max() == 255
    assert run("export-maps", "--out", tmp_path, "--k", 2) == 1


def test_props_subset(capsys):
    assert run("props", "--only", "fft_roundtrip,radii_ordering") == 0
    out = capsys.readouterr().out.splitlines()
    assert [l.split()[0] for l in out] == ["PASS", "PASS"]


def test_ablate_bad_values(capsys):
    assert run("ablate", "--axis", "T", "--values", "a,b") == 1
    assert capsys.readouterr().err.startswith("error: config: ")


def test_console_script_props():
    r = subprocess.run([sys.executable, "-m", "sgpnet.cli", "props"], capture_output=True,
                       text=True, timeout=300)
    assert r.returncode == 0, r.stdout + r.stderr
    lines = r.stdout.strip().splitlines()
    assert len(lines) >= 18 and all(l.startswith("PASS ") for l in lines)


def test_gradcheck_subcommand_sampled(capsys):
    assert run("gradcheck", "--max-elements", 2) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "spb.r_tilde_1" in out
