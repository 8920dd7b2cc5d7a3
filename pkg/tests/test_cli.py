import numpy as np
import pytest

from stereovol.cli import main
from stereovol.depth import read_depth_mm16
from stereovol.gradchecks import composed_case


@pytest.fixture
def tiny_config(tmp_path):
    cfg, _, _, _ = composed_case()
    p = tmp_path / "tiny.ini"
    p.write_text(cfg.replace(steps=2, n_boxes=(0, 0)).to_text())
    return p


def test_gradcheck_single(capsys):
    assert main(["gradcheck", "--op", "soft_argmin"]) == 0
    assert capsys.readouterr().out.startswith("PASS soft_argmin")


def test_gradcheck_unknown_op(capsys):
    assert main(["gradcheck", "--op", "nope"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and err.count("\n") == 1


def test_synth_train_eval(tmp_path, tiny_config, capsys):
    data, run, ev = tmp_path / "data", tmp_path / "run", tmp_path / "ev"
    assert main(["synth", "--seeds", "0..1", "--out", str(data), "--config", str(tiny_config)]) == 0
    assert sorted(p.name for p in data.iterdir()) == ["scene_0", "scene_1"]
    assert main(["train-toy", "--config", str(tiny_config), "--out", str(run), "--data", str(data)]) == 0
    assert (run / "model.npz").exists()
    assert main(["eval", "--model", str(run / "model.npz"), "--data", str(data), "--recall-points", "11",
                 "--out", str(ev)]) == 0
    assert "AP_BEV" in capsys.readouterr().out
    assert "depth_median=" in (ev / "metrics.txt").read_text()
    depth = read_depth_mm16(ev / "scene_0.depth.pgm")
    assert depth.shape == (8, 16) and np.all(depth > 0)
    assert (ev / "scene_1.det.txt").exists()


def test_volumes_dump(tmp_path):
    assert main(["volumes", "--sample", "3", "--dump", str(tmp_path / "v")]) == 0
    names = {p.name for p in (tmp_path / "v").iterdir()}
    assert {"scene_3"} <= names
    assert any(n.startswith("psv") for n in names) and any(n.startswith("3dgv") for n in names)


@pytest.mark.parametrize("argv,code", [
    (["eval", "--model", "/nonexistent.npz", "--data", "/tmp"], 1),
    (["train-toy", "--config", "/nonexistent.ini", "--out", "/tmp/x"], 1),
    (["ablate", "--matrix", "/nonexistent.ini"], 1),
    (["synth", "--seeds", "a..b", "--out", "/tmp/x"], 2),
])
def test_failures_exit_nonzero(argv, code, capsys):
    assert main(argv) == code
    err = capsys.readouterr().err
    assert err.startswith("error:") and err.count("\n") == 1


def test_bad_config_key(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[train]\nwarmup = 3\n")
    assert main(["train-toy", "--config", str(p), "--out", str(tmp_path / "o")]) != 0


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["eval"])
    assert exc.value.code == 2
