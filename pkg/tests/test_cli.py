import subprocess
import sys

import numpy as np
import pytest

from hvmflow.cli import EXIT_GRADCHECK, EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, main
from hvmflow.correlation import CorrelationVolume, save_correlation
from hvmflow.errors import NumericalError, StageError
from hvmflow.io import save_events, save_flow, save_image
from hvmflow.types import EventStream, FlowField2D, Image


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    assert main(["generate", str(d), "--set", "scene.width=48", "--set", "scene.height=40",
                 "--set", "scene.cx=24", "--set", "scene.cy=20", "--set", "scene.focal=45"]) == 0
    return d


def test_generate_writes_files(scene_dir):
    for name in ("camera.ini", "rgb_t.ppm", "events.txt", "cloud_t.txt", "gt_flow.vmfl"):
        assert (scene_dir / name).exists()


def test_run_from_directory(scene_dir, tmp_path, capsys):
    args = ["run", "--input", str(scene_dir), "--out", str(tmp_path), "--set", "samples=100",
            "--set", "clusters=16"]
    assert main(args) == EXIT_OK
    out = capsys.readouterr().out
    assert "epe_2d: " in out and "loss_total: " in out
    assert (tmp_path / "flow.png").exists() and (tmp_path / "report.json").exists()
    assert (tmp_path / "report.txt").read_text() == out


def test_run_without_figures(scene_dir, tmp_path):
    assert main(["run", "--input", str(scene_dir), "--out", str(tmp_path), "--no-figures",
                 "--set", "samples=50", "--set", "clusters=16"]) == EXIT_OK
    assert not (tmp_path / "flow.png").exists()


def test_metrics_command(tmp_path, capsys):
    gt = np.zeros((3, 4, 2))
    pred = gt.copy()
    pred[0, 0] = [3.0, 4.0]
    save_flow(tmp_path / "p.vmfl", FlowField2D(pred))
    save_flow(tmp_path / "g.vmfl", FlowField2D(gt))
    assert main(["metrics", "--pred", str(tmp_path / "p.vmfl"),
                 "--gt", str(tmp_path / "g.vmfl")]) == EXIT_OK
    vals = dict(line.split(": ") for line in capsys.readouterr().out.splitlines())
    assert float(vals["epe"]) == pytest.approx(5.0 / 12, rel=1e-15)
    assert float(vals["acc"]) == pytest.approx(100 * 11 / 12, rel=1e-15)


def test_loss_adv(tmp_path, capsys):
    (tmp_path / "a.txt").write_text("0.5\n# comment\n0.5\n")
    (tmp_path / "b.txt").write_text("0.5\n")
    assert main(["loss", "adv", "--scores-t", str(tmp_path / "a.txt"),
                 "--scores-t2", str(tmp_path / "b.txt")]) == EXIT_OK
    assert f"loss_adv: {float(2 * np.log(0.5))!r}" in capsys.readouterr().out
    (tmp_path / "b.txt").write_text("1.0\n")
    assert main(["loss", "adv", "--scores-t", str(tmp_path / "a.txt"),
                 "--scores-t2", str(tmp_path / "b.txt")]) == EXIT_INPUT


def test_loss_pse_and_consis(tmp_path, capsys):
    rng = np.random.default_rng(0)
    d = rng.uniform(1, 5, (6, 7))
    for name in ("pt", "st", "pt2", "st2"):
        save_image(tmp_path / f"{name}.pgm", Image(d, "DEPTH"))
    assert main(["loss", "pse", "--pred-t", str(tmp_path / "pt.pgm"), "--pse-t",
                 str(tmp_path / "st.pgm"), "--pred-t2", str(tmp_path / "pt2.pgm"),
                 "--pse-t2", str(tmp_path / "st2.pgm")]) == EXIT_OK
    assert "loss_pse: 0.0" in capsys.readouterr().out
    save_image(tmp_path / "i.pgm", Image(rng.uniform(size=(6, 7)), "LUMA"))
    save_events(tmp_path / "e.txt", EventStream([1, 2], [3, 3], [0.1, 0.2], [1, -1], 7, 6))
    save_flow(tmp_path / "u.vmfl", FlowField2D(np.full((6, 7, 2), 0.3)))
    assert main(["loss", "consis", "--image", str(tmp_path / "i.pgm"), "--events",
                 str(tmp_path / "e.txt"), "--flow", str(tmp_path / "u.vmfl")]) == EXIT_OK


def test_loss_kl(tmp_path, capsys):
    rng = np.random.default_rng(1)
    paths = []
    for k in range(6):
        p = tmp_path / f"c{k}.txt"
        save_correlation(p, CorrelationVolume(rng.normal(size=(1, 3, 5)), 2, "xy"[k % 2], "RGB"))
        paths.append(str(p))
    args = ["loss", "kl", "--lidar", paths[0], paths[1], "--rgb", paths[2], paths[3],
            "--event", paths[4], paths[5]]
    assert main(args) == EXIT_OK
    assert "loss_kl: " in capsys.readouterr().out
    assert main(args[:-1]) == EXIT_INPUT


def test_missing_loss_arguments():
    assert main(["loss", "pho"]) == EXIT_INPUT


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--loss", "adv", "--seeds", "2"]) == EXIT_OK
    assert "adv: PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--loss", "adv", "--seeds", "1", "--tol", "0"]) == EXIT_GRADCHECK


def test_argument_errors():
    assert main([]) == EXIT_INPUT
    assert main(["bogus"]) == EXIT_INPUT
    assert main(["run", "--set", "nokey=1"]) == EXIT_INPUT
    assert main(["--help"]) == EXIT_OK


@pytest.mark.parametrize("exc, code", [
    (NumericalError("nan"), EXIT_NUMERIC),
    (FloatingPointError("overflow"), EXIT_NUMERIC),
    (StageError("motion", NumericalError("inf")), EXIT_NUMERIC),
    (StageError("motion", ValueError("bad")), EXIT_INPUT),
    (OSError("gone"), EXIT_INPUT),
])
def test_error_exit_codes(monkeypatch, exc, code):
    import hvmflow.pipeline

    def boom(*args, **kwargs):
        raise exc

    monkeypatch.setattr(hvmflow.pipeline, "run_pipeline", boom)
    assert main(["run"]) == code


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "hvmflow", "metrics", "--pred", "/nonexistent",
                          "--gt", "/nonexistent"], capture_output=True, text=True)
    assert res.returncode == EXIT_INPUT
    assert "Traceback" not in res.stderr
