import json

import numpy as np
import pytest

from crowdflow import formats
from crowdflow.cli import main


def run_json(capsys, *argv):
    rc = main([*argv, "--json"])
    out = capsys.readouterr().out
    assert rc == 0, out
    return json.loads(out)


@pytest.fixture(scope="module")
def clip_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "clip"
    rc = main(["synth", "--out", str(path), "--seed", "3", "--frames", "4",
               "--people", "4:6", "--json"])
    assert rc == 0
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, clip_dir):
    out = tmp_path_factory.mktemp("run")
    mc = out / "model.json"
    mc.write_text(json.dumps({"backbone_channels": [4, 8, 8, 12], "n_refine_blocks": 1}))
    rc = main(["train", "--data", str(clip_dir), "--out", str(out),
               "--steps", "4", "--lr", "1e-4", "--batch", "3", "--seed", "0",
               "--model-config", str(mc), "--deterministic", "--sigma", "2.0",
               "--backend", "oracle", "--json"])
    assert rc == 0
    return out / "model.ckpt"


def test_synth_creates_layout(capsys, tmp_path):
    out = tmp_path / "clip"
    data = run_json(capsys, "synth", "--out", str(out), "--seed", "1", "--frames", "3")
    assert data["frames"] == 3
    assert (out / "annotation.json").exists()
    assert (out / "frames" / "000002.png").exists()
    assert (out / "flow" / "000002.flo2").exists()


def test_gen_gt_outputs_maps(capsys, clip_dir, tmp_path):
    out = tmp_path / "gt"
    data = run_json(capsys, "gen-gt", "--annotations", str(clip_dir / "annotation.json"),
                    "--out", str(out), "--sigma", "2.0")
    n = data["counts"][0]
    assert n == int(n) and 4 <= n <= 6
    density = formats.read_density(out / "000000.dmap")
    assert float(density.sum()) == pytest.approx(n, abs=1e-3)
    mask = formats.read_mask(out / "000000.smsk")
    assert set(np.unique(mask)) <= {0.0, 1.0}


def test_gen_gt_adaptive_kernel(capsys, clip_dir, tmp_path):
    out = tmp_path / "gt"
    data = run_json(capsys, "gen-gt", "--annotations", str(clip_dir / "annotation.json"),
                    "--out", str(out), "--kernel", "adaptive", "--beta", "0.3", "--k", "3")
    assert data["kernel"] == "adaptive"


def test_flow_command_writes_fields(capsys, clip_dir, tmp_path):
    out = tmp_path / "flows"
    data = run_json(capsys, "flow", "--clip", str(clip_dir), "--out", str(out),
                    "--backend", "oracle", "--png")
    assert data["flows"] == 3
    assert (out / "000001.flo2").exists()
    assert (out / "000001.png").exists()


def test_train_and_eval(capsys, clip_dir, trained):
    data = run_json(capsys, "eval", "--data", str(clip_dir),
                    "--checkpoint", str(trained), "--sigma", "2.0",
                    "--backend", "oracle")
    assert data["n"] == 3
    assert data["mse"] >= data["mae"] > 0


def test_infer_outputs(capsys, clip_dir, trained, tmp_path):
    dmap = tmp_path / "pred.dmap"
    plot = tmp_path / "pred.png"
    data = run_json(capsys, "infer", "--clip", str(clip_dir),
                    "--checkpoint", str(trained), "--frame", "2",
                    "--out", str(dmap), "--plot", str(plot))
    assert data["frame"] == 2
    assert data["count"] >= 0
    assert formats.read_density(dmap).shape == (8, 8)
    assert plot.stat().st_size > 0


def test_missing_file_exits_2(capsys):
    assert main(["gen-gt", "--annotations", "/nonexistent.json", "--out", "/tmp/x"]) == 2
    assert "error:" in capsys.readouterr().err


def test_bad_checkpoint_exits_2(capsys, clip_dir, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    assert main(["eval", "--data", str(clip_dir), "--checkpoint", str(bad)]) == 2
    assert "error:" in capsys.readouterr().err


def test_unknown_model_config_key_exits_2(capsys, clip_dir, tmp_path):
    mc = tmp_path / "model.json"
    mc.write_text(json.dumps({"depth": 4}))
    rc = main(["train", "--data", str(clip_dir), "--out", str(tmp_path / "run"),
               "--steps", "1", "--model-config", str(mc)])
    assert rc == 2
    assert "unknown" in capsys.readouterr().err


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["synth"])  # --out is required
    assert exc.value.code == 2


def test_human_readable_output(capsys, clip_dir, tmp_path):
    rc = main(["gen-gt", "--annotations", str(clip_dir / "annotation.json"),
               "--out", str(tmp_path / "gt")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "counts:" in out
