import json
from pathlib import Path

import numpy as np
import pytest

from avatarsplat.cli import MANIFEST_NAME, content_hash, load_dataset, main, parse_range
from avatarsplat.data import ingest, split
from avatarsplat.splatting import save_png

TINY_TOML = """
[model]
n_gaussians = 300
triplane_resolution = 16
plane_channels = 4
triplane_const_channels = 16
model_dim = 16
heads = 2
generator_widths = [16, 16, 8, 8, 8]
w_dim = 16
z_dim = 16
encoder_width = 8

[train]
iterations = 3

[stage3]
pti_steps1 = 2
pti_steps2 = 1
"""


def _manifest(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.toml").write_text(TINY_TOML)
    assert main(["synth", "--out", str(root / "ds"), "--frames", "6", "--resolution", "64", "--seed", "2"]) == 0
    assert main(["train", "--dataset", str(root / "ds"), "--config", str(root / "tiny.toml"),
                 "--out", str(root / "run")]) == 0
    return root


def test_parse_range():
    assert parse_range("-30:30:5") == [-30 + 5 * k for k in range(13)]
    assert parse_range("0:1:0.5") == [0.0, 0.5, 1.0]
    with pytest.raises(Exception):
        parse_range("1:2")


def test_dataset_spec_strings():
    ds = load_dataset("synth:frames=3,resolution=32,seed=4")
    assert len(ds) == 3 and ds.resolution == (32, 32)


def test_content_hash_tracks_bytes(tmp_path):
    (tmp_path / "a").write_bytes(b"abc")
    h = content_hash([tmp_path], {"k": 1})
    assert h == content_hash([tmp_path], {"k": 1})
    assert h != content_hash([tmp_path], {"k": 2})
    (tmp_path / "a").write_bytes(b"abd")
    assert h != content_hash([tmp_path], {"k": 1})


def test_synth_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--frames", "3", "--resolution", "32"]) == 0
    ma, mb = _manifest(tmp_path / "a" / MANIFEST_NAME), _manifest(tmp_path / "b" / MANIFEST_NAME)
    assert ma["input_hash"] == mb["input_hash"] and ma["command"] == "synth"
    assert content_hash([tmp_path / "a" / "frames"]) == content_hash([tmp_path / "b" / "frames"])


def test_train_manifest_and_outputs(workspace):
    m = _manifest(workspace / "run" / MANIFEST_NAME)
    assert m["command"] == "train" and m["config"]["stage1"]["iterations"] == 3
    assert m["config"]["model"]["n_gaussians"] == 300 and m["wall_clock"] > 0
    assert m["outputs"] and all(Path(o).exists() for o in m["outputs"])
    assert (workspace / "run" / "stage3" / "manifest.json").exists()


def test_stage_without_checkpoint_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--dataset", "synth:frames=3,resolution=32", "--stage", "3", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "stage-2 checkpoint" in capsys.readouterr().err


def test_paper_plan_is_echoed(tmp_path, capsys):
    assert main(["train", "--paper", "--dry-run", "--out", str(tmp_path / "p")]) == 0
    out = capsys.readouterr().out
    assert "10000 iterations" in out and "50000 iterations" in out and "batch 4" in out and "lr 0.0001" in out


def test_unknown_config_key_fails(tmp_path, capsys):
    (tmp_path / "bad.toml").write_text("[stage1]\nlearning_rte = 1.0\n")
    rc = main(["train", "--dry-run", "--config", str(tmp_path / "bad.toml"), "--out", str(tmp_path / "o")])
    assert rc == 1 and "learning_rte" in capsys.readouterr().err


def test_render_orbit_emits_thirteen_frames(workspace):
    out = workspace / "orbit"
    assert main(["render", "--ckpt", str(workspace / "run" / "stage3"), "--mode", "orbit", "--out", str(out)]) == 0
    assert len(list((out / "orbit").glob("*.png"))) == 13
    assert _manifest(out / MANIFEST_NAME)["config"]["stage"] == 3


def test_render_self_and_eval(workspace, capsys):
    out = workspace / "self"
    assert main(["render", "--ckpt", str(workspace / "run" / "stage3"), "--out", str(out)]) == 0
    _, test_ids = split(ingest(workspace / "ds"))
    assert len(list((out / "pred").glob("*.png"))) == len(test_ids) == len(list((out / "gt").glob("*.png")))
    rep = workspace / "eval" / "report.json"
    assert main(["eval", "--pred", str(out / "gt"), "--gt", str(out / "gt"), "--out", str(rep)]) == 0
    (r,) = json.loads(rep.read_text())
    assert r["psnr"] == 99.0 and r["ssim"] == pytest.approx(1.0) and r["flmd"] == 0.0 and r["sd"] == 0.0
    assert "| F-LMD↓ | SD↓ | PSNR↑ | LPIPS↓ |" in rep.with_suffix(".md").read_text()
    assert rep.with_name("report.manifest.json").exists()


def test_eval_count_mismatch(workspace, tmp_path):
    n_gt = len(list((workspace / "self" / "gt").glob("*.png")))
    for k in range(n_gt + 1):
        save_png(np.zeros((64, 64, 3)), tmp_path / f"{k}.png")
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--pred", str(tmp_path), "--gt", str(workspace / "self" / "gt"), "--out",
              str(tmp_path / "r.json")])
    assert exc.value.code == 2


def test_render_cross(workspace):
    out = workspace / "cross"
    rc = main(["render", "--ckpt", str(workspace / "run" / "stage2"), "--mode", "cross",
               "--driving", "synth:frames=3,resolution=64,seed=9", "--out", str(out)])
    assert rc == 0 and len(list((out / "pred").glob("*.png"))) == 3


def test_invert(workspace):
    ds = ingest(workspace / "ds")
    paths = []
    for i in range(2):
        paths.append(workspace / f"view{i}.png")
        save_png(ds[i].image, paths[-1])
    out = workspace / "inv"
    rc = main(["invert", "--ckpt", str(workspace / "run" / "stage3"), "--images", ",".join(map(str, paths)),
               "--steps1", "2", "--steps2", "1", "--out", str(out)])
    assert rc == 0
    phases = [json.loads(line)["phase"] for line in (out / "pti_trace.jsonl").read_text().splitlines()]
    assert phases == [1, 1, 2]
    assert np.load(out / "w.npy").shape[-1] == 16


def test_invert_without_images_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["invert", "--images", "", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_ablate_prune(workspace):
    out = workspace / "abl" / "prune.json"
    assert main(["ablate", "--ckpt", str(workspace / "run"), "--study", "prune", "--epochs", "1",
                 "--out", str(out)]) == 0
    recs = json.loads(out.read_text())
    assert [r["blocks"] for r in recs] == [[1, 2, 3, 4, 5], [1, 2, 3, 4], [1, 2, 3], [1, 2], [1]]
    assert _manifest(out.with_name("prune.manifest.json"))["config"]["dataset"] == str(workspace / "ds")
