import json

import numpy as np
import pytest

from jointfh.cli import main
from jointfh.data import read_ppm, write_ppm
from jointfh.networks import read_checkpoint_meta
from jointfh.tensor import make_rng

TINY = {
    "data": {"num_classes": 3, "samples_per_class": 6, "height": 16, "width": 16, "num_pairs": 40},
    "net": {"height": 16, "width": 16, "channels": [2, 3, 4, 4], "feature_dim": 5, "num_classes": 3,
            "srnet_kernels": [3, 1, 1], "srnet_channels": [6, 6]},
    "train": {"total_steps": 4, "decay_steps": [2], "batch_size": 4},
    "eval": {"folds": 2, "fpr_target": 0.1},
}


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY))
    return path


def run(cfg, out, *args):
    return main(["--config", str(cfg), "--out", str(out), *args])


@pytest.fixture
def generated(cfg, tmp_path):
    out = tmp_path / "out"
    assert run(cfg, out, "gen-data") == 0
    return out


def test_gen_data_layout_and_hash(generated):
    manifest = json.loads((generated / "data" / "dataset.json").read_text())
    assert manifest["n_train"] + manifest["n_test"] == 18
    raw = (generated / "data" / "train.jfds").read_bytes()
    assert int.from_bytes(raw[8:12], "little") == manifest["n_train"]
    assert len(manifest["config_hash"]) == 16


def test_gen_data_is_byte_identical(cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(cfg, a, "gen-data") == 0 and run(cfg, b, "gen-data") == 0
    for name in ("train.jfds", "test.jfds", "pairs.csv", "dataset.json"):
        assert (a / "data" / name).read_bytes() == (b / "data" / name).read_bytes()
    assert run(cfg, b, "gen-data", "--seed", "8") == 0
    assert (a / "data" / "train.jfds").read_bytes() != (b / "data" / "train.jfds").read_bytes()


def test_single_identity_is_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**TINY, "data": {**TINY["data"], "num_classes": 1}}))
    assert run(bad, tmp_path / "o", "gen-data") == 1
    assert not (tmp_path / "o").exists()
    assert "at least 2" in capsys.readouterr().err


@pytest.mark.parametrize("section", ["data", "net", "train", "eval", "paths", None])
def test_unknown_key_aborts_before_side_effects(tmp_path, section, capsys):
    doc = json.loads(json.dumps(TINY))
    if section is None:
        doc["extra"] = 1
    else:
        doc.setdefault(section, {})["extra"] = 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert run(bad, tmp_path / "o", "gen-data") == 1
    assert not (tmp_path / "o").exists()
    assert "extra" in capsys.readouterr().err


def test_bad_json_and_bad_flags(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(bad, tmp_path / "o", "gen-data") == 1
    assert main(["train", "--mode", "nope"]) == 1
    assert main(["eval", "--setting", "7"]) == 1


def test_train_is_deterministic(cfg, generated, tmp_path):
    assert run(cfg, generated, "train", "--mode", "joint") == 0
    ckpt = (generated / "checkpoints" / "joint.ckpt").read_bytes()
    metrics = (generated / "metrics" / "joint.csv").read_text()
    assert run(cfg, generated, "train", "--mode", "joint") == 0
    assert (generated / "checkpoints" / "joint.ckpt").read_bytes() == ckpt
    assert (generated / "metrics" / "joint.csv").read_text() == metrics
    lines = metrics.splitlines()
    assert lines[0] == "step,loss_total,loss_h,loss_c,loss_d,lr_sr,lr_fr"
    assert len(lines) == 1 + TINY["train"]["total_steps"]
    meta = read_checkpoint_meta(generated / "checkpoints" / "joint.ckpt")
    sidecar = json.loads((generated / "metrics" / "joint.json").read_text())
    assert meta["meta"]["config_hash"] == sidecar["config_hash"]


def test_train_seed_changes_checkpoint(cfg, generated):
    assert run(cfg, generated, "train", "--mode", "frnet-hr") == 0
    first = (generated / "checkpoints" / "frnet-hr.ckpt").read_bytes()
    assert run(cfg, generated, "train", "--mode", "frnet-hr", "--seed", "5") == 0
    assert (generated / "checkpoints" / "frnet-hr.ckpt").read_bytes() != first


def test_train_without_data_is_runtime_error(cfg, tmp_path, capsys):
    assert run(cfg, tmp_path / "none", "train", "--mode", "joint") == 2
    assert "gen-data" in capsys.readouterr().err


def test_frnet_hallucinated_needs_srnet(cfg, generated, capsys):
    assert run(cfg, generated, "train", "--mode", "frnet-hallucinated") == 2
    assert "SRNET" in capsys.readouterr().err
    assert run(cfg, generated, "train", "--mode", "srnet-only") == 0
    assert run(cfg, generated, "train", "--mode", "frnet-hallucinated") == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_partial_log(tmp_path, capsys):
    doc = json.loads(json.dumps(TINY))
    doc["train"].update(lr_frnet=1e6, total_steps=50, decay_steps=[])
    path = tmp_path / "hot.json"
    path.write_text(json.dumps(doc))
    out = tmp_path / "out"
    assert run(path, out, "gen-data") == 0
    with np.errstate(all="ignore"):
        assert run(path, out, "train", "--mode", "frnet-hr") == 2
    assert "diverged" in capsys.readouterr().err
    rows = (out / "metrics" / "frnet-hr.csv").read_text().splitlines()
    assert rows[0].startswith("step,") and len(rows) < 51
    assert not (out / "checkpoints" / "frnet-hr.ckpt").exists()


def test_eval_missing_checkpoint_names_setting(cfg, generated, capsys):
    assert run(cfg, generated, "eval", "--setting", "3") == 2
    err = capsys.readouterr().err
    assert "setting 3" in err and "frnet-hr" in err


def test_eval_report_header(cfg, generated, capsys):
    assert run(cfg, generated, "train", "--mode", "frnet-hr") == 0
    capsys.readouterr()
    assert run(cfg, generated, "eval", "--setting", "2") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "setting,accuracy,tp,fpr_target,psnr_db,n_pairs,seed,config_hash"
    assert lines[1].startswith("2,")
    assert (generated / "reports" / "setting-2.csv").read_text().splitlines() == lines


def test_eval_rejects_empty_pairs(cfg, generated, capsys):
    assert run(cfg, generated, "train", "--mode", "frnet-hr") == 0
    (generated / "data" / "pairs.csv").write_text("index_a,index_b,same\n")
    assert run(cfg, generated, "eval", "--setting", "1") == 2
    assert "empty" in capsys.readouterr().err


def test_settings_report_is_byte_identical(cfg, generated):
    assert run(cfg, generated, "settings", "--train-missing") == 0
    report = (generated / "reports" / "settings.csv").read_bytes()
    assert len(report.decode().splitlines()) == 7
    assert run(cfg, generated, "settings") == 0
    assert (generated / "reports" / "settings.csv").read_bytes() == report


def test_gradcheck_pass_and_corrupt_fail(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS joint" in out
    assert main(["gradcheck", "--seeds", "1", "--corrupt-gradient"]) == 3
    assert "FAIL joint" in capsys.readouterr().out


def test_hallucinate_output(cfg, generated, tmp_path):
    assert run(cfg, generated, "train", "--mode", "srnet-only") == 0
    img = make_rng(0).integers(0, 256, size=(3, 16, 16)).astype(np.float64)
    write_ppm(tmp_path / "face.ppm", img)
    ckpt = str(generated / "checkpoints" / "srnet-only.ckpt")
    assert run(cfg, generated, "hallucinate", "--checkpoint", ckpt, "--input", str(tmp_path / "face.ppm")) == 0
    out_path = generated / "images" / "face-sr.ppm"
    panels = read_ppm(out_path)
    assert panels.shape == (3, 16, 48)
    assert panels.min() >= 0 and panels.max() <= 255
    assert np.array_equal(panels[:, :, 32:], img)
    assert b"# config " in out_path.read_bytes()[:40]
    assert run(cfg, generated, "hallucinate", "--checkpoint", ckpt, "--input", str(tmp_path / "face.ppm"),
               "--low-res", "--output", str(tmp_path / "up.ppm")) == 0
    assert read_ppm(tmp_path / "up.ppm").shape == (3, 64, 128)


def test_hallucinate_constant_image(cfg, generated, tmp_path):
    assert run(cfg, generated, "train", "--mode", "srnet-only") == 0
    write_ppm(tmp_path / "flat.ppm", np.full((3, 16, 16), 100.0))
    ckpt = str(generated / "checkpoints" / "srnet-only.ckpt")
    assert run(cfg, generated, "hallucinate", "--checkpoint", ckpt, "--input", str(tmp_path / "flat.ppm"),
               "--output", str(tmp_path / "o.ppm")) == 0
    sr = read_ppm(tmp_path / "o.ppm")[:, :, 16:32]
    assert sr.max() - sr.min() <= 10


def test_hallucinate_bad_image(cfg, generated, tmp_path):
    write_ppm(tmp_path / "odd.ppm", np.zeros((3, 10, 16)))
    (tmp_path / "junk.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    assert run(cfg, generated, "train", "--mode", "srnet-only") == 0
    ckpt = str(generated / "checkpoints" / "srnet-only.ckpt")
    for name in ("odd.ppm", "junk.ppm", "missing.ppm"):
        assert run(cfg, generated, "hallucinate", "--checkpoint", ckpt, "--input", str(tmp_path / name)) == 2


def test_setting_five_needs_only_its_own_checkpoint(cfg, generated):
    assert run(cfg, generated, "train", "--mode", "srnet-only") == 0
    assert run(cfg, generated, "train", "--mode", "frnet-hallucinated") == 0
    (generated / "checkpoints" / "srnet-only.ckpt").unlink()
    assert run(cfg, generated, "eval", "--setting", "5") == 0
