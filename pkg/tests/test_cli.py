import json

import numpy as np
import pytest
from PIL import Image

from eagle.cli import main
from eagle.data import read_manifest, write_array

TOY = ["channels=8,16,32,64,128", "depths=1,1,1,1", "d_state=4", "max_epochs=2", "augment=false"]


def run(args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    assert run(["synth", "--out", root, "--n", 20, "--seed", 1, "--kind", "mixed"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    args = ["train"] + [a for kv in TOY + [f"data={dataset}", f"out={out}"] for a in ("--override", kv)]
    assert run(args) == 0
    return out


def test_synth_layout(dataset):
    rows = read_manifest(dataset)
    assert len(rows) == 20
    assert [sum(r["split"] == s for r in rows) for s in ("train", "val", "test")] == [16, 2, 2]
    for r in rows:
        for suffix in ("_image.egl", "_mask.egl", "_image.png", "_mask.png"):
            assert (dataset / r["split"] / f"{r['id']}{suffix}").is_file()


def test_synth_byte_identical(tmp_path, dataset):
    assert run(["synth", "--out", tmp_path / "again", "--n", 20, "--seed", 1, "--kind", "mixed"]) == 0
    for p in sorted(dataset.rglob("*.*")):
        assert (tmp_path / "again" / p.relative_to(dataset)).read_bytes() == p.read_bytes()


def test_synth_n_zero_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        run(["synth", "--out", tmp_path, "--n", 0])
    assert e.value.code == 2


def test_synth_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(["synth", "--out", blocker / "sub", "--n", 2]) != 0
    assert "cannot write" in capsys.readouterr().err


def test_train_outputs(trained):
    records = [json.loads(x) for x in (trained / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [1, 2]
    for name in ("best.ckpt", "last.ckpt", "config.txt", "curves.png"):
        assert (trained / name).is_file()
    assert "channels = 8,16,32,64,128" in (trained / "config.txt").read_text()


def test_train_unknown_key(tmp_path, capsys):
    assert run(["train", "--override", "colour=red"]) == 2
    assert "colour" in capsys.readouterr().err


def test_train_missing_dataset(tmp_path):
    assert run(["train", "--override", f"data={tmp_path / 'nope'}", "--override", f"out={tmp_path / 'o'}"]) == 2


def test_train_non_finite_loss_exit_3(tmp_path, dataset):
    args = ["train"] + [a for kv in TOY + [f"data={dataset}", f"out={tmp_path}", "lr=1e30"]
                        for a in ("--override", kv)]
    assert run(args) == 3


def test_eval_report(trained, dataset, tmp_path, capsys):
    out = tmp_path / "ev"
    assert run(["eval", "--ckpt", trained / "best.ckpt", "--data", dataset, "--split", "test", "--out", out]) == 0
    lines = [json.loads(x) for x in (out / "report.jsonl").read_text().splitlines()]
    summary = lines[-1]
    assert summary["record"] == "summary" and summary["n"] == 2
    assert all(0 <= summary[k] <= 1 for k in ("dsc", "precision", "recall"))
    assert [x["record"] for x in lines[:-1]] == ["sample", "sample"]
    assert (out / "overlays.png").is_file()
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1]) == summary


def test_eval_config_mismatch(trained, dataset, capsys):
    code = run(["eval", "--ckpt", trained / "best.ckpt", "--data", dataset, "--override", "channels=16,32,64,128,256",
                "--override", "depths=1,1,1,1", "--override", "d_state=4"])
    assert code == 2
    assert "channels" in capsys.readouterr().err


def test_eval_corrupt_magic(trained, dataset, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"GARBAGE!" + (trained / "best.ckpt").read_bytes()[8:])
    assert run(["eval", "--ckpt", bad, "--data", dataset]) == 2


def test_predict_dims_and_encoding(trained, tmp_path):
    img = (np.random.default_rng(0).random((50, 90)) * 255).astype(np.uint8)
    Image.fromarray(img).save(tmp_path / "in.png")
    assert run(["predict", "--ckpt", trained / "best.ckpt", "--in", tmp_path / "in.png", "--out", tmp_path / "m.png",
                "--prob-out", tmp_path / "p.egl"]) == 0
    mask = np.asarray(Image.open(tmp_path / "m.png"))
    assert mask.shape == (50, 90) and mask.dtype == np.uint8
    assert set(np.unique(mask)) <= {0, 255}
    from eagle.data import read_array

    prob = read_array(tmp_path / "p.egl")
    assert prob.shape == (50, 90) and np.array_equal(prob >= 0.5, mask == 255)


def test_predict_raw_hu_container(trained, tmp_path):
    write_array(tmp_path / "ct.egl", np.full((64, 64), 40, np.int16))
    assert run(["predict", "--ckpt", trained / "best.ckpt", "--in", tmp_path / "ct.egl", "--out", tmp_path / "m.png"]) == 0


def test_predict_missing_input(trained, tmp_path):
    assert run(["predict", "--ckpt", trained / "best.ckpt", "--in", tmp_path / "none.png", "--out", tmp_path / "m.png"]) == 2


def test_check_haar(capsys):
    assert run(["check", "--suite", "haar"]) == 0
    out = capsys.readouterr().out
    assert "PASS  haar.round_trip" in out and "PASS  haar.parseval" in out


def test_bad_threshold():
    with pytest.raises(SystemExit) as e:
        run(["predict", "--ckpt", "x", "--in", "y", "--out", "z", "--threshold", "1.5"])
    assert e.value.code == 2
