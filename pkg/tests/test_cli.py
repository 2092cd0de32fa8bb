import csv
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from caedet import cli, pipeline
from caedet.model import read_checkpoint

SMALL = ["--size", "32", "--scale", "8"]

# reference profile: training accuracy 99.68 then 99.78 for epochs 2-10; validation 99.77 throughout
FLAT_PROFILE = [(1, 0.9968, 0.9977)] + [(e, 0.9978, 0.9977) for e in range(2, 11)]


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    code = cli.main(["synth", "--out", str(root / "d"), "--size", "32", "--train-clips", "7",
                     "--test-clips", "4", "--frames", "10", "--anomaly-rate", "0.5", "--seed", "3"])
    assert code == 0
    return root / "d"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["train", "--data", str(dataset), *SMALL, "--epochs", "10", "--batch", "8",
                     "--ckpt", str(out / "m.cae"), "--metrics", str(out / "metrics.csv")])
    assert code == 0
    return out


def test_synth_layout(dataset):
    for split, n in (("Train", 7), ("Test", 4)):
        d = dataset / split
        clips = sorted(p.name for p in d.iterdir() if p.is_dir())
        assert clips == [f"clip{i:03d}" for i in range(n)]
        assert sorted(p.name for p in (d / "clip000").iterdir())[:2] == ["frame0000.png", "frame0001.png"]
        with open(d / "labels.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["clip", "frame", "label"]
        assert len(rows) - 1 == sum(len(list((d / c).iterdir())) for c in clips)


@pytest.mark.parametrize("n,rate", [(10, 0.3), (7, 0.5), (4, 0.2), (9, 0.0)])
def test_synth_anomaly_rate(tmp_path, n, rate):
    assert run(["synth", "--out", tmp_path, "--size", "16", "--train-clips", 1, "--test-clips", n,
                "--frames", 6, "--anomaly-rate", rate]) == (0, None)
    with open(tmp_path / "Test" / "labels.csv", newline="") as fh:
        flagged = {r["clip"] for r in csv.DictReader(fh) if r["label"] == "1"}
    assert abs(len(flagged) - rate * n) <= 1


def test_synth_determinism(tmp_path):
    for name in ("a", "b"):
        run(["synth", "--out", tmp_path / name, "--size", "16", "--train-clips", 2, "--test-clips", 2,
             "--frames", 5, "--seed", 9])
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_metrics_csv(trained):
    lines = (trained / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,val_loss,val_acc"
    assert len(lines) == 11
    assert [int(line.split(",")[0]) for line in lines[1:]] == list(range(1, 11))
    for line in lines[1:]:
        values = [float(v) for v in line.split(",")[1:]]
        assert all(np.isfinite(values)) and 0 <= values[1] <= 1 and 0 <= values[3] <= 1


def test_checkpoint_carries_run_config(trained):
    config, _, opt = read_checkpoint(trained / "m.cae")
    assert config["run"]["scale"] == 8 and config["run"]["size"] == 32 and config["run"]["seed"] == 42
    assert config["epochs_completed"] == 10 and config["seed"] == 42
    assert opt is not None and opt["t"] > 0


def test_train_determinism(dataset, trained):
    # the run config, output paths included, is stored in the checkpoint, so rerun in place
    first = {name: (trained / name).read_bytes() for name in ("m.cae", "metrics.csv")}
    code, _ = run(["train", "--data", dataset, *SMALL, "--epochs", 10, "--batch", 8,
                   "--ckpt", trained / "m.cae", "--metrics", trained / "metrics.csv"])
    assert code == 0
    for name, data in first.items():
        assert (trained / name).read_bytes() == data


def test_eval_report(dataset, trained, tmp_path, capsys):
    code, out = run(["eval", "--data", dataset, "--ckpt", trained / "m.cae", "--scores", tmp_path / "s.csv"],
                    capsys)
    assert code == 0
    assert "[reconstruction] Test pixel accuracy:" in out.out
    assert "[detection] frame accuracy:" in out.out and "ROC-AUC" in out.out
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "clip,frame,raw_error,normalized_score,label,prediction"
    assert len(lines) - 1 == 40


def test_eval_quantile_one_has_no_val_false_positives(dataset, trained, capsys):
    code, out = run(["eval", "--data", dataset, "--ckpt", trained / "m.cae", "--quantile", "1.0"], capsys)
    assert code == 0
    assert "[detection] validation false positives: 0" in out.out


def test_eval_train_split_pixel_accuracy(dataset, trained, capsys):
    code, out = run(["eval", "--data", dataset, "--ckpt", trained / "m.cae", "--split", "Train"], capsys)
    assert code == 0
    line = next(l for l in out.out.splitlines() if "pixel accuracy" in l)
    assert line.startswith("[reconstruction] Train pixel accuracy:")
    # the >= 0.99 level is checked on the full desk-scale run in test_acceptance
    assert 0 <= float(line.rsplit(":", 1)[1]) <= 1


def test_eval_without_ground_truth(dataset, trained, tmp_path, capsys, caplog):
    import shutil
    copy = tmp_path / "d"
    shutil.copytree(dataset, copy)
    (copy / "Test" / "labels.csv").unlink()
    code, out = run(["eval", "--data", copy, "--ckpt", trained / "m.cae"], capsys)
    assert code == 0
    assert "pixel accuracy" in out.out and "frame accuracy" not in out.out
    assert "no ground truth" in caplog.text


def test_score_matches_eval(dataset, trained, tmp_path):
    assert run(["score", "--ckpt", trained / "m.cae", "--data", dataset / "Test",
                "--scores", tmp_path / "score.csv"])[0] == 0
    assert run(["eval", "--data", dataset, "--ckpt", trained / "m.cae", "--scores", tmp_path / "eval.csv"])[0] == 0
    with open(tmp_path / "score.csv", newline="") as fh:
        a = list(csv.DictReader(fh))
    with open(tmp_path / "eval.csv", newline="") as fh:
        b = list(csv.DictReader(fh))
    assert [(r["clip"], r["frame"]) for r in a] == [(r["clip"], r["frame"]) for r in b]
    assert [r["raw_error"] for r in a] == [r["raw_error"] for r in b]
    # normalization sets differ, the ordering does not
    sa = np.array([float(r["normalized_score"]) for r in a])
    sb = np.array([float(r["normalized_score"]) for r in b])
    np.testing.assert_array_equal(np.argsort(sa, kind="stable"), np.argsort(sb, kind="stable"))
    assert all(r["prediction"] == "" for r in a)
    again = tmp_path / "again.csv"
    run(["score", "--ckpt", trained / "m.cae", "--data", dataset / "Test", "--scores", again])
    assert again.read_bytes() == (tmp_path / "score.csv").read_bytes()


def _write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(pipeline.METRICS_HEADER)
        for e, tr, va in rows:
            w.writerow([e, 0.1, tr, 0.1, va])


def test_plot_flat_profile(tmp_path):
    _write_metrics(tmp_path / "m.csv", FLAT_PROFILE)
    assert run(["plot", "--metrics", tmp_path / "m.csv", "--out", tmp_path / "p.svg"])[0] == 0
    root = ET.parse(tmp_path / "p.svg").getroot()
    lines = {el.get("id"): el for el in root.iter("{http://www.w3.org/2000/svg}polyline")}
    assert {"train_acc", "val_acc", "train_loss", "val_loss"} <= set(lines)
    assert lines["val_acc"].get("data-values").split() == ["0.9977"] * 10
    assert lines["train_acc"].get("data-values").split() == ["0.9968"] + ["0.9978"] * 9
    ys = lambda el: [float(p.split(",")[1]) for p in el.get("points").split()]  # noqa: E731
    assert len(set(ys(lines["val_acc"]))) == 1
    assert len(set(ys(lines["train_acc"])[1:])) == 1


def test_plot_from_training_run(trained, tmp_path):
    assert run(["plot", "--metrics", trained / "metrics.csv", "--out", tmp_path / "p.svg"])[0] == 0
    ET.parse(tmp_path / "p.svg")


def test_exit_codes(dataset, trained, tmp_path, monkeypatch):
    assert run([])[0] == 1
    assert run(["train", "--epochs", "many"])[0] == 1
    assert run(["fly"])[0] == 1
    assert run(["train", "--data", tmp_path / "nowhere", *SMALL, "--ckpt", tmp_path / "m.cae"])[0] == 2
    assert run(["train", "--data", dataset, *SMALL])[0] == 2  # no outputs requested
    assert run(["eval", "--data", dataset, "--ckpt", tmp_path / "missing.cae"])[0] == 2
    assert run(["eval", "--data", dataset, "--ckpt", trained / "m.cae", "--scale", "4"])[0] == 2
    assert run(["plot", "--metrics", tmp_path / "none.csv", "--out", tmp_path / "p.svg"])[0] == 2
    (tmp_path / "junk.cae").write_bytes(b"CAE1junk")
    assert run(["eval", "--data", dataset, "--ckpt", tmp_path / "junk.cae"])[0] == 2

    monkeypatch.setattr(pipeline, "bce_loss", lambda y, p: float("nan"))
    assert run(["train", "--data", dataset, *SMALL, "--epochs", "1", "--ckpt", tmp_path / "nan.cae"])[0] == 3
    assert not (tmp_path / "nan.cae").exists()


def test_nan_diagnostic_names_batch(dataset, tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(pipeline, "bce_loss", lambda y, p: float("nan"))
    code, out = run(["train", "--data", dataset, *SMALL, "--metrics", tmp_path / "m.csv"], capsys)
    assert code == 3 and "epoch 1, batch 0" in out.err


@pytest.mark.parametrize("flags", [["--scale", "3"], ["--size", "40"], ["--val-fraction", "1.5"],
                                   ["--epochs", "0"], ["--lr", "-1"], ["--quantile", "2"]])
def test_invalid_flags_leave_no_files(dataset, tmp_path, flags):
    args = ["train", "--data", dataset, *SMALL, "--ckpt", tmp_path / "m.cae", "--metrics", tmp_path / "m.csv"]
    assert run(args + flags)[0] == 2
    assert list(tmp_path.iterdir()) == []


def test_thread_cap(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("CAEDET_THREADS", "1")
    assert run(["train", "--data", dataset, *SMALL, "--epochs", "1", "--metrics", tmp_path / "m.csv"])[0] == 0


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "train" in capsys.readouterr().out
