import io
import subprocess
import sys

import numpy as np
import pytest

from facedetkit.assigner import synthetic_scale_dataset
from facedetkit.cli import main
from facedetkit.dataio import FaceAnnotation, ImageRecord, read_predictions, serialize_wider_gt, write_prediction_set
from facedetkit.evaluation import format_difficulty_list
from facedetkit.geometry import Box
from facedetkit.postprocess import Detection

SMALL_TRAIN = [
    "--set", "train.iters_per_epoch=4",
    "--set", "train.total_epochs=3",
    "--set", "train.batch_size=1",
    "--set", "train.warmup_iters=4",
    "--set", "train.cycle_epochs=1",
    "--set", "train.heldout_scenes=2",
]


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), out)
    return code, out.getvalue()


def faces_fixture(tmp_path):
    records = [
        ImageRecord("ev/a.jpg", [FaceAnnotation(Box(10, 10, 50, 60)), FaceAnnotation(Box(100, 20, 120, 44))]),
        ImageRecord("ev/b.jpg", [FaceAnnotation(Box(5, 5, 25, 25))]),
    ]
    gt = tmp_path / "gt.txt"
    gt.write_text(serialize_wider_gt(records))
    full = {r.key: list(range(1, len(r.annotations) + 1)) for r in records}
    easy = {k: v[:1] for k, v in full.items()}
    paths = {}
    for name, lists in (("easy", easy), ("medium", full), ("hard", full)):
        paths[name] = tmp_path / f"{name}.txt"
        paths[name].write_text(format_difficulty_list(lists))
    return records, gt, paths


def eval_args(pred, gt, paths, *extra):
    return ["eval", "--pred-dir", str(pred), "--gt", str(gt)] + [
        a for n in ("easy", "medium", "hard") for a in (f"--{n}", str(paths[n]))
    ] + list(extra)


def test_anchors_report_default():
    code, text = run("anchors-report")
    assert code == 0
    assert text.rstrip().endswith("total 102375")
    assert text.startswith("# resolved config")
    assert "10.0794 12.6992 16.0000" in text


def test_anchors_report_single_level_csv(tmp_path):
    code, text = run("anchors-report", "--set", "anchors.strides=8,", "--out-dir", str(tmp_path))
    assert code == 0
    rows = (tmp_path / "anchors.csv").read_text().splitlines()
    assert rows[0].startswith("# config_hash=") and rows[1].startswith("level,stride")
    assert len(rows) == 3
    assert "total 19200" in text


def test_bad_config_names_key(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[anchors]\nbase_scael = 2\n")
    code, _ = run("anchors-report", "--config", str(cfg))
    assert code == 1
    assert "anchors.base_scael" in capsys.readouterr().err


def test_usage_errors():
    assert run("no-such-command")[0] == 1
    assert run("anchors-report", "--bogus-flag")[0] == 1
    assert run("anchors-report", "--image-size", "12")[0] == 1


def test_missing_gt_is_data_error(tmp_path):
    assert run("assign-report", "--gt", str(tmp_path / "none.txt"))[0] == 2


def test_assign_report_outputs(tmp_path):
    data = synthetic_scale_dataset(0, num_images=6, sizes=((10, 30), (110, 300)))
    records = [
        ImageRecord(f"ev/{i}.jpg", [FaceAnnotation(Box(*b)) for b in boxes]) for i, (boxes, _) in enumerate(data)
    ]
    gt = tmp_path / "gt.txt"
    gt.write_text(serialize_wider_gt(records))
    out = tmp_path / "out"
    code, text = run("assign-report", "--gt", str(gt), "--image-size", "640x640", "--out-dir", str(out), "--jobs", "2")
    assert code == 0
    for name in ("default", "retinaface"):
        for suffix in (".csv", "_cdf.svg", "_density.svg"):
            assert (out / f"assign_{name}{suffix}").is_file()
    assert (out / "assign_default_cdf.svg").read_text().startswith("<svg")
    summary = (out / "assign_summary.csv").read_text().splitlines()
    assert summary[0].startswith("# config_hash=")
    ratios = {r.split(",")[0]: float(r.split(",")[-1]) for r in summary[2:]}
    assert abs(ratios["default"] - 1) < abs(ratios["retinaface"] - 1)


def test_assign_report_single_gt_and_config_preset(tmp_path):
    gt = tmp_path / "gt.txt"
    gt.write_text(serialize_wider_gt([ImageRecord("ev/a.jpg", [FaceAnnotation(Box(100, 100, 140, 140))])]))
    out = tmp_path / "out"
    code, _ = run("assign-report", "--gt", str(gt), "--image-size", "320x320", "--compare", "config",
                  "--set", "assigner.pos_iou_thr=0.5", "--set", "assigner.neg_iou_thr=0.5", "--out-dir", str(out))
    assert code == 0
    rows = (out / "assign_config.csv").read_text().splitlines()[2:]
    # one medium face: the CDF steps to 1 at its count and is 0 before
    cum = [(int(r.split(",")[1]), float(r.split(",")[3])) for r in rows]
    k = cum[-1][0]
    assert cum[-1][1] == 1.0 and all(c == 0.0 for kk, c in cum if kk < k)


def test_assign_report_empty_dataset(tmp_path):
    gt = tmp_path / "gt.txt"
    gt.write_text("ev/a.jpg\n0\n0 0 0 0 0 0 0 0 0 0\n")
    assert run("assign-report", "--gt", str(gt))[0] == 2
    gt.write_text("ev/a.jpg\nzz\n")
    assert run("assign-report", "--gt", str(gt))[0] == 2


def test_eval_perfect_and_empty(tmp_path):
    records, gt, paths = faces_fixture(tmp_path)
    pred = tmp_path / "pred"
    write_prediction_set(pred, {r.key: [Detection.scored(a.box, 1.0) for a in r.annotations] for r in records})
    out = tmp_path / "out"
    code, text = run(*eval_args(pred, gt, paths, "--out-dir", str(out)))
    assert code == 0
    assert text.splitlines()[-2:] == ["easy medium hard", "1.0000 1.0000 1.0000"]
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("# config_hash=") and summary[1] == "subset,ap,num_gt,num_dets"
    assert summary[2].startswith("easy,1.000000,")
    assert len((out / "pr_hard.csv").read_text().splitlines()) == 1002
    assert (out / "pr_curves.svg").is_file()

    empty = tmp_path / "empty"
    write_prediction_set(empty, {r.key: [] for r in records})
    code, text = run(*eval_args(empty, gt, paths))
    assert code == 0 and text.splitlines()[-1] == "0.0000 0.0000 0.0000"


def test_eval_missing_list(tmp_path):
    records, gt, paths = faces_fixture(tmp_path)
    pred = tmp_path / "pred"
    pred.mkdir()
    args = ["eval", "--pred-dir", str(pred), "--gt", str(gt), "--easy", str(paths["easy"])]
    assert run(*args)[0] == 1
    paths["hard"] = tmp_path / "missing.txt"
    assert run(*eval_args(pred, gt, paths))[0] == 2


def _variant_dir(root, name, meta, preds):
    d = root / name
    write_prediction_set(d, preds)
    (d / "variant.ini").write_text("[variant]\n" + meta)
    return d


def test_tta_merge_identity(tmp_path):
    dets = {"ev/a": [Detection.scored((10.5, 20.25, 40, 60), 0.9), Detection.scored((100, 100, 130, 140), 0.4)]}
    v = _variant_dir(tmp_path, "v0", "scale = 1.0\n", dets)
    out = tmp_path / "merged"
    code, _ = run("tta-merge", "--variant", str(v), "--out-dir", str(out))
    assert code == 0
    assert (out / "ev" / "a.txt").read_text() == (v / "ev" / "a.txt").read_text()


def test_tta_merge_flip_of_symmetric_fixture(tmp_path):
    # faces mirror-symmetric about x = 100
    boxes = [(20, 10, 60, 50), (140, 10, 180, 50)]
    dets = {"ev/a": [Detection.scored(b, s) for b, s in zip(boxes, (0.9, 0.8))]}
    plain = _variant_dir(tmp_path, "plain", "scale = 1.0\n", dets)
    flipped = {"ev/a": [Detection.scored((200 - b[2], b[1], 200 - b[0], b[3]), s) for b, s in zip(boxes, (0.9, 0.8))]}
    flip = _variant_dir(tmp_path, "flip", "scale = 1.0\nflip = true\n", flipped)
    sizes = tmp_path / "sizes.csv"
    sizes.write_text("image,width,height\nev/a.jpg,200,100\n")
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert run("tta-merge", "--variant", str(plain), "--out-dir", str(out_a))[0] == 0
    assert run("tta-merge", "--variant", str(flip), "--image-sizes", str(sizes), "--out-dir", str(out_b))[0] == 0
    a = read_predictions(out_a)["ev/a"]
    b = read_predictions(out_b)["ev/a"]
    assert [d.box for d in a] == [d.box for d in b]


def test_tta_merge_two_scales(tmp_path):
    faces = [(10, 10, 30, 30), (60, 40, 90, 80)]
    v1 = _variant_dir(tmp_path, "s1", "short_edge = 100\n", {"ev/a": [Detection.scored(b, 0.9) for b in faces]})
    v2 = _variant_dir(
        tmp_path, "s2", "short_edge = 200\n", {"ev/a": [Detection.scored(np.array(b) * 2, 0.8) for b in faces]}
    )
    sizes = tmp_path / "sizes.csv"
    sizes.write_text("ev/a.jpg,100,100\n")
    out = tmp_path / "m"
    code, _ = run("tta-merge", "--variant", str(v1), "--variant", str(v2), "--image-sizes", str(sizes), "--out-dir", str(out))
    assert code == 0
    merged = read_predictions(out)["ev/a"]
    assert sorted(tuple(d.box) for d in merged) == sorted(Box(*map(float, f)) for f in faces)


def test_tta_merge_errors(tmp_path):
    d = tmp_path / "nometa"
    write_prediction_set(d, {"ev/a": []})
    assert run("tta-merge", "--variant", str(d), "--out-dir", str(tmp_path / "o"))[0] == 2
    v = _variant_dir(tmp_path, "flip", "flip = true\nscale = 1\n", {"ev/a": []})
    assert run("tta-merge", "--variant", str(v), "--out-dir", str(tmp_path / "o"))[0] == 1
    assert run("tta-merge", "--variant", str(v))[0] == 1
    bad = _variant_dir(tmp_path, "bad", "scale = 1\nzoom = 2\n", {"ev/a": []})
    assert run("tta-merge", "--variant", str(bad), "--out-dir", str(tmp_path / "o"))[0] == 1


def test_train_demo_deterministic_csv(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    code, text = run("train-demo", *SMALL_TRAIN, "--seed", "3", "--out-dir", str(a))
    assert code == 0 and "final AP@0.5" in text
    assert run("train-demo", *SMALL_TRAIN, "--seed", "3", "--out-dir", str(b))[0] == 0
    for name in ("history.csv", "model.bin", "ap.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    lines = (a / "history.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    assert lines[1] == "iteration,lr,total,cls,reg,iou,num_positives,smoothed"
    assert len(lines) == 2 + 12


def test_train_demo_zero_lr_keeps_initial_ap():
    code, text = run("train-demo", *SMALL_TRAIN, "--set", "train.lr_scale=0", "--initial-ap")
    assert code == 0
    initial = [l for l in text.splitlines() if l.startswith("initial AP")][0].split()[-1]
    final = [l for l in text.splitlines() if l.startswith("final AP")][0].split()[-1]
    assert initial == final


def test_train_demo_divergence_exit_code():
    code, text = run("train-demo", *SMALL_TRAIN, "--set", "train.lr_scale=1e30")
    assert code == 3
    assert "last finite loss" in text


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "facedetkit", "anchors-report"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.rstrip().endswith("total 102375")
