import json
import shutil

import pytest

from fogguard import cli
from fogguard.dataset import load_manifest
from fogguard.detcore import DetectionRecord
from fogguard.evalmap import format_detections
from fogguard.imagecore import load_ppm, quantize


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def calib(tmp_path, data_dir):
    for name in ("calibration.ppm", "calibration.xml", "calibration.json"):
        shutil.copy(data_dir / name, tmp_path / name)
    return tmp_path / "calibration.json"


def test_foggify_golden(capsys, calib, tmp_path, data_dir):
    code, out, _ = run(capsys, "foggify", calib, tmp_path / "out", "--beta", "0.15", "--depth", "pseudo")
    assert code == 0
    assert json.loads(out) == {"image_id": "calibration", "beta": 0.15}
    got = (tmp_path / "out" / "calibration.ppm").read_bytes()
    assert got == (data_dir / "calibration_fog_0.15_pseudo.ppm").read_bytes()
    back = load_manifest(tmp_path / "out" / "manifest.json")
    assert back.samples[0].boxes == load_manifest(calib).samples[0].boxes


def test_golden_matches_pixel_oracle(data_dir):
    import oracles
    src = (data_dir / "calibration.ppm").read_bytes()
    assert oracles.foggify_p6_pseudo(src, 0.15) == (data_dir / "calibration_fog_0.15_pseudo.ppm").read_bytes()


def test_foggify_beta_zero_is_identity(capsys, calib, tmp_path):
    assert run(capsys, "foggify", calib, tmp_path / "out", "--beta", "0", "--depth", "pseudo")[0] == 0
    assert (tmp_path / "out" / "calibration.ppm").read_bytes() == (tmp_path / "calibration.ppm").read_bytes()


def test_foggify_sampled_betas_reproducible(capsys, corpus, tmp_path):
    args = ["foggify", corpus["test"], None, "--beta", "sample", "--seed", "7"]
    args[2] = tmp_path / "a"
    _, out_a, _ = run(capsys, *args)
    args[2] = tmp_path / "b"
    _, out_b, _ = run(capsys, *args, "--jobs", "3")
    assert out_a == out_b
    betas = [json.loads(l)["beta"] for l in out_a.splitlines()]
    assert len(betas) == 12 and len(set(betas)) == 12 and all(0 <= b < 0.15 for b in betas)
    for p in sorted((tmp_path / "a").glob("*.ppm")):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()


def test_foggify_errors(capsys, calib, tmp_path):
    assert run(capsys, "foggify", calib, tmp_path / "o", "--beta", "0.1")[0] == 2  # no depth map
    assert run(capsys, "foggify", tmp_path / "missing.json", tmp_path / "o", "--beta", "0.1")[0] == 2
    assert run(capsys, "foggify", calib, tmp_path / "o", "--beta", "lots")[0] == 1
    assert run(capsys, "foggify", calib, tmp_path / "o", "--beta", "-1")[0] == 1
    assert run(capsys, "foggify", calib, tmp_path / "o", "--beta", "0.1", "--depth", "lidar")[0] == 1


def write_dets(path, dets):
    path.write_text(format_detections(dets))
    return path


def test_eval_map_cases(capsys, calib, tmp_path):
    truths = load_manifest(calib).samples[0].boxes
    perfect = [DetectionRecord("calibration", b.class_id, 1.0, *b.corners) for b in truths]
    code, out, _ = run(capsys, "eval-map", write_dets(tmp_path / "p.txt", perfect), calib)
    assert code == 0 and json.loads(out) == {"map": 1.0, "per_class": {"car": 1.0, "sign": 1.0}}
    code, out, _ = run(capsys, "eval-map", write_dets(tmp_path / "e.txt", []), calib)
    assert json.loads(out)["map"] == 0.0
    car = truths[0]
    worked = [DetectionRecord("calibration", 0, 0.9, *car.corners),
              DetectionRecord("calibration", 0, 0.8, 40, 40, 50, 50),
              DetectionRecord("calibration", 2, 0.95, *truths[1].corners)]
    code, out, _ = run(capsys, "eval-map", write_dets(tmp_path / "w.txt", worked), calib, "--ap-mode", "voc11")
    assert json.loads(out)["per_class"] == {"car": 1.0, "sign": 1.0}


def test_eval_map_worked_example(capsys, tmp_path):
    from fogguard.dataset import GroundTruthBox, voc_annotation_xml
    (tmp_path / "x.xml").write_text(voc_annotation_xml(
        [GroundTruthBox(0, 0, 0, 10, 10), GroundTruthBox(0, 20, 20, 30, 30)], ["car"], 64, 64))
    (tmp_path / "m.json").write_text(json.dumps(
        {"class_names": ["car"], "samples": [{"image": "x.ppm", "annotation": "x.xml"}]}))
    dets = [DetectionRecord("x", 0, 0.9, 0, 0, 10, 10), DetectionRecord("x", 0, 0.8, 40, 40, 50, 50),
            DetectionRecord("x", 0, 0.7, 20, 20, 30, 30)]
    code, out, _ = run(capsys, "eval-map", write_dets(tmp_path / "d.txt", dets), tmp_path / "m.json")
    assert code == 0 and abs(json.loads(out)["map"] - 0.8333) < 1e-4


def test_eval_map_errors(capsys, calib, tmp_path):
    (tmp_path / "bad.txt").write_text("calibration 0 0.5 1 2\n")
    assert run(capsys, "eval-map", tmp_path / "bad.txt", calib)[0] == 2
    (tmp_path / "unk.txt").write_text("nowhere 0 0.5 1 2 3 4\n")
    assert run(capsys, "eval-map", tmp_path / "unk.txt", calib)[0] == 2
    (tmp_path / "cls.txt").write_text("calibration 7 0.5 1 2 3 4\n")
    assert run(capsys, "eval-map", tmp_path / "cls.txt", calib)[0] == 2
    assert run(capsys, "eval-map", tmp_path / "bad.txt", calib, "--iou", "1.5")[0] == 1


def test_gradcheck_usage_error(capsys):
    assert run(capsys, "gradcheck", "--layers", "5", "2")[0] == 1
    assert run(capsys, "gradcheck", "--layers", "0", "2")[0] == 1


def test_gradcheck_last_layer(capsys):
    code, out, _ = run(capsys, "gradcheck", "--layers", "9", "9")
    summary = json.loads(out.splitlines()[-1])
    assert code == 0 and summary["ok"] and summary["max_rel_err"] < 1e-4


def test_missing_subcommand_is_usage_error(capsys):
    assert cli.main([]) == 1
    assert cli.main(["--help"]) == 0


TINY = {
    "data": {"corpus_seed": 0},
    "seed": 1,
    "lambda1": 0.1,
    "lambda2": 0.3,
    "perc": {"l_s": 5, "l_e": 9},
    "teacher": {"epochs": 2, "learning_rate": 0.05},
    "student": {"epochs": 1, "learning_rate": 0.02},
}


def test_train_toy_reproducible(capsys, tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps(TINY))
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "train-toy", tmp_path / "cfg.json", "--out", tmp_path / name)
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1]
    for f in ("teacher.ckpt", "student.ckpt", "teacher_report.jsonl", "student_report.jsonl", "eval.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    rec = [json.loads(l) for l in (tmp_path / "a" / "student_report.jsonl").read_text().splitlines()]
    assert rec[0]["clear"] == 36 and rec[0]["real_fog"] == 12 and "wall_time" not in rec[0]
    ev = json.loads((tmp_path / "a" / "eval.json").read_text())
    assert ev["lambda2"] == 0.3 and ev["fog_beta"] == 0.15


def test_train_toy_lambda2_zero(capsys, tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps(TINY))
    code, out, _ = run(capsys, "train-toy", tmp_path / "cfg.json", "--out", tmp_path / "z", "--lambda2-zero",
                       "--seed", "3")
    assert code == 0
    ev = json.loads(out)
    assert ev["lambda2"] == 0.0 and ev["seed"] == 3
    assert all(json.loads(l)["ts_perc"] == 0.0
               for l in (tmp_path / "z" / "student_report.jsonl").read_text().splitlines())


@pytest.mark.parametrize("patch", [
    {"unknown": 1},
    {"teacher": {"epochs": 0, "learning_rate": 0.1}},
    {"lambda2": -1},
    {"perc": {"l_s": 1, "l_e": 9, "extra": 0}},
    {"data": {"corpus_seed": 0, "train": "x"}},
    {"depth_mode": "lidar"},
])
def test_train_toy_rejects_bad_config(capsys, tmp_path, patch):
    (tmp_path / "cfg.json").write_text(json.dumps({**TINY, **patch}))
    code, _, err = run(capsys, "train-toy", tmp_path / "cfg.json", "--out", tmp_path / "o")
    assert code == 2 and "fogguard" in err
    assert not (tmp_path / "o" / "teacher.ckpt").exists()


def test_train_toy_manifest_paths_relative_to_config(capsys, corpus, tmp_path):
    cfg = {**TINY, "data": {"train": str(corpus["train"]), "test": str(corpus["test"])}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert cli.load_run_config(tmp_path / "cfg.json")["data"]["train"] == str(corpus["train"].resolve())
    rel = {**TINY, "data": {"train": "sub/train.json", "test": "sub/test.json"}}
    (tmp_path / "rel.json").write_text(json.dumps(rel))
    assert cli.load_run_config(tmp_path / "rel.json")["data"]["train"] == str(tmp_path / "sub" / "train.json")


def test_make_corpus_deterministic(capsys, tmp_path):
    assert run(capsys, "make-corpus", tmp_path / "a", "--seed", "5")[0] == 0
    assert run(capsys, "make-corpus", tmp_path / "b", "--seed", "5")[0] == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len([f for f in files if f.suffix == ".ppm"]) == 60
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_shipped_desk_config_is_valid():
    from pathlib import Path
    doc = cli.load_run_config(Path(__file__).parent.parent / "configs" / "desk.json")
    assert cli.train_config(doc, "teacher").epochs >= 1
