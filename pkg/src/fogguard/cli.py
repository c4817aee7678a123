"""``fogguard`` command line: foggify, eval-map, train-toy, gradcheck, make-corpus.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema

from . import gradcheck
from .corpus import make_corpus
from .dataset import load_manifest, make_fog_variant, save_manifest, foggify_dataset
from .errors import ConfigError, DataError, FogGuardError, NumericalError
from .evalmap import AP_MODES, load_detections, mean_ap, truths_from_dataset
from .fogsynth import FOG_LEVELS, FogDistribution, sample_beta
from .percnet import PercConfig, save_checkpoint, toy_net
from .rng import SplitMix64
from .trainer import TrainConfig, evaluate_map, train_student, train_teacher

log = logging.getLogger("fogguard")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
GRADCHECK_TOL = gradcheck.TOLERANCE


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


# ------------------------------------------------------------------ foggify


def _beta_arg(text: str):
    if text == "sample":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'sample', got {text!r}") from None


def cmd_foggify(args) -> int:
    ds = load_manifest(args.in_manifest)
    if args.beta == "sample":
        dist = FogDistribution(args.beta_min, args.beta_max)
        rng = SplitMix64(args.seed)
        # drawn up front in manifest order so the result does not depend on --jobs
        betas = [sample_beta(dist, rng) for _ in ds.samples]
    else:
        if not 0.0 <= args.beta:
            raise UsageError("--beta must be >= 0")
        betas = [args.beta] * len(ds)
    out_dir = Path(args.out_dir)
    foggy = foggify_dataset(ds, betas, out_dir, depth_mode=args.depth, jobs=args.jobs)
    save_manifest(foggy, out_dir / "manifest.json")
    for s, b in zip(foggy.samples, betas):
        print(_dumps({"image_id": s.image_id, "beta": b}))
    return EXIT_OK


# ------------------------------------------------------------------ eval-map


def cmd_eval_map(args) -> int:
    if not 0.0 < args.iou < 1.0:
        raise UsageError("--iou must lie in (0, 1)")
    ds = load_manifest(args.manifest)
    dets = load_detections(args.dets)
    for d in dets:
        if not 0 <= d.class_id < len(ds.class_names):
            raise DataError(f"detection class {d.class_id} outside the manifest's class list")
    m, per_class = mean_ap(dets, truths_from_dataset(ds), args.iou, len(ds.class_names), args.ap_mode)
    print(_dumps({"map": m, "per_class": {ds.class_names[c]: ap for c, ap in per_class.items()}}))
    return EXIT_OK


# ------------------------------------------------------------------ train-toy

_POS_INT = {"type": "integer", "minimum": 1}
_PHASE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["epochs", "learning_rate"],
    "properties": {"epochs": _POS_INT, "learning_rate": {"type": "number", "exclusiveMinimum": 0}},
}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data", "teacher", "student"],
    "properties": {
        "data": {
            "oneOf": [
                {
                    "type": "object", "additionalProperties": False, "required": ["corpus_seed"],
                    "properties": {"corpus_seed": {"type": "integer", "minimum": 0}},
                },
                {
                    "type": "object", "additionalProperties": False, "required": ["train", "test"],
                    "properties": {"train": {"type": "string"}, "test": {"type": "string"}},
                },
            ],
        },
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "depth_mode": {"enum": ["pfm", "pseudo"]},
        "batch_size": _POS_INT,
        "lambda1": {"type": "number", "minimum": 0},
        "lambda2": {"type": "number", "minimum": 0},
        "perc": {
            "type": "object", "additionalProperties": False, "required": ["l_s", "l_e"],
            "properties": {"l_s": _POS_INT, "l_e": _POS_INT},
        },
        "fog_dist": {
            "type": "object", "additionalProperties": False, "required": ["beta_min", "beta_max"],
            "properties": {"beta_min": {"type": "number", "minimum": 0}, "beta_max": {"type": "number", "minimum": 0}},
        },
        "objdet_input": {"enum": ["clear", "foggy"]},
        "signed_conf": {"type": "boolean"},
        "teacher": _PHASE,
        "student": _PHASE,
        "eval": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "fog_beta": {"type": "number", "minimum": 0},
                "iou": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "ap_mode": {"enum": list(AP_MODES)},
            },
        },
    },
}


def load_run_config(path: str | Path) -> dict:
    """Parse and schema-check a run config; dataset paths become absolute."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {loc}: {exc.message}") from None
    data = doc["data"]
    if "train" in data:
        doc["data"] = {k: str((path.parent / v).resolve()) for k, v in data.items()}
    return doc


def train_config(doc: dict, phase: str) -> TrainConfig:
    perc = doc.get("perc", {"l_s": 1, "l_e": 9})
    fog = doc.get("fog_dist", {"beta_min": 0.0, "beta_max": 0.15})
    try:
        return TrainConfig(
            epochs=doc[phase]["epochs"],
            learning_rate=doc[phase]["learning_rate"],
            batch_size=doc.get("batch_size", 4),
            lambda1=doc.get("lambda1", 1.0),
            lambda2=doc.get("lambda2", 1.0),
            perc=PercConfig(perc["l_s"], perc["l_e"]),
            fog_dist=FogDistribution(fog["beta_min"], fog["beta_max"]),
            seed=doc.get("seed", 0),
            depth_mode=doc.get("depth_mode", "pfm"),
            objdet_input=doc.get("objdet_input", "foggy"),
            signed_conf=doc.get("signed_conf", False),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _write_jsonl(path: Path, records: list[dict]) -> None:
    path.write_text("".join(_dumps(r) + "\n" for r in records))


def cmd_train_toy(args) -> int:
    doc = load_run_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.lambda2_zero:
        doc["lambda2"] = 0.0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if "corpus_seed" in doc["data"]:
        paths = make_corpus(out / "corpus", seed=doc["data"]["corpus_seed"])
        train_path, test_path = paths["train"], paths["test"]
    else:
        train_path, test_path = doc["data"]["train"], doc["data"]["test"]
    train, test = load_manifest(train_path), load_manifest(test_path)

    t_cfg = train_config(doc, "teacher")
    s_cfg = train_config(doc, "student")
    net = toy_net(C=len(train.class_names))
    t_cfg.perc.validate(net.L)

    theta_t, rep_t = train_teacher(net, train, t_cfg)
    teacher = net.with_params(theta_t)
    save_checkpoint(teacher, out / "teacher.ckpt")
    _write_jsonl(out / "teacher_report.jsonl", rep_t.json_records())

    theta_s, rep_s = train_student(teacher, train.by_domain("clear"), train.by_domain("real_fog"), s_cfg)
    student = net.with_params(theta_s)
    save_checkpoint(student, out / "student.ckpt")
    _write_jsonl(out / "student_report.jsonl", rep_s.json_records())

    ev = doc.get("eval", {})
    beta = ev.get("fog_beta", FOG_LEVELS["heavy"])
    iou, mode = ev.get("iou", 0.5), ev.get("ap_mode", "all")
    foggy_test = make_fog_variant(test, beta, out / "test_fog", depth_mode=s_cfg.depth_mode)
    result = {"fog_beta": beta, "iou": iou, "ap_mode": mode, "lambda2": s_cfg.lambda2, "seed": s_cfg.seed}
    for name, model in (("teacher", teacher), ("student", student)):
        result[name] = {
            "clear_map": evaluate_map(model, test, iou_threshold=iou, mode=mode)[0],
            "fog_map": evaluate_map(model, foggy_test, iou_threshold=iou, mode=mode)[0],
        }
    (out / "eval.json").write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    print(_dumps(result))
    return EXIT_OK


# ------------------------------------------------------------------ gradcheck


def cmd_gradcheck(args) -> int:
    l_s, l_e = args.layers
    net = gradcheck.pinned_net(args.size)
    if not 1 <= l_s <= l_e <= net.L:
        raise UsageError(f"need 1 <= l_s <= l_e <= {net.L}, got {l_s} {l_e}")
    results = gradcheck.run(l_s, l_e, size=args.size, seed=args.seed)
    worst = max(r.max_rel_err for r in results)
    for r in results:
        print(_dumps({"loss": r.name, "max_rel_err": r.max_rel_err, "param": r.worst_index, "kinks": r.kinks}))
    print(_dumps({"max_rel_err": worst, "tolerance": GRADCHECK_TOL, "ok": worst < GRADCHECK_TOL}))
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERICAL


# ------------------------------------------------------------------ make-corpus


def cmd_make_corpus(args) -> int:
    paths = make_corpus(args.out_dir, seed=args.seed)
    print(_dumps({k: str(v) for k, v in paths.items()}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fogguard", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("foggify", help="render a manifest's images under fog")
    f.add_argument("in_manifest")
    f.add_argument("out_dir")
    f.add_argument("--beta", type=_beta_arg, required=True, help="fixed density or 'sample'")
    f.add_argument("--beta-min", type=float, default=0.0)
    f.add_argument("--beta-max", type=float, default=0.15)
    f.add_argument("--depth", choices=("pfm", "pseudo"), default="pfm")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--jobs", type=int, default=1)
    f.set_defaults(func=cmd_foggify)

    e = sub.add_parser("eval-map", help="score a detections file against a manifest")
    e.add_argument("dets")
    e.add_argument("manifest")
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--ap-mode", choices=AP_MODES, default="all")
    e.set_defaults(func=cmd_eval_map)

    t = sub.add_parser("train-toy", help="train teacher and student on the toy corpus")
    t.add_argument("config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--lambda2-zero", action="store_true", help="ablation without the perceptual term")
    t.set_defaults(func=cmd_train_toy)

    g = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    g.add_argument("--layers", type=int, nargs=2, metavar=("L_S", "L_E"), default=(1, 9))
    g.add_argument("--size", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("make-corpus", help="write the synthetic 60-image corpus")
    c.add_argument("out_dir")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_make_corpus)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits for --help (0) and usage errors (1)
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"fogguard: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"fogguard: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, FogGuardError, OSError, ValueError) as exc:
        print(f"fogguard: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
