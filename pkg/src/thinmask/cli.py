"""``thinmask`` command line: synth, assign, grad-check, loss-bench, rfs, tta, eval.

Every subcommand takes ``--config PATH`` (JSON or TOML), ``--seed``, ``--out``
and ``--threads``; flags override the config file. The resolved config is
written as ``config.json`` next to the outputs.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .core import BBox, Instance, area_ratio, crop_to_bbox
from .dataset import Dataset, dumps_json, load_dataset, save_dataset
from .evaluation import COCO_THRESHOLDS, evaluate
from .gradcheck import run_gradcheck
from .levels import RULE_BASELINE, RULE_RATIO, AssignmentConfig, assignment_report
from .longtail import DEFAULT_RFS_THRESHOLD, RARE, bucket_map, build_epoch, category_stats
from .loss import DEFAULT_CLAMP, DEFAULT_EPSILON, DEFAULT_LAMBDA, balanced_mask_loss, instance_weights, \
    weighted_bce, weighted_bce_grad
from .parallel import pmap
from .synth import PerturbNoise, SynthSpec, gen_dataset, perturb_prediction, ratio_histogram, \
    simulate_multiscale_detections
from .tta import Detection, TTAConfig, merge_multiscale

log = logging.getLogger("thinmask")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VERIFY = 4

OUT_ENV = "THINMASK_OUT"
DEFAULT_OUT = "thinmask_out"


class ConfigError(ValueError):
    pass


class VerificationError(RuntimeError):
    pass


# --- configuration ----------------------------------------------------------


@dataclass
class RunConfig:
    """Everything a run depends on. ``out`` is deliberately not serialized."""

    seed: int = 0
    threads: int = 0
    out: str = ""
    synth: SynthSpec = field(default_factory=SynthSpec)
    assign: AssignmentConfig = field(default_factory=AssignmentConfig)
    loss: dict = field(
        default_factory=lambda: {
            "lam": DEFAULT_LAMBDA,
            "epsilon": DEFAULT_EPSILON,
            "clamp": DEFAULT_CLAMP,
            "normalize": False,
        }
    )
    gradcheck: dict = field(default_factory=lambda: {"trials": 100, "size": 28, "step": 1e-5, "tol": 1e-4})
    lossbench: dict = field(default_factory=lambda: {"flip_prob": 0.1, "blur": 0, "max_instances": 0})
    rfs: dict = field(default_factory=lambda: {"threshold": DEFAULT_RFS_THRESHOLD})
    tta: TTAConfig = field(default_factory=TTAConfig)
    eval: dict = field(default_factory=lambda: {"iou_thresholds": [0.5]})

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "threads": self.threads,
            "synth": self.synth.to_dict(),
            "assign": self.assign.to_dict(),
            "loss": dict(self.loss),
            "gradcheck": dict(self.gradcheck),
            "lossbench": dict(self.lossbench),
            "rfs": dict(self.rfs),
            "tta": self.tta.to_dict(),
            "eval": dict(self.eval),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        unknown = set(d) - set(cfg.to_dict()) - {"out"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg.seed = int(d.get("seed", cfg.seed))
            cfg.threads = int(d.get("threads", cfg.threads))
            cfg.out = str(d.get("out", ""))
            if "synth" in d:
                cfg.synth = SynthSpec.from_dict({**cfg.synth.to_dict(), **d["synth"]})
            if "assign" in d:
                cfg.assign = AssignmentConfig(**{**cfg.assign.to_dict(), **d["assign"]})
            if "tta" in d:
                cfg.tta = TTAConfig.from_dict({**cfg.tta.to_dict(), **d["tta"]})
            for key in ("loss", "gradcheck", "lossbench", "rfs", "eval"):
                if key in d:
                    section = getattr(cfg, key)
                    extra = set(d[key]) - set(section)
                    if extra:
                        raise ConfigError(f"unknown keys in [{key}]: {sorted(extra)}")
                    section.update(d[key])
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        return cfg


def read_config_file(path: str) -> dict:
    p = Path(path)
    try:
        text = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        if p.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            return tomllib.loads(text.decode())
        return json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc


# --- helpers ----------------------------------------------------------------


def _write(out: Path, name: str, text: str) -> Path:
    path = out / name
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc
    return path


def _csv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v: float | None) -> str:
    if v is None:
        return ""
    return repr(float(v))


def _load_dataset(path: str) -> Dataset:
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise OSError(exc.errno, f"dataset not found: {path}") from exc
    except (KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"malformed dataset {path}: {exc}") from exc


def load_detections(paths: Sequence[str]) -> list[Detection]:
    dets = []
    for path in paths:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise OSError(exc.errno, f"detections not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed detections {path}: {exc}") from exc
        dets.extend(Detection.from_json_dict(d) for d in data["detections"])
    return dets


def detections_json(dets: Sequence[Detection]) -> str:
    return dumps_json({"detections": [d.to_json_dict() for d in dets]})


def _eval_outputs(out: Path, res) -> None:
    _write(out, "eval.csv", res.to_csv())
    _write(out, "eval_summary.csv", res.summary_csv())


def _iou_thresholds(cfg: RunConfig, coco: bool) -> list[float]:
    return list(COCO_THRESHOLDS) if coco else [float(t) for t in cfg.eval["iou_thresholds"]]


# --- subcommands -------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    spec = cfg.synth
    dataset = gen_dataset(spec, threads=cfg.threads)
    save_dataset(dataset, out / "dataset.json")
    stats = category_stats(dataset, cfg.rfs["threshold"])
    _write(
        out,
        "stats_frequencies.csv",
        _csv(
            ("category", "name", "image_count", "frequency", "bucket"),
            [(c, dataset.categories[c], s.image_count, _num(s.frequency), s.bucket) for c, s in stats.items()],
        ),
    )
    _write(
        out,
        "stats_ratio_hist.csv",
        _csv(("ratio_lo", "ratio_hi", "count"), [(_num(a), _num(b), n) for a, b, n in ratio_histogram(dataset)]),
    )
    if args.detections:
        dets = simulate_multiscale_detections(dataset, cfg.tta, cfg.seed, threads=cfg.threads)
        _write(out, "detections.json", detections_json(dets))
    n_inst = sum(len(im.annotations) for im in dataset.images)
    print(f"synth: {len(dataset)} images, {n_inst} instances -> {out}")
    return EXIT_OK


def cmd_assign(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    dataset = _load_dataset(args.dataset)
    instances = dataset.instances()
    if not instances:
        raise ConfigError("dataset has no instances to assign")
    buckets = bucket_map(category_stats(dataset, cfg.rfs["threshold"]))
    report = assignment_report(instances, cfg.assign, buckets)
    _write(out, "assignment.csv", report.to_csv())
    rows = []
    for rule in (RULE_RATIO, RULE_BASELINE):
        rate = report.thin_level0_rate(rule)
        rows.append((rule, len(instances), report.thin_total, report.thin_level0[rule], _num(rate), report.degenerate))
    summary = _csv(("rule", "instances", "thin", "thin_level0", "thin_level0_rate", "degenerate"), rows)
    _write(out, "assign_summary.csv", summary)
    sys.stdout.write(summary)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    gc = cfg.gradcheck
    trials = int(gc["trials"])
    if trials == 0:
        log.warning("grad-check with 0 trials passes vacuously")
    rows = run_gradcheck(
        trials=trials,
        seed=cfg.seed,
        size=int(gc["size"]),
        step=float(gc["step"]),
        tol=float(gc["tol"]),
        lam=float(cfg.loss["lam"]),
        eps=float(cfg.loss["epsilon"]),
        clamp=float(cfg.loss["clamp"]),
        threads=cfg.threads,
        corrupt=args.corrupt_grad,
    )
    text = _csv(
        ("loss", "trials", "max_rel_err", "result"),
        [(r.loss, r.trials, _num(r.max_rel_err), "pass" if r.passed else "fail") for r in rows],
    )
    _write(out, "gradcheck.csv", text)
    sys.stdout.write(text)
    if not all(r.passed for r in rows):
        raise VerificationError("gradient check failed")
    return EXIT_OK


LOSSBENCH_COLUMNS = (
    "image_id",
    "annotation_id",
    "category_id",
    "rho",
    "dice",
    "bce",
    "wbce",
    "total",
    "fg_weight_sum",
    "fg_bg_grad_ratio_plain",
    "fg_bg_grad_ratio_weighted",
)


def grad_mass_ratio(grad: np.ndarray, target: np.ndarray) -> float | None:
    """Sum of |grad| over foreground divided by the same over background."""
    fg = float(np.abs(grad[target]).sum())
    bg = float(np.abs(grad[~target]).sum())
    if bg == 0.0:
        return None
    return fg / bg


def lossbench_rows(dataset: Dataset, cfg: RunConfig) -> list[tuple]:
    lb, lc = cfg.lossbench, cfg.loss
    noise = PerturbNoise(float(lb["flip_prob"]), int(lb["blur"]))
    anns = list(dataset.annotations())
    if int(lb["max_instances"]) > 0:
        anns = anns[: int(lb["max_instances"])]

    def one(ann):
        inst = ann.instance
        roi = crop_to_bbox(inst.mask, inst.bbox)
        local = Instance(inst.category_id, BBox(0.0, 0.0, inst.bbox.width, inst.bbox.height), roi)
        probs, _ = perturb_prediction(local, noise, [cfg.seed, 4, ann.id])
        w = instance_weights(local)
        brk = balanced_mask_loss(probs, local, lc["lam"], lc["epsilon"], lc["clamp"], lc["normalize"])
        bce = weighted_bce(probs, roi, None, lc["clamp"], lc["normalize"])
        target = roi.bits
        plain = grad_mass_ratio(weighted_bce_grad(probs, roi, None, lc["clamp"]), target)
        weighted = grad_mass_ratio(weighted_bce_grad(probs, roi, w, lc["clamp"]), target)
        return (
            ann.image_id,
            ann.id,
            inst.category_id,
            _num(area_ratio(inst)),
            _num(brk.dice),
            _num(bce),
            _num(brk.wbce),
            _num(brk.total),
            _num(float(w[target].sum())),
            _num(plain),
            _num(weighted),
        )

    return pmap(one, anns, cfg.threads)


def cmd_lossbench(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    dataset = _load_dataset(args.dataset)
    rows = lossbench_rows(dataset, cfg)
    _write(out, "lossbench.csv", _csv(LOSSBENCH_COLUMNS, rows))
    print(f"loss-bench: {len(rows)} instances -> {out / 'lossbench.csv'}")
    return EXIT_OK


def cmd_rfs(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    dataset = _load_dataset(args.dataset)
    t = float(cfg.rfs["threshold"])
    stats = category_stats(dataset, t)
    epoch = build_epoch(dataset, stats, cfg.seed)
    _write(out, "epoch.txt", "".join(f"{i}\n" for i in epoch))
    _write(
        out,
        "rfs_stats.csv",
        _csv(
            ("category", "image_count", "frequency", "repeat_factor", "bucket"),
            [(c, s.image_count, _num(s.frequency), _num(s.repeat_factor), s.bucket) for c, s in stats.items()],
        ),
    )
    print(f"rfs: epoch of {len(epoch)} samples from {len(dataset)} images")
    return EXIT_OK


def cmd_tta(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    dets = load_detections(args.detections)
    gt = _load_dataset(args.gt) if args.gt else None
    buckets = bucket_map(category_stats(gt, cfg.rfs["threshold"])) if gt is not None else {}
    if args.rare_categories is not None:
        rare = set(args.rare_categories)
    else:
        rare = {c for c, b in buckets.items() if b == RARE}
    by_image: dict[int, dict[int, list[Detection]]] = {}
    for d in dets:
        by_image.setdefault(d.image_id, {}).setdefault(d.scale_id, []).append(d)
    try:
        merged_lists = pmap(lambda i: merge_multiscale(by_image[i], cfg.tta, rare), sorted(by_image), cfg.threads)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    merged = [d for lst in merged_lists for d in lst]
    _write(out, "merged.json", detections_json(merged))
    print(f"tta: {len(dets)} detections -> {len(merged)} merged")
    if gt is not None:
        res = evaluate(gt, merged, buckets, _iou_thresholds(cfg, args.coco), cfg.threads)
        _eval_outputs(out, res)
        sys.stdout.write(res.summary_csv())
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    gt = _load_dataset(args.dataset)
    dets = load_detections(args.detections)
    buckets = bucket_map(category_stats(gt, cfg.rfs["threshold"]))
    res = evaluate(gt, dets, buckets, _iou_thresholds(cfg, args.coco), cfg.threads)
    _eval_outputs(out, res)
    sys.stdout.write(res.summary_csv())
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "assign": cmd_assign,
    "grad-check": cmd_gradcheck,
    "loss-bench": cmd_lossbench,
    "rfs": cmd_rfs,
    "tta": cmd_tta,
    "eval": cmd_eval,
}


# --- argument parsing ---------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser) -> None:
    s = argparse.SUPPRESS
    p.add_argument("--config", metavar="PATH", default=s, help="JSON or TOML config file")
    p.add_argument("--seed", type=int, default=s, help="global seed")
    p.add_argument("--out", metavar="DIR", default=s, help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--threads", type=int, default=s, help="worker threads, 0 = auto")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thinmask",
        description="Experiments on thin instance masks in long-tailed segmentation data.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic long-tailed dataset")
    _global_flags(p)
    p.add_argument("--num-images", type=int)
    p.add_argument("--num-categories", type=int)
    p.add_argument("--detections", action="store_true", help="also write simulated per-scale detections")

    p = sub.add_parser("assign", help="FPN level histograms, ratio-aware vs scale-only")
    _global_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--box-term", choices=("literal", "log2"))

    p = sub.add_parser("grad-check", help="finite-difference check of the mask losses")
    _global_flags(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--corrupt-grad", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("loss-bench", help="per-instance loss and gradient balance table")
    _global_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--flip-prob", type=float)
    p.add_argument("--max-instances", type=int)

    p = sub.add_parser("rfs", help="one repeat-factor-sampling epoch")
    _global_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("tta", help="merge multi-scale detections")
    _global_flags(p)
    p.add_argument("--detections", nargs="+", required=True)
    p.add_argument("--gt", help="dataset JSON to evaluate the merged detections against")
    p.add_argument("--rare-categories", type=int, nargs="*")
    p.add_argument("--rare-boost", type=float)
    p.add_argument("--coco", action="store_true", help="average AP over IoU 0.50:0.05:0.95")

    p = sub.add_parser("eval", help="mask AP with rare/common/frequent grouping")
    _global_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--detections", nargs="+", required=True)
    p.add_argument("--coco", action="store_true", help="average AP over IoU 0.50:0.05:0.95")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw = read_config_file(args.config) if getattr(args, "config", None) else {}
    cfg = RunConfig.from_dict(raw)
    if hasattr(args, "seed"):
        cfg.seed = args.seed
        cfg.synth = SynthSpec.from_dict({**cfg.synth.to_dict(), "seed": args.seed})
    elif "synth" not in raw or "seed" not in raw.get("synth", {}):
        cfg.synth = SynthSpec.from_dict({**cfg.synth.to_dict(), "seed": cfg.seed})
    if hasattr(args, "threads"):
        cfg.threads = args.threads
    if cfg.threads < 0:
        raise ConfigError("--threads must be >= 0")
    if hasattr(args, "out"):
        cfg.out = args.out
    if not cfg.out:
        cfg.out = os.environ.get(OUT_ENV, DEFAULT_OUT)

    try:
        overrides = {}
        if getattr(args, "num_images", None) is not None:
            overrides["num_images"] = args.num_images
        if getattr(args, "num_categories", None) is not None:
            overrides["num_categories"] = args.num_categories
        if overrides:
            cfg.synth = SynthSpec.from_dict({**cfg.synth.to_dict(), **overrides})
        if getattr(args, "box_term", None):
            cfg.assign = AssignmentConfig(**{**cfg.assign.to_dict(), "box_term_mode": args.box_term})
        if getattr(args, "rare_boost", None) is not None:
            cfg.tta = TTAConfig.from_dict({**cfg.tta.to_dict(), "rare_boost": args.rare_boost})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if getattr(args, "trials", None) is not None:
        cfg.gradcheck["trials"] = args.trials
    if getattr(args, "flip_prob", None) is not None:
        cfg.lossbench["flip_prob"] = args.flip_prob
    if getattr(args, "max_instances", None) is not None:
        cfg.lossbench["max_instances"] = args.max_instances
    if getattr(args, "threshold", None) is not None:
        cfg.rfs["threshold"] = args.threshold
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        _write(out, "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        return COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except VerificationError as exc:
        log.error("%s", exc)
        return EXIT_VERIFY
    except OSError as exc:
        log.error("I/O error: %s", exc.strerror or exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
