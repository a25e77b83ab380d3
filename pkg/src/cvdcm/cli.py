"""Command-line entry point: ``cvdcm <command> [options]``.

Exit codes: 0 success, 2 bad arguments, 3 inseparable split, 4 estimation did
not converge (or the data are separated), 5 train/test leakage, 1 any other
package error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__, analysis, choice, synth, trainer, vision
from .dataset import Dataset
from .design import TASKS_PER_RESPONDENT, build_design
from .errors import (
    ConvergenceError,
    CVDCMError,
    DataLeakageError,
    InseparableDatasetError,
    SeparationError,
    SingularHessianError,
    ValidationError,
)
from .images import read_manifest, save_png, write_manifest
from .seeding import stream
from .split import split

OUT_ENV = "CVDCM_OUT"
MANIFEST_NAME = "run_manifest.json"

EXIT_OK, EXIT_ERROR, EXIT_ARGS, EXIT_INSEPARABLE, EXIT_CONVERGENCE, EXIT_LEAKAGE = 0, 1, 2, 3, 4, 5

log = logging.getLogger("cvdcm")


class ArgError(ValidationError):
    """A validation problem attributable to one command-line flag."""

    def __init__(self, flag, message):
        super().__init__(f"{flag}: {message}")


def write_json_atomic(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict
    outputs: dict
    version: str = __version__
    argv: list = dataclasses.field(default_factory=list)
    wall_time: float = 0.0

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST_NAME
        write_json_atomic(path, dataclasses.asdict(self))
        return path


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        out = Path("runs") / args.command
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_pairs(flag, text, allowed) -> dict:
    """``"green=2.5,built=-2"`` into a dict; ``"0"`` or ``""`` gives an empty dict."""
    if text is None:
        return None
    text = text.strip()
    if text in ("", "0", "none"):
        return {}
    out = {}
    for part in text.split(","):
        if "=" not in part:
            raise ArgError(flag, f"expected key=value pairs, got {part!r}")
        k, v = part.split("=", 1)
        k = k.strip()
        if k not in allowed:
            raise ArgError(flag, f"unknown key {k!r} (allowed: {', '.join(allowed)})")
        try:
            out[k] = float(v)
        except ValueError:
            raise ArgError(flag, f"{v!r} is not a number") from None
        if not math.isfinite(out[k]):
            raise ArgError(flag, f"{k} must be finite")
    return out


def _load_json_config(flag, path) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ArgError(flag, f"cannot read config: {exc}") from None


def _read_dataset(flag, path) -> Dataset:
    if not Path(path).exists():
        raise ArgError(flag, f"file not found: {path}")
    return Dataset.from_jsonl(path)


def _read_images(flag, path, load_pixels=True) -> dict:
    if not Path(path).exists():
        raise ArgError(flag, f"file not found: {path}")
    return read_manifest(path, load_pixels=load_pixels)


# ---------------------------------------------------------------------------
# commands


def cmd_design(args) -> dict:
    out = _out_dir(args)
    if args.n_respondents < 1:
        raise ArgError("--n-respondents", "must be at least 1")
    if args.tasks_per_respondent < 1:
        raise ArgError("--tasks-per-respondent", "must be at least 1")
    if args.tt_band is not None and args.tt_band < 10:
        raise ArgError("--tt-band", f"a current travel time of {args.tt_band} minutes is below 10 and has no design regime")
    if args.manifest:
        images = _read_images("--manifest", args.manifest, load_pixels=False)
    else:
        images = synth.scene_records(args.n_images, args.seed)
    munis = sorted({im.municipality for im in images.values() if im.municipality is not None}) or [None]
    rng = stream(args.seed, "cli-respondents")
    respondents = []
    for i in range(args.n_respondents):
        tt = args.tt_band if args.tt_band is not None else float(rng.uniform(10, 60))
        respondents.append({"respondent_id": f"r{i:05d}", "current_tt": tt, "municipality": munis[int(rng.integers(len(munis)))]})
    try:
        tasks = build_design(respondents, images, args.seed, args.tasks_per_respondent)
    except ValidationError as exc:
        raise ArgError("--manifest", str(exc)) from None
    path = out / "design.jsonl"
    Dataset(tasks).to_jsonl(path)
    print(f"wrote {len(tasks)} tasks for {len(respondents)} respondents to {path}")
    return {"out": out, "seeds": {"seed": args.seed}, "inputs": {"manifest": args.manifest}, "outputs": {"design": path}}


def cmd_synth(args) -> dict:
    out = _out_dir(args)
    if args.n_images < 2:
        raise ArgError("--n-images", "need at least 2 images")
    if args.resolution < 1:
        raise ArgError("--resolution", "must be positive")
    alpha = _parse_pairs("--alpha", args.alpha, synth.CLASSES)
    beta = _parse_pairs("--true-beta", args.true_beta, ("hhc", "tti")) or {}
    months = np.zeros(12) if args.months == "zero" else np.array(synth.REFERENCE_MONTHS)
    true_model = synth.TrueModel(
        beta_hhc=beta.get("hhc", -0.86),
        beta_tti=beta.get("tti", -0.21),
        beta_month=months,
        alpha=synth.DEFAULT_ALPHA if alpha is None else alpha,
    )
    n_tasks = args.n_tasks if args.n_tasks is not None else args.n_images // 2
    study = synth.make_study(
        n_tasks, args.n_images, true_model, args.resolution, args.seed, seasonal_tint=args.seasonal_tint
    )
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    for im in study.images.values():
        im.path = f"images/{im.image_id}.png"
        save_png(im.pixels, out / im.path)
    write_manifest(study.images.values(), out / "manifest.jsonl")
    study.dataset.to_jsonl(out / "data.jsonl")
    write_json_atomic(out / "true_model.json", true_model.to_dict())
    print(f"wrote {len(study.images)} images and {study.dataset.n_obs} tasks to {out}")
    return {
        "out": out,
        "seeds": {"seed": args.seed},
        "inputs": {},
        "outputs": {"manifest": out / "manifest.jsonl", "data": out / "data.jsonl", "images": img_dir, "true_model": out / "true_model.json"},
    }


def cmd_split(args) -> dict:
    out = _out_dir(args)
    if not 0 < args.fraction < 1:
        raise ArgError("--fraction", f"must lie strictly between 0 and 1, got {args.fraction}")
    data = _read_dataset("--data", args.data)
    res = split(data, args.fraction, args.seed)
    train_path = Path(args.out_train) if args.out_train else out / "train.jsonl"
    test_path = Path(args.out_test) if args.out_test else out / "test.jsonl"
    res.train.to_jsonl(train_path)
    res.test.to_jsonl(test_path)
    res.write_report(out / "split_report.json")
    print(f"train {res.train.n_obs} / test {res.test.n_obs} (achieved {res.train_fraction_achieved:.3f}, requested {args.fraction})")
    return {
        "out": out,
        "seeds": {"seed": args.seed},
        "inputs": {"data": args.data},
        "outputs": {"train": train_path, "test": test_path, "report": out / "split_report.json"},
    }


def cmd_estimate(args) -> dict:
    out = _out_dir(args)
    train_set = _read_dataset("--train", args.train)
    test_set = _read_dataset("--test", args.test) if args.test else None
    res = choice.estimate_mnl(train_set, model=args.model)
    col = analysis.ModelColumn(res.model, res, train_key=analysis.dataset_key(train_set))
    summary = {"train": res.to_dict()}
    if test_set is not None:
        ll = choice.log_likelihood(test_set, res.params)
        col.test = analysis.holdout_metrics(ll, test_set.n_obs)
        col.test_key = analysis.dataset_key(test_set)
        summary["test"] = col.test
    report = analysis.compare_models([col])
    analysis.write_report(report, out, "table")
    write_json_atomic(out / "estimate.json", summary)
    print(report.to_text(), end="")
    return {"out": out, "seeds": {}, "inputs": {"train": args.train, "test": args.test}, "outputs": {"estimate": out / "estimate.json", "table": out / "table.txt"}}


TRAINER_FLAGS = {f.name: f for f in dataclasses.fields(trainer.TrainerConfig)}
EXTRACTOR_FLAGS = {f.name: f for f in dataclasses.fields(vision.ExtractorConfig)}


def _config_from(cls, flags, base: dict, args, prefix="") -> object:
    cfg = dict(base)
    for name, f in flags.items():
        v = getattr(args, prefix + name, None)
        if v is not None:
            cfg[name] = v
    unknown = set(cfg) - set(flags)
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
    return cls(**cfg)


def cmd_train(args) -> dict:
    out = _out_dir(args)
    train_set = _read_dataset("--train", args.train)
    test_set = _read_dataset("--test", args.test)
    images = _read_images("--images", args.images)
    try:
        ext = _config_from(vision.ExtractorConfig, EXTRACTOR_FLAGS, _load_json_config("--extractor-config", args.extractor_config), args, "ext_")
    except (ValidationError, TypeError) as exc:
        raise ArgError("--extractor-config", str(exc)) from None
    try:
        cfg = _config_from(trainer.TrainerConfig, TRAINER_FLAGS, _load_json_config("--trainer-config", args.trainer_config), args)
    except (ValidationError, TypeError) as exc:
        raise ArgError("--trainer-config", str(exc)) from None

    result = trainer.train(
        train_set, test_set, images, ext, cfg, on_epoch=lambda e: print(json.dumps(e), flush=True) if args.verbose else None
    )
    ck = trainer.save_checkpoint(out / "checkpoint", result)
    # the comparison benchmark is Model 2 on the full training set
    m2 = choice.estimate_mnl(train_set, model=2)
    m2_test = choice.log_likelihood(test_set, m2.params)
    m3_test = result.log.test_ll
    m3 = trainer.model3_result(train_set, result.params, result.weights, ext, images)
    tkey, ekey = analysis.dataset_key(train_set), analysis.dataset_key(test_set)
    report = analysis.compare_models(
        [
            analysis.ModelColumn("Model 2", m2, analysis.holdout_metrics(m2_test, test_set.n_obs), tkey, ekey),
            analysis.ModelColumn("Model 3", m3, analysis.holdout_metrics(m3_test, test_set.n_obs), tkey, ekey),
        ]
    )
    analysis.write_report(report, out, "table")
    metrics = {
        "model2_test_loglik": m2_test,
        "model3_test_loglik": m3_test,
        "test_n": test_set.n_obs,
        "improvement_per_obs": (m3_test - m2_test) / test_set.n_obs,
        "warm_start_test_loglik": None if result.warm_start is None else choice.log_likelihood(test_set, result.warm_start.params),
        "best_epoch": result.log.best_epoch,
        "model3": m3.to_dict(),
    }
    write_json_atomic(out / "metrics.json", metrics)
    print(report.to_text(), end="")
    return {
        "out": out,
        "config": {"extractor": ext.to_dict(), "trainer": cfg.to_dict()},
        "seeds": {"seed": cfg.seed},
        "inputs": {"train": args.train, "test": args.test, "images": args.images},
        "outputs": {"checkpoint": ck, "metrics": out / "metrics.json", "trainlog": ck / trainer.LOG_FILE},
    }


def cmd_analyze(args) -> dict:
    out = _out_dir(args)
    if args.quantiles < 2:
        raise ArgError("--quantiles", "must be at least 2")
    if args.top_k < 1:
        raise ArgError("--top-k", "must be at least 1")
    if not Path(args.checkpoint).is_dir():
        raise ArgError("--checkpoint", f"not a checkpoint directory: {args.checkpoint}")
    params, weights, ext, _ = trainer.load_checkpoint(args.checkpoint)
    data = _read_dataset("--data", args.data)
    images = _read_images("--images", args.images)
    ids = sorted(data.image_ids())
    missing = [i for i in ids if i not in images]
    if missing:
        raise ArgError("--images", f"{len(missing)} image(s) referenced by --data are missing, e.g. {missing[0]!r}")
    bank = trainer.ImageBank(images, ext.resolution, ids)
    util = trainer.image_utilities(params, weights, bank, ext)

    k = args.top_k
    if k > len(util):
        print(f"warning: --top-k {k} clipped to {len(util)}", file=sys.stderr)
        k = len(util)
    top, bottom = analysis.rank_images(util, k)
    gap = float(np.mean([u for _, u in top]) - np.mean([u for _, u in bottom]))
    wtp = analysis.wtp_extremes(gap, params.beta_hhc, params.scaling.cost_divisor)

    analysis.write_image_csv(util, images, out / "image_utilities.csv")
    with open(out / "ranking.csv", "w") as fh:
        fh.write("side,rank,image_id,utility\n")
        for side, rows in (("top", top), ("bottom", bottom)):
            for r, (i, u) in enumerate(rows, 1):
                fh.write(f"{side},{r},{i},{u!r}\n")
    dec = analysis.decompose(params, weights, ext, data, bank)
    analysis.write_decomposition_csv(dec, out / "decomposition.csv")
    analysis.histogram_csv([d.dv_total for d in dec], out / "dv_total_hist.csv")
    outputs = {"ranking": out / "ranking.csv", "utilities": out / "image_utilities.csv", "decomposition": out / "decomposition.csv"}

    dens = {i: images[i].density for i in util}
    summary = {"top_k": k, "mean_gap": gap, "wtp_eur_per_month": wtp, "mean_image_utility": float(np.mean(list(util.values())))}
    if all(v is not None for v in dens.values()) and len(util) >= args.quantiles:
        groups = analysis.density_quantiles(util, dens, args.quantiles)
        write_json_atomic(out / "density_summary.json", [dataclasses.asdict(g) for g in groups])
        analysis.write_density_csv(groups, out / "density_summary.csv")
        outputs["density"] = out / "density_summary.json"
    else:
        print("warning: density values missing; density summary skipped", file=sys.stderr)
    write_json_atomic(out / "summary.json", summary)
    outputs["summary"] = out / "summary.json"
    print(f"top-{k} vs bottom-{k} utility gap {gap:.3f} -> WTP {wtp:.1f} EUR per month")
    return {
        "out": out,
        "seeds": {},
        "inputs": {"checkpoint": args.checkpoint, "images": args.images, "data": args.data},
        "outputs": outputs,
    }


# ---------------------------------------------------------------------------
# parser


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _add_config_flags(group, fields, prefix=""):
    for name, f in fields.items():
        typ = _TYPES.get(f.type, f.type) if isinstance(f.type, str) else f.type
        flag = "--" + (prefix + name).replace("_", "-")
        if typ is bool:
            group.add_argument(flag, dest=prefix + name, action=argparse.BooleanOptionalAction, default=None)
        else:
            group.add_argument(flag, dest=prefix + name, type=typ, default=None, help=f"default {f.default}")


def _add_trainer_flags(p):
    _add_config_flags(p.add_argument_group("trainer settings (override --trainer-config)"), TRAINER_FLAGS)
    _add_config_flags(p.add_argument_group("extractor settings (override --extractor-config)"), EXTRACTOR_FLAGS, "ext_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvdcm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or runs/<command>)")
        return p

    p = common(sub.add_parser("design", help="generate pivoted choice tasks"))
    p.add_argument("--tt-band", type=float, help="current commute in minutes for every respondent (default: drawn in [10, 60))")
    p.add_argument("--n-respondents", type=int, default=1)
    p.add_argument("--tasks-per-respondent", type=int, default=TASKS_PER_RESPONDENT)
    p.add_argument("--manifest", help="image manifest JSONL (default: metadata-only synthetic records)")
    p.add_argument("--n-images", type=int, default=200, help="pool size when no manifest is given")
    p.add_argument("--seed", type=int, default=0)

    p = common(sub.add_parser("synth", help="render synthetic scenes and simulate choices"))
    p.add_argument("--n-images", type=int, default=1000)
    p.add_argument("--n-tasks", type=int, help="default: half the number of images")
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--alpha", help='image utility weights, e.g. "green=2.5,built=-2"; "0" disables the image term')
    p.add_argument("--true-beta", help='taste parameters on the scaled attributes, e.g. "hhc=-0.86,tti=-0.21"')
    p.add_argument("--months", choices=("reference", "zero"), default="reference", help="true month constants")
    p.add_argument("--seasonal-tint", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = common(sub.add_parser("split", help="image-disjoint train/test split"))
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-train")
    p.add_argument("--out-test")

    p = common(sub.add_parser("estimate", help="estimate a numeric-only logit model"))
    p.add_argument("--model", type=int, choices=(1, 2), default=1)
    p.add_argument("--train", required=True)
    p.add_argument("--test")

    p = common(sub.add_parser("train", help="train the image-enriched model"))
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--images", required=True, help="image manifest JSONL")
    p.add_argument("--extractor-config", help="JSON file with extractor settings")
    p.add_argument("--trainer-config", help="JSON file with trainer settings")
    _add_trainer_flags(p)

    p = common(sub.add_parser("analyze", help="rankings, decomposition, WTP and density summaries"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--quantiles", type=int, default=6)
    return parser


COMMANDS = {
    "design": cmd_design,
    "synth": cmd_synth,
    "split": cmd_split,
    "estimate": cmd_estimate,
    "train": cmd_train,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        info = COMMANDS[args.command](args)
    except DataLeakageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LEAKAGE
    except InseparableDatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INSEPARABLE
    except (ConvergenceError, SeparationError, SingularHessianError) as exc:
        print(f"error: estimation failed: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except CVDCMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    config = {k: v for k, v in vars(args).items() if v is not None}
    config.update(info.get("config", {}))
    RunManifest(
        command=args.command,
        config=config,
        seeds=info.get("seeds", {}),
        inputs={k: v for k, v in info.get("inputs", {}).items() if v is not None},
        outputs=info.get("outputs", {}),
        argv=argv,
        wall_time=time.perf_counter() - t0,
    ).write(info["out"])
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
