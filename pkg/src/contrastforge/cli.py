"""Command-line entry point: ``contrastforge <command> ...``.

Commands work on a dataset directory of case folders (see
:mod:`contrastforge.pipeline`). Exit codes: 0 success, 1 validation error,
2 runtime or numerical error. Batch commands keep going past a failing
case, list it in ``failures.json`` and exit nonzero at the end.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch

from . import embedding
from .errors import ConsistencyError, ContrastForgeError, SchemaError, ValidationError
from .infer import evaluate, write_reports
from .model import ModelConfig
from .phantom import PhantomConfig, dataset_manifest, generate, write_case
from .pipeline import (
    case_meta,
    has_member,
    load_bundle,
    load_training_sample,
    read_brain,
    read_case_doc,
    read_member,
    save_bundle,
    synthesize_case,
    write_case_doc,
)
from .preprocess import preprocess_pair
from .target import contrast_target
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train
from .volio import read_labels, write_volume

log = logging.getLogger("contrastforge")

RESOLVED = "config.resolved.json"
FAILURES = "failures.json"
OUTPUT_NAMES = {"pc": "xsd_syn", "ld": "xsdplus_syn"}


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class DatasetConfig:
    n_cases: int = 10
    doses: Optional[list] = None  # cycled over cases; overrides phantom.dose

    def __post_init__(self):
        if self.n_cases < 0:
            raise ValidationError("dataset.n_cases must be >= 0")


@dataclass(frozen=True)
class PreprocessConfig:
    percentile: float = 95.0
    huber_delta: float = 0.1
    kernel_sigma: float = 16.0


@dataclass(frozen=True)
class EvalConfig:
    peak: float = 1.0
    ce_threshold: float = 0.5
    reference: str = "sd"  # "sd" or "oracle" (phantoms: anatomy + ytrue)
    hist_bins: int = 100
    hist_range: tuple = (-5.0, 15.0)  # in units of sigma_LD

    def __post_init__(self):
        if self.reference not in ("sd", "oracle"):
            raise ValidationError("eval.reference must be 'sd' or 'oracle'")
        object.__setattr__(self, "hist_range", tuple(self.hist_range))


SECTIONS = {
    "dataset": DatasetConfig,
    "phantom": PhantomConfig,
    "preprocess": PreprocessConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise SchemaError("run config must be a JSON object")
        unknown = sorted(set(doc) - {"seed", *SECTIONS})
        if unknown:
            raise SchemaError(f"unknown config key(s): {', '.join(unknown)}")
        parts = {}
        for name, typ in SECTIONS.items():
            sub = doc.get(name, {})
            if not isinstance(sub, dict):
                raise SchemaError(f"config section {name!r} must be an object")
            known = {f.name for f in fields(typ)}
            bad = sorted(set(sub) - known)
            if bad:
                raise SchemaError(f"unknown config key(s) in {name}: {', '.join(bad)}")
            try:
                parts[name] = typ(**sub)
            except TypeError as exc:
                raise SchemaError(f"config section {name}: {exc}") from exc
        return cls(seed=int(doc.get("seed", 0)), **parts)

    def to_dict(self) -> dict:
        doc = {"seed": self.seed}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            doc[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return doc


def load_config(path: Optional[str], seed: Optional[int] = None,
                precision: Optional[str] = None) -> RunConfig:
    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    cfg = RunConfig.from_dict(doc)
    doc = cfg.to_dict()
    if seed is not None:
        doc["seed"] = seed
        doc["train"]["seed"] = seed
    if precision is not None:
        doc["train"]["precision"] = precision
    return RunConfig.from_dict(doc)


def emit_config(cfg: RunConfig, out_dir) -> None:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    Path(out_dir, RESOLVED).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------- helpers


def thread_count() -> int:
    raw = os.environ.get("CONTRASTFORGE_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"CONTRASTFORGE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError("CONTRASTFORGE_THREADS must be >= 1")
    return n


def list_cases(dataset, pattern: Optional[str]) -> List[Path]:
    root = Path(dataset)
    if not root.is_dir():
        raise ValidationError(f"{dataset} is not a directory")
    return sorted(p for p in root.glob(pattern or "case_*") if p.is_dir())


def exit_code(exc: BaseException) -> int:
    return 1 if isinstance(exc, ValidationError) else 2


def run_batch(cases: List[Path], fn: Callable[[Path], object], manifest_dir) -> tuple:
    """Apply ``fn`` to every case; returns (results by case name, exit code)."""
    def guarded(case):
        try:
            return case, fn(case), None
        except (ContrastForgeError, OSError, ValueError, RuntimeError) as exc:
            log.error("%s: %s", case.name, exc)
            return case, None, exc

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        outcomes = list(pool.map(guarded, cases))
    results, failures, code = {}, [], 0
    for case, res, exc in outcomes:
        if exc is None:
            results[case.name] = res
        else:
            failures.append({"case": case.name, "error": type(exc).__name__, "message": str(exc),
                             "exit_code": exit_code(exc)})
            code = max(code, exit_code(exc))
    manifest = Path(manifest_dir, FAILURES)
    if failures:
        manifest.write_text(json.dumps({"failures": failures}, indent=2) + "\n")
    elif manifest.exists():
        manifest.unlink()
    return results, code


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- commands


def cmd_phantom(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(cfg.dataset.n_cases):
        pcfg = cfg.phantom
        doses = cfg.dataset.doses
        params = asdict(pcfg)
        # case seeds never collide across run seeds for n_cases < 100003
        params["seed"] = cfg.seed * 100_003 + i
        if doses:
            params["dose"] = float(doses[i % len(doses)])
        case_cfg = PhantomConfig(**params)
        x_pc, x_ld, x_sd, truth, meta = generate(case_cfg)
        name = f"case_{i:04d}"
        write_case(out / name, x_pc, x_ld, x_sd, truth, meta, {"seed": case_cfg.seed})
        names.append(name)
    dataset_manifest(out, names, cfg.phantom)
    emit_config(cfg, out)
    log.info("wrote %d cases to %s", len(names), out)
    return 0


def _preprocess_case(case: Path, cfg: RunConfig) -> dict:
    doc = read_case_doc(case)
    case_meta(doc)  # validates the sidecar
    if not has_member(case, "pc"):
        raise ValidationError(f"{case}: pc.nii is missing")
    brain = read_brain(case)
    pc = read_member(case, "pc")
    opts = asdict(cfg.preprocess)
    scalars = {}
    sigma_ld = None
    if has_member(case, "ld"):
        b_ld = preprocess_pair(pc, read_member(case, "ld"), brain, **opts)
        scalars["ld"] = save_bundle(case, "ld", b_ld)
        sigma_ld = b_ld.sigma
    if has_member(case, "sd"):
        b_sd = preprocess_pair(pc, read_member(case, "sd"), brain, sigma_ref=sigma_ld, **opts)
        scalars["sd"] = save_bundle(case, "sd", b_sd)
    if not scalars:
        raise ValidationError(f"{case}: neither ld.nii nor sd.nii present")
    doc["preprocess"] = scalars
    if sigma_ld is not None:
        doc["noise_level"] = sigma_ld
    write_case_doc(case, doc)
    return scalars


def cmd_preprocess(args, cfg: RunConfig) -> int:
    cases = list_cases(args.dataset, args.cases)
    _, code = run_batch(cases, lambda c: _preprocess_case(c, cfg), args.dataset)
    emit_config(cfg, args.dataset)
    return code


def _target_case(case: Path) -> None:
    doc = read_case_doc(case)
    pre = doc.get("preprocess", {})
    if "sd" not in pre:
        raise ValidationError(f"{case}: no preprocessed standard-dose bundle")
    sigma_ld = pre["ld"]["sigma"] if "ld" in pre else pre["sd"]["sigma_scale"]
    y, p = contrast_target(read_member(case, "z_sd"), sigma_ld)
    write_volume(y, case / "ysd.nii")
    write_volume(p, case / "psd.nii")


def cmd_target(args, cfg: RunConfig) -> int:
    cases = list_cases(args.dataset, args.cases)
    _, code = run_batch(cases, _target_case, args.dataset)
    emit_config(cfg, args.dataset)
    return code


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = list_cases(args.dataset, args.cases)
    if not cases:
        raise ValidationError(f"no cases under {args.dataset}")
    samples = [load_training_sample(c) for c in cases]
    torch.set_num_threads(thread_count())
    ckpt = train(samples, cfg.train, cfg.model,
                 on_log=lambda s, lr, v: log.info("step %d lr %.3g loss %.5g", s, lr, v))
    save_checkpoint(ckpt, out / "model.ckpt")
    write_csv(out / "loss.csv", ["step", "lr", "loss"], ckpt.history)
    emit_config(cfg, out)
    log.info("gamma %.6g, checkpoint %s", ckpt.gamma, out / "model.ckpt")
    return 0


def _load_model(args, cfg: RunConfig):
    ckpt = load_checkpoint(args.checkpoint)
    if args.config and cfg.model != ckpt.model_config:
        raise ConsistencyError(
            f"config model {cfg.model.to_dict()} differs from checkpoint {ckpt.model_config.to_dict()}")
    model = ckpt.build_model()
    model = model.double() if cfg.train.precision == "f64" else model.float()
    model.eval()
    return ckpt, model


def cmd_infer(args, cfg: RunConfig) -> int:
    ckpt, model = _load_model(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(thread_count())

    def one(case: Path):
        doc = read_case_doc(case)
        b_ld = load_bundle(case, "ld", doc)
        meta = case_meta(doc).with_noise(b_ld.sigma)
        syn = synthesize_case(model, ckpt.gamma, b_ld, meta)
        d = out / case.name
        d.mkdir(exist_ok=True)
        write_volume(syn.y_tilde, d / "ytilde.nii")
        write_volume(syn.x_sd if args.base == "pc" else syn.x_sd_plus,
                     d / f"{OUTPUT_NAMES[args.base]}.nii")

    # the model is shared; torch forward passes are safe to run side by side
    _, code = run_batch(list_cases(args.dataset, args.cases), one, out)
    emit_config(cfg, out)
    return code


def _histograms(case: Path, doc: dict, cfg: EvalConfig):
    sigma = doc["preprocess"]["ld"]["sigma"]
    brain = read_brain(case).mask
    edges = np.linspace(cfg.hist_range[0], cfg.hist_range[1], cfg.hist_bins + 1)
    dens = []
    for tag in ("ld", "sd"):
        z = read_member(case, f"z_{tag}").data[brain] / sigma
        counts, _ = np.histogram(z, bins=edges)
        dens.append(counts / (z.size * np.diff(edges)))
    return edges, dens[0], dens[1]


def _eval_case(case: Path, outputs: Path, name: str, cfg: EvalConfig):
    doc = read_case_doc(case)
    x_path = outputs / case.name / f"{name}.nii"
    if not x_path.exists():
        raise ValidationError(f"{x_path} is missing")
    x = read_member(outputs / case.name, name)
    brain = read_brain(case)
    x_pc = read_member(case, "xpc_norm")
    x_sd = read_member(case, "xsd_norm")
    lesions = None
    if has_member(case, "lesions"):
        lesions = read_labels(case / "lesions.nii")
    else:
        log.warning("%s: no lesions file; lesion metrics skipped", case.name)
    ce = None
    if has_member(case, "psd"):
        ce = (read_member(case, "psd").data > cfg.ce_threshold) & brain.mask
    ref, ref_x_pc = x_sd, x_pc
    if cfg.reference == "oracle":
        scale = 1.0 / doc["preprocess"]["ld"]["pc_scale"]
        anatomy = read_member(case, "anatomy")
        ref_x_pc = anatomy.like(anatomy.data * np.float64(scale))
        ref = anatomy.like((anatomy.data + read_member(case, "ytrue").data) * np.float64(scale))
    report = evaluate(case.name, x, ref, ref_x_pc, brain, lesions, ce, cfg.peak)
    hist = _histograms(case, doc, cfg) if "ld" in doc.get("preprocess", {}) \
        and has_member(case, "z_sd") else None
    return report, hist


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    (out / "hist").mkdir(parents=True, exist_ok=True)
    outputs = Path(args.outputs)
    name = OUTPUT_NAMES[args.base]
    results, code = run_batch(list_cases(args.dataset, args.cases),
                              lambda c: _eval_case(c, outputs, name, cfg.eval), out)
    reports = [results[k][0] for k in sorted(results)]
    write_reports(reports, out / "metrics.csv", out / "lesions.csv", out / "metrics.json")
    pooled = None
    for k in sorted(results):
        hist = results[k][1]
        if hist is None:
            continue
        edges, d_ld, d_sd = hist
        rows = [[edges[i], edges[i + 1], d_ld[i], d_sd[i]] for i in range(len(d_ld))]
        write_csv(out / "hist" / f"{k}.csv", ["bin_lo", "bin_hi", "density_z_ld", "density_z_sd"], rows)
        pooled = [d_ld, d_sd] if pooled is None else [pooled[0] + d_ld, pooled[1] + d_sd]
        pooled_edges = edges
    if pooled is not None:
        n = len([k for k in results if results[k][1] is not None])
        rows = [[pooled_edges[i], pooled_edges[i + 1], pooled[0][i] / n, pooled[1][i] / n]
                for i in range(len(pooled[0]))]
        write_csv(out / "hist" / "all.csv", ["bin_lo", "bin_hi", "density_z_ld", "density_z_sd"], rows)
    emit_config(cfg, out)
    return code


def cmd_embed_analyze(args, cfg: RunConfig) -> int:
    _, model = _load_model(args, cfg)
    metas = []
    for case in list_cases(args.dataset, args.cases):
        doc = read_case_doc(case)
        if doc.get("noise_level") is None:
            raise ValidationError(f"{case}: no noise level; run preprocess first")
        metas.append(case_meta(doc))
    rows = embedding.analyze(model, metas)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = ["pc1", "pc2", "dose", "field_strength", "relaxivity", "noise_level"]
    write_csv(out / "embedding.csv", keys, [[r[k] for k in keys] for r in rows])
    emit_config(cfg, out)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="contrastforge", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, *, dataset=True, out=False, checkpoint=False, outputs=False, base=False):
        p = sub.add_parser(name)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--seed", type=int)
        p.add_argument("--precision", choices=["f32", "f64"])
        if checkpoint:
            p.add_argument("checkpoint")
        if dataset:
            p.add_argument("dataset")
            p.add_argument("--cases", help="glob of case folders (default case_*)")
        if outputs:
            p.add_argument("outputs", help="folder written by infer")
        if out:
            p.add_argument("--out", required=True)
        if base:
            p.add_argument("--base", choices=["pc", "ld"], default="pc")
        return p

    add("phantom", cmd_phantom, dataset=False, out=True)
    add("preprocess", cmd_preprocess)
    add("target", cmd_target)
    add("train", cmd_train, out=True)
    add("infer", cmd_infer, checkpoint=True, out=True, base=True)
    add("eval", cmd_eval, outputs=True, out=True, base=True)
    add("embed-analyze", cmd_embed_analyze, checkpoint=True, out=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.precision)
        return args.func(args, cfg)
    except (ContrastForgeError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
