"""File-level pipeline steps shared by the command line and the acceptance run.

Manifests are JSON-lines files of :class:`~instyle.synth.SampleRecord`;
image paths inside them resolve against the manifest's own directory.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import replace
from pathlib import Path

from . import bench
from .config import RunConfig
from .curation import CurationFilter, FilterThresholds, SampleScorer, filter_dataset
from .dit import BRANCHES, BranchParams
from .synth import DatasetConfig, build_dataset, load_png, load_sample, read_manifest, write_manifest
from .training import (VARIANTS, AssemblyError, assemble_stage3, checkpoint_meta, compose_batch,
                       run_stage, stage_items, stage_spec)

log = logging.getLogger(__name__)


def load_samples(manifest, split: str | None = None) -> list:
    manifest = Path(manifest)
    if not manifest.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    records = read_manifest(manifest)
    if split is not None:
        records = [r for r in records if r.split == split]
    return [load_sample(manifest.parent, r) for r in records]


def gen_data(cfg: RunConfig, out) -> Path:
    data = DatasetConfig(n=cfg.n, seed=cfg.seed, styles=cfg.styles, corruption_rate=cfg.corruption_rate,
                         heldout_fraction=cfg.heldout_fraction, prefix=cfg.prefix)
    manifest = build_dataset(data, out)
    cfg.write(out, "gen-data")
    return manifest


def calibrate(cfg: RunConfig, manifest, out) -> FilterThresholds:
    """Fit the three thresholds on a labeled manifest and save them as JSON."""
    manifest, out = Path(manifest), Path(out)
    records = read_manifest(manifest)
    scores = SampleScorer(root=manifest.parent, patch=cfg.patch).transform(records)
    labels = [r.label for r in records]
    thresholds = CurationFilter(cfg.rejection_cap).fit(scores, labels).thresholds_
    thresholds.validation_set = manifest.name
    out.parent.mkdir(parents=True, exist_ok=True)
    thresholds.save(out)
    cfg.write(out.parent, "calibrate")
    return thresholds


def _rebase(record, src: Path, dst: Path):
    moved = {}
    for attr in ("I_f", "I_c", "I_m", "I_s", "background", "styled_background"):
        moved[attr] = os.path.relpath(src / getattr(record, attr), dst)
    return replace(record, **moved)


def filter_manifest(cfg: RunConfig, manifest, thresholds, out) -> tuple[Path, Path]:
    """Write ``accepted.jsonl`` and ``rejected.jsonl`` into ``out``."""
    manifest, out = Path(manifest), Path(out)
    if not isinstance(thresholds, FilterThresholds):
        path = Path(thresholds)
        if not path.is_file():
            raise FileNotFoundError(f"thresholds file not found: {path}")
        thresholds = FilterThresholds.load(path)
    records = read_manifest(manifest)
    scores = SampleScorer(root=manifest.parent, patch=cfg.patch).transform(records) if records else None
    accepted, rejected = filter_dataset(records, thresholds, manifest.parent, scores) if records else ([], [])
    out.mkdir(parents=True, exist_ok=True)
    src = manifest.parent.resolve()
    paths = out / "accepted.jsonl", out / "rejected.jsonl"
    for path, recs in zip(paths, (accepted, rejected)):
        write_manifest(path, [_rebase(r, src, out.resolve()) for r in recs])
    cfg.write(out, "filter")
    log.info("accepted %d of %d", len(accepted), len(records))
    return paths


# ------------------------------------------------------------------- training


def _write_log(path: Path, state) -> None:
    lines = [json.dumps({"step": i + 1, "loss": v}) for i, v in enumerate(state.losses)]
    lines += [json.dumps({"step": s, "heldout": v}) for s, v in state.heldout]
    lines += [json.dumps({"hashes": h}, sort_keys=True) for h in state.hash_log]
    path.write_text("".join(line + "\n" for line in lines))


def _split(samples):
    train = [s for s in samples if s.record.split == "train"]
    held = [s for s in samples if s.record.split == "heldout"]
    return train or samples, held


def train(cfg: RunConfig, stage: int, manifest, out, base=None, ref_ckpt=None, style_ckpt=None,
          mask_policy: str | None = None, trainable=None) -> Path:
    """Run one stage from files; returns the checkpoint path.

    Stage 0 starts from a fresh model; stages 1 and 2 need ``base``; stage 3
    assembles ``ref_ckpt`` and/or ``style_ckpt`` (at least one), or starts
    from ``base`` with zero adapters when neither is given.
    """
    out = Path(out)
    spec = stage_spec(stage, mask_policy if stage == 3 else None, trainable)
    if stage == 3 and mask_policy is None:
        spec = replace(spec, mask_policy=cfg.mask_policy)
    samples, held = _split(load_samples(manifest))
    tcfg = cfg.train_config(stage)
    if stage == 0:
        init = BranchParams.init(cfg.model_config(), seed=cfg.seed)
    elif stage in (1, 2):
        if base is None:
            raise ValueError(f"stage {stage} needs a base checkpoint")
        init, _ = BranchParams.load(base)
    else:
        ckpts = [BranchParams.load(p) for p in (ref_ckpt, style_ckpt) if p is not None]
        if ckpts:
            init = assemble_stage3(*ckpts, seed=cfg.seed)
        elif base is not None:
            init, _ = BranchParams.load(base)
            for branch in BRANCHES:
                init.reset_branch(branch, seed=cfg.seed)
        else:
            raise AssemblyError("stage 3 needs stage-1/stage-2 checkpoints or a base checkpoint")
    params, state = run_stage(init, spec, stage_items(stage, samples), tcfg,
                              stage_items(stage, held) if held else None)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"stage{stage}.mckp"
    params.save(ckpt, checkpoint_meta(spec, tcfg, state, params.config))
    _write_log(out / f"stage{stage}.log.jsonl", state)
    cfg.write(out, f"train-stage{stage}")
    return ckpt


def run_variant(cfg: RunConfig, variant: str, manifest, out, base) -> Path:
    """Train one ablation variant on top of a stage-0 base; returns the final checkpoint."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    v = VARIANTS[variant]
    out = Path(out)
    ckpts = {}
    for stage in v.pretrain:
        ckpts[stage] = train(cfg, stage, manifest, out, base=base)
    final = train(cfg, 3, manifest, out, base=base, ref_ckpt=ckpts.get(1), style_ckpt=ckpts.get(2),
                  mask_policy=v.mask_policy, trainable=v.stage3_trainable)
    (out / "variant.txt").write_text(f"variant = {variant}\npretrain = {', '.join(map(str, v.pretrain))}\n"
                                     f"mask_policy = {v.mask_policy}\n"
                                     f"stage3_trainable = {', '.join(v.stage3_trainable)}\n")
    return final


# ------------------------------------------------------------------ inference


def checkpoint_method(path, sample_steps: int = 20, seed: int = 0, batch: int = 16):
    """A benchmark method backed by a stage-3 checkpoint."""
    params, meta = BranchParams.load(path)
    mask_policy = "structural" if meta.get("mask_structural", 1.0) else "none"

    def method(queries):
        outs = []
        for start in range(0, len(queries), batch):
            outs += compose_batch(params, queries[start:start + batch], sample_steps, seed, mask_policy)
        return outs

    return method


def compose_files(ckpt, reference, background, mask, out, steps: int = 20, seed: int = 0) -> Path:
    for label, p in (("checkpoint", ckpt), ("reference", reference), ("background", background), ("mask", mask)):
        if not Path(p).is_file():
            raise FileNotFoundError(f"{label} not found: {p}")
    method = checkpoint_method(ckpt, steps, seed)
    query = bench.Query(load_png(reference), load_png(background), load_png(mask, mask=True))
    image = method([query])[0]
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    from PIL import Image

    Image.fromarray(image).save(out)
    return out


BUILTIN_METHODS = {"copy-paste": bench.copy_paste, "oracle": bench.uniform_stylize_oracle}


def resolve_methods(specs, cfg: RunConfig) -> dict:
    """``name`` for a built-in or ``name=checkpoint`` for a trained model."""
    methods = {}
    for spec in specs:
        name, _, path = spec.partition("=")
        if path:
            if not Path(path).is_file():
                raise FileNotFoundError(f"checkpoint for method {name!r} not found: {path}")
            methods[name] = checkpoint_method(path, cfg.sample_steps, cfg.seed)
        elif name in BUILTIN_METHODS:
            methods[name] = BUILTIN_METHODS[name]
        else:
            raise ValueError(f"unknown method {name!r}; use copy-paste, oracle or name=checkpoint")
    return methods


def evaluate(cfg: RunConfig, manifest, methods: dict, out, fmt: str = "table") -> bench.BenchReport:
    samples = load_samples(manifest)
    report = bench.run_benchmark(samples, methods, cfg.pixel_threshold)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / ("report.txt" if fmt == "table" else "report.jsonl"), fmt)
    cfg.write(out, "evaluate")
    return report


def mean_heldout(log_path) -> list[tuple[int, float]]:
    rows = [json.loads(line) for line in Path(log_path).read_text().splitlines()]
    return [(r["step"], r["heldout"]) for r in rows if "heldout" in r]



# ------------------------------------------------------------ reference run

CALIBRATION_SET = {"n": 400, "corruption_rate": 0.5, "seed_offset": 101, "prefix": "v"}
TEST_SET = {"n": 100, "seed_offset": 13, "prefix": "e"}
CONTRAST = ("full", "no-mask", "no-style")


def reference_run(cfg: RunConfig, out, variants=CONTRAST) -> dict:
    """Data, curation, staged training and evaluation in one directory.

    Layout under ``out``: ``calib/``, ``pool/``, ``test/`` datasets,
    ``thresholds.json``, ``filtered/``, ``stage0..2/``, one directory per
    stage-3 variant, and ``eval/report.txt``. Stage-1 and stage-2
    checkpoints are shared by the variants that use them. Returns wall
    times per step (seconds) and the report.
    """
    import time

    out = Path(out)
    times = {}

    def timed(name, fn, *args, **kw):
        start = time.perf_counter()
        result = fn(*args, **kw)
        times[name] = time.perf_counter() - start
        log.info("%s: %.1fs", name, times[name])
        return result

    c = CALIBRATION_SET
    calib_cfg = replace(cfg, n=c["n"], corruption_rate=c["corruption_rate"], seed=cfg.seed + c["seed_offset"],
                        prefix=c["prefix"])
    test_cfg = replace(cfg, n=TEST_SET["n"], corruption_rate=0.0, heldout_fraction=0.0,
                       seed=cfg.seed + TEST_SET["seed_offset"], prefix=TEST_SET["prefix"])
    calib = timed("gen-data calib", gen_data, calib_cfg, out / "calib")
    pool = timed("gen-data pool", gen_data, replace(cfg, prefix="t"), out / "pool")
    test = timed("gen-data test", gen_data, test_cfg, out / "test")
    thresholds = timed("calibrate", calibrate, cfg, calib, out / "thresholds.json")
    accepted, _ = timed("filter", filter_manifest, cfg, pool, thresholds, out / "filtered")

    base = timed("train stage0", train, cfg, 0, accepted, out / "stage0")
    ckpts = {}
    for stage in (1, 2):
        if any(stage in VARIANTS[v].pretrain for v in variants):
            ckpts[stage] = timed(f"train stage{stage}", train, cfg, stage, accepted, out / f"stage{stage}", base=base)
    finals = {}
    for name in variants:
        v = VARIANTS[name]
        finals[name] = timed(f"train stage3 {name}", train, cfg, 3, accepted, out / name, base=base,
                             ref_ckpt=ckpts.get(1) if 1 in v.pretrain else None,
                             style_ckpt=ckpts.get(2) if 2 in v.pretrain else None,
                             mask_policy=v.mask_policy, trainable=v.stage3_trainable)
    methods = {"copy-paste": bench.copy_paste}
    methods.update({name: checkpoint_method(path, cfg.sample_steps, cfg.seed) for name, path in finals.items()})
    report = timed("evaluate", evaluate, cfg, test, methods, out / "eval")
    return {"times": times, "report": report, "thresholds": thresholds, "accepted": accepted}


def artifact_hashes(out) -> dict[str, str]:
    """sha256 of every manifest, checkpoint, report, log and config under ``out``.

    ``timings.json`` is skipped: wall times are the one thing a re-run may change.
    """
    import hashlib

    out = Path(out)
    keep = (".jsonl", ".mckp", ".txt", ".json")
    return {str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.rglob("*")) if p.is_file() and p.suffix in keep and p.name != "timings.json"}
