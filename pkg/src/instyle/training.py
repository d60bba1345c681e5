"""Staged training protocol.

Stage 0 pretrains the shared base on plain generation, standing in for the
frozen pretrained backbone. Stages 1 and 2 then train the identity (``ref``)
and style adapters independently on that frozen base, and stage 3 trains
fresh ``main`` adapters with both loaded and frozen under the structural
mask. Ablation variants are just different stage lists and specs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from . import recipes
from .dit import BRANCHES, STREAMS, BranchParams, ModelConfig, build_structural_mask, model_forward
from .flow import euler_sample, flow_loss, flow_target, interpolate
from .synth import Sample

log = logging.getLogger(__name__)

GROUPS = ("base",) + BRANCHES


class FreezeViolation(RuntimeError):
    """A parameter group outside the trainable set changed."""


class NonFiniteLoss(FloatingPointError):
    pass


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class StageSpec:
    """What one stage trains, which streams it feeds and how it masks."""

    stage: int
    trainable: tuple[str, ...]
    streams: tuple[str, ...]
    data: str
    mask_policy: str = "none"
    active: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mask_policy not in ("none", "structural"):
            raise ValueError(f"unknown mask policy {self.mask_policy!r}")
        unknown = set(self.trainable) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")

    @property
    def frozen(self) -> tuple[str, ...]:
        return tuple(g for g in GROUPS if g not in self.trainable)


STAGES = {
    0: StageSpec(0, ("base",), ("c", "t"), "images"),
    1: StageSpec(1, ("ref",), ("c", "t", "ref"), "pairs", active=("ref",)),
    2: StageSpec(2, ("style",), ("c", "t", "style"), "inpainting", active=("style",)),
    3: StageSpec(3, ("main",), STREAMS, "quadruplets", "structural", active=BRANCHES),
}


def stage_spec(stage: int, mask_policy: str | None = None, trainable=None) -> StageSpec:
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {sorted(STAGES)}")
    spec = STAGES[stage]
    if mask_policy is not None:
        spec = replace(spec, mask_policy=mask_policy)
    if trainable is not None:
        spec = replace(spec, trainable=tuple(trainable))
    return spec


@dataclass(frozen=True)
class Variant:
    """An ablation row: which pretraining stages run and how stage 3 is set up."""

    name: str
    pretrain: tuple[int, ...]
    mask_policy: str = "structural"
    stage3_trainable: tuple[str, ...] = ("main",)


VARIANTS = {
    "full": Variant("full", (1, 2)),
    "no-mask": Variant("no-mask", (1, 2), mask_policy="none"),
    "no-style": Variant("no-style", (1,)),
    "no-subject": Variant("no-subject", (2,)),
    "naive-e2e": Variant("naive-e2e", (), stage3_trainable=BRANCHES),
}


# ------------------------------------------------------------------ optimizer


class Adam:
    """Adam with bias correction and a fixed learning rate."""

    def __init__(self, params: dict[str, ad.Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grad_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * grad_scale
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if self.lr:
                update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
                p.data -= update.astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# --------------------------------------------------------------------- config


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 1e-3
    batch: int = 4
    accumulation: int = 2
    seed: int = 0
    hash_every: int = 100
    heldout: int = 16

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.accumulation < 1 or self.hash_every < 1:
            raise ValueError("steps >= 0, batch >= 1, accumulation >= 1 and hash_every >= 1 are required")


@dataclass
class TrainState:
    step: int = 0
    micro: int = 0
    seed: int = 0
    hashes: dict = field(default_factory=dict)
    hash_log: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    heldout: list = field(default_factory=list)


# ----------------------------------------------------------------------- data


class StageData:
    """Indexable examples for one stage; randomness is keyed by (seed, draw)."""

    def __init__(self, spec: StageSpec, items: list, config: ModelConfig, seed: int = 0):
        if not items:
            raise ValueError(f"stage {spec.stage}: no training data")
        self.spec, self.items, self.config, self.seed = spec, list(items), config, seed

    def __len__(self) -> int:
        return len(self.items)

    def example(self, index: int, draw: int) -> recipes.Example:
        item = self.items[index % len(self.items)]
        cfg = self.config
        if self.spec.data == "images":
            return recipes.stage0_example(item, cfg)
        if self.spec.data == "pairs":
            return recipes.stage1_example(item, cfg)
        if self.spec.data == "inpainting":
            rng = np.random.default_rng([self.seed, draw, 7])
            return recipes.stage2_example(item, recipes.random_token_box(rng, cfg), cfg)
        if self.spec.data == "quadruplets":
            return recipes.stage3_example(item, cfg)
        raise ValueError(f"unknown data source {self.spec.data!r}")

    def batch(self, indices, draw: int) -> recipes.Batch:
        examples = [self.example(int(i), draw * 1000 + j) for j, i in enumerate(indices)]
        return recipes.collate(examples, self.config, self.spec.streams)


def stage_items(stage: int, samples: list[Sample]) -> list:
    """Training items for ``stage`` drawn from synthetic samples."""
    if stage == 0:
        out = []
        for s in samples:
            out += [s.background, s.styled_background, s.I_c, s.I_s]
        return out
    if stage == 2:
        out = []
        for s in samples:
            out += [s.I_s, s.styled_background, s.background]
        return out
    return list(samples)


# ------------------------------------------------------------------- training


def _mask_for(spec: StageSpec, batch: recipes.Batch, cache: dict):
    if spec.mask_policy == "none":
        return None
    lengths = (batch.prompt.shape[1], batch.Z_0.shape[1] if batch.Z_0 is not None else 0,
               0 if batch.Z_style is None else batch.Z_style.shape[1],
               0 if batch.Z_ref is None else batch.Z_ref.shape[1])
    if lengths not in cache:
        cache[lengths] = build_structural_mask(*lengths)
    return cache[lengths]


def batch_loss(params: BranchParams, spec: StageSpec, batch: recipes.Batch, rng: np.random.Generator,
               mask_cache: dict | None = None) -> ad.Tensor:
    """Flow loss on one batch with fresh noise and per-sample times from ``rng``."""
    Z_0 = batch.Z_0
    Z_1 = rng.standard_normal(Z_0.shape).astype(Z_0.dtype)
    t = rng.uniform(0.0, 1.0, size=Z_0.shape[0])
    Z_t = interpolate(Z_0, Z_1, t).astype(Z_0.dtype)
    pred = model_forward(Z_t, batch.prompt, batch.Z_style, batch.Z_ref, t, params.config, params,
                         mask=_mask_for(spec, batch, {} if mask_cache is None else mask_cache),
                         active_adapters=set(spec.active), positions=batch.positions)
    return flow_loss(pred, flow_target(Z_0, Z_1))


class Trainer:
    """Owns one stage's optimisation: micro-batches, accumulation, freezing checks."""

    def __init__(self, params: BranchParams, spec: StageSpec, data: StageData, cfg: TrainConfig,
                 heldout: StageData | None = None):
        self.params, self.spec, self.data, self.cfg = params, spec, data, cfg
        trainable = params.set_trainable([g for g in spec.trainable if g != "base"], train_base="base" in spec.trainable)
        self.optimizer = Adam({t.name: t for t in trainable}, lr=cfg.lr)
        self.state = TrainState(seed=cfg.seed, hashes={g: params.group_hash(g) for g in spec.frozen})
        self.state.hash_log.append({"step": 0, **self.state.hashes})
        self.heldout = heldout
        self._mask_cache: dict = {}
        self._order = np.random.default_rng([cfg.seed, 1]).permutation(len(data))
        self._cursor = 0

    def _next_indices(self) -> np.ndarray:
        n = len(self.data)
        out = []
        for _ in range(self.cfg.batch):
            if self._cursor == n:
                self._order = np.random.default_rng([self.cfg.seed, 1, self.state.micro]).permutation(n)
                self._cursor = 0
            out.append(self._order[self._cursor])
            self._cursor += 1
        return np.asarray(out)

    def train_step(self, batch: recipes.Batch) -> float:
        """One micro-batch; parameters update on every ``accumulation``-th call."""
        rng = np.random.default_rng([self.cfg.seed, 2, self.state.micro])
        try:
            loss = batch_loss(self.params, self.spec, batch, rng, self._mask_cache)
        except FloatingPointError as exc:
            raise NonFiniteLoss(f"stage {self.spec.stage}, step {self.state.step}: {exc}") from exc
        value = float(loss.data)
        if not np.isfinite(value):
            raise NonFiniteLoss(f"stage {self.spec.stage}, step {self.state.step}: loss is {value}")
        ad.backward(loss)
        self.state.micro += 1
        if self.state.micro % self.cfg.accumulation == 0:
            self.optimizer.step(grad_scale=1.0 / self.cfg.accumulation)
            self.optimizer.zero_grad()
            self.state.step += 1
            if self.state.step % self.cfg.hash_every == 0:
                self.check_frozen()
        return value

    def check_frozen(self) -> None:
        now = {g: self.params.group_hash(g) for g in self.spec.frozen}
        self.state.hash_log.append({"step": self.state.step, **now})
        changed = [g for g in now if now[g] != self.state.hashes[g]]
        if changed:
            raise FreezeViolation(f"stage {self.spec.stage}, step {self.state.step}: frozen groups changed: {changed}")

    def heldout_loss(self) -> float:
        if self.heldout is None:
            return float("nan")
        idx = np.arange(min(self.cfg.heldout, len(self.heldout)))
        losses = []
        with ad.no_grad():
            for start in range(0, len(idx), self.cfg.batch):
                chunk = idx[start:start + self.cfg.batch]
                rng = np.random.default_rng([self.cfg.seed, 3, start])
                batch = self.heldout.batch(chunk, draw=10**6 + start)
                losses.append(float(batch_loss(self.params, self.spec, batch, rng, self._mask_cache).data) * len(chunk))
        return sum(losses) / len(idx)

    def run(self, steps: int | None = None, eval_every: int = 0) -> TrainState:
        steps = self.cfg.steps if steps is None else steps
        target = self.state.step + steps
        if self.heldout is not None:
            self.state.heldout.append((self.state.step, self.heldout_loss()))
        while self.state.step < target:
            values = []
            for _ in range(self.cfg.accumulation):
                batch = self.data.batch(self._next_indices(), draw=self.state.micro)
                values.append(self.train_step(batch))
            self.state.losses.append(float(np.mean(values)))
            if eval_every and self.state.step % eval_every == 0 and self.heldout is not None:
                self.state.heldout.append((self.state.step, self.heldout_loss()))
            if self.state.step % 100 == 0:
                log.info("stage %d step %d loss %.4f", self.spec.stage, self.state.step, self.state.losses[-1])
        self.check_frozen()
        if self.heldout is not None and (not self.state.heldout or self.state.heldout[-1][0] != self.state.step):
            self.state.heldout.append((self.state.step, self.heldout_loss()))
        self.params.set_trainable(())
        return self.state


def run_stage(params: BranchParams, spec: StageSpec, items: list, cfg: TrainConfig,
              heldout_items: list | None = None, eval_every: int = 0) -> tuple[BranchParams, TrainState]:
    """Train a copy of ``params`` for one stage; the input is never mutated."""
    params = params.copy()
    data = StageData(spec, items, params.config, cfg.seed)
    heldout = StageData(spec, heldout_items, params.config, cfg.seed + 1) if heldout_items else None
    trainer = Trainer(params, spec, data, cfg, heldout)
    trainer.run(eval_every=eval_every)
    return params, trainer.state


def run_stage0(config: ModelConfig, samples, cfg: TrainConfig, heldout=None):
    params = BranchParams.init(config, seed=cfg.seed)
    return run_stage(params, STAGES[0], stage_items(0, samples), cfg,
                     stage_items(0, heldout) if heldout else None)


def run_stage1(base: BranchParams, samples, cfg: TrainConfig, heldout=None):
    return run_stage(base, STAGES[1], stage_items(1, samples), cfg, stage_items(1, heldout) if heldout else None)


def run_stage2(base: BranchParams, samples, cfg: TrainConfig, heldout=None):
    return run_stage(base, STAGES[2], stage_items(2, samples), cfg, stage_items(2, heldout) if heldout else None)


def run_stage3(assembled: BranchParams, samples, cfg: TrainConfig, heldout=None, mask_policy: str = "structural",
               trainable=("main",)):
    spec = stage_spec(3, mask_policy=mask_policy, trainable=trainable)
    return run_stage(assembled, spec, stage_items(3, samples), cfg, stage_items(3, heldout) if heldout else None)


def assemble_stage3(*checkpoints: tuple[BranchParams, dict], seed: int = 0) -> BranchParams:
    """Shared base + frozen ref/style adapters + fresh zero-delta main adapters.

    Each checkpoint is ``(params, meta)``; ``meta["stage"]`` says which branch
    it contributes (1 -> ref, 2 -> style). Branches without a checkpoint
    start at zero delta, as do the main adapters.
    """
    if not checkpoints:
        raise AssemblyError("at least one checkpoint is required")
    hashes = {p.group_hash("base") for p, _ in checkpoints}
    if len(hashes) != 1:
        raise AssemblyError("checkpoints do not share the same base weights")
    branch_of = {1: "ref", 2: "style"}
    out = checkpoints[0][0].copy()
    for branch in BRANCHES:
        out.reset_branch(branch, seed=seed)
    seen = set()
    for params, meta in checkpoints:
        branch = branch_of.get(int(meta.get("stage", -1)))
        if branch is None:
            raise AssemblyError(f"checkpoint from stage {meta.get('stage')} cannot be assembled")
        if branch in seen:
            raise AssemblyError(f"two checkpoints supply the {branch} branch")
        seen.add(branch)
        for name in params.branch_names(branch):
            out.adapters[name] = ad.Tensor(params.adapters[name].data.copy(), name=name)
    return out


def checkpoint_meta(spec: StageSpec, cfg: TrainConfig, state: TrainState, config: ModelConfig) -> dict:
    L = config.grid ** 2
    return {
        "stage": spec.stage,
        "steps": state.step,
        "seed": cfg.seed,
        "lr": cfg.lr,
        "mask_structural": int(spec.mask_policy == "structural"),
        "segment.L_c": config.max_text_len,
        "segment.L_t": L,
        "segment.L_style": L if "style" in spec.streams else 0,
        "segment.L_ref": config.ref_window ** 2 if "ref" in spec.streams else 0,
    }


# ------------------------------------------------------------------ inference


def compose_batch(params: BranchParams, queries, steps: int = 20, seed: int = 0,
                  mask_policy: str = "structural") -> list[np.ndarray]:
    """Insert each ``(I_f, background, I_m)`` query; only masked pixels change."""
    config = params.config
    queries = [tuple(q)[:3] for q in queries]
    examples = [recipes.inference_example(I_f, bg, I_m, config) for I_f, bg, I_m in queries]
    batch = recipes.collate(examples, config)
    shape = (batch.size, config.grid ** 2, config.d_patch)
    mask = build_structural_mask(batch.prompt.shape[1], shape[1], shape[1], batch.Z_ref.shape[1]) \
        if mask_policy == "structural" else None

    def velocity(z, conditions, t):
        with ad.no_grad():
            return model_forward(z.astype(np.float32), batch.prompt, batch.Z_style, batch.Z_ref, t, config, params,
                                 mask=mask, active_adapters=set(BRANCHES), positions=batch.positions).data

    Z = euler_sample(velocity, None, steps, seed, shape=shape)
    images = recipes.decode(Z, config)
    out = []
    for img, (_, bg, I_m) in zip(images, queries):
        result = np.array(bg, dtype=np.uint8, copy=True)
        inside = np.asarray(I_m).astype(bool)
        result[inside] = img[inside]
        out.append(result)
    return out


def compose(params: BranchParams, I_f, background, I_m, steps: int = 20, seed: int = 0,
            mask_policy: str = "structural") -> np.ndarray:
    return compose_batch(params, [(I_f, background, I_m)], steps, seed, mask_policy)[0]


# ------------------------------------------------------------------ estimators


class StageTrainer(BaseEstimator):
    """Estimator wrapper around :func:`run_stage` for one stage."""

    def __init__(self, stage: int = 1, steps: int = 500, lr: float = 1e-3, batch: int = 4, accumulation: int = 2,
                 seed: int = 0, mask_policy: str | None = None, hash_every: int = 100):
        self.stage = stage
        self.steps = steps
        self.lr = lr
        self.batch = batch
        self.accumulation = accumulation
        self.seed = seed
        self.mask_policy = mask_policy
        self.hash_every = hash_every

    def _cfg(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, lr=self.lr, batch=self.batch, accumulation=self.accumulation,
                           seed=self.seed, hash_every=self.hash_every)

    def fit(self, X, y=None, init: BranchParams | None = None, heldout=None):
        spec = stage_spec(self.stage, self.mask_policy)
        if init is None:
            if self.stage != 0:
                raise ValueError(f"stage {self.stage} needs initial parameters")
            init = BranchParams.init(ModelConfig(), seed=self.seed)
        items = stage_items(self.stage, list(X))
        held = stage_items(self.stage, list(heldout)) if heldout else None
        self.params_, self.state_ = run_stage(init, spec, items, self._cfg(), held)
        self.meta_ = checkpoint_meta(spec, self._cfg(), self.state_, init.config)
        return self


class Composer(BaseEstimator):
    """Run a protocol variant end to end, then insert objects with ``predict``."""

    def __init__(self, variant: str = "full", config: ModelConfig | None = None, base_steps: int = 1500,
                 stage_steps: int = 800, final_steps: int = 1500, lr: float = 1e-3, batch: int = 4,
                 accumulation: int = 2, seed: int = 0, sample_steps: int = 20):
        self.variant = variant
        self.config = config
        self.base_steps = base_steps
        self.stage_steps = stage_steps
        self.final_steps = final_steps
        self.lr = lr
        self.batch = batch
        self.accumulation = accumulation
        self.seed = seed
        self.sample_steps = sample_steps

    def _cfg(self, steps: int) -> TrainConfig:
        return TrainConfig(steps=steps, lr=self.lr, batch=self.batch, accumulation=self.accumulation, seed=self.seed)

    def fit(self, X, y=None, base: BranchParams | None = None):
        """``X``: training samples (stage 3 uses those labeled good)."""
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        variant = VARIANTS[self.variant]
        samples = list(X)
        if base is None:
            base, _ = run_stage0(self.config or ModelConfig(), samples, self._cfg(self.base_steps))
        ckpts = []
        for stage in variant.pretrain:
            params, state = run_stage(base, STAGES[stage], stage_items(stage, samples), self._cfg(self.stage_steps))
            ckpts.append((params, checkpoint_meta(STAGES[stage], self._cfg(self.stage_steps), state, params.config)))
        if ckpts:
            assembled = assemble_stage3(*ckpts, seed=self.seed)
        else:
            assembled = base.copy()
            for branch in BRANCHES:
                assembled.reset_branch(branch, seed=self.seed)
        good = [s for s in samples if s.record.label == "good"]
        self.params_, self.state_ = run_stage3(assembled, good, self._cfg(self.final_steps),
                                               mask_policy=variant.mask_policy, trainable=variant.stage3_trainable)
        return self

    def predict(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "params_")
        return compose_batch(self.params_, list(X), self.sample_steps, self.seed, VARIANTS[self.variant].mask_policy)
