"""Translator GAN training and multi-source robust classifier training."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .attacks import DEFAULT_SPECS, METHODS, AttackSpec, default_spec, run_attack
from .augment import IDENTITY, WEAK_KINDS, BudgetConfig, augment_batch
from .autodiff import (
    SGD,
    Adam,
    Tape,
    Tensor,
    absolute,
    backward,
    clip,
    cross_entropy,
    exp,
    frozen,
    kl_divergence,
    log,
    log_sigmoid,
    log_softmax,
    mean,
    tsum,
)
from .datasets import LabeledImages
from .networks import Module, PatchDiscriminator, UNetTranslator, checkpoint_save
from .vicinal import (
    ADVERSARIAL,
    AUGMENTATION,
    TransferConfig,
    generate_via_translator,
    shuffle_differences,
    transfer_compose,
    vicinal_difference,
)

TAGS = ("aug", "adv", "gen_aug", "gen_adv")
METRIC_COLUMNS = ("epoch", "lr", "train_loss", "ce_term", "kl_term", "clean_val_error", "seed")


class DivergenceError(RuntimeError):
    """A loss went non-finite; ``step`` is the global step index."""

    def __init__(self, message: str, step: int, dump: Optional[str] = None):
        super().__init__(message)
        self.step = step
        self.dump = dump


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    mode: Literal["corruption", "adversarial"] = "corruption"
    beta: float = Field(1.0, ge=0)
    lam: float = Field(1.0, gt=0, alias="lambda")
    fractions: Tuple[float, float, float] = (0.25, 0.25, 0.5)
    consistency: Literal["kl", "js"] = "kl"
    shuffle_diffs: bool = True
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(32, ge=2)
    lr: float = Field(0.1, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    plateau_factor: float = Field(0.5, gt=0, lt=1)
    plateau_patience: int = Field(5, ge=0)
    plateau_threshold: float = Field(1e-3, ge=0)
    adv_lr: float = Field(0.01, gt=0)
    adv_milestone: int = Field(60, ge=1)
    adv_gamma: float = Field(0.1, gt=0, le=1)
    eps_train: float = Field(0.031, gt=0)
    eps_test: float = Field(0.031, gt=0)
    attack_methods: Tuple[str, ...] = METHODS
    harvest_steps: Optional[int] = Field(None, ge=1)
    augment_kinds: Tuple[str, ...] = WEAK_KINDS
    epsilon2: float = Field(0.5, gt=0)
    gan_epochs: int = Field(10, ge=0)
    gan_batch_size: int = Field(32, ge=2)
    gan_lr: float = Field(2e-4, gt=0)
    gan_beta1: float = Field(0.5, ge=0, lt=1)
    gan_beta2: float = Field(0.999, ge=0, lt=1)
    l1_weight: float = Field(10.0, ge=0)
    pretrain_epochs: int = Field(3, ge=0)
    seed: int = 0

    @field_validator("fractions")
    @classmethod
    def _fractions_valid(cls, v):
        if any(f < 0 for f in v):
            raise ValueError(f"fractions must be nonnegative, got {v}")
        if abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {v} (sum {sum(v):g})")
        fraction_plan(v)
        return v

    @field_validator("attack_methods")
    @classmethod
    def _methods_known(cls, v):
        bad = [m for m in v if m not in METHODS]
        if bad or not v:
            raise ValueError(f"attack_methods must be a nonempty subset of {METHODS}, got {v}")
        return v

    @field_validator("augment_kinds")
    @classmethod
    def _kinds_known(cls, v):
        bad = [k for k in v if k not in WEAK_KINDS + (IDENTITY,)]
        if bad or not v:
            raise ValueError(f"augment_kinds must be a nonempty subset of {WEAK_KINDS + (IDENTITY,)}, got {v}")
        return v

    @model_validator(mode="after")
    def _even_batches(self):
        if self.batch_size % 2:
            raise ValueError(f"batch_size must be even, got {self.batch_size}")
        return self

    @property
    def transfer(self) -> TransferConfig:
        return TransferConfig(self.lam)

    @property
    def budget(self) -> BudgetConfig:
        return BudgetConfig(self.epsilon2)


@dataclass(frozen=True)
class FractionPlan:
    aug_share: float  # share of the N source images sent through augmentation
    direct: bool
    gen: bool


def fraction_plan(fractions: Sequence[float]) -> FractionPlan:
    """Map (aug, adv, gen) row fractions onto a realizable batch layout.

    Direct rows are one per source image; generated rows mirror the direct
    rows' sources. Supported: any split with no generated rows, generated rows
    only (sources halved), and layouts where generated rows mirror the direct
    ones one to one.
    """
    fa, fv, fg = (float(f) for f in fractions)
    close = lambda a, b: abs(a - b) <= 1e-9  # noqa: E731
    if close(fg, 0):
        return FractionPlan(fa, True, False)
    if close(fa + fv, 0):
        return FractionPlan(0.5, False, True)
    if fa > 0 and fv > 0 and close(fa, fg / 2) and close(fv, fg / 2):
        return FractionPlan(0.5, True, True)
    if close(fv, 0) and close(fa, fg):
        return FractionPlan(1.0, True, True)
    if close(fa, 0) and close(fv, fg):
        return FractionPlan(0.0, True, True)
    raise ValueError(f"fractions {tuple(fractions)} are not realizable; generated rows must mirror "
                     "direct rows (e.g. (0.25, 0.25, 0.5), (0.5, 0, 0.5), (0.5, 0.5, 0), (1, 0, 0))")


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def harvest_spec(method: str, cfg: TrainConfig) -> AttackSpec:
    """Attack configuration used to harvest adversarial vicinal samples.

    ``harvest_steps`` caps iterative attacks while keeping the total step
    length, so the reachable region is unchanged.
    """
    if cfg.mode == "adversarial":
        steps = cfg.harvest_steps or 10
        return default_spec("pgd_linf", eps=cfg.eps_train, nb_iter=steps, eps_iter=2.5 * cfg.eps_train / steps)
    spec = DEFAULT_SPECS[method]
    if cfg.harvest_steps is None:
        return spec
    if method == "cw_l2":
        return default_spec(method, binary_search_steps=max(1, min(spec.binary_search_steps,
                                                                   cfg.harvest_steps // spec.max_iterations)))
    if spec.nb_iter > cfg.harvest_steps:
        return default_spec(method, nb_iter=cfg.harvest_steps,
                            eps_iter=spec.eps_iter * spec.nb_iter / cfg.harvest_steps)
    return spec


# GAN objective ------------------------------------------------------------------------

def _log_probs(d, x, candidate) -> Tuple[Tensor, Tensor]:
    """``(log D, log(1 - D))`` per patch, from logits when ``d`` exposes them."""
    if hasattr(d, "logits"):
        z = d.logits(x, candidate)
        return log_sigmoid(z), log_sigmoid(-z)
    p = d(x, candidate)
    p = p if isinstance(p, Tensor) else Tensor(p)
    return log(clip(p, 1e-12, 1.0)), log(clip(1.0 - p, 1e-12, 1.0))


def gan_discriminator_loss(d, x, x_real, x_fake) -> Tensor:
    """``-(E log D(x, x_real) + E log(1 - D(x, x_fake)))``, patch and batch averaged."""
    log_real, _ = _log_probs(d, x, x_real)
    _, log_not_fake = _log_probs(d, x, x_fake)
    return -(mean(log_real) + mean(log_not_fake))


def gan_generator_loss(d, x, x_fake) -> Tensor:
    """Non-saturating generator loss ``-E log D(x, x_fake)``."""
    log_fake, _ = _log_probs(d, x, x_fake)
    return -mean(log_fake)


@dataclass
class GanPairs:
    x: np.ndarray
    x_v: np.ndarray
    source: np.ndarray

    def __len__(self) -> int:
        return len(self.x)


def harvest_gan_pairs(data: LabeledImages, source_model: Optional[Module], cfg: TrainConfig,
                      seed: int = 0) -> GanPairs:
    """Vicinal pairs with augmented and adversarial sources in equal proportion.

    Rows are assigned alternately so each minibatch is balanced too. Attacks
    target ``source_model`` in eval mode, one method per chunk of
    ``gan_batch_size`` adversarial rows.
    """
    n = len(data)
    is_adv = (np.arange(n) % 2 == 1)
    x = data.images
    x_v = np.empty_like(x)
    aug_idx = np.flatnonzero(~is_adv)
    x_v[aug_idx] = augment_batch(x[aug_idx], _rng(seed, 11), cfg.augment_kinds, cfg.budget) if len(aug_idx) else x_v[aug_idx]
    adv_idx = np.flatnonzero(is_adv)
    if len(adv_idx):
        if source_model is None:
            raise ValueError("adversarial pairs need a source model")
        source_model.eval()
        chunk = cfg.gan_batch_size
        for j, start in enumerate(range(0, len(adv_idx), chunk)):
            idx = adv_idx[start:start + chunk]
            rng = _rng(seed, 12, j)
            method = cfg.attack_methods[int(rng.integers(len(cfg.attack_methods)))]
            x_v[idx] = run_attack(source_model, x[idx], data.labels[idx], harvest_spec(method, cfg), rng)
    source = np.where(is_adv, ADVERSARIAL, AUGMENTATION).astype(object)
    return GanPairs(x.copy(), x_v, source)


@dataclass
class TranslatorTrace:
    d_loss: List[float] = field(default_factory=list)
    g_loss: List[float] = field(default_factory=list)
    d_real: List[float] = field(default_factory=list)
    d_fake: List[float] = field(default_factory=list)
    steps: int = 0

    def to_dict(self) -> dict:
        return {"d_loss": self.d_loss, "g_loss": self.g_loss, "d_real": self.d_real,
                "d_fake": self.d_fake, "steps": self.steps}


def _finite(value: float, what: str, step: int) -> float:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} became non-finite ({value}) at step {step}", step)
    return value


def train_translator(t: UNetTranslator, d: PatchDiscriminator, pairs: GanPairs, cfg: TrainConfig,
                     epochs: Optional[int] = None, max_steps: Optional[int] = None,
                     out_dir=None, seed: Optional[int] = None) -> TranslatorTrace:
    """Alternate one discriminator and one translator Adam step per minibatch.

    The translator sees ``x + lam * delta`` with ``delta`` shuffled within the
    batch; it is additionally pulled towards reproducing real vicinal
    samples (L1, weight ``l1_weight``). Per-epoch means of both losses and of
    D on real and generated pairs are recorded.
    """
    epochs = cfg.gan_epochs if epochs is None else epochs
    seed = cfg.seed if seed is None else seed
    trace = TranslatorTrace()
    if epochs == 0 or len(pairs) == 0:
        return trace
    opt_g = Adam(t.parameters(), lr=cfg.gan_lr, beta1=cfg.gan_beta1, beta2=cfg.gan_beta2)
    opt_d = Adam(d.parameters(), lr=cfg.gan_lr, beta1=cfg.gan_beta1, beta2=cfg.gan_beta2)
    bs = min(cfg.gan_batch_size, len(pairs))
    lam = np.float32(cfg.lam)
    step = 0
    for epoch in range(epochs):
        order = _rng(seed, 21, epoch).permutation(len(pairs))
        sums = np.zeros(4)
        count = 0
        for b, start in enumerate(range(0, len(order) - bs + 1, bs)):
            if max_steps is not None and step >= max_steps:
                break
            idx = order[start:start + bs]
            x, x_v = pairs.x[idx], pairs.x_v[idx]
            delta = x_v - x
            if cfg.shuffle_diffs:
                delta = delta[_rng(seed, 22, epoch, b).permutation(bs)]
            raw = np.clip(x + lam * delta, 0.0, 1.0).astype(np.float32)

            fake = t(Tensor(raw)).data
            opt_d.zero_grad()
            with Tape() as tape:
                ld = gan_discriminator_loss(d, x, x_v, fake)
            d_loss = _finite(float(ld.data), "discriminator loss", step)
            backward(ld, tape)
            opt_d.step()

            opt_g.zero_grad()
            with frozen(d.parameters()), Tape() as tape:
                both = t(Tensor(np.concatenate([raw, x_v])))
                gen, recon = both[:bs], both[bs:]
                lg = gan_generator_loss(d, x, gen)
                if cfg.l1_weight > 0:
                    lg = lg + cfg.l1_weight * mean(absolute(recon - Tensor(x_v)))
            g_loss = _finite(float(lg.data), "translator loss", step)
            backward(lg, tape)
            opt_g.step()

            d_real = float(d(x, x_v).data.mean())
            d_fake = float(d(x, gen.data).data.mean())
            sums += (d_loss, g_loss, d_real, d_fake)
            count += 1
            step += 1
        if count:
            for lst, v in zip((trace.d_loss, trace.g_loss, trace.d_real, trace.d_fake), sums / count):
                lst.append(float(v))
        t.step = d.step = step
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            checkpoint_save(t, out / f"translator_epoch{epoch + 1:03d}.ckpt")
            checkpoint_save(d, out / f"discriminator_epoch{epoch + 1:03d}.ckpt")
            (out / "translator_trace.json").write_text(json.dumps(trace.to_dict(), indent=1) + "\n")
        if max_steps is not None and step >= max_steps:
            break
    trace.steps = step
    return trace


def translator_from_config(channels: int, cfg_seed: int, base_channels: int = 16, depth: int = 3,
                           hidden: int = 32) -> Tuple[UNetTranslator, PatchDiscriminator]:
    return (UNetTranslator(channels, depth, base_channels, seed=cfg_seed),
            PatchDiscriminator(channels, hidden, seed=cfg_seed + 1))


# robust training ----------------------------------------------------------------------

@dataclass
class ComposedBatch:
    x_all: np.ndarray
    y_all: np.ndarray
    tags: np.ndarray

    def census(self) -> Dict[str, int]:
        return {tag: int((self.tags == tag).sum()) for tag in TAGS}


def compose_robust_batch(x, y, t: Optional[UNetTranslator], attack_model: Optional[Module],
                         cfg: TrainConfig, seed, perms: Optional[Tuple] = None) -> ComposedBatch:
    """Build the multi-source batch for one step.

    The first half of ``x`` is weakly augmented, the second half attacked.
    Differences are shuffled within each half and re-added (``x + delta``),
    and the translator maps ``x + lam * delta`` to generated rows. Row order
    is aug, adv, gen-from-aug, gen-from-adv; labels follow the same layout.
    ``perms`` forces the two shuffles, e.g. to the identity.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    n = len(x)
    if n % 2:
        raise ValueError(f"batch size must be even, got {n}")
    if len(y) != n:
        raise ValueError(f"{n} images but {len(y)} labels")
    plan = fraction_plan(cfg.fractions)
    n_a = int(round(plan.aug_share * n))
    if abs(n_a - plan.aug_share * n) > 1e-9:
        raise ValueError(f"aug share {plan.aug_share} does not divide batch size {n}")
    key = np.atleast_1d(np.asarray(seed, dtype=np.int64)).tolist()
    x1, y1, x2, y2 = x[:n_a], y[:n_a], x[n_a:], y[n_a:]
    parts, labels, tags = [], [], []
    x_aug = x_adv = None
    d_aug = d_adv = None
    if n_a:
        x_aug = augment_batch(x1, _rng(*key, 31), cfg.augment_kinds, cfg.budget)
        d_aug = vicinal_difference(x1, x_aug, AUGMENTATION)
        if cfg.shuffle_diffs:
            d_aug = shuffle_differences(d_aug, _rng(*key, 33), None if perms is None else perms[0])
            x_aug = transfer_compose(x1, d_aug)
    if n - n_a:
        if attack_model is None:
            raise ValueError("adversarial rows need an attack model")
        rng = _rng(*key, 32)
        method = cfg.attack_methods[int(rng.integers(len(cfg.attack_methods)))]
        x_adv = run_attack(attack_model, x2, y2, harvest_spec(method, cfg), rng)
        d_adv = vicinal_difference(x2, x_adv, ADVERSARIAL)
        if cfg.shuffle_diffs:
            d_adv = shuffle_differences(d_adv, _rng(*key, 34), None if perms is None else perms[1])
            x_adv = transfer_compose(x2, d_adv)
    if plan.direct:
        for rows, ys, tag in ((x_aug, y1, "aug"), (x_adv, y2, "adv")):
            if rows is not None and len(rows):
                parts.append(rows)
                labels.append(ys)
                tags += [tag] * len(rows)
    if plan.gen:
        if t is None:
            raise ValueError("generated rows need a translator")
        for base, diffs, ys, tag in ((x1, d_aug, y1, "gen_aug"), (x2, d_adv, y2, "gen_adv")):
            if diffs is not None and len(diffs):
                parts.append(generate_via_translator(t, base, diffs, cfg.transfer))
                labels.append(ys)
                tags += [tag] * len(diffs)
    return ComposedBatch(np.concatenate(parts), np.concatenate(labels), np.array(tags, dtype=object))


def _eval_forward(model: Module, fn):
    saved = model.training
    model.training = False
    try:
        return fn()
    finally:
        model.training = saved


def regularization_view(model: Module, x_all, y_all, cfg: TrainConfig, seed) -> np.ndarray:
    """Second view of ``x_all`` for the consistency term.

    Corruption mode: a fresh weak augmentation. Adversarial mode: PGD against
    the current model (eval mode, parameters frozen).
    """
    key = np.atleast_1d(np.asarray(seed, dtype=np.int64)).tolist()
    if cfg.mode == "adversarial":
        spec = harvest_spec("pgd_linf", cfg)
        return _eval_forward(model, lambda: run_attack(model, x_all, y_all, spec, _rng(*key, 41)))
    return augment_batch(x_all, _rng(*key, 42), cfg.augment_kinds, cfg.budget)


def _js_divergence(log_ps: Sequence[Tensor]) -> Tensor:
    ps = [exp(lp) for lp in log_ps]
    m = ps[0]
    for p in ps[1:]:
        m = m + p
    log_m = log(clip(m * (1.0 / len(ps)), 1e-7, 1.0))
    total = None
    for p, lp in zip(ps, log_ps):
        term = tsum(p * (lp - log_m)) * (1.0 / lp.shape[0])
        total = term if total is None else total + term
    return total * (1.0 / len(ps))


@dataclass
class LossParts:
    loss: Tensor
    ce: float
    kl: float


def consistency_loss(model: Module, x_all, y_all, cfg: TrainConfig, seed=0,
                     x_reg: Optional[np.ndarray] = None) -> LossParts:
    """``CE(model(x_all), y_all) + beta * KL(p(x_all) || p(x_reg))``.

    Call inside a :class:`Tape` to train. With ``consistency='js'`` the
    regularizer is the Jensen-Shannon divergence between ``x_all`` and two
    independent regularization views.
    """
    logits = model(Tensor(x_all))
    ce = cross_entropy(logits, y_all)
    if cfg.beta == 0:
        return LossParts(ce, float(ce.data), 0.0)
    if x_reg is None:
        x_reg = regularization_view(model, x_all, y_all, cfg, seed)
    lp_all = log_softmax(logits, axis=1)
    lp_reg = log_softmax(model(Tensor(x_reg)), axis=1)
    if cfg.consistency == "js":
        key = np.atleast_1d(np.asarray(seed, dtype=np.int64)).tolist()
        x_reg2 = regularization_view(model, x_all, y_all, cfg, key + [1])
        reg = _js_divergence([lp_all, lp_reg, log_softmax(model(Tensor(x_reg2)), axis=1)])
    else:
        reg = kl_divergence(lp_all, lp_reg)
    loss = ce + cfg.beta * reg
    return LossParts(loss, float(ce.data), float(reg.data))


class PlateauScheduler:
    """Multiply lr by ``factor`` after ``patience`` epochs without a relative
    improvement of ``threshold`` in the monitored value (lower is better)."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 5, threshold: float = 1e-3):
        self.lr, self.factor, self.patience, self.threshold = lr, factor, patience, threshold
        self.best = math.inf
        self.bad = 0

    def step(self, value: float) -> float:
        if value < self.best * (1 - self.threshold):
            self.best = value
            self.bad = 0
        else:
            self.bad += 1
            if self.bad > self.patience:
                self.lr *= self.factor
                self.bad = 0
        return self.lr


class MilestoneScheduler:
    def __init__(self, lr: float, milestone: int = 60, gamma: float = 0.1):
        self.base, self.milestone, self.gamma = lr, milestone, gamma
        self.lr = lr
        self.epoch = 0

    def step(self, value: float = 0.0) -> float:
        self.epoch += 1
        self.lr = self.base * (self.gamma if self.epoch >= self.milestone else 1.0)
        return self.lr


def make_scheduler(cfg: TrainConfig):
    if cfg.mode == "adversarial":
        return MilestoneScheduler(cfg.adv_lr, cfg.adv_milestone, cfg.adv_gamma)
    return PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold)


def clean_error(model: Module, data: LabeledImages, batch_size: int = 256) -> float:
    if len(data) == 0:
        return float("nan")
    pred = model.predict_logits(data.images, batch_size).argmax(axis=1)
    return float((pred != data.labels).mean())


@dataclass
class TrainResult:
    model: Module
    history: List[Dict[str, float]]


def _write_metric_log(path: Path, history: List[Dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(float(row[k])) if k not in ("epoch", "seed") else int(row[k]))
                             for k in METRIC_COLUMNS})


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    order = _rng(seed, 1, epoch).permutation(n)
    bs = min(batch_size, n - n % 2)
    return [order[i:i + bs] for i in range(0, n - bs + 1, bs)]


def _run_loop(model: Module, data: LabeledImages, cfg: TrainConfig, step_fn, val: Optional[LabeledImages],
              out_dir, tag: str) -> TrainResult:
    if len(data) < 2:
        raise ValueError("need at least two training images")
    opt_lr = cfg.adv_lr if cfg.mode == "adversarial" else cfg.lr
    opt = SGD(model.parameters(), lr=opt_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = make_scheduler(cfg)
    val = val if val is not None else data.subset(np.arange(min(len(data), 256)))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: List[Dict[str, float]] = []
    step = 0
    for epoch in range(cfg.epochs):
        snapshot = model.clone().eval()
        sums = np.zeros(3)
        batches = _epoch_batches(len(data), cfg.batch_size, cfg.seed, epoch)
        for b, idx in enumerate(batches):
            model.train()
            opt.zero_grad()
            with Tape() as tape:
                parts = step_fn(data.images[idx], data.labels[idx], snapshot, (cfg.seed, 2, epoch, b))
            value = float(parts.loss.data)
            if not math.isfinite(value):
                dump = None
                if out is not None:
                    dump = str(out / f"{tag}_diverged_step{step}.ckpt")
                    checkpoint_save(model, dump)
                raise DivergenceError(f"training loss non-finite ({value}) at step {step}", step, dump)
            backward(parts.loss, tape)
            opt.step()
            sums += (value, parts.ce, parts.kl)
            step += 1
        model.eval()
        err = clean_error(model, val)
        lr_used = opt.lr
        opt.lr = sched.step(err)
        model.step = step
        history.append({"epoch": epoch + 1, "lr": lr_used, "train_loss": sums[0] / max(len(batches), 1),
                        "ce_term": sums[1] / max(len(batches), 1), "kl_term": sums[2] / max(len(batches), 1),
                        "clean_val_error": err, "seed": cfg.seed})
        if out is not None:
            checkpoint_save(model, out / f"{tag}_epoch{epoch + 1:03d}.ckpt")
            _write_metric_log(out / f"{tag}_metrics.csv", history)
    model.eval()
    return TrainResult(model, history)


def robust_train(model: Module, data: LabeledImages, t: Optional[UNetTranslator], cfg: TrainConfig,
                 val: Optional[LabeledImages] = None, out_dir=None) -> TrainResult:
    """Multi-source robust training.

    Each epoch freezes a snapshot of the classifier as the attack source, then
    for every minibatch composes the multi-source batch and takes one SGD step
    on the consistency objective. The translator is used frozen.
    """
    def step_fn(x, y, snapshot, key):
        batch = compose_robust_batch(x, y, t, snapshot, cfg, key)
        return consistency_loss(model, batch.x_all, batch.y_all, cfg, key)

    return _run_loop(model, data, cfg, step_fn, val, out_dir, "classifier")


def train_erm(model: Module, data: LabeledImages, cfg: TrainConfig, val: Optional[LabeledImages] = None,
              out_dir=None) -> TrainResult:
    """Plain empirical risk minimization with the same loader, optimizer and schedule."""
    def step_fn(x, y, snapshot, key):
        ce = cross_entropy(model(Tensor(x)), y)
        return LossParts(ce, float(ce.data), 0.0)

    return _run_loop(model, data, cfg, step_fn, val, out_dir, "erm")
