"""Untargeted adversarial perturbation harvesting.

Every attack treats the model as a black box with a loss gradient: it only
calls ``model(Tensor)`` for logits and reads input gradients off the tape.
Model parameters are frozen while attacking so their ``.grad`` buffers are
left alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .autodiff import Tape, Tensor, amax, backward, cross_entropy, frozen, relu, tanh, tsum
from .autodiff.functional import softmax

METHODS = ("fgsm", "pgd_linf", "pgd_l2", "bim_linf", "bim_l2", "mim", "cw_l2")


@dataclass(frozen=True)
class AttackSpec:
    method: str
    eps: float = 0.0
    nb_iter: int = 1
    eps_iter: float = 0.0
    rand_init: bool = False
    decay: float = 1.0
    confidence: float = 0.1
    learning_rate: float = 0.01
    binary_search_steps: int = 9
    max_iterations: int = 10
    initial_const: float = 1e-3
    targeted: bool = field(default=False, init=False)

    @property
    def norm(self) -> str:
        return "l2" if self.method in ("pgd_l2", "bim_l2", "cw_l2") else "linf"


DEFAULT_SPECS = {
    "pgd_linf": AttackSpec("pgd_linf", eps=0.03, nb_iter=40, eps_iter=0.001, rand_init=True),
    "pgd_l2": AttackSpec("pgd_l2", eps=0.5, nb_iter=40, eps_iter=0.05, rand_init=True),
    "fgsm": AttackSpec("fgsm", eps=0.05),
    "bim_linf": AttackSpec("bim_linf", eps=0.03, nb_iter=40, eps_iter=0.001),
    "bim_l2": AttackSpec("bim_l2", eps=1.0, nb_iter=40, eps_iter=0.05),
    "mim": AttackSpec("mim", eps=0.03, nb_iter=40, eps_iter=0.001, decay=1.0),
    "cw_l2": AttackSpec("cw_l2", confidence=0.1, learning_rate=0.01, binary_search_steps=9,
                        max_iterations=10, initial_const=1e-3),
}


def default_spec(method: str, **overrides) -> AttackSpec:
    if method not in DEFAULT_SPECS:
        raise ValueError(f"unknown attack {method!r}; expected one of {METHODS}")
    return replace(DEFAULT_SPECS[method], **overrides)


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _params(model):
    return model.parameters() if hasattr(model, "parameters") else []


def _per_sample_norm(v: np.ndarray, order: str) -> np.ndarray:
    flat = v.reshape(len(v), -1).astype(np.float64)
    if order == "l2":
        n = np.sqrt((flat ** 2).sum(axis=1))
    elif order == "l1":
        n = np.abs(flat).sum(axis=1)
    else:
        n = np.abs(flat).max(axis=1)
    return n.reshape((-1,) + (1,) * (v.ndim - 1))


def loss_gradient(model, x: np.ndarray, y) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of the summed cross-entropy w.r.t. ``x`` plus per-sample losses."""
    xt = Tensor(x, requires_grad=True)
    with frozen(_params(model)):
        with Tape():
            logits = model(xt)
            loss = cross_entropy(logits, y) * float(len(x))
        backward(loss)
    p = softmax(logits)
    per = -np.log(np.maximum(p[np.arange(len(x)), np.asarray(y)], 1e-30))
    if xt.grad is None:
        raise RuntimeError("model produced no gradient with respect to its input")
    return xt.grad, per


def batch_loss(model, x, y) -> np.ndarray:
    """Per-sample cross-entropy, no tape."""
    logits = model(Tensor(x)).data
    p = softmax(logits)
    return -np.log(np.maximum(p[np.arange(len(x)), np.asarray(y)], 1e-30))


def project_to_ball(delta, norm: str, eps: float) -> np.ndarray:
    """Project each sample's perturbation onto its ``norm`` ball of radius ``eps``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    delta = np.asarray(delta, dtype=np.float32)
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    if norm == "l2":
        batched = delta.ndim >= 2
        d = delta if batched else delta[None]
        n = _per_sample_norm(d, "l2")
        scale = np.where(n > eps, eps / np.maximum(n, 1e-30), 1.0)
        out = (d * scale).astype(np.float32)
        return out if batched else out[0]
    raise ValueError(f"unknown norm {norm!r}")


def fgsm(model, x, y, eps: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if eps == 0:
        return x.copy()
    g, _ = loss_gradient(model, x, y)
    return np.clip(x + eps * np.sign(g), 0.0, 1.0).astype(np.float32)


def _random_start(x: np.ndarray, norm: str, eps: float, rng: np.random.Generator) -> np.ndarray:
    if norm == "linf":
        delta = rng.uniform(-eps, eps, size=x.shape)
    else:
        d = rng.standard_normal(x.shape)
        d /= np.maximum(_per_sample_norm(d, "l2"), 1e-30)
        r = rng.uniform(0, 1, size=(len(x),) + (1,) * (x.ndim - 1)) ** (1.0 / x[0].size)
        delta = d * r * eps
    return np.clip(x + delta, 0.0, 1.0).astype(np.float32)


def pgd_attack(model, x, y, spec: AttackSpec, rng=None) -> np.ndarray:
    """Iterated gradient ascent with projection (PGD / BIM in linf or l2)."""
    if spec.method not in ("pgd_linf", "pgd_l2", "bim_linf", "bim_l2"):
        raise ValueError(f"pgd_attack does not handle {spec.method!r}")
    if spec.nb_iter < 1 or spec.eps_iter <= 0:
        raise ValueError("pgd_attack needs nb_iter >= 1 and eps_iter > 0")
    x = np.asarray(x, dtype=np.float32)
    norm = spec.norm
    if spec.eps == 0:
        return x.copy()
    rand_init = spec.rand_init and spec.method.startswith("pgd")
    xt = _random_start(x, norm, spec.eps, _as_rng(rng)) if rand_init else x.copy()
    for _ in range(spec.nb_iter):
        g, _ = loss_gradient(model, xt, y)
        if norm == "linf":
            step = np.sign(g)
        else:
            step = g / np.maximum(_per_sample_norm(g, "l2"), 1e-12)
        delta = project_to_ball(xt + spec.eps_iter * step - x, norm, spec.eps)
        xt = np.clip(x + delta, 0.0, 1.0).astype(np.float32)
    return xt


def mim_attack(model, x, y, spec: AttackSpec, rng=None) -> np.ndarray:
    """Momentum iterative method: sign steps on an L1-normalized gradient accumulator."""
    x = np.asarray(x, dtype=np.float32)
    if spec.eps == 0:
        return x.copy()
    xt = x.copy()
    acc = np.zeros_like(x, dtype=np.float64)
    for _ in range(spec.nb_iter):
        g, _ = loss_gradient(model, xt, y)
        acc = spec.decay * acc + g / np.maximum(_per_sample_norm(g, "l1"), 1e-12)
        delta = project_to_ball(xt + spec.eps_iter * np.sign(acc).astype(np.float32) - x, "linf", spec.eps)
        xt = np.clip(x + delta, 0.0, 1.0).astype(np.float32)
    return xt


def _cw_margin(logits, y: np.ndarray, confidence: float):
    """``Z_y - max_{k != y} Z_k + confidence`` per row."""
    k = logits.shape[1]
    onehot = np.eye(k, dtype=np.float32)[y]
    real = tsum(logits * onehot, axis=1)
    other = amax(logits - onehot * 1e9, axis=1)
    return real - other + confidence


def cw_l2_attack(model, x, y, spec: Optional[AttackSpec] = None, rng=None,
                 return_flags: bool = False):
    """Carlini-Wagner L2 in tanh space with a per-sample binary search over the constant.

    Returns the lowest-distortion adversarial found per sample, or the clean
    input where none was found (``return_flags`` exposes which).
    """
    spec = spec or DEFAULT_SPECS["cw_l2"]
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    n = len(x)
    w0 = np.arctanh(np.clip(2.0 * x.astype(np.float64) - 1.0, -1 + 1e-6, 1 - 1e-6))
    const = np.full(n, spec.initial_const)
    lower = np.zeros(n)
    upper = np.full(n, 1e10)
    best_l2 = np.full(n, np.inf)
    best = x.copy()
    b1, b2, eps = 0.9, 0.999, 1e-8
    params = _params(model)
    for _ in range(spec.binary_search_steps):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        succeeded = np.zeros(n, dtype=bool)
        for it in range(1, spec.max_iterations + 1):
            wt = Tensor(w, requires_grad=True)
            with frozen(params), Tape():
                adv = (tanh(wt) + 1.0) * 0.5
                dist = tsum(((adv - Tensor(x)) ** 2).reshape(n, -1), axis=1)
                logits = model(adv)
                margin = _cw_margin(logits, y, spec.confidence)
                loss = tsum(dist + Tensor(const) * relu(margin))
            backward(loss)
            g = wt.grad.astype(np.float64)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w - spec.learning_rate * (m / (1 - b1 ** it)) / (np.sqrt(v / (1 - b2 ** it)) + eps)
            # bookkeeping on the iterate that produced this loss
            adv_np = adv.data
            z = logits.data.copy()
            z[np.arange(n), y] += spec.confidence
            success = z.argmax(axis=1) != y
            l2 = dist.data.astype(np.float64)
            improved = success & (l2 < best_l2)
            best_l2[improved] = l2[improved]
            best[improved] = adv_np[improved]
            succeeded |= success
        upper = np.where(succeeded, np.minimum(upper, const), upper)
        lower = np.where(succeeded, lower, np.maximum(lower, const))
        const = np.where(upper < 1e9, (lower + upper) / 2.0, const * 10.0)
    found = np.isfinite(best_l2)
    best = np.clip(best, 0.0, 1.0).astype(np.float32)
    return (best, found) if return_flags else best


def run_attack(model, x, y, spec: AttackSpec, rng=None) -> np.ndarray:
    """Dispatch on ``spec.method``."""
    if spec.method == "fgsm":
        return fgsm(model, x, y, spec.eps)
    if spec.method in ("pgd_linf", "pgd_l2", "bim_linf", "bim_l2"):
        return pgd_attack(model, x, y, spec, rng)
    if spec.method == "mim":
        return mim_attack(model, x, y, spec, rng)
    if spec.method == "cw_l2":
        return cw_l2_attack(model, x, y, spec, rng)
    raise ValueError(f"unknown attack {spec.method!r}; expected one of {METHODS}")


def within_budget(x, x_adv, spec: AttackSpec, tol: float = 1e-5) -> bool:
    """True when every sample respects its declared ball and the image range.

    C&W has no declared ball, so only the range is checked for it.
    """
    x_adv = np.asarray(x_adv)
    if x_adv.min() < 0 or x_adv.max() > 1:
        return False
    if spec.method == "cw_l2":
        return True
    d = np.asarray(x_adv, np.float64) - np.asarray(x, np.float64)
    return bool((_per_sample_norm(d, spec.norm) <= spec.eps + tol).all())


def accuracy_under_attack(model, x, y, spec: AttackSpec, rng=None, batch_size: int = 128) -> float:
    """Fraction of samples still classified correctly after the attack.

    Pass the model in eval mode; batch statistics would otherwise leak across
    attacked samples.
    """
    rng = _as_rng(rng)
    y = np.asarray(y)
    correct = 0
    for i in range(0, len(x), batch_size):
        xa = run_attack(model, x[i:i + batch_size], y[i:i + batch_size], spec, rng)
        pred = model(Tensor(xa)).data.argmax(axis=1)
        correct += int((pred == y[i:i + batch_size]).sum())
    return correct / len(x)
