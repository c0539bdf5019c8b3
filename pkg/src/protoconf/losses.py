"""Training objective for the shared prototype weights.

total = sim + lambda * conf + mu * div

* sim: in-batch contrastive loss of each image against all reports, on the cosine of
  weighted global embeddings (temperature 1 by default).
* conf: mean squared shortfall ``(1 - C)^2`` of matched-pair confidence.
* div: pairwise prototype similarity penalty inside each prototype set. ``verbatim``
  sums ``(1 - cos)^2`` over ordered pairs ``k != l``; ``repulsive`` sums ``cos^2``.
  It does not depend on the weights, so it contributes nothing to the gradient.

Weights are parameterised as ``w = K * softmax(theta)`` and only ``theta`` is learned.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .confidence import Transform, paired_cosines, transformed
from .core import Corpus, MismatchedK, PrototypeSet, ProtoconfError, WeightVector, check_nonzero, row_norms
from .ranking import weighted_sum


class NonFiniteLoss(ProtoconfError, FloatingPointError):
    pass


class DiversityMode(str, enum.Enum):
    VERBATIM = "verbatim"
    REPULSIVE = "repulsive"


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    mu: float = 1.0
    temperature: float = 1.0
    transform: Transform = Transform.SHIFTED
    diversity_mode: DiversityMode = DiversityMode.VERBATIM

    def __post_init__(self) -> None:
        object.__setattr__(self, "transform", Transform(self.transform))
        object.__setattr__(self, "diversity_mode", DiversityMode(self.diversity_mode))
        for name in ("lam", "mu", "temperature"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if self.lam < 0 or self.mu < 0:
            raise ValueError(f"lambda and mu must be >= 0, got {self.lam}, {self.mu}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


@dataclass(frozen=True, eq=False)
class Batch:
    """N matched pairs stacked as (N, K, d) image and report prototype arrays."""

    images: np.ndarray
    reports: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.images, dtype=np.float64)
        b = np.asarray(self.reports, dtype=np.float64)
        if a.ndim != 3 or a.shape != b.shape or a.shape[0] < 1:
            raise MismatchedK(f"batch needs matching (N>=1, K, d) arrays, got {a.shape} and {b.shape}")
        object.__setattr__(self, "images", a)
        object.__setattr__(self, "reports", b)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[PrototypeSet, PrototypeSet]]) -> "Batch":
        if not pairs:
            raise ValueError("batch needs at least one pair")
        return cls(np.stack([p[0].prototypes for p in pairs]), np.stack([p[1].prototypes for p in pairs]))

    @property
    def N(self) -> int:
        return self.images.shape[0]

    @property
    def K(self) -> int:
        return self.images.shape[1]


def _logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def _global_similarities(batch: Batch, w: WeightVector):
    h = weighted_sum(batch.images, w)
    g = weighted_sum(batch.reports, w)
    hn = row_norms(h)
    gn = row_norms(g)
    check_nonzero(hn, "image global embedding")
    check_nonzero(gn, "report global embedding")
    hu = h / hn[:, None]
    gu = g / gn[:, None]
    s = (h[:, None, :] * g[None, :, :]).sum(axis=-1) / (hn[:, None] * gn[None, :])
    return np.clip(s, -1.0, 1.0), hu, gu, hn, gn


def _sim_loss_and_grad(batch: Batch, w: WeightVector, temperature: float, want_grad: bool):
    s, hu, gu, hn, gn = _global_similarities(batch, w)
    logits = s / temperature
    lse = _logsumexp_rows(logits)
    loss = float(np.mean(lse - np.diag(logits)))
    if not want_grad:
        return loss, None
    n = batch.N
    p = np.exp(logits - lse[:, None])
    d_s = (p - np.eye(n)) / (n * temperature)
    # d cos(h, g) / dh = (g_hat - cos * h_hat) / |h|
    d_h = ((d_s[:, :, None] * gu[None, :, :]).sum(axis=1) - (d_s * s).sum(axis=1)[:, None] * hu) / hn[:, None]
    d_g = ((d_s[:, :, None] * hu[:, None, :]).sum(axis=0) - (d_s * s).sum(axis=0)[:, None] * gu) / gn[:, None]
    grad_w = (batch.images * d_h[:, None, :]).sum(axis=(0, 2)) + (batch.reports * d_g[:, None, :]).sum(axis=(0, 2))
    return loss, grad_w


def _conf_loss_and_grad(batch: Batch, w: WeightVector, transform, want_grad: bool):
    t = transformed(paired_cosines(batch.images, batch.reports), transform)
    c = (t * w.w).sum(axis=-1) / w.K
    loss = float(np.mean((1.0 - c) ** 2))
    if not want_grad:
        return loss, None
    grad_w = (-2.0 / (batch.N * w.K)) * ((1.0 - c)[:, None] * t).sum(axis=0)
    return loss, grad_w


def sim_loss(batch: Batch, w: WeightVector, temperature: float = 1.0) -> float:
    return _sim_loss_and_grad(batch, w, temperature, False)[0]


def conf_loss(batch: Batch, w: WeightVector, transform: Transform | str = Transform.SHIFTED) -> float:
    return _conf_loss_and_grad(batch, w, transform, False)[0]


def div_loss(z, mode: DiversityMode | str = DiversityMode.VERBATIM) -> float:
    """Diversity penalty of one prototype set (``PrototypeSet`` or (K, d) array)."""
    z = z.prototypes if isinstance(z, PrototypeSet) else np.asarray(z, dtype=np.float64)
    return float(_div_terms(z[None], DiversityMode(mode))[0])


def _div_terms(z: np.ndarray, mode: DiversityMode) -> np.ndarray:
    n = row_norms(z)
    check_nonzero(n, "prototype")
    u = z / n[..., None]
    m = np.clip((u[:, :, None, :] * u[:, None, :, :]).sum(axis=-1), -1.0, 1.0)
    off = ~np.eye(z.shape[1], dtype=bool)
    vals = (1.0 - m) ** 2 if mode is DiversityMode.VERBATIM else m**2
    return (vals * off).sum(axis=(1, 2))


def batch_div_loss(batch: Batch, mode: DiversityMode | str = DiversityMode.VERBATIM) -> float:
    """Mean diversity penalty over every prototype set in the batch, both modalities."""
    mode = DiversityMode(mode)
    return float(np.concatenate([_div_terms(batch.images, mode), _div_terms(batch.reports, mode)]).mean())


@dataclass(frozen=True)
class LossTerms:
    sim: float
    conf: float
    div: float
    total: float


def loss_terms(batch: Batch, w: WeightVector, cfg: LossConfig) -> LossTerms:
    sim = sim_loss(batch, w, cfg.temperature)
    conf = conf_loss(batch, w, cfg.transform)
    div = batch_div_loss(batch, cfg.diversity_mode)
    return LossTerms(sim, conf, div, sim + cfg.lam * conf + cfg.mu * div)


def total_loss(batch: Batch, w: WeightVector, cfg: LossConfig) -> float:
    return loss_terms(batch, w, cfg).total


def grad_w(batch: Batch, w: WeightVector, cfg: LossConfig) -> np.ndarray:
    """Gradient of the total loss with respect to the weights ``w`` themselves."""
    _, gs = _sim_loss_and_grad(batch, w, cfg.temperature, True)
    _, gc = _conf_loss_and_grad(batch, w, cfg.transform, True)
    return gs + cfg.lam * gc


def grad_theta(batch: Batch, w: WeightVector, cfg: LossConfig) -> np.ndarray:
    """Gradient of the total loss with respect to ``theta`` through ``w = K softmax(theta)``."""
    if batch.K != w.K:
        raise MismatchedK(f"batch K={batch.K} but weights K={w.K}")
    g = grad_w(batch, w, cfg)
    return w.w * (g - np.dot(w.w, g) / w.K)


def finite_difference_grad(batch: Batch, w: WeightVector, cfg: LossConfig, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``total_loss`` in each coordinate of theta."""
    theta = np.array(w.theta)
    out = np.empty_like(theta)
    for k in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[k] += h
        tm[k] -= h
        out[k] = (total_loss(batch, WeightVector(tp), cfg) - total_loss(batch, WeightVector(tm), cfg)) / (2 * h)
    return out


def cosine_annealing(lr0: float) -> Callable[[int, int], float]:
    """Step size ``lr0 * (1 + cos(pi * step / total)) / 2``."""

    def schedule(step: int, total: int) -> float:
        return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))

    return schedule


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    sim_loss: float
    conf_loss: float
    div_loss: float
    total: float


@dataclass
class TrainResult:
    weights: WeightVector
    trace: list[EpochRecord] = field(default_factory=list)


def _eval_trace(images, reports, chunks, w, cfg) -> tuple[float, float]:
    sim = conf = 0.0
    n = images.shape[0]
    for idx in chunks:
        b = Batch(images[idx], reports[idx])
        frac = len(idx) / n
        sim += frac * sim_loss(b, w, cfg.temperature)
        conf += frac * conf_loss(b, w, cfg.transform)
    return sim, conf


def train(
    corpus: Corpus,
    cfg: LossConfig = LossConfig(),
    epochs: int = 30,
    batch_size: int = 32,
    lr: float = 1e-4,
    schedule: Callable[[int, int], float] | None = None,
    seed: int = 0,
    init: WeightVector | None = None,
) -> TrainResult:
    """Gradient descent on theta over seeded, shuffled mini-batches of matched pairs.

    Each epoch's trace entry is the loss of the epoch's final weights on a fixed
    partition of the corpus (consecutive chunks of ``batch_size`` in image-id order),
    weighted by chunk size, so successive entries differ only through the weights.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    pairs = corpus.pairs()
    images = np.stack([p[0].prototypes for p in pairs])
    reports = np.stack([p[1].prototypes for p in pairs])
    n = len(pairs)
    K = images.shape[1]
    w = init if init is not None else WeightVector.uniform(K)
    if w.K != K:
        raise MismatchedK(f"initial weights have K={w.K}, corpus has K={K}")
    schedule = schedule or cosine_annealing(lr)

    fixed_chunks = [np.arange(a, min(a + batch_size, n)) for a in range(0, n, batch_size)]
    div = batch_div_loss(Batch(images, reports), cfg.diversity_mode)
    rng = np.random.default_rng(seed)
    steps_per_epoch = len(fixed_chunks)
    total_steps = epochs * steps_per_epoch
    theta = np.array(w.theta)
    step = 0
    result = TrainResult(w)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * batch_size:(b + 1) * batch_size])
            batch = Batch(images[idx], reports[idx])
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                g = grad_theta(batch, w, cfg)
                value = total_loss(batch, w, cfg)
            if not (math.isfinite(value) and np.all(np.isfinite(g))):
                raise NonFiniteLoss(f"non-finite loss or gradient at epoch {epoch}, batch {b}")
            theta = theta - schedule(step, total_steps) * g
            if not np.all(np.isfinite(theta)):
                raise NonFiniteLoss(f"update produced non-finite weights at epoch {epoch}, batch {b}")
            w = WeightVector(theta)
            step += 1
        sim, conf = _eval_trace(images, reports, fixed_chunks, w, cfg)
        total = sim + cfg.lam * conf + cfg.mu * div
        if not math.isfinite(total):
            raise NonFiniteLoss(f"non-finite epoch loss at epoch {epoch}")
        result.trace.append(EpochRecord(epoch, sim, conf, div, total))
    result.weights = w
    return result
