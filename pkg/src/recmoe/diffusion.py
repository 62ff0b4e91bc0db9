"""Class-conditioned denoising diffusion at desk scale.

Synthetic shape/gaussian-blob datasets, a linear cumulative-signal noise
schedule, a small DiT-style stack whose configured layers run the recursive
sparse attention, noise-prediction training with AdamW, an ancestral
sampler, and distributional evaluation metrics (a pixel-PCA Frechet
analogue, nearest-class-mean accuracy, and sample diversity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import sqrtm

from . import analysis
from .mmdit import (
    MmditBlockParams,
    block_forward,
    empty_context,
    init_block_params,
    mlp_part,
    modulation,
)
from .adapters import ExpertBank, init_expert_bank
from .optim import AdamW
from .recursion import (
    RecursionConfig,
    RecursionRecord,
    RecursionTrace,
    StepCounters,
    recursive_attention,
)
from .routing import GateNetwork, balance_loss, init_gate
from .rng import Rng
from .tensor import (
    ConfigError,
    Tensor,
    _sinusoidal,
    backward,
    index_select,
    layernorm,
    matmul,
    no_grad,
    reshape,
    sinusoidal_embed_batch,
    tmean,
    transpose,
)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the offending step."""


# -- synthetic data -----------------------------------------------------------


@dataclass
class ToyDataset:
    images: np.ndarray  # [count, C, H, W], values in [-1, 1]
    labels: np.ndarray  # [count] int64
    classes: int
    kind: str
    seed: int

    def class_means(self) -> np.ndarray:
        """Mean image per class, [K, C, H, W]."""
        return np.stack(
            [self.images[self.labels == k].mean(axis=0) for k in range(self.classes)]
        )


def _render_shape(label: int, h: int, w: int, rng: Rng) -> np.ndarray:
    img = np.full((h, w), -1.0)
    cy = h // 2 + int(rng.integers(3)) - 1
    cx = w // 2 + int(rng.integers(3)) - 1
    r = 3 + int(rng.integers(2))
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    shape = label % 4
    arm = r + 3  # plus/cross arms extend well past the disk radius
    if shape == 0:  # filled disk
        mask = dy * dy + dx * dx <= r * r
    elif shape == 1:  # hollow square ring
        cheb = np.maximum(np.abs(dy), np.abs(dx))
        mask = (cheb == r) | (cheb == r - 1)
    elif shape == 2:  # plus
        mask = ((np.abs(dy) <= arm) & (np.abs(dx) <= 1)) | (
            (np.abs(dx) <= arm) & (np.abs(dy) <= 1)
        )
    else:  # diagonal cross
        cheb = np.maximum(np.abs(dy), np.abs(dx))
        mask = ((np.abs(dy - dx) <= 1) | (np.abs(dy + dx) <= 1)) & (cheb <= arm)
    fg, bg = (1.0, -1.0) if label < 4 else (-1.0, 1.0)
    img[:] = bg
    img[mask] = fg
    return img


def _render_gaussian(label: int, classes: int, h: int, w: int, rng: Rng) -> np.ndarray:
    angle = 2.0 * math.pi * label / classes
    cy = h / 2.0 + (h / 4.0) * math.sin(angle) + rng.uniform(-1.0, 1.0)
    cx = w / 2.0 + (w / 4.0) * math.cos(angle) + rng.uniform(-1.0, 1.0)
    sigma = 1.5 + rng.uniform(0.0, 1.0)
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return 2.0 * np.exp(-d2 / (2.0 * sigma * sigma)) - 1.0


def make_dataset(
    kind: str, count: int, classes: int, h: int, w: int, seed: int
) -> ToyDataset:
    """Deterministic synthetic dataset; labels cycle through the classes."""
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if kind not in ("shapes", "gaussians"):
        raise ConfigError(f"unknown dataset kind {kind!r}")
    if h < 8 or w < 8:
        raise ConfigError(f"images must be at least 8x8, got {h}x{w}")
    root = Rng(seed)
    images = np.empty((count, 1, h, w), dtype=np.float64)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        label = i % classes
        sub = root.spawn(i)
        if kind == "shapes":
            images[i, 0] = _render_shape(label, h, w, sub)
        else:
            images[i, 0] = _render_gaussian(label, classes, h, w, sub)
        labels[i] = label
    return ToyDataset(images=images, labels=labels, classes=classes, kind=kind, seed=seed)


# -- noise schedule -----------------------------------------------------------


@dataclass
class DiffusionSchedule:
    """Cumulative signal fractions alpha_bar[0..steps], strictly decreasing."""

    alpha_bar: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.alpha_bar) - 1

    def validate(self) -> None:
        ab = self.alpha_bar
        if not (ab[0] > 0.99 and ab[-1] < 0.05):
            raise ConfigError("schedule must start near 1 and end near 0")
        if not np.all(np.diff(ab) < 0):
            raise ConfigError("alpha_bar must be strictly decreasing")


def linear_schedule(steps: int, terminal: float = 0.01) -> DiffusionSchedule:
    """alpha_bar falls linearly from exactly 1 to ``terminal``."""
    t = np.arange(steps + 1, dtype=np.float64)
    sched = DiffusionSchedule(alpha_bar=1.0 - (1.0 - terminal) * t / steps)
    sched.validate()
    return sched


def add_noise(x0, t: int, schedule: DiffusionSchedule, rng: Rng):
    """Forward noising: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    arr = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    if not 1 <= t <= schedule.steps:
        raise ConfigError(f"t must be in [1, {schedule.steps}], got {t}")
    ab = schedule.alpha_bar[t]
    eps = rng.normal(arr.shape)
    return math.sqrt(ab) * arr + math.sqrt(1.0 - ab) * eps, eps


# -- model --------------------------------------------------------------------


@dataclass
class DitModelConfig:
    image_hw: int = 16
    channels: int = 1
    patch: int = 4
    dim: int = 64
    heads: int = 4
    layers: int = 6
    classes: int = 4
    recursion: RecursionConfig | None = None
    lora_rank: int = 8

    def validate(self) -> None:
        if self.image_hw % self.patch != 0:
            raise ConfigError(f"image size {self.image_hw} not divisible by patch {self.patch}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 4 != 0:
            raise ConfigError(f"dim must be a multiple of 4 for 2-D position codes, got {self.dim}")
        if self.recursion is not None:
            self.recursion.validate()
            for layer in self.recursion.target_layers:
                if not 0 <= layer < self.layers:
                    raise ConfigError(
                        f"recursion layer {layer} outside [0, {self.layers})"
                    )

    @property
    def tokens(self) -> int:
        return (self.image_hw // self.patch) ** 2

    @property
    def patch_values(self) -> int:
        return self.patch * self.patch * self.channels


def patchify(images: Tensor, patch: int) -> Tensor:
    """[B, C, H, W] -> [B, N, patch*patch*C], row-major patch order."""
    b, ch, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = reshape(images, (b, ch, gh, patch, gw, patch))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (b, gh * gw, ch * patch * patch))


def unpatchify(tokens: np.ndarray, channels: int, hw: int, patch: int) -> np.ndarray:
    """Inverse of patchify on raw arrays."""
    b, n, _ = tokens.shape
    g = hw // patch
    x = tokens.reshape(b, g, g, channels, patch, patch)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, hw, hw)


def _position_codes(grid: int, dim: int) -> np.ndarray:
    half = dim // 2
    rows = _sinusoidal(np.arange(grid, dtype=np.float64), half)
    cols = _sinusoidal(np.arange(grid, dtype=np.float64), half)
    out = np.empty((grid * grid, dim), dtype=np.float64)
    for i in range(grid):
        for j in range(grid):
            out[i * grid + j, :half] = rows[i]
            out[i * grid + j, half:] = cols[j]
    return out


class DitModel:
    """Patch tokens -> DiT blocks (some recursive) -> predicted noise tokens."""

    def __init__(self, cfg: DitModelConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        d = cfg.dim
        pv = cfg.patch_values
        self.patch_w = Tensor(rng.spawn(1).normal((pv, d), std=1.0 / math.sqrt(pv)), requires_grad=True)
        self.patch_b = Tensor(np.zeros(d), requires_grad=True)
        self.class_emb = Tensor(rng.spawn(2).normal((cfg.classes, d), std=0.02), requires_grad=True)
        self.pos = Tensor(_position_codes(cfg.image_hw // cfg.patch, d))
        self.blocks: list[MmditBlockParams] = [
            init_block_params(d, cfg.heads, rng.spawn(100 + i)) for i in range(cfg.layers)
        ]
        self.head_w = Tensor(np.zeros((d, pv)), requires_grad=True)
        self.head_b = Tensor(np.zeros(pv), requires_grad=True)
        self.banks: dict[int, ExpertBank] = {}
        self.gates: dict[int, GateNetwork] = {}
        if cfg.recursion is not None:
            for layer in cfg.recursion.target_layers:
                self.banks[layer] = init_expert_bank(
                    cfg.recursion.experts, cfg.lora_rank, d, rng.spawn(200 + layer)
                )
                self.gates[layer] = init_gate(
                    d, cfg.recursion.experts, rng.spawn(300 + layer)
                )

    def parameters(self) -> dict[str, Tensor]:
        out = {
            "patch_w": self.patch_w,
            "patch_b": self.patch_b,
            "class_emb": self.class_emb,
            "head_w": self.head_w,
            "head_b": self.head_b,
        }
        for i, blk in enumerate(self.blocks):
            out.update(blk.parameters(f"blocks.{i}."))
        for layer, bank in self.banks.items():
            out.update(bank.parameters(f"banks.{layer}."))
        for layer, gate in self.gates.items():
            out.update(gate.parameters(f"gates.{layer}."))
        return out

    def forward_tokens(
        self,
        images,
        t: np.ndarray,
        labels: np.ndarray,
        *,
        rng: Rng | None = None,
        training: bool = False,
        traces: list[RecursionTrace] | None = None,
        record: RecursionRecord | None = None,
        counters: StepCounters | None = None,
        sample_ids: np.ndarray | None = None,
        latent_steps_override: int | None = None,
    ) -> Tensor:
        """Predict noise tokens [B, N, patch_values] for noisy images."""
        cfg = self.cfg
        imgs = images if isinstance(images, Tensor) else Tensor(images)
        b = imgs.shape[0]
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min() < 0 or labels.max() >= cfg.classes:
            raise ConfigError(
                f"class label out of range [0, {cfg.classes}): "
                f"[{labels.min()}, {labels.max()}]"
            )
        tokens = matmul(patchify(imgs, cfg.patch), self.patch_w) + self.patch_b + self.pos
        y = index_select(self.class_emb, labels) + sinusoidal_embed_batch(
            np.asarray(t, dtype=np.int64), cfg.dim
        )
        c = empty_context(cfg.dim, batch=b)
        rcfg = cfg.recursion
        if rcfg is not None and latent_steps_override is not None:
            rcfg = replace(rcfg, latent_steps=latent_steps_override)
        for i, blk in enumerate(self.blocks):
            if rcfg is not None and i in rcfg.target_layers:
                trace = None
                if traces is not None:
                    trace = RecursionTrace(
                        diffusion_t=int(np.asarray(t).reshape(-1)[0]),
                        cond_ids=labels.copy(),
                        sample_ids=None if sample_ids is None else np.asarray(sample_ids),
                    )
                    traces.append(trace)
                tokens, c = recursive_attention(
                    tokens, c, y, blk, self.banks[i], self.gates[i], rcfg, rng,
                    training=training, trace=trace, record=record, counters=counters,
                )
                tokens, c = mlp_part(tokens, c, modulation(blk, y), blk)
            else:
                tokens, c = block_forward(tokens, c, y, blk)
        return matmul(layernorm(tokens), self.head_w) + self.head_b


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 10000
    batch_size: int = 16
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 50
    balance_weight: float = 0.01
    # Balance pressure engages automatically for M >= 3; set True to force.
    force_balance: bool = False


def train(
    model: DitModel,
    dataset: ToyDataset,
    schedule: DiffusionSchedule,
    cfg: TrainConfig,
    *,
    checkpoint_cb=None,
    checkpoint_every: int = 0,
) -> list[dict]:
    """Minimize mean-squared noise-prediction error; returns per-step logs."""
    root = Rng(cfg.seed)
    data_rng = root.spawn(1)
    noise_rng = root.spawn(2)
    route_rng = root.spawn(3)
    params = model.parameters()
    opt = AdamW(
        params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )
    rcfg = model.cfg.recursion
    experts = rcfg.experts if rcfg is not None else 0
    use_balance = rcfg is not None and (experts >= 3 or cfg.force_balance)
    ab = schedule.alpha_bar
    logs: list[dict] = []
    count = dataset.images.shape[0]
    for step in range(1, cfg.steps + 1):
        idx = data_rng.integers(count, (cfg.batch_size,))
        ts = 1 + data_rng.integers(schedule.steps, (cfg.batch_size,))
        x0 = dataset.images[idx]
        labels = dataset.labels[idx]
        eps = noise_rng.normal(x0.shape)
        ab_t = ab[ts][:, None, None, None]
        x_t = np.sqrt(ab_t) * x0 + np.sqrt(1.0 - ab_t) * eps

        record = RecursionRecord() if rcfg is not None else None
        pred = model.forward_tokens(
            x_t, ts, labels, rng=route_rng, training=True, record=record
        )
        target = patchify(Tensor(eps), model.cfg.patch)
        diff = pred - target
        loss = tmean(diff * diff)

        bal_value = 0.0
        total = loss
        if record is not None and record.step_soft:
            bal_terms = [
                balance_loss(soft, sel)
                for soft, sel in zip(record.step_soft, record.step_selected)
            ]
            bal = bal_terms[0]
            for term in bal_terms[1:]:
                bal = bal + term
            bal = bal * (1.0 / len(bal_terms))
            bal_value = bal.item()
            if use_balance:
                total = loss + cfg.balance_weight * bal

        if not math.isfinite(total.item()):
            raise TrainingDiverged(
                f"loss became {total.item()} at step {step}; "
                f"check learning rate and schedule"
            )
        opt.zero_grad()
        backward(total)
        opt.step()

        usage = np.zeros(max(experts, 1))
        if record is not None and record.step_selected:
            flat = np.concatenate(record.step_selected)
            usage = np.bincount(flat, minlength=experts) / flat.size
        logs.append(
            {
                "step": step,
                "loss": loss.item(),
                "balance_loss": bal_value,
                "expert_usage": [float(u) for u in usage],
            }
        )
        if checkpoint_cb is not None and checkpoint_every and step % checkpoint_every == 0:
            checkpoint_cb(step, model)
    return logs


# -- sampling -----------------------------------------------------------------


def sample(
    model: DitModel,
    schedule: DiffusionSchedule,
    class_label: int,
    n: int,
    seed: int,
    t_latent_override: int | None = None,
    traces: list[RecursionTrace] | None = None,
) -> np.ndarray:
    """Ancestral denoising from pure noise; returns [n, C, H, W] in [-1, 1]."""
    cfg = model.cfg
    if not 0 <= class_label < cfg.classes:
        raise ConfigError(f"class label {class_label} outside [0, {cfg.classes})")
    rng = Rng(seed)
    ab = schedule.alpha_bar
    x = rng.normal((n, cfg.channels, cfg.image_hw, cfg.image_hw))
    labels = np.full(n, class_label, dtype=np.int64)
    sample_ids = np.arange(n)
    with no_grad():
        for t in range(schedule.steps, 0, -1):
            ts = np.full(n, t, dtype=np.int64)
            pred = model.forward_tokens(
                x, ts, labels, training=False, traces=traces,
                sample_ids=sample_ids, latent_steps_override=t_latent_override,
            )
            eps_hat = unpatchify(pred.data, cfg.channels, cfg.image_hw, cfg.patch)
            for arr in (eps_hat,):
                if not np.all(np.isfinite(arr)):
                    raise TrainingDiverged(f"non-finite prediction at t={t}")
            alpha_t = ab[t] / ab[t - 1]
            mean = (x - (1.0 - alpha_t) / math.sqrt(1.0 - ab[t]) * eps_hat) / math.sqrt(
                alpha_t
            )
            if t > 1:
                var = (1.0 - ab[t - 1]) / (1.0 - ab[t]) * (1.0 - alpha_t)
                x = mean + math.sqrt(var) * rng.normal(x.shape)
            else:
                x = mean
    return np.clip(x, -1.0, 1.0)


# -- evaluation ---------------------------------------------------------------


@dataclass
class EvalMetrics:
    frechet: float
    nearest_mean_accuracy: float
    diversity: float
    covariance_regularized: bool = False

    def as_dict(self) -> dict:
        return {
            "frechet": self.frechet,
            "nearest_mean_accuracy": self.nearest_mean_accuracy,
            "diversity": self.diversity,
            "covariance_regularized": self.covariance_regularized,
        }


def frechet_gaussian(
    mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray
) -> tuple[float, bool]:
    """Squared Frechet distance between two Gaussians.

    Degenerate (near-singular) covariances are regularized with 1e-6 * I on
    both sides and flagged in the second return value.
    """
    regularized = False
    k = cov1.shape[0]
    floor = min(np.linalg.eigvalsh(cov1).min(), np.linalg.eigvalsh(cov2).min())
    if floor < 1e-10:
        regularized = True
        cov1 = cov1 + 1e-6 * np.eye(k)
        cov2 = cov2 + 1e-6 * np.eye(k)
    diff = mu1 - mu2
    root = sqrtm(cov1 @ cov2)
    if np.iscomplexobj(root):
        root = root.real
    if not np.all(np.isfinite(root)):
        regularized = True
        root = sqrtm((cov1 + 1e-6 * np.eye(k)) @ (cov2 + 1e-6 * np.eye(k)))
        if np.iscomplexobj(root):
            root = root.real
    d2 = float(diff @ diff + np.trace(cov1 + cov2 - 2.0 * root))
    return max(d2, 0.0), regularized


def eval_metrics(
    samples: np.ndarray, labels: np.ndarray, dataset: ToyDataset, pca_k: int = 32
) -> EvalMetrics:
    """Distributional metrics of generated samples against the dataset.

    The Frechet analogue fits a PCA basis on the training pixels and
    compares Gaussian fits of the projected features. This is not
    comparable to Inception-based scores; it is a desk-scale stand-in.
    """
    per_class = np.bincount(np.asarray(labels), minlength=dataset.classes)
    if per_class.min() < 2:
        raise ConfigError("need at least 2 samples per class for evaluation")
    data_flat = dataset.images.reshape(dataset.images.shape[0], -1)
    samp_flat = samples.reshape(samples.shape[0], -1)
    k = min(pca_k, data_flat.shape[0], data_flat.shape[1])
    basis, _ = analysis.pca_fit_project(Tensor(data_flat), k)
    center = data_flat.mean(axis=0)
    feat_data = (data_flat - center) @ basis
    feat_samp = (samp_flat - center) @ basis

    mu_d, cov_d = feat_data.mean(axis=0), np.cov(feat_data, rowvar=False)
    mu_s, cov_s = feat_samp.mean(axis=0), np.cov(feat_samp, rowvar=False)
    frechet, regularized = frechet_gaussian(mu_s, cov_s, mu_d, cov_d)

    means = dataset.class_means().reshape(dataset.classes, -1)
    d2 = ((samp_flat[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argmin(d2, axis=1)
    accuracy = float(np.mean(nearest == np.asarray(labels)))

    n = samp_flat.shape[0]
    if n > 1:
        gram = samp_flat @ samp_flat.T
        sq = np.diag(gram)
        pair = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * gram, 0.0))
        diversity = float(pair[np.triu_indices(n, k=1)].mean())
    else:
        diversity = 0.0
    return EvalMetrics(frechet, accuracy, diversity, regularized)


__all__ = [
    "TrainingDiverged",
    "ToyDataset",
    "make_dataset",
    "DiffusionSchedule",
    "linear_schedule",
    "add_noise",
    "DitModelConfig",
    "DitModel",
    "patchify",
    "unpatchify",
    "TrainConfig",
    "train",
    "sample",
    "EvalMetrics",
    "frechet_gaussian",
    "eval_metrics",
]
