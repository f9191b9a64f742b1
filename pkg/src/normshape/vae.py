"""Convolutional variational autoencoder over binary mask volumes.

Encoder: `stages` stride-2 conv blocks, then a linear map to the Gaussian
posterior (mu, logvar). Decoder: linear map back to the low-resolution
grid, mirrored transposed-conv blocks, final 1-channel conv + sigmoid
giving per-voxel foreground probabilities. Objective: negative ELBO =
Bernoulli NLL (voxel-summed) + KL to the standard normal prior, with a
linear KL warm-up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import errors, optim
from .augment import AugmentRanges, random_similarity
from .optim import Parameter, SgdSchedule, clip_grad_norm, sgd_step
from .volume import MaskVolume, ScalarField, dice

LEAKY_SLOPE = 0.01


@dataclass
class VaeConfig:
    input_dims: tuple[int, int, int] = (48, 32, 16)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 2.0)
    stages: int = 3
    channels: tuple[int, ...] = (8, 16, 32)
    latent_dim: int = 32
    kl_warmup_steps: int = 0
    prob_clamp_eps: float = 1e-6
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.channels) != self.stages:
            raise ValueError("need one channel count per stage")
        if any(n % (2**self.stages) != 0 for n in self.input_dims):
            raise ValueError(f"input dims {self.input_dims} not divisible by 2^{self.stages}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not (0 < self.prob_clamp_eps < 0.5):
            raise ValueError("prob_clamp_eps must be in (0, 0.5)")

    @property
    def bottleneck_dims(self) -> tuple[int, int, int]:
        f = 2**self.stages
        return tuple(n // f for n in self.input_dims)

    @property
    def bottleneck_size(self) -> int:
        return self.channels[-1] * int(np.prod(self.bottleneck_dims))


@dataclass
class LatentPosterior:
    mu: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.logvar = np.asarray(self.logvar, dtype=np.float64)
        if self.mu.shape != self.logvar.shape or self.mu.ndim != 1:
            raise errors.ShapeMismatch("mu and logvar must be equal-length vectors")
        if not (np.isfinite(self.mu).all() and np.isfinite(self.logvar).all()):
            raise errors.NonFiniteLoss("non-finite posterior")


class VaeParams:
    """All encoder and decoder parameters, keyed by stable names."""

    def __init__(self, config: VaeConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        dt = np.dtype(config.dtype)
        k3 = 27

        def conv_param(name, c_out, c_in):
            std = np.sqrt(2.0 / (c_in * k3))
            self.params[f"{name}.w"] = Parameter(
                rng.normal(0.0, std, size=(c_out, c_in, 3, 3, 3)).astype(dt)
            )
            self.params[f"{name}.b"] = Parameter(np.zeros(c_out, dtype=dt))

        chans = config.channels
        c_prev = 1
        for i, c in enumerate(chans):
            conv_param(f"enc{i}.a", c, c_prev)
            conv_param(f"enc{i}.b", c, c)
            c_prev = c
        f = config.bottleneck_size
        ld = config.latent_dim
        self.params["enc.fc.w"] = Parameter(
            rng.normal(0.0, np.sqrt(1.0 / f), size=(2 * ld, f)).astype(dt)
        )
        self.params["enc.fc.b"] = Parameter(np.zeros(2 * ld, dtype=dt))
        self.params["dec.fc.w"] = Parameter(
            rng.normal(0.0, np.sqrt(1.0 / ld), size=(f, ld)).astype(dt)
        )
        self.params["dec.fc.b"] = Parameter(np.zeros(f, dtype=dt))
        for i in reversed(range(config.stages)):
            c = chans[i]
            c_next = chans[i - 1] if i > 0 else chans[0]
            # transposed conv uses the conv kernel layout (C_out_conv, C_in_conv, k^3)
            conv_param(f"dec{i}.t", c, c)
            conv_param(f"dec{i}.c", c_next, c)
        conv_param("out", 1, chans[0])

    def __iter__(self):
        return iter(self.params.values())

    def __getitem__(self, name) -> Parameter:
        return self.params[name]

    def zero_grads(self):
        for p in self:
            p.zero_grad()

    def leaf_vars(self) -> dict[str, ad.Var]:
        return {k: ad.Var(p.value, grad_buf=p.grad) for k, p in self.params.items()}

    def save(self, path) -> None:
        optim.save_params(self.params, path)

    @classmethod
    def load(cls, path, config: VaeConfig) -> "VaeParams":
        obj = cls(config, seed=0)
        stored = optim.load_params(path)
        for name, p in obj.params.items():
            if name not in stored:
                raise errors.MalformedHeader(f"checkpoint missing parameter {name}")
            if stored[name].shape != p.value.shape:
                raise errors.ShapeMismatch(f"checkpoint shape mismatch for {name}")
            p.value = stored[name].astype(p.value.dtype)
            p.grad = np.zeros_like(p.value)
            p.momentum_buf = np.zeros_like(p.value)
        return obj


# ---------------------------------------------------------------------------
# graph builders (batched, (N,1,D,H,W))
# ---------------------------------------------------------------------------

def _encode_graph(pv: dict, x: ad.Var, cfg: VaeConfig):
    h = x
    for i in range(cfg.stages):
        h = ad.leaky_relu(ad.conv3d(h, pv[f"enc{i}.a.w"], pv[f"enc{i}.a.b"], 1, 1), LEAKY_SLOPE)
        h = ad.leaky_relu(ad.conv3d(h, pv[f"enc{i}.b.w"], pv[f"enc{i}.b.b"], 2, 1), LEAKY_SLOPE)
    n = h.shape[0]
    flat = ad.reshape(h, (n, cfg.bottleneck_size))
    both = ad.linear(flat, pv["enc.fc.w"], pv["enc.fc.b"])
    ld = cfg.latent_dim
    mu = ad.slice_last(both, 0, ld)
    logvar = ad.clamp(ad.slice_last(both, ld, 2 * ld), -10.0, 10.0)
    return mu, logvar


def _decode_logits_graph(pv: dict, z: ad.Var, cfg: VaeConfig):
    n = z.shape[0]
    h = ad.linear(z, pv["dec.fc.w"], pv["dec.fc.b"])
    h = ad.reshape(h, (n, cfg.channels[-1]) + cfg.bottleneck_dims)
    for i in reversed(range(cfg.stages)):
        h = ad.leaky_relu(
            ad.conv3d_transpose(h, pv[f"dec{i}.t.w"], pv[f"dec{i}.t.b"], 2, 1, 1), LEAKY_SLOPE
        )
        h = ad.leaky_relu(ad.conv3d(h, pv[f"dec{i}.c.w"], pv[f"dec{i}.c.b"], 1, 1), LEAKY_SLOPE)
    return ad.conv3d(h, pv["out.w"], pv["out.b"], 1, 1)


def _decode_graph(pv: dict, z: ad.Var, cfg: VaeConfig):
    logits = _decode_logits_graph(pv, z, cfg)
    return ad.clamp(ad.sigmoid(logits), cfg.prob_clamp_eps, 1.0 - cfg.prob_clamp_eps)


def _as_batch(masks, cfg: VaeConfig) -> np.ndarray:
    dt = np.dtype(cfg.dtype)
    arrs = []
    for m in masks:
        if m.dims != tuple(cfg.input_dims):
            raise errors.DimMismatch(f"mask dims {m.dims} != config {cfg.input_dims}")
        arrs.append(m.data.astype(dt))
    return np.stack(arrs)[:, None]


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def encode(params: VaeParams, mask: MaskVolume) -> LatentPosterior:
    cfg = params.config
    x = ad.Var(_as_batch([mask], cfg))
    mu, logvar = _encode_graph(params.leaf_vars(), x, cfg)
    return LatentPosterior(mu=mu.data[0], logvar=logvar.data[0])


def encode_batch(params: VaeParams, masks) -> np.ndarray:
    """Posterior means for a list of masks, stacked (n, L)."""
    cfg = params.config
    out = []
    for i in range(0, len(masks), 16):
        x = ad.Var(_as_batch(masks[i : i + 16], cfg))
        mu, _ = _encode_graph(params.leaf_vars(), x, cfg)
        out.append(mu.data.astype(np.float64))
    return np.concatenate(out)


def reparameterize(post: LatentPosterior, rng_seed: int) -> np.ndarray:
    eps = np.random.default_rng(rng_seed).standard_normal(post.mu.shape)
    return post.mu + np.exp(0.5 * post.logvar) * eps


def decode(params: VaeParams, z: np.ndarray) -> ScalarField:
    cfg = params.config
    z = np.asarray(z, dtype=cfg.dtype)
    if z.shape != (cfg.latent_dim,):
        raise errors.DimMismatch(f"z has shape {z.shape}, expected ({cfg.latent_dim},)")
    probs = _decode_graph(params.leaf_vars(), ad.Var(z[None]), cfg)
    return ScalarField(data=probs.data[0, 0].astype(np.float64), spacing_mm=cfg.spacing_mm)


def reconstruct(params: VaeParams, mask: MaskVolume, threshold: float = 0.5) -> MaskVolume:
    """Binarized decode(encode(mask).mu)."""
    probs = decode(params, encode(params, mask).mu)
    return MaskVolume(
        data=(probs.data > threshold).astype(np.uint8), spacing_mm=mask.spacing_mm
    )


def bernoulli_nll(probs: ScalarField, mask: MaskVolume) -> float:
    if probs.dims != mask.dims:
        raise errors.DimMismatch(f"{probs.dims} vs {mask.dims}")
    p = probs.data
    t = mask.data.astype(np.float64)
    return float(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum())


def kl_gaussian(post: LatentPosterior) -> float:
    m, lv = post.mu, post.logvar
    return float(0.5 * (m * m + np.exp(lv) - 1.0 - lv).sum())


def loss_graph(params: VaeParams, x_batch: np.ndarray, eps: np.ndarray, kl_weight: float):
    """Batched negative-ELBO graph; returns (per-sample Var, pieces dict)."""
    cfg = params.config
    pv = params.leaf_vars()
    xv = ad.Var(x_batch)
    mu, logvar = _encode_graph(pv, xv, cfg)
    z = ad.reparameterize_var(mu, logvar, eps.astype(x_batch.dtype))
    logits = _decode_logits_graph(pv, z, cfg)
    nll = ad.bernoulli_nll_logits_terms(logits, x_batch, cfg.prob_clamp_eps)
    kl = ad.kl_gaussian_terms(mu, logvar)
    per_sample = ad.add(nll, ad.scale(kl, kl_weight))
    return per_sample, {"nll": nll, "kl": kl}


def loss(params: VaeParams, mask: MaskVolume, rng_seed: int, kl_weight: float) -> float:
    if not (0.0 <= kl_weight <= 1.0):
        raise ValueError("kl_weight must be in [0, 1]")
    cfg = params.config
    x = _as_batch([mask], cfg)
    eps = np.random.default_rng(rng_seed).standard_normal((1, cfg.latent_dim))
    per_sample, _ = loss_graph(params, x, eps, kl_weight)
    return float(per_sample.data[0])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainingHistory:
    epochs: list = field(default_factory=list)  # dicts: epoch, train_loss, val_loss, val_dice, lr

    def rows(self):
        return self.epochs


def stratified_volume_split(masks, train_frac: float, seed: int):
    """80/20-style split stratified by foreground-volume quartile."""
    counts = np.array([m.foreground_count() for m in masks], dtype=np.float64)
    qs = np.quantile(counts, [0.25, 0.5, 0.75])
    bins = np.searchsorted(qs, counts)
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for q in range(4):
        idx = np.flatnonzero(bins == q)
        rng.shuffle(idx)
        n_train = int(round(train_frac * len(idx)))
        train_idx.extend(idx[:n_train])
        val_idx.extend(idx[n_train:])
    return sorted(train_idx), sorted(val_idx)


def plan_total_steps(n_train: int, epochs: int, batch: int = 8, accum: int = 5) -> int:
    per_epoch = max(1, int(np.ceil(np.ceil(n_train / batch) / accum)))
    return per_epoch * epochs


def train(
    cohort,
    config: VaeConfig,
    sched: SgdSchedule,
    aug: AugmentRanges | None,
    split_seed: int = 0,
    epochs: int = 200,
    batch_size: int = 8,
    accum_steps: int = 5,
    grad_clip_norm: float | None = 30.0,
    log_fn=None,
):
    """Train on a healthy cohort; returns (best VaeParams, TrainingHistory).

    Per epoch: shuffle, augment each sample, accumulate gradients over
    `accum_steps` micro-batches of `batch_size`, then one SGD step.
    Gradients are clipped to a global norm of `grad_clip_norm` before each
    step. Parameters with the best validation loss are returned.
    """
    if len(cohort) < 10:
        raise ValueError("need at least 10 masks")
    params = VaeParams(config, seed=split_seed)
    train_idx, val_idx = stratified_volume_split(cohort, 0.8, split_seed)
    train_set = [cohort[i] for i in train_idx]
    val_set = [cohort[i] for i in val_idx]
    val_x = _as_batch(val_set, config)

    rng = np.random.default_rng(np.random.SeedSequence([split_seed, 0xA0]))
    step = 0
    best_val = np.inf
    best_state = {k: p.value.copy() for k, p in params.params.items()}
    history = TrainingHistory()

    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        mb_bounds = list(range(0, len(order), batch_size))
        groups = [mb_bounds[i : i + accum_steps] for i in range(0, len(mb_bounds), accum_steps)]
        epoch_loss = 0.0
        for group in groups:
            group_n = sum(min(batch_size, len(order) - st) for st in group)
            params.zero_grads()
            for st in group:
                sel = order[st : st + batch_size]
                masks = []
                for i in sel:
                    m = train_set[i]
                    if aug is not None:
                        m = random_similarity(m, aug, int(rng.integers(2**62)))
                    masks.append(m)
                x = _as_batch(masks, config)
                eps = rng.standard_normal((len(sel), config.latent_dim))
                klw = 1.0 if config.kl_warmup_steps <= 0 else min(
                    1.0, step / config.kl_warmup_steps
                )
                per_sample, _ = loss_graph(params, x, eps, klw)
                total = float(per_sample.data.sum())
                if not np.isfinite(total):
                    raise errors.NonFiniteLoss(
                        f"non-finite loss at epoch {epoch}, step {step}"
                    )
                epoch_loss += total
                ad.backward(ad.scale(ad.vsum(per_sample), 1.0 / group_n))
            if grad_clip_norm is not None:
                clip_grad_norm(params, grad_clip_norm)
            sgd_step(params, sched, min(step, sched.total_steps - 1))
            step += 1
        train_loss = epoch_loss / len(train_set)

        val_loss, val_dice = _validate(params, val_set, val_x)
        row = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_dice": val_dice,
            "lr": sched.lr_at(min(step, sched.total_steps) - 1),
        }
        history.epochs.append(row)
        if log_fn is not None:
            log_fn(row)
        if val_loss < best_val:
            best_val = val_loss
            best_state = {k: p.value.copy() for k, p in params.params.items()}

    for k, p in params.params.items():
        p.value = best_state[k]
        p.grad = np.zeros_like(p.value)
        p.momentum_buf = np.zeros_like(p.value)
    return params, history


def _validate(params: VaeParams, val_set, val_x: np.ndarray):
    cfg = params.config
    pv = params.leaf_vars()
    losses = []
    dices = []
    for i in range(0, len(val_set), 16):
        xb = val_x[i : i + 16]
        mu, logvar = _encode_graph(pv, ad.Var(xb), cfg)
        probs = _decode_graph(pv, mu, cfg)  # posterior mean, no sampling
        nll = ad.bernoulli_nll_terms(probs, xb)
        kl = ad.kl_gaussian_terms(mu, logvar)
        losses.extend((nll.data + kl.data).tolist())
        recon = probs.data[:, 0] > 0.5
        for j, m in enumerate(val_set[i : i + 16]):
            a = recon[j]
            b = m.data.astype(bool)
            denom = a.sum() + b.sum()
            dices.append(1.0 if denom == 0 else 2.0 * np.logical_and(a, b).sum() / denom)
    return float(np.mean(losses)), float(np.mean(dices))
