"""Anomaly detection on latent codes.

Zero-shot: Euclidean distance to the mean healthy latent vector. Few-shot:
a linear max-margin classifier trained by projected subgradient descent on
standardized features. Two baselines: absolute deviation from the mean
healthy volume, and a PCA shape model over signed distance fields.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import errors, optim
from .volume import MaskVolume, signed_distance, volume_mm3


@dataclass
class CohortStats:
    """Summary of a healthy cohort: latent mean and mean volume."""

    z_bar: np.ndarray
    n: int
    mean_volume_mm3: float

    def __post_init__(self):
        self.z_bar = np.asarray(self.z_bar, dtype=np.float64)
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.z_bar.ndim != 1 or not np.isfinite(self.z_bar).all():
            raise ValueError("z_bar must be a finite vector")
        if not np.isfinite(self.mean_volume_mm3):
            raise ValueError("mean_volume_mm3 must be finite")


def _as_matrix(vectors) -> np.ndarray:
    vectors = list(vectors)
    if not vectors:
        raise errors.EmptyCohort("no latent vectors given")
    lens = {np.asarray(v).shape for v in vectors}
    if len(lens) != 1 or np.asarray(vectors[0]).ndim != 1:
        raise errors.LengthMismatch(f"inconsistent vector shapes: {sorted(lens)}")
    return np.asarray(vectors, dtype=np.float64)


def fit_normative(latents, masks=None) -> CohortStats:
    """Mean of healthy latent vectors; mean volume comes from `masks` when
    provided (0.0 otherwise, for latent-only use)."""
    z = _as_matrix(latents)
    mean_vol = 0.0
    if masks is not None:
        masks = list(masks)
        if len(masks) != z.shape[0]:
            raise errors.LengthMismatch(f"{len(masks)} masks vs {z.shape[0]} latents")
        mean_vol = float(np.mean([volume_mm3(m) for m in masks]))
    return CohortStats(z_bar=z.mean(axis=0), n=z.shape[0], mean_volume_mm3=mean_vol)


def zero_shot_score(latent, stats: CohortStats) -> float:
    """L2 distance to the healthy latent mean; larger = more abnormal."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape != stats.z_bar.shape:
        raise errors.LengthMismatch(f"latent {latent.shape} vs z_bar {stats.z_bar.shape}")
    return float(np.linalg.norm(latent - stats.z_bar))


def volume_baseline_score(mask: MaskVolume, stats: CohortStats) -> float:
    """Absolute deviation of the mask's physical volume from the healthy mean."""
    return abs(volume_mm3(mask) - stats.mean_volume_mm3)


# ---------------------------------------------------------------------------
# linear SVM (Pegasos-style projected subgradient)
# ---------------------------------------------------------------------------

@dataclass
class LinearClassifier:
    w: np.ndarray
    b: float
    lam: float
    feat_mean: np.ndarray
    feat_scale: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.feat_mean = np.asarray(self.feat_mean, dtype=np.float64)
        self.feat_scale = np.asarray(self.feat_scale, dtype=np.float64)
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not (
            np.isfinite(self.w).all()
            and np.isfinite(self.b)
            and np.isfinite(self.feat_mean).all()
            and np.isfinite(self.feat_scale).all()
        ):
            raise ValueError("classifier parameters must be finite")

    def save(self, path):
        optim.save_params(
            {
                "w": self.w,
                "b": np.array([self.b]),
                "lam": np.array([self.lam]),
                "feat_mean": self.feat_mean,
                "feat_scale": self.feat_scale,
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "LinearClassifier":
        d = optim.load_params(path)
        return cls(
            w=d["w"].astype(np.float64),
            b=float(d["b"][0]),
            lam=float(d["lam"][0]),
            feat_mean=d["feat_mean"].astype(np.float64),
            feat_scale=d["feat_scale"].astype(np.float64),
        )


def _standardizer(x: np.ndarray):
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)  # zero-variance dims pass through unscaled
    return mean, sd


def fit_linear_svm(
    features, labels, lam: float = 0.01, epochs: int = 20, seed: int = 0
) -> LinearClassifier:
    """Train a linear SVM by Pegasos subgradient descent.

    Features are standardized per-dimension on the training set (stored in
    the classifier). Step size 1/(lam*t) over epochs*n uniformly sampled
    points; returns the Polyak average of the iterates. epochs=0 yields the
    zero classifier.
    """
    x = _as_matrix(features)
    y = np.asarray(labels)
    if y.shape != (x.shape[0],):
        raise errors.LengthMismatch(f"{y.shape[0]} labels vs {x.shape[0]} features")
    classes = set(np.unique(y).tolist())
    if classes != {0, 1}:
        raise errors.SingleClass(f"need both labels 0 and 1, got {sorted(classes)}")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")

    mean, sd = _standardizer(x)
    xs = (x - mean) / sd
    ys = np.where(y == 1, 1.0, -1.0)
    n, d = xs.shape

    w = np.zeros(d)
    b = 0.0
    w_avg = np.zeros(d)
    b_avg = 0.0
    rng = np.random.default_rng(seed)
    total = epochs * n
    for t in range(1, total + 1):
        i = int(rng.integers(n))
        eta = 1.0 / (lam * t)
        margin = ys[i] * (xs[i] @ w + b)
        w *= 1.0 - eta * lam
        if margin < 1.0:
            w += eta * ys[i] * xs[i]
            b += eta * ys[i]
        # projection onto the ball ||w|| <= 1/sqrt(lam)
        norm = np.linalg.norm(w)
        radius = 1.0 / np.sqrt(lam)
        if norm > radius:
            w *= radius / norm
        w_avg += (w - w_avg) / t
        b_avg += (b - b_avg) / t
    return LinearClassifier(w=w_avg, b=b_avg, lam=lam, feat_mean=mean, feat_scale=sd)


def svm_decision(clf: LinearClassifier, feature) -> float:
    """Signed decision value; > 0 predicts class 1, raw value ranks for AUC."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != clf.w.shape:
        raise errors.LengthMismatch(f"feature {feature.shape} vs w {clf.w.shape}")
    xs = (feature - clf.feat_mean) / clf.feat_scale
    return float(clf.w @ xs + clf.b)


def svm_objective(clf: LinearClassifier, features, labels) -> float:
    """Regularized hinge objective lam/2 ||w||^2 + mean hinge, on raw features."""
    x = _as_matrix(features)
    ys = np.where(np.asarray(labels) == 1, 1.0, -1.0)
    xs = (x - clf.feat_mean) / clf.feat_scale
    margins = ys * (xs @ clf.w + clf.b)
    hinge = np.maximum(0.0, 1.0 - margins).mean()
    return float(0.5 * clf.lam * (clf.w @ clf.w) + hinge)


# ---------------------------------------------------------------------------
# ASM baseline: PCA over signed distance fields
# ---------------------------------------------------------------------------

@dataclass
class AsmModel:
    mean_sdf: np.ndarray
    components: np.ndarray  # (K, d), rows orthonormal
    dims: tuple
    spacing_mm: tuple

    def __post_init__(self):
        self.mean_sdf = np.asarray(self.mean_sdf, dtype=np.float64)
        self.components = np.asarray(self.components, dtype=np.float64)
        if self.components.ndim != 2 or self.components.shape[1] != self.mean_sdf.size:
            raise errors.ShapeMismatch("components must be (K, d) matching mean_sdf")
        gram = self.components @ self.components.T
        if not np.allclose(gram, np.eye(self.components.shape[0]), atol=1e-6):
            raise ValueError("components must be orthonormal within 1e-6")

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def save(self, path):
        optim.save_params(
            {
                "mean_sdf": self.mean_sdf,
                "components": self.components,
                "dims": np.array(self.dims, dtype=np.float64),
                "spacing": np.array(self.spacing_mm, dtype=np.float64),
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "AsmModel":
        d = optim.load_params(path)
        return cls(
            mean_sdf=d["mean_sdf"].astype(np.float64),
            components=d["components"].astype(np.float64),
            dims=tuple(int(v) for v in d["dims"]),
            spacing_mm=tuple(float(v) for v in d["spacing"]),
        )


def _flat_sdf(mask: MaskVolume) -> np.ndarray:
    return signed_distance(mask).data.ravel()


def asm_fit(masks, k: int) -> AsmModel:
    """PCA shape model: signed distance fields, centered, top-k directions.

    Uses the n x n Gram matrix (n masks, d voxels, n << d) so only an n x n
    eigendecomposition is needed.
    """
    masks = list(masks)
    if len(masks) < 2:
        raise errors.TooFewSamples("need at least 2 masks")
    dims = masks[0].dims
    if any(m.dims != dims for m in masks):
        raise errors.DimMismatch("all masks must share dims")
    n = len(masks)
    if k < 1 or k > n - 1:
        raise errors.RankDeficient(f"k={k} not in [1, n-1={n - 1}]")

    sdfs = np.stack([_flat_sdf(m) for m in masks])
    mean = sdfs.mean(axis=0)
    xc = sdfs - mean
    gram = xc @ xc.T
    evals, evecs = np.linalg.eigh(gram)  # ascending
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    tol = max(n, xc.shape[1]) * np.finfo(np.float64).eps * max(evals[0], 0.0)
    rank = int((evals > tol).sum())
    if k > rank:
        raise errors.RankDeficient(f"k={k} exceeds numerical rank {rank}")
    comps = (xc.T @ evecs[:, :k]) / np.sqrt(evals[:k])  # (d, k), unit columns
    return AsmModel(
        mean_sdf=mean, components=comps.T, dims=dims, spacing_mm=masks[0].spacing_mm
    )


def asm_project(model: AsmModel, mask: MaskVolume) -> np.ndarray:
    """Project a mask's centered signed distance field onto the model."""
    if mask.dims != model.dims:
        raise errors.DimMismatch(f"mask {mask.dims} vs model {model.dims}")
    return model.components @ (_flat_sdf(mask) - model.mean_sdf)
