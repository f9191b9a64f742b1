"""Evaluation protocol: AUC, balanced accuracy, bootstrap resampling,
stratified folds, 2D PCA of latents, and latent-space interpolation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import errors
from .vae import VaeParams, decode
from .volume import MaskVolume


def _check_two_class(labels: np.ndarray):
    classes = set(np.unique(labels).tolist())
    if classes != {0, 1}:
        raise errors.SingleClass(f"need both labels 0 and 1, got {sorted(classes)}")


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with 0.5 credit for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise errors.LengthMismatch(f"scores {s.shape} vs labels {y.shape}")
    _check_two_class(y)
    ranks = rankdata(s)  # midranks handle ties with 0.5 credit
    n_pos = int((y == 1).sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def balanced_accuracy(predictions, labels) -> float:
    """(sensitivity + specificity) / 2 for binary predictions."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise errors.LengthMismatch(f"predictions {p.shape} vs labels {y.shape}")
    _check_two_class(y)
    sens = float(np.mean(p[y == 1] == 1))
    spec = float(np.mean(p[y == 0] == 0))
    return 0.5 * (sens + spec)


def bootstrap(metric, scores, labels, reps: int = 10000, seed: int = 0):
    """(mean, sd) of `metric` over `reps` resamples with replacement.

    Resamples containing a single class are redrawn (up to 100 retries per
    repetition). Deterministic in seed.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise errors.LengthMismatch(f"scores {s.shape} vs labels {y.shape}")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    n = s.size
    rng = np.random.default_rng(seed)
    vals = np.empty(reps)
    for r in range(reps):
        for _ in range(100):
            idx = rng.integers(n, size=n)
            yr = y[idx]
            if yr.min() != yr.max():
                break
        else:
            raise errors.ResampleExhausted(f"single-class resamples at rep {r}")
        vals[r] = metric(s[idx], yr)
    mean = float(vals.mean())
    sd = float(vals.std(ddof=1)) if reps > 1 else 0.0
    return mean, sd


@dataclass
class FoldPlan:
    k: int
    assignments: np.ndarray  # fold index per sample

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        if self.k < 1:
            raise errors.InvalidK("k must be >= 1")
        if self.assignments.min() < 0 or self.assignments.max() >= self.k:
            raise errors.InvalidK("assignments out of range")

    @property
    def leave_one_out(self) -> bool:
        return self.k == self.assignments.size

    def fold_indices(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == f)


def stratified_kfold(labels, k: int, seed: int = 0) -> FoldPlan:
    """Shuffle within each class, deal members round-robin to k folds.

    k == n gives a leave-one-out plan. Per-fold class counts differ by at
    most 1 from perfect stratification.
    """
    y = np.asarray(labels)
    n = y.size
    if k < 2 or k > n:
        raise errors.InvalidK(f"k={k} must be in [2, n={n}]")
    rng = np.random.default_rng(seed)
    assign = np.empty(n, dtype=np.int64)
    pos = 0
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        rng.shuffle(idx)
        for j, i in enumerate(idx):
            assign[i] = (pos + j) % k
        pos += idx.size
    return FoldPlan(k=k, assignments=assign)


@dataclass
class EvalReport:
    method: str
    auc_mean: float
    auc_sd: float
    balacc_mean: float
    balacc_sd: float
    n_boot: int
    scores: np.ndarray = field(default_factory=lambda: np.empty(0))
    labels: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        for v in (self.auc_mean, self.auc_sd, self.balacc_mean, self.balacc_sd):
            if not np.isfinite(v):
                raise ValueError("report metrics must be finite")
        if not (0 <= self.auc_mean <= 1 and 0 <= self.balacc_mean <= 1):
            raise ValueError("metrics must lie in [0, 1]")
        if self.n_boot < 1:
            raise ValueError("n_boot must be >= 1")

    def summary_row(self) -> str:
        return (
            f"{self.method},{self.n_boot},{self.auc_mean:.6f},{self.auc_sd:.6f},"
            f"{self.balacc_mean:.6f},{self.balacc_sd:.6f}"
        )


REPORT_HEADER = "method,n_boot,auc_mean,auc_sd,balacc_mean,balacc_sd"


def report_from_scores(
    method: str, scores, labels, reps: int = 10000, seed: int = 0, threshold: float = 0.0
) -> EvalReport:
    """Bootstrap AUC and balanced accuracy for a score/label set."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    auc_mean, auc_sd = bootstrap(auc, s, y, reps, seed)
    ba_metric = lambda sc, yy: balanced_accuracy((sc > threshold).astype(int), yy)
    ba_mean, ba_sd = bootstrap(ba_metric, s, y, reps, seed + 1)
    return EvalReport(
        method=method,
        auc_mean=auc_mean,
        auc_sd=auc_sd,
        balacc_mean=ba_mean,
        balacc_sd=ba_sd,
        n_boot=reps,
        scores=s,
        labels=np.asarray(y, dtype=np.int64),
    )


def crossval_fewshot(
    latents,
    labels,
    plan: FoldPlan,
    lam: float = 0.01,
    epochs: int = 20,
    seed: int = 0,
    reps: int = 10000,
):
    """Few-shot cross-validation with pooled held-out decisions.

    For a k-fold plan with k < n, each fold in turn is the (small) training
    set and the remaining samples are tested. Leave-one-out inverts this:
    train on n-1, test on the held-out sample. Decisions are pooled across
    folds into one report.
    """
    from .detect import fit_linear_svm, svm_decision

    x = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels)
    if plan.assignments.size != x.shape[0]:
        raise errors.LengthMismatch("plan does not cover all samples")
    pooled_scores = np.zeros(x.shape[0])
    pooled_counts = np.zeros(x.shape[0])
    for f in range(plan.k):
        fold = plan.fold_indices(f)
        rest = np.flatnonzero(plan.assignments != f)
        train_idx, test_idx = (rest, fold) if plan.leave_one_out else (fold, rest)
        clf = fit_linear_svm(
            x[train_idx], y[train_idx], lam=lam, epochs=epochs, seed=seed + f
        )
        for i in test_idx:
            pooled_scores[i] += svm_decision(clf, x[i])
            pooled_counts[i] += 1
    covered = pooled_counts > 0
    pooled_scores[covered] /= pooled_counts[covered]
    return report_from_scores(
        f"fewshot_k{plan.k}", pooled_scores[covered], y[covered], reps=reps, seed=seed
    )


def pca_2d(latents):
    """Top-2 principal projections of centered latents.

    Sign convention: each direction's first nonzero loading is positive.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise errors.TooFewSamples("need at least 3 latent vectors")
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    dirs = vt[:2]
    if dirs.shape[0] < 2:
        dirs = np.vstack([dirs, np.zeros((2 - dirs.shape[0], x.shape[1]))])
    fixed = []
    for d in dirs:
        nz = np.flatnonzero(np.abs(d) > 1e-12)
        if nz.size and d[nz[0]] < 0:
            d = -d
        fixed.append(d)
    proj = xc @ np.asarray(fixed).T
    return [tuple(row) for row in proj]


def interpolate_groups(params: VaeParams, latents_normal, latents_abnormal, ts=None):
    """Decode points on the line (1-t)*z_normal + t*z_abnormal.

    z_normal and z_abnormal are group means of latent mu vectors; each
    decoded probability field is binarized at 0.5. Returns a list of
    (t, MaskVolume) pairs.
    """
    if ts is None:
        ts = (-0.25, 0.0, 0.25, 0.5, 0.75, 1.0, 1.25)
    zn = np.asarray(latents_normal, dtype=np.float64)
    za = np.asarray(latents_abnormal, dtype=np.float64)
    if zn.size == 0 or za.size == 0:
        raise errors.EmptyGroup("both groups must be non-empty")
    z0 = zn.mean(axis=0)
    z1 = za.mean(axis=0)
    out = []
    for t in ts:
        z = (1.0 - t) * z0 + t * z1
        probs = decode(params, z)
        mask = MaskVolume(
            data=(probs.data > 0.5).astype(np.uint8), spacing_mm=probs.spacing_mm
        )
        out.append((float(t), mask))
    return out


def write_pgm_midslice(mask: MaskVolume, path) -> None:
    """Binary (P5) PGM render of the middle axial slice, foreground = 255."""
    sl = (mask.data[:, :, mask.dims[2] // 2].T * 255).astype(np.uint8)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{sl.shape[1]} {sl.shape[0]}\n255\n".encode("ascii"))
            fh.write(sl.tobytes())
    except OSError as e:
        raise errors.IoFailure(str(e)) from e
