"""Gaussian-mixture model of the autoencoder latent space and mask repair.

The mixture is fit by EM with full covariances. Model size is chosen by an
AIC whose per-component parameter count is scaled by the covariance's
effective rank. Sampling from the fitted mixture, with rejection of anything
that decodes to an invalid mask, fills a bank of certified latent vectors.
Broken masks are repaired by moving their code toward the nearest bank
vector.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from . import autoencoder as ae_mod
from .anatomy import AnatomyConfig, delta
from .errors import FormatError, InputError, NumericalError, SamplingExhaustedError

DEFAULT_REG = 1e-6
DEFAULT_K = 5
MAGIC = b"GMB1"


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    reg: float = DEFAULT_REG
    # per-component (eigenvalues, eigenvectors) from the M-step; keeps floored directions exact
    factors: Optional[list] = field(default=None, repr=False, compare=False)

    def factor(self, j):
        if self.factors is not None:
            return self.factors[j]
        w, v = np.linalg.eigh(self.covariances[j])
        return w, v

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def d(self) -> int:
        return self.means.shape[1]


@dataclass
class LatentBank:
    vectors: np.ndarray
    provenance: list = field(default_factory=list)  # "sampled" | "training"
    acceptance_rate: float = float("nan")
    trials: int = 0

    def __len__(self) -> int:
        return len(self.vectors)


@dataclass
class FitResult:
    model: GmmModel
    nll: float
    history: list
    iterations: int


def _floor_eigs(cov, reg):
    """Nearest covariance (in likelihood) with every eigenvalue at least ``reg``."""
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    w = np.maximum(w, reg)
    return (v * w) @ v.T, (w, v)


def _log_gauss(points, mean, eig):
    w, v = eig
    if not np.all(w > 0):
        raise NumericalError("covariance is not positive definite")
    proj = (points - mean) @ v
    d = points.shape[1]
    return -0.5 * (d * math.log(2 * math.pi) + np.sum(np.log(w)) + np.sum(proj * proj / w, axis=1))


def _log_joint(model, points):
    cols = [math.log(w) + _log_gauss(points, m, model.factor(j)) if w > 0 else np.full(len(points), -np.inf)
            for j, (w, m) in enumerate(zip(model.weights, model.means))]
    return np.stack(cols, axis=1)


def gmm_nll(model: GmmModel, points) -> float:
    """Total negative log-likelihood, computed with log-sum-exp."""
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if x.shape[1] != model.d:
        raise InputError(f"points have dimension {x.shape[1]}, model has {model.d}")
    return float(-logsumexp(_log_joint(model, x), axis=1).sum())


def _kmeanspp(x, k, rng):
    centres = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centres[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=d2 / total)
        centres.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centres)


def _m_step(x, resp, reg, prev=None):
    n, d = x.shape
    nk = resp.sum(axis=0)
    k = resp.shape[1]
    weights = nk / n
    means = np.empty((k, d))
    covs = np.empty((k, d, d))
    factors = []
    for j in range(k):
        if nk[j] <= 0:
            # an empty component keeps its old parameters; with zero weight it cannot change the likelihood
            means[j] = prev.means[j] if prev is not None else x.mean(axis=0)
            covs[j] = prev.covariances[j] if prev is not None else np.eye(d) * max(reg, 1.0)
            factors.append(prev.factor(j) if prev is not None else (np.full(d, covs[j, 0, 0]), np.eye(d)))
            continue
        means[j] = resp[:, j] @ x / nk[j]
        diff = x - means[j]
        covs[j], fac = _floor_eigs((resp[:, j, None] * diff).T @ diff / nk[j], reg)
        factors.append(fac)
    return GmmModel(weights, means, covs, reg, factors)


def fit_gmm_em(points, k: int, reg: float = DEFAULT_REG, seed: int = 0, max_iter: int = 500,
               tol: float = 1e-8) -> FitResult:
    """EM from a k-means++ hard assignment.

    Stops when the mean per-point NLL improves by less than ``tol``.
    ``history[t]`` is the total NLL after ``t`` M-steps.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise InputError("points must be an (n, d) array with d >= 1")
    n = len(x)
    if n <= k:
        raise InputError(f"need more points than components (n={n}, k={k})")
    rng = np.random.default_rng(seed)
    centres = _kmeanspp(x, k, rng)
    assign = np.argmin(((x[:, None, :] - centres[None]) ** 2).sum(axis=2), axis=1)
    resp = np.zeros((n, k))
    resp[np.arange(n), assign] = 1.0
    model = _m_step(x, resp, reg)
    history = []
    it = 0
    for it in range(max_iter + 1):
        logp = _log_joint(model, x)
        norm = logsumexp(logp, axis=1)
        nll = float(-norm.sum())
        if not np.isfinite(nll):
            raise NumericalError(f"NLL became {nll} at EM iteration {it}")
        history.append(nll)
        if it == max_iter or (it > 0 and (history[-2] - nll) / n < tol):
            break
        model = _m_step(x, np.exp(logp - norm[:, None]), reg, prev=model)
    return FitResult(model, history[-1], history, it)


# -- model selection ----------------------------------------------------------

def effective_rank(cov, tol: float = 1e-10, max_iter: int = 20000) -> float:
    """Trace over spectral norm, the spectral norm taken by power iteration."""
    s = np.asarray(cov, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise InputError("covariance must be square")
    if not np.allclose(s, s.T, rtol=1e-10, atol=1e-14):
        raise InputError("covariance must be symmetric")
    try:
        linalg.cholesky(s, lower=True)
    except linalg.LinAlgError as exc:
        raise InputError("covariance must be positive definite") from exc
    d = s.shape[0]
    v = np.full(d, 1.0 / math.sqrt(d))
    for _ in range(max_iter):
        w = s @ v
        w /= np.linalg.norm(w)
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    sigma_max = float(v @ s @ v)
    return float(min(max(np.trace(s) / sigma_max, 1.0), d))


def parameter_count(model: GmmModel, adjusted: bool = True) -> float:
    """Free parameters; with ``adjusted`` each component's share is scaled by r_j / d."""
    d = model.d
    per = d + d * (d + 1) / 2
    if not adjusted:
        return model.k * per + (model.k - 1)
    return sum(effective_rank(c) / d * per for c in model.covariances) + (model.k - 1)


def adjusted_aic(model: GmmModel, points) -> float:
    return 2.0 * parameter_count(model, adjusted=True) + 2.0 * gmm_nll(model, points)


@dataclass
class Selection:
    chosen_k: int
    k_values: list
    heldout_nll: dict  # k -> per-fold held-out NLL
    aic: dict  # k -> per-fold adjusted AIC, likelihood term on the held-out fold
    aic_train: dict  # k -> per-fold adjusted AIC, likelihood term on the training folds

    def mean_aic(self, k) -> float:
        return float(np.mean(self.aic[k]))

    def mean_nll(self, k) -> float:
        return float(np.mean(self.heldout_nll[k]))

    def rows(self) -> list[dict]:
        return [{"k": k, "heldout_nll": self.heldout_nll[k], "adjusted_aic": self.aic[k],
                 "adjusted_aic_train": self.aic_train[k],
                 "mean_heldout_nll": self.mean_nll(k), "mean_adjusted_aic": self.mean_aic(k),
                 "chosen": k == self.chosen_k} for k in self.k_values]


def select_model(points, k_range=range(1, 9), folds: int = 10, seed: int = 0,
                 reg: float = DEFAULT_REG, max_iter: int = 500) -> Selection:
    """K-fold cross-validation over ``k_range``; picks the k with the lowest mean adjusted AIC.

    Each fold's adjusted AIC pairs the model's penalty with its NLL on the
    held-out fold. The in-sample variant is reported too but not used: the
    rank-scaled penalty is too light to stop spare components fitting noise.
    """
    x = np.asarray(points, dtype=np.float64)
    ks = sorted(int(k) for k in k_range)
    if folds < 2:
        raise InputError("need at least 2 folds")
    n = len(x)
    if n < folds or n - int(math.ceil(n / folds)) <= max(ks):
        raise InputError(f"{n} points are too few for {folds} folds and k up to {max(ks)}")
    rng = np.random.default_rng(seed)
    parts = np.array_split(rng.permutation(n), folds)
    nll_tab = {k: [] for k in ks}
    aic_tab = {k: [] for k in ks}
    train_tab = {k: [] for k in ks}
    for f, test in enumerate(parts):
        train = np.concatenate([p for i, p in enumerate(parts) if i != f])
        for k in ks:
            fit = fit_gmm_em(x[train], k, reg=reg, seed=seed + 7919 * f + k, max_iter=max_iter)
            held = gmm_nll(fit.model, x[test])
            penalty = 2.0 * parameter_count(fit.model)
            nll_tab[k].append(held)
            aic_tab[k].append(penalty + 2.0 * held)
            train_tab[k].append(penalty + 2.0 * fit.nll)
    means = [np.mean(aic_tab[k]) for k in ks]
    chosen = ks[int(np.argmin(means))]  # argmin keeps the first, i.e. smaller k, on ties
    return Selection(chosen, ks, nll_tab, aic_tab, train_tab)


# -- bank ---------------------------------------------------------------------

def sample_gmm(model: GmmModel, n: int, rng: np.random.Generator) -> np.ndarray:
    comp = rng.choice(model.k, size=n, p=model.weights / model.weights.sum())
    eps = rng.standard_normal((n, model.d))
    out = np.empty((n, model.d))
    for j in range(model.k):
        sel = comp == j
        if sel.any():
            chol = linalg.cholesky(model.covariances[j], lower=True)
            out[sel] = model.means[j] + eps[sel] @ chol.T
    return out


def _validator(cfg, validator):
    if validator is not None:
        return validator
    return lambda m: delta(m, cfg).passed


def build_latent_bank(model: GmmModel, ae: ae_mod.AeModel, cfg: AnatomyConfig = AnatomyConfig(),
                      n_target: int = 10000, max_trials: Optional[int] = None, seed: int = 0,
                      training_latents=None, validator: Optional[Callable] = None,
                      batch: int = 256) -> LatentBank:
    """Rejection-sample ``n_target`` latent vectors whose decodings pass the anatomy check.

    Training encodings that decode to valid masks are added on top.
    Raises :class:`SamplingExhaustedError` (with ``partial``) when
    ``max_trials`` samples are spent first.
    """
    check = _validator(cfg, validator)
    if max_trials is None:
        max_trials = 20 * n_target
    rng = np.random.default_rng(seed)
    kept, trials = [], 0
    while len(kept) < n_target and trials < max_trials:
        m = min(batch, max_trials - trials)
        z = sample_gmm(model, m, rng)
        _, masks = ae_mod.decode(ae, z)
        for zi, mi in zip(z, masks):
            trials += 1
            if check(mi):
                kept.append(zi)
                if len(kept) == n_target:
                    break
    rate = len(kept) / trials if trials else float("nan")
    prov = ["sampled"] * len(kept)
    if training_latents is not None and len(training_latents):
        tl = np.asarray(training_latents, dtype=np.float64)
        _, masks = ae_mod.decode(ae, tl)
        for zi, mi in zip(tl, masks):
            if check(mi):
                kept.append(zi)
                prov.append("training")
    bank = LatentBank(np.array(kept).reshape(-1, model.d), prov, rate, trials)
    if prov.count("sampled") < n_target:
        raise SamplingExhaustedError(
            f"only {prov.count('sampled')} of {n_target} samples accepted after {trials} trials", partial=bank)
    return bank


def nearest_neighbour(bank: LatentBank, z) -> tuple[int, float]:
    """Exhaustive scan for the closest bank vector in squared Euclidean distance."""
    if len(bank) == 0:
        raise InputError("latent bank is empty")
    d2 = np.sum((bank.vectors - np.asarray(z)[None, :]) ** 2, axis=1)
    i = int(np.argmin(d2))
    return i, float(d2[i])


@dataclass
class RepairReport:
    action: str  # "untouched" | "reconstructed" | "projected"
    alpha: Optional[float] = None
    neighbour: Optional[int] = None
    neighbour_dist2: Optional[float] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def repair_mask(mask, ae: ae_mod.AeModel, bank: LatentBank, cfg: AnatomyConfig = AnatomyConfig(),
                alpha_steps: int = 32, validator: Optional[Callable] = None):
    """Return ``(mask, RepairReport)`` with a mask that passes the anatomy check.

    Valid input is returned untouched. Otherwise the autoencoder reconstruction
    is tried, then codes on the segment from the mask's code to its nearest
    certified bank vector, smallest step first. The endpoint is the bank
    vector itself, so the search always succeeds.
    """
    if len(bank) == 0:
        raise InputError("latent bank is empty")
    if alpha_steps < 1:
        raise InputError("alpha_steps must be >= 1")
    check = _validator(cfg, validator)
    m = np.asarray(mask).astype(np.uint8)
    if check(m):
        return m, RepairReport("untouched")
    z = ae_mod.encode(ae, m)
    _, rec = ae_mod.decode(ae, z)
    if check(rec):
        return rec, RepairReport("reconstructed", alpha=0.0)
    nn, dist2 = nearest_neighbour(bank, z)
    target = bank.vectors[nn]
    alphas = np.arange(1, alpha_steps + 1) / alpha_steps
    codes = z[None, :] + alphas[:, None] * (target - z)[None, :]
    codes[-1] = target  # exact endpoint; z + (t - z) need not round back to t
    _, masks = ae_mod.decode(ae, codes)
    for a, cand in zip(alphas, masks):
        if a == 1.0 or check(cand):
            return cand, RepairReport("projected", alpha=float(a), neighbour=nn, neighbour_dist2=dist2)
    raise AssertionError("unreachable: alpha=1 is always accepted")


# -- file format --------------------------------------------------------------

def save_gmm_bank(path, model: GmmModel, bank: Optional[LatentBank] = None) -> None:
    """GMB1: magic, <k d n>, reg, acceptance rate, trials, then float64 arrays and provenance bytes."""
    vecs = bank.vectors if bank is not None else np.zeros((0, model.d))
    prov = bank.provenance if bank is not None else []
    rate = bank.acceptance_rate if bank is not None else float("nan")
    trials = bank.trials if bank is not None else 0
    parts = [MAGIC, struct.pack("<IIIddQ", model.k, model.d, len(vecs), model.reg, rate, trials)]
    for arr in (model.weights, model.means, model.covariances, vecs):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    parts.append(bytes(1 if p == "training" else 0 for p in prov))
    Path(path).write_bytes(b"".join(parts))


def load_gmm_bank(path) -> tuple[GmmModel, LatentBank]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not a GMB1 file")
    head = struct.Struct("<IIIddQ")
    try:
        k, d, n, reg, rate, trials = head.unpack_from(data, 4)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    off = 4 + head.size
    sizes = [k, k * d, k * d * d, n * d]
    need = off + 8 * sum(sizes) + n
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(data)}")
    arrays = []
    for s in sizes:
        arrays.append(np.frombuffer(data, dtype="<f8", count=s, offset=off).astype(np.float64))
        off += 8 * s
    prov = ["training" if b else "sampled" for b in data[off:off + n]]
    model = GmmModel(arrays[0], arrays[1].reshape(k, d), arrays[2].reshape(k, d, d), reg)
    bank = LatentBank(arrays[3].reshape(n, d), prov, rate, trials)
    return model, bank
