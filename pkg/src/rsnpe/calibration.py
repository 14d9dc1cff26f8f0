"""Simulation-based calibration of a posterior sampler.

A sampler is anything with ``sample(h, n, seed) -> (n, 3) array``; a trained
:class:`rsnpe.flow.FlowModel` qualifies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.special import kolmogorov
from sklearn.model_selection import StratifiedKFold
from sklearn.neural_network import MLPClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .datagen import PARAM_NAMES, PriorSpec, sample_prior

MIN_RANKS = 20


@dataclass
class RankRecord:
    ranks: np.ndarray  # (n_test, dim) integers in [0, L]
    L: int

    def normalized(self, seed: int) -> np.ndarray:
        """Ranks jittered by U[0, 1) and divided by L + 1, so they are exactly U[0, 1) when calibrated."""
        rng = np.random.default_rng(seed)
        return (self.ranks + rng.uniform(0.0, 1.0, self.ranks.shape)) / (self.L + 1)


@dataclass
class CalibrationReport:
    ks_p: list
    c2st_rank: list
    c2st_dap: list
    n_test: int
    L: int
    seed: int

    def to_json(self) -> str:
        return json.dumps({"parameters": list(PARAM_NAMES), **asdict(self)}, indent=2)


def sbc_ranks(model, test_theta, test_h, L: int, seed: int) -> RankRecord:
    """Rank of each ground-truth parameter among ``L`` posterior samples.

    Samples equal to the truth count as "below" with probability 1/2.
    """
    test_theta = np.atleast_2d(np.asarray(test_theta, dtype=float))
    test_h = np.asarray(test_h, dtype=float).ravel()
    if len(test_h) == 0:
        raise ValueError("empty test set")
    if len(test_h) != len(test_theta):
        raise ValueError("test_theta and test_h lengths differ")
    if L < 1:
        raise ValueError("L must be >= 1")
    seeds = np.random.SeedSequence(seed).generate_state(len(test_h) + 1, np.uint64)
    coin = np.random.default_rng(seeds[-1])
    ranks = np.empty(test_theta.shape, dtype=np.int64)
    for i, (theta_star, h) in enumerate(zip(test_theta, test_h)):
        draws = np.asarray(model.sample(h, L, int(seeds[i])))
        below = (draws < theta_star).sum(axis=0)
        ties = (draws == theta_star).sum(axis=0)
        ranks[i] = below + coin.binomial(ties, 0.5)
    return RankRecord(ranks, L)


def ks_statistic(u) -> float:
    """Two-sided one-sample KS distance between the empirical CDF of ``u`` and U[0, 1]."""
    u = np.sort(np.asarray(u, dtype=float))
    n = len(u)
    cdf = np.clip(u, 0.0, 1.0)
    d_plus = np.max(np.arange(1, n + 1) / n - cdf)
    d_minus = np.max(cdf - np.arange(n) / n)
    return float(max(d_plus, d_minus))


def ks_pvalue(u) -> float:
    """Asymptotic Kolmogorov p-value of the KS distance against U[0, 1]."""
    n = len(u)
    return float(kolmogorov(np.sqrt(n) * ks_statistic(u)))


def ks_uniformity(ranks: RankRecord, seed: int = 0) -> np.ndarray:
    """KS p-value per dimension for jittered, normalised ranks."""
    if ranks.ranks.shape[0] < MIN_RANKS:
        raise ValueError(f"need at least {MIN_RANKS} ranks, got {ranks.ranks.shape[0]}")
    u = ranks.normalized(seed)
    return np.array([ks_pvalue(u[:, d]) for d in range(u.shape[1])])


def c2st(samples_a, samples_b, seed: int = 0, n_folds: int = 5) -> float:
    """Classifier two-sample test: mean held-out accuracy of a small MLP.

    Labels are 0 for ``samples_a`` and 1 for ``samples_b``; features are
    z-scored inside each fold. 0.5 means indistinguishable.
    """
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both sample sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    X = np.vstack([a, b])
    y = np.concatenate([np.zeros(len(a)), np.ones(len(b))])
    folds = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed % 2**32)
    scores = []
    for k, (tr, te) in enumerate(folds.split(X, y)):
        clf = make_pipeline(
            StandardScaler(),
            MLPClassifier(
                hidden_layer_sizes=(32,),
                max_iter=300,
                early_stopping=True,
                n_iter_no_change=10,
                random_state=(seed + k) % 2**32,
            ),
        )
        clf.fit(X[tr], y[tr])
        scores.append(clf.score(X[te], y[te]))
    return float(np.mean(scores))


def c2st_ranks(ranks: RankRecord, seed: int = 0) -> np.ndarray:
    """Per-dimension C2ST between jittered normalised ranks and fresh U[0, 1] draws."""
    u = ranks.normalized(seed)
    ref = np.random.default_rng(seed + 1).uniform(size=u.shape)
    return np.array([c2st(u[:, d], ref[:, d], seed=seed) for d in range(u.shape[1])])


def data_averaged_posterior(model, test_h, L: int, seed: int) -> np.ndarray:
    seeds = np.random.SeedSequence(seed).generate_state(len(test_h), np.uint64)
    return np.vstack([np.asarray(model.sample(h, L, int(s))) for h, s in zip(np.ravel(test_h), seeds)])


def c2st_dap(model, test_h, L: int, prior: PriorSpec, seed: int, max_samples: int | None = 20_000) -> np.ndarray:
    """Per-dimension C2ST between the pooled (data-averaged) posterior and the prior."""
    pooled = data_averaged_posterior(model, test_h, L, seed)
    if max_samples is not None and len(pooled) > max_samples:
        keep = np.random.default_rng(seed + 2).choice(len(pooled), max_samples, replace=False)
        pooled = pooled[np.sort(keep)]
    prior_draws = sample_prior(len(pooled), prior, seed + 3)
    return np.array([c2st(pooled[:, d], prior_draws[:, d], seed=seed) for d in range(pooled.shape[1])])


def calibrate(model, test_theta, test_h, L: int, prior: PriorSpec, seed: int):
    """Run SBC ranks, KS tests and both C2ST variants. Returns (report, ranks)."""
    ranks = sbc_ranks(model, test_theta, test_h, L, seed)
    report = CalibrationReport(
        ks_p=ks_uniformity(ranks, seed).tolist(),
        c2st_rank=c2st_ranks(ranks, seed).tolist(),
        c2st_dap=c2st_dap(model, test_h, L, prior, seed).tolist(),
        n_test=len(np.ravel(test_h)),
        L=L,
        seed=seed,
    )
    return report, ranks


def save_rank_histograms(path, ranks: RankRecord, n_bins: int | None = None) -> None:
    """CSV with one row per rank bin and one count column per parameter."""
    n_bins = n_bins or min(ranks.L + 1, 20)
    edges = np.linspace(0, ranks.L + 1, n_bins + 1)
    counts = [np.histogram(ranks.ranks[:, d], bins=edges)[0] for d in range(ranks.ranks.shape[1])]
    lines = ["bin_lo,bin_hi," + ",".join(PARAM_NAMES[: len(counts)])]
    for b in range(n_bins):
        lines.append(f"{edges[b]!r},{edges[b + 1]!r}," + ",".join(str(int(c[b])) for c in counts))
    Path(path).write_text("\n".join(lines) + "\n")


def save_ranks(path, ranks: RankRecord) -> None:
    lines = [",".join(PARAM_NAMES[: ranks.ranks.shape[1]])]
    lines += [",".join(str(int(v)) for v in row) for row in ranks.ranks]
    Path(path).write_text("\n".join(lines) + "\n")
