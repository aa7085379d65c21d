"""
Gaussian data thinning of summary statistics.

A dataset is split into M independent replicates over the same SNPs. Fold m
carries estimates distributed N(eps_m * gamma_j, eps_m * Sigma_Xj) and the
folds sum back to the original estimates.
"""
from dataclasses import dataclass

import numpy as np

from pacsmr.errors import ValidationError


@dataclass(frozen=True)
class ThinningPlan:
    epsilons: tuple
    seed: int

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        if len(eps) < 2:
            raise ValidationError(f"thinning needs at least 2 folds, got {len(eps)}")
        if any(not (0.0 < e < 1.0) for e in eps):
            raise ValidationError(f"every fraction must lie in (0, 1), got {eps}")
        if abs(sum(eps) - 1.0) > 1e-12:
            raise ValidationError(f"fractions must sum to 1, got {sum(eps)!r}")
        if int(self.seed) < 0:
            raise ValidationError(f"seed must be non-negative, got {self.seed}")
        object.__setattr__(self, "epsilons", eps)
        object.__setattr__(self, "seed", int(self.seed))

    @classmethod
    def even(cls, m, seed):
        if m < 2:
            raise ValidationError(f"thinning needs at least 2 folds, got {m}")
        eps = [1.0 / m] * m
        eps[-1] = 1.0 - sum(eps[:-1])
        return cls(tuple(eps), seed)

    @property
    def m(self):
        return len(self.epsilons)


@dataclass(frozen=True)
class ThinnedReplicates:
    folds: tuple
    plan: ThinningPlan

    def __len__(self):
        return len(self.folds)

    def __getitem__(self, m):
        return self.folds[m]


def keyed_normals(seed, snp, fold, size):
    """Standard normals from a Philox stream keyed by (seed, snp, fold)."""
    bitgen = np.random.Philox(np.random.SeedSequence(seed, spawn_key=(snp, fold)))
    return np.random.Generator(bitgen).standard_normal(size)


def sub_seed(seed, *keys):
    """Deterministic child seed for (seed, keys), e.g. one per CV repeat."""
    state = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys)).generate_state(1)
    return int(state[0])


def _fold_noise(seed, fold, p, k):
    return np.stack([keyed_normals(seed, j, fold, k + 1) for j in range(p)])


def thin_multi_fold(ds, plan, zero_noise=False):
    """
    Split `ds` into plan.m independent folds by recursive peeling.

    With mass r left and current remainder R ~ N(r gamma, r Sigma), fold m is
    drawn as q R + N(0, q (1 - q) r Sigma), q = eps_m / r. The last fold is
    what remains. `zero_noise` drops the random part (test hook).
    """
    p, k = ds.p, ds.k
    chol_t = ds.correlation.cholesky.T
    rest_x = np.array(ds.gamma_hat)
    rest_y = np.array(ds.gamma_outcome)
    remaining = 1.0
    fold_values = []

    for m, eps in enumerate(plan.epsilons[:-1]):
        q = eps / remaining
        sd = np.sqrt(q * (1.0 - q) * remaining)
        if zero_noise:
            z = np.zeros((p, k + 1))
        else:
            z = _fold_noise(plan.seed, m, p, k)
        noise_x = sd * ds.se_x * (z[:, :k] @ chol_t)
        noise_y = sd * ds.se_y * z[:, k]
        fold_x = q * rest_x + noise_x
        fold_y = q * rest_y + noise_y
        rest_x = rest_x - fold_x
        rest_y = rest_y - fold_y
        remaining -= eps
        fold_values.append((fold_x, fold_y))
    fold_values.append((rest_x, rest_y))

    folds = tuple(
        ds.with_values(fx, ds.se_x * np.sqrt(eps), fy, ds.se_y * np.sqrt(eps))
        for (fx, fy), eps in zip(fold_values, plan.epsilons)
    )
    return ThinnedReplicates(folds, plan)


def thin_two_fold(ds, seed, zero_noise=False):
    """Even two-fold split: fold 1 = gamma/2 + N(0, Sigma_Xj/4), fold 2 = gamma - fold 1."""
    return thin_multi_fold(ds, ThinningPlan((0.5, 0.5), seed), zero_noise=zero_noise)


def training_complement(ds, reps, m):
    """T_m = D - D_m: estimates minus fold m, variances scaled by (1 - eps_m)."""
    if not 0 <= m < len(reps):
        raise ValidationError(f"fold index {m} out of range for {len(reps)} folds")
    fold = reps[m]
    scale = np.sqrt(1.0 - reps.plan.epsilons[m])
    return ds.with_values(ds.gamma_hat - fold.gamma_hat, ds.se_x * scale,
                          ds.gamma_outcome - fold.gamma_outcome, ds.se_y * scale)
