"""Dataset ingestion and synthetic instance generators."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .apps.dml import DmlProblem
from .apps.lasso import LassoProblem
from .exceptions import DataFormatError, UsageError
from .scheduler import CorrelationIndex, masked_spectral_radius


def ingest_dense_csv(path, header: bool = False) -> np.ndarray:
    """One sample per line, comma-separated floats."""
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, fields in enumerate(csv.reader(fh), start=1):
            if header and lineno == 1:
                continue
            if not fields or all(not f.strip() for f in fields):
                continue
            try:
                values = [float(f) for f in fields]
            except ValueError:
                bad = next(f for f in fields if not _is_float(f))
                raise DataFormatError(f"non-numeric field {bad!r}", lineno) from None
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DataFormatError(f"expected {width} fields, found {len(values)}", lineno)
            rows.append(values)
    if not rows:
        raise DataFormatError("no data rows", 1)
    return np.array(rows, dtype=np.float64)


def _is_float(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


@dataclass(frozen=True)
class LassoScaling:
    """Factors applied at ingestion: ``X_used = X / col_norms``, ``y_used = (y - y_mean) / y_sd``."""

    col_norms: np.ndarray
    y_mean: float
    y_sd: float


def standardize_lasso(X, y) -> Tuple[np.ndarray, np.ndarray, LassoScaling]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    norms = np.linalg.norm(X, axis=0)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise UsageError(f"column {int(zero[0])} is all zeros and cannot be normalized")
    mean = float(y.mean())
    sd = float(y.std()) or 1.0
    return X / norms, (y - mean) / sd, LassoScaling(norms, mean, sd)


def load_lasso_csv(path, lam: float, header: bool = False,
                   target: int = -1) -> Tuple[LassoProblem, LassoScaling]:
    """Read a dense CSV whose ``target`` column is y; the remaining columns form X."""
    data = ingest_dense_csv(path, header=header)
    if data.shape[1] < 2:
        raise UsageError("a Lasso CSV needs at least one feature column and a target column")
    y = data[:, target]
    X = np.delete(data, target % data.shape[1], axis=1)
    Xn, yn, scaling = standardize_lasso(X, y)
    return LassoProblem(Xn, yn, lam), scaling


def ingest_pairs(path, dim: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Pairs file: ``S|D`` label then the 2*D coordinates of the two points.

    Returns ``(similar, dissimilar)`` arrays of shape ``(m, 2, D)``.
    """
    similar, dissimilar = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            label = parts[0].upper()
            if label not in ("S", "D"):
                raise DataFormatError(f"label must be S or D, found {parts[0]!r}", lineno)
            try:
                values = [float(v) for v in parts[1:]]
            except ValueError:
                bad = next(v for v in parts[1:] if not _is_float(v))
                raise DataFormatError(f"non-numeric field {bad!r}", lineno) from None
            if dim is None:
                if not values or len(values) % 2:
                    raise DataFormatError("expected an even, non-zero number of coordinates", lineno)
                dim = len(values) // 2
            if len(values) != 2 * dim:
                raise DataFormatError(f"expected {2 * dim} coordinates, found {len(values)}", lineno)
            pair = np.array(values).reshape(2, dim)
            (similar if label == "S" else dissimilar).append(pair)
    dim = dim or 0
    return (np.array(similar).reshape(-1, 2, dim), np.array(dissimilar).reshape(-1, 2, dim))


def write_pairs(path, similar, dissimilar) -> None:
    with open(path, "w") as fh:
        for label, pairs in (("S", similar), ("D", dissimilar)):
            for pair in np.asarray(pairs):
                fh.write(label + " " + " ".join(repr(float(v)) for v in pair.ravel()) + "\n")


# ------------------------------------------------------------------ synthetic
@dataclass(frozen=True)
class SyntheticLassoSpec:
    n: int = 1000
    d: int = 500
    sparsity: int = 20
    block_size: int = 10
    block_corr: float = 0.9
    noise_sd: float = 0.1
    seed: int = 0
    lam: Optional[float] = None
    lam_ratio: float = 0.1
    theta: float = 0.5

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise UsageError("n and d must be positive")
        if not 0 <= self.sparsity <= self.d:
            raise UsageError("sparsity must lie in [0, d]")
        if self.block_size < 1:
            raise UsageError("block_size must be positive")
        if not 0 <= self.block_corr <= 1:
            raise UsageError("block_corr must lie in [0, 1]")
        if self.noise_sd < 0:
            raise UsageError("noise_sd must be non-negative")


@dataclass
class SyntheticLasso:
    problem: LassoProblem
    beta_true: np.ndarray
    rho: float
    spec: SyntheticLassoSpec
    info: Dict[str, float] = field(default_factory=dict)


def gen_lasso(spec: SyntheticLassoSpec) -> SyntheticLasso:
    """Block-correlated design: each column is ``sqrt(r) z_block + sqrt(1 - r) e_j``.

    Columns are centered and scaled to unit norm; ``y = X beta* + noise`` is
    then standardized and ``beta_true`` is expressed on the standardized scale.
    """
    rng = np.random.default_rng(spec.seed)
    n, d, r = spec.n, spec.d, spec.block_corr
    blocks = np.arange(d) // spec.block_size
    Z = rng.standard_normal((n, int(blocks.max()) + 1))
    E = rng.standard_normal((n, d))
    X = np.sqrt(r) * Z[:, blocks] + np.sqrt(1.0 - r) * E
    X -= X.mean(axis=0)
    X /= np.linalg.norm(X, axis=0)
    beta = np.zeros(d)
    support = rng.choice(d, spec.sparsity, replace=False)
    beta[support] = rng.choice([-1.0, 1.0], spec.sparsity) * rng.uniform(1.0, 3.0, spec.sparsity)
    y = X @ beta + spec.noise_sd * rng.standard_normal(n)
    y_mean, y_sd = float(y.mean()), float(y.std()) or 1.0
    y = (y - y_mean) / y_sd
    beta /= y_sd
    lam = spec.lam if spec.lam is not None else spec.lam_ratio * float(np.max(np.abs(X.T @ y)))
    problem = LassoProblem(X, y, lam)
    rho = masked_spectral_radius(CorrelationIndex(X, normalize=False), spec.theta) \
        if d <= 2000 else float("nan")
    return SyntheticLasso(problem, beta, rho, spec, {"lam": lam, "y_mean": y_mean, "y_sd": y_sd})


@dataclass(frozen=True)
class SyntheticDmlSpec:
    dim: int = 32
    rank: int = 16
    n_pairs: int = 5000
    n_classes: int = 8
    informative: int = 8
    class_sep: float = 3.0
    lam: float = 1.0
    C: int = 10
    eta0: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.rank < 1 or self.n_pairs < 2:
            raise UsageError("dim, rank must be positive and n_pairs >= 2")
        if not 1 <= self.informative <= self.dim:
            raise UsageError("informative must lie in [1, dim]")
        if self.n_classes < 2:
            raise UsageError("need at least two classes")


def gen_dml(spec: SyntheticDmlSpec) -> DmlProblem:
    """Gaussian classes separated in the first ``informative`` coordinates.

    Similar pairs share a class, dissimilar pairs do not. Points are rescaled
    so that the mean squared distance of dissimilar pairs is 2.
    """
    rng = np.random.default_rng(spec.seed)
    means = np.zeros((spec.n_classes, spec.dim))
    means[:, : spec.informative] = spec.class_sep * rng.standard_normal((spec.n_classes, spec.informative))
    n_sim = spec.n_pairs // 2
    n_dis = spec.n_pairs - n_sim

    def draw(classes):
        return means[classes] + rng.standard_normal((len(classes), spec.dim))

    c = rng.integers(0, spec.n_classes, n_sim)
    similar = np.stack([draw(c), draw(c)], axis=1)
    a = rng.integers(0, spec.n_classes, n_dis)
    b = (a + rng.integers(1, spec.n_classes, n_dis)) % spec.n_classes
    dissimilar = np.stack([draw(a), draw(b)], axis=1)
    diff = dissimilar[:, 0] - dissimilar[:, 1]
    scale = np.sqrt(2.0 / np.mean(np.einsum("ij,ij->i", diff, diff)))
    return DmlProblem(similar * scale, dissimilar * scale, spec.rank, spec.lam, spec.eta0, spec.C)


def spec_dict(spec) -> dict:
    return asdict(spec)
