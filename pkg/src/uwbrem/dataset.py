"""Measurement ingestion, train/test split, input preparation and exploratory
statistics for UWB CIR corpora.

Canonical record file: UTF-8 delimited text with a header row and columns
``true_range_m, measured_range_m, los, environment, material, cir_0 ... cir_156``.
One measurement per line, "." as decimal separator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

CIR_LEN = 157
SUPPORTED_K = (8, 16, 32, 64, 128, 157)

INDOOR_ENVS = ("big_room", "medium_room", "small_room")
KNOWN_ENVS = INDOOR_ENVS + ("outdoor", "through_wall")
TEST_ENV = "medium_room"

CANONICAL_COLUMNS = ["true_range_m", "measured_range_m", "los", "environment", "material"] + [
    f"cir_{i}" for i in range(CIR_LEN)
]


class DatasetError(ValueError):
    pass


@dataclass
class CirSample:
    """A single UWB measurement record."""

    cir: np.ndarray
    measured_range: float
    true_range: float
    environment: str
    material: str
    los: bool

    @property
    def range_error(self) -> float:
        return self.measured_range - self.true_range


@dataclass
class SampleSet:
    """Column-oriented collection of measurements."""

    cir: np.ndarray  # (n, 157)
    measured_range: np.ndarray  # (n,)
    true_range: np.ndarray  # (n,)
    environment: np.ndarray  # (n,) str
    material: np.ndarray  # (n,) str
    los: np.ndarray  # (n,) bool

    def __len__(self) -> int:
        return len(self.measured_range)

    @property
    def range_error(self) -> np.ndarray:
        return self.measured_range - self.true_range

    def subset(self, mask: np.ndarray) -> "SampleSet":
        return SampleSet(
            self.cir[mask], self.measured_range[mask], self.true_range[mask],
            self.environment[mask], self.material[mask], self.los[mask],
        )

    def sample(self, n: int, seed: int = 0) -> "SampleSet":
        idx = np.random.default_rng(seed).choice(len(self), size=min(n, len(self)), replace=False)
        mask = np.zeros(len(self), dtype=bool)
        mask[idx] = True
        return self.subset(mask)


@dataclass
class IngestReport:
    n_accepted: int = 0
    rejected: list = field(default_factory=list)  # (line_number, reason)

    @property
    def n_rejected(self) -> int:
        return len(self.rejected)


@dataclass
class Split:
    train: SampleSet
    test: SampleSet


@dataclass
class Metrics:
    mae_m: float
    sigma_m: float
    mae_los_m: float | None
    mae_nlos_m: float | None
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "mae_m": self.mae_m, "sigma_m": self.sigma_m,
            "mae_los_m": self.mae_los_m, "mae_nlos_m": self.mae_nlos_m,
            "n_samples": self.n_samples,
        }


def _parse_los(values: pd.Series) -> tuple[np.ndarray, np.ndarray]:
    """Returns (bool array, valid mask)."""
    text = values.astype(str).str.strip().str.lower()
    truthy = text.isin(["1", "true", "t", "yes"])
    falsy = text.isin(["0", "false", "f", "no"])
    return truthy.to_numpy(), (truthy | falsy).to_numpy()


def ingest(path: str) -> tuple[SampleSet, IngestReport]:
    """Read a canonical record file; malformed rows are rejected per row with
    their 1-based file line number (header is line 1)."""
    df = pd.read_csv(path)
    missing = [c for c in CANONICAL_COLUMNS if c not in df.columns]
    if missing:
        raise DatasetError(f"missing columns: {missing[:5]}{'...' if len(missing) > 5 else ''}")

    cir_cols = [f"cir_{i}" for i in range(CIR_LEN)]
    cir = df[cir_cols].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    true_r = pd.to_numeric(df["true_range_m"], errors="coerce").to_numpy(dtype=np.float64)
    meas_r = pd.to_numeric(df["measured_range_m"], errors="coerce").to_numpy(dtype=np.float64)
    los, los_ok = _parse_los(df["los"])
    env = df["environment"].astype(str).str.strip().to_numpy()
    mat = df["material"].astype(str).str.strip().to_numpy()

    cir_ok = np.isfinite(cir).all(axis=1)
    range_ok = np.isfinite(true_r) & np.isfinite(meas_r)
    env_ok = np.isin(env, KNOWN_ENVS)
    ok = cir_ok & range_ok & los_ok & env_ok

    report = IngestReport(n_accepted=int(ok.sum()))
    for i in np.flatnonzero(~ok):
        line = int(i) + 2  # header is line 1
        if not cir_ok[i]:
            reason = "short or non-finite CIR"
        elif not range_ok[i]:
            reason = "non-finite range"
        elif not los_ok[i]:
            reason = "unparseable los flag"
        else:
            reason = f"unknown environment {env[i]!r}"
        report.rejected.append((line, reason))

    samples = SampleSet(cir[ok], meas_r[ok], true_r[ok], env[ok], mat[ok], los[ok])
    return samples, report


def write_canonical(samples: SampleSet, path: str) -> None:
    df = pd.DataFrame({
        "true_range_m": samples.true_range,
        "measured_range_m": samples.measured_range,
        "los": samples.los.astype(int),
        "environment": samples.environment,
        "material": samples.material,
    })
    cir = pd.DataFrame(samples.cir, columns=[f"cir_{i}" for i in range(CIR_LEN)])
    pd.concat([df, cir], axis=1).to_csv(path, index=False, float_format="%.6g")


def split(samples: SampleSet) -> Split:
    """Indoor split: medium room held out for test, other rooms train.
    Outdoor and through-wall measurements are excluded entirely."""
    unknown = set(np.unique(samples.environment)) - set(KNOWN_ENVS)
    if unknown:
        raise DatasetError(f"unknown environment labels: {sorted(unknown)}")
    test_mask = samples.environment == TEST_ENV
    train_mask = np.isin(samples.environment, INDOOR_ENVS) & ~test_mask
    if not test_mask.any():
        raise DatasetError("degenerate split: no medium-room samples for test")
    if not train_mask.any():
        raise DatasetError("degenerate split: no indoor training samples")
    return Split(train=samples.subset(train_mask), test=samples.subset(test_mask))


def prepare(cir: np.ndarray, K: int, scheme: str = "max_abs") -> np.ndarray:
    """Model input: the leading K samples of the 157-sample window, normalized
    per sample. The leading samples carry the first path and earliest
    multipath, which hold the NLOS signature."""
    if K not in SUPPORTED_K:
        raise DatasetError(f"K={K} not in supported grid {SUPPORTED_K}")
    single = cir.ndim == 1
    x = np.atleast_2d(np.asarray(cir, dtype=np.float64))
    if x.shape[1] < CIR_LEN:
        raise DatasetError(f"CIR length {x.shape[1]} < {CIR_LEN}")
    x = x[:, :K].copy()
    if scheme == "max_abs":
        denom = np.max(np.abs(x), axis=1, keepdims=True)
    elif scheme == "energy":
        denom = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    else:
        raise DatasetError(f"unknown normalization scheme {scheme!r}")
    denom = np.where(denom == 0.0, 1.0, denom)
    x /= denom
    return x[0] if single else x


def _mae(values: np.ndarray) -> float:
    return float(np.mean(np.abs(values)))


def summary_stats(samples: SampleSet) -> Metrics:
    """Raw (unmitigated) range-error statistics with an LOS/NLOS breakdown."""
    if len(samples) == 0:
        raise DatasetError("summary_stats on empty sample set")
    err = samples.range_error
    los_err = err[samples.los]
    nlos_err = err[~samples.los]
    return Metrics(
        mae_m=_mae(err),
        sigma_m=float(np.std(err)),
        mae_los_m=_mae(los_err) if los_err.size else None,
        mae_nlos_m=_mae(nlos_err) if nlos_err.size else None,
        n_samples=len(samples),
    )


def pca3(cir: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-3 principal axes of the CIR matrix.

    Returns (axes (3, d) orthonormal rows, projections (n, 3),
    explained-variance ratios (3,)). Rank-deficient data yields zero ratios
    for the missing directions.
    """
    x = np.asarray(cir, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 4:
        raise DatasetError("pca3 needs at least 4 samples")
    centered = x - x.mean(axis=0)
    total_var = float(np.sum(centered * centered))
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    n_comp = min(3, vt.shape[0])
    axes = np.zeros((3, x.shape[1]))
    axes[:n_comp] = vt[:n_comp]
    for i in range(n_comp, 3):
        axes[i, i % x.shape[1]] = 1.0  # rank padding, arbitrary unit vectors
    projected = centered @ axes.T
    ratios = np.zeros(3)
    if total_var > 0.0:
        ratios[:n_comp] = (svals[:n_comp] ** 2) / total_var
    return axes, projected, ratios
