"""
Image metrics, per-image evaluation helpers, metric tables and paired statistics.
"""
import logging
import os
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

from .diffusion import (ConditionalEpsFn, NoiseSchedule, forward_noise, noise_fitting_loss, posterior_mean_predicted,
                        posterior_mean_true)
from .errors import DatasetError, RectDiffError, ShapeError
from .probe import AttributeDirection, off_axis_shift, probe_shift, shift_cosine

logger = logging.getLogger(__name__)

METRICS = ("L1", "L2", "SSIM", "posterior_gap", "noise_loss", "probe_shift", "shift_cosine", "off_attr_drift")
KEY_COLUMNS = ["experiment", "image", "step_count", "metric"]
CSV_NOTE = ("# LPIPS and identity similarity are not computed; probe_shift, shift_cosine and "
            "off_attr_drift are probe-space stand-ins")

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(a, b, name: str):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError.mismatch(name, a.shape, b.shape)
    return a, b


def metric_l1(a, b) -> float:
    a, b = _pair(a, b, "metric_l1")
    return float(np.mean(np.abs(a - b)))


def metric_l2(a, b) -> float:
    a, b = _pair(a, b, "metric_l2")
    return float(np.mean((a - b) ** 2))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """SSIM over every fully interior window of two (H, W) planes in [-1, 1]."""
    w = gaussian_window()
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs planes of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    x, y = (a + 1.0) / 2.0, (b + 1.0) / 2.0
    wx = sliding_window_view(x, w.shape)
    wy = sliding_window_view(y, w.shape)

    def avg(v):
        return np.einsum("ijkl,kl->ij", v, w)

    mx, my = avg(wx), avg(wy)
    vx = avg(wx * wx) - mx * mx
    vy = avg(wy * wy) - my * my
    cxy = avg(wx * wy) - mx * my
    return ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))


def metric_ssim(a, b) -> float:
    """Mean SSIM over windows and channels; images are (C,H,W) or (H,W)."""
    a, b = _pair(a, b, "metric_ssim")
    planes = a.reshape((-1,) + a.shape[-2:]), b.reshape((-1,) + b.shape[-2:])
    return float(np.mean([ssim_map(pa, pb).mean() for pa, pb in zip(*planes)]))


PIXEL_METRICS = {"L1": metric_l1, "L2": metric_l2, "SSIM": metric_ssim}


def per_image(metric, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A, B = _pair(A, B, "per_image")
    return np.array([metric(a, b) for a, b in zip(A, B)])


def noise_loss_per_image(model: ConditionalEpsFn, images: np.ndarray, s: NoiseSchedule, num_t_samples: int,
                         rng: np.random.Generator, batch_size: int = 16) -> np.ndarray:
    """Per-image mean of ‖ε − ε̂‖² over ``num_t_samples`` draws of (t, ε)."""
    return _per_image_draws(model, images, s, num_t_samples, rng, batch_size, gap=False)


def posterior_gap_per_image(model: ConditionalEpsFn, images: np.ndarray, s: NoiseSchedule, num_t_samples: int,
                            rng: np.random.Generator, batch_size: int = 16) -> np.ndarray:
    """Per-image Monte-Carlo posterior-mean gap; its mean is posterior_gap_metric."""
    return _per_image_draws(model, images, s, num_t_samples, rng, batch_size, gap=True)


def _per_image_draws(model, images, s, num_t_samples, rng, batch_size, gap: bool) -> np.ndarray:
    if len(images) == 0:
        raise DatasetError("per-image evaluation needs a nonempty image set")
    totals = np.zeros(len(images))
    for _ in range(num_t_samples):
        for start in range(0, len(images), batch_size):
            x0 = images[start:start + batch_size]
            t = rng.integers(1, s.T + 1, size=len(x0))
            eps = rng.standard_normal(x0.shape)
            x_t = forward_noise(x0, t, eps, s)
            eps_hat = model(x_t, t, x0)
            if gap:
                diff = posterior_mean_true(x0, x_t, t, s) - posterior_mean_predicted(x_t, eps_hat, t, s)
                totals[start:start + len(x0)] += np.mean(diff.reshape(len(x0), -1) ** 2, axis=1)
            else:
                totals[start:start + len(x0)] += noise_fitting_loss(eps, eps_hat)
    return totals / num_t_samples


def probe_shift_per_image(original: np.ndarray, edited: np.ndarray, direction: AttributeDirection) -> np.ndarray:
    return probe_shift(original, edited, direction)


def shift_cosine_per_image(original: np.ndarray, edited: np.ndarray, direction: AttributeDirection) -> np.ndarray:
    return shift_cosine(original, edited, direction)


def off_attr_drift_per_image(original: np.ndarray, edited: np.ndarray, direction: AttributeDirection) -> np.ndarray:
    return off_axis_shift(original, edited, direction)


# ---------------------------------------------------------------------------
# metric tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricRow:
    experiment: str
    image: int
    step_count: int
    metric: str
    value: float


def rows_for(experiment: str, step_count: int, metric: str, values: Iterable[float],
             image_ids: Optional[Sequence[int]] = None) -> List[MetricRow]:
    values = list(values)
    ids = range(len(values)) if image_ids is None else image_ids
    return [MetricRow(experiment, int(i), int(step_count), metric, float(v)) for i, v in zip(ids, values)]


def metric_frame(rows: Iterable[MetricRow]) -> pd.DataFrame:
    """Rows as a DataFrame sorted by (experiment, image, step_count, metric).

    Raises RectDiffError on non-finite values or duplicate keys.
    """
    df = pd.DataFrame([asdict(r) for r in rows], columns=KEY_COLUMNS + ["value"])
    if len(df) and not np.all(np.isfinite(df["value"].to_numpy(dtype=np.float64))):
        bad = df[~np.isfinite(df["value"].to_numpy(dtype=np.float64))].head(3).to_dict("records")
        raise RectDiffError(f"non-finite metric values: {bad}")
    if df.duplicated(KEY_COLUMNS).any():
        dup = df[df.duplicated(KEY_COLUMNS, keep=False)].head(3).to_dict("records")
        raise RectDiffError(f"duplicate metric rows: {dup}")
    return df.sort_values(KEY_COLUMNS, kind="mergesort").reset_index(drop=True)


def write_csv(df: pd.DataFrame, path: str, note: Optional[str] = CSV_NOTE) -> str:
    """Write with fixed float formatting so reruns give identical bytes."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        if note:
            f.write(note + "\n")
        df.to_csv(f, index=False, float_format="%.12g", lineterminator="\n")
    logger.info("wrote %d rows to %s", len(df), path)
    return path


def read_csv(path: str) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def summarize(df: pd.DataFrame, by: Sequence[str] = ("experiment", "step_count", "metric")) -> pd.DataFrame:
    """Mean, standard deviation and count of ``value`` per group."""
    out = df.groupby(list(by), sort=True)["value"].agg(["mean", "std", "count"]).reset_index()
    out["std"] = out["std"].fillna(0.0)
    return out


# ---------------------------------------------------------------------------
# paired statistics
# ---------------------------------------------------------------------------

def paired_comparison(a: np.ndarray, b: np.ndarray) -> Dict[str, float]:
    """Compare per-image values of a against b (a − b).

    Returns the mean difference, the paired t-test p-value for a < b and the
    one-sided sign-test p-value for a < b.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) == 0:
        raise ShapeError.mismatch("paired_comparison", a.shape, b.shape)
    diff = a - b
    below, nonzero = int(np.sum(diff < 0)), int(np.sum(diff != 0))
    if len(a) > 1 and np.any(diff != diff[0]):
        t_p = float(stats.ttest_rel(a, b, alternative="less").pvalue)
    else:
        # constant difference: the t statistic is undefined
        t_p = 0.0 if diff[0] < 0 else 1.0
    sign_p = float(stats.binomtest(below, nonzero, 0.5, alternative="greater").pvalue) if nonzero else 1.0
    return {"mean_diff": float(diff.mean()), "ttest_p": t_p, "sign_p": sign_p,
            "fraction_lower": below / len(a), "n": float(len(a))}


def sign_test_positive(values: np.ndarray) -> float:
    """One-sided sign-test p-value that values are positive more often than not."""
    values = np.asarray(values)
    nonzero = int(np.sum(values != 0))
    if not nonzero:
        return 1.0
    return float(stats.binomtest(int(np.sum(values > 0)), nonzero, 0.5, alternative="greater").pvalue)


def trend_slope(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) < 2:
        return 0.0
    return float(stats.linregress(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)).slope)


def monotone_fraction(table: np.ndarray, decreasing: bool = True) -> float:
    """Fraction of rows (images) whose values are strictly monotone along columns."""
    steps = np.diff(np.asarray(table, dtype=np.float64), axis=1)
    ok = np.all(steps < 0, axis=1) if decreasing else np.all(steps > 0, axis=1)
    return float(np.mean(ok))
