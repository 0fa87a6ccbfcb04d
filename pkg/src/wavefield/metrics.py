"""Quantitative evaluation of reconstructed fields.

Correlation and error levels over whole signals, short time windows, and
single responses ranked by distance from the training aperture.  All metrics
compare a truth grid against an estimate on identical sampling.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .gridio import FieldGrid

DB_FLOOR = -300.0


class UndefinedCorrelationError(ValueError):
    """Correlation requested against a constant signal."""


def pearson(a, b) -> float:
    """Pearson correlation coefficient of two equal-length signals.

    Raises :class:`UndefinedCorrelationError` when either input is constant,
    because the coefficient is 0/0 there.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least 2 samples")
    da = a - a.mean()
    db = b - b.mean()
    na = np.linalg.norm(da)
    nb = np.linalg.norm(db)
    if na == 0.0 or nb == 0.0:
        raise UndefinedCorrelationError("constant input")
    return float(np.clip(da @ db / (na * nb), -1.0, 1.0))


def rmse_db(truth, est, normalized: bool = False) -> float:
    """Root-mean-square error in dB: 10 log10 of the RMS misfit.

    With ``normalized=True`` the RMS misfit is divided by the RMS of the
    truth before taking the log, making levels comparable across signals of
    different loudness.  A perfect match returns the -300 dB floor instead
    of -inf.
    """
    truth = np.asarray(truth, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if truth.shape != est.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {est.shape}")
    err = np.sqrt(np.mean((truth - est) ** 2))
    if normalized:
        ref = np.sqrt(np.mean(truth ** 2))
        if ref == 0.0:
            raise ValueError("zero-energy truth cannot normalize")
        err = err / ref
    if err <= 0.0:
        return DB_FLOOR
    return max(float(10.0 * np.log10(err)), DB_FLOOR)


def nmse_db(truth, est) -> float:
    """Normalized mean square error in dB: 10 log10(error energy / truth energy).

    Energy ratio, so exactly twice :func:`rmse_db` with ``normalized=True``
    away from the -300 dB floor.
    """
    return max(2.0 * rmse_db(truth, est, normalized=True), DB_FLOOR)


# ---------------------------------------------------------------------------
# report rows
# ---------------------------------------------------------------------------

@dataclass
class WindowRow:
    t_center: float
    correlation: float
    nmse_db: float


@dataclass
class PositionRow:
    x: float
    y: float
    distance: float          # to the nearest training position, meters
    correlation: float
    rmse_db: float


@dataclass
class ReconReport:
    """Evaluation rows for one reconstruction method."""

    method: str = ""
    config_hash: str = ""
    window_rows: list = field(default_factory=list)
    position_rows: list = field(default_factory=list)

    def __post_init__(self):
        for r in self.window_rows + self.position_rows:
            if not -1.0 <= r.correlation <= 1.0:
                raise ValueError(f"correlation out of range: {r.correlation}")
        centers = [r.t_center for r in self.window_rows]
        if sorted(centers) != centers:
            raise ValueError("window rows must be ordered in time")


def _check_aligned(truth: FieldGrid, est: FieldGrid):
    if truth.pressure.shape != est.pressure.shape \
            or truth.fs != est.fs or truth.t0 != est.t0 \
            or not np.array_equal(truth.positions, est.positions):
        raise ValueError("grids are not aligned (positions, fs, t0, length)")


def snapshot_metrics(truth: FieldGrid, est: FieldGrid,
                     window: float = 1.8e-3, hop: float = 0.9e-3) -> list:
    """Correlation and NMSE over sliding time windows, whole aperture at once.

    Each full window of ``window`` seconds advances by ``hop`` seconds
    (``hop=inf`` evaluates a single window); the slab across all positions is
    compared in one go.  Returns ordered :class:`WindowRow` items.
    """
    _check_aligned(truth, est)
    wn = min(max(int(round(window * truth.fs)), 1), truth.n_time)
    rows = []
    start = 0
    while start + wn <= truth.n_time:
        ts = truth.pressure[start:start + wn]
        es = est.pressure[start:start + wn]
        center = truth.t0 + (start + (wn - 1) / 2.0) / truth.fs
        rows.append(WindowRow(center, pearson(ts, es), nmse_db(ts, es)))
        if not np.isfinite(hop):
            break
        start += max(int(round(hop * truth.fs)), 1)
    return rows


def distance_study(truth: FieldGrid, est: FieldGrid, train_positions,
                   axis: int = 0) -> list:
    """Per-response metrics ranked along one coordinate axis.

    For every position in the grids: correlation and normalized RMSE of that
    single response, plus euclidean distance to the nearest training
    position.  Rows come back sorted by the ``axis`` coordinate.
    """
    _check_aligned(truth, est)
    train_positions = np.asarray(train_positions, dtype=np.float64).reshape(-1, 2)
    rows = []
    for m in np.argsort(truth.positions[:, axis], kind="stable"):
        pos = truth.positions[m]
        if train_positions.shape[0]:
            dist = float(np.min(np.linalg.norm(train_positions - pos, axis=1)))
        else:
            dist = np.inf
        rows.append(PositionRow(
            float(pos[0]), float(pos[1]), dist,
            pearson(truth.pressure[:, m], est.pressure[:, m]),
            rmse_db(truth.pressure[:, m], est.pressure[:, m], normalized=True)))
    return rows


def binned_distance_trend(rows, n_bins: int = 5):
    """Mean correlation per distance bin and its Spearman rank trend.

    Bins the :class:`PositionRow` distances into ``n_bins`` equal-width
    intervals, averages correlation per nonempty bin, and returns
    (bin centers, mean correlations, Spearman rho of centers vs means).
    A negative rho means correlation decays with distance.
    """
    d = np.array([r.distance for r in rows], dtype=np.float64)
    c = np.array([r.correlation for r in rows], dtype=np.float64)
    if d.size == 0:
        raise ValueError("no rows to bin")
    edges = np.linspace(d.min(), d.max(), n_bins + 1)
    idx = np.clip(np.digitize(d, edges[1:-1]), 0, n_bins - 1)
    centers, means = [], []
    for b in range(n_bins):
        mask = idx == b
        if mask.any():
            centers.append(0.5 * (edges[b] + edges[b + 1]))
            means.append(float(c[mask].mean()))
    if len(centers) < 2:
        raise ValueError("need at least two nonempty distance bins")
    rho = stats.spearmanr(centers, means).statistic
    return np.array(centers), np.array(means), float(rho)


def write_report_csv(path, report: ReconReport):
    """One CSV per method, fixed header.

    Two comment lines carry the metadata, then
    ``kind,t_center,x,y,distance,correlation,level_db`` where ``kind`` is
    ``window`` (level is NMSE dB) or ``position`` (level is normalized RMSE
    dB); inapplicable cells stay empty.
    """
    with open(path, "w") as f:
        f.write(f"# method={report.method}\n")
        f.write(f"# config_hash={report.config_hash}\n")
        f.write("kind,t_center,x,y,distance,correlation,level_db\n")
        for r in report.window_rows:
            f.write(f"window,{r.t_center!r},,,,{r.correlation!r},{r.nmse_db!r}\n")
        for r in report.position_rows:
            f.write(f"position,,{r.x!r},{r.y!r},{r.distance!r},"
                    f"{r.correlation!r},{r.rmse_db!r}\n")
