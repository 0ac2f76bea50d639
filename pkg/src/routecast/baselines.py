"""Classical comparison methods under the same evaluation protocol.

Ordinary kriging with a fitted exponential variogram, Gaussian-process
regression with grid-searched hyperparameters, and a single-stream
autoencoder trained from scratch.  The interpolators follow the sklearn
estimator convention (``fit(X, y)`` / ``predict(X)`` / ``get_params``) so
they compose with the wider ecosystem; all of them receive exactly the
ground-plus-aerial measurement budget the main method gets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import least_squares
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, RegressorMixin

from .datasets import (
    Measurement,
    MeasurementSet,
    NORM_WINDOW_DEFAULT,
    Route,
    normalize_rsrp,
    rasterize,
)
from .errors import ConfigError
from .neural.model import ArchSpec, DualTxModel, TARGET_ENCODER, SOURCE_ENCODER
from .pipeline import Adam, FinetuneSample, calibration_loss, predict_grid
from .propsim import GridSpec

KRIGING_NEIGHBORS_DEFAULT = 32
GP_SUBSAMPLE_CAP = 2000
GP_FIT_SUBSAMPLE = 800  # hyperparameter scoring subset; solves still use the cap
GP_LENGTH_SCALES = (50.0, 100.0, 200.0, 400.0)
GP_VARIANCE_FACTORS = (0.5, 1.0, 2.0)
GP_NOISE_DEFAULT = 4.0  # dB^2, matches ~2 dB reporting noise


def _check_xy(X, y=None):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != 3:
        raise ConfigError(f"expected positions of shape (n, 3), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ConfigError("positions contain non-finite values")
    if y is None:
        return X
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise ConfigError(f"{X.shape[0]} positions but {y.shape[0]} values")
    if not np.all(np.isfinite(y)):
        raise ConfigError("values contain non-finite entries")
    return X, y


# ---------------------------------------------------------------------------
# Variogram
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VariogramModel:
    """Exponential semivariance model gamma(h) = nugget + (sill-nugget)(1-exp(-h/range))."""

    nugget: float
    sill: float
    range_: float
    family: str = "exponential"

    def __post_init__(self):
        if self.family != "exponential":
            raise ConfigError(f"unsupported variogram family {self.family!r}")
        if self.nugget < 0 or self.sill <= self.nugget or self.range_ <= 0:
            raise ConfigError(f"invalid variogram: nugget={self.nugget} sill={self.sill} range={self.range_}")

    def semivariance(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        return self.nugget + (self.sill - self.nugget) * (1.0 - np.exp(-h / self.range_))


_VARIOGRAM_MAX_POINTS = 1500  # pairwise distances are quadratic in point count


def fit_variogram(ms: MeasurementSet, n_bins: int = 12, seed: int = 0) -> VariogramModel:
    """Least-squares exponential fit to the binned empirical semivariogram."""
    if len(ms) < 30:
        raise ConfigError(f"variogram fit needs >= 30 measurements, got {len(ms)}")
    if n_bins < 5:
        raise ConfigError("n_bins must be >= 5")
    pos, z = _check_xy(ms.positions(), ms.values())
    if pos.shape[0] > _VARIOGRAM_MAX_POINTS:
        keep = np.sort(np.random.default_rng(seed).choice(pos.shape[0], _VARIOGRAM_MAX_POINTS, replace=False))
        pos, z = pos[keep], z[keep]

    d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    g = 0.5 * (z[:, None] - z[None, :]) ** 2
    iu = np.triu_indices(pos.shape[0], k=1)
    d, g = d[iu], g[iu]
    dmax = d.max()
    if dmax <= 0:
        raise ConfigError("all measurement positions identical; lags are degenerate")

    edges = np.linspace(0.0, dmax * (1 + 1e-9), n_bins + 1)
    lags, semi = [], []
    for k in range(n_bins):
        sel = (d >= edges[k]) & (d < edges[k + 1])
        if np.any(sel):
            lags.append(d[sel].mean())
            semi.append(g[sel].mean())
    lags, semi = np.asarray(lags), np.asarray(semi)

    s0 = max(semi.max(), 1e-9)

    def residual(p):
        nugget, dsill, rng_ = p
        model = nugget + dsill * (1.0 - np.exp(-lags / rng_))
        return model - semi

    fit = least_squares(
        residual,
        x0=[semi[0] * 0.5, max(s0 - semi[0] * 0.5, 1e-9), max(dmax / 3.0, 1e-6)],
        bounds=([0.0, 1e-9, 1e-6], [s0 * 2 + 1e-9, s0 * 4 + 1e-9, dmax * 10]),
    )
    nugget, dsill, rng_ = fit.x
    return VariogramModel(float(nugget), float(nugget + dsill), float(rng_))


# ---------------------------------------------------------------------------
# Ordinary kriging
# ---------------------------------------------------------------------------


def kriging_weights(positions: np.ndarray, vg: VariogramModel, query: np.ndarray) -> np.ndarray:
    """Solve one ordinary-kriging system; weights over ``positions`` sum to 1."""
    n = positions.shape[0]
    d = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
    a = np.empty((n + 1, n + 1))
    a[:n, :n] = vg.semivariance(d)
    np.fill_diagonal(a[:n, :n], 0.0)
    a[n, :] = 1.0
    a[:, n] = 1.0
    a[n, n] = 0.0
    b = np.empty(n + 1)
    dq = np.linalg.norm(positions - query[None, :], axis=-1)
    b[:n] = vg.semivariance(dq)
    b[:n][dq <= 1e-12] = 0.0  # query coincides with a sample
    b[n] = 1.0
    sol = np.linalg.solve(a, b)
    return sol[:n]


def kriging_predict(
    ms: MeasurementSet,
    vg: VariogramModel,
    queries: np.ndarray,
    k_neighbors: int = KRIGING_NEIGHBORS_DEFAULT,
) -> tuple[np.ndarray, int]:
    """Moving-window ordinary kriging; returns (values, idw_fallback_count).

    Each query uses its ``k_neighbors`` nearest samples.  Singular systems
    fall back to inverse-distance weighting and are counted.
    """
    if k_neighbors < 3:
        raise ConfigError("k_neighbors must be >= 3")
    pos, z = _check_xy(ms.positions(), ms.values())
    queries = _check_xy(np.atleast_2d(queries))
    k = min(k_neighbors, pos.shape[0])
    tree = cKDTree(pos)
    _, nbr = tree.query(queries, k=k)
    nbr = np.atleast_2d(nbr)
    out = np.empty(queries.shape[0])
    fallbacks = 0
    for qi in range(queries.shape[0]):
        sel = nbr[qi]
        p, v = pos[sel], z[sel]
        try:
            w = kriging_weights(p, vg, queries[qi])
            if not np.all(np.isfinite(w)):
                raise np.linalg.LinAlgError("non-finite weights")
        except np.linalg.LinAlgError:
            fallbacks += 1
            d = np.linalg.norm(p - queries[qi][None, :], axis=-1)
            w = 1.0 / np.maximum(d, 1e-9) ** 2
            w = w / w.sum()
        out[qi] = float(w @ v)
    return out, fallbacks


class KrigingInterpolator(BaseEstimator, RegressorMixin):
    """Ordinary kriging on 3-D positions with a self-fitted exponential variogram."""

    def __init__(self, n_bins: int = 12, k_neighbors: int = KRIGING_NEIGHBORS_DEFAULT, seed: int = 0):
        self.n_bins = n_bins
        self.k_neighbors = k_neighbors
        self.seed = seed

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        ms = MeasurementSet(
            [Measurement(*p, rsrp=v, cell_id="fit", domain="aerial") for p, v in zip(X, y)], "aerial"
        )
        self.variogram_ = fit_variogram(ms, self.n_bins, self.seed)
        self._ms = ms
        return self

    def predict(self, X):
        values, self.idw_fallbacks_ = kriging_predict(self._ms, self.variogram_, X, self.k_neighbors)
        return values


# ---------------------------------------------------------------------------
# Gaussian-process regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GpHyperparams:
    length_scale: float
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        if min(self.length_scale, self.signal_variance, self.noise_variance) <= 0:
            raise ConfigError("GP hyperparameters must be positive")


def _rbf(a: np.ndarray, b: np.ndarray, hp: GpHyperparams) -> np.ndarray:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return hp.signal_variance * np.exp(-0.5 * d2 / hp.length_scale**2)


def _subsample(pos, z, cap, seed):
    if pos.shape[0] <= cap:
        return pos, z
    keep = np.sort(np.random.default_rng(seed).choice(pos.shape[0], cap, replace=False))
    return pos[keep], z[keep]


def _chol_with_jitter(k: np.ndarray):
    jitter = 1e-8
    while jitter <= 1e-4:
        try:
            return cho_factor(k + jitter * np.eye(k.shape[0]), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise np.linalg.LinAlgError("kernel matrix not positive definite even with 1e-4 jitter")


def _log_marginal_likelihood(pos, z, hp: GpHyperparams) -> float:
    k = _rbf(pos, pos, hp) + hp.noise_variance * np.eye(pos.shape[0])
    cf, _ = _chol_with_jitter(k)
    alpha = cho_solve(cf, z)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return float(-0.5 * z @ alpha - 0.5 * logdet - 0.5 * len(z) * math.log(2 * math.pi))


def gp_fit(ms: MeasurementSet, seed: int = 0,
           length_scales: tuple = GP_LENGTH_SCALES,
           variance_factors: tuple = GP_VARIANCE_FACTORS,
           noise_variance: float = GP_NOISE_DEFAULT) -> GpHyperparams:
    """Pick hyperparameters by log marginal likelihood over a fixed grid."""
    pos, z = _check_xy(ms.positions(), ms.values())
    pos, z = _subsample(pos, z, GP_FIT_SUBSAMPLE, seed)
    zc = z - z.mean()
    base_var = max(zc.var(), 1e-6)
    best, best_lml = None, -np.inf
    for ls in length_scales:
        for f in variance_factors:
            hp = GpHyperparams(ls, f * base_var, noise_variance)
            lml = _log_marginal_likelihood(pos, zc, hp)
            if lml > best_lml:
                best, best_lml = hp, lml
    return best


def gp_predict(ms: MeasurementSet, hp: GpHyperparams, queries: np.ndarray, seed: int = 0) -> np.ndarray:
    """Posterior mean at ``queries`` with the training mean as prior mean."""
    pos, z = _check_xy(ms.positions(), ms.values())
    pos, z = _subsample(pos, z, GP_SUBSAMPLE_CAP, seed)
    queries = _check_xy(np.atleast_2d(queries))
    mean = z.mean()
    k = _rbf(pos, pos, hp) + hp.noise_variance * np.eye(pos.shape[0])
    cf, _ = _chol_with_jitter(k)
    alpha = cho_solve(cf, z - mean)
    ks = _rbf(queries, pos, hp)
    return mean + ks @ alpha


class GpInterpolator(BaseEstimator, RegressorMixin):
    """Grid-searched RBF Gaussian-process posterior mean on 3-D positions."""

    def __init__(self, noise_variance: float = GP_NOISE_DEFAULT, seed: int = 0):
        self.noise_variance = noise_variance
        self.seed = seed

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        self._ms = MeasurementSet(
            [Measurement(*p, rsrp=v, cell_id="fit", domain="aerial") for p, v in zip(X, y)], "aerial"
        )
        self.hyperparams_ = gp_fit(self._ms, self.seed, noise_variance=self.noise_variance)
        return self

    def predict(self, X):
        return gp_predict(self._ms, self.hyperparams_, X, self.seed)


# ---------------------------------------------------------------------------
# Plain autoencoder baseline
# ---------------------------------------------------------------------------


class AutoencoderBaseline:
    """Single-stream copy of the reconstruction network, trained from scratch.

    No attention blocks, no pretraining, no feature alignment: per cell, the
    raw ground raster goes in and the sparse-aerial loss drives all
    parameters directly.
    """

    def __init__(self, grid: GridSpec, cells: list[str], norm=NORM_WINDOW_DEFAULT,
                 base_channels: int = 8, depth: int = 3, lr: float = 1e-3,
                 epochs: int = 60, seed: int = 0):
        self.grid = grid
        self.norm = norm
        self.lr = lr
        self.epochs = epochs
        self.seed = seed
        arch = ArchSpec(base_channels=base_channels, depth=depth, attention="none")
        self.model = DualTxModel.create(arch, norm, [], seed, extra_cells=tuple(cells))

    def fit(self, ground: dict[str, MeasurementSet], aerial: dict[str, MeasurementSet]):
        self.model.copy_block(SOURCE_ENCODER, TARGET_ENCODER)
        samples = []
        for cell in self.model.decoder_cells:
            gs = rasterize(ground[cell], self.grid, self.norm)
            ms = aerial[cell]
            idx = self.grid.index_of(ms.positions()) if len(ms) else np.zeros((0, 3), dtype=int)
            vals = normalize_rsrp(ms.values(), self.norm) if len(ms) else np.zeros(0)
            samples.append(FinetuneSample((cell,), (gs.channels(),), (idx,), (vals,)))
        allowed = set(self.model.params) - set(self.model.block_names(SOURCE_ENCODER)) - set(
            self.model.block_names("disc"))
        opt = Adam(self.lr)
        self.losses_ = []
        for _ in range(self.epochs):
            step_losses = []
            for sample in samples:
                lval, back = calibration_loss(self.model, sample, TARGET_ENCODER, train_encoder=True)
                grads: dict = {}
                back(grads)
                opt.step(self.model.params, grads, allowed)
                step_losses.append(lval)
            self.losses_.append(float(np.mean(step_losses)))
        return self

    def predict_profile(self, ground: dict[str, MeasurementSet], route: Route, cell: str) -> np.ndarray:
        gs = rasterize(ground[cell], self.grid, self.norm)
        pred_map = predict_grid(self.model, gs, cell, TARGET_ENCODER)
        idx = self.grid.index_of(route.points())
        return pred_map[idx[:, 0], idx[:, 1], idx[:, 2]]
