"""Kalman smoothing front end for noisy joint-angle observations.

Each coordinate is smoothed independently with a 3-state
(position, velocity, acceleration) triple-integrator linear-Gaussian
model.  The process covariance is fixed; the observation variance and
the initial-state distribution are fitted by EM with closed-form
M-steps.  The RTS backward pass yields the (q̃, q̃̇, q̃̈) series used as
regression targets and residual evaluation points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


FIXED_Q = np.diag([1e-3, 1e-3, 1.0])
R_FLOOR = 1e-12
EM_ITERS = 50
EM_GAIN_TOL = 1e-6
EM_SLACK = 1e-8


class NumericalDegeneracyError(Exception):
    """A filter/smoother covariance collapsed or went singular."""


class EmMonotonicityError(Exception):
    """EM log-likelihood decreased beyond slack; indicates a bug."""

    def __init__(self, iteration: int, before: float, after: float):
        self.iteration = iteration
        self.before = before
        self.after = after
        super().__init__(
            f"log-likelihood fell from {before:.9g} to {after:.9g} "
            f"at EM iteration {iteration}")


def transition_matrix(dt: float) -> np.ndarray:
    """exp of the triple-integrator generator times dt, in closed form."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    return np.array([[1.0, dt, 0.5 * dt * dt],
                     [0.0, 1.0, dt],
                     [0.0, 0.0, 1.0]])


@dataclass
class LdsModel:
    """Per-coordinate linear dynamical system."""

    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: float
    m0: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.C = np.asarray(self.C, dtype=np.float64).reshape(1, -1)
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.m0 = np.asarray(self.m0, dtype=np.float64).ravel()
        self.P0 = np.asarray(self.P0, dtype=np.float64)
        if self.R <= 0:
            raise ValueError("R must be positive")


@dataclass
class FilterResult:
    means: np.ndarray        # T x 3, posterior m_t|t
    covs: np.ndarray         # T x 3 x 3
    pred_means: np.ndarray   # T x 3, m_t|t-1 (m0 at t=0)
    pred_covs: np.ndarray    # T x 3 x 3 (P0 at t=0)
    loglik: float


@dataclass
class SmoothResult:
    means: np.ndarray        # T x 3, m_t|T
    covs: np.ndarray         # T x 3 x 3
    cross_covs: np.ndarray   # (T-1) x 3 x 3, Cov(x_t, x_{t+1} | y_{1:T})
    loglik: float


def kalman_filter(model: LdsModel, y: np.ndarray) -> FilterResult:
    """Forward pass with Joseph-form updates and exact innovation likelihood.

    The state at the first observation is the prior (m0, P0) itself; the
    transition applies between observations.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    T = y.size
    A, C, Q, R = model.A, model.C, model.Q, model.R
    c = C.ravel()
    d = A.shape[0]
    means = np.empty((T, d))
    covs = np.empty((T, d, d))
    pred_means = np.empty((T, d))
    pred_covs = np.empty((T, d, d))
    eye = np.eye(d)
    loglik = 0.0
    m, P = model.m0.copy(), model.P0.copy()
    for t in range(T):
        if t > 0:
            m = A @ m
            P = A @ P @ A.T + Q
        pred_means[t] = m
        pred_covs[t] = P
        s = float(c @ P @ c + R)
        if s <= 0 or not np.isfinite(s):
            raise NumericalDegeneracyError(f"innovation variance {s} at t={t}")
        innov = y[t] - float(c @ m)
        loglik += -0.5 * (np.log(2.0 * np.pi * s) + innov * innov / s)
        K = (P @ c) / s
        m = m + K * innov
        IKC = eye - np.outer(K, c)
        P = IKC @ P @ IKC.T + np.outer(K, K) * R
        means[t] = m
        covs[t] = P
    return FilterResult(means, covs, pred_means, pred_covs, loglik)


def rts_smooth(model: LdsModel, filt: FilterResult) -> SmoothResult:
    """Rauch-Tung-Striebel backward pass with lag-one cross-covariances."""
    A = model.A
    T, d = filt.means.shape
    ms = np.empty((T, d))
    Ps = np.empty((T, d, d))
    cross = np.empty((max(T - 1, 0), d, d))
    ms[-1] = filt.means[-1]
    Ps[-1] = filt.covs[-1]
    for t in range(T - 2, -1, -1):
        P_pred = filt.pred_covs[t + 1]
        try:
            # G = P_t|t A' P_pred^{-1}, via solve on the symmetric P_pred
            G = np.linalg.solve(P_pred, (filt.covs[t] @ A.T).T).T
        except np.linalg.LinAlgError:
            raise NumericalDegeneracyError(f"singular predicted covariance at t={t + 1}")
        ms[t] = filt.means[t] + G @ (ms[t + 1] - filt.pred_means[t + 1])
        Ps[t] = filt.covs[t] + G @ (Ps[t + 1] - P_pred) @ G.T
        cross[t] = G @ Ps[t + 1]
    return SmoothResult(ms, Ps, cross, filt.loglik)


@dataclass
class EmResult:
    model: LdsModel
    logliks: list
    iterations: int
    smooth: SmoothResult


def em_fit(y: np.ndarray, dt: float, q_fixed: np.ndarray = FIXED_Q,
           iters: int = EM_ITERS, gain_tol: float = EM_GAIN_TOL) -> EmResult:
    """Fit R, m0, P0 by EM with the process covariance held fixed.

    Closed-form M-steps:
      R  = (1/T) Σ_t [(y_t − C m_t|T)² + C P_t|T Cᵀ]
      m0 = m_1|T,  P0 = P_1|T
    The log-likelihood trace must be non-decreasing (1e-8 slack); a drop
    beyond that is a bug in the updates, not a data property.
    """
    if iters < 1:
        raise ValueError("need at least one EM iteration")
    y = np.asarray(y, dtype=np.float64).ravel()
    T = y.size
    r0 = float(np.var(np.diff(y))) if T > 1 else 1.0
    model = LdsModel(
        A=transition_matrix(dt),
        C=np.array([[1.0, 0.0, 0.0]]),
        Q=np.asarray(q_fixed, dtype=np.float64),
        R=max(r0, R_FLOOR),
        m0=np.array([y[0], (y[1] - y[0]) / dt if T > 1 else 0.0, 0.0]),
        P0=np.diag([1.0, 1.0, 10.0]),
    )
    c = model.C.ravel()
    logliks: list[float] = []

    def e_step():
        filt = kalman_filter(model, y)
        if logliks and filt.loglik < logliks[-1] - EM_SLACK:
            raise EmMonotonicityError(len(logliks), logliks[-1], filt.loglik)
        gain = filt.loglik - logliks[-1] if logliks else np.inf
        logliks.append(filt.loglik)
        return rts_smooth(model, filt), gain

    for _ in range(iters):
        smooth, gain = e_step()
        if gain < gain_tol:
            return EmResult(model, logliks, len(logliks), smooth)
        resid = y - smooth.means @ c
        cpc = np.einsum("i,tij,j->t", c, smooth.covs, c)
        model = LdsModel(
            A=model.A, C=model.C, Q=model.Q,
            R=max(float(np.mean(resid ** 2 + cpc)), R_FLOOR),
            m0=smooth.means[0].copy(),
            P0=smooth.covs[0].copy(),
        )
    # iterations exhausted: one final E-step so the returned smooth
    # matches the returned model
    smooth, _ = e_step()
    return EmResult(model, logliks, len(logliks), smooth)


@dataclass
class SmoothedTrajectory:
    """Per-trajectory smoothed states plus per-coordinate fit info."""

    q: np.ndarray        # T x n
    qdot: np.ndarray     # T x n
    qddot: np.ndarray    # T x n
    h: float
    split: str = ""
    fits: list = field(default_factory=list)  # per-coordinate dicts

    def __post_init__(self):
        for arr in (self.q, self.qdot, self.qddot):
            if arr.shape != self.q.shape:
                raise ValueError("smoothed series shapes disagree")
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite smoothed state")

    @property
    def T(self) -> int:
        return self.q.shape[0]

    @property
    def n(self) -> int:
        return self.q.shape[1]


@dataclass
class SmoothedDataset:
    trajectories: list

    def with_split(self, split: str) -> list:
        return [tr for tr in self.trajectories if tr.split == split]


def smooth_trajectory(observations: np.ndarray, h: float,
                      split: str = "") -> SmoothedTrajectory:
    """EM + RTS per coordinate; stacks the per-coordinate state series."""
    y = np.asarray(observations, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError("observations must be T x n")
    T, n = y.shape
    q = np.empty((T, n))
    qdot = np.empty((T, n))
    qddot = np.empty((T, n))
    fits = []
    for j in range(n):
        res = em_fit(y[:, j], h)
        q[:, j] = res.smooth.means[:, 0]
        qdot[:, j] = res.smooth.means[:, 1]
        qddot[:, j] = res.smooth.means[:, 2]
        fits.append({
            "R": res.model.R,
            "m0": res.model.m0.tolist(),
            "P0": res.model.P0.tolist(),
            "iterations": res.iterations,
            "logliks": [float(v) for v in res.logliks],
        })
    return SmoothedTrajectory(q=q, qdot=qdot, qddot=qddot, h=h,
                              split=split, fits=fits)


def smooth_dataset(observed, h: float | None = None) -> SmoothedDataset:
    """Smooth a list of observed trajectories (or bare T x n arrays)."""
    out = []
    for obs in observed:
        if hasattr(obs, "observations"):
            out.append(smooth_trajectory(obs.observations, obs.h))
        else:
            if h is None:
                raise ValueError("h required for bare arrays")
            out.append(smooth_trajectory(np.asarray(obs), h))
    return SmoothedDataset(out)


def save_smoothed(straj: SmoothedTrajectory, path) -> None:
    """CSV `t, q_i, qdot_i, qddot_i` per coordinate + JSON fit sidecar."""
    import csv
    import json
    from pathlib import Path

    path = Path(path)
    header = ["t"]
    for j in range(straj.n):
        header += [f"q{j + 1}", f"qdot{j + 1}", f"qddot{j + 1}"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(straj.T):
            row = [t * straj.h]
            for j in range(straj.n):
                row += [straj.q[t, j], straj.qdot[t, j], straj.qddot[t, j]]
            w.writerow([f"{x:.17g}" for x in row])
    meta = {"h": straj.h, "split": straj.split, "fits": straj.fits}
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_smoothed(path) -> SmoothedTrajectory:
    import csv
    import json
    from pathlib import Path

    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(x) for x in row] for row in reader])
    n = (len(header) - 1) // 3
    q = data[:, 1 + 3 * np.arange(n)]
    qdot = data[:, 2 + 3 * np.arange(n)]
    qddot = data[:, 3 + 3 * np.arange(n)]
    with open(path.with_suffix(".json")) as fh:
        meta = json.load(fh)
    return SmoothedTrajectory(q=q, qdot=qdot, qddot=qddot, h=meta["h"],
                              split=meta.get("split", ""),
                              fits=meta.get("fits", []))
