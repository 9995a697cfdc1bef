"""Factor-graph MAP estimation over keyframes with IMU and range factors.

Keyframes are created at a fixed cadence; consecutive keyframes are linked
by preintegrated IMU factors, every range measurement attaches to its
temporally nearest keyframe, and base-station positions enter as variables
held by tight priors. The resulting nonlinear least-squares problem

    sum_f  r_f(X)^T Sigma_f^-1 r_f(X)

is minimized with Levenberg-Marquardt. Rotations are updated through the
exponential retraction ``R <- R @ exp_so3(dtheta)``; every other block is
Euclidean. The incremental mode re-optimizes a sliding window after each
new keyframe, summarizing everything older than the window by a Gaussian
prior on the oldest in-window keyframe.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.sparse.linalg import splu

from . import geometry as geo
from . import preintegration as pre_mod
from .dataset import ImuSample, ToaMeasurement, Trajectory, associate_nearest
from .errors import (DegenerateGeometry, EmptyInput, NonFiniteCost,
                     SingularNormalEquations, UnknownBsId)
from .eskf import GRAVITY, ImuNoiseParams, NavState
from .preintegration import PreintegratedImu
from .toa_sim import BaseStation

MIN_RANGE_M = 1e-6
KF_DIM = 15          # theta(3) p(3) v(3) bias(6)
_OFF_TH, _OFF_P, _OFF_V, _OFF_B = 0, 3, 6, 9


def range_residual(position: np.ndarray, station_pos: np.ndarray,
                   distance: float) -> float:
    """Measured minus predicted distance to a fixed anchor."""
    d = float(np.linalg.norm(np.asarray(position) - np.asarray(station_pos)))
    if d < MIN_RANGE_M:
        raise DegenerateGeometry("position coincides with station")
    return float(distance) - d


def range_gradient(position: np.ndarray, station_pos: np.ndarray) -> np.ndarray:
    """Gradient of range_residual with respect to the position."""
    diff = np.asarray(position) - np.asarray(station_pos)
    d = float(np.linalg.norm(diff))
    if d < MIN_RANGE_M:
        raise DegenerateGeometry("position coincides with station")
    return -diff / d


def _sqrt_info(cov: np.ndarray) -> np.ndarray:
    """S with S^T S = cov^-1, via the Cholesky factor of cov."""
    cov = 0.5 * (cov + cov.T)
    jitter = 1e-14 * max(float(np.trace(cov)) / cov.shape[0], 1e-12)
    lower = np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
    return scipy.linalg.solve_triangular(lower, np.eye(cov.shape[0]), lower=True)


@dataclass(frozen=True)
class KeyframeId:
    index: int
    t: int


@dataclass
class GraphValues:
    """Current estimates for all keyframe and station variables."""

    rot: np.ndarray        # (N, 3, 3)
    pos: np.ndarray        # (N, 3)
    vel: np.ndarray        # (N, 3)
    bias: np.ndarray       # (N, 6): gyro then accel
    stations: np.ndarray   # (K, 3)

    def copy(self) -> "GraphValues":
        return GraphValues(self.rot.copy(), self.pos.copy(), self.vel.copy(),
                           self.bias.copy(), self.stations.copy())

    @property
    def n_keyframes(self) -> int:
        return self.pos.shape[0]


class PriorPoseFactor:
    kind = "PriorPose"

    def __init__(self, kf: int, rot0: np.ndarray, p0: np.ndarray, cov: np.ndarray):
        self.kf = kf
        self.rot0 = rot0
        self.p0 = p0
        self.cov = cov
        self.sqrt_info = _sqrt_info(cov)

    def residual(self, values: GraphValues) -> np.ndarray:
        r_rot = geo.log_so3(self.rot0.T @ values.rot[self.kf])
        return np.concatenate([r_rot, values.pos[self.kf] - self.p0])

    def linearize(self, values: GraphValues):
        r = self.residual(values)
        jac = np.zeros((6, KF_DIM))
        jac[0:3, _OFF_TH:_OFF_TH + 3] = geo.right_jacobian_inv_so3(r[0:3])
        jac[3:6, _OFF_P:_OFF_P + 3] = np.eye(3)
        return self.sqrt_info @ r, [(("kf", self.kf), self.sqrt_info @ jac)]


class PriorVelocityFactor:
    kind = "PriorVelocity"

    def __init__(self, kf: int, v0: np.ndarray, cov: np.ndarray):
        self.kf = kf
        self.v0 = v0
        self.cov = cov
        self.sqrt_info = _sqrt_info(cov)

    def residual(self, values: GraphValues) -> np.ndarray:
        return values.vel[self.kf] - self.v0

    def linearize(self, values: GraphValues):
        jac = np.zeros((3, KF_DIM))
        jac[:, _OFF_V:_OFF_V + 3] = np.eye(3)
        return (self.sqrt_info @ self.residual(values),
                [(("kf", self.kf), self.sqrt_info @ jac)])


class PriorBiasFactor:
    kind = "PriorBias"

    def __init__(self, kf: int, b0: np.ndarray, cov: np.ndarray):
        self.kf = kf
        self.b0 = b0
        self.cov = cov
        self.sqrt_info = _sqrt_info(cov)

    def residual(self, values: GraphValues) -> np.ndarray:
        return values.bias[self.kf] - self.b0

    def linearize(self, values: GraphValues):
        jac = np.zeros((6, KF_DIM))
        jac[:, _OFF_B:_OFF_B + 6] = np.eye(6)
        return (self.sqrt_info @ self.residual(values),
                [(("kf", self.kf), self.sqrt_info @ jac)])


class PriorStationFactor:
    kind = "PriorStation"

    def __init__(self, station: int, center: np.ndarray, sigma: float):
        self.station = station
        self.center = center
        self.sigma = sigma
        self.cov = sigma * sigma * np.eye(3)

    def residual(self, values: GraphValues) -> np.ndarray:
        return values.stations[self.station] - self.center

    def linearize(self, values: GraphValues):
        w = 1.0 / self.sigma
        return (w * self.residual(values),
                [(("st", self.station), w * np.eye(3))])


class PriorStateFactor:
    """Full 15-dof keyframe prior used to summarize marginalized history."""

    kind = "PriorState"

    def __init__(self, kf: int, rot0: np.ndarray, p0: np.ndarray,
                 v0: np.ndarray, b0: np.ndarray, cov: np.ndarray):
        self.kf = kf
        self.rot0 = rot0
        self.p0 = p0
        self.v0 = v0
        self.b0 = b0
        self.cov = cov
        self.sqrt_info = _sqrt_info(cov)

    def residual(self, values: GraphValues) -> np.ndarray:
        return np.concatenate([
            geo.log_so3(self.rot0.T @ values.rot[self.kf]),
            values.pos[self.kf] - self.p0,
            values.vel[self.kf] - self.v0,
            values.bias[self.kf] - self.b0,
        ])

    def linearize(self, values: GraphValues):
        r = self.residual(values)
        jac = np.eye(15)
        jac[0:3, 0:3] = geo.right_jacobian_inv_so3(r[0:3])
        return self.sqrt_info @ r, [(("kf", self.kf), self.sqrt_info @ jac)]


class ImuFactor:
    """Preintegrated relative-motion constraint between keyframes i and j.

    The residual stacks (rotation, position, velocity) from the increments
    plus the bias random-walk difference; its covariance is block-diagonal
    in the same order.
    """

    kind = "Imu"

    def __init__(self, i: int, j: int, pre: PreintegratedImu,
                 samples: tuple[np.ndarray, np.ndarray, np.ndarray],
                 gravity: np.ndarray = GRAVITY):
        self.i = i
        self.j = j
        self.samples = samples        # (omega, accel, dt) kept for re-integration
        self.gravity = gravity
        self._set_pre(pre)

    def _set_pre(self, pre: PreintegratedImu) -> None:
        self.pre = pre
        n = pre.noise
        walk = np.diag([n.sigma_wg ** 2 * pre.dt_total] * 3 +
                       [n.sigma_wa ** 2 * pre.dt_total] * 3)
        cov = np.zeros((15, 15))
        cov[0:9, 0:9] = pre.cov
        cov[9:15, 9:15] = walk
        self.cov = cov
        self.sqrt_info = _sqrt_info(cov)

    def reintegrate(self, bias: np.ndarray) -> None:
        """Redo the integration at a new bias linearization point."""
        omega, accel, dts = self.samples
        self._set_pre(pre_mod.integrate_batch(
            omega, accel, dts, bias[0:3], bias[3:6], self.pre.noise))

    def bias_drift(self, values: GraphValues) -> float:
        lin = np.concatenate([self.pre.bias_gyro, self.pre.bias_accel])
        return float(np.max(np.abs(values.bias[self.i] - lin)))

    def residual(self, values: GraphValues) -> np.ndarray:
        rot_i, rot_j = values.rot[self.i], values.rot[self.j]
        bias_i = values.bias[self.i]
        r_rot = pre_mod.residual_rotation(self.pre, rot_i, rot_j, bias_i)
        r_pos = pre_mod.residual_position(self.pre, rot_i, values.pos[self.i],
                                          values.vel[self.i], values.pos[self.j],
                                          self.gravity, bias_i)
        r_vel = pre_mod.residual_velocity(self.pre, rot_i, values.vel[self.i],
                                          values.vel[self.j], self.gravity,
                                          bias_i)
        r_bias = pre_mod.residual_bias(values.bias[self.i], values.bias[self.j])
        return np.concatenate([r_rot, r_pos, r_vel, r_bias])

    def linearize(self, values: GraphValues):
        rot_i, rot_j = values.rot[self.i], values.rot[self.j]
        p_i, p_j = values.pos[self.i], values.pos[self.j]
        v_i, v_j = values.vel[self.i], values.vel[self.j]
        pre = self.pre
        dt = pre.dt_total

        r = self.residual(values)
        jr_inv = geo.right_jacobian_inv_so3(r[0:3])
        rot_it = rot_i.T

        pos_arg = rot_it @ (p_j - p_i - v_i * dt - 0.5 * self.gravity * dt * dt)
        vel_arg = rot_it @ (v_j - v_i - self.gravity * dt)

        ji = np.zeros((15, KF_DIM))
        ji[0:3, _OFF_TH:_OFF_TH + 3] = -jr_inv @ (rot_j.T @ rot_i)
        ji[3:6, _OFF_TH:_OFF_TH + 3] = geo.skew(pos_arg)
        ji[3:6, _OFF_P:_OFF_P + 3] = -rot_it
        ji[3:6, _OFF_V:_OFF_V + 3] = -dt * rot_it
        ji[6:9, _OFF_TH:_OFF_TH + 3] = geo.skew(vel_arg)
        ji[6:9, _OFF_V:_OFF_V + 3] = -rot_it
        ji[9:15, _OFF_B:_OFF_B + 6] = -np.eye(6)
        # First-order bias corrections make the motion residuals depend on
        # the bias at keyframe i.
        dbg = values.bias[self.i][0:3] - pre.bias_gyro
        corr = pre.j_rot_bg @ dbg
        ji[0:3, _OFF_B:_OFF_B + 3] = -(
            jr_inv @ geo.exp_so3(r[0:3]).T
            @ geo.right_jacobian_so3(corr) @ pre.j_rot_bg)
        ji[3:6, _OFF_B:_OFF_B + 3] += -pre.j_pos_bg
        ji[3:6, _OFF_B + 3:_OFF_B + 6] += -pre.j_pos_ba
        ji[6:9, _OFF_B:_OFF_B + 3] += -pre.j_vel_bg
        ji[6:9, _OFF_B + 3:_OFF_B + 6] += -pre.j_vel_ba

        jj = np.zeros((15, KF_DIM))
        jj[0:3, _OFF_TH:_OFF_TH + 3] = jr_inv
        jj[3:6, _OFF_P:_OFF_P + 3] = rot_it
        jj[6:9, _OFF_V:_OFF_V + 3] = rot_it
        jj[9:15, _OFF_B:_OFF_B + 6] = np.eye(6)

        s = self.sqrt_info
        return s @ r, [(("kf", self.i), s @ ji), (("kf", self.j), s @ jj)]


class RangeFactor:
    kind = "Range"

    def __init__(self, kf: int, station: int, distance: float, sigma: float):
        self.kf = kf
        self.station = station
        self.distance = distance
        self.sigma = sigma
        self.cov = np.array([[sigma * sigma]])

    def residual(self, values: GraphValues) -> np.ndarray:
        return np.array([range_residual(values.pos[self.kf],
                                        values.stations[self.station],
                                        self.distance)])

    def linearize(self, values: GraphValues):
        grad = range_gradient(values.pos[self.kf], values.stations[self.station])
        w = 1.0 / self.sigma
        jac_kf = np.zeros((1, KF_DIM))
        jac_kf[0, _OFF_P:_OFF_P + 3] = w * grad
        jac_st = (-w * grad).reshape(1, 3)
        return (w * self.residual(values),
                [(("kf", self.kf), jac_kf), (("st", self.station), jac_st)])


@dataclass
class FactorGraph:
    keyframes: list[KeyframeId]
    factors: list
    station_ids: list[int]

    def imu_factors(self) -> list[ImuFactor]:
        return [f for f in self.factors if f.kind == "Imu"]

    def range_factors(self) -> list[RangeFactor]:
        return [f for f in self.factors if f.kind == "Range"]


@dataclass
class PgoConfig:
    initial_state: NavState
    stations: Sequence[BaseStation]
    meas_std: np.ndarray
    noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    node_rate_hz: float = 10.0
    window: int = 100
    max_iters: int = 50
    max_iters_stream: int = 12
    stream_cost_tol: float = 1e-3
    damping_init: float = 1e-4
    cost_tol: float = 1e-9
    step_tol: float = 1e-9
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    sigma_floor: float = 1e-3
    station_prior_sigma: float = 1e-3
    prior_sigma_rot: float = 0.01
    prior_sigma_pos: float = 0.1
    prior_sigma_vel: float = 0.1
    prior_sigma_bias: float = 0.01
    bias_drift_threshold: float = 0.05
    final_batch: bool = True


@dataclass
class OptimizeOptions:
    max_iters: int = 50
    damping_init: float = 1e-4
    cost_tol: float = 1e-9
    step_tol: float = 1e-9


@dataclass
class OptimizeReport:
    costs: list[float]                 # cost after each accepted iteration
    initial_cost: float
    iterations: int
    termination: str
    cost_log: list[tuple[int, float, float]]   # (iter, cost, damping)


def total_cost(graph: FactorGraph, values: GraphValues) -> float:
    """Sum of squared Mahalanobis residuals over every factor."""
    return _window_cost(graph.factors, values)


def _column_map(first_kf: int, n_kf: int):
    def col(key) -> int:
        tag, idx = key
        if tag == "kf":
            return KF_DIM * (idx - first_kf)
        return KF_DIM * n_kf + 3 * idx
    return col


def _active_factors(graph: FactorGraph, first_kf: int) -> list:
    if first_kf == 0:
        return graph.factors
    out = []
    for f in graph.factors:
        if f.kind == "Imu":
            if f.i >= first_kf:
                out.append(f)
        elif f.kind in ("Range", "PriorPose", "PriorVelocity", "PriorBias",
                        "PriorState"):
            if f.kf >= first_kf:
                out.append(f)
        else:
            out.append(f)
    return out


def _split_factors(factors: list) -> tuple[list, list, list]:
    ranges = [f for f in factors if f.kind == "Range"]
    imus = [f for f in factors if f.kind == "Imu"]
    others = [f for f in factors if f.kind not in ("Range", "Imu")]
    return ranges, imus, others


def _range_terms(range_fs: list, values: GraphValues):
    """Vectorized whitened residuals and unit directions for range factors."""
    kf_idx = np.array([f.kf for f in range_fs])
    st_idx = np.array([f.station for f in range_fs])
    d_meas = np.array([f.distance for f in range_fs])
    sig = np.array([f.sigma for f in range_fs])
    diff = values.pos[kf_idx] - values.stations[st_idx]
    dist = np.linalg.norm(diff, axis=1)
    if np.any(dist < MIN_RANGE_M):
        raise DegenerateGeometry("keyframe coincides with a station")
    u = diff / dist[:, None]
    r_w = (d_meas - dist) / sig
    return kf_idx, st_idx, sig, u, r_w


def _imu_terms(imu_fs: list, values: GraphValues, with_jacobians: bool):
    """Vectorized whitened residuals (and Jacobians) for IMU factors.

    Returns (idx_i, idx_j, r_w) plus, when requested, the whitened (m,15,30)
    Jacobian over the stacked [keyframe i, keyframe j] blocks.
    """
    m = len(imu_fs)
    idx_i = np.array([f.i for f in imu_fs])
    idx_j = np.array([f.j for f in imu_fs])
    d_rot = np.stack([f.pre.d_rot for f in imu_fs])
    d_pos = np.stack([f.pre.d_pos for f in imu_fs])
    d_vel = np.stack([f.pre.d_vel for f in imu_fs])
    dt = np.array([f.pre.dt_total for f in imu_fs])
    sqrt = np.stack([f.sqrt_info for f in imu_fs])
    bias_lin = np.stack([np.concatenate([f.pre.bias_gyro, f.pre.bias_accel])
                         for f in imu_fs])
    j_rot_bg = np.stack([f.pre.j_rot_bg for f in imu_fs])
    j_pos_bg = np.stack([f.pre.j_pos_bg for f in imu_fs])
    j_pos_ba = np.stack([f.pre.j_pos_ba for f in imu_fs])
    j_vel_bg = np.stack([f.pre.j_vel_bg for f in imu_fs])
    j_vel_ba = np.stack([f.pre.j_vel_ba for f in imu_fs])
    gravity = imu_fs[0].gravity

    rot_i = values.rot[idx_i]
    rot_j = values.rot[idx_j]
    rot_it = rot_i.transpose(0, 2, 1)
    dtc = dt[:, None]

    # First-order bias correction of the increments.
    dbg = values.bias[idx_i][:, 0:3] - bias_lin[:, 0:3]
    dba = values.bias[idx_i][:, 3:6] - bias_lin[:, 3:6]
    corr = np.einsum("mij,mj->mi", j_rot_bg, dbg)
    d_rot_c = d_rot @ geo.exp_so3_batch(corr)
    d_pos_c = d_pos + np.einsum("mij,mj->mi", j_pos_bg, dbg) \
        + np.einsum("mij,mj->mi", j_pos_ba, dba)
    d_vel_c = d_vel + np.einsum("mij,mj->mi", j_vel_bg, dbg) \
        + np.einsum("mij,mj->mi", j_vel_ba, dba)

    err_rot = d_rot_c.transpose(0, 2, 1) @ rot_it @ rot_j
    r_rot = geo.log_so3_batch(err_rot)
    pos_arg = np.einsum(
        "mij,mj->mi", rot_it,
        values.pos[idx_j] - values.pos[idx_i] - values.vel[idx_i] * dtc
        - 0.5 * gravity[None] * dtc * dtc)
    vel_arg = np.einsum(
        "mij,mj->mi", rot_it,
        values.vel[idx_j] - values.vel[idx_i] - gravity[None] * dtc)
    raw = np.concatenate([r_rot, pos_arg - d_pos_c, vel_arg - d_vel_c,
                          values.bias[idx_j] - values.bias[idx_i]], axis=1)
    r_w = np.einsum("mij,mj->mi", sqrt, raw)
    if not with_jacobians:
        return idx_i, idx_j, r_w, None

    jr_inv = geo.right_jacobian_inv_batch(r_rot)
    eye6 = np.eye(6)[None]
    ji = np.zeros((m, 15, KF_DIM))
    ji[:, 0:3, 0:3] = -jr_inv @ (rot_j.transpose(0, 2, 1) @ rot_i)
    ji[:, 3:6, 0:3] = geo.skew_batch(pos_arg)
    ji[:, 3:6, 3:6] = -rot_it
    ji[:, 3:6, 6:9] = -dt[:, None, None] * rot_it
    ji[:, 6:9, 0:3] = geo.skew_batch(vel_arg)
    ji[:, 6:9, 6:9] = -rot_it
    ji[:, 9:15, 9:15] = -eye6
    ji[:, 0:3, 9:12] = -(jr_inv @ geo.exp_so3_batch(r_rot).transpose(0, 2, 1)
                         @ geo.right_jacobian_batch(corr) @ j_rot_bg)
    ji[:, 3:6, 9:12] += -j_pos_bg
    ji[:, 3:6, 12:15] += -j_pos_ba
    ji[:, 6:9, 9:12] += -j_vel_bg
    ji[:, 6:9, 12:15] += -j_vel_ba
    jj = np.zeros((m, 15, KF_DIM))
    jj[:, 0:3, 0:3] = jr_inv
    jj[:, 3:6, 3:6] = rot_it
    jj[:, 6:9, 6:9] = rot_it
    jj[:, 9:15, 9:15] = eye6
    jac = sqrt @ np.concatenate([ji, jj], axis=2)     # (m, 15, 30)
    return idx_i, idx_j, r_w, jac


def _build_normal_equations(factors: list, values: GraphValues, first_kf: int,
                            n_kf: int, n_st: int):
    """Assemble H = J^T W J and g = J^T W r from whitened factor blocks."""
    n = KF_DIM * n_kf + 3 * n_st
    col_of = _column_map(first_kf, n_kf)
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    grad = np.zeros(n)
    cost = 0.0

    range_fs, imu_fs, other_fs = _split_factors(factors)

    for f in other_fs:
        r_w, blocks = f.linearize(values)
        cost += float(r_w @ r_w)
        idx = np.concatenate([np.arange(col_of(key), col_of(key) + b.shape[1])
                              for key, b in blocks])
        jac = np.hstack([b for _, b in blocks])
        h_blk = jac.T @ jac
        rows.append(np.repeat(idx, len(idx)))
        cols.append(np.tile(idx, len(idx)))
        vals.append(h_blk.ravel())
        np.add.at(grad, idx, jac.T @ r_w)

    if imu_fs:
        idx_i, idx_j, r_w, jac = _imu_terms(imu_fs, values, with_jacobians=True)
        cost += float(np.sum(r_w * r_w))
        h_blk = jac.transpose(0, 2, 1) @ jac                    # (m,30,30)
        g_blk = np.einsum("mri,mr->mi", jac, r_w)               # (m,30)
        cols_ij = np.concatenate(
            [KF_DIM * (idx_i - first_kf)[:, None] + np.arange(KF_DIM),
             KF_DIM * (idx_j - first_kf)[:, None] + np.arange(KF_DIM)], axis=1)
        rows.append(np.repeat(cols_ij, 30, axis=1).ravel())
        cols.append(np.tile(cols_ij, 30).ravel())
        vals.append(h_blk.ravel())
        np.add.at(grad, cols_ij.ravel(), g_blk.ravel())

    if range_fs:
        kf_idx, st_idx, sig, u, r_w = _range_terms(range_fs, values)
        cost += float(r_w @ r_w)
        # Whitened jacobian rows: -u/sig on the keyframe position block,
        # +u/sig on the station block.
        jp = -u / sig[:, None]
        uu = np.einsum("mi,mj->mij", jp, jp)          # (m,3,3) weighted outer
        p_cols = (KF_DIM * (kf_idx - first_kf) + _OFF_P)[:, None] + np.arange(3)
        s_cols = (KF_DIM * n_kf + 3 * st_idx)[:, None] + np.arange(3)
        for a_cols, b_cols, sign in ((p_cols, p_cols, 1.0), (p_cols, s_cols, -1.0),
                                     (s_cols, p_cols, -1.0), (s_cols, s_cols, 1.0)):
            rows.append(np.repeat(a_cols, 3, axis=1).ravel())
            cols.append(np.tile(b_cols, 3).ravel())
            vals.append(sign * uu.ravel())
        gp = jp * r_w[:, None]
        np.add.at(grad, p_cols.ravel(), gp.ravel())
        np.add.at(grad, s_cols.ravel(), -gp.ravel())

    h_mat = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n)).tocsc()
    if not np.isfinite(cost):
        raise NonFiniteCost(f"cost evaluated to {cost}")
    return h_mat, grad, cost


def _retract(values: GraphValues, delta: np.ndarray, first_kf: int,
             n_kf: int) -> GraphValues:
    out = values.copy()
    block = delta[:KF_DIM * n_kf].reshape(n_kf, KF_DIM)
    sl = slice(first_kf, first_kf + n_kf)
    out.rot[sl] = out.rot[sl] @ geo.exp_so3_batch(block[:, _OFF_TH:_OFF_TH + 3])
    out.pos[sl] += block[:, _OFF_P:_OFF_P + 3]
    out.vel[sl] += block[:, _OFF_V:_OFF_V + 3]
    out.bias[sl] += block[:, _OFF_B:_OFF_B + 6]
    out.stations = out.stations + delta[KF_DIM * n_kf:].reshape(-1, 3)
    return out


def _window_cost(factors: list, values: GraphValues) -> float:
    range_fs, imu_fs, other_fs = _split_factors(factors)
    cost = 0.0
    for f in other_fs:
        if hasattr(f, "sqrt_info"):
            r = f.sqrt_info @ f.residual(values)
        else:
            r = f.residual(values) / f.sigma
        cost += float(r @ r)
    if imu_fs:
        _, _, r_w, _ = _imu_terms(imu_fs, values, with_jacobians=False)
        cost += float(np.sum(r_w * r_w))
    if range_fs:
        _, _, _, _, r_w = _range_terms(range_fs, values)
        cost += float(r_w @ r_w)
    if not np.isfinite(cost):
        raise NonFiniteCost(f"cost evaluated to {cost}")
    return cost


def optimize(graph: FactorGraph, initial_values: GraphValues,
             options: OptimizeOptions | None = None,
             first_kf: int = 0) -> tuple[GraphValues, OptimizeReport]:
    """Damped nonlinear least squares over keyframes [first_kf, N).

    Accepted steps never increase the cost; the damping parameter grows on
    rejected steps and shrinks on accepted ones.
    """
    opts = options or OptimizeOptions()
    n_kf = initial_values.n_keyframes - first_kf
    n_st = initial_values.stations.shape[0]
    factors = _active_factors(graph, first_kf)

    values = initial_values.copy()
    cost = _window_cost(factors, values)
    initial_cost = cost
    lam = opts.damping_init
    cost_log: list[tuple[int, float, float]] = []
    costs: list[float] = []
    termination = "max_iterations"
    iterations = 0

    for it in range(1, opts.max_iters + 1):
        iterations = it
        h_mat, gvec, _ = _build_normal_equations(factors, values, first_kf,
                                                 n_kf, n_st)
        damp = np.maximum(h_mat.diagonal(), 1e-8)
        accepted = False
        solver_failed = True
        for _ in range(16):
            h_damped = h_mat + scipy.sparse.diags(lam * damp)
            try:
                lu = splu(h_damped)
                delta = lu.solve(-gvec)
            except RuntimeError:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            solver_failed = False
            candidate = _retract(values, delta, first_kf, n_kf)
            new_cost = _window_cost(factors, candidate)
            if new_cost <= cost:
                values = candidate
                decrease = cost - new_cost
                cost = new_cost
                costs.append(cost)
                cost_log.append((it, cost, lam))
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                if decrease < opts.cost_tol * max(1.0, cost):
                    termination = "cost_tolerance"
                if np.max(np.abs(delta)) < opts.step_tol:
                    termination = "step_tolerance"
                break
            lam *= 10.0
            if np.max(np.abs(delta)) < opts.step_tol:
                # Steps have shrunk to nothing without improving the cost.
                termination = "step_tolerance"
                break
        if solver_failed:
            raise SingularNormalEquations(
                "normal equations singular after damping escalation")
        if not accepted and termination == "max_iterations":
            termination = "no_progress"
        if not accepted or termination != "max_iterations":
            break

    report = OptimizeReport(costs, initial_cost, iterations, termination, cost_log)
    return values, report


def _marginalize_dropped(dropped_factors: list, values: GraphValues,
                         first_kf: int, new_first: int) -> Optional[np.ndarray]:
    """Covariance of the separator keyframe given only the dropped subgraph.

    Assembles the normal equations of the factors leaving the window over
    keyframes [first_kf, new_first] (station blocks held fixed: the anchors
    carry tight priors of their own) and Schur-complements everything but
    the separator keyframe `new_first`. Because only dropped factors enter,
    no in-window measurement is double counted.
    """
    n_mini = new_first - first_kf + 1
    n = KF_DIM * n_mini
    h_mini = np.zeros((n, n))
    for f in dropped_factors:
        _, blocks = f.linearize(values)
        kf_blocks = [(key, b) for key, b in blocks if key[0] == "kf"]
        if not kf_blocks:
            continue
        idx = np.concatenate([
            np.arange(KF_DIM * (key[1] - first_kf),
                      KF_DIM * (key[1] - first_kf) + b.shape[1])
            for key, b in kf_blocks])
        jac = np.hstack([b for _, b in kf_blocks])
        h_mini[np.ix_(idx, idx)] += jac.T @ jac
    d = slice(0, KF_DIM * (n_mini - 1))
    s = slice(KF_DIM * (n_mini - 1), n)
    h_dd = h_mini[d, d] + 1e-9 * np.eye(KF_DIM * (n_mini - 1))
    try:
        h_dd_inv_h_ds = np.linalg.solve(h_dd, h_mini[d, s])
    except np.linalg.LinAlgError:
        return None
    info = h_mini[s, s] - h_mini[s, d] @ h_dd_inv_h_ds
    info = 0.5 * (info + info.T) + 1e-9 * np.eye(KF_DIM)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        return None
    cov = 0.5 * (cov + cov.T)
    if not np.all(np.isfinite(cov)) or np.any(np.diag(cov) <= 0.0):
        return None
    return cov


def _initial_prior_covs(config: PgoConfig):
    pose = np.diag([config.prior_sigma_rot ** 2] * 3 +
                   [config.prior_sigma_pos ** 2] * 3)
    vel = config.prior_sigma_vel ** 2 * np.eye(3)
    bias = config.prior_sigma_bias ** 2 * np.eye(6)
    return pose, vel, bias


def _initial_priors(config: PgoConfig) -> list:
    state = config.initial_state
    pose_cov, vel_cov, bias_cov = _initial_prior_covs(config)
    rot0 = geo.quat_to_rot(state.q)
    b0 = np.concatenate([state.b_g, state.b_a])
    return [PriorPoseFactor(0, rot0, state.p.copy(), pose_cov),
            PriorVelocityFactor(0, state.v.copy(), vel_cov),
            PriorBiasFactor(0, b0, bias_cov)]


def _keyframe_times(imu: Sequence[ImuSample], node_rate_hz: float) -> list[int]:
    period = int(round(1e9 / node_rate_hz))
    return list(range(imu[0].t, imu[-1].t + 1, period))


def _station_sigma(config: PgoConfig) -> dict[int, float]:
    std = np.maximum(np.asarray(config.meas_std, dtype=float), config.sigma_floor)
    return {bs.id: float(std[k]) for k, bs in enumerate(config.stations)}


def _make_imu_factor(imu: Sequence[ImuSample], t_start: int, t_end: int,
                     i: int, j: int, bias: np.ndarray,
                     config: PgoConfig) -> ImuFactor:
    omega, accel, dts = pre_mod.slice_imu_between(imu, t_start, t_end)
    if len(dts) == 0:
        raise EmptyInput(f"no IMU samples between keyframes {i} and {j}")
    pre = pre_mod.integrate_batch(omega, accel, dts, bias[0:3], bias[3:6],
                                  config.noise)
    return ImuFactor(i, j, pre, (omega, accel, dts), config.gravity)


def build_graph(imu: Sequence[ImuSample], toa: Sequence[ToaMeasurement],
                config: PgoConfig) -> tuple[FactorGraph, GraphValues]:
    """Construct the full factor graph and dead-reckoned initial values."""
    if len(imu) < 2:
        raise EmptyInput("need at least two IMU samples")
    times = _keyframe_times(imu, config.node_rate_hz)
    keyframes = [KeyframeId(k, t) for k, t in enumerate(times)]
    n = len(keyframes)

    state = config.initial_state
    values = GraphValues(
        rot=np.repeat(geo.quat_to_rot(state.q)[None], n, axis=0),
        pos=np.repeat(state.p[None], n, axis=0).astype(float),
        vel=np.repeat(state.v[None], n, axis=0).astype(float),
        bias=np.repeat(np.concatenate([state.b_g, state.b_a])[None], n, axis=0),
        stations=np.array([bs.position for bs in config.stations], dtype=float),
    )

    factors: list = list(_initial_priors(config))
    for k, bs in enumerate(config.stations):
        factors.append(PriorStationFactor(k, bs.position.copy(),
                                          config.station_prior_sigma))

    bias0 = values.bias[0]
    for k in range(n - 1):
        fac = _make_imu_factor(imu, times[k], times[k + 1], k, k + 1,
                               bias0, config)
        factors.append(fac)
        rot_j, p_j, v_j = pre_mod.predict(fac.pre, values.rot[k], values.pos[k],
                                          values.vel[k], config.gravity)
        values.rot[k + 1], values.pos[k + 1], values.vel[k + 1] = rot_j, p_j, v_j

    sigma_by_id = _station_sigma(config)
    st_index = {bs.id: k for k, bs in enumerate(config.stations)}
    toa_times = [m.t for m in toa]
    pairs = associate_nearest(times, toa_times, max_gap=np.iinfo(np.int64).max)
    for kf_idx, m_idx in pairs:
        m = toa[m_idx]
        if m.bs_id not in st_index:
            raise UnknownBsId(f"bs_id {m.bs_id} has no configured station")
        factors.append(RangeFactor(kf_idx, st_index[m.bs_id], m.distance,
                                   sigma_by_id[m.bs_id]))

    return FactorGraph(keyframes, factors, [bs.id for bs in config.stations]), values


def _reintegrate_drifted(graph: FactorGraph, values: GraphValues,
                         threshold: float, first_kf: int = 0) -> int:
    count = 0
    for f in graph.imu_factors():
        if f.i >= first_kf and f.bias_drift(values) > threshold:
            f.reintegrate(values.bias[f.i])
            count += 1
    return count


def values_to_trajectory(keyframes: Sequence[KeyframeId],
                         values: GraphValues) -> Trajectory:
    t = np.array([kf.t for kf in keyframes], dtype=np.int64)
    quat = np.array([geo.rot_to_quat(values.rot[k]) for k in range(len(keyframes))])
    return Trajectory(t, values.pos[:len(keyframes)].copy(), quat,
                      values.vel[:len(keyframes)].copy())


@dataclass
class PgoRun:
    streamed: Trajectory
    batch: Optional[Trajectory]
    step_times_ms: np.ndarray
    final_report: Optional[OptimizeReport]
    reintegrations: int


def run_batch(imu: Sequence[ImuSample], toa: Sequence[ToaMeasurement],
              config: PgoConfig,
              initial: Optional[Trajectory] = None
              ) -> tuple[Trajectory, OptimizeReport]:
    """One full-trajectory MAP solve, optionally seeded from a trajectory."""
    graph, values = build_graph(imu, toa, config)
    if initial is not None and len(initial) > 0:
        _seed_from_trajectory(graph, values, initial)
    opts = OptimizeOptions(config.max_iters, config.damping_init,
                           config.cost_tol, config.step_tol)
    values, report = optimize(graph, values, opts)
    # Re-linearize the IMU factors where the bias estimate moved and solve
    # again; repeats until the linearization points are consistent.
    for _ in range(3):
        if _reintegrate_drifted(graph, values, config.bias_drift_threshold) == 0:
            break
        values, report = optimize(graph, values, opts)
    return values_to_trajectory(graph.keyframes, values), report


def _seed_from_trajectory(graph: FactorGraph, values: GraphValues,
                          traj: Trajectory) -> None:
    kf_times = [kf.t for kf in graph.keyframes]
    pairs = associate_nearest([int(t) for t in traj.t], kf_times,
                              max_gap=np.iinfo(np.int64).max)
    for est_idx, kf_idx in pairs:
        values.rot[kf_idx] = geo.quat_to_rot(traj.orientation[est_idx])
        values.pos[kf_idx] = traj.position[est_idx]
        if traj.velocity is not None:
            values.vel[kf_idx] = traj.velocity[est_idx]


def run_sliding_window(imu: Sequence[ImuSample], toa: Sequence[ToaMeasurement],
                       config: PgoConfig) -> PgoRun:
    """Incremental estimation: re-optimize a window after every new keyframe.

    Keyframes older than the window are summarized by priors on the oldest
    in-window keyframe, centered at its estimate with its marginal
    covariance from the last solve. A final full-batch pass (enabled by
    default) refines the whole trajectory for reporting.
    """
    if len(imu) < 2:
        raise EmptyInput("need at least two IMU samples")
    times = _keyframe_times(imu, config.node_rate_hz)
    n = len(times)
    keyframes = [KeyframeId(k, t) for k, t in enumerate(times)]

    state = config.initial_state
    values = GraphValues(
        rot=np.repeat(geo.quat_to_rot(state.q)[None], n, axis=0),
        pos=np.repeat(state.p[None], n, axis=0).astype(float),
        vel=np.repeat(state.v[None], n, axis=0).astype(float),
        bias=np.repeat(np.concatenate([state.b_g, state.b_a])[None], n, axis=0),
        stations=np.array([bs.position for bs in config.stations], dtype=float),
    )

    base_priors = _initial_priors(config)
    station_priors = [PriorStationFactor(k, bs.position.copy(),
                                         config.station_prior_sigma)
                      for k, bs in enumerate(config.stations)]
    marginal_priors: list = []
    imu_factors: list[ImuFactor] = []
    range_by_kf: dict[int, list[RangeFactor]] = {}

    sigma_by_id = _station_sigma(config)
    st_index = {bs.id: k for k, bs in enumerate(config.stations)}
    toa_times = [m.t for m in toa]
    for kf_idx, m_idx in associate_nearest(times, toa_times,
                                           max_gap=np.iinfo(np.int64).max):
        m = toa[m_idx]
        if m.bs_id not in st_index:
            raise UnknownBsId(f"bs_id {m.bs_id} has no configured station")
        range_by_kf.setdefault(kf_idx, []).append(
            RangeFactor(kf_idx, st_index[m.bs_id], m.distance,
                        sigma_by_id[m.bs_id]))

    stream_opts = OptimizeOptions(config.max_iters_stream, config.damping_init,
                                  config.stream_cost_tol, config.step_tol)
    stream_t: list[int] = [times[0]]
    stream_pos: list[np.ndarray] = [values.pos[0].copy()]
    stream_quat: list[np.ndarray] = [geo.rot_to_quat(values.rot[0])]
    stream_vel: list[np.ndarray] = [values.vel[0].copy()]
    step_times: list[float] = []
    reintegrations = 0
    first_kf = 0
    marginal_prior: Optional[PriorStateFactor] = None

    for j in range(1, n):
        fac = _make_imu_factor(imu, times[j - 1], times[j], j - 1, j,
                               values.bias[j - 1], config)
        imu_factors.append(fac)
        rot_j, p_j, v_j = pre_mod.predict(fac.pre, values.rot[j - 1],
                                          values.pos[j - 1], values.vel[j - 1],
                                          config.gravity)
        values.rot[j], values.pos[j], values.vel[j] = rot_j, p_j, v_j
        values.bias[j] = values.bias[j - 1]

        tic = time.perf_counter()
        new_first = max(0, min(j - config.window + 1, j - 1))
        if new_first > first_kf:
            # Replace the keyframes leaving the window by a Gaussian prior
            # on the new oldest keyframe: marginalize the dropped subgraph
            # (old prior plus every factor touching dropped keyframes).
            dropped: list = [] if marginal_prior is None else [marginal_prior]
            if first_kf == 0:
                dropped += base_priors
            dropped += [f for f in imu_factors
                        if first_kf <= f.i < new_first]
            for k in range(first_kf, new_first):
                dropped += range_by_kf.get(k, [])
            cov = _marginalize_dropped(dropped, values, first_kf, new_first)
            if cov is None:
                pose_cov, vel_cov, bias_cov = _initial_prior_covs(config)
                cov = np.zeros((15, 15))
                cov[0:6, 0:6] = pose_cov
                cov[6:9, 6:9] = vel_cov
                cov[9:15, 9:15] = bias_cov
            k = new_first
            marginal_prior = PriorStateFactor(
                k, values.rot[k].copy(), values.pos[k].copy(),
                values.vel[k].copy(), values.bias[k].copy(), cov)
            first_kf = new_first

        window_factors = list(station_priors)
        if marginal_prior is not None:
            window_factors.append(marginal_prior)
        if first_kf == 0:
            window_factors += base_priors
        window_factors += [f for f in imu_factors if f.i >= first_kf]
        for k in range(first_kf, j + 1):
            window_factors += range_by_kf.get(k, [])

        win_graph = FactorGraph(keyframes[:j + 1], window_factors,
                                [bs.id for bs in config.stations])
        values, _ = optimize(win_graph, values, stream_opts, first_kf=first_kf)
        for f in imu_factors:
            if f.i >= first_kf and f.bias_drift(values) > config.bias_drift_threshold:
                f.reintegrate(values.bias[f.i])
                reintegrations += 1
        step_times.append((time.perf_counter() - tic) * 1e3)
        stream_t.append(times[j])
        stream_pos.append(values.pos[j].copy())
        stream_quat.append(geo.rot_to_quat(values.rot[j]))
        stream_vel.append(values.vel[j].copy())

    streamed = Trajectory(np.array(stream_t, dtype=np.int64),
                          np.array(stream_pos), np.array(stream_quat),
                          np.array(stream_vel))

    batch_traj = None
    final_report = None
    if config.final_batch:
        full_factors = base_priors + station_priors + imu_factors
        for k in range(n):
            full_factors += range_by_kf.get(k, [])
        full_graph = FactorGraph(keyframes, full_factors,
                                 [bs.id for bs in config.stations])
        opts = OptimizeOptions(config.max_iters, config.damping_init,
                               config.cost_tol, config.step_tol)
        values, final_report = optimize(full_graph, values, opts)
        for _ in range(3):
            if _reintegrate_drifted(full_graph, values,
                                    config.bias_drift_threshold) == 0:
                break
            reintegrations += 1
            values, final_report = optimize(full_graph, values, opts)
        batch_traj = values_to_trajectory(keyframes, values)

    return PgoRun(streamed, batch_traj, np.array(step_times), final_report,
                  reintegrations)
