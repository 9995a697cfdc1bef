"""IMU preintegration between keyframes.

Batches of IMU samples are condensed into relative-motion increments
(rotation, velocity, position) defined at a fixed bias linearization
point, together with a 9x9 noise covariance over the residual blocks in
(rotation, position, velocity) order. Residual helpers evaluate how well
a pair of keyframe states matches the increments.

Integration is Euler-forward per sample; increments are exact for
piecewise-constant body rates. Bias sensitivities (the derivatives of the
increments with respect to the linearization biases) are accumulated
alongside, so residuals can be corrected to first order when the bias
estimate moves; callers re-integrate when it moves far.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import geometry as geo
from .dataset import ImuSample
from .errors import InvalidDt
from .eskf import GRAVITY, MAX_DT_S, ImuNoiseParams


@dataclass
class PreintegratedImu:
    """Relative-motion increments accumulated from IMU samples."""

    d_rot: np.ndarray                          # (3, 3)
    d_vel: np.ndarray                          # (3,)
    d_pos: np.ndarray                          # (3,)
    dt_total: float
    cov: np.ndarray                            # (9, 9), blocks (rot, pos, vel)
    bias_gyro: np.ndarray                      # linearization point
    bias_accel: np.ndarray
    count: int
    noise: ImuNoiseParams = field(default_factory=ImuNoiseParams, repr=False)
    # Sensitivities of the increments to the linearization biases.
    j_rot_bg: np.ndarray = None
    j_pos_bg: np.ndarray = None
    j_pos_ba: np.ndarray = None
    j_vel_bg: np.ndarray = None
    j_vel_ba: np.ndarray = None

    def __post_init__(self):
        for name in ("j_rot_bg", "j_pos_bg", "j_pos_ba", "j_vel_bg", "j_vel_ba"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros((3, 3)))

    @staticmethod
    def create(bias_gyro: np.ndarray, bias_accel: np.ndarray,
               noise: ImuNoiseParams | None = None) -> "PreintegratedImu":
        return PreintegratedImu(
            d_rot=np.eye(3), d_vel=np.zeros(3), d_pos=np.zeros(3),
            dt_total=0.0, cov=np.zeros((9, 9)),
            bias_gyro=np.asarray(bias_gyro, dtype=float).copy(),
            bias_accel=np.asarray(bias_accel, dtype=float).copy(),
            count=0, noise=noise if noise is not None else ImuNoiseParams())


def _step(pre: PreintegratedImu, omega: np.ndarray, accel: np.ndarray,
          dt: float) -> dict:
    """One Euler step of increments, covariance, and bias sensitivities."""
    w_hat = omega - pre.bias_gyro
    a_hat = accel - pre.bias_accel

    rot_prev = pre.d_rot
    rot_inc = geo.exp_so3(w_hat * dt)

    d_pos = pre.d_pos + pre.d_vel * dt + 0.5 * (rot_prev @ a_hat) * dt * dt
    d_vel = pre.d_vel + (rot_prev @ a_hat) * dt
    d_rot = rot_prev @ rot_inc

    # First-order discrete propagation of the (rot, pos, vel) error.
    a_skew = geo.skew(a_hat)
    a_mat = np.eye(9)
    a_mat[0:3, 0:3] = rot_inc.T
    a_mat[3:6, 0:3] = -0.5 * (rot_prev @ a_skew) * dt * dt
    a_mat[3:6, 6:9] = np.eye(3) * dt
    a_mat[6:9, 0:3] = -(rot_prev @ a_skew) * dt

    b_mat = np.zeros((9, 6))
    jr_dt = geo.right_jacobian_so3(w_hat * dt)
    b_mat[0:3, 0:3] = jr_dt * dt
    b_mat[3:6, 3:6] = 0.5 * rot_prev * dt * dt
    b_mat[6:9, 3:6] = rot_prev * dt

    n = pre.noise
    sigma_eta = np.diag([n.sigma_g ** 2] * 3 + [n.sigma_a ** 2] * 3) / dt
    cov = a_mat @ pre.cov @ a_mat.T + b_mat @ sigma_eta @ b_mat.T

    ra_skew = rot_prev @ a_skew
    j_pos_bg = (pre.j_pos_bg + pre.j_vel_bg * dt
                - 0.5 * ra_skew @ pre.j_rot_bg * dt * dt)
    j_pos_ba = pre.j_pos_ba + pre.j_vel_ba * dt - 0.5 * rot_prev * dt * dt
    j_vel_bg = pre.j_vel_bg - ra_skew @ pre.j_rot_bg * dt
    j_vel_ba = pre.j_vel_ba - rot_prev * dt
    j_rot_bg = rot_inc.T @ pre.j_rot_bg - jr_dt * dt

    return dict(d_rot=d_rot, d_pos=d_pos, d_vel=d_vel,
                cov=0.5 * (cov + cov.T),
                j_rot_bg=j_rot_bg, j_pos_bg=j_pos_bg, j_pos_ba=j_pos_ba,
                j_vel_bg=j_vel_bg, j_vel_ba=j_vel_ba)


def integrate(pre: PreintegratedImu, imu: ImuSample, dt: float) -> PreintegratedImu:
    """Absorb one IMU sample held constant over dt; returns a new value."""
    if not 0.0 < dt <= MAX_DT_S:
        raise InvalidDt(f"dt={dt} outside (0, {MAX_DT_S}]")
    fields = _step(pre, imu.omega, imu.accel, dt)
    return replace(pre, dt_total=pre.dt_total + dt, count=pre.count + 1,
                   **fields)


def integrate_batch(omega: np.ndarray, accel: np.ndarray, dts: np.ndarray,
                    bias_gyro: np.ndarray, bias_accel: np.ndarray,
                    noise: ImuNoiseParams | None = None) -> PreintegratedImu:
    """Integrate arrays of samples into one increment without intermediates."""
    pre = PreintegratedImu.create(bias_gyro, bias_accel, noise)
    for k in range(len(dts)):
        dt = float(dts[k])
        if not 0.0 < dt <= MAX_DT_S:
            raise InvalidDt(f"dt={dt} outside (0, {MAX_DT_S}]")
        fields = _step(pre, omega[k], accel[k], dt)
        for name, value in fields.items():
            setattr(pre, name, value)
        pre.dt_total += dt
        pre.count += 1
    return pre


def compose(first: PreintegratedImu, second: PreintegratedImu) -> PreintegratedImu:
    """Chain two increments sharing one bias linearization point."""
    dt = second.dt_total
    d_pos = first.d_pos + first.d_vel * dt + first.d_rot @ second.d_pos
    d_vel = first.d_vel + first.d_rot @ second.d_vel
    d_rot = first.d_rot @ second.d_rot
    vel2_skew = geo.skew(second.d_vel)
    pos2_skew = geo.skew(second.d_pos)
    j_rot_bg = second.d_rot.T @ first.j_rot_bg + second.j_rot_bg
    j_vel_bg = (first.j_vel_bg + first.d_rot @ second.j_vel_bg
                - first.d_rot @ vel2_skew @ first.j_rot_bg)
    j_vel_ba = first.j_vel_ba + first.d_rot @ second.j_vel_ba
    j_pos_bg = (first.j_pos_bg + first.j_vel_bg * dt
                + first.d_rot @ second.j_pos_bg
                - first.d_rot @ pos2_skew @ first.j_rot_bg)
    j_pos_ba = first.j_pos_ba + first.j_vel_ba * dt + first.d_rot @ second.j_pos_ba
    return replace(first, d_rot=d_rot, d_pos=d_pos, d_vel=d_vel,
                   dt_total=first.dt_total + dt, count=first.count + second.count,
                   j_rot_bg=j_rot_bg, j_pos_bg=j_pos_bg, j_pos_ba=j_pos_ba,
                   j_vel_bg=j_vel_bg, j_vel_ba=j_vel_ba)


def corrected_increments(pre: PreintegratedImu, bias_gyro: np.ndarray,
                         bias_accel: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Increments corrected to first order for a moved bias estimate."""
    dbg = np.asarray(bias_gyro, dtype=float) - pre.bias_gyro
    dba = np.asarray(bias_accel, dtype=float) - pre.bias_accel
    d_rot = pre.d_rot @ geo.exp_so3(pre.j_rot_bg @ dbg)
    d_pos = pre.d_pos + pre.j_pos_bg @ dbg + pre.j_pos_ba @ dba
    d_vel = pre.d_vel + pre.j_vel_bg @ dbg + pre.j_vel_ba @ dba
    return d_rot, d_pos, d_vel


def predict(pre: PreintegratedImu, rot_i: np.ndarray, p_i: np.ndarray,
            v_i: np.ndarray, gravity: np.ndarray = GRAVITY
            ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dead-reckon keyframe j from keyframe i through the increments."""
    dt = pre.dt_total
    rot_j = rot_i @ pre.d_rot
    v_j = v_i + gravity * dt + rot_i @ pre.d_vel
    p_j = p_i + v_i * dt + 0.5 * gravity * dt * dt + rot_i @ pre.d_pos
    return rot_j, p_j, v_j


def _increments(pre: PreintegratedImu, bias_i):
    if bias_i is None:
        return pre.d_rot, pre.d_pos, pre.d_vel
    return corrected_increments(pre, bias_i[0:3], bias_i[3:6])


def residual_rotation(pre: PreintegratedImu, rot_i: np.ndarray,
                      rot_j: np.ndarray, bias_i=None) -> np.ndarray:
    d_rot, _, _ = _increments(pre, bias_i)
    return geo.log_so3(d_rot.T @ rot_i.T @ rot_j)


def residual_position(pre: PreintegratedImu, rot_i: np.ndarray, p_i: np.ndarray,
                      v_i: np.ndarray, p_j: np.ndarray,
                      gravity: np.ndarray = GRAVITY, bias_i=None) -> np.ndarray:
    dt = pre.dt_total
    _, d_pos, _ = _increments(pre, bias_i)
    return rot_i.T @ (p_j - p_i - v_i * dt - 0.5 * gravity * dt * dt) - d_pos


def residual_velocity(pre: PreintegratedImu, rot_i: np.ndarray, v_i: np.ndarray,
                      v_j: np.ndarray, gravity: np.ndarray = GRAVITY,
                      bias_i=None) -> np.ndarray:
    dt = pre.dt_total
    _, _, d_vel = _increments(pre, bias_i)
    return rot_i.T @ (v_j - v_i - gravity * dt) - d_vel


def residual_bias(bias_i: np.ndarray, bias_j: np.ndarray) -> np.ndarray:
    """Stacked gyro/accel bias difference between keyframes (6-vector)."""
    return np.asarray(bias_j, dtype=float) - np.asarray(bias_i, dtype=float)


def slice_imu_between(imu: Sequence[ImuSample], t_start: int, t_end: int
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Extract (omega, accel, dt) arrays for samples with t in [t_start, t_end).

    Each sample's dt runs to the next sample's timestamp, capped at t_end so
    batches tile the timeline exactly.
    """
    omegas, accels, dts = [], [], []
    for k in range(len(imu)):
        t = imu[k].t
        if t < t_start or t >= t_end:
            continue
        t_next = imu[k + 1].t if k + 1 < len(imu) else t_end
        dt = (min(t_next, t_end) - t) * 1e-9
        if dt <= 0.0:
            continue
        omegas.append(imu[k].omega)
        accels.append(imu[k].accel)
        dts.append(dt)
    return (np.array(omegas).reshape(-1, 3), np.array(accels).reshape(-1, 3),
            np.array(dts))
