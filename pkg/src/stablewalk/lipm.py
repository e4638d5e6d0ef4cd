"""Linear inverted pendulum dynamics on a constraint plane.

The horizontal CoM motion obeys ``p_com = (z_c / g) * p_com_ddot + p_zmp``.
Everything here is a pure function over small value types.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from stablewalk.errors import ConfigurationError, DomainError, InvalidStateError

DEFAULT_STANDING_HEIGHT = 0.58
DEFAULT_FEEDBACK_GAIN = 2.0


def _vec2(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.shape != (2,):
        raise InvalidStateError(f"{name} must be a 2-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidStateError(f"{name} contains non-finite values: {arr}")
    return arr


@dataclass(frozen=True)
class LipmParams:
    z_c: float = DEFAULT_STANDING_HEIGHT
    g: float = 9.81
    k_p: float = DEFAULT_FEEDBACK_GAIN

    def __post_init__(self):
        for name in ("z_c", "g", "k_p"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ConfigurationError(f"LipmParams.{name} must be positive, got {value}")

    @property
    def omega(self) -> float:
        """Natural frequency sqrt(g / z_c) of the pendulum (1/s)."""
        return float(np.sqrt(self.g / self.z_c))


@dataclass(frozen=True)
class LipmState:
    p_com: np.ndarray
    v_com: np.ndarray = field(default_factory=lambda: np.zeros(2))
    p_zmp: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "p_com", _vec2(self.p_com, "p_com"))
        object.__setattr__(self, "v_com", _vec2(self.v_com, "v_com"))
        object.__setattr__(self, "p_zmp", _vec2(self.p_zmp, "p_zmp"))


@dataclass(frozen=True)
class ConstraintPlane:
    """Plane the CoM moves on: unit ``normal`` and height ``intercept`` (m)."""

    normal: np.ndarray
    intercept: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(-1)
        if n.shape != (3,) or not np.all(np.isfinite(n)):
            raise InvalidStateError(f"normal must be a finite 3-vector, got {n}")
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise InvalidStateError(f"normal must have unit length, |n| = {np.linalg.norm(n)}")
        if not np.isfinite(self.intercept) or self.intercept <= 0:
            raise InvalidStateError(f"intercept must be positive, got {self.intercept}")
        object.__setattr__(self, "normal", n)

    @classmethod
    def through(cls, com_pos, contact_pos, normal=(0.0, 0.0, 1.0)) -> "ConstraintPlane":
        """Plane whose intercept is the CoM height above ``contact_pos`` along gravity.

        The normal is recorded for analysis only; it does not enter the intercept.
        """
        n = np.asarray(normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        height = float(np.asarray(com_pos)[2] - np.asarray(contact_pos)[2])
        return cls(normal=n, intercept=height)


def lipm_accel(state: LipmState, params: LipmParams) -> np.ndarray:
    """Horizontal CoM acceleration (g / z_c) * (p_com - p_zmp)."""
    return (params.g / params.z_c) * (state.p_com - state.p_zmp)


def desired_com_position(p_zmp, v_cmd, v_actual, params: LipmParams) -> np.ndarray:
    """CoM target from velocity feedback: p_zmp + (z_c / g) * k_p * (v_cmd - v_actual)."""
    p_zmp = _vec2(p_zmp, "p_zmp")
    v_err = _vec2(v_cmd, "v_cmd") - _vec2(v_actual, "v_actual")
    return p_zmp + (params.z_c / params.g) * params.k_p * v_err


def desired_com_position_batch(p_zmp: np.ndarray, v_cmd: np.ndarray, v_actual: np.ndarray,
                               z_c: float | np.ndarray, g: float, k_p: float) -> np.ndarray:
    """Vectorised :func:`desired_com_position` over a leading batch axis (no validation)."""
    scale = np.asarray(z_c, dtype=np.float64) / g * k_p
    return p_zmp + np.expand_dims(scale, -1) * (v_cmd - v_actual)


def lipm_closed_form(state0: LipmState, params: LipmParams, t: float) -> LipmState:
    """Exact propagation with the ZMP held fixed over ``[0, t]``."""
    if not np.isfinite(t):
        raise InvalidStateError(f"t must be finite, got {t}")
    if t < 0:
        raise DomainError(f"propagation time must be non-negative, got {t}")
    w = params.omega
    c, s = np.cosh(w * t), np.sinh(w * t)
    offset = state0.p_com - state0.p_zmp
    p = state0.p_zmp + offset * c + state0.v_com * (s / w)
    v = offset * (w * s) + state0.v_com * c
    return LipmState(p_com=p, v_com=v, p_zmp=state0.p_zmp.copy())


def integrate_lipm(state: LipmState, params: LipmParams, dt: float, steps: int) -> LipmState:
    """Fixed-step classical Runge-Kutta propagation of the pendulum ODE."""
    if not (np.isfinite(dt) and dt > 0):
        raise DomainError(f"dt must be positive, got {dt}")
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    k = params.g / params.z_c
    zmp = state.p_zmp
    x = state.p_com.copy()
    v = state.v_com.copy()
    half = 0.5 * dt
    for _ in range(int(steps)):
        a1 = k * (x - zmp)
        x2, v2 = x + half * v, v + half * a1
        a2 = k * (x2 - zmp)
        x3, v3 = x + half * v2, v + half * a2
        a3 = k * (x3 - zmp)
        x4, v4 = x + dt * v3, v + dt * a3
        a4 = k * (x4 - zmp)
        x = x + (dt / 6.0) * (v + 2.0 * v2 + 2.0 * v3 + v4)
        v = v + (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise InvalidStateError("integration produced non-finite state")
    return LipmState(p_com=x, v_com=v, p_zmp=zmp.copy())
