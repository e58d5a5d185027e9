"""Planar point-mass-with-heading world and synthetic reference motions.

Desk-scale stand-in for a physics simulator plus a motion-capture dataset:
deterministic semi-implicit Euler dynamics, five analytic trajectory
families, a PD expert controller, featurization for the latent models, and
the early-termination rules used during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError

DT = 1.0 / 30.0
DAMP = 0.995
V_MAX = 10.0
OMEGA_MAX = 20.0
A_MAX = 20.0
TIP_LEN = 0.2

FAMILIES = ("circle", "lemniscate", "dash", "spiral", "zigzag")

PROPRIO_DIM = 7  # [v(2), cos, sin, omega, tip-offset(2)]
TARGET_DIM = 8  # [dp(2), dv(2), dtheta, domega, dtip(2)]
ACTION_DIM = 3  # [a_lin(2), a_ang]


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.arctan2(np.sin(a), np.cos(a))
    return np.where(w == -np.pi, np.pi, w) if isinstance(w, np.ndarray) and w.ndim else (
        np.pi if w == -np.pi else float(w)
    )


@dataclass
class ToyState:
    p: np.ndarray  # position (2,)
    v: np.ndarray  # velocity (2,)
    theta: float  # heading, wrapped to (-pi, pi]
    omega: float  # angular velocity

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.theta = float(self.theta)
        self.omega = float(self.omega)

    @property
    def tip(self):
        return self.p + TIP_LEN * np.array([np.cos(self.theta), np.sin(self.theta)])

    def copy(self):
        return ToyState(self.p.copy(), self.v.copy(), self.theta, self.omega)

    def as_row(self):
        return np.concatenate([self.p, self.v, [self.theta, self.omega]])

    @classmethod
    def from_row(cls, row):
        return cls(row[0:2], row[2:4], row[4], row[5])


@dataclass
class ToyAction:
    a_lin: np.ndarray  # (2,), component-clamped to [-A_MAX, A_MAX]
    a_ang: float

    def __post_init__(self):
        self.a_lin = np.clip(np.asarray(self.a_lin, dtype=np.float64), -A_MAX, A_MAX)
        self.a_ang = float(np.clip(self.a_ang, -A_MAX, A_MAX))

    def as_array(self):
        return np.array([self.a_lin[0], self.a_lin[1], self.a_ang])

    @classmethod
    def from_array(cls, a):
        return cls(a[:2], a[2])


def step(state: ToyState, action: ToyAction) -> ToyState:
    """Semi-implicit Euler with damping and velocity clamps."""
    a = action.as_array()
    if not np.all(np.isfinite(a)):
        raise ContractError("non-finite action")
    v = DAMP * (state.v + a[:2] * DT)
    speed = np.linalg.norm(v)
    if speed > V_MAX:
        v = v * (V_MAX / speed)
    p = state.p + v * DT
    omega = DAMP * (state.omega + a[2] * DT)
    omega = float(np.clip(omega, -OMEGA_MAX, OMEGA_MAX))
    theta = wrap_angle(state.theta + omega * DT)
    return ToyState(p, v, theta, omega)


def proprio(state: ToyState) -> np.ndarray:
    """Proprioceptive feature vector (no absolute position)."""
    c, s = np.cos(state.theta), np.sin(state.theta)
    return np.array(
        [state.v[0], state.v[1], c, s, state.omega, TIP_LEN * c, TIP_LEN * s]
    )


def target_feature(state: ToyState, target: ToyState) -> np.ndarray:
    """State-difference featurization of a tracking target."""
    return np.concatenate(
        [
            state.p - target.p,
            state.v - target.v,
            [wrap_angle(state.theta - target.theta)],
            [state.omega - target.omega],
            state.tip - target.tip,
        ]
    )


# ---------------------------------------------------------------------------
# reference clips


@dataclass
class ReferenceClip:
    states: list  # ToyState sequence at DT
    family: str
    params: dict
    clip_id: int

    def __len__(self):
        return len(self.states)


@dataclass
class Dataset:
    clips: list
    mean: np.ndarray  # per-dimension stats over proprio features
    std: np.ndarray
    seed: int
    config: dict = field(default_factory=dict)

    def all_proprio(self):
        return np.stack([proprio(s) for c in self.clips for s in c.states])


def _curve(family, params, t):
    """Analytic position and velocity curves for one family."""
    if family == "circle":
        r, w, phase = params["radius"], params["omega"], params["phase"]
        c = params["center"]
        u = w * t + phase
        pos = np.stack([c[0] + r * np.cos(u), c[1] + r * np.sin(u)], axis=1)
        vel = np.stack([-r * w * np.sin(u), r * w * np.cos(u)], axis=1)
        return pos, vel
    if family == "lemniscate":
        a, w, phase = params["scale"], params["omega"], params["phase"]
        u = w * t + phase
        pos = np.stack([a * np.sin(u), a * np.sin(u) * np.cos(u)], axis=1)
        vel = np.stack([a * w * np.cos(u), a * w * np.cos(2 * u)], axis=1)
        return pos, vel
    if family == "dash":
        # accelerate-stop-accelerate along a line: sin^2 speed profile with
        # zero velocity at multiples of the period
        d, speed, period = params["direction"], params["speed"], params["period"]
        s = speed * (t / 2.0 - np.sin(2 * np.pi * t / period) * period / (4 * np.pi))
        sdot = speed * np.sin(np.pi * t / period) ** 2
        return np.outer(s, d), np.outer(sdot, d)
    if family == "spiral":
        r0, growth, w, phase = params["r0"], params["growth"], params["omega"], params["phase"]
        r = r0 + growth * t
        u = w * t + phase
        pos = np.stack([r * np.cos(u), r * np.sin(u)], axis=1)
        vel = np.stack(
            [growth * np.cos(u) - r * w * np.sin(u), growth * np.sin(u) + r * w * np.cos(u)],
            axis=1,
        )
        return pos, vel
    if family == "zigzag":
        speed, amp, w, phase = params["speed"], params["amp"], params["omega"], params["phase"]
        u = w * t + phase
        pos = np.stack([speed * t, amp * np.sin(u)], axis=1)
        vel = np.stack([np.full_like(t, speed), amp * w * np.cos(u)], axis=1)
        return pos, vel
    raise ContractError(f"unknown family {family!r}")


def _sample_params(family, rng):
    if family == "circle":
        return {
            "radius": rng.uniform(0.5, 1.5),
            "omega": rng.uniform(1.5, 2.8) * rng.choice([-1.0, 1.0]),
            "phase": rng.uniform(0, 2 * np.pi),
            "center": rng.uniform(-1, 1, 2),
        }
    if family == "lemniscate":
        return {
            "scale": rng.uniform(1.0, 2.0),
            "omega": rng.uniform(0.8, 1.4) * rng.choice([-1.0, 1.0]),
            "phase": rng.uniform(0, 2 * np.pi),
        }
    if family == "dash":
        ang = rng.uniform(0, 2 * np.pi)
        return {
            "direction": np.array([np.cos(ang), np.sin(ang)]),
            "speed": rng.uniform(2.0, 4.0),
            "period": rng.uniform(0.9, 1.6),
        }
    if family == "spiral":
        return {
            "r0": rng.uniform(0.3, 0.8),
            "growth": rng.uniform(0.15, 0.4),
            "omega": rng.uniform(1.2, 2.0) * rng.choice([-1.0, 1.0]),
            "phase": rng.uniform(0, 2 * np.pi),
        }
    if family == "zigzag":
        return {
            "speed": rng.uniform(2.0, 3.0),
            "amp": rng.uniform(0.3, 0.7),
            "omega": rng.uniform(2.2, 3.2),
            "phase": rng.uniform(0, 2 * np.pi),
        }
    raise ContractError(f"unknown family {family!r}")


def make_clip(family, params, clip_id, seconds=4.0):
    """Build one kinematically consistent clip from an analytic curve.

    Velocities are the analytic curve derivatives; positions are their
    exact Euler integral, so (p_k - p_{k-1}) / DT equals the stored v_k
    bit-exactly (matching the integrator).  Headings follow the velocity
    direction and are held through zero-velocity pauses.
    """
    n = int(round(seconds / DT)) + 1
    t = np.arange(n) * DT
    pos0, vel = _curve(family, params, t)
    pos = np.empty_like(vel)
    pos[0] = pos0[0]
    for k in range(1, n):
        pos[k] = pos[k - 1] + vel[k] * DT

    theta = np.zeros(n)
    speeds = np.linalg.norm(vel, axis=1)
    moving = np.flatnonzero(speeds > 1e-6)
    first = moving[0] if moving.size else 0
    prev = np.arctan2(vel[first, 1], vel[first, 0])
    for k in range(n):
        if np.linalg.norm(vel[k]) > 1e-6:
            prev = np.arctan2(vel[k, 1], vel[k, 0])
        theta[k] = prev
    omega = np.zeros(n)
    omega[1:] = [wrap_angle(theta[k] - theta[k - 1]) / DT for k in range(1, n)]
    omega[0] = omega[1]

    states = [ToyState(pos[k], vel[k], theta[k], omega[k]) for k in range(n)]
    return ReferenceClip(states=states, family=family, params=params, clip_id=clip_id)


def generate_dataset(
    families=FAMILIES, clips_per_family=4, clip_seconds=4.0, seed=0
) -> Dataset:
    """Deterministic synthetic dataset plus per-dimension proprio stats."""
    if not families:
        raise ContractError("at least one family required")
    if clips_per_family < 1:
        raise ContractError("clips_per_family must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    clips = []
    cid = 0
    for family in families:
        for _ in range(clips_per_family):
            params = _sample_params(family, rng)
            clips.append(make_clip(family, params, cid, clip_seconds))
            cid += 1
    feats = np.stack([proprio(s) for c in clips for s in c.states])
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std[std < 1e-12] = 1.0  # degenerate dimensions
    return Dataset(
        clips=clips,
        mean=mean,
        std=std,
        seed=seed,
        config={
            "families": list(families),
            "clips_per_family": clips_per_family,
            "clip_seconds": clip_seconds,
        },
    )


# ---------------------------------------------------------------------------
# expert and termination


# kd = 1/DT makes the velocity loop deadbeat; small kp avoids overshooting
# the one-step-ahead target while still correcting drift
DEFAULT_GAINS = {"kp": 6.0, "kd": 30.0, "kp_theta": 6.0, "kd_theta": 30.0}


def expert_action(state: ToyState, target: ToyState, gains=None) -> ToyAction:
    """Analytic PD tracking controller (the distillation teacher)."""
    g = DEFAULT_GAINS if gains is None else gains
    a_lin = g["kp"] * (target.p - state.p) + g["kd"] * (target.v - state.v)
    a_ang = g["kp_theta"] * wrap_angle(target.theta - state.theta) + g["kd_theta"] * (
        target.omega - state.omega
    )
    return ToyAction(a_lin, a_ang)


def early_terminate_imitation(state: ToyState, target: ToyState) -> bool:
    """Body deviation beyond 0.5 m ends an imitation episode."""
    return bool(
        max(
            np.linalg.norm(state.p - target.p),
            np.linalg.norm(state.tip - target.tip),
        )
        > 0.5
    )


def early_terminate_tracking(state: ToyState, target_tip) -> bool:
    """Tip deviation beyond 1 m ends a tracking episode."""
    return bool(np.linalg.norm(state.tip - np.asarray(target_tip)) > 1.0)


def imitation_reward(state: ToyState, target: ToyState) -> float:
    """Product of four exponential tracking terms."""
    r_root = np.exp(-10.0 * np.sum((state.p - target.p) ** 2))
    r_q = np.exp(-2.0 * wrap_angle(state.theta - target.theta) ** 2)
    r_alpha = np.exp(-0.5 * (state.omega - target.omega) ** 2)
    r_ee = np.exp(-40.0 * np.sum((state.tip - target.tip) ** 2))
    return float(r_root * r_q * r_alpha * r_ee)
