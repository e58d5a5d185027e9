"""Unconditional-generation metrics and tracking-error statistics.

Generated transitions are compared against an archive of every dataset
transition (pairs of consecutive normalized proprioceptive states): the
match distance is the exact nearest-pair squared distance, transitions
beyond a threshold are filtered as invalid, and coverage counts how much
of the archive is reached by valid generations.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from . import kernels
from .latent_models import sample_prior
from .toy_world import DT, TIP_LEN, ToyAction, ToyState, proprio, step

DEFAULT_THRESHOLD = 5.0  # normalized squared-distance units


@dataclass
class TransitionArchive:
    pairs: np.ndarray  # (N, 2*P) normalized [s, s'] rows
    mean: np.ndarray  # stats used for normalization (per proprio dim)
    std: np.ndarray

    def __post_init__(self):
        if len(self.pairs) < 1:
            raise ContractError("archive needs at least one transition")

    @property
    def size(self):
        return len(self.pairs)

    def normalize_pair(self, s, s_next):
        return np.concatenate([(s - self.mean) / self.std, (s_next - self.mean) / self.std])


def build_archive(dataset):
    """Archive of all consecutive proprio pairs in the dataset."""
    rows = []
    for clip in dataset.clips:
        feats = np.stack([proprio(s) for s in clip.states])
        normed = (feats - dataset.mean) / dataset.std
        rows.append(np.concatenate([normed[:-1], normed[1:]], axis=1))
    return TransitionArchive(np.concatenate(rows), dataset.mean.copy(), dataset.std.copy())


def match_distance(s, s_next, archive):
    """Exact nearest-archive squared distance of one raw transition."""
    query = archive.normalize_pair(np.asarray(s, float), np.asarray(s_next, float))
    idx, dist = kernels.nearest_code(query[None, :], archive.pairs)
    return float(dist[0]), int(idx[0])


@dataclass
class MetricReport:
    d_mean: float
    d_std: float
    filtered_pct: float
    coverage_pct: float
    threshold: float
    transitions: int
    valid_transitions: int

    @property
    def undefined(self):
        return self.valid_transitions == 0

    def csv_row(self, model, m, episodes):
        d_mean = "" if self.undefined else f"{self.d_mean:.6f}"
        d_std = "" if self.undefined else f"{self.d_std:.6f}"
        return {
            "model": model,
            "M": m,
            "episodes": episodes,
            "threshold": self.threshold,
            "d_mean": d_mean,
            "d_std": d_std,
            "filtered_pct": f"{self.filtered_pct:.3f}",
            "coverage_pct": f"{self.coverage_pct:.3f}",
        }

    def text_block(self):
        d = "undefined" if self.undefined else f"{self.d_mean:.4f} +/- {self.d_std:.4f}"
        return (
            f"transitions: {self.transitions} (valid {self.valid_transitions})\n"
            f"distance:    {d}\n"
            f"filtered:    {self.filtered_pct:.2f}%\n"
            f"coverage:    {self.coverage_pct:.2f}% (threshold {self.threshold})"
        )


REPORT_COLUMNS = ("model", "M", "episodes", "threshold",
                  "d_mean", "d_std", "filtered_pct", "coverage_pct")


def report_transitions(transitions, archive, threshold, coverage_mode="nearest"):
    """Score raw (s, s') transitions against the archive.

    `transitions` is an (T, 2*P) array of unnormalized proprio pairs.
    Coverage counts distinct archive pairs that are the nearest match of a
    valid transition; `coverage_mode="incidence"` instead counts archive
    pairs within the threshold of any valid transition.
    """
    if threshold <= 0:
        raise ContractError("threshold must be positive")
    transitions = np.asarray(transitions, dtype=float)
    p = archive.mean.size
    normed = np.concatenate(
        [
            (transitions[:, :p] - archive.mean) / archive.std,
            (transitions[:, p:] - archive.mean) / archive.std,
        ],
        axis=1,
    )
    idx, dist = kernels.nearest_code(normed, archive.pairs)
    valid = dist <= threshold
    n_valid = int(valid.sum())
    if coverage_mode == "nearest":
        covered = np.unique(idx[valid]).size
    elif coverage_mode == "incidence":
        covered = 0
        for row in archive.pairs:
            diff = normed[valid] - row
            if diff.size and np.min(np.sum(diff * diff, axis=1)) <= threshold:
                covered += 1
    else:
        raise ContractError(f"unknown coverage mode {coverage_mode!r}")
    d_valid = dist[valid]
    return MetricReport(
        d_mean=float(d_valid.mean()) if n_valid else float("nan"),
        d_std=float(d_valid.std()) if n_valid else float("nan"),
        filtered_pct=100.0 * (len(dist) - n_valid) / len(dist),
        coverage_pct=100.0 * covered / archive.size,
        threshold=float(threshold),
        transitions=len(dist),
        valid_transitions=n_valid,
    )


def prior_rollout_states(model, dataset, m, episodes, seconds, rng):
    """Drive the frozen decoder with independent prior samples per step.

    Each episode starts from a random reference state; returns one (T+1, 6)
    state-row array per episode.
    """
    steps_per_ep = int(round(seconds / DT))
    episodes_out = []
    for _ in range(episodes):
        clip = dataset.clips[rng.integers(len(dataset.clips))]
        state = clip.states[rng.integers(len(clip.states))].copy()
        rows = [state.as_row()]
        for _ in range(steps_per_ep):
            s_norm = (proprio(state) - dataset.mean) / dataset.std
            z_bar = sample_prior(model, s_norm[None], rng, m)
            action = model.decode(s_norm[None], z_bar)[0]
            state = step(state, ToyAction.from_array(action))
            rows.append(state.as_row())
        episodes_out.append(np.stack(rows))
    return episodes_out


def prior_rollout_transitions(model, dataset, m, episodes, seconds, rng):
    """Consecutive proprio pairs of prior-driven rollouts."""
    out = []
    for rows in prior_rollout_states(model, dataset, m, episodes, seconds, rng):
        feats = np.stack([proprio(ToyState.from_row(r)) for r in rows])
        out.append(np.concatenate([feats[:-1], feats[1:]], axis=1))
    return np.concatenate(out)


def evaluate_rollouts(model, archive, dataset, m=None, episodes=8, seconds=30.0,
                      threshold=DEFAULT_THRESHOLD, seed=0, coverage_mode="nearest"):
    """Full prior-rollout evaluation; deterministic for a given seed."""
    if not model.frozen:
        raise ContractError("evaluation requires a frozen model")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4,)))
    transitions = prior_rollout_transitions(model, dataset, m, episodes, seconds, rng)
    return report_transitions(transitions, archive, threshold, coverage_mode)


# ---------------------------------------------------------------------------
# tracking errors and smoothness


def _positions(rows):
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[1] < 2:
        raise ContractError("expected an (T, >=2) state-row array")
    return rows


def _tips(rows):
    return rows[:, 0:2] + TIP_LEN * np.stack(
        [np.cos(rows[:, 4]), np.sin(rows[:, 4])], axis=1
    )


def tracking_errors(rollout, reference):
    """Position/tip/velocity/acceleration errors between state-row sequences."""
    a, b = _positions(rollout), _positions(reference)
    if len(a) != len(b):
        raise ContractError("sequences must have equal length")
    if len(a) < 3:
        raise ContractError("need at least 3 states for acceleration errors")
    pos_err = np.linalg.norm(a[:, 0:2] - b[:, 0:2], axis=1).mean()
    tip_err = np.linalg.norm(_tips(a) - _tips(b), axis=1).mean()

    def central_vel(p):
        return (p[2:] - p[:-2]) / (2 * DT)

    def central_acc(p):
        return (p[2:] - 2 * p[1:-1] + p[:-2]) / DT**2

    vel_err = np.linalg.norm(central_vel(a[:, 0:2]) - central_vel(b[:, 0:2]), axis=1).mean()
    acc_err = np.linalg.norm(central_acc(a[:, 0:2]) - central_acc(b[:, 0:2]), axis=1).mean()
    return {
        "mean_pos_err": float(pos_err),
        "mean_tip_err": float(tip_err),
        "vel_err": float(vel_err),
        "acc_err": float(acc_err),
    }


def smoothness(rollout):
    """Mean finite-difference acceleration magnitude of the root position."""
    p = _positions(rollout)[:, 0:2]
    if len(p) < 3:
        raise ContractError("need at least 3 states")
    acc = (p[2:] - 2 * p[1:-1] + p[:-2]) / DT**2
    return float(np.linalg.norm(acc, axis=1).mean())
