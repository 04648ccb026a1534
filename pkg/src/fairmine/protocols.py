"""One-step proposer selection and reward application for each incentive model.

The batch kernels operate on ``(trials, miners)`` float arrays so the
Monte Carlo engine can advance many trials in lockstep; the public
single-game operations wrap the same kernels with a batch of one.  All
kernels consume a fixed number of uniforms per step from the caller's
stream, which keeps trial streams reproducible independent of batching.

Hash races use ideal continuous uniforms; the 2^256 hash grid of real
clients adds at most 2^-256 discretization error and is not modeled.
"""

from __future__ import annotations

import numpy as np

from .core import (
    MinerState,
    ProtocolSpec,
    RaceOutcome,
    ShareVector,
    ValidationError,
)

DEFAULT_RACE_SCALE = 1.0 / 600.0  # ~10 min blocks at 1-second timestamps
MAX_RACE_MINERS = 64  # polynomial expansion loses precision beyond this


# ---------------------------------------------------------------------------
# batch kernels


def categorical_winner(shares: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Winner index per row, drawn proportional to the row's shares.

    ``shares`` is (B, m) with rows summing to ~1, ``u`` is (B,) uniforms.
    """
    cum = np.cumsum(shares, axis=1)
    idx = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(idx, shares.shape[1] - 1)


def race_winner(times: np.ndarray, u_tie: np.ndarray) -> np.ndarray:
    """Index of the minimum time per row; exact ties broken uniformly."""
    winner = np.argmin(times, axis=1)
    best = times[np.arange(times.shape[0]), winner]
    tie = times == best[:, None]
    n_tied = tie.sum(axis=1)
    for r in np.nonzero(n_tied > 1)[0]:
        tied = np.nonzero(tie[r])[0]
        k = min(int(u_tie[r] * len(tied)), len(tied) - 1)
        winner[r] = tied[k]
    return winner


def slpos_race_times(shares: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Lottery times of the single-lottery draw: u_i / share_i."""
    return u / shares


def fslpos_race_times(shares: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Exponential-race times -ln(1-u_i) / share_i of the fixed lottery."""
    return -np.log1p(-u) / shares


def geometric_race_times(shares: np.ndarray, u: np.ndarray, race_scale: float) -> np.ndarray:
    """First-success timestamps of per-timestamp Bernoulli trials.

    Success probability per timestamp is race_scale * share; the inverse
    CDF maps one uniform per miner to a geometric variate on {1, 2, ...}.
    """
    p = race_scale * shares
    if np.any(p >= 1.0):
        raise ValidationError("race_scale * share must stay below 1")
    t = np.ceil(np.log1p(-u) / np.log1p(-p))
    return np.maximum(t, 1.0)


def step_budget(kind: str, m: int, mlpos_mode: str = "proportional") -> int:
    """Uniforms consumed per simulated block/epoch."""
    if kind in ("slpos", "fslpos") or (kind == "mlpos" and mlpos_mode == "geometric-race"):
        return m + 1  # m race draws plus one tie-break draw
    return 1


# ---------------------------------------------------------------------------
# single-game operations


def _shares_of(states, total_stake: float) -> np.ndarray:
    stakes = np.array([s.effective_stake for s in states], dtype=np.float64)
    if total_stake <= 0:
        raise ValidationError("total stake must be positive")
    return stakes / total_stake


def pow_step(shares: ShareVector, rng: np.random.Generator) -> int:
    """Winner of the next block, proportional to fixed hash shares."""
    u = rng.random(1)
    return int(categorical_winner(shares.as_array()[None, :], u)[0])


def mlpos_step(
    states,
    total_stake: float,
    rng: np.random.Generator,
    mode: str = "proportional",
    race_scale: float = DEFAULT_RACE_SCALE,
) -> int:
    """Winner of the next multi-lottery block.

    Proportional mode draws the winner with probability stake/total.
    Geometric-race mode simulates the per-timestamp trial race; the
    earliest success wins and simultaneous successes are tie-broken
    uniformly.
    """
    sh = _shares_of(states, total_stake)
    if mode == "proportional":
        u = rng.random(1)
        return int(categorical_winner(sh[None, :], u)[0])
    if mode != "geometric-race":
        raise ValidationError(f"unknown mlpos mode {mode!r}")
    m = len(sh)
    u = rng.random(m + 1)
    times = geometric_race_times(sh[None, :], u[None, :m], race_scale)
    return int(race_winner(times, u[m:])[0])


def mlpos_exact_race_prob(p_a: float, p_b: float) -> float:
    """Two-miner geometric-race win probability for the first miner.

    Pr[T_A < T_B] + Pr[T_A = T_B]/2 = (p_A - p_A p_B / 2) / (p_A + p_B - p_A p_B).
    """
    if not (0.0 < p_a < 1.0 and 0.0 < p_b < 1.0):
        raise ValidationError("per-timestamp probabilities must lie in (0, 1)")
    return (p_a - p_a * p_b / 2.0) / (p_a + p_b - p_a * p_b)


def slpos_step(states, total_stake: float, rng: np.random.Generator) -> RaceOutcome:
    """Single-lottery race: each miner's time is u_i / share_i, minimum wins."""
    sh = _shares_of(states, total_stake)
    m = len(sh)
    u = rng.random(m + 1)
    times = slpos_race_times(sh[None, :], u[None, :m])
    winner = int(race_winner(times, u[m:])[0])
    return RaceOutcome(times=tuple(times[0]), winner=winner)


def fslpos_step(states, total_stake: float, rng: np.random.Generator) -> RaceOutcome:
    """Fixed single-lottery race with exponential times; wins proportionally."""
    sh = _shares_of(states, total_stake)
    m = len(sh)
    u = rng.random(m + 1)
    times = fslpos_race_times(sh[None, :], u[None, :m])
    winner = int(race_winner(times, u[m:])[0])
    return RaceOutcome(times=tuple(times[0]), winner=winner)


def cpos_epoch(states, total_stake: float, spec: ProtocolSpec, rng: np.random.Generator) -> int:
    """Winner of the next epoch's proposer lottery, proportional to stake.

    Each epoch issues the proposer reward to one winner plus the
    inflation reward to every miner proportionally to stake; both are
    credited by apply_reward.
    """
    if spec.kind != "cpos":
        raise ValidationError("cpos_epoch requires a cpos protocol spec")
    sh = _shares_of(states, total_stake)
    u = rng.random(1)
    return int(categorical_winner(sh[None, :], u)[0])


def slpos_win_probs(shares: ShareVector) -> list:
    """Per-miner winning probability of one single-lottery block.

    Integrates share_i * prod_{j != i} (1 - share_j z) over z in
    [0, 1/max_j share_j] by expanding the product into polynomial
    coefficients and integrating term-wise.
    """
    sh = shares.as_array()
    m = len(sh)
    if m > MAX_RACE_MINERS:
        raise ValidationError(f"supports at most {MAX_RACE_MINERS} miners")
    upper = 1.0 / float(np.max(sh))
    probs = []
    for i in range(m):
        coeffs = np.zeros(m)
        coeffs[0] = 1.0
        deg = 0
        for j in range(m):
            if j == i:
                continue
            coeffs[1 : deg + 2] -= sh[j] * coeffs[: deg + 1].copy()
            deg += 1
        powers = upper ** np.arange(1, deg + 2)
        integral = float(np.sum(coeffs[: deg + 1] * powers / np.arange(1, deg + 2)))
        probs.append(float(sh[i]) * integral)
    return probs


def slpos_two_miner_win_prob(z: float) -> float:
    """Probability that a miner holding stake fraction z wins the next block."""
    if not 0.0 <= z <= 1.0:
        raise ValidationError("stake fraction must lie in [0, 1]")
    if z <= 0.5:
        return z / (2.0 * (1.0 - z))
    return 1.0 - (1.0 - z) / (2.0 * z)


def drift(z: float) -> float:
    """Expected one-step change direction of the stake fraction in SL-PoS.

    Zero exactly at {0, 1/2, 1}; negative on (0, 1/2), positive on (1/2, 1).
    """
    return slpos_two_miner_win_prob(z) - z


def apply_reward(states, winner: int, spec: ProtocolSpec, t: int):
    """Credit one block's (epoch's) rewards and update stake in place.

    Rewards are credited immediately.  With withholding enabled they sit
    in pending_reward until release_pending moves them into effective
    stake; PoW rewards never feed back into hash power.
    """
    w = spec.proposer_reward
    states[winner].wins += 1
    if spec.kind == "pow":
        states[winner].credited_reward += w
        return states
    amounts = [0.0] * len(states)
    amounts[winner] += w
    if spec.kind == "cpos" and spec.inflation_reward > 0:
        total = sum(s.effective_stake for s in states)
        for i, s in enumerate(states):
            amounts[i] += spec.inflation_reward * s.effective_stake / total
    withheld = spec.withhold_period > 0
    for s, amt in zip(states, amounts):
        s.credited_reward += amt
        if withheld:
            s.pending_reward += amt
        else:
            s.effective_stake += amt
    return states


def release_pending(states):
    """Move all withheld rewards into effective stake."""
    for s in states:
        s.effective_stake += s.pending_reward
        s.pending_reward = 0.0
    return states


__all__ = [
    "DEFAULT_RACE_SCALE",
    "MAX_RACE_MINERS",
    "categorical_winner",
    "race_winner",
    "slpos_race_times",
    "fslpos_race_times",
    "geometric_race_times",
    "step_budget",
    "pow_step",
    "mlpos_step",
    "mlpos_exact_race_prob",
    "slpos_step",
    "fslpos_step",
    "cpos_epoch",
    "slpos_win_probs",
    "slpos_two_miner_win_prob",
    "drift",
    "apply_reward",
    "release_pending",
]
