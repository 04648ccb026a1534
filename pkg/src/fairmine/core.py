"""Domain types shared by the simulator, analytics and oracles.

Stakes are kept as absolute amounts with the initial total normalized to 1;
shares are derived on demand as stake/total.  All arithmetic is 64-bit
binary floating point.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

PROTOCOLS = ("pow", "mlpos", "slpos", "fslpos", "cpos")
MLPOS_MODES = ("proportional", "geometric-race")

# Sum-of-shares tolerance for validated inputs and for the lambda invariant.
SHARE_SUM_TOL = 1e-12
LAMBDA_SUM_TOL = 1e-9


class ValidationError(ValueError):
    """Raised when a domain object violates one of its invariants."""


@dataclass(frozen=True)
class ShareVector:
    """Normalized initial resource shares of the competing miners."""

    shares: tuple

    def __init__(self, shares):
        shares = tuple(float(s) for s in shares)
        if len(shares) < 2:
            raise ValidationError("need at least two miners")
        if any(s <= 0.0 for s in shares):
            raise ValidationError("every share must be positive")
        if abs(sum(shares) - 1.0) > SHARE_SUM_TOL:
            raise ValidationError(
                f"shares must sum to 1 within {SHARE_SUM_TOL}, got {sum(shares)!r}"
            )
        object.__setattr__(self, "shares", shares)

    def __len__(self):
        return len(self.shares)

    def __getitem__(self, i):
        return self.shares[i]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.shares, dtype=np.float64)

    @staticmethod
    def normalized(raw) -> "ShareVector":
        """Build from positive weights, rescaling them to sum to 1."""
        raw = [float(x) for x in raw]
        if any(x <= 0.0 for x in raw):
            raise ValidationError("weights must be positive")
        total = sum(raw)
        if total <= 0.0:
            raise ValidationError("weights must have a positive sum")
        return ShareVector([x / total for x in raw])


@dataclass(frozen=True)
class ProtocolSpec:
    """Protocol kind plus its reward parameters.

    ``proposer_reward`` is the stake issued to the winner of one block
    (one epoch for cpos), ``inflation_reward`` is the per-epoch stake
    issued to all miners proportionally to their stakes (cpos only),
    ``shards`` is the cpos shard count used by the bound calculators,
    ``withhold_period`` k > 0 delays issued rewards from taking effect
    until the next multiple-of-k height, and ``horizon`` is the number
    of blocks/epochs simulated.
    """

    kind: str
    proposer_reward: float
    horizon: int
    inflation_reward: float = 0.0
    shards: int = 1
    withhold_period: int = 0
    mlpos_mode: str = "proportional"
    race_scale: float = 1.0 / 600.0

    def __post_init__(self):
        if self.kind not in PROTOCOLS:
            raise ValidationError(f"unknown protocol kind {self.kind!r}")
        if self.proposer_reward < 0 or self.inflation_reward < 0:
            raise ValidationError("rewards must be non-negative")
        if self.proposer_reward + self.inflation_reward <= 0:
            raise ValidationError("need a positive total reward per block/epoch")
        if self.kind == "pow" and self.proposer_reward <= 0:
            raise ValidationError("pow needs a positive proposer reward")
        if self.kind != "cpos" and self.inflation_reward != 0:
            raise ValidationError("inflation reward applies to cpos only")
        if self.shards < 1:
            raise ValidationError("shards must be >= 1")
        if self.kind != "cpos" and self.shards != 1:
            raise ValidationError("shards apply to cpos only")
        if self.withhold_period < 0:
            raise ValidationError("withhold period must be >= 0")
        if self.horizon < 1:
            raise ValidationError("horizon must be >= 1")
        if self.mlpos_mode not in MLPOS_MODES:
            raise ValidationError(f"unknown mlpos mode {self.mlpos_mode!r}")
        if self.race_scale <= 0:
            raise ValidationError("race scale must be positive")

    @property
    def issue_per_step(self) -> float:
        """Total stake issued per block (per epoch for cpos)."""
        return self.proposer_reward + self.inflation_reward

    def validate_against(self, shares: ShareVector) -> None:
        if self.kind == "mlpos" and self.mlpos_mode == "geometric-race":
            if self.race_scale * max(shares.shares) >= 1.0:
                raise ValidationError(
                    "race_scale * max share must stay below 1 in geometric-race mode"
                )


@dataclass
class MinerState:
    """Per-miner evolving state of one simulated mining game.

    ``effective_stake`` counts toward winning probability,
    ``pending_reward`` has been issued but does not compete yet
    (withholding only), ``credited_reward`` is the total issued reward
    (the numerator of lambda), and ``wins`` counts blocks or epoch
    proposals won.
    """

    effective_stake: float
    pending_reward: float = 0.0
    credited_reward: float = 0.0
    wins: int = 0

    def check(self) -> None:
        if min(self.effective_stake, self.pending_reward, self.credited_reward) < 0:
            raise ValidationError("miner state fields must be non-negative")
        if self.wins < 0:
            raise ValidationError("win count must be non-negative")


def initial_states(shares: ShareVector) -> list:
    return [MinerState(effective_stake=s) for s in shares.shares]


def check_conservation(states, spec: ProtocolSpec, t: int, tol: float = 1e-9) -> None:
    """Assert the stake-conservation identity after t blocks/epochs.

    For the PoS kinds the issued rewards are stakes, so effective plus
    pending stake must equal 1 + issue_per_step * t.  PoW rewards are not
    hash power, so the identity does not apply there.
    """
    if spec.kind == "pow":
        return
    total = sum(s.effective_stake + s.pending_reward for s in states)
    expected = 1.0 + spec.issue_per_step * t
    if abs(total - expected) > tol:
        raise ValidationError(
            f"stake conservation violated at t={t}: {total!r} != {expected!r}"
        )


@dataclass(frozen=True)
class FairnessParams:
    """Tolerance pair of the robust-fairness target plus the subject miner."""

    epsilon: float = 0.1
    delta: float = 0.1
    subject: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValidationError("epsilon must be >= 0")
        if not 0.0 <= self.delta <= 1.0:
            raise ValidationError("delta must lie in [0, 1]")
        if self.subject < 0:
            raise ValidationError("subject index must be >= 0")

    def fair_interval(self, a: float) -> tuple:
        return ((1.0 - self.epsilon) * a, (1.0 + self.epsilon) * a)


@dataclass(frozen=True)
class RaceOutcome:
    """Race times of one block lottery and the winning miner."""

    times: tuple
    winner: int

    def __post_init__(self):
        best = min(self.times)
        if self.times[self.winner] != best:
            raise ValidationError("winner must attain the minimum race time")


@dataclass(frozen=True)
class Checkpoint:
    """Reward fractions of every miner after t blocks/epochs."""

    t: int
    lam: tuple

    def __post_init__(self):
        if self.t < 1:
            raise ValidationError("checkpoint height must be >= 1")
        if any(x < 0.0 or x > 1.0 for x in self.lam):
            raise ValidationError("lambda values must lie in [0, 1]")
        if abs(sum(self.lam) - 1.0) > LAMBDA_SUM_TOL:
            raise ValidationError("lambda values must sum to 1")


@dataclass(frozen=True)
class CheckpointStats:
    """Aggregates of the subject miner's lambda over all trials at height t."""

    t: int
    mean: float
    stderr: float
    p05: float
    p95: float
    unfair_prob: float


@dataclass
class FairnessReport:
    """Per-checkpoint aggregates of one experiment plus its configuration echo.

    ``convergence_time`` is the first checkpoint from which the unfair
    probability stays at or below delta, or None if that never happens
    within the horizon.  ``samples`` keeps the raw per-trial subject
    lambdas per checkpoint for downstream tests (not serialized).
    """

    protocol: ProtocolSpec
    shares: ShareVector
    fairness: FairnessParams
    trials: int
    base_seed: int
    checkpoints: list
    convergence_time: int | None
    samples: dict = field(default_factory=dict, repr=False)


def lambda_of(states, spec: ProtocolSpec, t: int) -> list:
    """Reward fraction of every miner after t blocks/epochs.

    lambda_i = credited_i / (issue_per_step * t); the issued total per
    block is the proposer reward, plus the inflation reward per epoch
    for cpos.
    """
    if t < 1:
        raise ValidationError("lambda is undefined before the first block")
    denom = spec.issue_per_step * t
    lam = [s.credited_reward / denom for s in states]
    total = sum(lam)
    if abs(total - 1.0) > LAMBDA_SUM_TOL:
        raise ValidationError(f"lambda values must sum to 1, got {total!r}")
    return lam


__all__ = [
    "PROTOCOLS",
    "MLPOS_MODES",
    "ValidationError",
    "ShareVector",
    "ProtocolSpec",
    "MinerState",
    "FairnessParams",
    "RaceOutcome",
    "Checkpoint",
    "CheckpointStats",
    "FairnessReport",
    "initial_states",
    "check_conservation",
    "lambda_of",
    "replace",
]
