"""Deterministic Monte Carlo experiment runner.

Every trial owns an independent PCG64 stream seeded by derive_seed, and
each simulated block consumes a fixed number of uniforms from it, so a
trial's trajectory is a pure function of (base_seed, trial_index).
Batches advance many trials in lockstep with per-row array kernels;
batch size, chunking and thread count cannot change any value.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import analytics, protocols
from .core import (
    Checkpoint,
    CheckpointStats,
    FairnessParams,
    FairnessReport,
    ProtocolSpec,
    ShareVector,
    ValidationError,
)

THREADS_ENV = "FAIRMINE_THREADS"
BATCH_TRIALS = 1024
CHUNK_BYTES = 48 * 1024 * 1024  # uniform buffer target per batch chunk

# splitmix64: odd mixing constant and avalanche finalizer.
_MASK = (1 << 64) - 1
_MIX = 0x9E3779B97F4A7C15
_FIN1 = 0xBF58476D1CE4E5B9
_FIN2 = 0x94D049BB133111EB


def derive_seed(base_seed: int, trial_index):
    """Per-trial 64-bit seed: splitmix64 finalizer of base XOR (index * odd const).

    z = base_seed XOR (trial_index * 0x9E3779B97F4A7C15)  (mod 2^64)
    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9  (mod 2^64)
    z ^= z >> 27;  z *= 0x94D049BB133111EB  (mod 2^64)
    z ^= z >> 31

    The finalizer is a 64-bit bijection, so seeds are injective over
    trial_index for any fixed base.  Accepts a numpy integer array for
    the index and then returns an array of uint64.
    """
    if isinstance(trial_index, np.ndarray):
        with np.errstate(over="ignore"):
            z = np.uint64(base_seed & _MASK) ^ (
                trial_index.astype(np.uint64) * np.uint64(_MIX)
            )
            z ^= z >> np.uint64(30)
            z *= np.uint64(_FIN1)
            z ^= z >> np.uint64(27)
            z *= np.uint64(_FIN2)
            z ^= z >> np.uint64(31)
        return z
    z = (int(base_seed) & _MASK) ^ ((int(trial_index) * _MIX) & _MASK)
    z ^= z >> 30
    z = (z * _FIN1) & _MASK
    z ^= z >> 27
    z = (z * _FIN2) & _MASK
    z ^= z >> 31
    return z


def default_checkpoints(horizon: int) -> tuple:
    """{1, 2, 5} x 10^j up to the horizon, plus the horizon itself."""
    cps = []
    scale = 1
    while scale <= horizon:
        for lead in (1, 2, 5):
            v = lead * scale
            if v <= horizon:
                cps.append(v)
        scale *= 10
    if horizon not in cps:
        cps.append(horizon)
    return tuple(sorted(cps))


@dataclass(frozen=True)
class ExperimentSpec:
    """Full configuration of one repeated mining-game experiment."""

    protocol: ProtocolSpec
    shares: ShareVector
    fairness: FairnessParams = FairnessParams()
    trials: int = 10_000
    base_seed: int = 0
    checkpoints: tuple = ()

    def __post_init__(self):
        if self.trials < 1:
            raise ValidationError("need at least one trial")
        if self.fairness.subject >= len(self.shares):
            raise ValidationError("subject index out of range")
        self.protocol.validate_against(self.shares)
        cps = tuple(self.checkpoints) or default_checkpoints(self.protocol.horizon)
        if any(c2 <= c1 for c1, c2 in zip(cps, cps[1:])) or cps[0] < 1:
            raise ValidationError("checkpoints must be strictly increasing and >= 1")
        if cps[-1] != self.protocol.horizon:
            raise ValidationError("last checkpoint must equal the horizon")
        object.__setattr__(self, "checkpoints", cps)


def _run_batch(spec: ExperimentSpec, first: int, count: int) -> dict:
    """Advance trials [first, first+count) in lockstep.

    Returns {checkpoint height: (count, miners) array of lambda}.  Every
    value depends only on (base_seed, trial index), never on the batch
    composition.
    """
    proto = spec.protocol
    kind = proto.kind
    m = len(spec.shares)
    w = proto.proposer_reward
    v = proto.inflation_reward
    issue = proto.issue_per_step
    k = proto.withhold_period
    horizon = proto.horizon
    cps = set(spec.checkpoints)
    budget = protocols.step_budget(kind, m, proto.mlpos_mode)

    gens = [
        np.random.Generator(np.random.PCG64(derive_seed(spec.base_seed, i)))
        for i in range(first, first + count)
    ]
    init = np.tile(spec.shares.as_array(), (count, 1))
    eff = init.copy()
    pend = np.zeros((count, m))
    cred = np.zeros((count, m))
    tot_eff = 1.0  # identical across trials: total issuance is deterministic
    tot_pend = 0.0
    rows = np.arange(count)
    reward_onehot = np.eye(m) * w
    out = {}

    chunk = max(1, CHUNK_BYTES // (count * budget * 8))
    t = 0
    while t < horizon:
        steps = min(chunk, horizon - t)
        u_all = np.stack([g.random((steps, budget)) for g in gens], axis=0)
        for s in range(steps):
            t += 1
            u = u_all[:, s, :]
            if k and t % k == 0:
                eff += pend
                pend[:] = 0.0
                tot_eff += tot_pend
                tot_pend = 0.0
            if kind == "pow":
                winner = protocols.categorical_winner(init, u[:, 0])
                cred[rows, winner] += w
            else:
                shares = eff / tot_eff
                if kind == "slpos":
                    times = protocols.slpos_race_times(shares, u[:, :m])
                    winner = protocols.race_winner(times, u[:, m])
                elif kind == "mlpos" and proto.mlpos_mode == "geometric-race":
                    times = protocols.geometric_race_times(shares, u[:, :m], proto.race_scale)
                    winner = protocols.race_winner(times, u[:, m])
                else:  # mlpos proportional, fslpos, cpos all select proportionally
                    winner = protocols.categorical_winner(shares, u[:, 0])
                add = reward_onehot[winner]
                if kind == "cpos" and v > 0:
                    add = add + v * shares
                cred += add
                if k:
                    pend += add
                    tot_pend += issue
                else:
                    eff += add
                    tot_eff += issue
            if t in cps:
                out[t] = cred / (issue * t)
    return out


def run_trial(spec: ExperimentSpec, trial_index: int) -> list:
    """Checkpoints of a single trial; deterministic in (base_seed, trial_index)."""
    if not 0 <= trial_index < spec.trials:
        raise ValidationError("trial index out of range")
    lam = _run_batch(spec, trial_index, 1)
    return [Checkpoint(t=t, lam=tuple(lam[t][0])) for t in spec.checkpoints]


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def nearest_rank(sorted_values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile of an ascending array."""
    n = len(sorted_values)
    rank = max(1, int(np.ceil(pct / 100.0 * n)))
    return float(sorted_values[rank - 1])


def run_experiment(spec: ExperimentSpec) -> FairnessReport:
    """Run all trials and aggregate the subject miner's reward fraction.

    Trials are split into fixed-size batches; batches may execute on a
    thread pool capped by FAIRMINE_THREADS.  Results are merged in trial
    order, so the report is bitwise identical for any thread count.
    """
    if spec.trials < 2:
        raise ValidationError("need at least two trials to aggregate")
    starts = list(range(0, spec.trials, BATCH_TRIALS))
    jobs = [(s, min(BATCH_TRIALS, spec.trials - s)) for s in starts]
    threads = _thread_count()
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda j: _run_batch(spec, *j), jobs))
    else:
        parts = [_run_batch(spec, *j) for j in jobs]

    subject = spec.fairness.subject
    a = spec.shares[subject]
    lo, hi = spec.fairness.fair_interval(a)
    stats = []
    samples = {}
    for t in spec.checkpoints:
        lam = np.concatenate([p[t][:, subject] for p in parts])
        samples[t] = lam
        srt = np.sort(lam)
        mean = float(np.mean(lam))
        stderr = float(np.std(lam, ddof=1) / np.sqrt(len(lam)))
        unfair = float(np.count_nonzero((lam < lo) | (lam > hi)) / len(lam))
        stats.append(
            CheckpointStats(
                t=t,
                mean=mean,
                stderr=stderr,
                p05=nearest_rank(srt, 5.0),
                p95=nearest_rank(srt, 95.0),
                unfair_prob=unfair,
            )
        )
    conv = analytics.convergence_time(stats, spec.fairness.delta)
    return FairnessReport(
        protocol=spec.protocol,
        shares=spec.shares,
        fairness=spec.fairness,
        trials=spec.trials,
        base_seed=spec.base_seed,
        checkpoints=stats,
        convergence_time=conv,
        samples=samples,
    )


__all__ = [
    "THREADS_ENV",
    "BATCH_TRIALS",
    "ExperimentSpec",
    "derive_seed",
    "default_checkpoints",
    "run_trial",
    "run_experiment",
    "nearest_rank",
]
