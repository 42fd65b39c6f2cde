"""Sequence-level PPO against a proxy reward with KL shaping toward a frozen reference policy.

Each completion is one action. The shaped return of a completion is

    proxy_reward - kl_coefficient * sum_t (log pi_t - log pi_ref_t)

and advantages are the batch-whitened shaped returns; there is no critic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .evaluation import CurvePoint
from .models import GoldRewardModel, PolicyModel, RewardModel
from .reward_training import AggregationObjective, TrainingError, proxy_rewards
from .seeding import stream


@dataclass
class PpoConfig:
    kl_coefficient: float = 0.02
    clip_epsilon: float = 0.2
    ppo_epochs_per_batch: int = 4
    rollout_batch_size: int = 128
    gradient_step_batch_size: int = 64
    learning_rate: float = 1e-4
    total_policy_updates: int = 2000
    eval_interval: int = 20
    eval_prompts: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.kl_coefficient < 0:
            raise ValueError("kl_coefficient must be >= 0")
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must be in (0, 1)")
        for name in ("ppo_epochs_per_batch", "rollout_batch_size", "gradient_step_batch_size",
                     "eval_interval", "eval_prompts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_policy_updates < 0:
            raise ValueError("total_policy_updates must be >= 0")


@dataclass
class RolloutBatch:
    prompts: np.ndarray
    completions: np.ndarray
    behavior_logprobs: np.ndarray   # (B, L_c)
    reference_logprobs: np.ndarray  # (B, L_c)
    proxy_rewards: np.ndarray       # (B,)
    returns: np.ndarray             # (B,)
    advantages: np.ndarray          # (B,)
    kl_coefficient: float

    def __len__(self) -> int:
        return len(self.prompts)


@dataclass
class UpdateStats:
    mean_ratio: float
    clip_fraction: float
    approx_kl: float
    clipped_objective: list[float] = field(default_factory=list)
    unclipped_objective: list[float] = field(default_factory=list)
    steps: int = 0


def whiten(x: np.ndarray) -> np.ndarray:
    if len(x) < 2:
        return np.zeros_like(x)
    centered = x - x.mean()
    std = np.sqrt(np.mean(centered * centered))
    if std == 0:
        return np.zeros_like(x)
    out = centered / std
    # one corrective pass keeps |mean| and |std - 1| at rounding level
    out = out - out.mean()
    return out / np.sqrt(np.mean(out * out))


def shaped_returns(proxy: np.ndarray, logp: np.ndarray, logp_ref: np.ndarray, beta: float) -> np.ndarray:
    return proxy - beta * (logp.sum(axis=1) - logp_ref.sum(axis=1))


def collect_rollouts(policy: PolicyModel, reference: PolicyModel, reward_model: RewardModel,
                     objective: AggregationObjective, prompts: np.ndarray, config: PpoConfig,
                     rng: np.random.Generator) -> RolloutBatch:
    """Sample one completion per prompt from ``policy`` and score it."""
    try:
        completions, logp, logp_ref = _sample_scored(policy, reference, prompts, rng)
    except nx.NumericError as exc:
        raise TrainingError(f"rollout sampling failed: {exc}") from None
    seqs = np.concatenate([prompts, completions], axis=1)
    proxy = proxy_rewards(reward_model, objective, seqs)
    returns = shaped_returns(proxy, logp, logp_ref, config.kl_coefficient)
    return RolloutBatch(prompts, completions, logp, logp_ref, proxy, returns, whiten(returns),
                        config.kl_coefficient)


def _sample_scored(policy: PolicyModel, reference: PolicyModel, prompts: np.ndarray,
                   rng: np.random.Generator):
    """Sample, then rescore under both policies with the same batched computation.

    Rescoring (rather than keeping the sampler's log-probs) makes a policy and an
    identical copy of it produce bit-identical log-probs, so their KL is exactly 0.
    """
    uniforms = rng.random((len(prompts), policy.completion_len))
    completions, _ = policy.sample_with_uniforms(prompts, uniforms)
    logp = policy.token_logprobs(prompts, completions).data
    logp_ref = logp if reference is policy else reference.token_logprobs(prompts, completions).data
    return completions, logp, logp_ref


def ppo_update(policy: PolicyModel, batch: RolloutBatch, config: PpoConfig, state: nx.AdamState,
               rng: np.random.Generator, max_steps: int | None = None,
               on_step: Callable[[PolicyModel], None] | None = None
               ) -> tuple[PolicyModel, nx.AdamState, UpdateStats]:
    """Clipped-surrogate passes over minibatches of one rollout batch.

    ``max_steps`` truncates the passes; ``on_step`` sees the policy after every Adam step.
    """
    names = list(policy.params)
    params = [policy.params[n] for n in names]
    eps = config.clip_epsilon
    behavior = batch.behavior_logprobs.sum(axis=1)
    ratios, clipped, kls = [], [], []
    stats = UpdateStats(0.0, 0.0, 0.0)
    done = False
    for _ in range(config.ppo_epochs_per_batch):
        order = rng.permutation(len(batch))
        for start in range(0, len(batch), config.gradient_step_batch_size):
            if max_steps is not None and stats.steps >= max_steps:
                done = True
                break
            idx = order[start:start + config.gradient_step_batch_size]
            adv = batch.advantages[idx]
            tape = nx.Tape()
            tracked = [tape.watch(p) for p in params]
            try:
                new_lp = nx.sum_(policy.token_logprobs(batch.prompts[idx], batch.completions[idx],
                                                       dict(zip(names, tracked))), axis=1)
                ratio = nx.exp(nx.sub(new_lp, behavior[idx]))
                unclipped = nx.mul(ratio, adv)
                clipped_t = nx.mul(nx.clip(ratio, 1.0 - eps, 1.0 + eps), adv)
                loss = nx.neg(nx.mean(nx.minimum(unclipped, clipped_t)))
                grads = tape.gradient(loss, tracked)
                params, state = nx.adam_update(state, params, grads)
            except nx.NumericError as exc:
                raise TrainingError(f"non-finite PPO loss on minibatch {idx.tolist()}: {exc}") from None
            r = ratio.data
            ratios.append(r.mean())
            clipped.append(np.mean(np.abs(r - 1.0) > eps))
            kls.append(np.mean(behavior[idx] - new_lp.data))
            stats.clipped_objective.append(-loss.item())
            stats.unclipped_objective.append(float(unclipped.data.mean()))
            stats.steps += 1
            policy = PolicyModel(policy.vocab_size, policy.embed_dim, policy.hidden_dim, policy.prompt_len,
                                 policy.completion_len, dict(zip(names, params)), policy.seed)
            if on_step is not None:
                on_step(policy)
        if done:
            break
    if stats.steps:
        stats.mean_ratio = float(np.mean(ratios))
        stats.clip_fraction = float(np.mean(clipped))
        stats.approx_kl = float(np.mean(kls))
    return policy, state, stats


def measure_kl(policy: PolicyModel, reference: PolicyModel, n_samples: int, rng: np.random.Generator,
               prompt_probs: np.ndarray | None = None, prompts: np.ndarray | None = None
               ) -> tuple[float, float]:
    """Monte Carlo KL(policy || reference): (estimate, standard error).

    Uses ``prompts`` when given (one completion each), otherwise draws ``n_samples``
    prompts from ``prompt_probs`` (uniform when None).
    """
    if prompts is None:
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        probs = np.full(policy.vocab_size, 1.0 / policy.vocab_size) if prompt_probs is None else prompt_probs
        prompts = rng.choice(policy.vocab_size, size=(n_samples, policy.prompt_len), p=probs)
    kl, _, _ = _kl_samples(policy, reference, prompts, rng)
    n = len(kl)
    stderr = float(kl.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(kl.mean()), stderr


def _kl_samples(policy, reference, prompts, rng):
    if len(prompts) < 1:
        raise ValueError("measure_kl needs at least one sample")
    completions, logp, logp_ref = _sample_scored(policy, reference, prompts, rng)
    return (logp - logp_ref).sum(axis=1), completions, logp


def evaluate_point(policy: PolicyModel, reference: PolicyModel, reward_model: RewardModel,
                   objective: AggregationObjective, gold: GoldRewardModel, prompts: np.ndarray,
                   rng: np.random.Generator, step: int, seed: int, method: str) -> CurvePoint:
    kl, completions, _ = _kl_samples(policy, reference, prompts, rng)
    seqs = np.concatenate([prompts, completions], axis=1)
    n = len(kl)
    return CurvePoint(
        step=step, kl=float(kl.mean()),
        kl_stderr=float(kl.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
        proxy_reward=float(proxy_rewards(reward_model, objective, seqs).mean()),
        gold_reward=float(gold.score_batch(seqs).mean()),
        seed=seed, method=method, objective=str(objective))


def run_ppo(policy: PolicyModel, reference: PolicyModel, reward_model: RewardModel,
            objective: AggregationObjective, gold: GoldRewardModel, natural_probs: np.ndarray,
            config: PpoConfig, method: str = "single",
            curve_sink: Callable[[CurvePoint], None] | None = None
            ) -> tuple[PolicyModel, list[CurvePoint]]:
    """Alternate rollouts and PPO updates; emit a CurvePoint every ``eval_interval`` Adam steps.

    Curve points already emitted are kept if training fails part-way; the error propagates.
    """
    seed = config.seed
    prompt_rng = stream(seed, "ppo-prompts")
    sample_rng = stream(seed, "ppo-samples")
    shuffle_rng = stream(seed, "ppo-minibatch")
    eval_prompts = stream(seed, "eval-prompts").choice(
        len(natural_probs), size=(config.eval_prompts, policy.prompt_len), p=natural_probs)
    curve: list[CurvePoint] = []

    def emit(pol: PolicyModel, step: int) -> None:
        pt = evaluate_point(pol, reference, reward_model, objective, gold, eval_prompts,
                            stream(seed, "eval", step), step, seed, method)
        curve.append(pt)
        if curve_sink is not None:
            curve_sink(pt)

    emit(policy, 0)
    names = list(policy.params)
    state = nx.AdamState.for_params([policy.params[n] for n in names], learning_rate=config.learning_rate)
    updates = 0

    def on_step(pol: PolicyModel) -> None:
        nonlocal updates
        updates += 1
        if updates % config.eval_interval == 0:
            emit(pol, updates)

    while updates < config.total_policy_updates:
        prompts = prompt_rng.choice(len(natural_probs), size=(config.rollout_batch_size, policy.prompt_len),
                                    p=natural_probs)
        batch = collect_rollouts(policy, reference, reward_model, objective, prompts, config, sample_rng)
        policy, state, _ = ppo_update(policy, batch, config, state, shuffle_rng,
                                      max_steps=config.total_policy_updates - updates, on_step=on_step)
    if curve[-1].step != updates:
        emit(policy, updates)
    return policy, curve
