"""Bradley-Terry training for single, multi-head and full-ensemble reward models, and aggregation."""
from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .models import Encoder, FullEnsembleRewardModel, MultiHeadRewardModel, RewardHead, RewardModel, token_bags
from .prefdata import PairArrays, PreferenceDataset
from .seeding import stream

BOOTSTRAP_KEEP = 0.632


class TrainingError(RuntimeError):
    pass


@dataclass
class RmTrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 1
    batch_size: int = 64
    seed: int = 0
    per_head_bootstrap: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class Objective(enum.Enum):
    MIN = "min"
    MEAN = "mean"
    MAX = "max"
    SINGLE = "single"


@dataclass(frozen=True)
class AggregationObjective:
    kind: Objective
    index: int = 0

    @classmethod
    def parse(cls, text: str) -> "AggregationObjective":
        """'min', 'mean', 'max', 'single' or 'single(2)'."""
        text = text.strip().lower()
        if text.startswith("single"):
            rest = text[len("single"):]
            idx = int(rest.strip("()")) if rest else 0
            return cls(Objective.SINGLE, idx)
        return cls(Objective(text))

    def __str__(self) -> str:
        return f"single({self.index})" if self.kind is Objective.SINGLE else self.kind.value


MIN = AggregationObjective(Objective.MIN)
MEAN = AggregationObjective(Objective.MEAN)
MAX = AggregationObjective(Objective.MAX)


def SINGLE(index: int = 0) -> AggregationObjective:
    return AggregationObjective(Objective.SINGLE, index)


# ---------------------------------------------------------------- objectives


def bt_loss(r_preferred, r_dispreferred):
    """-log sigmoid(r_preferred - r_dispreferred) as softplus of the negated margin.

    Accepts floats (returns a float) or tensors (returns a tensor on the same tape).
    """
    if isinstance(r_preferred, nx.Tensor) or isinstance(r_dispreferred, nx.Tensor):
        return nx.softplus(nx.sub(r_dispreferred, r_preferred))
    delta = float(r_preferred) - float(r_dispreferred)
    if not np.isfinite(delta):
        raise nx.NumericError("bt_loss: non-finite reward margin")
    return float(max(-delta, 0.0) + np.log1p(np.exp(-abs(delta))))


def aggregate(rewards, objective: AggregationObjective) -> float:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("aggregate: empty reward vector")
    return float(aggregate_rows(r[None, :], objective)[0])


def aggregate_rows(rewards: np.ndarray, objective: AggregationObjective) -> np.ndarray:
    """Reduce an (N, k) reward matrix along k."""
    if rewards.ndim != 2 or rewards.shape[1] == 0:
        raise ValueError(f"aggregate: need an (N, k) matrix with k >= 1, got {rewards.shape}")
    kind = objective.kind
    if kind is Objective.MIN:
        return rewards.min(axis=1)
    if kind is Objective.MEAN:
        # a rounded mean can land one ulp outside [min, max]; the true mean cannot
        return np.clip(rewards.mean(axis=1), rewards.min(axis=1), rewards.max(axis=1))
    if kind is Objective.MAX:
        return rewards.max(axis=1)
    if not 0 <= objective.index < rewards.shape[1]:
        raise ValueError(f"SINGLE index {objective.index} out of range for k={rewards.shape[1]}")
    return rewards[:, objective.index]


def aggregate_with_index(rewards, objective: AggregationObjective) -> tuple[float, int]:
    """Aggregate and report which member was selected (MIN/MAX/SINGLE; -1 for MEAN)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("aggregate: empty reward vector")
    kind = objective.kind
    if kind is Objective.MIN:
        i = int(np.argmin(r))
    elif kind is Objective.MAX:
        i = int(np.argmax(r))
    elif kind is Objective.SINGLE:
        i = objective.index
    else:
        return float(r.mean()), -1
    return aggregate(r, objective), i


def proxy_reward(model: RewardModel, objective: AggregationObjective, prompt, completion) -> float:
    seq = np.concatenate([np.asarray(prompt), np.asarray(completion)])
    return float(aggregate_rows(model.rewards(seq[None, :]), objective)[0])


def proxy_rewards(model: RewardModel, objective: AggregationObjective, seqs: np.ndarray) -> np.ndarray:
    return aggregate_rows(model.rewards(seqs), objective)


# ------------------------------------------------------------------ training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc_noisy: float
    val_acc_clean: float
    head_acc_noisy: list[float]
    head_acc_clean: list[float]


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_table(self) -> str:
        k = len(self.epochs[0].head_acc_noisy) if self.epochs else 0
        cols = ["epoch", "train_loss", "val_acc_noisy", "val_acc_clean"] + \
            [f"head{i}_acc_noisy" for i in range(k)] + [f"head{i}_acc_clean" for i in range(k)]
        rows = [",".join(cols)]
        for e in self.epochs:
            vals = [str(e.epoch), repr(e.train_loss), repr(e.val_acc_noisy), repr(e.val_acc_clean)]
            vals += [repr(a) for a in e.head_acc_noisy] + [repr(a) for a in e.head_acc_clean]
            rows.append(",".join(vals))
        return "\n".join(rows) + "\n"


def _oriented(arr: PairArrays, idx: np.ndarray, vocab: int) -> tuple[np.ndarray, np.ndarray]:
    """Bags of (preferred, dispreferred) sequences by the noisy training label."""
    sa = np.concatenate([arr.prompts[idx], arr.a[idx]], axis=1)
    sb = np.concatenate([arr.prompts[idx], arr.b[idx]], axis=1)
    pick = arr.a_preferred[idx][:, None]
    return token_bags(np.where(pick, sa, sb), vocab), token_bags(np.where(pick, sb, sa), vocab)


def _train_shared(encoder: Encoder, heads: list[RewardHead], arr: PairArrays, cfg: RmTrainConfig,
                  shuffle_rng: np.random.Generator, mask_seed: int, epoch_hook) -> tuple[Encoder, list[RewardHead]]:
    """Joint training of one encoder and its heads with summed per-head BT losses."""
    enc_names = list(encoder.params)
    k = len(heads)
    params = [encoder.params[n] for n in enc_names]
    params += [h.weight for h in heads] + [np.array(h.bias) for h in heads]
    state = nx.AdamState.for_params(params, learning_rate=cfg.learning_rate)
    n = len(arr)
    masks = None
    if cfg.per_head_bootstrap:
        mrng = stream(mask_seed, "bootstrap-mask")
        masks = mrng.random((k, n)) < BOOTSTRAP_KEEP
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            win, lose = _oriented(arr, idx, encoder.vocab_size)
            try:
                total, tracked = _batch_loss(encoder, params, enc_names, k, win, lose, len(idx),
                                             None if masks is None else masks[:, idx])
                grads = total.tape.gradient(total, tracked)
                params, state = nx.adam_update(state, params, grads)
            except nx.NumericError as exc:
                raise TrainingError(f"diverged at epoch {epoch}, batch {start // cfg.batch_size}: {exc}") from None
            losses.append(total.item())
        encoder = Encoder(encoder.vocab_size, encoder.embed_dim, encoder.hidden_dim, encoder.feature_dim,
                          dict(zip(enc_names, params[:len(enc_names)])), encoder.seed)
        heads = [RewardHead(params[len(enc_names) + i], float(params[len(enc_names) + k + i]), heads[i].seed)
                 for i in range(k)]
        epoch_hook(epoch, float(np.mean(losses)), encoder, heads)
    return encoder, heads


_DIFF = np.array([[1.0, -1.0]])


def _batch_loss(encoder: Encoder, params: list[np.ndarray], enc_names: list[str], k: int,
                win: np.ndarray, lose: np.ndarray, m: int, masks: np.ndarray | None
                ) -> tuple[nx.Tensor, list[nx.Tensor]]:
    """Sum over heads of the mean BT loss; one encoder pass over preferred and dispreferred bags."""
    tape = nx.Tape()
    tracked = [tape.watch(p) for p in params]
    ne = len(enc_names)
    feats = encoder.forward(np.concatenate([win, lose]), dict(zip(enc_names, tracked[:ne])))
    total = None
    for i in range(k):
        r = nx.add(nx.matmul(feats, tracked[ne + i]), tracked[ne + k + i])
        # (2m,) -> (2, m); the [1, -1] row gives preferred minus dispreferred
        margin = nx.matmul(_DIFF, nx.reshape(r, (2, m)))
        per_ex = nx.reshape(nx.softplus(nx.neg(margin)), (m,))
        if masks is not None:
            keep = masks[i].astype(np.float64)
            head_loss = nx.mul(nx.sum_(nx.mul(per_ex, keep)), 1.0 / max(keep.sum(), 1.0))
        else:
            head_loss = nx.mean(per_ex)
        total = head_loss if total is None else nx.add(total, head_loss)
    return total, tracked


def accuracy(rewards_a: np.ndarray, rewards_b: np.ndarray, a_preferred: np.ndarray) -> float:
    """Fraction of pairs where the reward ordering matches the label (ties count as A)."""
    pred_a = rewards_a >= rewards_b
    return float(np.mean(pred_a == a_preferred))


def evaluate_heads(model: RewardModel, arr: PairArrays) -> dict:
    ra = model.rewards(arr.seqs_a())
    rb = model.rewards(arr.seqs_b())
    k = ra.shape[1]
    agg_a, agg_b = ra.min(axis=1), rb.min(axis=1)
    return {
        "acc_noisy": accuracy(agg_a, agg_b, arr.a_preferred),
        "acc_clean": accuracy(agg_a, agg_b, arr.a_preferred_clean),
        "head_noisy": [accuracy(ra[:, i], rb[:, i], arr.a_preferred) for i in range(k)],
        "head_clean": [accuracy(ra[:, i], rb[:, i], arr.a_preferred_clean) for i in range(k)],
    }


def train_reward_model(dataset: PreferenceDataset, model: RewardModel, config: RmTrainConfig
                       ) -> tuple[RewardModel, TrainLog]:
    """Train on the ``train`` split; log validation accuracy (MIN aggregate and per head) per epoch.

    Multi-head: one encoder pass per example per step, loss summed over heads.
    Full ensemble: each member trained alone on the same data with its own shuffle stream.
    """
    train = dataset.arrays("train")
    if len(train) == 0:
        raise ValueError("empty training split")
    val = dataset.arrays("validation") if "validation" in dataset.splits else train

    if isinstance(model, MultiHeadRewardModel):
        log = TrainLog()

        def hook(epoch, loss, enc, heads):
            ev = evaluate_heads(MultiHeadRewardModel(enc, heads), val)
            log.epochs.append(EpochRecord(epoch + 1, loss, ev["acc_noisy"], ev["acc_clean"],
                                          ev["head_noisy"], ev["head_clean"]))

        enc, heads = _train_shared(copy.deepcopy(model.encoder), copy.deepcopy(model.heads), train, config,
                                   stream(config.seed, "rm-shuffle", 0), config.seed, hook)
        return MultiHeadRewardModel(enc, heads), log

    if isinstance(model, FullEnsembleRewardModel):
        per_member: list[list[tuple[float, Encoder, RewardHead]]] = []
        members = []
        for i, (enc0, head0) in enumerate(model.members):
            snaps: list[tuple[float, Encoder, RewardHead]] = []
            enc, heads = _train_shared(copy.deepcopy(enc0), [copy.deepcopy(head0)], train, config,
                                       stream(config.seed, "rm-shuffle", i), config.seed + i,
                                       lambda e, loss, en, hs, s=snaps: s.append((loss, en, hs[0])))
            per_member.append(snaps)
            members.append((enc, heads[0]))
        log = TrainLog()
        for epoch in range(config.epochs):
            snap = FullEnsembleRewardModel([(m[epoch][1], m[epoch][2]) for m in per_member])
            ev = evaluate_heads(snap, val)
            log.epochs.append(EpochRecord(epoch + 1, float(sum(m[epoch][0] for m in per_member)),
                                          ev["acc_noisy"], ev["acc_clean"], ev["head_noisy"], ev["head_clean"]))
        return FullEnsembleRewardModel(members), log

    raise TypeError(f"unsupported reward model {type(model).__name__}")


def head_disagreement(model: RewardModel, arr: PairArrays) -> np.ndarray:
    """(k, k) fraction of pairs on which heads i and j order the two completions differently."""
    ra, rb = model.rewards(arr.seqs_a()), model.rewards(arr.seqs_b())
    pref = ra >= rb
    k = pref.shape[1]
    return np.array([[np.mean(pref[:, i] != pref[:, j]) for j in range(k)] for i in range(k)])
