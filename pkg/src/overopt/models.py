"""Encoder, linear reward heads, the three reward-model regimes, the policy, the gold model.

All token inputs are reduced to a *bag*: the normalized token-count vector of a
sequence. Mean-pooling the embedding table over a sequence is then the matrix
product ``bag @ embedding``, which keeps every forward pass a short chain of
dense ops on the tape.
"""
from __future__ import annotations

import base64
import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor
from .seeding import stream

FORMAT_VERSION = 1


class TokenError(ValueError):
    """Token id outside the vocabulary or an empty sequence."""


class FormatError(ValueError):
    """A serialized model is malformed or has an unsupported version."""


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    s = gain / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def check_tokens(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size == 0 or tokens.shape[-1] == 0:
        raise TokenError("empty token sequence")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise TokenError(f"tokens must be integers, got {tokens.dtype}")
    if tokens.min() < 0 or tokens.max() >= vocab_size:
        raise TokenError(f"token out of range [0, {vocab_size}): "
                         f"min={tokens.min()}, max={tokens.max()}")
    return tokens


def token_bags(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    """(N, T) token ids -> (N, V) normalized counts. A 1-D input is one sequence."""
    tokens = np.atleast_2d(check_tokens(tokens, vocab_size))
    n, t = tokens.shape
    bags = np.zeros((n, vocab_size))
    np.add.at(bags, (np.repeat(np.arange(n), t), tokens.ravel()), 1.0)
    return bags / t


def _wrap(params: Mapping[str, np.ndarray], tracked: Mapping[str, Tensor] | None):
    return tracked if tracked is not None else {k: Tensor(v) for k, v in params.items()}


# ------------------------------------------------------------------ encoder


@dataclass
class Encoder:
    """Mean-pooled embeddings followed by two tanh layers (e -> h -> d)."""

    vocab_size: int
    embed_dim: int
    hidden_dim: int
    feature_dim: int
    params: dict[str, np.ndarray]
    seed: int = 0

    calls = 0  # class-level instrumentation: number of forward passes

    @classmethod
    def random(cls, vocab_size: int, embed_dim: int, hidden_dim: int, feature_dim: int,
               seed: int, gain: float = 1.0) -> "Encoder":
        rng = stream(seed, "encoder")
        # an embedding lookup is a linear map of a one-hot input: fan_in = 1
        params = {
            "embedding": uniform_init(rng, (vocab_size, embed_dim), 1, gain),
            "w1": uniform_init(rng, (embed_dim, hidden_dim), embed_dim, gain),
            "b1": uniform_init(rng, (hidden_dim,), embed_dim, gain),
            "w2": uniform_init(rng, (hidden_dim, feature_dim), hidden_dim, gain),
            "b2": uniform_init(rng, (feature_dim,), hidden_dim, gain),
        }
        return cls(vocab_size, embed_dim, hidden_dim, feature_dim, params, seed)

    @classmethod
    def from_policy(cls, policy: "PolicyModel", feature_dim: int, seed: int) -> "Encoder":
        """Copy the policy's embedding and first layer; the top layer is fresh."""
        rng = stream(seed, "encoder-top")
        h = policy.hidden_dim
        params = {
            "embedding": policy.params["embedding"].copy(),
            "w1": policy.params["w1"].copy(),
            "b1": policy.params["b1"].copy(),
            "w2": uniform_init(rng, (h, feature_dim), h),
            "b2": uniform_init(rng, (feature_dim,), h),
        }
        return cls(policy.vocab_size, policy.embed_dim, h, feature_dim, params, seed)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, bags: np.ndarray, tracked: Mapping[str, Tensor] | None = None) -> Tensor:
        """(N, V) bags -> (N, d) features."""
        Encoder.calls += 1
        p = _wrap(self.params, tracked)
        pooled = nx.matmul(bags, p["embedding"])
        hidden = nx.tanh(nx.add(nx.matmul(pooled, p["w1"]), p["b1"]))
        return nx.tanh(nx.add(nx.matmul(hidden, p["w2"]), p["b2"]))

    def features(self, seqs: np.ndarray) -> np.ndarray:
        return self.forward(token_bags(seqs, self.vocab_size)).data


def encode(encoder: Encoder, tokens) -> np.ndarray:
    """Feature vector of one token sequence."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise TokenError("encode expects a single 1-D token sequence")
    return encoder.features(tokens)[0]


# -------------------------------------------------------------------- heads


@dataclass
class RewardHead:
    weight: np.ndarray
    bias: float
    seed: int = 0

    @classmethod
    def random(cls, feature_dim: int, seed: int) -> "RewardHead":
        rng = stream(seed, "head")
        w = uniform_init(rng, (feature_dim,), feature_dim)
        b = float(uniform_init(rng, (), feature_dim))
        return cls(w, b, seed)

    def n_params(self) -> int:
        return self.weight.size + 1


def head_reward(head: RewardHead, features) -> float:
    features = np.asarray(features, dtype=np.float64)
    if features.shape != head.weight.shape:
        raise DimensionError(f"head_reward: features {features.shape} vs weight {head.weight.shape}")
    return float(features @ head.weight + head.bias)


# ------------------------------------------------------------ reward models


@dataclass
class MultiHeadRewardModel:
    """One shared encoder, k independently seeded linear heads."""

    encoder: Encoder
    heads: list[RewardHead]

    @classmethod
    def create(cls, encoder: Encoder, k: int, head_seed: int) -> "MultiHeadRewardModel":
        if k < 1:
            raise ValueError("k must be >= 1")
        heads = [RewardHead.random(encoder.feature_dim, head_seed + i) for i in range(k)]
        return cls(encoder, heads)

    @property
    def k(self) -> int:
        return len(self.heads)

    def n_params(self) -> int:
        return self.encoder.n_params() + sum(h.n_params() for h in self.heads)

    def rewards(self, seqs: np.ndarray) -> np.ndarray:
        """(N, T) sequences -> (N, k) per-head rewards; one encoder pass."""
        feats = self.encoder.features(seqs)
        return feats @ np.stack([h.weight for h in self.heads], axis=1) + \
            np.array([h.bias for h in self.heads])


@dataclass
class FullEnsembleRewardModel:
    """k fully independent (encoder, head) pairs."""

    members: list[tuple[Encoder, RewardHead]]

    @property
    def k(self) -> int:
        return len(self.members)

    def n_params(self) -> int:
        return sum(e.n_params() + h.n_params() for e, h in self.members)

    def rewards(self, seqs: np.ndarray) -> np.ndarray:
        cols = [enc.features(seqs) @ head.weight + head.bias for enc, head in self.members]
        return np.stack(cols, axis=1)


RewardModel = MultiHeadRewardModel | FullEnsembleRewardModel


def all_head_rewards(model: RewardModel, tokens) -> np.ndarray:
    """Length-k vector of member rewards for one sequence."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise TokenError("all_head_rewards expects a single 1-D token sequence")
    return model.rewards(tokens[None, :])[0]


# ------------------------------------------------------------------- policy


@dataclass
class PolicyModel:
    """Next-token logits from the mean-pooled embedding of the tokens so far."""

    vocab_size: int
    embed_dim: int
    hidden_dim: int
    prompt_len: int
    completion_len: int
    params: dict[str, np.ndarray]
    seed: int = 0

    @classmethod
    def random(cls, vocab_size: int, embed_dim: int, hidden_dim: int, prompt_len: int,
               completion_len: int, seed: int) -> "PolicyModel":
        rng = stream(seed, "policy")
        params = {
            "embedding": uniform_init(rng, (vocab_size, embed_dim), 1),
            "w1": uniform_init(rng, (embed_dim, hidden_dim), embed_dim),
            "b1": uniform_init(rng, (hidden_dim,), embed_dim),
            "w2": uniform_init(rng, (hidden_dim, vocab_size), hidden_dim),
            "b2": uniform_init(rng, (vocab_size,), hidden_dim),
        }
        return cls(vocab_size, embed_dim, hidden_dim, prompt_len, completion_len, params, seed)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "PolicyModel":
        return copy.deepcopy(self)

    def logits(self, bags: np.ndarray, tracked: Mapping[str, Tensor] | None = None) -> Tensor:
        p = _wrap(self.params, tracked)
        pooled = nx.matmul(bags, p["embedding"])
        hidden = nx.tanh(nx.add(nx.matmul(pooled, p["w1"]), p["b1"]))
        return nx.add(nx.matmul(hidden, p["w2"]), p["b2"])

    def next_token_logprobs(self, context: np.ndarray) -> np.ndarray:
        """(B, t) contexts -> (B, V) log-probabilities of the next token."""
        return nx.log_softmax(self.logits(token_bags(context, self.vocab_size))).data

    def token_logprobs(self, prompts: np.ndarray, completions: np.ndarray,
                       tracked: Mapping[str, Tensor] | None = None) -> Tensor:
        """(B, L_p) prompts and (B, L_c) completions -> (B, L_c) per-token log-probs."""
        prompts = np.atleast_2d(check_tokens(prompts, self.vocab_size))
        completions = np.atleast_2d(check_tokens(completions, self.vocab_size))
        b, lp = prompts.shape
        lc = completions.shape[1]
        seqs = np.concatenate([prompts, completions], axis=1)
        onehot = np.eye(self.vocab_size)[seqs]                        # (B, T, V)
        counts = np.cumsum(onehot, axis=1)[:, lp - 1: lp + lc - 1]    # prefixes before each target
        bags = (counts / np.arange(lp, lp + lc)[None, :, None]).reshape(b * lc, self.vocab_size)
        logp = nx.log_softmax(self.logits(bags, tracked))
        picked = nx.sum_(nx.mul(logp, onehot[:, lp:].reshape(b * lc, self.vocab_size)), axis=1)
        return nx.reshape(picked, (b, lc))

    def sample_with_uniforms(self, prompts: np.ndarray, uniforms: np.ndarray,
                             temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """Inverse-CDF sampling driven by pre-drawn uniforms of shape (B, L_c).

        Returns completions and their per-token log-probs at temperature 1.
        """
        if not temperature > 0:
            raise ValueError("temperature must be > 0")
        prompts = np.atleast_2d(check_tokens(prompts, self.vocab_size))
        b = prompts.shape[0]
        lc = uniforms.shape[1]
        v = self.vocab_size
        counts = np.zeros((b, v))
        np.add.at(counts, (np.repeat(np.arange(b), prompts.shape[1]), prompts.ravel()), 1.0)
        length = prompts.shape[1]
        out = np.empty((b, lc), dtype=np.int64)
        logps = np.empty((b, lc))
        rows = np.arange(b)
        for t in range(lc):
            logits = self.logits(counts / length).data
            logp = logits - _lse(logits)
            scaled = logits / temperature
            probs = np.exp(scaled - _lse(scaled))
            cdf = np.cumsum(probs, axis=1)
            tok = (uniforms[:, t:t + 1] * cdf[:, -1:] >= cdf).sum(axis=1)
            tok = np.minimum(tok, v - 1)
            out[:, t] = tok
            logps[:, t] = logp[rows, tok]
            counts[rows, tok] += 1.0
            length += 1
        return out, logps


def _lse(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    return np.log(np.exp(x - m).sum(axis=1, keepdims=True)) + m


def policy_logprob(policy: PolicyModel, prompt, completion) -> tuple[float, np.ndarray]:
    """log pi(completion | prompt) and the per-token log-probs."""
    completion = np.asarray(completion)
    if completion.ndim != 1 or completion.size < 1:
        raise TokenError("completion must be a non-empty 1-D sequence")
    per_token = policy.token_logprobs(np.asarray(prompt)[None, :], completion[None, :]).data[0]
    return float(per_token.sum()), per_token


def sample_completion(policy: PolicyModel, prompt, rng: np.random.Generator,
                      temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    uniforms = rng.random((1, policy.completion_len))
    comp, logps = policy.sample_with_uniforms(np.asarray(prompt)[None, :], uniforms, temperature)
    return comp[0], logps[0]


def sample_batch(policy: PolicyModel, prompts: np.ndarray, rng: np.random.Generator,
                 temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    uniforms = rng.random((len(prompts), policy.completion_len))
    return policy.sample_with_uniforms(prompts, uniforms, temperature)


def train_reference_policy(policy: PolicyModel, natural_probs: np.ndarray, seed: int,
                           steps: int = 200, batch_size: int = 64,
                           learning_rate: float = 1e-2) -> PolicyModel:
    """Maximum-likelihood fit to i.i.d. sequences from the natural token distribution."""
    rng = stream(seed, "reference-pretrain")
    policy = policy.copy()
    names = list(policy.params)
    state = nx.AdamState.for_params([policy.params[n] for n in names], learning_rate=learning_rate)
    total = policy.prompt_len + policy.completion_len
    for _ in range(steps):
        seqs = rng.choice(policy.vocab_size, size=(batch_size, total), p=natural_probs)
        tape = nx.Tape()
        tracked = {n: tape.watch(policy.params[n]) for n in names}
        logp = policy.token_logprobs(seqs[:, :policy.prompt_len], seqs[:, policy.prompt_len:], tracked)
        loss = nx.neg(nx.mean(logp))
        grads = tape.gradient(loss, [tracked[n] for n in names])
        new, state = nx.adam_update(state, [policy.params[n] for n in names], grads)
        policy.params = dict(zip(names, new))
    return policy


# --------------------------------------------------------------------- gold


class GoldRewardModel:
    """Frozen, larger encoder plus one head; labels data and scores policies."""

    def __init__(self, encoder: Encoder, head: RewardHead):
        for arr in encoder.params.values():
            arr.setflags(write=False)
        head.weight.setflags(write=False)
        self._encoder = encoder
        self._head = head

    @classmethod
    def random(cls, vocab_size: int, embed_dim: int, hidden_dim: int, feature_dim: int,
               seed: int, gain: float = 1.0) -> "GoldRewardModel":
        enc = Encoder.random(vocab_size, embed_dim, hidden_dim, feature_dim, stream_seed(seed, "gold"), gain)
        return cls(enc, RewardHead.random(feature_dim, stream_seed(seed, "gold-head")))

    @property
    def encoder(self) -> Encoder:
        return self._encoder

    @property
    def head(self) -> RewardHead:
        return self._head

    def n_params(self) -> int:
        return self._encoder.n_params() + self._head.n_params()

    def score_batch(self, seqs: np.ndarray) -> np.ndarray:
        return self._encoder.features(seqs) @ self._head.weight + self._head.bias


def stream_seed(seed: int, key: str) -> int:
    """Derive an integer seed from (seed, key)."""
    return int(stream(seed, key).integers(0, 2**31 - 1))


def gold_score(gold: GoldRewardModel, prompt, completion) -> float:
    seq = np.concatenate([np.asarray(prompt), np.asarray(completion)])
    return float(gold.score_batch(seq[None, :])[0])


# ------------------------------------------------------------ serialization


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def _encoder_record(e: Encoder) -> dict:
    return {"dims": [e.vocab_size, e.embed_dim, e.hidden_dim, e.feature_dim], "seed": e.seed,
            "arrays": {k: _encode_array(v) for k, v in e.params.items()}}


def _encoder_from(r: dict) -> Encoder:
    return Encoder(*r["dims"], params={k: _decode_array(v) for k, v in r["arrays"].items()},
                   seed=r["seed"])


def _head_record(h: RewardHead) -> dict:
    return {"seed": h.seed, "weight": _encode_array(h.weight), "bias": _encode_array(np.array(h.bias))}


def _head_from(r: dict) -> RewardHead:
    return RewardHead(_decode_array(r["weight"]), _decode_array(r["bias"]).item(), r["seed"])


def model_to_dict(model) -> dict:
    if isinstance(model, MultiHeadRewardModel):
        body = {"encoder": _encoder_record(model.encoder),
                "heads": [_head_record(h) for h in model.heads]}
        kind = "multihead"
    elif isinstance(model, FullEnsembleRewardModel):
        body = {"members": [{"encoder": _encoder_record(e), "head": _head_record(h)}
                            for e, h in model.members]}
        kind = "ensemble"
    elif isinstance(model, GoldRewardModel):
        body = {"encoder": _encoder_record(model.encoder), "head": _head_record(model.head)}
        kind = "gold"
    elif isinstance(model, PolicyModel):
        body = {"dims": [model.vocab_size, model.embed_dim, model.hidden_dim,
                         model.prompt_len, model.completion_len], "seed": model.seed,
                "arrays": {k: _encode_array(v) for k, v in model.params.items()}}
        kind = "policy"
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return {"format_version": FORMAT_VERSION, "kind": kind, "body": body}


def model_from_dict(doc: dict):
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported model format_version {doc.get('format_version')!r}")
    kind, body = doc["kind"], doc["body"]
    if kind == "multihead":
        return MultiHeadRewardModel(_encoder_from(body["encoder"]), [_head_from(h) for h in body["heads"]])
    if kind == "ensemble":
        return FullEnsembleRewardModel([(_encoder_from(m["encoder"]), _head_from(m["head"]))
                                        for m in body["members"]])
    if kind == "gold":
        return GoldRewardModel(_encoder_from(body["encoder"]), _head_from(body["head"]))
    if kind == "policy":
        return PolicyModel(*body["dims"], params={k: _decode_array(v) for k, v in body["arrays"].items()},
                           seed=body["seed"])
    raise FormatError(f"unknown model kind {kind!r}")


def dumps_model(model) -> bytes:
    return json.dumps(model_to_dict(model), sort_keys=True, indent=1).encode("utf-8") + b"\n"


def save_model(model, path) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    try:
        return model_from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed model record ({exc})") from None
