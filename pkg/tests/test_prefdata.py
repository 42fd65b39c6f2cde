import json

import numpy as np
import pytest

from overopt import models as m
from overopt import prefdata as pd
from overopt.seeding import stream

V, LP, LC = 32, 8, 16


@pytest.fixture(scope="module")
def world():
    nat = pd.natural_distribution(V, 0)
    ref = m.PolicyModel.random(V, 16, 24, LP, LC, seed=0)
    gold = m.GoldRewardModel.random(V, 16, 48, 8, seed=0, gain=3.0)
    return nat, ref, gold


@pytest.fixture(scope="module")
def pairs_10k(world):
    nat, ref, _ = world
    prompts = pd.generate_prompts(10_000, stream(1, "prompts"), nat, LP)
    return pd.generate_pairs(prompts, ref, seed=1)


def test_prompts_deterministic_and_in_range(world):
    nat = world[0]
    a = pd.generate_prompts(50, stream(3, "p"), nat, LP)
    b = pd.generate_prompts(50, stream(3, "p"), nat, LP)
    assert np.array_equal(a, b)
    assert a.shape == (50, LP) and a.min() >= 0 and a.max() < V
    with pytest.raises(ValueError):
        pd.generate_prompts(0, stream(3, "p"), nat, LP)


def test_prompt_unigrams_match_natural_distribution(world):
    nat = world[0]
    prompts = pd.generate_prompts(50_000, stream(4, "p"), nat, LP)
    n = prompts.size
    freq = np.bincount(prompts.ravel(), minlength=V) / n
    se = np.sqrt(nat * (1 - nat) / n)
    z = np.abs(freq - nat) / se
    assert (z <= 3).sum() >= V - 1
    assert z.max() < 4.5


def test_pairs_distinct_and_deterministic(world, pairs_10k):
    nat, ref, _ = world
    assert all(p.completion_a != p.completion_b for p in pairs_10k)
    prompts = np.array([p.prompt for p in pairs_10k[:200]])
    assert pd.generate_pairs(prompts, ref, seed=1) == pairs_10k[:200]


def test_collapsed_policy_raises(world):
    ref = world[1].copy()
    ref.params = {k: np.zeros_like(v) for k, v in ref.params.items()}
    ref.params["b2"] = np.full(V, -50.0)
    ref.params["b2"][3] = 50.0
    with pytest.raises(pd.DegeneratePolicyError):
        pd.generate_pairs(np.zeros((4, LP), dtype=np.int64), ref, seed=0)


def test_slot_symmetry(world, pairs_10k):
    gold = world[2]
    prompts = np.array([p.prompt for p in pairs_10k])
    ga = gold.score_batch(np.concatenate([prompts, np.array([p.completion_a for p in pairs_10k])], 1))
    gb = gold.score_batch(np.concatenate([prompts, np.array([p.completion_b for p in pairs_10k])], 1))
    pooled = np.sqrt(ga.var(ddof=1) / len(ga) + gb.var(ddof=1) / len(gb))
    assert abs(ga.mean() - gb.mean()) < 3 * pooled


def test_noise_rate_concentration(world, pairs_10k):
    ds = pd.gold_label(pairs_10k, world[2], 0.25, seed=1)
    frac = np.mean([p.flipped for p in ds.pairs])
    assert 0.23 <= frac <= 0.27
    for p in ds.pairs:
        agrees = p.label is (pd.Label.A_PREFERRED if p.gold_margin >= 0 else pd.Label.B_PREFERRED)
        assert agrees != p.flipped or abs(p.gold_margin) < pd.TIE_TOLERANCE


def test_zero_noise_labels_follow_margin_and_gold_is_perfect(world, pairs_10k):
    ds = pd.gold_label(pairs_10k[:1000], world[2], 0.0, seed=1)
    assert not any(p.flipped for p in ds.pairs)
    arr = ds.arrays()
    ra, rb = world[2].score_batch(arr.seqs_a()), world[2].score_batch(arr.seqs_b())
    assert np.array_equal(ra >= rb, arr.a_preferred)


def test_swap_symmetry(world, pairs_10k):
    sub = pairs_10k[:100]
    swapped = [pd.UnlabeledPair(p.prompt, p.completion_b, p.completion_a) for p in sub]
    x = pd.gold_label(sub, world[2], 0.25, seed=5)
    y = pd.gold_label(swapped, world[2], 0.25, seed=5)
    for p, q in zip(x.pairs, y.pairs):
        assert q.label is p.label.inverted()
        assert q.flipped == p.flipped
        assert q.gold_margin == pytest.approx(-p.gold_margin, abs=1e-15)


def test_noise_only_touches_labels(world, pairs_10k):
    sub = pairs_10k[:500]
    clean = pd.gold_label(sub, world[2], 0.0, seed=2)
    noisy = pd.gold_label(sub, world[2], 0.4, seed=2)
    assert [p.gold_margin for p in clean.pairs] == [p.gold_margin for p in noisy.pairs]
    assert [p.clean_label for p in clean.pairs] == [p.clean_label for p in noisy.pairs]


def test_invalid_noise_rate(world, pairs_10k):
    for rate in (-0.1, 0.5, 0.7):
        with pytest.raises(ValueError):
            pd.gold_label(pairs_10k[:3], world[2], rate, seed=0)


def test_bradley_terry_mode_flags_disagreement(world, pairs_10k):
    ds = pd.gold_label(pairs_10k[:2000], world[2], 0.0, seed=0, mode="bradley_terry")
    margins = np.array([p.gold_margin for p in ds.pairs])
    expected = np.mean(1 / (1 + np.exp(np.abs(margins))))
    observed = np.mean([p.flipped for p in ds.pairs])
    assert abs(observed - expected) < 4 * np.sqrt(expected * (1 - expected) / len(margins))


def test_build_dataset_is_pure(world):
    nat, ref, gold = world
    a = pd.dumps_dataset(pd.build_dataset(gold, ref, nat, seed=3, n_train=40, n_validation=10))
    b = pd.dumps_dataset(pd.build_dataset(gold, ref, nat, seed=3, n_train=40, n_validation=10))
    assert a == b
    ds = pd.loads_dataset(a)
    assert ds.splits == {"train": (0, 40), "validation": (40, 50)}
    assert ds.metadata["gold_fingerprint"] == pd.gold_fingerprint(gold)


def test_file_round_trip(world, tmp_path):
    nat, ref, gold = world
    ds = pd.build_dataset(gold, ref, nat, seed=4, n_train=30, n_validation=5)
    path = tmp_path / "d.jsonl"
    pd.save_dataset(ds, path)
    again = pd.load_dataset(path)
    assert again.pairs == ds.pairs and again.metadata == ds.metadata
    pd.save_dataset(again, tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_bytes() == path.read_bytes()


def test_truncated_file_is_a_parse_error(world):
    nat, ref, gold = world
    text = pd.dumps_dataset(pd.build_dataset(gold, ref, nat, seed=4, n_train=10, n_validation=2))
    with pytest.raises(pd.DatasetParseError, match="line"):
        pd.loads_dataset(text[:-20])
    lines = text.splitlines(keepends=True)
    with pytest.raises(pd.DatasetParseError, match="expected 12 pairs"):
        pd.loads_dataset("".join(lines[:-1]))


def test_parse_errors_carry_line_numbers():
    header = json.dumps({"format": "overopt-preferences", "version": 1, "count": 1,
                         "splits": {"train": [0, 1]}, "metadata": {"noise_rate": 0.0}})
    with pytest.raises(pd.DatasetParseError, match="line 2"):
        pd.loads_dataset(header + "\n{broken\n")
    with pytest.raises(pd.DatasetVersionError):
        pd.loads_dataset(header.replace('"version": 1', '"version": 2') + "\n")


HAND_WRITTEN = """\
{"count":2,"format":"overopt-preferences","metadata":{"noise_rate":0.25,"seed":9},"splits":{"train":[0,1],"validation":[1,2]},"version":1}
{"prompt":[1,2],"a":[3,4,5],"b":[5,4,3],"label":"A","flipped":false,"gold_margin":0.5}
{"prompt":[0,0],"a":[1,1,1],"b":[2,2,2],"label":"A","flipped":true,"gold_margin":-0.125}
"""


def test_hand_written_fixture():
    ds = pd.loads_dataset(HAND_WRITTEN)
    assert ds.pairs[0] == pd.PreferencePair((1, 2), (3, 4, 5), (5, 4, 3), pd.Label.A_PREFERRED, False, 0.5)
    assert ds.pairs[1] == pd.PreferencePair((0, 0), (1, 1, 1), (2, 2, 2), pd.Label.A_PREFERRED, True, -0.125)
    assert ds.pairs[1].clean_label is pd.Label.B_PREFERRED
    assert ds.split("validation") == [ds.pairs[1]]
    assert ds.metadata == {"noise_rate": 0.25, "seed": 9}
