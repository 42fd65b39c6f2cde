import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from overopt import models as m
from overopt import numerics as nx
from overopt import prefdata as pd
from overopt import reward_training as rt
from overopt.seeding import stream

V, E, H, D = 32, 16, 24, 8
reals = st.floats(-1e3, 1e3, allow_nan=False)


def _pairs_dataset(prompts, a, b, a_pref, margins, n_train, flipped=None):
    flipped = np.zeros(len(a), bool) if flipped is None else flipped
    pairs = [pd.PreferencePair(tuple(p), tuple(x), tuple(y),
                               pd.Label.A_PREFERRED if ap else pd.Label.B_PREFERRED, bool(f), float(mg))
             for p, x, y, ap, mg, f in zip(prompts.tolist(), a.tolist(), b.tolist(), a_pref, margins, flipped)]
    return pd.PreferenceDataset(pairs, {"train": (0, n_train), "validation": (n_train, len(pairs))},
                                {"noise_rate": 0.0})


@pytest.fixture(scope="module")
def planted():
    """Labels from a planted linear head on the features of a frozen random encoder."""
    rng = stream(0, "planted")
    n = 3000
    prompts = rng.integers(0, V, size=(n, 4))
    a, b = rng.integers(0, V, size=(n, 8)), rng.integers(0, V, size=(n, 8))
    enc = m.Encoder.random(V, E, H, D, seed=3)
    head = m.RewardHead.random(D, seed=4)
    ra = enc.features(np.concatenate([prompts, a], 1)) @ head.weight
    rb = enc.features(np.concatenate([prompts, b], 1)) @ head.weight
    return _pairs_dataset(prompts, a, b, ra >= rb, ra - rb, 2500)


@pytest.fixture(scope="module")
def noisy_world():
    nat = pd.natural_distribution(V, 0)
    ref = m.train_reference_policy(m.PolicyModel.random(V, E, H, 8, 16, seed=0), nat, seed=0)
    gold = m.GoldRewardModel.random(V, E, 64, D, seed=0, gain=3.0)
    ds = pd.build_dataset(gold, ref, nat, seed=0, n_train=3000, n_validation=1000, noise_rate=0.25)
    return ref, gold, ds


def test_bt_loss_values():
    assert abs(rt.bt_loss(0.0, 0.0) - math.log(2)) <= 1e-12
    assert rt.bt_loss(1.0, 0.0) == pytest.approx(-math.log(1 / (1 + math.exp(-1.0))), abs=1e-15)
    assert rt.bt_loss(1.0, 0.0) == pytest.approx(0.313262, abs=1e-6)
    big = rt.bt_loss(50.0, 0.0)
    assert math.isfinite(big) and 0 < big < 1e-20
    assert math.isfinite(rt.bt_loss(0.0, 800.0))
    with pytest.raises(nx.NumericError):
        rt.bt_loss(math.inf, 0.0)


@given(reals, reals, st.floats(-100, 100))
def test_bt_loss_shift_invariant(a, b, c):
    x, y = rt.bt_loss(a, b), rt.bt_loss(a + c, b + c)
    assert abs(x - y) <= 1e-12 * max(1.0, x)


@given(st.floats(-30, 30), st.floats(1e-3, 5))
def test_bt_loss_positive_and_decreasing(delta, step):
    assert rt.bt_loss(delta, 0.0) > 0
    assert rt.bt_loss(delta + step, 0.0) < rt.bt_loss(delta, 0.0)


@pytest.mark.parametrize("delta", [-5.0, -1.0, 0.0, 0.7, 3.0])
def test_bt_loss_gradient(delta):
    tape = nx.Tape()
    rp, rd = tape.watch(delta), tape.watch(0.0)
    g, gd = tape.gradient(rt.bt_loss(rp, rd), [rp, rd])
    expected = -1 / (1 + math.exp(delta))  # -sigmoid(-delta)
    assert -1 < g < 0
    assert g == pytest.approx(expected, rel=1e-12)
    assert gd == pytest.approx(-expected, rel=1e-12)
    h = 1e-6
    fd = (rt.bt_loss(delta + h, 0.0) - rt.bt_loss(delta - h, 0.0)) / (2 * h)
    assert abs(fd - g) / abs(g) < 1e-6


def test_aggregate_examples():
    r = [1.0, -0.5, 2.0]
    assert rt.aggregate(r, rt.MIN) == -0.5
    assert rt.aggregate(r, rt.MEAN) == pytest.approx(0.8333333333333334, abs=1e-15)
    assert rt.aggregate(r, rt.MAX) == 2.0
    assert rt.aggregate(r, rt.SINGLE(2)) == 2.0
    assert rt.aggregate_with_index([0.5, 0.2, 0.2], rt.MIN) == (0.2, 1)
    with pytest.raises(ValueError):
        rt.aggregate([], rt.MIN)
    with pytest.raises(ValueError):
        rt.aggregate(r, rt.SINGLE(3))


@given(st.lists(reals, min_size=1, max_size=8))
def test_aggregate_order(r):
    assert rt.aggregate(r, rt.MIN) <= rt.aggregate(r, rt.MEAN) <= rt.aggregate(r, rt.MAX)


def test_objective_parse_round_trip():
    for obj in (rt.MIN, rt.MEAN, rt.MAX, rt.SINGLE(0), rt.SINGLE(2)):
        assert rt.AggregationObjective.parse(str(obj)) == obj


def test_proxy_reward_compositional():
    model = m.MultiHeadRewardModel.create(m.Encoder.random(V, E, H, D, seed=1), 3, 10)
    prompt, comp = np.arange(8), np.arange(8, 24) % V
    feats = m.encode(model.encoder, np.concatenate([prompt, comp]))
    heads = [m.head_reward(h, feats) for h in model.heads]
    assert rt.proxy_reward(model, rt.SINGLE(0), prompt, comp) == pytest.approx(heads[0], abs=1e-15)
    assert rt.proxy_reward(model, rt.MIN, prompt, comp) == pytest.approx(min(heads), abs=1e-15)
    assert rt.proxy_reward(model, rt.MIN, prompt, comp) <= rt.proxy_reward(model, rt.MEAN, prompt, comp)


def test_k1_regimes_coincide(planted):
    cfg = rt.RmTrainConfig(learning_rate=3e-3, epochs=2, seed=5)
    enc = m.Encoder.random(V, E, H, D, seed=7)
    head = m.RewardHead.random(D, seed=7)
    mh, _ = rt.train_reward_model(planted, m.MultiHeadRewardModel(enc, [head]), cfg)
    ens, _ = rt.train_reward_model(planted, m.FullEnsembleRewardModel([(enc, head)]), cfg)
    (e2, h2), = ens.members
    for k in enc.params:
        assert np.array_equal(mh.encoder.params[k], e2.params[k])
    assert np.array_equal(mh.heads[0].weight, h2.weight) and mh.heads[0].bias == h2.bias


def test_planted_separable_data_is_learned(planted):
    model = m.MultiHeadRewardModel.create(m.Encoder.random(V, E, H, D, seed=8), 1, 8)
    trained, log = rt.train_reward_model(planted, model, rt.RmTrainConfig(learning_rate=1e-2, epochs=10, seed=0))
    assert log.epochs[-1].val_acc_noisy > 0.95


def test_training_is_deterministic_and_leaves_input_untouched(planted):
    model = m.MultiHeadRewardModel.create(m.Encoder.random(V, E, H, D, seed=2), 3, 2)
    before = m.dumps_model(model)
    cfg = rt.RmTrainConfig(epochs=1, seed=3)
    a, _ = rt.train_reward_model(planted, model, cfg)
    b, _ = rt.train_reward_model(planted, model, cfg)
    assert m.dumps_model(a) == m.dumps_model(b)
    assert m.dumps_model(model) == before


def test_one_encoder_pass_per_step(planted):
    model = m.MultiHeadRewardModel.create(m.Encoder.random(V, E, H, D, seed=2), 5, 2)
    cfg = rt.RmTrainConfig(epochs=2, batch_size=100, seed=0)
    before = m.Encoder.calls
    rt.train_reward_model(planted, model, cfg)
    steps = 2 * math.ceil(2500 / 100)
    evals = 2 * 2  # validation features of slot a and slot b, once per epoch
    assert m.Encoder.calls - before == steps + evals


def test_bootstrap_masks_change_heads(planted):
    model = m.MultiHeadRewardModel.create(m.Encoder.random(V, E, H, D, seed=2), 2, 2)
    plain, _ = rt.train_reward_model(planted, model, rt.RmTrainConfig(seed=1))
    boot, _ = rt.train_reward_model(planted, model, rt.RmTrainConfig(seed=1, per_head_bootstrap=True))
    assert not np.array_equal(plain.heads[0].weight, boot.heads[0].weight)


def test_noise_ceiling(noisy_world):
    ref, gold, ds = noisy_world
    val = ds.arrays("validation")
    # a perfect model (the gold model itself) scores exactly the unflipped fraction
    ra, rb = gold.score_batch(val.seqs_a()), gold.score_batch(val.seqs_b())
    perfect = rt.accuracy(ra, rb, val.a_preferred)
    assert perfect == 1 - np.mean([p.flipped for p in ds.split("validation")])
    # Monte Carlo of the flip process: expected perfect-model accuracy is 1 - noise_rate
    sims = stream(0, "ceiling").random((2000, len(val))) >= 0.25
    assert abs(sims.mean() - 0.75) < 3 * math.sqrt(0.75 * 0.25 / sims.size)
    model = m.MultiHeadRewardModel.create(m.Encoder.from_policy(ref, D, 1), 1, 1)
    _, log = rt.train_reward_model(ds, model, rt.RmTrainConfig(learning_rate=3e-3, epochs=4, seed=1))
    last = log.epochs[-1]
    assert last.val_acc_noisy <= 0.78
    assert last.val_acc_clean > last.val_acc_noisy


def test_heads_are_diverse_after_training(noisy_world):
    ref, _, ds = noisy_world
    model = m.MultiHeadRewardModel.create(m.Encoder.from_policy(ref, D, 2), 3, 2)
    trained, _ = rt.train_reward_model(ds, model, rt.RmTrainConfig(seed=2))
    dis = rt.head_disagreement(trained, ds.arrays("validation"))
    off = dis[~np.eye(3, dtype=bool)]
    assert (off > 0).all()
    assert np.allclose(dis, dis.T) and not np.diag(dis).any()


def test_empty_training_split_rejected(planted):
    empty = pd.PreferenceDataset([], {"train": (0, 0)}, {"noise_rate": 0.0})
    model = m.MultiHeadRewardModel.create(m.Encoder.random(V, E, H, D, seed=2), 1, 2)
    with pytest.raises(ValueError):
        rt.train_reward_model(empty, model, rt.RmTrainConfig())


def test_divergence_reports_epoch_and_batch(planted):
    model = m.MultiHeadRewardModel.create(m.Encoder.random(V, E, H, D, seed=2), 1, 2)
    model.heads[0].weight[:] = 1e306
    with pytest.raises(rt.TrainingError, match="epoch 0, batch 0"):
        rt.train_reward_model(planted, model, rt.RmTrainConfig())


def test_metrics_table(planted):
    model = m.MultiHeadRewardModel.create(m.Encoder.random(V, E, H, D, seed=2), 2, 2)
    _, log = rt.train_reward_model(planted, model, rt.RmTrainConfig(epochs=2))
    lines = log.to_table().splitlines()
    assert lines[0] == ("epoch,train_loss,val_acc_noisy,val_acc_clean,head0_acc_noisy,head1_acc_noisy,"
                        "head0_acc_clean,head1_acc_clean")
    assert [ln.split(",")[0] for ln in lines[1:]] == ["1", "2"]
