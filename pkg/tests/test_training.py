import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ssmn import autodiff as ad
from ssmn import evaluation, factors, training
from ssmn.factors import FactorParams, ModelSpec, PairScoreCache, PartNameTable

from conftest import random_pair


def _loss(fn, scores, gold):
    return fn(ad.const(scores), gold).item()


def test_amn_loss_uniform_scores():
    assert _loss(training.amn_loss, np.zeros((10, 10)), np.arange(10)) == pytest.approx(2 * 10 * math.log(10), abs=1e-12)


def test_mn_loss_uniform_scores():
    assert _loss(training.mn_loss, np.zeros((10, 10)), np.arange(10)) == pytest.approx(10 * math.log(10), abs=1e-12)


def test_amn_loss_two_by_two_by_hand():
    s = np.array([[1.0, 0.0], [0.0, 0.0]])
    gold = [0, 1]
    lse = math.log(math.e + 1)
    # rows: -(1 - lse) - (0 - log 2); columns identical by symmetry
    expected = 2 * ((lse - 1) + math.log(2))
    assert _loss(training.amn_loss, s, gold) == pytest.approx(expected, abs=1e-12)


def test_amn_loss_respects_permutation():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(5, 5))
    perm = rng.permutation(5)
    # relabelling targets permutes the columns and the gold matching together
    a = _loss(training.amn_loss, s, np.arange(5))
    b = _loss(training.amn_loss, s[:, perm], np.arange(5)[perm])
    assert a == pytest.approx(b, abs=1e-12)


def test_loss_inputs_validated():
    with pytest.raises(ValueError):
        training.amn_loss(ad.const(np.zeros((3, 2))), [0, 1])
    with pytest.raises(ValueError):
        training.mn_loss(ad.const(np.zeros((3, 3))), [0, 0, 1])


# --- search-based hinge -------------------------------------------------------------

def _diag(k=3, margin=10.0):
    return margin * np.eye(k)


def test_laso_zero_loss_when_gold_leads_by_more_than_k():
    res = training.laso_search(PairScoreCache.from_local(_diag()), [0, 1, 2], beam_size=2, target_order="fixed")
    assert res.loss == 0.0
    assert res.violations == []


def test_laso_single_hinge_inside_beam():
    local = _diag()
    local[2, 1] = 9.5  # target 1 -> source 2 trails gold by only 0.5
    res = training.laso_search(PairScoreCache.from_local(local), [0, 1, 2], beam_size=2, target_order="fixed")
    # step 1: beam {[0,1]: 20, [0,2]: 19.5}; lowest has one error -> 1 + 19.5 - 20
    assert res.loss == pytest.approx(0.5, abs=1e-12)
    (v,) = res.violations
    assert (v.step, v.offender, v.gold, v.delta, v.restart) == (1, (0, 2), (0, 1), 1, False)


def test_laso_single_hinge_with_restart():
    local = _diag()
    local[2, 1] = 12.0
    res = training.laso_search(PairScoreCache.from_local(local), [0, 1, 2], beam_size=1, target_order="fixed")
    # step 1: beam {[0,2]: 22}; gold [0,1] scores 20 -> 1 + 22 - 20, then restart from gold
    assert res.loss == pytest.approx(3.0, abs=1e-12)
    (v,) = res.violations
    assert (v.step, v.offender, v.restart) == (1, (0, 2), True)
    assert res.restarts == 1


@given(st.integers(2, 6), st.integers(0, 2 ** 31))
def test_beam_one_matches_greedy_from_gold_prefix(k, seed):
    rng = np.random.default_rng(seed)
    local = rng.normal(size=(k, k))
    gold = rng.permutation(k)
    order = rng.permutation(k)
    res = training.laso_search(PairScoreCache.from_local(local), gold, beam_size=1, target_order=order)
    expected = []
    used = set()
    for depth, t in enumerate(order):
        free = [s for s in range(k) if s not in used]
        choice = max(free, key=lambda s: (local[s, t], -s))
        if choice != gold[t]:
            expected.append((depth, 1 + local[choice, t] - local[gold[t], t]))
        used.add(int(gold[t]))
    assert [v.step for v in res.violations] == [d for d, _ in expected]
    assert res.loss == pytest.approx(sum(h for _, h in expected), abs=1e-9)


def _small_params(seed=0, **spec):
    rng = np.random.default_rng([seed, 2])
    p = FactorParams.initialize(ModelSpec(patch_size=8, **spec), PartNameTable(["head", "tail"]), seed)
    for t in p.tensors.values():
        t.value[...] += rng.normal(0, 0.05, size=t.value.shape)
    return p


def test_laso_backward_matches_finite_differences():
    p = _small_params()
    rng = np.random.default_rng(3)
    src, tgt = random_pair(rng, 4)
    so, to = rng.permutation(4), rng.permutation(4)
    gold = rng.permutation(4)
    fwd = factors.PairForward(p, src, tgt, so, to)
    res = training.laso_search(fwd.cache, gold, beam_size=2)
    assert res.violations, "fixture should produce violations"
    grads = training.laso_backward(fwd, res.violations)
    names = ["sc.w1", "ac.b1", "part.w2", "ctx.fwd.wh", "enc.fc2.w", "enc.conv1.w"]
    tensors = [p[n] for n in names]

    def objective():
        total = 0.0
        for v in res.violations:
            bad, good = v.prefixes()
            total += v.delta + factors.reference_score(p, src, tgt, bad, so, to)["total"] \
                - factors.reference_score(p, src, tgt, good, so, to)["total"]
        return total

    def signature():
        probe = factors.PairForward(p, src, tgt, so, to)
        for v in res.violations:
            probe.weighted_score(v.prefixes(), [1.0, -1.0])
        return probe.tape.activation_signature()

    assert objective() == pytest.approx(res.loss, abs=1e-9)
    # terms shared by offender and gold cancel exactly in the analytic gradient but
    # leave ~1e-11 roundoff in the difference quotient, hence the absolute floor
    sig0, h, checked = signature(), 1e-5, 0
    for n in ["sc.w1", "sc.b2", "ac.b1", "part.w2", "part.table", "ctx.fwd.wh", "enc.fc2.w", "enc.conv1.w"]:
        flat = p[n].value.reshape(-1)
        for k in np.random.default_rng(0).choice(flat.size, size=min(flat.size, 12), replace=False):
            orig = flat[k]
            flat[k] = orig + h
            fp, sp = objective(), signature()
            flat[k] = orig - h
            fm, sm = objective(), signature()
            flat[k] = orig
            if sp != sig0 or sm != sig0:
                continue
            assert grads[n].reshape(-1)[k] == pytest.approx((fp - fm) / (2 * h), rel=1e-4, abs=1e-7), (n, k)
            checked += 1
    assert checked > 60


def test_laso_backward_respects_trainable():
    p = _small_params()
    src, tgt = random_pair(np.random.default_rng(4), 3)
    fwd = factors.PairForward(p, src, tgt)
    res = training.laso_search(fwd.cache, [2, 0, 1], beam_size=1)
    grads = training.laso_backward(fwd, res.violations, ["sc.w"])
    assert list(grads) == ["sc.w"]


# --- optimizer ----------------------------------------------------------------------

def test_sgd_momentum_closed_form():
    params = {"w": ad.param(np.zeros(2), "w")}
    state = training.OptimizerState(lr=0.1, momentum=0.9, decay=0.5)
    for _ in range(3):
        assert training.sgd_step(params, {"w": np.ones(2)}, state)
    # v_n = -lr (1 + mu + ... + mu^(n-1)); theta = sum of v
    np.testing.assert_allclose(params["w"].value, -(0.1 + 0.19 + 0.271), atol=1e-15)
    training.end_epoch(state)
    assert state.lr == 0.05 and state.steps == 3


def test_sgd_skips_non_finite_gradients():
    params = {"w": ad.param(np.ones(2), "w"), "u": ad.param(np.ones(1), "u")}
    state = training.OptimizerState(lr=0.1)
    assert not training.sgd_step(params, {"u": np.ones(1), "w": np.array([1.0, np.nan])}, state)
    assert state.skipped == 1
    np.testing.assert_array_equal(params["w"].value, 1.0)
    np.testing.assert_array_equal(params["u"].value, 1.0)


# --- fitting ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_examples(tiny_dataset):
    prepared = {im.id: factors.prepare_image(im, out_size=8) for im in tiny_dataset.images.values()}
    train = training.make_examples(tiny_dataset.pair_list("train")[:10], prepared)
    val = training.make_examples(tiny_dataset.pair_list("val")[:4], prepared)
    vocab = PartNameTable.from_training([im.names for im in tiny_dataset.split_images("train")])
    return train, val, vocab


def test_amn_pretraining_reduces_loss(toy_examples):
    train, val, vocab = toy_examples
    params = FactorParams.initialize(ModelSpec(patch_size=8), vocab, 0)
    metrics = training.MetricsLog()
    sched = training.Schedule(lr=1e-3, max_epochs=4, patience=10, min_delta=-1e9)
    training.pretrain_amn(params, train, val, sched, metrics)
    losses = [r["mean_loss"] for r in metrics.records if r.get("event") == "validation"]
    assert len(losses) == 4
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_plateau_stopping_returns_best_params(toy_examples):
    train, val, vocab = toy_examples
    params = FactorParams.initialize(ModelSpec(patch_size=8), vocab, 0)
    metrics = training.MetricsLog()
    # an unreachable improvement threshold stops after `patience` further epochs
    sched = training.Schedule(lr=1e-3, max_epochs=10, patience=2, min_delta=1e9)
    start = params.digest()
    best = training.pretrain_amn(params, train, val, sched, metrics)
    epochs = [r for r in metrics.records if r.get("event") == "validation"]
    assert len(epochs) == 3
    assert best.digest() != start  # first epoch always becomes the best so far
    assert best.digest() != params.digest()


def test_laso_freezes_convolutions(toy_examples):
    train, _, vocab = toy_examples
    params = FactorParams.initialize(ModelSpec(patch_size=8), vocab, 1)
    sched = training.Schedule(laso_lr=1e-2, train_beam=2)
    out = training.train_laso(params, train[:4], sched, training.MetricsLog())
    for n in params.names():
        same = np.array_equal(out[n].value, params[n].value)
        if ".conv" in n:
            assert same, n
    assert out.digest() != params.digest()
    assert params.digest() == FactorParams.initialize(ModelSpec(patch_size=8), vocab, 1).digest()


def test_disabled_factors_stay_untouched(toy_examples):
    train, _, vocab = toy_examples
    params = FactorParams.initialize(ModelSpec(patch_size=8, use_fgc=False), vocab, 1)
    assert not set(training.trainable_after_freeze(params)) & {"sc.w", "ac.w", "enc.conv1.w"}
    out = training.train_laso(params, train[:4], training.Schedule(laso_lr=1e-2, train_beam=2),
                              training.MetricsLog())
    for n in params.groups()["f_sc"] + params.groups()["f_ac"]:
        np.testing.assert_array_equal(out[n].value, params[n].value)


def test_random_matcher_calibration():
    rng = np.random.default_rng(0)
    examples = []
    for i in range(1000):
        src, tgt = random_pair(rng, 10, size=4)
        examples.append(training.PairExample(src, tgt, rng.permutation(10)))
    res = training.evaluate("Random", evaluation.random_predictor(0), examples)
    assert res.total == 10_000
    assert abs(res.accuracy - 10.0) <= 1.0


def test_evaluate_counts_per_category():
    rng = np.random.default_rng(1)
    src, tgt = random_pair(rng, 3)
    ex = training.PairExample(src, tgt, np.array([2, 0, 1]))
    res = training.evaluate("fixed", lambda i, e: np.array([2, 1, 0]), [ex, ex])
    assert (res.correct, res.total) == (2, 6)
    assert res.per_category == {"c": (2, 6)}
    assert res.accuracy == pytest.approx(100 / 3)


def test_metrics_log_has_no_timestamps(tmp_path):
    log = training.MetricsLog(tmp_path / "m.jsonl")
    log.write(phase="x", loss=1.5)
    assert (tmp_path / "m.jsonl").read_text() == '{"loss": 1.5, "phase": "x"}\n'
