import numpy as np
import pytest
from sklearn.base import clone

from ssmn import SSMN, AffineMatcher, MatchingNetwork, NearestPatchMatcher, PatchExtractor, RandomMatcher
from ssmn.estimators import check_matchings, check_pairs


@pytest.fixture(scope="module")
def pairs(tiny_dataset):
    return tiny_dataset.pair_list("train")[:6], tiny_dataset.pair_list("val")[:2], tiny_dataset.pair_list("test")[:4]


def test_params_and_clone():
    est = SSMN(seed=3, eval_beam=7)
    assert est.get_params()["eval_beam"] == 7
    assert clone(est).get_params() == est.get_params()
    assert clone(MatchingNetwork(hungarian=True)).hungarian is True


def test_validation_helpers(pairs):
    train, _, _ = pairs
    with pytest.raises(ValueError):
        check_pairs([])
    with pytest.raises(TypeError):
        check_pairs([(1, 2)])
    with pytest.raises(ValueError):
        check_matchings([np.zeros(10, int)], train[:1])
    gold = check_matchings(None, train[:1])[0]
    assert [train[0][0].names[g] for g in gold] == train[0][1].names


def test_patch_extractor(pairs):
    src = pairs[0][0][0]
    (prep,) = PatchExtractor(patch_size=8).fit_transform([src])
    assert prep.patches.shape == (10, 8, 8)


def test_unlearned_matchers(pairs):
    _, _, test = pairs
    for est in (RandomMatcher(seed=1), NearestPatchMatcher(one_to_one=True), AffineMatcher(beam_size=20)):
        pred = est.fit(test).predict(test)
        assert len(pred) == len(test) and all(len(set(p.tolist())) == 10 for p in pred)
        assert 0.0 <= est.score(test) <= 1.0


def test_affine_matcher_is_seeded(pairs):
    _, _, test = pairs
    a = AffineMatcher(beam_size=5, seed=2).predict(test)
    b = AffineMatcher(beam_size=5, seed=2).predict(test)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_ssmn_fit_predict(pairs):
    train, val, test = pairs
    est = SSMN(patch_size=8, amn_max_epochs=1, eval_beam=10, lr=1e-3)
    with pytest.raises(Exception):
        est.predict(test)
    est.fit(train, X_val=val)
    assert {r["phase"] for r in est.metrics_} == {"amn", "laso"}
    pred = est.predict(test)
    assert all(len(set(p.tolist())) == 10 for p in pred)
    assert 0.0 <= est.score(test) <= 1.0
    # conv weights are shared between the pre-trained and the final model
    assert np.array_equal(est.pretrained_["enc.conv1.w"].value, est.params_["enc.conv1.w"].value)


def test_matching_network_fit_predict(pairs):
    train, val, test = pairs
    est = MatchingNetwork(patch_size=8, mn_max_epochs=1, hungarian=True).fit(train, X_val=val)
    pred = est.predict(test)
    assert all(len(set(p.tolist())) == 10 for p in pred)
    assert sorted(est.params_.groups()["f_p"])  # tensors exist even when the factor is unused
