"""scikit-learn style wrappers.

``X`` is always a sequence of ``(source, target)`` pairs of
:class:`~ssmn.datagen.AnnotatedImage`; ``y`` (optional) the gold matchings,
one integer array per pair giving the source index of every target part.
When ``y`` is omitted it is derived from part names.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import datagen, evaluation, training
from .config import RunConfig
from .factors import FactorParams, PartNameTable, prepare_image


def check_pairs(X) -> list[tuple[datagen.AnnotatedImage, datagen.AnnotatedImage]]:
    pairs = list(X)
    if not pairs:
        raise ValueError("expected at least one (source, target) pair")
    for k, pair in enumerate(pairs):
        if len(pair) != 2 or not all(isinstance(im, datagen.AnnotatedImage) for im in pair):
            raise TypeError(f"X[{k}] is not a (source, target) pair of AnnotatedImage")
        if len(pair[1].parts) > len(pair[0].parts):
            raise ValueError(f"X[{k}]: target has more parts than source")
    return pairs


def check_matchings(y, pairs) -> list[np.ndarray]:
    if y is None:
        return [datagen.gold_matching(s, t) for s, t in pairs]
    y = [np.asarray(m, dtype=np.intp) for m in y]
    if len(y) != len(pairs):
        raise ValueError(f"got {len(y)} matchings for {len(pairs)} pairs")
    for k, (m, (s, t)) in enumerate(zip(y, pairs)):
        if m.shape != (len(t.parts),) or len(set(m.tolist())) != len(m) or m.min() < 0 or m.max() >= len(s.parts):
            raise ValueError(f"y[{k}] is not an injective matching of {len(t.parts)} targets into {len(s.parts)} sources")
    return y


class PatchExtractor(TransformerMixin, BaseEstimator):
    """AnnotatedImage -> PreparedImage (DT or raw patches around every part)."""

    def __init__(self, use_dt=True, crop_fraction=0.2, patch_size=32, ink_threshold=0.98):
        self.use_dt = use_dt
        self.crop_fraction = crop_fraction
        self.patch_size = patch_size
        self.ink_threshold = ink_threshold

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return [prepare_image(im, self.use_dt, self.crop_fraction, self.patch_size, self.ink_threshold) for im in X]


def _examples(pairs, y, extractor: PatchExtractor):
    images = {}
    for s, t in pairs:
        images.setdefault(s.id, s)
        images.setdefault(t.id, t)
    prepared = dict(zip(images, extractor.transform(images.values())))
    return [training.PairExample(prepared[s.id], prepared[t.id], m) for (s, t), m in zip(pairs, y)]


class _PairMatcher(BaseEstimator):
    def predict(self, X) -> list[np.ndarray]:
        pairs = check_pairs(X)
        examples = _examples(pairs, [np.zeros(len(t.parts), np.intp) for _, t in pairs], self._extractor())
        predict = self._predictor()
        return [np.asarray(predict(i, ex), dtype=np.intp) for i, ex in enumerate(examples)]

    def score(self, X, y=None) -> float:
        """Fraction of target parts matched to their gold source."""
        pairs = check_pairs(X)
        gold = check_matchings(y, pairs)
        pred = self.predict(pairs)
        return float(sum(int(np.sum(p == g)) for p, g in zip(pred, gold)) / sum(len(g) for g in gold))

    def _extractor(self) -> PatchExtractor:
        return PatchExtractor(getattr(self, "use_dt", True), getattr(self, "crop_fraction", 0.2),
                              getattr(self, "patch_size", 32), getattr(self, "ink_threshold", 0.98))


class RandomMatcher(_PairMatcher):
    def __init__(self, seed=0):
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def _predictor(self):
        return evaluation.random_predictor(self.seed)


class NearestPatchMatcher(_PairMatcher):
    """Euclidean nearest raw patch per target part."""

    def __init__(self, one_to_one=False, crop_fraction=0.2, patch_size=32):
        self.one_to_one = one_to_one
        self.crop_fraction = crop_fraction
        self.patch_size = patch_size

    def fit(self, X=None, y=None):
        return self

    def _predictor(self):
        return evaluation.nn_rgb_predictor(self.one_to_one)


class AffineMatcher(_PairMatcher):
    """Beam search for the matching whose best affine fit has least residual."""

    def __init__(self, beam_size=100, target_order="shuffle", seed=0):
        self.beam_size = beam_size
        self.target_order = target_order
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def _predictor(self):
        return evaluation.affine_predictor(self.seed, self.beam_size, self.target_order)


class _Learned(_PairMatcher):
    def _config(self) -> RunConfig:
        keys = RunConfig.__dataclass_fields__
        return RunConfig(**{k: v for k, v in self.get_params().items() if k in keys})

    def _split(self, X, y, X_val, y_val):
        pairs = check_pairs(X)
        gold = check_matchings(y, pairs)
        train_images = {im.id: im for pair in pairs for im in pair}
        self.vocab_ = PartNameTable.from_training([im.names for im in train_images.values()],
                                                  self.min_name_count)
        ext = self._extractor()
        train = _examples(pairs, gold, ext)
        val = []
        if X_val is not None:
            vp = check_pairs(X_val)
            val = _examples(vp, check_matchings(y_val, vp), ext)
        return train, val


class SSMN(_Learned):
    """Structured set matching: surrogate pre-training, then conv-frozen
    search-based training; prediction by beam search."""

    def __init__(self, seed=0, use_fgc=True, use_fp=True, use_dt=True, crop_fraction=0.2, patch_size=32,
                 ink_threshold=0.98, min_name_count=2, train_beam=5, eval_beam=100, target_order="shuffle",
                 lr=1e-4, momentum=0.9, lr_decay=0.95, laso_lr=1e-4, amn_max_epochs=5, amn_patience=3,
                 amn_min_delta=0.2, laso_epochs=1):
        self.seed = seed
        self.use_fgc = use_fgc
        self.use_fp = use_fp
        self.use_dt = use_dt
        self.crop_fraction = crop_fraction
        self.patch_size = patch_size
        self.ink_threshold = ink_threshold
        self.min_name_count = min_name_count
        self.train_beam = train_beam
        self.eval_beam = eval_beam
        self.target_order = target_order
        self.lr = lr
        self.momentum = momentum
        self.lr_decay = lr_decay
        self.laso_lr = laso_lr
        self.amn_max_epochs = amn_max_epochs
        self.amn_patience = amn_patience
        self.amn_min_delta = amn_min_delta
        self.laso_epochs = laso_epochs

    def fit(self, X, y=None, X_val=None, y_val=None):
        cfg = self._config()
        train, val = self._split(X, y, X_val, y_val)
        sched = training.schedule_from(cfg)
        params = FactorParams.initialize(cfg.model_spec(), self.vocab_, cfg.seed)
        metrics = training.MetricsLog()
        self.pretrained_ = training.pretrain_amn(params, train, val, sched, metrics)
        self.params_ = training.train_laso(self.pretrained_, train, sched, metrics)
        self.metrics_ = metrics.records
        return self

    def _predictor(self):
        check_is_fitted(self, "params_")
        return evaluation.ssmn_predictor(self.params_, self.seed, self.eval_beam, self.target_order)


class MatchingNetwork(_Learned):
    """Locally normalized baseline; ``hungarian`` adds one-to-one decoding."""

    def __init__(self, seed=0, hungarian=False, use_dt=True, crop_fraction=0.2, patch_size=32, ink_threshold=0.98,
                 min_name_count=2, lr=1e-4, momentum=0.9, lr_decay=0.95, mn_max_epochs=5, amn_patience=3,
                 amn_min_delta=0.2):
        self.seed = seed
        self.hungarian = hungarian
        self.use_dt = use_dt
        self.crop_fraction = crop_fraction
        self.patch_size = patch_size
        self.ink_threshold = ink_threshold
        self.min_name_count = min_name_count
        self.lr = lr
        self.momentum = momentum
        self.lr_decay = lr_decay
        self.mn_max_epochs = mn_max_epochs
        self.amn_patience = amn_patience
        self.amn_min_delta = amn_min_delta

    def fit(self, X, y=None, X_val=None, y_val=None):
        cfg = self._config().replace(use_fgc=False, use_fp=False)
        train, val = self._split(X, y, X_val, y_val)
        params = FactorParams.initialize(cfg.model_spec(), self.vocab_, cfg.seed)
        metrics = training.MetricsLog()
        self.params_ = training.train_mn(params, train, val, training.schedule_from(cfg, cfg.mn_max_epochs), metrics)
        self.metrics_ = metrics.records
        return self

    def _predictor(self):
        check_is_fitted(self, "params_")
        return evaluation.mn_predictor(self.params_, self.seed, self.hungarian)

