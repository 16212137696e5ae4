"""Objectives, the optimizer, the two-phase training pipeline and evaluation.

Phase 1 fits the encoder, context network and part-name MLP with the
row+column softmax surrogate on the local score matrix. Phase 2 freezes
the convolutions and trains every factor with the search-based hinge
objective: the gold prefix must outscore the lowest beam element by the
number of parts that element gets wrong.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint, inference
from .autodiff import Tensor
from .checkpoint import Checkpoint
from .datagen import check_disjoint
from .factors import FactorParams, PairForward, PartNameTable, PreparedImage, prepare_image

log = logging.getLogger(__name__)


# --- losses ---------------------------------------------------------------------------

def _check_gold(gold, ks: int, kt: int, square: bool) -> np.ndarray:
    gold = np.asarray(gold, dtype=np.intp)
    if gold.shape != (kt,):
        raise ValueError(f"gold matching must have one entry per target ({kt}), got shape {gold.shape}")
    if square and ks != kt:
        raise ValueError(f"score matrix must be square, got {ks}x{kt}")
    if gold.min(initial=0) < 0 or gold.max(initial=0) >= ks or len(set(gold.tolist())) != kt:
        raise ValueError(f"gold {gold.tolist()} is not an injective assignment into {ks} sources")
    return gold


def _pick(logp: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    n, m = logp.shape
    return ad.take(ad.reshape(logp, (n * m,)), rows * m + cols)


def amn_loss(scores: Tensor, gold) -> Tensor:
    """Sum of K row-wise and K column-wise softmax cross-entropies of the
    (sources x targets) score matrix against the gold permutation."""
    ks, kt = scores.shape
    gold = _check_gold(gold, ks, kt, square=True)
    inv = np.argsort(gold)  # target matched to each source
    rows = _pick(ad.log_softmax(scores), np.arange(ks), inv)
    cols = _pick(ad.log_softmax(ad.transpose(scores)), np.arange(kt), gold)
    return ad.scale(ad.add(ad.sum_(rows), ad.sum_(cols)), -1.0)


def mn_loss(scores: Tensor, gold) -> Tensor:
    """Negative log-likelihood of a per-target softmax over sources."""
    ks, kt = scores.shape
    gold = _check_gold(gold, ks, kt, square=False)
    return ad.scale(ad.sum_(_pick(ad.log_softmax(ad.transpose(scores)), np.arange(kt), gold)), -1.0)


# --- search-based hinge objective -------------------------------------------------------

@dataclass(frozen=True)
class MarginViolation:
    step: int
    targets: tuple[int, ...]
    gold: tuple[int, ...]
    gold_score: float
    offender: tuple[int, ...]
    offender_score: float
    delta: int
    restart: bool

    @property
    def hinge(self) -> float:
        return self.delta + self.offender_score - self.gold_score

    def prefixes(self) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
        """(target, source) lists for the offending and the gold prefix."""
        return list(zip(self.targets, self.offender)), list(zip(self.targets, self.gold))


@dataclass
class LasoResult:
    loss: float
    violations: list[MarginViolation]

    @property
    def restarts(self) -> int:
        return sum(v.restart for v in self.violations)


def laso_search(scorer, gold, beam_size: int = 5, target_order=None, n_source: int | None = None) -> LasoResult:
    """Beam search against a gold matching, recording every step where the
    gold prefix fails to beat the lowest beam element by its error count.

    The beam is restarted from the gold prefix whenever gold is pruned. The
    last step keeps a single element.
    """
    gold = np.asarray(gold, dtype=np.intp)
    kt = len(gold)
    ks = scorer.shape[0] if n_source is None else n_source
    gold = _check_gold(gold, ks, kt, square=False)
    if beam_size < 1:
        raise ValueError("beam size must be >= 1")
    order = inference.resolve_order(kt, target_order)
    gold_seq = gold[order]
    assign = np.zeros((1, 0), dtype=np.intp)
    scores = np.zeros(1)
    gold_score = 0.0
    violations = []
    for depth, t in enumerate(order):
        cap = 1 if depth == kt - 1 else beam_size
        cand, cand_scores = inference.expand(scorer, assign, scores, order[:depth], int(t), ks)
        keep = inference.prune(cand, cand_scores, cap)
        assign, scores = cand[keep], cand_scores[keep]
        gold_prefix = gold_seq[:depth + 1]
        gold_score += float(scorer.extend(gold_prefix[None, :depth], order[:depth], int(t))[0, gold_seq[depth]])
        lowest, lowest_score = assign[-1], float(scores[-1])
        delta = int(np.count_nonzero(lowest != gold_prefix))
        on_beam = bool(np.any(np.all(assign == gold_prefix, axis=1)))
        if delta + lowest_score - gold_score > 0:
            violations.append(MarginViolation(
                depth, tuple(int(x) for x in order[:depth + 1]), tuple(int(x) for x in gold_prefix), gold_score,
                tuple(int(x) for x in lowest), lowest_score, delta, not on_beam))
        if not on_beam:
            assign, scores = gold_prefix[None, :].copy(), np.array([gold_score])
    return LasoResult(float(sum(v.hinge for v in violations)), violations)


def laso_example_loss(forward: PairForward, gold, beam_size: int = 5, target_order=None) -> LasoResult:
    return laso_search(forward.cache, gold, beam_size, target_order)


def laso_backward(forward: PairForward, violations: Sequence[MarginViolation],
                  trainable: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Gradient of the summed hinges: +grad f(offender) - grad f(gold) per
    violation. Parameters outside ``trainable`` get zeros."""
    names = forward.params.names() if trainable is None else list(trainable)
    if not violations:
        return {n: np.zeros_like(forward.params[n].value) for n in names}
    prefixes, weights = [], []
    for v in violations:
        bad, good = v.prefixes()
        prefixes += [bad, good]
        weights += [1.0, -1.0]
    objective = forward.weighted_score(prefixes, weights)
    grads = forward.backward(objective)
    return {n: grads[n] for n in names}


# --- optimizer --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    decay: float = 0.95
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0
    skipped: int = 0


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> bool:
    """v <- mu v - lr g; theta <- theta + v. Returns False (and counts the
    skip) when any gradient is non-finite; nothing is updated then."""
    for k, g in grads.items():
        if g.shape != params[k].value.shape:
            raise ad.ShapeError(f"gradient for {k} has shape {g.shape}, parameter {params[k].value.shape}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("non-finite gradient for %s; update skipped", k)
            return False
    for k in sorted(grads):
        v = state.velocity.get(k)
        if v is None:
            v = state.velocity[k] = np.zeros_like(grads[k])
        v *= state.momentum
        v -= state.lr * grads[k]
        params[k].value += v
    state.steps += 1
    return True


def end_epoch(state: OptimizerState) -> None:
    state.lr *= state.decay


# --- data plumbing ----------------------------------------------------------------------

@dataclass
class PairExample:
    source: PreparedImage
    target: PreparedImage
    gold: np.ndarray

    @property
    def id(self) -> str:
        return f"{self.source.id}->{self.target.id}"


def make_examples(pairs, prepared: dict[str, PreparedImage]) -> list[PairExample]:
    """Examples for (source, target) AnnotatedImage pairs; gold by part name."""
    out = []
    for s, t in pairs:
        index = {n: j for j, n in enumerate(s.names)}
        out.append(PairExample(prepared[s.id], prepared[t.id], np.array([index[n] for n in t.names], dtype=np.intp)))
    return out


class MetricsLog:
    """JSON-lines metrics sink (no timestamps, so reruns are byte-identical)."""

    def __init__(self, path: Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **record) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class Schedule:
    lr: float = 1e-4
    momentum: float = 0.9
    decay: float = 0.95
    max_epochs: int = 10
    patience: int = 3
    min_delta: float = 0.2  # accuracy points
    train_beam: int = 5
    laso_epochs: int = 1
    laso_lr: float = 1e-4
    seed: int = 0


def _orders(rng: np.random.Generator, ex: PairExample) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ks, kt = len(ex.source.names), len(ex.target.names)
    return rng.permutation(ks), rng.permutation(kt), rng.permutation(kt)


def local_scores(params: FactorParams, ex: PairExample, src_order=None, tgt_order=None) -> np.ndarray:
    with ad.no_tape():
        return PairForward(params, ex.source, ex.target, src_order, tgt_order, tables=False).local.value


def eval_orders(seed: int, index: int, ex: PairExample) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded per-pair context and search orders used at evaluation."""
    return _orders(np.random.default_rng([seed, 31, index]), ex)


def local_accuracy(params: FactorParams, examples: Sequence[PairExample], seed: int, one_to_one: bool) -> float:
    """Accuracy (percent) of decoding the local score matrix alone."""
    correct = total = 0
    for i, ex in enumerate(examples):
        so, to, _ = eval_orders(seed, i, ex)
        s = local_scores(params, ex, so, to)
        m = inference.match_hungarian(s) if one_to_one else inference.argmax_assignment(s)
        correct += int(np.sum(m == ex.gold))
        total += len(ex.gold)
    return 100.0 * correct / max(total, 1)


def _fit_local(params: FactorParams, train: Sequence[PairExample], val: Sequence[PairExample],
               sched: Schedule, metrics: MetricsLog, phase: str, loss_fn: Callable, one_to_one: bool,
               phase_code: int) -> FactorParams:
    """Per-pair SGD on a local-score objective with plateau stopping; the
    parameters with the best validation accuracy are returned."""
    state = OptimizerState(sched.lr, sched.momentum, sched.decay)
    trainable = params.names()
    best_acc, best = None, params.copy()
    stale = 0
    step = 0
    for epoch in range(sched.max_epochs):
        rng = np.random.default_rng([sched.seed, phase_code, epoch])
        total_loss = 0.0
        for idx in rng.permutation(len(train)):
            ex = train[idx]
            so, to, _ = _orders(rng, ex)
            fwd = PairForward(params, ex.source, ex.target, so, to, tables=False)
            with fwd.tape:
                loss = loss_fn(fwd.local, ex.gold)
            grads = fwd.backward(loss)
            ok = sgd_step(params.tensors, {k: grads[k] for k in trainable}, state)
            total_loss += loss.item()
            metrics.write(phase=phase, epoch=epoch, step=step, pair=ex.id, loss=loss.item(),
                          lr=state.lr, skipped=not ok)
            step += 1
        end_epoch(state)
        acc = local_accuracy(params, val, sched.seed, one_to_one) if val else 0.0
        metrics.write(phase=phase, epoch=epoch, event="validation", accuracy=acc,
                      mean_loss=total_loss / max(len(train), 1), skipped_updates=state.skipped)
        log.info("%s epoch %d: mean loss %.4f, val acc %.2f", phase, epoch, total_loss / max(len(train), 1), acc)
        if best_acc is None or acc >= best_acc + sched.min_delta:
            best_acc, best, stale = acc, params.copy(), 0
        else:
            stale += 1
            if stale >= sched.patience:
                break
    return best


def pretrain_amn(params, train, val, sched: Schedule, metrics: MetricsLog) -> FactorParams:
    return _fit_local(params, train, val, sched, metrics, "amn", amn_loss, True, 11)


def train_mn(params, train, val, sched: Schedule, metrics: MetricsLog) -> FactorParams:
    return _fit_local(params, train, val, sched, metrics, "mn", mn_loss, False, 17)


def trainable_after_freeze(params: FactorParams) -> list[str]:
    conv = set(params.conv_names())
    skip = set()
    if not params.spec.use_fgc:
        skip |= set(params.groups()["f_sc"] + params.groups()["f_ac"])
    if not params.spec.use_fp:
        skip |= set(params.groups()["f_p"])
    return [n for n in params.names() if n not in conv and n not in skip]


def train_laso(params: FactorParams, train: Sequence[PairExample], sched: Schedule,
               metrics: MetricsLog) -> FactorParams:
    """Conv-frozen search-based training for ``sched.laso_epochs`` epochs."""
    params = params.copy()
    state = OptimizerState(sched.laso_lr, sched.momentum, sched.decay)
    trainable = trainable_after_freeze(params)
    step = 0
    for epoch in range(sched.laso_epochs):
        rng = np.random.default_rng([sched.seed, 13, epoch])
        for idx in rng.permutation(len(train)):
            ex = train[idx]
            so, to, search = _orders(rng, ex)
            fwd = PairForward(params, ex.source, ex.target, so, to, frozen_conv=True, pair_id=ex.id)
            res = laso_example_loss(fwd, ex.gold, sched.train_beam, search)
            ok = True
            if res.violations:
                ok = sgd_step(params.tensors, laso_backward(fwd, res.violations, trainable), state)
            metrics.write(phase="laso", epoch=epoch, step=step, pair=ex.id, loss=res.loss,
                          violations=len(res.violations), restarts=res.restarts, lr=state.lr, skipped=not ok)
            step += 1
        end_epoch(state)
    return params


# --- evaluation -------------------------------------------------------------------------

@dataclass
class EvalResult:
    method: str
    correct: int
    total: int
    per_category: dict[str, tuple[int, int]]
    records: list[dict] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct / max(self.total, 1)


def evaluate(method: str, predict: Callable[[int, PairExample], np.ndarray],
             examples: Sequence[PairExample]) -> EvalResult:
    """Fraction of target parts assigned their gold source, overall and per
    category; ``predict(index, example)`` returns a target->source matching."""
    correct = total = 0
    per_cat: dict[str, list[int]] = {}
    records = []
    for i, ex in enumerate(examples):
        m = np.asarray(predict(i, ex), dtype=np.intp)
        hits = int(np.sum(m == ex.gold))
        correct += hits
        total += len(ex.gold)
        c = per_cat.setdefault(ex.target.category, [0, 0])
        c[0] += hits
        c[1] += len(ex.gold)
        records.append({"pair": ex.id, "correct": hits, "parts": len(ex.gold), "matching": m.tolist()})
    return EvalResult(method, correct, total, {k: (v[0], v[1]) for k, v in sorted(per_cat.items())}, records)


# --- pipeline ---------------------------------------------------------------------------

def schedule_from(cfg, max_epochs: int | None = None) -> Schedule:
    return Schedule(lr=cfg.lr, momentum=cfg.momentum, decay=cfg.lr_decay,
                    max_epochs=cfg.amn_max_epochs if max_epochs is None else max_epochs,
                    patience=cfg.amn_patience, min_delta=cfg.amn_min_delta, train_beam=cfg.train_beam,
                    laso_epochs=cfg.laso_epochs, laso_lr=cfg.laso_lr, seed=cfg.seed)


def prepare_images(images, cfg) -> dict[str, PreparedImage]:
    return {im.id: prepare_image(im, cfg.use_dt, cfg.crop_fraction, cfg.patch_size, cfg.ink_threshold)
            for im in images}


def dataset_examples(ds, cfg, splits=("train", "val", "test")) -> dict[str, list[PairExample]]:
    check_disjoint(ds.images.values())
    wanted = [im for im in ds.images.values() if im.split in splits]
    prepared = prepare_images(wanted, cfg)
    return {s: make_examples(ds.pair_list(s), prepared) for s in splits}


def build_vocab(ds, cfg) -> PartNameTable:
    return PartNameTable.from_training([im.names for im in ds.split_images("train")], cfg.min_name_count)


def pretrain(ds, cfg, out_dir, examples=None) -> Checkpoint:
    """Phase 1: surrogate pre-training; writes pretrain.ckpt."""
    out_dir = Path(out_dir)
    examples = examples or dataset_examples(ds, cfg)
    params = FactorParams.initialize(cfg.model_spec(), build_vocab(ds, cfg), cfg.seed)
    metrics = MetricsLog(out_dir / "metrics_pretrain.jsonl")
    best = pretrain_amn(params, examples["train"], examples["val"], schedule_from(cfg), metrics)
    checkpoint.save(out_dir / "pretrain.ckpt", best, cfg, "amn")
    return Checkpoint(best, cfg, "amn")


def finetune(ds, cfg, init: Checkpoint, out_dir, name: str = "ssmn", examples=None) -> Checkpoint:
    """Phase 2 from a phase-1 checkpoint, under ``cfg``'s factor flags."""
    out_dir = Path(out_dir)
    if init.config.arch_hash() != cfg.arch_hash():
        raise checkpoint.CheckpointError("initial checkpoint was trained with a different architecture config")
    examples = examples or dataset_examples(ds, cfg, ("train",))
    start = FactorParams(cfg.model_spec(), init.params.vocab, init.params.copy().tensors)
    metrics = MetricsLog(out_dir / f"metrics_{name}.jsonl")
    params = train_laso(start, examples["train"], schedule_from(cfg), metrics)
    checkpoint.save(out_dir / f"{name}.ckpt", params, cfg, "laso")
    return Checkpoint(params, cfg, "laso")


def train_matching_network(ds, cfg, out_dir, examples=None) -> Checkpoint:
    """Locally normalized baseline: appearance similarity only, per-target softmax."""
    out_dir = Path(out_dir)
    cfg = cfg.replace(use_fgc=False, use_fp=False)
    examples = examples or dataset_examples(ds, cfg)
    params = FactorParams.initialize(cfg.model_spec(), build_vocab(ds, cfg), cfg.seed)
    metrics = MetricsLog(out_dir / "metrics_mn.jsonl")
    best = train_mn(params, examples["train"], examples["val"], schedule_from(cfg, cfg.mn_max_epochs), metrics)
    checkpoint.save(out_dir / "mn.ckpt", best, cfg, "mn")
    return Checkpoint(best, cfg, "mn")


def train_pipeline(ds, cfg, out_dir) -> Checkpoint:
    """Surrogate pre-training followed by conv-frozen search-based training."""
    examples = dataset_examples(ds, cfg)
    init = pretrain(ds, cfg, out_dir, examples)
    return finetune(ds, cfg, init, out_dir, "ssmn", examples)
