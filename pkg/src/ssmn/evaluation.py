"""Per-method matchers over prepared pairs and the accuracy report."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import inference, nets
from .factors import FactorParams, PairForward, PairScoreCache
from .training import EvalResult, PairExample, eval_orders, evaluate, local_scores

METHODS = ("Random", "NN-RGB", "Affine", "MN", "MN+Hungarian", "AMN+NN", "SSMN-f_gc", "SSMN")

Predictor = Callable[[int, PairExample], np.ndarray]


def _search_order(seed: int, i: int, ex: PairExample, target_order: str):
    _, _, search = eval_orders(seed, i, ex)
    return search if target_order == "shuffle" else None


def random_predictor(seed: int) -> Predictor:
    def predict(i, ex):
        return inference.random_matching(len(ex.source.names), len(ex.target.names),
                                         np.random.default_rng([seed, 41, i]))
    return predict


def nn_rgb_predictor(one_to_one: bool = False) -> Predictor:
    return lambda i, ex: inference.nn_rgb_baseline(ex.source.raw_patches, ex.target.raw_patches, one_to_one)


def affine_predictor(seed: int, beam: int = 100, target_order: str = "shuffle") -> Predictor:
    def predict(i, ex):
        return inference.affine_baseline(ex.source.locations, ex.target.locations, beam,
                                         _search_order(seed, i, ex, target_order))
    return predict


def mn_predictor(params: FactorParams, seed: int, one_to_one: bool) -> Predictor:
    def predict(i, ex):
        so, to, _ = eval_orders(seed, i, ex)
        s = local_scores(params, ex, so, to)
        return inference.match_hungarian(s) if one_to_one else inference.argmax_assignment(s)
    return predict


def amn_nn_predictor(params: FactorParams, one_to_one: bool = False) -> Predictor:
    def predict(i, ex):
        with ad.no_tape():
            es = nets.encode_patches(params.tensors, ex.source.patches).value
            prefix = "enc_t" if params.spec.dual_encoder else "enc"
            et = nets.encode_patches(params.tensors, ex.target.patches, prefix).value
        return inference.amn_nn_baseline(es, et, one_to_one)
    return predict


def pair_cache(params: FactorParams, seed: int, i: int, ex: PairExample) -> PairScoreCache:
    so, to, _ = eval_orders(seed, i, ex)
    with ad.no_tape():
        return PairForward(params, ex.source, ex.target, so, to, pair_id=ex.id).cache


def oracle_cache(ex: PairExample) -> PairScoreCache:
    local = np.zeros((len(ex.source.names), len(ex.target.names)))
    local[ex.gold, np.arange(len(ex.gold))] = 1.0
    return PairScoreCache.from_local(local)


@dataclass
class SearchLog:
    """Optional per-pair outputs of structured inference."""

    traces: list[dict]
    factors: list[dict]


def ssmn_predictor(params: FactorParams | None, seed: int, beam: int = 100, target_order: str = "shuffle",
                   oracle: bool = False, sink: SearchLog | None = None, keep_trace: bool = False) -> Predictor:
    def predict(i, ex):
        cache = oracle_cache(ex) if oracle else pair_cache(params, seed, i, ex)
        ks, kt = cache.shape
        res = inference.beam_search(cache, ks, kt, beam, _search_order(seed, i, ex, target_order), keep_trace)
        if sink is not None:
            terms = cache.terms(list(zip(range(kt), res.matching.tolist())))
            sink.factors.append({"pair": ex.id, **terms})
            for step, entries in enumerate(res.trace):
                sink.traces.append({"pair": ex.id, "step": step, "target": int(res.target_order[step]),
                                    "entries": [{"assignment": list(e.assignment), "score": e.score}
                                                for e in entries]})
        return res.matching
    return predict


def run(method: str, predict: Predictor, examples: Sequence[PairExample], workers: int = 1) -> EvalResult:
    if workers <= 1:
        return evaluate(method, predict, examples)
    from joblib import Parallel, delayed

    matchings = Parallel(n_jobs=workers)(delayed(predict)(i, ex) for i, ex in enumerate(examples))
    return evaluate(method, lambda i, ex: matchings[i], examples)


def beam_sweep(params: FactorParams, examples: Sequence[PairExample], beams: Sequence[int], seed: int,
               target_order: str = "shuffle") -> list[dict]:
    """Accuracy and mean best score per beam width; also counts pairs whose
    best score at the largest width falls below the smallest width's."""
    caches = [pair_cache(params, seed, i, ex) for i, ex in enumerate(examples)]
    rows, best = [], {}
    for b in beams:
        correct = total = 0
        scores = []
        for i, (ex, cache) in enumerate(zip(examples, caches)):
            ks, kt = cache.shape
            res = inference.beam_search(cache, ks, kt, b, _search_order(seed, i, ex, target_order))
            correct += int(np.sum(res.matching == ex.gold))
            total += kt
            scores.append(res.score)
        best[b] = np.array(scores)
        rows.append({"beam": b, "accuracy": 100.0 * correct / max(total, 1), "mean_score": float(np.mean(scores))})
    lo, hi = min(beams), max(beams)
    regressions = int(np.sum(best[hi] < best[lo] - 1e-9))
    for r in rows:
        r["score_regressions"] = regressions
    return rows


# --- rendering ------------------------------------------------------------------------

def report_tsv(results: Sequence[EvalResult]) -> str:
    lines = ["method\taccuracy\tcorrect\ttotal"]
    lines += [f"{r.method}\t{r.accuracy:.1f}\t{r.correct}\t{r.total}" for r in results]
    return "\n".join(lines) + "\n"


def category_tsv(results: Sequence[EvalResult]) -> str:
    lines = ["method\tcategory\taccuracy\tcorrect\ttotal"]
    for r in results:
        for cat, (c, t) in r.per_category.items():
            lines.append(f"{r.method}\t{cat}\t{100.0 * c / max(t, 1):.1f}\t{c}\t{t}")
    return "\n".join(lines) + "\n"


def aligned(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[k])) for r in rows) for k in range(len(rows[0]))]
    out = []
    for r in rows:
        cells = [str(c).ljust(w) if k == 0 else str(c).rjust(w) for k, (c, w) in enumerate(zip(r, widths))]
        out.append("  ".join(cells).rstrip())
    return "\n".join(out) + "\n"


def report_text(results: Sequence[EvalResult]) -> str:
    rows = [("Method", "Accuracy (%)", "Correct", "Parts")]
    rows += [(r.method, f"{r.accuracy:.1f}", str(r.correct), str(r.total)) for r in results]
    return aligned(rows)


def sweep_tsv(rows: Sequence[dict]) -> str:
    lines = ["beam\taccuracy\tmean_score\tscore_regressions"]
    lines += [f"{r['beam']}\t{r['accuracy']:.1f}\t{r['mean_score']:.6f}\t{r['score_regressions']}" for r in rows]
    return "\n".join(lines) + "\n"


def factor_tsv(records: Sequence[dict]) -> str:
    lines = ["pair_id\tf_a\tf_p\tf_sc\tf_ac\ttotal"]
    lines += [f"{r['pair']}\t{r['f_a']:.9g}\t{r['f_p']:.9g}\t{r['f_sc']:.9g}\t{r['f_ac']:.9g}\t{r['total']:.9g}"
              for r in records]
    return "\n".join(lines) + "\n"


def trace_jsonl(records: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
