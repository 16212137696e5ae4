"""Matching score factors and the parameter store.

The score of a (partial) matching ``m`` -- ``m[i]`` is the source part
assigned to the i-th matched target part -- is

    sum_i [ f_a(m[i], i) + f_p(m[i], i) ] + f_sc(m) + f_ac(m)

with the matching constraint enforced by the search (never scored).
``f_a`` is a dot product of BiLSTM-contextualized patch embeddings,
``f_p`` an MLP over (part-name vector, target embedding), and ``f_sc`` /
``f_ac`` sum an MLP over pairwise relation vectors of matched parts.
"""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import imaging
from . import nets
from .autodiff import Tensor

PART_DIM = 32
PART_HIDDEN = 64
GC_HIDDEN = (64, 32)
UNKNOWN = "<unknown>"

GROUPS = ("encoder", "context", "f_p", "f_sc", "f_ac")


class PartNameTable:
    """Maps part names to rows of the learned name-vector table.

    Unlisted names resolve to the shared ``<unknown>`` row.
    """

    def __init__(self, names: Iterable[str]):
        self.names = sorted(set(names) - {UNKNOWN})
        self._index = {n: i for i, n in enumerate(self.names)}

    @classmethod
    def from_training(cls, name_lists: Iterable[Sequence[str]], min_count: int = 2) -> "PartNameTable":
        counts = Counter(n for names in name_lists for n in names)
        return cls(n for n, c in counts.items() if c >= min_count)

    def __len__(self) -> int:
        return len(self.names) + 1

    def index(self, name: str) -> int:
        return self._index.get(name, len(self.names))

    def rows(self, names: Sequence[str]) -> np.ndarray:
        return np.array([self.index(n) for n in names], dtype=np.intp)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture-level switches; everything that shapes the parameters."""

    patch_size: int = 32
    use_fgc: bool = True
    use_fp: bool = True
    dual_encoder: bool = False


class FactorParams:
    """Named, checkpointable store of every learned tensor."""

    def __init__(self, spec: ModelSpec, vocab: PartNameTable, tensors: dict[str, Tensor]):
        self.spec = spec
        self.vocab = vocab
        self.tensors = tensors

    @classmethod
    def initialize(cls, spec: ModelSpec, vocab: PartNameTable, seed: int = 0) -> "FactorParams":
        rng = np.random.default_rng([seed, 104729])
        t: dict[str, Tensor] = {}
        t.update(nets.init_encoder(rng, spec.patch_size, "enc"))
        if spec.dual_encoder:
            t.update(nets.init_encoder(rng, spec.patch_size, "enc_t"))
        t.update(nets.init_context(rng, nets.EMBED_DIM, nets.CONTEXT_HIDDEN, "ctx"))
        raw: dict[str, np.ndarray] = {}
        raw["part.table"] = rng.normal(0.0, 0.1, size=(len(vocab), PART_DIM))
        raw["part.w1"] = nets.glorot(rng, (PART_DIM + nets.EMBED_DIM, PART_HIDDEN), PART_DIM + nets.EMBED_DIM,
                                     PART_HIDDEN)
        raw["part.b"] = np.zeros(PART_HIDDEN)
        raw["part.w2"] = nets.glorot(rng, (PART_HIDDEN,), PART_HIDDEN, 1)
        for kind, in_dim in (("sc", 4), ("ac", 2 * nets.EMBED_DIM)):
            h1, h2 = GC_HIDDEN
            raw[f"{kind}.w1"] = nets.glorot(rng, (in_dim, h1), in_dim, h1)
            raw[f"{kind}.b1"] = np.zeros(h1)
            raw[f"{kind}.w2"] = nets.glorot(rng, (h1, h2), h1, h2)
            raw[f"{kind}.b2"] = np.zeros(h2)
            raw[f"{kind}.w"] = nets.glorot(rng, (h2,), h2, 1)
        t.update({k: ad.param(v, k) for k, v in raw.items()})
        return cls(spec, vocab, t)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def group_of(self, name: str) -> str:
        head = name.split(".")[0]
        return {"enc": "encoder", "enc_t": "encoder", "ctx": "context", "part": "f_p",
                "sc": "f_sc", "ac": "f_ac"}[head]

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {g: [] for g in GROUPS}
        for n in self.names():
            out[self.group_of(n)].append(n)
        return out

    def conv_names(self) -> list[str]:
        return [n for n in self.names() if ".conv" in n]

    def values(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.tensors.items()}

    def copy(self) -> "FactorParams":
        return FactorParams(self.spec, PartNameTable(self.vocab.names),
                            {k: ad.param(v.value.copy(), k) for k, v in self.tensors.items()})

    def digest(self, names: Iterable[str] | None = None) -> str:
        h = hashlib.sha256()
        for k in self.names() if names is None else names:
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k].value).tobytes())
        return h.hexdigest()


# --- per-pair data ------------------------------------------------------------------

@dataclass
class PreparedImage:
    """Everything the matchers need from one annotated image."""

    id: str
    category: str
    names: list[str]
    locations: np.ndarray  # (K, 2)
    patches: np.ndarray  # (K, P, P) network input (DT or grayscale)
    raw_patches: np.ndarray  # (K, P, P) grayscale, for the RGB baseline
    conv_cache: dict = field(default_factory=dict, repr=False)


def prepare_image(image, use_dt: bool = True, crop_fraction: float = 0.2, out_size: int = 32,
                  ink_threshold: float = 0.98) -> PreparedImage:
    """Crop one patch per annotated part from the DT image (or the raw
    raster when ``use_dt`` is off)."""
    raster = image.raster
    if use_dt:
        net_input = imaging.distance_transform(imaging.binarize(raster, ink_threshold))
    else:
        net_input = raster
    locs = image.locations
    return PreparedImage(image.id, image.category, list(image.names), locs,
                         imaging.extract_patches(net_input, locs, crop_fraction, out_size),
                         imaging.extract_patches(raster, locs, crop_fraction, out_size))


def _enc_prefix(params: FactorParams, target: bool) -> str:
    return "enc_t" if target and params.spec.dual_encoder else "enc"


def _embed(params: FactorParams, image: PreparedImage, target: bool, frozen_conv: bool) -> Tensor:
    prefix = _enc_prefix(params, target)
    if frozen_conv:
        # conv weights are constant while frozen, so the trunk output can be reused
        key = (prefix, params.digest(params.conv_names()))
        feats = image.conv_cache.get(key)
        if feats is None:
            with ad.no_tape():
                feats = nets.conv_features(params.tensors, image.patches, prefix).value
            image.conv_cache.clear()
            image.conv_cache[key] = feats
        return nets.dense_head(params.tensors, ad.const(feats), prefix)
    return nets.encode_patches(params.tensors, image.patches, prefix)


def appearance_similarity(ctx_src, ctx_tgt) -> float:
    a = np.asarray(ctx_src, dtype=np.float64)
    b = np.asarray(ctx_tgt, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"appearance_similarity: shapes {a.shape} and {b.shape} differ")
    return float(a @ b)


def part_appearance(params: FactorParams, name_vec: Tensor, target_emb: Tensor) -> Tensor:
    """Score of one (part-name vector, raw target embedding) combination."""
    if name_vec.shape != (PART_DIM,) or target_emb.shape != (nets.EMBED_DIM,):
        raise ad.ShapeError(f"part_appearance: got {name_vec.shape} and {target_emb.shape}")
    x = ad.reshape(ad.concat([name_vec, target_emb]), (1, PART_DIM + nets.EMBED_DIM))
    h = ad.relu(ad.add(ad.matmul(x, params["part.w1"]), params["part.b"]))
    return ad.reshape(ad.matmul(h, params["part.w2"]), ())


def part_score_matrix(params: FactorParams, name_rows: np.ndarray, tgt_emb: Tensor) -> Tensor:
    """(Ks, Kt) part-appearance scores for all source-name/target pairs."""
    ks, kt = len(name_rows), tgt_emb.shape[0]
    names = ad.take(params["part.table"], name_rows)
    w1 = params["part.w1"]
    hp = ad.matmul(names, ad.slice_(w1, slice(0, PART_DIM)))
    ht = ad.matmul(tgt_emb, ad.slice_(w1, slice(PART_DIM, None)))
    jj, ii = np.divmod(np.arange(ks * kt), kt)
    h = ad.relu(ad.add(ad.add(ad.take(hp, jj), ad.take(ht, ii)), params["part.b"]))
    return ad.reshape(ad.matmul(h, params["part.w2"]), (ks, kt))


def relation_vectors(prefix: Sequence[tuple[int, int]], src_feats, tgt_feats):
    """Relation vectors over ordered pairs of a partial matching.

    ``prefix`` lists (target, source) assignments. Row (i, j) is
    ``[src[m(j)] - src[m(i)], tgt[j] - tgt[i]]`` for every i != j.
    Works on numpy arrays (returns an array) or Tensors (returns a Tensor).
    """
    srcs = [s for _, s in prefix]
    if len(set(srcs)) != len(srcs):
        raise ValueError(f"matching is not injective: {list(prefix)}")
    idx = [(a, b) for a in range(len(prefix)) for b in range(len(prefix)) if a != b]
    if isinstance(src_feats, Tensor) or isinstance(tgt_feats, Tensor):
        width = src_feats.shape[1] + tgt_feats.shape[1]
        if not idx:
            return ad.const(np.zeros((0, width)))
        ti = np.array([prefix[a][0] for a, _ in idx])
        tj = np.array([prefix[b][0] for _, b in idx])
        si = np.array([prefix[a][1] for a, _ in idx])
        sj = np.array([prefix[b][1] for _, b in idx])
        ds = ad.sub(ad.take(src_feats, sj), ad.take(src_feats, si))
        dt = ad.sub(ad.take(tgt_feats, tj), ad.take(tgt_feats, ti))
        return ad.concat([ds, dt], axis=1)
    src = np.asarray(src_feats, dtype=np.float64)
    tgt = np.asarray(tgt_feats, dtype=np.float64)
    rows = [np.concatenate([src[prefix[b][1]] - src[prefix[a][1]], tgt[prefix[b][0]] - tgt[prefix[a][0]]])
            for a, b in idx]
    return np.array(rows).reshape(len(rows), src.shape[1] + tgt.shape[1])


def consistency_rows(params: FactorParams, kind: str, deltas) -> Tensor:
    """Per-row consistency contributions w^T h(delta) -> (N,)."""
    deltas = deltas if isinstance(deltas, Tensor) else ad.const(deltas)
    w1 = params[f"{kind}.w1"]
    if deltas.value.ndim != 2 or deltas.shape[1] != w1.shape[0]:
        raise ad.ShapeError(f"{kind}: relation vectors must have width {w1.shape[0]}, got {deltas.shape}")
    h = ad.relu(ad.add(ad.matmul(deltas, w1), params[f"{kind}.b1"]))
    h = ad.relu(ad.add(ad.matmul(h, params[f"{kind}.w2"]), params[f"{kind}.b2"]))
    return ad.matmul(h, params[f"{kind}.w"])


def consistency_score(params: FactorParams, kind: str, deltas) -> Tensor:
    """Sum-pooled consistency score over a set of relation vectors."""
    if deltas.shape[0] == 0:
        return ad.const(0.0)
    return ad.sum_(consistency_rows(params, kind, deltas))


def _pair_table(params: FactorParams, kind: str, src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    """G[a, b, c, d]: contribution of the ordered pair (target b -> source a,
    target d -> source c). The first layer is linear, so it splits into
    per-part projections."""
    w1 = params[f"{kind}.w1"].value
    ds = src.shape[1]
    ps = src @ w1[:ds]
    pt = tgt @ w1[ds:]
    pre = (ps[None, None, :, None, :] - ps[:, None, None, None, :]
           + pt[None, None, None, :, :] - pt[None, :, None, None, :]
           + params[f"{kind}.b1"].value)
    h = np.maximum(pre, 0.0)
    h = np.maximum(h @ params[f"{kind}.w2"].value + params[f"{kind}.b2"].value, 0.0)
    return h @ params[f"{kind}.w"].value


@dataclass
class PairScoreCache:
    """Numeric per-pair tables reused across all beam expansions."""

    local: np.ndarray  # (Ks, Kt) f_a + f_p
    f_a: np.ndarray
    f_p: np.ndarray
    g_sc: np.ndarray | None = None  # (Ks, Kt, Ks, Kt)
    g_ac: np.ndarray | None = None
    pair_id: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.local)):
            raise FloatingPointError("non-finite local scores")
        self.pair = None
        if self.g_sc is not None:
            g = self.g_sc + self.g_ac
            # both orientations of an unordered pair, so extension adds one lookup per matched part
            self.pair = g + g.transpose(2, 3, 0, 1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.local.shape

    @classmethod
    def from_local(cls, local) -> "PairScoreCache":
        local = np.asarray(local, dtype=np.float64)
        return cls(local, local, np.zeros_like(local))

    def extend(self, assign: np.ndarray, targets: Sequence[int], t_new: int) -> np.ndarray:
        """Scores gained by matching target ``t_new`` to every source, for each
        partial matching row of ``assign`` (nb, depth) -> (nb, Ks)."""
        nb = assign.shape[0]
        gain = np.broadcast_to(self.local[:, t_new], (nb, self.local.shape[0])).copy()
        if self.pair is not None:
            for col, t in enumerate(targets):
                gain += self.pair[assign[:, col], t, :, t_new]
        return gain

    def terms(self, prefix: Sequence[tuple[int, int]]) -> dict[str, float]:
        srcs = [s for _, s in prefix]
        if len(set(srcs)) != len(srcs):
            raise AssertionError(f"scoring a non-injective matching {list(prefix)}")
        fa = sum(self.f_a[s, t] for t, s in prefix)
        fp = sum(self.f_p[s, t] for t, s in prefix)
        fsc = fac = 0.0
        if self.g_sc is not None:
            for t1, s1 in prefix:
                for t2, s2 in prefix:
                    if t1 != t2:
                        fsc += self.g_sc[s1, t1, s2, t2]
                        fac += self.g_ac[s1, t1, s2, t2]
        local = sum(self.local[s, t] for t, s in prefix)
        return {"f_a": float(fa), "f_p": float(fp), "f_sc": float(fsc), "f_ac": float(fac),
                "total": float(local + fsc + fac)}

    def score(self, prefix: Sequence[tuple[int, int]]) -> float:
        return self.terms(prefix)["total"]


def total_score(cache: PairScoreCache, matching: Sequence[int], target_order: Sequence[int] | None = None) -> float:
    """Score of a (partial) matching given as source indices for the first
    ``len(matching)`` targets in ``target_order``."""
    order = range(len(matching)) if target_order is None else target_order
    return cache.score(list(zip(order, matching)))


class PairForward:
    """Tape-recorded forward pass of all factor networks for one pair."""

    def __init__(self, params: FactorParams, src: PreparedImage, tgt: PreparedImage,
                 src_order=None, tgt_order=None, frozen_conv: bool = False, pair_id: str = "",
                 tables: bool = True):
        self.params = params
        self.src, self.tgt = src, tgt
        ks, kt = len(src.names), len(tgt.names)
        self.src_order = np.arange(ks) if src_order is None else np.asarray(src_order)
        self.tgt_order = np.arange(kt) if tgt_order is None else np.asarray(tgt_order)
        self.tape = ad.Tape()
        spec = params.spec
        with self.tape:
            self.emb_s = _embed(params, src, False, frozen_conv)
            self.emb_t = _embed(params, tgt, True, frozen_conv)
            self.ctx_s = nets.contextualize(params.tensors, self.emb_s, self.src_order)
            self.ctx_t = nets.contextualize(params.tensors, self.emb_t, self.tgt_order)
            self.f_a = ad.matmul(self.ctx_s, ad.transpose(self.ctx_t))
            if spec.use_fp:
                self.f_p = part_score_matrix(params, params.vocab.rows(src.names), self.emb_t)
                self.local = ad.add(self.f_a, self.f_p)
            else:
                self.f_p = None
                self.local = self.f_a
        g_sc = g_ac = None
        if spec.use_fgc and tables:
            g_sc = _pair_table(params, "sc", src.locations, tgt.locations)
            g_ac = _pair_table(params, "ac", self.emb_s.value, self.emb_t.value)
        fp = self.f_p.value if self.f_p is not None else np.zeros((ks, kt))
        self.cache = PairScoreCache(self.local.value, self.f_a.value, fp, g_sc, g_ac, pair_id)

    def weighted_score(self, prefixes: Sequence[Sequence[tuple[int, int]]], weights: Sequence[float]) -> Tensor:
        """sum_v weights[v] * f(prefixes[v]) recorded on this pair's tape."""
        ks, kt = self.cache.shape
        flat_idx, flat_w = [], []
        pairs, pair_w = [], []
        for prefix, w in zip(prefixes, weights):
            srcs = [s for _, s in prefix]
            if len(set(srcs)) != len(srcs):
                raise AssertionError(f"scoring a non-injective matching {list(prefix)}")
            for t, s in prefix:
                flat_idx.append(s * kt + t)
                flat_w.append(w)
            for t1, s1 in prefix:
                for t2, s2 in prefix:
                    if t1 != t2:
                        pairs.append((s1, t1, s2, t2))
                        pair_w.append(w)
        with self.tape:
            total = ad.dot(ad.take(ad.reshape(self.local, (ks * kt,)), flat_idx), np.asarray(flat_w, float)) \
                if flat_idx else ad.const(0.0)
            if self.params.spec.use_fgc and pairs:
                a, b, c, d = (np.array(x) for x in zip(*pairs))
                pw = np.asarray(pair_w, dtype=np.float64)
                ls, lt = self.src.locations, self.tgt.locations
                d_sc = np.concatenate([ls[c] - ls[a], lt[d] - lt[b]], axis=1)
                total = ad.add(total, ad.dot(consistency_rows(self.params, "sc", d_sc), pw))
                d_ac = ad.concat([ad.sub(ad.take(self.emb_s, c), ad.take(self.emb_s, a)),
                                  ad.sub(ad.take(self.emb_t, d), ad.take(self.emb_t, b))], axis=1)
                total = ad.add(total, ad.dot(consistency_rows(self.params, "ac", d_ac), pw))
        return total

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        return self.tape.backward(loss, self.params.tensors)


def reference_score(params: FactorParams, src: PreparedImage, tgt: PreparedImage,
                    prefix: Sequence[tuple[int, int]], src_order=None, tgt_order=None) -> dict[str, float]:
    """Recompute every factor for one matching without the pair tables."""
    with ad.no_tape():
        emb_s = nets.encode_patches(params.tensors, src.patches, _enc_prefix(params, False))
        emb_t = nets.encode_patches(params.tensors, tgt.patches, _enc_prefix(params, True))
        ks, kt = len(src.names), len(tgt.names)
        ctx_s = nets.contextualize(params.tensors, emb_s,
                                   np.arange(ks) if src_order is None else src_order).value
        ctx_t = nets.contextualize(params.tensors, emb_t,
                                   np.arange(kt) if tgt_order is None else tgt_order).value
        fa = sum(appearance_similarity(ctx_s[s], ctx_t[t]) for t, s in prefix)
        fp = 0.0
        if params.spec.use_fp:
            rows = params.vocab.rows(src.names)
            fp = sum(part_appearance(params, ad.const(params["part.table"].value[rows[s]]),
                                     ad.const(emb_t.value[t])).item() for t, s in prefix)
        fsc = fac = 0.0
        if params.spec.use_fgc:
            fsc = consistency_score(params, "sc", relation_vectors(prefix, src.locations, tgt.locations)).item()
            fac = consistency_score(params, "ac", relation_vectors(prefix, emb_s.value, emb_t.value)).item()
    return {"f_a": fa, "f_p": fp, "f_sc": fsc, "f_ac": fac, "total": fa + fp + fsc + fac}
