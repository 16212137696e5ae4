"""Finite-difference checks of every parameter group and both surrogate losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import factors, nets, training

GROUPS = ("encoder", "context", "f_p", "f_sc", "f_ac", "amn_loss", "mn_loss")
TOLERANCE = 1e-4


@dataclass
class GroupReport:
    group: str
    max_rel_error: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < TOLERANCE


def _check(build: Callable[[], ad.Tensor], tensors: list[ad.Tensor], rng, max_coords: int,
           corrupt: bool, h: float) -> ad.GradCheckResult:
    tape = ad.Tape()
    with tape:
        loss = build()
    grads = tape.backward(loss, tensors)
    analytic = [grads[t.name] * (1.01 if corrupt else 1.0) for t in tensors]

    def fn():
        t = ad.Tape()
        with t:
            value = build().item()
        return value, t.activation_signature()

    return ad.finite_diff_check(fn, tensors, analytic, h=h, max_coords=max_coords, rng=rng)


def _readout(rng, shape) -> np.ndarray:
    return rng.normal(size=shape)


def run_suite(seed: int = 0, max_coords: int = 40, h: float = 1e-5, corrupt: str | None = None,
              groups=GROUPS) -> list[GroupReport]:
    """One report per group; ``corrupt`` names a group whose analytic
    gradient is deliberately scaled by 1.01 (harness self-test)."""
    if corrupt is not None and corrupt not in GROUPS:
        raise ValueError(f"unknown group {corrupt!r}; choose from {', '.join(GROUPS)}")
    rng = np.random.default_rng([seed, 5])
    vocab = factors.PartNameTable([f"name{i}" for i in range(5)])
    params = factors.FactorParams.initialize(factors.ModelSpec(patch_size=8), vocab, seed)
    for t in params.tensors.values():
        if t.name.endswith((".b", ".b1", ".b2")):  # non-zero biases exercise their gradients
            t.value[...] = rng.normal(0, 0.1, size=t.value.shape)
    cases: dict[str, tuple[Callable[[], ad.Tensor], list[ad.Tensor]]] = {}

    patches = rng.uniform(size=(2, 8, 8))
    r_enc = _readout(rng, (2, nets.EMBED_DIM))
    cases["encoder"] = (lambda: ad.sum_(ad.mul(nets.encode_patches(params.tensors, patches), ad.const(r_enc))),
                        [params[n] for n in params.groups()["encoder"]])

    emb = ad.const(rng.normal(size=(4, nets.EMBED_DIM)))
    order = rng.permutation(4)
    r_ctx = _readout(rng, (4, 2 * nets.CONTEXT_HIDDEN))
    cases["context"] = (lambda: ad.sum_(ad.mul(nets.contextualize(params.tensors, emb, order), ad.const(r_ctx))),
                        [params[n] for n in params.groups()["context"]])

    tgt_emb = ad.const(rng.normal(size=(3, nets.EMBED_DIM)))
    rows = np.array([0, 2, 5])  # 5 is the unknown-name row
    r_fp = _readout(rng, (3, 3))
    cases["f_p"] = (lambda: ad.sum_(ad.mul(factors.part_score_matrix(params, rows, tgt_emb), ad.const(r_fp))),
                    [params[n] for n in params.groups()["f_p"]])

    d_sc = rng.normal(0, 0.5, size=(12, 4))
    cases["f_sc"] = (lambda: factors.consistency_score(params, "sc", d_sc),
                     [params[n] for n in params.groups()["f_sc"]])
    d_ac = rng.normal(0, 0.5, size=(12, 2 * nets.EMBED_DIM))
    cases["f_ac"] = (lambda: factors.consistency_score(params, "ac", d_ac),
                     [params[n] for n in params.groups()["f_ac"]])

    s_amn = ad.param(rng.normal(size=(6, 6)), "S")
    gold = rng.permutation(6)
    cases["amn_loss"] = (lambda: training.amn_loss(s_amn, gold), [s_amn])
    s_mn = ad.param(rng.normal(size=(6, 6)), "S")
    cases["mn_loss"] = (lambda: training.mn_loss(s_mn, gold), [s_mn])

    reports = []
    for g in groups:
        build, tensors = cases[g]
        res = _check(build, tensors, np.random.default_rng([seed, GROUPS.index(g)]), max_coords, corrupt == g, h)
        reports.append(GroupReport(g, res.max_rel_error, res.n_checked, res.n_skipped_kink))
    return reports
