"""Patch encoder (two conv/pool stages + two dense layers) and the
bidirectional LSTM context network."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CONV1_FILTERS = 64
CONV2_FILTERS = 96
FC1_UNITS = 128
EMBED_DIM = 64
CONTEXT_HIDDEN = 50


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def encoder_dims(patch_size: int = 32) -> list[tuple[int, ...]]:
    """Activation shapes through the encoder for one patch."""
    if patch_size % 4:
        raise ValueError(f"patch size must be divisible by 4, got {patch_size}")
    s2, s4 = patch_size // 2, patch_size // 4
    return [
        (patch_size, patch_size, 1),
        (s2, s2, CONV1_FILTERS),
        (s4, s4, CONV2_FILTERS),
        (s4 * s4 * CONV2_FILTERS,),
        (FC1_UNITS,),
        (EMBED_DIM,),
    ]


def init_encoder(rng: np.random.Generator, patch_size: int = 32, prefix: str = "enc") -> dict[str, Tensor]:
    dims = encoder_dims(patch_size)
    flat = dims[3][0]
    if patch_size == 32:
        assert dims == [(32, 32, 1), (16, 16, 64), (8, 8, 96), (6144,), (128,), (64,)]
    p = {
        "conv1.w": glorot(rng, (3, 3, 1, CONV1_FILTERS), 9, 9 * CONV1_FILTERS),
        "conv1.b": np.zeros(CONV1_FILTERS),
        "conv2.w": glorot(rng, (3, 3, CONV1_FILTERS, CONV2_FILTERS), 9 * CONV1_FILTERS, 9 * CONV2_FILTERS),
        "conv2.b": np.zeros(CONV2_FILTERS),
        "fc1.w": glorot(rng, (flat, FC1_UNITS), flat, FC1_UNITS),
        "fc1.b": np.zeros(FC1_UNITS),
        "fc2.w": glorot(rng, (FC1_UNITS, EMBED_DIM), FC1_UNITS, EMBED_DIM),
        "fc2.b": np.zeros(EMBED_DIM),
    }
    return {f"{prefix}.{k}": ad.param(v, f"{prefix}.{k}") for k, v in p.items()}


def _check_patches(patches: np.ndarray, patch_size: int) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim == 2:
        patches = patches[None]
    if patches.ndim != 3 or patches.shape[1:] != (patch_size, patch_size):
        raise ValueError(f"expected patches of shape (N, {patch_size}, {patch_size}), got {patches.shape}")
    return patches


def conv_features(params: dict[str, Tensor], patches, prefix: str = "enc") -> Tensor:
    """Convolutional trunk: (N, P, P) patches -> (N, flat) features."""
    w1 = params[f"{prefix}.conv1.w"]
    patch_size = int(np.sqrt(params[f"{prefix}.fc1.w"].shape[0] / CONV2_FILTERS)) * 4
    x = _check_patches(patches, patch_size)
    n = x.shape[0]
    h = ad.relu(ad.conv2d(ad.const(x[..., None]), w1, params[f"{prefix}.conv1.b"]))
    h = ad.maxpool2(h)
    h = ad.relu(ad.conv2d(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"]))
    h = ad.maxpool2(h)
    return ad.reshape(h, (n, -1))


def dense_head(params: dict[str, Tensor], feats: Tensor, prefix: str = "enc") -> Tensor:
    h = ad.relu(ad.add(ad.matmul(feats, params[f"{prefix}.fc1.w"]), params[f"{prefix}.fc1.b"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.fc2.w"]), params[f"{prefix}.fc2.b"])


def encode_patches(params: dict[str, Tensor], patches, prefix: str = "enc") -> Tensor:
    """Embed a batch of patches with shared weights -> (N, 64)."""
    return dense_head(params, conv_features(params, patches, prefix), prefix)


def encode_patch(params: dict[str, Tensor], patch, prefix: str = "enc") -> np.ndarray:
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2:
        raise ValueError(f"expected a single 2-D patch, got shape {patch.shape}")
    if patch.size and (patch.min() < 0 or patch.max() > 1):
        raise ValueError("patch values must lie in [0, 1]")
    return encode_patches(params, patch[None], prefix).value[0]


def init_context(rng: np.random.Generator, input_dim: int = EMBED_DIM, hidden: int = CONTEXT_HIDDEN,
                 prefix: str = "ctx") -> dict[str, Tensor]:
    out = {}
    for direction in ("fwd", "bwd"):
        vals = {
            "wx": glorot(rng, (input_dim, 4 * hidden), input_dim, 4 * hidden),
            "wh": glorot(rng, (hidden, 4 * hidden), hidden, 4 * hidden),
            "b": np.zeros(4 * hidden),
        }
        for k, v in vals.items():
            name = f"{prefix}.{direction}.{k}"
            out[name] = ad.param(v, name)
    return out


def _lstm_pass(params: dict[str, Tensor], xs: Tensor, prefix: str) -> list[Tensor]:
    wx, wh, b = params[f"{prefix}.wx"], params[f"{prefix}.wh"], params[f"{prefix}.b"]
    hidden = wh.shape[0]
    # input projections for all steps at once
    proj = ad.add(ad.matmul(xs, wx), b)
    h = ad.const(np.zeros(hidden))
    c = ad.const(np.zeros(hidden))
    outs = []
    for k in range(xs.shape[0]):
        z = ad.add(ad.slice_(proj, k), _vecmat(h, wh))
        i = ad.sigmoid(ad.slice_(z, slice(0, hidden)))
        f = ad.sigmoid(ad.slice_(z, slice(hidden, 2 * hidden)))
        g = ad.tanh(ad.slice_(z, slice(2 * hidden, 3 * hidden)))
        o = ad.sigmoid(ad.slice_(z, slice(3 * hidden, 4 * hidden)))
        c = ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        outs.append(h)
    return outs


def _vecmat(v: Tensor, m: Tensor) -> Tensor:
    return ad.reshape(ad.matmul(ad.reshape(v, (1, v.shape[0])), m), (m.shape[1],))


def contextualize(params: dict[str, Tensor], embeddings: Tensor, order, prefix: str = "ctx") -> Tensor:
    """Run the BiLSTM over ``embeddings`` visited in ``order``.

    Row i of the result belongs to input row i whatever the visiting order.
    Output width is twice the hidden size (forward then backward state).
    """
    order = np.asarray(order, dtype=np.intp)
    k = embeddings.shape[0]
    if k == 0:
        raise ValueError("contextualize needs at least one embedding")
    if order.shape != (k,) or not np.array_equal(np.sort(order), np.arange(k)):
        raise ValueError(f"order must be a permutation of range({k}), got {order.tolist()}")
    seq = ad.take(embeddings, order)
    fwd = _lstm_pass(params, seq, f"{prefix}.fwd")
    rev = ad.take(seq, np.arange(k)[::-1])
    bwd = _lstm_pass(params, rev, f"{prefix}.bwd")[::-1]
    hidden = fwd[0].shape[0]
    rows = [ad.concat([fh, bh]) for fh, bh in zip(fwd, bwd)]
    stacked = ad.reshape(ad.concat(rows), (k, 2 * hidden))
    return ad.take(stacked, np.argsort(order))
