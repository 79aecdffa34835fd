"""Learned pairwise appearance matching head.

The head scores every (current detection, past detection) embedding pair
with a small shared MLP: the two e-dim embeddings are concatenated to a
2e input and mapped through rectified hidden layers to one raw affinity
logit. A constant "no match" column is appended and each row softmaxed,
giving two row-stochastic matrices: one matching current->past (bwd) and
one past->current (fwd, from the transposed raw matrix). The head is
asymmetric by construction; inference averages the two directions.

Gradients are implemented by hand (reverse mode) so training needs no
autograd framework and gradient checks can run against finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "MatcherParams",
    "AffinityPair",
    "raw_affinity",
    "augment_softmax",
    "matcher_forward",
    "matcher_backward",
]

DEFAULT_HIDDEN = (64, 32, 16)
MIN_LAYERS = 4
MAX_LAYERS = 6


@dataclass
class MatcherParams:
    """Weights of the pair-affinity MLP: a list of (W, b) with W of shape
    (fan_in, fan_out). Input width is 2 * embed_dim, output width 1.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.input_dim // 2

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0][0].dtype

    def validate(self) -> None:
        n = len(self.layers)
        if not (MIN_LAYERS <= n <= MAX_LAYERS):
            raise ValueError(f"matcher must have {MIN_LAYERS}-{MAX_LAYERS} layers, got {n}")
        if self.input_dim % 2 != 0:
            raise ValueError("matcher input width must be even (two concatenated embeddings)")
        prev = self.input_dim
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: inconsistent shapes {w.shape} / {b.shape}")
            if w.shape[0] != prev:
                raise ValueError(f"layer {i}: fan-in {w.shape[0]} != previous width {prev}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite weights")
            prev = w.shape[1]
        if prev != 1:
            raise ValueError(f"matcher output width must be 1, got {prev}")

    @staticmethod
    def create(
        embed_dim: int,
        hidden: tuple[int, ...] = DEFAULT_HIDDEN,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ) -> "MatcherParams":
        """Fresh parameters with fan-in scaled uniform init."""
        rng = rng or np.random.default_rng()
        widths = [2 * embed_dim, *hidden, 1]
        layers = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
            b = rng.uniform(-bound, bound, size=fan_out).astype(dtype)
            layers.append((w, b))
        params = MatcherParams(layers)
        params.validate()
        return params

    def astype(self, dtype) -> "MatcherParams":
        return MatcherParams([(w.astype(dtype), b.astype(dtype)) for w, b in self.layers])

    def copy(self) -> "MatcherParams":
        return MatcherParams([(w.copy(), b.copy()) for w, b in self.layers])

    def flat_arrays(self) -> list[np.ndarray]:
        """All parameter arrays in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out


@dataclass
class AffinityPair:
    """Affinities between a current frame (t, rows of a_raw) and one past
    frame (columns of a_raw).

    a_hat_bwd: (n_t, n_past + 1) row-stochastic, matching current -> past;
        the last column is the probability of having no match in the past
        frame. a_hat_fwd: (n_past, n_t + 1), the reverse direction from the
        transposed raw matrix.
    """

    a_raw: np.ndarray
    a_hat_bwd: np.ndarray
    a_hat_fwd: np.ndarray

    @property
    def n_current(self) -> int:
        return self.a_raw.shape[0]

    @property
    def n_past(self) -> int:
        return self.a_raw.shape[1]


def _pair_inputs(emb_t: np.ndarray, emb_past: np.ndarray, dtype) -> np.ndarray:
    """All (n_t * n_past, 2e) concatenated pairs, row-major over (i, j)."""
    n_t, e = emb_t.shape
    n_p = emb_past.shape[0]
    left = np.repeat(emb_t.astype(dtype, copy=False), n_p, axis=0)
    right = np.tile(emb_past.astype(dtype, copy=False), (n_t, 1))
    return np.concatenate([left, right], axis=1)


def _mlp_forward(x: np.ndarray, params: MatcherParams):
    """Forward through the MLP. Returns output (n, 1) and per-layer caches
    of (input, pre-activation) for the backward pass."""
    caches = []
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        z = h @ w + b
        caches.append((h, z))
        h = z if i == last else np.maximum(z, 0.0)
    return h, caches


def _mlp_backward(grad_out: np.ndarray, caches, params: MatcherParams):
    """Reverse through the MLP. Returns (grad wrt input, [(dW, db), ...])."""
    grads = [None] * len(params.layers)
    g = grad_out
    last = len(params.layers) - 1
    for i in range(last, -1, -1):
        h_in, z = caches[i]
        if i != last:
            g = g * (z > 0.0)
        w, _ = params.layers[i]
        grads[i] = (h_in.T @ g, g.sum(axis=0))
        g = g @ w.T
    return g, grads


def raw_affinity(
    emb_t: np.ndarray, emb_past: np.ndarray, params: MatcherParams
) -> np.ndarray:
    """Raw (pre-softmax) affinity logits, shape (n_t, n_past).

    Entry (i, j) is the MLP applied to the concatenation of current
    embedding i with past embedding j. Embedding width must be half the
    MLP input width.
    """
    emb_t = np.atleast_2d(np.asarray(emb_t))
    emb_past = np.atleast_2d(np.asarray(emb_past))
    n_t = emb_t.shape[0] if emb_t.size else 0
    n_p = emb_past.shape[0] if emb_past.size else 0
    e = params.embed_dim
    if n_t and emb_t.shape[1] != e:
        raise ValueError(f"current embeddings have dim {emb_t.shape[1]}, head expects {e}")
    if n_p and emb_past.shape[1] != e:
        raise ValueError(f"past embeddings have dim {emb_past.shape[1]}, head expects {e}")
    if n_t == 0 or n_p == 0:
        return np.zeros((n_t, n_p), dtype=params.dtype)

    # The first layer is linear in the concatenation, so its two halves
    # are applied per embedding and broadcast-added per pair; only the
    # deeper layers run on the full pair batch.
    w0, b0 = params.layers[0]
    dtype = params.dtype
    left = emb_t.astype(dtype, copy=False) @ w0[:e]
    right = emb_past.astype(dtype, copy=False) @ w0[e:]
    right += b0
    z0 = left[:, None, :] + right[None, :, :]
    h = z0.reshape(n_t * n_p, -1)
    if len(params.layers) > 1:
        np.maximum(h, 0.0, out=h)
    for i in range(1, len(params.layers)):
        w, b = params.layers[i]
        h = h @ w + b
        if i != len(params.layers) - 1:
            np.maximum(h, 0.0, out=h)
    return h.reshape(n_t, n_p)


def augment_softmax(a: np.ndarray, nonmatch_logit: float) -> np.ndarray:
    """Append a constant-logit column to ``a`` and softmax each row.

    Output has shape (n, m + 1); every row sums to 1. Computed in float64
    with max subtraction for stability regardless of input dtype.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    n, m = a.shape
    z = np.empty((n, m + 1), dtype=np.float64)
    z[:, :m] = a
    z[:, m] = nonmatch_logit
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def matcher_forward(
    emb_t: np.ndarray,
    emb_past: np.ndarray,
    params: MatcherParams,
    nonmatch_logit: float,
) -> AffinityPair:
    """Full matching head: raw logits, then both row-softmaxed directions."""
    a = raw_affinity(emb_t, emb_past, params)
    return AffinityPair(
        a_raw=a,
        a_hat_bwd=augment_softmax(a, nonmatch_logit),
        a_hat_fwd=augment_softmax(a.T, nonmatch_logit),
    )


def _softmax_backward_to_logits(a_hat: np.ndarray, grad_hat: np.ndarray) -> np.ndarray:
    """Backprop a row softmax; returns gradient on the non-constant logits
    (the appended constant column receives no parameter gradient)."""
    dot = (grad_hat * a_hat).sum(axis=1, keepdims=True)
    dz = a_hat * (grad_hat - dot)
    return dz[:, :-1]


def matcher_backward(
    emb_t: np.ndarray,
    emb_past: np.ndarray,
    params: MatcherParams,
    nonmatch_logit: float,
    grad_bwd: np.ndarray | None = None,
    grad_fwd: np.ndarray | None = None,
):
    """Exact reverse-mode gradients of matcher_forward.

    ``grad_bwd`` / ``grad_fwd`` are upstream gradients on a_hat_bwd and
    a_hat_fwd (either may be None for zero). Returns
    (loss-shaped param grads as [(dW, db), ...], grad_emb_t, grad_emb_past).
    """
    emb_t = np.atleast_2d(np.asarray(emb_t))
    emb_past = np.atleast_2d(np.asarray(emb_past))
    n_t, n_p = emb_t.shape[0], emb_past.shape[0]
    e = params.embed_dim
    zero_grads = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
    if n_t == 0 or n_p == 0:
        return zero_grads, np.zeros_like(emb_t), np.zeros_like(emb_past)

    x = _pair_inputs(emb_t, emb_past, params.dtype)
    out, caches = _mlp_forward(x, params)
    a = out.reshape(n_t, n_p)

    grad_a = np.zeros((n_t, n_p), dtype=np.float64)
    if grad_bwd is not None:
        grad_bwd = np.asarray(grad_bwd, dtype=np.float64)
        if grad_bwd.shape != (n_t, n_p + 1):
            raise ValueError(f"grad_bwd shape {grad_bwd.shape} != {(n_t, n_p + 1)}")
        a_hat_bwd = augment_softmax(a, nonmatch_logit)
        grad_a += _softmax_backward_to_logits(a_hat_bwd, grad_bwd)
    if grad_fwd is not None:
        grad_fwd = np.asarray(grad_fwd, dtype=np.float64)
        if grad_fwd.shape != (n_p, n_t + 1):
            raise ValueError(f"grad_fwd shape {grad_fwd.shape} != {(n_p, n_t + 1)}")
        a_hat_fwd = augment_softmax(a.T, nonmatch_logit)
        grad_a += _softmax_backward_to_logits(a_hat_fwd, grad_fwd).T

    grad_out = grad_a.reshape(n_t * n_p, 1).astype(params.dtype, copy=False)
    grad_x, grads = _mlp_backward(grad_out, caches, params)

    grad_pairs_t = grad_x[:, :e].reshape(n_t, n_p, e)
    grad_pairs_p = grad_x[:, e:].reshape(n_t, n_p, e)
    grad_emb_t = grad_pairs_t.sum(axis=1)
    grad_emb_past = grad_pairs_p.sum(axis=0)
    return grads, grad_emb_t, grad_emb_past
