"""Supervision for the matching head.

Ground truth for a frame pair is a pair of binary matrices, one per
matching direction, each row marking either the matched column in the
other frame or the trailing "no match" column. The matching loss is the
negative log-likelihood of those cells under the head's row-softmax
output, normalized by twice the summed detection counts of both frames.
An uncertainty-weighted joint loss combines it with a pluggable
detection loss through two learned log-variance weights.

Training samples frame pairs separated by a random gap of 1..max_pair_gap
frames, so the head sees both near and far re-identification cases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import TrackerConfig
from .matcher import DEFAULT_HIDDEN, MatcherParams, matcher_backward, matcher_forward
from .optim import Adam

__all__ = [
    "GroundTruthMatch",
    "LabeledFrame",
    "LossBalancer",
    "LONG_SCHEDULE",
    "build_gt_matrices",
    "matching_loss",
    "matching_loss_grad",
    "joint_loss",
    "sample_pair",
    "train_matcher",
    "evaluate_pair_accuracy",
]

LOG_EPS = 1e-12


@dataclass
class GroundTruthMatch:
    """Binary match matrices for one frame pair, padded to max_objects.

    m_bwd rows follow current-frame detections, m_fwd rows follow
    past-frame detections; the final column of each marks "no match".
    Rows beyond the real detection counts are all zero.
    """

    m_fwd: np.ndarray
    m_bwd: np.ndarray
    n_current: int
    n_past: int


@dataclass
class LabeledFrame:
    """One frame of training truth: identity per detection plus its
    appearance embedding (row-aligned)."""

    ids: list[int]
    embeddings: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(self.ids):
            raise ValueError(
                f"embeddings shape {emb.shape} does not match {len(self.ids)} ids"
            )
        self.embeddings = emb


def build_gt_matrices(
    ids_current: list[int], ids_past: list[int], max_objects: int
) -> GroundTruthMatch:
    """Ground-truth matrices from per-detection identity labels.

    Each real row gets exactly one 1: the column of the same identity in
    the other frame, or the final non-match column. Identities must be
    unique within a frame.
    """
    n_cur, n_past = len(ids_current), len(ids_past)
    if n_cur > max_objects or n_past > max_objects:
        raise ValueError(
            f"{max(n_cur, n_past)} detections exceed max_objects {max_objects}"
        )
    if len(set(ids_current)) != n_cur or len(set(ids_past)) != n_past:
        raise ValueError("duplicate identity within a frame")
    m_bwd = np.zeros((max_objects, max_objects + 1), dtype=np.float64)
    m_fwd = np.zeros((max_objects, max_objects + 1), dtype=np.float64)
    past_col = {pid: j for j, pid in enumerate(ids_past)}
    cur_col = {cid: i for i, cid in enumerate(ids_current)}
    for i, cid in enumerate(ids_current):
        m_bwd[i, past_col.get(cid, max_objects)] = 1.0
    for j, pid in enumerate(ids_past):
        m_fwd[j, cur_col.get(pid, max_objects)] = 1.0
    return GroundTruthMatch(m_fwd=m_fwd, m_bwd=m_bwd, n_current=n_cur, n_past=n_past)


def _gt_cells(m: np.ndarray, n_rows: int, a_hat: np.ndarray):
    """Row/column indices in ``a_hat`` of the ground-truth 1-cells.

    Handles both padded (max_objects wide) and exact-size probability
    matrices: the ground truth's final column maps onto a_hat's final
    column."""
    rows, cols = np.nonzero(m[:n_rows])
    mapped = np.where(cols == m.shape[1] - 1, a_hat.shape[1] - 1, cols)
    if mapped.size and (mapped.max() >= a_hat.shape[1] or rows.max() >= a_hat.shape[0]):
        raise ValueError("ground truth refers to cells outside the probability matrix")
    return rows, mapped


def matching_loss(
    a_hat_fwd: np.ndarray,
    a_hat_bwd: np.ndarray,
    gt: GroundTruthMatch,
    n_current: int,
    n_past: int,
) -> float:
    """Negative log-likelihood of the ground-truth cells, averaged over
    2 * (n_current + n_past). Zero iff the head puts probability 1 on
    every ground-truth cell. Probabilities are clamped at 1e-12."""
    loss, _, _ = matching_loss_grad(a_hat_fwd, a_hat_bwd, gt, n_current, n_past)
    return loss


def matching_loss_grad(
    a_hat_fwd: np.ndarray,
    a_hat_bwd: np.ndarray,
    gt: GroundTruthMatch,
    n_current: int,
    n_past: int,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Matching loss plus its gradients on both probability matrices.

    Cells clamped at the floor get zero gradient. Gradient arrays match
    the input shapes.
    """
    if n_current != gt.n_current or n_past != gt.n_past:
        raise ValueError("detection counts disagree with the ground truth")
    denom = 2.0 * (n_current + n_past)
    d_fwd = np.zeros_like(a_hat_fwd)
    d_bwd = np.zeros_like(a_hat_bwd)
    if denom == 0.0:
        return 0.0, d_fwd, d_bwd
    total = 0.0
    for m, n_rows, a_hat, grad in (
        (gt.m_fwd, n_past, a_hat_fwd, d_fwd),
        (gt.m_bwd, n_current, a_hat_bwd, d_bwd),
    ):
        rows, cols = _gt_cells(m, n_rows, a_hat)
        probs = a_hat[rows, cols]
        clamped = np.maximum(probs, LOG_EPS)
        total += -np.log(clamped).sum()
        live = probs > LOG_EPS
        grad[rows[live], cols[live]] = -1.0 / (probs[live] * denom)
    return float(total / denom), d_fwd, d_bwd


@dataclass
class LossBalancer:
    """Learned uncertainty weights for the joint loss.

    ``values`` holds (lambda_det, lambda_match); both are trained by the
    same optimizer as the model weights.
    """

    values: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (2,):
            raise ValueError("balancer needs exactly two weights")

    @property
    def lambda_det(self) -> float:
        return float(self.values[0])

    @property
    def lambda_match(self) -> float:
        return float(self.values[1])

    def gradients(self, det_loss_mean: float, match_loss: float) -> np.ndarray:
        """d(joint)/d(lambda): -e^{-lambda} * loss + 1, per weight."""
        l1, l2 = self.values
        return np.array(
            [
                -math.exp(-l1) * det_loss_mean + 1.0,
                -math.exp(-l2) * match_loss + 1.0,
            ]
        )


def joint_loss(
    det_loss_t: float,
    det_loss_past: float,
    match_loss: float,
    balancer: LossBalancer,
) -> float:
    """Uncertainty-weighted total: e^{-l1} * mean detection loss +
    e^{-l2} * matching loss + l1 + l2."""
    l1, l2 = balancer.values
    det_mean = (det_loss_t + det_loss_past) / 2.0
    return float(
        math.exp(-l1) * det_mean + math.exp(-l2) * match_loss + l1 + l2
    )


def sample_pair(
    sequence_length: int, max_gap: int, rng: np.random.Generator
) -> tuple[int, int]:
    """(past frame index, current frame index) with a uniform random gap.

    The gap n is drawn uniformly from 1..min(max_gap, length-1) first,
    then the current frame uniformly among indices admitting that gap,
    so the gap distribution stays uniform regardless of length.
    """
    if sequence_length < 2:
        raise ValueError("need at least two frames to sample a pair")
    if max_gap < 1:
        raise ValueError("max_gap must be >= 1")
    gap = int(rng.integers(1, min(max_gap, sequence_length - 1) + 1))
    current = int(rng.integers(gap, sequence_length))
    return current - gap, current


def _scaled_layer_grads(layer_grads, scale: float) -> list[np.ndarray]:
    flat = []
    for dw, db in layer_grads:
        flat.extend((dw * scale, db * scale))
    return flat


# The full-scale recipe the desk-scale defaults are scaled down from:
# 80 epochs at lr 1e-4, batches of 8, 10x drops at epochs 30, 60 and 70.
LONG_SCHEDULE = {
    "epochs": 80,
    "lr": 1e-4,
    "batch_size": 8,
    "lr_drop_epochs": (30, 60, 70),
}


def train_matcher(
    dataset: list[list[LabeledFrame]],
    config: TrackerConfig,
    epochs: int = 20,
    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
    lr: float = 1e-3,
    batch_size: int = 8,
    steps_per_epoch: int = 25,
    rng: np.random.Generator | None = None,
    detection_loss_provider=None,
    balancer: LossBalancer | None = None,
    params: MatcherParams | None = None,
    lr_drop_epochs: tuple[int, ...] | None = None,
) -> tuple[MatcherParams, list[float]]:
    """Fit the matching head on labeled sequences.

    Every step samples ``batch_size`` frame pairs (random sequence, then
    a random gap up to config.max_pair_gap), accumulates exact gradients
    of the matching loss, and takes one Adam step. The learning rate
    drops by 10x at ``lr_drop_epochs`` (default: 40%, 75% and 90% of the
    run; see LONG_SCHEDULE for the full-scale recipe). Returns the
    trained parameters and the mean loss per epoch.

    ``detection_loss_provider`` (rng -> (det_loss_t, det_loss_past))
    switches training to the uncertainty-balanced joint loss; the
    balancer's weights then train alongside the head's.
    """
    rng = rng or np.random.default_rng()
    if not dataset or not any(len(seq) >= 2 for seq in dataset):
        raise ValueError("dataset needs at least one sequence with two frames")
    if params is None:
        params = MatcherParams.create(config.embed_dim, hidden=hidden, rng=rng)
    params.validate()
    if detection_loss_provider is not None and balancer is None:
        balancer = LossBalancer()

    arrays = params.flat_arrays()
    if detection_loss_provider is not None:
        arrays = arrays + [balancer.values]
    optimizer = Adam(arrays, lr=lr)
    if lr_drop_epochs is None:
        drops = {int(epochs * 0.4), int(epochs * 0.75), int(epochs * 0.9)}
    else:
        drops = set(lr_drop_epochs)
    usable = [i for i, seq in enumerate(dataset) if len(seq) >= 2]
    history: list[float] = []
    for epoch in range(epochs):
        if epoch in drops and epoch > 0:
            optimizer.lr *= 0.1
        epoch_losses = []
        for _ in range(steps_per_epoch):
            grad_acc = [np.zeros_like(a) for a in params.flat_arrays()]
            lam_acc = np.zeros(2)
            step_loss = 0.0
            for _ in range(batch_size):
                seq = dataset[usable[int(rng.integers(len(usable)))]]
                t_past, t_cur = sample_pair(len(seq), config.max_pair_gap, rng)
                past, cur = seq[t_past], seq[t_cur]
                pair = matcher_forward(
                    cur.embeddings, past.embeddings, params, config.nonmatch_logit
                )
                gt = build_gt_matrices(cur.ids, past.ids, config.max_objects)
                loss, d_fwd, d_bwd = matching_loss_grad(
                    pair.a_hat_fwd, pair.a_hat_bwd, gt, len(cur.ids), len(past.ids)
                )
                scale = 1.0
                if detection_loss_provider is not None:
                    det_t, det_past = detection_loss_provider(rng)
                    step_loss += joint_loss(det_t, det_past, loss, balancer)
                    scale = math.exp(-balancer.lambda_match)
                    lam_acc += balancer.gradients((det_t + det_past) / 2.0, loss)
                else:
                    step_loss += loss
                layer_grads, _, _ = matcher_backward(
                    cur.embeddings,
                    past.embeddings,
                    params,
                    config.nonmatch_logit,
                    grad_bwd=d_bwd * scale,
                    grad_fwd=d_fwd * scale,
                )
                for acc, g in zip(grad_acc, _scaled_layer_grads(layer_grads, 1.0)):
                    acc += g
            step_loss /= batch_size
            if not math.isfinite(step_loss):
                raise FloatingPointError(
                    f"training diverged at epoch {epoch}: loss {step_loss}"
                )
            grads = [g / batch_size for g in grad_acc]
            if detection_loss_provider is not None:
                grads = grads + [lam_acc / batch_size]
            optimizer.step(grads)
            epoch_losses.append(step_loss)
        history.append(float(np.mean(epoch_losses)))
    return params, history


def evaluate_pair_accuracy(
    params: MatcherParams,
    dataset: list[list[LabeledFrame]],
    config: TrackerConfig,
    rng: np.random.Generator | None = None,
    n_pairs: int = 200,
) -> float:
    """Fraction of detections whose row-argmax (match column or
    non-match) agrees with ground truth, over sampled frame pairs,
    counting both matching directions."""
    rng = rng or np.random.default_rng()
    usable = [i for i, seq in enumerate(dataset) if len(seq) >= 2]
    if not usable:
        raise ValueError("dataset needs at least one sequence with two frames")
    correct = 0
    total = 0
    for _ in range(n_pairs):
        seq = dataset[usable[int(rng.integers(len(usable)))]]
        t_past, t_cur = sample_pair(len(seq), config.max_pair_gap, rng)
        past, cur = seq[t_past], seq[t_cur]
        n_cur, n_past = len(cur.ids), len(past.ids)
        if n_cur == 0 and n_past == 0:
            continue
        pair = matcher_forward(
            cur.embeddings, past.embeddings, params, config.nonmatch_logit
        )
        past_col = {pid: j for j, pid in enumerate(past.ids)}
        cur_col = {cid: i for i, cid in enumerate(cur.ids)}
        for i, cid in enumerate(cur.ids):
            want = past_col.get(cid, n_past)
            correct += int(np.argmax(pair.a_hat_bwd[i]) == want)
            total += 1
        for j, pid in enumerate(past.ids):
            want = cur_col.get(pid, n_cur)
            correct += int(np.argmax(pair.a_hat_fwd[j]) == want)
            total += 1
    if total == 0:
        raise ValueError("sampled pairs contained no detections")
    return correct / total
