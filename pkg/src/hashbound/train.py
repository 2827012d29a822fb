"""Supervised toy training: surrogate fitting plus surrogate-gradient updates.

Within every mini-batch the trainer interleaves a maximum-likelihood update
of the surrogate on the model's own binarized outputs and a model update
whose loss is the surrogate's negative log-likelihood of each sample's class
center. Both losses are read from one shared surrogate forward pass, so the
two gradients see the same dropout mask and the same pre-update surrogate
parameters; the surrogate update is applied first. Gradients of the
surrogate's own loss stop at the code, so the model is driven only by the
center-likelihood term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .bounds import class_stats
from .centers import CenterSet
from .codes import BitCode, pack_sign_matrix, sign_matrix
from .errors import (
    InvalidConfigError,
    InvalidInputError,
    TrainingDivergenceError,
    UndefinedMetricError,
)
from .mvb import SurrogateModel, _seed_sequence
from .nn import AdamState, Affine, DenseNet, SiLU, adam_step, softmax_cross_entropy
from .ranking import map_at_r

__all__ = [
    "SyntheticDataset",
    "ToyHashModel",
    "TraceRecord",
    "TrainTrace",
    "make_synthetic_dataset",
    "surrogate_nll",
    "trace_bound",
    "train_supervised",
]


@dataclass(frozen=True)
class SyntheticDataset:
    """Labeled features with a fixed base/query split; base doubles as train."""

    base_features: np.ndarray
    base_labels: np.ndarray
    query_features: np.ndarray
    query_labels: np.ndarray
    classes: int
    dim: int


def make_synthetic_dataset(
    classes: int,
    per_class: int,
    d: int,
    separation: float,
    seed=0,
) -> SyntheticDataset:
    """Unit-covariance Gaussian blobs with pairwise mean distance `separation`.

    Class c's mean is (separation / sqrt(2)) * e_c, so every pair of means
    sits exactly `separation` apart; this needs d >= classes. The last
    quarter of each class's draws forms the query split, the rest the base.
    """
    if classes < 2:
        raise InvalidInputError("need at least 2 classes")
    if per_class < 4:
        raise InvalidInputError("need at least 4 samples per class")
    if d < classes:
        raise InvalidInputError("axis-aligned means need d >= classes")
    if separation < 0:
        raise InvalidInputError("separation must be non-negative")
    rng = np.random.default_rng(_seed_sequence(seed))
    n_query = per_class // 4
    cut = per_class - n_query
    scale = separation / math.sqrt(2.0)
    base_x, base_y, query_x, query_y = [], [], [], []
    for c in range(classes):
        mean = np.zeros(d)
        mean[c] = scale
        draws = mean + rng.standard_normal((per_class, d))
        base_x.append(draws[:cut])
        query_x.append(draws[cut:])
        base_y.append(np.full(cut, c))
        query_y.append(np.full(n_query, c))
    return SyntheticDataset(
        base_features=np.concatenate(base_x),
        base_labels=np.concatenate(base_y),
        query_features=np.concatenate(query_x),
        query_labels=np.concatenate(query_y),
        classes=classes,
        dim=d,
    )


class ToyHashModel:
    """Small dense projection from features to real-valued codes."""

    def __init__(self, dim: int, bits: int, hidden: int = 64, seed=0):
        if dim < 1 or bits < 1 or hidden < 1:
            raise InvalidInputError("dim, bits, and hidden must be >= 1")
        rng = np.random.default_rng(_seed_sequence(seed))
        self.dim = dim
        self.bits = bits
        self.net = DenseNet(
            [Affine(dim, hidden, rng), SiLU(), Affine(hidden, bits, rng)]
        )

    def project(self, features):
        """Real code rows plus the backward cache."""
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return self.net.forward(x)

    def hash_codes(self, features) -> list[BitCode]:
        out, _ = self.project(features)
        return pack_sign_matrix(np.where(out >= 0, 1, -1).astype(np.int8))


@dataclass(frozen=True)
class TraceRecord:
    epoch: int
    loss_pi: float
    loss_theta: float
    map: float
    ratio: float
    min_pairwise: int


@dataclass(frozen=True)
class TrainTrace:
    records: tuple[TraceRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        epochs = [r.epoch for r in self.records]
        if epochs != sorted(set(epochs)):
            raise InvalidInputError("trace epochs must be strictly increasing")

    def csv_lines(self) -> list[str]:
        lines = ["epoch,loss_pi,loss_theta,map,ratio"]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.loss_pi!r},{r.loss_theta!r},{r.map!r},{r.ratio!r}"
            )
        return lines


def _forward_blocks(surrogate: SurrogateModel, ell, rng=None, masks=None):
    """One training-mode pass of every block net; returns (logits, caches)."""
    logits, caches = [], []
    for j, (net, sl) in enumerate(zip(surrogate.nets, surrogate.block_slices())):
        out, cache = net.forward(
            ell[:, sl], rng=rng, masks=None if masks is None else masks[j]
        )
        logits.append(out)
        caches.append(cache)
    return logits, caches


def surrogate_nll(
    surrogate: SurrogateModel,
    ell,
    target_rows,
    rng=None,
    masks=None,
):
    """Mean NLL of target codes under the surrogate, and its code gradient.

    `target_rows` holds one +-1 row per `ell` row. Dropout is active (train
    mode); pass `masks` (one list per block, as returned) to replay a known
    draw, e.g. for finite differencing. Returns (loss, grad wrt ell, masks).
    """
    ell = np.atleast_2d(np.asarray(ell, dtype=np.float64))
    target_rows = np.atleast_2d(np.asarray(target_rows, dtype=np.float64))
    if ell.shape != target_rows.shape or ell.shape[1] != surrogate.h:
        raise InvalidInputError("ell and target rows must both be (n, h)")
    surrogate.train()
    logits, caches = _forward_blocks(surrogate, ell, rng=rng, masks=masks)
    targets = surrogate.block_targets(target_rows)
    total = 0.0
    grad_ell = np.zeros_like(ell)
    for j, (net, sl) in enumerate(zip(surrogate.nets, surrogate.block_slices())):
        loss, grad_logits = softmax_cross_entropy(logits[j], targets[j])
        grad_in, _ = net.backward(caches[j], grad_logits)
        total += loss
        grad_ell[:, sl] = grad_in
    return total, grad_ell, [c.masks for c in caches]


def _center_sign_rows(centers, bits: int) -> np.ndarray:
    center_codes = list(centers.centers if isinstance(centers, CenterSet) else centers)
    if not center_codes:
        raise InvalidConfigError("need at least one class center")
    if any(c.length != bits for c in center_codes):
        raise InvalidConfigError("center bit-length must match the model")
    return sign_matrix(center_codes).astype(np.float64)


def _label_sets(raw_labels) -> list[tuple[int, ...]]:
    sets = []
    for entry in raw_labels:
        if isinstance(entry, (int, np.integer)):
            sets.append((int(entry),))
        else:
            labels = tuple(sorted(int(v) for v in entry))
            if not labels:
                raise InvalidInputError("every sample needs at least one label")
            sets.append(labels)
    return sets


def _trace_labels(label_sets: list[tuple[int, ...]]) -> list:
    """Single labels stay plain ints so trace classes match user labels."""
    return [ls[0] if len(ls) == 1 else ls for ls in label_sets]


def _bce_loss_and_grad(ell, target_rows, n_norm: int):
    """Per-bit logistic loss toward target signs, summed over bits."""
    z = -target_rows * ell
    loss = float(np.logaddexp(0.0, z).sum() / n_norm)
    grad = (-target_rows) * expit(z) / n_norm
    return loss, grad


def trace_bound(
    model: ToyHashModel,
    base_features,
    base_labels,
    query_features,
    query_labels,
    percentile: float = 99.9,
):
    """mAP of queries against the hashed base, plus the center-ratio stats.

    Returns (map value, ratio, min pairwise center distance). A single-class
    base has no inter-class distances: its ratio is nan and the distance is
    the no-constraint sentinel (the bit length).
    """
    base_codes = model.hash_codes(base_features)
    query_codes = model.hash_codes(query_features)
    result = map_at_r(
        list(zip(query_codes, list(query_labels))),
        list(zip(base_codes, list(base_labels))),
    )
    try:
        stats = class_stats(base_codes, list(base_labels), percentile=percentile)
        ratio = stats.ratio
        min_pairwise = int(stats.d_inter.min())
    except UndefinedMetricError:
        ratio = math.nan
        min_pairwise = model.bits
    return result.value, ratio, min_pairwise


def train_supervised(
    model: ToyHashModel,
    surrogate: SurrogateModel,
    centers,
    data: SyntheticDataset,
    epochs: int,
    eta1: float = 1e-3,
    eta2: float = 1e-3,
    batch: int = 64,
    seed=0,
    objective: str = "ce",
    decay_every: int | None = None,
    decay: float = 0.1,
    percentile: float = 99.9,
):
    """Run the interleaved surrogate/model updates and trace every epoch.

    Per batch: project features to real codes; run one dropout-active
    surrogate forward; update the surrogate toward the batch's own binarized
    codes; update the model toward each sample's class centers, with the
    center NLL's gradient taken through the pre-update surrogate and the
    same dropout mask. A sample carrying several labels contributes the sum
    of its per-center losses. objective="bce" swaps the model's loss for
    per-bit logistic regression toward the center signs (the surrogate is
    still fitted, but no gradient flows through it).

    The learning rate is constant unless decay_every is set, in which case
    both rates shrink by `decay` every `decay_every` epochs. Returns
    (model, TrainTrace); the trace's ratio is nan for single-class data and
    its mAP treats each distinct label set as its own relevance rule.
    """
    if epochs < 0 or batch < 1:
        raise InvalidInputError("need epochs >= 0 and batch >= 1")
    if objective not in ("ce", "bce"):
        raise InvalidConfigError(f"unknown objective {objective!r}")
    if surrogate.h != model.bits:
        raise InvalidConfigError("surrogate and model bit-lengths differ")
    center_rows = _center_sign_rows(centers, model.bits)
    label_sets = _label_sets(data.base_labels)
    flat_labels = np.array([l for labels in label_sets for l in labels])
    if flat_labels.min() < 0 or flat_labels.max() >= center_rows.shape[0]:
        raise InvalidConfigError("a training label has no center")
    expand_index = np.array(
        [i for i, labels in enumerate(label_sets) for _ in labels]
    )
    center_block_targets = surrogate.block_targets(center_rows)
    trace_base_labels = _trace_labels(label_sets)
    trace_query_labels = _trace_labels(_label_sets(data.query_labels))

    features = np.asarray(data.base_features, dtype=np.float64)
    n = features.shape[0]
    shuffle_rng, dropout_rng = (
        np.random.default_rng(c) for c in _seed_sequence(seed).spawn(2)
    )
    pi_states = [AdamState.for_params(net.params(), lr=eta1) for net in surrogate.nets]
    theta_state = AdamState.for_params(model.net.params(), lr=eta2)
    slices = surrogate.block_slices()
    surrogate.train()
    records = []
    for epoch in range(epochs):
        if decay_every:
            factor = decay ** (epoch // decay_every)
            for state in pi_states:
                state.lr = eta1 * factor
            theta_state.lr = eta2 * factor
        order = shuffle_rng.permutation(n)
        pi_total = theta_total = 0.0
        steps = 0
        for start in range(0, n, batch):
            take = order[start : start + batch]
            x = features[take]
            ell, model_cache = model.net.forward(x)
            logits, caches = _forward_blocks(surrogate, ell, rng=dropout_rng)
            pi_targets = surrogate.block_targets(ell)

            # expanded (sample, label) pairs of this batch, batch-local rows
            local = {int(g): i for i, g in enumerate(take)}
            pair_mask = np.isin(expand_index, take)
            pair_local = np.array(
                [local[int(g)] for g in expand_index[pair_mask]], dtype=int
            )
            pair_labels = flat_labels[pair_mask]
            rescale = pair_local.size / take.size

            loss_pi = 0.0
            loss_theta = 0.0
            grad_ell = np.zeros_like(ell)
            pi_grads = []
            for j, net in enumerate(surrogate.nets):
                lp, gp = softmax_cross_entropy(logits[j], pi_targets[j])
                _, gparams = net.backward(caches[j], gp)
                pi_grads.append(gparams)
                loss_pi += lp
                if objective == "ce":
                    lt, gt = softmax_cross_entropy(
                        logits[j][pair_local], center_block_targets[j][pair_labels]
                    )
                    # mean over pairs -> per-sample sum over labels
                    loss_theta += lt * rescale
                    folded = np.zeros_like(logits[j])
                    np.add.at(folded, pair_local, gt * rescale)
                    gin, _ = net.backward(caches[j], folded)
                    grad_ell[:, slices[j]] += gin
            if objective == "bce":
                loss_theta, z_grad = _bce_loss_and_grad(
                    ell[pair_local], center_rows[pair_labels], n_norm=take.size
                )
                np.add.at(grad_ell, pair_local, z_grad)

            if not (math.isfinite(loss_pi) and math.isfinite(loss_theta)):
                raise TrainingDivergenceError(f"non-finite loss at epoch {epoch}")

            for net, state, grads in zip(surrogate.nets, pi_states, pi_grads):
                net.set_params(adam_step(net.params(), grads, state))
            _, theta_grads = model.net.backward(model_cache, grad_ell)
            model.net.set_params(
                adam_step(model.net.params(), theta_grads, theta_state)
            )
            pi_total += loss_pi
            theta_total += loss_theta
            steps += 1
        map_value, ratio, min_pairwise = trace_bound(
            model,
            features,
            trace_base_labels,
            data.query_features,
            trace_query_labels,
            percentile=percentile,
        )
        records.append(
            TraceRecord(
                epoch=epoch + 1,
                loss_pi=float(pi_total / steps),
                loss_theta=float(theta_total / steps),
                map=float(map_value),
                ratio=float(ratio),
                min_pairwise=int(min_pairwise),
            )
        )
    return model, TrainTrace(tuple(records))
