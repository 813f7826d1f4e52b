"""Siamese contrastive training with periodic hard-negative mining.

A training tuple is (query, matching positive, 5 non-matching negatives).
Each tuple contributes one positive and five negative pairs to the
contrastive loss. Negatives are re-selected several times per epoch as the
nearest pool items under the current network, restricted to model ids that
differ from the query's (and from each other, for diversity).

Everything is reproducible from TrainConfig.seed: augmentation, shuffling
and weight init each draw from their own named substream.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import convnet
from .convnet import NetworkConfig, NetworkWeights, backward, forward, init_weights
from .edgemap import EdgeMap, binarize_random, mirror, resize_max_side
from .errors import ConfigError, InputError, MiningError, ShapeError, ZeroDescriptorError
from .filterlayer import filter_backward, filter_forward
from .rng import substream

log = logging.getLogger("edgemac.training")

NEGATIVES_PER_TUPLE = 5


@dataclass(frozen=True)
class TrainingItem:
    id: str
    edge_map: EdgeMap
    model_id: str
    is_query: bool = False


@dataclass(frozen=True)
class TrainingTuple:
    """One query, one matching positive, five negatives from distinct foreign models."""

    query: TrainingItem
    positive: TrainingItem
    negatives: tuple

    def __post_init__(self):
        object.__setattr__(self, "negatives", tuple(self.negatives))
        if len(self.negatives) != NEGATIVES_PER_TUPLE:
            raise ValueError(f"expected {NEGATIVES_PER_TUPLE} negatives, got {len(self.negatives)}")
        if self.positive.model_id != self.query.model_id:
            raise ValueError("positive must share the query's model_id")
        models = [n.model_id for n in self.negatives]
        if any(mid == self.query.model_id for mid in models):
            raise ValueError("negatives must come from models other than the query's")
        if len(set(models)) != len(models):
            raise ValueError("negatives must have pairwise distinct model_ids")


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.7
    lr0: float = 0.001
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 20
    max_epochs: int = 20
    mining_per_epoch: int = 3
    train_max_side: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.margin <= 2.0:
            raise ConfigError(f"margin must be in (0, 2], got {self.margin}")
        for name in ("lr0", "batch_size", "max_epochs", "mining_per_epoch", "train_max_side"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr_decay", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")


# ---------------------------------------------------------------------------
# Loss and pairs
# ---------------------------------------------------------------------------

def contrastive_loss(x: np.ndarray, y: np.ndarray, positive: bool, margin: float):
    """Pairwise contrastive loss with its exact gradients.

    Positive pairs: loss = ||x - y||^2. Negative pairs:
    loss = max{(margin - ||x - y||)^2, 0}; the gradient vanishes once the
    pair is separated by at least the margin, and is defined as zero at
    coincident descriptors.
    Returns (loss, grad_x, grad_y).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    diff = x - y
    if positive:
        loss = float(diff @ diff)
        gx = 2.0 * diff
        return loss, gx, -gx
    d = float(np.linalg.norm(diff))
    if d >= margin:
        z = np.zeros_like(diff)
        return 0.0, z, z
    loss = (margin - d) ** 2
    if d == 0.0:
        z = np.zeros_like(diff)
        return float(loss), z, z
    gx = -2.0 * (margin - d) / d * diff
    return float(loss), gx, -gx


def pairs_from_tuple(t: TrainingTuple):
    """The six labeled pairs of a tuple: (query, positive, True) then the negatives."""
    out = [(t.query, t.positive, True)]
    out.extend((t.query, n, False) for n in t.negatives)
    return out


def initial_negatives(items, query_model_id: str, n: int = NEGATIVES_PER_TUPLE):
    """Deterministic placeholder negatives (first distinct foreign models by id).

    Used to build valid tuples before the first hard-mining pass replaces them.
    """
    chosen, used = [], {query_model_id}
    for item in sorted(items, key=lambda it: it.id):
        if item.model_id in used:
            continue
        chosen.append(item)
        used.add(item.model_id)
        if len(chosen) == n:
            return tuple(chosen)
    raise MiningError(
        f"only {len(chosen)} items with distinct foreign models available, need {n}"
    )


def augment_tuple(t: TrainingTuple, rng) -> TrainingTuple:
    """Random augmentation: joint mirroring, then query-only binarization.

    With probability 0.5 the query and positive are mirrored together (never
    one alone). Independently, with probability 0.5 the query is thresholded
    at t ~ U[0, 0.2] and binarized; the positive is left unchanged.
    Negatives are not transformed here: they are re-mined afterwards.
    """
    query, positive = t.query, t.positive
    if rng.random() < 0.5:
        query = replace(query, edge_map=mirror(query.edge_map))
        positive = replace(positive, edge_map=mirror(positive.edge_map))
    if rng.random() < 0.5:
        query = replace(query, edge_map=binarize_random(query.edge_map, rng))
    return TrainingTuple(query=query, positive=positive, negatives=t.negatives)


# ---------------------------------------------------------------------------
# Descriptor plumbing shared by mining and the loop
# ---------------------------------------------------------------------------

def describe(weights: NetworkWeights, m: EdgeMap):
    """Single-scale descriptor of one edge map: filter, conv stack, MAC, l2."""
    filtered = filter_forward(m, weights.filter_params)
    return forward(weights, filtered)


def _map_ordered(fn, items, threads: int):
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _descriptor_or_none(weights, item: TrainingItem):
    try:
        desc, _ = describe(weights, item.edge_map)
        return desc.astype(np.float64)
    except ZeroDescriptorError:
        log.warning("item %s has a zero descriptor; skipping", item.id)
        return None


def mine_hard_negatives(weights: NetworkWeights, queries, pool, n: int = NEGATIVES_PER_TUPLE,
                        threads: int = 1):
    """For each query, the n nearest pool items under the current weights.

    Eligible items must have a model_id different from the query's, and the
    selected set must have pairwise distinct model_ids. Ties in descriptor
    distance break by item id. Raises MiningError when a query cannot reach
    n negatives.
    """
    if not pool:
        raise MiningError("empty mining pool")
    pool_descs = _map_ordered(lambda it: _descriptor_or_none(weights, it), list(pool), threads)
    usable = [(item, d) for item, d in zip(pool, pool_descs) if d is not None]
    if not usable:
        raise MiningError("no pool item has a nonzero descriptor")
    pool_items = [item for item, _ in usable]
    pool_mat = np.stack([d for _, d in usable])

    def mine_one(query: TrainingItem):
        qdesc, _ = describe(weights, query.edge_map)
        dist = np.linalg.norm(pool_mat - qdesc.astype(np.float64), axis=1)
        order = sorted(range(len(pool_items)), key=lambda i: (dist[i], pool_items[i].id))
        chosen, used_models = [], {query.model_id}
        for i in order:
            cand = pool_items[i]
            if cand.model_id in used_models:
                continue
            chosen.append(cand)
            used_models.add(cand.model_id)
            if len(chosen) == n:
                return tuple(chosen)
        raise MiningError(
            f"query {query.id}: only {len(chosen)} eligible negatives with distinct models, need {n}"
        )

    return _map_ordered(mine_one, list(queries), threads)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Exponentially decayed learning rate: lr0 * exp(-lr_decay * epoch)."""
    return cfg.lr0 * math.exp(-cfg.lr_decay * epoch)


@dataclass
class ModelGradients:
    """Gradients for every trainable quantity: conv kernels/biases, p, tau."""

    kernels: list
    biases: list
    p: float = 0.0
    tau: float = 0.0

    @classmethod
    def zeros_like(cls, weights: NetworkWeights) -> "ModelGradients":
        return cls(
            kernels=[np.zeros_like(k, dtype=np.float64) for k in weights.kernels],
            biases=[np.zeros_like(b, dtype=np.float64) for b in weights.biases],
        )

    def add_(self, other: "ModelGradients") -> None:
        for mine, theirs in zip(self.kernels, other.kernels):
            mine += theirs
        for mine, theirs in zip(self.biases, other.biases):
            mine += theirs
        self.p += other.p
        self.tau += other.tau

    def scale_(self, c: float) -> None:
        for k in self.kernels:
            k *= c
        for b in self.biases:
            b *= c
        self.p *= c
        self.tau *= c


# projection ranges keeping the filter layer non-degenerate during training
P_RANGE = (0.05, 4.0)
TAU_RANGE = (0.0, 0.5)


def sgd_step(weights: NetworkWeights, grads: ModelGradients, cfg: TrainConfig, epoch: int,
             velocity: ModelGradients | None = None):
    """One SGD update with momentum and weight decay, in place.

    v <- momentum * v + (grad + weight_decay * w); w <- w - lr(epoch) * v.
    The filter parameters p and tau follow the same rule and are then
    projected to safe ranges; beta and out_scale are never touched.
    Returns (weights, velocity) so the caller can carry the momentum state.
    """
    for g, k in zip(grads.kernels, weights.kernels):
        if g.shape != k.shape:
            raise ShapeError(f"gradient shape {g.shape} != kernel shape {k.shape}")
    if velocity is None:
        velocity = ModelGradients.zeros_like(weights)
    lr = lr_schedule(epoch, cfg)
    for v, g, w in zip(velocity.kernels, grads.kernels, weights.kernels):
        v *= cfg.momentum
        v += g + cfg.weight_decay * w
        w -= (lr * v).astype(w.dtype)
    for v, g, b in zip(velocity.biases, grads.biases, weights.biases):
        v *= cfg.momentum
        v += g + cfg.weight_decay * b
        b -= (lr * v).astype(b.dtype)
    fp = weights.filter_params
    velocity.p = cfg.momentum * velocity.p + (grads.p + cfg.weight_decay * fp.p)
    velocity.tau = cfg.momentum * velocity.tau + (grads.tau + cfg.weight_decay * fp.tau)
    new_p = min(max(fp.p - lr * velocity.p, P_RANGE[0]), P_RANGE[1])
    new_tau = min(max(fp.tau - lr * velocity.tau, TAU_RANGE[0]), TAU_RANGE[1])
    weights.filter_params = replace(fp, p=new_p, tau=new_tau)
    weights.revision += 1
    return weights, velocity


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainingData:
    """Tuples plus the pools that hard negatives are mined from."""

    tuples: list
    pool: list
    val_tuples: list
    val_pool: list


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def _fit_item(item: TrainingItem, max_side: int) -> TrainingItem:
    em = item.edge_map
    if max(em.height, em.width) == max_side:
        return item
    return replace(item, edge_map=resize_max_side(em, max_side))


def _fit_tuple(t: TrainingTuple, max_side: int) -> TrainingTuple:
    return TrainingTuple(
        query=_fit_item(t.query, max_side),
        positive=_fit_item(t.positive, max_side),
        negatives=tuple(_fit_item(n, max_side) for n in t.negatives),
    )


def _tuple_gradients(weights: NetworkWeights, t: TrainingTuple, margin: float):
    """Loss values and summed parameter gradients for one tuple's six pairs.

    Items whose descriptor is all zero are skipped (they carry no gradient);
    the affected pairs simply drop out of the batch average.
    """
    items = [t.query, t.positive, *t.negatives]
    descs, caches = [], []
    for item in items:
        try:
            d, c = describe(weights, item.edge_map)
            descs.append(d.astype(np.float64))
            caches.append(c)
        except ZeroDescriptorError:
            log.warning("skipping pairs of item %s: zero descriptor", item.id)
            descs.append(None)
            caches.append(None)
    losses = []
    desc_grads = [np.zeros(weights.config.descriptor_dim) if d is not None else None for d in descs]
    for j, (_, _, positive) in enumerate(pairs_from_tuple(t)):
        # pair j=0 is (query, positive); pair j>=1 is (query, negatives[j-1])
        other = 1 if j == 0 else j + 1
        if descs[0] is None or descs[other] is None:
            continue
        loss, gq, go = contrastive_loss(descs[0], descs[other], positive, margin)
        losses.append(loss)
        desc_grads[0] += gq
        desc_grads[other] += go
    grads = ModelGradients.zeros_like(weights)
    for item, desc, cache, dgrad in zip(items, descs, caches, desc_grads):
        if desc is None or not np.any(dgrad):
            continue
        net = backward(weights, cache, dgrad)
        gp, gtau, _ = filter_backward(
            item.edge_map, weights.filter_params, net.grad_input[:, :, 0]
        )
        for acc, g in zip(grads.kernels, net.kernels):
            acc += g.astype(np.float64)
        for acc, g in zip(grads.biases, net.biases):
            acc += g.astype(np.float64)
        grads.p += gp
        grads.tau += gtau
    return grads, losses


def _tuple_losses(weights: NetworkWeights, t: TrainingTuple, margin: float):
    descs = []
    for item in (t.query, t.positive, *t.negatives):
        try:
            d, _ = describe(weights, item.edge_map)
            descs.append(d.astype(np.float64))
        except ZeroDescriptorError:
            descs.append(None)
    out = []
    for j in range(1 + NEGATIVES_PER_TUPLE):
        other = 1 if j == 0 else j + 1
        if descs[0] is None or descs[other] is None:
            continue
        loss, _, _ = contrastive_loss(descs[0], descs[other], j == 0, margin)
        out.append(loss)
    return out


def _mining_points(n_batches: int, per_epoch: int):
    return sorted({min(math.floor(n_batches * i / per_epoch), n_batches - 1)
                   for i in range(per_epoch)})


def train(data: TrainingData, cfg: TrainConfig, net_config: NetworkConfig | None = None,
          threads: int = 1):
    """Full fine-tuning run; returns (best_weights, history).

    Runs cfg.max_epochs epochs of batched SGD over augmented tuples,
    re-mining hard negatives cfg.mining_per_epoch times per epoch for the
    not-yet-consumed tuples. Validation tuples get their negatives mined
    once, under the initial weights, so per-epoch validation losses stay
    comparable; the snapshot with the lowest validation loss wins.
    """
    if not data.tuples or not data.val_tuples:
        raise InputError("training and validation tuple sets must both be non-empty")
    config = net_config if net_config is not None else convnet.default_config()
    weights = init_weights(config, cfg.seed)

    tuples = [_fit_tuple(t, cfg.train_max_side) for t in data.tuples]
    pool = [_fit_item(i, cfg.train_max_side) for i in data.pool]
    val_tuples = [_fit_tuple(t, cfg.train_max_side) for t in data.val_tuples]
    val_pool = [_fit_item(i, cfg.train_max_side) for i in data.val_pool]

    val_negs = mine_hard_negatives(weights, [t.query for t in val_tuples], val_pool,
                                   threads=threads)
    val_tuples = [
        TrainingTuple(query=t.query, positive=t.positive, negatives=negs)
        for t, negs in zip(val_tuples, val_negs)
    ]

    history: list[EpochStats] = []
    best_weights = None
    best_val = math.inf
    velocity: ModelGradients | None = None

    for epoch in range(cfg.max_epochs):
        order = substream(cfg.seed, "shuffle", epoch).permutation(len(tuples))
        aug_rng = substream(cfg.seed, "augment", epoch)
        epoch_tuples = [augment_tuple(tuples[i], aug_rng) for i in order]

        n_batches = math.ceil(len(epoch_tuples) / cfg.batch_size)
        mine_at = _mining_points(n_batches, cfg.mining_per_epoch)
        pair_losses: list[float] = []
        for bi in range(n_batches):
            if bi in mine_at:
                remaining = epoch_tuples[bi * cfg.batch_size :]
                negs = mine_hard_negatives(weights, [t.query for t in remaining], pool,
                                           threads=threads)
                for offset, (t, neg) in enumerate(zip(remaining, negs)):
                    epoch_tuples[bi * cfg.batch_size + offset] = TrainingTuple(
                        query=t.query, positive=t.positive, negatives=neg
                    )
            batch = epoch_tuples[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            results = _map_ordered(
                lambda t: _tuple_gradients(weights, t, cfg.margin), batch, threads
            )
            total = ModelGradients.zeros_like(weights)
            n_pairs = 0
            for grads, losses in results:  # fixed reduction order
                total.add_(grads)
                n_pairs += len(losses)
                pair_losses.extend(losses)
            if n_pairs == 0:
                continue
            total.scale_(1.0 / n_pairs)
            weights, velocity = sgd_step(weights, total, cfg, epoch, velocity)

        val_losses = []
        for t in val_tuples:
            val_losses.extend(_tuple_losses(weights, t, cfg.margin))
        train_loss = float(np.mean(pair_losses)) if pair_losses else 0.0
        val_loss = float(np.mean(val_losses)) if val_losses else 0.0
        history.append(EpochStats(epoch, train_loss, val_loss, lr_schedule(epoch, cfg)))
        log.info("epoch %d: train %.5f val %.5f", epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_weights = weights.copy()

    return best_weights, history
