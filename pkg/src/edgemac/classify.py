"""Transfer classification on frozen descriptors.

A multinomial logistic-regression classifier with l2 penalty is trained by
full-batch gradient descent with backtracking line search, which makes the
result deterministic given the data order. Used for the domain
generalization protocol: train on the pooled descriptors of the seen
domains, evaluate multi-class accuracy on the unseen one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InputError, LabelError, ProtocolError, ShapeError

log = logging.getLogger("edgemac.classify")

GRAD_TOL = 1e-6
MAX_ITERS = 100_000


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray  # (classes, dim)
    bias: np.ndarray     # (classes,)
    classes: tuple


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _objective(x, y_onehot, w, b, lam):
    probs = _softmax(x @ w.T + b)
    ce = -np.mean(np.log(np.clip((probs * y_onehot).sum(axis=1), 1e-300, None)))
    return ce + 0.5 * lam * float(np.sum(w * w)), probs


def train_linear(descriptors, labels, lam: float, loss_history: list | None = None) -> LinearModel:
    """Fit a multi-class linear classifier on descriptors.

    The objective is mean cross-entropy plus (lam/2)*||W||^2 (bias
    unpenalized), minimized to gradient norm < 1e-6 by gradient descent with
    Armijo backtracking, so the objective decreases monotonically. When a
    list is passed as ``loss_history`` the per-iteration objective values
    are appended to it.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    labels = list(labels)
    if x.ndim != 2 or x.shape[0] != len(labels):
        raise ShapeError(f"{len(labels)} labels for descriptor matrix of shape {x.shape}")
    if lam <= 0.0:
        raise InputError(f"regularization lambda must be > 0, got {lam}")
    classes = tuple(sorted(set(labels)))
    if len(classes) < 2:
        raise LabelError(f"need at least 2 classes, got {classes}")
    class_index = {c: i for i, c in enumerate(classes)}
    n, dim = x.shape
    y = np.zeros((n, len(classes)))
    y[np.arange(n), [class_index[l] for l in labels]] = 1.0

    w = np.zeros((len(classes), dim))
    b = np.zeros(len(classes))
    loss, probs = _objective(x, y, w, b, lam)
    if loss_history is not None:
        loss_history.append(loss)
    step = 1.0
    for _ in range(MAX_ITERS):
        gw = (probs - y).T @ x / n + lam * w
        gb = (probs - y).mean(axis=0)
        gnorm_sq = float(np.sum(gw * gw) + np.sum(gb * gb))
        if np.sqrt(gnorm_sq) < GRAD_TOL:
            break
        step = min(step * 2.0, 1e6)
        accepted = False
        while step >= 1e-20:
            new_loss, new_probs = _objective(x, y, w - step * gw, b - step * gb, lam)
            if new_loss <= loss - 0.5 * step * gnorm_sq:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break  # numerics exhausted; gradient is already tiny
        w = w - step * gw
        b = b - step * gb
        loss, probs = new_loss, new_probs
        if loss_history is not None:
            loss_history.append(loss)
    else:
        log.warning("classifier did not reach gradient tolerance within %d iterations", MAX_ITERS)
    return LinearModel(weights=w, bias=b, classes=classes)


def predict(model: LinearModel, descriptor):
    """Predicted class and per-class affine scores; ties go to the first class."""
    d = np.asarray(descriptor, dtype=np.float64).ravel()
    if d.shape[0] != model.weights.shape[1]:
        raise ShapeError(f"descriptor dim {d.shape[0]} != model dim {model.weights.shape[1]}")
    scores = model.weights @ d + model.bias
    return model.classes[int(np.argmax(scores))], scores


def accuracy(model: LinearModel, descriptors, labels) -> float:
    x = np.asarray(descriptors, dtype=np.float64)
    scores = x @ model.weights.T + model.bias
    predicted = [model.classes[i] for i in np.argmax(scores, axis=1)]
    return float(np.mean([p == t for p, t in zip(predicted, labels)]))


def evaluate_domain_generalization(domain_sets, train_domains, test_domain, lam: float) -> float:
    """Train on pooled seen-domain descriptors, report accuracy on the unseen one.

    ``domain_sets`` maps domain name -> (descriptors, labels).
    """
    train_domains = list(train_domains)
    if test_domain in train_domains:
        raise ProtocolError(f"test domain {test_domain!r} must not appear in the training set")
    if not train_domains:
        raise InputError("need at least one training domain")
    for name in train_domains + [test_domain]:
        if name not in domain_sets:
            raise InputError(f"unknown domain {name!r}")
    xs, ys = [], []
    for name in train_domains:
        d, l = domain_sets[name]
        xs.append(np.asarray(d, dtype=np.float64))
        ys.extend(l)
    model = train_linear(np.concatenate(xs), ys, lam)
    test_x, test_y = domain_sets[test_domain]
    return accuracy(model, test_x, test_y)
