#!/usr/bin/env python3
"""
Contrastive regression losses, the angular gaze loss and the weighted total
objective. Every loss returns (value, gradients) where gradients is a dict
keyed by the tensor the gradient belongs to.
"""
from dataclasses import dataclass, astuple, asdict
from typing import Dict, Tuple

import numpy as np

from anchors import AnchorSet, weight_matrix, interpolable
from constants import DENOMINATOR_FLOOR, GAZE_DOT_CLAMP
from encoders import ParameterSet, encode_prompts, encode_prompts_backward, l2_normalize_backward
from errors import ConfigError, ShapeError, SingularConfigurationError, DegenerateError
from geometry import fibonacci_sphere, normalize_rows

SCHEMES = ('literal-cos', 'clamped-cos', 'distance', 'uniform')

Gradients = Dict[str, np.ndarray]


def check_scheme(scheme):
    if scheme not in SCHEMES:
        raise ConfigError(f'unknown weighting scheme {scheme!r}, expected one of {SCHEMES}', key_path='scheme')
    return scheme


def neg_weights(gi, gj, scheme) -> np.ndarray:
    """Contrastive weights between every row of gi and every row of gj."""
    check_scheme(scheme)
    gi = np.atleast_2d(gi)
    gj = np.atleast_2d(gj).reshape(-1, 3)
    cos = np.clip(gi @ gj.T, -1.0, 1.0)
    if scheme == 'literal-cos':
        return cos
    if scheme == 'clamped-cos':
        return np.maximum(cos, 0.0)
    if scheme == 'distance':
        return (1.0 - cos) / 2.0
    return np.ones_like(cos)


def neg_weight(gi, gj, scheme) -> float:
    return float(neg_weights(gi, gj, scheme)[0, 0])


def _weighted_nce(queries, candidates, weights, tau):
    """
    -mean_i log(e_ii / (e_ii + sum_j w_ij e_ij)), e_ij = exp(cos(q_i, c_j) / tau).
    candidates[i] is the positive for queries[i]; weights[i, i] must be 0.
    """
    b = len(queries)
    if b < 1:
        raise ShapeError('contrastive loss needs at least one sample')
    if len(candidates) < b or weights.shape != (b, len(candidates)):
        raise ShapeError(f'{b} queries, {len(candidates)} candidates and weights {weights.shape} do not line up')
    q, q_norms = normalize_rows(queries, 'query feature')
    c, c_norms = normalize_rows(candidates, 'candidate feature')
    logits = (q @ c.T) / tau
    idx = np.arange(b)
    shift = logits.max(axis=1)
    e = np.exp(logits - shift[:, None])
    neg = weights * e
    denom = e[idx, idx] + neg.sum(axis=1)
    for i in range(b):
        if denom[i] <= 0 or np.log(denom[i]) + shift[i] <= np.log(DENOMINATOR_FLOOR):
            raise SingularConfigurationError(f'nonpositive contrastive denominator for sample {i}')
    losses = np.log(denom) + shift - logits[idx, idx]
    d_logits = neg / denom[:, None]
    d_logits[idx, idx] += e[idx, idx] / denom - 1.0
    d_s = d_logits / (tau * b)
    d_q = l2_normalize_backward(d_s @ c, q, q_norms)
    d_c = l2_normalize_backward(d_s.T @ q, c, c_norms)
    return float(losses.mean()), d_q, d_c


def _batch_weights(labels, scheme):
    w = neg_weights(labels, labels, scheme)
    np.fill_diagonal(w, 0.0)
    return w


def mcr_t2i_loss(f_t, f_g, labels, scheme='clamped-cos', tau=1.0) -> Tuple[float, Gradients]:
    """Text-to-image term: each text feature against all image features of the batch."""
    f_t, f_g, labels = np.atleast_2d(f_t), np.atleast_2d(f_g), np.atleast_2d(labels)
    if not (len(f_t) == len(f_g) == len(labels)):
        raise ShapeError(f'batch sizes differ: {len(f_t)} text, {len(f_g)} image, {len(labels)} labels')
    loss, d_t, d_g = _weighted_nce(f_t, f_g, _batch_weights(labels, scheme), tau)
    return loss, {'f_t': d_t, 'f_g': d_g}


@dataclass
class GlobalNegativeBank:
    gazes: np.ndarray
    features: np.ndarray
    cache: tuple = None

    @property
    def k(self):
        return len(self.gazes)


def mcr_i2t_loss(f_g, f_t, labels, bank: GlobalNegativeBank = None, scheme='clamped-cos',
                 tau=1.0) -> Tuple[float, Gradients]:
    """
    Image-to-text term: negatives are the other in-batch text features plus every bank feature.
    """
    f_g, f_t, labels = np.atleast_2d(f_g), np.atleast_2d(f_t), np.atleast_2d(labels)
    if not (len(f_t) == len(f_g) == len(labels)):
        raise ShapeError(f'batch sizes differ: {len(f_g)} image, {len(f_t)} text, {len(labels)} labels')
    b = len(f_g)
    candidates, weights = f_t, _batch_weights(labels, scheme)
    if bank is not None and bank.k:
        candidates = np.vstack([f_t, bank.features])
        weights = np.hstack([weights, neg_weights(labels, bank.gazes, scheme)])
    loss, d_g, d_c = _weighted_nce(f_g, candidates, weights, tau)
    grads = {'f_g': d_g, 'f_t': d_c[:b]}
    if bank is not None:
        grads['bank'] = d_c[b:]
    return loss, grads


def merge_gradients(*scaled) -> Gradients:
    """merge_gradients((scale, grads), ...) -> sum of scale * grads per key."""
    merged = {}
    for scale, grads in scaled:
        for k, g in grads.items():
            if k in merged:
                merged[k] = merged[k] + scale * g
            else:
                merged[k] = scale * g
    return merged


def mcr_total(f_t, f_g, labels, bank=None, scheme='clamped-cos', tau=1.0) -> Tuple[float, Gradients]:
    t2i, g_t2i = mcr_t2i_loss(f_t, f_g, labels, scheme, tau)
    i2t, g_i2t = mcr_i2t_loss(f_g, f_t, labels, bank, scheme, tau)
    return t2i + i2t, merge_gradients((1.0, g_t2i), (1.0, g_i2t))


def gaze_loss_batch(raw, labels) -> Tuple[float, np.ndarray]:
    """
    Mean angle in radians between normalized raw predictions and labels, with the
    gradient w.r.t. the raw (pre-normalization) predictions.
    """
    raw, labels = np.atleast_2d(raw), np.atleast_2d(labels)
    try:
        pred, norms = normalize_rows(raw, 'gaze prediction')
    except DegenerateError as e:
        raise DegenerateError(f'degenerate prediction: {e}') from e
    dots = np.clip(np.sum(pred * labels, axis=1), -1.0, 1.0)
    angles = np.arccos(dots)
    # arccos' diverges at 0 and 180 degrees
    clamped = np.clip(dots, -GAZE_DOT_CLAMP, GAZE_DOT_CLAMP)
    d_pred = -labels / np.sqrt(1.0 - clamped * clamped)[:, None]
    d_raw = l2_normalize_backward(d_pred, pred, norms) / len(raw)
    return float(angles.mean()), d_raw


def gaze_loss(pred, label) -> Tuple[float, np.ndarray]:
    loss, d_raw = gaze_loss_batch(pred, label)
    return loss, d_raw[0]


@dataclass(frozen=True)
class Lambdas:
    geo: float = 1.0
    mcr: float = 1.0
    gaze: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f'loss weight must be non-negative, got {value}', key_path=f'lambdas.{name}')


@dataclass(frozen=True)
class LossBreakdown:
    geo: float
    mcr_t2i: float
    mcr_i2t: float
    gaze: float
    total: float

    def is_finite(self):
        return bool(np.all(np.isfinite(astuple(self))))


def total_objective(geo, mcr_t2i, mcr_i2t, gaze, lambdas: Lambdas = Lambdas()) -> Tuple[LossBreakdown, Gradients]:
    """
    Each component is a (value, gradients) pair.
    total = geo_w * geo + mcr_w * (t2i + i2t) + gaze_w * gaze, gradients weighted the same way.
    """
    total = lambdas.geo * geo[0] + lambdas.mcr * (mcr_t2i[0] + mcr_i2t[0]) + lambdas.gaze * gaze[0]
    breakdown = LossBreakdown(geo[0], mcr_t2i[0], mcr_i2t[0], gaze[0], total)
    grads = merge_gradients((lambdas.geo, geo[1]), (lambdas.mcr, mcr_t2i[1]), (lambdas.mcr, mcr_i2t[1]),
                            (lambdas.gaze, gaze[1]))
    return breakdown, grads


def bank_gazes(k) -> np.ndarray:
    return fibonacci_sphere(k) if k else np.zeros((0, 3))


def build_negative_bank(k, anchor_set: AnchorSet, params: ParameterSet, interpolation='spherical',
                        weights=None) -> GlobalNegativeBank:
    """
    K text features on a Fibonacci lattice, encoded with the live context tokens and
    anchors in params. Pass precomputed interpolation `weights` (K, N) to skip the lookup;
    the lattice never moves, only the features do. Without `weights`, lattice points in
    the global-linear singular band are dropped.
    """
    if k < 0:
        raise ConfigError(f'negative count must be >= 0, got {k}', key_path='num_negatives')
    gazes = bank_gazes(k)
    if weights is None:
        gazes = gazes[interpolable(gazes, anchor_set, interpolation)]
        weights = weight_matrix(gazes, anchor_set, interpolation) if len(gazes) else np.zeros((0, anchor_set.n))
    features, cache = encode_prompts(params, weights)
    return GlobalNegativeBank(gazes, features, cache)


def bank_backward(d_features, bank: GlobalNegativeBank, params: ParameterSet):
    if bank.k:
        encode_prompts_backward(d_features, bank.cache, params)
