#!/usr/bin/env python3
"""
Learnable anchor embeddings on a yaw/pitch grid and the interpolation schemes
that turn a gaze direction into a gaze token.

Anchor index = pitch_index * n_yaw + yaw_index, i.e. constant-pitch rows.
The yaw axis carries both -180 and +180 so a 30 degree grid has 13 x 7 = 91
anchors; the duplicate meridian and the coincident pole anchors are kept as
separate learnable embeddings.
"""
import json
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from constants import DEGENERATE_ANGLE, SINGULAR_SUM, GLOBAL_NORMALIZER_FLOOR, EMBEDDING_INIT_STD
from errors import ConfigError, ShapeError, InvariantError, DegenerateError, SingularConfigurationError
from geometry import (YawPitch, yawpitch_to_vec, vec_to_yawpitch, check_unit, arc, normalize,
                      normalize_rows, slerp_coefficients, check_not_antipodal)
from interfaces import InterpolatorInterface


@dataclass(frozen=True)
class Anchor:
    index: int
    yp: YawPitch
    g: np.ndarray
    embedding: np.ndarray


@dataclass
class AnchorSet:
    gazes: np.ndarray
    embeddings: np.ndarray
    yaw_values: Optional[np.ndarray] = None
    pitch_values: Optional[np.ndarray] = None
    yaw_step: Optional[float] = None
    pitch_step: Optional[float] = None
    init_seed: Optional[int] = None

    @classmethod
    def from_gazes(cls, gazes, embeddings):
        """
        Free-form anchor set (no grid). Only the global-linear scheme and geo_loss apply.
        """
        gazes = np.asarray(gazes, dtype=np.float64)
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if gazes.ndim != 2 or gazes.shape[1] != 3 or embeddings.ndim != 2 or len(gazes) != len(embeddings):
            raise ShapeError(f'gazes {gazes.shape} and embeddings {embeddings.shape} do not pair up')
        for g in gazes:
            check_unit(g, 'anchor gaze')
        return cls(gazes=gazes, embeddings=embeddings)

    @property
    def n(self) -> int:
        return len(self.gazes)

    @property
    def token_dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def is_grid(self) -> bool:
        return self.yaw_values is not None

    def grid_index(self, yaw_index, pitch_index) -> int:
        return pitch_index * len(self.yaw_values) + yaw_index

    def anchor(self, index) -> Anchor:
        if self.is_grid:
            pitch_index, yaw_index = divmod(index, len(self.yaw_values))
            yp = YawPitch(float(self.yaw_values[yaw_index]), float(self.pitch_values[pitch_index]))
        else:
            yp = vec_to_yawpitch(self.gazes[index])
        return Anchor(index, yp, self.gazes[index], self.embeddings[index])

    def with_embeddings(self, embeddings):
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.shape != self.embeddings.shape:
            raise ShapeError(f'embedding matrix {embeddings.shape} does not match {self.embeddings.shape}')
        return replace(self, embeddings=embeddings)

    def to_dict(self) -> dict:
        d = {
            'yaw_step': self.yaw_step,
            'pitch_step': self.pitch_step,
            'token_dim': self.token_dim,
            'init_seed': self.init_seed,
            'n': self.n,
        }
        if not self.is_grid:
            d['gazes'] = self.gazes.tolist()
        d['embeddings'] = self.embeddings.tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict):
        try:
            embeddings = np.array(d['embeddings'], dtype=np.float64)
            if d.get('yaw_step') is None:
                return cls.from_gazes(d['gazes'], embeddings)
            grid = build_anchor_grid(d['yaw_step'], d['pitch_step'], int(d['token_dim']), d.get('init_seed') or 0)
        except KeyError as e:
            raise ConfigError('missing key in anchor set document', key_path=e.args[0]) from e
        return grid.with_embeddings(embeddings)

    @classmethod
    def from_json(cls, text: str):
        try:
            d = json.loads(text)
        except json.decoder.JSONDecodeError as e:
            raise ConfigError(f'anchor set is not valid JSON: {e}') from e
        return cls.from_dict(d)


def _grid_values(span, step, name):
    if step <= 0:
        raise ConfigError(f'step must be positive, got {step}', key_path=name)
    count = span / step
    if abs(count - round(count)) > 1e-9:
        raise ConfigError(f'step {step} does not divide the {span} degree range', key_path=name)
    return np.linspace(-span / 2, span / 2, int(round(count)) + 1)


def build_anchor_grid(yaw_step, pitch_step, token_dim: int, init_seed: int) -> AnchorSet:
    yaw_values = _grid_values(360.0, yaw_step, 'yaw_step')
    pitch_values = _grid_values(180.0, pitch_step, 'pitch_step')
    gazes = np.array([yawpitch_to_vec(YawPitch(float(y), float(p)))
                      for p in pitch_values for y in yaw_values])
    rng = np.random.default_rng(init_seed)
    embeddings = rng.normal(0.0, EMBEDDING_INIT_STD, size=(len(gazes), token_dim))
    return AnchorSet(gazes=gazes, embeddings=embeddings, yaw_values=yaw_values, pitch_values=pitch_values,
                     yaw_step=yaw_step, pitch_step=pitch_step, init_seed=init_seed)


def _resolve_target(target) -> Tuple[np.ndarray, YawPitch]:
    if isinstance(target, YawPitch):
        return yawpitch_to_vec(target), target
    g = check_unit(target)
    return g, vec_to_yawpitch(g)


def _bracket(values, x) -> Tuple[int, float]:
    # lower-edge convention; the range maximum belongs to the last cell
    i = int(np.searchsorted(values, x, side='right')) - 1
    i = min(max(i, 0), len(values) - 2)
    lo, hi = values[i], values[i + 1]
    return i, float((x - lo) / (hi - lo))


def _cell(yp: YawPitch, anchor_set: AnchorSet):
    if not anchor_set.is_grid:
        raise ConfigError('cell lookup needs a grid anchor set')
    yp.check()
    yi, u = _bracket(anchor_set.yaw_values, yp.yaw)
    pi, v = _bracket(anchor_set.pitch_values, yp.pitch)
    corners = (anchor_set.grid_index(yi, pi), anchor_set.grid_index(yi + 1, pi),
               anchor_set.grid_index(yi, pi + 1), anchor_set.grid_index(yi + 1, pi + 1))
    return corners, u, v


def locate_cell(yp: YawPitch, anchor_set: AnchorSet) -> Tuple[int, int, int, int]:
    corners, _, _ = _cell(yp, anchor_set)
    return corners


@dataclass(frozen=True)
class InterpolationWeights:
    indices: np.ndarray
    weights: np.ndarray
    scheme: str

    def __post_init__(self):
        if len(self.indices) != len(self.weights):
            raise ShapeError(f'{len(self.indices)} indices but {len(self.weights)} weights')
        if not np.all(np.isfinite(self.weights)):
            raise InvariantError(f'non-finite {self.scheme} weights {self.weights}')

    def entries(self):
        return list(zip(self.indices.tolist(), self.weights.tolist()))

    def dense(self, n) -> np.ndarray:
        row = np.zeros(n)
        np.add.at(row, self.indices, self.weights)
        return row


def _row_weights(g1, g2, u):
    """Slerp along one grid row: returns (w1, w2, point at fraction u)."""
    if arc(g1, g2) < DEGENERATE_ANGLE:
        # both corners sit on a pole; the yaw fraction keeps weights continuous across cells
        return 1.0 - u, u, normalize((1.0 - u) * g1 + u * g2)
    theta = arc(g1, g2)
    check_not_antipodal(theta)
    w1, w2 = slerp_coefficients(theta, u)
    return w1, w2, w1 * g1 + w2 * g2


def spherical_bilinear_weights(target, anchor_set: AnchorSet) -> InterpolationWeights:
    """
    Slerp both constant-pitch rows at the yaw fraction u, then slerp between the two
    row points at the pitch fraction v of the cell, which keeps the weights continuous
    across constant-pitch boundaries.
    """
    _, yp = _resolve_target(target)
    (i1, i2, i3, i4), u, v = _cell(yp, anchor_set)
    gz = anchor_set.gazes
    wa1, wa2, a = _row_weights(gz[i1], gz[i2], u)
    wb3, wb4, b = _row_weights(gz[i3], gz[i4], u)
    wia, wib = slerp_coefficients(arc(a, b), v)
    return InterpolationWeights(np.array([i1, i2, i3, i4]),
                                np.array([wia * wa1, wia * wa2, wib * wb3, wib * wb4]),
                                'spherical')


def planar_bilinear_weights(target, anchor_set: AnchorSet) -> InterpolationWeights:
    _, yp = _resolve_target(target)
    corners, u, v = _cell(yp, anchor_set)
    weights = np.array([(1 - u) * (1 - v), u * (1 - v), (1 - u) * v, u * v])
    return InterpolationWeights(np.array(corners), weights, 'planar')


def global_linear_weights(target, anchor_set: AnchorSet) -> InterpolationWeights:
    g, _ = _resolve_target(target)
    cosines = np.clip(anchor_set.gazes @ g, -1.0, 1.0)
    total = cosines.sum()
    if abs(total) <= SINGULAR_SUM:
        raise SingularConfigurationError(f'global interpolation normalizer {total:.3g} is singular')
    return InterpolationWeights(np.arange(anchor_set.n), cosines / total, 'global')


def interpolate_embedding(w: InterpolationWeights, anchor_set: AnchorSet) -> np.ndarray:
    if np.any(w.indices < 0) or np.any(w.indices >= anchor_set.n):
        raise ShapeError(f'anchor index out of range for a set of {anchor_set.n}')
    return w.weights @ anchor_set.embeddings[w.indices]


class SphericalBilinear(InterpolatorInterface):
    scheme = 'spherical'

    def weights(self, target, anchor_set):
        return spherical_bilinear_weights(target, anchor_set)

    def expected_entries(self, anchor_set):
        return 4


class PlanarBilinear(InterpolatorInterface):
    scheme = 'planar'

    def weights(self, target, anchor_set):
        return planar_bilinear_weights(target, anchor_set)

    def expected_entries(self, anchor_set):
        return 4


class GlobalLinear(InterpolatorInterface):
    scheme = 'global'

    def weights(self, target, anchor_set):
        return global_linear_weights(target, anchor_set)

    def expected_entries(self, anchor_set):
        return anchor_set.n


INTERPOLATORS = {
    'spherical': SphericalBilinear(),
    'planar': PlanarBilinear(),
    'global': GlobalLinear(),
}


def get_interpolator(scheme) -> InterpolatorInterface:
    if scheme not in INTERPOLATORS:
        raise ConfigError(f'unknown interpolation scheme {scheme!r}, expected one of {sorted(INTERPOLATORS)}',
                          key_path='interpolation')
    return INTERPOLATORS[scheme]


def weight_matrix(targets, anchor_set: AnchorSet, scheme='spherical') -> np.ndarray:
    """
    Dense (n_targets, N) interpolation matrix, so gaze tokens are W @ embeddings.
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    if scheme == 'global':
        cosines = np.clip(targets @ anchor_set.gazes.T, -1.0, 1.0)
        totals = cosines.sum(axis=1, keepdims=True)
        if len(totals) and np.min(np.abs(totals)) <= SINGULAR_SUM:
            raise SingularConfigurationError('global interpolation normalizer is singular for some target')
        return cosines / totals
    interpolator = get_interpolator(scheme)
    m = np.zeros((len(targets), anchor_set.n))
    for row, g in zip(m, targets):
        w = interpolator.weights(g / np.linalg.norm(g), anchor_set)
        assert len(w.indices) == interpolator.expected_entries(anchor_set)
        row += w.dense(anchor_set.n)
    return m


def interpolable(targets, anchor_set: AnchorSet, scheme='spherical', floor=GLOBAL_NORMALIZER_FLOOR) -> np.ndarray:
    """
    Row mask of the targets whose interpolation is well conditioned. Only global-linear
    has a band to leave out: rows whose |sum of anchor cosines| is at most `floor`.
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    if scheme != 'global':
        return np.ones(len(targets), dtype=bool)
    totals = np.clip(targets @ anchor_set.gazes.T, -1.0, 1.0).sum(axis=1)
    return np.abs(totals) > floor


def cosine_matrix(m, name='vector'):
    unit, norms = normalize_rows(m, name)
    return unit @ unit.T, unit, norms


def geo_loss(anchor_set: AnchorSet):
    """
    Mean absolute mismatch between anchor-embedding cosines and anchor-gaze cosines
    over all ordered pairs, with its subgradient (0 at the kink).

    :return: (loss, gradient with the shape of anchor_set.embeddings)
    """
    n = anchor_set.n
    if n < 2:
        raise InvariantError(f'geo_loss needs at least two anchors, got {n}')
    try:
        c, unit, norms = cosine_matrix(anchor_set.embeddings, 'anchor embedding')
    except DegenerateError as e:
        raise DegenerateError(f'degenerate anchor embedding: {e}') from e
    target, _, _ = cosine_matrix(anchor_set.gazes, 'anchor gaze')
    r = c - target
    np.fill_diagonal(r, 0.0)
    loss = float(np.abs(r).sum() / (n * n))
    s = np.sign(r) / (n * n)
    d_unit = (s + s.T) @ unit
    grad = (d_unit - unit * np.sum(d_unit * unit, axis=1, keepdims=True)) / norms
    return loss, grad
