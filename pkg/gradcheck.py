#!/usr/bin/env python3
"""
Finite-difference verification of every hand-written backward pass.

Each check draws a small random configuration, computes the analytic gradient,
and compares it against central differences on a sample of entries:

    rel = |a - n| / max(|a|, |n|, 1e-10)

Targets:
    loss     geo / both contrastive directions under every weighting scheme / gaze / weighted total
    encoder  image encoder, regressor and prompt path through the contrastive and gaze losses
    all      both of the above plus the complete objective including the geometric term
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np
import tqdm

from anchors import AnchorSet, cosine_matrix, geo_loss
from constants import FD_STEP, GRADCHECK_TOLERANCE, KINK_MARGIN
from encoders import init_parameters
from errors import SingularConfigurationError, GradientCheckFailure, ConfigError
from geometry import fibonacci_sphere, normalize_rows, random_unit_vectors, uniform_patch
from harness import TrainConfig, TrainingRun, train_step
from losses import (SCHEMES, Lambdas, GlobalNegativeBank, neg_weights, mcr_t2i_loss, mcr_i2t_loss, gaze_loss_batch,
                    total_objective)

TARGETS = ('loss', 'encoder', 'all')
MAX_REDRAWS = 50


def relative_error(analytic, numeric) -> float:
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-10)
    return float(np.linalg.norm(analytic - numeric) / scale)


def sample_indices(rng, shape, max_entries):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(size, max_entries), replace=False)
    return [np.unravel_index(i, shape) for i in np.sort(flat)]


def numeric_gradient(fn: Callable[[], float], array: np.ndarray, indices, h=FD_STEP) -> np.ndarray:
    """Central differences of fn() w.r.t. array[idx] for each idx; array is perturbed in place."""
    out = []
    for idx in indices:
        original = array[idx]
        array[idx] = original + h
        plus = fn()
        array[idx] = original - h
        minus = fn()
        array[idx] = original
        out.append((plus - minus) / (2.0 * h))
    return np.array(out)


def compare(fn, tensors: Dict[str, np.ndarray], analytic: Dict[str, np.ndarray], rng, max_entries) -> Dict[str, float]:
    errors = {}
    for name, array in tensors.items():
        indices = sample_indices(rng, array.shape, max_entries)
        numeric = numeric_gradient(fn, array, indices)
        errors[name] = relative_error([analytic[name][idx] for idx in indices], numeric)
    return errors


def geo_margin(anchor_set: AnchorSet) -> float:
    """Smallest off-diagonal |embedding cosine - gaze cosine|."""
    c, _, _ = cosine_matrix(anchor_set.embeddings)
    target, _, _ = cosine_matrix(anchor_set.gazes)
    r = np.abs(c - target)
    np.fill_diagonal(r, np.inf)
    return float(r.min())


def check_geo(rng, max_entries=8):
    for _ in range(MAX_REDRAWS):
        anchor_set = AnchorSet.from_gazes(random_unit_vectors(rng, 6), rng.standard_normal((6, 4)))
        if geo_margin(anchor_set) > KINK_MARGIN:
            break
    embeddings = anchor_set.embeddings
    _, grad = geo_loss(anchor_set)
    return compare(lambda: geo_loss(anchor_set)[0], {'anchors': embeddings}, {'anchors': grad}, rng, max_entries)


def _contrastive_inputs(rng, b=4, d=5, k=3):
    return {
        'f_t': rng.standard_normal((b, d)),
        'f_g': rng.standard_normal((b, d)),
        'bank': rng.standard_normal((k, d)),
        'labels': uniform_patch(rng, b),
        'bank_gazes': fibonacci_sphere(k),
        'tau': float(rng.uniform(0.5, 2.0)),
    }


def denominator_margin(queries, candidates, weights, tau) -> float:
    """Smallest (e_ii + sum_j w_ij e_ij) / e_ii over the batch; <= 0 means singular."""
    q, _ = normalize_rows(queries)
    c, _ = normalize_rows(candidates)
    e = np.exp((q @ c.T - 1.0) / tau)
    idx = np.arange(len(q))
    return float(np.min((e[idx, idx] + np.sum(weights * e, axis=1)) / e[idx, idx]))


def _redraw_well_posed(rng, scheme, with_bank):
    # literal-cos denominators can get arbitrarily close to 0, where differences lose accuracy
    for _ in range(MAX_REDRAWS):
        p = _contrastive_inputs(rng)
        weights = neg_weights(p['labels'], p['labels'], scheme)
        np.fill_diagonal(weights, 0.0)
        queries, candidates = (p['f_g'], p['f_t']) if with_bank else (p['f_t'], p['f_g'])
        if with_bank:
            candidates = np.vstack([candidates, p['bank']])
            weights = np.hstack([weights, neg_weights(p['labels'], p['bank_gazes'], scheme)])
        if denominator_margin(queries, candidates, weights, p['tau']) > 0.1:
            return p
    raise SingularConfigurationError(f'no well-posed {scheme} configuration found')


def check_mcr_t2i(rng, scheme, max_entries=8):
    def loss_fn(p):
        return mcr_t2i_loss(p['f_t'], p['f_g'], p['labels'], scheme, p['tau'])
    p = _redraw_well_posed(rng, scheme, with_bank=False)
    _, grads = loss_fn(p)
    return compare(lambda: loss_fn(p)[0], {'f_t': p['f_t'], 'f_g': p['f_g']}, grads, rng, max_entries)


def check_mcr_i2t(rng, scheme, max_entries=8):
    def loss_fn(p):
        bank = GlobalNegativeBank(p['bank_gazes'], p['bank'])
        return mcr_i2t_loss(p['f_g'], p['f_t'], p['labels'], bank, scheme, p['tau'])
    p = _redraw_well_posed(rng, scheme, with_bank=True)
    _, grads = loss_fn(p)
    return compare(lambda: loss_fn(p)[0], {'f_g': p['f_g'], 'f_t': p['f_t'], 'bank': p['bank']}, grads, rng,
                   max_entries)


def check_gaze(rng, max_entries=8):
    raw = rng.standard_normal((4, 3))
    labels = random_unit_vectors(rng, 4)
    _, d_raw = gaze_loss_batch(raw, labels)
    return compare(lambda: gaze_loss_batch(raw, labels)[0], {'raw': raw}, {'raw': d_raw}, rng, max_entries)


def check_total(rng, max_entries=8):
    lambdas = Lambdas(*rng.uniform(0.1, 2.0, size=3))
    p = _contrastive_inputs(rng)
    raw = rng.standard_normal((4, 3))
    for _ in range(MAX_REDRAWS):
        anchor_set = AnchorSet.from_gazes(random_unit_vectors(rng, 5), rng.standard_normal((5, 4)))
        if geo_margin(anchor_set) > KINK_MARGIN:
            break
    embeddings = anchor_set.embeddings

    def objective():
        bank = GlobalNegativeBank(p['bank_gazes'], p['bank'])
        geo_value, d_anchors = geo_loss(anchor_set)
        gaze_value, d_raw = gaze_loss_batch(raw, p['labels'])
        return total_objective((geo_value, {'anchors': d_anchors}),
                               mcr_t2i_loss(p['f_t'], p['f_g'], p['labels'], 'clamped-cos', p['tau']),
                               mcr_i2t_loss(p['f_g'], p['f_t'], p['labels'], bank, 'clamped-cos', p['tau']),
                               (gaze_value, {'raw': d_raw}), lambdas)

    _, grads = objective()
    tensors = {'f_t': p['f_t'], 'f_g': p['f_g'], 'bank': p['bank'], 'raw': raw, 'anchors': embeddings}
    return compare(lambda: objective()[0].total, tensors, grads, rng, max_entries)


def tiny_config(rng, lambdas: Lambdas):
    """A small random TrainConfig on a 90 x 45 degree anchor grid."""
    return TrainConfig(batch_size=4, epochs=2, warmup_epochs=1, num_negatives=int(rng.integers(0, 4)),
                       context_length=int(rng.integers(2, 4)), lambdas=lambdas,
                       scheme=str(rng.choice(['clamped-cos', 'distance', 'uniform'])),
                       temperature=float(rng.uniform(0.5, 2.0)),
                       interpolation=str(rng.choice(['spherical', 'planar', 'global'])),
                       yaw_step=90.0, pitch_step=45.0, token_dim=3, feature_dim=5, input_dim=4, hidden_dim=6,
                       n_source=4, n_target=4, init_seed=int(rng.integers(1 << 30)),
                       proxy_seed=int(rng.integers(1 << 30)))


def check_stack(rng, lambdas: Lambdas, max_entries=4):
    """Full forward/backward of a training step w.r.t. every trainable tensor."""
    for _ in range(MAX_REDRAWS):
        config = tiny_config(rng, lambdas)
        params = init_parameters(config)
        # unit-scale anchors keep finite differences clear of the geometric kinks
        params.values['anchors'] = rng.standard_normal(params['anchors'].shape)
        labels = uniform_patch(rng, config.batch_size)
        inputs = rng.standard_normal((config.batch_size, config.input_dim))
        run = TrainingRun.prepare(config, labels)
        # the step below needs a weight row for every label
        if run.excluded_samples:
            continue
        if lambdas.geo == 0 or geo_margin(run.grid.with_embeddings(params['anchors'])) > KINK_MARGIN:
            break

    def objective():
        return train_step(params, run, inputs, labels, run.sample_weights).total

    objective()
    analytic = {k: v.copy() for k, v in params.grads.items()}
    tensors = {k: params.values[k] for k in params.trainable_names()}
    return compare(objective, tensors, analytic, rng, max_entries)


def checks_for(target) -> Dict[str, Callable]:
    if target not in TARGETS:
        raise ConfigError(f'unknown gradient-check target {target!r}, expected one of {TARGETS}', key_path='target')
    checks = {}
    if target in ('loss', 'all'):
        checks['geo'] = check_geo
        for scheme in SCHEMES:
            checks[f'mcr_t2i[{scheme}]'] = lambda rng, s=scheme: check_mcr_t2i(rng, s)
            checks[f'mcr_i2t[{scheme}]'] = lambda rng, s=scheme: check_mcr_i2t(rng, s)
        checks['gaze'] = check_gaze
        checks['total'] = check_total
    if target in ('encoder', 'all'):
        checks['encoder'] = lambda rng: check_stack(rng, Lambdas(0.0, 1.0, 1.0))
    if target == 'all':
        checks['objective'] = lambda rng: check_stack(rng, Lambdas(1.0, 1.0, 1.0))
    return checks


@dataclass
class GradCheckReport:
    target: str
    configs: int
    worst: Dict[str, float] = field(default_factory=dict)
    worst_tensor: Dict[str, str] = field(default_factory=dict)

    def record(self, check, errors: Dict[str, float]):
        for tensor, err in errors.items():
            if err >= self.worst.get(check, -1.0):
                self.worst[check] = err
                self.worst_tensor[check] = tensor

    @property
    def worst_overall(self) -> float:
        return max(self.worst.values()) if self.worst else 0.0

    def failures(self, tol=GRADCHECK_TOLERANCE) -> List[str]:
        return [k for k, v in self.worst.items() if not v < tol]

    def lines(self) -> List[str]:
        return [f'{k}: worst relative error {v:.3e} ({self.worst_tensor[k]})' for k, v in self.worst.items()]

    def raise_on_failure(self, tol=GRADCHECK_TOLERANCE):
        failed = self.failures(tol)
        if failed:
            raise GradientCheckFailure(f'{len(failed)} gradient checks above {tol:g}: {", ".join(failed)}')


def run_gradcheck(target='all', configs=100, seed=0, progress=True) -> GradCheckReport:
    checks = checks_for(target)
    report = GradCheckReport(target, configs)
    root = np.random.SeedSequence(seed)
    for (name, check), child in zip(checks.items(), root.spawn(len(checks))):
        rng = np.random.default_rng(child)
        for _ in tqdm.tqdm(range(configs), desc=name, disable=not progress):
            report.record(name, check(rng))
    return report
