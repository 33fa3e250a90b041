#!/usr/bin/env python3
"""
Synthetic cross-domain benchmark and the training / evaluation harness.

Inputs are x = tanh(A g + B n) + noise: the gaze -> input mechanism (A, B) is
drawn once per run seed and shared by every domain, while the nuisance n
changes its statistics from domain to domain.

Improvements
- per-sample forward/backward fan-out inside a step (evaluation already fans out)
"""
import json
import math
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, asdict, astuple, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import tqdm
from scipy import stats

from anchors import AnchorSet, build_anchor_grid, geo_loss, weight_matrix, interpolable, INTERPOLATORS
from encoders import ParameterSet, ImageEncoder, Regressor, init_parameters, encode_prompts, encode_prompts_backward
from errors import ConfigError, RangeError, TrainingDivergedError, UndefinedRankError
from geometry import angular_errors, fibonacci_sphere, normalize_rows, uniform_patch
from losses import (SCHEMES, Lambdas, LossBreakdown, GlobalNegativeBank, mcr_t2i_loss,
                    mcr_i2t_loss, gaze_loss_batch, total_objective, bank_gazes, bank_backward)

NUISANCE_DIM = 8
NUISANCE_GAIN = 0.5
EVAL_CHUNK = 256


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 30
    lr: float = 5e-2
    weight_decay: float = 1e-5
    momentum: float = 0.9
    nesterov: bool = True
    warmup_epochs: int = 3
    num_negatives: int = 256
    context_length: int = 10
    lambdas: Lambdas = Lambdas()
    scheme: str = 'distance'
    temperature: float = 1.0
    interpolation: str = 'spherical'
    yaw_step: float = 30.0
    pitch_step: float = 30.0
    token_dim: int = 16
    feature_dim: int = 64
    input_dim: int = 32
    hidden_dim: int = 64
    n_source: int = 4096
    n_target: int = 1024
    source_domain: str = 'source'
    target_domain: str = 'target'
    init_seed: int = 0
    proxy_seed: int = 1
    shuffle_seed: int = 2
    data_seed: int = 3
    workers: int = 1

    POSITIVE = ('batch_size', 'epochs', 'lr', 'context_length', 'temperature', 'yaw_step', 'pitch_step',
                'token_dim', 'feature_dim', 'input_dim', 'hidden_dim', 'n_source', 'n_target', 'workers')
    NON_NEGATIVE = ('weight_decay', 'momentum', 'warmup_epochs', 'num_negatives')

    def __post_init__(self):
        for name in self.POSITIVE:
            if getattr(self, name) <= 0:
                raise ConfigError(f'must be positive, got {getattr(self, name)}', key_path=name)
        for name in self.NON_NEGATIVE:
            if getattr(self, name) < 0:
                raise ConfigError(f'must be non-negative, got {getattr(self, name)}', key_path=name)
        if self.momentum >= 1:
            raise ConfigError(f'must be below 1, got {self.momentum}', key_path='momentum')
        if self.warmup_epochs >= self.epochs:
            raise ConfigError(f'warm-up of {self.warmup_epochs} epochs leaves no annealing phase',
                              key_path='warmup_epochs')
        if self.scheme not in SCHEMES:
            raise ConfigError(f'unknown weighting scheme {self.scheme!r}', key_path='scheme')
        if self.interpolation not in INTERPOLATORS:
            raise ConfigError(f'unknown interpolation {self.interpolation!r}', key_path='interpolation')
        for name in ('source_domain', 'target_domain'):
            if getattr(self, name) not in DOMAIN_PRESETS:
                raise ConfigError(f'unknown domain {getattr(self, name)!r}', key_path=name)

    @property
    def seeds(self) -> Dict[str, int]:
        return {k: getattr(self, k) for k in ('init_seed', 'proxy_seed', 'shuffle_seed', 'data_seed')}

    def with_seed(self, seed: int):
        return replace(self, init_seed=seed, proxy_seed=seed, shuffle_seed=seed, data_seed=seed)

    def replace(self, **overrides):
        return self.from_dict({**self.to_dict(), **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d['lambdas'] = asdict(self.lambdas)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict):
        if not isinstance(d, dict):
            raise ConfigError('training config must be a JSON object')
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in known:
                raise ConfigError('unknown key', key_path=key)
            if key == 'lambdas':
                kwargs[key] = _parse_lambdas(value)
            else:
                kwargs[key] = _coerce(key, value, type(getattr(cls, key)))
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str):
        try:
            d = json.loads(text)
        except json.decoder.JSONDecodeError as e:
            raise ConfigError(f'not valid JSON: {e}') from e
        return cls.from_dict(d)


def _coerce(key, value, kind):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f'expected true/false, got {value!r}', key_path=key)
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f'expected an integer, got {value!r}', key_path=key)
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f'expected a number, got {value!r}', key_path=key)
        return float(value)
    if not isinstance(value, kind):
        raise ConfigError(f'expected {kind.__name__}, got {value!r}', key_path=key)
    return value


def _parse_lambdas(value):
    if isinstance(value, Lambdas):
        return value
    if not isinstance(value, dict):
        raise ConfigError(f'expected an object with geo/mcr/gaze, got {value!r}', key_path='lambdas')
    for key in value:
        if key not in ('geo', 'mcr', 'gaze'):
            raise ConfigError('unknown key', key_path=f'lambdas.{key}')
    return Lambdas(**{k: _coerce(f'lambdas.{k}', v, float) for k, v in value.items()})


@dataclass(frozen=True)
class SyntheticDomainSpec:
    domain_id: str
    mean: Tuple[float, ...] = (0.0,) * NUISANCE_DIM
    scale: float = 1.0
    noise: float = 0.05

    def __post_init__(self):
        if len(self.mean) != NUISANCE_DIM:
            raise ConfigError(f'nuisance mean needs {NUISANCE_DIM} entries, got {len(self.mean)}', key_path='mean')
        # scale 0 leaves the gaze-only mechanism
        if self.scale < 0 or self.noise < 0:
            raise ConfigError(f'domain {self.domain_id}: scale and noise must be non-negative')

    @property
    def stream(self) -> int:
        return zlib.crc32(self.domain_id.encode())


DOMAIN_PRESETS = {
    'source': SyntheticDomainSpec('source', (0.0,) * NUISANCE_DIM, 1.0, 0.05),
    'source-alt': SyntheticDomainSpec('source-alt', (-0.4,) * NUISANCE_DIM, 0.8, 0.05),
    'target': SyntheticDomainSpec('target', (0.8,) * NUISANCE_DIM, 1.5, 0.05),
    'target-alt': SyntheticDomainSpec('target-alt', (0.6, -0.6) * (NUISANCE_DIM // 2), 1.2, 0.1),
}


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    seed: int
    spec: SyntheticDomainSpec

    def __len__(self):
        return len(self.labels)

    def subset(self, mask):
        return Dataset(self.inputs[mask], self.labels[mask], self.seed, self.spec)


def mixing_matrices(run_seed, input_dim=32):
    rng = np.random.default_rng(np.random.SeedSequence([run_seed, 0]))
    return rng.normal(0.0, 1.0, size=(input_dim, 3)), rng.normal(0.0, NUISANCE_GAIN, size=(input_dim, NUISANCE_DIM))


def generate_dataset(n, spec: SyntheticDomainSpec, run_seed: int, input_dim=32) -> Dataset:
    if n < 1:
        raise RangeError(f'dataset needs at least one sample, got {n}')
    gaze_mix, nuisance_mix = mixing_matrices(run_seed, input_dim)
    rng = np.random.default_rng(np.random.SeedSequence([run_seed, spec.stream]))
    labels = uniform_patch(rng, n)
    nuisance = np.asarray(spec.mean) + spec.scale * rng.standard_normal((n, NUISANCE_DIM))
    inputs = np.tanh(labels @ gaze_mix.T + nuisance @ nuisance_mix.T) + spec.noise * rng.standard_normal((n, input_dim))
    return Dataset(inputs, labels, run_seed, spec)


def domain_dataset(config: TrainConfig, domain: str, n=None) -> Dataset:
    if domain not in DOMAIN_PRESETS:
        raise ConfigError(f'unknown domain {domain!r}, expected one of {sorted(DOMAIN_PRESETS)}', key_path='domain')
    if n is None:
        n = config.n_source if domain.startswith('source') else config.n_target
    return generate_dataset(n, DOMAIN_PRESETS[domain], config.data_seed, config.input_dim)


def lr_schedule(step, total_steps, config: TrainConfig) -> float:
    """
    Linear warm-up from 0 over warmup_epochs worth of steps, then cosine annealing to 0.
    """
    if not 0 <= step < total_steps:
        raise RangeError(f'step {step} outside [0, {total_steps})')
    warmup = int(round(config.warmup_epochs * total_steps / config.epochs))
    if step < warmup:
        return config.lr * step / warmup
    progress = (step - warmup) / max(total_steps - warmup, 1)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class NesterovSGD:
    """
    buf = momentum * buf + g;  p -= lr * (g + momentum * buf);  p -= lr * weight_decay * p.
    Frozen tensors are never touched.
    """

    def __init__(self, momentum=0.9, weight_decay=0.0, nesterov=True):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.buffers = {}

    def step(self, params: ParameterSet, lr):
        for name in params.trainable_names():
            g = params.grads[name]
            buf = self.buffers.get(name)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            update = g + self.momentum * buf if self.nesterov else buf
            p = params.values[name]
            p -= lr * self.weight_decay * p
            p -= lr * update


@dataclass
class EpochMetrics:
    epoch: int
    geo: float
    mcr_t2i: float
    mcr_i2t: float
    gaze: float
    total: float
    lr: float
    src_err_deg: float
    tgt_err_deg: float
    wall_clock: float = field(default=0.0, compare=False)


class MetricsLog:
    COLUMNS = ['epoch', 'geo', 'mcr_t2i', 'mcr_i2t', 'gaze', 'total', 'lr', 'src_err_deg', 'tgt_err_deg']

    def __init__(self, excluded_samples=0, excluded_negatives=0):
        self.rows: List[EpochMetrics] = []
        self.excluded_samples = excluded_samples
        self.excluded_negatives = excluded_negatives

    def append(self, row: EpochMetrics):
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise RangeError(f'epoch {row.epoch} logged after epoch {self.rows[-1].epoch}')
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        return isinstance(other, MetricsLog) and self.rows == other.rows

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows], columns=self.COLUMNS + ['wall_clock'])

    def to_csv(self, path=None):
        # no wall-clock column: reruns must write identical files
        return self.to_frame()[self.COLUMNS].to_csv(path, index=False)


@dataclass
class TrainingRun:
    """Everything fixed for the duration of a run: grid, interpolation rows, bank lattice."""
    config: TrainConfig
    grid: AnchorSet
    sample_mask: np.ndarray
    sample_weights: np.ndarray
    bank_gazes: np.ndarray
    bank_weights: np.ndarray
    excluded_negatives: int = 0

    @property
    def excluded_samples(self) -> int:
        return int(np.count_nonzero(~self.sample_mask))

    @classmethod
    def prepare(cls, config: TrainConfig, labels):
        """
        sample_weights has one row per kept label (sample_mask); global-linear leaves out
        labels and lattice points whose normalizer is near zero.
        """
        grid = build_anchor_grid(config.yaw_step, config.pitch_step, config.token_dim, config.init_seed)
        labels = np.asarray(labels, dtype=np.float64).reshape(-1, 3)
        keep = interpolable(labels, grid, config.interpolation)
        sample_weights = weight_matrix(labels[keep], grid, config.interpolation)
        gazes = bank_gazes(config.num_negatives)
        usable = interpolable(gazes, grid, config.interpolation)
        gazes = gazes[usable]
        if len(gazes):
            bank_weights = weight_matrix(gazes, grid, config.interpolation)
        else:
            bank_weights = np.zeros((0, grid.n))
        return cls(config, grid, keep, sample_weights, gazes, bank_weights, int(np.count_nonzero(~usable)))


def train_step(params: ParameterSet, run: TrainingRun, inputs, labels, sample_weights) -> LossBreakdown:
    """
    One forward/backward pass; leaves the merged gradients in params.grads.
    """
    config = run.config
    params.zero_grad()
    f_g, enc_cache = ImageEncoder.forward(inputs, params)
    raw, f_in = Regressor.forward_raw(f_g, params)
    f_t, text_cache = encode_prompts(params, sample_weights)
    bank = GlobalNegativeBank(run.bank_gazes, *encode_prompts(params, run.bank_weights))

    geo_value, d_anchors = geo_loss(run.grid.with_embeddings(params['anchors']))
    geo = (geo_value, {'anchors': d_anchors})
    t2i = mcr_t2i_loss(f_t, f_g, labels, config.scheme, config.temperature)
    i2t = mcr_i2t_loss(f_g, f_t, labels, bank, config.scheme, config.temperature)
    gaze_value, d_raw = gaze_loss_batch(raw, labels)
    breakdown, grads = total_objective(geo, t2i, i2t, (gaze_value, {'raw': d_raw}), config.lambdas)
    if not breakdown.is_finite():
        return breakdown

    params.accumulate('anchors', grads['anchors'])
    d_features = grads['f_g'] + Regressor.backward_raw(grads['raw'], f_in, params)
    ImageEncoder.backward(d_features, enc_cache, params)
    encode_prompts_backward(grads['f_t'], text_cache, params)
    bank_backward(grads['bank'], bank, params)
    return breakdown


def train(config: TrainConfig, source: Dataset, target: Optional[Dataset] = None,
          progress=True) -> Tuple[ParameterSet, MetricsLog]:
    params = init_parameters(config)
    print(f'Precomputing {config.interpolation} interpolation weights for {len(source)} labels')
    run = TrainingRun.prepare(config, source.labels)
    if run.excluded_samples or run.excluded_negatives:
        print(f'Leaving out {run.excluded_samples} labels and {run.excluded_negatives} negatives '
              f'in the singular band of {config.interpolation} interpolation')
    training = source.subset(run.sample_mask)
    if not len(training):
        raise RangeError('every source label falls in the singular interpolation band')
    optimizer = NesterovSGD(config.momentum, config.weight_decay, config.nesterov)
    shuffle = np.random.default_rng(config.shuffle_seed)
    n = len(training)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    log = MetricsLog(run.excluded_samples, run.excluded_negatives)
    step = 0
    for epoch in tqdm.tqdm(range(1, config.epochs + 1), desc='epochs', disable=not progress):
        started = time.perf_counter()
        order = shuffle.permutation(n)
        breakdowns = []
        lr = 0.0
        for begin in range(0, n, config.batch_size):
            idx = order[begin:begin + config.batch_size]
            lr = lr_schedule(step, total_steps, config)
            breakdown = train_step(params, run, training.inputs[idx], training.labels[idx], run.sample_weights[idx])
            if not breakdown.is_finite():
                raise TrainingDivergedError(step, breakdown)
            optimizer.step(params, lr)
            breakdowns.append(astuple(breakdown))
            step += 1
        means = np.mean(breakdowns, axis=0)
        src_err = evaluate(params, source, config.workers)
        tgt_err = evaluate(params, target, config.workers) if target is not None else float('nan')
        log.append(EpochMetrics(epoch, *map(float, means), lr, src_err, tgt_err, time.perf_counter() - started))
    assert step == total_steps
    return params, log


def _chunk_errors(params, inputs, labels):
    f, _ = ImageEncoder.forward(inputs, params)
    return angular_errors(Regressor.predict(f, params), labels)


def prediction_errors(params: ParameterSet, data: Dataset, workers=1) -> np.ndarray:
    """
    Per-sample angular errors in degrees. Chunking does not depend on the worker
    count, so any number of workers gives bit-identical results.
    """
    bounds = [(s, min(s + EVAL_CHUNK, len(data))) for s in range(0, len(data), EVAL_CHUNK)]
    jobs = [(data.inputs[a:b], data.labels[a:b]) for a, b in bounds]
    if workers <= 1:
        parts = [_chunk_errors(params, x, g) for x, g in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda job: _chunk_errors(params, *job), jobs))
    errors = np.concatenate(parts)
    assert len(errors) == len(data)
    return errors


def evaluate(params: ParameterSet, data: Dataset, workers=1) -> float:
    return float(prediction_errors(params, data, workers).mean())


def evaluate_domains(params: ParameterSet, config: TrainConfig, domains=None, workers=1) -> pd.DataFrame:
    """Mean error on each named domain plus the average over them."""
    domains = domains or [d for d in DOMAIN_PRESETS if d.startswith('target')]
    errors = [evaluate(params, domain_dataset(config, d), workers) for d in domains]
    table = pd.DataFrame({'domain': domains, 'err_deg': errors})
    return pd.concat([table, pd.DataFrame({'domain': ['avg'], 'err_deg': [float(np.mean(errors))]})],
                     ignore_index=True)


def predict_by_text_matching(params: ParameterSet, anchor_set: AnchorSet, inputs, candidates,
                             interpolation='spherical') -> np.ndarray:
    """
    Match every image feature to the candidate gaze whose prompt feature is most similar.
    """
    text_features, _ = encode_prompts(params, weight_matrix(candidates, anchor_set, interpolation))
    image_features, _ = ImageEncoder.forward(inputs, params)
    best = np.argmax(image_features @ text_features.T, axis=1)
    return np.asarray(candidates)[best]


def evaluate_text_matching(params: ParameterSet, config: TrainConfig, data: Dataset, k=1024) -> float:
    grid = build_anchor_grid(config.yaw_step, config.pitch_step, config.token_dim, config.init_seed)
    candidates = fibonacci_sphere(k)
    candidates = candidates[interpolable(candidates, grid, config.interpolation)]
    pred = predict_by_text_matching(params, grid, data.inputs, candidates, config.interpolation)
    return float(angular_errors(pred, data.labels).mean())


def spearman_from_distances(feature_distances, label_distances) -> float:
    if np.ptp(feature_distances) == 0 or np.ptp(label_distances) == 0:
        raise UndefinedRankError('constant distances have no ranking')
    rho, _ = stats.spearmanr(feature_distances, label_distances)
    return float(rho)


def rank_correlation(features, labels, n_pairs=5000, seed=0) -> float:
    """
    Spearman correlation between feature cosine distance and label angular distance
    over n_pairs random sample pairs (i != j).
    """
    if n_pairs < 100:
        raise RangeError(f'need at least 100 pairs, got {n_pairs}')
    n = len(labels)
    if n < 2:
        raise RangeError('need at least two samples')
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, n_pairs)
    j = (i + rng.integers(1, n, n_pairs)) % n
    unit, _ = normalize_rows(features, 'feature')
    feature_distances = 1.0 - np.sum(unit[i] * unit[j], axis=1)
    label_distances = np.arccos(np.clip(np.sum(labels[i] * labels[j], axis=1), -1.0, 1.0))
    return spearman_from_distances(feature_distances, label_distances)


def feature_label_correlation(params: ParameterSet, data: Dataset, n_pairs=5000, seed=0) -> float:
    features, _ = ImageEncoder.forward(data.inputs, params)
    return rank_correlation(features, data.labels, n_pairs, seed)


ABLATION_AXES = ('loss-terms', 'interpolation', 'K', 'loss-weights')


def ablation_variants(axis, base: TrainConfig, values=None):
    if axis == 'loss-terms':
        return [('Gaze', replace(base, lambdas=Lambdas(0.0, 0.0, 1.0))),
                ('MCR+Gaze', replace(base, lambdas=Lambdas(0.0, 1.0, 1.0))),
                ('Geo+MCR+Gaze', replace(base, lambdas=Lambdas(1.0, 1.0, 1.0)))]
    if axis == 'interpolation':
        return [('global-linear', replace(base, interpolation='global')),
                ('planar-bilinear', replace(base, interpolation='planar')),
                ('spherical-bilinear', replace(base, interpolation='spherical'))]
    if axis == 'K':
        values = values or (0, 64, 128, 256)
        return [(f'K={int(k)}', replace(base, num_negatives=int(k))) for k in values]
    if axis == 'loss-weights':
        values = values or (0.5, 1.0, 2.0)
        return [(f'mcr={float(w):g}', replace(base, lambdas=replace(base.lambdas, mcr=float(w)))) for w in values]
    raise ConfigError(f'unknown ablation axis {axis!r}, expected one of {ABLATION_AXES}', key_path='axis')


def run_ablation(axis, base: TrainConfig, seeds=range(5), values=None, n_pairs=2000) -> pd.DataFrame:
    """
    Train every variant on every seed; one row per variant with mean/std target error
    and the mean feature/label rank correlation on the target domain.
    """
    variants = ablation_variants(axis, base, values)
    rows = []
    for name, config in variants:
        src_errs, tgt_errs, rhos, excluded = [], [], [], []
        for offset in tqdm.tqdm(seeds, desc=name):
            seeded = replace(config, init_seed=config.init_seed + offset, shuffle_seed=config.shuffle_seed + offset,
                             data_seed=config.data_seed + offset)
            source = domain_dataset(seeded, seeded.source_domain)
            target = domain_dataset(seeded, seeded.target_domain)
            params, log = train(seeded, source, target, progress=False)
            src_errs.append(log.rows[-1].src_err_deg)
            tgt_errs.append(log.rows[-1].tgt_err_deg)
            rhos.append(feature_label_correlation(params, target, n_pairs, seed=offset))
            excluded.append(log.excluded_samples)
        spread = float(np.std(tgt_errs, ddof=1)) if len(tgt_errs) > 1 else 0.0
        rows.append({'axis': axis, 'variant': name, 'seeds': len(tgt_errs),
                     'mean_tgt_err_deg': float(np.mean(tgt_errs)), 'std_tgt_err_deg': spread,
                     'mean_src_err_deg': float(np.mean(src_errs)), 'mean_rho': float(np.mean(rhos)),
                     'excluded_samples': int(np.sum(excluded)), 'excluded_negatives': log.excluded_negatives})
        print(f'{axis} {name}: target {rows[-1]["mean_tgt_err_deg"]:.3f} +- {spread:.3f} deg')
    return pd.DataFrame(rows)


def save_checkpoint(path, params: ParameterSet, config: TrainConfig):
    d = params.to_dict()
    d['config'] = config.to_dict()
    with open(path, 'w') as fh:
        json.dump(d, fh)


def load_checkpoint(path) -> Tuple[ParameterSet, Optional[TrainConfig]]:
    with open(path) as fh:
        d = json.load(fh)
    config = TrainConfig.from_dict(d['config']) if 'config' in d else None
    return ParameterSet.from_dict(d), config
