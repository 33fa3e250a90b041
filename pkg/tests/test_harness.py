import math
from dataclasses import replace

import numpy as np
import pytest

import harness
from constants import default_config_path
from encoders import ParameterSet, FROZEN, init_parameters
from errors import ConfigError, RangeError, TrainingDivergedError, UndefinedRankError
from geometry import fibonacci_sphere, uniform_patch
from harness import (TrainConfig, SyntheticDomainSpec, DOMAIN_PRESETS, generate_dataset, mixing_matrices,
                     domain_dataset, lr_schedule, NesterovSGD, MetricsLog, EpochMetrics, train, evaluate,
                     prediction_errors, evaluate_domains, rank_correlation, feature_label_correlation,
                     predict_by_text_matching, run_ablation, ablation_variants, save_checkpoint, load_checkpoint,
                     TrainingRun)
from anchors import build_anchor_grid
from losses import Lambdas, LossBreakdown


def test_shipped_config_matches_defaults():
    assert TrainConfig.from_json(default_config_path().read_text()) == TrainConfig()


def test_config_unknown_key():
    with pytest.raises(ConfigError) as e:
        TrainConfig.from_dict({'epochz': 3})
    assert e.value.key_path == 'epochz'


def test_config_bad_nested_type():
    with pytest.raises(ConfigError) as e:
        TrainConfig.from_dict({'lambdas': {'geo': 'one'}})
    assert e.value.key_path == 'lambdas.geo'
    assert 'lambdas.geo' in str(e.value)


def test_config_bad_values():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({'batch_size': 0})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({'batch_size': 3.5})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({'scheme': 'cosine'})
    with pytest.raises(ConfigError):
        TrainConfig.from_json('{"epochs": ')


def test_config_replace_and_round_trip():
    config = TrainConfig().replace(epochs=5, lambdas={'geo': 0.0, 'mcr': 1.0, 'gaze': 1.0})
    assert config.epochs == 5
    assert config.lambdas == Lambdas(0.0, 1.0, 1.0)
    assert TrainConfig.from_json(config.to_json()) == config
    assert TrainConfig().with_seed(9).seeds == {'init_seed': 9, 'proxy_seed': 9, 'shuffle_seed': 9, 'data_seed': 9}


def test_lr_schedule():
    config = TrainConfig(epochs=10, warmup_epochs=2, lr=0.1)
    assert lr_schedule(0, 100, config) == 0.0
    assert lr_schedule(10, 100, config) == pytest.approx(0.05)
    assert lr_schedule(20, 100, config) == pytest.approx(0.1)
    assert lr_schedule(99, 100, config) < 1e-4
    after = [lr_schedule(s, 100, config) for s in range(20, 100)]
    assert all(a >= b for a, b in zip(after, after[1:]))
    with pytest.raises(RangeError):
        lr_schedule(100, 100, config)


def test_nesterov_step():
    p0 = np.array([1.0, -2.0])
    g = np.array([0.5, 0.25])
    params = ParameterSet({'w': p0.copy(), 'f': np.ones(2)}, frozen=frozenset({'f'}))
    optimizer = NesterovSGD(momentum=0.9, weight_decay=0.01)
    params.grads['w'] = g.copy()
    optimizer.step(params, 0.1)
    p1 = p0 - 0.1 * 0.01 * p0 - 0.1 * 1.9 * g
    assert params['w'] == pytest.approx(p1)
    params.grads['w'] = g.copy()
    optimizer.step(params, 0.1)
    assert params['w'] == pytest.approx(p1 - 0.1 * 0.01 * p1 - 0.1 * 2.71 * g)
    assert np.array_equal(params['f'], np.ones(2))


def test_dataset_deterministic_and_in_patch():
    a = generate_dataset(50, DOMAIN_PRESETS['source'], 4)
    b = generate_dataset(50, DOMAIN_PRESETS['source'], 4)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.labels, b.labels)
    assert a.inputs.shape == (50, 32)
    assert np.all(np.abs(a.labels[:, 1]) <= np.sin(np.radians(60.0)) + 1e-12)
    assert np.all(a.labels[:, 2] >= -1e-12)


def test_domains_differ_but_share_mechanism():
    quiet = SyntheticDomainSpec('quiet', scale=0.0, noise=0.0)
    data = generate_dataset(20, quiet, 7)
    gaze_mix, _ = mixing_matrices(7)
    assert data.inputs == pytest.approx(np.tanh(data.labels @ gaze_mix.T), abs=1e-12)
    source = generate_dataset(20, DOMAIN_PRESETS['source'], 7)
    target = generate_dataset(20, DOMAIN_PRESETS['target'], 7)
    assert not np.array_equal(source.labels, target.labels)


def test_domain_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticDomainSpec('bad', mean=(0.0, 0.0))
    with pytest.raises(ConfigError):
        domain_dataset(TrainConfig(), 'nowhere')


def test_metrics_csv_header(tmp_path):
    log = MetricsLog()
    log.append(EpochMetrics(1, 0.1, 0.2, 0.3, 0.4, 1.0, 0.05, 10.0, 12.0, wall_clock=3.0))
    path = tmp_path / 'metrics.csv'
    log.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == 'epoch,geo,mcr_t2i,mcr_i2t,gaze,total,lr,src_err_deg,tgt_err_deg'
    assert len(lines) == 2
    with pytest.raises(RangeError):
        log.append(EpochMetrics(1, 0, 0, 0, 0, 0, 0, 0, 0))


def test_training_run(tiny_config, tmp_path):
    source = domain_dataset(tiny_config, 'source')
    target = domain_dataset(tiny_config, 'target')
    params, log = train(tiny_config, source, target, progress=False)
    assert len(log) == tiny_config.epochs
    assert [r.epoch for r in log.rows] == [1, 2, 3]
    assert all(math.isfinite(r.total) and math.isfinite(r.tgt_err_deg) for r in log.rows)
    first = init_parameters(tiny_config)
    for name in FROZEN:
        assert np.array_equal(params[name], first[name])
    assert params.max_abs_difference(first) > 0.0

    again, log_again = train(tiny_config, source, target, progress=False)
    assert log_again == log
    assert log_again.to_csv() == log.to_csv()
    assert again.to_json() == params.to_json()

    path = tmp_path / 'checkpoint.json'
    save_checkpoint(path, params, tiny_config)
    restored, config = load_checkpoint(path)
    assert config == tiny_config
    assert restored.max_abs_difference(params) == 0.0


def test_training_without_target(tiny_config):
    _, log = train(replace(tiny_config, epochs=2), domain_dataset(tiny_config, 'source'), progress=False)
    assert all(math.isnan(r.tgt_err_deg) for r in log.rows)


def test_divergence_aborts(tiny_config, monkeypatch):
    nan = float('nan')
    monkeypatch.setattr(harness, 'train_step', lambda *args: LossBreakdown(nan, 0.0, 0.0, 0.0, nan))
    with pytest.raises(TrainingDivergedError) as e:
        train(tiny_config, domain_dataset(tiny_config, 'source'), progress=False)
    assert e.value.step == 0


def test_evaluation_independent_of_workers(tiny_config):
    params = init_parameters(tiny_config)
    data = generate_dataset(600, DOMAIN_PRESETS['target'], 1)
    single = prediction_errors(params, data, workers=1)
    assert np.array_equal(single, prediction_errors(params, data, workers=4))
    assert evaluate(params, data, 1) == evaluate(params, data, 3)
    assert np.all((single >= 0) & (single <= 180))


def test_evaluate_domains(tiny_config):
    params = init_parameters(tiny_config)
    table = evaluate_domains(params, tiny_config, ['target', 'target-alt'])
    assert list(table['domain']) == ['target', 'target-alt', 'avg']
    assert table['err_deg'].iloc[2] == pytest.approx(table['err_deg'].iloc[:2].mean())


def test_rank_correlation_identity(rng):
    labels = uniform_patch(rng, 300)
    assert rank_correlation(labels, labels, 2000, seed=1) == pytest.approx(1.0, abs=1e-9)


def test_rank_correlation_constant_features(rng):
    labels = uniform_patch(rng, 50)
    with pytest.raises(UndefinedRankError):
        rank_correlation(np.ones((50, 4)), labels, 500)
    with pytest.raises(RangeError):
        rank_correlation(labels, labels, 10)


def test_feature_label_correlation_range(tiny_config):
    params = init_parameters(tiny_config)
    rho = feature_label_correlation(params, domain_dataset(tiny_config, 'target'), 500)
    assert -1.0 <= rho <= 1.0


def test_text_matching_returns_candidates(tiny_config, rng):
    params = init_parameters(tiny_config)
    grid = build_anchor_grid(30.0, 30.0, tiny_config.token_dim, tiny_config.init_seed)
    candidates = fibonacci_sphere(64)
    pred = predict_by_text_matching(params, grid, rng.standard_normal((5, 32)), candidates)
    assert pred.shape == (5, 3)
    for row in pred:
        assert np.any(np.all(candidates == row, axis=1))


def test_ablation_variants():
    base = TrainConfig()
    names = [name for name, _ in ablation_variants('loss-terms', base)]
    assert names == ['Gaze', 'MCR+Gaze', 'Geo+MCR+Gaze']
    k = ablation_variants('K', base)
    assert [c.num_negatives for _, c in k] == [0, 64, 128, 256]
    weights = ablation_variants('loss-weights', base, [0.5, 2.0])
    assert [c.lambdas.mcr for _, c in weights] == [0.5, 2.0]
    with pytest.raises(ConfigError):
        ablation_variants('depth', base)


def test_run_ablation_table(tiny_config):
    table = run_ablation('K', replace(tiny_config, epochs=2), seeds=range(2), values=[0, 4], n_pairs=200)
    assert list(table['variant']) == ['K=0', 'K=4']
    assert list(table['seeds']) == [2, 2]
    assert set(table.columns) >= {'mean_tgt_err_deg', 'std_tgt_err_deg', 'mean_rho'}


def test_global_run_leaves_out_singular_band(tiny_config):
    config = replace(tiny_config, interpolation='global')
    labels = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.6, 0.8]])
    run = TrainingRun.prepare(config, labels)
    assert list(run.sample_mask) == [False, True, True]
    assert run.excluded_samples == 1
    assert run.sample_weights.shape == (2, run.grid.n)
    # the first Fibonacci point lies on z = 0
    assert run.excluded_negatives >= 1
    assert len(run.bank_gazes) + run.excluded_negatives == config.num_negatives
    spherical = TrainingRun.prepare(tiny_config, labels)
    assert spherical.excluded_samples == 0 and spherical.excluded_negatives == 0


def test_global_training_records_exclusions(tiny_config):
    config = replace(tiny_config, interpolation='global')
    source = domain_dataset(config, 'source')
    source.labels[0] = [1.0, 0.0, 0.0]
    _, log = train(config, source, progress=False)
    assert log.excluded_samples >= 1
    assert log.excluded_negatives >= 1
    assert np.isfinite(log.rows[-1].total)


def test_run_ablation_interpolation(tiny_config):
    table = run_ablation('interpolation', replace(tiny_config, epochs=2), seeds=range(1), n_pairs=200)
    assert list(table['variant']) == ['global-linear', 'planar-bilinear', 'spherical-bilinear']
    assert np.isfinite(table['mean_tgt_err_deg']).all()
    rows = table.set_index('variant')
    assert rows.loc['global-linear', 'excluded_negatives'] >= 1
    assert rows.loc['spherical-bilinear', 'excluded_samples'] == 0
    assert rows.loc['planar-bilinear', 'excluded_negatives'] == 0


@pytest.mark.slow
def test_training_reduces_source_error():
    config = TrainConfig(epochs=8, warmup_epochs=1, n_source=1024, n_target=256, num_negatives=64)
    source = domain_dataset(config, 'source')
    target = domain_dataset(config, 'target')
    _, log = train(config, source, target, progress=False)
    assert log.rows[-1].src_err_deg < log.rows[0].src_err_deg
    assert log.rows[-1].gaze < log.rows[0].gaze


def pooled_std(table):
    return float(np.sqrt(np.mean(np.square(table['std_tgt_err_deg']))))


@pytest.fixture(scope='module')
def loss_terms_table():
    return run_ablation('loss-terms', TrainConfig(), seeds=range(5))


@pytest.mark.slow
def test_loss_terms_ordering(loss_terms_table):
    err = dict(zip(loss_terms_table['variant'], loss_terms_table['mean_tgt_err_deg']))
    assert err['Gaze'] >= 1.1 * err['MCR+Gaze']
    assert err['MCR+Gaze'] >= 1.1 * err['Geo+MCR+Gaze']


@pytest.mark.slow
def test_full_objective_raises_rank_correlation(loss_terms_table):
    rho = dict(zip(loss_terms_table['variant'], loss_terms_table['mean_rho']))
    assert rho['Geo+MCR+Gaze'] >= rho['Gaze'] + 0.1


@pytest.mark.slow
def test_gaze_only_source_error(loss_terms_table):
    rows = loss_terms_table.set_index('variant')
    assert rows.loc['Gaze', 'mean_src_err_deg'] < 6.0


@pytest.mark.slow
def test_interpolation_ordering():
    table = run_ablation('interpolation', TrainConfig(), seeds=range(5))
    err = dict(zip(table['variant'], table['mean_tgt_err_deg']))
    spread = pooled_std(table)
    assert err['spherical-bilinear'] <= err['planar-bilinear'] + spread
    assert err['planar-bilinear'] <= err['global-linear'] + spread


@pytest.mark.slow
def test_more_negatives_do_not_hurt():
    table = run_ablation('K', TrainConfig(), seeds=range(5), values=[0, 64, 256])
    errors = list(table['mean_tgt_err_deg'])
    spread = pooled_std(table)
    for fewer, more in zip(errors, errors[1:]):
        assert more <= fewer + spread


@pytest.mark.slow
@pytest.mark.parametrize('seed', range(5))
def test_total_loss_falls_over_training(seed):
    config = TrainConfig().with_seed(seed)
    _, log = train(config, domain_dataset(config, 'source'), progress=False)
    assert log.rows[-1].total < log.rows[0].total
