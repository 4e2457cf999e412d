# tests/integration/test_end_to_end.py

import json
from pathlib import Path

import pandas as pd
import pytest

from src.cli import EXIT_FAILED, EXIT_OK, parse_and_dispatch
from src.generate_report import load_report
from src.visualization import plot_factorization, plot_scaling

SMALL = ['--paths', '2000', '--seed', '21', '--set', 'chunk_size=500', '--set', 'quadrature_nodes=16']
ROOT = Path(__file__).resolve().parents[2]
SUITE = ("paths = 1000\ngrid_n = 8\ngrid_sizes = 4, 8\nhurst_values = 0.25\n"
         "offsets = 5\nrandom_elements = 10\ntest_fields = deterministic\n"
         "chunk_size = 500\nquadrature_nodes = 12\n")


def _bytes(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


@pytest.mark.integration
def test_reports_are_identical_across_worker_counts(tmp_path):
    """
    Same seed, different worker counts: every written file is byte-identical.
    """
    for workers in ('1', '3'):
        code = parse_and_dispatch(['adjointness', *SMALL, '--grid-n', '8', '--functional', 'two_time',
                                   '--workers', workers, '--output-dir', str(tmp_path / workers)])
        assert code in (EXIT_OK, EXIT_FAILED)
    assert _bytes(tmp_path / '1') == _bytes(tmp_path / '3')


@pytest.mark.integration
def test_rerun_is_byte_identical(tmp_path):
    for run in ('a', 'b'):
        parse_and_dispatch(['isometry', *SMALL, '--grid-n', '8', '--output-dir', str(tmp_path / run)])
    assert _bytes(tmp_path / 'a') == _bytes(tmp_path / 'b')


@pytest.mark.integration
def test_remainder_and_factorization_reports_feed_the_plots(tmp_path):
    """
    Runs the two sweep experiments through the CLI, then draws their figures
    from the written CSV tables.
    """
    out = tmp_path / 'reports'
    assert parse_and_dispatch(['remainder', *SMALL, '--grid-n', '32', '--set', 'offsets=5',
                               '--output-dir', str(out)]) in (EXIT_OK, EXIT_FAILED)
    assert parse_and_dispatch(['factorize', *SMALL, '--set', 'grid_sizes=4,8,16',
                               '--output-dir', str(out)]) in (EXIT_OK, EXIT_FAILED)

    remainder = load_report(out / 'remainder_scaling_fbm_0.25_32_21.json')
    assert remainder['summary']['reference_exponent'] == 1.0
    assert len(remainder['results']) == 5
    summary = remainder['summary']
    plot_scaling(str(out / 'remainder_scaling_fbm_0.25_32_21.csv'), summary['slope'],
                 summary['intercept'], summary['reference_exponent'],
                 save_path=str(tmp_path / 'plots' / 'scaling.png'))

    table = pd.read_csv(out / 'factorization_fbm_0.25_32_21.csv')
    assert sorted(table['convention'].unique()) == ['increment', 'innovation']
    assert table['grid_n'].tolist() == [4, 4, 8, 8, 16, 16]
    plot_factorization(table, save_path=str(tmp_path / 'plots' / 'factorization.png'))
    assert (tmp_path / 'plots' / 'scaling.png').exists()
    assert (tmp_path / 'plots' / 'factorization.png').exists()


@pytest.mark.integration
def test_mixed_pipeline(tmp_path):
    code = parse_and_dispatch(['mixed', *SMALL, '--grid-n', '4', '--set', 'model=mixed',
                               '--set', 'alpha=0', '--set', 'beta=1', '--functional', 'linear',
                               '--output-dir', str(tmp_path)])
    assert code in (EXIT_OK, EXIT_FAILED)
    document = json.loads((tmp_path / 'mixed_fbm_limit_mixed_0.25_4_21.json').read_text())
    assert document['criteria']['linear_exact'] is True
    assert document['criteria']['degenerate_exact'] is True
    assert document['summary']['coordinates'] == 8
    assert document['summary']['pure_model'] == 'fbm'


@pytest.mark.integration
def test_verify_all_small(tmp_path):
    config = tmp_path / 'suite.cfg'
    config.write_text(SUITE)
    out = tmp_path / 'reports'
    code = parse_and_dispatch(['verify-all', '--config', str(config), '--seed', '42',
                               '--output-dir', str(out)])
    assert code in (EXIT_OK, EXIT_FAILED)

    aggregate = load_report(out / 'verify_all_fbm_0.25_8_42.json')
    experiments = [row['experiment'] for row in aggregate['results']]
    assert experiments[0] == 'increment_identity'
    assert experiments.count('projection_lemma') == 4
    assert {'adjointness', 'factorization', 'remainder_scaling', 'gubinelli_compare',
            'isometry_defect', 'quadratic_identity', 'brownian_reduction', 'sampler_check',
            'mixed', 'mixed_fbm_limit', 'mixed_bm_limit'} <= set(experiments)
    assert experiments.count('sampler_check') == 1
    assert aggregate['summary']['passed'] == (code == EXIT_OK)
    lemma = load_report(out / 'projection_lemma_fbm_0.1_8_42.json')
    assert lemma['criteria'] == {'lemma': True}
    remainder = load_report(out / 'remainder_scaling_fbm_0.25_256_42.json')
    assert remainder['summary']['min_offset_steps'] == 8
    sampler = load_report(out / 'sampler_check_fbm_0.25_64_42.json')
    assert sampler['config']['grid_n'] == 64


@pytest.mark.integration
def test_verify_all_is_identical_across_worker_counts(tmp_path):
    config = tmp_path / 'suite.cfg'
    config.write_text(SUITE)
    for workers in ('1', '3'):
        code = parse_and_dispatch(['verify-all', '--config', str(config), '--seed', '42',
                                   '--workers', workers, '--output-dir', str(tmp_path / workers)])
        assert code in (EXIT_OK, EXIT_FAILED)
    assert _bytes(tmp_path / '1') == _bytes(tmp_path / '3')


@pytest.mark.integration
def test_verify_all_default_config_passes(tmp_path, monkeypatch):
    monkeypatch.chdir(ROOT)
    out = tmp_path / 'reports'
    code = parse_and_dispatch(['verify-all', '--config', 'default.cfg', '--seed', '42',
                               '--output-dir', str(out)])
    aggregate = load_report(out / 'verify_all_fbm_0.25_32_42.json')
    failed = [row for row in aggregate['results'] if not row['passed']]
    assert failed == []
    assert code == EXIT_OK

    remainder = load_report(out / 'remainder_scaling_fbm_0.25_512_42.json')
    assert remainder['criteria']['fit_r2'] is True
    assert remainder['summary']['exact_fit_r2'] >= 0.98
    factorization = load_report(out / 'factorization_fbm_0.25_32_42.json')
    assert factorization['summary']['increment_converges'] is False


@pytest.mark.integration
@pytest.mark.acceptance
def test_acceptance_config(tmp_path):
    """
    Full-size suite: 10^5 paths, factorization sweep to N = 64, sampler at N = 64.
    Every closed-form check must hold; statistical bands are reported.
    """
    out = tmp_path / 'reports'
    code = parse_and_dispatch(['verify-all', '--config', str(ROOT / 'acceptance.cfg'),
                               '--seed', '42', '--output-dir', str(out)])
    assert code in (EXIT_OK, EXIT_FAILED)

    aggregate = load_report(out / 'verify_all_fbm_0.25_32_42.json')
    assert aggregate['config']['paths'] == 100000
    factorization = load_report(out / 'factorization_fbm_0.25_32_42.json')
    assert [r['grid_n'] for r in factorization['results'] if r['convention'] == 'innovation'] == \
        [8, 16, 32, 64]
    exact = [r['exact'] for r in factorization['results'] if r['convention'] == 'innovation']
    assert exact == sorted(exact, reverse=True)
    assert factorization['criteria']['strictly_decreasing'] is True
    for hurst in ('0.25', '0.4'):
        sampler = load_report(out / f'sampler_check_fbm_{hurst}_64_42.json')
        assert sampler['config']['paths'] == 100000
    for hurst in ('0.1', '0.25', '0.4', '0.5'):
        assert load_report(out / f'projection_lemma_fbm_{hurst}_32_42.json')['criteria'] == \
            {'lemma': True}
    quadratic = load_report(out / 'quadratic_identity_fbm_0.25_32_42.json')
    assert quadratic['criteria']['per_path_identity'] is True
    assert quadratic['criteria']['closed_form'] is True
    assert load_report(out / 'brownian_reduction_bm_0.5_32_42.json')['criteria'] == {
        'residual_innovation': True, 'residual_increment': True,
        'projection_of_representers': True}
    assert load_report(out / 'mixed_fbm_limit_mixed_0.25_32_42.json')['criteria']['degenerate_exact']
    assert load_report(out / 'mixed_bm_limit_mixed_0.25_32_42.json')['criteria']['linear_exact']
