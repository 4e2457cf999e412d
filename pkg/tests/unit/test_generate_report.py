# tests/unit/test_generate_report.py

import json

import numpy as np
import pandas as pd
import pytest

from src.errors import ReportPathError
from src.experiments import ExperimentReport
from src.generate_report import (
    SPEC_VERSION, load_report, report_document, report_stem, to_json, write_report,
)


def _report(**config):
    base = {'model': 'fbm', 'hurst': 0.25, 'grid_n': 16, 'seed': 7}
    base.update(config)
    return ExperimentReport(
        'adjointness', base,
        results=[{'field': 'deterministic', 'difference': 0.1, 'se': np.float64(0.05),
                  'rhs_exact': None, 'passed': True}],
        summary={'pairs': 1, 'max_abs_z': float('nan')},
        criteria={'quadratic|deterministic': True},
        provenance={'seed': 7, 'jitter': [0.0]},
    )


def test_to_json_scalars():
    assert to_json(0.1) == '0.10000000000000001'
    assert to_json(float('nan')) == 'null'
    assert to_json(float('inf')) == 'null'
    assert to_json(np.int64(3)) == '3'
    assert to_json(True) == 'true'
    assert to_json(None) == 'null'
    assert to_json('a"b') == '"a\\"b"'
    assert to_json([]) == '[]'
    assert to_json({}) == '{}'


def test_to_json_nested_is_valid_json():
    value = {'b': [1.5, {'c': np.array([0.25, 2.0])}], 'a': (1, 2)}
    text = to_json(value)
    assert json.loads(text) == {'b': [1.5, {'c': [0.25, 2.0]}], 'a': [1, 2]}
    assert text.index('"b"') < text.index('"a"')


def test_to_json_rejects_unknown_types():
    with pytest.raises(TypeError):
        to_json(object())


def test_report_stem():
    assert report_stem(_report()) == 'adjointness_fbm_0.25_16_7'
    assert report_stem(_report(model='bm')) == 'adjointness_bm_0.5_16_7'


def test_report_document_keys():
    assert list(report_document(_report())) == [
        'spec_version', 'experiment', 'config', 'results', 'summary', 'criteria', 'provenance']


def test_write_report(tmp_path):
    json_path, csv_path = write_report(_report(), str(tmp_path / 'out'))
    document = load_report(json_path)
    assert document['spec_version'] == SPEC_VERSION
    assert document['summary']['max_abs_z'] is None
    assert document['results'][0]['se'] == 0.05
    table = pd.read_csv(csv_path)
    assert list(table.columns) == ['field', 'difference', 'se', 'rhs_exact', 'passed']
    assert len(table) == 1


def test_write_report_is_byte_identical(tmp_path):
    first = write_report(_report(), str(tmp_path / 'a'))
    second = write_report(_report(), str(tmp_path / 'b'))
    for a, b in zip(first, second):
        with open(a, 'rb') as left, open(b, 'rb') as right:
            assert left.read() == right.read()


def test_write_report_unwritable_directory(tmp_path):
    blocker = tmp_path / 'blocker'
    blocker.write_text('not a directory')
    with pytest.raises(ReportPathError):
        write_report(_report(), str(blocker))
