# src/generate_report.py

import json
import logging
import math
import os

import numpy as np
import pandas as pd

from src.errors import ReportPathError
from src.utils import save_to_csv

logger = logging.getLogger(__name__)

SPEC_VERSION = '1.0'
FLOAT_FORMAT = '.17g'


def _plain(value):
    # numpy scalars and arrays to Python values
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def to_json(value, indent=0):
    """
    Serialize with every float at 17 significant digits; NaN and infinities
    become null. Key order is preserved.
    """
    value = _plain(value)
    pad = '  ' * (indent + 1)
    close = '  ' * indent
    if value is None:
        return 'null'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format(value, FLOAT_FORMAT) if math.isfinite(value) else 'null'
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        if not value:
            return '{}'
        items = [f'{pad}{json.dumps(str(k))}: {to_json(v, indent + 1)}' for k, v in value.items()]
        return '{\n' + ',\n'.join(items) + '\n' + close + '}'
    if isinstance(value, (list, tuple)):
        if not value:
            return '[]'
        items = [f'{pad}{to_json(v, indent + 1)}' for v in value]
        return '[\n' + ',\n'.join(items) + '\n' + close + ']'
    raise TypeError(f"Cannot serialize {type(value).__name__}")


def report_stem(report):
    # {experiment}_{model}_{H}_{N}_{seed}
    config = report.config
    hurst = 0.5 if config.get('model') == 'bm' else config.get('hurst')
    return f"{report.experiment}_{config.get('model')}_{format(hurst, 'g')}_" \
           f"{config.get('grid_n')}_{config.get('seed')}"


def report_document(report):
    return {
        'spec_version': SPEC_VERSION,
        'experiment': report.experiment,
        'config': report.config,
        'results': report.results,
        'summary': report.summary,
        'criteria': report.criteria,
        'provenance': report.provenance,
    }


def write_report(report, directory):
    """
    Write `<stem>.json` and `<stem>.csv` (one row per result) into directory.

    :return: (json_path, csv_path)
    :raises ReportPathError: if the directory or a file cannot be written
    """
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as e:
        raise ReportPathError(f"Cannot create output directory {directory}: {e}") from e

    stem = os.path.join(directory, report_stem(report))
    json_path, csv_path = stem + '.json', stem + '.csv'
    try:
        with open(json_path, 'w', encoding='utf-8', newline='\n') as handle:
            handle.write(to_json(report_document(report)) + '\n')
    except OSError as e:
        raise ReportPathError(f"Cannot write report {json_path}: {e}") from e

    table = pd.DataFrame([{k: _plain(v) for k, v in row.items()} for row in report.results])
    if not save_to_csv(table, csv_path):
        raise ReportPathError(f"Cannot write table {csv_path}")

    logger.info("Report written: %s", json_path)
    return json_path, csv_path


def load_report(json_path):
    with open(json_path, encoding='utf-8') as handle:
        return json.load(handle)
