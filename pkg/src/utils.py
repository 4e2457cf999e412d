# src/utils.py

import logging
import sys

import numpy as np
import pandas as pd

LOG_FORMAT = '%(asctime)s %(levelname)s %(message)s'


def setup_logger(name, log_file=None, level=logging.INFO):
    # Configures a named logger; file output when log_file is given, stderr otherwise

    formatter = logging.Formatter(LOG_FORMAT)
    if log_file:
        handler = logging.FileHandler(log_file)
    else:
        handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(formatter)

    logger = logging.getLogger(name)
    logger.setLevel(level)
    if not logger.handlers:
        logger.addHandler(handler)

    return logger


def save_to_csv(data: pd.DataFrame, file_path: str) -> bool:
    """
    Save a result table as CSV with 17 significant digits per float.

    :param data: DataFrame to save
    :param file_path: output path
    :return: True on success, False otherwise
    """
    try:
        data.to_csv(file_path, index=False, float_format='%.17g', lineterminator='\n')
        return True
    except Exception as e:
        logging.getLogger(__name__).error("Could not write CSV file %s: %s", file_path, e)
        return False


def summarize_estimates(values) -> dict:
    """
    Monte Carlo summary of per-path values.

    :param values: 1-D array of per-path samples
    :return: dict with mean, standard error, sample variance and count
    """
    values = np.asarray(values, dtype=float)
    m = values.size
    variance = float(values.var(ddof=1)) if m > 1 else 0.0
    return {
        'mean': float(values.mean()) if m else float('nan'),
        'se': float(np.sqrt(variance / m)) if m else float('nan'),
        'var': variance,
        'n': int(m),
    }


def within_band(estimate, target, se, n_se=3.0, floor=0.0):
    # Two-sided band check used by every statistical pass flag
    return bool(abs(estimate - target) <= n_se * se + floor)
