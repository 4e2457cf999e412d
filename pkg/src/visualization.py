# src/visualization.py
"""
Figures from written reports. Library use only: no CLI subcommand draws plots.
"""

import logging
import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import plotly.express as px
import seaborn as sns

logger = logging.getLogger(__name__)


def _frame(data):
    # Accepts a DataFrame or the path of a report CSV
    return pd.read_csv(data) if isinstance(data, (str, os.PathLike)) else data


def _ensure_dir(path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def plot_scaling(data, slope=None, intercept=None, reference=None,
                 save_path='plots/remainder_scaling.png'):
    """
    Log-log plot of E[R^2] against the offset t - s, with the fitted line and
    the reference exponent drawn through the first point.

    :param data: remainder table (columns 'offset', 'r2', optionally 'exact_r2')
    :return: the saved path
    """
    df = _frame(data)
    df = df[df['r2'] > 0]
    _ensure_dir(save_path)

    fig, ax = plt.subplots(figsize=(8, 5))
    ax.loglog(df['offset'], df['r2'], 'o', label='Monte Carlo')
    if 'exact_r2' in df.columns and df['exact_r2'].notna().all():
        ax.loglog(df['offset'], df['exact_r2'], 'x', label='closed form')
    grid = np.geomspace(df['offset'].min(), df['offset'].max(), 50)
    if slope is not None and intercept is not None and np.isfinite(slope):
        ax.loglog(grid, np.exp(intercept) * grid ** slope, '-', label=f'fit, slope {slope:.3f}')
    if reference is not None and len(df):
        anchor = df['r2'].iloc[0] / df['offset'].iloc[0] ** reference
        ax.loglog(grid, anchor * grid ** reference, '--', label=f'reference {reference:.3f}')
    ax.set_xlabel('t - s')
    ax.set_ylabel('E[R^2]')
    ax.set_title('Remainder scaling')
    ax.legend()

    fig.savefig(save_path)
    plt.close(fig)
    logger.info("Scaling plot saved to %s", save_path)
    return save_path


def plot_factorization(data, save_path='plots/factorization.png'):
    # Residual against grid size, one line per direction convention
    df = _frame(data)
    _ensure_dir(save_path)

    fig, ax = plt.subplots(figsize=(8, 5))
    hue = 'convention' if 'convention' in df.columns else None
    sns.lineplot(data=df, x='grid_n', y='residual', hue=hue, marker='o', ax=ax)
    if (df['residual'] > 0).all():
        ax.set_yscale('log')
    ax.set_xscale('log', base=2)
    ax.set_xlabel('N')
    ax.set_ylabel('factorization residual')
    ax.set_title('Clark-Ocone residual')

    fig.savefig(save_path)
    plt.close(fig)
    logger.info("Factorization plot saved to %s", save_path)
    return save_path


def interactive_plot_scaling(data, output_file='plots/remainder_scaling_interactive.html'):
    """
    Interactive log-log scatter of the remainder table, saved as HTML.

    :return: the Plotly figure
    """
    df = _frame(data).copy()
    _ensure_dir(output_file)
    columns = ['r2'] + (['exact_r2'] if 'exact_r2' in df.columns and df['exact_r2'].notna().all() else [])
    long = df.melt(id_vars=['offset'], value_vars=columns, var_name='estimate', value_name='value')
    long = long[long['value'] > 0]

    fig = px.scatter(long, x='offset', y='value', color='estimate', log_x=True, log_y=True,
                     title='Remainder scaling')
    fig.write_html(output_file)
    logger.info("Interactive scaling plot saved to %s", output_file)
    return fig
