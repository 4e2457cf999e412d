# src/gaussian_engine.py
"""
Gaussian path sampling on the grid, exact Gaussian conditioning on a path
prefix, the isonormal map and conditional expectations of nonlinear maps.

Random numbers come from PCG64 streams keyed by (seed, stream, chunk); an
ensemble is generated in fixed-size chunks so the result never depends on
the number of workers.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product
from typing import NamedTuple

import numpy as np
from joblib import Parallel, delayed
from numpy.polynomial.hermite_e import hermegauss
from scipy.linalg import LinAlgError, cholesky, solve_triangular

from src.energy_space import CMElement
from src.errors import DimensionError, DomainError, ReportPathError, UnsupportedDimensionError

logger = logging.getLogger(__name__)

DEFAULT_CHUNK = 8192
DEFAULT_NODES = 32
MAX_QUADRATURE_DIMS = 4
CIRCULANT_TOLERANCE = 1e-9
QUADRATURE_BATCH = 1 << 19

ENSEMBLE_MAGIC = b'RCENSMB1'
ENSEMBLE_VERSION = 1
ENSEMBLE_HEADER = np.dtype([
    ('magic', 'S8'),
    ('version', '<u4'),
    ('m', '<u8'),
    ('n', '<u8'),
    ('seed', '<u8'),
])


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: int = 0

    def generator(self, chunk=0):
        sequence = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream), int(chunk)))
        return np.random.Generator(np.random.PCG64(sequence))

    def substream(self, offset):
        return RngStream(self.seed, self.stream + int(offset))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """M sampled coordinate vectors, one per row."""

    paths: np.ndarray
    seed: int
    model: dict
    sampler: str = 'cholesky'
    flags: tuple = field(default=())

    @property
    def m(self):
        return self.paths.shape[0]

    @property
    def n(self):
        return self.paths.shape[1]


class Estimate(NamedTuple):
    mean: object
    se: object


def _chunk_sizes(m, chunk_size):
    full, rest = divmod(int(m), int(chunk_size))
    return [chunk_size] * full + ([rest] if rest else [])


def _cholesky_chunk(chol, rng, index, rows):
    z = rng.generator(index).standard_normal((rows, chol.shape[0]))
    return z @ chol.T


def sample_ensemble(ctx, m, rng, chunk_size=DEFAULT_CHUNK, workers=1):
    """
    Rows i.i.d. N(0, Sigma) as chol @ xi, chunk c drawn from stream (seed, stream, c).
    """
    if m < 1:
        raise DomainError(f"Ensemble size must be at least 1, got {m}")

    sizes = _chunk_sizes(m, chunk_size)
    parts = Parallel(n_jobs=workers)(
        delayed(_cholesky_chunk)(ctx.chol, rng, c, rows) for c, rows in enumerate(sizes)
    )
    paths = np.vstack(parts)
    logger.debug("Sampled %d paths on %d coordinates (%d chunks)", m, ctx.n_coords, len(sizes))
    return PathEnsemble(paths=paths, seed=rng.seed, model=ctx.describe(), sampler='cholesky')


def fgn_autocovariance(hurst, n):
    # gamma(k) = (|k-1|^{2H} - 2|k|^{2H} + |k+1|^{2H}) / 2, k = 0..n
    k = np.arange(n + 1, dtype=float)
    two_h = 2.0 * hurst
    return 0.5 * (np.abs(k - 1) ** two_h - 2.0 * k ** two_h + (k + 1) ** two_h)


def circulant_eigenvalues(hurst, n):
    gamma = fgn_autocovariance(hurst, n)
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    return np.fft.fft(row).real


def _circulant_chunk(eig, n, scale, rng, index, rows):
    gen = rng.generator(index)
    size = eig.shape[0]
    w = gen.standard_normal((rows, size)) + 1j * gen.standard_normal((rows, size))
    y = np.fft.fft(np.sqrt(eig / size) * w, axis=1)
    return np.cumsum(y[:, :n].real * scale, axis=1)


def sample_ensemble_circulant(ctx, m, rng, chunk_size=DEFAULT_CHUNK, workers=1):
    """
    Davies-Harte sampler: cumulative sums of fractional Gaussian noise drawn by
    circulant embedding of the increment autocovariance.

    Falls back to the Cholesky sampler (flag 'circulant_fallback') when the
    embedding has eigenvalues below -1e-9 * max.
    """
    grid = ctx.grid
    if ctx.model.kind not in ('bm', 'fbm') or ctx.block != 1:
        raise DomainError("Circulant sampling needs a BM or fBM model")
    if not grid.uniform:
        raise DomainError("Circulant sampling needs a uniform grid")

    n = grid.size
    hurst = ctx.model.hurst_value
    eig = circulant_eigenvalues(hurst, n)
    if eig.min() < -CIRCULANT_TOLERANCE * eig.max():
        logger.warning("Circulant embedding not PSD for H=%.3f, n=%d; using Cholesky", hurst, n)
        fallback = sample_ensemble(ctx, m, rng, chunk_size=chunk_size, workers=workers)
        return PathEnsemble(paths=fallback.paths, seed=fallback.seed, model=fallback.model,
                            sampler='cholesky', flags=('circulant_fallback',))
    eig = np.clip(eig, 0.0, None)

    scale = grid.step ** hurst
    sizes = _chunk_sizes(m, chunk_size)
    parts = Parallel(n_jobs=workers)(
        delayed(_circulant_chunk)(eig, n, scale, rng, c, rows) for c, rows in enumerate(sizes)
    )
    return PathEnsemble(paths=np.vstack(parts), seed=rng.seed, model=ctx.describe(),
                        sampler='circulant')


def observed_paths(ctx, ensemble):
    # X_{t_1..t_N} for every row (identity for a single process)
    return ensemble.paths @ ctx.readout.T


def isonormal(ctx, h, path):
    """I(h) = sum_c coeffs[c] * Z_c for one path or a stack of paths."""
    path = np.asarray(path, dtype=float)
    if path.shape[-1] != h.coeffs.shape[0]:
        raise DimensionError(
            f"Path has {path.shape[-1]} coordinates, element has {h.coeffs.shape[0]}")
    out = path @ h.coeffs
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class ConditionalLaw:
    """
    Law of the coordinates after the prefix p given the first p coordinates:
    mean = mean_map @ prefix, covariance = Schur complement.
    """

    prefix: int
    mean_map: np.ndarray
    covariance: np.ndarray

    @property
    def future(self):
        return np.arange(self.prefix, self.prefix + self.covariance.shape[0])

    def mean(self, observed):
        observed = np.asarray(observed, dtype=float)
        if observed.shape[-1] != self.prefix:
            raise DimensionError(f"Expected {self.prefix} observed values, got {observed.shape[-1]}")
        return observed @ self.mean_map.T


def conditional_law_prefix(ctx, p):
    """
    Gaussian conditioning on the first p coordinates via the Cholesky factor:
    Sigma_fp Sigma_pp^{-1} = L_fp L_pp^{-1} and the Schur complement is L_ff L_ff^T.
    """
    n = ctx.n_coords
    if not 0 <= p < n:
        raise DimensionError(f"Conditioning prefix {p} outside 0..{n - 1}")
    chol = ctx.chol
    l_ff = chol[p:, p:]
    if p == 0:
        mean_map = np.zeros((n, 0))
    else:
        mean_map = solve_triangular(chol[:p, :p], chol[p:, :p].T, lower=True, trans='T').T
    return ConditionalLaw(prefix=p, mean_map=mean_map, covariance=l_ff @ l_ff.T)


def conditional_law(ctx, j):
    # j = number of observed grid times
    return conditional_law_prefix(ctx, ctx.prefix_length(j))


def regression_coefficients(ctx, h, j):
    """
    Coefficients of E[I(h) | first j grid times] as a linear form in the prefix:
    c_p + A^T c_f, A the conditional mean map.
    """
    p = ctx.prefix_length(j)
    if p == ctx.n_coords:
        return CMElement(h.coeffs)
    law = conditional_law_prefix(ctx, p)
    out = np.zeros(ctx.n_coords)
    out[:p] = h.coeffs[:p] + law.mean_map.T @ h.coeffs[p:]
    return CMElement(out)


@lru_cache(maxsize=None)
def gauss_hermite_rule(nodes):
    # Probabilists' Gauss-Hermite rule normalized to N(0, 1)
    x, w = hermegauss(int(nodes))
    w = w / np.sqrt(2.0 * np.pi)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@lru_cache(maxsize=None)
def tensor_rule(nodes, dims):
    x, w = gauss_hermite_rule(nodes)
    if dims == 0:
        return np.zeros((1, 0)), np.ones(1)
    points = np.array(list(product(x, repeat=dims)))
    weights = np.prod(np.array(list(product(w, repeat=dims))), axis=1)
    return points, weights


def _whiten(cov):
    try:
        return cholesky(cov, lower=True)
    except LinAlgError:
        bump = 1e-12 * max(float(np.mean(np.diag(cov))), 1e-300)
        return cholesky(cov + bump * np.eye(cov.shape[0]), lower=True)


def conditional_expectation(ctx, g, loadings, j, prefix, method='quadrature',
                            nodes=DEFAULT_NODES, draws=4096, rng=None):
    """
    E[g(Y) | first j grid times] with Y = loadings @ Z.

    :param g: vectorized map (K, d) -> (K,)
    :param loadings: (d, n_coords) read-out of the variables g depends on
    :param prefix: observed coordinates, shape (p,) or (K, p)
    :param method: 'quadrature' (tensor Gauss-Hermite after Cholesky whitening
        of the Schur covariance, at most 4 future coordinates) or 'mc'
    :return: Estimate(mean, se); se is zero for quadrature
    :raises DomainError: for method='mc' without an rng stream
    """
    return conditional_expectation_prefix(ctx, g, loadings, ctx.prefix_length(j), prefix,
                                          method=method, nodes=nodes, draws=draws, rng=rng)


def conditional_expectation_prefix(ctx, g, loadings, p, prefix, method='quadrature',
                                   nodes=DEFAULT_NODES, draws=4096, rng=None):
    # Same as conditional_expectation, conditioning on the first p coordinates
    if method == 'mc' and rng is None:
        raise DomainError("Monte Carlo conditional expectation needs an explicit rng stream")
    loadings = np.atleast_2d(np.asarray(loadings, dtype=float))
    prefix = np.asarray(prefix, dtype=float)
    single = prefix.ndim == 1
    prefix = np.atleast_2d(prefix)
    if prefix.shape[1] != p:
        raise DimensionError(f"Expected {p} observed coordinates, got {prefix.shape[1]}")

    referenced = np.flatnonzero(np.any(loadings[:, p:] != 0, axis=0)) + p
    base = prefix @ loadings[:, :p].T

    if referenced.size == 0:
        values = np.asarray(g(base), dtype=float)
        return _estimate(values, np.zeros_like(values), single)

    law = conditional_law_prefix(ctx, p)
    rel = referenced - p
    mean_r = prefix @ law.mean_map[rel].T
    whitening = _whiten(law.covariance[np.ix_(rel, rel)])
    load_r = loadings[:, referenced]
    centre = base + mean_r @ load_r.T

    if method == 'quadrature':
        if referenced.size > MAX_QUADRATURE_DIMS:
            raise UnsupportedDimensionError(
                f"Quadrature supports at most {MAX_QUADRATURE_DIMS} future coordinates, "
                f"got {referenced.size}; use method='mc'")
        points, weights = tensor_rule(int(nodes), int(referenced.size))
        shifts = points @ whitening.T @ load_r.T
        step = max(1, QUADRATURE_BATCH // len(weights))
        means = np.concatenate([
            (np.asarray(g((centre[k:k + step, None, :] + shifts[None]).reshape(-1, loadings.shape[0])))
             .reshape(-1, len(weights)) @ weights)
            for k in range(0, centre.shape[0], step)
        ])
        return _estimate(means, np.zeros_like(means), single)

    if method == 'mc':
        gen = rng.generator()
        xi = gen.standard_normal((int(draws), referenced.size))
        shifts = xi @ whitening.T @ load_r.T
        samples = np.vstack([g(centre[k][None, :] + shifts) for k in range(centre.shape[0])])
        means = samples.mean(axis=1)
        ses = samples.std(axis=1, ddof=1) / np.sqrt(draws)
        return _estimate(means, ses, single)

    raise DomainError(f"Unknown conditional expectation method '{method}'")


def _estimate(means, ses, single):
    if single:
        return Estimate(float(means[0]), float(ses[0]))
    return Estimate(means, ses)


def export_ensemble(ensemble, file_path):
    """
    Binary dump: little-endian header (magic, version, M, N, seed) then M x N
    row-major <f8 values.
    """
    header = np.zeros(1, dtype=ENSEMBLE_HEADER)
    header['magic'] = ENSEMBLE_MAGIC
    header['version'] = ENSEMBLE_VERSION
    header['m'] = ensemble.m
    header['n'] = ensemble.n
    header['seed'] = int(ensemble.seed) & 0xFFFFFFFFFFFFFFFF
    try:
        with open(file_path, 'wb') as handle:
            handle.write(header.tobytes())
            handle.write(np.ascontiguousarray(ensemble.paths, dtype='<f8').tobytes())
    except OSError as e:
        raise ReportPathError(f"Cannot write ensemble {file_path}: {e}") from e
    return file_path


def load_ensemble(file_path, model=None):
    with open(file_path, 'rb') as handle:
        raw = handle.read()
    header = np.frombuffer(raw[:ENSEMBLE_HEADER.itemsize], dtype=ENSEMBLE_HEADER)[0]
    if header['magic'] != ENSEMBLE_MAGIC:
        raise DomainError(f"{file_path} is not an ensemble file")
    m, n = int(header['m']), int(header['n'])
    values = np.frombuffer(raw[ENSEMBLE_HEADER.itemsize:], dtype='<f8')
    if values.size != m * n:
        raise DimensionError(f"{file_path}: expected {m * n} values, found {values.size}")
    return PathEnsemble(paths=values.reshape(m, n).astype(float), seed=int(header['seed']),
                        model=model or {}, sampler='file')
