# src/config.py
"""
Experiment configuration: plain `key = value` text plus command-line overrides.
"""

import logging
import os
from dataclasses import asdict, dataclass, fields, replace

from src.catalog import FUNCTIONAL_CATALOG, TEST_FIELDS
from src.errors import ConfigError, DomainError
from src.model_kernel import MODEL_KINDS, CovarianceModel, TimeGrid

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = 'ROUGHCALC_OUTPUT_DIR'
DEFAULT_OUTPUT_DIR = 'reports'
MIN_STATISTICAL_PATHS = 1000
MIN_OFFSETS = 5

# Execution settings; never part of the echoed configuration
EXECUTION_KEYS = ('workers',)


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = 'fbm'
    hurst: float = 0.25
    alpha: float = 1.0
    beta: float = 1.0
    grid_n: int = 32
    horizon: float = 1.0
    spacing: str = 'uniform'
    times: tuple = ()
    functional: str = 'quadratic'
    paths: int = 100000
    seed: int = 42
    method: str = 'quadrature'
    mc_draws: int = 4096
    quadrature_nodes: int = 32
    grid_sizes: tuple = (8, 16, 32, 64)
    hurst_values: tuple = (0.25, 0.4)
    offsets: int = 6
    interior_points: int = 3
    workers: int = 1
    chunk_size: int = 8192
    test_fields: tuple = ('deterministic', 'adapted_affine', 'non_adapted_affine')
    random_elements: int = 100

    @classmethod
    def from_mapping(cls, mapping):
        """Coerce raw string (or typed) values; unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(mapping) - set(known))
        if unknown:
            raise ConfigError(f"Unknown configuration key(s): {', '.join(unknown)}")
        values = {}
        for key, raw in mapping.items():
            values[key] = _coerce(key, raw, known[key].default)
        return cls(**values)

    def with_overrides(self, overrides):
        # Overrides are applied on top of the current values
        current = asdict(self)
        current.update(overrides)
        return ExperimentConfig.from_mapping(current)

    def derive(self, **changes):
        return replace(self, **changes)

    def echo(self):
        """Effective configuration as written into every report."""
        out = {}
        for key, value in asdict(self).items():
            if key in EXECUTION_KEYS:
                continue
            out[key] = list(value) if isinstance(value, tuple) else value
        return out

    @property
    def functionals(self):
        # 'all' expands to the whole catalog
        return list(FUNCTIONAL_CATALOG) if self.functional == 'all' else [self.functional]

    def validate(self, statistical=False, remainder=False, sweep=False):
        """
        :param sweep: the run rebuilds the grid for every size in grid_sizes
        :raises ConfigError: on any unusable value, before computation starts
        """
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"Unknown model '{self.model}'; choose from {', '.join(MODEL_KINDS)}")
        for h in (self.hurst,) + tuple(self.hurst_values):
            if not 0.0 < h < 1.0:
                raise ConfigError(f"Hurst parameter must lie in (0, 1), got {h}")
        if self.horizon <= 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if self.model == 'mixed' and (self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0):
            raise ConfigError("Mixed weights need alpha, beta >= 0 and alpha + beta > 0")
        if self.spacing not in ('uniform', 'explicit'):
            raise ConfigError(f"spacing must be 'uniform' or 'explicit', got '{self.spacing}'")
        if self.spacing == 'explicit' and not self.times:
            raise ConfigError("spacing = explicit needs a 'times' list")
        if self.grid_n < 1 or any(n < 1 for n in self.grid_sizes):
            raise ConfigError("Grid sizes must be at least 1")
        for name in self.functionals:
            if name != 'constant' and name not in FUNCTIONAL_CATALOG:
                raise ConfigError(f"Unknown functional '{name}'; choose from "
                                  f"{', '.join(FUNCTIONAL_CATALOG)}")
        for name in self.test_fields:
            if name not in TEST_FIELDS:
                raise ConfigError(f"Unknown test field '{name}'")
        if self.method not in ('quadrature', 'mc'):
            raise ConfigError(f"method must be 'quadrature' or 'mc', got '{self.method}'")
        if min(self.workers, self.chunk_size, self.quadrature_nodes, self.mc_draws) < 1:
            raise ConfigError("workers, chunk_size, quadrature_nodes and mc_draws must be positive")
        if statistical and self.paths < MIN_STATISTICAL_PATHS:
            raise ConfigError(f"Statistical experiments need paths >= {MIN_STATISTICAL_PATHS}, "
                              f"got {self.paths}")
        if remainder and self.offsets < MIN_OFFSETS:
            raise ConfigError(f"The remainder fit needs at least {MIN_OFFSETS} offsets, "
                              f"got {self.offsets}")
        if sweep and self.spacing == 'explicit' and len(set(self.grid_sizes)) > 1:
            raise ConfigError("An explicit time list fixes the grid; a grid_sizes sweep needs "
                              "spacing = uniform")
        return self

    def build_model(self, hurst=None):
        h = self.hurst if hurst is None else hurst
        try:
            if self.model == 'bm':
                return CovarianceModel.bm()
            if self.model == 'fbm':
                return CovarianceModel.fbm(h)
            return CovarianceModel.mixed(self.alpha, self.beta, h)
        except DomainError as e:
            raise ConfigError(str(e)) from e

    def build_grid(self, n=None):
        try:
            if self.spacing == 'explicit':
                return TimeGrid.from_times(self.times, self.horizon)
            return TimeGrid.regular(self.grid_n if n is None else n, self.horizon)
        except DomainError as e:
            raise ConfigError(str(e)) from e


def _split_list(raw):
    if isinstance(raw, (list, tuple)):
        return list(raw)
    return [part.strip() for part in str(raw).split(',') if part.strip()]


def _coerce(key, raw, default):
    try:
        if isinstance(default, int):
            return int(float(raw)) if isinstance(raw, str) and 'e' in raw.lower() else int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = _split_list(raw)
            sample = default[0] if default else 0.0
            if isinstance(sample, str):
                return tuple(str(item).strip().strip('"\'') for item in items)
            if isinstance(sample, int):
                return tuple(int(item) for item in items)
            return tuple(float(item) for item in items)
        return str(raw).strip().strip('"\'')
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value for '{key}': {raw!r}") from e


def parse_config_text(text):
    """
    Parse `key = value` lines; '#' starts a comment, blank lines are skipped.

    :return: dict of raw string values
    """
    out = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"Line {number}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        if not key:
            raise ConfigError(f"Line {number}: empty key")
        out[key] = value
    return out


def parse_overrides(pairs):
    out = {}
    for pair in pairs or ():
        if '=' not in pair:
            raise ConfigError(f"Override {pair!r} is not of the form key=value")
        key, value = (part.strip() for part in pair.split('=', 1))
        out[key] = value
    return out


def load_config(path=None, overrides=None):
    """
    Read the config file (if any) and apply overrides on top.

    :raises ConfigError: for an unreadable file, an unknown key or a bad value
    """
    mapping = {}
    if path:
        try:
            with open(path, encoding='utf-8') as handle:
                mapping = parse_config_text(handle.read())
        except OSError as e:
            raise ConfigError(f"Could not read config file {path}: {e}") from e
        logger.debug("Loaded %d keys from %s", len(mapping), path)
    mapping.update(overrides or {})
    return ExperimentConfig.from_mapping(mapping)


def default_output_dir():
    return os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR
