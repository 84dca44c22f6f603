"""Seeded synthetic multivariate recordings with injected anomalies.

Signals are noisy linear mixes of a few periodic drivers. All recordings are
consecutive stretches of one process, so test data only departs from the
training data where anomalies are injected. Two signal pairs are tied
together:

* the *correlated pair* ``(broken, partner)`` follow the same driver
  (correlation above 0.99 in normal data); a **correlation loss** anomaly
  replaces the broken signal by a flat, noisy line;
* the *relation pair* ``(drift, reference)`` keep a fixed gain; a **change
  in relation** anomaly ramps that gain up over the span.

Files written by :func:`write_dataset`::

    train.csv  valid.csv                  normal data only
    test_nofault.csv                      normal data
    test_correlation_loss.csv             normal with injected spans
    test_change_in_relation.csv           normal with injected spans
    schema.yaml                           table layout for load_series

Each CSV has a ``time`` column, signals ``s1`` .. ``sN`` and an ``anomaly``
column marking exactly the injected rows.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import yaml

from .exceptions import ConfigurationError


@dataclass
class SynthConfig:
    n_signals: int = 11
    n_drivers: int = 3
    components: int = 2
    broken: int = 6
    partner: int = 7
    drift: int = 2
    reference: int = 3
    train_rows: int = 6000
    valid_rows: int = 2000
    test_rows: int = 3000
    spans_per_file: int = 3
    span_length: int = 400
    noise: float = 0.01
    flat_noise: float = 0.05
    max_gain: float = 1.8
    periods: tuple = (24, 32, 48, 64, 96)
    seed: int = 42

    def __post_init__(self):
        idx = (self.broken, self.partner, self.drift, self.reference)
        if len(set(idx)) != 4 or not all(0 <= i < self.n_signals for i in idx):
            raise ConfigurationError("broken, partner, drift and reference must be distinct signal indices")
        if not self.periods or min(self.periods) <= 0:
            raise ConfigurationError("periods must be positive")
        self.periods = tuple(float(p) for p in self.periods)
        if self.spans_per_file * (self.span_length + 200) > self.test_rows:
            raise ConfigurationError("test_rows too small for the requested anomaly spans")

    @classmethod
    def from_dict(cls, d: dict | None) -> "SynthConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


class _Process:
    """Fixed random mixture defining the normal behaviour."""

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        self.cfg = cfg
        k = cfg.components
        self.periods = rng.choice(cfg.periods, size=(cfg.n_drivers, k))
        self.phases = rng.uniform(0, 2 * np.pi, size=(cfg.n_drivers, k))
        self.amps = rng.uniform(0.3, 1.0, size=(cfg.n_drivers, k))
        self.clock = 0
        self.mix = rng.normal(0.0, 1.0, size=(cfg.n_signals, cfg.n_drivers))
        self.offset = rng.uniform(-1.0, 1.0, size=cfg.n_signals)
        # both members of the correlated pair follow driver 0 alone
        self.mix[cfg.broken] = 0.0
        self.mix[cfg.broken, 0] = 1.0
        self.mix[cfg.partner] = 0.0
        self.mix[cfg.partner, 0] = 0.8
        # the relation pair: drift == gain * reference
        self.mix[cfg.reference] = 0.0
        self.mix[cfg.reference, 1] = 1.0
        self.mix[cfg.drift] = self.mix[cfg.reference]
        self.offset[cfg.drift] = self.offset[cfg.reference] = 0.0

    def drivers(self, t: np.ndarray) -> np.ndarray:
        arg = 2 * np.pi * t[:, None, None] / self.periods[None] + self.phases[None]
        return np.sum(self.amps[None] * np.sin(arg), axis=2)  # (T, drivers)

    def normal(self, rows: int, rng: np.random.Generator) -> np.ndarray:
        """Next ``rows`` samples; consecutive calls continue the same clock."""
        t = np.arange(self.clock, self.clock + rows, dtype=np.float64)
        self.clock += rows
        d = self.drivers(t)
        x = d @ self.mix.T + self.offset
        return x + rng.normal(0.0, self.cfg.noise, size=x.shape)


def _span_starts(cfg: SynthConfig, rows: int, rng: np.random.Generator) -> list[int]:
    seg = rows // cfg.spans_per_file
    return [
        int(i * seg + rng.integers(100, max(101, seg - cfg.span_length - 100)))
        for i in range(cfg.spans_per_file)
    ]


def generate(cfg: SynthConfig | None = None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """All recordings as ``{name: (values (T, n), labels (T,))}``."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    proc = _Process(cfg, rng)
    out = {}
    for name, rows in (("train", cfg.train_rows), ("valid", cfg.valid_rows), ("test_nofault", cfg.test_rows)):
        out[name] = (proc.normal(rows, rng), np.zeros(rows, dtype=np.int8))

    x = proc.normal(cfg.test_rows, rng)
    labels = np.zeros(cfg.test_rows, dtype=np.int8)
    b = cfg.broken
    scale = np.std(x[:, b])
    for s in _span_starts(cfg, cfg.test_rows, rng):
        e = s + cfg.span_length
        level = x[s, b]
        x[s:e, b] = level + rng.normal(0.0, cfg.flat_noise * scale, size=e - s)
        labels[s:e] = 1
    out["test_correlation_loss"] = (x, labels)

    x = proc.normal(cfg.test_rows, rng)
    labels = np.zeros(cfg.test_rows, dtype=np.int8)
    ref = x[:, cfg.reference]
    for s in _span_starts(cfg, cfg.test_rows, rng):
        e = s + cfg.span_length
        ramp = np.minimum(1.0, np.linspace(0.0, 2.0, e - s))
        gain = 1.0 + (cfg.max_gain - 1.0) * ramp
        x[s:e, cfg.drift] = gain * ref[s:e] + rng.normal(0.0, cfg.noise, size=e - s)
        labels[s:e] = 1
    out["test_change_in_relation"] = (x, labels)
    return out


def signal_names(cfg: SynthConfig) -> list[str]:
    return [f"s{i + 1}" for i in range(cfg.n_signals)]


def write_dataset(directory, cfg: SynthConfig | None = None) -> dict[str, Path]:
    """Generate the recordings and write them, plus ``schema.yaml``, to ``directory``."""
    cfg = cfg or SynthConfig()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = signal_names(cfg)
    paths = {}
    for name, (values, labels) in generate(cfg).items():
        path = d / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + names + ["anomaly"])
            for t, (row, lab) in enumerate(zip(values, labels)):
                w.writerow([t] + [repr(float(v)) for v in row] + [int(lab)])
        paths[name] = path
    schema = {"delimiter": ",", "timestamp": "time", "channels": names, "label": "anomaly"}
    (d / "schema.yaml").write_text(yaml.safe_dump(schema, sort_keys=False))
    (d / "synth_config.yaml").write_text(yaml.safe_dump({**asdict(cfg), "periods": list(cfg.periods)}, sort_keys=False))
    paths["schema"] = d / "schema.yaml"
    return paths
