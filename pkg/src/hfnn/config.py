"""Experiment configuration: sectioned ``key = value`` text via configparser.

Every key has a type and a default; unknown keys and bad values are reported
with their ``section.key`` path. ``to_text()`` writes the effective config,
which loads back to an equal object.
"""

from __future__ import annotations

import configparser
import io
import math
import os

from .errors import ConfigurationError

# scenario names accepted in [scenario] kind
SCENARIOS = ("none", "cross-section", "longitudinal", "random")

# default sweep of eight inlet velocities (m/s)
TABLE_V = (0.04, 0.05, 0.06, 0.08, 0.10, 0.12, 0.13, 0.15)


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return tuple(float(x) for x in s.replace(",", " ").split())


def _ints(s):
    return tuple(int(x) for x in s.replace(",", " ").split())


def _opt_float(s):
    return None if s.strip() in ("", "none", "None") else float(s)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return ""
    return str(v)


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "model_kind": (str, "pinn"),
        "seeds": (_ints, (0,)),
        "output_dir": (str, "runs"),
        "run_id": (str, ""),
        "threads": (int, 0),
    },
    "domain": {
        "kind": (str, "straight-pipe"),
        "R": (float, 0.010065),
        "length": (float, 0.26009),
        "center_fraction": (float, 0.5),
        "max_radius_ratio": (float, 2.0),
        "shape_width": (_opt_float, None),
    },
    "fluid": {
        "rho": (float, 1060.0),
        "mu": (float, 0.00399),
        "V": (float, 0.1),
        "V_list": (_floats, TABLE_V),
        "p_out": (float, 0.0),
    },
    "sampling": {
        "inlet": (int, 2000),
        "wall": (int, 10000),
        "outlet": (int, 2000),
        "volume": (int, 100000),
        "split": (_floats, (0.68, 0.02, 0.30)),
    },
    "scenario": {
        "kind": (str, "none"),
        "n_slices": (int, 5),
        "fraction": (float, 0.003),
        "tolerance": (_opt_float, None),
    },
    "noise": {
        "level": (float, 0.0),
    },
    "network": {
        "hidden_layers": (int, 4),
        "hidden_width": (int, 64),
        "kind": (str, "modified-mlp"),
        "embedding": (str, "fourier"),
        "fourier_e": (int, 32),
        "fourier_sigma": (float, 1.0),
        "factorization": (str, "rwf"),
        "rwf_mu": (float, 0.5),
        "rwf_sigma": (float, 0.1),
        "nondimensional": (_bool, True),
    },
    "operator": {
        "m1": (int, 64),
        "m2": (int, 64),
        "per_output": (int, 32),
        "branch_layers": (int, 3),
        "branch_width": (int, 64),
        "branch_kind": (str, "mlp"),
        "branch_factorization": (str, "rwf"),
        "V_ref": (float, 0.1),
        "data_points": (int, 5000),
        "train_V": (_floats, (0.04, 0.06, 0.10, 0.12, 0.15)),
        "test_V": (_floats, (0.05, 0.08, 0.13)),
    },
    "train": {
        "iterations": (int, 20000),
        "batch_size": (int, 256),
        "lr": (float, 1e-3),
        "decay": (_bool, True),
        "decay_rate": (float, 0.95),
        "decay_steps": (int, 3000),
        "grad_norm": (_bool, True),
        "gn_momentum": (float, 0.9),
        "gn_every": (int, 1000),
        "warmup_iterations": (int, 15000),
        "log_every": (int, 100),
        "val_every": (int, 500),
        "checkpoint_every": (int, 1000),
        "outlet_mode": (str, "auto"),
    },
    "transfer": {
        "baseline_V": (float, 0.10),
        "target_V": (_floats, (0.12,)),
        "window": (int, 200),
    },
    "eval": {
        "infer_points": (int, 1_000_000),
        "field_format": (str, "csv"),
    },
}


class Section:
    def __init__(self, name, values):
        object.__setattr__(self, "_name", name)
        object.__setattr__(self, "_values", dict(values))

    def __getattr__(self, k):
        try:
            return self._values[k]
        except KeyError:
            raise AttributeError(f"{self._name}.{k}") from None

    def __setattr__(self, k, v):
        raise AttributeError("config sections are read-only; use ExperimentConfig.replace")

    def items(self):
        return self._values.items()

    def __eq__(self, other):
        return isinstance(other, Section) and self._values == other._values


class ExperimentConfig:
    def __init__(self, values=None):
        values = values or {}
        self._sections = {}
        for sec, keys in SCHEMA.items():
            given = values.get(sec, {})
            self._sections[sec] = Section(sec, {k: given.get(k, d) for k, (_, d) in keys.items()})
        self._validate()

    def __getattr__(self, name):
        secs = self.__dict__.get("_sections", {})
        if name in secs:
            return secs[name]
        raise AttributeError(name)

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self._sections == other._sections

    def as_dict(self):
        return {s: dict(sec.items()) for s, sec in self._sections.items()}

    def replace(self, **dotted):
        """Copy with ``section__key=value`` overrides (typed values)."""
        d = self.as_dict()
        for k, v in dotted.items():
            sec, key = k.split("__", 1)
            if sec not in SCHEMA or key not in SCHEMA[sec]:
                raise ConfigurationError(f"{sec}.{key}: unknown key")
            d[sec][key] = v
        return ExperimentConfig(d)

    def _validate(self):
        errs = []
        r, t, f, n, o = self.run, self.train, self.fluid, self.network, self.operator
        if r.model_kind not in ("deepnn", "pinn", "wu-pinn", "deeponet", "pi-deeponet"):
            errs.append(f"run.model_kind: unknown kind {r.model_kind!r}")
        if not r.seeds:
            errs.append("run.seeds: need at least one seed")
        if self.scenario.kind not in SCENARIOS:
            errs.append(f"scenario.kind: must be one of {SCENARIOS}")
        if t.iterations < 0:
            errs.append("train.iterations: must be >= 0")
        if t.batch_size < 1:
            errs.append("train.batch_size: must be >= 1")
        if r.model_kind == "wu-pinn" and not 0 <= t.warmup_iterations < max(t.iterations, 1):
            errs.append("train.warmup_iterations: must be < train.iterations")
        if r.model_kind in ("deeponet", "pi-deeponet") and not o.train_V:
            errs.append("operator.train_V: V-list must be non-empty for operator experiments")
        if not f.V_list:
            errs.append("fluid.V_list: must be non-empty")
        if n.hidden_layers < 1 or n.hidden_width < 1:
            errs.append("network: hidden_layers and hidden_width must be >= 1")
        if len(self.sampling.split) != 3 or not math.isclose(sum(self.sampling.split), 1.0):
            errs.append("sampling.split: three fractions summing to 1")
        if r.threads < 0:
            errs.append("run.threads: must be >= 0")
        if self.eval.field_format not in ("csv", "vtk-legacy"):
            errs.append("eval.field_format: csv or vtk-legacy")
        if errs:
            raise ConfigurationError("; ".join(errs))

    def to_text(self):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for s, sec in self._sections.items():
            cp[s] = {k: _fmt(v) for k, v in sec.items()}

        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"config syntax: {exc}") from None
    values, errs = {}, []
    for sec in cp.sections():
        if sec not in SCHEMA:
            errs.append(f"{sec}: unknown section")
            continue
        for key, raw in cp[sec].items():
            if key not in SCHEMA[sec]:
                errs.append(f"{sec}.{key}: unknown key")
                continue
            conv = SCHEMA[sec][key][0]
            try:
                values.setdefault(sec, {})[key] = conv(raw)
            except ValueError as exc:
                errs.append(f"{sec}.{key}: {exc}")
    if errs:
        raise ConfigurationError("; ".join(errs))
    return ExperimentConfig(values)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read ``path`` (or defaults) and apply ``section.key=value`` overrides."""
    text = ""
    if path is not None:
        if not os.path.exists(path):
            raise ConfigurationError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as f:
            text = f.read()
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"config syntax: {exc}") from None
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigurationError(f"override {ov!r}: expected section.key=value")
        k, v = ov.split("=", 1)
        sec, key = k.strip().split(".", 1)
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp[sec][key] = v.strip()

    buf = io.StringIO()
    cp.write(buf)
    return parse_config(buf.getvalue())
