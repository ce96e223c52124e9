"""Sectioned key=value run configuration.

Format: ``[section]`` headers, ``key = value`` lines, ``#`` comments,
UTF-8.  Every key is declared in the schema below with a type and a
default; unknown sections or keys are rejected so typos cannot silently
fall back to defaults.  Each command writes its fully-resolved
configuration next to its outputs.
"""

from __future__ import annotations

import numpy as np


class ConfigError(ValueError):
    pass


def _int_list(text: str):
    return [int(v) for v in text.replace(",", " ").split()]


def _float_list(text: str):
    return [float(v) for v in text.replace(",", " ").split()]


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "seed": (int, 12345),
        "workers": (int, 0),            # 0 = available parallelism
    },
    "data": {
        "source": (str, "synthetic"),   # synthetic | idx
        "n_per_class": (int, 250),
        "test_n_per_class": (int, 50),
        "idx_train_images": (str, ""),
        "idx_train_labels": (str, ""),
        "idx_test_images": (str, ""),
        "idx_test_labels": (str, ""),
    },
    "ebm": {
        "preset": (str, "energy-desk16"),
        "dtype": (str, "float64"),      # float64 | float32
    },
    "classifier": {
        "preset": (str, "clf-desk16"),
        "dtype": (str, "float64"),
        "epochs": (int, 40),
        "lr": (float, 0.01),
        "momentum": (float, 0.9),
        "batch_size": (int, 64),
    },
    "train": {
        "total_steps": (int, 20000),
        "switch_step": (int, 8000),
        "lr_adam": (float, 1e-4),
        "lr_sgd": (float, 5e-5),
        "data_noise": (float, 0.02),
        "batch_pos": (int, 64),
        "batch_neg": (int, 64),
        "langevin_steps": (int, 100),
        "tau": (float, 0.01),
    },
    "langevin": {
        "tau": (float, 0.01),
        "steps": (int, 1500),
        "eta": (float, 1.0),
    },
    "eot": {
        "replicates": (int, 150),
    },
    "attack": {
        "norm": (str, "linf"),
        "epsilon": (float, 8.0 / 255.0),
        "alpha": (float, 2.0 / 255.0),
        "attacks": (int, 50),
        "h_adv": (int, 15),
        "h_def": (int, 150),
        "restarts": (int, 5),
        "gradient": (str, "bpda_eot"),
        "images": (int, 200),
        "image_offset": (int, 0),
    },
    "ksweep": {
        "grid": (_int_list, [0, 10, 100, 500, 1000, 1500, 2000]),
        "h_adv": (int, 7),
        "images": (int, 50),
    },
    "lyapunov": {
        "eta_points": (int, 21),
        "eta_lo": (float, 0.05),
        "eta_hi": (float, 5.0),
        "t_steps": (int, 5000),
        "renorm_interval": (int, 1),
        "delta0": (float, 1e-6),
        "burn_in": (int, 500),
    },
    "fid": {
        "grid": (_int_list, [0, 100, 500, 1000, 1500, 2000]),
        "samples": (int, 200),
    },
    "transfer": {
        "defense_grid": (_int_list, [10, 1500]),
        "images": (int, 200),
    },
    "purify": {
        "image_index": (int, 0),
    },
    "paths": {
        "ebm_checkpoint": (str, ""),
        "ebm_nonconvergent_checkpoint": (str, ""),
        "clf_checkpoint": (str, ""),
    },
}


def defaults() -> dict:
    return {sec: {k: v for k, (_, v) in keys.items()} for sec, keys in SCHEMA.items()}


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse config text against the schema; unknown keys are errors."""
    cfg = defaults()
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r} in [{section}]")
        parser, _ = SCHEMA[section][key]
        try:
            cfg[section][key] = parser(value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {section}.{key}: {e}")
    return cfg


def load(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return parse_text(f.read(), source=str(path))


def render(cfg: dict) -> str:
    """Serialize a resolved config back to the sectioned text format."""
    chunks = []
    for sec in SCHEMA:
        chunks.append(f"[{sec}]")
        for key in SCHEMA[sec]:
            v = cfg[sec][key]
            if isinstance(v, (list, tuple, np.ndarray)):
                v = ", ".join(str(x) for x in v)
            chunks.append(f"{key} = {v}")
        chunks.append("")
    return "\n".join(chunks)


def dtype_of(name: str):
    table = {"float64": np.float64, "float32": np.float32}
    if name not in table:
        raise ConfigError(f"dtype must be float64 or float32, got {name!r}")
    return table[name]
