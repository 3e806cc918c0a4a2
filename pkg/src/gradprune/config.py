"""Run configuration: a strict INI file with typed, validated keys.

Unknown sections or keys are rejected outright so a misspelled option can
never fall back to a silent default. Seeds are mandatory; nothing in a run
draws entropy from the clock.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


_REQUIRED = object()


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s):
    s = s.strip()
    return [int(tok) for tok in s.split(",") if tok.strip()] if s else []


def _parse_str_list(s):
    s = s.strip()
    return [tok.strip() for tok in s.split(",") if tok.strip()] if s else []


# section -> key -> (parser, default-or-required)
_SCHEMA = {
    "model": {
        "name": (str, _REQUIRED),
        "num_classes": (int, 10),
        "in_channels": (int, None),
        "image_size": (int, None),
        "resnet_strategy": (str, "SHARED_INDEX"),
        "widths": (_parse_int_list, []),
    },
    "dataset": {
        "kind": (str, _REQUIRED),
        "train_images": (str, ""),
        "train_labels": (str, ""),
        "test_images": (str, ""),
        "test_labels": (str, ""),
        "train_files": (_parse_str_list, []),
        "test_files": (_parse_str_list, []),
        "train_limit": (int, 0),
        "test_limit": (int, 0),
        "standardize": (_parse_bool, True),
        "mean": (_parse_str_list, []),
        "std": (_parse_str_list, []),
        "augment": (_parse_bool, False),
        "synth_n": (int, 512),
        "synth_test_n": (int, 256),
        "synth_seed": (int, 7),
    },
    "schedule": {
        "t_prune": (float, _REQUIRED),
        "epochs": (int, _REQUIRED),
        "remove_ratio": (float, 0.5),
        "criterion": (str, "GN_G"),
        "mode": (str, "PGP"),
    },
    "optim": {
        "alpha": (float, 0.01),
        "beta": (float, 0.9),
        "weight_decay": (float, 0.0),
        "lr_decay_epochs": (_parse_int_list, []),
        "lr_decay_factor": (float, 10.0),
    },
    "run": {
        "batch_size": (int, 64),
        "eval_batch_size": (int, 256),
        "init_seed": (int, _REQUIRED),
        "shuffle_seed": (int, _REQUIRED),
        "finetune_epochs": (int, 0),
        "output_dir": (str, ""),
        "dtype": (str, "float64"),
        "record_scores": (_parse_bool, True),
    },
}

_DATASET_DEFAULT_STATS = {
    "mnist": ([0.1307], [0.3081]),
    "cifar10": ([0.4914, 0.4822, 0.4465], [0.2470, 0.2435, 0.2616]),
    "synth": ([0.5], [0.5]),
}


@dataclass
class RunConfig:
    sections: dict = field(default_factory=dict)

    def __getitem__(self, section):
        return self.sections[section]

    def get(self, section, key):
        return self.sections[section][key]

    def to_dict(self):
        return {s: dict(v) for s, v in self.sections.items()}


def _coerce(section, key, raw):
    parser, _ = _SCHEMA[section][key]
    try:
        return parser(raw)
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} ({e})") from None


def load_config(path) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        read = cp.read(path)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    if not read:
        raise ConfigError(f"config file not found: {path}")
    parsed = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        parsed[section] = {}
        for key, raw in cp[section].items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            parsed[section][key] = _coerce(section, key, raw)
    return finalize_config(parsed)


def finalize_config(parsed: dict) -> RunConfig:
    """Fill defaults, enforce required keys and cross-field consistency."""
    for section, keys in parsed.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key in keys:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
    out = {}
    for section, schema in _SCHEMA.items():
        out[section] = {}
        given = parsed.get(section, {})
        for key, (_, default) in schema.items():
            if key in given:
                out[section][key] = given[key]
            elif default is _REQUIRED:
                raise ConfigError(f"missing required key '{key}' in section [{section}]")
            else:
                out[section][key] = default

    kind = out["dataset"]["kind"]
    if kind not in _DATASET_DEFAULT_STATS:
        raise ConfigError(f"[dataset] kind must be one of {sorted(_DATASET_DEFAULT_STATS)}, "
                          f"got '{kind}'")
    if out["model"]["name"] not in ("lenet5", "small_vgg", "small_resnet"):
        raise ConfigError(f"[model] name '{out['model']['name']}' unknown")
    if out["model"]["in_channels"] is None:
        out["model"]["in_channels"] = 3 if kind == "cifar10" else 1
    if out["model"]["image_size"] is None:
        out["model"]["image_size"] = 32 if kind == "cifar10" else 28
    mean, std = out["dataset"]["mean"], out["dataset"]["std"]
    default_mean, default_std = _DATASET_DEFAULT_STATS[kind]
    out["dataset"]["mean"] = [float(v) for v in mean] if mean else default_mean
    out["dataset"]["std"] = [float(v) for v in std] if std else default_std
    if out["run"]["dtype"] not in ("float64", "float32"):
        raise ConfigError(f"[run] dtype must be float64 or float32")
    if kind == "mnist":
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            if not out["dataset"][k]:
                raise ConfigError(f"[dataset] '{k}' is required for kind=mnist")
    if kind == "cifar10":
        for k in ("train_files", "test_files"):
            if not out["dataset"][k]:
                raise ConfigError(f"[dataset] '{k}' is required for kind=cifar10")
    return RunConfig(out)
