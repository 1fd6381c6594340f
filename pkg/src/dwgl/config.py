"""Dotted-key configuration: INI sections on disk, flat ``section.key`` in code.

Every run echoes its fully resolved configuration into the output directory
as a ``resolved-config`` file (one ``key = value`` line per entry), so results
are self-describing.
"""

import configparser
import os

from .errors import ConfigError


def _bool(s):
    v = str(s).strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s}")


def _choice(*options):
    def parse(s):
        if s not in options:
            raise ValueError(f"must be one of {options}")
        return s
    return parse


def _threshold(s):
    from .pruning import parse_threshold_rule
    parse_threshold_rule(s)  # validates; value stays a string
    return s


# key -> (default, parser)
DEFAULTS = {
    "net.preset": ("resnet-tiny-8", str),
    "net.stages": ("", str),              # e.g. "1:8,1:16,1:32"; empty = use preset
    "data.kind": ("synth", _choice("synth", "cifar10")),
    "data.classes": (6, int),
    "data.per_class": (120, int),
    "data.size": (16, int),
    "data.noise": (0.1, float),
    "data.dir": ("", str),
    "reg.lambda": (1e-4, float),
    "reg.lambda_g": (0.02, float),
    "reg.directed": (True, _bool),
    "reg.steepness": (9.22, float),
    "reg.epsilon": (1e-12, float),
    "reg.mode": ("subgradient", _choice("subgradient", "proximal")),
    "reg.direction": ("increasing", _choice("increasing", "decreasing")),
    "reg.l2": ("decoupled", _choice("decoupled", "coupled")),
    "prune.threshold": ("mean", _threshold),
    "prune.strategy": ("intersection", _choice("intersection", "union")),
    "train.epochs": (20, int),
    "train.finetune_epochs": (10, int),
    "train.lr": (0.05, float),
    "train.lr_decay": (0.1, float),
    "train.lr_decay_every": (15, int),
    "train.batch_size": (32, int),
    "train.warmup_epochs": (2, int),
    "train.holdout": (0.1, float),
    "run.rounds": (3, int),
    "run.compare": (False, _bool),
    "run.seed": (42, int),
    "report.figures": (True, _bool),
}


def default_config():
    return {k: v for k, (v, _) in DEFAULTS.items()}


def _set(cfg, key, raw):
    if key not in DEFAULTS:
        raise ConfigError("unknown config key", key=key)
    _, parser = DEFAULTS[key]
    try:
        cfg[key] = parser(raw) if isinstance(raw, str) else raw
    except ValueError as e:
        raise ConfigError("bad config value", key=key, value=raw, reason=str(e)) from None


def load_config(path=None):
    """Defaults overlaid with an INI file of ``[section] key = value`` entries."""
    cfg = default_config()
    if path is None:
        return cfg
    if not os.path.exists(path):
        raise ConfigError("config file not found", path=str(path))
    ini = configparser.ConfigParser()
    try:
        ini.read(path)
    except configparser.Error as e:
        raise ConfigError("config file unreadable", path=str(path), reason=str(e)) from None
    for section in ini.sections():
        for key, raw in ini.items(section):
            _set(cfg, f"{section}.{key}", raw)
    return cfg


def apply_overrides(cfg, overrides):
    """Apply ``key=value`` strings (dotted keys) on top of ``cfg`` in place."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError("override must look like key=value", override=item)
        key, raw = item.split("=", 1)
        _set(cfg, key.strip(), raw.strip())
    return cfg


def parse_stages(spec):
    """Parse ``blocks:channels,...`` into [(blocks, channels), ...]."""
    stages = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            blocks, channels = part.split(":")
            stages.append((int(blocks), int(channels)))
        except ValueError:
            raise ConfigError("bad stage spec (want blocks:channels,...)", stages=spec) from None
    if not stages:
        raise ConfigError("empty stage spec", stages=spec)
    return stages


def write_resolved(cfg, outdir):
    path = os.path.join(outdir, "resolved-config")
    with open(path, "w") as fh:
        for key in sorted(cfg):
            fh.write(f"{key} = {cfg[key]}\n")
    return path
