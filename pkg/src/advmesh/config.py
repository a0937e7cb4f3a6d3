"""Run configuration: one structured file plus ``--set path=value`` overrides."""

from __future__ import annotations

import copy
import json
import os
import subprocess
from dataclasses import dataclass, field

import yaml

from . import __version__
from .attack import AttackConfig
from .detectors.base import Detector
from .detectors.bridge import BridgeDetector
from .detectors.pillar import PillarDetector
from .detectors.template import TemplateDetector
from .render import RayPattern, hdl64_pattern
from .scenes import Manifest, SyntheticSceneSpec, load_kitti_scene


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


DEFAULTS = {
    "seed": 0,
    "out": "out",
    "detector": "template",
    "surrogate": None,
    "dataset": {"synthetic": {"n": 10, "seed": 1, "spec": {}}},
    "eval_dataset": None,
    "pattern": {"mode": "full"},
    "attack": {},
    "sweep": {},
    "report_formats": ["text", "json"],
    "iou_threshold": 0.7,
    "train": {"epochs": 500, "rate": 0.5},
}


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b.c=value`` -> (["a", "b", "c"], parsed value); values are YAML scalars or lists."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form path=value")
    path, raw = text.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {text!r} has an empty path")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        value = raw
    return keys, value


def set_path(cfg: dict, keys: list[str], value):
    node = cfg
    for i, k in enumerate(keys[:-1]):
        nxt = node.get(k)
        if nxt is None:
            nxt = node[k] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"{'.'.join(keys[:i + 1])}: cannot set a field inside a non-mapping")
        node = nxt
    node[keys[-1]] = value


def load_config(path: str | None = None, overrides=(), **flags) -> dict:
    """Defaults, then the config file, then ``--set`` overrides, then explicit flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path}: top level must be a mapping")
        cfg = deep_merge(cfg, data)
    for o in overrides:
        set_path(cfg, *parse_override(o))
    for k, v in flags.items():
        if v is not None:
            set_path(cfg, k.split("."), v)
    validate(cfg)
    return cfg


def validate(cfg: dict):
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown top-level field(s): {', '.join(sorted(unknown))}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed: must be an integer")
    for key in ("dataset", "eval_dataset"):
        ds = cfg[key]
        if ds is None and key == "eval_dataset":
            continue
        if not isinstance(ds, dict) or len(ds) != 1 or next(iter(ds)) not in ("synthetic", "manifest", "kitti"):
            raise ConfigError(f"{key}: exactly one of synthetic, manifest, kitti is required")
    attack_config(cfg)
    mode = attack_config(cfg).mode
    if mode == "black" and not cfg.get("surrogate"):
        raise ConfigError("surrogate: black-box mode needs a surrogate detector in addition to the target")
    for fmt in cfg["report_formats"]:
        if fmt not in ("text", "json"):
            raise ConfigError(f"report_formats: unknown format {fmt!r}")


def attack_config(cfg: dict) -> AttackConfig:
    d = dict(cfg.get("attack") or {})
    d.setdefault("seed", cfg["seed"])
    try:
        return AttackConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"attack: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"attack: {exc}") from None


def ray_pattern(cfg: dict) -> RayPattern:
    try:
        return hdl64_pattern(**(cfg.get("pattern") or {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"pattern: {exc}") from None


def make_detector(spec: str, field_name: str = "detector", stage: str = "single") -> Detector:
    """``template``, ``pillar:<weights.json>`` or ``bridge:<command line>``."""
    if not isinstance(spec, str) or not spec:
        raise ConfigError(f"{field_name}: expected a detector spec string")
    kind, _, arg = spec.partition(":")
    if kind == "template":
        return TemplateDetector()
    if kind == "pillar":
        if not arg:
            raise ConfigError(f"{field_name}: pillar detector needs a weights path (pillar:<file>)")
        try:
            return PillarDetector.load(arg)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"{field_name}: cannot load pillar weights {arg}: {exc}") from None
    if kind == "bridge":
        if not arg:
            raise ConfigError(f"{field_name}: bridge detector needs a command (bridge:<cmd>)")
        return BridgeDetector(arg, stage=stage)
    raise ConfigError(f"{field_name}: unknown detector kind {kind!r}")


def load_scenes(ds: dict, field_name: str = "dataset") -> list:
    kind, body = next(iter(ds.items()))
    try:
        if kind == "synthetic":
            spec = SyntheticSceneSpec.from_dict(body.get("spec") or {})
            return list(Manifest.create(spec, int(body.get("n", 10)), int(body.get("seed", 0))).scenes())
        if kind == "manifest":
            with open(body) as fh:
                return list(Manifest.from_json(fh.read()).scenes())
        scenes = []
        for b, lab in zip(body["bins"], body["labels"], strict=True):
            with open(b, "rb") as fb, open(lab) as fl:
                scenes.append(load_kitti_scene(fb.read(), fl.read()))
        return scenes
    except ConfigError:
        raise
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{field_name}.{kind}: {exc}") from None


def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                              capture_output=True, text=True, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def snapshot(cfg: dict, command: str) -> str:
    return json.dumps({"version": version_string(), "command": command, "config": cfg}, indent=2, sort_keys=True)


@dataclass
class Artifacts:
    """Files a command promised to write; a missing one makes the run fail."""

    out: str
    expected: list[str] = field(default_factory=list)

    def path(self, name: str) -> str:
        self.expected.append(name)
        return os.path.join(self.out, name)

    def missing(self) -> list[str]:
        return [n for n in self.expected if not os.path.isfile(os.path.join(self.out, n))]
