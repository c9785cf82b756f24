"""Declarative experiment configuration: JSON with layered defaults,
dotted-path overrides, validation with field paths, and builders that turn
the resolved dict into runtime objects.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .compute import GCN, SAGE, GnnModel
from .drm import DrmConfig
from .graph import Graph, generate_synthetic, load_edge_list_file
from .perf import DEVICE_PRESETS, DeviceSpec, SamplingProfile
from .runtime import HYBRID, PURE_SIM, RuntimeConfig


class ConfigError(ValueError):
    """Validation failure; the message starts with the offending field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


DEFAULT_CONFIG: dict = {
    "dataset": {
        "kind": "synthetic",
        "num_vertices": 10_000,
        "avg_degree": 10.0,
        "num_classes": 8,
        "f0": 100,
        "seed": 7,
        "path": None,
        "format": "binary-csr",
    },
    "model": {
        "kind": SAGE,
        "dims": [100, 256, 8],
        "learning_rate": 0.1,
        "epochs": 1,
        "batch_size": 1024,
        "fanouts": [25, 10],
        "seed": 1,
    },
    "platform": [
        {"device_id": "cpu0", "preset": "epyc-7763"},
        {"device_id": "accel0", "preset": "alveo-u250"},
    ],
    "runtime": {
        "mode": PURE_SIM,
        "execution": "sequential",
        "drm": True,
        "prefetch": True,
        "cpu_workers": 8,
        "drm_damping": 0.5,
        "drm_deadband": 0.05,
        "drm_granularity": 32,
        "drm_thread_step": 1,
        "sampling_profile": None,
        "seconds_per_target": 2e-6,
        "num_iterations": None,
        "s_feat": 4,
        "overhead": 0.0,
    },
    "output": {"directory": "runs"},
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_override(cfg: dict, dotted: str, raw_value: str) -> None:
    """Apply one --set path=value override; values parse as JSON when possible."""
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], (dict, list)):
            node[key] = {}
        node = node[key]
    node[keys[-1]] = value


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(str(path), f"invalid JSON ({e})") from e
        if not isinstance(user, dict):
            raise ConfigError(str(path), "top-level config must be an object")
        cfg = deep_merge(cfg, user)
    for item in overrides:
        if "=" not in item:
            raise ConfigError("--set", f"expected path=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        apply_override(cfg, dotted, raw)
    validate_config(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _require(cond: bool, field: str, message: str) -> None:
    if not cond:
        raise ConfigError(field, message)


def validate_config(cfg: dict) -> None:
    dataset = cfg.get("dataset", {})
    model = cfg.get("model", {})
    runtime = cfg.get("runtime", {})
    platform = cfg.get("platform", [])

    dims = model.get("dims", [])
    fanouts = model.get("fanouts", [])
    _require(isinstance(dims, list) and len(dims) >= 2 and all(d > 0 for d in dims),
             "model.dims", "need at least two positive layer widths")
    _require(model.get("kind") in (GCN, SAGE), "model.kind", f"must be '{GCN}' or '{SAGE}'")
    _require(isinstance(fanouts, list) and len(fanouts) == len(dims) - 1,
             "model.fanouts", f"length must equal the layer count ({len(dims) - 1})")
    _require(all(isinstance(f, int) and f > 0 for f in fanouts),
             "model.fanouts", "entries must be positive integers")
    _require(model.get("batch_size", 0) >= 1, "model.batch_size", "must be >= 1")
    _require(model.get("epochs", 0) >= 1, "model.epochs", "must be >= 1")

    kind = dataset.get("kind")
    _require(kind in ("synthetic", "file"), "dataset.kind", "must be 'synthetic' or 'file'")
    if kind == "synthetic":
        _require(dataset.get("f0") == dims[0], "dataset.f0",
                 f"must equal model.dims[0] ({dims[0]})")
        _require(dataset.get("num_classes") == dims[-1], "dataset.num_classes",
                 f"must equal model.dims[-1] ({dims[-1]})")
        _require(dataset.get("num_vertices", 0) >= model.get("batch_size", 1),
                 "dataset.num_vertices", "must be >= model.batch_size")
    else:
        _require(bool(dataset.get("path")), "dataset.path", "required for file datasets")

    _require(isinstance(platform, list) and platform, "platform", "must be a non-empty list")
    seen = set()
    has_cpu = False
    for i, dev in enumerate(platform):
        field = f"platform[{i}]"
        _require(isinstance(dev, dict), field, "must be an object")
        dev_id = dev.get("device_id")
        _require(bool(dev_id), f"{field}.device_id", "required")
        _require(dev_id not in seen, f"{field}.device_id", f"duplicate id {dev_id!r}")
        seen.add(dev_id)
        preset = dev.get("preset")
        if preset is not None:
            _require(preset in DEVICE_PRESETS, f"{field}.preset",
                     f"unknown preset (have {sorted(DEVICE_PRESETS)})")
            merged = {**DEVICE_PRESETS[preset], **{k: v for k, v in dev.items()
                                                   if k not in ("preset",)}}
        else:
            merged = dev
        dev_kind = merged.get("kind")
        _require(dev_kind in ("cpu", "accelerator"), f"{field}.kind",
                 "must be 'cpu' or 'accelerator'")
        has_cpu = has_cpu or dev_kind == "cpu"
        for key in ("mac_parallelism", "frequency", "mem_bandwidth"):
            _require(merged.get(key, 0) and merged[key] > 0, f"{field}.{key}",
                     "must be positive")
        if dev_kind == "accelerator":
            _require(merged.get("pcie_bandwidth", 0) and merged["pcie_bandwidth"] > 0,
                     f"{field}.pcie_bandwidth", "required for accelerators")
        else:
            _require(merged.get("pcie_bandwidth") is None, f"{field}.pcie_bandwidth",
                     "only applies to accelerators")
    _require(has_cpu, "platform", "needs at least one cpu device")

    _require(runtime.get("mode") in (PURE_SIM, HYBRID), "runtime.mode",
             f"must be '{PURE_SIM}' or '{HYBRID}'")
    _require(runtime.get("execution") in ("sequential", "threaded"),
             "runtime.execution", "must be 'sequential' or 'threaded'")
    active_tasks = 3 if has_cpu else 2
    _require(runtime.get("cpu_workers", 0) >= active_tasks, "runtime.cpu_workers",
             f"must cover the active CPU tasks (>= {active_tasks})")
    _require(0 < runtime.get("drm_damping", 0.5) <= 1, "runtime.drm_damping",
             "must be in (0, 1]")
    _require(runtime.get("drm_deadband", 0.05) >= 0, "runtime.drm_deadband",
             "must be >= 0")
    _require(runtime.get("drm_granularity", 32) >= 1, "runtime.drm_granularity",
             "must be >= 1")


def build_graph(cfg: dict) -> Graph:
    dataset = cfg["dataset"]
    if dataset["kind"] == "synthetic":
        return generate_synthetic(dataset["num_vertices"], dataset["avg_degree"],
                                  dataset["num_classes"], dataset["f0"], dataset["seed"])
    return load_edge_list_file(dataset["path"], dataset.get("format", "binary-csr"))


def build_platform(cfg: dict) -> list[DeviceSpec]:
    devices = []
    for dev in cfg["platform"]:
        preset = dev.get("preset")
        merged = dict(DEVICE_PRESETS[preset]) if preset else {}
        merged.update({k: v for k, v in dev.items() if k != "preset"})
        devices.append(DeviceSpec(
            device_id=merged["device_id"],
            kind=merged["kind"],
            mac_parallelism=int(merged["mac_parallelism"]),
            frequency=float(merged["frequency"]),
            mem_bandwidth=float(merged["mem_bandwidth"]),
            pcie_bandwidth=(float(merged["pcie_bandwidth"])
                            if merged.get("pcie_bandwidth") is not None else None),
            pipelined_kernels=bool(merged.get("pipelined_kernels", False)),
        ))
    return devices


def build_profile(cfg: dict) -> SamplingProfile:
    runtime = cfg["runtime"]
    if runtime.get("sampling_profile"):
        return SamplingProfile.from_csv(runtime["sampling_profile"])
    return SamplingProfile.linear(runtime.get("seconds_per_target", 2e-6))


def build_runtime_config(cfg: dict) -> RuntimeConfig:
    model = cfg["model"]
    runtime = cfg["runtime"]
    drm_cfg = DrmConfig(
        deadband=runtime["drm_deadband"],
        damping=runtime["drm_damping"],
        granularity=runtime["drm_granularity"],
        thread_step=runtime["drm_thread_step"],
    )
    return RuntimeConfig(
        batch_size=model["batch_size"],
        fanouts=list(model["fanouts"]),
        learning_rate=model["learning_rate"],
        seed=model["seed"],
        mode=runtime["mode"],
        execution=runtime["execution"],
        drm_enabled=bool(runtime["drm"]),
        prefetch=bool(runtime["prefetch"]),
        cpu_workers=runtime["cpu_workers"],
        drm=drm_cfg,
        s_feat=runtime["s_feat"],
        overhead=runtime["overhead"],
    )


def build_model(cfg: dict) -> GnnModel:
    model = cfg["model"]
    return GnnModel.create(model["kind"], model["dims"], seed=model["seed"])
