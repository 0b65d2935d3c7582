"""Run configuration: one JSON document covering data, model, loss, policy,
schedule, segmentation, and metrics settings.

Unknown keys are rejected (every violated key is listed in the error), and a
run always echoes its fully resolved configuration so it can be reproduced
from the run directory alone. The environment variable MASKPOLICY_SEED
overrides the data seed for CI.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any

DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {
        "shape": [16, 32, 32],
        "num_objects": 10,
        "noise_sigma": 0.05,
        "radius_range": [9.0, 14.0],
        "membrane_width": 1,
        "seed": 7,
        "train_volumes": 24,
        "eval_volumes": 6,
        "eval_seed": 1007,
    },
    "model": {
        "patch_size": 8,
        "embed_dim": 32,
        "enc_layers": 4,
        "dec_layers": 2,
        "hog_bins": 9,
    },
    "loss": {
        "lambda_mse": 0.1,
        "lambda_hog": 1.0,
        "enable_mse": True,
        "enable_hog": True,
    },
    "policy": {
        "gamma": 0.99,
        "horizon": 4,
        "update_period": 4,
        "hidden": 32,
        "entropy_coef": 0.0,
        "relative_discount": False,
        "lr": 0.003,
        "init_scale": 0.01,
    },
    "schedule": {
        "phase1_iters": 2000,
        "phase2_iters": 2000,
        "batch_size": 1,
        "sample_actions": True,
        "lr": 0.001,
        "seed": 1,
    },
    "probe": {
        "iters": 2000,
        "lr": 0.02,
        "seed": 5,
    },
    "seg": {
        "seed_threshold": 0.9,
        "bias": 0.2,
        "merge_threshold": 0.5,
        "quantile": None,
    },
    "metrics": {
        "log_base": "nats",
        "include_background": False,
    },
}


class ConfigError(ValueError):
    """Invalid run configuration; `errors` lists every violated key."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid config: " + "; ".join(errors))


def resolve_config(overrides: dict | None = None) -> dict:
    """Merge user overrides onto the defaults, rejecting unknown keys.

    MASKPOLICY_SEED, when set, replaces data.seed in the resolved document.
    """
    cfg = copy.deepcopy(DEFAULTS)
    errors: list[str] = []
    if overrides:
        if not isinstance(overrides, dict):
            errors.append("top level must be a JSON object")
        else:
            for section, values in overrides.items():
                if section not in cfg:
                    errors.append(f"unknown section {section!r}")
                    continue
                if not isinstance(values, dict):
                    errors.append(f"section {section!r} must be an object")
                    continue
                for key, value in values.items():
                    if key not in cfg[section]:
                        errors.append(f"unknown key {section}.{key}")
                        continue
                    cfg[section][key] = value
    errors.extend(_validate(cfg))
    if errors:
        raise ConfigError(errors)
    env_seed = os.environ.get("MASKPOLICY_SEED")
    if env_seed is not None:
        cfg["data"]["seed"] = int(env_seed)
    return cfg


def _validate(cfg: dict) -> list[str]:
    errors = []
    shape = cfg["data"]["shape"]
    if (not isinstance(shape, (list, tuple)) or len(shape) != 3
            or not all(isinstance(v, int) and v > 0 for v in shape)):
        errors.append("data.shape must be three positive integers")
    p = cfg["model"]["patch_size"]
    if not isinstance(p, int) or p < 4 or p % 4:
        errors.append("model.patch_size must be a positive multiple of 4")
    elif isinstance(shape, (list, tuple)) and len(shape) == 3 \
            and all(isinstance(v, int) for v in shape):
        d, h, w = shape
        if d % (p // 4) or h % p or w % p:
            errors.append(
                f"data.shape {list(shape)} is not tileable by patches "
                f"({p // 4}, {p}, {p})")
    rr = cfg["data"]["radius_range"]
    if (not isinstance(rr, (list, tuple)) or len(rr) != 2
            or not all(isinstance(v, (int, float)) and v > 0 for v in rr)
            or rr[0] > rr[1]):
        errors.append("data.radius_range must be two positive numbers, low <= high")
    if not isinstance(cfg["data"]["membrane_width"], int) \
            or cfg["data"]["membrane_width"] < 0:
        errors.append("data.membrane_width must be a non-negative integer")
    if cfg["model"]["hog_bins"] < 2:
        errors.append("model.hog_bins must be >= 2")
    if not (0.0 < cfg["policy"]["gamma"] <= 1.0):
        errors.append("policy.gamma must lie in (0, 1]")
    if cfg["policy"]["horizon"] < 1:
        errors.append("policy.horizon must be >= 1")
    if cfg["metrics"]["log_base"] not in ("nats", "bits"):
        errors.append("metrics.log_base must be 'nats' or 'bits'")
    for key in ("seed_threshold", "bias", "merge_threshold"):
        v = cfg["seg"][key]
        if not isinstance(v, (int, float)) or not (0.0 <= v <= 1.5):
            errors.append(f"seg.{key} must be a number in [0, 1.5]")
    q = cfg["seg"]["quantile"]
    if q is not None and not (0.0 <= q <= 1.0):
        errors.append("seg.quantile must be null or in [0, 1]")
    return errors


def load_config(path: str | Path | None) -> dict:
    """Read overrides from a JSON file (or use pure defaults) and resolve."""
    overrides = None
    if path is not None:
        overrides = json.loads(Path(path).read_text())
    return resolve_config(overrides)


def write_resolved(cfg: dict, run_dir: str | Path) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))


# --- factories from a resolved config ----------------------------------------

def mim_config(cfg: dict):
    from .hog import HogConfig
    from .mim import MimConfig
    m = cfg["model"]
    return MimConfig(patch_size=m["patch_size"], embed_dim=m["embed_dim"],
                     enc_layers=m["enc_layers"], dec_layers=m["dec_layers"],
                     hog=HogConfig(num_bins=m["hog_bins"]))


def loss_config(cfg: dict):
    from .mim import LossConfig
    l = cfg["loss"]
    return LossConfig(lambda_mse=l["lambda_mse"], lambda_hog=l["lambda_hog"],
                      enable_mse=l["enable_mse"], enable_hog=l["enable_hog"])


def policy_config(cfg: dict):
    from .policy import PolicyConfig
    p = cfg["policy"]
    return PolicyConfig(embed_dim=cfg["model"]["embed_dim"], hidden=p["hidden"],
                        gamma=p["gamma"], horizon=p["horizon"],
                        entropy_coef=p["entropy_coef"],
                        relative_discount=p["relative_discount"])


def schedule(cfg: dict):
    from .trainer import Schedule
    s = cfg["schedule"]
    return Schedule(phase1_iters=s["phase1_iters"], phase2_iters=s["phase2_iters"],
                    policy_period=cfg["policy"]["update_period"],
                    batch_size=s["batch_size"], sample_actions=s["sample_actions"])


def phantom_kwargs(cfg: dict) -> dict:
    d = cfg["data"]
    return {"radius_range": tuple(d["radius_range"]),
            "membrane_width": d["membrane_width"]}


def train_pool(cfg: dict):
    from .trainer import make_phantom_pool
    d = cfg["data"]
    return make_phantom_pool(d["seed"], tuple(d["shape"]), d["num_objects"],
                             d["noise_sigma"], d["train_volumes"],
                             **phantom_kwargs(cfg))


def eval_pool(cfg: dict):
    from .trainer import make_phantom_pool
    d = cfg["data"]
    return make_phantom_pool(d["eval_seed"], tuple(d["shape"]), d["num_objects"],
                             d["noise_sigma"], d["eval_volumes"],
                             **phantom_kwargs(cfg))
