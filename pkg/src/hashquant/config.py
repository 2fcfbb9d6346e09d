"""Run configuration: one TOML file drives the whole pipeline."""

from __future__ import annotations

import os
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .agent import DdpgConfig
from .oracle import NgpConfig
from .search import SearchConfig
from .sim import HwConfig


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


@dataclass
class RunConfig:
    ngp: NgpConfig
    image_path: str
    train_steps: int
    oracle_seed: int
    checkpoint_name: str
    hw: HwConfig
    agent: DdpgConfig
    search: SearchConfig
    out_dir: str

    @property
    def checkpoint_path(self) -> str:
        return os.path.join(self.out_dir, self.checkpoint_name)


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"section [{name}] must be a table")
    return dict(sec)


def _build(cls, fields: dict, section: str):
    try:
        return cls(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] configuration: {exc}") from exc


def load_config(path, out_override: str | None = None, seed_override: int | None = None) -> RunConfig:
    """Parse and validate a TOML run configuration.

    Relative paths resolve against the config file's directory. --seed
    overrides the oracle seed and shifts the search/agent seeds from it.
    """
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    base_dir = os.path.dirname(os.path.abspath(path))

    oracle_sec = _section(doc, "oracle")
    image = oracle_sec.pop("image", None)
    if not image:
        raise ConfigError("[oracle] image is required")
    image_path = image if os.path.isabs(image) else os.path.join(base_dir, image)
    train_steps = int(oracle_sec.pop("train_steps", 5000))
    oracle_seed = int(oracle_sec.pop("seed", 0))
    checkpoint_name = oracle_sec.pop("checkpoint", "oracle.hngp")
    ngp = _build(NgpConfig, oracle_sec, "oracle")

    hw = _build(HwConfig, _section(doc, "hardware"), "hardware")
    agent = _build(DdpgConfig, _section(doc, "agent"), "agent")
    search = _build(SearchConfig, {"episodes": 200, **_section(doc, "search")}, "search")

    out_sec = _section(doc, "output")
    out_dir = out_override or out_sec.get("dir", "runs/out")
    if not os.path.isabs(out_dir):
        out_dir = os.path.join(base_dir, out_dir)

    if seed_override is not None:
        oracle_seed = seed_override
        search = _build(SearchConfig, {**_search_fields(search), "seed": seed_override}, "search")
        agent = _build(DdpgConfig, {**_agent_fields(agent), "seed": seed_override + 1000}, "agent")

    if train_steps < 1:
        raise ConfigError("[oracle] train_steps must be >= 1")
    if not os.path.exists(image_path):
        raise ConfigError(f"image path does not exist: {image_path}")

    return RunConfig(ngp=ngp, image_path=image_path, train_steps=train_steps,
                     oracle_seed=oracle_seed, checkpoint_name=checkpoint_name,
                     hw=hw, agent=agent, search=search, out_dir=out_dir)


def _search_fields(cfg: SearchConfig) -> dict:
    return {
        "episodes": cfg.episodes,
        "mode": cfg.mode,
        "latency_budget_ratio": cfg.latency_budget_ratio,
        "reward_scale": cfg.reward_scale,
        "finetune_steps": cfg.finetune_steps,
        "warmup_episodes": cfg.warmup_episodes,
        "seed": cfg.seed,
    }


def _agent_fields(cfg: DdpgConfig) -> dict:
    return {
        "hidden_width": cfg.hidden_width,
        "actor_lr": cfg.actor_lr,
        "critic_lr": cfg.critic_lr,
        "tau": cfg.tau,
        "gamma": cfg.gamma,
        "noise_sigma": cfg.noise_sigma,
        "noise_decay": cfg.noise_decay,
        "noise_floor": cfg.noise_floor,
        "ema_decay": cfg.ema_decay,
        "replay_capacity": cfg.replay_capacity,
        "updates_per_episode": cfg.updates_per_episode,
        "seed": cfg.seed,
    }
