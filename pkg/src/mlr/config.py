"""Experiment configuration as a flat table of dotted keys.

A config file holds one ``key = value`` pair per line; values are Python
literals (bare words are read as strings). ``#`` starts a comment. Every key
must already exist in the defaults and keep the type of its default.
"""
from __future__ import annotations

import ast
import hashlib
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Mapping, Optional

from .agents import RainbowConfig, SACConfig
from .envs import EnvSpec, default_spec
from .errors import ConfigError, TypeMismatch, UnknownKey
from .nets import EncoderConfig, HeadConfig
from .objective import MLRConfig
from .pixelops import AugmentSpec, CubeMaskSpec, MaskStrategy

# Continuous-control defaults follow the DMControl hyperparameter table.
BASE: Dict[str, Any] = {
    "preset": "continuous",
    "env.id": "pixel_pendulum",
    "env.task": "",
    "env.render_size": 100,
    "env.obs_size": 84,
    "env.action_repeat": 4,
    "env.frame_stack": 3,
    "env.max_episode_frames": 400,
    "env.grayscale": False,
    "env.reward_clip": 0.0,
    "agent.type": "sac",
    "run.seeds": [0],
    "run.total_env_steps": 100_000,
    "run.init_steps": 1000,
    "run.updates_per_step": 1,
    "run.eval_every": 10_000,
    "run.eval_episodes": 10,
    "run.checkpoint_every": 0,
    "run.log_every": 100,
    "run.out": "runs",
    "replay.capacity": 100_000,
    "replay.min_size": 1,
    "encoder.latent_dim": 50,
    "encoder.filters": 32,
    "sac.gamma": 0.99,
    "sac.init_temperature": 0.1,
    "sac.learn_temperature": True,
    "sac.critic_m": 0.99,
    "sac.encoder_m": 0.95,
    "sac.target_update_freq": 2,
    "sac.encoder_update_freq": 1,
    "sac.actor_update_freq": 2,
    "sac.actor_lr": 1e-3,
    "sac.critic_lr": 1e-3,
    "sac.alpha_lr": 1e-4,
    "sac.alpha_beta1": 0.5,
    "sac.batch_size": 512,
    "sac.hidden_dim": 1024,
    "sac.twin": True,
    "rainbow.atoms": 51,
    "rainbow.v_min": -10.0,
    "rainbow.v_max": 10.0,
    "rainbow.multi_step": 10,
    "rainbow.gamma": 0.99,
    "rainbow.double_q": True,
    "rainbow.dueling": True,
    "rainbow.noisy": True,
    "rainbow.noisy_sigma": 0.5,
    "rainbow.hidden_dim": 256,
    "rainbow.lr": 1e-4,
    "rainbow.adam_eps": 1.5e-4,
    "rainbow.batch_size": 32,
    "rainbow.max_grad_norm": 10.0,
    "rainbow.prioritized": True,
    "rainbow.priority_exponent": 0.5,
    "rainbow.priority_weight": 0.4,
    "rainbow.target_update_period": 1,
    "rainbow.target_m": 0.0,
    "rainbow.encoder_m": 0.0,
    "mlr.lambda": 1.0,
    "mlr.K": 16,
    "mlr.target": "latent",
    "mlr.loss": "cosine",
    "mlr.action_tokens": True,
    "mlr.momentum_decoder": False,
    "mlr.warmup_steps": 6000,
    "mlr.warmup_normalize": False,
    "mlr.lr": 5e-4,
    "mlr.batch_size": 128,
    "mask.cube": [8, 10, 10],
    "mask.ratio": 0.5,
    "mask.strategy": "cube",
    "mask.space": "pixel",
    "mask.fill": 0.0,
    "decoder.depth": 2,
    "decoder.heads": 1,
    "decoder.mlp_ratio": 2.0,
    "decoder.positional": True,
    "heads.projection": True,
    "heads.prediction": True,
    "heads.projection_dim": 128,
    "heads.hidden_dim": 256,
    "augment.crop": True,
    "augment.intensity": True,
    "augment.intensity_scale": 0.05,
    "augment.intensity_clip": 2.0,
    "augment.pad": 8,  # replicate padding when frames are rendered at the output size
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "continuous": {},
    # Atari hyperparameter table; the toy grid world stands in for the games.
    "discrete": {
        "env.id": "pixel_catch", "env.render_size": 84, "env.obs_size": 84, "env.action_repeat": 4,
        "env.frame_stack": 4, "env.grayscale": True, "env.max_episode_frames": 108_000,
        "env.reward_clip": 1.0, "agent.type": "rainbow", "run.init_steps": 0, "run.updates_per_step": 2,
        "run.eval_episodes": 100, "replay.min_size": 2000, "encoder.latent_dim": 256,
        "mask.cube": [8, 12, 12], "mlr.batch_size": 32, "mlr.warmup_steps": 0, "mlr.lr": 1e-4,
    },
    # Toy-scale continuous run used for the directional comparison.
    "desk": {
        "env.render_size": 56, "env.obs_size": 48, "run.total_env_steps": 30_000,
        "run.init_steps": 250, "run.eval_every": 10_000, "run.eval_episodes": 5,
        "replay.capacity": 10_000, "encoder.filters": 16, "sac.batch_size": 32, "sac.hidden_dim": 256,
        "mlr.batch_size": 4, "mlr.warmup_steps": 1000, "mlr.warmup_normalize": True,
        "mask.cube": [8, 8, 8],
    },
    # Toy-scale discrete run.
    "catch": {
        "preset": "discrete", "env.action_repeat": 1, "env.max_episode_frames": 1000,
        "run.total_env_steps": 10_000, "run.eval_every": 5000, "run.eval_episodes": 10,
        "replay.capacity": 10_000, "replay.min_size": 500, "mlr.batch_size": 8,
    },
    # Tiny budget for tests and ablation smoke runs.
    "smoke": {
        "env.render_size": 40, "env.obs_size": 32, "env.max_episode_frames": 200,
        "run.total_env_steps": 1000, "run.init_steps": 50, "run.eval_every": 0, "run.eval_episodes": 1,
        "run.log_every": 25, "replay.capacity": 2000, "sac.batch_size": 16, "sac.hidden_dim": 32,
        "encoder.filters": 8, "mlr.batch_size": 2, "mlr.warmup_steps": 100, "mask.cube": [8, 8, 8],
        "heads.projection_dim": 32, "heads.hidden_dim": 32,
    },
}

# Per-task exceptions from the hyperparameter tables, keyed by (preset, task).
TASK_OVERRIDES: Dict[tuple, Dict[str, Any]] = {
    ("discrete", "Pong"): {"mlr.lambda": 5.0},
    ("discrete", "UpNDown"): {"mlr.lambda": 5.0},
    ("continuous", "cartpole_swingup"): {"mask.cube": [4, 10, 10], "env.action_repeat": 8},
    ("continuous", "reacher_easy"): {"mask.cube": [4, 10, 10]},
    ("continuous", "finger_spin"): {"env.action_repeat": 2},
    ("continuous", "walker_walk"): {"env.action_repeat": 2, "sac.encoder_m": 0.9},
    ("continuous", "cheetah_run"): {"sac.actor_lr": 2e-4, "sac.critic_lr": 2e-4, "mlr.lr": 1e-4},
}


def _base_preset(name: str) -> str:
    """Root table (continuous/discrete) a preset derives from."""
    seen = set()
    while name not in ("continuous", "discrete"):
        if name in seen or name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
        seen.add(name)
        name = PRESETS[name].get("preset", "continuous")
    return name


def preset_values(name: str, task: str = "") -> Dict[str, Any]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    root = _base_preset(name)
    values = dict(BASE)
    values.update(PRESETS[root])
    if name != root:
        values.update({k: v for k, v in PRESETS[name].items() if k != "preset"})
    values["preset"] = name
    values.update(TASK_OVERRIDES.get((root, task), {}))
    values["env.task"] = task
    return values


def _check_type(key: str, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, (list, tuple)) and all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            return list(value)
    raise TypeMismatch(f"{key}: expected {type(default).__name__}, got {value!r}")


def parse_value(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_lines(lines: Iterable[str], source: str = "<text>") -> Dict[str, Any]:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def parse_overrides(items: Iterable[str]) -> Dict[str, Any]:
    return parse_lines(items, source="--set")


@dataclass
class ExperimentConfig:
    """Resolved configuration; ``values`` holds every dotted key."""

    values: Dict[str, Any]

    def __getitem__(self, key):
        return self.values[key]

    @property
    def env_id(self) -> str:
        return self.values["env.id"]

    @property
    def agent(self) -> str:
        return self.values["agent.type"]

    @property
    def seeds(self):
        return list(self.values["run.seeds"])

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        return resolve(dict(overrides), start=self.values)

    # -- typed views -----------------------------------------------------
    def env_spec(self) -> EnvSpec:
        v = self.values
        base = default_spec(v["env.id"])
        return EnvSpec(v["env.id"], action_dim=base.action_dim, num_actions=base.num_actions,
                       size=(v["env.render_size"],) * 2,
                       action_repeat=v["env.action_repeat"], frame_stack=v["env.frame_stack"],
                       max_episode_frames=v["env.max_episode_frames"], grayscale=v["env.grayscale"])

    def augment_spec(self) -> AugmentSpec:
        v = self.values
        size = v["env.obs_size"]
        margin = v["env.render_size"] - size
        return AugmentSpec(out_size=(size, size), crop_margin=margin if margin > 0 else v["augment.pad"],
                           intensity_scale=v["augment.intensity_scale"],
                           intensity_clip=v["augment.intensity_clip"],
                           crop=v["augment.crop"], intensity=v["augment.intensity"])

    def encoder_config(self, channels: int) -> EncoderConfig:
        v = self.values
        variant = "continuous" if v["agent.type"] == "sac" else "discrete"
        return EncoderConfig(variant=variant, obs_shape=(channels, v["env.obs_size"], v["env.obs_size"]),
                             latent_dim=v["encoder.latent_dim"], num_filters=v["encoder.filters"])

    def mask_spec(self) -> CubeMaskSpec:
        v = self.values
        k, h, w = v["mask.cube"]
        return CubeMaskSpec(k=k, h=h, w=w, eta=v["mask.ratio"], strategy=MaskStrategy(v["mask.strategy"]),
                            fill_value=v["mask.fill"])

    def mlr_config(self) -> MLRConfig:
        v = self.values
        return MLRConfig(
            lam=v["mlr.lambda"], K=v["mlr.K"], mask=self.mask_spec(), target_space=v["mlr.target"],
            loss_metric=v["mlr.loss"], use_action_tokens=v["mlr.action_tokens"],
            momentum_decoder=v["mlr.momentum_decoder"], mask_space=v["mask.space"],
            heads=HeadConfig(projection=v["heads.projection"], prediction=v["heads.prediction"],
                             projection_dim=v["heads.projection_dim"], hidden_dim=v["heads.hidden_dim"]),
            decoder_layers=v["decoder.depth"], decoder_heads=v["decoder.heads"],
            decoder_mlp_ratio=v["decoder.mlp_ratio"], positional=v["decoder.positional"],
            augment=self.augment_spec(), warmup_steps=v["mlr.warmup_steps"],
            warmup_normalize=v["mlr.warmup_normalize"], lr=v["mlr.lr"], aux_batch=v["mlr.batch_size"])

    def sac_config(self) -> SACConfig:
        v = self.values
        return SACConfig(
            gamma=v["sac.gamma"], init_temperature=v["sac.init_temperature"],
            learn_temperature=v["sac.learn_temperature"], critic_m=v["sac.critic_m"],
            encoder_m=v["sac.encoder_m"], target_update_freq=v["sac.target_update_freq"],
            encoder_update_freq=v["sac.encoder_update_freq"], actor_update_freq=v["sac.actor_update_freq"],
            actor_lr=v["sac.actor_lr"], critic_lr=v["sac.critic_lr"], alpha_lr=v["sac.alpha_lr"],
            alpha_betas=(v["sac.alpha_beta1"], 0.999), batch_size=v["sac.batch_size"],
            hidden_dim=v["sac.hidden_dim"], twin=v["sac.twin"])

    def rainbow_config(self) -> RainbowConfig:
        v = self.values
        return RainbowConfig(
            atoms=v["rainbow.atoms"], v_min=v["rainbow.v_min"], v_max=v["rainbow.v_max"],
            multi_step=v["rainbow.multi_step"], gamma=v["rainbow.gamma"], double_q=v["rainbow.double_q"],
            dueling=v["rainbow.dueling"], noisy=v["rainbow.noisy"], noisy_sigma=v["rainbow.noisy_sigma"],
            hidden_dim=v["rainbow.hidden_dim"], lr=v["rainbow.lr"], adam_eps=v["rainbow.adam_eps"],
            batch_size=v["rainbow.batch_size"], max_grad_norm=v["rainbow.max_grad_norm"],
            prioritized=v["rainbow.prioritized"], priority_exponent=v["rainbow.priority_exponent"],
            priority_weight=v["rainbow.priority_weight"],
            target_update_period=v["rainbow.target_update_period"], target_m=v["rainbow.target_m"],
            encoder_m=v["rainbow.encoder_m"], updates_per_step=v["run.updates_per_step"],
            min_replay=v["replay.min_size"])

    def validate(self) -> None:
        """Build every typed view once so bad combinations fail before a run starts."""
        v = self.values
        if not v["run.seeds"]:
            raise ConfigError("run.seeds must not be empty")
        if v["agent.type"] not in ("sac", "rainbow"):
            raise ConfigError(f"agent.type must be 'sac' or 'rainbow', got {v['agent.type']!r}")
        if len(v["mask.cube"]) != 3:
            raise ConfigError("mask.cube needs three entries [k, h, w]")
        k, h, w = v["mask.cube"]
        if k > v["mlr.K"] or max(h, w) > v["env.obs_size"] or min(k, h, w) < 1:
            raise ConfigError(f"mask.cube {v['mask.cube']} does not fit a {v['mlr.K']}-step window "
                              f"of {v['env.obs_size']}px frames")
        if v["env.render_size"] < v["env.obs_size"]:
            raise ConfigError("env.render_size must be at least env.obs_size")
        try:
            spec = self.env_spec()
            if spec.discrete != (v["agent.type"] == "rainbow"):
                raise ConfigError(f"{v['env.id']} does not match agent {v['agent.type']}")
            self.mlr_config()
            self.sac_config() if v["agent.type"] == "sac" else self.rainbow_config()
        except ConfigError:
            raise
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc


def resolve(values: Mapping[str, Any], start: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Layer ``values`` on a preset; the preset comes from ``values`` or ``start``."""
    start = dict(start or {})
    name = values.get("preset", start.get("preset", "continuous"))
    task = values.get("env.task", start.get("env.task", ""))
    if not isinstance(name, str) or not isinstance(task, str):
        raise TypeMismatch("preset and env.task must be strings")
    resolved = preset_values(name, task)
    changed_preset = name != start.get("preset", name) or task != start.get("env.task", task)
    layers = [values] if changed_preset or not start else [start, values]
    for layer in layers:
        for key, value in layer.items():
            if key not in resolved:
                raise UnknownKey(key)
            if key in ("preset", "env.task"):
                continue
            resolved[key] = _check_type(key, value, BASE[key])
    cfg = ExperimentConfig(resolved)
    cfg.validate()
    return cfg


def load_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Read a config file (optional) and apply ``overrides`` on top."""
    values: Dict[str, Any] = {}
    if path is not None:
        with open(path) as f:  # FileNotFoundError propagates
            values.update(parse_lines(f, source=str(path)))
    values.update(overrides or {})
    return resolve(values)


def serialize(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {cfg.values[k]!r}\n" for k in sorted(cfg.values))


def config_hash(cfg: ExperimentConfig) -> str:
    """Digest of every setting except the output location."""
    body = "".join(f"{k} = {cfg.values[k]!r}\n" for k in sorted(cfg.values) if k != "run.out")
    return hashlib.sha256(body.encode()).hexdigest()[:12]
