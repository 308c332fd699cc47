"""Training, evaluation, pretraining and ablation drivers."""
from __future__ import annotations

import itertools
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .agents import RainbowAgent, SACAgent
from .config import ExperimentConfig, config_hash, serialize
from .core import ReplayBuffer, Transition
from .decoder import layer_parameter_count
from .envs import PixelEnv, make
from .errors import EmptyLog, MLRError
from .evaluation import evaluate_policy
from .nets import Encoder, load_params, save_params
from .objective import build_objective, pretrain_only, regression_accuracy

log = logging.getLogger(__name__)

STREAMS = ("env", "mask", "augment", "init", "sampler")
CHECKPOINT_VERSION = 1


class SeedStreams:
    """Named, independent generators derived from one master seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        children = np.random.SeedSequence(self.seed).spawn(len(STREAMS))
        self.gens = {name: np.random.default_rng(c) for name, c in zip(STREAMS, children)}

    def __getitem__(self, name) -> np.random.Generator:
        return self.gens[name]

    def int_seed(self, name: str) -> int:
        return int(self.gens[name].integers(0, 2 ** 31 - 1))

    def state(self) -> dict:
        return {k: g.bit_generator.state for k, g in self.gens.items()}

    def load(self, state: dict) -> None:
        for k, s in state.items():
            self.gens[k].bit_generator.state = s


class MetricLog:
    """Append-only JSON-lines log of {step, split, name, value, seed, config_hash}."""

    def __init__(self, path, seed: int, cfg_hash: str):
        self.path = Path(path)
        self.seed, self.cfg_hash = seed, cfg_hash
        self.count = 0

    def truncate(self, n: int) -> None:
        """Keep the first ``n`` records (used when resuming)."""
        lines = self.path.read_text().splitlines(keepends=True)[:n] if self.path.exists() else []
        self.path.write_text("".join(lines))
        self.count = len(lines)

    def write(self, step: int, split: str, name: str, value: float) -> None:
        rec = {"step": int(step), "split": split, "name": name, "value": float(value),
               "seed": self.seed, "config_hash": self.cfg_hash}
        with open(self.path, "a") as f:
            f.write(json.dumps(rec) + "\n")
        self.count += 1


def read_log(path) -> List[dict]:
    path = Path(path)
    if not path.exists():
        raise EmptyLog(f"{path} does not exist")
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    return records


# -- construction ------------------------------------------------------------

def build_env(cfg: ExperimentConfig) -> PixelEnv:
    return make(cfg.env_id, spec=cfg.env_spec())


def build_agent(cfg: ExperimentConfig, obs_shape):
    obs_size = cfg["env.obs_size"]
    encoder = Encoder(cfg.encoder_config(obs_shape[0]))
    mlr_cfg = cfg.mlr_config()
    augment = cfg.augment_spec()
    source = (obs_shape[0], obs_size, obs_size)
    if cfg.agent == "sac":
        spec = cfg.env_spec()
        return SACAgent(cfg.sac_config(), encoder, spec.action_dim, augment=augment, mlr=mlr_cfg,
                        source_shape=source)
    spec = cfg.env_spec()
    return RainbowAgent(cfg.rainbow_config(), encoder, spec.num_actions, augment=augment, mlr=mlr_cfg,
                        source_shape=source)


def build_buffer(cfg: ExperimentConfig, obs_shape, rng) -> ReplayBuffer:
    spec = cfg.env_spec()
    discrete = cfg.agent == "rainbow"
    return ReplayBuffer(cfg["replay.capacity"], obs_shape, action_dim=spec.action_dim or 1,
                        num_actions=spec.num_actions if discrete else None,
                        prioritized=discrete and cfg["rainbow.prioritized"],
                        priority_exponent=cfg["rainbow.priority_exponent"],
                        min_size=cfg["replay.min_size"], seed=rng)


def random_action(spec, rng: np.random.Generator):
    if spec.discrete:
        return int(rng.integers(spec.num_actions))
    return rng.uniform(-1.0, 1.0, size=spec.action_dim).astype(np.float32)


# -- training ----------------------------------------------------------------

@dataclass
class RunResult:
    out_dir: Path
    log_path: Path
    checkpoint: Optional[Path]
    final_eval: Optional[float] = None
    env_steps: int = 0
    interrupted: bool = False
    extra: Dict[str, Any] = field(default_factory=dict)


class Trainer:
    """Holds every piece of run state so it can be checkpointed and resumed."""

    def __init__(self, cfg: ExperimentConfig, seed: int, out_dir):
        self.cfg = cfg
        self.seed = seed
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.hash = config_hash(cfg)
        self.streams = SeedStreams(seed)
        torch.manual_seed(self.streams.int_seed("init"))
        self.env = build_env(cfg)
        self.eval_env = build_env(cfg)
        self.eval_seed = self.streams.int_seed("env")
        self.obs = self.env.reset(seed=self.streams.int_seed("env"))
        self.obs_shape = self.obs.shape
        self.agent = build_agent(cfg, self.obs_shape)
        self.buffer = build_buffer(cfg, self.obs_shape, self.streams["sampler"])
        self.log = MetricLog(self.out_dir / "metrics.jsonl", seed, self.hash)
        self.agent_steps = 0
        self.episode_return = 0.0
        self.episodes = 0
        self.next_eval = cfg["run.eval_every"] or None
        self.next_ckpt = cfg["run.checkpoint_every"] or None
        self.last_eval: Optional[float] = None

    # checkpointing
    def checkpoint_path(self) -> Path:
        return self.out_dir / "checkpoint.pt"

    def save(self, path=None) -> Path:
        path = Path(path or self.checkpoint_path())
        state = {
            "version": CHECKPOINT_VERSION,
            "config": serialize(self.cfg),
            "config_hash": self.hash,
            "seed": self.seed,
            "agent": self.agent.state_dict(),
            "buffer": self.buffer.state_dict(),
            "env": self.env.get_state(),
            "eval_env": self.eval_env.get_state() if not self.eval_env.done else None,
            "streams": self.streams.state(),
            "torch_rng": torch.get_rng_state(),
            "obs": self.obs,
            "agent_steps": self.agent_steps,
            "episode_return": self.episode_return,
            "episodes": self.episodes,
            "next_eval": self.next_eval,
            "next_ckpt": self.next_ckpt,
            "last_eval": self.last_eval,
            "log_records": self.log.count,
        }
        tmp = path.with_suffix(".tmp")
        torch.save(state, tmp)
        os.replace(tmp, path)
        return path

    def restore(self, path) -> None:
        state = torch.load(path, map_location="cpu", weights_only=False)
        if state.get("version") != CHECKPOINT_VERSION:
            raise MLRError(f"unsupported checkpoint version {state.get('version')}")
        if state["config_hash"] != self.hash:
            raise MLRError("checkpoint was written by a different configuration")
        self.agent.load_state_dict(state["agent"])
        self.buffer.load_state_dict(state["buffer"])
        self.env.set_state(state["env"])
        self.streams.load(state["streams"])
        torch.set_rng_state(state["torch_rng"])
        self.obs = state["obs"]
        for k in ("agent_steps", "episode_return", "episodes", "next_eval", "next_ckpt", "last_eval"):
            setattr(self, k, state[k])
        self.log.truncate(state["log_records"])

    # loop
    def evaluate(self) -> float:
        mean, std = evaluate_policy(self.agent, self.eval_env, self.cfg["run.eval_episodes"],
                                    seed=self.eval_seed)
        step = self.env.env_steps
        self.log.write(step, "eval", "return_mean", mean)
        self.log.write(step, "eval", "return_std", std)
        self.last_eval = mean
        return mean

    def _update(self):
        cfg = self.cfg
        rngs = {"augment": self.streams["augment"], "mask": self.streams["mask"]}
        metrics = {}
        for _ in range(cfg["run.updates_per_step"]):
            if isinstance(self.agent, RainbowAgent):
                beta = self.agent.beta(self.env.env_steps, cfg["run.total_env_steps"])
                metrics = self.agent.update(self.buffer, rngs, beta=beta)
            else:
                metrics = self.agent.update(self.buffer, rngs)
        return metrics

    def step(self) -> None:
        cfg = self.cfg
        spec = self.env.spec
        if self.agent_steps < cfg["run.init_steps"]:
            action = random_action(spec, self.streams["env"])
        else:
            action = self.agent.act(self.obs, "train")
        next_obs, reward, done, info = self.env.step(action)
        clip = cfg["env.reward_clip"]
        stored = float(np.clip(reward, -clip, clip)) if clip > 0 else reward
        self.buffer.push(Transition(self.obs, action, stored, next_obs, done, terminal=info["terminal"]))
        self.episode_return += reward
        self.obs = next_obs
        self.agent_steps += 1
        if self.agent_steps >= cfg["run.init_steps"] and len(self.buffer) >= cfg["replay.min_size"]:
            metrics = self._update()
            if self.agent_steps % cfg["run.log_every"] == 0:
                for name in ("rl_loss", "mlr_loss", "total_loss", "alpha", "lr_aux"):
                    if name in metrics:
                        self.log.write(self.env.env_steps, "train", name, metrics[name])
        if done:
            self.log.write(self.env.env_steps, "train", "episode_return", self.episode_return)
            self.episodes += 1
            self.episode_return = 0.0
            self.obs = self.env.reset()

    def run(self, stop_at: Optional[int] = None) -> RunResult:
        cfg = self.cfg
        total = cfg["run.total_env_steps"]
        interrupted = False
        while self.env.env_steps < total:
            if stop_at is not None and self.env.env_steps >= stop_at:
                interrupted = True
                break
            self.step()
            if self.next_eval is not None and self.env.env_steps >= self.next_eval:
                self.evaluate()
                while self.next_eval <= self.env.env_steps:
                    self.next_eval += cfg["run.eval_every"]
            if self.next_ckpt is not None and self.env.env_steps >= self.next_ckpt:
                self.save()
                while self.next_ckpt <= self.env.env_steps:
                    self.next_ckpt += cfg["run.checkpoint_every"]
        if not interrupted and total > 0 and (self.last_eval is None or cfg["run.eval_every"] == 0):
            self.evaluate()
        ckpt = self.save()
        return RunResult(self.out_dir, self.log.path, ckpt, self.last_eval, self.env.env_steps, interrupted)


def run_train(cfg: ExperimentConfig, seed: Optional[int] = None, out=None, resume=None,
              stop_at: Optional[int] = None) -> RunResult:
    """Train one seed. ``stop_at`` halts early (after checkpointing) at that env step."""
    seed = cfg.seeds[0] if seed is None else seed
    out_dir = Path(out or Path(cfg["run.out"]) / f"seed{seed}")
    trainer = Trainer(cfg, seed, out_dir)
    (out_dir / "config.txt").write_text(serialize(cfg))
    if resume is not None:
        trainer.restore(resume)
    elif trainer.log.path.exists():
        trainer.log.truncate(0)
    try:
        result = trainer.run(stop_at=stop_at)
    except MLRError as exc:
        raise type(exc)(f"[seed {seed}, env step {trainer.env.env_steps}] {exc}") from exc
    result.extra["trainer"] = trainer
    return result


def run_eval(cfg: ExperimentConfig, checkpoint, episodes: Optional[int] = None, seed: int = 0):
    trainer = Trainer(cfg, seed, Path(checkpoint).parent)
    state = torch.load(checkpoint, map_location="cpu", weights_only=False)
    trainer.agent.load_state_dict(state["agent"])
    return evaluate_policy(trainer.agent, trainer.eval_env, episodes or cfg["run.eval_episodes"], seed=seed)


def representation_similarity(result: RunResult, n: int = 256, seed: int = 0) -> float:
    """Regression-accuracy diagnostic on the run's own replay data."""
    trainer: Trainer = result.extra["trainer"]
    cfg = trainer.cfg
    return regression_accuracy(trainer.agent.encoder, trainer.buffer, n, cfg.mask_spec(), cfg["mlr.K"],
                               np.random.default_rng(seed), out_size=(cfg["env.obs_size"],) * 2)


# -- pretraining ---------------------------------------------------------------

def collect_random(cfg: ExperimentConfig, steps: int, seed: int) -> ReplayBuffer:
    streams = SeedStreams(seed)
    env = build_env(cfg)
    obs = env.reset(seed=streams.int_seed("env"))
    buf = build_buffer(cfg, obs.shape, streams["sampler"])
    for _ in range(steps):
        a = random_action(env.spec, streams["env"])
        nxt, r, done, info = env.step(a)
        buf.push(Transition(obs, a, r, nxt, done, terminal=info["terminal"]))
        obs = env.reset() if done else nxt
    return buf


def run_pretrain(cfg: ExperimentConfig, updates: int, seed: int = 0, out=None,
                 collect_steps: Optional[int] = None) -> Path:
    """Auxiliary-loss-only pretraining on random-policy data; saves encoder weights."""
    torch.manual_seed(seed)
    buf = collect_random(cfg, collect_steps or max(cfg["mlr.K"] * 8, 500), seed)
    obs_shape = buf.obs_shape
    encoder = Encoder(cfg.encoder_config(obs_shape[0]))
    spec = cfg.env_spec()
    m = cfg["sac.encoder_m"] if cfg.agent == "sac" else cfg["rainbow.encoder_m"]
    obj = build_objective(cfg.mlr_config(), encoder, m, action_dim=spec.action_dim,
                          num_actions=spec.num_actions,
                          source_shape=(obs_shape[0], cfg["env.obs_size"], cfg["env.obs_size"]))
    out = Path(out or cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    metrics = MetricLog(out / "pretrain.jsonl", seed, config_hash(cfg))
    metrics.truncate(0)
    pretrain_only(obj, buf, updates, seed=seed,
                  callback=lambda step, rep: metrics.write(step, "pretrain", "mlr_loss", rep.loss))
    path = out / "encoder.pt"
    save_params(encoder, path)
    return path


def load_pretrained(agent, path) -> None:
    load_params(agent.encoder, path)
    agent.encoders.sync()


# -- ablations -----------------------------------------------------------------

# Named configurations from the ablation tables and figures.
ABLATIONS: Dict[str, Dict[str, Any]] = {
    "Baseline": {"mlr.lambda": 0.0},
    "MLR": {},
    "MLR-S": {"mask.strategy": "spatial"},
    "MLR-T": {"mask.strategy": "temporal"},
    "MLR-Pixel": {"mlr.target": "pixel"},
    "MLR-F": {"mask.space": "feature"},
    "MLR w.o. ActTok": {"mlr.action_tokens": False},
    "MLR-MoDec": {"mlr.momentum_decoder": True},
    "MLR-MSE": {"mlr.loss": "mse"},
    "MLR no heads": {"heads.projection": False, "heads.prediction": False},
    "MLR pred only": {"heads.projection": False, "heads.prediction": True},
}

GRIDS: Dict[str, Dict[str, list]] = {
    "strategy_target": {"variant": ["Baseline", "MLR-S", "MLR-T", "MLR-Pixel", "MLR"]},
    "variants": {"variant": ["Baseline", "MLR w.o. ActTok", "MLR-F", "MLR-MoDec", "MLR"]},
    "metric_heads": {"variant": ["Baseline", "MLR no heads", "MLR pred only", "MLR", "MLR-MSE"]},
    "decoder_depth": {"decoder.depth": [1, 2, 4, 8]},
    "mask_ratio": {"mask.ratio": [0.3, 0.5, 0.7]},
    "cube_depth": {"mask.cube": [[4, 10, 10], [8, 10, 10], [16, 10, 10]]},
    "cube_spatial": {"mask.cube": [[8, 6, 6], [8, 10, 10], [8, 14, 14]]},
    "seq_len": {"mlr.K": [8, 16, 24]},
}


@dataclass
class AblationRow:
    label: str
    overrides: Dict[str, Any]
    scores: List[float]
    decoder_params: Optional[int]
    error: Optional[str] = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores)) if self.scores else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.scores)) if self.scores else float("nan")


def expand_grid(grid: Mapping[str, Sequence]) -> List[tuple]:
    """Cross product of a grid; the pseudo-key 'variant' names an ABLATIONS entry."""
    keys = list(grid)
    cells = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides, labels = {}, []
        for k, v in zip(keys, combo):
            if k == "variant":
                if v not in ABLATIONS:
                    raise KeyError(f"unknown ablation variant {v!r}")
                overrides.update(ABLATIONS[v])
                labels.append(str(v))
            else:
                overrides[k] = v
                labels.append(f"{k}={v}")
        cells.append((", ".join(labels), overrides))
    return cells


def run_ablation(cfg: ExperimentConfig, grid: Mapping[str, Sequence], seeds: Optional[Sequence[int]] = None,
                 out=None) -> List[AblationRow]:
    """Train every grid cell for every seed; failed cells are recorded, not raised."""
    seeds = list(seeds if seeds is not None else cfg.seeds)
    out = Path(out or Path(cfg["run.out"]) / "ablation")
    rows = []
    for i, (label, overrides) in enumerate(expand_grid(grid)):
        scores, error, params = [], None, None
        try:
            cell_cfg = cfg.with_overrides(overrides)
            mcfg = cell_cfg.mlr_config()
            if mcfg.lam > 0:
                params = layer_parameter_count(cell_cfg["encoder.latent_dim"], mcfg.decoder_mlp_ratio,
                                               mcfg.decoder_layers)
            for seed in seeds:
                res = run_train(cell_cfg, seed=seed, out=out / f"cell{i}" / f"seed{seed}")
                scores.append(res.final_eval)
        except Exception as exc:  # a failed cell must not stop the grid
            error = f"{type(exc).__name__}: {exc}"
            log.warning("ablation cell %r failed: %s", label, error)
        rows.append(AblationRow(label, dict(overrides), scores, params, error))
    return rows


def format_table(rows: Sequence[AblationRow]) -> str:
    lines = ["| Config | Param. | Return (mean ± std) | Seeds |", "|---|---|---|---|"]
    for r in rows:
        params = f"{r.decoder_params / 1000:.1f}K" if r.decoder_params else "-"
        score = f"FAILED ({r.error})" if r.error else f"{r.mean:.2f} ± {r.std:.2f}"
        lines.append(f"| {r.label} | {params} | {score} | {len(r.scores)} |")
    return "\n".join(lines) + "\n"


def write_ablation(rows: Sequence[AblationRow], out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.md").write_text(format_table(rows))
    with open(out / "ablation.jsonl", "w") as f:
        for r in rows:
            f.write(json.dumps({"label": r.label, "overrides": r.overrides, "scores": r.scores,
                                "mean": r.mean, "std": r.std, "decoder_params": r.decoder_params,
                                "error": r.error}) + "\n")
    return out / "ablation.md"
