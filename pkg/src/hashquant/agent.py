"""Off-policy actor-critic agent over continuous per-unit actions.

The actor maps a normalized 7-component unit observation to an action in
[0, 1]; action_to_bits turns that into a bit width in [1, 8]. The Q target
subtracts an exponential moving average of past episode rewards as a
variance-reduction baseline. The single end-of-episode reward is broadcast
to every transition of that episode by the search loop.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .nets import Adam, Mlp, soft_update
from .quantizer import round_half_away

logger = logging.getLogger(__name__)

OBS_DIM = 7
BITS_MIN = 1
BITS_MAX = 8

AGENT_MAGIC = b"HDPG"
AGENT_VERSION = 1


@dataclass
class LayerObservation:
    """Seven-component unit descriptor.

    For MLP units: (layer type, d_in, d_out, parameter count, global index,
    previous action, weight/activation flag). For hash units: (layer type,
    embedding dim, entry count, level, global index, previous action, 1).
    Raw values are kept next to the normalized vector the agent consumes.
    """

    raw: np.ndarray
    normalized: np.ndarray | None = None

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.shape != (OBS_DIM,):
            raise ValueError(f"observation must have {OBS_DIM} components")
        if self.normalized is not None:
            self.normalized = np.asarray(self.normalized, dtype=np.float64)

    @property
    def vector(self) -> np.ndarray:
        return self.normalized if self.normalized is not None else self.raw


@dataclass
class Transition:
    obs: LayerObservation
    action: float
    reward: float
    next_obs: LayerObservation | None
    done: bool

    def __post_init__(self):
        if not 0.0 <= self.action <= 1.0:
            raise ValueError(f"action {self.action} outside [0, 1]")


def normalize_observation(raw: LayerObservation, arch_maxima) -> LayerObservation:
    """Divide each raw component by its architecture-wide maximum."""
    maxima = np.asarray(arch_maxima, dtype=np.float64)
    if maxima.shape != (OBS_DIM,):
        raise ValueError("arch_maxima must have 7 components")
    if np.any(maxima <= 0):
        raise ValueError("arch_maxima must be strictly positive")
    return LayerObservation(raw=raw.raw, normalized=raw.raw / maxima)


def action_to_bits(a: float) -> int:
    """Map a continuous action in [0, 1] to a bit width in [1, 8]."""
    if a < 0.0 or a > 1.0:
        logger.warning("action %g outside [0, 1]; clamping", a)
        a = min(max(a, 0.0), 1.0)
    b = int(round_half_away(BITS_MIN - 0.5 + a * ((BITS_MAX + 0.5) - (BITS_MIN - 0.5))))
    return min(max(b, BITS_MIN), BITS_MAX)


class ReplayBuffer:
    """Fixed-capacity FIFO transition store with seeded sampling."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: list = []

    def push(self, transition: Transition) -> None:
        self._items.append(transition)
        if len(self._items) > self.capacity:
            del self._items[0]

    def sample(self, rng: np.random.Generator, k: int) -> list:
        if not self._items:
            raise ValueError("cannot sample from an empty replay buffer")
        k = min(k, len(self._items))
        idx = rng.choice(len(self._items), size=k, replace=False)
        return [self._items[i] for i in idx]

    def __len__(self) -> int:
        return len(self._items)


@dataclass
class DdpgConfig:
    hidden_width: int = 64
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    tau: float = 0.01
    gamma: float = 1.0
    noise_sigma: float = 0.5
    noise_decay: float = 0.99
    noise_floor: float = 0.02
    ema_decay: float = 0.95
    replay_capacity: int = 2048
    updates_per_episode: int = 1
    seed: int = 0


class DdpgAgent:
    """Actor/critic pair with target copies, replay, and EMA reward baseline."""

    def __init__(self, config: DdpgConfig | None = None, obs_dim: int = OBS_DIM):
        self.config = config or DdpgConfig()
        self.obs_dim = obs_dim
        cfg = self.config
        ss = np.random.SeedSequence(cfg.seed)
        init_seed, noise_seed, sample_seed = ss.spawn(3)
        rng = np.random.default_rng(init_seed)
        h = cfg.hidden_width
        # Zero final actor weights start every unit at action 0.5 (5 bits).
        self.actor = Mlp((obs_dim, h, h, 1), rng, output_activation="sigmoid", final_init="zeros")
        self.critic = Mlp((obs_dim + 1, h, h, 1), rng, final_init="small")
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.params, cfg.actor_lr)
        self.critic_opt = Adam(self.critic.params, cfg.critic_lr)
        self.replay = ReplayBuffer(cfg.replay_capacity)
        self.noise_rng = np.random.default_rng(noise_seed)
        self.sample_rng = np.random.default_rng(sample_seed)
        self.sigma = cfg.noise_sigma
        self.episode = 0
        self._ema: float | None = None

    @property
    def ema_baseline(self) -> float:
        return 0.0 if self._ema is None else self._ema

    def observe_reward(self, reward: float) -> None:
        """Fold one episode reward into the EMA baseline. The first reward
        seeds the average directly."""
        if self._ema is None:
            self._ema = float(reward)
        else:
            d = self.config.ema_decay
            self._ema = d * self._ema + (1.0 - d) * float(reward)

    def end_episode(self) -> None:
        self.episode += 1
        self.sigma = max(self.sigma * self.config.noise_decay, self.config.noise_floor)

    def select_action(self, obs: LayerObservation, explore: bool) -> float:
        a = float(self.actor.forward(obs.vector)[0])
        if explore:
            a += self.noise_rng.normal(0.0, self.sigma)
        return min(max(a, 0.0), 1.0)

    def compute_q_target(self, transition: Transition) -> float:
        """R + gamma * Q_target(S', mu_target(S')) - baseline; terminal
        transitions drop the bootstrap term."""
        r = float(transition.reward)
        if transition.done or transition.next_obs is None:
            return r - self.ema_baseline
        nxt = transition.next_obs.vector
        a_next = self.actor_target.forward(nxt)
        q_next = float(self.critic_target.forward(np.concatenate([nxt, a_next]))[0])
        return r + self.config.gamma * q_next - self.ema_baseline

    def update(self, batch) -> dict:
        """One critic step (TD regression to targets) and one actor step
        (ascend Q through the critic), then soft target updates."""
        batch = list(batch)
        if not batch:
            raise ValueError("update requires a non-empty batch")
        obs = np.stack([t.obs.vector for t in batch])
        actions = np.asarray([[t.action] for t in batch])
        targets = np.asarray([[self.compute_q_target(t)] for t in batch])

        q_pred, critic_acts = self.critic.forward_cached(np.concatenate([obs, actions], axis=1))
        td = q_pred - targets
        critic_loss = float(np.mean(td**2))
        if not np.isfinite(critic_loss):
            logger.error("non-finite critic loss %g; update rejected", critic_loss)
            return {"critic_loss": critic_loss, "actor_loss": float("nan"), "rejected": True}
        _, critic_grads = self.critic.backward(critic_acts, (2.0 / len(batch)) * td)
        self.critic_opt.step(critic_grads)

        actor_out, actor_acts = self.actor.forward_cached(obs)
        q_of_mu, critic_acts2 = self.critic.forward_cached(np.concatenate([obs, actor_out], axis=1))
        actor_loss = float(-np.mean(q_of_mu))
        if not np.isfinite(actor_loss):
            logger.error("non-finite actor loss %g; update rejected", actor_loss)
            return {"critic_loss": critic_loss, "actor_loss": actor_loss, "rejected": True}
        dinput, _ = self.critic.backward(critic_acts2, np.full((len(batch), 1), -1.0 / len(batch)))
        da = dinput[:, self.obs_dim:]
        _, actor_grads = self.actor.backward(actor_acts, da)
        self.actor_opt.step(actor_grads)

        soft_update(self.actor_target, self.actor, self.config.tau)
        soft_update(self.critic_target, self.critic, self.config.tau)
        return {"critic_loss": critic_loss, "actor_loss": actor_loss, "rejected": False}

    def save(self, path) -> None:
        """Versioned binary container: parameters, EMA baseline, noise scale,
        episode counter."""
        nets = (self.actor, self.critic, self.actor_target, self.critic_target)
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sI", AGENT_MAGIC, AGENT_VERSION))
            fh.write(struct.pack("<II", self.obs_dim, self.config.hidden_width))
            ema = self._ema if self._ema is not None else float("nan")
            fh.write(struct.pack("<ddI", ema, self.sigma, self.episode))
            for net in nets:
                for arr in net.params:
                    fh.write(np.asarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, config: DdpgConfig | None = None) -> "DdpgAgent":
        with open(path, "rb") as fh:
            blob = fh.read()
        magic, version = struct.unpack_from("<4sI", blob, 0)
        if magic != AGENT_MAGIC:
            raise ValueError(f"bad agent checkpoint magic {magic!r}")
        if version != AGENT_VERSION:
            raise ValueError(f"unsupported agent checkpoint version {version}")
        off = struct.calcsize("<4sI")
        obs_dim, hidden = struct.unpack_from("<II", blob, off)
        off += struct.calcsize("<II")
        ema, sigma, episode = struct.unpack_from("<ddI", blob, off)
        off += struct.calcsize("<ddI")
        cfg = config or DdpgConfig()
        if cfg.hidden_width != hidden:
            raise ValueError("checkpoint hidden width does not match config")
        agent = cls(cfg, obs_dim=obs_dim)
        for net in (agent.actor, agent.critic, agent.actor_target, agent.critic_target):
            for arr in net.params:
                count = arr.size
                vals = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
                off += 8 * count
                arr[...] = vals.reshape(arr.shape)
        if off != len(blob):
            raise ValueError("agent checkpoint has trailing bytes")
        agent._ema = None if np.isnan(ema) else float(ema)
        agent.sigma = float(sigma)
        agent.episode = int(episode)
        return agent
