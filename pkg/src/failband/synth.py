"""Scripted 2-D pick-and-place environment producing labeled rollouts.

The workspace is the unit square.  A point effector with a binary gripper
must pick an object up and put it down at a target.  The policy never sees
the true object/target positions: it decodes them from a fixed random linear
"visual" embedding of the scene, so corrupting the features corrupts its
perception the way a bumped camera would.  Proprioception (effector position
and gripper state) is observed directly.

Each execution step the policy plans ``H`` future commands by running its
script forward under nominal dynamics, adds Gaussian action noise and
executes the first ``H'`` rows.  A rollout ends ``H'`` steps after the
gripper first opens again, or at ``T_max``.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DatasetHeader, FailureMode, Label, Rollout, Step

SCENE_DIM = 7  # effector xy, gripper, object xy, target xy
PROPRIO_DIM = 3
_GRIP, _OBJ, _TGT = 2, slice(3, 5), slice(5, 7)

DEFAULT_PARAMS = {
    FailureMode.SLIP: 0.2,  # displacement of the dropped object
    FailureMode.JITTER: 0.05,  # std of the white command jitter
    FailureMode.SENSOR_SHIFT: 3.0,  # offset in feature standard deviations
    FailureMode.OOD_INIT: 1.2,  # object x coordinate, outside the unit square
    FailureMode.STALL: 10.0,  # execution steps with frozen actions
}


class ConfigError(ValueError):
    """Invalid synthetic-environment configuration."""


@dataclass(frozen=True)
class FailureSpec:
    mode: FailureMode
    probability: float
    param: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", FailureMode(self.mode))
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError(f"failure probability for {self.mode.value} must be in [0, 1]")

    @property
    def value(self) -> float:
        return DEFAULT_PARAMS[self.mode] if self.param is None else float(self.param)


@dataclass(frozen=True)
class SynthConfig:
    n_rollouts: int = 100
    T_max: int = 128
    H: int = 16
    H_prime: int = 8
    T_O: int = 2
    noise: float = 0.003
    obs_noise: float = 0.01
    d_feature: int = 16
    failure_spec: tuple[FailureSpec, ...] = ()
    success_eps: float = 0.05
    seed: int = 0
    plan_speed: float = 0.015
    max_speed: float = 0.05
    grasp_radius: float = 0.03
    reach_tol: float = 0.012
    slip_accel: float = 0.08
    id_prefix: str = "r"
    start_index: int = 0  # episode offset; disjoint ranges give disjoint splits of one world
    embedding_seed: int | None = None  # None -> seed

    def __post_init__(self) -> None:
        object.__setattr__(self, "failure_spec", tuple(self.failure_spec))
        if not 0 < self.H_prime < self.H:
            raise ConfigError("need 0 < H' < H")
        if self.T_O < 1:
            raise ConfigError("T_O must be >= 1")
        if self.n_rollouts < 0 or self.T_max < self.H_prime:
            raise ConfigError("n_rollouts must be >= 0 and T_max >= H'")
        if sum(f.probability for f in self.failure_spec) > 1.0 + 1e-12:
            raise ConfigError("failure probabilities sum to more than 1")
        if self.noise < 0 or self.obs_noise < 0:
            raise ConfigError("noise levels must be non-negative")

    @property
    def d_obs(self) -> int:
        return self.T_O * (self.d_feature + PROPRIO_DIM)

    @property
    def world_seed(self) -> int:
        return self.seed if self.embedding_seed is None else self.embedding_seed

    @property
    def shift_time(self) -> int:
        return (self.T_max // 3) // self.H_prime * self.H_prime


@dataclass
class EnvState:
    effector: np.ndarray
    gripper: int
    object: np.ndarray
    target: np.ndarray
    carrying: bool = False

    def scene(self) -> np.ndarray:
        return np.array([*self.effector, float(self.gripper), *self.object, *self.target])


def success_oracle(state: EnvState, eps: float) -> bool:
    """Object within ``eps`` of the target and gripper open."""
    return bool(np.linalg.norm(state.object - state.target) <= eps and state.gripper == 0)


@dataclass(frozen=True)
class Embedding:
    """Frozen random linear map from scene vectors to feature vectors."""

    weights: np.ndarray  # (d_feature, SCENE_DIM)
    feature_std: np.ndarray
    shift_direction: np.ndarray  # signs in {-1, +1}, one per feature

    @classmethod
    def create(cls, d_feature: int, seed: int) -> "Embedding":
        rng = np.random.default_rng([seed, 0xE3B])
        w = rng.standard_normal((d_feature, SCENE_DIM))
        # scene coordinates are roughly uniform on [0, 1]; gripper is a fair coin
        var = np.full(SCENE_DIM, 1.0 / 12.0)
        var[_GRIP] = 0.25
        std = np.sqrt((w**2) @ var)
        u = np.zeros(SCENE_DIM)
        u[3:7] = rng.standard_normal(4)
        signs = np.sign(w @ u)
        signs[signs == 0] = 1.0
        return cls(w, std, signs)

    @property
    def pinv(self) -> np.ndarray:
        return np.linalg.pinv(self.weights)

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "feature_std": self.feature_std.tolist(),
            "shift_direction": self.shift_direction.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Embedding":
        return cls(
            np.array(d["weights"], dtype=np.float64),
            np.array(d["feature_std"], dtype=np.float64),
            np.array(d["shift_direction"], dtype=np.float64),
        )


class ScriptedPolicy:
    """Waypoint script: reach object, close, carry to target, open, hold.

    Decisions depend only on the latest observation frame, so the same
    object serves the simulator and, at detection time, STAC's resampling.
    """

    def __init__(self, config: SynthConfig, embedding: Embedding):
        self.config = config
        self.embedding = embedding
        self._pinv = embedding.pinv
        self._frame = config.d_feature + PROPRIO_DIM

    def perceive(self, obs: np.ndarray) -> tuple[np.ndarray, int, np.ndarray, np.ndarray]:
        """(effector, gripper, object, target) as seen from the last frame of ``obs``."""
        frame = np.asarray(obs, dtype=np.float64)[-self._frame :]
        feats, prop = frame[: self.config.d_feature], frame[self.config.d_feature :]
        scene = self._pinv @ feats
        return prop[:2].copy(), int(prop[2] > 0.5), scene[_OBJ], scene[_TGT]

    def _script(self, eff, grip, obj, tgt) -> tuple[np.ndarray, int]:
        c = self.config
        if grip:
            if np.linalg.norm(eff - tgt) > c.reach_tol:
                return tgt, 1
            return tgt, 0
        if np.linalg.norm(obj - tgt) <= c.success_eps / 2:
            return eff, 0
        if np.linalg.norm(eff - obj) > c.reach_tol:
            return obj, 0
        return obj, 1

    def nominal_plan(self, eff, grip, obj, tgt) -> np.ndarray:
        """H rows of (x, y, gripper) commands under the policy's own world model."""
        c = self.config
        eff = np.array(eff, dtype=np.float64)
        obj = np.array(obj, dtype=np.float64)
        rows = np.empty((c.H, 3))
        for k in range(c.H):
            goal, g = self._script(eff, grip, obj, tgt)
            delta = goal - eff
            dist = math.hypot(delta[0], delta[1])
            nxt = goal.copy() if dist <= c.plan_speed else eff + delta * (c.plan_speed / dist)
            rows[k, :2] = nxt
            rows[k, 2] = g
            if grip and not g:
                obj = eff.copy()  # believes the object is released here
            eff, grip = nxt, g
            if grip:
                obj = eff.copy()
        return rows

    def sample(self, obs: np.ndarray, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        plan = self.nominal_plan(*self.perceive(obs))
        out = np.repeat(plan[None], batch_size, axis=0)
        if self.config.noise > 0:
            # smooth per-sample deformation: random offset plus a random linear drift
            offset = rng.normal(0.0, self.config.noise, size=(batch_size, 1, 2))
            drift = rng.normal(0.0, self.config.noise, size=(batch_size, 1, 2))
            ramp = (np.arange(self.config.H) / self.config.H)[None, :, None]
            out[:, :, :2] += offset + ramp * drift
        return out

    __call__ = sample


def policy_sample(policy: ScriptedPolicy, obs: np.ndarray, batch_size: int, seed: int = 0) -> np.ndarray:
    """B action chunks of shape (H, 3) for one observation window."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    return policy.sample(obs, batch_size, np.random.default_rng(seed))


def _pick_failure(config: SynthConfig, rng: np.random.Generator) -> FailureSpec | None:
    u = rng.uniform()
    acc = 0.0
    for spec in config.failure_spec:
        acc += spec.probability
        if u < acc:
            return spec
    return None


def _initial_state(rng: np.random.Generator, failure: FailureSpec | None) -> EnvState:
    eff = np.array([0.5 + rng.uniform(-0.1, 0.1), 0.1 + rng.uniform(-0.05, 0.05)])
    obj = np.array([rng.uniform(0.2, 0.8), rng.uniform(0.3, 0.55)])
    while True:
        tgt = np.array([rng.uniform(0.2, 0.8), rng.uniform(0.65, 0.9)])
        if np.linalg.norm(tgt - obj) >= 0.35:
            break
    if failure is not None and failure.mode is FailureMode.OOD_INIT:
        obj = np.array([failure.value + rng.uniform(0.0, 0.1), obj[1]])
    return EnvState(eff, 0, obj, tgt)


def simulate_rollout(
    index: int,
    config: SynthConfig,
    embedding: Embedding,
    policy: ScriptedPolicy | None = None,
    return_state: bool = False,
):
    """Simulate one episode; returns a Rollout (and the final EnvState if asked)."""
    c = config
    episode = c.start_index + index
    rng = np.random.default_rng([c.seed, episode])
    policy = policy or ScriptedPolicy(c, embedding)
    failure = _pick_failure(c, rng)
    mode = failure.mode if failure is not None else None
    state = _initial_state(rng, failure)

    shift = np.zeros(c.d_feature)
    shift_from = c.T_max + 1
    jitter_from = c.T_max + 1
    stall_from, stall_len = c.T_max + 1, 0
    injection = None
    if mode is FailureMode.SENSOR_SHIFT:
        shift = failure.value * embedding.feature_std * embedding.shift_direction
        shift_from = injection = c.shift_time
    elif mode is FailureMode.JITTER:
        jitter_from = injection = int(rng.integers(0, max(c.T_max // 3 // c.H_prime, 1))) * c.H_prime
    elif mode is FailureMode.STALL:
        stall_from = injection = int(rng.integers(2, max(c.T_max // 3 // c.H_prime, 3))) * c.H_prime
        stall_len = int(failure.value) * c.H_prime
    elif mode is FailureMode.OOD_INIT:
        injection = 0
    slip_dir = rng.normal(size=2)
    slip_dir /= np.linalg.norm(slip_dir)
    jitter_dir_rng = np.random.default_rng([c.seed, episode, 1])

    frames: list[np.ndarray] = []

    def observe(t: int) -> None:
        feats = embedding.weights @ state.scene()
        if c.obs_noise > 0:
            feats = feats + rng.normal(0.0, c.obs_noise, size=c.d_feature)
        if t >= shift_from:
            feats = feats + shift
        prop = np.array([*state.effector, float(state.gripper)])
        frames.append(np.concatenate([feats, prop]))

    def window() -> np.ndarray:
        picked = [frames[max(len(frames) - c.T_O + j, 0)] for j in range(c.T_O)]
        return np.concatenate(picked)

    steps: list[Step] = []
    prev_vel = np.zeros(2)
    end_at = None
    t = 0
    observe(0)
    while t < c.T_max and (end_at is None or t < end_at):
        if t % c.H_prime == 0:
            obs = window()
            chunk = policy.sample(obs, 1, rng)[0]
            if stall_from <= t < stall_from + stall_len:
                chunk[:, :2] = state.effector
                chunk[:, 2] = state.gripper
            if t >= jitter_from:
                chunk[:, :2] += jitter_dir_rng.normal(0.0, failure.value, size=(c.H, 2))
            steps.append(Step(t, obs, chunk))
        row = chunk[t % c.H_prime]
        # effector dynamics: follow the command at up to max_speed per step
        delta = np.clip(row[:2], 0.0, 1.0) - state.effector
        dist = float(np.linalg.norm(delta))
        if dist > c.max_speed:
            delta = delta * (c.max_speed / dist)
        state.effector = state.effector + delta
        accel = float(np.linalg.norm(delta - prev_vel))
        prev_vel = delta
        g = int(row[2] > 0.5)
        if g and not state.gripper:
            if np.linalg.norm(state.effector - state.object) <= c.grasp_radius:
                state.carrying = True
                if mode is FailureMode.SLIP and injection is None:
                    injection = (t // c.H_prime) * c.H_prime
                    state.carrying = False
                    state.object = np.clip(state.effector + failure.value * slip_dir, 0.0, 1.0)
        elif not g and state.gripper:
            state.carrying = False
            if end_at is None:
                end_at = t + 1 + c.H_prime
        state.gripper = g
        if state.carrying and accel > c.slip_accel:
            state.carrying = False  # shaken loose
        if state.carrying:
            state.object = state.effector.copy()
        t += 1
        observe(t)

    ok = success_oracle(state, c.success_eps)
    label = Label.SUCCESS if ok else Label.FAILURE
    if mode is FailureMode.SLIP and injection is None:
        # never grasped, so the slip never fired; the mode is still recorded
        injection = None
    if injection is not None and injection > steps[-1].t:
        injection = steps[-1].t
    rollout = Rollout(
        id=f"{c.id_prefix}{episode:05d}",
        steps=tuple(steps),
        label=label,
        failure_mode=mode,
        injection_time=injection,
    )
    if return_state:
        return rollout, state
    return rollout


def generate_dataset(config: SynthConfig) -> tuple[DatasetHeader, list[Rollout]]:
    """Simulate ``config.n_rollouts`` episodes; the header carries the embedding."""
    embedding = Embedding.create(config.d_feature, config.world_seed)
    policy = ScriptedPolicy(config, embedding)
    rollouts = [simulate_rollout(i, config, embedding, policy) for i in range(config.n_rollouts)]
    return dataset_header(config, embedding), rollouts


def dataset_header(config: SynthConfig, embedding: Embedding) -> DatasetHeader:
    return DatasetHeader(
        d_O=config.d_obs,
        d_a=3,
        H=config.H,
        H_prime=config.H_prime,
        T_O=config.T_O,
        extra={"synth": config_to_json(config), "embedding": embedding.to_json()},
    )


def policy_from_header(header: DatasetHeader) -> ScriptedPolicy:
    """Rebuild the scripted policy stored alongside a synthetic dataset."""
    if "embedding" not in header.extra or "synth" not in header.extra:
        raise ValueError("dataset header carries no synthetic policy (needed for STAC)")
    config = config_from_json(header.extra["synth"])
    return ScriptedPolicy(config, Embedding.from_json(header.extra["embedding"]))


# -- config (de)serialization --------------------------------------------------


def config_to_json(config: SynthConfig) -> dict:
    out = {k: getattr(config, k) for k in config.__dataclass_fields__ if k != "failure_spec"}
    out["failure_spec"] = [
        {"mode": f.mode.value, "probability": f.probability, "param": f.param} for f in config.failure_spec
    ]
    return out


def config_from_json(d: dict) -> SynthConfig:
    d = dict(d)
    specs = tuple(FailureSpec(f["mode"], float(f["probability"]), f.get("param")) for f in d.pop("failure_spec", []))
    return SynthConfig(**d, failure_spec=specs)


def parse_failure_spec(text: str) -> tuple[FailureSpec, ...]:
    """Parse ``"Slip:0.2, SensorShift:0.2:3.0"`` (mode:probability[:param]) entries."""
    specs = []
    for item in filter(None, (p.strip() for p in text.split(","))):
        parts = item.split(":")
        if len(parts) not in (2, 3):
            raise ConfigError(f"failure_spec: cannot parse entry {item!r}")
        try:
            mode = FailureMode(parts[0].strip())
        except ValueError:
            valid = ", ".join(m.value for m in FailureMode)
            raise ConfigError(f"failure_spec: unknown mode {parts[0]!r} (expected one of {valid})") from None
        try:
            prob = float(parts[1])
            param = float(parts[2]) if len(parts) == 3 else None
        except ValueError:
            raise ConfigError(f"failure_spec: bad number in {item!r}") from None
        specs.append(FailureSpec(mode, prob, param))
    return tuple(specs)


_INT_KEYS = {"n_rollouts", "T_max", "H", "H_prime", "T_O", "d_feature", "seed", "start_index", "embedding_seed"}
_STR_KEYS = {"id_prefix"}


def read_config_values(path: str | Path) -> dict:
    """Raw ``key = value`` pairs of a flat config file (optional ``[synth]`` header)."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.lstrip().startswith("["):
        text = "[synth]\n" + text
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep T_max, H_prime case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    name = "synth" if parser.has_section("synth") else parser.sections()[0]
    return dict(parser[name].items())


def load_config(path: str | Path, overrides: dict | None = None) -> SynthConfig:
    values = read_config_values(path)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_mapping(values)


def config_from_mapping(values: dict) -> SynthConfig:
    kwargs: dict = {}
    fields_ = SynthConfig.__dataclass_fields__
    for key, raw in values.items():
        if key not in fields_:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            if key == "failure_spec":
                kwargs[key] = parse_failure_spec(raw) if isinstance(raw, str) else tuple(raw)
            elif key in _INT_KEYS:
                kwargs[key] = int(raw)
            elif key in _STR_KEYS:
                kwargs[key] = str(raw)
            else:
                kwargs[key] = float(raw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from None
    return SynthConfig(**kwargs)


def with_failures(config: SynthConfig, specs: Sequence[FailureSpec], **changes) -> SynthConfig:
    return replace(config, failure_spec=tuple(specs), **changes)
