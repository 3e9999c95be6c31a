"""Domain types and the newline-delimited rollout dataset format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

DATASET_VERSION = 1


class DatasetError(ValueError):
    """Dataset file is malformed or violates a schema invariant."""


class Label(str, Enum):
    SUCCESS = "Success"
    FAILURE = "Failure"
    UNKNOWN = "Unknown"


class FailureMode(str, Enum):
    SLIP = "Slip"
    JITTER = "Jitter"
    SENSOR_SHIFT = "SensorShift"
    OOD_INIT = "OodInit"
    STALL = "Stall"


class ScoreMethodId(str, Enum):
    LOGPZO = "logpzo"
    LOGPO = "logpo"
    RND = "rnd"
    CFM = "cfm"
    SPARC = "sparc"
    STAC = "stac"
    PCA_KMEANS = "pca-kmeans"


@dataclass(frozen=True)
class Step:
    t: int
    obs: np.ndarray
    action_chunk: np.ndarray

    def __post_init__(self) -> None:
        obs = np.asarray(self.obs, dtype=np.float64)
        act = np.asarray(self.action_chunk, dtype=np.float64)
        if obs.ndim != 1:
            raise DatasetError(f"step t={self.t}: obs must be a vector")
        if act.ndim != 2:
            raise DatasetError(f"step t={self.t}: action_chunk must be a matrix")
        obs.setflags(write=False)
        act.setflags(write=False)
        object.__setattr__(self, "obs", obs)
        object.__setattr__(self, "action_chunk", act)
        object.__setattr__(self, "t", int(self.t))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Step):
            return NotImplemented
        return (
            self.t == other.t
            and np.array_equal(self.obs, other.obs)
            and np.array_equal(self.action_chunk, other.action_chunk)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Rollout:
    id: str
    steps: tuple[Step, ...]
    label: Label = Label.UNKNOWN
    failure_mode: FailureMode | None = None
    injection_time: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "label", Label(self.label))
        if self.failure_mode is not None:
            object.__setattr__(self, "failure_mode", FailureMode(self.failure_mode))
        if not self.steps:
            raise DatasetError(f"rollout {self.id!r} has no steps")
        if self.injection_time is not None and self.injection_time > self.steps[-1].t:
            raise DatasetError(f"rollout {self.id!r}: injection_time beyond last step")

    @property
    def t_grid(self) -> np.ndarray:
        return np.array([s.t for s in self.steps], dtype=np.int64)

    @property
    def observations(self) -> np.ndarray:
        return np.stack([s.obs for s in self.steps])

    @property
    def actions(self) -> np.ndarray:
        """Stacked action chunks, shape (n_steps, H, d_a)."""
        return np.stack([s.action_chunk for s in self.steps])

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class DatasetHeader:
    d_O: int
    d_a: int
    H: int
    H_prime: int
    T_O: int = 2
    version: int = DATASET_VERSION
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "d_O": self.d_O,
            "d_a": self.d_a,
            "H": self.H,
            "H_prime": self.H_prime,
            "T_O": self.T_O,
            "version": self.version,
        }
        if self.extra:
            out["extra"] = self.extra
        return out


@dataclass(frozen=True)
class ScoreSeries:
    rollout_id: str
    method: str
    t: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=np.int64)
        v = np.asarray(self.values, dtype=np.float64)
        if t.shape != v.shape or v.ndim != 1:
            raise ValueError("score series needs matching 1-D t and values")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"score series for {self.rollout_id!r} contains non-finite values")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.values)


def header_for(rollouts: Sequence[Rollout], H_prime: int | None = None, T_O: int = 2) -> DatasetHeader:
    """Infer a header from the first rollout's shapes."""
    first = rollouts[0]
    H, d_a = first.steps[0].action_chunk.shape
    if H_prime is None:
        H_prime = int(first.steps[1].t - first.steps[0].t) if len(first.steps) > 1 else H // 2
    return DatasetHeader(d_O=first.steps[0].obs.shape[0], d_a=d_a, H=H, H_prime=H_prime, T_O=T_O)


def check_rollout(r: Rollout, header: DatasetHeader) -> None:
    """Raise DatasetError when ``r`` does not match the header's dimensions."""
    prev = None
    for k, s in enumerate(r.steps):
        if s.obs.shape != (header.d_O,):
            raise DatasetError(f"rollout {r.id!r} step {k}: obs dim {s.obs.shape[0]} != d_O={header.d_O}")
        if s.action_chunk.shape != (header.H, header.d_a):
            raise DatasetError(
                f"rollout {r.id!r} step {k}: action_chunk shape {s.action_chunk.shape} "
                f"!= ({header.H}, {header.d_a})"
            )
        if prev is not None and s.t != prev + header.H_prime:
            raise DatasetError(f"rollout {r.id!r} step {k}: t={s.t} does not advance by H'={header.H_prime}")
        prev = s.t


def rollout_to_json(r: Rollout) -> dict:
    rec: dict = {"id": r.id, "label": r.label.value}
    if r.failure_mode is not None:
        rec["failure_mode"] = r.failure_mode.value
    if r.injection_time is not None:
        rec["injection_time"] = int(r.injection_time)
    rec["steps"] = [step_to_json(s) for s in r.steps]
    return rec


def step_to_json(s: Step) -> dict:
    return {"t": s.t, "obs": s.obs.tolist(), "action_chunk": s.action_chunk.tolist()}


def step_from_json(d: dict) -> Step:
    return Step(t=int(d["t"]), obs=np.array(d["obs"], dtype=np.float64), action_chunk=np.array(d["action_chunk"], dtype=np.float64))


def rollout_from_json(d: dict) -> Rollout:
    return Rollout(
        id=str(d["id"]),
        steps=tuple(step_from_json(s) for s in d["steps"]),
        label=Label(d.get("label", "Unknown")),
        failure_mode=d.get("failure_mode"),
        injection_time=d.get("injection_time"),
    )


def save_rollouts(rollouts: Sequence[Rollout], path: str | Path, header: DatasetHeader | None = None) -> None:
    """Write a header line followed by one JSON record per rollout.

    Floats go through ``repr``-style shortest round-trip formatting, so a
    reload is bit-exact.
    """
    rollouts = list(rollouts)
    if header is None:
        header = header_for(rollouts) if rollouts else DatasetHeader(0, 0, 0, 0)
    for r in rollouts:
        check_rollout(r, header)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": header.to_json()}) + "\n")
        for r in rollouts:
            fh.write(json.dumps(rollout_to_json(r), allow_nan=False) + "\n")


def _parse_line(line: str, lineno: int, path) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}:{lineno}: malformed record ({exc.msg})") from exc
    if not isinstance(rec, dict):
        raise DatasetError(f"{path}:{lineno}: record is not an object")
    return rec


def header_from_json(h: dict) -> DatasetHeader:
    return DatasetHeader(
        d_O=int(h["d_O"]),
        d_a=int(h["d_a"]),
        H=int(h["H"]),
        H_prime=int(h["H_prime"]),
        T_O=int(h.get("T_O", 2)),
        version=int(h.get("version", DATASET_VERSION)),
        extra=h.get("extra", {}),
    )


def iter_rollouts(path: str | Path) -> Iterator[Rollout]:
    header, it = open_dataset(path)
    yield from it


def open_dataset(path: str | Path) -> tuple[DatasetHeader | None, Iterator[Rollout]]:
    """Read the header eagerly and return it with a lazy rollout iterator."""
    fh = open(path, encoding="utf-8")
    first = fh.readline()
    if not first.strip():
        fh.close()
        return None, iter(())
    rec = _parse_line(first, 1, path)
    if "header" not in rec:
        fh.close()
        raise DatasetError(f"{path}:1: missing header line")
    try:
        header = header_from_json(rec["header"])
    except (KeyError, TypeError, ValueError) as exc:
        fh.close()
        raise DatasetError(f"{path}:1: bad header ({exc})") from exc

    def gen() -> Iterator[Rollout]:
        with fh:
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                rec = _parse_line(line, lineno, path)
                try:
                    r = rollout_from_json(rec)
                except (KeyError, TypeError, ValueError) as exc:
                    raise DatasetError(f"{path}:{lineno}: bad rollout record ({exc})") from exc
                check_rollout(r, header)
                yield r

    return header, gen()


def load_rollouts(path: str | Path) -> list[Rollout]:
    return list(iter_rollouts(path))


def load_dataset(path: str | Path) -> tuple[DatasetHeader | None, list[Rollout]]:
    header, it = open_dataset(path)
    return header, list(it)


def filter_label(rollouts: Iterable[Rollout], label: Label) -> list[Rollout]:
    return [r for r in rollouts if r.label is label]
