"""Synthetic "needle" clips, clip JSONL files and attention-trace export.

Clip file: one JSON object per line,

    {"v": 1, "id": 3, "T": 6, "dx": 12,
     "persons": [[[x_1^1...], ...T], ...n],      # n x T x dx floats
     "action_labels": [[...T], ...n],            # n x T ints
     "activity_label": 2,
     "subgroups": [0, 0, 0, 0, 1, 1, 1, 1]}      # subgroup id per person

Trace file: one JSON object per (clip, timestep),

    {"clip_id": 3, "t": 0, "alphas": [...n], "subgroup_alphas": [...m],
     "pred": 2, "truth": 2}

``subgroup_alphas`` is present only for HAP. Floats are written with the
shortest decimal that round-trips to the same double.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .pooling import AttentionTrace, PoolingScheme, SubgroupAssignment

CLIP_VERSION = 1
BACKGROUND_ACTION = 0


class ClipFormatError(ValueError):
    def __init__(self, path, line: int, field_name: str | None, msg: str):
        self.path, self.line, self.field = str(path), line, field_name
        where = f"{path}:{line}" + (f" field {field_name!r}" if field_name else "")
        super().__init__(f"{where}: {msg}")


@dataclass
class Clip:
    id: int
    persons: np.ndarray        # (n, T, dx)
    action_labels: np.ndarray  # (n, T)
    activity_label: int
    subgroups: np.ndarray      # (n,)

    def __post_init__(self):
        self.persons = np.asarray(self.persons, dtype=np.float64)
        self.action_labels = np.asarray(self.action_labels, dtype=np.intp)
        self.subgroups = np.asarray(self.subgroups, dtype=np.intp)
        if self.persons.ndim != 3 or 0 in self.persons.shape:
            raise ValueError(f"clip {self.id}: persons must be n x T x dx, got {self.persons.shape}")
        if self.action_labels.shape != self.persons.shape[:2]:
            raise ValueError(f"clip {self.id}: action_labels shape {self.action_labels.shape} "
                             f"does not match persons {self.persons.shape[:2]}")
        if self.subgroups.shape != (self.n,):
            raise ValueError(f"clip {self.id}: need one subgroup id per person")
        SubgroupAssignment(self.subgroups, self.n_subgroups)

    @property
    def n(self) -> int:
        return self.persons.shape[0]

    @property
    def T(self) -> int:
        return self.persons.shape[1]

    @property
    def dx(self) -> int:
        return self.persons.shape[2]

    @property
    def n_subgroups(self) -> int:
        return int(self.subgroups.max()) + 1

    @property
    def key_agents(self) -> np.ndarray:
        """Persons carrying a non-background action at the first timestep."""
        return np.flatnonzero(self.action_labels[:, 0] != BACKGROUND_ACTION)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Clip):
            return NotImplemented
        return (
            self.id == other.id
            and self.activity_label == other.activity_label
            and np.array_equal(self.persons, other.persons)
            and np.array_equal(self.action_labels, other.action_labels)
            and np.array_equal(self.subgroups, other.subgroups)
        )


@dataclass
class GeneratorConfig:
    n: int = 8
    T: int = 6
    d_x: int = 12
    n_actions: int = 5
    n_activities: int = 4
    n_key: int = 2
    n_subgroups: int = 2
    sigma_signal: float = 1.0
    sigma_noise: float = 2.0
    # norm of each class mean direction
    signal_scale: float = 3.0
    # where distractors are centred: "none" (origin), "independent" (mean of a
    # uniformly drawn class per distractor) or "shared" (one uniformly drawn
    # class for all distractors of a clip); none of them reveal the activity
    decoys: str = "independent"
    # per-person noise multiplier drawn log-uniformly from [1/jitter, jitter];
    # hides which persons are low-noise key agents
    noise_jitter: float = 4.0
    # last feature is a salience channel: a per-timestep offset shared by all
    # persons of a clip (think camera motion), plus ``salience_boost`` for key
    # agents; 0 disables the channel
    salience_boost: float = 2.0
    salience_offset_std: float = 6.0
    salience_noise: float = 0.5
    # "spread" deals key agents round-robin over subgroups (random member of
    # each); "random" draws positions uniformly over all persons
    key_placement: str = "spread"
    n_clips: int = 1000
    test_fraction: float = 0.2
    seed: int = 7

    def __post_init__(self):
        if not 1 <= self.n_key <= self.n:
            raise ValueError(f"n_key must lie in [1, n={self.n}]")
        if self.n_actions < 2 or self.n_activities < 2:
            raise ValueError("need at least 2 action and 2 activity classes")
        if self.noise_jitter < 1.0:
            raise ValueError("noise_jitter must be >= 1")
        if self.sigma_signal <= 0 or self.sigma_noise <= 0 or self.signal_scale <= 0:
            raise ValueError("noise and signal scales must be positive")
        if not 1 <= self.n_subgroups <= self.n:
            raise ValueError(f"cannot split {self.n} persons into {self.n_subgroups} subgroups")
        if self.salience_boost < 0 or self.salience_offset_std < 0 or self.salience_noise < 0:
            raise ValueError("salience settings must be >= 0")
        if self.salience_boost > 0 and self.d_x < 2:
            raise ValueError("the salience channel needs d_x >= 2")
        if min(self.n, self.T, self.d_x) < 1 or self.n_clips < 0:
            raise ValueError("n, T and d_x must be positive")
        if self.decoys not in ("none", "independent", "shared"):
            raise ValueError(f"decoys must be 'none', 'independent' or 'shared', got {self.decoys!r}")
        if self.key_placement not in ("spread", "random"):
            raise ValueError(f"key_placement must be 'spread' or 'random', got {self.key_placement!r}")
        if not 0.0 <= self.test_fraction <= 1.0:
            raise ValueError("test_fraction must lie in [0, 1]")


def class_means(config: GeneratorConfig) -> np.ndarray:
    """Per-activity mean directions, scaled to ``signal_scale``.

    The salience channel, when enabled, carries no class mean.
    """
    rng = np.random.default_rng([config.seed, 0x5EED])
    mu = rng.normal(size=(config.n_activities, config.d_x))
    if config.salience_boost > 0:
        mu[:, -1] = 0.0
    return config.signal_scale * mu / np.linalg.norm(mu, axis=1, keepdims=True)


def key_action(activity: int, n_actions: int) -> int:
    return 1 + activity % (n_actions - 1)


def _spread_keys(rng, subgroups: SubgroupAssignment, n_key: int) -> np.ndarray:
    """Key positions dealt over subgroups in a random order, a random free member each time."""
    free = [list(rng.permutation(subgroups.members(j))) for j in range(subgroups.m)]
    keys = []
    order = rng.permutation(subgroups.m)
    while len(keys) < n_key:
        for j in order:
            if free[j] and len(keys) < n_key:
                keys.append(free[j].pop())
    return np.array(keys)


def make_clip(config: GeneratorConfig, clip_id: int, means: np.ndarray) -> Clip:
    rng = np.random.default_rng([config.seed, clip_id])
    c = config
    activity = int(rng.integers(c.n_activities))
    subgroups = SubgroupAssignment.in_order(c.n, c.n_subgroups)
    if c.key_placement == "random":
        keys = rng.choice(c.n, size=c.n_key, replace=False)
    else:
        keys = _spread_keys(rng, subgroups, c.n_key)
    is_key = np.zeros(c.n, dtype=bool)
    is_key[keys] = True

    centres = np.zeros((c.n, c.d_x))
    if c.decoys == "independent":
        centres[:] = means[rng.integers(c.n_activities, size=c.n)]
    elif c.decoys == "shared":
        centres[:] = means[rng.integers(c.n_activities)]
    centres[is_key] = means[activity]
    jitter = np.exp(rng.uniform(-1.0, 1.0, size=(c.n, 1, 1)) * np.log(c.noise_jitter))
    scale = jitter * np.where(is_key, c.sigma_signal, c.sigma_noise)[:, None, None]
    persons = centres[:, None, :] + scale * rng.normal(size=(c.n, c.T, c.d_x))
    if c.salience_boost > 0:
        offset = c.salience_offset_std * rng.normal(size=c.T)
        persons[:, :, -1] = (offset[None, :] + c.salience_boost * is_key[:, None]
                             + c.salience_noise * rng.normal(size=(c.n, c.T)))

    actions = np.full((c.n, c.T), BACKGROUND_ACTION, dtype=np.intp)
    actions[is_key] = key_action(activity, c.n_actions)
    return Clip(clip_id, persons, actions, activity, subgroups.ids)


def generate(config: GeneratorConfig) -> tuple[list[Clip], list[Clip]]:
    """Train/test clip lists, disjoint by clip id and deterministic in ``config.seed``."""
    means = class_means(config)
    ids = np.random.default_rng([config.seed, 0x5B11]).permutation(config.n_clips)
    n_test = int(round(config.test_fraction * config.n_clips))
    test_ids = sorted(int(i) for i in ids[:n_test])
    train_ids = sorted(int(i) for i in ids[n_test:])
    return ([make_clip(config, i, means) for i in train_ids],
            [make_clip(config, i, means) for i in test_ids])


# -- clip files -------------------------------------------------------------

def clip_to_record(clip: Clip) -> dict:
    return {
        "v": CLIP_VERSION,
        "id": clip.id,
        "T": clip.T,
        "dx": clip.dx,
        "persons": clip.persons.tolist(),
        "action_labels": clip.action_labels.tolist(),
        "activity_label": int(clip.activity_label),
        "subgroups": clip.subgroups.tolist(),
    }


def _field(rec: dict, name: str, path, line: int):
    if name not in rec:
        raise ClipFormatError(path, line, name, "missing field")
    return rec[name]


def clip_from_record(rec, path="<record>", line: int = 1) -> Clip:
    if not isinstance(rec, dict):
        raise ClipFormatError(path, line, None, "record is not a JSON object")
    if _field(rec, "v", path, line) != CLIP_VERSION:
        raise ClipFormatError(path, line, "v", f"unsupported version {rec['v']!r}")
    T, dx = _field(rec, "T", path, line), _field(rec, "dx", path, line)
    try:
        persons = np.array(_field(rec, "persons", path, line), dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ClipFormatError(path, line, "persons", str(e)) from None
    if persons.ndim != 3 or persons.shape[1:] != (T, dx):
        raise ClipFormatError(path, line, "persons", f"expected n x {T} x {dx}, got {persons.shape}")
    try:
        actions = np.array(_field(rec, "action_labels", path, line))
        if actions.dtype.kind not in "iu":
            raise ValueError("labels must be integers")
    except (TypeError, ValueError) as e:
        raise ClipFormatError(path, line, "action_labels", str(e)) from None
    activity = _field(rec, "activity_label", path, line)
    if not isinstance(activity, int) or isinstance(activity, bool):
        raise ClipFormatError(path, line, "activity_label", "must be an integer")
    subgroups = _field(rec, "subgroups", path, line)
    try:
        return Clip(_field(rec, "id", path, line), persons, actions, activity, subgroups)
    except ValueError as e:
        raise ClipFormatError(path, line, None, str(e)) from None


def save_clips(path, clips: Iterable[Clip]) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for clip in clips:
            fh.write(json.dumps(clip_to_record(clip), separators=(",", ":")) + "\n")


def load_clips(path) -> list[Clip]:
    """All clips in ``path``; raises :class:`ClipFormatError` on the first bad line."""
    path = Path(path)
    clips = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ClipFormatError(path, lineno, None, f"invalid JSON at col {e.colno}: {e.msg}") from None
            clips.append(clip_from_record(rec, path, lineno))
    return clips


# -- attention traces -------------------------------------------------------

@dataclass
class TraceRecord:
    clip_id: int
    t: int
    alphas: list[float]
    pred: int
    truth: int
    subgroup_alphas: list[float] | None = field(default=None)

    def to_json(self) -> str:
        rec = {"clip_id": self.clip_id, "t": self.t, "alphas": self.alphas}
        if self.subgroup_alphas is not None:
            rec["subgroup_alphas"] = self.subgroup_alphas
        rec["pred"], rec["truth"] = self.pred, self.truth
        return json.dumps(rec, separators=(",", ":"))


def trace_records(clip: Clip, traces: Sequence[AttentionTrace], pred: int) -> list[TraceRecord]:
    """Per-timestep records for one clip; traces must hold one clip's weights each."""
    if not traces:
        raise ValueError(f"clip {clip.id}: no attention traces (non-attentive scheme?)")
    if len(traces) != clip.T:
        raise ValueError(f"clip {clip.id}: {len(traces)} traces for T={clip.T}")
    out = []
    for t, tr in enumerate(traces):
        if np.shape(tr.person_weights) != (clip.n,):
            raise ValueError(f"clip {clip.id}: trace has shape {np.shape(tr.person_weights)}, expected ({clip.n},)")
        sub = None
        if tr.scheme is PoolingScheme.HAP:
            if tr.subgroup_weights is None:
                raise ValueError(f"clip {clip.id}: HAP trace without subgroup weights")
            sub = [float(w) for w in tr.subgroup_weights]
        elif tr.subgroup_weights is not None:
            raise ValueError(f"clip {clip.id}: {tr.scheme.value} trace carries subgroup weights")
        out.append(TraceRecord(clip.id, t, [float(w) for w in tr.person_weights], int(pred),
                               int(clip.activity_label), sub))
    return out


def export_traces(path, records: Iterable[TraceRecord]) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def load_traces(path) -> list[TraceRecord]:
    out = []
    with Path(path).open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                out.append(TraceRecord(rec["clip_id"], rec["t"], rec["alphas"], rec["pred"],
                                       rec["truth"], rec.get("subgroup_alphas")))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ClipFormatError(path, lineno, None, f"bad trace record: {e}") from None
    return out
