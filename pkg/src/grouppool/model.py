"""Hierarchical temporal model: person LSTM -> pooling -> FC -> group LSTM -> heads."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import ClassifierHead, LstmParams, LstmState, classify, cross_entropy, lstm_step
from .pooling import (
    AttentionParams,
    AttentionTrace,
    HapParams,
    PoolingScheme,
    SubgroupAssignment,
    avg_pool,
    gap,
    hap,
    max_pool,
    subgroup_gap_concat,
)

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d_x: int = 12
    d_h_person: int = 32
    d_h_group: int = 16
    d_fc: int = 16
    attn_dim: int = 16
    n_actions: int = 5
    n_activities: int = 4
    n_subgroups: int = 2
    scheme: PoolingScheme = PoolingScheme.GAP
    lam: float = 2.0
    share_person_attention: bool = False
    # "last": group loss on the final timestep only; "all": mean over timesteps
    group_loss: str = "last"
    lstm_init_std: float = 0.1
    context_init_std: float = 0.1

    def __post_init__(self):
        self.scheme = PoolingScheme(self.scheme)
        for name in ("d_x", "d_h_person", "d_h_group", "d_fc", "attn_dim", "n_subgroups"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.n_actions < 2 or self.n_activities < 2:
            raise ValueError("need at least 2 action and 2 activity classes")
        if self.lam < 0:
            raise ValueError("ModelConfig.lam must be >= 0")
        if self.group_loss not in ("last", "all"):
            raise ValueError(f"group_loss must be 'last' or 'all', got {self.group_loss!r}")

    @property
    def person_dim(self) -> int:
        return self.d_h_person + self.d_x

    @property
    def pooled_dim(self) -> int:
        if self.scheme is PoolingScheme.SUBGROUP_GAP:
            return self.n_subgroups * self.person_dim
        return self.person_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PERSON_PREFIXES = ("person_lstm.", "action_head.")


def is_person_branch(name: str) -> bool:
    return name.startswith(PERSON_PREFIXES)


def _xavier(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def _attention_init(rng, prefix: str, a: int, d: int, std: float) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.W": _xavier(rng, a, d),
        f"{prefix}.b": np.zeros(a),
        f"{prefix}.u": rng.normal(0.0, std, size=a),
    }


def _lstm_init(rng, prefix: str, h: int, d: int, std: float) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.w_x": rng.normal(0.0, std, size=(4 * h, d)),
        f"{prefix}.w_h": rng.normal(0.0, std, size=(4 * h, h)),
        f"{prefix}.b": rng.normal(0.0, std, size=4 * h),
    }


def pooling_param_names(config: ModelConfig) -> list[str]:
    return [k for k in init_params(config, 0) if k.startswith("pool.")]


def init_params(config: ModelConfig, seed: int | np.random.Generator = 0) -> dict[str, np.ndarray]:
    """Fresh parameters in a fixed, stable order."""
    rng = np.random.default_rng(seed)
    c = config
    d = c.person_dim
    params: dict[str, np.ndarray] = {}
    params.update(_lstm_init(rng, "person_lstm", c.d_h_person, c.d_x, c.lstm_init_std))
    params["action_head.weight"] = np.zeros((c.n_actions, d))
    params["action_head.bias"] = np.zeros(c.n_actions)

    if c.scheme is PoolingScheme.GAP:
        params.update(_attention_init(rng, "pool.person", c.attn_dim, d, c.context_init_std))
    elif c.scheme in (PoolingScheme.HAP, PoolingScheme.SUBGROUP_GAP):
        if c.share_person_attention:
            params.update(_attention_init(rng, "pool.person", c.attn_dim, d, c.context_init_std))
        else:
            for j in range(c.n_subgroups):
                params.update(_attention_init(rng, f"pool.person.{j}", c.attn_dim, d, c.context_init_std))
        if c.scheme is PoolingScheme.HAP:
            params.update(_attention_init(rng, "pool.subgroup", c.attn_dim, d, c.context_init_std))

    params["group_fc.weight"] = _xavier(rng, c.d_fc, c.pooled_dim)
    params["group_fc.bias"] = np.zeros(c.d_fc)
    params.update(_lstm_init(rng, "group_lstm", c.d_h_group, c.d_fc, c.lstm_init_std))
    params["activity_head.weight"] = np.zeros((c.n_activities, c.d_h_group))
    params["activity_head.bias"] = np.zeros(c.n_activities)
    return params


def check_params(config: ModelConfig, params: dict[str, np.ndarray]) -> None:
    expected = {k: v.shape for k, v in init_params(config, 0).items()}
    got = {k: np.shape(v) for k, v in params.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
        raise ValueError(
            f"parameters do not match scheme {config.scheme.value!r}: "
            f"missing={missing} unexpected={extra} wrong_shape={wrong}"
        )


def bind(params: dict[str, np.ndarray], track: bool = False) -> dict[str, Tensor]:
    if track:
        return {k: ad.param(v, k) for k, v in params.items()}
    return {k: Tensor(v) for k, v in params.items()}


def _lstm(bound, prefix: str) -> LstmParams:
    return LstmParams(bound[f"{prefix}.w_x"], bound[f"{prefix}.w_h"], bound[f"{prefix}.b"])


def _head(bound, prefix: str) -> ClassifierHead:
    return ClassifierHead(bound[f"{prefix}.weight"], bound[f"{prefix}.bias"])


def _attention(bound, prefix: str) -> AttentionParams:
    return AttentionParams(bound[f"{prefix}.W"], bound[f"{prefix}.b"], bound[f"{prefix}.u"])


def _person_attention(bound, config: ModelConfig) -> list[AttentionParams]:
    if config.share_person_attention:
        return [_attention(bound, "pool.person")] * config.n_subgroups
    return [_attention(bound, f"pool.person.{j}") for j in range(config.n_subgroups)]


@dataclass
class Batch:
    """Clips stacked along a leading axis; all share n, T and subgroup split."""

    persons: np.ndarray          # (B, n, T, d_x)
    action_labels: np.ndarray    # (B, n, T)
    activity_labels: np.ndarray  # (B,)
    assignment: SubgroupAssignment

    @classmethod
    def from_clips(cls, clips: Sequence) -> "Batch":
        if not clips:
            raise ValueError("empty batch")
        first = clips[0]
        for c in clips[1:]:
            if c.persons.shape != first.persons.shape or not np.array_equal(c.subgroups, first.subgroups):
                raise ValueError(f"clip {c.id} does not match the batch layout of clip {first.id}")
        return cls(
            np.stack([c.persons for c in clips]),
            np.stack([c.action_labels for c in clips]),
            np.array([c.activity_label for c in clips], dtype=np.intp),
            SubgroupAssignment(first.subgroups, first.n_subgroups),
        )

    @property
    def T(self) -> int:
        return self.persons.shape[-2]


@dataclass
class ForwardResult:
    person_reprs: list[Tensor] = field(default_factory=list)    # per t: (..., n, d)
    action_probs: list[Tensor] = field(default_factory=list)    # per t: (..., n, K_p)
    activity_probs: list[Tensor] = field(default_factory=list)  # per t: (..., K_g)
    traces: list[AttentionTrace] = field(default_factory=list)  # per t; empty for max/avg


def person_forward(bound: dict[str, Tensor], config: ModelConfig, tracks) -> ForwardResult:
    """Person branch on tracks shaped ``(..., T, d_x)``.

    Each representation is the LSTM hidden state followed by the raw features.
    """
    tracks = np.asarray(tracks, dtype=np.float64)
    if tracks.ndim < 2 or tracks.shape[-1] != config.d_x or tracks.shape[-2] < 1:
        raise ad.ShapeError("person_forward", tracks.shape, (config.d_x,))
    lstm = _lstm(bound, "person_lstm")
    head = _head(bound, "action_head")
    state = LstmState.zeros(config.d_h_person, tracks.shape[:-2])
    out = ForwardResult()
    for t in range(tracks.shape[-2]):
        x = tracks[..., t, :]
        state = lstm_step(lstm, state, x)
        P = ad.concat([state.h, x], axis=-1)
        out.person_reprs.append(P)
        out.action_probs.append(classify(head, P))
    return out


def pool(bound, config: ModelConfig, P: Tensor, assignment: SubgroupAssignment):
    scheme = config.scheme
    if scheme is PoolingScheme.MAX:
        return max_pool(P), None
    if scheme is PoolingScheme.AVG:
        return avg_pool(P), None
    if scheme is PoolingScheme.GAP:
        G, alpha = gap(P, _attention(bound, "pool.person"))
        return G, AttentionTrace(scheme, alpha.data)
    if assignment.m != config.n_subgroups:
        raise ValueError(f"clip has {assignment.m} subgroups, model expects {config.n_subgroups}")
    if scheme is PoolingScheme.HAP:
        hp = HapParams(_person_attention(bound, config), _attention(bound, "pool.subgroup"))
        return hap(P, assignment, hp)
    return subgroup_gap_concat(P, assignment, _person_attention(bound, config))


def forward(bound: dict[str, Tensor], config: ModelConfig, persons: np.ndarray,
            assignment: SubgroupAssignment) -> ForwardResult:
    """Full model on ``persons`` shaped ``(..., n, T, d_x)``."""
    out = person_forward(bound, config, persons)
    fc_w, fc_b = bound["group_fc.weight"], bound["group_fc.bias"]
    glstm = _lstm(bound, "group_lstm")
    head = _head(bound, "activity_head")
    state = LstmState.zeros(config.d_h_group, persons.shape[:-3])
    for P in out.person_reprs:
        G, trace = pool(bound, config, P, assignment)
        z = ad.tanh(ad.linear(G, fc_w, fc_b))
        state = lstm_step(glstm, state, z)
        out.activity_probs.append(classify(head, state.h))
        if trace is not None:
            out.traces.append(trace)
    return out


def group_forward(params: dict[str, np.ndarray], config: ModelConfig, clip):
    """Per-timestep activity probabilities and attention traces for one clip."""
    out = forward(bind(params), config, clip.persons, SubgroupAssignment(clip.subgroups, clip.n_subgroups))
    return [p.data for p in out.activity_probs], out.traces


def person_loss(action_probs: Sequence[Tensor], action_labels: np.ndarray) -> Tensor:
    """Mean person cross-entropy over persons, timesteps and any batch axes."""
    action_labels = np.asarray(action_labels)
    terms = [cross_entropy(p, action_labels[..., t]).mean() for t, p in enumerate(action_probs)]
    return ad.mean(ad.stack(terms))


def group_loss(activity_probs: Sequence[Tensor], activity_labels, mode: str = "last") -> Tensor:
    labels = np.asarray(activity_labels)
    if mode == "last":
        return cross_entropy(activity_probs[-1], labels).mean()
    return ad.mean(ad.stack([cross_entropy(p, labels).mean() for p in activity_probs]))


def joint_loss(activity_probs, action_probs, activity_labels, action_labels, lam: float,
               mode: str = "last") -> Tensor:
    """Group cross-entropy plus ``lam`` times the mean person cross-entropy."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    activity_probs = [ad.as_tensor(p) for p in activity_probs]
    action_probs = [ad.as_tensor(p) for p in action_probs]
    loss = group_loss(activity_probs, activity_labels, mode)
    if lam == 0:
        return loss
    return loss + lam * person_loss(action_probs, action_labels)


def batch_loss(bound, config: ModelConfig, batch: Batch, stage: int = 2) -> Tensor:
    if stage == 1:
        out = person_forward(bound, config, batch.persons)
        return person_loss(out.action_probs, batch.action_labels)
    out = forward(bound, config, batch.persons, batch.assignment)
    return joint_loss(out.activity_probs, out.action_probs, batch.activity_labels,
                      batch.action_labels, config.lam, config.group_loss)


@dataclass
class Prediction:
    activity: int
    actions: np.ndarray                 # (n, T)
    traces: list[AttentionTrace]
    activity_probs: np.ndarray          # final timestep


def predict_batch(params, config: ModelConfig, batch: Batch):
    """Vectorised predictions: (activity (B,), actions (B, n, T), traces per t, final probs)."""
    out = forward(bind(params), config, batch.persons, batch.assignment)
    final = out.activity_probs[-1].data
    activity = np.argmax(final, axis=-1)
    actions = np.stack([np.argmax(p.data, axis=-1) for p in out.action_probs], axis=-1)
    return activity, actions, out.traces, final


def predict(params, config: ModelConfig, clip) -> Prediction:
    """Argmax predictions for one clip; ties resolve to the lowest class index."""
    out = forward(bind(params), config, clip.persons, SubgroupAssignment(clip.subgroups, clip.n_subgroups))
    final = out.activity_probs[-1].data
    actions = np.stack([np.argmax(p.data, axis=-1) for p in out.action_probs], axis=-1)
    return Prediction(int(np.argmax(final)), actions, out.traces, final)


# -- checkpoints ------------------------------------------------------------

def checkpoint_bytes(config: ModelConfig, params: dict[str, np.ndarray]) -> bytes:
    doc = {
        "v": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "params": [
            {"name": k, "shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in params.items()
        ],
    }
    return (json.dumps(doc, separators=(",", ":")) + "\n").encode()


def save_checkpoint(path, config: ModelConfig, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_bytes(config, params))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: malformed checkpoint at line {e.lineno} col {e.colno}: {e.msg}") from None
    if doc.get("v") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('v')!r}")
    config = ModelConfig.from_dict(doc["config"])
    params = {}
    for entry in doc["params"]:
        data = np.array(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if data.size != int(np.prod(shape)):
            raise ValueError(f"{path}: parameter {entry['name']!r} has {data.size} values for shape {shape}")
        params[entry["name"]] = data.reshape(shape)
    check_params(config, params)
    return config, params
