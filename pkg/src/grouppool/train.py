"""ADAM, the two-stage training schedule, evaluation and gradient checking."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import Clip
from .model import Batch, ModelConfig, batch_loss, bind, init_params, is_person_branch, predict_batch
from .pooling import PoolingScheme, SubgroupAssignment


class NumericalError(RuntimeError):
    def __init__(self, msg: str, param: str | None = None):
        self.param = param
        super().__init__(msg)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs_stage1: int = 20
    epochs_stage2: int = 80
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected ADAM update of the parameters named in ``grads`` (in place)."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ad.ShapeError(f"adam_step {name}", p.shape, g.shape)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return params, state


@dataclass
class EvalReport:
    group_accuracy: float
    person_accuracy: float
    confusion: np.ndarray          # rows = truth, cols = prediction
    per_class_accuracy: list[float | None]
    n_clips: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        return d

    def format(self) -> str:
        k = self.confusion.shape[0]
        width = max(4, len(str(int(self.confusion.max(initial=0)))) + 1)
        lines = [
            f"clips: {self.n_clips}",
            f"group accuracy:  {self.group_accuracy:.4f}",
            f"person accuracy: {self.person_accuracy:.4f}",
            "confusion (rows = truth):",
            " " * 6 + "".join(f"{j:>{width}}" for j in range(k)),
        ]
        for i, row in enumerate(self.confusion):
            lines.append(f"{i:>5} " + "".join(f"{int(c):>{width}}" for c in row))
        return "\n".join(lines)


def make_batches(clips: Sequence[Clip], batch_size: int, order: Sequence[int] | None = None) -> list[Batch]:
    """Consecutive chunks of ``order``, split further so each batch shares one layout."""
    order = range(len(clips)) if order is None else order
    batches = []
    chunk: list[Clip] = []
    for i in order:
        clip = clips[i]
        if chunk and (len(chunk) == batch_size or not _same_layout(chunk[0], clip)):
            batches.append(Batch.from_clips(chunk))
            chunk = []
        chunk.append(clip)
    if chunk:
        batches.append(Batch.from_clips(chunk))
    return batches


def _same_layout(a: Clip, b: Clip) -> bool:
    return a.persons.shape == b.persons.shape and np.array_equal(a.subgroups, b.subgroups)


def _layout_groups(clips: Sequence[Clip]) -> list[list[int]]:
    groups: dict[tuple, list[int]] = defaultdict(list)
    for i, c in enumerate(clips):
        groups[(c.persons.shape, tuple(c.subgroups))].append(i)
    return list(groups.values())


def evaluate(params, config: ModelConfig, clips: Sequence[Clip], chunk: int = 256) -> EvalReport:
    if not clips:
        raise ValueError("evaluate: empty dataset")
    k = config.n_activities
    confusion = np.zeros((k, k), dtype=np.int64)
    person_hits = person_total = 0
    for group in _layout_groups(clips):
        for s in range(0, len(group), chunk):
            batch = Batch.from_clips([clips[i] for i in group[s:s + chunk]])
            activity, actions, _, _ = predict_batch(params, config, batch)
            np.add.at(confusion, (batch.activity_labels, activity), 1)
            person_hits += int((actions == batch.action_labels).sum())
            person_total += actions.size
    totals = confusion.sum(axis=1)
    per_class = [float(confusion[i, i] / totals[i]) if totals[i] else None for i in range(k)]
    return EvalReport(
        group_accuracy=float(np.trace(confusion) / confusion.sum()),
        person_accuracy=person_hits / person_total,
        confusion=confusion,
        per_class_accuracy=per_class,
        n_clips=len(clips),
    )


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    loss: float
    group_acc: float
    person_acc: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    losses: list[float]
    history: list[EpochRecord]
    reports: list[EvalReport]


def loss_and_grads(params, config: ModelConfig, batch: Batch, stage: int,
                   names: Sequence[str] | None = None) -> tuple[float, dict[str, np.ndarray]]:
    names = list(params) if names is None else list(names)
    with ad.Tape() as tape:
        bound = bind({k: params[k] for k in names}, track=True)
        bound.update(bind({k: v for k, v in params.items() if k not in bound}))
        loss = batch_loss(bound, config, batch, stage)
    grads = ad.backward(tape, loss, [bound[k] for k in names])
    return float(loss.data), grads


def _check_finite(loss: float, grads: dict[str, np.ndarray], params: dict[str, np.ndarray],
                  stage: int, epoch: int) -> None:
    # a bad parameter value poisons every gradient downstream, so report it first
    for name in grads:
        if not np.all(np.isfinite(params[name])):
            raise NumericalError(f"non-finite value in parameter {name!r} "
                                 f"(stage {stage}, epoch {epoch})", name)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r} "
                                 f"(stage {stage}, epoch {epoch}, loss {loss})", name)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss} (stage {stage}, epoch {epoch})", None)


def train(model_config: ModelConfig, train_config: TrainConfig, clips: Sequence[Clip],
          eval_clips: Sequence[Clip] | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None,
          params: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Stage 1 fits the person branch on person losses; stage 2 fits everything jointly.

    Accuracies in the history are measured on ``eval_clips`` when given, else on
    the training clips.
    """
    if not clips:
        raise ValueError("train: empty dataset")
    mismatched = [c.id for c in clips if c.dx != model_config.d_x]
    if mismatched:
        raise ValueError(f"clips {mismatched[:5]} have feature dim != d_x={model_config.d_x}")
    if model_config.scheme in (PoolingScheme.HAP, PoolingScheme.SUBGROUP_GAP):
        bad = [c.id for c in clips if c.n_subgroups != model_config.n_subgroups]
        if bad:
            raise ValueError(f"clips {bad[:5]} do not have {model_config.n_subgroups} subgroups")

    rng = np.random.default_rng(train_config.seed)
    if params is None:
        params = init_params(model_config, rng.integers(2**63))
    else:
        params = {k: v.copy() for k, v in params.items()}
    eval_on = clips if eval_clips is None else eval_clips
    result = TrainResult(params, [], [], [])

    person_names = [k for k in params if is_person_branch(k)]
    stages = [(1, train_config.epochs_stage1, person_names),
              (2, train_config.epochs_stage2, list(params))]
    for stage, epochs, names in stages:
        state = AdamState()
        for epoch in range(epochs):
            order = rng.permutation(len(clips))
            total = 0.0
            batches = make_batches(clips, train_config.batch_size, order)
            for batch in batches:
                loss, grads = loss_and_grads(params, model_config, batch, stage, names)
                _check_finite(loss, grads, params, stage, epoch)
                adam_step(params, grads, state, train_config)
                total += loss * len(batch.activity_labels)
            mean_loss = total / len(clips)
            report = evaluate(params, model_config, eval_on)
            rec = EpochRecord(stage, epoch, mean_loss, report.group_accuracy, report.person_accuracy)
            result.losses.append(mean_loss)
            result.history.append(rec)
            result.reports.append(report)
            if on_epoch is not None:
                on_epoch(rec)
        if epochs:
            bad = [k for k in names if not np.all(np.isfinite(params[k]))]
            if bad:
                raise NumericalError(f"non-finite parameter {bad[0]!r} after stage {stage}", bad[0])
    return result


# -- gradient checking ------------------------------------------------------

@dataclass
class GradcheckReport:
    scheme: str
    errors: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def format(self) -> str:
        lines = [f"scheme {self.scheme}: {'PASS' if self.passed else 'FAIL'} "
                 f"(max rel err {self.max_error:.3e}, tol {self.tolerance:.0e})"]
        for name, err in self.errors.items():
            flag = "ok  " if err <= self.tolerance else "FAIL"
            lines.append(f"  {flag} {name:<28} {err:.3e}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Largest absolute discrepancy, relative to the block's largest gradient entry."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def tiny_config(scheme: PoolingScheme | str, **overrides) -> ModelConfig:
    kw = dict(d_x=3, d_h_person=4, d_h_group=4, d_fc=4, attn_dim=4, n_actions=3,
              n_activities=3, n_subgroups=2, scheme=PoolingScheme(scheme))
    kw.update(overrides)
    return ModelConfig(**kw)


def tiny_batch(config: ModelConfig, seed: int, n: int = 2, T: int = 2, batch: int = 2) -> Batch:
    rng = np.random.default_rng(seed)
    return Batch(
        rng.uniform(-2, 2, size=(batch, n, T, config.d_x)),
        rng.integers(config.n_actions, size=(batch, n, T)),
        rng.integers(config.n_activities, size=batch),
        SubgroupAssignment.in_order(n, config.n_subgroups),
    )


def randomize(params: dict[str, np.ndarray], seed: int, scale: float = 0.5) -> dict[str, np.ndarray]:
    """Dense random parameters so no block (e.g. zero-initialised heads) is degenerate."""
    rng = np.random.default_rng(seed)
    return {k: rng.normal(0.0, scale, size=v.shape) for k, v in params.items()}


def gradcheck(model_config: ModelConfig, seed: int = 0, step: float = 1e-5, tolerance: float = 1e-4,
              params: dict[str, np.ndarray] | None = None, batch: Batch | None = None,
              stage: int = 2) -> GradcheckReport:
    """Compare ``backward`` against central differences for every parameter block."""
    if params is None:
        params = randomize(init_params(model_config, seed), seed + 1)
    if batch is None:
        batch = tiny_batch(model_config, seed + 2)
    params = {k: v.copy() for k, v in params.items()}
    _, analytic = loss_and_grads(params, model_config, batch, stage)

    def f() -> float:
        return float(batch_loss(bind(params), model_config, batch, stage).data)

    errors = {}
    for name in params:
        numeric = numeric_grad(f, params[name], step)
        errors[name] = relative_error(analytic[name], numeric)
    return GradcheckReport(model_config.scheme.value, errors, tolerance)
