"""Pooling-scheme comparison on generated clips, plus attention localization."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import Clip
from .model import ModelConfig, predict
from .pooling import PoolingScheme
from .train import EpochRecord, TrainConfig, evaluate, train


@dataclass
class SchemeResult:
    scheme: str
    test_accuracy: float
    train_accuracy: float
    final_loss: float
    seconds: float
    losses: list[float] = field(repr=False)
    params: dict[str, np.ndarray] = field(repr=False)

    def summary(self) -> dict:
        return {"scheme": self.scheme, "test_accuracy": self.test_accuracy,
                "train_accuracy": self.train_accuracy, "final_loss": self.final_loss,
                "seconds": round(self.seconds, 1)}


def run_scheme(scheme: PoolingScheme | str, model_config: ModelConfig, train_config: TrainConfig,
               train_clips: Sequence[Clip], test_clips: Sequence[Clip],
               on_epoch: Callable[[EpochRecord], None] | None = None) -> SchemeResult:
    cfg = replace(model_config, scheme=PoolingScheme(scheme))
    start = time.perf_counter()
    res = train(cfg, train_config, train_clips, on_epoch=on_epoch)
    test = evaluate(res.params, cfg, test_clips)
    train_acc = res.history[-1].group_acc if res.history else evaluate(res.params, cfg, train_clips).group_accuracy
    return SchemeResult(cfg.scheme.value, test.group_accuracy, train_acc,
                        res.losses[-1] if res.losses else float("nan"),
                        time.perf_counter() - start, res.losses, res.params)


@dataclass
class Localization:
    """Per correctly classified clip: mean key weight / mean distractor weight."""

    ratios: list[float]
    n_clips: int
    threshold: float

    @property
    def n_correct(self) -> int:
        return len(self.ratios)

    @property
    def rate(self) -> float:
        if not self.ratios:
            return 0.0
        return float(np.mean(np.asarray(self.ratios) > self.threshold))


def key_weight_ratio(weights: np.ndarray, keys: np.ndarray) -> float:
    """``weights`` is (T, n); averages over time, then over key / other persons."""
    mean_w = np.asarray(weights).mean(axis=0)
    is_key = np.zeros(mean_w.shape[0], dtype=bool)
    is_key[keys] = True
    if is_key.all() or not is_key.any():
        raise ValueError("need at least one key agent and one distractor")
    return float(mean_w[is_key].mean() / mean_w[~is_key].mean())


def localization(params, config: ModelConfig, clips: Sequence[Clip], threshold: float = 2.0) -> Localization:
    if not config.scheme.attentive:
        raise ValueError(f"scheme {config.scheme.value!r} has no attention weights")
    ratios = []
    for clip in clips:
        pred = predict(params, config, clip)
        if pred.activity != clip.activity_label:
            continue
        weights = np.stack([tr.person_weights for tr in pred.traces])
        ratios.append(key_weight_ratio(weights, clip.key_agents))
    return Localization(ratios, len(clips), threshold)
