import numpy as np
import pytest

from grouppool.data import GeneratorConfig, generate
from grouppool.experiment import Localization, key_weight_ratio, localization, run_scheme
from grouppool.model import ModelConfig, init_params
from grouppool.train import TrainConfig


def test_key_weight_ratio():
    w = np.array([[0.5, 0.25, 0.25], [0.7, 0.15, 0.15]])
    assert key_weight_ratio(w, np.array([0])) == pytest.approx(0.6 / 0.2)
    with pytest.raises(ValueError):
        key_weight_ratio(w, np.array([0, 1, 2]))
    with pytest.raises(ValueError):
        key_weight_ratio(w, np.array([], dtype=int))


def test_localization_rate():
    assert Localization([3.0, 1.0, 2.5, 2.0], 10, 2.0).rate == 0.5
    assert Localization([], 10, 2.0).rate == 0.0


def _tiny():
    data = GeneratorConfig(n=4, T=3, d_x=4, n_actions=3, n_activities=3, n_clips=20, seed=1)
    model = ModelConfig(d_x=4, d_h_person=4, d_h_group=3, d_fc=3, attn_dim=3, n_actions=3, n_activities=3)
    return generate(data), model


def test_run_scheme_summary():
    (train_clips, test_clips), model = _tiny()
    res = run_scheme("avg", model, TrainConfig(epochs_stage1=1, epochs_stage2=1), train_clips, test_clips)
    s = res.summary()
    assert s["scheme"] == "avg" and 0.0 <= s["test_accuracy"] <= 1.0
    assert len(res.losses) == 2 and s["final_loss"] == res.losses[-1]


def test_localization_counts_only_correct_clips():
    (train_clips, test_clips), model = _tiny()
    loc = localization(init_params(model, 0), model, train_clips)
    assert loc.n_clips == len(train_clips)
    assert 0 <= loc.n_correct <= len(train_clips)
    # untrained attention is near uniform, so no clip clears a 2x ratio
    assert loc.rate == 0.0
    with pytest.raises(ValueError):
        localization(init_params(model, 0), ModelConfig(**{**model.to_dict(), "scheme": "max"}), train_clips)
