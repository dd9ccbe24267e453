import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grouppool import autodiff as ad
from grouppool.data import Clip
from grouppool.model import (
    Batch,
    ModelConfig,
    bind,
    check_params,
    checkpoint_bytes,
    forward,
    group_forward,
    init_params,
    joint_loss,
    load_checkpoint,
    person_forward,
    predict,
    save_checkpoint,
)
from grouppool.pooling import PoolingScheme, SubgroupAssignment
from grouppool.train import randomize

from oracle import gap_model_probs

SCHEMES = [s.value for s in PoolingScheme]


def small_config(scheme="gap", **kw):
    base = dict(d_x=3, d_h_person=4, d_h_group=3, d_fc=3, attn_dim=2, n_actions=3, n_activities=4,
                n_subgroups=2, scheme=scheme)
    base.update(kw)
    return ModelConfig(**base)


def random_clip(rng, n=4, T=3, dx=3, m=2, clip_id=0, n_actions=3, n_activities=4):
    return Clip(clip_id, rng.normal(size=(n, T, dx)), rng.integers(n_actions, size=(n, T)),
                int(rng.integers(n_activities)), SubgroupAssignment.in_order(n, m).ids)


# -- configuration and parameters ------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(lam=-1.0)
    with pytest.raises(ValueError):
        ModelConfig(d_h_person=0)
    with pytest.raises(ValueError):
        ModelConfig(scheme="median")
    assert ModelConfig(scheme="subgroup-gap").scheme is PoolingScheme.SUBGROUP_GAP


@pytest.mark.parametrize("scheme", SCHEMES)
def test_param_names_unique_and_dims(scheme):
    cfg = small_config(scheme)
    params = init_params(cfg, 0)
    assert len(set(params)) == len(params)
    fc_in = params["group_fc.weight"].shape[1]
    assert fc_in == (2 * 7 if scheme == "subgroup-gap" else 7)
    assert params["action_head.weight"].shape == (3, 7)
    assert params["activity_head.weight"].shape == (4, 3)
    assert any(k.startswith("pool.") for k in params) == (scheme not in ("max", "avg"))
    check_params(cfg, params)


def test_hap_param_sharing_flag():
    per = init_params(small_config("hap"), 0)
    shared = init_params(small_config("hap", share_person_attention=True), 0)
    assert "pool.person.1.W" in per and "pool.person.W" not in per
    assert "pool.person.W" in shared and "pool.person.0.W" not in shared


def test_check_params_mismatch():
    params = init_params(small_config("gap"), 0)
    with pytest.raises(ValueError, match="missing"):
        check_params(small_config("hap"), params)


def test_init_is_seeded():
    a, b = init_params(small_config(), 3), init_params(small_config(), 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert np.all(a["action_head.weight"] == 0) and np.all(a["activity_head.bias"] == 0)


# -- person branch ----------------------------------------------------------

def test_person_forward_zero_lstm():
    cfg = small_config()
    params = init_params(cfg, 0)
    for k in params:
        if k.startswith("person_lstm"):
            params[k][:] = 0
    track = np.random.default_rng(0).normal(size=(5, 3))
    out = person_forward(bind(params), cfg, track)
    assert len(out.person_reprs) == 5
    for t, P in enumerate(out.person_reprs):
        assert P.shape == (cfg.d_h_person + cfg.d_x,)
        np.testing.assert_array_equal(P.data[:cfg.d_h_person], 0)
        np.testing.assert_array_equal(P.data[cfg.d_h_person:], track[t])


def test_person_forward_probs_valid():
    cfg = small_config()
    params = randomize(init_params(cfg, 0), 1)
    out = person_forward(bind(params), cfg, np.random.default_rng(2).normal(size=(4, 6, 3)))
    for p in out.action_probs:
        assert p.shape == (4, 3)
        np.testing.assert_allclose(p.data.sum(-1), 1, atol=1e-12)
        assert np.all(p.data > 0)


def test_person_forward_dim_mismatch():
    cfg = small_config()
    with pytest.raises(ad.ShapeError):
        person_forward(bind(init_params(cfg)), cfg, np.zeros((2, 5)))


# -- group branch -----------------------------------------------------------

def test_gap_single_person_alpha_one():
    cfg = small_config()
    params = randomize(init_params(cfg, 0), 1)
    clip = random_clip(np.random.default_rng(0), n=1, m=1)
    probs, traces = group_forward(params, cfg, clip)
    assert len(probs) == len(traces) == clip.T
    for tr in traces:
        np.testing.assert_array_equal(tr.person_weights, [1.0])


def test_max_avg_identical_persons_agree():
    rng = np.random.default_rng(1)
    track = rng.normal(size=(1, 4, 3))
    clip = Clip(0, np.repeat(track, 5, axis=0), np.zeros((5, 4), int), 0, np.zeros(5, int))
    base = randomize(init_params(small_config("max"), 0), 2)
    pm, tm = group_forward(base, small_config("max"), clip)
    pa, ta = group_forward(base, small_config("avg"), clip)
    assert tm == [] and ta == []
    for a, b in zip(pm, pa):
        np.testing.assert_array_equal(a, b)


def test_gap_matches_straight_line_oracle():
    cfg = ModelConfig(d_x=1, d_h_person=2, d_h_group=2, d_fc=2, attn_dim=2, n_actions=3,
                      n_activities=3, n_subgroups=1, scheme="gap")
    params = randomize(init_params(cfg, 0), 11, scale=1.0)
    rng = np.random.default_rng(12)
    clip = Clip(0, rng.normal(size=(2, 2, 1)), np.zeros((2, 2), int), 1, [0, 0])
    probs, _ = group_forward(params, cfg, clip)
    ref = gap_model_probs(params, clip.persons.tolist())
    for p, r in zip(probs, ref):
        np.testing.assert_allclose(p, r, atol=1e-10, rtol=0)


def test_gap_identical_persons_independent_of_n():
    cfg = small_config()
    params = randomize(init_params(cfg, 0), 3)
    track = np.random.default_rng(4).normal(size=(1, 3, 3))
    results = []
    for n in (1, 2, 5):
        clip = Clip(0, np.repeat(track, n, 0), np.zeros((n, 3), int), 0, np.zeros(n, int))
        results.append(group_forward(params, cfg, clip)[0])
    for other in results[1:]:
        for a, b in zip(results[0], other):
            np.testing.assert_allclose(a, b, atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gap_person_permutation(seed):
    rng = np.random.default_rng(seed)
    cfg = small_config()
    params = randomize(init_params(cfg, 0), seed)
    clip = random_clip(rng, n=5, m=1)
    perm = rng.permutation(5)
    shuffled = Clip(0, clip.persons[perm], clip.action_labels[perm], clip.activity_label, clip.subgroups)
    for a, b in zip(group_forward(params, cfg, clip)[0], group_forward(params, cfg, shuffled)[0]):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_scheme_subgroup_mismatch():
    cfg = small_config("hap", n_subgroups=3)
    clip = random_clip(np.random.default_rng(0), m=2)
    with pytest.raises(ValueError, match="subgroups"):
        group_forward(init_params(cfg), cfg, clip)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_batched_forward_matches_single(scheme):
    cfg = small_config(scheme)
    params = randomize(init_params(cfg, 0), 5)
    rng = np.random.default_rng(6)
    clips = [random_clip(rng, clip_id=i) for i in range(3)]
    batch = Batch.from_clips(clips)
    out = forward(bind(params), cfg, batch.persons, batch.assignment)
    for b, clip in enumerate(clips):
        probs, traces = group_forward(params, cfg, clip)
        for t in range(clip.T):
            np.testing.assert_allclose(out.activity_probs[t].data[b], probs[t], atol=1e-13)
            if traces:
                np.testing.assert_allclose(out.traces[t].person_weights[b], traces[t].person_weights,
                                           atol=1e-13)


# -- joint loss -------------------------------------------------------------

def test_joint_loss_uniform_anchor():
    act = [np.full(8, 1 / 8)] * 3
    per = [np.full((4, 9), 1 / 9)] * 3
    loss = joint_loss(act, per, 5, np.zeros((4, 3), int), lam=2.0)
    assert loss.data == pytest.approx(math.log(8) + 2 * math.log(9), abs=1e-12)
    assert loss.data == pytest.approx(6.4738907, abs=1e-7)


def test_joint_loss_lambda():
    rng = np.random.default_rng(0)
    act = [rng.dirichlet(np.ones(4)) for _ in range(3)]
    per = [rng.dirichlet(np.ones(3), size=5) for _ in range(3)]
    labels = rng.integers(3, size=(5, 3))
    l0 = joint_loss(act, per, 2, labels, 0.0).data
    l1 = joint_loss(act, per, 2, labels, 1.0).data
    l2 = joint_loss(act, per, 2, labels, 2.0).data
    assert l0 == pytest.approx(-math.log(act[-1][2]), abs=1e-14)
    person = np.mean([-math.log(per[t][i, labels[i, t]]) for i in range(5) for t in range(3)])
    assert l1 - l0 == pytest.approx(person, abs=1e-12)
    assert l2 - l1 == pytest.approx(person, abs=1e-12)


def test_joint_loss_all_timesteps_mode():
    act = [np.array([0.5, 0.5]), np.array([1.0, 0.0])]
    per = [np.array([[1.0, 0.0]])] * 2
    labels = np.zeros((1, 2), int)
    assert joint_loss(act, per, 0, labels, 1.0).data == pytest.approx(0.0, abs=1e-15)
    assert joint_loss(act, per, 0, labels, 1.0, mode="all").data == pytest.approx(math.log(2) / 2)


def test_joint_loss_zero_iff_perfect():
    act = [np.array([0.0, 1.0, 0.0])]
    per = [np.array([[1.0, 0.0], [0.0, 1.0]])]
    assert joint_loss(act, per, 1, np.array([[0], [1]]), 2.0).data == 0.0
    assert joint_loss(act, per, 0, np.array([[0], [1]]), 2.0).data > 0


def test_joint_loss_bad_label():
    with pytest.raises(ValueError):
        joint_loss([np.full(3, 1 / 3)], [np.full((1, 2), 0.5)], 3, np.zeros((1, 1), int), 1.0)


# -- predict ----------------------------------------------------------------

def _head_only(cfg, bias):
    params = init_params(cfg, 0)
    params["activity_head.bias"][:] = np.log(bias)
    return params


def test_predict_argmax_and_tie():
    cfg = small_config(n_activities=3)
    clip = random_clip(np.random.default_rng(0), n_activities=3)
    assert predict(_head_only(cfg, [0.1, 0.7, 0.2]), cfg, clip).activity == 1
    tie = predict(_head_only(small_config(n_activities=2), [0.5, 0.5]), small_config(n_activities=2), clip)
    assert tie.activity == 0


def test_predict_stable_under_logit_scaling():
    cfg = small_config()
    params = randomize(init_params(cfg, 0), 9)
    clip = random_clip(np.random.default_rng(1))
    first = predict(params, cfg, clip)
    scaled = dict(params)
    scaled["activity_head.weight"] = params["activity_head.weight"] * 3.0
    scaled["activity_head.bias"] = params["activity_head.bias"] * 3.0
    assert predict(scaled, cfg, clip).activity == first.activity
    assert first.actions.shape == (clip.n, clip.T)


# -- checkpoints ------------------------------------------------------------

@pytest.mark.parametrize("scheme", SCHEMES)
def test_checkpoint_round_trip(tmp_path, scheme):
    cfg = small_config(scheme, lam=0.5, group_loss="all")
    params = randomize(init_params(cfg, 0), 1, scale=1e3)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, cfg, params)
    cfg2, params2 = load_checkpoint(path)
    assert cfg2 == cfg
    assert list(params2) == list(params)
    for k in params:
        assert np.array_equal(params[k], params2[k])
    assert checkpoint_bytes(cfg2, params2) == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"v": 1, "config": ')
    with pytest.raises(ValueError, match="malformed"):
        load_checkpoint(path)
