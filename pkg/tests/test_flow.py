import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from omnisonic.conditioners import (
    DROP_OFF, DROP_ON, DROP_SP, DROP_VIS, ConditionInputs, EnvCaptionEncoder, collate_conditions,
    synth_visual_features,
)
from omnisonic.flow import (
    PRESETS, CfgScales, FlowDataset, TrainConfig, cfg_velocity, dropout_conditions, euler_sample, fm_loss,
    interpolate, train, zero_model_loss,
)
from omnisonic.gradcheck import tiny_model_config
from omnisonic.numerics import NonFiniteError, Rng
from omnisonic.triattn import build_model

CFG = tiny_model_config()
SHAPE = (CFG.latent_channels, CFG.latent_t, CFG.latent_f)


def make_items(kinds):
    out = []
    for k, kind in enumerate(kinds):
        vis = synth_visual_features(k, CFG.n_visual, "dog" if kind != "speech" else "speech", CFG.d_vis)
        if kind == "s1":
            out.append(ConditionInputs("dog barking", "", "good morning", vis))
        elif kind == "s2":
            out.append(ConditionInputs("", "rain falling", "hello", vis))
        elif kind == "s3":
            out.append(ConditionInputs("bell ringing", "wind", "see you", vis))
        elif kind == "speech":
            out.append(ConditionInputs("", "", "only speech here", vis))
        elif kind == "silent":
            out.append(ConditionInputs("engine", "", "", vis))
    return out


def conds(kinds=("s1", "s2", "s3")):
    return collate_conditions(make_items(kinds), EnvCaptionEncoder(CFG.d_env), CFG.max_chars)


class LinearOracle:
    """V(x, t, c) = a*x + sum_i B_i emb(c_i) + B_v mean(visual), with the
    dropped/empty text conditions mapped to their null embeddings."""

    def __init__(self, seed=0):
        g = np.random.default_rng(seed)
        n = int(np.prod(SHAPE))
        self.a = 0.3
        self.b_env_on = torch.from_numpy(g.standard_normal((n, CFG.d_env)))
        self.b_env_off = torch.from_numpy(g.standard_normal((n, CFG.d_env)))
        self.b_sp = torch.from_numpy(g.standard_normal(n))
        self.b_vis = torch.from_numpy(g.standard_normal((n, CFG.d_vis)))
        self.sp_null = -0.7
        self.calls = 0

    def emb(self, cond):
        on = (cond.on_env.double() * cond.on_mask[..., None]).sum(1) / cond.on_mask.sum(1, keepdim=True)
        off = (cond.off_env.double() * cond.off_mask[..., None]).sum(1) / cond.off_mask.sum(1, keepdim=True)
        has = cond.chars_mask.any(1) & ~cond.drop[:, DROP_SP]
        sp = torch.where(has, cond.chars.double().sum(1) / 100.0, torch.full(has.shape, self.sp_null, dtype=torch.float64))
        return on, off, sp

    def __call__(self, x, t, cond):
        self.calls += 1
        on, off, sp = self.emb(cond)
        vis = cond.visual.double().mean(1)
        term = on @ self.b_env_on.T + off @ self.b_env_off.T + sp[:, None] * self.b_sp + vis @ self.b_vis.T
        return self.a * x.double() + term.reshape(x.shape)


# -- interpolation and loss --------------------------------------------------------------

def test_interpolate_cases():
    x0, x1 = torch.zeros(2, 3), torch.full((2, 3), 2.0)
    assert torch.equal(interpolate(x0, x1, 0.0), x0)
    assert torch.equal(interpolate(x0, x1, 1.0), x1)
    assert torch.allclose(interpolate(x0, x1, 0.5), torch.ones(2, 3))
    per = interpolate(x0, x1, torch.tensor([0.25, 0.75]))
    assert per[:, 0].tolist() == [0.5, 1.5]
    with pytest.raises(ValueError):
        interpolate(x0, x1, 1.5)


def test_zero_model_loss_values():
    m = build_model(CFG, seed=0)
    c = conds()
    x1 = torch.randn(3, *SHAPE)
    t = torch.rand(3)
    x0 = torch.randn(3, *SHAPE)
    with torch.no_grad():
        assert float(fm_loss(m, x1, x1.clone(), t, c)) == 0.0
        assert float(fm_loss(m, x1, x0, t, c)) == pytest.approx(float(((x1 - x0) ** 2).mean()), rel=1e-6)


def test_gradient_step_reduces_loss_on_linear_model():
    torch.manual_seed(0)
    lin = torch.nn.Linear(4, 4)
    model = lambda x, t, c: lin(x)  # noqa: E731
    x1, x0 = torch.randn(8, 4), torch.randn(8, 4)
    t = torch.rand(8)
    before = fm_loss(model, x1, x0, t, None)
    before.backward()
    with torch.no_grad():
        for p in lin.parameters():
            p -= 0.05 * p.grad
    assert float(fm_loss(model, x1, x0, t, None).detach()) < float(before.detach())


# -- dropout --------------------------------------------------------------------------------------

def test_dropout_zero_prob_unchanged():
    c = conds()
    d = dropout_conditions(c, 0.0, Rng(0))
    assert not d.drop.any() and torch.equal(d.on_env, c.on_env)


@pytest.mark.parametrize("p", [0.1, 0.5, 0.999])
def test_dropout_rate(p):
    c = collate_conditions(make_items(["s3"]) * 10000, EnvCaptionEncoder(CFG.d_env), CFG.max_chars)
    d = dropout_conditions(c, p, Rng(7))
    rates = d.drop.double().mean(0)
    assert torch.all((rates - p).abs() <= 0.02), rates


def test_dropped_caption_is_empty_embedding():
    env = EnvCaptionEncoder(CFG.d_env)
    c = collate_conditions(make_items(["s3"]), env, CFG.max_chars)
    d = dropout_conditions(c, [0.99999, 0.0, 0.0, 0.0], Rng(1))
    assert d.drop[0].tolist() == [True, False, False, False]
    assert torch.equal(d.on_env[0, 0], env.empty) and d.on_mask[0].sum() == 1


def test_dropout_bad_prob():
    with pytest.raises(ValueError):
        dropout_conditions(conds(), 1.0, Rng(0))


# -- guidance -------------------------------------------------------------------------------------------

def test_presets():
    assert PRESETS["s1"].as_tuple() == (5.0, 0.5, 2.5)
    assert PRESETS["s2"].as_tuple() == (0.5, 2.5, 7.5)
    assert PRESETS["s3"].as_tuple() == (5.0, 2.5, 2.5)
    with pytest.raises(ValueError):
        CfgScales(-1.0, 0, 0)
    assert CfgScales.parse("1,2,3") == CfgScales(1, 2, 3)
    with pytest.raises(ValueError):
        CfgScales.parse("1,2")


def closed_form(oracle, x, cond, scales):
    full = oracle.emb(cond)
    none = oracle.emb(cond.keep_only_text(None))
    out = oracle(x, None, cond)
    mats = (oracle.b_env_on, oracle.b_env_off, None)
    null = cond.text_null()
    for i, lam in enumerate(scales.as_tuple()):
        diff_emb = full[i] - none[i]
        if i < 2:
            corr = diff_emb @ mats[i].T
        else:
            corr = diff_emb[:, None] * oracle.b_sp
        corr = torch.where(null[:, i:i + 1], torch.zeros_like(corr), corr)
        out = out + lam * corr.reshape(x.shape)
    return out


@given(st.floats(0, 8), st.floats(0, 8), st.floats(0, 8))
def test_cfg_matches_linear_closed_form(a, b, c):
    oracle = LinearOracle()
    cond = conds(("s1", "s2", "s3", "speech"))
    x = torch.from_numpy(np.random.default_rng(0).standard_normal((4, *SHAPE)))
    s = CfgScales(a, b, c)
    got = cfg_velocity(oracle, x, 0.3, cond, s)
    assert torch.allclose(got, closed_form(oracle, x, cond, s), atol=1e-5)


def test_cfg_all_zero_is_single_call():
    oracle = LinearOracle()
    cond = conds()
    x = torch.randn(3, *SHAPE, dtype=torch.float64)
    counter = []
    out = cfg_velocity(oracle, x, 0.5, cond, CfgScales(), counter)
    assert len(counter) == 1 and torch.equal(out, oracle(x, None, cond))


def test_cfg_five_evaluations():
    counter = []
    cfg_velocity(LinearOracle(), torch.randn(1, *SHAPE, dtype=torch.float64), 0.5, conds(("s3",)),
                 CfgScales(1, 1, 1), counter)
    assert len(counter) == 5


def test_cfg_null_condition_contributes_nothing():
    oracle = LinearOracle()
    cond = conds(("s2",))  # on-screen caption empty
    x = torch.randn(1, *SHAPE, dtype=torch.float64)
    base = oracle(x, None, cond)
    assert torch.equal(cfg_velocity(oracle, x, 0.5, cond, CfgScales(on=1.0)), base)


def test_cfg_visual_kept_in_every_branch():
    seen = []

    def model(x, t, c):
        seen.append(c.drop[:, DROP_VIS].clone())
        return torch.zeros_like(x)

    cfg_velocity(model, torch.zeros(3, *SHAPE), 0.2, conds(), CfgScales(1, 1, 1))
    assert len(seen) == 5 and not any(s.any() for s in seen)


def test_cfg_linear_in_each_lambda():
    torch.manual_seed(0)
    m = build_model(CFG, seed=0, zero_init=False, dtype=torch.float64)
    cond = conds()
    x = torch.randn(3, *SHAPE, dtype=torch.float64)
    v0 = cfg_velocity(m, x, 0.4, cond, CfgScales())
    for i, k in enumerate(("on", "off", "sp")):
        v1 = cfg_velocity(m, x, 0.4, cond, CfgScales(**{k: 1.0}))
        v2 = cfg_velocity(m, x, 0.4, cond, CfgScales(**{k: 2.0}))
        assert torch.allclose(v2 - v0, 2 * (v1 - v0), atol=1e-12)


# -- Euler ----------------------------------------------------------------------------------------

@pytest.mark.parametrize("steps", [1, 3, 50])
def test_euler_constant_field(steps):
    c = torch.full((2, *SHAPE), 0.7, dtype=torch.float64)
    x0 = torch.randn(2, *SHAPE, dtype=torch.float64)
    out = euler_sample(lambda x, t, cond: c, conds(("s1", "s2")), CfgScales(), steps, x0=x0)
    assert torch.allclose(out, x0 + c, atol=1e-12)


def test_euler_straight_path_step_independent():
    a = torch.randn(2, *SHAPE, dtype=torch.float64)
    x0 = torch.randn(2, *SHAPE, dtype=torch.float64)
    f = lambda x, t, cond: a.expand_as(x)  # noqa: E731
    one = euler_sample(f, conds(("s1", "s2")), CfgScales(), 1, x0=x0)
    hundred = euler_sample(f, conds(("s1", "s2")), CfgScales(), 100, x0=x0)
    assert torch.allclose(one, hundred, atol=1e-6)


def test_euler_decay_first_order():
    x0 = torch.ones(1, *SHAPE, dtype=torch.float64)
    exact = math.exp(-1.0)
    errs = []
    for n in (10, 20, 40, 80):
        out = euler_sample(lambda x, t, cond: -x, conds(("s1",)), CfgScales(), n, x0=x0)
        assert torch.allclose(out, torch.full_like(out, (1 - 1 / n) ** n))
        errs.append(abs(float(out.flatten()[0]) - exact))
    ratios = [errs[i] / errs[i + 1] for i in range(3)]
    assert all(1.8 < r < 2.2 for r in ratios), ratios


def test_euler_deterministic_trajectory():
    m = build_model(CFG, seed=1, zero_init=False)
    cond = conds()
    ta, tb = [], []
    a = euler_sample(m, cond, PRESETS["s3"], 4, seed=5, trajectory=ta)
    b = euler_sample(m, cond, PRESETS["s3"], 4, seed=5, trajectory=tb)
    assert torch.equal(a, b) and all(torch.equal(p, q) for p, q in zip(ta, tb)) and len(ta) == 5
    with pytest.raises(ValueError):
        euler_sample(m, cond, CfgScales(), 0)


# -- training -------------------------------------------------------------------------------------------

def dataset(kinds, n=8, seed=0):
    items = [make_items([k])[0] for k in kinds for _ in range(n // len(kinds))]
    c = collate_conditions(items, EnvCaptionEncoder(CFG.d_env), CFG.max_chars)
    lat = torch.from_numpy(Rng(seed).normal((len(items), *SHAPE), 1.0, np.float32))
    return FlowDataset(lat, c)


SMALL = TrainConfig(steps=6, batch_size=4, lr=1e-3, val_every=3)


def test_train_deterministic():
    data = dataset(["speech"])
    r1 = train(1, build_model(CFG, seed=0), data, SMALL, val=data)
    r2 = train(1, build_model(CFG, seed=0), data, SMALL, val=data)
    assert r1.losses == r2.losses and r1.val_losses == r2.val_losses
    assert [s for s, _ in r1.val_losses] == [3, 6]


def test_lr_zero_leaves_parameters():
    m = build_model(CFG, seed=0, zero_init=False)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    train(2, m, dataset(["s1", "s2"]), replace(SMALL, lr=0.0))
    for k, v in m.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_stage_one_requires_speech_only():
    with pytest.raises(ValueError):
        train(1, build_model(CFG), dataset(["s1", "speech"]), SMALL)
    with pytest.raises(ValueError):
        train(3, build_model(CFG), dataset(["speech"]), SMALL)
    with pytest.raises(ValueError):
        train(2, build_model(CFG), FlowDataset(torch.zeros(0, *SHAPE), conds(("s1",))), SMALL)


def test_nan_loss_aborts():
    data = dataset(["s1"])
    data.latents[:] = float("nan")
    with pytest.raises(NonFiniteError, match="stage 2 step 1"):
        train(2, build_model(CFG), data, SMALL)


def test_train_loss_csv(tmp_path):
    log = tmp_path / "logs" / "loss.csv"
    train(1, build_model(CFG), dataset(["speech"]), replace(SMALL, log_csv=str(log)))
    rows = log.read_text().splitlines()
    assert rows[0] == "step,stage,loss,val_loss" and len(rows) == 7


def test_checkpoint_callback_and_speech_encoder_learns():
    m = build_model(CFG, seed=0)
    seen = []
    before = m.speech.char_emb.weight.clone()
    train(2, m, dataset(["s1", "s2"]), replace(SMALL, ckpt_every=2), on_checkpoint=lambda mm, s: seen.append(s))
    assert seen == [2, 4, 6]
    # head starts at zero so the speech encoder only moves once the head has
    assert not torch.equal(m.head.weight, torch.zeros_like(m.head.weight))
    assert not torch.equal(m.speech.char_emb.weight, before)


def test_zero_model_baseline():
    data = dataset(["s1"])
    assert zero_model_loss(data) == pytest.approx(2.0, rel=0.1)
