import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from omnisonic.conditioners import (
    DROP_OFF, DROP_ON, DROP_SP, ENV_VOCAB, N_CHARS, VISUAL_LABELS, ConditionInputs, EnvCaptionEncoder,
    TranscriptionEncoder, char_ids, class_embedding, collate_conditions, durator, synth_visual_features,
)
from omnisonic.numerics import finite_diff_grad


def durator_oracle(durations, target):
    """Alignment matrix from scalar loops."""
    total = sum(durations)
    d = [x * target / total for x in durations]
    centers, acc = [], 0.0
    for x in d:
        acc += x
        centers.append(acc - x / 2)
    sigma = max(target / len(d), 1.0)
    rows = []
    for t in range(target):
        logits = [-((t + 0.5 - c) ** 2) / sigma ** 2 for c in centers]
        m = max(logits)
        e = [math.exp(v - m) for v in logits]
        rows.append([v / sum(e) for v in e])
    return np.array(rows)


# -- env captions -----------------------------------------------------------------

def test_empty_caption_single_empty_row():
    enc = EnvCaptionEncoder(32)
    e = enc.encode("")
    assert e.shape == (1, 32) and torch.equal(e[0], enc.empty)
    assert torch.equal(enc.encode("   "), e)


def test_caption_tokens_deterministic():
    a, b = EnvCaptionEncoder(32), EnvCaptionEncoder(32)
    x = a.encode("Dog barking")
    assert x.shape == (2, 32)
    assert torch.equal(x, b.encode("dog   barking"))
    assert all(0 <= t < ENV_VOCAB for t in a.tokenize("dog barking"))
    assert not torch.equal(x[0], a.empty)


def test_caption_table_frozen():
    enc = EnvCaptionEncoder(8)
    assert not enc.table.requires_grad and not enc.encode("rain").requires_grad


# -- durator --------------------------------------------------------------------------

def test_durator_single_token_repeats():
    h = torch.tensor([[1.0, -2.0, 3.0]])
    out, w = durator(h, torch.tensor([0.7]), 5, return_alignment=True)
    assert torch.allclose(w, torch.ones(5, 1))
    assert torch.allclose(out, h.expand(5, 3))


def test_durator_two_tokens_symmetric():
    w = durator(torch.eye(2), torch.tensor([1.0, 1.0]), 6, return_alignment=True)[1].numpy()
    assert w[0, 0] > w[0, 1] and w[5, 1] > w[5, 0]
    assert np.allclose(w, w[::-1, ::-1])
    assert np.allclose(w, durator_oracle([1.0, 1.0], 6))


@given(st.lists(st.floats(0.05, 10.0), min_size=1, max_size=8), st.integers(1, 40))
def test_durator_matches_oracle_and_rows_are_distributions(durs, target):
    h = torch.randn(len(durs), 3, dtype=torch.float64)
    out, w = durator(h, torch.tensor(durs, dtype=torch.float64), target, return_alignment=True)
    assert w.shape == (target, len(durs)) and out.shape == (target, 3)
    assert torch.all(w >= 0)
    assert torch.allclose(w.sum(1), torch.ones(target, dtype=torch.float64), atol=1e-6)
    assert np.allclose(w.numpy(), durator_oracle(durs, target), atol=1e-9)


def test_durator_scale_invariant_in_durations():
    h = torch.randn(3, 4, dtype=torch.float64)
    d = torch.tensor([1.0, 2.0, 0.5], dtype=torch.float64)
    assert torch.allclose(durator(h, d, 10), durator(h, 7 * d, 10))


def test_durator_mask_ignores_padding():
    h = torch.randn(2, 4, 3, dtype=torch.float64)
    d = torch.rand(2, 4, dtype=torch.float64) + 0.5
    mask = torch.tensor([[True] * 4, [True, True, False, False]])
    out = durator(h, d, 7, mask)
    assert torch.allclose(out[1], durator(h[1, :2], d[1, :2], 7))


def test_durator_errors():
    with pytest.raises(ValueError):
        durator(torch.zeros(0, 3), torch.zeros(0), 4)
    with pytest.raises(ValueError):
        durator(torch.zeros(1, 2, 3), torch.ones(1, 2), 4, torch.zeros(1, 2, dtype=torch.bool))


def test_durator_duration_gradient_matches_fd():
    h = torch.tensor([[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0]], dtype=torch.float64)
    wts = torch.linspace(-1, 1, 16, dtype=torch.float64).reshape(8, 2)
    d0 = torch.tensor([1.0, 2.5, 0.7], dtype=torch.float64, requires_grad=True)
    (wts * durator(h, d0, 8)).sum().backward()

    def f(arr):
        return float((wts * durator(h, torch.from_numpy(arr), 8)).sum())

    fd = finite_diff_grad(f, d0.detach().numpy(), h=1e-5)
    g = d0.grad.numpy()
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) <= 1e-4


# -- transcription encoder ---------------------------------------------------------------

def test_char_ids():
    assert char_ids("ab") == [1, 2]
    assert char_ids("A") == [1]
    assert char_ids("~") == [N_CHARS - 1]


@pytest.mark.parametrize("mode", ["predicted", "fill"])
def test_transcription_length_and_single_char(mode):
    torch.manual_seed(0)
    enc = TranscriptionEncoder(8, 16, mode=mode)
    out = enc.encode("hello there", 12)
    assert out.shape == (12, 8)
    out, w = enc.encode("a", 4, return_alignment=True)
    if mode == "fill":
        assert torch.allclose(w, torch.ones(4, 1))
        assert torch.allclose(out, out[0].expand(4, 8))
    assert torch.allclose(w.sum(1), torch.ones(4), atol=1e-6)


def test_transcription_two_chars_first_dominates_frame_zero():
    torch.manual_seed(0)
    enc = TranscriptionEncoder(8, 16, mode="fill")
    with torch.no_grad():
        enc.dur2.weight.zero_()  # equal durations
    _, w = enc.encode("ab", 4, return_alignment=True)
    assert w[0, 0] > w[0, 1]


def test_transcription_empty_gives_empty_token():
    torch.manual_seed(0)
    enc = TranscriptionEncoder(8, 16)
    with torch.no_grad():
        enc.empty.copy_(torch.arange(8.0))
    out = enc.encode("", 5)
    assert torch.equal(out, torch.arange(8.0).expand(5, 8))


def test_transcription_parameters_receive_gradient():
    torch.manual_seed(0)
    enc = TranscriptionEncoder(8, 16)
    enc.encode("some speech", 10).pow(2).sum().backward()
    for name in ("char_emb.weight", "pos_emb.weight", "proj.weight", "dur1.weight", "dur2.weight"):
        assert dict(enc.named_parameters())[name].grad.abs().sum() > 0, name


def test_transcription_bad_mode():
    with pytest.raises(ValueError):
        TranscriptionEncoder(mode="oracle")


# -- visual features ------------------------------------------------------------------------

def test_visual_features_deterministic_and_shapes():
    a = synth_visual_features(3, 8, "dog")
    assert a.shape == (8, 16) and a.dtype == np.float32
    assert np.array_equal(a, synth_visual_features(3, 8, "dog"))
    assert synth_visual_features(3, 1, "dog").shape == (1, 16)
    with pytest.raises(ValueError):
        synth_visual_features(3, 0, "dog")


def test_visual_features_near_constant():
    a = synth_visual_features(5, 32, "rain").astype(np.float64)
    cos = (a[1:] * a[:-1]).sum(1) / np.linalg.norm(a[1:], axis=1) / np.linalg.norm(a[:-1], axis=1)
    assert cos.min() > 0.9


def test_class_embeddings_dissimilar():
    for dim in (16, 8):
        vecs = [class_embedding(k, dim) for k in VISUAL_LABELS[:6]] + [class_embedding("unlisted", dim)]
        for i in range(len(vecs)):
            assert np.linalg.norm(vecs[i]) == pytest.approx(1.0)
            for j in range(i):
                if dim >= len(VISUAL_LABELS):
                    assert abs(vecs[i] @ vecs[j]) < 0.5


def test_measured_kind_cosine_after_generation():
    a = synth_visual_features(1, 4, "dog").mean(0)
    b = synth_visual_features(1, 4, "siren").mean(0)
    assert a @ b / np.linalg.norm(a) / np.linalg.norm(b) < 0.5


# -- condition sets -------------------------------------------------------------------------

def _items():
    vis = synth_visual_features(0, 4, "dog")
    return [ConditionInputs("dog barking", "rain", "hi", vis),
            ConditionInputs("", "wind", "hello there", synth_visual_features(1, 4, "speech"))]


def test_kind_biconditional():
    assert ConditionInputs("", "x", "y", np.zeros((1, 16))).on_screen_kind == "speech"
    assert ConditionInputs("dog", "", "", np.zeros((1, 16))).on_screen_kind == "environment"
    with pytest.raises(ValueError):
        ConditionInputs("dog", "", "", np.zeros((1, 16)), on_screen_kind="speech")
    with pytest.raises(ValueError):
        ConditionInputs("", "", "hi", np.zeros((1, 16)), on_screen_kind="environment")


def test_collate_and_drops():
    env = EnvCaptionEncoder(32)
    cs = collate_conditions(_items(), env, 16)
    assert cs.on_env.shape == (2, 2, 32) and cs.speech_kind.tolist() == [False, True]
    assert cs.text_null().tolist() == [[False, False, False], [True, False, False]]
    only_sp = cs.keep_only_text(DROP_SP)
    assert only_sp.text_null()[:, :2].all() and not only_sp.text_null()[:, 2].any()
    assert torch.equal(only_sp.on_env[0, 0], env.empty) and only_sp.on_mask.sum(1).tolist() == [1, 1]
    none = cs.keep_only_text(None)
    assert none.text_null().all() and torch.equal(none.visual, cs.visual)
    assert cs.drop.sum() == 0  # copies, not in place
    sub = cs.select([1])
    assert sub.batch_size == 1 and sub.speech_kind.tolist() == [True]
    assert DROP_ON == 0 and DROP_OFF == 1
