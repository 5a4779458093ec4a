"""Smoke tests for the _fgl extension module: every bound operation is called
once and checked against a hand-computable expectation."""

import json
import math

import pytest

import _fgl


# ---- sequence & vector metrics -------------------------------------------------


def test_per_exact_cases():
    assert _fgl.per([1, 2, 3], [1, 2, 3]) == 0.0
    assert _fgl.per([1, 2, 3], [1, 2]) == pytest.approx(1 / 3)
    assert _fgl.per([1, 2], [3, 4, 5]) == pytest.approx(3 / 2)
    with pytest.raises(ValueError):
        _fgl.per([], [1])


def test_pearson_and_cosine():
    assert _fgl.pearson([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]) == pytest.approx(1.0, abs=1e-12)
    assert _fgl.pearson([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]) == pytest.approx(-1.0, abs=1e-12)
    assert _fgl.pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) == 0.0
    assert _fgl.cosine([1.0, 0.0], [0.0, 2.0]) == 0.0
    assert _fgl.cosine([1.0, 1.0], [2.0, 2.0]) == pytest.approx(1.0, abs=1e-12)


def test_collapse_tokens():
    # padding is dropped first, so the two 2-runs merge across the gap
    assert _fgl.collapse_tokens([0, 1, 1, 2, 0, 2]) == [1, 2]
    assert _fgl.collapse_tokens([1, 2, 1]) == [1, 2, 1]
    assert _fgl.collapse_tokens([0, 0]) == []


# ---- alignment loss -------------------------------------------------------------


def test_cka_loss_identities():
    v = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]
    assert _fgl.cka_loss(v, v) == pytest.approx(0.0, abs=1e-10)
    eye = [[1.0, 0.0], [0.0, 1.0]]
    double_eye = [[2.0, 0.0], [0.0, 2.0]]
    assert _fgl.cka_loss(eye, double_eye) == 0.0
    w = [[6.0, 5.0], [4.0, 3.0], [2.0, 1.0]]
    assert 0.0 <= _fgl.cka_loss(v, w) <= 1.0
    with pytest.raises(ValueError):
        _fgl.cka_loss(v, eye)  # row counts differ


# ---- group-relative advantages ---------------------------------------------------


def test_compute_advantages_hand_case():
    adv = _fgl.compute_advantages([[0.0], [0.0], [0.0], [2.0]], [1.0])
    # mean 0.5, population std sqrt(0.75)
    assert adv[3] == pytest.approx(1.7321, abs=5e-5)
    assert adv[0] == pytest.approx(-0.5774, abs=5e-5)
    assert sum(adv) == pytest.approx(0.0, abs=1e-12)

    # a degenerate (constant) column contributes exactly zero
    assert _fgl.compute_advantages([[3.0], [3.0], [3.0]], [1.0]) == [0.0, 0.0, 0.0]


# ---- lyric edits ------------------------------------------------------------------


def test_edit_operations():
    assert _fgl.edit_types() == ["PSub", "FSub", "Del", "Ins", "Trans", "Mix"]

    per_lang = 16
    for t in range(1, 2 * per_lang + 1):
        assert _fgl.translate_token(_fgl.translate_token(t, per_lang), per_lang) == t

    tokens = [1, 5, 3, 8, 2, 7, 4, 6]
    trans = _fgl.apply_edit(tokens, "Trans", 0.3, seed=9)
    assert _fgl.apply_edit(trans, "Trans", 0.3, seed=9) == tokens
    assert trans == [t + per_lang for t in tokens]  # language flipped

    psub = _fgl.apply_edit(tokens, "PSub", 0.3, seed=9)
    assert len(psub) == len(tokens)
    assert sum(a != b for a, b in zip(tokens, psub)) == round(0.3 * len(tokens))
    assert psub == _fgl.apply_edit(tokens, "PSub", 0.3, seed=9)  # deterministic

    assert len(_fgl.apply_edit(tokens, "Del", 0.3, seed=4)) == len(tokens) - 2
    assert len(_fgl.apply_edit(tokens, "Ins", 0.3, seed=4)) == len(tokens) + 2

    with pytest.raises(ValueError):
        _fgl.apply_edit(tokens, "PSub", 0.0, seed=1)
    with pytest.raises(ValueError):
        _fgl.apply_edit(tokens, "Swap", 0.3, seed=1)


# ---- synthetic world ----------------------------------------------------------------


def test_world_sample_and_oracle_decode():
    world = _fgl.World(seed=7)
    sample = world.gen_sample(32, 123)

    assert sample.frames == 32
    assert len(sample.latent) == 32 and len(sample.latent[0]) == world.spec.d_latent
    assert len(sample.melody) == 16 and len(sample.melody[0]) == world.spec.d_melody
    assert len(sample.tokens) == 32
    assert all(0.0 <= p <= 1.0 for p in sample.pitch)
    assert sample.sentences and sample.onsets[0] >= 0

    decoded = world.decode(sample.latent)
    assert decoded.tokens == sample.tokens
    assert max(abs(a - b) for a, b in zip(decoded.pitch, sample.pitch)) < 0.05
    assert decoded.mean_resid < 0.1

    # a sample scored against its own references earns near-perfect rewards
    r1, r2, r3, r4 = world.rewards(
        sample.latent, _fgl.collapse_tokens(sample.tokens), sample.pitch, sample.timbre
    )
    assert r1 == 1.0
    assert r2 > 0.99
    assert r3 > 0.99
    assert 0.9 < r4 <= 1.0

    # determinism: same seed, same latent
    again = world.gen_sample(32, 123)
    assert again.latent == sample.latent


def test_world_edit_task():
    world = _fgl.World(seed=7)
    labels = _fgl.SampleLabels()
    base = world.gen_edit_base(48, 55, labels)
    assert base.mask_start > 0

    target = base.sentences[-1]
    edited = _fgl.apply_edit(target, "FSub", 0.3, seed=3,
                             tokens_per_language=world.spec.n_tokens // 2)
    truth = world.edited_variant(base, edited, base.labels.timbre, 99)

    decoded = world.decode(truth.latent)
    span = decoded.tokens[base.mask_start :]
    assert _fgl.collapse_tokens(span) == edited
    # the edit never moves the melody line
    assert truth.pitch == base.pitch


# ---- config plumbing ------------------------------------------------------------------


def test_config_round_trip():
    text = _fgl.default_config()
    cfg = json.loads(text)
    assert cfg["version"] == 1
    assert [s["stage"] for s in cfg["stages"]] == ["pretrain", "sft1", "sft2", "grpo"]

    assert _fgl.normalize_config(text) == text  # serialization is a fixed point

    cfg["bogus"] = 3
    with pytest.raises(ValueError, match="bogus"):
        _fgl.normalize_config(json.dumps(cfg))

    with pytest.raises(ValueError, match="version"):
        _fgl.normalize_config("{}")
