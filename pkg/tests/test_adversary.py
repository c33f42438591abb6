import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnp import adversary as adv
from attnp.adversary import (AdvConfig, adversarial_loss, adversarial_objective,
                             apply_difference_coefficients, attention_at_perturbation,
                             attention_iat_perturbation, attention_rp_perturbation,
                             difference_vectors, fast_gradient, nll_loss, perturbed_loss,
                             raw_difference_vectors, word_at_perturbation, word_iat_perturbation)
from attnp.autodiff import Tensor
from attnp.model import ModelConfig, batch_from_ids, forward, init_params

from conftest import random_batch, tiny_model


# ---------------------------------------------------------------------- loss

def test_nll_examples():
    soft = ModelConfig(5, 2, task_kind="pair")
    sig = ModelConfig(5, 2, task_kind="single")
    assert nll_loss(Tensor([[1.0, 0.0]]), [0], soft).data[0] == pytest.approx(0.0, abs=1e-11)
    assert nll_loss(Tensor([[0.5, 0.5]]), [1], sig).data[0] == pytest.approx(2 * math.log(2))
    losses = [nll_loss(Tensor([[p, 1 - p]]), [0], soft).data[0] for p in (0.1, 0.4, 0.7, 0.99)]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    with pytest.raises(ValueError, match="out of range"):
        nll_loss(Tensor([[0.5, 0.5]]), [2], soft)


def test_adv_config_validation():
    with pytest.raises(ValueError):
        AdvConfig("bogus")
    with pytest.raises(ValueError):
        AdvConfig("attention_at", -1.0)
    assert AdvConfig("attention_at", 2.0, 0.5).to_dict() == {
        "method": "attention_at", "epsilon": 2.0, "lambda": 0.5}


# ------------------------------------------------------------- fast gradient

def test_fast_gradient_examples():
    assert np.allclose(fast_gradient(np.array([3.0, 4.0]), 1.0), [0.6, 0.8], atol=1e-15)
    assert np.all(fast_gradient(np.array([3.0, 4.0]), 0.0) == 0.0)
    assert np.all(fast_gradient(np.zeros(3), 1.0) == 0.0)
    r = fast_gradient(np.array([3.0, 4.0, 100.0]), 1.0, np.array([1, 1, 0]))
    assert np.allclose(r, [0.6, 0.8, 0.0], atol=1e-15)


@pytest.mark.parametrize("kind", ["single", "pair"])
def test_attention_at_norm_mask_and_scale(kind, rng):
    cfg, params = tiny_model(kind)
    batch = random_batch(rng, B=4, T=6, pair=kind == "pair")
    p1 = attention_at_perturbation(batch, params, cfg, 0.7)
    norms = np.linalg.norm(p1.values, axis=1)
    assert np.all(np.abs(norms - 0.7) <= 1e-9)
    assert np.all(p1.values[~batch.mask] == 0.0)
    p2 = attention_at_perturbation(batch, params, cfg, 1.4)
    assert np.array_equal(p2.values, 2.0 * p1.values)
    p0 = attention_at_perturbation(batch, params, cfg, 0.0)
    assert np.all(p0.values == 0.0)


def test_perturbation_rows_are_per_instance(rng):
    cfg, params = tiny_model("pair")
    batch = random_batch(rng, B=3, T=5)
    full = attention_at_perturbation(batch, params, cfg, 1.0).values
    for i in range(batch.size):
        one = batch.subset([i])
        n = int(one.mask.sum())
        single = attention_at_perturbation(batch_from_ids([one.ids[0, :n]], one.labels,
                                                          [one.q_ids[0, :int(one.q_mask.sum())]]),
                                           params, cfg, 1.0).values
        assert np.allclose(full[i, :n], single[0], atol=1e-12)


def _first_order_case(seed):
    cfg = ModelConfig(7, 3, 4, 4, 2, "pair")
    params = init_params(cfg, np.random.default_rng(seed))
    r = np.random.default_rng(seed + 1000)
    batch = batch_from_ids([list(r.integers(2, 7, 3))], [int(r.integers(0, 3))],
                           [list(r.integers(2, 7, 2))])
    return cfg, params, batch


def test_attention_at_first_order_optimal():
    eps = 1e-3
    cfg, params, batch = _first_order_case(0)
    r_at = attention_at_perturbation(batch, params, cfg, eps).values
    l_at = perturbed_loss(batch, params, cfg, score_perturbation=r_at)[0]
    dirs = np.random.default_rng(1).standard_normal((10000, 3))
    dirs *= eps / np.linalg.norm(dirs, axis=1, keepdims=True)
    losses = perturbed_loss(batch.repeat(10000), params, cfg, score_perturbation=dirs)
    assert l_at >= 0.999 * losses.max()
    assert l_at >= losses.max() - 1e-6


# -------------------------------------------------------- difference vectors

def test_difference_vector_examples():
    d = difference_vectors(np.array([1.0, 2.0]))
    assert d.tolist() == [[0.0, -1.0], [1.0, 0.0]]
    assert np.all(difference_vectors(np.array([0.3, 0.3, 0.3])) == 0.0)
    norms = np.linalg.norm(difference_vectors(np.array([0.1, 0.2, 0.4])), axis=1)
    assert np.allclose(norms, 1.0, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-10, 10)), st.data())
def test_difference_vector_properties(scores, data):
    T = len(scores)
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=T, max_size=T)))
    raw = raw_difference_vectors(scores, mask)
    assert np.array_equal(raw, -raw.T)
    d = difference_vectors(scores, mask)
    assert np.all(np.diag(d) == 0.0)
    norms = np.linalg.norm(d, axis=1)
    assert np.all((np.abs(norms - 1.0) <= 1e-12) | (norms == 0.0))
    assert np.all(d[~mask] == 0.0) and np.all(d[:, ~mask] == 0.0)


# ----------------------------------------------------------------------- iAT

def test_iat_two_token_hand_case():
    dt = difference_vectors(np.array([1.0, 2.0]))
    a, b = 0.3, -0.8
    r = apply_difference_coefficients(np.array([[0.0, a], [b, 0.0]]), dt)
    assert np.allclose(r, [-a, b], atol=1e-15)


def test_iat_singleton_and_zero_epsilon(rng):
    cfg, params = tiny_model("pair")
    one = batch_from_ids([[3]], [1], [[2]])
    p = attention_iat_perturbation(one, params, cfg, 5.0)
    assert np.all(p.values == 0.0) and p.degenerate.all()
    batch = random_batch(rng)
    assert np.all(attention_iat_perturbation(batch, params, cfg, 0.0).values == 0.0)


def test_iat_coincides_with_at_when_differences_are_nondegenerate(rng):
    # each d~_t has unit norm, so d L / d alpha_tk = g_t d~_t[k] and the mapped
    # perturbation reduces to eps * g / ||g||
    cfg, params = tiny_model("pair")
    batch = random_batch(rng, B=4, T=6, min_len=2)
    at = attention_at_perturbation(batch, params, cfg, 2.5)
    iat = attention_iat_perturbation(batch, params, cfg, 2.5)
    assert np.allclose(at.values, iat.values, atol=1e-12)


def test_iat_on_uniform_scores_gives_clean_plus_lambda_clean(rng):
    cfg, params = tiny_model("pair")
    params["attn.c"].data[...] = 0.0  # every score is exactly 0
    batch = random_batch(rng)
    parts, _ = adversarial_objective(batch, params, cfg, AdvConfig("attention_iat", 3.0, 0.7),
                                     with_grads=False)
    assert parts.adversarial == parts.clean
    assert parts.total == parts.clean + 0.7 * parts.clean
    assert parts.degenerate == batch.size


# ------------------------------------------------------------------------ RP

def test_rp_norm_zero_and_determinism():
    mask = np.array([[1, 1, 1, 0], [1, 0, 0, 0]], dtype=bool)
    assert np.all(attention_rp_perturbation(mask.shape, mask, 0.0, np.random.default_rng(0)) == 0)
    r1 = attention_rp_perturbation(mask.shape, mask, 2.0, np.random.default_rng(5))
    r2 = attention_rp_perturbation(mask.shape, mask, 2.0, np.random.default_rng(5))
    assert np.array_equal(r1, r2)
    assert np.all(np.abs(np.linalg.norm(r1, axis=1) - 2.0) <= 1e-9)
    assert np.all(r1[~mask] == 0.0)
    single = attention_rp_perturbation(4, None, 1.5, np.random.default_rng(1))
    assert abs(np.linalg.norm(single) - 1.5) <= 1e-9


def test_rp_draws_nothing_at_zero_epsilon():
    g = np.random.default_rng(0)
    attention_rp_perturbation(5, None, 0.0, g)
    assert g.standard_normal() == np.random.default_rng(0).standard_normal()


# ------------------------------------------------------------ word-level AT

def test_word_at_norm_and_zero(rng):
    cfg, params = tiny_model("pair")
    batch = random_batch(rng, B=3, T=5)
    p = word_at_perturbation(batch, params, cfg, 0.9)
    norms = np.sqrt(np.sum(p.values ** 2, axis=(1, 2)))
    assert np.all(np.abs(norms - 0.9) <= 1e-9)
    assert np.all(p.values[~batch.mask] == 0.0)
    p0 = word_at_perturbation(batch, params, cfg, 0.0)
    clean = perturbed_loss(batch, params, cfg)
    assert np.array_equal(perturbed_loss(batch, params, cfg, embed_perturbation=p0.values), clean)


def test_word_at_first_order_optimal():
    eps = 1e-3
    cfg, params, batch = _first_order_case(3)
    r = word_at_perturbation(batch, params, cfg, eps).values
    l_at = perturbed_loss(batch, params, cfg, embed_perturbation=r)[0]
    dirs = np.random.default_rng(2).standard_normal((10000, 3, 4))
    dirs *= eps / np.sqrt(np.sum(dirs ** 2, axis=(1, 2), keepdims=True))
    losses = perturbed_loss(batch.repeat(10000), params, cfg, embed_perturbation=dirs)
    assert l_at >= 0.999 * losses.max()
    assert l_at >= losses.max() - 1e-6


def test_word_iat_zero_and_degenerate():
    cfg, params = tiny_model("pair")
    batch = batch_from_ids([[2, 3]], [0], [[4]])
    assert np.all(word_iat_perturbation(batch, params, cfg, 0.0).values == 0.0)
    # a table whose only non-padding row is the token itself has no directions
    cfg1 = ModelConfig(2, 2, 3, 4, 2, "pair")
    p1 = init_params(cfg1, np.random.default_rng(0))
    b1 = batch_from_ids([[1]], [0], [[1]])
    out = word_iat_perturbation(b1, p1, cfg1, 1.0)
    assert np.all(out.values == 0.0) and out.degenerate.all()


def test_word_iat_moves_towards_steepest_word():
    # padding row plus three words; a single-token sentence
    cfg = ModelConfig(4, 3, 4, 4, 2, "pair")
    params = init_params(cfg, np.random.default_rng(8))
    batch = batch_from_ids([[2]], [1], [[3]])
    r = word_iat_perturbation(batch, params, cfg, 0.5).values[0, 0]
    table = params["embedding"].data
    w = table[2]
    dirs = []
    for k in (1, 3):  # the word's own row gives a zero direction
        v = table[k] - w
        dirs.append(v / np.linalg.norm(v))
    dirs = np.array(dirs)
    # exhaustive finite-difference slope of the loss along each direction
    h = 1e-6
    slopes = []
    for v in dirs:
        up = perturbed_loss(batch, params, cfg, embed_perturbation=h * v[None, None])[0]
        dn = perturbed_loss(batch, params, cfg, embed_perturbation=-h * v[None, None])[0]
        slopes.append((up - dn) / (2 * h))
    coef, *_ = np.linalg.lstsq(dirs.T, r, rcond=None)
    assert np.allclose(dirs.T @ coef, r, atol=1e-12)
    assert int(np.argmax(coef)) == int(np.argmax(slopes))
    assert np.allclose(coef / np.linalg.norm(coef), np.array(slopes) / np.linalg.norm(slopes),
                       atol=1e-5)


def test_word_iat_vocabulary_cap(monkeypatch, rng):
    cfg, params = tiny_model("pair")
    monkeypatch.setattr(adv, "WORD_IAT_MAX_VOCAB", 4)
    with pytest.raises(ValueError, match="attention-based"):
        word_iat_perturbation(random_batch(rng), params, cfg, 1.0)


# ----------------------------------------------------------------- objective

@pytest.mark.parametrize("method", adv.METHODS)
def test_lambda_zero_equals_clean_loss(method, rng):
    cfg, params = tiny_model("pair")
    batch = random_batch(rng)
    clean = float(np.mean(perturbed_loss(batch, params, cfg)))
    value = adversarial_loss(batch, params, cfg, AdvConfig(method, 1.0, 0.0),
                             np.random.default_rng(0))
    assert value == pytest.approx(clean, abs=1e-15)


@pytest.mark.parametrize("method", adv.METHODS[1:])
def test_objective_is_additive(method, rng):
    cfg, params = tiny_model("pair")
    batch = random_batch(rng)
    parts, grads = adversarial_objective(batch, params, cfg, AdvConfig(method, 0.8, 1.0),
                                         np.random.default_rng(0))
    assert abs(parts.total - (parts.clean + parts.lam * parts.adversarial)) <= 1e-12
    assert set(grads) == set(params.names())
    assert parts.adversarial >= 0


def test_additivity_arithmetic():
    parts = adv.ObjectiveParts(0.40, 0.55, 1.0, 0.40 + 1.0 * 0.55)
    assert parts.total == pytest.approx(0.95, abs=1e-15)


def test_zero_epsilon_adversarial_term_equals_clean(rng):
    cfg, params = tiny_model("pair")
    batch = random_batch(rng)
    parts, _ = adversarial_objective(batch, params, cfg, AdvConfig("attention_at", 0.0, 1.0))
    assert parts.adversarial == parts.clean


def test_vanilla_matches_attention_at_at_zero_epsilon_and_lambda(rng):
    cfg, params = tiny_model("pair")
    batch = random_batch(rng)
    pv, gv = adversarial_objective(batch, params, cfg, AdvConfig("vanilla", 0.0, 1.0))
    pa, ga = adversarial_objective(batch, params, cfg, AdvConfig("attention_at", 0.0, 0.0))
    assert pv.total == pa.total
    for name in gv:
        assert np.array_equal(gv[name], ga[name])


@pytest.mark.parametrize("method", ["attention_at", "attention_iat", "word_at", "word_iat"])
def test_objective_gradient_matches_finite_differences(method, rng):
    # the perturbation is held fixed, so compare against differences of the
    # objective with the perturbation frozen at its current value
    cfg, params = tiny_model("pair")
    batch = random_batch(rng, B=2, T=4)
    a = AdvConfig(method, 0.5, 1.0)
    _, grads = adversarial_objective(batch, params, cfg, a)
    builder = {"attention_at": attention_at_perturbation, "attention_iat": attention_iat_perturbation,
               "word_at": word_at_perturbation, "word_iat": word_iat_perturbation}[method]
    r = builder(batch, params, cfg, 0.5).values
    key = "score_perturbation" if method.startswith("attention") else "embed_perturbation"

    def frozen(p):
        return (np.mean(perturbed_loss(batch, p, cfg))
                + np.mean(perturbed_loss(batch, p, cfg, **{key: r})))

    for name in ("attn.c", "dec.W", "enc_p.fwd.w_h"):
        base = params[name].data
        idx = np.unravel_index(np.argmax(np.abs(grads[name])), base.shape)
        old = base[idx]
        h = 1e-6
        base[idx] = old + h
        up = frozen(params)
        base[idx] = old - h
        dn = frozen(params)
        base[idx] = old
        num = (up - dn) / (2 * h)
        assert abs(num - grads[name][idx]) <= 1e-5 * max(1.0, abs(num))


def test_perturbation_leaves_clean_pass_untouched(rng):
    cfg, params = tiny_model("pair")
    batch = random_batch(rng)
    before = perturbed_loss(batch, params, cfg)
    for build in (attention_at_perturbation, attention_iat_perturbation, word_at_perturbation,
                  word_iat_perturbation):
        build(batch, params, cfg, 1.0)
        zero = perturbed_loss(batch, params, cfg, score_perturbation=np.zeros(batch.mask.shape))
        assert np.array_equal(zero, before)
