import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ksr import _kernels
from ksr.model import (
    ConfigError,
    ModelConfig,
    ModelFormatError,
    NumericalInstabilityError,
    apply_gradient,
    coupling_weights,
    infer_entity_code,
    infer_relation_code,
    init_model,
    load_model,
    object_message,
    save_model,
    score,
    score_batch,
    score_gradient,
    subject_message,
)
from tests.conftest import random_model
from tests.oracles import naive_score, softmax_row

seeds = st.integers(0, 2**32 - 1)


def oracle(m, triple):
    h, r, t = triple
    return naive_score(m.entity_logits.tolist(), m.rel_subj_logits.tolist(), m.rel_obj_logits.tolist(),
                       m.rel_feat_logits.tolist(), h, r, t, m.config.sigma)


def hinge(m, pos, neg, gamma):
    return max(0.0, gamma - score(m, pos) + score(m, neg))


# -- configuration and initialization ---------------------------------------------------------

@pytest.mark.parametrize("kwargs", [dict(n=0), dict(d=0), dict(sigma=0.0), dict(sigma=-1.0)])
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_init_rejects_empty_vocab():
    with pytest.raises(ConfigError):
        init_model(ModelConfig(), 0, 3)
    with pytest.raises(ConfigError):
        init_model(ModelConfig(), 3, 0)


def test_init_range_and_determinism():
    a = init_model(ModelConfig(n=3, d=4, seed=9), 7, 2)
    b = init_model(ModelConfig(n=3, d=4, seed=9), 7, 2)
    for name, table in a.tables().items():
        assert np.array_equal(table, b.tables()[name])
        assert np.all(np.abs(table) <= 0.1)


def test_zero_model_is_uniform():
    m = init_model(ModelConfig(n=3, d=5), 4, 2, zero=True)
    np.testing.assert_array_equal(m.entity_probs(), np.full((4, 3, 5), 1 / 5))
    np.testing.assert_allclose(m.rel_feat_probs(), np.full((2, 3), 1 / 3))


def test_parameter_count_at_fb15k_scale():
    # E*n*d + R*(2*n*d + n) with E=14951, R=1345, n=d=10
    m = init_model(ModelConfig(n=10, d=10), 14951, 1345, zero=True)
    assert m.num_parameters == 14951 * 100 + 1345 * 210 == 1_777_550


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_softmax_rows_normalized(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n=int(rng.integers(1, 6)), d=int(rng.integers(2, 6)), scale=5.0)
    for probs in (m.entity_probs(), m.rel_subj_probs(), m.rel_obj_probs(), m.rel_feat_probs()):
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all((probs >= 0) & (probs <= 1))


# -- messages and coupling ---------------------------------------------------------------

def test_messages_uniform_for_zero_logits():
    m = init_model(ModelConfig(n=2, d=4), 3, 1, zero=True)
    np.testing.assert_allclose(subject_message(m, 0, 0, 1), 0.25)
    np.testing.assert_allclose(object_message(m, 2, 0, 0), 0.25)


@pytest.mark.parametrize("message,row_table", [(subject_message, "rel_subj_logits"),
                                               (object_message, "rel_obj_logits")])
def test_message_dominated_by_entity_row(message, row_table):
    m = init_model(ModelConfig(n=1, d=3), 2, 1, zero=True)
    m.entity_logits[1, 0] = [60.0, 0.0, 0.0]
    getattr(m, row_table)[0, 0] = [0.0, 2.0, 1.0]
    msg = message(m, 1, 0, 0)
    assert np.argmax(msg) == 0 and msg[0] > 1 - 1e-12


@pytest.mark.parametrize("message,row_table", [(subject_message, "rel_subj_logits"),
                                               (object_message, "rel_obj_logits")])
def test_message_matches_recomputation(rng, message, row_table):
    m = random_model(rng, n=2, d=3)
    for e in range(m.num_entities):
        for k in range(2):
            a = softmax_row(m.entity_logits[e, k].tolist())
            b = softmax_row(getattr(m, row_table)[1, k].tolist())
            prod = [x * y for x, y in zip(a, b)]
            np.testing.assert_allclose(message(m, e, 1, k), [x / sum(prod) for x in prod], atol=1e-14)


def test_coupling_examples():
    np.testing.assert_array_equal(coupling_weights([0.2, 0.8], [0.2, 0.8], 0.04), [1.0, 1.0])
    np.testing.assert_allclose(coupling_weights([1.0, 0.0], [0.0, 1.0], 1.0), [0.36787944117144233] * 2)


def test_coupling_matches_script(rng):
    p = rng.dirichlet(np.ones(6))
    q = rng.dirichlet(np.ones(6))
    expected = [math.exp(-abs(a - b) / 0.04) for a, b in zip(p, q)]
    np.testing.assert_allclose(coupling_weights(p, q, 0.04), expected, rtol=1e-14)


@settings(max_examples=100)
@given(seeds, st.floats(0.01, 10.0))
def test_coupling_symmetric_and_maximal(seed, sigma):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(4))
    q = p.copy()
    q[:2] = rng.dirichlet(np.ones(2)) * p[:2].sum()
    w = coupling_weights(p, q, sigma)
    np.testing.assert_array_equal(w, coupling_weights(q, p, sigma))
    assert np.all((w == 1.0) == (p == q))
    assert np.all(w <= 1.0)


# -- score ----------------------------------------------------------------------------

def test_score_zero_model_closed_form():
    m = init_model(ModelConfig(n=1, d=2), 2, 1, zero=True)
    assert score(m, (0, 0, 1)) == pytest.approx(math.log(1 / 8), abs=1e-12)
    assert math.log(1 / 8) == pytest.approx(-2.0794, abs=1e-4)


def test_score_matches_naive_loops(rng):
    for _ in range(20):
        m = random_model(rng, n=2, d=2)
        for _ in range(5):
            triple = tuple(int(x) for x in (rng.integers(5), rng.integers(2), rng.integers(5)))
            assert score(m, triple) == pytest.approx(oracle(m, triple), abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(seeds, st.sampled_from(["entity_logits", "rel_subj_logits", "rel_obj_logits", "rel_feat_logits"]),
       st.floats(-50, 50))
def test_score_shift_invariance(seed, table, shift):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n=3, d=3)
    triple = (int(rng.integers(5)), int(rng.integers(2)), int(rng.integers(5)))
    before = score(m, triple)
    arr = getattr(m, table)
    row = tuple(rng.integers(s) for s in arr.shape[:-1])
    arr[row] += shift
    assert score(m, triple) == pytest.approx(before, abs=1e-9)


def test_score_batch_and_kernel_agree(rng):
    m = random_model(rng, n=3, d=4, num_entities=7, num_relations=3)
    trip = rng.integers([0, 0, 0], [7, 3, 7], size=(50, 3))
    expected = np.array([score(m, t) for t in trip])
    np.testing.assert_allclose(score_batch(m, trip[:, 0], trip[:, 1], trip[:, 2]), expected, atol=1e-12)
    got = _kernels.score_many(m.entity_logits, m.rel_subj_logits, m.rel_obj_logits, m.rel_feat_logits,
                              trip[:, 0].copy(), trip[:, 1].copy(), trip[:, 2].copy(), m.config.sigma)
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_score_nonfinite_raises():
    m = init_model(ModelConfig(n=2, d=2), 2, 1, zero=True)
    m.entity_logits[0, 1, 0] = np.nan
    with pytest.raises(NumericalInstabilityError) as info:
        score(m, (0, 0, 1))
    assert info.value.triple == (0, 0, 1) and info.value.feature == 1


def test_degenerate_single_category():
    m = init_model(ModelConfig(n=3, d=1), 2, 1)
    assert score(m, (0, 0, 1)) == 0.0


# -- gradient -------------------------------------------------------------------------

def test_inactive_hinge_gives_empty_gradient(rng):
    m = random_model(rng, n=2, d=3)
    pos, neg = (0, 0, 1), (2, 0, 1)
    margin = score(m, pos) - score(m, neg)
    gamma = margin - 1.0 if margin > 1.0 else 0.0
    if gamma - margin > 0:
        pos, neg = neg, pos
    assert score_gradient(m, pos, neg, gamma) == {}


def test_gradient_locality(rng):
    m = random_model(rng, n=2, d=3)
    grads = score_gradient(m, (0, 0, 1), (4, 1, 1), gamma=1e6)
    assert set(grads) == {("entity", 0), ("entity", 1), ("entity", 4), ("rel_subj", 0), ("rel_obj", 0),
                          ("rel_feat", 0), ("rel_subj", 1), ("rel_obj", 1), ("rel_feat", 1)}
    # entity 4 only appears in the negative triple: its gradient is exactly the negative score's
    only_neg = score_gradient(m, (0, 0, 1), (4, 1, 1), gamma=1e6)[("entity", 4)]
    with_other_pos = score_gradient(m, (2, 1, 3), (4, 1, 1), gamma=1e6)[("entity", 4)]
    np.testing.assert_allclose(only_neg, with_other_pos, atol=1e-15)


def _fd_check(m, pos, neg, gamma, eps=1e-5):
    """Largest relative error between analytic and central-difference partials.

    While the hinge is active its derivative is that of score(neg) - score(pos);
    differencing the gap directly keeps the constant margin out of the cancellation.
    """
    grads = score_gradient(m, pos, neg, gamma)
    gap = lambda: score(m, neg) - score(m, pos)  # noqa: E731
    tables = {"entity": m.entity_logits, "rel_subj": m.rel_subj_logits, "rel_obj": m.rel_obj_logits,
              "rel_feat": m.rel_feat_logits}
    worst = 0.0
    for (name, row), g in grads.items():
        arr = tables[name]
        for idx in np.ndindex(g.shape):
            full = (row, *idx)
            orig = arr[full]
            arr[full] = orig + eps
            up = gap()
            assert gamma + up > 0
            arr[full] = orig - eps
            down = gap()
            assert gamma + down > 0
            arr[full] = orig
            fd = (up - down) / (2 * eps)
            rel = abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst


def _gradient_instance(rng):
    n, d = int(rng.integers(1, 4)), int(rng.integers(2, 4))
    m = random_model(rng, n=n, d=d, num_entities=4, num_relations=2)
    pos = tuple(int(x) for x in (rng.integers(4), rng.integers(2), rng.integers(4)))
    neg = tuple(int(x) for x in (rng.integers(4), rng.integers(2), rng.integers(4)))
    return m, pos, neg


def _near_kink(m, triple, tol=1e-3):
    """|p_c - q_c| close to zero, where the Laplace term is not differentiable."""
    h, r, t = triple
    return any(np.min(np.abs(subject_message(m, h, r, k) - object_message(m, t, r, k))) < tol
               for k in range(m.config.n))


def gradient_check(num_instances, seed=2024):
    rng = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    while checked < num_instances:
        m, pos, neg = _gradient_instance(rng)
        if _near_kink(m, pos) or _near_kink(m, neg):
            continue
        worst = max(worst, _fd_check(m, pos, neg, gamma=1e3))
        checked += 1
    return worst


def test_gradient_matches_finite_differences():
    assert gradient_check(40, seed=7) < 1e-4


def test_kernel_step_matches_numpy_gradient(rng):
    from ksr.trainer import TrainConfig, run_epoch

    m = random_model(rng, n=3, d=3, num_entities=6, num_relations=2, sigma=0.3)
    pos = np.array([[0, 1, 2]])
    neg = np.array([[0, 1, 5]])
    expected = m.copy()
    apply_gradient(expected, score_gradient(expected, (0, 1, 2), (0, 1, 5), 1e3), alpha=0.05)
    run_epoch(m, pos, neg, TrainConfig(alpha=0.05, gamma=1e3, sigma=0.3))
    for name, table in m.tables().items():
        np.testing.assert_allclose(table, expected.tables()[name], atol=1e-13)


def test_self_loop_gradient_accumulates(rng):
    m = random_model(rng, n=2, d=3)
    grads = score_gradient(m, (1, 0, 1), (2, 0, 3), 1e3)
    assert _fd_check(m, (1, 0, 1), (2, 0, 3), 1e3) < 1e-4 or _near_kink(m, (1, 0, 1))
    assert ("entity", 1) in grads


# -- semantic codes -------------------------------------------------------------------

def test_entity_code_zero_logits_ties_to_zero():
    m = init_model(ModelConfig(n=4, d=3), 2, 1, zero=True)
    assert tuple(infer_entity_code(m, 1)) == (0, 0, 0, 0)
    assert tuple(infer_relation_code(m, 0)) == (0, 0, 0, 0)


def test_entity_code_constructed_maximum():
    m = init_model(ModelConfig(n=3, d=5), 1, 1, zero=True)
    m.entity_logits[0, :, 3] = 2.0
    assert tuple(infer_entity_code(m, 0)) == (3, 3, 3)


def test_entity_code_matches_recomputation(rng):
    m = random_model(rng, n=4, d=5)
    for e in range(m.num_entities):
        expected = []
        for k in range(4):
            probs = softmax_row(m.entity_logits[e, k].tolist())
            expected.append(max(range(5), key=lambda c: (probs[c], -c)))
        assert list(infer_entity_code(m, e)) == expected


def test_relation_code_identical_tables():
    m = init_model(ModelConfig(n=2, d=4), 1, 1, zero=True)
    m.rel_subj_logits[0] = [[0.0, 1.0, 3.0, 2.0], [5.0, 1.0, 0.0, 0.0]]
    m.rel_obj_logits[0] = m.rel_subj_logits[0]
    assert tuple(infer_relation_code(m, 0)) == (2, 0)


def test_relation_code_product_decides():
    # subject (0.1, 0.6, 0.3), object (0.05, 0.05, 0.9): products (0.005, 0.03, 0.27) -> category 2
    m = init_model(ModelConfig(n=1, d=3), 1, 1, zero=True)
    m.rel_subj_logits[0, 0] = np.log([0.1, 0.6, 0.3])
    m.rel_obj_logits[0, 0] = np.log([0.05, 0.05, 0.9])
    assert tuple(infer_relation_code(m, 0)) == (2,)


def test_codes_are_pure(rng):
    m = random_model(rng, n=3, d=3)
    before = {k: v.copy() for k, v in m.tables().items()}
    assert infer_entity_code(m, 2) == infer_entity_code(m, 2)
    assert infer_relation_code(m, 1) == infer_relation_code(m, 1)
    for k, v in m.tables().items():
        assert np.array_equal(v, before[k])


# -- serialization --------------------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(seeds)
def test_save_load_bit_identical(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n=int(rng.integers(1, 5)), d=int(rng.integers(2, 5)), scale=3.0)
    path = tmp_path_factory.mktemp("m") / "model.ksr"
    save_model(m, path)
    loaded = load_model(path)
    assert loaded.config == m.config
    for name, table in m.tables().items():
        assert np.array_equal(loaded.tables()[name], table)
        assert loaded.tables()[name].tobytes() == table.tobytes()
    meta = path.with_suffix(".meta").read_text()
    assert f"n={m.config.n}" in meta and "format=KSR1" in meta


def test_load_truncated(tmp_path, rng):
    m = random_model(rng, n=2, d=3)
    path = save_model(m, tmp_path / "m.ksr")
    data = path.read_bytes()
    path.write_bytes(data[:-20])
    with pytest.raises(ModelFormatError, match=r"expected \d+ bytes, got \d+"):
        load_model(path)


def test_load_dimension_mismatch(tmp_path, rng):
    import struct

    m = random_model(rng, n=2, d=3)
    path = save_model(m, tmp_path / "m.ksr")
    data = bytearray(path.read_bytes())
    # rewrite the header's n from 2 to 4 while the tables stay sized for n=2
    struct.pack_into("<I", data, 8, 4)
    path.write_bytes(bytes(data))
    with pytest.raises(ModelFormatError, match="dimension mismatch"):
        load_model(path)


def test_load_bad_version_and_magic(tmp_path, rng):
    import struct

    path = save_model(random_model(rng, n=1, d=2), tmp_path / "m.ksr")
    data = bytearray(path.read_bytes())
    struct.pack_into("<I", data, 4, 99)
    path.write_bytes(bytes(data))
    with pytest.raises(ModelFormatError, match="version 99"):
        load_model(path)
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(ModelFormatError, match="magic"):
        load_model(path)
