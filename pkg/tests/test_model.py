import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadmoe import (
    Atom,
    AttnGateParams,
    ExpertFamily,
    GateKind,
    InvalidArgument,
    LinearExpert,
    MixingMeasure,
    TwoLayerExpert,
    active_attention,
    att_moe_forward,
    attention,
    expert_eval,
    gate_probs,
    gate_scores,
    induced_quadratic,
    moe_forward,
    moe_predict,
)
from quadmoe.model import attn_gate_scores

S1 = 1.0 / (1.0 + math.exp(-1.0))


def _lin(beta1, beta0=0.0):
    return LinearExpert(np.atleast_1d(np.asarray(beta1, float)), beta0)


def _atom(A, b, c, eta):
    return Atom(np.atleast_2d(np.asarray(A, float)), np.atleast_1d(np.asarray(b, float)), c, eta)


def _random_measure(rng, d, N, gate="QuadPoly", expert="tanh", top_k=None):
    fam = ExpertFamily.named(expert, 2)
    atoms = []
    for _ in range(N):
        A = rng.standard_normal((d, d))
        A = (A + A.T) / 2 if gate != "Linear" else np.zeros((d, d))
        b = rng.standard_normal(d) if gate != "QuadMono" else np.zeros(d)
        atoms.append(Atom(A, b, rng.normal(), fam.unflatten(rng.standard_normal(fam.n_params(d)), d)))
    return MixingMeasure(tuple(atoms), GateKind(gate, top_k))


def test_quad_mono_scores_hand():
    G = MixingMeasure(
        (_atom([[0.5]], [0.0], 0.0, _lin([1.0])), _atom([[-0.5]], [0.0], 0.0, _lin([-1.0]))),
        GateKind("QuadMono"),
    )
    np.testing.assert_allclose(gate_scores([1.0], G), [0.5, -0.5], rtol=0, atol=1e-15)


def test_zero_atoms_score_zero():
    G = MixingMeasure(tuple(_atom(np.zeros((2, 2)), np.zeros(2), 0.0, _lin([0, 0])) for _ in range(3)))
    assert np.all(gate_scores(np.array([0.3, -2.0]), G) == 0.0)


def test_linear_gate_score_hand():
    G = MixingMeasure(
        (_atom(np.zeros((2, 2)), [1.0, 0.0], 2.0, _lin([0, 0])), _atom(np.zeros((2, 2)), [0.0, 0.0], 0.0, _lin([0, 0]))),
        GateKind("Linear"),
    )
    assert gate_scores([3.0, 5.0], G)[0] == 5.0


def test_gate_probs_examples():
    np.testing.assert_allclose(gate_probs([0.5, -0.5]), [S1, 1 - S1], atol=1e-15)
    np.testing.assert_allclose(gate_probs([2.0] * 4), [0.25] * 4, atol=1e-16)
    e = math.e
    np.testing.assert_allclose(gate_probs([3.0, 2.0, 1.0], top_k=2), [e / (e + 1), 1 / (e + 1), 0.0], atol=1e-15)


def test_gate_probs_tie_goes_to_lower_index():
    np.testing.assert_array_equal(gate_probs([1.0, 1.0, 1.0], top_k=1), [1.0, 0.0, 0.0])


@pytest.mark.parametrize("bad", [[], [np.nan, 0.0], [np.inf]])
def test_gate_probs_rejects(bad):
    with pytest.raises(InvalidArgument):
        gate_probs(bad)


def test_gate_probs_bad_top_k():
    with pytest.raises(InvalidArgument):
        gate_probs([1.0, 2.0], top_k=3)


def test_gate_probs_large_scores_no_overflow():
    p = gate_probs([1000.0, 999.0])
    assert np.isfinite(p).all()
    np.testing.assert_allclose(p, [S1, 1 - S1], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=8),
    st.floats(-100, 100),
)
def test_gate_probs_simplex_and_shift(scores, shift):
    p = gate_probs(scores)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(gate_probs(np.asarray(scores) + shift), p, atol=1e-12)


def test_expert_examples():
    assert expert_eval([1.0, 1.0], _lin([2.0, -1.0], 0.5)) == 1.5
    dead = TwoLayerExpert(np.ones((3, 2)), np.ones(3), np.zeros(3), 7.0, "tanh")
    assert expert_eval([0.4, -9.0], dead) == 7.0
    relu = TwoLayerExpert([[1.0]], [-2.0], [3.0], 0.0, "relu")
    assert expert_eval([1.0], relu) == 0.0
    assert expert_eval([3.0], relu) == 3.0


def test_expert_dimension_mismatch():
    with pytest.raises(InvalidArgument):
        expert_eval([1.0, 2.0, 3.0], _lin([1.0, 1.0]))


def test_moe_single_expert_exact():
    eta = _lin([0.3, -0.7], 0.1)
    G = MixingMeasure((_atom(np.eye(2), [1.0, 2.0], 0.5, eta),))
    x = np.array([0.2, 0.9])
    assert moe_forward(x, G) == expert_eval(x, eta)


def test_moe_uniform_gate_is_mean():
    etas = [_lin([1.0, 0.0], 1.0), _lin([0.0, 1.0], -2.0), _lin([2.0, 2.0], 0.0)]
    G = MixingMeasure(tuple(_atom(np.eye(2), [0.5, 0.5], 0.3, e) for e in etas))
    x = np.array([0.4, -0.2])
    assert moe_forward(x, G) == pytest.approx(np.mean([e(x) for e in etas]), abs=1e-15)


def test_moe_composed_example():
    G = MixingMeasure(
        (_atom([[0.5]], [0.0], 0.0, _lin([1.0])), _atom([[-0.5]], [0.0], 0.0, _lin([-1.0]))),
        GateKind("QuadMono"),
    )
    assert moe_forward([1.0], G) == pytest.approx(2 * S1 - 1, abs=1e-15)
    assert round(moe_forward([1.0], G), 6) == 0.462117


@pytest.mark.parametrize("gate", ["Linear", "QuadPoly", "QuadMono"])
@pytest.mark.parametrize("expert", ["linear", "relu", "tanh"])
@pytest.mark.parametrize("top_k", [None, 2])
def test_moe_predict_matches_pointwise(gate, expert, top_k):
    rng = np.random.default_rng(5)
    G = _random_measure(rng, 3, 4, gate, expert, top_k)
    X = rng.uniform(-1, 1, size=(40, 3))
    np.testing.assert_allclose(moe_predict(X, G), [moe_forward(x, G) for x in X], rtol=1e-13, atol=1e-13)


def test_measure_validation():
    eta = _lin([1.0, 1.0])
    with pytest.raises(InvalidArgument):
        MixingMeasure(())
    with pytest.raises(InvalidArgument):
        MixingMeasure((_atom(np.eye(2), [1.0, 0.0], 0.0, eta),), GateKind("QuadMono"))
    with pytest.raises(InvalidArgument):
        MixingMeasure((_atom(np.eye(2), [0.0, 0.0], 0.0, eta),), GateKind("Linear"))
    with pytest.raises(InvalidArgument):
        _atom(np.eye(2), [0.0, 0.0], 800.0, eta)
    with pytest.raises(InvalidArgument):
        MixingMeasure((_atom(np.eye(2), [0.0, 0.0], 0.0, eta),), GateKind("QuadPoly", top_k=2))


def test_measure_json_and_flat_roundtrip():
    G = _random_measure(np.random.default_rng(1), 2, 3, "QuadPoly", "relu", 2)
    H = MixingMeasure.from_json(G.dumps())
    np.testing.assert_array_equal(H.flat(), G.flat())
    assert H.gate == G.gate and H.family == G.family
    np.testing.assert_array_equal(MixingMeasure.from_flat(G.flat(), G).flat(), G.flat())
    np.testing.assert_array_equal(MixingMeasure.from_packed(*G.packed(), G).flat(), G.flat())


def test_induced_quadratic_hand():
    attn = AttnGateParams([[2.0]], [[[3.0]]], [1.0], [[-1.0]])
    (A, b, c), = induced_quadratic(attn)
    assert A[0, 0] == 6.0 and b[0] == 1.0 and c == -1.0


def test_induced_quadratic_zero_query():
    rng = np.random.default_rng(2)
    Wk, bq, bk = rng.standard_normal((3, 2, 4)), rng.standard_normal(2), rng.standard_normal((3, 2))
    out = induced_quadratic(AttnGateParams(np.zeros((2, 4)), Wk, bq, bk))
    for i, (A, b, c) in enumerate(out):
        assert np.all(A == 0)
        np.testing.assert_allclose(b, Wk[i].T @ bq, atol=1e-15)
        assert c == pytest.approx(bq @ bk[i], abs=1e-15)


def test_induced_quadratic_monomial_mode():
    rng = np.random.default_rng(3)
    for A, b, c in induced_quadratic(AttnGateParams(rng.standard_normal((2, 3)), rng.standard_normal((4, 2, 3)))):
        assert np.all(b == 0) and c == 0.0


def test_attn_scores_match_induced():
    rng = np.random.default_rng(4)
    attn = AttnGateParams(rng.standard_normal((2, 3)), rng.standard_normal((4, 2, 3)), rng.standard_normal(2), rng.standard_normal((4, 2)))
    x = rng.standard_normal(3)
    induced = [x @ A @ x + b @ x + c for A, b, c in induced_quadratic(attn)]
    np.testing.assert_allclose(attn_gate_scores(x, attn), induced, atol=1e-12)


def test_attention_examples():
    rng = np.random.default_rng(6)
    K, v = rng.standard_normal((5, 3)), rng.standard_normal(4)
    np.testing.assert_allclose(attention(rng.standard_normal(3), K, np.tile(v, (5, 1))), v, atol=1e-15)
    V = rng.standard_normal((5, 4))
    np.testing.assert_allclose(attention(np.zeros(3), K, V), V.mean(axis=0), atol=1e-15)
    V2 = np.array([[1.0], [0.0]])
    np.testing.assert_allclose(attention([1.0], [[0.5], [-0.5]], V2), [S1], atol=1e-15)


def test_active_attention_examples():
    rng = np.random.default_rng(7)
    q, K, V = rng.standard_normal(3), rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
    np.testing.assert_array_equal(active_attention(q, K, V, "identity"), attention(q, K, V))
    Vp = np.abs(V)
    np.testing.assert_allclose(active_attention(q, K, Vp, "relu"), attention(q, K, Vp), atol=1e-15)
    np.testing.assert_allclose(active_attention(np.zeros(3), K, V, "tanh"), np.tanh(V).mean(axis=0), atol=1e-15)
    with pytest.raises(InvalidArgument):
        active_attention(q, K, V, "softsign")


def test_attention_shape_errors():
    with pytest.raises(InvalidArgument):
        attention([1.0, 2.0], np.ones((3, 3)), np.ones((3, 1)))
    with pytest.raises(InvalidArgument):
        attention([1.0], np.ones((3, 1)), np.ones((2, 1)))


def test_att_moe_examples():
    rng = np.random.default_rng(8)
    eta = _lin([1.0, -1.0], 0.5)
    attn1 = AttnGateParams(rng.standard_normal((2, 2)), rng.standard_normal((1, 2, 2)), rng.standard_normal(2), rng.standard_normal((1, 2)))
    x = np.array([0.3, 0.8])
    assert att_moe_forward(x, attn1, [eta]) == pytest.approx(eta(x), abs=1e-15)
    etas = [_lin([1.0, 0.0]), _lin([0.0, 1.0]), _lin([1.0, 1.0], 3.0)]
    attn0 = AttnGateParams(np.zeros((2, 2)), rng.standard_normal((3, 2, 2)), np.zeros(2), np.zeros((3, 2)))
    assert att_moe_forward(x, attn0, etas) == pytest.approx(np.mean([e(x) for e in etas]), abs=1e-15)


def test_att_moe_induced_equivalence():
    rng = np.random.default_rng(9)
    attn = AttnGateParams(rng.standard_normal((1, 3)), rng.standard_normal((3, 1, 3)), rng.standard_normal(1), rng.standard_normal((3, 1)))
    fam = ExpertFamily.named("tanh", 2)
    etas = [fam.unflatten(rng.standard_normal(fam.n_params(3)), 3) for _ in range(3)]
    G = MixingMeasure(tuple(Atom(A, b, c, e) for (A, b, c), e in zip(induced_quadratic(attn), etas)))
    for x in rng.standard_normal((20, 3)):
        assert att_moe_forward(x, attn, etas) == pytest.approx(moe_forward(x, G), abs=1e-12)
