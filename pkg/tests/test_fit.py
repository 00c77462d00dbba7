import math

import numpy as np
import pytest

from quadmoe import (
    Atom,
    DivergenceError,
    FitConfig,
    GateKind,
    InvalidArgument,
    LinearExpert,
    MixingMeasure,
    SynthConfig,
    assign_cells,
    fn_l2_distance,
    gd_fit,
    generate_dataset,
    init_overspecified,
    moe_predict,
    sample_true_measure,
)
from quadmoe.fit import history_csv


def _truth(N=3, gate="QuadPoly", expert="relu", seed=0, d=2):
    cfg = SynthConfig(d=d, N_star=N, gate=gate, expert=expert)
    return cfg, sample_true_measure(cfg, seed)


def test_zero_perturbation_same_size_is_identity():
    _, G = _truth()
    H, src = init_overspecified(G, G.N, perturb_scale=0.0)
    np.testing.assert_array_equal(H.flat(), G.flat())
    assert src == [0, 1, 2]


def test_duplicate_halves_weight():
    _, G = _truth()
    H, src = init_overspecified(G, G.N + 1, perturb_scale=0.0, duplicates=[0])
    assert src == [0, 1, 2, 0]
    assert H.atoms[0].weight == pytest.approx(G.atoms[0].weight / 2, rel=1e-15)
    assert H.atoms[0].weight + H.atoms[3].weight == pytest.approx(G.atoms[0].weight, rel=1e-15)
    np.testing.assert_array_equal(H.atoms[3].eta.flat(), G.atoms[0].eta.flat())
    np.testing.assert_array_equal(H.atoms[3].A, G.atoms[0].A)


def test_init_atoms_stay_in_source_cell():
    for seed in range(10):
        _, G = _truth(N=3, seed=seed, expert="tanh")
        H, src = init_overspecified(G, 5, perturb_scale=0.01, seed=seed)
        asg = assign_cells(H, G)
        assert list(asg.owner) == src


def test_identifiable_perturbation_is_symmetric_and_centred():
    _, G = _truth()
    H, _ = init_overspecified(G, 4, perturb_scale=0.1, seed=3, duplicates=[1])
    H0, _ = init_overspecified(G, 4, perturb_scale=0.0, duplicates=[1])
    dA = H.packed()[0] - H0.packed()[0]
    np.testing.assert_allclose(dA, dA.transpose(0, 2, 1), atol=1e-15)
    np.testing.assert_allclose(dA.mean(axis=0), 0.0, atol=1e-15)
    dC = H.packed()[2] - H0.packed()[2]
    assert abs(dC.mean()) <= 1e-15


def test_init_validation():
    _, G = _truth()
    with pytest.raises(InvalidArgument):
        init_overspecified(G, 2)
    with pytest.raises(InvalidArgument):
        init_overspecified(G, 5, duplicates=[0])


def test_gd_fixed_point_at_zero_residual():
    cfg, G = _truth(expert="tanh")
    X = np.random.default_rng(0).uniform(-1, 1, size=(50, 2))
    H, hist = gd_fit(G, (X, moe_predict(X, G)), FitConfig(steps=5))
    np.testing.assert_array_equal(H.flat(), G.flat())
    assert len(hist) == 6 and max(hist) <= 1e-30


def test_gd_single_step_closed_form():
    G = MixingMeasure((Atom(np.zeros((1, 1)), [0.0], 0.0, LinearExpert([1.0], 0.5)),), GateKind("Linear"))
    X, Y = np.array([[1.0]]), np.array([0.0])
    H, hist = gd_fit(G, (X, Y), FitConfig(lr=0.1, steps=1))
    # loss (y - b1 x - b0)^2 has gradient 2 * 1.5 in both coordinates
    eta = H.atoms[0].eta
    assert eta.beta1[0] == pytest.approx(1.0 - 0.1 * 3.0, abs=1e-15)
    assert eta.beta0 == pytest.approx(0.5 - 0.1 * 3.0, abs=1e-15)
    assert hist[0] == 2.25 and hist[1] == pytest.approx(0.81, abs=1e-15)


def test_gd_noiseless_recovery():
    cfg = SynthConfig(d=2, N_star=2, expert="relu", sigma2=1e-30)
    G = sample_true_measure(cfg, 0)
    data = generate_dataset(G, cfg, 2000, 0)
    G0, _ = init_overspecified(G, 3, perturb_scale=0.01, seed=1)
    _, hist = gd_fit(G0, data, FitConfig(lr=0.1, steps=50))
    assert hist[-1] < hist[0]
    assert hist[-1] < 1e-3


def test_gd_masks_untouched():
    cfg = SynthConfig(d=2, N_star=2, gate="QuadMono", expert="linear")
    G = sample_true_measure(cfg, 0)
    data = generate_dataset(G, cfg, 300, 0)
    G0, _ = init_overspecified(G, 3, 0.05, seed=0)
    H, _ = gd_fit(G0, data, FitConfig(steps=3))
    assert all(np.all(a.b == 0) for a in H.atoms)


def test_gd_divergence_is_reported():
    cfg = SynthConfig(d=2, N_star=2, expert="linear")
    G = sample_true_measure(cfg, 0)
    data = generate_dataset(G, cfg, 100, 0)
    with pytest.raises(DivergenceError):
        gd_fit(G, (data.X * 1e3, data.Y), FitConfig(lr=1e3, steps=50))


def test_gd_clamp_bounds_entries():
    cfg = SynthConfig(d=2, N_star=2, expert="linear")
    G = sample_true_measure(cfg, 0)
    data = generate_dataset(G, cfg, 100, 0)
    H, _ = gd_fit(G, data, FitConfig(lr=50.0, steps=20, clamp=2.0))
    assert np.max(np.abs(H.flat())) <= 2.0


def test_history_csv():
    assert history_csv([1.0, 0.5]) == "step,loss\n0,1\n1,0.5\n"


def test_fit_config_validation():
    for kw in (dict(lr=0.0), dict(steps=0), dict(perturb_scale=-1.0)):
        with pytest.raises(InvalidArgument):
            FitConfig(**kw)
    assert FitConfig.from_json(FitConfig(steps=7).to_json()).steps == 7


def _single(beta1, beta0):
    return MixingMeasure((Atom(np.zeros((1, 1)), [0.0], 0.0, LinearExpert([beta1], beta0)),))


def test_fn_distance_examples():
    _, G = _truth()
    assert fn_l2_distance(G, G) == 0.0
    assert fn_l2_distance(_single(1.0, 0.0), _single(1.0, 1.0)) == pytest.approx(1.0, abs=1e-15)
    M = 20000
    assert abs(fn_l2_distance(_single(1.0, 0.0), _single(2.0, 0.0), M=M) - math.sqrt(1 / 3)) <= 3 / math.sqrt(M)


def test_fn_distance_validation():
    with pytest.raises(InvalidArgument):
        fn_l2_distance(_single(1.0, 0.0), _single(1.0, 0.0), M=0)
