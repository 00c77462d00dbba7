import numpy as np
import pytest

from quadmoe import Dataset, InvalidArgument, SynthConfig, generate_dataset, moe_predict, sample_inputs, sample_true_measure
from quadmoe.synth import stream


def test_single_atom_is_anchor():
    G = sample_true_measure(SynthConfig(N_star=1), 3)
    at = G.atoms[0]
    assert np.all(at.A == 0) and np.all(at.b == 0) and at.c == 0.0


def test_gating_variance_and_anchor():
    cfg = SynthConfig(N_star=8, d=2)
    entries = []
    for seed in range(300):
        G = sample_true_measure(cfg, seed)
        last = G.atoms[-1]
        assert np.all(last.A == 0) and np.all(last.b == 0) and last.c == 0.0
        for at in G.atoms[:-1]:
            entries.extend(at.A.ravel())
            entries.extend(at.b)
            entries.append(at.c)
    var = np.var(entries)
    # 14700 draws: standard error of the variance is about 0.005 * sqrt(2 / 14700)
    assert var == pytest.approx(0.005, rel=0.05)


def test_measure_determinism():
    cfg = SynthConfig(N_star=4, expert="tanh")
    np.testing.assert_array_equal(sample_true_measure(cfg, 11).flat(), sample_true_measure(cfg, 11).flat())
    assert not np.array_equal(sample_true_measure(cfg, 11).flat(), sample_true_measure(cfg, 12).flat())


def test_gate_masks_applied():
    mono = sample_true_measure(SynthConfig(N_star=3, gate="QuadMono"), 0)
    assert all(np.all(a.b == 0) for a in mono.atoms)
    lin = sample_true_measure(SynthConfig(N_star=3, gate="Linear"), 0)
    assert all(np.all(a.A == 0) for a in lin.atoms)


def test_uniform_inputs():
    n = 40000
    X = sample_inputs(SynthConfig(d=3), n, 5)
    assert X.min() >= -1 and X.max() <= 1
    assert np.all(np.abs(X.mean(axis=0)) <= 4 / np.sqrt(12 * n))
    np.testing.assert_array_equal(X, sample_inputs(SynthConfig(d=3), n, 5))
    with pytest.raises(InvalidArgument):
        sample_inputs(SynthConfig(), 0, 1)


def test_noiseless_limit():
    cfg = SynthConfig(N_star=3, sigma2=1e-30)
    G = sample_true_measure(cfg, 0)
    data = generate_dataset(G, cfg, 500, 1)
    assert np.max(np.abs(data.Y - moe_predict(data.X, G))) <= 1e-10


def test_noise_variance():
    cfg = SynthConfig(N_star=3)
    G = sample_true_measure(cfg, 0)
    data = generate_dataset(G, cfg, 100_000, 2)
    assert abs(np.var(data.Y - moe_predict(data.X, G)) - 0.049) <= 0.005


def test_noise_stream_separate_from_inputs():
    cu = SynthConfig(N_star=3)
    cg = SynthConfig(N_star=3, input_dist="gaussian")
    G = sample_true_measure(cu, 0)
    a = generate_dataset(G, cu, 200, 9)
    b = generate_dataset(G, cg, 200, 9)
    np.testing.assert_allclose(a.Y - moe_predict(a.X, G), b.Y - moe_predict(b.X, G), atol=1e-14)


def test_streams_are_keyed_by_label_and_index():
    a = stream(1, "x").standard_normal(4)
    assert not np.array_equal(a, stream(1, "y").standard_normal(4))
    assert not np.array_equal(a, stream(1, "x", 1).standard_normal(4))
    np.testing.assert_array_equal(a, stream(1, "x").standard_normal(4))


def test_dataset_roundtrips():
    cfg = SynthConfig(N_star=2, d=3)
    data = generate_dataset(sample_true_measure(cfg, 0), cfg, 25, 0)
    back = Dataset.from_csv(data.to_csv())
    np.testing.assert_array_equal(back.X, data.X)
    np.testing.assert_array_equal(back.Y, data.Y)
    back = Dataset.from_json(data.to_json())
    np.testing.assert_array_equal(back.Y, data.Y)
    assert data.to_csv().splitlines()[0] == "x_0,x_1,x_2,y"


@pytest.mark.parametrize(
    "kw", [dict(d=0), dict(sigma2=0.0), dict(input_dist="beta"), dict(expert="gelu"), dict(gate="cubic")]
)
def test_config_validation(kw):
    with pytest.raises(InvalidArgument):
        SynthConfig(**kw)


def test_config_json_roundtrip():
    cfg = SynthConfig(d=3, N_star=4, gate="QuadMono", expert="tanh")
    assert SynthConfig.from_json(cfg.to_json()) == cfg
    assert cfg.hash() == SynthConfig.from_json(cfg.to_json()).hash()
