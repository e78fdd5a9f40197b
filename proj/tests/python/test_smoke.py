import math

import numpy as np
import pytest

import odelearn


def test_synthesize_without_noise_matches_free_decay():
    # x'' = -x from (1, 0): x1(t) = cos t. RK4 at dt = 0.01 is far below 1e-6.
    data = odelearn.synthesize(
        "duffing", [1.0, 0.0], t_end=2.0, dt=0.01,
        params={"b": [0.0, -1.0, 0.0, 0.0], "omega0": 1.0}, method="rk4",
    )
    t = np.asarray(data.times)
    assert len(data) == 201
    assert np.max(np.abs(data.measurements[:, 0] - np.cos(t))) < 1e-6


def test_dataset_round_trip(tmp_path):
    data = odelearn.synthesize("cascaded_tank", [1.0, 1.0], t_end=10.0, dt=0.5, seed=3,
                               input="random_hold", level=4.0, bound=1.0, hold=2.0)
    path = tmp_path / "tank.csv"
    odelearn.write_dataset(path, data)
    back = odelearn.read_dataset(path)
    np.testing.assert_array_equal(back.measurements, data.measurements)
    np.testing.assert_array_equal(back.inputs, data.inputs)


def test_lqr_double_integrator():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    K, P, residual = odelearn.lqr(A, B, np.eye(2), np.eye(1))
    np.testing.assert_allclose(K, [[1.0, math.sqrt(3.0)]], atol=1e-9)
    assert residual < 1e-10


def test_unknown_system_raises_config_error():
    with pytest.raises(odelearn.ConfigError):
        odelearn.synthesize("pendulum", [0.0], t_end=1.0, dt=0.1)


def test_tank_surrogate_shapes():
    est, val = odelearn.cascaded_tank_surrogate(5)
    assert len(est) == len(val) == 1024
    assert est.x0 is None and est.states is None
    assert abs(est.dt - 4.0) < 1e-12


def test_cli_synth_train_eval(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "[run]\nseed = 2\noutput_dir = {}\n"
        "[system]\nname = duffing\nb = -1, -0.3, 0, 0\nsigma_v = 0.01\n"
        "[dataset]\nt_end = 4\ndt = 0.05\nx0 = 1, 0\n"
        "[network]\nstate_ops = identity\nstate_neurons = 2\nraw_time = false\n"
        "output_situation = partial\noutput_prior = 1:x1:1:frozen\noutput_trainable = false\n"
        "[learner]\nepochs_fit = 2\nepochs_sparse = 0\n".format(tmp_path / "out")
    )
    code, out, err = odelearn.run_cli(["synth", str(cfg)])
    assert code == 0, err
    data_path = tmp_path / "out" / "data.csv"
    code, out, err = odelearn.run_cli(["train", str(cfg), str(data_path)])
    assert code == 0, err
    assert out.startswith("L1=")
    code, out, err = odelearn.run_cli(["eval", str(tmp_path / "out" / "model.json"), str(data_path)])
    assert code == 0, err
    assert out.startswith("rmse=")
    sim = odelearn.simulate_checkpoint(tmp_path / "out" / "model.json", odelearn.read_dataset(data_path))
    assert sim.shape == (81, 1)
    assert len(odelearn.identified_equations(tmp_path / "out" / "model.json")) == 2


def test_cli_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[system]\nnmae = duffing\n")
    code, _, err = odelearn.run_cli(["synth", str(cfg)])
    assert code == 2
    assert "unknown key" in err
