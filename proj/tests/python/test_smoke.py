import json
import math

import numpy as np
import pytest

import vop_rl


def test_env_step_matches_equilibrium():
    s = vop_rl.EnvState(0.0, 0.0)
    assert vop_rl.env_step(s, 0.0) == s
    down = vop_rl.EnvState(0.0, -math.pi)
    nxt = vop_rl.env_step(down, 0.0)
    assert abs(nxt.x) < 1e-12 and abs(nxt.x_dot) < 1e-12


def test_reward_values():
    obj = vop_rl.Objective(1.0, 2.0)
    assert vop_rl.reward(vop_rl.EnvState(1.0, 0.0), obj) == 0.0
    assert vop_rl.reward(vop_rl.EnvState(0.0, 0.5), obj) == pytest.approx(-2.0)
    assert vop_rl.wrap_angle(math.pi) == pytest.approx(-math.pi)


def test_batch_arrays_and_round_trip(tmp_path):
    batch = vop_rl.generate_batch(3, 5, 7)
    assert len(batch) == 15
    cols = batch.arrays()
    assert cols["s"].shape == (15, 4)
    assert np.all(np.abs(cols["a"]) <= 2.0)
    nxt = vop_rl.env_step(vop_rl.EnvState(*cols["s"][0]), float(cols["a"][0]))
    assert np.allclose(nxt.vec(), cols["s_next"][0], rtol=0, atol=0)
    path = str(tmp_path / "batch.jsonl")
    vop_rl.save_batch(batch, path)
    assert vop_rl.load_batch(path) == batch


def test_small_pipeline(tmp_path):
    batch = vop_rl.generate_batch(20, 60, 1)
    ecfg = vop_rl.EnsembleConfig()
    ecfg.k = 2
    ecfg.max_epochs = 3
    model, mse, holdout = vop_rl.train_ensemble(batch, ecfg)
    assert model.frozen and model.size == 2 and len(mse) == 2
    report = vop_rl.model_report(model, batch, holdout)
    assert report["one_step_rmse"].shape == (4,)

    tcfg = vop_rl.TrainConfig()
    tcfg.horizon = 5
    tcfg.population = 40
    tcfg.minibatch = 20
    tcfg.max_epochs = 2
    policy, curve, _ = vop_rl.train_policy(model, batch, tcfg)
    assert len(curve) == 3
    a = policy.act(vop_rl.EnvState(0.1, 3.0), vop_rl.Objective(0.0, 1.0))
    assert -2.0 <= a <= 2.0

    again, _, _ = vop_rl.train_policy(model, batch, tcfg)
    assert again.parameter_hash() == policy.parameter_hash()

    report = vop_rl.evaluate([policy], model, n_starts=3, steps=20)
    assert len(report["rows"]) > 0
    json.dumps(report)

    scen = vop_rl.objective_switch_scenario(policy, 3.0)
    assert len(scen["states"]) == 251
    assert isinstance(scen["reached_target"], bool)

    ep = vop_rl.run_episode(lambda s, o: 0.0, vop_rl.Objective(0, 1), vop_rl.EnvState(0, 0), 10)
    assert ep["total_return"] == 0.0


def test_cli_front_end(tmp_path):
    code, out, err = vop_rl.cli(["--out", str(tmp_path), "gen-data", "--episodes", "2", "--steps", "3"])
    assert code == 0, err
    assert (tmp_path / "data" / "batch.jsonl").exists()
    code, _, err = vop_rl.cli(["--out", str(tmp_path / "empty"), "train-models"])
    assert code == 2 and "missing artifact" in err
