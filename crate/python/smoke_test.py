"""Smoke test for the Python bindings.

Build and install the extension first, e.g.

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/patientsim_py-*.whl

then run `python python/smoke_test.py`.
"""

import json
import math
import tempfile

import patientsim_py as ps


def check_helpers():
    assert ps.N_FEATURES == 46 and ps.N_ACTIONS == 25
    assert ps.action_code(2, 3) == 13
    assert ps.decode_action(13) == (2, 3)
    assert abs(ps.gaussian_kl([1.0], [1.0]) - 0.5) < 1e-12

    w, mu, sd, x = [0.3, 0.7], [[0.0], [1.0]], [[1.0], [0.5]], [0.2]
    dens = sum(
        wk * math.exp(-((x[0] - m[0]) ** 2) / (2 * s[0] ** 2)) / (s[0] * math.sqrt(2 * math.pi))
        for wk, m, s in zip(w, mu, sd)
    )
    assert abs(ps.mdn_nll(w, mu, sd, x) + math.log(dens)) < 1e-9

    assert abs(ps.shaped_reward([6.0, 2.0], [6.0, 2.0]) + 0.025) < 1e-12
    real, sim, gap = ps.normalized_trajectory_mean([[[2.0]]], [[[2.0]]])
    assert real == [0.5] and sim == [0.5] and gap == 0.0
    draw = ps.sample_mixture(w, mu, sd, tau=1e-6, seed=3)
    assert len(draw) == 1


def check_models():
    cohort = ps.Cohort.synthetic(40, seed=1)
    assert len(cohort) == 40 and cohort.n_states > 40
    train, val = cohort.split(0.75, seed=2)

    ae = ps.Autoencoder("vae", seed=0)
    curve = ae.fit(train, val, epochs=2)
    assert len(curve) == 2 and all(math.isfinite(v) for v in curve)
    z = ae.encode_mean(train.states(0)[0])
    assert len(z) == 30 and len(ae.decode(z)) == 46

    model = ps.StateModel("MDN+RNN", seed=0)
    model.fit(train, val, epochs=1)
    states, actions = train.states(0)[:3], train.actions(0)[:3]
    weights, means, _ = model.predict_mixture(states, actions)
    assert abs(sum(weights) - 1.0) < 1e-9 and len(means[0]) == 46

    with tempfile.TemporaryDirectory() as d:
        path = f"{d}/state.json"
        model.save(path)
        again = ps.StateModel.load(path)
        assert again.predict_mean(states, actions) == model.predict_mean(states, actions)


def check_pipeline():
    cfg = json.loads(ps.default_config())
    cfg["data"]["synthetic_episodes"] = 30
    cfg["state"]["variants"] = ["RNN", "MDN+RNN"]
    cfg["agent"]["variant"] = "MDN+RNN"
    cfg["agent"]["dqn"].update(total_steps=300, learning_starts=50, batch_size=16, epsilon_decay_steps=200)
    for stage in ("vae", "state", "heads"):
        cfg[stage]["training"]["max_epochs"] = 1
    cfg["eval"]["policy_episodes"] = 5

    with tempfile.TemporaryDirectory() as out:
        metrics = ps.run_stage("all", out, json.dumps(cfg), seed=7)
        assert "eval.MDN+RNN.closed_loop.ntm_mean_gap" in metrics
        assert "eval.RNN.closed_loop.ntm_mean_gap" in metrics

        sim = ps.Simulator.from_run(out, "MDN+RNN", seed=0)
        obs = sim.reset()
        policy = ps.QPolicy.load(f"{out}/checkpoints/qnet.json")
        done, steps = False, 0
        while not done:
            obs, reward, done, info = sim.step(policy.greedy(obs))
            steps += 1
        assert len(obs) == 46 and reward in (15.0, -15.0) and info["death"] in (True, False)
        assert steps == sim.step_count

        try:
            sim.step(0)
        except RuntimeError:
            pass
        else:
            raise AssertionError("step after done should fail")


if __name__ == "__main__":
    check_helpers()
    check_models()
    check_pipeline()
    print("python smoke test passed")
