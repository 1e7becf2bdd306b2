import math

import numpy as np
import pytest

from simt import autodiff as ad
from simt.autodiff import Graph, ParamSet
from simt.nn import MLPConfig
from simt.rl.advantage import (GAEConfig, LinearBaseline, Trajectory, baseline_fit, baseline_predict,
                               discounted_returns, features, fit_baselines_batch, gae_advantages,
                               gae_batch)
from simt.rl.env import EnvError, NavEnv, clip_action, env_step, nav_reward
from simt.rl.metarl import (MetaRLConfig, RLSimtConfig, avg_policy_kl, compute_advantages,
                            evaluate_policy, gaussian_kl_np, init_rl_state, kd_rl_loss,
                            meta_rl_iteration, pg_adapt, rollout, simt_rl_train, trpo_surrogate)
from simt.rl.policy import GaussianPolicy, gaussian_kl, gaussian_logprob, mean_np
from simt.rl.trpo import TRPOConfig, natural_gradient_step, trpo_meta_update

TINY_POLICY = GaussianPolicy(MLPConfig(2, (8,), 2, "relu", 0))


def tiny_cfg(**kw):
    base = dict(iterations=2, meta_batch=3, rollouts=3, horizon=8, policy=TINY_POLICY,
                eval_tasks=3, task_chunk=None)
    base.update(kw)
    return MetaRLConfig(**base)


def random_batch(seed=0, n=2, k=3, h=6, params=None):
    params = TINY_POLICY.init_params() if params is None else params
    rng = np.random.default_rng(seed)
    return rollout(params, rng.uniform(-0.5, 0.5, (n, 2)), k, h, rng)


# environment

def test_reward_example():
    assert nav_reward(np.array([0.3, 0.4]), np.zeros(2)) == pytest.approx(-0.25, abs=1e-16)


def test_clipping_and_done():
    env = NavEnv(goal=np.array([0.005, 0.0]), horizon=5)
    env.reset()
    s, r, done = env_step(env, [5.0, -5.0])
    assert np.array_equal(s, [0.1, -0.1]) and r <= 0 and not done
    env = NavEnv(goal=np.array([0.009, 0.0]), horizon=5)
    env.reset()
    _, _, done = env_step(env, [0.0, 0.0])
    assert done
    with pytest.raises(EnvError):
        env_step(env, [0.0, 0.0])
    assert np.array_equal(clip_action(np.array([0.05, -0.3])), [0.05, -0.1])


def test_horizon_ends_episode():
    env = NavEnv(goal=np.array([0.4, 0.4]), horizon=3)
    env.reset()
    dones = [env_step(env, [0.0, 0.0])[2] for _ in range(3)]
    assert dones == [False, False, True]


def test_rollout_matches_env_stepping():
    params = TINY_POLICY.init_params()
    b = random_batch(3, params=params)
    rng = np.random.default_rng(3)
    goals = rng.uniform(-0.5, 0.5, (2, 2))
    for task in range(2):
        for k in range(3):
            env = NavEnv(goal=goals[task], horizon=6)
            env.reset()
            for t in range(int(b.mask[task, k].sum())):
                _, r, _ = env_step(env, b.actions[task, k, t])
                assert r == pytest.approx(b.rewards[task, k, t], abs=1e-15)
    assert np.all(b.rewards <= 0)
    assert np.allclose(b.step_weights().sum(-1), 1.0, rtol=0, atol=1e-12)


# policy

def test_logprob_standard_normal_mode():
    g = Graph()
    lp = gaussian_logprob(g.constant([[0.7]]), g.constant([0.0]), np.array([[0.7]]))
    assert lp.value[0] == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert abs(lp.value[0] - (-0.918939)) < 1e-6


def test_logprob_oracle():
    rng = np.random.default_rng(0)
    mu, ls, a = rng.standard_normal((5, 2)), rng.standard_normal(2) * 0.3, rng.standard_normal((5, 2))
    g = Graph()
    got = gaussian_logprob(g.constant(mu), g.constant(ls), a).value
    for i in range(5):
        expect = sum(-0.5 * ((a[i, d] - mu[i, d]) / math.exp(ls[d])) ** 2 - ls[d]
                     - 0.5 * math.log(2 * math.pi) for d in range(2))
        assert abs(got[i] - expect) < 1e-12


def test_kl_closed_form_examples():
    g = Graph()
    mu = np.array([[0.2, -0.1]])
    ls = np.log(np.array([0.5, 2.0]))
    assert abs(gaussian_kl(g.constant(mu), ls, mu, ls).value[0]) < 1e-15
    shifted = gaussian_kl(g.constant(mu), ls, mu + np.array([[0.3, 0.0]]), ls).value[0]
    assert shifted == pytest.approx(0.3 ** 2 / (2 * 0.5 ** 2), abs=1e-14)
    # sigma_new = e * sigma_old: log e - 1/2 + e^-2 / 2 per dim
    wide = gaussian_kl(g.constant(mu), ls, mu, ls + 1.0).value[0]
    assert wide == pytest.approx(2 * (1.0 + 0.5 * math.exp(-2.0) - 0.5), abs=1e-14)


def test_kl_monte_carlo():
    rng = np.random.default_rng(0)
    mu1, mu2 = np.array([0.1, -0.3]), np.array([0.4, 0.2])
    s1, s2 = np.array([0.5, 0.8]), np.array([0.7, 0.6])
    x = mu1 + s1 * rng.standard_normal((400_000, 2))
    logp = (-0.5 * ((x - mu1) / s1) ** 2 - np.log(s1)).sum(-1)
    logq = (-0.5 * ((x - mu2) / s2) ** 2 - np.log(s2)).sum(-1)
    mc = float(np.mean(logp - logq))
    exact = gaussian_kl(Graph().constant(mu1[None]), np.log(s1), mu2[None], np.log(s2)).value[0]
    assert abs(mc - exact) / exact < 0.01


def test_kl_numpy_twin_and_nonnegative():
    rng = np.random.default_rng(1)
    for _ in range(20):
        m1, m2 = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
        l1, l2 = rng.standard_normal(2) * 0.5, rng.standard_normal(2) * 0.5
        node = gaussian_kl(Graph().constant(m1), l1, m2, l2).value
        assert np.all(node >= 0)
        assert np.allclose(node, gaussian_kl_np(m1, l1, m2, l2), rtol=0, atol=1e-14)


# baseline and GAE

def test_baseline_zero_rewards():
    rng = np.random.default_rng(0)
    trajs = [Trajectory(rng.standard_normal((20, 2)), np.zeros((20, 2)), np.zeros(20), np.zeros(20))
             for _ in range(3)]
    b = baseline_fit(trajs)
    assert np.max(np.abs(baseline_predict(b, trajs[0].states))) < 1e-12


def _linear_return_trajectory(rng, t=100, gamma=0.95):
    states = rng.uniform(-1, 1, (t, 2))
    w = rng.standard_normal(8)
    ret = features(states) @ w
    rewards = ret - gamma * np.append(ret[1:], 0.0)
    return Trajectory(states, np.zeros((t, 2)), rewards, np.zeros(t)), ret


def test_baseline_exact_fit():
    tr, ret = _linear_return_trajectory(np.random.default_rng(0))
    assert np.allclose(discounted_returns(tr.rewards, 0.95), ret, rtol=0, atol=1e-12)
    b = baseline_fit([tr])
    assert np.max(np.abs(baseline_predict(b, tr.states) - ret)) < 1e-8


def test_baseline_order_invariant():
    rng = np.random.default_rng(2)
    trajs = [Trajectory(rng.standard_normal((15, 2)), np.zeros((15, 2)), -rng.random(15), np.zeros(15))
             for _ in range(4)]
    a, b = baseline_fit(trajs), baseline_fit(trajs[::-1])
    assert np.allclose(a.coeffs, b.coeffs, rtol=0, atol=1e-10)


def test_gae_single_step():
    tr = Trajectory(np.array([[0.1, 0.2]]), np.zeros((1, 2)), np.array([-0.3]), np.zeros(1))
    b = LinearBaseline(np.arange(8.0) * 0.1)
    adv = gae_advantages(tr, b, GAEConfig(0.9, 1.0))
    assert adv[0] == pytest.approx(-0.3 - b.predict(tr.states)[0], abs=1e-15)


def test_gae_lambda_one_telescopes():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(1, 60))
        tr = Trajectory(rng.standard_normal((t, 2)), np.zeros((t, 2)), -rng.random(t), np.zeros(t))
        b = LinearBaseline(rng.standard_normal(8))
        adv = gae_advantages(tr, b, GAEConfig(0.95, 1.0))
        expect = discounted_returns(tr.rewards, 0.95) - b.predict(tr.states)
        worst = max(worst, float(np.max(np.abs(adv - expect))))
    assert worst < 1e-10


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(1)
    tr = Trajectory(rng.standard_normal((10, 2)), np.zeros((10, 2)), -rng.random(10), np.zeros(10))
    b = LinearBaseline(rng.standard_normal(8))
    v = b.predict(tr.states)
    delta = tr.rewards + 0.9 * np.append(v[1:], 0.0) - v
    assert np.allclose(gae_advantages(tr, b, GAEConfig(0.9, 0.0)), delta, rtol=0, atol=1e-15)


def test_gae_batch_matches_per_trajectory():
    b = random_batch(5, n=2, k=3, h=10)
    values = fit_baselines_batch(b.states, b.rewards, b.mask, 0.95)
    cfg = GAEConfig(0.95, 0.97)
    adv = gae_batch(b.rewards, values, b.mask, cfg)
    for i in range(2):
        tr_all = [b.trajectory(i, k) for k in range(3)]
        base = baseline_fit(tr_all, 0.95)
        for k, tr in enumerate(tr_all):
            t = len(tr)
            assert np.allclose(adv[i, k, :t], gae_advantages(tr, base, cfg), rtol=0, atol=1e-9)
            assert not np.any(adv[i, k, t:])


def test_advantages_standardized_per_task():
    b = random_batch(6)
    adv = compute_advantages(b, GAEConfig())
    w = b.step_weights()
    for i in range(b.num_tasks):
        assert abs(np.sum(w[i] * adv[i])) < 1e-10
        assert abs(np.sum(w[i] * adv[i] ** 2) - 1.0) < 1e-6


# adaptation and objectives

SMALL = GaussianPolicy(MLPConfig(2, (), 2, "relu", 1))


def test_pg_adapt_zero_advantages_identity():
    b = random_batch(1)
    theta = TINY_POLICY.init_params()
    g = Graph()
    phi = pg_adapt(theta.nodes(g), b, np.zeros(b.flat(b.mask).shape), 0.1, g)
    for k in theta:
        assert np.array_equal(phi[k].value, np.broadcast_to(theta[k], phi[k].shape))


def test_pg_adapt_linear_in_alpha():
    b = random_batch(2)
    theta = TINY_POLICY.init_params()
    adv = compute_advantages(b, GAEConfig())
    g = Graph()
    p1 = pg_adapt(theta.nodes(g), b, adv, 0.1, g)
    p2 = pg_adapt(theta.nodes(g), b, adv, 0.2, g)
    for k in theta:
        assert np.allclose(p2[k].value - theta[k], 2 * (p1[k].value - theta[k]), rtol=0, atol=1e-14)


def test_pg_adapt_meta_gradient_finite_differences():
    theta = SMALL.init_params().map(lambda k, v: v + 0.1)
    assert theta.size == 8
    sup = random_batch(3, params=theta)
    qry = random_batch(4, params=theta)
    adv_s = compute_advantages(sup, GAEConfig())
    adv_q = compute_advantages(qry, GAEConfig())
    old = qry.flat(qry.log_probs)

    def f(g, nodes):
        phi = pg_adapt(nodes, sup, adv_s, 0.1, g)
        return trpo_surrogate(phi, old, qry, adv_q, g)

    assert ad.check_gradient(f, theta, 1e-6) < 1e-4


def test_pg_adapt_non_finite():
    b = random_batch(1)
    adv = np.full(b.flat(b.mask).shape, np.nan)
    g = Graph()
    with pytest.raises(FloatingPointError):
        pg_adapt(TINY_POLICY.init_params().nodes(g), b, adv, 0.1, g)


def test_surrogate_identity_and_zero():
    params = TINY_POLICY.init_params()
    q = random_batch(7, params=params)
    adv = compute_advantages(q, GAEConfig(), normalize=False)
    g = Graph()
    nodes = params.nodes(g)
    s = trpo_surrogate(nodes, q.flat(q.log_probs), q, adv, g).value
    per_task = [np.sum(q.step_weights()[i] * adv[i]) for i in range(q.num_tasks)]
    assert s == pytest.approx(-np.mean(per_task), abs=1e-12)
    assert trpo_surrogate(nodes, q.flat(q.log_probs), q, np.zeros_like(adv), g).value == 0.0


def test_surrogate_loop_oracle():
    params = TINY_POLICY.init_params()
    q = random_batch(8, params=params)
    new = params.map(lambda k, v: v + 0.05)
    adv = compute_advantages(q, GAEConfig())
    g = Graph()
    got = trpo_surrogate(new.nodes(g), q.flat(q.log_probs), q, adv, g).value
    mu = mean_np(new, q.states)
    sd = np.exp(new["log_std"])
    total = 0.0
    for i in range(q.num_tasks):
        num, acc = 0, 0.0
        for k in range(q.mask.shape[1]):
            for t in range(q.mask.shape[2]):
                if not q.mask[i, k, t]:
                    continue
                lp = sum(-0.5 * ((q.actions[i, k, t, d] - mu[i, k, t, d]) / sd[d]) ** 2
                         - math.log(sd[d]) - 0.5 * math.log(2 * math.pi) for d in range(2))
                acc += math.exp(lp - q.log_probs[i, k, t]) * adv[i, k * q.mask.shape[2] + t]
                num += 1
        total += acc / num
    assert abs(got - (-total / q.num_tasks)) < 1e-12


def test_policy_kl_and_kd_loss():
    params = TINY_POLICY.init_params()
    q = random_batch(9, params=params)
    other = params.map(lambda k, v: v * 0.9 + 0.01)
    g = Graph()
    nodes = params.nodes(g)
    assert abs(avg_policy_kl(params, nodes, q, g).value) < 1e-15
    assert abs(kd_rl_loss(nodes, params, q, g).value) < 1e-15
    moment_nodes = other.nodes(g)
    kd = kd_rl_loss(nodes, moment_nodes, q, g)
    assert kd.value == pytest.approx(avg_policy_kl(nodes, other, q, g).value, abs=1e-12)
    grads = ad.grad(kd, list(moment_nodes.values()))
    assert all(not np.any(x.value) for x in grads)


# TRPO

def test_natural_gradient_closed_form():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((6, 6))
    f = m @ m.T + 0.5 * np.eye(6)
    g = rng.standard_normal(6)
    cfg = TRPOConfig(delta=0.01, cg_iters=20, cg_damping=0.0)
    step, _ = natural_gradient_step(g, lambda v: f @ v, cfg)
    x = np.linalg.solve(f, g)
    expect = x * math.sqrt(2 * 0.01 / (g @ x))
    assert np.max(np.abs(step - expect)) < 1e-6


def _quadratic_objective(g_vec, f_mat, theta0, curvature=0.0):
    def objective(graph, nodes):
        th = nodes["t"]
        d = ad.sub(th, graph.constant(theta0))
        loss = ad.add(ad.sum(ad.mul(th, graph.constant(g_vec))),
                      ad.scale(ad.sum(ad.square(d)), curvature))
        col = ad.reshape(d, (d.shape[0], 1))
        kl = ad.scale(ad.sum(ad.mul(col, ad.matmul(graph.constant(f_mat), col))), 0.5)
        return loss, kl
    return objective


def test_trpo_toy_contract():
    rng = np.random.default_rng(1)
    m = rng.standard_normal((4, 4))
    f = m @ m.T + np.eye(4)
    theta = ParamSet([("t", rng.standard_normal(4))])
    g = rng.standard_normal(4)
    cfg = TRPOConfig(delta=0.01, cg_iters=10, cg_damping=0.0)
    new, info = trpo_meta_update(theta, _quadratic_objective(g, f, theta["t"]), cfg)
    assert info.accepted and info.kl <= cfg.delta and info.loss_after < info.loss_before
    d = new["t"] - theta["t"]
    assert 0.5 * d @ f @ d <= cfg.delta
    x = np.linalg.solve(f, g)
    direction = -x / np.linalg.norm(x)
    assert np.allclose(d / np.linalg.norm(d), direction, rtol=0, atol=1e-8)


def test_trpo_zero_gradient_unchanged():
    theta = ParamSet([("t", np.array([0.3, -0.2]))])
    new, info = trpo_meta_update(theta, _quadratic_objective(np.zeros(2), np.eye(2), theta["t"]),
                                 TRPOConfig())
    assert new is theta and not info.accepted


def test_trpo_rejection_leaves_theta_bitwise():
    theta = ParamSet([("t", np.array([0.3, -0.2, 0.7]))])
    # the curvature turns the linear gain into a loss at every tried step length
    obj = _quadratic_objective(np.ones(3), np.eye(3), theta["t"].copy(), curvature=1e6)
    new, info = trpo_meta_update(theta, obj, TRPOConfig())
    assert not info.accepted and new.equal(theta) and info.backtracks == TRPOConfig().max_backtracks


def test_trpo_chunks_match_single_graph():
    rng = np.random.default_rng(2)
    f = np.diag(rng.uniform(1, 2, 3))
    g = rng.standard_normal(3)
    theta = ParamSet([("t", rng.standard_normal(3))])
    whole = _quadratic_objective(g, f, theta["t"])

    def halves(graph, nodes, c):
        loss, kl = whole(graph, nodes)
        return ad.scale(loss, 0.5), ad.scale(kl, 0.5)

    a, _ = trpo_meta_update(theta, whole, TRPOConfig(cg_damping=0.0))
    b, _ = trpo_meta_update(theta, halves, TRPOConfig(cg_damping=0.0), chunks=[0, 1])
    assert np.allclose(a["t"], b["t"], rtol=0, atol=1e-12)


# training loop

def test_zero_lambda_matches_baseline():
    a = simt_rl_train(tiny_cfg(simt=None))
    b = simt_rl_train(tiny_cfg(simt=RLSimtConfig(lam=0.0)))
    assert a.theta.equal(b.theta)


def test_chunked_iteration_matches_unchunked():
    st1, _, s1 = meta_rl_iteration(init_rl_state(tiny_cfg()), tiny_cfg(), np.random.default_rng(0))
    st2, _, s2 = meta_rl_iteration(init_rl_state(tiny_cfg(task_chunk=1)), tiny_cfg(task_chunk=1),
                                   np.random.default_rng(0))
    assert s1["post_return"] == s2["post_return"]
    assert np.allclose(st1.theta.to_flat(), st2.theta.to_flat(), rtol=0, atol=1e-10)


def test_simt_iteration_stats_and_contract():
    cfg = tiny_cfg(simt=RLSimtConfig(lam=0.3, eta=0.9), iterations=3)
    state = simt_rl_train(cfg)
    assert state.iteration == 3 and len(state.curves) == 6
    for info in state.trpo_log:
        if info.accepted:
            assert info.kl <= cfg.trpo.delta and info.loss_after < info.loss_before
        else:
            assert info.loss_after == info.loss_before
    assert not state.theta_moment.equal(state.theta)


def test_momentum_ema_order():
    cfg = tiny_cfg(simt=RLSimtConfig(lam=0.3, eta=0.9))
    state = init_rl_state(cfg)
    before = state.theta_moment.copy()
    state, _, _ = meta_rl_iteration(state, cfg, np.random.default_rng(0))
    for k in before:
        assert np.array_equal(state.theta_moment[k], 0.9 * before[k] + (1 - 0.9) * state.theta[k])


def test_evaluate_policy_protocol():
    cfg = tiny_cfg()
    out = evaluate_policy(TINY_POLICY.init_params(), cfg, np.random.default_rng(0))
    assert [r["grad_steps"] for r in out] == [0, 1, 2, 3]
    assert cfg.eval_steps == (0.1, 0.05, 0.05)
    assert all(np.isfinite(r["mean_return"]) for r in out)
