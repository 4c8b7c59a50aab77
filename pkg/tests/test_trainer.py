import numpy as np
import pytest

from emcomm import autodiff as ad
from emcomm.envs import EnvConfig
from emcomm.envs.traffic_junction import BRAKE
from emcomm.grounding import CaclConfig, cacl_gradient_scope
from emcomm.nets import AgentNet, act
from emcomm.trainer import (
    CACL,
    NO_COMM,
    RolloutSegment,
    TrainConfig,
    Trainer,
    a2c_loss,
    build_agents,
    grounding_loss,
    evaluate,
    nstep_returns,
    received_messages,
    total_loss,
)

from gradcases import check_a2c_value, random_records
from oracles import brute_returns

SMALL_PP = EnvConfig.predator_prey(grid_size=5, n_agents=2, n_preys=1, max_steps=10)


# --- returns -------------------------------------------------------------------

def test_returns_bootstrap_only():
    out = nstep_returns(np.zeros(5), 1.0, 0.99)
    assert abs(out[0] - 0.99**5) < 1e-15


def test_returns_terminal_step():
    out = nstep_returns([1.0], 123.0, 0.99, dones=[True])
    assert out[0] == 1.0


def test_returns_match_brute_force():
    rng = np.random.default_rng(31)
    for _ in range(200):
        T = int(rng.integers(1, 9))
        rewards = rng.standard_normal(T)
        dones = rng.random(T) < 0.25
        boot, gamma = float(rng.standard_normal()), float(rng.uniform(0.5, 1.0))
        out = nstep_returns(rewards, boot, gamma, dones)
        np.testing.assert_allclose(out, brute_returns(rewards, boot, gamma, dones), rtol=0, atol=1e-12)


def test_returns_batched_columns_are_independent():
    rng = np.random.default_rng(32)
    rewards = rng.standard_normal((5, 3))
    dones = rng.random((5, 3)) < 0.3
    boot = rng.standard_normal(3)
    out = nstep_returns(rewards, boot, 0.9, dones)
    for b in range(3):
        np.testing.assert_allclose(out[:, b], nstep_returns(rewards[:, b], boot[b], 0.9, dones[:, b]), atol=1e-15)


# --- actor-critic loss ------------------------------------------------------------

def _segment(rng, T=5, B=4, values=None):
    alive = rng.random((T, B)) < 0.8
    alive[0, 0] = True
    return RolloutSegment(
        logprobs=[ad.Tensor(rng.uniform(-2, 0, B), requires_grad=True) for _ in range(T)],
        entropies=[ad.constant(rng.uniform(0, 1.6, B)) for _ in range(T)],
        values=[ad.constant(v) for v in (values if values is not None else rng.standard_normal((T, B)))],
        rewards=rng.standard_normal((T, B)),
        dones=np.zeros((T, B), dtype=bool),
        alive=alive,
        bootstrap=rng.standard_normal(B),
    )


def test_zero_advantage_leaves_entropy_term():
    rng = np.random.default_rng(33)
    seg = _segment(rng)
    seg.values = [ad.constant(v) for v in seg.returns(0.99)]
    cfg = TrainConfig()
    ent = np.stack([e.data for e in seg.entropies])
    expected = -cfg.entropy_coef * ent[seg.alive].mean()
    loss = a2c_loss(seg, cfg)
    assert abs(float(loss.data) - expected) < 1e-12
    ad.backward(loss)
    for lp in seg.logprobs:
        np.testing.assert_allclose(lp.grad, 0.0, atol=1e-15)


def test_policy_gradient_uses_detached_advantage():
    rng = np.random.default_rng(34)
    seg = _segment(rng)
    cfg = TrainConfig()
    ad.backward(a2c_loss(seg, cfg))
    adv = seg.returns(cfg.gamma) - np.stack([v.data for v in seg.values])
    weight = seg.alive / seg.alive.sum()
    for t, lp in enumerate(seg.logprobs):
        np.testing.assert_allclose(lp.grad, -adv[t] * weight[t], atol=1e-14)


def test_value_gradient_finite_differences():
    rng = np.random.default_rng(35)
    for _ in range(20):
        assert check_a2c_value(rng) < 1e-4


# --- combined loss ----------------------------------------------------------------

def _rollout(agent, rng, T=5, B=4):
    """A differentiable segment produced by ``agent`` on random inputs."""
    h = agent.initial_hidden(B)
    logps, ents, vals = [], [], []
    for _ in range(T):
        out = act(agent, h, rng.standard_normal((B, 6)), rng.random((B, 8)), rng)
        logps.append(out.logprob)
        ents.append(out.entropy)
        vals.append(out.value)
        h = out.hidden
    return RolloutSegment(
        logps, ents, vals, rng.standard_normal((T, B)), np.zeros((T, B), bool), np.ones((T, B), bool),
        rng.standard_normal(B),
    )


def _grads(agent, loss):
    agent.zero_grad()
    ad.backward(loss)
    return {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for n, p in agent.named_parameters().items()}


def test_kappa_zero_and_no_comm_reduce_to_actor_critic():
    rng = np.random.default_rng(36)
    agent = AgentNet(6, 5, 3, rng)
    agent.set_training(False)
    records = random_records(rng, 6, 3, 3)
    seg = _rollout(agent, np.random.default_rng(1))
    cfg = TrainConfig(grounding=CaclConfig(kappa=0.0))
    total, rl, ground = total_loss(agent, seg, records, cfg, np.random.default_rng(0))
    assert ground is not None and total is rl
    total, rl, ground = total_loss(agent, seg, records, TrainConfig(method=NO_COMM), np.random.default_rng(0))
    assert ground is None and float(total.data) == float(a2c_loss(seg, TrainConfig()).data)


def test_total_gradient_is_sum_of_parts():
    rng = np.random.default_rng(37)
    agent = AgentNet(6, 5, 3, rng)
    agent.set_training(False)
    records = random_records(rng, 6, 3, 3)
    cfg = TrainConfig(method=CACL)

    def seg():
        return _rollout(agent, np.random.default_rng(5))

    total, _, _ = total_loss(agent, seg(), records, cfg, np.random.default_rng(9))
    g_total = _grads(agent, total)
    g_rl = _grads(agent, a2c_loss(seg(), cfg))
    g_ground = _grads(agent, cacl_gradient_scope(agent, records, cfg.grounding, np.random.default_rng(9)))
    for name in g_total:
        np.testing.assert_allclose(g_total[name], g_rl[name] + cfg.kappa * g_ground[name], rtol=1e-10, atol=1e-12)


def test_grounding_skipped_when_batch_has_nothing_alive():
    rng = np.random.default_rng(38)
    agent = AgentNet(6, 5, 3, rng, decoder=True)
    records = random_records(rng, 6, 3, 3)
    for rec in records:
        rec.own_alive[:] = False
    assert grounding_loss(agent, records, TrainConfig(method="ae_comm"), rng) is None
    assert grounding_loss(agent, records, TrainConfig(method=CACL), rng) is not None
    for rec in records:
        rec.others_alive[:] = False
    assert grounding_loss(agent, records, TrainConfig(method=CACL), rng) is None


# --- trainer ------------------------------------------------------------------------

def _params(trainer):
    return [p.data.copy() for a in trainer.agents for p in a.parameters()]


def test_zero_learning_rate_changes_nothing():
    tr = Trainer(SMALL_PP, TrainConfig(lr=0.0, workers=2), seed=0)
    before = _params(tr)
    for _ in range(6):
        tr.update()
    for a, b in zip(before, _params(tr)):
        np.testing.assert_array_equal(a, b)


def test_update_changes_parameters():
    tr = Trainer(SMALL_PP, TrainConfig(workers=2), seed=0)
    before = _params(tr)
    tr.update()
    assert any(not np.array_equal(a, b) for a, b in zip(before, _params(tr)))


def test_single_worker_runs_are_bitwise_reproducible():
    def run():
        tr = Trainer(SMALL_PP, TrainConfig(workers=1), seed=3)
        stats = [tr.update() for _ in range(12)]
        return _params(tr), [(s.rl_loss, s.ground_loss, s.grad_norm) for s in stats]

    (pa, sa), (pb, sb) = run(), run()
    assert sa == sb
    for a, b in zip(pa, pb):
        np.testing.assert_array_equal(a, b)


def test_step_accounting_and_buffers():
    tr = Trainer(SMALL_PP, TrainConfig(workers=3, n_steps=5), seed=1)
    for _ in range(4):
        tr.update()
    assert tr.steps == 4 * 3 * 5
    # episodes last at most 10 steps, so every worker finished at least once
    assert tr.episodes >= 3
    assert all(len(b) == min(tr.episodes, b.capacity) for b in tr.buffers)


def test_no_comm_trainer_keeps_no_buffer():
    tr = Trainer(SMALL_PP, TrainConfig(method=NO_COMM, workers=2), seed=1)
    for _ in range(4):
        tr.update()
    assert all(len(b) == 0 for b in tr.buffers)
    assert all(not a.communicates for a in tr.agents)


def test_build_agents_distinct_and_reproducible():
    a, b = build_agents(SMALL_PP, CACL, 4), build_agents(SMALL_PP, CACL, 4)
    np.testing.assert_array_equal(a[0].obs_encoder.weight.data, b[0].obs_encoder.weight.data)
    assert not np.array_equal(a[0].obs_encoder.weight.data, a[1].obs_encoder.weight.data)


def test_received_messages_excludes_self():
    msgs = np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4)
    out = received_messages(msgs, 1)
    np.testing.assert_array_equal(out, np.concatenate([msgs[:, 0], msgs[:, 2]], axis=1))


def test_bad_config():
    with pytest.raises(ValueError):
        TrainConfig(method="bogus")
    with pytest.raises(ValueError):
        TrainConfig(workers=0)


# --- evaluation ---------------------------------------------------------------------

def test_evaluate_default_rows_and_reproducible():
    agents = build_agents(SMALL_PP, CACL, 0)
    a = evaluate(agents, SMALL_PP, seed=5)
    b = evaluate(agents, SMALL_PP, seed=5)
    assert len(a.rows) == 12 and a.metric == "episode_reward"
    assert a.rows == b.rows
    np.testing.assert_array_equal(a.messages, b.messages)
    assert abs(a.mean - np.mean([r["reward"] for r in a.rows])) < 1e-12


def test_evaluate_episode_results_independent_of_batch():
    agents = build_agents(SMALL_PP, CACL, 0)
    many = evaluate(agents, SMALL_PP, 12, seed=2)
    few = evaluate(agents, SMALL_PP, 5, seed=2)
    assert many.rows[:5] == few.rows


def test_evaluate_leaves_agents_in_training_mode():
    agents = build_agents(SMALL_PP, CACL, 0)
    evaluate(agents, SMALL_PP, 2)
    assert all(a.policy_head.l2.update_sigma for a in agents)


def test_always_brake_succeeds_in_traffic_junction():
    cfg = EnvConfig.traffic_junction()
    agents = build_agents(cfg, NO_COMM, 0)
    summary = evaluate(agents, cfg, 12, policy=lambda i, p: np.full(len(p), BRAKE))
    assert summary.metric == "success_rate"
    assert summary.mean == 1.0 and summary.stderr == 0.0


def test_evaluate_rejects_zero_episodes():
    with pytest.raises(ValueError):
        evaluate(build_agents(SMALL_PP, CACL, 0), SMALL_PP, 0)
