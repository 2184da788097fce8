import numpy as np
import pytest

from navmarl.network import Edge, Junction, RoadNetwork
from navmarl.rollout import PolicyController, run_episode
from navmarl.policy import PolicyNet
from navmarl.sim import (
    DISTANCE_QUANTUM, SENTINEL, ActionMaskError, ODPair, RoadNetEnv, Scenario, ScenarioError,
    load_scenario, quantize_distance, save_scenario, scenario_from_dict,
)


def random_actions(env, awaiting, rng):
    return {i: int(rng.choice(np.flatnonzero(o.mask))) for i, o in awaiting.items()}


def play(env, seed, action_seed):
    rng = np.random.default_rng(action_seed)
    awaiting = env.reset(seed)
    outcomes = []
    while not env.done:
        out = env.step(random_actions(env, awaiting, rng))
        outcomes.append(out)
        awaiting = out.awaiting
    return outcomes


def test_reset_is_deterministic(grid, grid_sc):
    a = RoadNetEnv(grid, grid_sc).reset(3)
    b = RoadNetEnv(grid, grid_sc).reset(3)
    assert a.keys() == b.keys()
    for i in a:
        np.testing.assert_array_equal(a[i].vector, b[i].vector)


def test_same_seed_and_actions_give_identical_streams(grid, grid_sc):
    a = play(RoadNetEnv(grid, grid_sc), 5, 9)
    b = play(RoadNetEnv(grid, grid_sc), 5, 9)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.time == y.time
        assert x.agents.keys() == y.agents.keys()
        for i in x.agents:
            assert x.agents[i].reward == y.agents[i].reward
            assert x.agents[i].done == y.agents[i].done
            assert x.agents[i].observation.key() == y.agents[i].observation.key()


def test_single_outgoing_edge_mask(pair, pair_sc):
    obs = RoadNetEnv(pair, pair_sc).reset(0)[0]
    assert obs.mask.sum() == 1 and obs.mask[0]


def test_empty_traffic_scores_are_one(grid):
    sc = Scenario((ODPair(0, 24), ODPair(4, 20)), background_vehicle_count=0, t_max=400)
    env = RoadNetEnv(grid, sc)
    for obs in env.reset(0).values():
        scores = obs.vector[2::2][obs.mask]
        assert np.all(scores == 1.0)


def test_observation_layout_and_sentinels(grid, grid_sc):
    env = RoadNetEnv(grid, grid_sc)
    rng = np.random.default_rng(0)
    awaiting = env.reset(1)
    seen = 0
    while not env.done:
        for i, obs in awaiting.items():
            v = obs.vector
            assert v.shape == (2 * grid.m_out + 2,)
            assert v[0] == env.agent_junction(i)
            assert v[1] == grid_sc.od_pairs[i].destination
            for slot in range(grid.m_out):
                score, end = v[2 + 2 * slot], v[3 + 2 * slot]
                if obs.mask[slot]:
                    assert 0.0 <= score <= 1.0
                    assert end == grid.out_edges[int(v[0])][slot].target
                else:
                    assert score == SENTINEL and end == SENTINEL
            seen += 1
        awaiting = env.step(random_actions(env, awaiting, rng)).awaiting
    assert seen > 0


def test_congestion_lowers_scores(grid):
    sc = Scenario((ODPair(0, 4),), background_vehicle_count=0, t_max=100)
    env = RoadNetEnv(grid, sc)
    env.reset(0)
    e = grid.out_edges[0][0]
    env._occupancy[e.id] = 2
    assert env.effective_speed(e) == e.max_speed / 3
    assert env.edge_score(e) == pytest.approx(1 / 3)


def test_reward_example_values():
    # 5 s on the edge, 3 m closer to the destination
    net = RoadNetwork([Junction(0, 0, 0), Junction(1, 3, 0), Junction(2, 10, 0)],
                      [Edge(0, 0, 1, 5, 1), Edge(1, 1, 2, 100, 1), Edge(2, 2, 1, 1, 1)])
    env = RoadNetEnv(net, Scenario((ODPair(0, 2),), t_max=1000))
    env.reset(0)
    out = env.step({0: 0})
    step = out.agents[0]
    assert out.time == 5
    assert step.time_penalty == -5.0
    assert step.distance_shaping == 3.0
    assert step.reward == -2.0


def test_terminal_bonus_is_tenth_of_horizon():
    net = RoadNetwork([Junction(0, 0, 0), Junction(1, 10, 0)], [Edge(0, 0, 1, 10, 1)])
    env = RoadNetEnv(net, Scenario((ODPair(0, 1),), t_max=2400))
    env.reset(0)
    step = env.step({0: 0}).agents[0]
    assert step.arrived and step.done
    assert step.terminal_bonus == 240.0
    assert step.reward == -10.0 + 10.0 + 240.0


def test_zero_length_edge_costs_only_time():
    net = RoadNetwork([Junction(0, 0, 0), Junction(1, 0, 0), Junction(2, 50, 0)],
                      [Edge(0, 0, 1, 0, 1), Edge(1, 1, 2, 50, 1), Edge(2, 2, 1, 50, 1)])
    env = RoadNetEnv(net, Scenario((ODPair(0, 2),), t_max=1000))
    env.reset(0)
    step = env.step({0: 0}).agents[0]
    assert step.distance_shaping == 0.0
    assert step.reward == step.time_penalty == -0.0


def test_masked_action_is_an_error(pair, pair_sc):
    env = RoadNetEnv(pair, pair_sc)
    env.reset(0)
    with pytest.raises(ActionMaskError):
        env.step({0: 1})
    with pytest.raises(ActionMaskError):
        env.step({})


def test_done_exactly_once_and_truncation(grid):
    sc = Scenario((ODPair(0, 24), ODPair(24, 0)), background_vehicle_count=5, t_max=60)
    env = RoadNetEnv(grid, sc)
    rng = np.random.default_rng(2)
    awaiting = env.reset(0)
    done_count = {0: 0, 1: 0}
    while not env.done:
        out = env.step(random_actions(env, awaiting, rng))
        for i, s in out.agents.items():
            assert np.isfinite(s.reward)
            done_count[i] += s.done
        awaiting = out.awaiting
    assert done_count == {0: 1, 1: 1}
    assert env.time <= 60
    with pytest.raises(RuntimeError):
        env.step({})


def test_departure_delay_counts_from_departure(grid):
    sc = Scenario((ODPair(0, 1, departure=7),), t_max=200)
    env = RoadNetEnv(grid, sc)
    awaiting = env.reset(0)
    assert env.time == 7 and 0 in awaiting
    rec = run_episode(env, {0: PolicyController(PolicyNet(grid.m_out, 25, 8), np.random.default_rng(0))}, 0)
    tr = rec.trajectories[0]
    assert tr.arrived
    assert tr.total_reward == -float(tr.travel_time) + 100.0 + 20.0
    assert sum(tr.rewards) == -(env.time - 7) + 100.0 + 20.0


def test_scenario_validation(grid):
    with pytest.raises(ScenarioError):
        Scenario((ODPair(3, 3),))
    with pytest.raises(ScenarioError):
        Scenario((ODPair(0, 1),), t_max=0)
    with pytest.raises(ScenarioError):
        Scenario((ODPair(0, 1),), omega_d=-1)
    with pytest.raises(ScenarioError):
        Scenario((ODPair(0, 99),)).validate_for(grid)
    one_way = RoadNetwork([Junction(0, 0, 0), Junction(1, 1, 0), Junction(2, 2, 0)],
                          [Edge(0, 0, 1, 1, 1), Edge(1, 0, 2, 1, 1)])
    with pytest.raises(ScenarioError, match="unreachable"):
        Scenario((ODPair(1, 0),)).validate_for(one_way)
    # junction 2 is a dead end nobody is heading to
    with pytest.raises(ScenarioError, match="dead-end"):
        Scenario((ODPair(0, 1),)).validate_for(one_way)
    Scenario((ODPair(0, 1), ODPair(0, 2))).validate_for(one_way)


def test_scenario_file_round_trip(tmp_path, grid_sc):
    p = tmp_path / "s.json"
    save_scenario(grid_sc, p)
    assert load_scenario(p) == grid_sc
    with pytest.raises(ScenarioError):
        scenario_from_dict({"format_version": 2, "agents": []})


def test_distance_quantization():
    d = quantize_distance(565.685424949238)
    assert d / DISTANCE_QUANTUM == int(d / DISTANCE_QUANTUM)
    assert abs(d - 565.685424949238) <= DISTANCE_QUANTUM / 2


def test_episode_reward_decomposition(grid, grid_sc):
    env = RoadNetEnv(grid, grid_sc)
    net = PolicyNet(grid.m_out, grid.n_junctions, 16, np.random.default_rng(0))
    for seed in range(5):
        rec = run_episode(env, {i: PolicyController(net, np.random.default_rng(seed)) for i in range(4)}, seed)
        for i, tr in rec.trajectories.items():
            if not tr.arrived:
                continue
            od = grid_sc.od_pairs[i]
            d0 = quantize_distance(grid.euclidean(od.origin, od.destination))
            expected = -float(tr.travel_time) + grid_sc.omega_d * d0 + grid_sc.t_max / 10
            assert tr.total_reward == expected
