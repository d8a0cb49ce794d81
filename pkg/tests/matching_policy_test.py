# Copyright 2024 Google LLC
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Tests for utility functions in matching_policy.py."""

import math
from absl.testing import absltest
from absl.testing import parameterized
from gridmatch import matching_market
from gridmatch import matching_policy
from gridmatch import neural_network
from gridmatch import policy_learning
from gridmatch import scenario_generation
from gridmatch.matching_market import ResState
from gridmatch.matching_market import Supply
from gridmatch.matching_policy import DiscreteMatch
import numpy as np


def _ev(customer_id, arrival=1, deadline=3, demand=2.0, crit_control=0.5):
  return matching_market.make_flexible_customer(
      customer_id=customer_id,
      arrival=arrival,
      demand=demand,
      deadline=deadline,
      crit_control=crit_control,
      price=0.12,
  )


def _state(customers, r_p):
  state = matching_market.new_market(price=0.12, max_customers=4)
  return matching_market.step_arrivals(
      state, customers, ResState(r_p=r_p, r_s=max(r_p, 1.0))
  )


def _waiting_episode():
  return matching_market.IhrEpisode(
      arrivals=((_ev(1, deadline=2),), ()),
      res=(ResState(0.0, 2.0), ResState(1.0, 2.0)),
      base_q=(0.0, 0.0),
      price=0.12,
      max_customers=1,
  )


class SampleDiscreteTest(absltest.TestCase):

  def test_log_prob_matches_bits(self):
    probs = matching_policy.MatchProbabilities({2: 0.8, 1: 0.3})
    sample = matching_policy.sample_discrete(probs, np.random.default_rng(4))
    self.assertEqual(set(sample.bits), {1, 2})
    expected = sum(
        math.log(p) if sample.bits[cid] else math.log(1.0 - p)
        for cid, p in probs.probs.items()
    )
    self.assertAlmostEqual(sample.log_prob, expected)

  def test_frequencies_follow_probabilities(self):
    probs = matching_policy.MatchProbabilities({1: 0.25})
    rng = np.random.default_rng(0)
    hits = sum(
        matching_policy.sample_discrete(probs, rng).bits[1]
        for _ in range(4000)
    )
    self.assertAlmostEqual(hits / 4000, 0.25, delta=0.03)

  def test_empty_market(self):
    sample = matching_policy.sample_discrete(
        matching_policy.MatchProbabilities({}), np.random.default_rng(0)
    )
    self.assertEmpty(sample.bits)
    self.assertEqual(sample.log_prob, 0.0)

  def test_raises_error_degenerate_probability(self):
    with self.assertRaisesRegex(ValueError, "outside \\(0, 1\\)"):
      matching_policy.MatchProbabilities({1: 1.0})


class AllocationTest(parameterized.TestCase):

  def test_priority_order(self):
    state = _state(
        (_ev(3, deadline=4), _ev(1, deadline=3), _ev(2, deadline=3)), 0.0
    )
    self.assertEqual(
        [c.customer_id for c in matching_policy.priority_order(state)],
        [1, 2, 3],
    )

  def test_leftover_res_goes_to_waiting_customers(self):
    state = _state((_ev(1), _ev(2)), 3.0)
    match = matching_policy.allocate_res_first(
        DiscreteMatch({1: 1, 2: 0}), state, 1.0
    )
    self.assertEqual(
        dict(match.entries), {(Supply.RES, 1): 2.0, (Supply.RES, 2): 1.0}
    )

  def test_matched_customer_tops_up_from_grid(self):
    state = _state((_ev(1), _ev(2)), 1.0)
    match = matching_policy.allocate_res_first(
        DiscreteMatch({1: 0, 2: 1}), state, 1.0
    )
    self.assertEqual(
        dict(match.entries), {(Supply.RES, 2): 1.0, (Supply.GRID, 2): 1.0}
    )

  def test_raises_error_bits_for_wrong_customers(self):
    state = _state((_ev(1),), 1.0)
    with self.assertRaisesRegex(ValueError, "do not match"):
      matching_policy.allocate_res_first(DiscreteMatch({2: 1}), state, 1.0)

  def test_deadline_override_fills_partial_res(self):
    inflexible = matching_market.make_inflexible_customer(
        customer_id=3, arrival=1, demand=4.0
    )
    state = _state((_ev(1), inflexible), 3.0)
    match = matching_policy.compose_match(
        DiscreteMatch({1: 1, 3: 0}), state, 1.0
    )
    self.assertEqual(
        dict(match.entries),
        {
            (Supply.RES, 1): 2.0,
            (Supply.RES, 3): 1.0,
            (Supply.GRID, 3): 3.0,
        },
    )
    _, welfare = matching_market.apply_match(state, match, 1.0)
    self.assertAlmostEqual(welfare, 0.36)

  def test_deadline_override_leaves_waiting_customers_alone(self):
    inflexible = matching_market.make_inflexible_customer(
        customer_id=3, arrival=1, demand=4.0
    )
    state = _state((_ev(1), inflexible), 0.0)
    match = matching_policy.deadline_override(
        matching_market.MatchAmounts(), state, 1.0
    )
    self.assertEqual(dict(match.entries), {(Supply.GRID, 3): 4.0})

  def test_match_on_arrival_serves_everyone(self):
    state = _state((_ev(1), _ev(2)), 1.0)
    match = matching_policy.match_on_arrival(state, 1.0)
    self.assertEqual(
        dict(match.entries),
        {(Supply.RES, 1): 1.0, (Supply.GRID, 1): 1.0, (Supply.GRID, 2): 2.0},
    )
    new_state, _ = matching_market.apply_match(state, match, 1.0)
    self.assertEmpty(new_state.active)


class RunEpisodeTest(absltest.TestCase):

  def test_match_on_arrival_welfare(self):
    outcome = matching_policy.run_episode(
        matching_policy.MatchOnArrivalPolicy(),
        _waiting_episode(),
        delta_t=1.0,
        rng=np.random.default_rng(0),
    )
    # No RES at arrival, so the whole demand is bought at the tariff.
    self.assertEqual(outcome.welfare, (0.0, 0.0))
    self.assertEqual(
        dict(outcome.schedule[1].entries), {(Supply.GRID, 1): 2.0}
    )
    self.assertLen(outcome.records, 1)

  def test_welfare_is_reproducible_from_schedule(self):
    episode = matching_market.IhrEpisode(
        arrivals=((_ev(1), _ev(2)), (_ev(3, arrival=2),), ()),
        res=(ResState(1.0, 2.0), ResState(2.0, 2.0), ResState(0.5, 2.0)),
        base_q=(0.0, 0.0, 0.0),
        price=0.12,
        max_customers=2,
    )
    outcome = matching_policy.run_episode(
        matching_policy.MatchOnArrivalPolicy(),
        episode,
        delta_t=1.0,
        rng=np.random.default_rng(0),
    )
    self.assertAlmostEqual(
        matching_market.evaluate_schedule_welfare(
            episode.customers, outcome.schedule, price=0.12
        ),
        outcome.total_welfare,
    )
    self.assertAlmostEqual(outcome.total_welfare, 0.12 * 3.0)


class OfflineOracleTest(absltest.TestCase):

  def test_waits_for_res(self):
    welfare, schedule = matching_policy.offline_oracle(_waiting_episode(), 1.0)
    # One kWh from the grid on arrival, one kWh of RES at the deadline.
    self.assertAlmostEqual(welfare, 0.06, places=6)
    self.assertAlmostEqual(schedule[1].amount(Supply.GRID, 1), 1.0, places=6)
    self.assertAlmostEqual(schedule[2].amount(Supply.RES, 1), 1.0, places=6)

  def test_dominates_match_on_arrival(self):
    rng = np.random.default_rng(11)
    customers = []
    for customer_id in range(1, 7):
      arrival = int(rng.integers(1, 3))
      customers.append(
          _ev(
              customer_id,
              arrival=arrival,
              deadline=int(rng.integers(arrival + 1, 5)),
              demand=float(rng.uniform(0.5, 3.0)),
              crit_control=float(rng.uniform()),
          )
      )
    episode = matching_market.IhrEpisode(
        arrivals=tuple(
            tuple(c for c in customers if c.arrival == t) for t in range(1, 5)
        ),
        res=tuple(ResState(float(r), 3.0) for r in (0.5, 0.0, 3.0, 2.0)),
        base_q=(0.0,) * 4,
        price=0.12,
        max_customers=6,
    )
    oracle, _ = matching_policy.offline_oracle(episode, 1.0)
    baseline = matching_policy.run_episode(
        matching_policy.MatchOnArrivalPolicy(),
        episode,
        delta_t=1.0,
        rng=np.random.default_rng(0),
    )
    self.assertGreaterEqual(oracle, baseline.total_welfare - 1e-6)

  def test_empty_episode(self):
    episode = matching_market.IhrEpisode(
        arrivals=((), ()), res=(ResState(), ResState()), base_q=(0.0, 0.0)
    )
    welfare, schedule = matching_policy.offline_oracle(episode, 1.0)
    self.assertEqual(welfare, 0.0)
    self.assertEqual(sorted(schedule), [1, 2])


class DeadlineSafetyTest(parameterized.TestCase):

  @parameterized.named_parameters(
      ("scenario1", "desk_scenario1"), ("scenario2", "desk_scenario2")
  )
  def test_every_customer_is_served_by_its_deadline(self, preset):
    scenario = scenario_generation.SCENARIO_PRESETS[preset]
    config = policy_learning.TrainConfig(
        max_customers=scenario.arrival_cap(),
        horizon=scenario.horizon,
        delta_t=scenario.delta_t,
        price=scenario.price,
        demand_max=scenario.charge_kwh,
        res_max=max(scenario.inverter_kva),
        tcn=neural_network.TcnConfig(n_blocks=1, n_filters=2, kernel_size=2),
    )
    actor, _ = policy_learning.build_networks(config)
    policies = (
        matching_policy.MatchOnArrivalPolicy(),
        policy_learning.LearnedMatchingPolicy(
            actor, scales=config.scales, stochastic=True
        ),
    )
    for seed in range(167):
      data = scenario_generation.gen_scenario(
          scenario, np.random.default_rng(seed)
      )
      for ihr_id in data.ihr_ids:
        episode = data.for_ihr(ihr_id)
        for policy in policies:
          outcome = matching_policy.run_episode(
              policy,
              episode,
              delta_t=data.delta_t,
              rng=np.random.default_rng(seed),
          )
          for customer in episode.customers:
            served = sum(
                outcome.schedule[t].total_for(customer.customer_id)
                for t in range(customer.arrival, customer.deadline + 1)
            )
            self.assertGreaterEqual(served, customer.demand - 1e-9)


if __name__ == "__main__":
  absltest.main()
