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

"""Tests for utility functions in policy_learning.py."""

import math
import os
import tempfile
from absl.testing import absltest
from absl.testing import parameterized
from gridmatch import matching_market
from gridmatch import matching_policy
from gridmatch import neural_network
from gridmatch import policy_learning
from gridmatch import scenario_generation
from gridmatch.matching_market import ResState
from gridmatch.matching_policy import DiscreteMatch
from gridmatch.neural_network import TcnConfig
from gridmatch.policy_learning import TrainConfig
import numpy as np
import pandas as pd
import torch

_TINY_TCN = TcnConfig(n_blocks=1, n_filters=2, kernel_size=2, dropout=0.0)
_SCALES = neural_network.FeatureScales(
    horizon=2, demand_max=1.0, price=0.12, rate_max=0.12, res_max=1.0
)


def _waiting_episode(crit_control=0.5):
  """One customer who earns 0.06 $ by waiting for one kWh of RES."""
  customer = matching_market.make_flexible_customer(
      customer_id=1,
      arrival=1,
      demand=1.0,
      deadline=2,
      crit_control=crit_control,
      price=0.12,
  )
  return matching_market.IhrEpisode(
      arrivals=((customer,), ()),
      res=(ResState(0.0, 1.0), ResState(1.0, 1.0)),
      base_q=(0.0, 0.0),
      price=0.12,
      max_customers=1,
  )


def _random_episode(rng):
  return _waiting_episode(crit_control=float(rng.uniform(0.2, 1.0)))


def _actor(config=_TINY_TCN, seed=3):
  return neural_network.TemporalConvNet(
      n_inputs=neural_network.frame_width(1),
      n_outputs=1,
      config=config,
      rng=np.random.default_rng(seed),
  )


def _critic():
  return neural_network.CriticNet(
      n_inputs=neural_network.frame_width(1) + 1,
      rng=np.random.default_rng(4),
  )


def _forced(plan):
  """Returns a chooser replaying planned bits in slot order."""
  planned = list(plan)

  def choose(state, probs):
    del state
    bits = {}
    log_prob = 0.0
    for customer_id in sorted(probs.probs):
      bit = planned.pop(0)
      p = probs.probs[customer_id]
      bits[customer_id] = bit
      log_prob += math.log(p if bit else 1.0 - p)
    return DiscreteMatch(bits=bits, log_prob=log_prob)

  return choose


def _trace(welfare, horizon_slots=1):
  horizon = len(welfare)
  width = neural_network.frame_width(horizon_slots)
  zeros = torch.zeros((horizon, horizon_slots), dtype=torch.float64)
  return policy_learning.EpisodeTrace(
      frames=torch.zeros((horizon, width), dtype=torch.float64),
      bits=zeros,
      slot_mask=zeros.clone(),
      probs=zeros.clone(),
      log_probs=(0.0,) * horizon,
      welfare=tuple(welfare),
      matches={},
      masks=None,
      params_version=0,
      customers=(),
      price=0.12,
  )


def _constant_critic(value):
  critic = _critic()
  with torch.no_grad():
    for param in critic.parameters():
      param.zero_()
    critic.output.bias.fill_(value)
  return critic


def _sample(actor, plan, train_mode=False, rng=None):
  return policy_learning.sample_episode(
      actor,
      _waiting_episode(),
      scales=_SCALES,
      delta_t=1.0,
      rng=rng or np.random.default_rng(0),
      train_mode=train_mode,
      bit_chooser=None if plan is None else _forced(plan),
  )


class EpisodeTraceTest(absltest.TestCase):

  def test_returns_to_go(self):
    np.testing.assert_allclose(
        policy_learning.returns_to_go(_trace([1.0, 2.0, 3.0])), [6.0, 5.0, 3.0]
    )

  def test_raises_error_non_finite_welfare(self):
    with self.assertRaises(policy_learning.TrainingDivergedError):
      _trace([1.0, math.nan])

  def test_forced_rollout_welfare(self):
    wait = _sample(_actor(), [0, 1])
    serve = _sample(_actor(), [1])
    self.assertAlmostEqual(wait.total_welfare, 0.06)
    self.assertAlmostEqual(serve.total_welfare, 0.0)
    self.assertEqual(wait.slot_mask.tolist(), [[1.0], [1.0]])
    self.assertEqual(serve.slot_mask.tolist(), [[1.0], [0.0]])
    self.assertEqual(tuple(wait.frames.shape), (2, 7))

  def test_sampling_is_reproducible(self):
    first = _sample(_actor(), None, rng=np.random.default_rng(12))
    second = _sample(_actor(), None, rng=np.random.default_rng(12))
    torch.testing.assert_close(first.bits, second.bits, rtol=0.0, atol=0.0)
    self.assertEqual(first.welfare, second.welfare)

  def test_empty_episode(self):
    episode = matching_market.IhrEpisode(
        arrivals=((), (), ()),
        res=(ResState(),) * 3,
        base_q=(0.0,) * 3,
    )
    actor = _actor()
    trace = policy_learning.sample_episode(
        actor,
        episode,
        scales=_SCALES,
        delta_t=1.0,
        rng=np.random.default_rng(0),
    )
    self.assertEqual(trace.welfare, (0.0, 0.0, 0.0))
    self.assertEqual(float(trace.slot_mask.sum()), 0.0)
    grads = policy_learning.reinforce_gradient(trace, actor)
    self.assertEqual(neural_network.flat_norm(grads), 0.0)


class AcKWeightsTest(parameterized.TestCase):

  @parameterized.named_parameters(
      ("one_step", 1, [2.0, 3.0, 3.0]),
      ("two_steps", 2, [4.0, 5.0, 3.0]),
      ("full_horizon", 3, [6.0, 5.0, 3.0]),
  )
  def test_bootstrap_with_constant_critic(self, k, expected):
    weights = policy_learning.ac_k_weights(
        _trace([1.0, 2.0, 3.0]), _constant_critic(1.0), k
    )
    np.testing.assert_allclose(weights, expected)

  def test_raises_error_lookahead_out_of_range(self):
    with self.assertRaisesRegex(ValueError, "lookahead"):
      policy_learning.ac_k_weights(_trace([1.0, 2.0]), _critic(), 3)


class GradientEstimatorTest(absltest.TestCase):

  def test_full_lookahead_equals_reinforce(self):
    actor = _actor()
    trace = _sample(actor, [0, 1])
    reinforce = policy_learning.reinforce_gradient(trace, actor)
    ac_k = policy_learning.ac_k_gradient(trace, actor, _critic(), 2)
    for left, right in zip(reinforce, ac_k):
      torch.testing.assert_close(left, right)

  def test_zero_welfare_gives_zero_gradient(self):
    actor = _actor()
    trace = _sample(actor, [1])
    grads = policy_learning.reinforce_gradient(trace, actor)
    self.assertEqual(neural_network.flat_norm(grads), 0.0)

  def test_reinforce_matches_finite_differences(self):
    actor = _actor(
        config=TcnConfig(n_blocks=2, n_filters=2, kernel_size=2, dropout=0.3)
    )
    trace = _sample(actor, None, train_mode=True, rng=np.random.default_rng(5))
    self.assertIsNotNone(trace.masks)
    weights = torch.from_numpy(policy_learning.returns_to_go(trace))
    analytic = policy_learning.reinforce_gradient(trace, actor)
    error = neural_network.gradient_check(
        lambda: policy_learning.log_prob_surrogate(actor, trace, weights),
        actor,
        analytic,
    )
    self.assertLess(error, 1e-4)

  def test_reinforce_is_unbiased_by_enumeration(self):
    actor = _actor()
    frames = _sample(actor, [1]).frames
    # J = (1 - p_1) * 0.06, since only waiting at t=1 earns RES welfare.
    p_first = torch.sigmoid(actor(frames[:1])[0, 0])
    exact = torch.autograd.grad(0.06 * (1.0 - p_first), actor.parameters())
    expected = [torch.zeros_like(g) for g in exact]
    total_probability = 0.0
    for plan in ([1], [0, 0], [0, 1]):
      trace = _sample(actor, plan)
      probability = math.exp(sum(trace.log_probs))
      total_probability += probability
      grads = policy_learning.reinforce_gradient(trace, actor)
      for accumulated, grad in zip(expected, grads):
        accumulated += probability * grad
    self.assertAlmostEqual(total_probability, 1.0)
    for left, right in zip(expected, exact):
      torch.testing.assert_close(left, right, rtol=1e-9, atol=1e-12)
    self.assertGreater(neural_network.flat_norm(exact), 0.0)

  def test_reinforce_sample_mean_approaches_exact_gradient(self):
    actor = _actor()
    frames = _sample(actor, [1]).frames
    p_first = torch.sigmoid(actor(frames[:1])[0, 0])
    exact = torch.autograd.grad(0.06 * (1.0 - p_first), actor.parameters())
    direction = [g / neural_network.flat_norm(exact) for g in exact]
    rng = np.random.default_rng(2024)
    projections = []
    for _ in range(2000):
      trace = _sample(actor, None, rng=rng)
      grads = policy_learning.reinforce_gradient(trace, actor)
      projections.append(
          float(sum((g * d).sum() for g, d in zip(grads, direction)))
      )
    mean = np.mean(projections)
    standard_error = np.std(projections) / math.sqrt(len(projections))
    self.assertLess(
        abs(mean - neural_network.flat_norm(exact)), 4.0 * standard_error
    )

  def test_raises_error_stale_trace(self):
    actor = _actor()
    trace = _sample(actor, [0, 1])
    optimizer = neural_network.AdamOptimizer(actor)
    optimizer.step([torch.zeros_like(p) for p in actor.parameters()])
    with self.assertRaises(policy_learning.TraceMismatchError):
      policy_learning.reinforce_gradient(trace, actor)

  def test_critic_gradient_vanishes_at_targets(self):
    trace = _trace([0.5, 0.5])
    critic = _constant_critic(0.0)
    grads = policy_learning.critic_gradient(trace, critic)
    # Zero weights leave only the output bias, pulled toward G = [1, 0.5].
    self.assertAlmostEqual(float(grads[-1][0]), -1.5)
    self.assertAlmostEqual(
        float(policy_learning.critic_loss(critic, trace)), 0.625
    )


def _config(**overrides):
  settings = dict(
      epochs=4,
      batch_size=2,
      estimator="reinforce",
      lookahead=1,
      seed=7,
      max_customers=1,
      horizon=2,
      delta_t=1.0,
      demand_max=1.0,
      res_max=1.0,
      tcn=TcnConfig(n_blocks=1, n_filters=2, kernel_size=2, dropout=0.1),
      running_window=2,
  )
  settings.update(overrides)
  return TrainConfig(**settings)


class TrainTest(parameterized.TestCase):

  def test_zero_epochs_gives_empty_curve(self):
    result = policy_learning.train(_config(epochs=0), _random_episode)
    self.assertEqual(result.curve, ())
    self.assertEqual(result.actor.version, 0)

  @parameterized.named_parameters(("reinforce", "reinforce"), ("ac_k", "ac_k"))
  def test_curve_and_updates(self, estimator):
    result = policy_learning.train(
        _config(estimator=estimator), _random_episode
    )
    self.assertLen(result.curve, 4)
    self.assertEqual([p.epoch for p in result.curve], [0, 1, 2, 3])
    self.assertTrue(math.isnan(result.curve[0].grad_norm))
    self.assertTrue(math.isfinite(result.curve[1].grad_norm))
    self.assertEqual(result.actor.version, 2)
    self.assertEqual(
        result.critic.version, 2 if estimator == "ac_k" else 0
    )
    for point in result.curve:
      self.assertEqual(point.ma_welfare, 0.0)
      self.assertEqual(point.wall_time, 0.0)
    self.assertAlmostEqual(
        result.curve[1].running_average,
        (result.curve[0].welfare + result.curve[1].welfare) / 2.0,
    )

  def test_training_is_deterministic(self):
    first = policy_learning.train(_config(), _random_episode)
    second = policy_learning.train(_config(), _random_episode)
    self.assertEqual(
        [p.welfare for p in first.curve], [p.welfare for p in second.curve]
    )
    for left, right in zip(
        first.actor.parameters(), second.actor.parameters()
    ):
      torch.testing.assert_close(left, right, rtol=0.0, atol=0.0)

  def test_resume_matches_uninterrupted_run(self):
    uninterrupted = policy_learning.train(_config(), _random_episode)
    with tempfile.TemporaryDirectory() as temporary_directory:
      path = os.path.join(temporary_directory, "ihr_1.pt")
      policy_learning.train(
          _config(epochs=2), _random_episode, checkpoint_path=path
      )
      self.assertEqual(neural_network.load_checkpoint(path)["epoch"], 2)
      resumed = policy_learning.train(
          _config(), _random_episode, initial_checkpoint=path
      )
    self.assertEqual([p.epoch for p in resumed.curve], [2, 3])
    for left, right in zip(
        uninterrupted.actor.parameters(), resumed.actor.parameters()
    ):
      torch.testing.assert_close(left, right)

  def test_write_training_log(self):
    result = policy_learning.train(_config(), _random_episode)
    with tempfile.TemporaryDirectory() as temporary_directory:
      path = os.path.join(temporary_directory, "training.csv")
      policy_learning.write_training_log(path, result.curve)
      frame = pd.read_csv(path)
    self.assertEqual(
        list(frame.columns),
        [
            "epoch",
            "welfare",
            "running_average",
            "ma_welfare",
            "grad_norm",
            "wall_time",
        ],
    )
    self.assertLen(frame, 4)

  def test_raises_error_invalid_config(self):
    with self.assertRaisesRegex(ValueError, "lookahead"):
      _config(lookahead=3)
    with self.assertRaisesRegex(ValueError, "Unknown estimator"):
      _config(estimator="ppo")


class LearnedMatchingPolicyTest(absltest.TestCase):

  def _confident_actor(self, bias):
    actor = _actor()
    with torch.no_grad():
      actor.head.weight.zero_()
      actor.head.bias.fill_(bias)
    return actor

  def test_confident_policy_matches_on_arrival(self):
    policy = policy_learning.LearnedMatchingPolicy(
        self._confident_actor(20.0), scales=_SCALES
    )
    outcome = matching_policy.run_episode(
        policy, _waiting_episode(), delta_t=1.0, rng=np.random.default_rng(0)
    )
    self.assertEqual(outcome.welfare, (0.0, 0.0))
    self.assertEqual(policy.name, "LA")

  def test_reluctant_policy_waits_for_res(self):
    policy = policy_learning.LearnedMatchingPolicy(
        self._confident_actor(-20.0), scales=_SCALES
    )
    outcome = matching_policy.run_episode(
        policy, _waiting_episode(), delta_t=1.0, rng=np.random.default_rng(0)
    )
    self.assertAlmostEqual(outcome.total_welfare, 0.06)


def _split_res_episode(res_at_arrival):
  """One customer who sees part of its demand in RES on arrival.

  Matching on arrival earns 0.12 $/kWh of the arrival RES only. Waiting
  also earns 0.06 $/kWh for the rest, served from RES at the deadline.
  """
  customer = matching_market.make_flexible_customer(
      customer_id=1,
      arrival=1,
      demand=1.0,
      deadline=2,
      crit_control=0.5,
      price=0.12,
  )
  return matching_market.IhrEpisode(
      arrivals=((customer,), ()),
      res=(ResState(res_at_arrival, 1.0), ResState(1.0, 1.0)),
      base_q=(0.0, 0.0),
      price=0.12,
      max_customers=1,
  )


class LearnedPolicyOrderingTest(parameterized.TestCase):

  @parameterized.named_parameters(
      ("scarce_res_at_arrival", 0.1, 2.0),
      ("partial_res_at_arrival", 0.4, 1.05),
  )
  def test_trained_policy_beats_matching_on_arrival(self, r1, ratio):
    episode = _split_res_episode(r1)
    config = _config(
        epochs=1000,
        batch_size=10,
        actor_learning_rate=0.1,
        tcn=_TINY_TCN,
        running_window=50,
    )
    result = policy_learning.train(config, lambda _: episode)
    learned = matching_policy.run_episode(
        policy_learning.LearnedMatchingPolicy(
            result.actor, scales=config.scales
        ),
        episode,
        delta_t=1.0,
        rng=np.random.default_rng(0),
    )
    baseline = matching_policy.run_episode(
        matching_policy.MatchOnArrivalPolicy(),
        episode,
        delta_t=1.0,
        rng=np.random.default_rng(0),
    )
    oracle, _ = matching_policy.offline_oracle(episode, 1.0)
    self.assertAlmostEqual(baseline.total_welfare, 0.12 * r1)
    self.assertAlmostEqual(oracle, 0.12 * r1 + 0.06 * (1.0 - r1), places=6)
    self.assertGreaterEqual(
        learned.total_welfare, ratio * baseline.total_welfare
    )
    self.assertLessEqual(learned.total_welfare, oracle + 1e-6)
    welfare = [point.welfare for point in result.curve]
    self.assertGreater(np.mean(welfare[-50:]), np.mean(welfare[:50]))

  @parameterized.named_parameters(
      ("scenario1", "desk_scenario1"), ("scenario2", "desk_scenario2")
  )
  def test_learned_policy_never_beats_hindsight(self, preset):
    scenario = scenario_generation.SCENARIO_PRESETS[preset]
    config = TrainConfig(
        epochs=4,
        batch_size=2,
        seed=5,
        max_customers=scenario.arrival_cap(),
        horizon=scenario.horizon,
        delta_t=scenario.delta_t,
        price=scenario.price,
        demand_max=scenario.charge_kwh,
        res_max=max(scenario.inverter_kva),
        tcn=_TINY_TCN,
    )
    def source(rng):
      return scenario_generation.gen_scenario(scenario, rng).for_ihr(1)

    actor = policy_learning.train(config, source).actor
    policies = (
        policy_learning.LearnedMatchingPolicy(actor, scales=config.scales),
        policy_learning.LearnedMatchingPolicy(
            actor, scales=config.scales, stochastic=True
        ),
    )
    for seed in range(4):
      data = scenario_generation.gen_scenario(
          scenario, np.random.default_rng([seed, 99])
      )
      for ihr_id in data.ihr_ids:
        episode = data.for_ihr(ihr_id)
        oracle, _ = matching_policy.offline_oracle(episode, data.delta_t)
        for policy in policies:
          outcome = matching_policy.run_episode(
              policy,
              episode,
              delta_t=data.delta_t,
              rng=np.random.default_rng(seed),
          )
          self.assertLessEqual(outcome.total_welfare, oracle + 1e-6)


if __name__ == "__main__":
  absltest.main()
