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

"""Tests for utility functions in neural_network.py."""

import dataclasses
import io
import math
import os
import tempfile
from absl.testing import absltest
from absl.testing import parameterized
from gridmatch import matching_market
from gridmatch import neural_network
from gridmatch.matching_market import MarketSnapshot
from gridmatch.matching_market import ResState
from gridmatch.neural_network import TcnConfig
import numpy as np
import torch

_SLOTS = 3
_WIDTH = neural_network.frame_width(_SLOTS)
_SMALL_TCN = TcnConfig(n_blocks=2, n_filters=3, kernel_size=2, dropout=0.2)


def _actor(seed=0, config=_SMALL_TCN):
  return neural_network.TemporalConvNet(
      n_inputs=_WIDTH,
      n_outputs=_SLOTS,
      config=config,
      rng=np.random.default_rng(seed),
  )


def _frames(length, seed=1):
  rng = np.random.default_rng(seed)
  return torch.from_numpy(rng.uniform(0.0, 1.0, size=(length, _WIDTH)))


def _ev(customer_id, arrival):
  return matching_market.make_flexible_customer(
      customer_id=customer_id,
      arrival=arrival,
      demand=2.0,
      deadline=3,
      crit_control=0.5,
      price=0.12,
  )


class EncodeFramesTest(absltest.TestCase):

  def test_features_and_slot_order(self):
    scales = neural_network.FeatureScales(
        horizon=4, demand_max=4.0, price=0.12, rate_max=0.12, res_max=2.0
    )
    snapshot = MarketSnapshot(
        t=2,
        customers=(
            _ev(9, 2),
            dataclasses.replace(_ev(4, 1), unserved=1.0),
        ),
        res=ResState(r_p=1.0, r_s=2.0),
    )
    encoded = neural_network.encode_frames([snapshot], _SLOTS, scales=scales)
    self.assertEqual(tuple(encoded.shape), (1, _WIDTH))
    self.assertEqual(encoded.dtype, torch.float64)
    self.assertEqual(neural_network.slot_order(snapshot), (4, 9))
    np.testing.assert_allclose(
        encoded[0, :6].numpy(), [0.25, 0.5, 0.25, 0.75, 0.25, 0.25]
    )
    self.assertAlmostEqual(float(encoded[0, 6]), 0.5)
    self.assertAlmostEqual(float(encoded[0, 11]), 0.0)
    np.testing.assert_array_equal(encoded[0, 12:18].numpy(), np.zeros(6))
    self.assertAlmostEqual(float(encoded[0, -1]), 0.5)

  def test_raises_error_slot_overflow(self):
    snapshot = MarketSnapshot(
        t=1,
        customers=tuple(_ev(i, 1) for i in range(_SLOTS + 1)),
        res=ResState(),
    )
    with self.assertRaises(neural_network.SlotOverflowError):
      neural_network.encode_frames(
          [snapshot], _SLOTS, scales=neural_network.FeatureScales(horizon=3)
      )

  def test_encode_state_covers_every_interval(self):
    state = matching_market.new_market(max_customers=_SLOTS)
    state = matching_market.step_arrivals(
        state, (_ev(1, 1),), ResState(1.0, 2.0)
    )
    state, _ = matching_market.apply_match(
        state, matching_market.MatchAmounts(), 1.0
    )
    state = matching_market.step_arrivals(state, (_ev(2, 2),), ResState())
    scales = neural_network.FeatureScales(horizon=4)
    encoded = neural_network.encode_state(state, _SLOTS, scales=scales)
    self.assertEqual(tuple(encoded.shape), (2, _WIDTH))
    torch.testing.assert_close(
        encoded,
        neural_network.encode_frames(state.frames(), _SLOTS, scales=scales),
    )

  def test_critic_features_append_time(self):
    features = neural_network.critic_features(_frames(4), horizon=8)
    self.assertEqual(tuple(features.shape), (4, _WIDTH + 1))
    np.testing.assert_allclose(
        features[:, -1].numpy(), [0.125, 0.25, 0.375, 0.5]
    )


class TemporalConvNetTest(parameterized.TestCase):

  @parameterized.named_parameters(("eval", False), ("train", True))
  def test_outputs_are_causal(self, train_mode):
    actor = _actor()
    frames = _frames(8)
    masks = neural_network.draw_dropout_masks(
        actor, 8, np.random.default_rng(3)
    )
    full, _ = neural_network.tcn_forward(
        actor, frames, train_mode=train_mode, masks=masks
    )
    for length in range(1, 9):
      prefix, _ = neural_network.tcn_forward(
          actor, frames[:length], train_mode=train_mode, masks=masks
      )
      torch.testing.assert_close(prefix, full[:length])

  def test_future_frames_do_not_change_the_past(self):
    actor = _actor()
    frames = _frames(6)
    changed = frames.clone()
    changed[4:] += 1.0
    first, _ = neural_network.tcn_forward(actor, frames, train_mode=False)
    second, _ = neural_network.tcn_forward(actor, changed, train_mode=False)
    torch.testing.assert_close(first[:4], second[:4])

  def test_probabilities_in_unit_interval(self):
    probs, cache = neural_network.tcn_forward(
        _actor(), _frames(5), train_mode=False
    )
    self.assertEqual(tuple(probs.shape), (5, _SLOTS))
    self.assertTrue(bool(((probs > 0) & (probs < 1)).all()))
    self.assertIsNone(cache.masks)
    self.assertFalse(probs.requires_grad)

  def test_same_seed_same_network(self):
    probs_a, _ = neural_network.tcn_forward(
        _actor(seed=5), _frames(3), train_mode=False
    )
    probs_b, _ = neural_network.tcn_forward(
        _actor(seed=5), _frames(3), train_mode=False
    )
    torch.testing.assert_close(probs_a, probs_b, rtol=0.0, atol=0.0)

  def test_raises_error_wrong_width(self):
    with self.assertRaises(neural_network.ShapeMismatchError):
      _actor()(torch.zeros((3, _WIDTH + 1), dtype=torch.float64))

  def test_raises_error_training_without_masks_or_rng(self):
    with self.assertRaisesRegex(ValueError, "dropout masks or a rng"):
      neural_network.tcn_forward(_actor(), _frames(2), train_mode=True)


class GradientTest(absltest.TestCase):

  def test_tcn_backward_matches_finite_differences(self):
    actor = _actor(config=dataclasses.replace(_SMALL_TCN, dropout=0.0))
    frames = _frames(5)
    rng = np.random.default_rng(7)
    bits = torch.from_numpy(rng.integers(0, 2, size=(5, _SLOTS)).astype(float))
    slot_mask = torch.ones((5, _SLOTS), dtype=torch.float64)
    slot_mask[0, 2] = 0.0
    weights = torch.from_numpy(rng.normal(size=5))
    _, cache = neural_network.tcn_forward(actor, frames, train_mode=False)
    analytic = neural_network.tcn_backward(
        actor, cache, bits=bits, weights=weights, slot_mask=slot_mask
    )

    def loss_fn():
      logits = actor(frames)
      return (
          neural_network.bernoulli_log_prob(logits, bits, slot_mask) * weights
      ).sum()

    error = neural_network.gradient_check(loss_fn, actor, analytic)
    self.assertLess(error, 1e-6)

  def test_critic_backward_matches_finite_differences(self):
    critic = neural_network.CriticNet(
        n_inputs=4, rng=np.random.default_rng(2)
    )
    inputs = torch.from_numpy(np.random.default_rng(3).normal(size=(6, 4)))
    upstream = torch.from_numpy(np.random.default_rng(4).normal(size=6))
    analytic = neural_network.critic_backward(critic, inputs, upstream)
    error = neural_network.gradient_check(
        lambda: (critic(inputs) * upstream).sum(), critic, analytic
    )
    self.assertLess(error, 1e-6)

  def test_critic_forward_is_detached(self):
    critic = neural_network.CriticNet(n_inputs=4)
    inputs = torch.from_numpy(np.random.default_rng(3).normal(size=(2, 4)))
    values = neural_network.critic_forward(critic, inputs)
    self.assertEqual(tuple(values.shape), (2,))
    self.assertFalse(values.requires_grad)
    torch.testing.assert_close(values, critic(inputs).detach())

  def test_input_gradients_pass_gradcheck(self):
    actor = _actor(config=dataclasses.replace(_SMALL_TCN, dropout=0.0))
    critic = neural_network.CriticNet(n_inputs=_WIDTH + 1)
    actor.eval()
    frames = _frames(4).requires_grad_()
    self.assertTrue(torch.autograd.gradcheck(actor, (frames,)))
    features = neural_network.critic_features(_frames(4), horizon=4)
    self.assertTrue(
        torch.autograd.gradcheck(critic, (features.requires_grad_(),))
    )

  def test_bernoulli_log_prob_at_even_odds(self):
    logits = torch.zeros((2, _SLOTS), dtype=torch.float64)
    bits = torch.tensor([[1.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
    mask = torch.tensor([[1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    values = neural_network.bernoulli_log_prob(logits, bits.double(), mask)
    np.testing.assert_allclose(
        values.numpy(), [2.0 * math.log(0.5), math.log(0.5)]
    )

  def test_raises_error_stale_cache(self):
    actor = _actor()
    _, cache = neural_network.tcn_forward(actor, _frames(2), train_mode=False)
    optimizer = neural_network.AdamOptimizer(actor)
    optimizer.step([torch.zeros_like(p) for p in actor.parameters()])
    with self.assertRaises(neural_network.StaleCacheError):
      neural_network.tcn_backward(
          actor,
          cache,
          bits=torch.zeros((2, _SLOTS), dtype=torch.float64),
          weights=torch.ones(2, dtype=torch.float64),
          slot_mask=torch.ones((2, _SLOTS), dtype=torch.float64),
      )

  def test_raises_error_bits_shape(self):
    actor = _actor()
    _, cache = neural_network.tcn_forward(actor, _frames(2), train_mode=False)
    with self.assertRaises(neural_network.ShapeMismatchError):
      neural_network.tcn_backward(
          actor,
          cache,
          bits=torch.zeros((3, _SLOTS), dtype=torch.float64),
          weights=torch.ones(3, dtype=torch.float64),
          slot_mask=torch.ones((3, _SLOTS), dtype=torch.float64),
      )


class AdamOptimizerTest(parameterized.TestCase):

  @parameterized.named_parameters(
      ("descent", neural_network.DESCENT, -1.0),
      ("ascent", neural_network.ASCENT, 1.0),
  )
  def test_first_step_moves_by_learning_rate(self, direction, sign):
    critic = neural_network.CriticNet(n_inputs=2)
    before = [p.detach().clone() for p in critic.parameters()]
    optimizer = neural_network.AdamOptimizer(
        critic, learning_rate=0.01, direction=direction
    )
    grads = [torch.ones_like(p) for p in critic.parameters()]
    state = neural_network.adam_step(optimizer, grads)
    for old, new in zip(before, critic.parameters()):
      torch.testing.assert_close(
          new.detach() - old, torch.full_like(old, sign * 0.01)
      )
    self.assertEqual(state.step, 1)
    self.assertEqual(critic.version, 1)
    torch.testing.assert_close(
        state.first_moments[0], torch.full_like(before[0], 0.1)
    )
    torch.testing.assert_close(
        state.second_moments[0], torch.full_like(before[0], 0.001)
    )

  def test_raises_error_non_finite_gradient(self):
    critic = neural_network.CriticNet(n_inputs=2)
    optimizer = neural_network.AdamOptimizer(critic)
    grads = [torch.full_like(p, math.nan) for p in critic.parameters()]
    with self.assertRaises(neural_network.NonFiniteGradientError):
      optimizer.step(grads)
    self.assertEqual(optimizer.step_count, 0)

  def test_raises_error_gradient_count(self):
    optimizer = neural_network.AdamOptimizer(
        neural_network.CriticNet(n_inputs=2)
    )
    with self.assertRaises(neural_network.ShapeMismatchError):
      optimizer.step([])

  def test_raises_error_unknown_direction(self):
    with self.assertRaisesRegex(ValueError, "Unknown direction"):
      neural_network.AdamOptimizer(
          neural_network.CriticNet(n_inputs=2), direction="sideways"
      )


class CheckpointTest(absltest.TestCase):

  def test_round_trip_restores_outputs_and_moments(self):
    actor = _actor(seed=1)
    critic = neural_network.CriticNet(
        n_inputs=_WIDTH + 1, rng=np.random.default_rng(1)
    )
    actor_optimizer = neural_network.AdamOptimizer(
        actor, direction=neural_network.ASCENT
    )
    critic_optimizer = neural_network.AdamOptimizer(critic)
    actor_optimizer.step([torch.ones_like(p) for p in actor.parameters()])
    critic_optimizer.step([torch.ones_like(p) for p in critic.parameters()])
    with tempfile.TemporaryDirectory() as temporary_directory:
      path = os.path.join(temporary_directory, "model.pt")
      neural_network.save_checkpoint(
          path,
          actor=actor,
          critic=critic,
          actor_optimizer=actor_optimizer,
          critic_optimizer=critic_optimizer,
          epoch=3,
          metadata={"market": "ihr_1"},
      )
      payload = neural_network.load_checkpoint(path)
    fresh_actor = _actor(seed=9)
    fresh_critic = neural_network.CriticNet(
        n_inputs=_WIDTH + 1, rng=np.random.default_rng(9)
    )
    fresh_optimizer = neural_network.AdamOptimizer(
        fresh_actor, direction=neural_network.ASCENT
    )
    neural_network.restore_networks(
        payload,
        actor=fresh_actor,
        critic=fresh_critic,
        actor_optimizer=fresh_optimizer,
    )
    self.assertEqual(payload["epoch"], 3)
    self.assertEqual(payload["metadata"], {"market": "ihr_1"})
    self.assertEqual(fresh_actor.version, 1)
    self.assertEqual(fresh_optimizer.step_count, 1)
    frames = _frames(4)
    expected, _ = neural_network.tcn_forward(actor, frames, train_mode=False)
    restored, _ = neural_network.tcn_forward(
        fresh_actor, frames, train_mode=False
    )
    torch.testing.assert_close(restored, expected, rtol=0.0, atol=0.0)
    torch.testing.assert_close(
        fresh_optimizer.state.first_moments[0],
        actor_optimizer.state.first_moments[0],
    )

  def test_raises_error_missing_file(self):
    with self.assertRaisesRegex(neural_network.CheckpointError, "not exist"):
      neural_network.load_checkpoint("/nonexistent/model.pt")

  def test_raises_error_other_version(self):
    with tempfile.TemporaryDirectory() as temporary_directory:
      path = os.path.join(temporary_directory, "model.pt")
      buffer = io.BytesIO()
      torch.save({"version": 99}, buffer)
      with open(path, "wb") as file:
        file.write(buffer.getvalue())
      with self.assertRaisesRegex(neural_network.CheckpointError, "version"):
        neural_network.load_checkpoint(path)

  def test_raises_error_unreadable_file(self):
    with tempfile.TemporaryDirectory() as temporary_directory:
      path = os.path.join(temporary_directory, "model.pt")
      with open(path, "wb") as file:
        file.write(b"not a checkpoint")
      with self.assertRaisesRegex(neural_network.CheckpointError, "unreadable"):
        neural_network.load_checkpoint(path)


if __name__ == "__main__":
  absltest.main()
