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

"""A policy-gradient training module of the GridMatch package."""

import dataclasses
import math
import time
from typing import Callable, Final, Mapping, Sequence
from absl import logging
import numpy as np
import pandas as pd
import tensorflow as tf
import torch
from tqdm import tqdm
from gridmatch import matching_market
from gridmatch import matching_policy
from gridmatch import neural_network
from gridmatch.matching_market import Customer
from gridmatch.matching_market import IhrEpisode
from gridmatch.matching_market import IhrMarketState
from gridmatch.matching_market import MatchAmounts
from gridmatch.matching_policy import DiscreteMatch
from gridmatch.matching_policy import MatchProbabilities
from gridmatch.neural_network import CriticNet
from gridmatch.neural_network import FeatureScales
from gridmatch.neural_network import TemporalConvNet

ESTIMATORS: Final[tuple[str, ...]] = ("reinforce", "ac_k")
_PROBABILITY_FLOOR: Final[float] = 1e-12
_GREEDY_THRESHOLD: Final[float] = 0.5
_CURVE_COLUMNS: Final[tuple[str, ...]] = (
    "epoch",
    "welfare",
    "running_average",
    "ma_welfare",
    "grad_norm",
    "wall_time",
)

BitChooser = Callable[[IhrMarketState, MatchProbabilities], DiscreteMatch]
ScenarioSource = Callable[[np.random.Generator], IhrEpisode]


class TraceMismatchError(Exception):
  """Error when a trace was recorded under other network parameters."""

  pass


class TrainingDivergedError(Exception):
  """Error when training produces a non-finite welfare or gradient."""

  pass


@dataclasses.dataclass(frozen=True)
class TrainConfig:
  """The settings of a training run.

  Attributes:
      epochs: The number of sampled episodes N.
      batch_size: The number of episodes M per parameter update.
      estimator: The policy-gradient estimator, reinforce or ac_k.
      lookahead: The number k of realized intervals before the critic
        bootstrap.
      actor_learning_rate: The ADAM step size of the TCN.
      critic_learning_rate: The ADAM step size of the critic.
      seed: The seed of the initial weights and every epoch's random stream.
      max_customers: The number of customer slots of the TCN.
      horizon: The number of intervals T.
      delta_t: The interval length in hours.
      price: The grid tariff in $/kWh.
      demand_max: The largest customer demand in kWh.
      res_max: The largest RES output in kW.
      tcn: The TCN architecture.
      critic: The critic architecture.
      running_window: The number of epochs of the running welfare average.
      record_wall_time: Whether the curve records elapsed seconds. Disabled
        runs write byte-identical logs.
  """

  epochs: int = 200
  batch_size: int = 20
  estimator: str = "ac_k"
  lookahead: int = 4
  actor_learning_rate: float = neural_network.LEARNING_RATE_PRESETS["default"]
  critic_learning_rate: float = neural_network.LEARNING_RATE_PRESETS[
      "default"
  ]
  seed: int = 0
  max_customers: int = 32
  horizon: int = 48
  delta_t: float = 0.5
  price: float = 0.12
  demand_max: float = 6.6
  res_max: float = 150.0
  tcn: neural_network.TcnConfig = neural_network.TcnConfig()
  critic: neural_network.CriticConfig = neural_network.CriticConfig()
  running_window: int = 50
  record_wall_time: bool = False

  def __post_init__(self):
    if self.epochs < 0:
      raise ValueError(f"The number of epochs must be >= 0, {self.epochs}.")
    if self.batch_size < 1:
      raise ValueError(f"The batch size must be >= 1, {self.batch_size}.")
    if self.estimator not in ESTIMATORS:
      raise ValueError(f"Unknown estimator: {self.estimator}.")
    if not 1 <= self.lookahead <= self.horizon:
      raise ValueError(
          f"The lookahead must lie in [1, {self.horizon}], {self.lookahead}."
      )
    if self.max_customers < 1 or self.running_window < 1:
      raise ValueError("max_customers and running_window must be >= 1.")

  @property
  def scales(self) -> FeatureScales:
    return FeatureScales(
        horizon=self.horizon,
        demand_max=self.demand_max,
        price=self.price,
        rate_max=self.price,
        res_max=self.res_max,
    )


@dataclasses.dataclass
class EpisodeTrace:
  """The record of one sampled episode.

  Attributes:
      frames: The (T, width) encoded decision-time states.
      bits: The (T, slots) sampled bits.
      slot_mask: The (T, slots) indicator of occupied slots.
      probs: The (T, slots) matching probabilities.
      log_probs: The log-probability of each interval's bits.
      welfare: The realized welfare of each interval in $.
      matches: The applied match of each interval.
      masks: The dropout masks of the episode, or None in evaluation mode.
      params_version: The TCN version the episode was sampled with.
      customers: Every customer of the episode.
      price: The grid tariff in $/kWh.
  """

  frames: torch.Tensor
  bits: torch.Tensor
  slot_mask: torch.Tensor
  probs: torch.Tensor
  log_probs: tuple[float, ...]
  welfare: tuple[float, ...]
  matches: Mapping[int, MatchAmounts]
  masks: tuple[torch.Tensor, ...] | None
  params_version: int
  customers: tuple[Customer, ...]
  price: float

  def __post_init__(self):
    if not all(math.isfinite(value) for value in self.welfare):
      raise TrainingDivergedError("The episode produced non-finite welfare.")

  @property
  def horizon(self) -> int:
    return len(self.welfare)

  @property
  def total_welfare(self) -> float:
    return float(sum(self.welfare))


def _clamped(value: float) -> float:
  return min(max(value, _PROBABILITY_FLOOR), 1.0 - _PROBABILITY_FLOOR)


def slot_probabilities(
    state: IhrMarketState, row: torch.Tensor
) -> tuple[tuple[int, ...], MatchProbabilities]:
  """Maps one row of TCN outputs onto the active customers.

  Args:
      state: The market at decision time.
      row: The (slots,) probabilities of the current interval.

  Returns:
      The customer ids in slot order and their matching probabilities.
  """
  order = neural_network.slot_order(state.snapshot())
  probs = {cid: _clamped(float(row[slot])) for slot, cid in enumerate(order)}
  return order, MatchProbabilities(probs)


def sample_episode(
    actor: TemporalConvNet,
    episode: IhrEpisode,
    *,
    scales: FeatureScales,
    delta_t: float,
    rng: np.random.Generator,
    train_mode: bool = True,
    bit_chooser: BitChooser | None = None,
) -> EpisodeTrace:
  """Rolls a market forward under the stochastic TCN policy.

  Args:
      actor: The TCN.
      episode: The scenario of the market.
      scales: The feature normalization.
      delta_t: The interval length in hours.
      rng: The random stream of dropout masks and bits.
      train_mode: Whether dropout is active.
      bit_chooser: Replaces Bernoulli sampling, for deterministic rollouts.

  Returns:
      The trace of the episode.
  """
  horizon = episode.horizon
  slots = actor.n_outputs
  masks = None
  if train_mode and actor.config.dropout > 0:
    masks = neural_network.draw_dropout_masks(actor, horizon, rng)
  bits = torch.zeros((horizon, slots), dtype=neural_network.DTYPE)
  slot_mask = torch.zeros_like(bits)
  probs = torch.zeros_like(bits)
  log_probs, welfare, matches = [], [], {}
  state = episode.start()
  frames = None
  for _ in range(horizon):
    state = episode.advance(state)
    frames = neural_network.encode_state(state, slots, scales=scales)
    with torch.no_grad():
      outputs, _ = neural_network.tcn_forward(
          actor, frames, train_mode=train_mode, masks=masks
      )
    row = state.t - 1
    order, match_probs = slot_probabilities(state, outputs[-1])
    if bit_chooser is None:
      decision = matching_policy.sample_discrete(match_probs, rng)
    else:
      decision = bit_chooser(state, match_probs)
    for slot, customer_id in enumerate(order):
      bits[row, slot] = float(decision.bits[customer_id])
      slot_mask[row, slot] = 1.0
      probs[row, slot] = match_probs.probs[customer_id]
    m = matching_policy.compose_match(decision, state, delta_t)
    matches[state.t] = m
    state, value = matching_market.apply_match(state, m, delta_t)
    log_probs.append(decision.log_prob)
    welfare.append(value)
  if frames is None:
    frames = torch.zeros(
        (0, neural_network.frame_width(slots)), dtype=neural_network.DTYPE
    )
  return EpisodeTrace(
      frames=frames,
      bits=bits,
      slot_mask=slot_mask,
      probs=probs,
      log_probs=tuple(log_probs),
      welfare=tuple(welfare),
      matches=matches,
      masks=masks,
      params_version=actor.version,
      customers=episode.customers,
      price=episode.price,
  )


def returns_to_go(trace: EpisodeTrace) -> np.ndarray:
  """Returns G_t, the welfare from interval t to the end of the episode."""
  welfare = np.asarray(trace.welfare, dtype=float)
  return np.cumsum(welfare[::-1])[::-1].copy()


def _trace_cache(
    actor: TemporalConvNet, trace: EpisodeTrace
) -> neural_network.TcnCache:
  if trace.params_version != actor.version:
    raise TraceMismatchError(
        f"The trace was sampled at version {trace.params_version}, the TCN is"
        f" at version {actor.version}."
    )
  _, cache = neural_network.tcn_forward(
      actor,
      trace.frames,
      train_mode=trace.masks is not None,
      masks=trace.masks,
  )
  return cache


def log_prob_surrogate(
    actor: TemporalConvNet, trace: EpisodeTrace, weights: torch.Tensor
) -> torch.Tensor:
  """Evaluates sum_t w_t log mu_t(m_t) at the current parameters."""
  logits = actor(trace.frames, trace.masks)
  return (
      neural_network.bernoulli_log_prob(logits, trace.bits, trace.slot_mask)
      * weights
  ).sum()


def _weighted_gradient(
    actor: TemporalConvNet, trace: EpisodeTrace, weights: np.ndarray
) -> tuple[torch.Tensor, ...]:
  cache = _trace_cache(actor, trace)
  return neural_network.tcn_backward(
      actor,
      cache,
      bits=trace.bits,
      weights=torch.from_numpy(np.asarray(weights, dtype=float)).to(
          neural_network.DTYPE
      ),
      slot_mask=trace.slot_mask,
  )


def reinforce_gradient(
    trace: EpisodeTrace, actor: TemporalConvNet
) -> tuple[torch.Tensor, ...]:
  """Computes sum_t G_t grad log mu_t(m_t).

  Args:
      trace: An episode sampled with the current parameters.
      actor: The TCN.

  Returns:
      One gradient per TCN parameter.

  Raises:
      TraceMismatchError: If the TCN changed since the trace was sampled.
  """
  return _weighted_gradient(actor, trace, returns_to_go(trace))


def ac_k_weights(
    trace: EpisodeTrace, critic: CriticNet, k: int
) -> np.ndarray:
  """Returns k realized welfare terms plus the critic bootstrap per interval.

  The bootstrap V(X_{t+k}) is zero when t + k lies past the horizon.
  """
  horizon = trace.horizon
  if not 1 <= k <= max(horizon, 1):
    raise ValueError(f"The lookahead must lie in [1, {horizon}], got {k}.")
  welfare = np.asarray(trace.welfare, dtype=float)
  prefix = np.concatenate([[0.0], np.cumsum(welfare)])
  values = np.zeros(horizon)
  if horizon and k < horizon:
    inputs = neural_network.critic_features(trace.frames, horizon)
    values = neural_network.critic_forward(critic, inputs).numpy()
  weights = np.zeros(horizon)
  for t in range(1, horizon + 1):
    end = min(t + k - 1, horizon)
    weights[t - 1] = prefix[end] - prefix[t - 1]
    if t + k <= horizon:
      weights[t - 1] += values[t + k - 1]
  return weights


def ac_k_gradient(
    trace: EpisodeTrace,
    actor: TemporalConvNet,
    critic: CriticNet,
    k: int,
) -> tuple[torch.Tensor, ...]:
  """Computes the actor-critic gradient with a k-interval lookahead.

  Args:
      trace: An episode sampled with the current parameters.
      actor: The TCN.
      critic: The value estimate used as the bootstrap.
      k: The lookahead in intervals, within [1, T].

  Returns:
      One gradient per TCN parameter.
  """
  return _weighted_gradient(actor, trace, ac_k_weights(trace, critic, k))


def critic_gradient(
    trace: EpisodeTrace, critic: CriticNet
) -> tuple[torch.Tensor, ...]:
  """Differentiates 1/2 sum_t (V(X_t) - G_t)^2 with respect to the critic."""
  if not trace.horizon:
    return tuple(torch.zeros_like(p) for p in critic.parameters())
  inputs = neural_network.critic_features(trace.frames, trace.horizon)
  targets = torch.from_numpy(returns_to_go(trace)).to(neural_network.DTYPE)
  residual = neural_network.critic_forward(critic, inputs) - targets
  return neural_network.critic_backward(critic, inputs, residual)


def critic_loss(critic: CriticNet, trace: EpisodeTrace) -> torch.Tensor:
  inputs = neural_network.critic_features(trace.frames, trace.horizon)
  targets = torch.from_numpy(returns_to_go(trace)).to(neural_network.DTYPE)
  return 0.5 * ((critic(inputs) - targets) ** 2).sum()


def _mean_gradient(
    grads: Sequence[Sequence[torch.Tensor]],
) -> tuple[torch.Tensor, ...]:
  return tuple(torch.stack(parts).mean(dim=0) for parts in zip(*grads))


class LearnedMatchingPolicy(matching_policy.MatchingPolicy):
  """Matches with a trained TCN, greedily or by sampling."""

  name = "LA"

  def __init__(
      self,
      actor: TemporalConvNet,
      *,
      scales: FeatureScales,
      stochastic: bool = False,
  ):
    self.actor = actor
    self.scales = scales
    self.stochastic = stochastic

  def decide(
      self,
      state: IhrMarketState,
      delta_t: float,
      rng: np.random.Generator,
  ) -> matching_policy.PolicyDecision:
    frames = neural_network.encode_state(
        state, self.actor.n_outputs, scales=self.scales
    )
    with torch.no_grad():
      outputs, _ = neural_network.tcn_forward(
          self.actor, frames, train_mode=False
      )
    _, probs = slot_probabilities(state, outputs[-1])
    if self.stochastic:
      bits = matching_policy.sample_discrete(probs, rng)
    else:
      bits = DiscreteMatch(
          bits={
              cid: int(p >= _GREEDY_THRESHOLD) for cid, p in probs.probs.items()
          }
      )
    m = matching_policy.compose_match(bits, state, delta_t)
    return matching_policy.PolicyDecision(match=m, bits=bits, probs=probs)


@dataclasses.dataclass(frozen=True)
class CurvePoint:
  """One epoch of the training curve."""

  epoch: int
  welfare: float
  running_average: float
  ma_welfare: float
  grad_norm: float
  wall_time: float


@dataclasses.dataclass
class TrainResult:
  """The outcome of a training run.

  Attributes:
      actor: The trained TCN.
      critic: The trained critic.
      actor_optimizer: The TCN optimizer, for resuming.
      critic_optimizer: The critic optimizer, for resuming.
      curve: One point per epoch of this run.
  """

  actor: TemporalConvNet
  critic: CriticNet
  actor_optimizer: neural_network.AdamOptimizer
  critic_optimizer: neural_network.AdamOptimizer
  curve: tuple[CurvePoint, ...]


def build_networks(
    config: TrainConfig,
) -> tuple[TemporalConvNet, CriticNet]:
  """Creates the TCN and critic with seeded initial weights."""
  rng = np.random.default_rng(config.seed)
  width = neural_network.frame_width(config.max_customers)
  actor = TemporalConvNet(
      n_inputs=width,
      n_outputs=config.max_customers,
      config=config.tcn,
      rng=rng,
  )
  critic = CriticNet(n_inputs=width + 1, config=config.critic, rng=rng)
  return actor, critic


def _save_diagnostic(
    checkpoint_path: str | None,
    result: TrainResult,
    epoch: int,
) -> None:
  if not checkpoint_path:
    return
  neural_network.save_checkpoint(
      f"{checkpoint_path}.diverged",
      actor=result.actor,
      critic=result.critic,
      actor_optimizer=result.actor_optimizer,
      critic_optimizer=result.critic_optimizer,
      epoch=epoch,
      metadata={"diverged": True},
  )


def train(
    config: TrainConfig,
    source: ScenarioSource,
    *,
    initial_checkpoint: str | None = None,
    checkpoint_path: str | None = None,
) -> TrainResult:
  """Learns a matching policy with batched policy-gradient updates.

  Every epoch samples one episode from the source with its own seeded stream,
  records the trace and the match-on-arrival welfare of the same episode, and
  every `batch_size` epochs applies ADAM ascent to the TCN with the mean
  gradient of the batch. The critic is fitted by ADAM descent when the
  estimator is ac_k.

  Args:
      config: The run settings.
      source: Draws the episode of one market from a random stream.
      initial_checkpoint: A checkpoint to resume from.
      checkpoint_path: Where a checkpoint is written after every update.

  Returns:
      The trained networks and the welfare curve.

  Raises:
      TrainingDivergedError: If a welfare or gradient is non-finite. A
        diagnostic checkpoint is written first when a path is given.
  """
  actor, critic = build_networks(config)
  actor_optimizer = neural_network.AdamOptimizer(
      actor,
      learning_rate=config.actor_learning_rate,
      direction=neural_network.ASCENT,
  )
  critic_optimizer = neural_network.AdamOptimizer(
      critic,
      learning_rate=config.critic_learning_rate,
      direction=neural_network.DESCENT,
  )
  start_epoch = 0
  if initial_checkpoint:
    payload = neural_network.load_checkpoint(initial_checkpoint)
    neural_network.restore_networks(
        payload,
        actor=actor,
        critic=critic,
        actor_optimizer=actor_optimizer,
        critic_optimizer=critic_optimizer,
    )
    start_epoch = int(payload["epoch"])
    logging.info(f"Resuming training at epoch {start_epoch}.")
  result = TrainResult(
      actor=actor,
      critic=critic,
      actor_optimizer=actor_optimizer,
      critic_optimizer=critic_optimizer,
      curve=(),
  )
  scales = config.scales
  baseline = matching_policy.MatchOnArrivalPolicy()
  buffer = []
  curve = []
  recent = []
  started = time.perf_counter()
  for epoch in tqdm(range(start_epoch, config.epochs), desc="Training"):
    rng = np.random.default_rng([config.seed, epoch])
    episode = source(rng)
    try:
      trace = sample_episode(
          actor, episode, scales=scales, delta_t=config.delta_t, rng=rng
      )
    except TrainingDivergedError:
      _save_diagnostic(checkpoint_path, result, epoch)
      raise
    ma_welfare = matching_policy.run_episode(
        baseline, episode, delta_t=config.delta_t, rng=rng
    ).total_welfare
    buffer.append(trace)
    grad_norm = math.nan
    if len(buffer) == config.batch_size:
      if config.estimator == "reinforce":
        actor_grads = _mean_gradient(
            [reinforce_gradient(item, actor) for item in buffer]
        )
      else:
        actor_grads = _mean_gradient([
            ac_k_gradient(item, actor, critic, config.lookahead)
            for item in buffer
        ])
        critic_grads = _mean_gradient(
            [critic_gradient(item, critic) for item in buffer]
        )
      grad_norm = neural_network.flat_norm(actor_grads)
      if not math.isfinite(grad_norm):
        _save_diagnostic(checkpoint_path, result, epoch)
        raise TrainingDivergedError(
            f"The policy gradient became non-finite at epoch {epoch}."
        )
      actor_optimizer.step(actor_grads)
      if config.estimator == "ac_k":
        critic_optimizer.step(critic_grads)
      buffer.clear()
      logging.info(
          f"Updated the policy at epoch {epoch} with gradient norm"
          f" {grad_norm:.6g}."
      )
      if checkpoint_path:
        neural_network.save_checkpoint(
            checkpoint_path,
            actor=actor,
            critic=critic,
            actor_optimizer=actor_optimizer,
            critic_optimizer=critic_optimizer,
            epoch=epoch + 1,
            metadata={"estimator": config.estimator},
        )
    recent.append(trace.total_welfare)
    recent = recent[-config.running_window :]
    curve.append(
        CurvePoint(
            epoch=epoch,
            welfare=trace.total_welfare,
            running_average=float(np.mean(recent)),
            ma_welfare=ma_welfare,
            grad_norm=grad_norm,
            wall_time=(
                time.perf_counter() - started
                if config.record_wall_time
                else 0.0
            ),
        )
    )
  if buffer:
    logging.warning(
        f"Discarding {len(buffer)} episodes that do not fill a batch."
    )
  result.curve = tuple(curve)
  return result


def curve_frame(curve: Sequence[CurvePoint]) -> pd.DataFrame:
  return pd.DataFrame(
      [dataclasses.astuple(point) for point in curve],
      columns=list(_CURVE_COLUMNS),
  )


def write_training_log(path: str, curve: Sequence[CurvePoint]) -> None:
  """Writes the training curve as CSV."""
  with tf.io.gfile.GFile(path, "w") as file:
    curve_frame(curve).to_csv(file, index=False, float_format="%.10g")
