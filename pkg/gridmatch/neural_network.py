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

"""A neural network module of the GridMatch package.

Holds the temporal convolution network that maps the market history to
matching probabilities, the critic that estimates the remaining welfare, the
ADAM optimizer wrapper and checkpoint I/O. Everything runs in float64 on the
CPU.
"""

import dataclasses
import io
import math
from typing import Callable, Final, Mapping, Sequence
from absl import logging
import numpy as np
import tensorflow as tf
import torch
from torch import nn
from torch.nn import functional as F
from gridmatch.matching_market import IhrMarketState
from gridmatch.matching_market import MarketSnapshot

DTYPE: Final[torch.dtype] = torch.float64
SLOT_FEATURES: Final[int] = 6
CHECKPOINT_VERSION: Final[int] = 1
ASCENT: Final[str] = "ascent"
DESCENT: Final[str] = "descent"
LEARNING_RATE_PRESETS: Final[Mapping[str, float]] = {
    "default": 0.01,
    "low": 0.25,
    "high": 0.99,
}
_DEFAULT_BETA1: Final[float] = 0.9
_DEFAULT_BETA2: Final[float] = 0.999
_DEFAULT_EPSILON: Final[float] = 1e-8
_FINITE_DIFFERENCE_STEP: Final[float] = 1e-5


class SlotOverflowError(Exception):
  """Error when more customers are active than the network has slots."""

  pass


class ShapeMismatchError(Exception):
  """Error when tensors do not have the shapes a layer expects."""

  pass


class StaleCacheError(Exception):
  """Error when a forward cache outlives a parameter update."""

  pass


class NonFiniteGradientError(Exception):
  """Error when an optimizer receives a non-finite gradient."""

  pass


class CheckpointError(Exception):
  """Error when a checkpoint cannot be read."""

  pass


@dataclasses.dataclass(frozen=True)
class FeatureScales:
  """The constants the state features are normalized by.

  Attributes:
      horizon: The number of intervals in a day.
      demand_max: The largest customer demand in kWh.
      price: The grid tariff in $/kWh.
      rate_max: The largest willingness decay in $/kWh per interval.
      res_max: The largest RES output in kW.
  """

  horizon: int
  demand_max: float = 6.6
  price: float = 0.12
  rate_max: float = 0.12
  res_max: float = 1.0

  def __post_init__(self):
    for name in ("horizon", "demand_max", "price", "rate_max", "res_max"):
      if not getattr(self, name) > 0:
        raise ValueError(f"The scale {name} must be positive.")


def frame_width(max_customers: int) -> int:
  """The number of features of one encoded interval."""
  return SLOT_FEATURES * max_customers + 1


def slot_order(snapshot: MarketSnapshot) -> tuple[int, ...]:
  """The customer ids in slot order: by arrival, then id."""
  return tuple(
      customer.customer_id
      for customer in sorted(
          snapshot.customers, key=lambda c: (c.arrival, c.customer_id)
      )
  )


def encode_frames(
    frames: Sequence[MarketSnapshot],
    max_customers: int,
    *,
    scales: FeatureScales,
) -> torch.Tensor:
  """Encodes decision-time snapshots into a (len(frames), width) tensor.

  Each customer slot holds arrival, demand, decay rate, deadline, unserved
  energy and accumulated decay. The last column is the RES output.

  Args:
      frames: The snapshots of consecutive intervals.
      max_customers: The number of customer slots.
      scales: The normalization constants.

  Returns:
      The encoded frames.

  Raises:
      SlotOverflowError: If a snapshot has more customers than slots.
  """
  encoded = np.zeros((len(frames), frame_width(max_customers)))
  for row, snapshot in enumerate(frames):
    if len(snapshot.customers) > max_customers:
      raise SlotOverflowError(
          f"{len(snapshot.customers)} customers are active at"
          f" t={snapshot.t}, only {max_customers} slots exist."
      )
    by_id = {customer.customer_id: customer for customer in snapshot.customers}
    for slot, customer_id in enumerate(slot_order(snapshot)):
      customer = by_id[customer_id]
      offset = slot * SLOT_FEATURES
      encoded[row, offset : offset + SLOT_FEATURES] = (
          customer.arrival / scales.horizon,
          customer.demand / scales.demand_max,
          customer.crit_rate / scales.rate_max,
          customer.deadline / scales.horizon,
          customer.unserved / scales.demand_max,
          customer.crit_rate * (snapshot.t - customer.arrival) / scales.price,
      )
    encoded[row, -1] = snapshot.res.r_p / scales.res_max
  return torch.from_numpy(encoded).to(DTYPE)


def encode_state(
    state: IhrMarketState, max_customers: int, *, scales: FeatureScales
) -> torch.Tensor:
  """Encodes the history of a market for intervals 1..t."""
  return encode_frames(state.frames(), max_customers, scales=scales)


def critic_features(frames: torch.Tensor, horizon: int) -> torch.Tensor:
  """Appends the normalized interval index to every encoded frame."""
  t = torch.arange(1, frames.shape[0] + 1, dtype=DTYPE).unsqueeze(1)
  return torch.cat([frames, t / horizon], dim=1)


def _init_uniform(module: nn.Module, rng: np.random.Generator) -> None:
  """Draws every weight and bias uniformly in +-sqrt(1 / fan_in)."""
  with torch.no_grad():
    for layer in module.modules():
      if isinstance(layer, (nn.Conv1d, nn.Linear)):
        fan_in = layer.weight[0].numel()
        bound = math.sqrt(1.0 / fan_in)
        for param in (layer.weight, layer.bias):
          param.copy_(
              torch.from_numpy(rng.uniform(-bound, bound, size=param.shape))
          )


@dataclasses.dataclass(frozen=True)
class TcnConfig:
  """The architecture of the temporal convolution network.

  Attributes:
      n_blocks: The number of residual blocks.
      n_filters: The number of filters per convolution.
      kernel_size: The convolution kernel size.
      dropout: The dropout rate during training.
      dilation_base: Block i uses dilation dilation_base**i.
  """

  n_blocks: int = 3
  n_filters: int = 4
  kernel_size: int = 3
  dropout: float = 0.1
  dilation_base: int = 4

  def __post_init__(self):
    if self.n_blocks < 1 or self.n_filters < 1 or self.kernel_size < 1:
      raise ValueError("Blocks, filters and kernel size must be at least 1.")
    if self.dilation_base < 1:
      raise ValueError(f"Invalid dilation base {self.dilation_base}.")
    if not 0.0 <= self.dropout < 1.0:
      raise ValueError(f"The dropout rate must be in [0, 1), {self.dropout}.")


class TemporalBlock(nn.Module):
  """Two dilated causal convolutions with a residual connection."""

  def __init__(
      self,
      *,
      n_inputs: int,
      n_outputs: int,
      kernel_size: int,
      dilation: int,
  ):
    super().__init__()
    self.padding = (kernel_size - 1) * dilation
    self.conv1 = nn.Conv1d(
        n_inputs, n_outputs, kernel_size, dilation=dilation, dtype=DTYPE
    )
    self.conv2 = nn.Conv1d(
        n_outputs, n_outputs, kernel_size, dilation=dilation, dtype=DTYPE
    )
    self.downsample = (
        nn.Conv1d(n_inputs, n_outputs, 1, dtype=DTYPE)
        if n_inputs != n_outputs
        else None
    )

  def forward(
      self,
      x: torch.Tensor,
      masks: tuple[torch.Tensor, torch.Tensor] | None = None,
  ) -> torch.Tensor:
    out = torch.relu(self.conv1(F.pad(x, (self.padding, 0))))
    if masks is not None:
      out = out * masks[0]
    out = torch.relu(self.conv2(F.pad(out, (self.padding, 0))))
    if masks is not None:
      out = out * masks[1]
    residual = x if self.downsample is None else self.downsample(x)
    return torch.relu(out + residual)


class TemporalConvNet(nn.Module):
  """A causal TCN emitting one matching logit per customer slot and interval.

  Attributes:
      config: The architecture.
      n_inputs: The encoded frame width.
      n_outputs: The number of customer slots.
      version: Incremented on every parameter update.
  """

  def __init__(
      self,
      *,
      n_inputs: int,
      n_outputs: int,
      config: TcnConfig = TcnConfig(),
      rng: np.random.Generator | None = None,
  ):
    super().__init__()
    self.config = config
    self.n_inputs = n_inputs
    self.n_outputs = n_outputs
    self.version = 0
    self.blocks = nn.ModuleList(
        TemporalBlock(
            n_inputs=n_inputs if i == 0 else config.n_filters,
            n_outputs=config.n_filters,
            kernel_size=config.kernel_size,
            dilation=config.dilation_base**i,
        )
        for i in range(config.n_blocks)
    )
    self.head = nn.Linear(config.n_filters, n_outputs, dtype=DTYPE)
    _init_uniform(self, rng or np.random.default_rng(0))

  def forward(
      self,
      frames: torch.Tensor,
      masks: Sequence[torch.Tensor] | None = None,
  ) -> torch.Tensor:
    """Maps (t, n_inputs) frames to (t, n_outputs) logits."""
    if frames.ndim != 2 or frames.shape[1] != self.n_inputs:
      raise ShapeMismatchError(
          f"Expected frames of shape (t, {self.n_inputs}), got"
          f" {tuple(frames.shape)}."
      )
    length = frames.shape[0]
    x = frames.T.unsqueeze(0)
    for i, block in enumerate(self.blocks):
      block_masks = None
      if masks is not None:
        block_masks = (masks[2 * i][:, :length], masks[2 * i + 1][:, :length])
      x = block(x, block_masks)
    return self.head(x.squeeze(0).T)


def draw_dropout_masks(
    params: TemporalConvNet, horizon: int, rng: np.random.Generator
) -> tuple[torch.Tensor, ...]:
  """Draws inverted-dropout masks for a whole episode.

  The masks cover every interval up front, so prefixes of the episode see the
  same mask and causality holds in training mode.

  Args:
      params: The network.
      horizon: The number of intervals.
      rng: The random stream.

  Returns:
      Two (n_filters, horizon) masks per block.
  """
  rate = params.config.dropout
  shape = (params.config.n_filters, horizon)
  masks = []
  for _ in range(2 * params.config.n_blocks):
    keep = rng.random(shape) >= rate
    masks.append(torch.from_numpy(keep / (1.0 - rate)).to(DTYPE))
  return tuple(masks)


@dataclasses.dataclass
class TcnCache:
  """The intermediates of a forward pass.

  Attributes:
      frames: The input frames.
      logits: The pre-sigmoid outputs, attached to the autograd graph.
      masks: The dropout masks used, or None in evaluation mode.
      version: The parameter version the pass ran with.
  """

  frames: torch.Tensor
  logits: torch.Tensor
  masks: tuple[torch.Tensor, ...] | None
  version: int


def tcn_forward(
    params: TemporalConvNet,
    frames: torch.Tensor,
    *,
    train_mode: bool,
    masks: Sequence[torch.Tensor] | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[torch.Tensor, TcnCache]:
  """Runs the TCN and applies the sigmoid head.

  Args:
      params: The network.
      frames: The (t, width) encoded frames of intervals 1..t.
      train_mode: Whether dropout is active.
      masks: Pre-drawn dropout masks. Drawn from rng when omitted in training
        mode.
      rng: The random stream for dropout masks.

  Returns:
      The (t, n_outputs) probabilities, detached, and the cache for the
      backward pass.
  """
  if train_mode and params.config.dropout > 0:
    if masks is None:
      if rng is None:
        raise ValueError("Training mode needs dropout masks or a rng.")
      masks = draw_dropout_masks(params, frames.shape[0], rng)
    masks = tuple(masks)
  else:
    masks = None
  logits = params(frames, masks)
  cache = TcnCache(
      frames=frames, logits=logits, masks=masks, version=params.version
  )
  return torch.sigmoid(logits).detach(), cache


def bernoulli_log_prob(
    logits: torch.Tensor, bits: torch.Tensor, slot_mask: torch.Tensor
) -> torch.Tensor:
  """Computes sum m log p + (1 - m) log(1 - p) over the valid slots per row."""
  terms = bits * F.logsigmoid(logits) + (1.0 - bits) * F.logsigmoid(-logits)
  return (terms * slot_mask).sum(dim=-1)


def tcn_backward(
    params: TemporalConvNet,
    cache: TcnCache,
    *,
    bits: torch.Tensor,
    weights: torch.Tensor,
    slot_mask: torch.Tensor,
) -> tuple[torch.Tensor, ...]:
  """Differentiates the weighted log-probability of sampled bits.

  Args:
      params: The network the cache was produced with.
      cache: The forward cache.
      bits: The (t, n_outputs) sampled bits.
      weights: The (t,) or (t, n_outputs) weights of every log-probability.
      slot_mask: The (t, n_outputs) indicator of slots holding a customer.

  Returns:
      The gradient of sum_t sum_i w * log Bernoulli(m; p) for every parameter.

  Raises:
      StaleCacheError: If the parameters changed since the forward pass.
      ShapeMismatchError: If the tensors disagree with the cached logits.
  """
  if cache.version != params.version:
    raise StaleCacheError(
        f"The cache was built at version {cache.version}, the parameters are"
        f" at version {params.version}."
    )
  if bits.shape != cache.logits.shape or slot_mask.shape != bits.shape:
    raise ShapeMismatchError(
        f"Bits {tuple(bits.shape)} and mask {tuple(slot_mask.shape)} must"
        f" match the logits {tuple(cache.logits.shape)}."
    )
  if weights.ndim == 1:
    weights = weights.unsqueeze(1)
  terms = bits * F.logsigmoid(cache.logits) + (1.0 - bits) * F.logsigmoid(
      -cache.logits
  )
  surrogate = (terms * slot_mask * weights).sum()
  parameters = list(params.parameters())
  grads = torch.autograd.grad(
      surrogate, parameters, retain_graph=True, allow_unused=True
  )
  return tuple(
      torch.zeros_like(p) if g is None else g for p, g in zip(parameters, grads)
  )


@dataclasses.dataclass(frozen=True)
class CriticConfig:
  """The architecture of the critic.

  Attributes:
      hidden_sizes: The widths of the tanh hidden layers. Empty gives a linear
        critic.
  """

  hidden_sizes: tuple[int, ...] = (16,)


class CriticNet(nn.Module):
  """A feed-forward value estimate of the remaining welfare."""

  def __init__(
      self,
      *,
      n_inputs: int,
      config: CriticConfig = CriticConfig(),
      rng: np.random.Generator | None = None,
  ):
    super().__init__()
    self.config = config
    self.n_inputs = n_inputs
    self.version = 0
    widths = (n_inputs,) + tuple(config.hidden_sizes)
    self.hidden = nn.ModuleList(
        nn.Linear(widths[i], widths[i + 1], dtype=DTYPE)
        for i in range(len(widths) - 1)
    )
    self.output = nn.Linear(widths[-1], 1, dtype=DTYPE)
    _init_uniform(self, rng or np.random.default_rng(1))

  def forward(self, inputs: torch.Tensor) -> torch.Tensor:
    if inputs.ndim != 2 or inputs.shape[1] != self.n_inputs:
      raise ShapeMismatchError(
          f"Expected critic inputs of shape (k, {self.n_inputs}), got"
          f" {tuple(inputs.shape)}."
      )
    x = inputs
    for layer in self.hidden:
      x = torch.tanh(layer(x))
    return self.output(x).squeeze(1)


def critic_forward(params: CriticNet, inputs: torch.Tensor) -> torch.Tensor:
  """Returns the (k,) value estimates, detached."""
  with torch.no_grad():
    return params(inputs)


def critic_backward(
    params: CriticNet, inputs: torch.Tensor, upstream: torch.Tensor
) -> tuple[torch.Tensor, ...]:
  """Returns the gradient of sum_k upstream_k * V(inputs_k) per parameter."""
  values = params(inputs)
  if upstream.shape != values.shape:
    raise ShapeMismatchError(
        f"Upstream {tuple(upstream.shape)} does not match values"
        f" {tuple(values.shape)}."
    )
  parameters = list(params.parameters())
  grads = torch.autograd.grad((values * upstream).sum(), parameters)
  return tuple(grads)


@dataclasses.dataclass(frozen=True)
class AdamState:
  """A snapshot of the ADAM moments.

  Attributes:
      step: The number of updates applied.
      learning_rate: The step size.
      beta1: The first-moment decay.
      beta2: The second-moment decay.
      epsilon: The denominator stabilizer.
      first_moments: The first moment of every parameter.
      second_moments: The second moment of every parameter.
  """

  step: int
  learning_rate: float
  beta1: float
  beta2: float
  epsilon: float
  first_moments: tuple[torch.Tensor, ...]
  second_moments: tuple[torch.Tensor, ...]


class AdamOptimizer:
  """Bias-corrected ADAM over the parameters of one network.

  Ascent adds the step, descent subtracts it. Gradients are supplied
  explicitly rather than read from `.grad`.
  """

  def __init__(
      self,
      params: nn.Module,
      *,
      learning_rate: float = LEARNING_RATE_PRESETS["default"],
      beta1: float = _DEFAULT_BETA1,
      beta2: float = _DEFAULT_BETA2,
      epsilon: float = _DEFAULT_EPSILON,
      direction: str = DESCENT,
  ):
    if direction not in (ASCENT, DESCENT):
      raise ValueError(f"Unknown direction: {direction}.")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
      raise ValueError(f"Decay rates must be in [0, 1), got {beta1}, {beta2}.")
    if learning_rate <= 0 or epsilon <= 0:
      raise ValueError("The learning rate and epsilon must be positive.")
    self.params = params
    self.direction = direction
    self._parameters = list(params.parameters())
    self._optimizer = torch.optim.Adam(
        self._parameters,
        lr=learning_rate,
        betas=(beta1, beta2),
        eps=epsilon,
        maximize=direction == ASCENT,
    )
    self._steps = 0

  @property
  def step_count(self) -> int:
    return self._steps

  def step(self, grads: Sequence[torch.Tensor]) -> None:
    """Applies one update.

    Args:
        grads: One gradient per parameter, in parameter order.

    Raises:
        ShapeMismatchError: If the gradients do not align with the parameters.
        NonFiniteGradientError: If a gradient has a NaN or infinity.
    """
    if len(grads) != len(self._parameters):
      raise ShapeMismatchError(
          f"Got {len(grads)} gradients for {len(self._parameters)} parameters."
      )
    for param, grad in zip(self._parameters, grads):
      if grad.shape != param.shape:
        raise ShapeMismatchError(
            f"Gradient of shape {tuple(grad.shape)} for a parameter of shape"
            f" {tuple(param.shape)}."
        )
      if not torch.isfinite(grad).all():
        raise NonFiniteGradientError("The gradient has non-finite entries.")
    for param, grad in zip(self._parameters, grads):
      param.grad = grad.detach().clone().to(param.dtype)
    self._optimizer.step()
    self._optimizer.zero_grad(set_to_none=True)
    self._steps += 1
    self.params.version += 1

  @property
  def state(self) -> AdamState:
    group = self._optimizer.param_groups[0]
    first, second = [], []
    for param in self._parameters:
      slot = self._optimizer.state.get(param, {})
      first.append(slot.get("exp_avg", torch.zeros_like(param)).clone())
      second.append(slot.get("exp_avg_sq", torch.zeros_like(param)).clone())
    return AdamState(
        step=self._steps,
        learning_rate=group["lr"],
        beta1=group["betas"][0],
        beta2=group["betas"][1],
        epsilon=group["eps"],
        first_moments=tuple(first),
        second_moments=tuple(second),
    )

  def state_dict(self) -> dict[str, object]:
    return {"steps": self._steps, "optimizer": self._optimizer.state_dict()}

  def load_state_dict(self, state: Mapping[str, object]) -> None:
    self._steps = int(state["steps"])
    self._optimizer.load_state_dict(state["optimizer"])


def adam_step(
    optimizer: AdamOptimizer, grads: Sequence[torch.Tensor]
) -> AdamState:
  """Applies one ADAM update and returns the new optimizer state."""
  optimizer.step(grads)
  return optimizer.state


def flat_norm(grads: Sequence[torch.Tensor]) -> float:
  """The Euclidean norm of a list of gradients."""
  return float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads)))


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params: nn.Module,
    analytic: Sequence[torch.Tensor],
    *,
    epsilon: float = _FINITE_DIFFERENCE_STEP,
) -> float:
  """Compares analytic gradients with central finite differences.

  Args:
      loss_fn: Evaluates the scalar objective at the current parameters.
      params: The network whose parameters are perturbed in place.
      analytic: The analytic gradient per parameter.
      epsilon: The finite-difference step.

  Returns:
      ||analytic - numeric|| / max(||analytic||, ||numeric||), or 0 when both
      vanish.
  """
  numeric = []
  with torch.no_grad():
    for param in params.parameters():
      estimate = torch.zeros_like(param)
      flat_param = param.view(-1)
      flat_estimate = estimate.view(-1)
      for index in range(flat_param.numel()):
        original = flat_param[index].item()
        flat_param[index] = original + epsilon
        upper = float(loss_fn())
        flat_param[index] = original - epsilon
        lower = float(loss_fn())
        flat_param[index] = original
        flat_estimate[index] = (upper - lower) / (2.0 * epsilon)
      numeric.append(estimate)
  difference = flat_norm([a - n for a, n in zip(analytic, numeric)])
  scale = max(flat_norm(analytic), flat_norm(numeric))
  if scale == 0.0:
    return 0.0
  return difference / scale


def save_checkpoint(
    path: str,
    *,
    actor: TemporalConvNet,
    critic: CriticNet,
    actor_optimizer: AdamOptimizer | None = None,
    critic_optimizer: AdamOptimizer | None = None,
    epoch: int = 0,
    metadata: Mapping[str, object] | None = None,
) -> None:
  """Writes networks, optimizer moments and progress to a versioned file."""
  payload = {
      "version": CHECKPOINT_VERSION,
      "epoch": epoch,
      "actor": actor.state_dict(),
      "actor_version": actor.version,
      "critic": critic.state_dict(),
      "critic_version": critic.version,
      "actor_optimizer": (
          actor_optimizer.state_dict() if actor_optimizer else None
      ),
      "critic_optimizer": (
          critic_optimizer.state_dict() if critic_optimizer else None
      ),
      "metadata": dict(metadata or {}),
  }
  buffer = io.BytesIO()
  torch.save(payload, buffer)
  with tf.io.gfile.GFile(path, "wb") as file:
    file.write(buffer.getvalue())
  logging.info(f"Saved a checkpoint at epoch {epoch} to {path}.")


def load_checkpoint(path: str) -> dict[str, object]:
  """Reads a checkpoint payload.

  Args:
      path: The checkpoint file.

  Returns:
      The payload with the state dictionaries and progress.

  Raises:
      CheckpointError: If the file is missing, unreadable or of another
        version.
  """
  if not tf.io.gfile.exists(path):
    raise CheckpointError(f"The checkpoint {path} does not exist.")
  with tf.io.gfile.GFile(path, "rb") as file:
    data = file.read()
  try:
    payload = torch.load(io.BytesIO(data), weights_only=True)
  except Exception as error:
    raise CheckpointError(f"The checkpoint {path} is unreadable.") from error
  if payload.get("version") != CHECKPOINT_VERSION:
    raise CheckpointError(
        f"The checkpoint {path} has version {payload.get('version')}, expected"
        f" {CHECKPOINT_VERSION}."
    )
  return payload


def restore_networks(
    payload: Mapping[str, object],
    *,
    actor: TemporalConvNet,
    critic: CriticNet,
    actor_optimizer: AdamOptimizer | None = None,
    critic_optimizer: AdamOptimizer | None = None,
) -> None:
  """Loads a checkpoint payload into freshly built networks and optimizers."""
  actor.load_state_dict(payload["actor"])
  critic.load_state_dict(payload["critic"])
  actor.version = int(payload["actor_version"])
  critic.version = int(payload["critic_version"])
  if actor_optimizer is not None and payload["actor_optimizer"] is not None:
    actor_optimizer.load_state_dict(payload["actor_optimizer"])
  if critic_optimizer is not None and payload["critic_optimizer"] is not None:
    critic_optimizer.load_state_dict(payload["critic_optimizer"])
