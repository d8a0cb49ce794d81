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

"""A discrete matching policy module of the GridMatch package."""

import dataclasses
import math
from typing import Final, Mapping
from absl import logging
import cvxpy as cp
import numpy as np
from gridmatch import matching_market
from gridmatch.matching_market import Customer
from gridmatch.matching_market import IhrEpisode
from gridmatch.matching_market import IhrMarketState
from gridmatch.matching_market import MatchAmounts
from gridmatch.matching_market import Supply

_ORACLE_TOLERANCE: Final[float] = 1e-9
_ORACLE_SOLVER_OPTIONS: Final[Mapping[str, float]] = {
    "tol_gap_abs": 1e-9,
    "tol_gap_rel": 1e-9,
    "tol_feas": 1e-9,
}


class OracleSolverError(Exception):
  """Error when the hindsight linear program cannot be solved."""

  pass


@dataclasses.dataclass(frozen=True)
class MatchProbabilities:
  """Per-customer matching probabilities.

  Attributes:
      probs: A mapping from customer id to a probability in (0, 1).
  """

  probs: Mapping[int, float]

  def __post_init__(self):
    for customer_id, prob in self.probs.items():
      if not 0.0 < prob < 1.0:
        raise ValueError(
            f"Customer {customer_id} has probability {prob} outside (0, 1)."
        )


@dataclasses.dataclass(frozen=True)
class DiscreteMatch:
  """Per-customer match bits.

  Attributes:
      bits: A mapping from customer id to 0 or 1.
      log_prob: The log-probability of the bits under the sampling
        distribution. Zero for deterministic decisions.
  """

  bits: Mapping[int, int]
  log_prob: float = 0.0


def sample_discrete(
    probs: MatchProbabilities, rng: np.random.Generator
) -> DiscreteMatch:
  """Draws independent Bernoulli bits in ascending customer order.

  Args:
      probs: The matching probabilities.
      rng: The random stream.

  Returns:
      The sampled bits with their log-probability.
  """
  customer_ids = sorted(probs.probs)
  if not customer_ids:
    return DiscreteMatch(bits={}, log_prob=0.0)
  p = np.array([probs.probs[cid] for cid in customer_ids])
  bits = (rng.random(len(customer_ids)) < p).astype(int)
  log_prob = float(np.sum(np.where(bits == 1, np.log(p), np.log1p(-p))))
  return DiscreteMatch(
      bits={cid: int(bit) for cid, bit in zip(customer_ids, bits)},
      log_prob=log_prob,
  )


def priority_order(state: IhrMarketState) -> list[Customer]:
  """Orders customers by descending willingness, deadline, then id."""
  return sorted(
      state.active,
      key=lambda c: (
          -matching_market.willingness(state.price, c, state.t),
          c.deadline,
          c.customer_id,
      ),
  )


def allocate_res_first(
    bits: DiscreteMatch, state: IhrMarketState, delta_t: float
) -> MatchAmounts:
  """Serves bit-1 customers RES first, then gives leftover RES to the rest.

  Args:
      bits: The match bits, keyed by exactly the active customers.
      state: The market at decision time.
      delta_t: The interval length in hours.

  Returns:
      The continuous match.

  Raises:
      ValueError: If the bits are not keyed by the active customers.
  """
  active_ids = {customer.customer_id for customer in state.active}
  if set(bits.bits) != active_ids:
    raise ValueError(
        f"Bits for {sorted(bits.bits)} do not match the active customers"
        f" {sorted(active_ids)}."
    )
  order = priority_order(state)
  res_left = state.res.r_p * delta_t
  entries = {}
  for customer in order:
    if not bits.bits[customer.customer_id]:
      continue
    from_res = min(customer.unserved, res_left)
    res_left -= from_res
    from_grid = customer.unserved - from_res
    if from_res > 0:
      entries[(Supply.RES, customer.customer_id)] = from_res
    if from_grid > 0:
      entries[(Supply.GRID, customer.customer_id)] = from_grid
  for customer in order:
    if res_left <= 0:
      break
    if bits.bits[customer.customer_id]:
      continue
    from_res = min(customer.unserved, res_left)
    res_left -= from_res
    if from_res > 0:
      entries[(Supply.RES, customer.customer_id)] = from_res
  return MatchAmounts(entries)


def deadline_override(
    m: MatchAmounts, state: IhrMarketState, delta_t: float
) -> MatchAmounts:
  """Tops up every customer at its deadline from the grid.

  An unallocated deadline customer receives its full unserved energy from the
  grid. A deadline customer that only received part of its need from excess
  RES receives the remainder from the grid. Everyone else is unchanged.

  Args:
      m: The match produced by allocate_res_first.
      state: The market at decision time.
      delta_t: The interval length in hours.

  Returns:
      A match that leaves no customer at its deadline unserved.
  """
  del delta_t
  entries = dict(m.entries)
  for customer in state.active:
    if customer.deadline != state.t:
      continue
    shortfall = customer.unserved - m.total_for(customer.customer_id)
    if shortfall > matching_market.SERVED_THRESHOLD:
      key = (Supply.GRID, customer.customer_id)
      entries[key] = entries.get(key, 0.0) + shortfall
  return MatchAmounts(entries)


def compose_match(
    bits: DiscreteMatch, state: IhrMarketState, delta_t: float
) -> MatchAmounts:
  """Applies the RES-first allocation and the deadline override to bits."""
  return deadline_override(
      allocate_res_first(bits, state, delta_t), state, delta_t
  )


def match_on_arrival(state: IhrMarketState, delta_t: float) -> MatchAmounts:
  """Serves every active customer in full, RES first, then from the grid."""
  bits = DiscreteMatch(bits={c.customer_id: 1 for c in state.active})
  return allocate_res_first(bits, state, delta_t)


@dataclasses.dataclass(frozen=True)
class PolicyDecision:
  """A policy's decision for one interval.

  Attributes:
      match: The continuous match to apply.
      bits: The discrete decision the match was derived from.
      probs: The probabilities the bits were sampled from, if any.
  """

  match: MatchAmounts
  bits: DiscreteMatch
  probs: MatchProbabilities | None = None


class MatchingPolicy:
  """A per-interval matching rule of one market."""

  name: str = "policy"

  def begin_episode(self, horizon: int, rng: np.random.Generator) -> None:
    """Prepares per-episode randomness. Stateless policies ignore it."""
    del horizon, rng

  def decide(
      self,
      state: IhrMarketState,
      delta_t: float,
      rng: np.random.Generator,
  ) -> PolicyDecision:
    raise NotImplementedError


class MatchOnArrivalPolicy(MatchingPolicy):
  """Serves every customer fully in the interval it arrives."""

  name = "MA"

  def decide(
      self,
      state: IhrMarketState,
      delta_t: float,
      rng: np.random.Generator,
  ) -> PolicyDecision:
    del rng
    bits = DiscreteMatch(bits={c.customer_id: 1 for c in state.active})
    return PolicyDecision(
        match=match_on_arrival(state, delta_t), bits=bits, probs=None
    )


@dataclasses.dataclass(frozen=True)
class EpisodeOutcome:
  """The result of running a policy over an episode.

  Attributes:
      welfare: The welfare of each interval in $.
      schedule: The match applied at each interval.
      records: The audited matches.
  """

  welfare: tuple[float, ...]
  schedule: Mapping[int, MatchAmounts]
  records: tuple[matching_market.MatchRecord, ...]

  @property
  def total_welfare(self) -> float:
    return float(sum(self.welfare))


def run_episode(
    policy: MatchingPolicy,
    episode: IhrEpisode,
    *,
    delta_t: float,
    rng: np.random.Generator,
) -> EpisodeOutcome:
  """Runs a policy on a market without grid interaction.

  Args:
      policy: The matching policy.
      episode: The scenario of the market.
      delta_t: The interval length in hours.
      rng: The random stream of stochastic policies.

  Returns:
      The per-interval welfare and schedule.
  """
  policy.begin_episode(episode.horizon, rng)
  state = episode.start()
  welfare = []
  schedule = {}
  records = []
  for _ in range(episode.horizon):
    state = episode.advance(state)
    decision = policy.decide(state, delta_t, rng)
    records.extend(matching_market.match_records(state, decision.match))
    schedule[state.t] = decision.match
    state, value = matching_market.apply_match(state, decision.match, delta_t)
    welfare.append(value)
  return EpisodeOutcome(
      welfare=tuple(welfare), schedule=schedule, records=tuple(records)
  )


def offline_oracle(
    episode: IhrEpisode, delta_t: float
) -> tuple[float, dict[int, MatchAmounts]]:
  """Solves the hindsight matching problem as a linear program.

  Every customer is served in full within its window, RES use per interval is
  capped by availability, and welfare is maximized with all arrivals and RES
  known in advance.

  Args:
      episode: The complete scenario.
      delta_t: The interval length in hours.

  Returns:
      The optimal welfare in $ and the match of every interval.

  Raises:
      OracleSolverError: If the solver does not reach an optimum.
  """
  customers = episode.customers
  schedule = {t: MatchAmounts() for t in range(1, episode.horizon + 1)}
  if not customers:
    return 0.0, schedule
  cells = [
      (i, t)
      for i, customer in enumerate(customers)
      for t in range(customer.arrival, customer.deadline + 1)
  ]
  grid = cp.Variable(len(cells), nonneg=True)
  res = cp.Variable(len(cells), nonneg=True)
  pi = np.array([
      episode.price - customers[i].crit_rate * (t - customers[i].arrival)
      for i, t in cells
  ])
  constraints = []
  for i, customer in enumerate(customers):
    idx = [k for k, (j, _) in enumerate(cells) if j == i]
    constraints.append(cp.sum(grid[idx]) + cp.sum(res[idx]) == customer.demand)
  for t in range(1, episode.horizon + 1):
    idx = [k for k, (_, s) in enumerate(cells) if s == t]
    if idx:
      constraints.append(
          cp.sum(res[idx]) <= episode.res[t - 1].r_p * delta_t
      )
  objective = cp.Maximize(pi @ res + (pi - episode.price) @ grid)
  problem = cp.Problem(objective, constraints)
  try:
    problem.solve(solver=cp.CLARABEL, **_ORACLE_SOLVER_OPTIONS)
  except cp.error.SolverError as error:
    raise OracleSolverError(f"The hindsight LP failed: {error}") from error
  if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
    raise OracleSolverError(
        f"The hindsight LP ended with status {problem.status}."
    )
  if problem.status == cp.OPTIMAL_INACCURATE:
    logging.warning("The hindsight LP solution is inaccurate.")
  entries = {t: {} for t in schedule}
  for k, (i, t) in enumerate(cells):
    customer_id = customers[i].customer_id
    for supply, variable in ((Supply.GRID, grid), (Supply.RES, res)):
      value = float(variable.value[k])
      if value > _ORACLE_TOLERANCE:
        entries[t][(supply, customer_id)] = value
  schedule = {t: MatchAmounts(items) for t, items in entries.items()}
  welfare = float(problem.value)
  if not math.isfinite(welfare):
    raise OracleSolverError("The hindsight LP returned a non-finite value.")
  return welfare, schedule
