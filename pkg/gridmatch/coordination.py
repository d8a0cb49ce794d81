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

"""A hierarchical coordination module of the GridMatch package."""

import collections
import dataclasses
import math
import os
from typing import Final, Mapping, Sequence
from absl import logging
import numpy as np
import pandas as pd
import tensorflow as tf
from tqdm import tqdm
from gridmatch import matching_market
from gridmatch import matching_policy
from gridmatch import optimal_power_flow
from gridmatch import scenario_generation
from gridmatch.matching_market import IhrMarketState
from gridmatch.matching_market import MatchAmounts
from gridmatch.matching_market import ResState
from gridmatch.matching_market import Supply
from gridmatch.network_model import IhrPartition
from gridmatch.network_model import NetworkModel
from gridmatch.optimal_power_flow import IhrReport
from gridmatch.optimal_power_flow import MarketPrices
from gridmatch.optimal_power_flow import OpfSolution
from gridmatch.optimal_power_flow import SolverConfig

DECENTRALIZED: Final[str] = "decentralized"
CENTRALIZED: Final[str] = "centralized"
MODES: Final[tuple[str, ...]] = (DECENTRALIZED, CENTRALIZED)
POOLED_MARKET: Final[int] = 0
_TOLERANCE: Final[float] = 1e-9
_WELFARE_FILE: Final[str] = "welfare.csv"
_VOLTAGE_FILE: Final[str] = "voltage.csv"
_CURTAILMENT_FILE: Final[str] = "curtailment.csv"
_VIOLATIONS_FILE: Final[str] = "violations.csv"
_CAUSE_CURTAILMENT: Final[str] = "curtailment"
_CAUSE_OPF_FAILURE: Final[str] = "opf-failure"


class RedispatchError(Exception):
  """Error when a curtailment exceeds the curtailable grid energy."""

  pass


@dataclasses.dataclass(frozen=True)
class DeadlineViolation:
  """A customer that left at its deadline without full service.

  Attributes:
      t: The interval.
      ihr_id: The customer's IHR.
      customer_id: The customer.
      unserved: The energy left unserved in kWh.
      cause: Why its grid match was removed.
  """

  t: int
  ihr_id: int
  customer_id: int
  unserved: float
  cause: str


@dataclasses.dataclass(frozen=True)
class Redispatch:
  """The outcome of applying a curtailment to a match.

  Attributes:
      match: The match after the cut.
      returned: The customers whose grid match was reduced.
      violations: The returned customers that are at their deadline.
  """

  match: MatchAmounts
  returned: tuple[int, ...]
  violations: tuple[int, ...]


def redispatch(
    state: IhrMarketState,
    m: MatchAmounts,
    p_c: float,
    delta_t: float,
    *,
    customer_filter: frozenset[int] | None = None,
) -> Redispatch:
  """Cuts grid matches in ascending willingness until p_C * delta_t is removed.

  The cut energy stays unserved on the customer and is offered again in later
  intervals. Customers at their deadline whose match is cut are reported as
  violations.

  Args:
      state: The market at decision time.
      m: The match requested by the IHR.
      p_c: The curtailment in kW.
      delta_t: The interval length in hours.
      customer_filter: Restricts the cut to these customers.

  Returns:
      The reduced match with the returned and violating customers.

  Raises:
      RedispatchError: If the curtailment exceeds the curtailable energy.
  """
  if p_c < 0:
    raise RedispatchError(f"The curtailment must be non-negative, got {p_c}.")
  to_cut = p_c * delta_t
  if to_cut <= _TOLERANCE:
    return Redispatch(match=m, returned=(), violations=())
  candidates = [
      customer
      for customer in state.active
      if m.amount(Supply.GRID, customer.customer_id) > 0
      and (customer_filter is None or customer.customer_id in customer_filter)
  ]
  curtailable = sum(m.amount(Supply.GRID, c.customer_id) for c in candidates)
  if to_cut > curtailable + _TOLERANCE:
    raise RedispatchError(
        f"{to_cut} kWh must be curtailed at t={state.t}, only {curtailable}"
        " kWh are matched from the grid."
    )
  candidates.sort(
      key=lambda c: (
          matching_market.willingness(state.price, c, state.t),
          c.customer_id,
      )
  )
  entries = dict(m.entries)
  returned, violations = [], []
  for customer in candidates:
    if to_cut <= _TOLERANCE:
      break
    key = (Supply.GRID, customer.customer_id)
    cut = min(entries[key], to_cut)
    to_cut -= cut
    remaining = entries[key] - cut
    if remaining > _TOLERANCE:
      entries[key] = remaining
    else:
      del entries[key]
    returned.append(customer.customer_id)
    if customer.deadline == state.t:
      violations.append(customer.customer_id)
  return Redispatch(
      match=MatchAmounts(entries),
      returned=tuple(returned),
      violations=tuple(violations),
  )


@dataclasses.dataclass(frozen=True)
class GridContext:
  """What the central agent knows about the network.

  Attributes:
      reduced: The reduced IHR network.
      partition: The IHR partition.
      prices: The central agent's prices.
      delta_t: The interval length in hours.
      solver: The OPF solver settings.
  """

  reduced: NetworkModel
  partition: IhrPartition
  prices: MarketPrices
  delta_t: float
  solver: SolverConfig = SolverConfig()


def make_grid_context(
    net: NetworkModel,
    part: IhrPartition,
    prices: MarketPrices,
    *,
    delta_t: float,
    solver: SolverConfig = SolverConfig(),
) -> GridContext:
  return GridContext(
      reduced=optimal_power_flow.reduce_network(net, part),
      partition=part,
      prices=prices,
      delta_t=delta_t,
      solver=solver,
  )


@dataclasses.dataclass(frozen=True)
class IntervalResult:
  """The outcome of one interval of the hierarchy.

  Attributes:
      t: The interval.
      pre_welfare: The welfare of the requested matches per IHR in $.
      post_welfare: The welfare after curtailment per IHR in $.
      curtailment: The curtailment per IHR in kW.
      solution: The OPF solution, or None when the OPF failed.
      violations: The customers that left unserved at their deadline.
      opf_failed: Whether the interval fell back to zero grid draw.
  """

  t: int
  pre_welfare: Mapping[int, float]
  post_welfare: Mapping[int, float]
  curtailment: Mapping[int, float]
  solution: OpfSolution | None
  violations: tuple[DeadlineViolation, ...]
  opf_failed: bool = False


def _welfare_by_ihr(
    state: IhrMarketState, m: MatchAmounts, ihr_ids: Sequence[int]
) -> dict[int, float]:
  totals = {ihr_id: 0.0 for ihr_id in ihr_ids}
  for record in matching_market.match_records(state, m):
    totals[record.ihr] = totals.get(record.ihr, 0.0) + record.welfare
  return totals


def _centralized_reports(
    state: IhrMarketState,
    m: MatchAmounts,
    delta_t: float,
    ihr_ids: Sequence[int],
    local: Mapping[int, tuple[ResState, float]],
) -> list[IhrReport]:
  consumption = collections.defaultdict(float)
  for customer in state.active:
    consumption[customer.ihr_id] += m.total_for(customer.customer_id)
  res_used = m.supply_total(Supply.RES)
  res_total = sum(res.r_p for res, _ in local.values())
  reports = []
  for ihr_id in ihr_ids:
    res, base_q = local[ihr_id]
    share = res.r_p / res_total if res_total > 0 else 0.0
    caps = matching_market.reactive_caps_for(res, base_q)
    reports.append(
        IhrReport(
            ihr_id=ihr_id,
            p_net=(consumption[ihr_id] - share * res_used) / delta_t,
            q_min=caps.q_min,
            q_max=caps.q_max,
        )
    )
  return reports


def run_interval(
    markets: Mapping[int, IhrMarketState],
    policies: Mapping[int, matching_policy.MatchingPolicy],
    grid: GridContext,
    *,
    rng: np.random.Generator,
    local: Mapping[int, tuple[ResState, float]] | None = None,
) -> tuple[dict[int, IhrMarketState], IntervalResult]:
  """Runs matching, the central OPF and the re-dispatch for one interval.

  Decentralized runs have one market per IHR. Centralized runs have a single
  market under POOLED_MARKET and need the local RES and reactive load of every
  IHR to attribute injections to the IHR nodes.

  Args:
      markets: The markets at decision time, all at the same interval.
      policies: The matching policy of every market.
      grid: The central agent's view of the network.
      rng: The random stream of stochastic policies.
      local: The RES and reactive load of every IHR, for centralized runs.

  Returns:
      The markets after service and the interval result.

  Raises:
      ValueError: If the markets are at different intervals.
  """
  intervals = {state.t for state in markets.values()}
  if len(intervals) != 1:
    raise ValueError(
        f"Markets are at different intervals: {sorted(intervals)}."
    )
  t = intervals.pop()
  ihr_ids = grid.partition.ihr_ids
  delta_t = grid.delta_t
  matches = {
      key: policies[key].decide(state, delta_t, rng).match
      for key, state in markets.items()
  }
  pre_welfare = {ihr_id: 0.0 for ihr_id in ihr_ids}
  for key, state in markets.items():
    for ihr_id, value in _welfare_by_ihr(state, matches[key], ihr_ids).items():
      pre_welfare[ihr_id] += value
  if local is None:
    reports = []
    for ihr_id in ihr_ids:
      caps = matching_market.reactive_capacities(markets[ihr_id])
      reports.append(
          IhrReport(
              ihr_id=ihr_id,
              p_net=matching_market.net_active_flow(matches[ihr_id], delta_t),
              q_min=caps.q_min,
              q_max=caps.q_max,
          )
      )
  else:
    reports = _centralized_reports(
        markets[POOLED_MARKET],
        matches[POOLED_MARKET],
        delta_t,
        ihr_ids,
        local,
    )
  instance = optimal_power_flow.build_instance(
      reports, grid.reduced, grid.partition, grid.prices, delta_t=delta_t
  )
  solution = None
  opf_failed = False
  try:
    solution = optimal_power_flow.solve(instance, grid.solver)
  except optimal_power_flow.OpfSolverError as error:
    logging.warning(
        f"Falling back to zero grid draw at t={t} after an OPF failure: {error}"
    )
    opf_failed = True
  curtailment = {ihr_id: 0.0 for ihr_id in ihr_ids}
  violations = []
  new_markets = {}
  post_welfare = {ihr_id: 0.0 for ihr_id in ihr_ids}
  for key, state in markets.items():
    m = matches[key]
    excused = ()
    cause = _CAUSE_CURTAILMENT
    if opf_failed:
      m = m.without(Supply.GRID)
      excused = tuple(
          c.customer_id
          for c in state.active
          if c.deadline == t
          and c.unserved - m.total_for(c.customer_id) > _TOLERANCE
      )
      cause = _CAUSE_OPF_FAILURE
    else:
      targets = ihr_ids if local is not None else (key,)
      for ihr_id in targets:
        p_c = solution.p_c.get(ihr_id, 0.0)
        if p_c <= _TOLERANCE:
          continue
        members = None
        if local is not None:
          members = frozenset(
              c.customer_id for c in state.active if c.ihr_id == ihr_id
          )
          grid_energy = sum(m.amount(Supply.GRID, cid) for cid in members)
          if p_c * delta_t > grid_energy + _TOLERANCE:
            logging.warning(
                f"IHR {ihr_id} is curtailed {p_c * delta_t:.6f} kWh beyond"
                f" its {grid_energy:.6f} kWh of grid matches at t={t}."
            )
            p_c = grid_energy / delta_t
        cut = redispatch(state, m, p_c, delta_t, customer_filter=members)
        m = cut.match
        excused += cut.violations
        curtailment[ihr_id] = p_c
    for customer in state.active:
      unserved = customer.unserved - m.total_for(customer.customer_id)
      if customer.customer_id in excused and unserved > _TOLERANCE:
        violations.append(
            DeadlineViolation(
                t=t,
                ihr_id=customer.ihr_id,
                customer_id=customer.customer_id,
                unserved=unserved,
                cause=cause,
            )
        )
    for ihr_id, value in _welfare_by_ihr(state, m, ihr_ids).items():
      post_welfare[ihr_id] += value
    new_markets[key], _ = matching_market.apply_match(
        state, m, delta_t, excused=excused
    )
  for violation in violations:
    logging.warning(
        f"Customer {violation.customer_id} of IHR {violation.ihr_id} left at"
        f" t={t} with {violation.unserved:.4f} kWh unserved"
        f" ({violation.cause})."
    )
  return new_markets, IntervalResult(
      t=t,
      pre_welfare=pre_welfare,
      post_welfare=post_welfare,
      curtailment=curtailment,
      solution=solution,
      violations=tuple(violations),
      opf_failed=opf_failed,
  )


@dataclasses.dataclass(frozen=True)
class DayReport:
  """The outcome of a full day of the hierarchy.

  Attributes:
      mode: The market model, decentralized or centralized.
      ihr_ids: The IHRs.
      node_of: The reduced-network node of every IHR.
      intervals: The result of every interval.
  """

  mode: str
  ihr_ids: tuple[int, ...]
  node_of: Mapping[int, int]
  intervals: tuple[IntervalResult, ...]

  def welfare_by_ihr(self) -> dict[int, float]:
    return {
        ihr_id: float(sum(r.post_welfare[ihr_id] for r in self.intervals))
        for ihr_id in self.ihr_ids
    }

  @property
  def total_welfare(self) -> float:
    return float(sum(self.welfare_by_ihr().values()))

  @property
  def violations(self) -> tuple[DeadlineViolation, ...]:
    return tuple(v for r in self.intervals for v in r.violations)

  def welfare_frame(self) -> pd.DataFrame:
    return pd.DataFrame(
        [
            (r.t, ihr_id, r.pre_welfare[ihr_id], r.post_welfare[ihr_id])
            for r in self.intervals
            for ihr_id in self.ihr_ids
        ],
        columns=["t", "ihr", "pre", "post"],
    )

  def voltage_frame(self) -> pd.DataFrame:
    rows = []
    for r in self.intervals:
      if r.solution is None:
        continue
      for node, v_sq in sorted(r.solution.v_sq.items()):
        rows.append((r.t, node, v_sq))
    return pd.DataFrame(rows, columns=["t", "node", "v_sq"])

  def curtailment_frame(self) -> pd.DataFrame:
    return pd.DataFrame(
        [
            (r.t, ihr_id, r.curtailment[ihr_id])
            for r in self.intervals
            for ihr_id in self.ihr_ids
        ],
        columns=["t", "ihr", "kw"],
    )

  def violations_frame(self) -> pd.DataFrame:
    return pd.DataFrame(
        [dataclasses.astuple(v) for v in self.violations],
        columns=["t", "ihr", "customer", "unserved_kwh", "cause"],
    )


def run_day(
    data: scenario_generation.EpisodeData,
    policies: Mapping[int, matching_policy.MatchingPolicy],
    grid: GridContext,
    *,
    mode: str = DECENTRALIZED,
    rng: np.random.Generator,
) -> DayReport:
  """Runs the matching markets and the central agent over a whole day.

  Args:
      data: The day's scenario.
      policies: One policy per IHR, or one under POOLED_MARKET for the
        centralized model.
      grid: The central agent's view of the network.
      mode: decentralized or centralized.
      rng: The random stream of stochastic policies.

  Returns:
      The per-interval results.

  Raises:
      ValueError: If the mode is unknown or a policy is missing.
  """
  if mode not in MODES:
    raise ValueError(f"Unknown market model: {mode}.")
  if not math.isclose(data.delta_t, grid.delta_t):
    raise ValueError(
        f"The scenario uses {data.delta_t} h intervals, the grid"
        f" {grid.delta_t} h."
    )
  if mode == CENTRALIZED:
    episodes = {POOLED_MARKET: data.pooled()}
  else:
    episodes = {ihr_id: data.for_ihr(ihr_id) for ihr_id in data.ihr_ids}
  missing = set(episodes) - set(policies)
  if missing:
    raise ValueError(f"No policy for markets {sorted(missing)}.")
  for key in episodes:
    policies[key].begin_episode(data.horizon, rng)
  markets = {key: episode.start() for key, episode in episodes.items()}
  results = []
  for index in tqdm(range(data.horizon), desc=f"Running a {mode} day"):
    markets = {
        key: episodes[key].advance(state) for key, state in markets.items()
    }
    local = None
    if mode == CENTRALIZED:
      local = {
          ihr_id: (data.res[ihr_id][index], data.base_q[ihr_id][index])
          for ihr_id in data.ihr_ids
      }
    markets, result = run_interval(
        markets, policies, grid, rng=rng, local=local
    )
    results.append(result)
  report = DayReport(
      mode=mode,
      ihr_ids=tuple(grid.partition.ihr_ids),
      node_of=dict(grid.partition.interconnect),
      intervals=tuple(results),
  )
  logging.info(
      f"The {mode} day ended with welfare {report.total_welfare:.4f} $ and"
      f" {len(report.violations)} deadline violations."
  )
  return report


def write_day_report(report: DayReport, output_directory: str) -> None:
  """Writes the welfare, voltage, curtailment and violation series."""
  tf.io.gfile.makedirs(output_directory)
  for filename, frame in (
      (_WELFARE_FILE, report.welfare_frame()),
      (_VOLTAGE_FILE, report.voltage_frame()),
      (_CURTAILMENT_FILE, report.curtailment_frame()),
      (_VIOLATIONS_FILE, report.violations_frame()),
  ):
    with tf.io.gfile.GFile(
        os.path.join(output_directory, filename), "w"
    ) as file:
      frame.to_csv(file, index=False, float_format="%.10g")
