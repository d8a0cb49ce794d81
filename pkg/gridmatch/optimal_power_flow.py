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

"""An optimal power flow module of the GridMatch package.

The central agent sees every IHR as a single node at its interconnection bus
and solves the second-order-cone relaxation of the branch flow model. Grid
draw is priced at the real-time tariff and every kW of curtailed IHR request
carries a larger penalty, so curtailment only happens to restore line and
voltage limits.
"""

import dataclasses
import math
from typing import Final, Mapping, Sequence
from absl import logging
import cvxpy as cp
import pandas as pd
import tensorflow as tf
from gridmatch import network_model
from gridmatch.network_model import Bus
from gridmatch.network_model import IhrPartition
from gridmatch.network_model import Line
from gridmatch.network_model import NetworkModel
from gridmatch.network_model import PerUnitBase

STATUS_OPTIMAL: Final[str] = "optimal"
STATUS_INFEASIBLE: Final[str] = "infeasible"
STATUS_ITERATION_LIMIT: Final[str] = "iteration-limit"
CONSTRAINT_FAMILIES: Final[tuple[str, ...]] = ("voltage", "current", "reactive")
_DEFAULT_TOLERANCE: Final[float] = 1e-8
_DEFAULT_MAX_ITERATIONS: Final[int] = 200
_INSTANCE_COLUMNS: Final[tuple[str, ...]] = (
    "record",
    "node",
    "from_bus",
    "to_bus",
    "r",
    "x",
    "i_sq_max",
    "g_shunt",
    "b_shunt",
    "v_sq_min",
    "v_sq_max",
    "ihr",
    "p_net_kw",
    "q_min_kvar",
    "q_max_kvar",
)
_SOLUTION_COLUMNS: Final[tuple[str, ...]] = (
    "record",
    "node",
    "from_bus",
    "to_bus",
    "v_sq",
    "p_kw",
    "q_kvar",
    "i_sq",
    "ihr",
    "q_net_kvar",
    "p_c_kw",
)


class NetworkReductionError(Exception):
  """Error when a partition cannot be reduced to a radial IHR network."""

  pass


class OpfInstanceError(Exception):
  """Error when IHR reports do not form a valid OPF instance."""

  pass


class OpfSolverError(Exception):
  """Error when the interior-point solver does not return an optimum."""

  pass


class OpfInfeasibleError(OpfSolverError):
  """Error when the OPF has no feasible point.

  Attributes:
      binding: The constraint families whose relaxation restores feasibility.
  """

  def __init__(self, message: str, binding: Sequence[str] = ()):
    super().__init__(message)
    self.binding = tuple(binding)


class OpfIterationLimitError(OpfSolverError):
  """Error when the solver stops at its iteration budget."""

  pass


@dataclasses.dataclass(frozen=True)
class IhrReport:
  """What an IHR sends the central agent for one interval.

  Attributes:
      ihr_id: The IHR.
      p_net: The requested grid draw in kW.
      q_min: The lower reactive exchange limit in kVAr.
      q_max: The upper reactive exchange limit in kVAr.
  """

  ihr_id: int
  p_net: float
  q_min: float
  q_max: float

  def __post_init__(self):
    if self.q_min > self.q_max:
      raise OpfInstanceError(
          f"IHR {self.ihr_id} reports q_min {self.q_min} above q_max"
          f" {self.q_max}."
      )
    if not all(
        math.isfinite(value) for value in (self.p_net, self.q_min, self.q_max)
    ):
      raise OpfInstanceError(f"IHR {self.ihr_id} reports non-finite values.")


@dataclasses.dataclass(frozen=True)
class MarketPrices:
  """The central agent's prices.

  Attributes:
      tariff: The retail grid tariff in $/kWh seen by the IHR markets.
      lambda_rt: The real-time price of slack-bus energy in $/kWh.
      lambda_c: The penalty of curtailed IHR requests in $/kWh.
  """

  tariff: float = 0.12
  lambda_rt: float = 0.12
  lambda_c: float = 0.5

  def __post_init__(self):
    if self.tariff <= 0 or self.lambda_rt < 0:
      raise ValueError(
          f"Invalid prices: tariff {self.tariff}, lambda_rt {self.lambda_rt}."
      )


@dataclasses.dataclass(frozen=True)
class SolverConfig:
  """The interior-point termination settings.

  Attributes:
      tolerance: The primal/dual residual and relative gap tolerance.
      max_iterations: The iteration budget.
  """

  tolerance: float = _DEFAULT_TOLERANCE
  max_iterations: int = _DEFAULT_MAX_ITERATIONS

  def __post_init__(self):
    if self.tolerance <= 0 or self.max_iterations < 1:
      raise ValueError(
          f"Invalid solver settings: {self.tolerance}, {self.max_iterations}."
      )

  def options(self) -> dict[str, float]:
    return {
        "max_iter": self.max_iterations,
        "tol_gap_abs": self.tolerance,
        "tol_gap_rel": self.tolerance,
        "tol_feas": self.tolerance,
    }


def _tightened_bounds(
    buses: Sequence[Bus], delta: float, ihr_id: int
) -> tuple[float, float]:
  if len(buses) == 1:
    return buses[0].v_sq_min, buses[0].v_sq_max
  lower = (math.sqrt(max(bus.v_sq_min for bus in buses)) + delta) ** 2
  upper = (math.sqrt(min(bus.v_sq_max for bus in buses)) - delta) ** 2
  if lower >= upper:
    raise NetworkReductionError(
        f"The tolerance {delta} leaves IHR {ihr_id} no voltage range."
    )
  return lower, upper


def reduce_network(net: NetworkModel, part: IhrPartition) -> NetworkModel:
  """Collapses every IHR onto its interconnect bus.

  Inter-zone lines keep their impedance and limit, intra-zone lines are
  dropped and zone shunts and nominal loads are summed onto the IHR node.
  Multi-bus zones keep the intra-zone spread delta inside their bounds.

  Args:
      net: The full network.
      part: The IHR partition.

  Returns:
      A radial network over the slack bus and the interconnect buses.

  Raises:
      NetworkReductionError: If the reduction is not a radial tree or a zone
        has no voltage range left.
  """
  buses = [net.bus_by_id[net.slack_id]]
  for ihr_id in part.ihr_ids:
    members = [net.bus_by_id[b] for b in part.buses_of(ihr_id)]
    v_min, v_max = _tightened_bounds(members, part.delta, ihr_id)
    buses.append(
        Bus(
            bus_id=part.interconnect[ihr_id],
            g_shunt=sum(bus.g_shunt for bus in members),
            b_shunt=sum(bus.b_shunt for bus in members),
            v_sq_min=v_min,
            v_sq_max=v_max,
            nominal_p_kw=sum(bus.nominal_p_kw for bus in members),
            nominal_q_kvar=sum(bus.nominal_q_kvar for bus in members),
        )
    )
  lines = []
  for ihr_id in part.ihr_ids:
    node = part.interconnect[ihr_id]
    feeder = net.parent_line[node]
    parent = feeder.from_bus
    if parent != net.slack_id:
      parent = part.interconnect[part.zones[parent]]
    lines.append(
        Line(
            from_bus=parent,
            to_bus=node,
            r=feeder.r,
            x=feeder.x,
            i_sq_max=feeder.i_sq_max,
        )
    )
  try:
    reduced = NetworkModel(
        buses=tuple(sorted(buses, key=lambda bus: bus.bus_id)),
        lines=tuple(lines),
        slack_id=net.slack_id,
        base_mva=net.base_mva,
        base_kv=net.base_kv,
    )
  except (
      network_model.NonRadialNetworkError,
      network_model.NetworkFormatError,
  ) as error:
    raise NetworkReductionError(str(error)) from error
  logging.info(
      f"Reduced a {len(net.buses)}-bus network to {len(reduced.buses)} IHR"
      " nodes."
  )
  return reduced


@dataclasses.dataclass(frozen=True)
class OpfInstance:
  """A reduced-dimension OPF problem for one interval.

  Attributes:
      network: The reduced network.
      node_of: A mapping from IHR to its node in the reduced network.
      reports: The report of every IHR, in kW and kVAr.
      prices: The central agent's prices.
      delta_t: The interval length in hours.
  """

  network: NetworkModel
  node_of: Mapping[int, int]
  reports: Mapping[int, IhrReport]
  prices: MarketPrices
  delta_t: float

  @property
  def per_unit(self) -> PerUnitBase:
    return self.network.per_unit

  @property
  def ihr_ids(self) -> tuple[int, ...]:
    return tuple(sorted(self.node_of))

  @property
  def lambda_rt_pu(self) -> float:
    """The real-time price in $ per per-unit power over one interval."""
    return self.prices.lambda_rt * self.per_unit.power_kw * self.delta_t

  @property
  def lambda_c_pu(self) -> float:
    """The curtailment penalty in $ per per-unit power over one interval."""
    return self.prices.lambda_c * self.per_unit.power_kw * self.delta_t

  def p_net_pu(self, ihr_id: int) -> float:
    return self.per_unit.kw_to_pu(self.reports[ihr_id].p_net)

  def q_caps_pu(self, ihr_id: int) -> tuple[float, float]:
    report = self.reports[ihr_id]
    return (
        self.per_unit.kw_to_pu(report.q_min),
        self.per_unit.kw_to_pu(report.q_max),
    )


def build_instance(
    reports: Sequence[IhrReport],
    reduced: NetworkModel,
    part: IhrPartition,
    prices: MarketPrices,
    *,
    delta_t: float,
) -> OpfInstance:
  """Assembles the OPF instance of one interval.

  Args:
      reports: One report per IHR.
      reduced: The reduced network.
      part: The partition the network was reduced with.
      prices: The central agent's prices.
      delta_t: The interval length in hours.

  Returns:
      The instance.

  Raises:
      OpfInstanceError: If a report is missing or duplicated, an IHR has no
        node, or curtailment is not priced above grid energy.
  """
  if prices.lambda_c <= prices.lambda_rt:
    raise OpfInstanceError(
        f"The curtailment penalty {prices.lambda_c} must exceed the real-time"
        f" price {prices.lambda_rt}."
    )
  if delta_t <= 0:
    raise OpfInstanceError(f"The interval length must be positive: {delta_t}.")
  by_ihr = {}
  for report in reports:
    if report.ihr_id in by_ihr:
      raise OpfInstanceError(f"IHR {report.ihr_id} reported twice.")
    by_ihr[report.ihr_id] = report
  missing = set(part.ihr_ids) - set(by_ihr)
  if missing:
    raise OpfInstanceError(f"Missing reports for IHRs {sorted(missing)}.")
  unknown = set(by_ihr) - set(part.ihr_ids)
  if unknown:
    raise OpfInstanceError(f"Reports for unknown IHRs {sorted(unknown)}.")
  node_of = {ihr_id: part.interconnect[ihr_id] for ihr_id in part.ihr_ids}
  for ihr_id, node in node_of.items():
    if node not in reduced.bus_by_id:
      raise OpfInstanceError(
          f"IHR {ihr_id} has no node {node} in the reduced network."
      )
  return OpfInstance(
      network=reduced,
      node_of=node_of,
      reports=by_ihr,
      prices=prices,
      delta_t=delta_t,
  )


@dataclasses.dataclass(frozen=True)
class OpfSolution:
  """An OPF optimum.

  Attributes:
      p_g: The active slack injection in kW.
      q_g: The reactive slack injection in kVAr.
      p_flow: The sending-end active flow of every line in kW.
      q_flow: The sending-end reactive flow of every line in kVAr.
      v_sq: The squared voltage of every node, per-unit squared.
      i_sq: The squared current of every line, per-unit squared.
      q_net: The reactive exchange of every IHR in kVAr.
      p_c: The curtailment of every IHR in kW.
      objective: The distribution system cost in $.
      status: The solver outcome.
      per_unit: The per-unit system of the network.
      iterations: The number of interior-point iterations.
  """

  p_g: float
  q_g: float
  p_flow: Mapping[tuple[int, int], float]
  q_flow: Mapping[tuple[int, int], float]
  v_sq: Mapping[int, float]
  i_sq: Mapping[tuple[int, int], float]
  q_net: Mapping[int, float]
  p_c: Mapping[int, float]
  objective: float
  status: str = STATUS_OPTIMAL
  per_unit: PerUnitBase = PerUnitBase()
  iterations: int = 0

  @property
  def total_curtailment(self) -> float:
    return float(sum(self.p_c.values()))


def _build_problem(
    inst: OpfInstance, relaxed: frozenset[str] = frozenset()
) -> tuple[cp.Problem, dict[str, cp.Variable]]:
  net = inst.network
  node_ids = [bus.bus_id for bus in net.buses]
  node_index = {node: k for k, node in enumerate(node_ids)}
  line_index = {line.key: k for k, line in enumerate(net.lines)}
  ihr_index = {ihr_id: k for k, ihr_id in enumerate(inst.ihr_ids)}
  ihr_at = {node: ihr_id for ihr_id, node in inst.node_of.items()}
  v = cp.Variable(len(node_ids))
  p = cp.Variable(len(net.lines))
  q = cp.Variable(len(net.lines))
  i = cp.Variable(len(net.lines), nonneg=True)
  p_g = cp.Variable()
  q_g = cp.Variable()
  q_net = cp.Variable(len(ihr_index))
  p_c = cp.Variable(len(ihr_index), nonneg=True)

  def outflow(flow: cp.Variable, node: int):
    children = net.children[node]
    if not children:
      return 0.0
    return cp.sum(cp.hstack([flow[line_index[(node, c)]] for c in children]))

  slack = net.bus_by_id[net.slack_id]
  s = node_index[net.slack_id]
  constraints = [
      v[s] == 1.0,
      p_g == slack.g_shunt * v[s] + outflow(p, net.slack_id),
      q_g == -slack.b_shunt * v[s] + outflow(q, net.slack_id),
  ]
  for line in net.lines:
    h = line.to_bus
    k = line_index[line.key]
    bus = net.bus_by_id[h]
    parent = node_index[line.from_bus]
    demand_p, demand_q = 0.0, 0.0
    if h in ihr_at:
      j = ihr_index[ihr_at[h]]
      demand_p = inst.p_net_pu(ihr_at[h]) - p_c[j]
      demand_q = q_net[j]
    constraints += [
        p[k] - line.r * i[k]
        == demand_p + bus.g_shunt * v[node_index[h]] + outflow(p, h),
        q[k] - line.x * i[k]
        == demand_q - bus.b_shunt * v[node_index[h]] + outflow(q, h),
        v[node_index[h]]
        == v[parent]
        - 2.0 * (line.r * p[k] + line.x * q[k])
        + (line.r**2 + line.x**2) * i[k],
        cp.SOC(
            v[parent] + i[k],
            cp.hstack([2.0 * p[k], 2.0 * q[k], v[parent] - i[k]]),
        ),
    ]
    if "current" not in relaxed:
      constraints.append(i[k] <= line.i_sq_max)
    if "voltage" not in relaxed:
      constraints += [
          v[node_index[h]] >= bus.v_sq_min,
          v[node_index[h]] <= bus.v_sq_max,
      ]
  for ihr_id, j in ihr_index.items():
    constraints.append(p_c[j] <= max(inst.p_net_pu(ihr_id), 0.0))
    if "reactive" not in relaxed:
      q_min, q_max = inst.q_caps_pu(ihr_id)
      constraints += [q_net[j] >= q_min, q_net[j] <= q_max]
  objective = cp.Minimize(
      inst.lambda_rt_pu * p_g + inst.lambda_c_pu * cp.sum(p_c)
  )
  variables = {
      "v": v,
      "p": p,
      "q": q,
      "i": i,
      "p_g": p_g,
      "q_g": q_g,
      "q_net": q_net,
      "p_c": p_c,
  }
  return cp.Problem(objective, constraints), variables


def _run_solver(problem: cp.Problem, cfg: SolverConfig) -> str:
  try:
    problem.solve(solver=cp.CLARABEL, **cfg.options())
  except cp.error.SolverError as error:
    raise OpfSolverError(
        f"The interior-point solver failed: {error}"
    ) from error
  return problem.status


def diagnose_infeasibility(
    inst: OpfInstance, cfg: SolverConfig = SolverConfig()
) -> tuple[str, ...]:
  """Names the constraint families whose relaxation makes the OPF feasible.

  Returns all families when no single relaxation is enough.
  """
  binding = []
  for family in CONSTRAINT_FAMILIES:
    problem, _ = _build_problem(inst, frozenset({family}))
    try:
      status = _run_solver(problem, cfg)
    except OpfSolverError:
      continue
    if status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
      binding.append(family)
  return tuple(binding) or CONSTRAINT_FAMILIES


def solve(inst: OpfInstance, cfg: SolverConfig = SolverConfig()) -> OpfSolution:
  """Solves the SOC-relaxed branch flow OPF with curtailment.

  Minimizes lambda_rt * P_G + lambda_c * sum(p_C) subject to the slack and IHR
  node balances, the reactive capacities, the voltage drop, the voltage and
  current limits and the cones V_sq * I_sq >= P^2 + Q^2.

  Args:
      inst: The instance.
      cfg: The solver settings.

  Returns:
      The optimal dispatch with p_C >= 0.

  Raises:
      OpfInfeasibleError: If no dispatch satisfies the limits, naming the
        binding constraint families.
      OpfIterationLimitError: If the iteration budget runs out.
      OpfSolverError: On any other solver failure.
  """
  problem, variables = _build_problem(inst)
  status = _run_solver(problem, cfg)
  if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
    binding = diagnose_infeasibility(inst, cfg)
    raise OpfInfeasibleError(
        f"The OPF is infeasible. Binding families: {', '.join(binding)}.",
        binding=binding,
    )
  if status == cp.USER_LIMIT:
    raise OpfIterationLimitError(
        f"The OPF did not converge within {cfg.max_iterations} iterations."
    )
  if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
    raise OpfSolverError(f"The OPF ended with status {status}.")
  if status == cp.OPTIMAL_INACCURATE:
    logging.warning("The OPF solution is inaccurate.")
  base = inst.per_unit
  net = inst.network
  v = variables["v"].value
  p = variables["p"].value
  q = variables["q"].value
  i = variables["i"].value
  q_net = variables["q_net"].value
  p_c = variables["p_c"].value
  stats = problem.solver_stats
  solution = OpfSolution(
      p_g=base.pu_to_kw(float(variables["p_g"].value)),
      q_g=base.pu_to_kw(float(variables["q_g"].value)),
      p_flow={
          line.key: base.pu_to_kw(float(p[k]))
          for k, line in enumerate(net.lines)
      },
      q_flow={
          line.key: base.pu_to_kw(float(q[k]))
          for k, line in enumerate(net.lines)
      },
      v_sq={bus.bus_id: float(v[k]) for k, bus in enumerate(net.buses)},
      i_sq={line.key: float(i[k]) for k, line in enumerate(net.lines)},
      q_net={
          ihr_id: base.pu_to_kw(float(q_net[k]))
          for k, ihr_id in enumerate(inst.ihr_ids)
      },
      p_c={
          ihr_id: base.pu_to_kw(max(float(p_c[k]), 0.0))
          for k, ihr_id in enumerate(inst.ihr_ids)
      },
      objective=float(problem.value),
      status=STATUS_OPTIMAL,
      per_unit=base,
      iterations=int(stats.num_iters or 0) if stats else 0,
  )
  if solution.total_curtailment > 0:
    logging.warning(
        f"The OPF curtails {solution.total_curtailment:.4f} kW of IHR requests."
    )
  return solution


def soc_gap(sol: OpfSolution) -> float:
  """Returns the largest slack V_sq * I_sq - (P^2 + Q^2), per-unit."""
  gap = 0.0
  base = sol.per_unit
  for key, i_sq in sol.i_sq.items():
    p = base.kw_to_pu(sol.p_flow[key])
    q = base.kw_to_pu(sol.q_flow[key])
    gap = max(gap, sol.v_sq[key[0]] * i_sq - (p**2 + q**2))
  return gap


def residuals(inst: OpfInstance, sol: OpfSolution) -> dict[str, float]:
  """Evaluates the worst violation of every constraint family, per-unit.

  Args:
      inst: The instance.
      sol: Any candidate solution.

  Returns:
      The largest absolute violation of the slack and node balances, the
      voltage drop, the voltage bounds, the current limits, the reactive
      capacities, the curtailment bounds and the cones.
  """
  net = inst.network
  base = inst.per_unit
  ihr_at = {node: ihr_id for ihr_id, node in inst.node_of.items()}
  p = {key: base.kw_to_pu(value) for key, value in sol.p_flow.items()}
  q = {key: base.kw_to_pu(value) for key, value in sol.q_flow.items()}
  q_net = {h: base.kw_to_pu(value) for h, value in sol.q_net.items()}
  p_c = {h: base.kw_to_pu(value) for h, value in sol.p_c.items()}
  v, i = sol.v_sq, sol.i_sq
  report = {
      name: 0.0
      for name in (
          "p_balance",
          "q_balance",
          "v_drop",
          "v_bounds",
          "i_limit",
          "q_caps",
          "curtailment",
          "cone",
      )
  }

  def worsen(name: str, value: float) -> None:
    report[name] = max(report[name], abs(value))

  slack = net.bus_by_id[net.slack_id]
  feeders = net.children[net.slack_id]
  worsen(
      "p_balance",
      base.kw_to_pu(sol.p_g)
      - slack.g_shunt * v[net.slack_id]
      - sum(p[(net.slack_id, c)] for c in feeders),
  )
  worsen(
      "q_balance",
      base.kw_to_pu(sol.q_g)
      + slack.b_shunt * v[net.slack_id]
      - sum(q[(net.slack_id, c)] for c in feeders),
  )
  for line in net.lines:
    h, key = line.to_bus, line.key
    bus = net.bus_by_id[h]
    demand_p, demand_q = 0.0, 0.0
    if h in ihr_at:
      ihr_id = ihr_at[h]
      demand_p = inst.p_net_pu(ihr_id) - p_c[ihr_id]
      demand_q = q_net[ihr_id]
    worsen(
        "p_balance",
        p[key]
        - line.r * i[key]
        - demand_p
        - bus.g_shunt * v[h]
        - sum(p[(h, c)] for c in net.children[h]),
    )
    worsen(
        "q_balance",
        q[key]
        - line.x * i[key]
        - demand_q
        + bus.b_shunt * v[h]
        - sum(q[(h, c)] for c in net.children[h]),
    )
    worsen(
        "v_drop",
        v[h]
        - v[line.from_bus]
        + 2.0 * (line.r * p[key] + line.x * q[key])
        - (line.r**2 + line.x**2) * i[key],
    )
    worsen("v_bounds", max(bus.v_sq_min - v[h], v[h] - bus.v_sq_max, 0.0))
    worsen("i_limit", max(i[key] - line.i_sq_max, -i[key], 0.0))
    cone = p[key] ** 2 + q[key] ** 2 - v[line.from_bus] * i[key]
    worsen("cone", max(cone, 0.0))
  for ihr_id in inst.ihr_ids:
    q_min, q_max = inst.q_caps_pu(ihr_id)
    worsen("q_caps", max(q_min - q_net[ihr_id], q_net[ihr_id] - q_max, 0.0))
    worsen(
        "curtailment",
        max(-p_c[ihr_id], p_c[ihr_id] - max(inst.p_net_pu(ihr_id), 0.0), 0.0),
    )
  return report


def _network_rows(inst: OpfInstance) -> list[dict[str, object]]:
  ihr_at = {node: ihr_id for ihr_id, node in inst.node_of.items()}
  rows = []
  for bus in inst.network.buses:
    row = {
        "record": "node",
        "node": bus.bus_id,
        "g_shunt": bus.g_shunt,
        "b_shunt": bus.b_shunt,
        "v_sq_min": bus.v_sq_min,
        "v_sq_max": bus.v_sq_max,
    }
    if bus.bus_id in ihr_at:
      report = inst.reports[ihr_at[bus.bus_id]]
      row.update(
          ihr=report.ihr_id,
          p_net_kw=report.p_net,
          q_min_kvar=report.q_min,
          q_max_kvar=report.q_max,
      )
    rows.append(row)
  for line in inst.network.lines:
    rows.append({
        "record": "line",
        "from_bus": line.from_bus,
        "to_bus": line.to_bus,
        "r": line.r,
        "x": line.x,
        "i_sq_max": line.i_sq_max,
    })
  return rows


def write_instance(path: str, inst: OpfInstance) -> None:
  """Writes an instance as one CSV row per node and per line."""
  header = (
      f"#base_mva={inst.network.base_mva},base_kv={inst.network.base_kv},"
      f"slack={inst.network.slack_id},delta_t={inst.delta_t},"
      f"tariff={inst.prices.tariff},lambda_rt={inst.prices.lambda_rt},"
      f"lambda_c={inst.prices.lambda_c}\n"
  )
  frame = pd.DataFrame(_network_rows(inst), columns=list(_INSTANCE_COLUMNS))
  with tf.io.gfile.GFile(path, "w") as file:
    file.write(header)
    frame.to_csv(file, index=False, float_format="%.17g")


def _read_with_header(path: str) -> tuple[dict[str, str], pd.DataFrame]:
  if not tf.io.gfile.exists(path):
    raise OpfInstanceError(f"The file {path} does not exist.")
  with tf.io.gfile.GFile(path, "r") as file:
    first = file.readline().strip()
    if not first.startswith("#"):
      raise OpfInstanceError(f"The file {path} has no header line.")
    header = dict(item.split("=", 1) for item in first.lstrip("#").split(","))
    frame = pd.read_csv(file)
  return header, frame


def read_instance(path: str) -> OpfInstance:
  """Reads an instance written by write_instance.

  Raises:
      OpfInstanceError: If the file is missing or malformed.
  """
  header, frame = _read_with_header(path)
  try:
    nodes = frame[frame["record"] == "node"]
    edges = frame[frame["record"] == "line"]
    buses = tuple(
        Bus(
            bus_id=int(row.node),
            g_shunt=float(row.g_shunt),
            b_shunt=float(row.b_shunt),
            v_sq_min=float(row.v_sq_min),
            v_sq_max=float(row.v_sq_max),
        )
        for row in nodes.itertuples(index=False)
    )
    lines = tuple(
        Line(
            from_bus=int(row.from_bus),
            to_bus=int(row.to_bus),
            r=float(row.r),
            x=float(row.x),
            i_sq_max=float(row.i_sq_max),
        )
        for row in edges.itertuples(index=False)
    )
    network = NetworkModel(
        buses=buses,
        lines=lines,
        slack_id=int(header["slack"]),
        base_mva=float(header["base_mva"]),
        base_kv=float(header["base_kv"]),
    )
    reports, node_of = {}, {}
    for row in nodes.dropna(subset=["ihr"]).itertuples(index=False):
      ihr_id = int(row.ihr)
      node_of[ihr_id] = int(row.node)
      reports[ihr_id] = IhrReport(
          ihr_id=ihr_id,
          p_net=float(row.p_net_kw),
          q_min=float(row.q_min_kvar),
          q_max=float(row.q_max_kvar),
      )
    prices = MarketPrices(
        tariff=float(header["tariff"]),
        lambda_rt=float(header["lambda_rt"]),
        lambda_c=float(header["lambda_c"]),
    )
    delta_t = float(header["delta_t"])
  except (KeyError, ValueError, network_model.NetworkFormatError) as error:
    raise OpfInstanceError(f"The instance {path} is malformed.") from error
  return OpfInstance(
      network=network,
      node_of=node_of,
      reports=reports,
      prices=prices,
      delta_t=delta_t,
  )


def write_solution(path: str, inst: OpfInstance, sol: OpfSolution) -> None:
  """Writes a solution as one CSV row per node and per line."""
  ihr_at = {node: ihr_id for ihr_id, node in inst.node_of.items()}
  rows = []
  for bus in inst.network.buses:
    row = {"record": "node", "node": bus.bus_id, "v_sq": sol.v_sq[bus.bus_id]}
    if bus.bus_id in ihr_at:
      ihr_id = ihr_at[bus.bus_id]
      row.update(
          ihr=ihr_id, q_net_kvar=sol.q_net[ihr_id], p_c_kw=sol.p_c[ihr_id]
      )
    rows.append(row)
  for line in inst.network.lines:
    rows.append({
        "record": "line",
        "from_bus": line.from_bus,
        "to_bus": line.to_bus,
        "p_kw": sol.p_flow[line.key],
        "q_kvar": sol.q_flow[line.key],
        "i_sq": sol.i_sq[line.key],
    })
  header = (
      f"#status={sol.status},objective={sol.objective!r},p_g_kw={sol.p_g!r},"
      f"q_g_kvar={sol.q_g!r},iterations={sol.iterations}\n"
  )
  frame = pd.DataFrame(rows, columns=list(_SOLUTION_COLUMNS))
  with tf.io.gfile.GFile(path, "w") as file:
    file.write(header)
    frame.to_csv(file, index=False, float_format="%.17g")


def read_solution(path: str, inst: OpfInstance) -> OpfSolution:
  """Reads a solution written by write_solution for the given instance."""
  header, frame = _read_with_header(path)
  nodes = frame[frame["record"] == "node"]
  edges = frame[frame["record"] == "line"]
  keys = [
      (int(r.from_bus), int(r.to_bus))
      for r in edges.itertuples(index=False)
  ]
  ihr_rows = nodes.dropna(subset=["ihr"])
  return OpfSolution(
      p_g=float(header["p_g_kw"]),
      q_g=float(header["q_g_kvar"]),
      p_flow=dict(zip(keys, edges["p_kw"].astype(float))),
      q_flow=dict(zip(keys, edges["q_kvar"].astype(float))),
      v_sq=dict(zip(nodes["node"].astype(int), nodes["v_sq"].astype(float))),
      i_sq=dict(zip(keys, edges["i_sq"].astype(float))),
      q_net=dict(
          zip(ihr_rows["ihr"].astype(int), ihr_rows["q_net_kvar"].astype(float))
      ),
      p_c=dict(
          zip(ihr_rows["ihr"].astype(int), ihr_rows["p_c_kw"].astype(float))
      ),
      objective=float(header["objective"]),
      status=header["status"],
      per_unit=inst.per_unit,
      iterations=int(header["iterations"]),
  )
