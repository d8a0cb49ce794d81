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

"""A radial network model module of the GridMatch package."""

import dataclasses
import functools
import importlib.resources
import math
import os
from typing import Final, Mapping, Sequence
from absl import logging
import networkx as nx
import numpy as np
import tensorflow as tf

_DEFAULT_BASE_MVA: Final[float] = 1.0
_DEFAULT_BASE_KV: Final[float] = 12.66
_DEFAULT_SLACK_VOLTAGE_SQ: Final[float] = 1.0
_DEFAULT_TOLERANCE: Final[float] = 1e-13
_DEFAULT_MAX_ITERATIONS: Final[int] = 500
_IMPEDANCE_UNITS: Final[tuple[str, str]] = ("ohm", "pu")
_BUS_ROW: Final[str] = "B"
_LINE_ROW: Final[str] = "L"
_FEEDER_DATA: Final[str] = "feeder_data"
BUNDLED_NETWORK: Final[str] = "ieee33.csv"
BUNDLED_PARTITION: Final[str] = "ieee33_zones.csv"
BUNDLED_DESK_PARTITION: Final[str] = "ieee33_desk_zones.csv"


class NetworkFormatError(Exception):
  """Error when a network or partition file cannot be parsed."""

  pass


class NonRadialNetworkError(Exception):
  """Error when the network graph is not a connected tree."""

  pass


class PartitionError(Exception):
  """Error when an IHR partition is structurally invalid."""

  pass


class PowerFlowConvergenceError(Exception):
  """Error when the DistFlow sweep does not reach a fixed point."""

  pass


@dataclasses.dataclass(frozen=True)
class PerUnitBase:
  """The per-unit system of a network.

  Attributes:
      base_mva: The three-phase power base in MVA.
      base_kv: The line-to-line voltage base in kV.
  """

  base_mva: float = _DEFAULT_BASE_MVA
  base_kv: float = _DEFAULT_BASE_KV

  def __post_init__(self):
    if not (self.base_mva > 0 and self.base_kv > 0):
      raise ValueError(
          f"Bases must be positive, got {self.base_mva} MVA and"
          f" {self.base_kv} kV."
      )

  @property
  def impedance_ohm(self) -> float:
    return self.base_kv**2 / self.base_mva

  @property
  def power_kw(self) -> float:
    return self.base_mva * 1000.0

  @property
  def current_amp(self) -> float:
    return self.base_mva * 1000.0 / (math.sqrt(3.0) * self.base_kv)

  def ohm_to_pu(self, value: float) -> float:
    return value / self.impedance_ohm

  def pu_to_ohm(self, value: float) -> float:
    return value * self.impedance_ohm

  def siemens_to_pu(self, value: float) -> float:
    return value * self.impedance_ohm

  def pu_to_siemens(self, value: float) -> float:
    return value / self.impedance_ohm

  def kw_to_pu(self, value: float) -> float:
    """Converts kW (or kVAr, kVA) to per-unit power."""
    return value / self.power_kw

  def pu_to_kw(self, value: float) -> float:
    """Converts per-unit power to kW (or kVAr, kVA)."""
    return value * self.power_kw

  def amp_to_pu(self, value: float) -> float:
    return value / self.current_amp

  def pu_to_amp(self, value: float) -> float:
    return value * self.current_amp


@dataclasses.dataclass(frozen=True)
class Bus:
  """A network bus.

  Attributes:
      bus_id: The bus identifier.
      g_shunt: The shunt conductance, per-unit.
      b_shunt: The shunt susceptance, per-unit. Positive values are capacitive.
      v_sq_min: The lower squared-voltage bound, per-unit squared.
      v_sq_max: The upper squared-voltage bound, per-unit squared.
      nominal_p_kw: The nominal (peak) inflexible active load in kW.
      nominal_q_kvar: The nominal (peak) inflexible reactive load in kVAr.
      base_p_load: The inflexible active load profile in kW per interval. An
        empty profile means no profile has been attached.
      base_q_load: The inflexible reactive load profile in kVAr per interval.
  """

  bus_id: int
  g_shunt: float = 0.0
  b_shunt: float = 0.0
  v_sq_min: float = 0.81
  v_sq_max: float = 1.21
  nominal_p_kw: float = 0.0
  nominal_q_kvar: float = 0.0
  base_p_load: tuple[float, ...] = ()
  base_q_load: tuple[float, ...] = ()

  def __post_init__(self):
    if not 0 < self.v_sq_min < self.v_sq_max:
      raise ValueError(
          f"Bus {self.bus_id} needs 0 < v_sq_min < v_sq_max, got"
          f" [{self.v_sq_min}, {self.v_sq_max}]."
      )
    if not (math.isfinite(self.g_shunt) and math.isfinite(self.b_shunt)):
      raise ValueError(f"Bus {self.bus_id} has a non-finite shunt.")
    if len(self.base_p_load) != len(self.base_q_load):
      raise ValueError(
          f"Bus {self.bus_id} has active and reactive load profiles of"
          f" different lengths ({len(self.base_p_load)} vs"
          f" {len(self.base_q_load)})."
      )


@dataclasses.dataclass(frozen=True)
class Line:
  """A network line oriented from the parent (toward the slack) to the child.

  Attributes:
      from_bus: The parent bus identifier.
      to_bus: The child bus identifier.
      r: The series resistance, per-unit.
      x: The series reactance, per-unit.
      i_sq_max: The squared current limit, per-unit squared.
  """

  from_bus: int
  to_bus: int
  r: float
  x: float
  i_sq_max: float

  def __post_init__(self):
    if self.from_bus == self.to_bus:
      raise ValueError(f"Line {self.key} connects a bus to itself.")
    if not (self.r > 0 and self.x >= 0 and self.i_sq_max > 0):
      raise ValueError(
          f"Line {self.key} needs r > 0, x >= 0 and i_sq_max > 0, got"
          f" r={self.r}, x={self.x}, i_sq_max={self.i_sq_max}."
      )

  @property
  def key(self) -> tuple[int, int]:
    return (self.from_bus, self.to_bus)


@dataclasses.dataclass(frozen=True)
class NetworkModel:
  """A radial distribution network rooted at the slack bus.

  Attributes:
      buses: The buses sorted by identifier.
      lines: The lines, each oriented parent to child.
      slack_id: The slack bus identifier.
      base_mva: The power base in MVA.
      base_kv: The voltage base in kV.
  """

  buses: tuple[Bus, ...]
  lines: tuple[Line, ...]
  slack_id: int
  base_mva: float = _DEFAULT_BASE_MVA
  base_kv: float = _DEFAULT_BASE_KV

  def __post_init__(self):
    bus_ids = [bus.bus_id for bus in self.buses]
    if len(set(bus_ids)) != len(bus_ids):
      raise NetworkFormatError("Duplicate bus identifiers.")
    if self.slack_id not in bus_ids:
      raise NetworkFormatError(f"Slack bus {self.slack_id} is not defined.")
    line_keys = [frozenset(line.key) for line in self.lines]
    if len(set(line_keys)) != len(line_keys):
      raise NetworkFormatError("Duplicate lines.")
    for line in self.lines:
      if line.from_bus not in bus_ids or line.to_bus not in bus_ids:
        raise NetworkFormatError(f"Line {line.key} uses an undefined bus.")
    if len(self.lines) != len(self.buses) - 1 or not nx.is_tree(self.graph):
      raise NonRadialNetworkError(
          f"The network with {len(self.buses)} buses and {len(self.lines)}"
          " lines is not a connected radial tree."
      )
    for line in self.lines:
      if self.depth[line.to_bus] != self.depth[line.from_bus] + 1:
        raise NonRadialNetworkError(
            f"Line {line.key} is not oriented away from the slack bus."
        )

  @functools.cached_property
  def graph(self) -> nx.Graph:
    graph = nx.Graph()
    graph.add_nodes_from(bus.bus_id for bus in self.buses)
    graph.add_edges_from(line.key for line in self.lines)
    return graph

  @functools.cached_property
  def depth(self) -> Mapping[int, int]:
    """The number of lines between each bus and the slack bus."""
    return nx.single_source_shortest_path_length(self.graph, self.slack_id)

  @functools.cached_property
  def order(self) -> tuple[int, ...]:
    """The buses in breadth-first order from the slack bus."""
    return (self.slack_id,) + tuple(
        child for _, child in nx.bfs_edges(self.graph, self.slack_id)
    )

  @functools.cached_property
  def bus_by_id(self) -> Mapping[int, Bus]:
    return {bus.bus_id: bus for bus in self.buses}

  @functools.cached_property
  def line_by_key(self) -> Mapping[tuple[int, int], Line]:
    return {line.key: line for line in self.lines}

  @functools.cached_property
  def parent_line(self) -> Mapping[int, Line]:
    """The unique line feeding each non-slack bus."""
    return {line.to_bus: line for line in self.lines}

  @functools.cached_property
  def children(self) -> Mapping[int, tuple[int, ...]]:
    result = {bus.bus_id: [] for bus in self.buses}
    for line in self.lines:
      result[line.from_bus].append(line.to_bus)
    return {bus_id: tuple(sorted(kids)) for bus_id, kids in result.items()}

  @property
  def per_unit(self) -> PerUnitBase:
    return PerUnitBase(base_mva=self.base_mva, base_kv=self.base_kv)

  @property
  def horizon(self) -> int:
    """The length of the attached load profiles (0 when none are attached)."""
    return max((len(bus.base_p_load) for bus in self.buses), default=0)

  def with_load_profiles(self, shape: Sequence[float]) -> "NetworkModel":
    """Attaches inflexible load profiles as nominal loads times a shape.

    Args:
        shape: A per-interval multiplier applied to every bus's nominal load.

    Returns:
        A copy of the network whose buses carry profiles of length len(shape).
    """
    multipliers = tuple(float(value) for value in shape)
    buses = tuple(
        dataclasses.replace(
            bus,
            base_p_load=tuple(bus.nominal_p_kw * m for m in multipliers),
            base_q_load=tuple(bus.nominal_q_kvar * m for m in multipliers),
        )
        for bus in self.buses
    )
    return dataclasses.replace(self, buses=buses)


def _orient_lines(
    *, lines: Sequence[Line], slack_id: int, bus_ids: Sequence[int]
) -> tuple[Line, ...]:
  """Reorients lines parent to child with the slack bus as root."""
  graph = nx.Graph()
  graph.add_nodes_from(bus_ids)
  for line in lines:
    if graph.has_edge(*line.key):
      raise NetworkFormatError(f"Duplicate line between {line.key}.")
    graph.add_edge(*line.key, line=line)
  if len(lines) != len(bus_ids) - 1 or not nx.is_tree(graph):
    raise NonRadialNetworkError(
        f"The network with {len(bus_ids)} buses and {len(lines)} lines is not"
        " a connected radial tree."
    )
  oriented = []
  for parent, child in nx.bfs_edges(graph, slack_id):
    line = graph.edges[parent, child]["line"]
    if line.from_bus != parent:
      logging.info(f"Reorienting line {line.key} away from the slack bus.")
      line = dataclasses.replace(line, from_bus=parent, to_bus=child)
    oriented.append(line)
  return tuple(oriented)


def _parse_directive(text: str) -> dict[str, str]:
  """Parses a `#key=value,key=value` header line."""
  result = {}
  for item in text.lstrip("#").split(","):
    key, separator, value = item.partition("=")
    if not separator or not key.strip():
      raise NetworkFormatError(f"Malformed header entry: '{item}'.")
    result[key.strip()] = value.strip()
  return result


def _is_directive(row: str) -> bool:
  return row.startswith("#") and "=" in row and " " not in row


def _to_float(value: str, *, row: str) -> float:
  try:
    number = float(value)
  except ValueError as error:
    raise NetworkFormatError(f"Non-numeric value in row '{row}'.") from error
  if not math.isfinite(number):
    raise NetworkFormatError(f"Non-finite value in row '{row}'.")
  return number


def _to_int(value: str, *, row: str) -> int:
  try:
    return int(value)
  except ValueError as error:
    raise NetworkFormatError(f"Bad identifier in row '{row}'.") from error


def parse_network(text: str) -> NetworkModel:
  """Parses a network file into a radial NetworkModel.

  The header `#base_mva=<f>,base_kv=<f>,slack=<id>[,impedance=ohm|pu]` sets
  the bases. Bus rows are `B,<id>,<g>,<b>,<vsqmin>,<vsqmax>[,<p_kw>,<q_kvar>]`
  with shunts in per-unit. Line rows are `L,<from>,<to>,<r>,<x>,<isqmax>` with
  r and x in ohm unless the header says `impedance=pu`. Comment lines start
  with `# `.

  Args:
      text: The network file contents.

  Returns:
      The parsed network with lines oriented away from the slack bus.

  Raises:
      NetworkFormatError: On malformed rows, duplicates or a missing slack.
      NonRadialNetworkError: When the graph is not a connected tree.
  """
  header = {}
  bus_rows = []
  line_rows = []
  for raw_row in text.splitlines():
    row = raw_row.strip()
    if not row:
      continue
    if _is_directive(row):
      header.update(_parse_directive(row))
      continue
    if row.startswith("#"):
      continue
    fields = [field.strip() for field in row.split(",")]
    if fields[0] == _BUS_ROW and len(fields) in (6, 8):
      bus_rows.append((row, fields))
    elif fields[0] == _LINE_ROW and len(fields) == 6:
      line_rows.append((row, fields))
    else:
      raise NetworkFormatError(f"Malformed row: '{row}'.")
  if "slack" not in header:
    raise NetworkFormatError("The header does not name a slack bus.")
  base = PerUnitBase(
      base_mva=float(header.get("base_mva", _DEFAULT_BASE_MVA)),
      base_kv=float(header.get("base_kv", _DEFAULT_BASE_KV)),
  )
  impedance_units = header.get("impedance", "ohm")
  if impedance_units not in _IMPEDANCE_UNITS:
    raise NetworkFormatError(f"Unknown impedance units: {impedance_units}.")
  slack_id = _to_int(header["slack"], row="header")
  buses = []
  for row, fields in bus_rows:
    values = [_to_float(value, row=row) for value in fields[2:]]
    nominal = values[4:6] if len(values) == 6 else [0.0, 0.0]
    try:
      buses.append(
          Bus(
              bus_id=_to_int(fields[1], row=row),
              g_shunt=values[0],
              b_shunt=values[1],
              v_sq_min=values[2],
              v_sq_max=values[3],
              nominal_p_kw=nominal[0],
              nominal_q_kvar=nominal[1],
          )
      )
    except ValueError as error:
      raise NetworkFormatError(str(error)) from error
  if len({bus.bus_id for bus in buses}) != len(buses):
    raise NetworkFormatError("Duplicate bus identifiers.")
  if slack_id not in {bus.bus_id for bus in buses}:
    raise NetworkFormatError(f"Slack bus {slack_id} is not defined.")
  lines = []
  for row, fields in line_rows:
    r, x, i_sq_max = [_to_float(value, row=row) for value in fields[3:]]
    if impedance_units == "ohm":
      r, x = base.ohm_to_pu(r), base.ohm_to_pu(x)
    try:
      lines.append(
          Line(
              from_bus=_to_int(fields[1], row=row),
              to_bus=_to_int(fields[2], row=row),
              r=r,
              x=x,
              i_sq_max=i_sq_max,
          )
      )
    except ValueError as error:
      raise NetworkFormatError(str(error)) from error
  bus_ids = [bus.bus_id for bus in buses]
  for line in lines:
    if line.from_bus not in bus_ids or line.to_bus not in bus_ids:
      raise NetworkFormatError(f"Line {line.key} uses an undefined bus.")
  oriented = _orient_lines(lines=lines, slack_id=slack_id, bus_ids=bus_ids)
  network = NetworkModel(
      buses=tuple(sorted(buses, key=lambda bus: bus.bus_id)),
      lines=oriented,
      slack_id=slack_id,
      base_mva=base.base_mva,
      base_kv=base.base_kv,
  )
  logging.info(
      f"Parsed a radial network with {len(network.buses)} buses and"
      f" {len(network.lines)} lines."
  )
  return network


def read_network(path: str) -> NetworkModel:
  """Reads and parses a network file."""
  if not tf.io.gfile.exists(path):
    raise NetworkFormatError(f"The network file {path} does not exist.")
  with tf.io.gfile.GFile(path, "r") as file:
    return parse_network(file.read())


def bundled_data_path(filename: str) -> str:
  """Returns the path of a data file shipped with the package.

  Args:
      filename: The file name inside the package's feeder data directory.

  Returns:
      The full path to the file.

  Raises:
      ValueError: If the file is not part of the package.
  """
  with importlib.resources.path("gridmatch", _FEEDER_DATA) as data_directory:
    path = os.path.join(data_directory, filename)
  if not tf.io.gfile.exists(path):
    raise ValueError(
        f"You specified a file that's not part of the GridMatch package:"
        f" {filename}."
    )
  return path


def load_bundled_network() -> NetworkModel:
  """Loads the bundled IEEE 33-bus feeder."""
  return read_network(bundled_data_path(BUNDLED_NETWORK))


@dataclasses.dataclass(frozen=True)
class IhrPartition:
  """A partition of the non-slack buses into IHR zones.

  Attributes:
      zones: A mapping from bus identifier to IHR identifier.
      interconnect: A mapping from IHR identifier to its connection bus.
      delta: The intra-zone voltage-spread tolerance, per-unit.
  """

  zones: Mapping[int, int]
  interconnect: Mapping[int, int]
  delta: float

  @property
  def ihr_ids(self) -> tuple[int, ...]:
    return tuple(sorted(self.interconnect))

  def buses_of(self, ihr_id: int) -> tuple[int, ...]:
    return tuple(
        sorted(bus_id for bus_id, zone in self.zones.items() if zone == ihr_id)
    )


def build_partition(
    net: NetworkModel, *, zones: Mapping[int, int], delta: float
) -> IhrPartition:
  """Validates zone membership and derives each zone's interconnect bus.

  Args:
      net: The network being partitioned.
      zones: A mapping from every non-slack bus to an IHR identifier.
      delta: The intra-zone voltage-spread tolerance, per-unit.

  Returns:
      The partition with the interconnect bus of every zone.

  Raises:
      PartitionError: When zones do not cover the non-slack buses exactly or a
        zone is not a connected subtree.
  """
  if not delta > 0:
    raise PartitionError(f"The tolerance delta must be positive, got {delta}.")
  expected = {bus.bus_id for bus in net.buses} - {net.slack_id}
  if set(zones) != expected:
    missing = sorted(expected - set(zones))
    extra = sorted(set(zones) - expected)
    raise PartitionError(
        f"Zones must cover every non-slack bus exactly. Missing: {missing},"
        f" unexpected: {extra}."
    )
  interconnect = {}
  for ihr_id in sorted(set(zones.values())):
    members = [bus_id for bus_id, zone in zones.items() if zone == ihr_id]
    if not nx.is_connected(net.graph.subgraph(members)):
      raise PartitionError(f"IHR {ihr_id} is not a connected subtree.")
    interconnect[ihr_id] = min(members, key=lambda b: (net.depth[b], b))
  return IhrPartition(
      zones=dict(zones), interconnect=interconnect, delta=float(delta)
  )


def parse_partition(text: str, net: NetworkModel) -> IhrPartition:
  """Parses a partition file of `<bus_id>,<ihr_id>` rows and `#delta=<pu>`.

  Args:
      text: The partition file contents.
      net: The network being partitioned.

  Returns:
      The validated partition.

  Raises:
      NetworkFormatError: On malformed rows or a missing delta.
      PartitionError: On structural problems.
  """
  zones = {}
  delta = None
  for raw_row in text.splitlines():
    row = raw_row.strip()
    if not row:
      continue
    if _is_directive(row):
      header = _parse_directive(row)
      if "delta" in header:
        delta = _to_float(header["delta"], row=row)
      continue
    if row.startswith("#"):
      continue
    fields = [field.strip() for field in row.split(",")]
    if len(fields) != 2:
      raise NetworkFormatError(f"Malformed partition row: '{row}'.")
    bus_id, ihr_id = (_to_int(field, row=row) for field in fields)
    if bus_id in zones:
      raise NetworkFormatError(f"Bus {bus_id} is assigned twice.")
    zones[bus_id] = ihr_id
  if delta is None:
    raise NetworkFormatError("The partition file does not define #delta.")
  return build_partition(net, zones=zones, delta=delta)


def read_partition(path: str, net: NetworkModel) -> IhrPartition:
  """Reads and parses a partition file."""
  if not tf.io.gfile.exists(path):
    raise NetworkFormatError(f"The partition file {path} does not exist.")
  with tf.io.gfile.GFile(path, "r") as file:
    return parse_partition(file.read(), net)


def zone_nominal_loads(
    net: NetworkModel, part: IhrPartition
) -> dict[int, tuple[float, float]]:
  """Sums the nominal bus loads of every IHR, in kW and kVAr."""
  totals = {ihr_id: (0.0, 0.0) for ihr_id in part.ihr_ids}
  for bus_id, ihr_id in part.zones.items():
    bus = net.bus_by_id[bus_id]
    p, q = totals[ihr_id]
    totals[ihr_id] = (p + bus.nominal_p_kw, q + bus.nominal_q_kvar)
  return totals


@dataclasses.dataclass(frozen=True)
class PowerFlowResult:
  """A DistFlow fixed point in per-unit.

  Attributes:
      v_sq: The squared voltage of every bus.
      p_flow: The sending-end active flow of every line.
      q_flow: The sending-end reactive flow of every line.
      i_sq: The squared current of every line.
      slack_p: The active power drawn from the slack bus.
      slack_q: The reactive power drawn from the slack bus.
      iterations: The number of sweeps until convergence.
  """

  v_sq: Mapping[int, float]
  p_flow: Mapping[tuple[int, int], float]
  q_flow: Mapping[tuple[int, int], float]
  i_sq: Mapping[tuple[int, int], float]
  slack_p: float
  slack_q: float
  iterations: int

  def voltage_magnitude(self, bus_id: int) -> float:
    return math.sqrt(self.v_sq[bus_id])


def _per_unit_demand(
    net: NetworkModel, demand_kw: Mapping[int, float] | None
) -> dict[int, float]:
  demand_kw = demand_kw or {}
  unknown = set(demand_kw) - set(net.bus_by_id)
  if unknown:
    raise ValueError(f"Demand given for unknown buses: {sorted(unknown)}.")
  return {
      bus.bus_id: net.per_unit.kw_to_pu(float(demand_kw.get(bus.bus_id, 0.0)))
      for bus in net.buses
  }


def fixed_point_powerflow(
    net: NetworkModel,
    *,
    p_demand_kw: Mapping[int, float] | None = None,
    q_demand_kvar: Mapping[int, float] | None = None,
    tolerance: float = _DEFAULT_TOLERANCE,
    max_iterations: int = _DEFAULT_MAX_ITERATIONS,
) -> PowerFlowResult:
  """Solves the DistFlow equations by backward/forward sweeps.

  Demand is consumption-positive; negative values model injections. The
  slack bus voltage is pinned at 1.0 per-unit.

  Args:
      net: The radial network.
      p_demand_kw: The active demand per bus in kW. Missing buses draw zero.
      q_demand_kvar: The reactive demand per bus in kVAr.
      tolerance: The largest change in any state between two sweeps at which
        the iteration stops.
      max_iterations: The sweep budget.

  Returns:
      The converged power flow.

  Raises:
      PowerFlowConvergenceError: When the sweep does not converge, typically
        because the loading is infeasible.
  """
  p_demand = _per_unit_demand(net, p_demand_kw)
  q_demand = _per_unit_demand(net, q_demand_kvar)
  v_sq = {bus.bus_id: _DEFAULT_SLACK_VOLTAGE_SQ for bus in net.buses}
  p_flow = {line.key: 0.0 for line in net.lines}
  q_flow = {line.key: 0.0 for line in net.lines}
  i_sq = {line.key: 0.0 for line in net.lines}
  for iteration in range(1, max_iterations + 1):
    change = 0.0
    for bus_id in reversed(net.order[1:]):
      bus = net.bus_by_id[bus_id]
      line = net.parent_line[bus_id]
      downstream_p = sum(p_flow[(bus_id, c)] for c in net.children[bus_id])
      downstream_q = sum(q_flow[(bus_id, c)] for c in net.children[bus_id])
      p_new = (
          p_demand[bus_id]
          + bus.g_shunt * v_sq[bus_id]
          + downstream_p
          + line.r * i_sq[line.key]
      )
      q_new = (
          q_demand[bus_id]
          - bus.b_shunt * v_sq[bus_id]
          + downstream_q
          + line.x * i_sq[line.key]
      )
      change = max(
          change, abs(p_new - p_flow[line.key]), abs(q_new - q_flow[line.key])
      )
      p_flow[line.key], q_flow[line.key] = p_new, q_new
    for bus_id in net.order[1:]:
      line = net.parent_line[bus_id]
      v_parent = v_sq[line.from_bus]
      if not (v_parent > 0 and math.isfinite(v_parent)):
        raise PowerFlowConvergenceError(
            f"Voltage collapse at bus {line.from_bus} after {iteration} sweeps."
        )
      magnitude = math.hypot(p_flow[line.key], q_flow[line.key])
      i_new = magnitude * magnitude / v_parent
      v_new = (
          v_parent
          - 2.0 * (line.r * p_flow[line.key] + line.x * q_flow[line.key])
          + (line.r**2 + line.x**2) * i_new
      )
      if not (math.isfinite(i_new) and math.isfinite(v_new)):
        raise PowerFlowConvergenceError(
            f"The DistFlow sweep diverged after {iteration} sweeps."
        )
      change = max(
          change, abs(i_new - i_sq[line.key]), abs(v_new - v_sq[bus_id])
      )
      i_sq[line.key], v_sq[bus_id] = i_new, v_new
    if change <= tolerance:
      slack = net.bus_by_id[net.slack_id]
      feeders = net.children[net.slack_id]
      slack_p = (
          p_demand[net.slack_id]
          + slack.g_shunt * v_sq[net.slack_id]
          + sum(p_flow[(net.slack_id, c)] for c in feeders)
      )
      slack_q = (
          q_demand[net.slack_id]
          - slack.b_shunt * v_sq[net.slack_id]
          + sum(q_flow[(net.slack_id, c)] for c in feeders)
      )
      logging.info(f"DistFlow sweep converged after {iteration} iterations.")
      return PowerFlowResult(
          v_sq=v_sq,
          p_flow=p_flow,
          q_flow=q_flow,
          i_sq=i_sq,
          slack_p=slack_p,
          slack_q=slack_q,
          iterations=iteration,
      )
  raise PowerFlowConvergenceError(
      f"The DistFlow sweep did not converge within {max_iterations} sweeps."
  )


def powerflow_residuals(
    net: NetworkModel,
    result: PowerFlowResult,
    *,
    p_demand_kw: Mapping[int, float] | None = None,
    q_demand_kvar: Mapping[int, float] | None = None,
) -> dict[str, float]:
  """Evaluates the worst violation of each DistFlow equation family.

  Args:
      net: The radial network.
      result: A power-flow solution.
      p_demand_kw: The active demand used to compute the solution.
      q_demand_kvar: The reactive demand used to compute the solution.

  Returns:
      The maximum absolute residual, per-unit, of the active balance, the
      reactive balance, the voltage drop and the current definition.
  """
  p_demand = _per_unit_demand(net, p_demand_kw)
  q_demand = _per_unit_demand(net, q_demand_kvar)
  residuals = {"p_balance": 0.0, "q_balance": 0.0, "v_drop": 0.0, "i_def": 0.0}
  for line in net.lines:
    h = line.to_bus
    bus = net.bus_by_id[h]
    out_p = sum(result.p_flow[(h, c)] for c in net.children[h])
    out_q = sum(result.q_flow[(h, c)] for c in net.children[h])
    p_residual = (
        result.p_flow[line.key]
        - line.r * result.i_sq[line.key]
        - p_demand[h]
        - bus.g_shunt * result.v_sq[h]
        - out_p
    )
    q_residual = (
        result.q_flow[line.key]
        - line.x * result.i_sq[line.key]
        - q_demand[h]
        + bus.b_shunt * result.v_sq[h]
        - out_q
    )
    v_residual = result.v_sq[h] - (
        result.v_sq[line.from_bus]
        - 2.0 * line.r * result.p_flow[line.key]
        - 2.0 * line.x * result.q_flow[line.key]
        + (line.r**2 + line.x**2) * result.i_sq[line.key]
    )
    i_residual = (
        result.v_sq[line.from_bus] * result.i_sq[line.key]
        - result.p_flow[line.key] ** 2
        - result.q_flow[line.key] ** 2
    )
    for name, value in (
        ("p_balance", p_residual),
        ("q_balance", q_residual),
        ("v_drop", v_residual),
        ("i_def", i_residual),
    ):
      residuals[name] = max(residuals[name], abs(value))
  return residuals


@dataclasses.dataclass(frozen=True)
class PartitionReport:
  """The outcome of a zone voltage-spread check.

  Attributes:
      spreads: The largest intra-zone voltage-magnitude spread per IHR,
        per-unit.
      delta: The tolerance the spreads were checked against.
      failing: The IHRs whose spread is not below the tolerance.
  """

  spreads: Mapping[int, float]
  delta: float
  failing: tuple[int, ...]

  @property
  def passed(self) -> bool:
    return not self.failing


def validate_partition(
    net: NetworkModel,
    part: IhrPartition,
    *,
    peak_p_kw: Mapping[int, float] | None = None,
    peak_q_kvar: Mapping[int, float] | None = None,
) -> PartitionReport:
  """Checks that every IHR keeps its voltage spread below the tolerance.

  Args:
      net: The radial network.
      part: The IHR partition.
      peak_p_kw: The peak active load per bus. Defaults to the nominal loads.
      peak_q_kvar: The peak reactive load per bus. Defaults to the nominal
        loads.

  Returns:
      The per-IHR spreads and the pass/fail outcome.

  Raises:
      PowerFlowConvergenceError: When the peak-load power flow diverges.
  """
  if peak_p_kw is None:
    peak_p_kw = {bus.bus_id: bus.nominal_p_kw for bus in net.buses}
  if peak_q_kvar is None:
    peak_q_kvar = {bus.bus_id: bus.nominal_q_kvar for bus in net.buses}
  result = fixed_point_powerflow(
      net, p_demand_kw=peak_p_kw, q_demand_kvar=peak_q_kvar
  )
  spreads = {}
  for ihr_id in part.ihr_ids:
    magnitudes = np.sqrt([result.v_sq[b] for b in part.buses_of(ihr_id)])
    spreads[ihr_id] = float(np.max(magnitudes) - np.min(magnitudes))
  failing = tuple(
      ihr_id for ihr_id, spread in spreads.items() if not spread < part.delta
  )
  for ihr_id in failing:
    logging.warning(
        f"IHR {ihr_id} has a voltage spread of {spreads[ihr_id]:.5f} pu, not"
        f" below the tolerance of {part.delta} pu."
    )
  return PartitionReport(spreads=spreads, delta=part.delta, failing=failing)
