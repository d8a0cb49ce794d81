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

"""A scenario generation module of the GridMatch package."""

import dataclasses
import math
import os
from typing import Final, Mapping
from absl import logging
import numpy as np
import pandas as pd
import tensorflow as tf
from gridmatch import matching_market
from gridmatch import network_model
from gridmatch.matching_market import Customer
from gridmatch.matching_market import IhrEpisode
from gridmatch.matching_market import ResState

SCENARIO_KINDS: Final[tuple[str, ...]] = ("scenario1", "scenario2", "custom")
_SUNRISE_HOUR: Final[float] = 6.0
_SUNSET_HOUR: Final[float] = 18.0
_SOLAR_PEAK_HOUR: Final[float] = 12.0
_SOLAR_WIDTH_HOURS: Final[float] = 2.5
_CUSTOMERS_FILE: Final[str] = "customers.csv"
_SERIES_FILE: Final[str] = "series.csv"
_CUSTOMER_COLUMNS: Final[tuple[str, ...]] = (
    "customer",
    "ihr",
    "arrival",
    "deadline",
    "demand_kwh",
    "crit_control",
    "crit_rate",
    "flexible",
)
_SERIES_COLUMNS: Final[tuple[str, ...]] = (
    "t",
    "ihr",
    "r_p_kw",
    "r_s_kva",
    "base_p_kw",
    "base_q_kvar",
)


class ScenarioError(Exception):
  """Error when a scenario configuration is inconsistent."""

  pass


class ProfileFormatError(Exception):
  """Error when a profile file is malformed or too short."""

  pass


@dataclasses.dataclass(frozen=True)
class ScenarioConfig:
  """The description of a day of EV charging requests.

  Attributes:
      kind: One of scenario1 (early arrivals), scenario2 (moderate arrivals)
        or custom (explicit windows).
      horizon: The number of intervals T.
      delta_t: The interval length in hours.
      ihr_ids: The IHRs of the day.
      ev_counts: The number of EVs per IHR.
      charge_kwh: The demand of every EV in kWh.
      crit_control_range: The uniform range of the criticality control.
      price: The grid tariff in $/kWh.
      inverter_kva: The inverter rating per IHR in kVA.
      zone_loads: The nominal inflexible (kW, kVAr) load per IHR.
      load_scale: The share of the nominal load applied at the load peak.
      solar_scale: The share of the inverter rating reached at the solar
        peak.
      solar_profile_path: An optional `timestamp,value` solar profile.
      load_profile_path: An optional `timestamp,value` load-shape profile.
      arrival_window: The arrival interval range of custom scenarios.
      deadline_window: The deadline interval range of custom scenarios.
      max_customers: The per-IHR arrival cap. Derived when omitted.
      seed: The default seed of the scenario.
  """

  kind: str = "scenario1"
  horizon: int = 48
  delta_t: float = 0.5
  ihr_ids: tuple[int, ...] = (1, 2, 3, 4, 5)
  ev_counts: tuple[int, ...] = (24, 30, 8, 30, 30)
  charge_kwh: float = 6.6
  crit_control_range: tuple[float, float] = (0.0, 1.0)
  price: float = 0.12
  inverter_kva: tuple[float, ...] = (105.0, 150.0, 45.0, 150.0, 150.0)
  zone_loads: tuple[tuple[float, float], ...] = (
      (430.0, 230.0),
      (360.0, 160.0),
      (930.0, 450.0),
      (1075.0, 510.0),
      (920.0, 950.0),
  )
  load_scale: float = 0.5
  solar_scale: float = 1.0
  solar_profile_path: str | None = None
  load_profile_path: str | None = None
  arrival_window: tuple[int, int] | None = None
  deadline_window: tuple[int, int] | None = None
  max_customers: int | None = None
  seed: int = 0

  def __post_init__(self):
    if self.kind not in SCENARIO_KINDS:
      raise ScenarioError(f"Unknown scenario kind: {self.kind}.")
    if self.horizon < 1:
      raise ScenarioError(
          f"The horizon must be at least 1, got {self.horizon}."
      )
    if self.kind != "custom" and self.horizon < 4:
      raise ScenarioError(
          f"{self.kind} needs at least 4 intervals, got {self.horizon}."
      )
    if self.delta_t <= 0 or self.charge_kwh <= 0 or self.price <= 0:
      raise ScenarioError("delta_t, charge_kwh and price must be positive.")
    if not (0 < self.load_scale < math.inf and 0 < self.solar_scale < math.inf):
      raise ScenarioError("Scaling factors must lie in (0, inf).")
    n = len(self.ihr_ids)
    if not (
        len(self.ev_counts) == len(self.inverter_kva) == len(self.zone_loads)
        == n
    ):
      raise ScenarioError(
          "ihr_ids, ev_counts, inverter_kva and zone_loads need one entry per"
          " IHR."
      )
    if any(count < 0 for count in self.ev_counts):
      raise ScenarioError(f"Negative EV counts: {self.ev_counts}.")
    low, high = self.crit_control_range
    if not 0.0 <= low <= high <= 1.0:
      raise ScenarioError(
          f"Invalid criticality range {self.crit_control_range}."
      )
    if self.kind == "custom":
      if self.arrival_window is None or self.deadline_window is None:
        raise ScenarioError("Custom scenarios need both windows.")
    arrivals, deadlines = self.windows
    if not (
        1 <= arrivals[0] <= arrivals[1] < deadlines[0] <= deadlines[1]
        <= self.horizon
    ):
      raise ScenarioError(
          f"Windows {arrivals} and {deadlines} cannot give every customer"
          f" a < d <= {self.horizon}."
      )

  @property
  def windows(self) -> tuple[tuple[int, int], tuple[int, int]]:
    """The arrival and deadline interval ranges, inclusive."""
    quarter = math.ceil(self.horizon / 4)
    deadlines = (math.ceil(3 * self.horizon / 4), self.horizon)
    if self.kind == "scenario1":
      return (1, quarter), deadlines
    if self.kind == "scenario2":
      return (quarter, math.ceil(self.horizon / 2)), deadlines
    return tuple(self.arrival_window), tuple(self.deadline_window)

  @property
  def has_inflexible_load(self) -> bool:
    return any(p > 0 or q > 0 for p, q in self.zone_loads)

  def arrival_cap(self) -> int:
    """The per-IHR arrival cap, derived from the EV counts if unset."""
    if self.max_customers is not None:
      return self.max_customers
    largest = max(self.ev_counts, default=0)
    return max(largest + int(self.has_inflexible_load), 1)


def with_network_loads(
    cfg: ScenarioConfig,
    net: network_model.NetworkModel,
    part: network_model.IhrPartition,
) -> ScenarioConfig:
  """Replaces the configured zone loads by the partition's nominal loads."""
  loads = network_model.zone_nominal_loads(net, part)
  missing = set(cfg.ihr_ids) - set(loads)
  if missing:
    raise ScenarioError(f"The partition has no IHRs {sorted(missing)}.")
  return dataclasses.replace(
      cfg, zone_loads=tuple(loads[ihr_id] for ihr_id in cfg.ihr_ids)
  )


def interval_hours(horizon: int, delta_t: float) -> np.ndarray:
  """The clock hour at which every interval starts."""
  return np.arange(horizon) * delta_t


def solar_shape(horizon: int, delta_t: float) -> np.ndarray:
  """A bell-shaped solar profile peaking at noon, normalized to 1."""
  hours = interval_hours(horizon, delta_t) % 24.0
  shape = np.exp(-0.5 * ((hours - _SOLAR_PEAK_HOUR) / _SOLAR_WIDTH_HOURS) ** 2)
  shape[(hours < _SUNRISE_HOUR) | (hours > _SUNSET_HOUR)] = 0.0
  return shape / max(shape.max(), 1e-12)


def load_shape(horizon: int, delta_t: float) -> np.ndarray:
  """A residential two-peak load profile, normalized to 1."""
  hours = interval_hours(horizon, delta_t) % 24.0
  shape = (
      0.3
      + 0.3 * np.exp(-0.5 * ((hours - 8.0) / 1.5) ** 2)
      + 0.7 * np.exp(-0.5 * ((hours - 19.0) / 2.0) ** 2)
      - 0.15 * np.exp(-0.5 * ((hours - 3.0) / 2.0) ** 2)
  )
  return shape / shape.max()


def load_profiles_csv(
    path: str, horizon: int, delta_t: float, *, scale: float = 1.0
) -> np.ndarray:
  """Reads a `timestamp,value` profile resampled to the interval grid.

  Args:
      path: The profile file.
      horizon: The number of intervals to return.
      delta_t: The interval length in hours.
      scale: The factor applied to every value.

  Returns:
      The first `horizon` interval means, scaled.

  Raises:
      ProfileFormatError: If the file is malformed or too short.
  """
  try:
    with tf.io.gfile.GFile(path, "r") as file:
      frame = pd.read_csv(file)
    timestamps = pd.to_datetime(frame["timestamp"])
    values = pd.to_numeric(frame["value"])
  except (KeyError, ValueError, pd.errors.ParserError) as error:
    raise ProfileFormatError(f"The profile {path} is malformed.") from error
  series = pd.Series(values.to_numpy(dtype=float), index=timestamps)
  series = series.sort_index()
  resampled = series.resample(pd.Timedelta(hours=delta_t)).mean().dropna()
  if len(resampled) < horizon:
    raise ProfileFormatError(
        f"The profile {path} covers {len(resampled)} intervals, {horizon} are"
        " needed."
    )
  return resampled.to_numpy()[:horizon] * scale


def _normalized(profile: np.ndarray) -> np.ndarray:
  peak = profile.max()
  if peak <= 0:
    raise ProfileFormatError("A profile must have a positive peak.")
  return np.clip(profile / peak, 0.0, None)


@dataclasses.dataclass(frozen=True)
class EpisodeData:
  """The scenario of a whole day across IHRs.

  Attributes:
      horizon: The number of intervals T.
      delta_t: The interval length in hours.
      price: The grid tariff in $/kWh.
      ihr_ids: The IHRs of the day.
      arrivals: The customers arriving at each interval, per IHR.
      res: The RES availability at each interval, per IHR.
      base_p: The inflexible active load at each interval, per IHR, in kW.
      base_q: The inflexible reactive load at each interval, per IHR, in kVAr.
      max_customers: The per-IHR arrival cap.
  """

  horizon: int
  delta_t: float
  price: float
  ihr_ids: tuple[int, ...]
  arrivals: Mapping[int, tuple[tuple[Customer, ...], ...]]
  res: Mapping[int, tuple[ResState, ...]]
  base_p: Mapping[int, tuple[float, ...]]
  base_q: Mapping[int, tuple[float, ...]]
  max_customers: int

  def __post_init__(self):
    for ihr_id in self.ihr_ids:
      for series in (self.arrivals, self.res, self.base_p, self.base_q):
        if len(series[ihr_id]) != self.horizon:
          raise ScenarioError(
              f"IHR {ihr_id} has a series of length {len(series[ihr_id])},"
              f" expected {self.horizon}."
          )

  def for_ihr(self, ihr_id: int) -> IhrEpisode:
    return IhrEpisode(
        arrivals=self.arrivals[ihr_id],
        res=self.res[ihr_id],
        base_q=self.base_q[ihr_id],
        price=self.price,
        max_customers=self.max_customers,
    )

  def pooled(self) -> IhrEpisode:
    """A single market spanning every IHR with pooled RES."""
    arrivals, res, base_q = [], [], []
    for index in range(self.horizon):
      group = [c for h in self.ihr_ids for c in self.arrivals[h][index]]
      arrivals.append(tuple(sorted(group, key=lambda c: c.customer_id)))
      res.append(
          ResState(
              r_p=sum(self.res[h][index].r_p for h in self.ihr_ids),
              r_s=sum(self.res[h][index].r_s for h in self.ihr_ids),
          )
      )
      base_q.append(sum(self.base_q[h][index] for h in self.ihr_ids))
    return IhrEpisode(
        arrivals=tuple(arrivals),
        res=tuple(res),
        base_q=tuple(base_q),
        price=self.price,
        max_customers=self.max_customers * len(self.ihr_ids),
    )

  @property
  def customers(self) -> tuple[Customer, ...]:
    return tuple(
        customer
        for ihr_id in self.ihr_ids
        for group in self.arrivals[ihr_id]
        for customer in group
    )


def _shapes(cfg: ScenarioConfig) -> tuple[np.ndarray, np.ndarray]:
  if cfg.solar_profile_path:
    solar = _normalized(
        load_profiles_csv(cfg.solar_profile_path, cfg.horizon, cfg.delta_t)
    )
  else:
    solar = solar_shape(cfg.horizon, cfg.delta_t)
  if cfg.load_profile_path:
    load = _normalized(
        load_profiles_csv(cfg.load_profile_path, cfg.horizon, cfg.delta_t)
    )
  else:
    load = load_shape(cfg.horizon, cfg.delta_t)
  return solar, load


def gen_scenario(cfg: ScenarioConfig, rng: np.random.Generator) -> EpisodeData:
  """Generates a day of EV requests, inflexible load and solar output.

  Args:
      cfg: The scenario description.
      rng: The random stream.

  Returns:
      The episode data of every IHR.
  """
  (a_low, a_high), (d_low, d_high) = cfg.windows
  solar, load = _shapes(cfg)
  next_id = 1
  arrivals, res, base_p, base_q = {}, {}, {}, {}
  for index, ihr_id in enumerate(cfg.ihr_ids):
    groups = [[] for _ in range(cfg.horizon)]
    p_nominal, q_nominal = cfg.zone_loads[index]
    p_series = p_nominal * cfg.load_scale * load
    q_series = q_nominal * cfg.load_scale * load
    for t in range(1, cfg.horizon + 1):
      demand = float(p_series[t - 1]) * cfg.delta_t
      if demand > 0:
        groups[t - 1].append(
            matching_market.make_inflexible_customer(
                customer_id=next_id, arrival=t, demand=demand, ihr_id=ihr_id
            )
        )
        next_id += 1
    for _ in range(cfg.ev_counts[index]):
      arrival = int(rng.integers(a_low, a_high + 1))
      deadline = int(rng.integers(d_low, d_high + 1))
      crit_control = float(rng.uniform(*cfg.crit_control_range))
      groups[arrival - 1].append(
          matching_market.make_flexible_customer(
              customer_id=next_id,
              arrival=arrival,
              demand=cfg.charge_kwh,
              deadline=deadline,
              crit_control=crit_control,
              price=cfg.price,
              ihr_id=ihr_id,
          )
      )
      next_id += 1
    rating = cfg.inverter_kva[index]
    output = solar * rating * cfg.solar_scale
    if np.any(output > rating):
      logging.warning(
          f"Clipping the solar output of IHR {ihr_id} to its {rating} kVA"
          " inverter rating."
      )
    res[ihr_id] = tuple(
        ResState(r_p=float(min(value, rating)), r_s=rating) for value in output
    )
    arrivals[ihr_id] = tuple(tuple(group) for group in groups)
    base_p[ihr_id] = tuple(float(value) for value in p_series)
    base_q[ihr_id] = tuple(float(value) for value in q_series)
  data = EpisodeData(
      horizon=cfg.horizon,
      delta_t=cfg.delta_t,
      price=cfg.price,
      ihr_ids=tuple(cfg.ihr_ids),
      arrivals=arrivals,
      res=res,
      base_p=base_p,
      base_q=base_q,
      max_customers=cfg.arrival_cap(),
  )
  logging.info(
      f"Generated a {cfg.kind} day with {len(data.customers)} customers over"
      f" {cfg.horizon} intervals."
  )
  return data


def write_episode_data(data: EpisodeData, output_directory: str) -> None:
  """Writes the customers and interval series of a day as two CSV files."""
  tf.io.gfile.makedirs(output_directory)
  customers = pd.DataFrame(
      [
          (
              c.customer_id,
              c.ihr_id,
              c.arrival,
              c.deadline,
              c.demand,
              c.crit_control,
              c.crit_rate,
              int(c.flexible),
          )
          for c in data.customers
      ],
      columns=list(_CUSTOMER_COLUMNS),
  )
  series = pd.DataFrame(
      [
          (
              t,
              ihr_id,
              data.res[ihr_id][t - 1].r_p,
              data.res[ihr_id][t - 1].r_s,
              data.base_p[ihr_id][t - 1],
              data.base_q[ihr_id][t - 1],
          )
          for ihr_id in data.ihr_ids
          for t in range(1, data.horizon + 1)
      ],
      columns=list(_SERIES_COLUMNS),
  )
  header = (
      f"#horizon={data.horizon},delta_t={data.delta_t},price={data.price},"
      f"max_customers={data.max_customers}\n"
  )
  with tf.io.gfile.GFile(
      os.path.join(output_directory, _CUSTOMERS_FILE), "w"
  ) as file:
    file.write(header)
    customers.to_csv(file, index=False, float_format="%.12g")
  with tf.io.gfile.GFile(
      os.path.join(output_directory, _SERIES_FILE), "w"
  ) as file:
    series.to_csv(file, index=False, float_format="%.12g")


def read_episode_data(input_directory: str) -> EpisodeData:
  """Reads a day written by write_episode_data.

  Args:
      input_directory: The directory holding the two CSV files.

  Returns:
      The episode data.

  Raises:
      ScenarioError: If the files are missing or inconsistent.
  """
  customers_path = os.path.join(input_directory, _CUSTOMERS_FILE)
  series_path = os.path.join(input_directory, _SERIES_FILE)
  for path in (customers_path, series_path):
    if not tf.io.gfile.exists(path):
      raise ScenarioError(f"The scenario file {path} does not exist.")
  with tf.io.gfile.GFile(customers_path, "r") as file:
    header = file.readline().strip().lstrip("#")
    customers = pd.read_csv(file)
  meta = dict(item.split("=", 1) for item in header.split(","))
  horizon = int(meta["horizon"])
  with tf.io.gfile.GFile(series_path, "r") as file:
    series = pd.read_csv(file)
  ihr_ids = tuple(int(value) for value in sorted(series["ihr"].unique()))
  price = float(meta["price"])
  groups = {h: [[] for _ in range(horizon)] for h in ihr_ids}
  for row in customers.itertuples(index=False):
    try:
      customer = Customer(
          customer_id=int(row.customer),
          arrival=int(row.arrival),
          demand=float(row.demand_kwh),
          deadline=int(row.deadline),
          crit_control=float(row.crit_control),
          crit_rate=float(row.crit_rate),
          flexible=bool(row.flexible),
          ihr_id=int(row.ihr),
      )
      matching_market.check_willingness_decay(customer, price)
    except (ValueError, matching_market.MarketError) as error:
      raise ScenarioError(
          f"Invalid customer row in {customers_path}: {error}"
      ) from error
    groups[customer.ihr_id][customer.arrival - 1].append(customer)
  res, base_p, base_q = {}, {}, {}
  for ihr_id in ihr_ids:
    rows = series[series["ihr"] == ihr_id].sort_values("t")
    res[ihr_id] = tuple(
        ResState(r_p=float(r.r_p_kw), r_s=float(r.r_s_kva))
        for r in rows.itertuples(index=False)
    )
    base_p[ihr_id] = tuple(float(value) for value in rows["base_p_kw"])
    base_q[ihr_id] = tuple(float(value) for value in rows["base_q_kvar"])
  return EpisodeData(
      horizon=horizon,
      delta_t=float(meta["delta_t"]),
      price=price,
      ihr_ids=ihr_ids,
      arrivals={h: tuple(tuple(g) for g in groups[h]) for h in ihr_ids},
      res=res,
      base_p=base_p,
      base_q=base_q,
      max_customers=int(meta["max_customers"]),
  )


def _desk_config(kind: str) -> ScenarioConfig:
  return ScenarioConfig(
      kind=kind,
      horizon=24,
      delta_t=1.0,
      ihr_ids=(1, 2, 3),
      ev_counts=(6, 6, 6),
      inverter_kva=(45.0, 45.0, 45.0),
      zone_loads=((0.0, 0.0), (0.0, 0.0), (0.0, 0.0)),
  )


SCENARIO_PRESETS: Final[Mapping[str, ScenarioConfig]] = {
    "full_scenario1": ScenarioConfig(kind="scenario1"),
    "full_scenario2": ScenarioConfig(kind="scenario2"),
    "desk_scenario1": _desk_config("scenario1"),
    "desk_scenario2": _desk_config("scenario2"),
}
