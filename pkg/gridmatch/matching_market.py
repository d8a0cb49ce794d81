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

"""A per-IHR online matching market module of the GridMatch package."""

import dataclasses
import enum
import math
from typing import Final, Iterable, Mapping, Sequence
from absl import logging
import pandas as pd
import tensorflow as tf

SERVED_THRESHOLD: Final[float] = 1e-9
_RES_MARGINAL_COST: Final[float] = 0.0
_DEFAULT_PRICE: Final[float] = 0.12
_DECAY_REL_TOL: Final[float] = 1e-8
_EPISODE_COLUMNS: Final[tuple[str, ...]] = (
    "t",
    "ihr",
    "customer",
    "supply",
    "kwh",
    "willingness",
    "welfare",
)


class MarketError(Exception):
  """Base error for infeasible market transitions."""

  pass


class ArrivalCapError(MarketError):
  """Error when more customers arrive in one interval than the market allows."""

  pass


class ArrivalTimeError(MarketError):
  """Error when a customer arrives in an interval other than the next one."""

  pass


class WillingnessWindowError(MarketError):
  """Error when willingness is asked for outside a customer's window."""

  pass


class OverServiceError(MarketError):
  """Error when a customer is matched more energy than it still needs."""

  pass


class ResOversubscribedError(MarketError):
  """Error when more renewable energy is matched than is available."""

  pass


class DeadlineViolationError(MarketError):
  """Error when a customer reaches its deadline without full service."""

  pass


class ReactiveCapacityError(MarketError):
  """Error when the active RES output exceeds the inverter rating."""

  pass


class WillingnessDecayError(MarketError):
  """Error when a decay rate disagrees with the criticality and the tariff."""

  pass


class Supply(enum.Enum):
  """The supply types a customer can be matched to."""

  GRID = "grid"
  RES = "res"


@dataclasses.dataclass(frozen=True)
class Customer:
  """A flexible or inflexible load.

  Attributes:
      customer_id: The identifier, unique across a whole episode.
      arrival: The arrival interval.
      demand: The requested energy in kWh.
      deadline: The last interval by which the demand must be served.
      crit_control: The criticality control in [0, 1]. 1 means willingness
        reaches zero at the deadline, 0 means it never decays.
      crit_rate: The willingness decay in $/kWh per interval.
      unserved: The energy still to be served in kWh. Defaults to the demand.
      flexible: Whether the load may wait past its arrival interval.
      ihr_id: The IHR the load is connected to.
  """

  customer_id: int
  arrival: int
  demand: float
  deadline: int
  crit_control: float = 0.0
  crit_rate: float = 0.0
  unserved: float | None = None
  flexible: bool = True
  ihr_id: int = 0

  def __post_init__(self):
    if self.unserved is None:
      object.__setattr__(self, "unserved", self.demand)
    if not self.arrival <= self.deadline:
      raise ValueError(
          f"Customer {self.customer_id} departs ({self.deadline}) before it"
          f" arrives ({self.arrival})."
      )
    if not (self.demand >= 0 and math.isfinite(self.demand)):
      raise ValueError(
          f"Customer {self.customer_id} has an invalid demand {self.demand}."
      )
    if not -SERVED_THRESHOLD <= self.unserved <= self.demand + SERVED_THRESHOLD:
      raise ValueError(
          f"Customer {self.customer_id} has unserved energy {self.unserved}"
          f" outside [0, {self.demand}]."
      )
    if not 0.0 <= self.crit_control <= 1.0 or self.crit_rate < 0:
      raise ValueError(
          f"Customer {self.customer_id} has an invalid criticality"
          f" ({self.crit_control}, {self.crit_rate})."
      )
    if self.flexible and self.deadline <= self.arrival:
      raise ValueError(
          f"Flexible customer {self.customer_id} needs a deadline after its"
          " arrival."
      )
    if self.flexible and (self.crit_rate > 0) != (self.crit_control > 0):
      raise ValueError(
          f"Flexible customer {self.customer_id} has a decay rate"
          f" {self.crit_rate} that does not match its criticality"
          f" {self.crit_control}."
      )
    if not self.flexible and (
        self.deadline != self.arrival or self.crit_rate or self.crit_control
    ):
      raise ValueError(
          f"Inflexible customer {self.customer_id} must be served on arrival"
          " with no willingness decay."
      )


def make_flexible_customer(
    *,
    customer_id: int,
    arrival: int,
    demand: float,
    deadline: int,
    crit_control: float,
    price: float = _DEFAULT_PRICE,
    ihr_id: int = 0,
) -> Customer:
  """Creates a flexible customer with b = crit_control * price / (d - a)."""
  if deadline <= arrival:
    raise ValueError(
        f"Flexible customer {customer_id} needs a deadline after its arrival."
    )
  return Customer(
      customer_id=customer_id,
      arrival=arrival,
      demand=demand,
      deadline=deadline,
      crit_control=crit_control,
      crit_rate=crit_control * price / (deadline - arrival),
      flexible=True,
      ihr_id=ihr_id,
  )


def check_willingness_decay(customer: Customer, price: float) -> None:
  """Checks b = crit_control * price / (d - a) for a flexible customer.

  Raises:
      WillingnessDecayError: If the decay rate belongs to another tariff or
        criticality.
  """
  if not customer.flexible:
    return
  expected = (
      customer.crit_control * price / (customer.deadline - customer.arrival)
  )
  if not math.isclose(
      customer.crit_rate, expected, rel_tol=_DECAY_REL_TOL, abs_tol=1e-15
  ):
    raise WillingnessDecayError(
        f"Customer {customer.customer_id} decays at {customer.crit_rate}"
        f" $/kWh per interval, expected {expected} at the tariff {price}."
    )


def make_inflexible_customer(
    *, customer_id: int, arrival: int, demand: float, ihr_id: int = 0
) -> Customer:
  """Creates a load that must be served in full on arrival."""
  return Customer(
      customer_id=customer_id,
      arrival=arrival,
      demand=demand,
      deadline=arrival,
      flexible=False,
      ihr_id=ihr_id,
  )


@dataclasses.dataclass(frozen=True)
class ResState:
  """The renewable resource of an IHR in one interval.

  Attributes:
      r_p: The available active RES output in kW.
      r_s: The inverter apparent-power rating in kVA.
  """

  r_p: float = 0.0
  r_s: float = 0.0

  def __post_init__(self):
    if self.r_p < 0:
      raise ValueError(f"The RES output must be non-negative, got {self.r_p}.")
    if self.r_p > self.r_s:
      raise ReactiveCapacityError(
          f"The RES output {self.r_p} kW exceeds the inverter rating"
          f" {self.r_s} kVA."
      )


@dataclasses.dataclass(frozen=True)
class MarketSnapshot:
  """The decision-time record of one interval.

  Attributes:
      t: The interval.
      customers: The active customers with their unserved energy at decision
        time.
      res: The RES availability.
  """

  t: int
  customers: tuple[Customer, ...]
  res: ResState


@dataclasses.dataclass(frozen=True)
class IhrMarketState:
  """The state of an IHR market.

  Attributes:
      t: The current interval. 0 means no interval has started.
      active: The customers still waiting for service.
      res: The RES availability of interval t.
      price: The grid tariff in $/kWh.
      base_q: The inflexible reactive load in kVAr.
      max_customers: The largest number of arrivals allowed per interval.
      history: The decision-time snapshots of intervals 1..t-1.
      decision: The decision-time snapshot of the last matched interval.
  """

  t: int = 0
  active: tuple[Customer, ...] = ()
  res: ResState = ResState()
  price: float = _DEFAULT_PRICE
  base_q: float = 0.0
  max_customers: int = 1
  history: tuple[MarketSnapshot, ...] = ()
  decision: MarketSnapshot | None = None

  def __post_init__(self):
    if self.max_customers < 1:
      raise ValueError(
          f"The arrival cap must be at least 1, got {self.max_customers}."
      )
    if self.price <= 0:
      raise ValueError(f"The grid price must be positive, got {self.price}.")
    if len(self.history) != max(self.t - 1, 0):
      raise ValueError(
          f"A market at t={self.t} needs {max(self.t - 1, 0)} history"
          f" snapshots, got {len(self.history)}."
      )

  def snapshot(self) -> MarketSnapshot:
    return MarketSnapshot(t=self.t, customers=self.active, res=self.res)

  def frames(self) -> tuple[MarketSnapshot, ...]:
    """The decision-time records of intervals 1..t."""
    return self.history + (self.snapshot(),)

  def customer(self, customer_id: int) -> Customer:
    for customer in self.active:
      if customer.customer_id == customer_id:
        return customer
    raise KeyError(f"Customer {customer_id} is not active at t={self.t}.")


@dataclasses.dataclass(frozen=True)
class MatchAmounts:
  """The energy matched from each supply type to each customer in kWh.

  Attributes:
      entries: A mapping from (supply, customer id) to kWh.
  """

  entries: Mapping[tuple[Supply, int], float] = dataclasses.field(
      default_factory=dict
  )

  def __post_init__(self):
    for key, value in self.entries.items():
      if not (value >= 0 and math.isfinite(value)):
        raise ValueError(f"Match {key} has an invalid amount {value}.")

  def amount(self, supply: Supply, customer_id: int) -> float:
    return self.entries.get((supply, customer_id), 0.0)

  def total_for(self, customer_id: int) -> float:
    return sum(
        value for (_, cid), value in self.entries.items() if cid == customer_id
    )

  def supply_total(self, supply: Supply) -> float:
    return sum(
        value for (kind, _), value in self.entries.items() if kind == supply
    )

  @property
  def customer_ids(self) -> frozenset[int]:
    return frozenset(cid for _, cid in self.entries)

  def without(self, supply: Supply) -> "MatchAmounts":
    return MatchAmounts(
        {key: value for key, value in self.entries.items() if key[0] != supply}
    )


@dataclasses.dataclass(frozen=True)
class ReactiveCaps:
  """The reactive power an IHR can exchange with the grid, in kVAr.

  Attributes:
      q_min: The lower reactive exchange limit.
      q_max: The upper reactive exchange limit.
  """

  q_min: float
  q_max: float

  def __post_init__(self):
    if self.q_min > self.q_max:
      raise ValueError(f"q_min {self.q_min} exceeds q_max {self.q_max}.")


def new_market(
    *,
    price: float = _DEFAULT_PRICE,
    max_customers: int,
    res: ResState = ResState(),
    base_q: float = 0.0,
) -> IhrMarketState:
  """Creates an empty market before its first interval."""
  return IhrMarketState(
      price=price, max_customers=max_customers, res=res, base_q=base_q
  )


def willingness(c: float, cust: Customer, t: int) -> float:
  """Returns the customer's willingness to pay at interval t in $/kWh.

  Args:
      c: The grid tariff in $/kWh.
      cust: The customer.
      t: The interval, within [arrival, deadline].

  Returns:
      c - b * (t - a).

  Raises:
      WillingnessWindowError: If t is outside the customer's window.
  """
  if not cust.arrival <= t <= cust.deadline:
    raise WillingnessWindowError(
        f"Interval {t} is outside the window [{cust.arrival},"
        f" {cust.deadline}] of customer {cust.customer_id}."
    )
  return c - cust.crit_rate * (t - cust.arrival)


def step_arrivals(
    state: IhrMarketState,
    arrivals: Sequence[Customer],
    res: ResState,
    *,
    base_q: float | None = None,
) -> IhrMarketState:
  """Advances the market by one interval and admits the new customers.

  Args:
      state: The market after the previous interval was matched.
      arrivals: The customers arriving in interval state.t + 1.
      res: The RES availability of the new interval.
      base_q: The inflexible reactive load of the new interval. Unchanged when
        omitted.

  Returns:
      The market at the new interval.

  Raises:
      ArrivalCapError: If too many customers arrive.
      ArrivalTimeError: If a customer arrives in another interval.
      WillingnessDecayError: If a customer decays at another tariff.
      DeadlineViolationError: If an unserved customer would outlive its
        deadline.
  """
  t = state.t + 1
  if len(arrivals) > state.max_customers:
    raise ArrivalCapError(
        f"{len(arrivals)} customers arrive at t={t}, the cap is"
        f" {state.max_customers}."
    )
  for customer in arrivals:
    if customer.arrival != t:
      raise ArrivalTimeError(
          f"Customer {customer.customer_id} arrives at {customer.arrival},"
          f" expected {t}."
      )
    check_willingness_decay(customer, state.price)
  for customer in state.active:
    if customer.deadline < t:
      raise DeadlineViolationError(
          f"Customer {customer.customer_id} is still active after its"
          f" deadline {customer.deadline}."
      )
  known = {customer.customer_id for customer in state.active}
  admitted = []
  for customer in arrivals:
    if customer.customer_id in known:
      raise MarketError(f"Customer {customer.customer_id} is already active.")
    known.add(customer.customer_id)
    admitted.append(dataclasses.replace(customer, unserved=customer.demand))
  history = state.history
  if state.t >= 1:
    history = history + (state.decision or state.snapshot(),)
  return dataclasses.replace(
      state,
      t=t,
      active=state.active + tuple(admitted),
      res=res,
      base_q=state.base_q if base_q is None else base_q,
      history=history,
      decision=None,
  )


def _check_match(
    state: IhrMarketState, m: MatchAmounts, delta_t: float
) -> None:
  active = {customer.customer_id: customer for customer in state.active}
  unknown = m.customer_ids - set(active)
  if unknown:
    raise MarketError(
        f"Matches reference inactive customers {sorted(unknown)} at"
        f" t={state.t}."
    )
  for customer_id, customer in active.items():
    total = m.total_for(customer_id)
    if total > customer.unserved + SERVED_THRESHOLD:
      raise OverServiceError(
          f"Customer {customer_id} is matched {total} kWh but needs only"
          f" {customer.unserved} kWh."
      )
  res_energy = state.res.r_p * delta_t
  if m.supply_total(Supply.RES) > res_energy + SERVED_THRESHOLD:
    raise ResOversubscribedError(
        f"{m.supply_total(Supply.RES)} kWh of RES matched, only {res_energy}"
        f" kWh available at t={state.t}."
    )


def match_welfare(state: IhrMarketState, m: MatchAmounts) -> float:
  """Computes the social welfare of a match in $."""
  welfare = 0.0
  for customer in state.active:
    pi = willingness(state.price, customer, state.t)
    welfare += (pi - state.price) * m.amount(Supply.GRID, customer.customer_id)
    welfare += (pi - _RES_MARGINAL_COST) * m.amount(
        Supply.RES, customer.customer_id
    )
  return welfare


def apply_match(
    state: IhrMarketState,
    m: MatchAmounts,
    delta_t: float,
    *,
    excused: Iterable[int] = (),
) -> tuple[IhrMarketState, float]:
  """Applies a match to the market.

  Args:
      state: The market at decision time.
      m: The match of the current interval.
      delta_t: The interval length in hours.
      excused: Customers allowed to leave at their deadline without full
        service, because their grid match was curtailed by the central agent.

  Returns:
      The market after service and the welfare of the match in $.

  Raises:
      MarketError: If the match references inactive customers.
      OverServiceError: If a customer is matched more than it needs.
      ResOversubscribedError: If the RES budget is exceeded.
      DeadlineViolationError: If a customer at its deadline stays unserved.
  """
  _check_match(state, m, delta_t)
  excused = set(excused)
  welfare = match_welfare(state, m)
  remaining = []
  for customer in state.active:
    unserved = max(customer.unserved - m.total_for(customer.customer_id), 0.0)
    if unserved <= SERVED_THRESHOLD:
      continue
    if customer.deadline == state.t:
      if customer.customer_id not in excused:
        raise DeadlineViolationError(
            f"Customer {customer.customer_id} reaches its deadline at"
            f" t={state.t} with {unserved} kWh unserved."
        )
      logging.warning(
          f"Customer {customer.customer_id} leaves at t={state.t} with"
          f" {unserved:.4f} kWh unserved after curtailment."
      )
      continue
    remaining.append(dataclasses.replace(customer, unserved=unserved))
  new_state = dataclasses.replace(
      state, active=tuple(remaining), decision=state.snapshot()
  )
  return new_state, welfare


def net_active_flow(m: MatchAmounts, delta_t: float) -> float:
  """Returns the grid power the IHR requests in kW."""
  if delta_t <= 0:
    raise ValueError(f"The interval length must be positive, got {delta_t}.")
  return m.supply_total(Supply.GRID) / delta_t


def reactive_caps_for(res: ResState, base_q: float) -> ReactiveCaps:
  """Computes the reactive exchange range of an inverter and base load."""
  if res.r_p > res.r_s:
    raise ReactiveCapacityError(
        f"The RES output {res.r_p} kW exceeds the inverter rating {res.r_s}"
        " kVA."
    )
  headroom = math.sqrt(res.r_s**2 - res.r_p**2)
  return ReactiveCaps(q_min=base_q - headroom, q_max=base_q + headroom)


def reactive_capacities(state: IhrMarketState) -> ReactiveCaps:
  """Returns the reactive range the IHR offers the central agent.

  Flexible matched load is taken at unity power factor, so only the inflexible
  reactive load and the inverter headroom sqrt(r_s^2 - r_p^2) count.

  Args:
      state: The market at decision time.

  Returns:
      The reactive capacities in kVAr.

  Raises:
      ReactiveCapacityError: If the RES output exceeds the inverter rating.
  """
  return reactive_caps_for(state.res, state.base_q)


def evaluate_schedule_welfare(
    customers: Iterable[Customer],
    schedule: Mapping[int, MatchAmounts],
    *,
    price: float,
) -> float:
  """Re-evaluates the welfare of a recorded schedule from scratch.

  Args:
      customers: Every customer of the episode.
      schedule: The match applied at each interval.
      price: The grid tariff in $/kWh.

  Returns:
      The episode welfare in $.
  """
  by_id = {customer.customer_id: customer for customer in customers}
  total = 0.0
  for t, m in schedule.items():
    for (supply, customer_id), kwh in m.entries.items():
      customer = by_id[customer_id]
      pi = price - customer.crit_rate * (t - customer.arrival)
      cost = price if supply == Supply.GRID else _RES_MARGINAL_COST
      total += (pi - cost) * kwh
  return total


@dataclasses.dataclass(frozen=True)
class IhrEpisode:
  """The scenario one market sees over a day.

  Attributes:
      arrivals: The customers arriving at each interval 1..T.
      res: The RES availability at each interval.
      base_q: The inflexible reactive load at each interval in kVAr.
      price: The grid tariff in $/kWh.
      max_customers: The per-interval arrival cap.
  """

  arrivals: tuple[tuple[Customer, ...], ...]
  res: tuple[ResState, ...]
  base_q: tuple[float, ...]
  price: float = _DEFAULT_PRICE
  max_customers: int = 1

  def __post_init__(self):
    if not len(self.arrivals) == len(self.res) == len(self.base_q):
      raise ValueError("Episode series must share one length.")
    for t, group in enumerate(self.arrivals, start=1):
      for customer in group:
        if customer.arrival != t or customer.deadline > self.horizon:
          raise ValueError(
              f"Customer {customer.customer_id} does not fit interval {t}"
              f" of a {self.horizon}-interval episode."
          )
        check_willingness_decay(customer, self.price)

  @property
  def horizon(self) -> int:
    return len(self.arrivals)

  @property
  def customers(self) -> tuple[Customer, ...]:
    return tuple(customer for group in self.arrivals for customer in group)

  def start(self) -> IhrMarketState:
    return new_market(price=self.price, max_customers=self.max_customers)

  def advance(self, state: IhrMarketState) -> IhrMarketState:
    """Admits the arrivals and RES of the interval after state.t."""
    index = state.t
    return step_arrivals(
        state,
        self.arrivals[index],
        self.res[index],
        base_q=self.base_q[index],
    )

  def peak_active(self) -> int:
    """The largest number of customers that can be active at once."""
    peak = 0
    for t in range(1, self.horizon + 1):
      peak = max(
          peak,
          sum(1 for c in self.customers if c.arrival <= t <= c.deadline),
      )
    return peak


@dataclasses.dataclass(frozen=True)
class MatchRecord:
  """One audited match."""

  t: int
  ihr: int
  customer: int
  supply: str
  kwh: float
  willingness: float
  welfare: float


def match_records(state: IhrMarketState, m: MatchAmounts) -> list[MatchRecord]:
  """Lists the non-zero entries of a match with their welfare contribution."""
  records = []
  for customer in state.active:
    pi = willingness(state.price, customer, state.t)
    for supply in Supply:
      kwh = m.amount(supply, customer.customer_id)
      if kwh <= 0:
        continue
      cost = state.price if supply == Supply.GRID else _RES_MARGINAL_COST
      records.append(
          MatchRecord(
              t=state.t,
              ihr=customer.ihr_id,
              customer=customer.customer_id,
              supply=supply.value,
              kwh=kwh,
              willingness=pi,
              welfare=(pi - cost) * kwh,
          )
      )
  return records


def write_episode_csv(path: str, records: Sequence[MatchRecord]) -> None:
  """Writes match records to a CSV file."""
  frame = pd.DataFrame(
      [dataclasses.astuple(record) for record in records],
      columns=list(_EPISODE_COLUMNS),
  )
  with tf.io.gfile.GFile(path, "w") as file:
    frame.to_csv(file, index=False)
