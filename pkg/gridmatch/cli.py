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

"""A command module of the GridMatch package.

Holds the run configuration document and the commands behind `main.py`:
network validation, scenario generation, training, evaluation and single
OPF solves.
"""

import dataclasses
import functools
import json
import math
import os
from typing import Any, Callable, Final, Mapping
from absl import logging
import numpy as np
import pandas as pd
import tensorflow as tf
from gridmatch import coordination
from gridmatch import matching_policy
from gridmatch import network_model
from gridmatch import neural_network
from gridmatch import optimal_power_flow
from gridmatch import policy_learning
from gridmatch import scenario_generation
from gridmatch.optimal_power_flow import MarketPrices
from gridmatch.optimal_power_flow import SolverConfig
from gridmatch.policy_learning import TrainConfig
from gridmatch.scenario_generation import ScenarioConfig

CONFIG_ENV_VAR: Final[str] = "GRIDMATCH_CONFIG"
EXIT_OK: Final[int] = 0
EXIT_ERROR: Final[int] = 1
EXIT_DOMAIN_FAILURE: Final[int] = 2
PARTITION_PRESETS: Final[Mapping[str, str]] = {
    "full": network_model.BUNDLED_PARTITION,
    "desk": network_model.BUNDLED_DESK_PARTITION,
}
_SECTIONS: Final[tuple[str, ...]] = (
    "network",
    "partition",
    "scenario",
    "train",
    "solver",
    "prices",
    "output",
)
_HELD_OUT_STREAM: Final[int] = 1
_CHECKPOINT_DIRECTORY: Final[str] = "checkpoints"
_SCENARIO_DIRECTORY: Final[str] = "scenario"
_DAYS_DIRECTORY: Final[str] = "days"
_LEARNED: Final[str] = "LA"
_ON_ARRIVAL: Final[str] = "MA"
_ORACLE: Final[str] = "oracle"


class ConfigError(Exception):
  """Error when a run configuration document is invalid."""

  pass


_INPUT_ERRORS: Final[tuple[type[Exception], ...]] = (
    ConfigError,
    network_model.NetworkFormatError,
    network_model.NonRadialNetworkError,
    network_model.PartitionError,
    optimal_power_flow.NetworkReductionError,
    optimal_power_flow.OpfInstanceError,
    neural_network.CheckpointError,
    scenario_generation.ScenarioError,
    scenario_generation.ProfileFormatError,
)


def _exits_on_input_errors(command: Callable[..., int]) -> Callable[..., int]:
  """Maps missing or invalid input files of a command to exit code 1."""

  @functools.wraps(command)
  def wrapper(*args, **kwargs) -> int:
    try:
      return command(*args, **kwargs)
    except _INPUT_ERRORS as error:
      logging.error(f"{command.__name__} failed: {error}")
      return EXIT_ERROR

  return wrapper


@dataclasses.dataclass(frozen=True)
class RunConfig:
  """The settings of a command-line run.

  Attributes:
      network_path: A network file. The bundled 33-bus feeder when None.
      partition_path: A partition file. A bundled partition when None.
      partition_preset: The bundled partition, full or desk.
      scenario: The scenario description.
      network_loads: Whether the zone loads come from the network's nominal
        bus loads.
      train_settings: TrainConfig overrides. Horizon, interval length, price
        and slots default to the scenario's.
      solver: The OPF solver settings.
      prices: The central agent's prices.
      output_directory: Where every command writes its files.
      modes: The market models trained and evaluated.
      eval_episodes: The number of held-out days of an evaluation.
  """

  network_path: str | None = None
  partition_path: str | None = None
  partition_preset: str = "desk"
  scenario: ScenarioConfig = scenario_generation.SCENARIO_PRESETS[
      "desk_scenario1"
  ]
  network_loads: bool = False
  train_settings: Mapping[str, Any] = dataclasses.field(default_factory=dict)
  solver: SolverConfig = SolverConfig()
  prices: MarketPrices = MarketPrices()
  output_directory: str = "gridmatch_output"
  modes: tuple[str, ...] = (coordination.DECENTRALIZED,)
  eval_episodes: int = 5

  def __post_init__(self):
    if self.partition_preset not in PARTITION_PRESETS:
      raise ConfigError(f"Unknown partition preset: {self.partition_preset}.")
    unknown = set(self.modes) - set(coordination.MODES)
    if unknown or not self.modes:
      raise ConfigError(f"Invalid market models: {self.modes}.")
    if self.eval_episodes < 1:
      raise ConfigError("At least one evaluation episode is needed.")
    if not math.isclose(self.scenario.price, self.prices.tariff):
      raise ConfigError(
          f"The scenario price {self.scenario.price} differs from the tariff"
          f" {self.prices.tariff}."
      )


def _as_tuples(value: Any) -> Any:
  if isinstance(value, list):
    return tuple(_as_tuples(item) for item in value)
  return value


def _build(cls: type, section: Mapping[str, Any], name: str):
  known = {field.name for field in dataclasses.fields(cls)}
  unknown = set(section) - known
  if unknown:
    raise ConfigError(f"Unknown keys in '{name}': {sorted(unknown)}.")
  try:
    return cls(**{key: _as_tuples(value) for key, value in section.items()})
  except (TypeError, ValueError, scenario_generation.ScenarioError) as error:
    raise ConfigError(f"Invalid '{name}' section: {error}") from error


def _scenario_from(section: Mapping[str, Any]) -> ScenarioConfig:
  section = dict(section)
  preset = section.pop("preset", "desk_scenario1")
  if preset not in scenario_generation.SCENARIO_PRESETS:
    raise ConfigError(f"Unknown scenario preset: {preset}.")
  base = scenario_generation.SCENARIO_PRESETS[preset]
  known = {field.name for field in dataclasses.fields(ScenarioConfig)}
  if set(section) - known:
    raise ConfigError(
        f"Unknown keys in 'scenario': {sorted(set(section) - known)}."
    )
  merged = dataclasses.asdict(base)
  merged.update({key: _as_tuples(value) for key, value in section.items()})
  return _build(ScenarioConfig, merged, "scenario")


def parse_run_config(text: str) -> RunConfig:
  """Parses a JSON run configuration document.

  Sections are network ({path}), partition ({path, preset}), scenario
  ({preset, seed, ...ScenarioConfig fields}), train (TrainConfig fields with
  nested tcn and critic objects), solver, prices and output ({directory,
  modes, eval_episodes, network_loads}). Every section is optional.

  Args:
      text: The JSON document.

  Returns:
      The run configuration.

  Raises:
      ConfigError: On invalid JSON, unknown keys or invalid values.
  """
  try:
    document = json.loads(text)
  except json.JSONDecodeError as error:
    raise ConfigError(
        f"The configuration is not valid JSON: {error}"
    ) from error
  if not isinstance(document, dict):
    raise ConfigError("The configuration must be a JSON object.")
  unknown = set(document) - set(_SECTIONS)
  if unknown:
    raise ConfigError(f"Unknown configuration sections: {sorted(unknown)}.")
  network = document.get("network", {})
  partition = document.get("partition", {})
  output = document.get("output", {})
  for name, section, keys in (
      ("network", network, {"path"}),
      ("partition", partition, {"path", "preset"}),
      (
          "output",
          output,
          {"directory", "modes", "eval_episodes", "network_loads"},
      ),
  ):
    if set(section) - keys:
      raise ConfigError(
          f"Unknown keys in '{name}': {sorted(set(section) - keys)}."
      )
  defaults = RunConfig()
  run = RunConfig(
      network_path=network.get("path"),
      partition_path=partition.get("path"),
      partition_preset=partition.get("preset", defaults.partition_preset),
      scenario=_scenario_from(document.get("scenario", {})),
      network_loads=bool(output.get("network_loads", defaults.network_loads)),
      train_settings=dict(document.get("train", {})),
      solver=_build(SolverConfig, document.get("solver", {}), "solver"),
      prices=_build(MarketPrices, document.get("prices", {}), "prices"),
      output_directory=output.get("directory", defaults.output_directory),
      modes=tuple(output.get("modes", defaults.modes)),
      eval_episodes=int(output.get("eval_episodes", defaults.eval_episodes)),
  )
  train_config(run)
  return run


def resolve_config_path(path: str | None = None) -> str | None:
  """Returns the given path, else the one named by GRIDMATCH_CONFIG."""
  return path or os.getenv(CONFIG_ENV_VAR) or None


def load_run_config(path: str | None = None) -> RunConfig:
  """Reads the run configuration, or returns the defaults when none is set.

  Raises:
      ConfigError: If the file is missing or invalid.
  """
  path = resolve_config_path(path)
  if path is None:
    logging.info("No configuration given, using the desk-scale defaults.")
    return RunConfig()
  if not tf.io.gfile.exists(path):
    raise ConfigError(f"The configuration file {path} does not exist.")
  with tf.io.gfile.GFile(path, "r") as file:
    return parse_run_config(file.read())


def with_seed(run: RunConfig, seed: int) -> RunConfig:
  """Overrides the scenario and training seeds."""
  settings = dict(run.train_settings)
  settings["seed"] = seed
  return dataclasses.replace(
      run,
      scenario=dataclasses.replace(run.scenario, seed=seed),
      train_settings=settings,
  )


def train_config(run: RunConfig, *, pooled: bool = False) -> TrainConfig:
  """Builds the training settings of one market from the run configuration.

  Raises:
      ConfigError: If the train section is invalid.
  """
  scenario = run.scenario
  slots = scenario.arrival_cap()
  if pooled:
    slots *= len(scenario.ihr_ids)
  res_max = max(scenario.inverter_kva, default=1.0)
  if pooled:
    res_max *= len(scenario.ihr_ids)
  settings = dict(run.train_settings)
  tcn = _build(neural_network.TcnConfig, settings.pop("tcn", {}), "train.tcn")
  critic = _build(
      neural_network.CriticConfig, settings.pop("critic", {}), "train.critic"
  )
  derived = {
      "horizon": scenario.horizon,
      "delta_t": scenario.delta_t,
      "price": scenario.price,
      "demand_max": scenario.charge_kwh,
      "res_max": res_max,
      "max_customers": slots,
      "seed": scenario.seed,
  }
  derived.update(settings)
  derived.update(tcn=tcn, critic=critic)
  return _build(TrainConfig, derived, "train")


@dataclasses.dataclass(frozen=True)
class Workspace:
  """The network, partition and scenario a run operates on."""

  network: network_model.NetworkModel
  partition: network_model.IhrPartition
  scenario: ScenarioConfig


def open_workspace(run: RunConfig) -> Workspace:
  """Loads the network and partition and aligns the scenario with them.

  Raises:
      ConfigError: If the scenario IHRs differ from the partition's.
  """
  if run.network_path:
    net = network_model.read_network(run.network_path)
  else:
    net = network_model.load_bundled_network()
  partition_path = run.partition_path or network_model.bundled_data_path(
      PARTITION_PRESETS[run.partition_preset]
  )
  part = network_model.read_partition(partition_path, net)
  if tuple(run.scenario.ihr_ids) != part.ihr_ids:
    raise ConfigError(
        f"The scenario IHRs {run.scenario.ihr_ids} differ from the partition"
        f" IHRs {part.ihr_ids}."
    )
  scenario = run.scenario
  if run.network_loads:
    scenario = scenario_generation.with_network_loads(scenario, net, part)
  return Workspace(network=net, partition=part, scenario=scenario)


def cmd_net_validate(run: RunConfig) -> int:
  """Checks the network and the partition's voltage spreads.

  The peak load is the nominal bus load times the scenario's load scale.

  Returns:
      0 when every IHR passes, 2 when an IHR exceeds the tolerance and 1 when
      the files are invalid or the peak-load power flow diverges.
  """
  try:
    workspace = open_workspace(run)
    scale = workspace.scenario.load_scale
    buses = workspace.network.buses
    report = network_model.validate_partition(
        workspace.network,
        workspace.partition,
        peak_p_kw={bus.bus_id: bus.nominal_p_kw * scale for bus in buses},
        peak_q_kvar={bus.bus_id: bus.nominal_q_kvar * scale for bus in buses},
    )
  except _INPUT_ERRORS + (network_model.PowerFlowConvergenceError,) as error:
    logging.error(f"Network validation failed: {error}")
    return EXIT_ERROR
  frame = pd.DataFrame(
      [
          (ihr_id, spread, report.delta, ihr_id not in report.failing)
          for ihr_id, spread in sorted(report.spreads.items())
      ],
      columns=["ihr", "spread", "delta", "passed"],
  )
  tf.io.gfile.makedirs(run.output_directory)
  with tf.io.gfile.GFile(
      os.path.join(run.output_directory, "partition_report.csv"), "w"
  ) as file:
    frame.to_csv(file, index=False, float_format="%.10g")
  logging.info(f"Partition report:\n{frame.to_string(index=False)}")
  if not report.passed:
    logging.warning(f"IHRs {list(report.failing)} exceed the spread tolerance.")
    return EXIT_DOMAIN_FAILURE
  return EXIT_OK


@_exits_on_input_errors
def cmd_scenario_gen(run: RunConfig) -> int:
  """Generates one day and writes it under the output directory."""
  workspace = open_workspace(run)
  rng = np.random.default_rng(workspace.scenario.seed)
  data = scenario_generation.gen_scenario(workspace.scenario, rng)
  scenario_generation.write_episode_data(
      data, os.path.join(run.output_directory, _SCENARIO_DIRECTORY)
  )
  return EXIT_OK


def _market_keys(run: RunConfig, scenario: ScenarioConfig) -> list[int]:
  keys = []
  if coordination.DECENTRALIZED in run.modes:
    keys.extend(scenario.ihr_ids)
  if coordination.CENTRALIZED in run.modes:
    keys.append(coordination.POOLED_MARKET)
  return keys


def _checkpoint_path(run: RunConfig, key: int) -> str:
  name = "pooled" if key == coordination.POOLED_MARKET else f"ihr_{key}"
  return os.path.join(run.output_directory, _CHECKPOINT_DIRECTORY, f"{name}.pt")


def _episode_source(scenario: ScenarioConfig, key: int):
  def draw(rng: np.random.Generator):
    data = scenario_generation.gen_scenario(scenario, rng)
    if key == coordination.POOLED_MARKET:
      return data.pooled()
    return data.for_ihr(key)

  return draw


@_exits_on_input_errors
def cmd_train(run: RunConfig, *, resume: bool = False) -> int:
  """Trains one policy per market and writes checkpoints and curves."""
  workspace = open_workspace(run)
  tf.io.gfile.makedirs(
      os.path.join(run.output_directory, _CHECKPOINT_DIRECTORY)
  )
  summary = []
  for key in _market_keys(run, workspace.scenario):
    config = train_config(run, pooled=key == coordination.POOLED_MARKET)
    checkpoint = _checkpoint_path(run, key)
    initial = checkpoint if resume and tf.io.gfile.exists(checkpoint) else None
    result = policy_learning.train(
        config,
        _episode_source(workspace.scenario, key),
        initial_checkpoint=initial,
        checkpoint_path=checkpoint,
    )
    neural_network.save_checkpoint(
        checkpoint,
        actor=result.actor,
        critic=result.critic,
        actor_optimizer=result.actor_optimizer,
        critic_optimizer=result.critic_optimizer,
        epoch=config.epochs,
    )
    name = "pooled" if key == coordination.POOLED_MARKET else f"ihr_{key}"
    policy_learning.write_training_log(
        os.path.join(run.output_directory, f"training_{name}.csv"),
        result.curve,
    )
    frame = policy_learning.curve_frame(result.curve)
    summary.append((
        name,
        float(frame["welfare"].mean()) if len(frame) else 0.0,
        float(frame["ma_welfare"].mean()) if len(frame) else 0.0,
    ))
  table = pd.DataFrame(summary, columns=["market", "la_welfare", "ma_welfare"])
  with tf.io.gfile.GFile(
      os.path.join(run.output_directory, "training_summary.csv"), "w"
  ) as file:
    table.to_csv(file, index=False, float_format="%.10g")
  logging.info(f"Training summary:\n{table.to_string(index=False)}")
  return EXIT_OK


def load_learned_policy(
    run: RunConfig, key: int
) -> policy_learning.LearnedMatchingPolicy:
  """Restores the trained TCN of a market from its checkpoint."""
  config = train_config(run, pooled=key == coordination.POOLED_MARKET)
  actor, critic = policy_learning.build_networks(config)
  payload = neural_network.load_checkpoint(_checkpoint_path(run, key))
  neural_network.restore_networks(payload, actor=actor, critic=critic)
  return policy_learning.LearnedMatchingPolicy(actor, scales=config.scales)


def held_out_days(
    scenario: ScenarioConfig, count: int
) -> list[scenario_generation.EpisodeData]:
  """Draws evaluation days from streams disjoint from training."""
  return [
      scenario_generation.gen_scenario(
          scenario,
          np.random.default_rng([scenario.seed, _HELD_OUT_STREAM, index]),
      )
      for index in range(count)
  ]


@_exits_on_input_errors
def cmd_eval(run: RunConfig) -> int:
  """Evaluates LA and MA in every market model on held-out days.

  Writes `summary.csv` (market model x policy), `welfare_by_ihr.csv` (one
  row per policy, one column per IHR, with the hindsight optimum) and the
  day reports of the first held-out day.
  """
  workspace = open_workspace(run)
  grid = coordination.make_grid_context(
      workspace.network,
      workspace.partition,
      run.prices,
      delta_t=workspace.scenario.delta_t,
      solver=run.solver,
  )
  days = held_out_days(workspace.scenario, run.eval_episodes)
  ihr_ids = workspace.partition.ihr_ids
  summary = []
  by_ihr = {}
  for mode in run.modes:
    keys = (
        [coordination.POOLED_MARKET]
        if mode == coordination.CENTRALIZED
        else list(ihr_ids)
    )
    learned = {key: load_learned_policy(run, key) for key in keys}
    baseline = {key: matching_policy.MatchOnArrivalPolicy() for key in keys}
    for label, policies in ((_LEARNED, learned), (_ON_ARRIVAL, baseline)):
      totals = np.zeros(len(ihr_ids))
      for index, data in enumerate(days):
        rng = np.random.default_rng([workspace.scenario.seed, index])
        report = coordination.run_day(
            data, policies, grid, mode=mode, rng=rng
        )
        welfare = report.welfare_by_ihr()
        totals += np.array([welfare[ihr_id] for ihr_id in ihr_ids])
        if index == 0:
          coordination.write_day_report(
              report,
              os.path.join(
                  run.output_directory, _DAYS_DIRECTORY, f"{mode}_{label}"
              ),
          )
      averages = totals / len(days)
      summary.append((mode, label, float(averages.sum())))
      if mode == coordination.DECENTRALIZED:
        by_ihr[label] = averages
  if coordination.DECENTRALIZED in run.modes:
    oracle = np.zeros(len(ihr_ids))
    for data in days:
      for column, ihr_id in enumerate(ihr_ids):
        value, _ = matching_policy.offline_oracle(
            data.for_ihr(ihr_id), data.delta_t
        )
        oracle[column] += value
    by_ihr[_ORACLE] = oracle / len(days)
  summary_frame = pd.DataFrame(summary, columns=["model", "policy", "welfare"])
  tf.io.gfile.makedirs(run.output_directory)
  with tf.io.gfile.GFile(
      os.path.join(run.output_directory, "summary.csv"), "w"
  ) as file:
    summary_frame.to_csv(file, index=False, float_format="%.10g")
  if by_ihr:
    ihr_frame = pd.DataFrame.from_dict(
        by_ihr, orient="index", columns=[f"ihr_{h}" for h in ihr_ids]
    )
    ihr_frame.index.name = "policy"
    with tf.io.gfile.GFile(
        os.path.join(run.output_directory, "welfare_by_ihr.csv"), "w"
    ) as file:
      ihr_frame.to_csv(file, float_format="%.10g")
  logging.info(f"Evaluation summary:\n{summary_frame.to_string(index=False)}")
  return EXIT_OK


@_exits_on_input_errors
def cmd_opf_solve(
    run: RunConfig, *, instance_path: str, output_path: str
) -> int:
  """Solves one OPF instance file and writes its solution and residuals.

  An infeasible instance writes no solution. Its residual report flags the
  constraint families whose relaxation restores feasibility instead.

  Returns:
      0 on an optimum, 2 when the instance is infeasible and 1 when the
      instance file is invalid or the solver fails.
  """
  inst = optimal_power_flow.read_instance(instance_path)
  residuals_path = f"{output_path}.residuals.csv"
  try:
    sol = optimal_power_flow.solve(inst, run.solver)
  except optimal_power_flow.OpfInfeasibleError as error:
    logging.error(str(error))
    frame = pd.DataFrame(
        [
            (family, family in error.binding)
            for family in optimal_power_flow.CONSTRAINT_FAMILIES
        ],
        columns=["family", "binding"],
    )
    directory = os.path.dirname(residuals_path)
    if directory:
      tf.io.gfile.makedirs(directory)
    with tf.io.gfile.GFile(residuals_path, "w") as file:
      frame.to_csv(file, index=False)
    return EXIT_DOMAIN_FAILURE
  except optimal_power_flow.OpfSolverError as error:
    logging.error(f"The OPF failed: {error}")
    return EXIT_ERROR
  optimal_power_flow.write_solution(output_path, inst, sol)
  report = optimal_power_flow.residuals(inst, sol)
  report["soc_gap"] = optimal_power_flow.soc_gap(sol)
  frame = pd.DataFrame(sorted(report.items()), columns=["family", "residual"])
  with tf.io.gfile.GFile(residuals_path, "w") as file:
    frame.to_csv(file, index=False, float_format="%.10g")
  logging.info(f"OPF residuals:\n{frame.to_string(index=False)}")
  return EXIT_OK
