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

"""A main file running the matching commands of the GridMatch package.

Usage:
  python main.py net validate --config=run.json
  python main.py scenario gen --config=run.json
  python main.py train --config=run.json [--resume]
  python main.py eval --config=run.json
  python main.py opf solve --instance=instance.csv --output=solution.csv
"""

from typing import Sequence
from absl import app
from absl import flags
from absl import logging
import torch
from gridmatch import cli

FLAGS = flags.FLAGS


_CONFIG = flags.DEFINE_string(
    "config",
    None,
    "Path to the JSON run configuration. Falls back to the GRIDMATCH_CONFIG"
    " environment variable, then to the desk-scale defaults.",
)
_SEED = flags.DEFINE_integer(
    "seed",
    None,
    "Overrides the scenario and training seeds of the configuration.",
)
_THREADS = flags.DEFINE_integer(
    "threads",
    1,
    "The number of CPU threads torch may use. Keep fixed for byte-identical"
    " outputs.",
)
_RESUME = flags.DEFINE_bool(
    "resume",
    False,
    "Whether training continues from the checkpoints in the output"
    " directory.",
)
_INSTANCE = flags.DEFINE_string(
    "instance",
    None,
    "The OPF instance CSV consumed by `opf solve`.",
)
_OUTPUT = flags.DEFINE_string(
    "output",
    None,
    "The solution CSV written by `opf solve`.",
)

_COMMANDS = ("net validate", "scenario gen", "train", "eval", "opf solve")


def main(argv: Sequence[str]) -> int:
  """Parses the subcommand and flags and runs the command."""
  command = " ".join(argv[1:])
  if command not in _COMMANDS:
    raise app.UsageError(
        f"Unknown command '{command}'. Choose one of: {', '.join(_COMMANDS)}."
    )
  torch.set_num_threads(_THREADS.value)
  try:
    run = cli.load_run_config(_CONFIG.value)
  except cli.ConfigError as error:
    logging.error(str(error))
    return cli.EXIT_ERROR
  if _SEED.value is not None:
    run = cli.with_seed(run, _SEED.value)
  if command == "net validate":
    return cli.cmd_net_validate(run)
  if command == "scenario gen":
    return cli.cmd_scenario_gen(run)
  if command == "train":
    return cli.cmd_train(run, resume=_RESUME.value)
  if command == "eval":
    return cli.cmd_eval(run)
  if not _INSTANCE.value or not _OUTPUT.value:
    raise app.UsageError("`opf solve` needs --instance and --output.")
  return cli.cmd_opf_solve(
      run, instance_path=_INSTANCE.value, output_path=_OUTPUT.value
  )


if __name__ == "__main__":
  app.run(main)
