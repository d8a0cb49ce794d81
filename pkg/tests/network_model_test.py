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

"""Tests for utility functions in network_model.py."""

import math
import os
import tempfile
from absl.testing import absltest
from absl.testing import parameterized
from gridmatch import network_model

_TWO_BUS = """#base_mva=1.0,base_kv=12.66,slack=1,impedance=pu
B,1,0.0,0.0,0.81,1.21
B,2,0.0,0.0,0.81,1.21,100,0
L,1,2,0.01,0.0,10.0
"""

_CHAIN = """#base_mva=1.0,base_kv=12.66,slack=1,impedance=pu
# A four-bus chain.
B,1,0.0,0.0,0.81,1.21
B,2,0.0,0.0,0.81,1.21,200,100
B,3,0.0,0.0,0.81,1.21,200,100
B,4,0.0,0.0,0.81,1.21,200,100
L,1,2,0.02,0.01,10.0
L,2,3,0.02,0.01,10.0
L,4,3,0.02,0.01,10.0
"""


class PerUnitBaseTest(absltest.TestCase):

  def test_conversions(self):
    base = network_model.PerUnitBase(base_mva=1.0, base_kv=12.66)
    self.assertAlmostEqual(base.impedance_ohm, 160.2756)
    self.assertAlmostEqual(base.kw_to_pu(100.0), 0.1)
    self.assertAlmostEqual(base.pu_to_kw(0.25), 250.0)
    self.assertAlmostEqual(base.ohm_to_pu(160.2756), 1.0)
    self.assertAlmostEqual(base.pu_to_ohm(base.ohm_to_pu(3.7)), 3.7)

  def test_raises_error_non_positive_base(self):
    with self.assertRaisesRegex(ValueError, "Bases must be positive"):
      network_model.PerUnitBase(base_mva=0.0, base_kv=12.66)


class ParseNetworkTest(parameterized.TestCase):

  def test_bundled_feeder(self):
    net = network_model.load_bundled_network()
    self.assertLen(net.buses, 33)
    self.assertLen(net.lines, 32)
    self.assertEqual(net.slack_id, 1)
    self.assertAlmostEqual(sum(bus.nominal_p_kw for bus in net.buses), 3715.0)
    self.assertAlmostEqual(
        sum(bus.nominal_q_kvar for bus in net.buses), 2300.0
    )
    self.assertAlmostEqual(net.line_by_key[(1, 2)].r, 0.0922 / 160.2756)
    self.assertEqual(net.children[6], (7, 26))

  def test_reorients_lines_away_from_slack(self):
    net = network_model.parse_network(_CHAIN)
    self.assertIn((3, 4), net.line_by_key)
    self.assertNotIn((4, 3), net.line_by_key)
    self.assertEqual(net.order, (1, 2, 3, 4))
    self.assertEqual(net.depth[4], 3)

  @parameterized.named_parameters(
      (
          "loop",
          (
              "#base_mva=1.0,base_kv=12.66,slack=1\n"
              "B,1,0,0,0.81,1.21\nB,2,0,0,0.81,1.21\nB,3,0,0,0.81,1.21\n"
              "L,1,2,0.1,0.1,1\nL,2,3,0.1,0.1,1\nL,3,1,0.1,0.1,1\n"
          ),
      ),
      (
          "disconnected",
          (
              "#base_mva=1.0,base_kv=12.66,slack=1\n"
              "B,1,0,0,0.81,1.21\nB,2,0,0,0.81,1.21\nB,3,0,0,0.81,1.21\n"
              "B,4,0,0,0.81,1.21\n"
              "L,1,2,0.1,0.1,1\nL,2,3,0.1,0.1,1\nL,3,1,0.1,0.1,1\n"
          ),
      ),
  )
  def test_raises_error_non_radial(self, text):
    with self.assertRaises(network_model.NonRadialNetworkError):
      network_model.parse_network(text)

  @parameterized.named_parameters(
      (
          "missing_slack",
          "#base_mva=1.0,base_kv=12.66\nB,1,0,0,0.81,1.21\n",
          "slack",
      ),
      (
          "undefined_slack",
          "#base_mva=1.0,base_kv=12.66,slack=7\nB,1,0,0,0.81,1.21\n",
          "Slack bus 7",
      ),
      (
          "malformed_row",
          "#base_mva=1.0,base_kv=12.66,slack=1\nB,1,0,0,0.81\n",
          "Malformed row",
      ),
      (
          "non_numeric",
          "#base_mva=1.0,base_kv=12.66,slack=1\nB,1,0,0,low,1.21\n",
          "Non-numeric",
      ),
      (
          "duplicate_bus",
          (
              "#base_mva=1.0,base_kv=12.66,slack=1\n"
              "B,1,0,0,0.81,1.21\nB,1,0,0,0.81,1.21\n"
          ),
          "Duplicate bus",
      ),
      (
          "negative_resistance",
          (
              "#base_mva=1.0,base_kv=12.66,slack=1\n"
              "B,1,0,0,0.81,1.21\nB,2,0,0,0.81,1.21\nL,1,2,-0.1,0.1,1\n"
          ),
          "r > 0",
      ),
      (
          "undefined_bus",
          (
              "#base_mva=1.0,base_kv=12.66,slack=1\n"
              "B,1,0,0,0.81,1.21\nB,2,0,0,0.81,1.21\nL,1,3,0.1,0.1,1\n"
          ),
          "undefined bus",
      ),
  )
  def test_raises_error_malformed(self, text, message):
    with self.assertRaisesRegex(network_model.NetworkFormatError, message):
      network_model.parse_network(text)

  def test_read_network(self):
    with tempfile.TemporaryDirectory() as temporary_directory:
      path = os.path.join(temporary_directory, "net.csv")
      with open(path, "w") as file:
        file.write(_TWO_BUS)
      net = network_model.read_network(path)
    self.assertLen(net.lines, 1)
    self.assertAlmostEqual(net.lines[0].r, 0.01)

  def test_raises_error_missing_network_file(self):
    with self.assertRaisesRegex(
        network_model.NetworkFormatError, "does not exist"
    ):
      network_model.read_network("/nonexistent/net.csv")

  def test_raises_error_unknown_bundled_file(self):
    with self.assertRaisesRegex(ValueError, "not part of the GridMatch"):
      network_model.bundled_data_path("missing.csv")

  def test_with_load_profiles(self):
    net = network_model.parse_network(_TWO_BUS).with_load_profiles((0.5, 1.0))
    self.assertEqual(net.horizon, 2)
    self.assertEqual(net.bus_by_id[2].base_p_load, (50.0, 100.0))
    self.assertEqual(net.bus_by_id[2].base_q_load, (0.0, 0.0))


class PartitionTest(absltest.TestCase):

  def test_bundled_partition_interconnects(self):
    net = network_model.load_bundled_network()
    part = network_model.read_partition(
        network_model.bundled_data_path(network_model.BUNDLED_PARTITION), net
    )
    self.assertEqual(part.ihr_ids, (1, 2, 3, 4, 5))
    self.assertEqual(
        dict(part.interconnect), {1: 2, 2: 19, 3: 23, 4: 7, 5: 26}
    )
    self.assertAlmostEqual(part.delta, 0.035)
    self.assertEqual(part.buses_of(3), (23, 24, 25))

  def test_zone_nominal_loads(self):
    net = network_model.load_bundled_network()
    part = network_model.read_partition(
        network_model.bundled_data_path(network_model.BUNDLED_PARTITION), net
    )
    loads = network_model.zone_nominal_loads(net, part)
    self.assertEqual(loads[2], (360.0, 160.0))
    self.assertAlmostEqual(sum(p for p, _ in loads.values()), 3715.0)
    self.assertAlmostEqual(sum(q for _, q in loads.values()), 2300.0)

  def test_raises_error_uncovered_bus(self):
    net = network_model.parse_network(_CHAIN)
    with self.assertRaisesRegex(
        network_model.PartitionError, "Missing: \\[4\\]"
    ):
      network_model.build_partition(net, zones={2: 1, 3: 1}, delta=0.01)

  def test_raises_error_slack_in_zone(self):
    net = network_model.parse_network(_CHAIN)
    with self.assertRaisesRegex(network_model.PartitionError, "unexpected"):
      network_model.build_partition(
          net, zones={1: 1, 2: 1, 3: 1, 4: 1}, delta=0.01
      )

  def test_raises_error_disconnected_zone(self):
    net = network_model.parse_network(_CHAIN)
    with self.assertRaisesRegex(
        network_model.PartitionError, "IHR 1 is not a connected subtree"
    ):
      network_model.build_partition(
          net, zones={2: 1, 3: 2, 4: 1}, delta=0.01
      )

  def test_raises_error_missing_delta(self):
    net = network_model.parse_network(_CHAIN)
    with self.assertRaisesRegex(network_model.NetworkFormatError, "#delta"):
      network_model.parse_partition("2,1\n3,1\n4,1\n", net)

  def test_raises_error_duplicate_assignment(self):
    net = network_model.parse_network(_CHAIN)
    with self.assertRaisesRegex(network_model.NetworkFormatError, "twice"):
      network_model.parse_partition("#delta=0.1\n2,1\n2,2\n3,1\n4,1\n", net)


class FixedPointPowerflowTest(absltest.TestCase):

  def test_two_bus_closed_form(self):
    net = network_model.parse_network(_TWO_BUS)
    result = network_model.fixed_point_powerflow(net, p_demand_kw={2: 100.0})
    # The sending-end flow solves p = 0.1 + r * p**2 at V_slack = 1.
    expected = (1.0 - math.sqrt(1.0 - 4.0 * 0.01 * 0.1)) / (2.0 * 0.01)
    self.assertAlmostEqual(result.p_flow[(1, 2)], expected, places=12)
    self.assertAlmostEqual(result.slack_p, expected, places=12)
    self.assertAlmostEqual(result.i_sq[(1, 2)], expected**2, places=12)
    self.assertAlmostEqual(
        result.v_sq[2],
        1.0 - 2.0 * 0.01 * expected + 0.01**2 * expected**2,
        places=12,
    )
    self.assertEqual(result.v_sq[1], 1.0)

  def test_zero_load_is_flat(self):
    net = network_model.load_bundled_network()
    result = network_model.fixed_point_powerflow(net)
    for bus in net.buses:
      self.assertAlmostEqual(result.v_sq[bus.bus_id], 1.0)
    self.assertAlmostEqual(result.slack_p, 0.0)

  def test_bundled_feeder_satisfies_distflow(self):
    net = network_model.load_bundled_network()
    p_demand = {bus.bus_id: bus.nominal_p_kw for bus in net.buses}
    q_demand = {bus.bus_id: bus.nominal_q_kvar for bus in net.buses}
    result = network_model.fixed_point_powerflow(
        net, p_demand_kw=p_demand, q_demand_kvar=q_demand
    )
    residuals = network_model.powerflow_residuals(
        net, result, p_demand_kw=p_demand, q_demand_kvar=q_demand
    )
    for name, value in residuals.items():
      self.assertLess(value, 1e-10, msg=name)
    self.assertGreater(result.slack_p, 3.715)
    self.assertLess(result.voltage_magnitude(18), result.voltage_magnitude(2))

  def test_raises_error_unknown_demand_bus(self):
    net = network_model.parse_network(_TWO_BUS)
    with self.assertRaisesRegex(ValueError, "unknown buses"):
      network_model.fixed_point_powerflow(net, p_demand_kw={9: 1.0})

  def test_raises_error_infeasible_loading(self):
    net = network_model.parse_network(_TWO_BUS)
    with self.assertRaises(network_model.PowerFlowConvergenceError):
      network_model.fixed_point_powerflow(net, p_demand_kw={2: 1e6})


class ValidatePartitionTest(absltest.TestCase):

  def test_single_bus_zones_pass(self):
    net = network_model.parse_network(_CHAIN)
    part = network_model.build_partition(
        net, zones={2: 1, 3: 2, 4: 3}, delta=1e-9
    )
    report = network_model.validate_partition(net, part)
    self.assertTrue(report.passed)
    self.assertEqual(dict(report.spreads), {1: 0.0, 2: 0.0, 3: 0.0})

  def test_whole_feeder_zone_fails_tiny_delta(self):
    net = network_model.parse_network(_CHAIN)
    part = network_model.build_partition(
        net, zones={2: 1, 3: 1, 4: 1}, delta=1e-6
    )
    report = network_model.validate_partition(net, part)
    self.assertFalse(report.passed)
    self.assertEqual(report.failing, (1,))
    self.assertGreater(report.spreads[1], 1e-6)

  def test_bundled_partition_passes_at_half_load(self):
    net = network_model.load_bundled_network()
    part = network_model.read_partition(
        network_model.bundled_data_path(network_model.BUNDLED_PARTITION), net
    )
    report = network_model.validate_partition(
        net,
        part,
        peak_p_kw={bus.bus_id: 0.5 * bus.nominal_p_kw for bus in net.buses},
        peak_q_kvar={
            bus.bus_id: 0.5 * bus.nominal_q_kvar for bus in net.buses
        },
    )
    self.assertTrue(report.passed)
    self.assertLen(report.spreads, 5)


if __name__ == "__main__":
  absltest.main()
