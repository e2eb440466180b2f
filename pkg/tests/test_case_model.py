import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgnn_pf.case_model import (BusType, CaseFormatError, CaseValidationError, adjacency,
                                build_admittance, parse_case, serialize_case)

from conftest import THREE_BUS, TWO_BUS

# Independent reference: MATPOWER-convention Ybus of THREE_BUS (computed offline
# with PYPOWER's makeYbus).
G_REF = np.array([[6.3015410245731, -5.0, -1.47402730036149],
                  [-5.0, 6.71666666666667, -1.66666666666667],
                  [-1.07349702299202, -1.66666666666667, 2.91666666666667]])
B_REF = np.array([[-18.8766076634736, 15.0, 3.75453143880201],
                  [15.0, -19.875, 5.0],
                  [3.8880415312585, 5.0, -8.7275]])


class TestParse:
    def test_units_and_types(self, three_bus):
        b2 = three_bus.buses[1]
        assert b2.bus_type == BusType.PQ
        assert b2.p_demand == pytest.approx(0.5)
        assert b2.shunt_b == pytest.approx(0.1)
        assert three_bus.branches[1].shift == pytest.approx(math.radians(3))
        assert three_bus.branches[0].tap == 1.0
        assert three_bus.gen_capacity == pytest.approx((2.0, 0.0, 1.0))
        assert three_bus.gen_dispatch == pytest.approx((0.0, 0.0, 0.4))
        assert list(three_bus.pq) == [1] and list(three_bus.pv) == [2] and three_bus.slack == 0

    def test_base_case_shapes(self, case57, case118):
        assert case57.n_bus == 57 and len(case57.branches) == 80
        assert case118.n_bus == 118
        assert len(case57.pv) == 6

    def test_bad_number_reports_line(self):
        with pytest.raises(CaseFormatError) as ei:
            parse_case(TWO_BUS.replace("0 0.1 0", "0 x 0"))
        assert ei.value.lineno == 5

    def test_wrong_column_count(self):
        with pytest.raises(CaseFormatError):
            parse_case(TWO_BUS.replace("2 1 0 0 0 0 1.0 0", "2 1 0 0 0"))

    def test_data_before_section(self):
        with pytest.raises(CaseFormatError):
            parse_case("1 3 0 0 0 0 1 0\n" + TWO_BUS)

    @pytest.mark.parametrize("edit", [
        ("2 1 0 0 0 0 1.0 0", "2 3 0 0 0 0 1.0 0"),   # two slacks
        ("1 3 0 0 0 0 1.0 0", "1 1 0 0 0 0 1.0 0"),   # no slack
        ("1 2 0 0.1 0 0 0", "1 7 0 0.1 0 0 0"),       # unknown bus
        ("1 2 0 0.1 0 0 0", "1 2 0 0 0 0 0"),         # zero impedance
        ("1 2 0 0.1 0 0 0", "1 1 0 0.1 0 0 0"),       # self loop
    ])
    def test_validation(self, edit):
        with pytest.raises(CaseValidationError):
            parse_case(TWO_BUS.replace(*edit))

    def test_round_trip(self, case57):
        again = parse_case(serialize_case(case57))
        assert serialize_case(again) == serialize_case(case57)
        y1, y2 = build_admittance(case57), build_admittance(again)
        np.testing.assert_allclose(y2.complex, y1.complex, rtol=1e-8)


class TestAdmittance:
    def test_three_bus_reference(self, three_bus):
        y = build_admittance(three_bus)
        np.testing.assert_allclose(y.g, G_REF, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(y.b, B_REF, rtol=1e-12, atol=1e-12)

    def test_two_bus_hand(self, two_bus):
        y = build_admittance(two_bus)
        np.testing.assert_allclose(y.b, [[-10, 10], [10, -10]])
        assert not y.g.any()

    def test_symmetric_without_shifters(self, y57):
        np.testing.assert_allclose(y57.complex, y57.complex.T, atol=1e-12)

    def test_row_sums_are_shunts_for_plain_lines(self):
        sys = parse_case(TWO_BUS.replace("0 0.1 0 0 0", "0.01 0.1 0.2 0 0"))
        y = build_admittance(sys).complex
        np.testing.assert_allclose(y.sum(axis=1), [0.1j, 0.1j], atol=1e-12)

    def test_pattern_matches_adjacency(self, case57, y57, adj57):
        assert np.array_equal(y57.pattern, adj57.a != 0)


class TestAdjacency:
    def test_properties(self, adj57, case57):
        a = adj57.a
        assert np.array_equal(a, a.T)
        assert np.all(np.diag(a) == 1)
        assert set(np.unique(a)) <= {0.0, 1.0}
        n_pairs = len({frozenset((b.from_bus, b.to_bus)) for b in case57.branches})
        assert (a.sum() - 57) / 2 == n_pairs


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(0.001, 0.2), st.floats(0.01, 0.5), st.floats(0, 0.1)),
                min_size=2, max_size=2))
def test_random_lines_keep_kirchhoff_row_sums(params):
    """Without taps, shunts or charging every row of Y sums to zero."""
    (r1, x1, _), (r2, x2, _) = params
    text = ("BUS\n1 3 0 0 0 0 1 0\n2 1 10 5 0 0 1 0\n3 1 10 5 0 0 1 0\n"
            f"BRANCH\n1 2 {r1} {x1} 0 0 0\n2 3 {r2} {x2} 0 0 0\n")
    y = build_admittance(parse_case(text)).complex
    np.testing.assert_allclose(y.sum(axis=1), 0, atol=1e-9)
