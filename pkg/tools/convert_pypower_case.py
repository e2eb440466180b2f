"""Convert a PYPOWER/MATPOWER case into the plain-text case format.

Usage: python tools/convert_pypower_case.py case57 src/pgnn_pf/cases/ieee57.case

Column mapping (MATPOWER -> case file):
  bus:    BUS_I, BUS_TYPE, PD, QD, GS, BS, VG of the bus's generator (PV/slack)
          or 1.0 (PQ), VA (slack only, degrees)
  branch: F_BUS, T_BUS, BR_R, BR_X, BR_B, TAP, SHIFT (in-service rows only)
  gen:    GEN_BUS, PMAX, PG (in-service rows only)
"""

import importlib
import sys

from pgnn_pf.case_model import from_matpower, serialize_case

name, out = sys.argv[1], sys.argv[2]
ppc = getattr(importlib.import_module(f"pypower.{name}"), name)()
system = from_matpower(ppc["baseMVA"], ppc["bus"], ppc["branch"], ppc["gen"])
header = f"# {name} converted from the PYPOWER distribution of the MATPOWER test case\n"
with open(out, "w", encoding="utf-8") as fh:
    fh.write(header + serialize_case(system))
