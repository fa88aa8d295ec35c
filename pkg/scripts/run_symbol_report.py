#!/usr/bin/env python3
"""Symbol structure survey: ellipticity margins, parity ratios, the
(1,1)-entry factorization phase, and the large-digamma decay fit."""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from lenslab import symbols as sym

OUT = os.path.join(os.path.dirname(__file__), "..", "out", "symbols")


def main():
    os.makedirs(OUT, exist_ok=True)
    report = sym.structure_report()
    sym.save_report(report, os.path.join(OUT, "symbol_report.json"),
                    os.path.join(OUT, "symbol_report.csv"))
    rows = report["rows"]
    print(f"{len(rows)} grid points")
    worst_margin = min(r["oneform_margin"] for r in rows)
    worst_margin2 = min(r["twotensor_margin"] for r in rows)
    worst_parity = max(r["parity_ratio"] for r in rows)
    worst_phase = max(r["phase_spread"] for r in rows)
    print(f"one-form tangential margin  min: {worst_margin:.3e}")
    print(f"2-tensor tangential margin  min: {worst_margin2:.3e}")
    print(f"parity ratio                max: {worst_parity:.3e}")
    print(f"factorization phase spread  max: {worst_phase:.3e} rad")
    print(f"digamma decay slope: {report['digamma_decay_slope']:.3f} "
          f"(target -0.5)")
    print("ALL PASSED" if report["all_passed"] else "FAILURES PRESENT")


if __name__ == "__main__":
    main()
