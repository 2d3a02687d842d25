"""Regenerate tests/fixtures/oracle_values.json from the independent oracles.

Run from the repository root: python scripts/generate_oracle_fixtures.py
"""

import json
import math
from pathlib import Path

import numpy as np

from rhbsde.oracles import (
    FdProblem,
    binomial_american,
    g_heat_value,
    solve_elliptic_exit,
    solve_parabolic,
)

OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "oracle_values.json"


def main():
    vals = {}
    vals["american_put_additive"] = {
        "params": {"strike": 1.0, "sigma": 0.2, "x0": 1.0, "horizon": 1.0, "steps": 1000, "rate": 0.1},
        "american": binomial_american(1.0, "additive", 0.2, 1.0, 1.0, 1000, rate=0.1),
        "european": binomial_american(1.0, "additive", 0.2, 1.0, 1.0, 1000, rate=0.1, american=False),
    }
    vals["put_additive_no_rate"] = {
        "params": {"strike": 1.0, "sigma": 0.2, "x0": 1.0, "horizon": 1.0, "steps": 1000},
        "american": binomial_american(1.0, "additive", 0.2, 1.0, 1.0, 1000),
        "closed_form_european": 0.2 / math.sqrt(2 * math.pi),
    }
    ell = solve_elliptic_exit(FdProblem("elliptic_exit", 0.0, 1.0, 400, boundary=(0.0, 0.0),
                                        f=lambda x, v, p: np.ones_like(v)))
    vals["exit_interval_unit_driver"] = {"x0": 0.5, "value": ell.at(0.5), "residual": ell.residual,
                                         "closed_form": 0.25}
    heat = solve_parabolic(FdProblem("parabolic_semilinear", -8.0, 8.0, 800, 400, 1.0, 1.0,
                                     terminal=lambda x: x ** 2))
    vals["heat_square"] = {"x0": 0.0, "value": heat.at(0.0), "closed_form": 1.0}
    vals["g_heat_convex"] = {"menu": [1.0, 2.0], "value": g_heat_value([1.0, 2.0], lambda x: x ** 2),
                             "closed_form": 4.0}
    vals["g_heat_concave"] = {"menu": [1.0, 2.0], "value": g_heat_value([1.0, 2.0], lambda x: -x ** 2),
                              "closed_form": -1.0}
    vals["discounting"] = {"mu": 0.5, "horizon": 1.0, "value": math.exp(-0.5)}
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(vals, indent=2, sort_keys=True) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
