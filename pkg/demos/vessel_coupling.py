"""3D tissue coupled to a 1D vessel: circle averaging versus element-local trace.

Sweeps the inverse time step that sets the membrane factor and prints PCG
iterations to a 1e-6 relative residual for a few vessel radii.
"""

import sys

from metric_amg import HierarchyOptions, ProblemSpec, build_hierarchy, build_system, pcg
from metric_amg.assembly import membrane_gamma


def main(n=24):
    opts = HierarchyOptions(c_agg=4, seed_threshold=0.25, pre_sweeps=2, post_sweeps=2)
    sweep = (1.0, 1e3, 1e6, 1e9)
    print("dt^-1".rjust(14) + "".join(f"{d:>7.0e}" for d in sweep))
    for label, rho, coupling in (("average 5um", 5.0, "average"), ("average 1um", 1.0, "average"),
                                 ("trace 1um", 1.0, "trace")):
        base = build_system(ProblemSpec(model="reduced_emi", n=n, extents=100.0, alpha_e=3.0, alpha_i=7.0,
                                        rho=rho, coupling=coupling))
        prev, counts = None, []
        for dt_inv in sweep:
            s = base.with_gamma(membrane_gamma(dt_inv))
            prev = build_hierarchy(s, opts, reuse=prev)
            _, rep = pcg(s.A, s.rhs(), prev, tol=1e-6)
            counts.append(rep.iterations)
        print(f"{label:>14}" + "".join(f"{c:7d}" for c in counts))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 24)
