"""Why pointwise smoothing breaks down for large coupling.

Builds the two-field bidomain system on a small square and prints the
condition number of a two-level additive preconditioner, once with the pair
patches and once with pointwise (Jacobi) patches, over a range of gamma.
"""

import numpy as np

from metric_amg.amg import HierarchyOptions, build_hierarchy, fine_patches, preconditioned_spectrum
from metric_amg.assembly import ProblemSpec, build_system
from metric_amg.smoothers import SmootherConfig, smoother_as_operator
from metric_amg.sparse import DenseFactor


def two_level(s, P, cfg):
    Pd = P.toarray()
    coarse = Pd @ DenseFactor(Pd.T @ (s.A @ Pd), symmetric=True, pseudo=True).solve(Pd.T)
    return coarse + smoother_as_operator(cfg, s.A)


def main():
    base = build_system(ProblemSpec(model="bidomain", dim=2, n=12))
    print(f"bidomain, {base.n} DOFs")
    print(f"{'gamma':>8} {'pair patches':>14} {'pointwise':>12}")
    for g in (1.0, 1e2, 1e4, 1e6, 1e8):
        s = base.with_gamma(g)
        H = build_hierarchy(s, HierarchyOptions(prolongation="paired", c_agg=4, max_levels=2, coarse_size_cap=1))
        P = H.levels[0].P
        kappa = []
        for cfg in (SmootherConfig("schwarz_additive", patches=fine_patches(s, "schwarz_additive"), damping=1.0),
                    SmootherConfig("jacobi", damping=1.0)):
            lam = preconditioned_spectrum(s.A, two_level(s, P, cfg))
            kappa.append(lam[-1] / lam[0])
        print(f"{g:8.0e} {kappa[0]:14.1f} {kappa[1]:12.3g}")


if __name__ == "__main__":
    np.set_printoptions(precision=3)
    main()
