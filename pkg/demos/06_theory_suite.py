"""
Error and sign recovery as n grows
==================================

An exact-sparsity design with three active eigenvectors. As the sample
grows the estimation error shrinks and the signs are recovered more often.
"""

from milasso.montecarlo import TheoryConfig, theory_suite

out = theory_suite(TheoryConfig(n_list=(100, 200, 400), reps=30, re_directions=2000))
print(f"{'n':>5} {'median l2':>10} {'median l1':>10} {'sign rate':>10} {'median Z':>9} {'RE bound':>9}")
for p in out["per_n"]:
    print(f"{p['n']:>5} {p['median_l2']:>10.3f} {p['median_l1']:>10.3f} {p['sign_recovery']:>10.2f} "
          f"{p['median_z']:>9.2f} {p['re_upper_bound']:>9.3f}")
print(out["checks"])
