"""How the AL scale sigma affects model-based and IJ standard errors.

A reduced version of the heteroscedastic-model study (m=30 instead of 100),
so it finishes in a couple of minutes. Relative error R_e compares the mean
estimated variance with the sampling variance across replications: 0 is
calibrated, +1 means SEs twice too large.

Run: python demos/sigma_study.py
"""

from qrij.simlab import DGPConfig, StudySpec, run_study

spec = StudySpec(DGPConfig("model2", n=200), taus=(0.5,), sigmas=(0.1, 1.0, 10.0),
                 methods=("ald", "ijf"), m=30, seed=11)
res = run_study(spec, progress=lambda r: print(".", end="", flush=True))
print()

print(f"{'method':<6}{'sigma':>7}{'R_e':>9}{'95% CI':>20}{'coverage':>10}")
for row in res.rows:
    if row.coefficient != "x":
        continue
    ci = f"[{row.re_lo:+.2f}, {row.re_hi:+.2f}]"
    print(f"{row.method:<6}{row.sigma_mode.removeprefix('fixed='):>7}{row.R_e:>+9.2f}"
          f"{ci:>20}{row.coverage:>10.2f}")
print("\nALD SEs are too small at small sigma and too large at large sigma;")
print("IJf stays near R_e = 0 throughout (the MCe intervals are wide at m=30).")
