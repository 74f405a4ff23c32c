"""End-to-end run of the bundled configuration and a look at the report.

Run: python demos/risk_report.py [output-dir]
The same run is available from the shell as ``transferrisk run --out DIR``.
"""
import sys

from transferrisk import pipeline

out = sys.argv[1] if len(sys.argv) > 1 else "demo-run"
cfg = pipeline.load_config(out=out)
report = pipeline.run_pipeline(cfg)

print(cfg.path("pools.txt").read_text())
agg, ci = report.aggregates, report.intervals
print(f"headline risk (worst case): {agg['worst_case']:.3f}  "
      f"[{ci['worst_case'].low:.3f}, {ci['worst_case'].high:.3f}]")
print(f"mean transfer, M1: {agg['mean_m1']:.3f}   M2: {agg['mean_m2']:.3f}")
print(f"fitted {report.regression.link} curve: intercept {report.regression.intercept:.3f}, "
      f"slope {report.regression.slope:.3f}  (90% CI {ci['slope'].low:.3f} to {ci['slope'].high:.3f})")
print(f"extrapolated rate at r1 = {cfg.policy.r1}: {agg['predicted_at_r1']:.3f}")
if report.advisory:
    print("advisory:", report.advisory)
print("\nfiles written under", cfg.out)
