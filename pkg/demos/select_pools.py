"""Partition surrogates into high (M1) and low (M2) similarity pools.

Run: python demos/select_pools.py
"""
from transferrisk.errors import InsufficientPoolError
from transferrisk.selection import ThresholdPolicy, pools_report, select_pools
from transferrisk.similarity import SimilarityRecord

# aggregate similarities against one target, spread like typical CNN scores
scores = {"resnet-a": 0.57, "resnet-b": 0.56, "vgg": 0.47, "mobilenet": 0.41, "lenet": 0.34, "mlp": 0.32}
records = [SimilarityRecord("target", s, "cka_linear", "aggregate", "aggregate", v, 500, "probe")
           for s, v in scores.items()]

pools = select_pools(records)  # default thresholds r1 = 0.55, r2 = 0.35
print(pools_report(pools))

# tighter thresholds starve M1; the error names the closest candidates
try:
    select_pools(records, ThresholdPolicy(r1=0.6, r2=0.35))
except InsufficientPoolError as exc:
    print("refused:", exc)
    print("exit code if raised from the CLI:", exc.exit_code)
