"""Train a small zoo on blobs, capture hidden activations and compare layers.

Run: python demos/train_and_capture.py
"""
import tempfile
from pathlib import Path

from transferrisk import zoo
from transferrisk.activations import capture, load_amat, make_probe_set, save_amat
from transferrisk.similarity import aggregate_score, layer_matrix

data = zoo.generate_dataset("blobs", 800, 4, seed=1, dim=8, spread=0.15)
hp = zoo.Hyperparams(epochs=20, seed=2)

target = zoo.train(zoo.mlp("target", 8, 4, (32, 32), init_seed=10), data, hp)
twin = zoo.train(zoo.mlp("twin", 8, 4, (32, 32), init_seed=11), data, hp)
# starved of data and width, this one learns a cruder boundary
weak = zoo.train(zoo.mlp("weak", 8, 4, (2,), init_seed=12), data, zoo.Hyperparams(epochs=20, seed=3, subsample=0.1))
for m in (target, twin, weak):
    print(f"{m.model_id:>6}: test accuracy {m.metadata['test_accuracy']:.3f}")

probes = make_probe_set(data, 150, seed=4)
target_acts = capture(target, probes)
print("captured layers:", [a.layer_index for a in target_acts], "shapes", [a.data.shape for a in target_acts])

for other in (twin, weak):
    lm = layer_matrix(target_acts, capture(other, probes))
    print(f"\ntarget vs {other.model_id} layer grid:\n{lm.grid.round(3)}")
    print("diag-band aggregate:", round(aggregate_score(lm).score, 4))

# activations persist as AMAT files; the float32 payload keeps CKA to ~1e-7
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "target_layer1.amat"
    save_amat(target_acts[0], path)
    back = load_amat(path)
    print("\nAMAT bytes:", path.stat().st_size, " max abs change:", abs(back.data - target_acts[0].data).max())
