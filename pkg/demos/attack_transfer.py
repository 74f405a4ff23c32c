"""Craft FGSM/PGD on surrogates and measure how often they fool the target.

Run: python demos/attack_transfer.py
"""
from transferrisk import zoo
from transferrisk.activations import capture, make_probe_set
from transferrisk.attacks import AttackConfig, attack_success, run_attack
from transferrisk.riskeval import evaluate_transfer, gradient_alignment
from transferrisk.similarity import model_similarity

data = zoo.generate_dataset("blobs", 1200, 4, seed=5, dim=10, spread=0.15)
hp = zoo.Hyperparams(epochs=25, seed=6)
target = zoo.train(zoo.mlp("target", 10, 4, (64, 64), 20), data, hp)
surrogates = [
    zoo.train(zoo.mlp("close", 10, 4, (64, 64), 21), data, hp),
    zoo.train(zoo.mlp("mid", 10, 4, (16,), 22), data, zoo.Hyperparams(epochs=25, seed=7, subsample=0.5)),
    zoo.train(zoo.mlp("far", 10, 4, (2,), 23), data, zoo.Hyperparams(epochs=25, seed=8, subsample=0.1)),
]

probes = make_probe_set(data, 200, seed=9)
target_acts = capture(target, probes)
x, y = data.test()

print(f"{'surrogate':>9} {'CKA':>6} {'align':>6} {'white-box':>9} {'transfer':>8}   attack")
for config in (AttackConfig("fgsm", 0.1), AttackConfig("pgd", 0.1, 0.01, 20)):
    for s in surrogates:
        sim = model_similarity(target_acts, capture(s, probes)).score
        batch = run_attack(s, x, y, config)
        rec = evaluate_transfer(s, target, batch, sim)
        align = gradient_alignment(s, target, x, y).mean_cosine
        print(f"{s.model_id:>9} {sim:6.3f} {align:6.3f} {rec.surrogate_rate:9.3f} {rec.target_rate:8.3f}   "
              f"{config.label}")

# the white-box reference: attacking the target directly
white = attack_success(target, run_attack(target, x, y, AttackConfig("pgd", 0.1, 0.01, 20)))
print(f"\nwhite-box PGD on the target itself: {white.restricted:.3f}")
