"""CKA on synthetic activations: what it ignores and what it notices.

Run: python demos/cka_basics.py
"""
import numpy as np

from transferrisk.activations import ActivationMatrix
from transferrisk.similarity import cka, gram, hsic

rng = np.random.default_rng(0)
x = rng.normal(size=(100, 16))


def acts(data, model_id="m"):
    return ActivationMatrix(model_id, 0, "demo-probe", data)


# rotations and isotropic scaling leave CKA at 1
q, _ = np.linalg.qr(rng.normal(size=(16, 16)))
print("CKA(X, X)        =", round(cka(acts(x), acts(x)).score, 6))
print("CKA(X, XQ)       =", round(cka(acts(x), acts(x @ q)).score, 6))
print("CKA(X, 3.7 X)    =", round(cka(acts(x), acts(3.7 * x)).score, 6))

# a random nonlinear readout of X shares part of its structure; independent noise shares almost none
y = np.tanh(x @ rng.normal(size=(16, 8)))
noise = rng.normal(size=(100, 8))
print("CKA(X, tanh(XW)) =", round(cka(acts(x), acts(y)).score, 4))
print("CKA(X, noise)    =", round(cka(acts(x), acts(noise)).score, 4))

# the same comparison with an RBF kernel and the unbiased estimator
rec = cka(acts(x), acts(y), kernel="rbf", estimator="unbiased")
print(f"RBF/unbiased     = {rec.score:.4f} (raw {rec.raw_score:.4f}, clamped={rec.clamped})")

# HSIC itself is just a trace of centred Gram matrices
k, l = gram(acts(x)), gram(acts(y))
print("biased HSIC      =", hsic(k, l))
