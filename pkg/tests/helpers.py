"""Shared test utilities: gradient checking and analytic model stubs."""

import numpy as np

from purifybench import tensor as T
from purifybench.sampler import QuadraticEnergy


class StubEnergy(QuadraticEnergy):
    """Quadratic test potential with the dtype attribute real EBMs carry."""

    dtype = np.float64


class LinearClassifier:
    """logits = flatten(x) @ W: analytic classifier built from tape ops."""

    dtype = np.float64

    def __init__(self, w):
        self.w = T.Tensor(np.asarray(w, dtype=np.float64))

    def logits(self, x: T.Tensor) -> T.Tensor:
        flat = T.reshape(x, (x.data.shape[0], x.data.size // x.data.shape[0]))
        return T.matmul(flat, self.w)

    def features(self, x: T.Tensor) -> T.Tensor:
        return T.reshape(x, (x.data.shape[0], x.data.size // x.data.shape[0]))


def template_classifier(templates: np.ndarray) -> LinearClassifier:
    """Classifier whose logit for class c is the inner product with
    template c; perfect on the templates themselves when they are
    near-orthogonal."""
    flat = np.asarray(templates, dtype=np.float64).reshape(templates.shape[0], -1)
    return LinearClassifier(flat.T)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def autodiff_grad(f, x: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of scalar-valued f built from tensor ops."""
    with T.Tape() as tape:
        xt = T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        tape.backward(f(xt))
    return xt.grad


def check_grad(f_tensor, f_value, x, h=1e-5, rtol=1e-6):
    """Compare reverse-mode and central-difference gradients.

    f_tensor maps a Tensor to a scalar Tensor; f_value maps an ndarray to
    a float with identical arithmetic.  Returns the relative error.
    """
    ana = autodiff_grad(f_tensor, x)
    num = numeric_grad(f_value, x, h=h)
    scale = max(np.abs(num).max(), np.abs(ana).max(), 1.0)
    rel = np.abs(ana - num).max() / scale
    assert rel < rtol, f"gradient mismatch: rel err {rel:.3e} >= {rtol}"
    return rel
