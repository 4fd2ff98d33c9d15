"""Central finite-difference gradient checking."""

import numpy as np

from .tensor import Tensor


def numerical_grad(fn, arrays, index, h=1e-5):
    """d fn / d arrays[index] by central differences; ``fn`` maps ndarrays to a float."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = fn(*arrays)
        x[i] = old - h
        fm = fn(*arrays)
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def gradcheck(fn, arrays, h=1e-5, rng=None):
    """Compare autodiff against central differences for each input.

    ``fn`` maps Tensors to a Tensor of any shape; it is contracted with a
    fixed random weighting so every output element contributes. Returns the
    list of relative errors ``|a - n| / (|a| + 1e-8)`` (vector norms), one
    per input.
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    weight = rng.standard_normal(out_shape)

    def scalar(*arrs):
        return float((fn(*[Tensor(a) for a in arrs]).data * weight).sum())

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    (fn(*tensors) * weight).sum().backward()
    errors = []
    for i, t in enumerate(tensors):
        auto = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        num = numerical_grad(scalar, arrays, i, h)
        errors.append(float(np.linalg.norm(auto - num) / (np.linalg.norm(auto) + 1e-8)))
    return errors
