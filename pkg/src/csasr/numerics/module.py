"""Parameter containers: a minimal module tree with dotted parameter names."""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


@dataclass
class ParamGroup:
    """A named, individually freezable parameter tensor."""

    name: str
    tensor: Parameter

    @property
    def trainable(self):
        return self.tensor.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.tensor.requires_grad = bool(flag)
        if not flag:
            self.tensor.grad = None

    @property
    def count(self):
        return int(self.tensor.data.size)


class Module:
    """Base class; parameters and submodules are discovered from attributes.

    Buffers (non-learnable state such as batch-norm running statistics) are
    plain ndarrays whose attribute names are listed in ``_buffers``.
    """

    _buffers = ()
    training = True

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, sub in enumerate(val):
                    yield f"{key}.{i}", sub

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix=""):
        for key in self._buffers:
            yield prefix + key, getattr(self, key)
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_groups(self):
        return [ParamGroup(name, p) for name, p in self.named_parameters()]

    def num_parameters(self, trainable_only=False):
        return sum(
            p.data.size
            for p in self.parameters()
            if p.requires_grad or not trainable_only
        )

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if strict and missing:
            raise KeyError(f"missing entries in state: {sorted(missing)[:5]}")
        for name, value in state.items():
            if name in own:
                if own[name].data.shape != value.shape:
                    raise ValueError(f"{name}: shape {value.shape} != {own[name].shape}")
                own[name].data = np.array(value, dtype=own[name].data.dtype)
            elif name in bufs:
                bufs[name][...] = value
            elif strict:
                raise KeyError(f"unexpected entry {name!r}")


def xavier_uniform(rng, fan_in, fan_out, shape=None, dtype=np.float64):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    shape = shape or (fan_in, fan_out)
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))


def zeros(shape, dtype=np.float64):
    return Parameter(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float64):
    return Parameter(np.ones(shape, dtype=dtype))
