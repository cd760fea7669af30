"""Directional central-difference gradient checks in float64.

Leaky rectifiers are piecewise linear, and on a 256x256x12 patch a step of
1e-3 moves many pre-activations across zero. Each crossing perturbs a central
difference by an amount unrelated to the correctness of the gradient. For
checks at that step the difference quotient is therefore taken on the
linear piece active at the base point: :class:`FrozenPattern` records the
sign pattern of every rectifier input during a first forward and replays it
on later ones. At the base point the frozen function equals the network
value and has the same gradient.
"""

import contextlib
import math

import torch
import torch.nn.functional as F

import vqapipe.pqanet
import vqapipe.stanet

_MODULES = (vqapipe.pqanet, vqapipe.stanet)


class _Functional:
    """Stands in for ``torch.nn.functional`` inside the patched modules."""

    def __init__(self, owner):
        self._owner = owner

    def __getattr__(self, name):
        return getattr(F, name)

    def leaky_relu(self, x, negative_slope=0.01, inplace=False):
        return self._owner.apply(x, negative_slope)


class FrozenPattern:
    def __init__(self):
        self.masks: list[torch.Tensor] = []
        self.recording = True
        self._index = 0

    def apply(self, x, slope):
        if self.recording:
            self.masks.append(x.detach() > 0)
            return F.leaky_relu(x, slope)
        mask = self.masks[self._index]
        self._index += 1
        if mask.shape != x.shape:
            raise RuntimeError("replayed forward does not match the recorded one")
        return torch.where(mask, x, x * slope)

    def replay(self):
        self.recording = False
        self._index = 0


@contextlib.contextmanager
def frozen_pattern():
    """Patch the rectifiers of the network modules with a record/replay pattern."""
    pattern = FrozenPattern()
    saved = [m.F for m in _MODULES]
    try:
        for m in _MODULES:
            m.F = _Functional(pattern)
        yield pattern
    finally:
        for m, f in zip(_MODULES, saved):
            m.F = f


def random_direction(params, seed: int):
    gen = torch.Generator().manual_seed(seed)
    dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
    norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
    return [d / norm for d in dirs]


def central_difference(fn, params, dirs, step: float) -> float:
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(step * d)
        plus = float(fn())
        for p, d in zip(params, dirs):
            p.sub_(2 * step * d)
        minus = float(fn())
        for p, d in zip(params, dirs):
            p.add_(step * d)
    return (plus - minus) / (2 * step)


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def directional_check(fn, params, seed: int, step: float = 1e-3, freeze: bool = True):
    """Compare the analytic directional derivative of ``fn()`` with a central difference.

    The direction is a seeded Gaussian vector over ``params`` scaled to unit
    norm. With ``freeze`` the rectifier pattern of the base point is held
    fixed for the perturbed evaluations. Returns
    ``(analytic, numeric, relative_error)``.
    """
    params = list(params)
    dirs = random_direction(params, seed)
    ctx = frozen_pattern() if freeze else contextlib.nullcontext()
    with ctx as pattern:
        grads = torch.autograd.grad(fn(), params, allow_unused=True)
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs) if g is not None)
        if pattern is not None:
            pattern.replay()
            fn = _replaying(fn, pattern)
        numeric = central_difference(fn, params, dirs, step)
    return analytic, numeric, relative_error(analytic, numeric)


def _replaying(fn, pattern):
    def wrapped():
        pattern._index = 0
        return fn()
    return wrapped
