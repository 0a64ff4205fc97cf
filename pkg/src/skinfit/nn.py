"""Parameter containers shared by the set networks."""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .autodiff import Tape, Tensor


def he_init(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def canonical_order(clouds: np.ndarray) -> np.ndarray:
    """Per-cloud lexicographic (x, y, z) order of a (B, n, 3) batch.

    Feeding points in this order makes every downstream matmul see the same
    rows regardless of input order; BLAS rounding depends on row position, so
    this is what makes the networks exactly permutation invariant.
    """
    return np.stack([np.lexsort(c.T[::-1]) for c in clouds])


class Model:
    """Named parameter dict plus tape registration."""

    name = "model"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self._override: dict[str, Tensor] | None = None

    @contextmanager
    def using(self, tensors: dict[str, Tensor]):
        """Run forward passes with the given tensors in place of the parameters."""
        if set(tensors) != set(self.params):
            raise ValueError(f"{self.name}: override must supply exactly {sorted(self.params)}")
        self._override = tensors
        try:
            yield self
        finally:
            self._override = None

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])

    def unflatten(self, flat: Tensor) -> dict[str, Tensor]:
        """Slice a flat parameter tensor (ordered as ``flat``) into named tensors."""
        out, pos = {}, 0
        for k in sorted(self.params):
            shape = self.params[k].shape
            size = int(np.prod(shape))
            out[k] = flat[pos:pos + size].reshape(*shape)
            pos += size
        return out

    def bind(self, tape: Tape | None) -> dict[str, Tensor]:
        if self._override is not None:
            return dict(self._override)
        if tape is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        out = {}
        for k, v in self.params.items():
            full = f"{self.name}.{k}"
            # a model applied twice on one tape shares its leaves
            out[k] = tape.params[full] if full in tape.params else tape.param(full, v)
        return out

    def grads_from(self, grads: dict) -> dict[str, np.ndarray]:
        prefix = self.name + "."
        return {k[len(prefix):]: g for k, g in grads.items() if isinstance(k, str) and k.startswith(prefix)}

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state(self, params: dict[str, np.ndarray]):
        missing = set(self.params) - set(params)
        if missing:
            raise ValueError(f"{self.name}: checkpoint lacks {sorted(missing)}")
        for k in self.params:
            if params[k].shape != self.params[k].shape:
                raise ValueError(f"{self.name}.{k}: shape {params[k].shape} != {self.params[k].shape}")
            self.params[k] = np.array(params[k], dtype=np.float64)
