"""Learnable parameter storage shared by backbone, LMFA, GFA and heads."""

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Tuple

import numpy as np

BIAS_INIT_STD = 0.05


@dataclass
class ParamSpec:
    """Shape and initialisation rule for one named parameter."""

    name: str
    shape: Tuple[int, ...]
    fan_in: int = 0  # 0 -> constant init
    init_value: float = 0.0
    init_std: float = 0.0  # Gaussian jitter around init_value


@dataclass
class ParamStore:
    """Named parameter tensors with same-shaped gradient slots.

    Insertion order is the canonical order used by initialisation,
    checkpoints and optimizers, so every pass over the store is
    deterministic.
    """

    params: Dict[str, np.ndarray] = field(default_factory=dict)
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_specs(cls, specs: List[ParamSpec], seed: int = 0) -> "ParamStore":
        """He-normal weights (std sqrt(2/fan_in)) and jittered constant biases, drawn from Philox(seed).

        Biases start off zero so that no ReLU pre-activation of an all-zero
        input row sits exactly on the kink.
        """
        rng = np.random.Generator(np.random.Philox(seed))
        store = cls(seed=seed)
        for spec in specs:
            if spec.fan_in > 0:
                value = rng.standard_normal(spec.shape) * np.sqrt(2.0 / spec.fan_in)
            else:
                value = np.full(spec.shape, spec.init_value, dtype=np.float64)
                if spec.init_std > 0:
                    value += rng.standard_normal(spec.shape) * spec.init_std
            store.add(spec.name, value)
        return store

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"Duplicate parameter name: {name}")
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> List[str]:
        """Parameter names starting with ``prefix``, in canonical order."""
        return [name for name in self.params if name.startswith(prefix)]

    @property
    def num_parameters(self) -> int:
        """Total scalar parameter count."""
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for grad in self.grads.values():
            grad.fill(0.0)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        """Add ``grad`` into the gradient slot of ``name``."""
        self.grads[name] += grad

    def copy(self) -> "ParamStore":
        out = ParamStore(seed=self.seed)
        for name, value in self.params.items():
            out.params[name] = value.copy()
            out.grads[name] = self.grads[name].copy()
        return out

    def global_grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))
