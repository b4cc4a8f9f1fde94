"""Dense building blocks with explicit backward rules.

Weights are stored ``[in, out]`` so a layer is ``y = x @ W + b``. Every
``*_backward`` accumulates parameter gradients into the ParamStore and
returns the gradient w.r.t. its input.
"""

from typing import List

import numpy as np
from scipy.special import expit, softmax as _softmax

from sparsevox.models.params import BIAS_INIT_STD, ParamSpec, ParamStore


def linear_specs(name: str, fan_in: int, fan_out: int, bias_init: float = 0.0,
                 bias_std: float = BIAS_INIT_STD) -> List[ParamSpec]:
    """ParamSpecs of a linear layer ``{name}.weight`` / ``{name}.bias``."""
    return [
        ParamSpec(f"{name}.weight", (fan_in, fan_out), fan_in=fan_in),
        ParamSpec(f"{name}.bias", (fan_out,), init_value=bias_init, init_std=bias_std),
    ]


def linear(x: np.ndarray, params: ParamStore, name: str) -> np.ndarray:
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


def linear_backward(dy: np.ndarray, x: np.ndarray, params: ParamStore, name: str) -> np.ndarray:
    weight = params[f"{name}.weight"]
    x2 = x.reshape(-1, weight.shape[0])
    dy2 = dy.reshape(-1, weight.shape[1])
    params.accumulate(f"{name}.weight", x2.T @ dy2)
    params.accumulate(f"{name}.bias", dy2.sum(axis=0))
    return dy @ weight.T


def project(x: np.ndarray, params: ParamStore, name: str) -> np.ndarray:
    """Bias-free projection with weight ``params[name]``."""
    return x @ params[name]


def project_backward(dy: np.ndarray, x: np.ndarray, params: ParamStore, name: str) -> np.ndarray:
    weight = params[name]
    params.accumulate(name, x.reshape(-1, weight.shape[0]).T @ dy.reshape(-1, weight.shape[1]))
    return dy @ weight.T


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * (y > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * expit(x)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return _softmax(x, axis=axis)


def softmax_backward(dy: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


def mlp2(x: np.ndarray, params: ParamStore, name: str):
    """``{name}.1(relu({name}.0(x)))``; returns (output, hidden)."""
    hidden = relu(linear(x, params, f"{name}.0"))
    return linear(hidden, params, f"{name}.1"), hidden


def mlp2_backward(dy: np.ndarray, x: np.ndarray, hidden: np.ndarray, params: ParamStore, name: str) -> np.ndarray:
    d_hidden = linear_backward(dy, hidden, params, f"{name}.1")
    return linear_backward(relu_backward(d_hidden, hidden), x, params, f"{name}.0")


def mlp2_specs(name: str, fan_in: int, hidden: int, fan_out: int) -> List[ParamSpec]:
    return linear_specs(f"{name}.0", fan_in, hidden) + linear_specs(f"{name}.1", hidden, fan_out)
