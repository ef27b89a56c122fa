"""Central finite-difference gradient checking for TwoHeadNetwork objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import TwoHeadNetwork, weighted_loss


@dataclass
class BlockCheck:
    name: str
    rel_error: float
    kink_crossings: int


def _activation_pattern(net: TwoHeadNetwork, x: np.ndarray) -> list[np.ndarray]:
    net.forward(x, keep_cache=True)
    cache = net._cache
    pattern = [cache["hid_mask"].copy()]
    for _, _, mask in cache["conv"]:
        pattern.append(mask.copy())
    net._cache = {}
    return pattern


def check_gradients(
    net: TwoHeadNetwork,
    x: np.ndarray,
    class_labels: np.ndarray,
    rot_labels: np.ndarray,
    class_weight: np.ndarray,
    rot_weight: np.ndarray,
    h: float = 1e-3,
) -> list[BlockCheck]:
    """Compare backprop gradients of the weighted objective with central differences.

    A kink crossing is a perturbation that flips a ReLU or changes a pool
    argmax; central differences are meaningless there, so callers should
    require zero crossings rather than ignore them.
    """
    if net.dtype != np.float64:
        raise TypeError("gradient checks require a float64 network")

    def objective() -> float:
        c, r = net.forward(x)
        return weighted_loss(c, r, class_labels, rot_labels, class_weight, rot_weight)[0].total

    c, r = net.forward(x, keep_cache=True)
    _, d_class, d_rot = weighted_loss(c, r, class_labels, rot_labels, class_weight, rot_weight)
    analytic = net.backward(d_class, d_rot)
    base = _activation_pattern(net, x)

    results = []
    for name, theta in net.params.items():
        numeric = np.zeros_like(theta)
        kinks = 0
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + h
            f_plus = objective()
            flipped = any(np.any(a != b) for a, b in zip(base, _activation_pattern(net, x)))
            theta[idx] = orig - h
            f_minus = objective()
            flipped |= any(np.any(a != b) for a, b in zip(base, _activation_pattern(net, x)))
            theta[idx] = orig
            numeric[idx] = (f_plus - f_minus) / (2 * h)
            kinks += int(flipped)
        a = analytic[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-12)
        results.append(BlockCheck(name, float(np.linalg.norm(a - numeric) / denom), kinks))
    return results
