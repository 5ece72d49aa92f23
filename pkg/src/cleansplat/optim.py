"""Adam with per-key parameter groups and explicit, resizable state."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class AdamState:
    """First/second moment estimates keyed like the parameter dict."""

    slots: dict = field(default_factory=dict)

    def ensure(self, key: str, shape):
        if key not in self.slots:
            self.slots[key] = AdamSlot(m=np.zeros(shape), v=np.zeros(shape))
        return self.slots[key]

    def resize_rows(self, key: str, keep_mask: np.ndarray, n_new: int):
        """Keep rows of surviving Gaussians, zero-init rows for new ones."""
        slot = self.slots[key]
        tail_shape = (n_new,) + slot.m.shape[1:]
        slot.m = np.concatenate([slot.m[keep_mask], np.zeros(tail_shape)], axis=0)
        slot.v = np.concatenate([slot.v[keep_mask], np.zeros(tail_shape)], axis=0)

    def zero(self, key: str):
        slot = self.slots[key]
        slot.m = np.zeros_like(slot.m)
        slot.v = np.zeros_like(slot.v)


def adam_step(params: dict, grads: dict, state: AdamState, lrs: dict,
              beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS,
              group: str = "") -> None:
    """One bias-corrected Adam update, in place.

    ``params``/``grads``/``lrs`` are parallel dicts; keys missing from
    ``grads`` (or mapped to None) are skipped.  A non-finite gradient
    aborts with the offending parameter group named.
    """
    for key in params:
        g = grads.get(key)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter group '{group}{key}'")
        p = params[key]
        slot = state.ensure(key, p.shape)
        slot.step += 1
        slot.m = beta1 * slot.m + (1.0 - beta1) * g
        slot.v = beta2 * slot.v + (1.0 - beta2) * (g * g)
        m_hat = slot.m / (1.0 - beta1 ** slot.step)
        v_hat = slot.v / (1.0 - beta2 ** slot.step)
        p -= lrs[key] * m_hat / (np.sqrt(v_hat) + eps)


def exponential_lr(step: int, lr_init: float, lr_final: float, max_steps: int) -> float:
    """Log-linear interpolation from ``lr_init`` to ``lr_final``."""
    if max_steps <= 0:
        return lr_final
    t = min(max(step, 0), max_steps) / max_steps
    return float(np.exp((1.0 - t) * np.log(lr_init) + t * np.log(lr_final)))
