"""SGD with momentum, with momentum tensors that shrink in lockstep with pruning.

The update uses the averaged-gradient momentum form

    M <- beta * M + (1 - beta) * g
    W <- W - alpha * M

note the (1 - beta) factor on the gradient: with beta = 0.9 and alpha = 0.01
the effective per-gradient step is 10x smaller than the common
M <- beta*M + g convention. Reported hyperparameters in this package assume
this form.

Momentum buffers are never re-created wholesale after a pruning event; they
are sliced / zeroed in place with the same indexes as the weights, so the
history accumulated for surviving filters is preserved exactly.
"""

from __future__ import annotations

import numpy as np

from .tensor import slice_axis0, slice_axis


class SgdMomentum:
    def __init__(self, alpha, beta, weight_decay=0.0):
        if not alpha > 0:
            raise ValueError(f"learning rate must be positive, got {alpha}")
        if not 0.0 <= beta < 1.0:
            raise ValueError(f"momentum coefficient must be in [0, 1), got {beta}")
        if weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {weight_decay}")
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.weight_decay = float(weight_decay)
        self.momentum: dict[str, np.ndarray] = {}

    def register(self, name, param):
        if name in self.momentum:
            raise ValueError(f"parameter '{name}' registered twice")
        self.momentum[name] = np.zeros_like(param)

    def step(self, params, grads):
        """One update over {name: array} dicts; mutates params and momentum."""
        for name, w in params.items():
            if name not in self.momentum:
                raise ValueError(f"parameter '{name}' is not registered with the optimizer")
            m = self.momentum[name]
            g = grads[name]
            if g.shape != w.shape or m.shape != w.shape:
                raise ValueError(
                    f"parameter '{name}': stale shapes param={w.shape} grad={g.shape} "
                    f"momentum={m.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * w
            m *= self.beta
            m += (1.0 - self.beta) * g
            w -= self.alpha * m

    def prune_momentum(self, name, hard, soft):
        """Remove momentum rows at `hard`, zero rows at `soft` (axis 0)."""
        m = self.momentum[name]
        hard = np.asarray(hard, dtype=np.intp)
        soft = np.asarray(soft, dtype=np.intp)
        if np.intersect1d(hard, soft).size:
            raise ValueError(f"parameter '{name}': hard and soft index sets overlap")
        for idx in (hard, soft):
            if idx.size and (idx.min() < 0 or idx.max() >= m.shape[0]):
                raise ValueError(f"parameter '{name}': prune index out of range for {m.shape}")
        m[soft] = 0.0
        if hard.size:
            keep = np.setdiff1d(np.arange(m.shape[0]), hard)
            self.momentum[name] = slice_axis0(m, keep)

    def rebuild_after_hard_prune(self, name, keep, also_input_axis=None):
        """Re-slice a momentum buffer with the same indexes as its weight.

        `keep` selects axis-0 rows; `also_input_axis` (if given) selects the
        input-channel axis (axis 1), used for the layer downstream of a
        hard-pruned convolution.
        """
        m = self.momentum[name]
        m = slice_axis0(m, keep)
        if also_input_axis is not None:
            m = slice_axis(m, also_input_axis, axis=1)
        self.momentum[name] = m

    def momentum_of(self, name):
        return self.momentum[name]
