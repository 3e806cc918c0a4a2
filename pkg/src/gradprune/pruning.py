"""Progressive filter pruning: schedule, criteria, partition, application.

Per epoch, each convolution's weakest filters are selected by a criterion
score; a fraction `remove_ratio` of them is removed outright (weights, bias,
gradients, momentum, batchnorm channels, and the matching input channels of
downstream layers), the rest are zeroed in place and may recover during
later epochs. The number of weak filters per layer follows an exponential
decay of the remaining-filter ratio, so after the final epoch the target
pruned fraction is met exactly.

Criteria (scores are per current filter; lowest scores are weakest):

  L1 / L2  - norms of the filter weights
  TW       - l1 of (epoch-summed gradient elementwise* weight)
  GN_G     - l1 of the epoch-summed gradient ("global change over the epoch")
  GN_S     - sum over iterations of per-iteration gradient l1 norms
  TAYLOR   - per-feature-map |sum_spatial(dL/dH * H)| averaged over batch and
             spatial positions, summed over iterations (needs activations)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNorm, Linear, PrunableConv
from .tensor import slice_axis, slice_axis0

CRITERIA = ("L1", "L2", "TAYLOR", "TW", "GN_G", "GN_S")
GRADIENT_CRITERIA = ("TAYLOR", "TW", "GN_G", "GN_S")
MODES = ("PGP", "RPGP")


@dataclass
class PruneSchedule:
    """Target fraction pruned, epoch horizon, hard/soft split and criterion."""

    t_prune: float
    total_epochs: int
    remove_ratio: float
    criterion: str = "GN_G"
    mode: str = "PGP"

    def __post_init__(self):
        if not 0.0 < self.t_prune < 1.0:
            raise ValueError(f"t_prune must be in (0, 1), got {self.t_prune}")
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not 0.0 <= self.remove_ratio <= 1.0:
            raise ValueError(f"remove_ratio must be in [0, 1], got {self.remove_ratio}")
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion '{self.criterion}', pick one of {CRITERIA}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode '{self.mode}', pick one of {MODES}")


def decay_ratio(t, schedule: PruneSchedule) -> float:
    """Fraction of original filters intended to remain after epoch t.

    p_t = exp(ln(1 - t_prune) * t / T), strictly decreasing in t. The
    endpoint t = T returns 1 - t_prune exactly (not through exp/log) so the
    final weak count is not at the mercy of one ulp of libm.
    """
    T = schedule.total_epochs
    if not 0 <= t <= T:
        raise ValueError(f"epoch {t} outside schedule range [0, {T}]")
    if t == 0:
        return 1.0
    if t == T:
        return 1.0 - schedule.t_prune
    return float(math.exp(math.log1p(-schedule.t_prune) * (t / T)))


def weak_count(original_n: int, p_t: float) -> int:
    """Number of filters of a layer that should be weak (pruned or zeroed)."""
    if original_n < 1:
        raise ValueError(f"original filter count must be >= 1, got {original_n}")
    return int(math.floor(original_n * (1.0 - p_t)))


class CriterionAccumulator:
    """Per-layer gradient statistics gathered over exactly one epoch.

    observe() must be called once per iteration, after the backward pass and
    while the gradient buffers still hold that single iteration's gradients
    (i.e. the training loop zeroes gradients at the top of each iteration).
    """

    def __init__(self, convs, taylor=False):
        # convs: iterable of (name, PrunableConv)
        self.taylor = taylor
        self.entries = {}
        for name, layer in convs:
            self.entries[name] = {
                "sum_grad": np.zeros_like(layer.weight),
                "abs_per_filter": np.zeros(layer.n_out, dtype=layer.weight.dtype),
                "taylor": np.zeros(layer.n_out, dtype=layer.weight.dtype),
            }
            if taylor:
                layer.capture_activations = True
        self.iterations = 0
        self._convs = list(convs)

    def observe(self):
        for name, layer in self._convs:
            e = self.entries[name]
            g = layer.grad_weight
            if g.shape != e["sum_grad"].shape:
                raise ValueError(
                    f"accumulator for '{name}' holds shape {e['sum_grad'].shape} "
                    f"but layer gradient is {g.shape}")
            e["sum_grad"] += g
            e["abs_per_filter"] += np.abs(g).sum(axis=(1, 2, 3))
            if self.taylor:
                h, gh = layer.last_output, layer.last_grad_output
                if h is None or gh is None:
                    raise ValueError(f"no captured activations on '{name}' for TAYLOR")
                per_map = (gh * h).sum(axis=(2, 3))  # N x F
                spatial = h.shape[2] * h.shape[3]
                e["taylor"] += np.abs(per_map).mean(axis=0) / spatial
        self.iterations += 1

    def on_hard_prune(self, name, keep):
        if name not in self.entries:
            return
        e = self.entries[name]
        e["sum_grad"] = slice_axis0(e["sum_grad"], keep)
        e["abs_per_filter"] = slice_axis0(e["abs_per_filter"], keep)
        e["taylor"] = slice_axis0(e["taylor"], keep)

    def on_input_prune(self, name, keep):
        if name not in self.entries:
            return
        e = self.entries[name]
        e["sum_grad"] = slice_axis(e["sum_grad"], keep, axis=1)

    def release(self):
        for _, layer in self._convs:
            layer.capture_activations = False
            layer.last_output = None
            layer.last_grad_output = None


def score_filters(layer: PrunableConv, acc, kind: str) -> np.ndarray:
    """Score every current filter of `layer`; lower = weaker."""
    if kind not in CRITERIA:
        raise ValueError(f"unknown criterion '{kind}'")
    w = layer.weight
    if kind == "L1":
        return np.abs(w).sum(axis=(1, 2, 3))
    if kind == "L2":
        return np.sqrt((w * w).sum(axis=(1, 2, 3)))
    if acc is None or acc.iterations == 0:
        raise ValueError(f"criterion {kind} needs a non-empty gradient accumulator")
    e = acc.entries[layer.name]
    if kind == "GN_S":
        return e["abs_per_filter"].copy()
    if kind == "TAYLOR":
        if not acc.taylor:
            raise ValueError("accumulator was not tracking activations for TAYLOR")
        return e["taylor"].copy()
    s = e["sum_grad"]
    if s.shape != w.shape:
        raise ValueError(
            f"accumulator shape {s.shape} does not match weights {w.shape} on '{layer.name}'")
    if kind == "GN_G":
        return np.abs(s).sum(axis=(1, 2, 3))
    # TW: first-order loss change when zeroing the filter, on epoch-summed grads
    return np.abs(s * w).sum(axis=(1, 2, 3))


@dataclass
class PrunePlan:
    """One layer/group's pruning decision for one epoch."""

    unit: str
    epoch: int
    hard: np.ndarray
    soft: np.ndarray
    n_wc: int
    clamped: bool = False
    scores: np.ndarray | None = None

    def to_record(self):
        rec = {
            "unit": self.unit,
            "epoch": self.epoch,
            "hard": [int(i) for i in self.hard],
            "soft": [int(i) for i in self.soft],
            "n_wc": self.n_wc,
            "clamped": self.clamped,
        }
        if self.scores is not None:
            rec["scores"] = [float(v) for v in self.scores]
        return rec


def select_partition(scores, n_wc, already_removed, r, *, unit="", epoch=0):
    """Pick this epoch's weak filters and split them into hard/soft sets.

    The k = n_wc - already_removed lowest-scoring filters form the weak set
    (ties go to the lower index); floor(k * r) of those, again the lowest,
    are removed, the rest zeroed. Selection never empties a layer: if the
    weak set would swallow every live filter it is clamped to leave one.
    """
    scores = np.asarray(scores, dtype=np.float64)
    current = scores.shape[0]
    if n_wc < already_removed:
        raise ValueError(
            f"weak count {n_wc} below already-removed count {already_removed} (schedule not monotone)")
    k_new = n_wc - already_removed
    if k_new > current:
        raise ValueError(
            f"over-pruning: {k_new} new weak filters requested but only {current} present")
    clamped = False
    if k_new == current:
        k_new = current - 1
        clamped = True
    order = np.argsort(scores, kind="stable")
    weak = order[:k_new]
    n_hard = int(math.floor(k_new * r))
    hard = np.sort(weak[:n_hard]).astype(np.intp)
    soft = np.sort(weak[n_hard:]).astype(np.intp)
    return PrunePlan(unit=unit, epoch=epoch, hard=hard, soft=soft,
                     n_wc=n_wc, clamped=clamped, scores=scores.copy())


def _check_plan_indices(plan: PrunePlan, n_out: int):
    for idx in (plan.hard, plan.soft):
        if idx.size and (idx.min() < 0 or idx.max() >= n_out):
            raise ValueError(f"plan for '{plan.unit}': index out of range for {n_out} filters")
    if np.intersect1d(plan.hard, plan.soft).size:
        raise ValueError(f"plan for '{plan.unit}': hard and soft sets overlap")
    if plan.hard.size >= n_out:
        raise ValueError(f"plan for '{plan.unit}': would hard-remove every filter")


def _shifted_indices(idx, removed):
    """Map current-coordinate indices to coordinates after removing `removed` rows."""
    if not len(idx):
        return np.zeros(0, dtype=np.intp)
    removed = np.asarray(removed)
    return np.asarray(idx, dtype=np.intp) - np.searchsorted(removed, idx)


def prune_unit(convs, plan, *, bns=(), next_convs=(), next_linears=(),
               opt=None, acc=None):
    """Apply one plan to a set of convs sharing indexes, plus their wiring.

    convs: PrunableConv list (same current n_out; indexes applied to all).
    bns: BatchNorm list channel-pruned with the owning convs.
    next_convs: downstream convs whose input channels follow this unit.
    next_linears: (Linear, block_size) pairs behind a flatten boundary.
    All validation happens before the first mutation, so a bad plan leaves
    everything untouched.
    """
    hard, soft = plan.hard, plan.soft
    if not convs:
        raise ValueError("prune_unit: no convolution given")
    n_out = convs[0].n_out
    _check_plan_indices(plan, n_out)
    for c in convs:
        if c.n_out != n_out:
            raise ValueError(
                f"unit '{plan.unit}': members disagree on filter count "
                f"({convs[0].name}:{n_out} vs {c.name}:{c.n_out})")
    for bn in bns:
        if bn.n_ch != n_out:
            raise ValueError(
                f"unit '{plan.unit}': batchnorm '{bn.name}' has {bn.n_ch} channels, convs have {n_out}")
    for nxt in next_convs:
        if nxt.n_in != n_out:
            raise ValueError(
                f"unit '{plan.unit}': downstream conv '{nxt.name}' expects {nxt.n_in} inputs, "
                f"unit provides {n_out}")
    for lin, block in next_linears:
        if lin.weight.shape[1] != n_out * block:
            raise ValueError(
                f"unit '{plan.unit}': downstream linear '{lin.name}' has {lin.weight.shape[1]} "
                f"inputs, expected {n_out} x {block}")
    if opt is not None:
        for c in convs:
            for p in ("weight", "bias"):
                m = opt.momentum.get(f"{c.name}.{p}")
                if m is None or m.shape != getattr(c, p).shape:
                    raise ValueError(f"optimizer state stale or missing for '{c.name}.{p}'")
        for bn in bns:
            for p in ("gamma", "beta"):
                m = opt.momentum.get(f"{bn.name}.{p}")
                if m is None or m.shape != getattr(bn, p).shape:
                    raise ValueError(f"optimizer state stale or missing for '{bn.name}.{p}'")

    keep = np.setdiff1d(np.arange(n_out), hard)
    for c in convs:
        for p in ("weight", "bias", "grad_weight", "grad_bias"):
            arr = getattr(c, p)
            arr[soft] = 0.0
            setattr(c, p, slice_axis0(arr, keep))
        if opt is not None:
            opt.prune_momentum(f"{c.name}.weight", hard, soft)
            opt.prune_momentum(f"{c.name}.bias", hard, soft)
        live_original = np.flatnonzero(c.live_mask)
        c.live_mask[live_original[hard]] = False
        c.soft_idx = _shifted_indices(soft, hard)
    for bn in bns:
        for p in ("gamma", "beta", "running_mean", "running_var",
                  "grad_gamma", "grad_beta"):
            arr = getattr(bn, p)
            arr[soft] = 0.0
            setattr(bn, p, slice_axis0(arr, keep))
        if opt is not None:
            opt.prune_momentum(f"{bn.name}.gamma", hard, soft)
            opt.prune_momentum(f"{bn.name}.beta", hard, soft)
    if hard.size:
        for nxt in next_convs:
            nxt.weight = slice_axis(nxt.weight, keep, axis=1)
            nxt.grad_weight = slice_axis(nxt.grad_weight, keep, axis=1)
            if opt is not None:
                opt.rebuild_after_hard_prune(
                    f"{nxt.name}.weight", np.arange(nxt.n_out), also_input_axis=keep)
            if acc is not None:
                acc.on_input_prune(nxt.name, keep)
        for lin, block in next_linears:
            keep_cols = (keep[:, None] * block + np.arange(block)[None, :]).ravel()
            lin.weight = slice_axis(lin.weight, keep_cols, axis=1)
            lin.grad_weight = slice_axis(lin.grad_weight, keep_cols, axis=1)
            if opt is not None:
                opt.rebuild_after_hard_prune(
                    f"{lin.name}.weight", np.arange(lin.weight.shape[0]),
                    also_input_axis=keep_cols)
        if acc is not None:
            for c in convs:
                acc.on_hard_prune(c.name, keep)


def apply_prune(layer, plan, next_layer=None, bn=None, opt=None,
                flatten_block=None, acc=None):
    """Two-layer-chain form of prune_unit for plain feedforward stacks.

    next_layer may be a PrunableConv (its input channels follow this layer)
    or a Linear directly behind a flatten boundary, in which case
    flatten_block gives the number of scalars one channel occupies.
    """
    next_convs, next_linears = (), ()
    if isinstance(next_layer, PrunableConv):
        next_convs = (next_layer,)
    elif isinstance(next_layer, Linear):
        if flatten_block is None:
            raise ValueError("flatten_block is required when next_layer is Linear")
        next_linears = ((next_layer, flatten_block),)
    elif next_layer is not None:
        raise ValueError(f"unsupported next layer type {type(next_layer).__name__}")
    prune_unit([layer], plan, bns=(bn,) if bn is not None else (),
               next_convs=next_convs, next_linears=next_linears, opt=opt, acc=acc)


def count_params(graph) -> int:
    """Total parameter scalars over the live structure (soft zeros count)."""
    return sum(l.param_count() for l in graph.layers.values() if hasattr(l, "param_count"))


def count_flops(graph, input_chw) -> int:
    """Multiply-accumulate count (+bias adds) of one forward pass.

    Convolutions contribute n_out * (n_in * k^2 + 1) * H_out * W_out, linear
    layers out * in + out; normalization, activations and pooling are not
    counted. Soft-zeroed filters still cost FLOPs (they physically exist),
    hard-removed filters do not.
    """
    if len(input_chw) != 3:
        raise ValueError(f"input shape must be (C, H, W), got {input_chw}")
    total = 0
    for layer, shape in graph.layer_input_shapes(tuple(input_chw)):
        total += layer.flop_count(shape)
    return int(total)


def audit_lockstep(graph, opt=None):
    """Check weight/grad/momentum shape agreement for every parameter."""
    problems = []
    for name, layer in graph.layers.items():
        if not hasattr(layer, "param_names"):
            continue
        for p in layer.param_names():
            w = getattr(layer, p)
            g = getattr(layer, "grad_" + p)
            if g.shape != w.shape:
                problems.append(f"{name}.{p}: grad shape {g.shape} != param shape {w.shape}")
            if opt is not None:
                m = opt.momentum.get(f"{name}.{p}")
                if m is None:
                    problems.append(f"{name}.{p}: missing momentum buffer")
                elif m.shape != w.shape:
                    problems.append(f"{name}.{p}: momentum shape {m.shape} != param shape {w.shape}")
        if isinstance(layer, PrunableConv):
            if layer.weight.shape[0] != layer.bias.shape[0]:
                problems.append(f"{name}: bias length != filter count")
            if layer.original_n_out < layer.n_out:
                problems.append(f"{name}: more filters than originally constructed")
            if int(layer.live_mask.sum()) != layer.n_out:
                problems.append(f"{name}: live_mask count != current filter count")
    if problems:
        raise AuditError("lockstep audit failed:\n  " + "\n  ".join(problems))


def audit_soft_zero(graph, opt=None):
    """Check that every currently soft-pruned row is zero in weights, grads,
    momentum and batchnorm state. Valid right after a pruning event."""
    problems = []
    for name, layer in graph.layers.items():
        if not isinstance(layer, PrunableConv) or not layer.soft_idx.size:
            continue
        idx = layer.soft_idx
        for p in ("weight", "bias", "grad_weight", "grad_bias"):
            if np.any(getattr(layer, p)[idx] != 0.0):
                problems.append(f"{name}.{p}: soft rows {idx.tolist()} not zero")
        if opt is not None:
            for p in ("weight", "bias"):
                m = opt.momentum.get(f"{name}.{p}")
                if m is not None and np.any(m[idx] != 0.0):
                    problems.append(f"{name}.{p}: soft momentum rows not zero")
        bn = graph.bn_of.get(name)
        if bn is not None:
            bn_layer = graph.layers[bn]
            for p in ("gamma", "beta", "running_mean", "running_var"):
                if np.any(getattr(bn_layer, p)[idx] != 0.0):
                    problems.append(f"{bn}.{p}: soft channels not zero")
    if problems:
        raise AuditError("soft-zero audit failed:\n  " + "\n  ".join(problems))


class AuditError(AssertionError):
    pass
