"""Network zoo and the graph metadata that drives structural pruning.

A ModelGraph couples the executable layer structure with a list of "prune
units". A unit is one convolution, or a set of convolutions constrained to
share filter indexes (residual blocks prune the downsample convolution and
the block's last convolution with the same indexes so the elementwise add
stays aligned). Each unit records which downstream layers consume its
output channels, including linear layers behind a flatten boundary.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .layers import (EVAL, TRAIN, BatchNorm, Flatten, Linear, MaxPool2x2,
                     PrunableConv, ReLU)
from . import pruning
from .tensor import DEFAULT_DTYPE

RESNET_STRATEGIES = ("SHARED_INDEX", "SKIP_DOWNSAMPLE")


class Sequential:
    def __init__(self, items):
        self.items = list(items)  # (name, layer-or-block) pairs

    def forward(self, x, mode=TRAIN):
        for _, layer in self.items:
            x = layer.forward(x, mode)
        return x

    def backward(self, grad):
        for _, layer in reversed(self.items):
            grad = layer.backward(grad)
        return grad

    def iter_leaves(self):
        for name, layer in self.items:
            if isinstance(layer, (Sequential, ResidualBlock)):
                yield from layer.iter_leaves()
            else:
                yield name, layer

    def shape_walk(self, shape):
        out = []
        for _, layer in self.items:
            if isinstance(layer, (Sequential, ResidualBlock)):
                walked, shape = layer.shape_walk(shape)
                out.extend(walked)
            else:
                out.append((layer, shape))
                shape = layer.out_shape(shape)
        return out, shape


class ResidualBlock:
    """main path + shortcut, elementwise add, then relu."""

    def __init__(self, main: Sequential, shortcut: Sequential | None, add_relu: ReLU):
        self.main = main
        self.shortcut = shortcut
        self.add_relu = add_relu

    def forward(self, x, mode=TRAIN):
        h = self.main.forward(x, mode)
        s = self.shortcut.forward(x, mode) if self.shortcut is not None else x
        if h.shape != s.shape:
            raise ValueError(
                f"residual add: main path {h.shape} vs shortcut {s.shape}")
        return self.add_relu.forward(h + s, mode)

    def backward(self, grad):
        grad = self.add_relu.backward(grad)
        gm = self.main.backward(grad)
        gs = self.shortcut.backward(grad) if self.shortcut is not None else grad
        return gm + gs

    def iter_leaves(self):
        yield from self.main.iter_leaves()
        if self.shortcut is not None:
            yield from self.shortcut.iter_leaves()
        yield from [(self.add_relu.name, self.add_relu)]

    def shape_walk(self, shape):
        walked, out_main = self.main.shape_walk(shape)
        if self.shortcut is not None:
            walked_s, out_short = self.shortcut.shape_walk(shape)
            walked.extend(walked_s)
        else:
            out_short = shape
        if out_main != out_short:
            raise ValueError(
                f"residual shapes diverged: main {out_main} vs shortcut {out_short}")
        walked.append((self.add_relu, out_main))
        return walked, out_main


@dataclass
class PruneUnit:
    """Convolutions pruned with one shared index set, plus their consumers."""

    name: str
    convs: list
    bns: list = field(default_factory=list)
    next_convs: list = field(default_factory=list)
    next_linears: list = field(default_factory=list)  # (linear name, block size)
    prunable: bool = True


class ModelGraph:
    def __init__(self, root: Sequential, units, dtype=DEFAULT_DTYPE):
        self.root = root
        self.layers = OrderedDict(root.iter_leaves())
        if len(self.layers) != len(list(root.iter_leaves())):
            raise ValueError("duplicate layer names in model")
        self.units = list(units)
        self.dtype = dtype
        self.bn_of = {}
        for u in self.units:
            for conv, bn in zip(u.convs, u.bns):
                self.bn_of[conv] = bn
        for u in self.units:
            orig = {self.layers[c].original_n_out for c in u.convs}
            if len(orig) != 1:
                raise ValueError(f"unit '{u.name}' members disagree on original filter count")

    # -- execution ---------------------------------------------------------
    def forward(self, x, mode=TRAIN):
        return self.root.forward(x, mode)

    def backward(self, grad):
        return self.root.backward(grad)

    def zero_grads(self):
        for layer in self.layers.values():
            if hasattr(layer, "zero_grads"):
                layer.zero_grads()

    # -- parameter registry --------------------------------------------------
    def named_params(self):
        for name, layer in self.layers.items():
            if hasattr(layer, "param_names"):
                for p in layer.param_names():
                    yield f"{name}.{p}", layer, p

    def param_arrays(self):
        return {full: getattr(layer, p) for full, layer, p in self.named_params()}

    def grad_arrays(self):
        return {full: getattr(layer, "grad_" + p) for full, layer, p in self.named_params()}

    def conv_items(self):
        return [(n, l) for n, l in self.layers.items() if isinstance(l, PrunableConv)]

    # -- shapes / complexity -------------------------------------------------
    def layer_input_shapes(self, input_chw):
        walked, _ = self.root.shape_walk(tuple(input_chw))
        return walked

    # -- pruning metadata ------------------------------------------------------
    def unit(self, unit_id: str) -> PruneUnit:
        for u in self.units:
            if u.name == unit_id or unit_id in u.convs:
                return u
        raise KeyError(f"no prune unit '{unit_id}'")

    def unit_counts(self, u: PruneUnit):
        """(original, current) filter counts of a unit."""
        first = self.layers[u.convs[0]]
        return first.original_n_out, first.n_out

    def audit_wiring(self, input_chw=None):
        problems = []
        for u in self.units:
            n_outs = {self.layers[c].n_out for c in u.convs}
            if len(n_outs) != 1:
                problems.append(f"unit '{u.name}': member filter counts diverged {n_outs}")
                continue
            n = n_outs.pop()
            for bn in u.bns:
                if self.layers[bn].n_ch != n:
                    problems.append(f"unit '{u.name}': bn '{bn}' channels != {n}")
            for nc in u.next_convs:
                if self.layers[nc].n_in != n:
                    problems.append(f"unit '{u.name}': next conv '{nc}' inputs != {n}")
            for nl, block in u.next_linears:
                if self.layers[nl].weight.shape[1] != n * block:
                    problems.append(f"unit '{u.name}': next linear '{nl}' inputs != {n}x{block}")
        if input_chw is not None:
            try:
                self.layer_input_shapes(input_chw)
            except ValueError as e:
                problems.append(str(e))
        if problems:
            raise pruning.AuditError("wiring audit failed:\n  " + "\n  ".join(problems))


def propagate_prune(graph: ModelGraph, unit_id: str, plan, opt=None, acc=None):
    """Apply one plan to a unit: every member conv, its batchnorms, and the
    input channels of every consumer, in one atomic operation."""
    u = graph.unit(unit_id)
    if not u.prunable:
        raise ValueError(f"unit '{u.name}' is marked unprunable")
    pruning.prune_unit(
        [graph.layers[c] for c in u.convs], plan,
        bns=[graph.layers[b] for b in u.bns],
        next_convs=[graph.layers[c] for c in u.next_convs],
        next_linears=[(graph.layers[n], block) for n, block in u.next_linears],
        opt=opt, acc=acc)


# -- builders ------------------------------------------------------------------

def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def build_lenet5(*, rng, num_classes=10, in_channels=1, image_size=28,
                 dtype=DEFAULT_DTYPE) -> ModelGraph:
    """LeNet5: two conv/pool stages, a 5x5 conv stage collapsing to 1x1
    spatial (the historical C5 layer), then a small classifier head.

    At 28x28 input this lands at ~61.7K parameters and ~423K FLOPs.
    """
    s = image_size
    s = _conv_out(s, 5, 1, 2) // 2          # conv1 (pad 2) + pool
    s = _conv_out(s, 5, 1, 0) // 2          # conv2 + pool
    s_c5 = _conv_out(s, 5, 1, 0)            # c5 collapses 5x5 -> 1x1 at 28x28
    conv1 = PrunableConv(in_channels, 6, 5, padding=2, rng=rng, dtype=dtype, name="conv1")
    conv2 = PrunableConv(6, 16, 5, rng=rng, dtype=dtype, name="conv2")
    conv3 = PrunableConv(16, 120, 5, rng=rng, dtype=dtype, name="conv3")
    block = s_c5 * s_c5
    fc1 = Linear(120 * block, 84, rng=rng, dtype=dtype, name="fc1")
    fc2 = Linear(84, num_classes, rng=rng, dtype=dtype, name="fc2")
    root = Sequential([
        ("conv1", conv1), ("relu1", ReLU("relu1")), ("pool1", MaxPool2x2("pool1")),
        ("conv2", conv2), ("relu2", ReLU("relu2")), ("pool2", MaxPool2x2("pool2")),
        ("conv3", conv3), ("relu3", ReLU("relu3")),
        ("flatten", Flatten("flatten")),
        ("fc1", fc1), ("relu4", ReLU("relu4")), ("fc2", fc2),
    ])
    units = [
        PruneUnit("conv1", ["conv1"], next_convs=["conv2"]),
        PruneUnit("conv2", ["conv2"], next_convs=["conv3"]),
        PruneUnit("conv3", ["conv3"], next_linears=[("fc1", block)]),
    ]
    return ModelGraph(root, units, dtype=dtype)


def build_small_vgg(*, rng, num_classes=10, in_channels=3, image_size=32,
                    widths=(8, 8, 16, 16, 32, 32), dtype=DEFAULT_DTYPE) -> ModelGraph:
    """Plain conv/BN/relu stack with a pool every two convs; every conv is
    prunable. Sized well below the full architecture so scheduled runs
    finish in minutes on a CPU."""
    if len(widths) % 2:
        raise ValueError("widths must pair up two convs per stage")
    items = []
    units = []
    prev = in_channels
    names = []
    size = image_size
    for i, w in enumerate(widths, start=1):
        cname, bname = f"conv{i}", f"bn{i}"
        conv = PrunableConv(prev, w, 3, padding=1, rng=rng, dtype=dtype, name=cname)
        bn = BatchNorm(w, dtype=dtype, name=bname)
        items += [(cname, conv), (bname, bn), (f"relu{i}", ReLU(f"relu{i}"))]
        names.append((cname, bname))
        prev = w
        if i % 2 == 0:
            items.append((f"pool{i // 2}", MaxPool2x2(f"pool{i // 2}")))
            size //= 2
    block = size * size
    fc = Linear(prev * block, num_classes, rng=rng, dtype=dtype, name="fc")
    items += [("flatten", Flatten("flatten")), ("fc", fc)]
    for i, (cname, bname) in enumerate(names):
        if i + 1 < len(names):
            units.append(PruneUnit(cname, [cname], bns=[bname],
                                   next_convs=[names[i + 1][0]]))
        else:
            units.append(PruneUnit(cname, [cname], bns=[bname],
                                   next_linears=[("fc", block)]))
    return ModelGraph(Sequential(items), units, dtype=dtype)


def _basic_block(prefix, n_in, n_out, stride, rng, dtype):
    conv1 = PrunableConv(n_in, n_out, 3, stride=stride, padding=1, rng=rng,
                         dtype=dtype, name=f"{prefix}.conv1")
    bn1 = BatchNorm(n_out, dtype=dtype, name=f"{prefix}.bn1")
    conv2 = PrunableConv(n_out, n_out, 3, padding=1, rng=rng, dtype=dtype,
                         name=f"{prefix}.conv2")
    bn2 = BatchNorm(n_out, dtype=dtype, name=f"{prefix}.bn2")
    main = Sequential([
        (conv1.name, conv1), (bn1.name, bn1),
        (f"{prefix}.relu1", ReLU(f"{prefix}.relu1")),
        (conv2.name, conv2), (bn2.name, bn2),
    ])
    shortcut = None
    if stride != 1 or n_in != n_out:
        down = PrunableConv(n_in, n_out, 1, stride=stride, rng=rng, dtype=dtype,
                            name=f"{prefix}.down")
        dbn = BatchNorm(n_out, dtype=dtype, name=f"{prefix}.dbn")
        shortcut = Sequential([(down.name, down), (dbn.name, dbn)])
    return ResidualBlock(main, shortcut, ReLU(f"{prefix}.addrelu"))


def build_small_resnet(*, rng, strategy="SHARED_INDEX", num_classes=10,
                       in_channels=3, image_size=32, widths=(8, 16, 32),
                       dtype=DEFAULT_DTYPE) -> ModelGraph:
    """Three-stage residual network, one basic block per stage.

    SHARED_INDEX: the conv feeding a stage's shortcut (stem or downsample)
    and the block's last conv form one shared-index unit, so both sides of
    the elementwise add are always pruned identically.
    SKIP_DOWNSAMPLE: those units are left untouched; only the first conv of
    each block is pruned.
    """
    if strategy not in RESNET_STRATEGIES:
        raise ValueError(f"unknown resnet strategy '{strategy}', pick one of {RESNET_STRATEGIES}")
    w1, w2, w3 = widths
    stem = PrunableConv(in_channels, w1, 3, padding=1, rng=rng, dtype=dtype, name="stem")
    stem_bn = BatchNorm(w1, dtype=dtype, name="stem_bn")
    b1 = _basic_block("s1", w1, w1, 1, rng, dtype)
    b2 = _basic_block("s2", w1, w2, 2, rng, dtype)
    b3 = _basic_block("s3", w2, w3, 2, rng, dtype)
    out_size = image_size // 4
    block = out_size * out_size
    fc = Linear(w3 * block, num_classes, rng=rng, dtype=dtype, name="fc")
    root = Sequential([
        ("stem", stem), ("stem_bn", stem_bn), ("stem_relu", ReLU("stem_relu")),
        ("s1", b1), ("s2", b2), ("s3", b3),
        ("flatten", Flatten("flatten")), ("fc", fc),
    ])
    shared = strategy == "SHARED_INDEX"
    units = [
        PruneUnit("g1", ["stem", "s1.conv2"], bns=["stem_bn", "s1.bn2"],
                  next_convs=["s1.conv1", "s2.conv1", "s2.down"], prunable=shared),
        PruneUnit("s1.conv1", ["s1.conv1"], bns=["s1.bn1"], next_convs=["s1.conv2"]),
        PruneUnit("g2", ["s2.down", "s2.conv2"], bns=["s2.dbn", "s2.bn2"],
                  next_convs=["s3.conv1", "s3.down"], prunable=shared),
        PruneUnit("s2.conv1", ["s2.conv1"], bns=["s2.bn1"], next_convs=["s2.conv2"]),
        PruneUnit("g3", ["s3.down", "s3.conv2"], bns=["s3.dbn", "s3.bn2"],
                  next_linears=[("fc", block)], prunable=shared),
        PruneUnit("s3.conv1", ["s3.conv1"], bns=["s3.bn1"], next_convs=["s3.conv2"]),
    ]
    return ModelGraph(root, units, dtype=dtype)


MODEL_BUILDERS = {
    "lenet5": build_lenet5,
    "small_vgg": build_small_vgg,
    "small_resnet": build_small_resnet,
}
