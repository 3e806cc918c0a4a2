"""Test oracle: rebuild a full-size network from a pruned one.

Embeds the pruned model's parameters back into a freshly built full-size
model (same init seed) with every removed slot zeroed. A correct pruning
implementation keeps forward outputs identical (up to float summation
noise), because removed slots contribute exact zeros everywhere. This
reconstruction relies only on live masks and the declared unit wiring, not
on the slicing code it is checking.
"""

import numpy as np

from gradprune.layers import BatchNorm, Linear, PrunableConv


def expand_to_full(pruned_graph, full_graph):
    # zero every parametric tensor of the full model first
    for layer in full_graph.layers.values():
        if isinstance(layer, PrunableConv):
            layer.weight[...] = 0.0
            layer.bias[...] = 0.0
        elif isinstance(layer, BatchNorm):
            for p in ("gamma", "beta", "running_mean", "running_var"):
                getattr(layer, p)[...] = 0.0
        elif isinstance(layer, Linear):
            layer.weight[...] = 0.0
            layer.bias[...] = 0.0

    out_live = {name: np.flatnonzero(layer.live_mask)
                for name, layer in pruned_graph.conv_items()}
    in_live = {}
    lin_cols = {}
    for u in pruned_graph.units:
        live = out_live[u.convs[0]]
        for nc in u.next_convs:
            in_live[nc] = live
        for nl, block in u.next_linears:
            lin_cols[nl] = (live[:, None] * block + np.arange(block)[None, :]).ravel()

    for name, layer in pruned_graph.conv_items():
        full = full_graph.layers[name]
        rows = out_live[name]
        cols = in_live.get(name, np.arange(layer.n_in))
        full.weight[np.ix_(rows, cols)] = layer.weight
        full.bias[rows] = layer.bias
        bn_name = pruned_graph.bn_of.get(name)
        if bn_name is not None:
            bn_p, bn_f = pruned_graph.layers[bn_name], full_graph.layers[bn_name]
            for p in ("gamma", "beta", "running_mean", "running_var"):
                getattr(bn_f, p)[rows] = getattr(bn_p, p)
    for name, layer in pruned_graph.layers.items():
        if isinstance(layer, Linear):
            full = full_graph.layers[name]
            cols = lin_cols.get(name)
            if cols is None:
                full.weight[...] = layer.weight
            else:
                full.weight[:, cols] = layer.weight
            full.bias[...] = layer.bias
    return full_graph
