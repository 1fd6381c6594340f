"""Filter activation measurement, prune voting, and structural rewrite.

Each conv proposes a removal set from its filter activations (group norms);
coupling groups resolve one mask per group by set intersection (default) or
union across members. Applying masks produces a new, smaller graph: pruned
output channels disappear from their conv and from every downstream consumer's
input channels, with eltwise-coupled convs dropping identical indices.

Filter indices are 1-based everywhere they are user-visible (votes, masks,
mask files), matching the activation CSV indexing.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GraphError, MaskError
from .network import INPUT, LayerSpec, NetworkGraph, coupling_groups
from .regularizer import filter_norms
from .tensor import Tensor


@dataclass
class PruneVote:
    """One conv's proposed removal set (1-based filter indices)."""

    conv_id: str
    remove: set


@dataclass
class PruneMask:
    """Resolved removal set for a whole coupling group."""

    group_id: str
    remove: set
    strategy: str


@dataclass
class CompressionReport:
    params_before: int
    params_after: int
    per_layer_filters: dict          # conv id -> (before, after)
    macs_before: int
    macs_after: int

    @property
    def rate(self):
        return 1.0 - self.params_after / self.params_before

    @property
    def speedup(self):
        return self.macs_before / self.macs_after

    @property
    def filter_rate(self):
        before = sum(b for b, _ in self.per_layer_filters.values())
        after = sum(a for _, a in self.per_layer_filters.values())
        return 1.0 - after / before

    def to_dict(self):
        return {
            "params_before": self.params_before,
            "params_after": self.params_after,
            "compression_rate": self.rate,
            "filter_rate": self.filter_rate,
            "macs_before": self.macs_before,
            "macs_after": self.macs_after,
            "speedup": self.speedup,
            "per_layer_filters": {k: list(v) for k, v in self.per_layer_filters.items()},
        }


def filter_activations(net):
    """Group norm (weights + bias) of every filter, per conv layer."""
    return {
        c: [float(v) for v in filter_norms(net.weight(c).data, net.bias(c).data)]
        for c in net.conv_ids()
    }


def parse_threshold_rule(rule):
    """Split a threshold rule string into (name, arg)."""
    if rule == "mean":
        return ("mean", None)
    if rule.startswith("abs:"):
        try:
            return ("abs", float(rule[4:]))
        except ValueError:
            raise ConfigError("bad abs threshold", rule=rule) from None
    if rule.startswith("topfrac:"):
        try:
            p = float(rule[8:])
        except ValueError:
            raise ConfigError("bad topfrac fraction", rule=rule) from None
        if not 0.0 <= p <= 1.0:
            raise ConfigError("topfrac fraction must be in [0,1]", rule=rule)
        return ("topfrac", p)
    raise ConfigError("unknown threshold rule", rule=rule)


def propose_votes(activations, rule="mean"):
    """Per-conv prune candidates from activation norms.

    Rules: ``mean`` marks filters strictly below the conv's mean norm;
    ``abs:eps`` marks norms below eps; ``topfrac:p`` marks the floor(K*p)
    lowest norms, pruning the highest index first among ties (so the lowest
    index survives a tie).
    """
    name, arg = parse_threshold_rule(rule)
    votes = []
    for conv_id, norms in activations.items():
        if not norms:
            raise ConfigError("empty activation list", conv=conv_id)
        arr = np.asarray(norms, dtype=np.float64)
        if name == "mean":
            remove = {int(i) + 1 for i in np.nonzero(arr < arr.mean())[0]}
        elif name == "abs":
            remove = {int(i) + 1 for i in np.nonzero(arr < arg)[0]}
        else:  # topfrac
            count = int(np.floor(len(arr) * arg))
            order = sorted(range(len(arr)), key=lambda i: (arr[i], -i))
            remove = {i + 1 for i in order[:count]}
        votes.append(PruneVote(conv_id=conv_id, remove=remove))
    return votes


def resolve_vote(group, votes, strategy="intersection", activations=None):
    """Combine member votes into one mask by set intersection or union.

    The result is clamped so at least one filter survives: if every index got
    voted out, the index with the highest aggregate norm across members (or
    the lowest index, when no activations are supplied) is retained.
    """
    if strategy not in ("intersection", "union"):
        raise ConfigError("unknown vote strategy", strategy=strategy)
    by_conv = {v.conv_id: v for v in votes}
    sets = []
    for m in group.members:
        if m not in by_conv:
            raise MaskError("missing vote for coupling-group member", group=group.id, member=m)
        rm = by_conv[m].remove
        bad = [i for i in rm if not 1 <= i <= group.filters]
        if bad:
            raise MaskError("vote index out of range", member=m, index=bad[0],
                            filters=group.filters)
        sets.append(set(rm))
    if strategy == "intersection":
        resolved = set.intersection(*sets)
    else:
        resolved = set.union(*sets)
    if len(resolved) >= group.filters:
        resolved = set(resolved)
        if activations:
            total = np.zeros(group.filters, dtype=np.float64)
            for m in group.members:
                total += np.asarray(activations[m], dtype=np.float64)
            keep = int(np.argmax(total)) + 1
        else:
            keep = min(resolved)
        resolved.discard(keep)
    return PruneMask(group_id=group.id, remove=resolved, strategy=strategy)


def resolve_all(net, votes, strategy="intersection", activations=None, groups=None,
                skip=()):
    """One mask per coupling group, skipping groups whose members are exempt."""
    if groups is None:
        groups = coupling_groups(net)
    by_conv = {v.conv_id: v for v in votes}
    masks = []
    for g in groups:
        if any(m in skip for m in g.members):
            continue
        if not all(m in by_conv for m in g.members):
            continue
        masks.append(resolve_vote(g, votes, strategy, activations))
    return masks


def apply_mask(net, masks):
    """Structurally remove the masked filters; returns a new NetworkGraph.

    For every pruned output channel the weight slice and bias entry disappear,
    and each downstream conv/linear consuming the feature map (through relu,
    eltwise, or pooling) loses the matching input channel/row.
    """
    groups = {g.id: g for g in coupling_groups(net)}
    remove_by_conv = {}
    for mask in masks:
        if mask.group_id not in groups:
            raise MaskError("mask references unknown coupling group", group=mask.group_id)
        g = groups[mask.group_id]
        bad = [i for i in mask.remove if not 1 <= i <= g.filters]
        if bad:
            raise MaskError("mask index out of range", group=g.id, index=bad[0],
                            filters=g.filters)
        if len(mask.remove) >= g.filters:
            raise MaskError("mask would remove every filter", group=g.id)
        for m in g.members:
            remove_by_conv[m] = {i - 1 for i in mask.remove}  # to 0-based

    keep_of = {INPUT: list(range(net.input_shape[0]))}
    new_layers = []
    new_params = {}
    for l in net.layers:
        if l.kind == "conv":
            in_keep = keep_of[l.inputs[0]]
            w = net.weight(l.id).data
            b = net.bias(l.id).data
            removed = remove_by_conv.get(l.id, set())
            out_keep = [k for k in range(w.shape[0]) if k not in removed]
            new_w = w[np.ix_(out_keep, in_keep)]
            new_params[f"{l.id}.weight"] = Tensor(new_w, name=f"{l.id}.weight")
            new_params[f"{l.id}.bias"] = Tensor(b[out_keep], name=f"{l.id}.bias")
            new_layers.append(LayerSpec(l.id, "conv", list(l.inputs), filters=len(out_keep),
                                        ksize=l.ksize, stride=l.stride, pad=l.pad))
            keep_of[l.id] = out_keep
        elif l.kind in ("relu", "avgpool"):
            keep_of[l.id] = keep_of[l.inputs[0]]
            new_layers.append(LayerSpec(l.id, l.kind, list(l.inputs)))
        elif l.kind == "eltwise":
            ka, kb = keep_of[l.inputs[0]], keep_of[l.inputs[1]]
            if ka != kb:
                raise GraphError("eltwise inputs pruned inconsistently", layer=l.id)
            keep_of[l.id] = ka
            new_layers.append(LayerSpec(l.id, "eltwise", list(l.inputs)))
        elif l.kind == "linear":
            in_keep = keep_of[l.inputs[0]]
            w = net.weight(l.id).data
            new_params[f"{l.id}.weight"] = Tensor(w[in_keep, :], name=f"{l.id}.weight")
            new_params[f"{l.id}.bias"] = Tensor(net.bias(l.id).data.copy(),
                                                name=f"{l.id}.bias")
            new_layers.append(LayerSpec(l.id, "linear", list(l.inputs),
                                        out_features=l.out_features))
        else:
            new_layers.append(LayerSpec(l.id, l.kind, list(l.inputs)))
    return NetworkGraph(new_layers, new_params, net.input_shape, net.classes)


def _mac_count(net):
    """Per-image multiply-accumulate count over convs and linear layers."""
    total = 0
    for l in net.layers:
        if l.kind == "conv":
            _, _, hp, wp = net.output_shape(l.id)
            cin = net.weight(l.id).data.shape[1]
            total += l.filters * cin * l.ksize * l.ksize * hp * wp
        elif l.kind == "linear":
            c, m = net.weight(l.id).data.shape
            total += c * m
    return total


def compression_report(before, after):
    """Exact parameter counts, per-layer filter counts, and a MAC-ratio speedup."""
    per_layer = {}
    for c in before.conv_ids():
        kb = before.weight(c).data.shape[0]
        ka = after.weight(c).data.shape[0] if f"{c}.weight" in after.params else 0
        per_layer[c] = (kb, ka)
    return CompressionReport(
        params_before=before.parameter_count(),
        params_after=after.parameter_count(),
        per_layer_filters=per_layer,
        macs_before=_mac_count(before),
        macs_after=_mac_count(after),
    )


def save_masks(path, masks):
    """Serialize masks as JSON: {group id: sorted 1-based index list}."""
    payload = {m.group_id: sorted(m.remove) for m in masks}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_masks(path, strategy="file"):
    with open(path) as fh:
        payload = json.load(fh)
    return [PruneMask(group_id=g, remove=set(ix), strategy=strategy)
            for g, ix in sorted(payload.items())]
