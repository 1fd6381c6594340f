"""Residual CNN graphs and eltwise coupling-group discovery.

A network is a DAG of layer specs over the kinds {conv, relu, eltwise,
avgpool, linear, loss}. Presets build the classic pre-BN residual stack:
a 3x3 stem, stages of two-conv blocks joined to their shortcut by an eltwise
sum, global average pooling, and a linear classifier. Every stage entry uses a
1x1 projection shortcut; later blocks in a stage use identity shortcuts, which
chains all of the stage's eltwise-feeding convs into one coupling group.

Convs whose outputs meet at an eltwise (directly or through relu/identity/
eltwise paths) must drop the same filter indices when pruned; coupling groups
capture exactly that partition. Convs never feeding an eltwise are singleton
groups and prune independently.

Initialization is He fan-in scaling from a seeded numpy Generator (PCG64), so
builds are reproducible bit-for-bit.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, GraphError
from .tensor import Tensor

PRESETS = {
    # (blocks per stage, channels per stage)
    "resnet-tiny-8": ([1, 1, 1], [8, 16, 32]),
    "resnet-20-narrow": ([3, 3, 3], [8, 16, 32]),
}

INPUT = "input"


@dataclass
class LayerSpec:
    id: str
    kind: str  # conv | relu | eltwise | avgpool | linear | loss
    inputs: list
    filters: int = 0      # conv output channels
    ksize: int = 0
    stride: int = 1
    pad: int = 0
    out_features: int = 0  # linear


@dataclass
class NetworkConfig:
    preset: str = "resnet-tiny-8"
    stages: list = None            # [(blocks, channels), ...]; overrides preset
    input_shape: tuple = (3, 16, 16)
    classes: int = 10
    seed: int = 0


@dataclass
class CouplingGroup:
    """Convs that must prune identical filter indices."""

    id: str
    members: list          # conv layer ids, topological order
    filters: int
    consumers: list = field(default_factory=list)

    def __contains__(self, conv_id):
        return conv_id in self.members


class NetworkGraph:
    """Layer specs in topological order plus named parameter tensors."""

    def __init__(self, layers, params, input_shape, classes):
        self.layers = list(layers)
        self.params = dict(params)
        self.input_shape = tuple(input_shape)
        self.classes = classes
        self.by_id = {l.id: l for l in self.layers}
        if len(self.by_id) != len(self.layers):
            raise GraphError("duplicate layer ids")
        self.validate()

    # -- parameter access -------------------------------------------------
    def weight(self, layer_id):
        return self.params[f"{layer_id}.weight"]

    def bias(self, layer_id):
        return self.params[f"{layer_id}.bias"]

    def conv_ids(self):
        return [l.id for l in self.layers if l.kind == "conv"]

    def stem_id(self):
        for l in self.layers:
            if l.kind == "conv":
                return l.id
        return None

    def penalized_convs(self):
        """Convs subject to the group lasso: every conv except the stem."""
        stem = self.stem_id()
        return [c for c in self.conv_ids() if c != stem]

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    # -- structure ---------------------------------------------------------
    def validate(self):
        """Check acyclicity, arity, and channel/shape consistency throughout."""
        shapes = {INPUT: (1,) + self.input_shape}
        seen = {INPUT}
        for l in self.layers:
            for src in l.inputs:
                if src not in seen:
                    raise GraphError("layer input not yet defined (graph must be topological)",
                                     layer=l.id, input=src)
            if l.kind == "conv":
                b, c, h, w = shapes[l.inputs[0]]
                wt = self.weight(l.id).data
                if wt.shape[1] != c:
                    raise GraphError("conv input-channel mismatch", layer=l.id,
                                     expected=c, weight_channels=wt.shape[1])
                if wt.shape[0] != l.filters:
                    raise GraphError("conv filter count disagrees with weights",
                                     layer=l.id, spec=l.filters, weights=wt.shape[0])
                hp = (h + 2 * l.pad - l.ksize) // l.stride + 1
                wp = (w + 2 * l.pad - l.ksize) // l.stride + 1
                if hp < 1 or wp < 1:
                    raise GraphError("conv output collapsed", layer=l.id, out=(hp, wp))
                shapes[l.id] = (b, l.filters, hp, wp)
            elif l.kind == "relu":
                shapes[l.id] = shapes[l.inputs[0]]
            elif l.kind == "eltwise":
                if len(l.inputs) != 2:
                    raise GraphError("eltwise needs exactly 2 inputs", layer=l.id,
                                     inputs=len(l.inputs))
                sa, sb = shapes[l.inputs[0]], shapes[l.inputs[1]]
                if sa != sb:
                    raise GraphError("eltwise input shapes differ", layer=l.id, a=sa, b=sb)
                shapes[l.id] = sa
            elif l.kind == "avgpool":
                b, c, _, _ = shapes[l.inputs[0]]
                shapes[l.id] = (b, c)
            elif l.kind == "linear":
                b, c = shapes[l.inputs[0]]
                wt = self.weight(l.id).data
                if wt.shape[0] != c:
                    raise GraphError("linear input-feature mismatch", layer=l.id,
                                     expected=c, weight_rows=wt.shape[0])
                shapes[l.id] = (b, wt.shape[1])
            elif l.kind == "loss":
                shapes[l.id] = (1,)
            else:
                raise GraphError("unknown layer kind", layer=l.id, kind=l.kind)
            seen.add(l.id)
        self._shapes = shapes

    def output_shape(self, layer_id, batch=1):
        s = self._shapes[layer_id]
        return (batch,) + s[1:]

    def forward(self, x, labels=None, tape=None, return_values=False):
        """Run the graph on batch ``x``; returns (logits ndarray, loss Tensor or None).

        With ``return_values`` the per-layer output tensors come back as a
        third element (used for divergence diagnostics).
        """
        vals = {INPUT: x if isinstance(x, Tensor) else Tensor(x)}
        logits = None
        loss = None
        for l in self.layers:
            if l.kind == "conv":
                vals[l.id] = T.conv2d(vals[l.inputs[0]], self.weight(l.id), self.bias(l.id),
                                      stride=l.stride, pad=l.pad, tape=tape)
            elif l.kind == "relu":
                vals[l.id] = T.relu(vals[l.inputs[0]], tape=tape)
            elif l.kind == "eltwise":
                vals[l.id] = T.eltwise_add(vals[l.inputs[0]], vals[l.inputs[1]], tape=tape)
            elif l.kind == "avgpool":
                vals[l.id] = T.avgpool_global(vals[l.inputs[0]], tape=tape)
            elif l.kind == "linear":
                vals[l.id] = T.linear(vals[l.inputs[0]], self.weight(l.id), self.bias(l.id),
                                      tape=tape)
                logits = vals[l.id]
            elif l.kind == "loss":
                if labels is not None:
                    loss = T.softmax_xent(vals[l.inputs[0]], labels, tape=tape)
                    vals[l.id] = loss
        out = (logits.data if logits is not None else None), loss
        return out + (vals,) if return_values else out

    def state(self):
        """Parameter tensors as plain arrays, for checkpointing."""
        return {name: p.data for name, p in self.params.items()}

    def load_state(self, tensors):
        """Replace parameters with checkpoint arrays of identical shapes."""
        for name, p in self.params.items():
            if name not in tensors:
                raise GraphError("checkpoint missing parameter", name=name)
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise GraphError("checkpoint shape mismatch", name=name,
                                 expected=tuple(p.shape), found=tuple(arr.shape))
            p.data = np.ascontiguousarray(arr, dtype=np.float32)


def _stages_from_config(cfg):
    if cfg.stages:
        stages = [(int(b), int(c)) for b, c in cfg.stages]
    else:
        if cfg.preset not in PRESETS:
            raise ConfigError("unknown network preset", preset=cfg.preset,
                              available=",".join(sorted(PRESETS)))
        blocks, chans = PRESETS[cfg.preset]
        stages = list(zip(blocks, chans))
    for b, c in stages:
        if b < 1 or c < 1:
            raise ConfigError("stage spec entries must be positive", blocks=b, channels=c)
    return stages


def build(cfg):
    """Construct and He-initialize a residual network from ``cfg``."""
    stages = _stages_from_config(cfg)
    cin, h, w = cfg.input_shape
    if cfg.classes < 2:
        raise ConfigError("need at least 2 classes", classes=cfg.classes)
    rng = np.random.default_rng(cfg.seed)
    layers = []
    params = {}

    def add_conv(lid, in_ch, out_ch, ksize, stride, pad, src):
        layers.append(LayerSpec(lid, "conv", [src], filters=out_ch, ksize=ksize,
                                stride=stride, pad=pad))
        fan_in = in_ch * ksize * ksize
        wt = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, ksize, ksize))
        params[f"{lid}.weight"] = Tensor(wt, name=f"{lid}.weight")
        params[f"{lid}.bias"] = Tensor(np.zeros(out_ch), name=f"{lid}.bias")
        return lid

    stem_ch = stages[0][1]
    prev = add_conv("stem", cin, stem_ch, 3, 1, 1, INPUT)
    in_ch = stem_ch
    for s, (blocks, ch) in enumerate(stages, start=1):
        for b in range(1, blocks + 1):
            entry = b == 1
            stride = 2 if (entry and s > 1) else 1
            c1 = add_conv(f"s{s}b{b}c1", in_ch, ch, 3, stride, 1, prev)
            layers.append(LayerSpec(f"s{s}b{b}r1", "relu", [c1]))
            c2 = add_conv(f"s{s}b{b}c2", ch, ch, 3, 1, 1, f"s{s}b{b}r1")
            if entry:
                short = add_conv(f"s{s}b{b}sc", in_ch, ch, 1, stride, 0, prev)
            else:
                short = prev  # identity shortcut
            layers.append(LayerSpec(f"s{s}b{b}add", "eltwise", [c2, short]))
            layers.append(LayerSpec(f"s{s}b{b}r2", "relu", [f"s{s}b{b}add"]))
            prev = f"s{s}b{b}r2"
            in_ch = ch
    layers.append(LayerSpec("pool", "avgpool", [prev]))
    wt = rng.normal(0.0, np.sqrt(2.0 / in_ch), size=(in_ch, cfg.classes))
    params["fc.weight"] = Tensor(wt, name="fc.weight")
    params["fc.bias"] = Tensor(np.zeros(cfg.classes), name="fc.bias")
    layers.append(LayerSpec("fc", "linear", ["pool"], out_features=cfg.classes))
    layers.append(LayerSpec("loss", "loss", ["fc"]))
    return NetworkGraph(layers, params, cfg.input_shape, cfg.classes)


def _producing_convs(net, node_id, _memo=None):
    """Convs whose output reaches ``node_id`` through relu/eltwise passthrough."""
    if _memo is None:
        _memo = {}
    if node_id in _memo:
        return _memo[node_id]
    if node_id == INPUT:
        res = []
    else:
        l = net.by_id[node_id]
        if l.kind == "conv":
            res = [node_id]
        elif l.kind in ("relu", "avgpool"):
            res = _producing_convs(net, l.inputs[0], _memo)
        elif l.kind == "eltwise":
            res = (_producing_convs(net, l.inputs[0], _memo)
                   + _producing_convs(net, l.inputs[1], _memo))
        else:
            res = []
    _memo[node_id] = res
    return res


def coupling_groups(net):
    """Partition conv layers by joint-pruning constraint.

    Two convs share a group iff their output feature maps are ever summed
    elementwise, transitively; convs never feeding an eltwise are singletons.
    """
    convs = net.conv_ids()
    parent = {c: c for c in convs}

    def find(c):
        while parent[c] != c:
            parent[c] = parent[parent[c]]
            c = parent[c]
        return c

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    memo = {}
    for l in net.layers:
        if l.kind != "eltwise":
            continue
        produced = []
        for src in l.inputs:
            produced.extend(_producing_convs(net, src, memo))
        if not produced:
            raise GraphError("eltwise input traces back to no conv", layer=l.id)
        counts = {c: net.weight(c).data.shape[0] for c in set(produced)}
        if len(set(counts.values())) > 1:
            raise GraphError("eltwise-coupled convs disagree on filter count",
                             layer=l.id, counts=counts)
        first = produced[0]
        for c in produced[1:]:
            union(first, c)

    members = {}
    order = {c: i for i, c in enumerate(convs)}
    for c in convs:
        members.setdefault(find(c), []).append(c)
    groups = []
    for mem in members.values():
        mem.sort(key=order.get)
        gid = mem[0]
        consumers = _group_consumers(net, mem)
        groups.append(CouplingGroup(id=gid, members=mem,
                                    filters=net.weight(gid).data.shape[0],
                                    consumers=consumers))
    groups.sort(key=lambda g: order[g.id])
    return groups


def _group_consumers(net, members):
    """Layers that read any member's output feature map (directly or through
    relu/eltwise passthrough), i.e. the layers whose input channels shrink
    when the group is pruned."""
    carrying = set(members)
    consumers = []
    for l in net.layers:
        if l.kind in ("relu", "eltwise", "avgpool"):
            if any(src in carrying for src in l.inputs):
                carrying.add(l.id)
        elif l.kind in ("conv", "linear"):
            if any(src in carrying for src in l.inputs):
                consumers.append(l.id)
    return consumers
