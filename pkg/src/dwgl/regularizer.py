"""Filter-wise group lasso with an index-directed weighting coefficient.

The penalty treats each conv filter (its weights plus its bias) as one group.
The group norm doubles as the filter's activation measure. With weighting
enabled, filter k of a K-filter layer receives the softmax-style coefficient

    f(k) = exp(s*k/K) / sum_j exp(s*j/K)

which is strictly increasing in k, sums to 1, grows by the constant factor
exp(s/K) per index, and spans a ratio f(K)/f(1) = exp(s*(K-1)/K) that is
nearly independent of K. Steepness s defaults to 9.22. High-index filters are
therefore pushed toward zero first, aligning prune votes across layers that
feed a common eltwise sum.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class RegularizerConfig:
    """Penalty coefficients and mode switches.

    lambda_l2: plain L2 coefficient (applied as decoupled weight decay unless
        ``l2="coupled"``, which folds it into the penalty gradient instead).
    lambda_g: group-lasso coefficient.
    directed: False gives the unweighted baseline (all coefficients 1).
    steepness: exponent scale of the weighting function.
    epsilon: subgradient guard; groups with norm below it contribute zero.
    mode: "subgradient" adds the penalty gradient to the data gradient;
        "proximal" shrinks each group norm by lr*lambda_g*f(k) after the step,
        producing exact zeros.
    direction: "increasing" suppresses high indices (default); "decreasing"
        mirrors the coefficient over the index range.
    """

    lambda_l2: float = 0.0
    lambda_g: float = 0.0
    directed: bool = True
    steepness: float = 9.22
    epsilon: float = 1e-12
    mode: str = "subgradient"
    direction: str = "increasing"
    l2: str = "decoupled"

    def __post_init__(self):
        if self.lambda_l2 < 0 or self.lambda_g < 0:
            raise ConfigError("penalty coefficients must be nonnegative",
                              lambda_l2=self.lambda_l2, lambda_g=self.lambda_g)
        if self.steepness <= 0:
            raise ConfigError("steepness must be positive", steepness=self.steepness)
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive", epsilon=self.epsilon)
        if self.mode not in ("subgradient", "proximal"):
            raise ConfigError("unknown regularizer mode", mode=self.mode)
        if self.direction not in ("increasing", "decreasing"):
            raise ConfigError("unknown weighting direction", direction=self.direction)
        if self.l2 not in ("decoupled", "coupled"):
            raise ConfigError("unknown l2 mode", l2=self.l2)


def coeff(k, filters, steepness=9.22, direction="increasing"):
    """Weighting coefficient for 1-based filter index ``k`` of ``filters`` total."""
    if not 1 <= k <= filters:
        raise ConfigError("filter index out of range", k=k, filters=filters)
    return float(coeff_vector(filters, steepness, direction)[k - 1])


def coeff_vector(filters, steepness=9.22, direction="increasing"):
    """All coefficients f(1..K) as a float64 vector summing to 1."""
    if filters < 1:
        raise ConfigError("filter count must be >= 1", filters=filters)
    k = np.arange(1, filters + 1, dtype=np.float64)
    e = np.exp(steepness * k / filters)
    f = e / e.sum()
    if direction == "decreasing":
        f = f[::-1].copy()
    return f


def group_norm(weight_slice, bias_value=None):
    """Euclidean norm of one filter group: sqrt(sum of squared weights [+ bias])."""
    acc = float(np.square(weight_slice.astype(np.float64)).sum())
    if bias_value is not None:
        acc += float(bias_value) ** 2
    return float(np.sqrt(acc))


def filter_norms(weight, bias=None):
    """Group norm of every output filter of a conv weight (K, Cin, kh, kw)."""
    w64 = weight.astype(np.float64).reshape(weight.shape[0], -1)
    acc = np.square(w64).sum(axis=1)
    if bias is not None:
        acc = acc + np.square(bias.astype(np.float64))
    return np.sqrt(acc)


def layer_penalty(weight, bias, cfg):
    """Group-lasso sum for one conv layer, weighted when ``cfg.directed``."""
    norms = filter_norms(weight, bias)
    if cfg.directed:
        f = coeff_vector(len(norms), cfg.steepness, cfg.direction)
        return float((f * norms).sum())
    return float(norms.sum())


def l2_term(params):
    """Half sum of squares over every parameter tensor."""
    acc = 0.0
    for p in params.values():
        acc += float(np.square(p.data.astype(np.float64)).sum())
    return 0.5 * acc


def total_objective(data_loss, net, cfg):
    """data loss + lambda_l2 * (1/2 sum w^2) + lambda_g * sum of layer penalties.

    Layers exempt from the group lasso (the stem conv and the classifier) only
    contribute to the L2 term.
    """
    total = float(data_loss)
    if cfg.lambda_l2:
        total += cfg.lambda_l2 * l2_term(net.params)
    if cfg.lambda_g:
        total += cfg.lambda_g * sum(
            layer_penalty(net.weight(l).data, net.bias(l).data, cfg)
            for l in net.penalized_convs()
        )
    return total


def penalty_gradient(net, cfg, grads=None, lambda_g_scale=1.0):
    """Accumulate the penalty's gradient contribution into ``grads``.

    For each weight w in filter group (l, k) adds
    lambda_g * f(k) * w / max(norm, epsilon); the subgradient at the origin is
    zero. Bias terms belong to their filter's group. When ``cfg.l2`` is
    "coupled", lambda_l2 * w is added for every parameter as well (the default
    decoupled mode leaves L2 to the optimizer's weight decay).
    """
    if grads is None:
        grads = {name: np.zeros_like(p.data) for name, p in net.params.items()}
    lam_g = cfg.lambda_g * lambda_g_scale
    if lam_g:
        for l in net.penalized_convs():
            w = net.weight(l)
            b = net.bias(l)
            norms = filter_norms(w.data, b.data)
            if cfg.directed:
                f = coeff_vector(len(norms), cfg.steepness, cfg.direction)
            else:
                f = np.ones(len(norms), dtype=np.float64)
            # zero subgradient where the whole group vanished
            scale = np.where(norms > cfg.epsilon, lam_g * f / np.maximum(norms, cfg.epsilon), 0.0)
            grads[f"{l}.weight"] += (w.data.astype(np.float64)
                                     * scale[:, None, None, None]).astype(np.float32)
            grads[f"{l}.bias"] += (b.data.astype(np.float64) * scale).astype(np.float32)
    if cfg.l2 == "coupled" and cfg.lambda_l2:
        for name, p in net.params.items():
            grads[name] += np.float32(cfg.lambda_l2) * p.data
    return grads


def proximal_shrink(net, cfg, lr, lambda_g_scale=1.0):
    """Shrink each filter group's norm by lr*lambda_g*f(k), clamping at zero.

    Run after the SGD step when ``cfg.mode == "proximal"``; drives whole
    groups to exact zeros.
    """
    lam_g = cfg.lambda_g * lambda_g_scale
    if not lam_g:
        return
    for l in net.penalized_convs():
        w = net.weight(l)
        b = net.bias(l)
        norms = filter_norms(w.data, b.data)
        if cfg.directed:
            f = coeff_vector(len(norms), cfg.steepness, cfg.direction)
        else:
            f = np.ones(len(norms), dtype=np.float64)
        target = np.maximum(norms - lr * lam_g * f, 0.0)
        factor = np.where(norms > 0.0, target / np.maximum(norms, cfg.epsilon), 0.0)
        w.data = (w.data.astype(np.float64) * factor[:, None, None, None]).astype(np.float32)
        b.data = (b.data.astype(np.float64) * factor).astype(np.float32)
