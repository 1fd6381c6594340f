"""Shared finite-difference gradient-check harness.

Each check builds a scalar loss twice: once through the engine (float32
tensors, tape, analytic backward) and once through the float64 references in
``oracle``. Central differences of the reference are compared per-coordinate
against the engine's analytic gradients at 1e-3 relative / 1e-5 absolute.

ReLU kinks make finite differences invalid where a perturbation flips an
activation; primitive relu inputs are nudged away from zero, and the composed
graph check skips coordinates whose relu mask changes between the two
evaluations (they must stay rare).
"""

import numpy as np

from dwgl.tensor import (Tape, Tensor, avgpool_global, backward, conv2d, eltwise_add,
                         linear, relu, scale, softmax_xent, square, sum_all)

import oracle

H = 1e-3
REL = 1e-3
FLOOR = 1e-5


def _sum_sq(x):
    return 0.5 * float(np.square(np.asarray(x, dtype=np.float64)).sum())


def _engine_sum_sq(out, tape):
    return scale(sum_all(square(out, tape=tape), tape=tape), 0.5, tape=tape)


def check_conv2d(seed):
    rng = np.random.default_rng([seed, 1])
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    kh = int(rng.integers(1, 4))
    h = int(rng.integers(max(3, kh), 6))
    x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 3)), h, h)).astype(np.float32)
    w = rng.normal(size=(int(rng.integers(1, 4)), x.shape[1], kh, kh)).astype(np.float32)
    b = rng.normal(size=w.shape[0]).astype(np.float32)
    xt, wt, bt = Tensor(x), Tensor(w), Tensor(b)
    tape = Tape()
    loss = _engine_sum_sq(conv2d(xt, wt, bt, stride=stride, pad=pad, tape=tape), tape)
    grads = backward(tape, loss, {"x": xt, "w": wt, "b": bt})
    fd = oracle.finite_difference(
        lambda a, c, d: _sum_sq(oracle.ref_conv2d(a, c, d, stride=stride, pad=pad)),
        [x.astype(np.float64), w.astype(np.float64), b.astype(np.float64)], h=H)
    for name, g in zip(("x", "w", "b"), fd):
        oracle.assert_grads_close(grads[name], g, REL, FLOOR, label=f"conv2d/{name}")


def check_eltwise_add(seed):
    rng = np.random.default_rng([seed, 2])
    shape = tuple(rng.integers(1, 5, size=int(rng.integers(1, 4))))
    a = rng.normal(size=shape).astype(np.float32)
    b = rng.normal(size=shape).astype(np.float32)
    at, bt = Tensor(a), Tensor(b)
    tape = Tape()
    loss = _engine_sum_sq(eltwise_add(at, bt, tape=tape), tape)
    grads = backward(tape, loss, {"a": at, "b": bt})
    fd = oracle.finite_difference(
        lambda u, v: _sum_sq(oracle.ref_eltwise(u, v)),
        [a.astype(np.float64), b.astype(np.float64)], h=H)
    oracle.assert_grads_close(grads["a"], fd[0], REL, FLOOR, label="eltwise/a")
    oracle.assert_grads_close(grads["b"], fd[1], REL, FLOOR, label="eltwise/b")


def check_relu(seed):
    rng = np.random.default_rng([seed, 3])
    x = rng.normal(size=(3, 4)).astype(np.float32)
    x += (0.05 * np.sign(x)).astype(np.float32)  # keep coordinates off the kink
    xt = Tensor(x)
    tape = Tape()
    loss = _engine_sum_sq(relu(xt, tape=tape), tape)
    grads = backward(tape, loss, {"x": xt})
    fd = oracle.finite_difference(lambda u: _sum_sq(oracle.ref_relu(u)),
                                  [x.astype(np.float64)], h=H)
    oracle.assert_grads_close(grads["x"], fd[0], REL, FLOOR, label="relu")


def check_avgpool_global(seed):
    rng = np.random.default_rng([seed, 4])
    x = rng.normal(size=(2, int(rng.integers(1, 4)), 3, 4)).astype(np.float32)
    xt = Tensor(x)
    tape = Tape()
    loss = _engine_sum_sq(avgpool_global(xt, tape=tape), tape)
    grads = backward(tape, loss, {"x": xt})
    fd = oracle.finite_difference(lambda u: _sum_sq(oracle.ref_avgpool_global(u)),
                                  [x.astype(np.float64)], h=H)
    oracle.assert_grads_close(grads["x"], fd[0], REL, FLOOR, label="avgpool")


def check_linear(seed):
    rng = np.random.default_rng([seed, 5])
    bdim, c, m = (int(rng.integers(1, 4)) for _ in range(3))
    x = rng.normal(size=(bdim, c)).astype(np.float32)
    w = rng.normal(size=(c, m)).astype(np.float32)
    b = rng.normal(size=m).astype(np.float32)
    xt, wt, bt = Tensor(x), Tensor(w), Tensor(b)
    tape = Tape()
    loss = _engine_sum_sq(linear(xt, wt, bt, tape=tape), tape)
    grads = backward(tape, loss, {"x": xt, "w": wt, "b": bt})
    fd = oracle.finite_difference(
        lambda u, v, z: _sum_sq(oracle.ref_linear(u, v, z)),
        [x.astype(np.float64), w.astype(np.float64), b.astype(np.float64)], h=H)
    for name, g in zip(("x", "w", "b"), fd):
        oracle.assert_grads_close(grads[name], g, REL, FLOOR, label=f"linear/{name}")


def check_softmax_xent(seed):
    rng = np.random.default_rng([seed, 6])
    bdim, m = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    logits = rng.normal(size=(bdim, m)).astype(np.float32)
    labels = rng.integers(0, m, size=bdim)
    lt = Tensor(logits)
    tape = Tape()
    loss = softmax_xent(lt, labels, tape=tape)
    grads = backward(tape, loss, {"logits": lt})
    fd = oracle.finite_difference(lambda u: oracle.ref_softmax_xent(u, labels),
                                  [logits.astype(np.float64)], h=H)
    oracle.assert_grads_close(grads["logits"], fd[0], REL, FLOOR, label="softmax_xent")


def check_reductions(seed):
    rng = np.random.default_rng([seed, 7])
    x = rng.normal(size=(2, 3)).astype(np.float32)
    for build, ref in [
        (lambda xt, tp: sum_all(xt, tape=tp), lambda u: float(u.sum())),
        (lambda xt, tp: sum_all(square(xt, tape=tp), tape=tp),
         lambda u: float(np.square(u).sum())),
        (lambda xt, tp: scale(sum_all(xt, tape=tp), 0.25, tape=tp),
         lambda u: 0.25 * float(u.sum())),
    ]:
        xt = Tensor(x)
        tape = Tape()
        loss = build(xt, tape)
        grads = backward(tape, loss, {"x": xt})
        fd = oracle.finite_difference(ref, [x.astype(np.float64)], h=H)
        oracle.assert_grads_close(grads["x"], fd[0], REL, FLOOR, label="reduction")


PRIMITIVE_CHECKS = {
    "conv2d": check_conv2d,
    "eltwise_add": check_eltwise_add,
    "relu": check_relu,
    "avgpool_global": check_avgpool_global,
    "linear": check_linear,
    "softmax_xent": check_softmax_xent,
    "sum/square/scale": check_reductions,
}


def composed_graph_check(seed, h=1e-3):
    """conv-relu-eltwise-linear classifier vs finite differences.

    Returns the fraction of coordinates skipped because the perturbation
    crossed a relu kink (finite differences are invalid there).
    """
    rng = np.random.default_rng([seed, 8])
    x = rng.normal(size=(2, 2, 6, 6)).astype(np.float32)
    w1 = (rng.normal(size=(3, 2, 3, 3)) * 0.5).astype(np.float32)
    b1 = (rng.normal(size=3) * 0.1).astype(np.float32)
    w2 = (rng.normal(size=(3, 3, 3, 3)) * 0.5).astype(np.float32)
    b2 = (rng.normal(size=3) * 0.1).astype(np.float32)
    ws = (rng.normal(size=(3, 2, 1, 1)) * 0.5).astype(np.float32)
    bs = (rng.normal(size=3) * 0.1).astype(np.float32)
    wf = (rng.normal(size=(3, 4)) * 0.5).astype(np.float32)
    bf = (rng.normal(size=4) * 0.1).astype(np.float32)
    labels = rng.integers(0, 4, size=2)

    names = ["x", "w1", "b1", "w2", "b2", "ws", "bs", "wf", "bf"]
    arrays = [x, w1, b1, w2, b2, ws, bs, wf, bf]

    tensors = {n: Tensor(a) for n, a in zip(names, arrays)}
    tape = Tape()
    h1 = relu(conv2d(tensors["x"], tensors["w1"], tensors["b1"], pad=1, tape=tape), tape=tape)
    h2 = conv2d(h1, tensors["w2"], tensors["b2"], pad=1, tape=tape)
    sc = conv2d(tensors["x"], tensors["ws"], tensors["bs"], tape=tape)
    merged = relu(eltwise_add(h2, sc, tape=tape), tape=tape)
    pooled = avgpool_global(merged, tape=tape)
    loss = softmax_xent(linear(pooled, tensors["wf"], tensors["bf"], tape=tape), labels,
                        tape=tape)
    grads = backward(tape, loss, {n: t for n, t in tensors.items()})

    def ref_loss_and_masks(vals):
        v = {n: a.astype(np.float64) for n, a in zip(names, vals)}
        pre1 = oracle.ref_conv2d(v["x"], v["w1"], v["b1"], pad=1)
        r1 = oracle.ref_relu(pre1)
        pre2 = oracle.ref_conv2d(r1, v["w2"], v["b2"], pad=1)
        prem = pre2 + oracle.ref_conv2d(v["x"], v["ws"], v["bs"])
        rm = oracle.ref_relu(prem)
        logits = oracle.ref_linear(oracle.ref_avgpool_global(rm), v["wf"], v["bf"])
        masks = np.concatenate([(pre1 > 0).ravel(), (prem > 0).ravel()])
        return oracle.ref_softmax_xent(logits, labels), masks

    skipped = 0
    total = 0
    for ai, name in enumerate(names):
        a64 = arrays[ai].astype(np.float64)
        vals = [arr.astype(np.float64) for arr in arrays]
        fd = np.zeros_like(a64)
        valid = np.ones(a64.size, dtype=bool)
        flat = vals[ai].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, mu = ref_loss_and_masks(vals)
            flat[i] = orig - h
            dn, md = ref_loss_and_masks(vals)
            flat[i] = orig
            if not np.array_equal(mu, md):
                valid[i] = False
                skipped += 1
            else:
                fd.reshape(-1)[i] = (up - dn) / (2.0 * h)
            total += 1
        oracle.assert_grads_close(grads[name].reshape(-1)[valid],
                                  fd.reshape(-1)[valid], REL, FLOOR,
                                  label=f"composed/{name}")
    return skipped / total
