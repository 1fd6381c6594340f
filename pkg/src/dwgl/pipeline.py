"""Train -> prune -> finetune orchestration.

A run executes ``rounds`` iterations of (penalized training, vote, structural
prune), then a penalty-free finetune, recording per-epoch history and
per-round reports. ``rounds = 0`` trains a baseline and stops. Everything is
seeded: identical seed and config reproduce history files bit-for-bit.

Output directory layout:
    resolved-config                     echoed configuration
    dataset.dwgl                        cached synthetic dataset (tensor container)
    history.csv                         epoch, split, loss, penalty, accuracy
    checkpoints/round-N.dwgl, final.dwgl
    reports/round-N.json, final.json
    masks/round-N.json                  {coupling group -> pruned indices}
    activations/round-N-<layer>.csv     index, norm (pre-prune)
    figures/round-N-<layer>.svg         activation scatters (optional)
    figures/history.svg
"""

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import pruning, report
from .config import parse_stages
from .data import holdout_split, load_cifar10, save_cache, synth_generate
from .errors import ConfigError, TrainingDiverged
from .network import LayerSpec, NetworkConfig, NetworkGraph, build, coupling_groups
from .regularizer import RegularizerConfig, layer_penalty, penalty_gradient, proximal_shrink
from .tensor import Tape, Tensor, backward, sgd_step

HISTORY_FIELDS = ["epoch", "split", "loss", "penalty", "accuracy"]


@dataclass
class Schedule:
    """Everything a run needs: counts, learning-rate plan, seeds, penalties."""

    rounds: int = 3
    epochs_train: int = 20
    epochs_finetune: int = 10
    lr: float = 0.05
    lr_decay: float = 0.1
    lr_decay_every: int = 15
    batch_size: int = 32
    seed: int = 42
    warmup_epochs: int = 2
    holdout: float = 0.1
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)
    threshold: str = "mean"
    strategy: str = "intersection"

    def __post_init__(self):
        if self.rounds < 0 or self.epochs_finetune < 0:
            raise ConfigError("rounds/finetune epochs must be >= 0", rounds=self.rounds,
                              epochs_finetune=self.epochs_finetune)
        for name in ("epochs_train", "batch_size", "lr_decay_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive", **{name: getattr(self, name)})
        if self.lr <= 0:
            raise ConfigError("lr must be positive", lr=self.lr)

    def lr_at(self, epoch):
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


def schedule_from_config(cfg, seed=None):
    reg = RegularizerConfig(
        lambda_l2=cfg["reg.lambda"],
        lambda_g=cfg["reg.lambda_g"],
        directed=cfg["reg.directed"],
        steepness=cfg["reg.steepness"],
        epsilon=cfg["reg.epsilon"],
        mode=cfg["reg.mode"],
        direction=cfg["reg.direction"],
        l2=cfg["reg.l2"],
    )
    return Schedule(
        rounds=cfg["run.rounds"],
        epochs_train=cfg["train.epochs"],
        epochs_finetune=cfg["train.finetune_epochs"],
        lr=cfg["train.lr"],
        lr_decay=cfg["train.lr_decay"],
        lr_decay_every=cfg["train.lr_decay_every"],
        batch_size=cfg["train.batch_size"],
        seed=cfg["run.seed"] if seed is None else seed,
        warmup_epochs=cfg["train.warmup_epochs"],
        holdout=cfg["train.holdout"],
        threshold=cfg["prune.threshold"],
        strategy=cfg["prune.strategy"],
    )


def make_dataset(cfg, seed):
    if cfg["data.kind"] == "synth":
        return synth_generate(cfg["data.classes"], cfg["data.per_class"],
                              size=cfg["data.size"], seed=seed, noise=cfg["data.noise"])
    if not cfg["data.dir"]:
        raise ConfigError("data.dir required for cifar10")
    return load_cifar10(cfg["data.dir"], split="train")


def make_network(cfg, ds, seed):
    stages = parse_stages(cfg["net.stages"]) if cfg["net.stages"] else None
    ncfg = NetworkConfig(preset=cfg["net.preset"], stages=stages,
                         input_shape=tuple(ds.images.shape[1:]), classes=ds.classes,
                         seed=seed)
    return build(ncfg)


def evaluate(net, images, labels, batch_size=64):
    """Deterministic full-set evaluation; returns (mean loss, accuracy)."""
    n = len(labels)
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        logits, loss = net.forward(Tensor(xb), labels=yb)
        loss_sum += loss.item() * len(yb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return loss_sum / n, correct / n


def _current_penalty(net, reg):
    if not reg.lambda_g:
        return 0.0
    return reg.lambda_g * sum(
        layer_penalty(net.weight(l).data, net.bias(l).data, reg)
        for l in net.penalized_convs()
    )


def train(net, ds, sched, epochs=None, penalized=True, phase_seed=0, start_epoch=0,
          sink=None):
    """SGD training loop; returns history rows and appends them to ``sink``.

    ``penalized`` switches the group-lasso term (subgradient or proximal,
    per the schedule's regularizer config); the plain L2 term always applies.
    Raises TrainingDiverged naming the epoch and first non-finite layer if the
    loss leaves the reals.
    """
    epochs = sched.epochs_train if epochs is None else epochs
    reg = sched.reg
    train_idx, val_idx = holdout_split(ds, sched.holdout, sched.seed)
    rng = np.random.default_rng([sched.seed, phase_seed, 0x5eed])
    decoupled_wd = reg.lambda_l2 if reg.l2 == "decoupled" else 0.0
    rows = []
    for e in range(epochs):
        lr = sched.lr_at(e)
        if penalized and sched.warmup_epochs > 0:
            g_scale = min(1.0, (e + 1) / sched.warmup_epochs)
        else:
            g_scale = 1.0
        order = rng.permutation(len(train_idx))
        loss_acc = 0.0
        correct = 0
        for start in range(0, len(order), sched.batch_size):
            idx = train_idx[order[start:start + sched.batch_size]]
            xb, yb = ds.images[idx], ds.labels[idx]
            tape = Tape()
            logits, loss = net.forward(Tensor(xb), labels=yb, tape=tape)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDiverged("loss is not finite",
                                       epoch=start_epoch + e,
                                       layer=_first_nonfinite(net, xb))
            grads = backward(tape, loss, net.params)
            if penalized and reg.mode == "subgradient":
                penalty_gradient(net, reg, grads, lambda_g_scale=g_scale)
            elif reg.l2 == "coupled" and reg.lambda_l2:
                penalty_gradient(net, RegularizerConfig(lambda_l2=reg.lambda_l2,
                                                        lambda_g=0.0, l2="coupled"), grads)
            sgd_step(net.params, grads, lr, weight_decay=decoupled_wd)
            if penalized and reg.mode == "proximal":
                proximal_shrink(net, reg, lr, lambda_g_scale=g_scale)
            loss_acc += loss_val * len(yb)
            correct += int((logits.argmax(axis=1) == yb).sum())
        penalty = _current_penalty(net, reg) if penalized else 0.0
        epoch_no = start_epoch + e
        rows.append({"epoch": epoch_no, "split": "train",
                     "loss": loss_acc / len(train_idx), "penalty": penalty,
                     "accuracy": correct / len(train_idx)})
        val_loss, val_acc = evaluate(net, ds.images[val_idx], ds.labels[val_idx],
                                     sched.batch_size)
        rows.append({"epoch": epoch_no, "split": "val", "loss": val_loss,
                     "penalty": penalty, "accuracy": val_acc})
        if sink is not None:
            sink.extend(rows[-2:])
    return rows


def _first_nonfinite(net, xb):
    """Name the first layer whose parameters or activations left the reals."""
    for name, p in net.params.items():
        if not np.isfinite(p.data).all():
            return name.rsplit(".", 1)[0]
    _, _, vals = net.forward(Tensor(xb), return_values=True)
    for l in net.layers:
        if l.id in vals and not np.isfinite(vals[l.id].data).all():
            return l.id
    return "loss"


def prune_round(net, sched, activations=None):
    """Vote, resolve, rewrite. Returns (pruned net, report, masks, extras).

    The stem conv is exempt from the group lasso and is therefore never
    pruned; all other convs vote. ``extras`` carries the counterfactual
    one-shot rates under both strategies for the same votes.
    """
    if activations is None:
        activations = pruning.filter_activations(net)
    groups = coupling_groups(net)
    skip = {net.stem_id()}
    prunable = {c: v for c, v in activations.items() if c not in skip}
    votes = pruning.propose_votes(prunable, sched.threshold)
    masks = pruning.resolve_all(net, votes, sched.strategy, activations=prunable,
                                groups=groups, skip=skip)
    rates = {}
    for strat in ("intersection", "union"):
        ms = pruning.resolve_all(net, votes, strat, activations=prunable,
                                 groups=groups, skip=skip)
        rates[strat] = pruning.compression_report(net, pruning.apply_mask(net, ms)).rate
    pruned = pruning.apply_mask(net, masks)
    rep = pruning.compression_report(net, pruned)
    extras = {"rate_intersection": rates["intersection"], "rate_union": rates["union"],
              "votes": {v.conv_id: sorted(v.remove) for v in votes},
              "activations": activations}
    return pruned, rep, masks, extras


@dataclass
class ExperimentResult:
    outdir: str
    rounds: list                 # one dict per prune round
    final_accuracy: float
    baseline_accuracy: float     # held-out accuracy before any pruning
    total_rate: float            # parameter rate, original vs final
    history: list


class _HistoryWriter:
    """Append-only CSV sink for history rows."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._w = csv.DictWriter(self._fh, fieldnames=HISTORY_FIELDS)
        self._w.writeheader()
        self.rows = []

    def extend(self, rows):
        for r in rows:
            self._w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k]
                              for k in HISTORY_FIELDS})
            self.rows.append(dict(r))
        self._fh.flush()

    def close(self):
        self._fh.close()


def _emit_round_artifacts(outdir, rnd, net_before, rep, masks, extras, figures):
    acts = extras["activations"]
    for conv_id, norms in acts.items():
        report.write_activation_csv(
            os.path.join(outdir, "activations", f"round-{rnd}-{conv_id}.csv"), norms)
        if figures:
            report.activation_figure(
                os.path.join(outdir, "figures", f"round-{rnd}-{conv_id}.svg"), norms,
                title=f"round {rnd} {conv_id}")
    pruning.save_masks(os.path.join(outdir, "masks", f"round-{rnd}.json"), masks)


def run_experiment(cfg, outdir, sched=None):
    """Execute the full schedule under ``outdir``; see module docstring for layout.

    With ``run.compare`` enabled, runs a directed arm and a plain group-lasso
    arm with identical seeds and data ordering under ``outdir/dwgl`` and
    ``outdir/plain`` and returns {"dwgl": result, "plain": result}.
    """
    from .config import write_resolved

    os.makedirs(outdir, exist_ok=True)
    write_resolved(cfg, outdir)
    if cfg["run.compare"]:
        results = {}
        for arm, directed in (("dwgl", True), ("plain", False)):
            arm_cfg = dict(cfg)
            arm_cfg["reg.directed"] = directed
            arm_cfg["run.compare"] = False
            results[arm] = run_experiment(arm_cfg, os.path.join(outdir, arm), sched)
        return results

    for sub in ("checkpoints", "reports", "masks", "activations"):
        os.makedirs(os.path.join(outdir, sub), exist_ok=True)
    figures = cfg["report.figures"]
    if figures:
        os.makedirs(os.path.join(outdir, "figures"), exist_ok=True)

    if sched is None:
        sched = schedule_from_config(cfg)
    ds = make_dataset(cfg, sched.seed)
    if ds.meta.get("kind") == "synth":
        save_cache(os.path.join(outdir, "dataset.dwgl"), ds)
    net = make_network(cfg, ds, sched.seed)
    _, val_idx = holdout_split(ds, sched.holdout, sched.seed)

    from . import checkpoint
    history = _HistoryWriter(os.path.join(outdir, "history.csv"))
    rounds_out = []
    baseline_acc = None
    try:
        epoch = 0
        if sched.rounds == 0:
            train(net, ds, sched, penalized=True, phase_seed=0, start_epoch=epoch,
                  sink=history)
            epoch += sched.epochs_train
            checkpoint.save_tensors(os.path.join(outdir, "checkpoints", "round-0.dwgl"),
                                    net.state())
        for rnd in range(1, sched.rounds + 1):
            train(net, ds, sched, penalized=True, phase_seed=rnd, start_epoch=epoch,
                  sink=history)
            epoch += sched.epochs_train
            _, acc_pre = evaluate(net, ds.images[val_idx], ds.labels[val_idx],
                                  sched.batch_size)
            if baseline_acc is None:
                baseline_acc = acc_pre
            before = net
            net, rep, masks, extras = prune_round(net, sched)
            _, acc_post = evaluate(net, ds.images[val_idx], ds.labels[val_idx],
                                   sched.batch_size)
            _emit_round_artifacts(outdir, rnd, before, rep, masks, extras, figures)
            stats = report.layer_stats(extras["activations"])
            round_info = {
                "round": rnd,
                "accuracy_pre_prune": acc_pre,
                "accuracy_post_prune": acc_post,
                "report": rep.to_dict(),
                "rate_intersection": extras["rate_intersection"],
                "rate_union": extras["rate_union"],
                "masks": {m.group_id: sorted(m.remove) for m in masks},
                "votes": extras["votes"],
                "stats": stats,
            }
            with open(os.path.join(outdir, "reports", f"round-{rnd}.json"), "w") as fh:
                json.dump(round_info, fh, indent=2, sort_keys=True)
                fh.write("\n")
            checkpoint.save_tensors(
                os.path.join(outdir, "checkpoints", f"round-{rnd}.dwgl"), net.state())
            rounds_out.append(round_info)
        if sched.rounds > 0 and sched.epochs_finetune > 0:
            train(net, ds, sched, epochs=sched.epochs_finetune, penalized=False,
                  phase_seed=sched.rounds + 1, start_epoch=epoch, sink=history)
            epoch += sched.epochs_finetune
    finally:
        history.close()

    _, final_acc = evaluate(net, ds.images[val_idx], ds.labels[val_idx], sched.batch_size)
    checkpoint.save_tensors(os.path.join(outdir, "checkpoints", "final.dwgl"), net.state())
    original = make_network(cfg, ds, sched.seed)
    total_rate = pruning.compression_report(original, net).rate if sched.rounds else 0.0
    result = ExperimentResult(outdir=outdir, rounds=rounds_out, final_accuracy=final_acc,
                              baseline_accuracy=baseline_acc if baseline_acc is not None
                              else final_acc,
                              total_rate=total_rate, history=history.rows)
    with open(os.path.join(outdir, "reports", "final.json"), "w") as fh:
        json.dump({
            "final_accuracy": result.final_accuracy,
            "baseline_accuracy": result.baseline_accuracy,
            "total_compression_rate": result.total_rate,
            "rounds": [r["round"] for r in rounds_out],
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if figures:
        report.history_figure(os.path.join(outdir, "figures", "history.svg"), history.rows)
    return result


def rebuild_from_checkpoint(cfg, tensors, ds):
    """Reconstruct a (possibly pruned) graph: preset topology, checkpoint widths."""
    base = make_network(cfg, ds, seed=0)
    layers = []
    params = {}
    for l in base.layers:
        spec = LayerSpec(l.id, l.kind, list(l.inputs), filters=l.filters, ksize=l.ksize,
                         stride=l.stride, pad=l.pad, out_features=l.out_features)
        if l.kind == "conv":
            w = tensors.get(f"{l.id}.weight")
            if w is None:
                raise ConfigError("checkpoint missing conv weights", layer=l.id)
            spec.filters = w.shape[0]
            params[f"{l.id}.weight"] = Tensor(w, name=f"{l.id}.weight")
            params[f"{l.id}.bias"] = Tensor(tensors[f"{l.id}.bias"], name=f"{l.id}.bias")
        elif l.kind == "linear":
            params[f"{l.id}.weight"] = Tensor(tensors[f"{l.id}.weight"],
                                              name=f"{l.id}.weight")
            params[f"{l.id}.bias"] = Tensor(tensors[f"{l.id}.bias"], name=f"{l.id}.bias")
        layers.append(spec)
    return NetworkGraph(layers, params, base.input_shape, base.classes)
