"""Batch construction, the combined classification/matching loss, Adam and
the training loop."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import LabeledSample, identities, stack_tensors
from .errors import (ConstraintError, ContractError, DataError, DegenerateEmbeddingError,
                     DimensionError, ParameterError)
from .model import ModelParams, ModelSpec, apply_freeze, build_model, forward

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    theta: float = 0.3
    lam: float = 0.001
    lr: float = 5e-5
    batch_p: int = 4
    batch_k: int = 2
    epochs: int = 20
    patience: int = 5
    seed: int = 0
    freeze: tuple[str, ...] = ()
    penalty_scope: str = "output"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "freeze", tuple(self.freeze))
        object.__setattr__(self, "betas", tuple(self.betas))
        if not 0 <= self.theta <= 1:
            raise ParameterError(f"theta must be in [0, 1], got {self.theta}")
        if self.lam < 0:
            raise ParameterError("lambda must be >= 0")
        if not self.lr > 0:
            raise ParameterError("learning rate must be > 0")
        if self.batch_p < 2 or self.batch_k < 2:
            raise ParameterError("batch_p and batch_k must both be >= 2")
        if self.epochs < 0 or self.patience < 1:
            raise ParameterError("epochs must be >= 0 and patience >= 1")
        if self.penalty_scope not in ("output", "all"):
            raise ParameterError("penalty_scope must be 'output' or 'all'")

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["lambda"] = doc.pop("lam")
        doc["freeze"] = list(self.freeze)
        doc["betas"] = list(self.betas)
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "TrainConfig":
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ParameterError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class Batch:
    indices: list[int]
    inputs: np.ndarray
    labels: np.ndarray
    ids: list[str]


def _pk_schedule(ids: Sequence[str], p: int, k: int, rng: np.random.Generator) -> list[list[int]]:
    by_id: dict[str, list[int]] = OrderedDict()
    for i, ident in enumerate(ids):
        by_id.setdefault(ident, []).append(i)
    chunks: dict[str, list[list[int]]] = {}
    for ident, members in by_id.items():
        order = [members[j] for j in rng.permutation(len(members))]
        chunks[ident] = [order[c:c + k] for c in range(0, len(order) - k + 1, k)]
    rank = {ident: r for r, ident in enumerate(rng.permutation(list(by_id)))}
    batches = []
    while True:
        ready = [i for i in chunks if chunks[i]]
        if len(ready) < p:
            break
        # identities with most remaining chunks first: yields the maximum batch count
        ready.sort(key=lambda i: (-len(chunks[i]), rank[i]))
        batch = []
        for ident in ready[:p]:
            batch.extend(chunks[ident].pop())
        batches.append(batch)
    return [batches[j] for j in rng.permutation(len(batches))]


def make_batches(dataset: Sequence[LabeledSample], cfg: TrainConfig, epoch: int = 0,
                 classes: Sequence[str] | None = None) -> list[Batch]:
    """P x K batches: ``batch_p`` identities with ``batch_k`` samples each.

    Every batch therefore holds same-identity and different-identity pairs.
    No sample is used twice within one call; leftovers that cannot fill a
    chunk of K are skipped for this epoch.
    """
    ids = [s.identity for s in dataset]
    counts: dict[str, int] = {}
    for i in ids:
        counts[i] = counts.get(i, 0) + 1
    eligible = sum(1 for c in counts.values() if c >= cfg.batch_k)
    if eligible < cfg.batch_p:
        raise DataError(f"need {cfg.batch_p} identities with >= {cfg.batch_k} samples for one batch, "
                        f"found {eligible}")
    classes = list(classes) if classes is not None else identities(dataset)
    label_of = {c: i for i, c in enumerate(classes)}
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, epoch, 7])
    out = []
    for idx in _pk_schedule(ids, cfg.batch_p, cfg.batch_k, rng):
        members = [dataset[i] for i in idx]
        out.append(Batch(idx, stack_tensors(members),
                         np.array([label_of[s.identity] for s in members], dtype=np.intp),
                         [s.identity for s in members]))
    return out


# --- loss terms -------------------------------------------------------------

def cross_entropy(probs, labels) -> ad.Tensor:
    """Mean negative log-probability of the true class; probabilities floored at 1e-12."""
    probs = ad.as_tensor(probs)
    labels = np.asarray(labels, dtype=np.intp)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise DimensionError(f"probabilities {probs.shape} and labels {labels.shape} do not conform")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ParameterError(f"label out of range [0, {probs.shape[1]})")
    if np.any(np.abs(probs.data.sum(axis=1) - 1.0) > 1e-9):
        raise ContractError("probability rows must sum to 1")
    picked = ad.log(ad.pick(probs, labels), floor=PROB_FLOOR)
    return ad.mul(ad.tmean(picked), -1.0)


def _penalty_tensors(params, leaves, scope):
    if isinstance(params, ModelParams):
        names = [params.output_weight_name()] if scope == "output" else \
            [n for n in params.trainable_names() if n.endswith(".weight")]
        source = leaves if leaves is not None else params.tensors
        return [source[n] for n in names]
    # a bare weight tensor or array
    return [params]


def l2_penalty(params, leaves: Mapping[str, ad.Tensor] | None = None, scope: str = "output") -> ad.Tensor:
    """Euclidean (not squared) norm of the output-layer weights.

    ``scope="all"`` takes the norm over every trainable weight matrix instead.
    """
    tensors = _penalty_tensors(params, leaves, scope)
    if len(tensors) == 1:
        return ad.l2norm(tensors[0])
    flat = ad.concat([ad.reshape(t, (-1,)) for t in tensors], axis=0)
    return ad.l2norm(flat)


def _pair_masks(ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(ids)
    same = ids[:, None] == ids[None, :]
    upper = np.triu(np.ones(same.shape, dtype=bool), k=1)
    return same & upper, ~same & upper


def mg_batch(embeddings, ids: Sequence[str]) -> ad.Tensor:
    """Mean cosine similarity of same-identity pairs minus that of
    different-identity pairs, over all unordered pairs in the batch."""
    emb = ad.as_tensor(embeddings)
    if emb.ndim != 2 or emb.shape[0] != len(ids):
        raise DimensionError(f"embeddings {emb.shape} do not match {len(ids)} ids")
    same, diff = _pair_masks(ids)
    if not same.any() or not diff.any():
        raise ConstraintError("batch needs at least one same-identity and one different-identity pair")
    sq = ad.tsum(emb * emb, axis=1, keepdims=True)
    if np.any(sq.data == 0):
        raise DegenerateEmbeddingError("zero-norm embedding in batch")
    unit = emb / ad.sqrt(sq)
    sims = unit @ ad.transpose(unit)
    mean_same = ad.tsum(sims * (same / same.sum()))
    mean_diff = ad.tsum(sims * (diff / diff.sum()))
    return mean_same - mean_diff


def classification_loss(logits, labels, params, cfg: TrainConfig, leaves=None) -> ad.Tensor:
    """Cross-entropy of the softmaxed logits plus the weighted L2 penalty."""
    ce = cross_entropy(ad.softmax(logits, axis=-1), labels)
    return ce + cfg.lam * l2_penalty(params, leaves, cfg.penalty_scope)


def _loss_terms(logits, labels, embeddings, ids, params, cfg, leaves=None):
    if cfg.theta == 1:
        return classification_loss(logits, labels, params, cfg, leaves), None
    ce = cross_entropy(ad.softmax(logits, axis=-1), labels)
    mg = mg_batch(embeddings, ids)
    penalty = l2_penalty(params, leaves, cfg.penalty_scope)
    loss = cfg.theta * ce + (1.0 - cfg.theta) * (1.0 - mg) + cfg.lam * penalty
    return loss, mg


def multitask_loss(logits, labels, embeddings, ids, params, cfg: TrainConfig, leaves=None) -> ad.Tensor:
    """``theta*CE + (1-theta)*(1-MG) + lambda*||w||``.

    At ``theta == 1`` the matching term is skipped entirely and the value is
    exactly :func:`classification_loss`, so no pair structure is required.
    """
    return _loss_terms(logits, labels, embeddings, ids, params, cfg, leaves)[0]


# --- optimiser ----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update of every trainable tensor.

    Returns new parameters (untouched tensors are shared, not copied) and the
    advanced state.
    """
    trainable = params.trainable_names()
    frozen_given = [n for n in grads if not params.is_trainable(n)]
    if frozen_given:
        raise ContractError(f"gradients supplied for frozen parameters: {frozen_given}")
    missing = [n for n in trainable if n not in grads]
    if missing:
        raise ContractError(f"missing gradients for trainable parameters: {missing}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    tensors = OrderedDict(params.tensors)
    for name in trainable:
        g = np.asarray(grads[name], dtype=np.float64)
        p = tensors[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        tensors[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return ModelParams(params.spec, tensors, params.frozen), state


# --- training loop ------------------------------------------------------------

@dataclass
class TrainReport:
    loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    batch_mg: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    wall_time: float = 0.0
    classes: list[str] = field(default_factory=list)

    CSV_HEADER = ("epoch", "loss", "train_acc", "val_acc", "batch_mg_mean")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for e in range(len(self.loss)):
            w.writerow([e + 1, f"{self.loss[e]:.10g}", f"{self.train_acc[e]:.10g}",
                        f"{self.val_acc[e]:.10g}", f"{self.batch_mg[e]:.10g}"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"epochs_run": len(self.loss), "stop_epoch": self.stop_epoch,
                "best_epoch": self.best_epoch,
                "best_val_acc": max(self.val_acc) if self.val_acc else None,
                "wall_time_s": round(self.wall_time, 3)}


def _step_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed & 0xFFFFFFFF, epoch, step, 11]).generate_state(1)[0])


def _validate(params: ModelParams, samples: Sequence[LabeledSample], label_of: Mapping[str, int],
              theta: float = 1.0, chunk: int = 64) -> tuple[float, float]:
    """Inference-mode accuracy and the unregularized validation objective.

    The objective is the mean cross-entropy, blended with ``1 - MG`` over the
    whole validation set when ``theta < 1`` and the set holds at least one
    same-identity and one different-identity pair.
    """
    correct, nll, embs = 0, 0.0, []
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        labels = np.array([label_of[s.identity] for s in part])
        out = forward(params, stack_tensors(part), training=False)
        correct += int(np.sum(np.argmax(out.logits.data, axis=1) == labels))
        nll += cross_entropy(ad.softmax(out.logits), labels).item() * len(part)
        embs.append(out.embedding.data)
    objective = nll / len(samples)
    if theta < 1:
        try:
            mg = mg_batch(np.concatenate(embs), [s.identity for s in samples]).item()
            objective = theta * objective + (1.0 - theta) * (1.0 - mg)
        except (ConstraintError, DegenerateEmbeddingError):
            pass
    return correct / len(samples), objective


def train_step(params: ModelParams, batch: Batch, cfg: TrainConfig, state: AdamState, seed: int):
    """Forward, backward and one Adam update on a single batch.

    Returns ``(params, state, loss, train_correct, mg)``; ``mg`` is the batch
    matching goodness (computed for reporting even when theta is 1).
    """
    trainable = set(params.trainable_names())
    leaves = OrderedDict((n, ad.Tensor(v, requires_grad=n in trainable, name=n))
                         for n, v in params.tensors.items())
    with ad.Tape() as tape:
        out = forward(params, batch.inputs, training=True, seed=seed, leaves=leaves)
        loss, mg = _loss_terms(out.logits, batch.labels, out.embedding, batch.ids, params, cfg, leaves)
    sources = [leaves[n] for n in params.tensors if n in trainable]
    grads = tape.gradient(loss, sources) if sources else {}
    named = {t.name: g for t, g in grads.items()}
    params, state = adam_step(params, named, state, cfg.lr, cfg.betas, cfg.eps)
    if mg is None:
        try:
            mg_value = mg_batch(out.embedding.data, batch.ids).item()
        except (ConstraintError, DegenerateEmbeddingError):
            mg_value = float("nan")
    else:
        mg_value = mg.item()
    correct = int(np.sum(np.argmax(out.logits.data, axis=1) == batch.labels))
    return params, state, loss.item(), correct, mg_value


def train(dataset: Sequence[LabeledSample], val_set: Sequence[LabeledSample], spec: ModelSpec,
          cfg: TrainConfig, progress=None) -> tuple[ModelParams, TrainReport]:
    """Train with early stopping on validation accuracy.

    An epoch improves on the best so far when its validation accuracy is
    higher, or equal with a lower validation objective (cross-entropy, blended
    with the matching term as in training when the validation set has pairs);
    once accuracy saturates this keeps training while that objective falls.
    The class count is taken from the training identities. The returned
    parameters are those of the best validation epoch (the initial parameters
    when ``epochs == 0``).
    """
    if not dataset:
        raise DataError("training set is empty")
    if not val_set:
        raise DataError("validation set is empty")
    classes = identities(dataset)
    stray = sorted(set(identities(val_set)) - set(classes))
    if stray:
        raise DataError(f"validation identities not present in training data: {stray}")
    if spec.num_classes != len(classes):
        spec = replace(spec, num_classes=len(classes))
    label_of = {c: i for i, c in enumerate(classes)}
    params = apply_freeze(build_model(spec, cfg.seed), cfg.freeze)
    report = TrainReport(classes=classes)
    state = AdamState()
    best = params
    best_key = (-1.0, 0.0)
    stale = 0
    started = time.perf_counter()
    for epoch in range(cfg.epochs):
        batches = make_batches(dataset, cfg, epoch, classes)
        losses, mgs, correct, seen = [], [], 0, 0
        for step, batch in enumerate(batches):
            params, state, loss, ok, mg = train_step(params, batch, cfg, state,
                                                     _step_seed(cfg.seed, epoch, step))
            losses.append(loss)
            mgs.append(mg)
            correct += ok
            seen += len(batch.indices)
        val_acc, val_loss = _validate(params, val_set, label_of, cfg.theta)
        report.loss.append(float(np.mean(losses)))
        report.train_acc.append(correct / seen)
        report.val_acc.append(val_acc)
        report.batch_mg.append(float(np.mean(mgs)))
        report.val_loss.append(val_loss)
        report.stop_epoch = epoch + 1
        if progress is not None:
            progress(epoch + 1, report)
        log.info("epoch %d loss %.4f train %.3f val %.3f mg %.4f", epoch + 1, report.loss[-1],
                 report.train_acc[-1], val_acc, report.batch_mg[-1])
        key = (val_acc, -val_loss)
        if key > best_key:
            best_key, best, stale = key, params, 0
            report.best_epoch = epoch + 1
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    report.wall_time = time.perf_counter() - started
    return best, report


def config_json(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_json(), indent=2, sort_keys=True)
