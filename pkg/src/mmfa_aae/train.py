"""Alternating adversarial training.

Each iteration runs ``disc_steps`` discriminator updates with the feature
path frozen, then one joint update of backbone, encoder, decoder and identity
head on the weighted feature loss with the discriminator frozen.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses
from .data import Dataset
from .diffcore import NonFiniteError, Tensor, backward
from .mmd import KernelSpec, grouped_mmd
from .model import (
    ModelState,
    backbone,
    classify_identity,
    decode,
    discriminate,
    encode,
    save_checkpoint,
)

log = logging.getLogger(__name__)

FEATURE_GROUPS = ("E", "Q", "P", "C")
METRIC_FIELDS = ("epoch", "lr", "l_id", "l_tri", "l_rec", "l_mmd", "l_adv", "l_D", "total")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_tri: float = 1.0
    lambda_rec: float = 10.0
    lambda_mmd: float = 0.2
    lambda_adv: float = 0.5
    margin: float = 0.3
    bandwidths: tuple[float, ...] = (1.0, 5.0, 10.0)
    kernel_combination: str = "mean"
    mmd_form: str = "squared"
    use_triplet: bool = True
    use_aae: bool = True
    use_mmd: bool = True
    epochs: int = 60
    batch_size: int = 32
    p_identities: int = 8
    k_per_identity: int = 4
    base_lr: float = 3.5e-4
    warmup_epochs: int = 10
    decay_epochs: tuple[int, ...] = (40, 70)
    decay_factor: float = 0.1
    disc_steps: int = 5
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.p_identities * self.k_per_identity != self.batch_size:
            raise ValueError(
                f"train.p_identities * train.k_per_identity ({self.p_identities}*{self.k_per_identity})"
                f" must equal train.batch_size ({self.batch_size})"
            )
        if self.k_per_identity < 2:
            raise ValueError("train.k_per_identity must be >= 2 for triplet mining")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ValueError("train.decay_epochs must be sorted")
        if self.epochs < 1 or self.disc_steps < 0 or self.warmup_epochs < 0:
            raise ValueError("train.epochs must be >= 1; disc_steps and warmup_epochs >= 0")
        if self.base_lr <= 0 or not 0 < self.decay_factor <= 1:
            raise ValueError("train.base_lr must be > 0 and train.decay_factor in (0, 1]")
        if self.margin < 0:
            raise ValueError("train.margin must be >= 0")
        if self.mmd_form not in ("squared", "root"):
            raise ValueError("train.mmd_form must be 'squared' or 'root'")
        self.kernel()

    def kernel(self) -> KernelSpec:
        return KernelSpec(self.bandwidths, self.kernel_combination)

    @property
    def weights(self) -> dict[str, float]:
        """Effective loss weights after the component toggles."""
        return {
            "l_tri": self.lambda_tri if self.use_triplet else 0.0,
            "l_rec": self.lambda_rec if self.use_aae else 0.0,
            "l_mmd": self.lambda_mmd if self.use_mmd else 0.0,
            "l_adv": self.lambda_adv if self.use_aae else 0.0,
        }

    @property
    def adversarial(self) -> bool:
        return self.weights["l_adv"] != 0.0 and self.disc_steps > 0


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    """Linear warm-up to ``base_lr`` then a staircase decay."""
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    lr = config.base_lr
    if config.warmup_epochs and epoch <= config.warmup_epochs:
        lr = config.base_lr * epoch / config.warmup_epochs
    for boundary in config.decay_epochs:
        if epoch >= boundary:
            lr *= config.decay_factor
    return lr


class Adam:
    """Adam over a fixed set of named parameters, updating arrays in place."""

    def __init__(self, names, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.names = tuple(names)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        # step counts are per parameter so a skipped parameter's bias correction stays right
        for name in self.names:
            g = grads.get(name)
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            t = self.t[name] = self.t.get(name, 0) + 1
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            params[name] -= lr * (m / (1.0 - self.beta1**t)) / (np.sqrt(v / (1.0 - self.beta2**t)) + self.eps)


@dataclass
class LabeledBatch:
    x: np.ndarray
    identities: np.ndarray
    domains: np.ndarray
    index: np.ndarray


@dataclass
class TrainingSet:
    """Training domains with labels re-indexed to ``0..C-1`` and ``0..K-1``."""

    x: np.ndarray
    identities: np.ndarray
    domains: np.ndarray
    members: dict[int, np.ndarray] = field(default_factory=dict)
    by_domain: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "TrainingSet":
        part = dataset.train_part()
        _, ids = np.unique(part.identities, return_inverse=True)
        _, doms = np.unique(part.domains, return_inverse=True)
        ts = cls(part.features, ids.astype(np.int64), doms.astype(np.int64))
        for i in np.unique(ids):
            ts.members[int(i)] = np.flatnonzero(ids == i)
        for d in np.unique(doms):
            ts.by_domain[int(d)] = np.unique(ids[doms == d])
        return ts

    @property
    def num_identities(self) -> int:
        return len(self.members)

    @property
    def num_domains(self) -> int:
        return len(self.by_domain)

    def __len__(self) -> int:
        return len(self.x)


def sample_pk_batch(data: TrainingSet, p: int, k_per: int, rng: np.random.Generator) -> LabeledBatch:
    """``p`` distinct identities with ``k_per`` samples each.

    Identity slots are spread over domains as evenly as possible so every
    batch covers every source domain when ``p`` allows it.  Identities with
    fewer than ``k_per`` samples are drawn with replacement.
    """
    if data.num_identities < p:
        raise ValueError(f"need at least {p} identities, dataset has {data.num_identities}")
    doms = sorted(data.by_domain)
    quota = {d: p // len(doms) for d in doms}
    for d in rng.permutation(doms)[: p % len(doms)]:
        quota[int(d)] += 1
    # a domain short of identities hands its surplus slots to the others
    spare = 0
    for d in doms:
        excess = quota[d] - len(data.by_domain[d])
        if excess > 0:
            quota[d] -= excess
            spare += excess
    for d in doms:
        room = len(data.by_domain[d]) - quota[d]
        take = min(room, spare)
        quota[d] += take
        spare -= take
    chosen = []
    for d in doms:
        chosen.extend(rng.choice(data.by_domain[d], size=quota[d], replace=False).tolist())
    index = []
    for ident in chosen:
        members = data.members[int(ident)]
        index.extend(rng.choice(members, size=k_per, replace=len(members) < k_per).tolist())
    index = np.array(index, dtype=np.intp)
    return LabeledBatch(data.x[index], data.identities[index], data.domains[index], index)


def _require_domains(batch: LabeledBatch) -> None:
    if len(np.unique(batch.domains)) < 2:
        raise TrainingError("batch spans a single domain; discriminator and MMD terms are undefined")


def _grads_for(loss: Tensor, tensors: dict[str, Tensor], names) -> dict[str, np.ndarray]:
    raw = backward(loss)
    return {k: raw[id(tensors[k])] for k in names if id(tensors[k]) in raw}


def discriminator_step(state: ModelState, batch: LabeledBatch, optimizer: Adam, lr: float) -> float:
    """One update of D on frozen codes; returns the discrimination loss."""
    _require_domains(batch)
    tensors = state.tensors(trainable_groups=("D",))
    # train-mode batch statistics, but running stats are left untouched
    features, _ = backbone(state, batch.x, tensors, mode="train")
    codes = encode(state, features, tensors)
    loss = losses.domain_discrimination_loss(discriminate(state, codes, tensors), batch.domains)
    optimizer.step(state.params.params, _grads_for(loss, tensors, optimizer.names), lr)
    return loss.item()


def feature_losses(state: ModelState, batch: LabeledBatch, config: TrainConfig, tensors):
    """Forward pass and every enabled loss component (disabled ones are ``None``)."""
    w = config.weights
    features, stats = backbone(state, batch.x, tensors, mode="train")
    codes = encode(state, features, tensors)
    parts = {"l_id": losses.identity_loss(classify_identity(state, codes, tensors), batch.identities)}
    parts["l_tri"] = (
        losses.triplet_loss_batch_hard(codes, batch.identities, config.margin) if w["l_tri"] else None
    )
    parts["l_rec"] = losses.reconstruction_loss(features, decode(state, codes, tensors)) if w["l_rec"] else None
    parts["l_mmd"] = grouped_mmd(codes, batch.domains, config.kernel(), config.mmd_form) if w["l_mmd"] else None
    parts["l_adv"] = (
        losses.adversarial_loss(discriminate(state, codes, tensors), batch.domains) if w["l_adv"] else None
    )
    return parts, stats


def feature_step(state: ModelState, batch: LabeledBatch, optimizer: Adam, lr: float, config: TrainConfig) -> dict:
    """Joint update of E, Q, P and the identity head; D stays frozen."""
    w = config.weights
    if w["l_mmd"] or w["l_adv"]:
        _require_domains(batch)
    tensors = state.tensors(trainable_groups=FEATURE_GROUPS)
    try:
        parts, stats = feature_losses(state, batch, config, tensors)
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite value in feature step: {exc}") from exc
    for name, value in parts.items():
        if value is not None and not np.isfinite(value.data).all():
            raise TrainingError(f"loss component {name} is non-finite")
    total = losses.combined_feature_loss(
        parts["l_id"], parts["l_tri"], parts["l_rec"], parts["l_mmd"], parts["l_adv"],
        (w["l_tri"], w["l_rec"], w["l_mmd"], w["l_adv"]),
    )
    optimizer.step(state.params.params, _grads_for(total, tensors, optimizer.names), lr)
    state.params.commit_stats(stats)
    out = {k: (v.item() if v is not None else 0.0) for k, v in parts.items()}
    out["total"] = total.item()
    return out


def feature_optimizer(state: ModelState) -> Adam:
    return Adam(k for k in state.params.params if k.split(".", 1)[0] in FEATURE_GROUPS)


def discriminator_optimizer(state: ModelState) -> Adam:
    return Adam(k for k in state.params.params if k.startswith("D."))


def run_training(
    state: ModelState,
    dataset: Dataset,
    config: TrainConfig,
    on_step: Callable[[dict], None] | None = None,
    track_hashes: bool = False,
    checkpoint_dir=None,
) -> tuple[ModelState, list[dict]]:
    """Train ``state`` in place on the training domains of ``dataset``.

    Returns the state and one metrics row per epoch.  ``on_step`` receives an
    event dict per optimizer step; with ``track_hashes`` each event also
    carries parameter hashes of the frozen groups taken before and after.
    """
    config.validate()
    data = TrainingSet.from_dataset(dataset)
    if data.num_domains < 2:
        raise TrainingError("training needs at least 2 source domains")
    if data.num_identities != state.config.identities or data.num_domains != state.config.domains:
        raise TrainingError(
            f"model expects {state.config.identities} identities / {state.config.domains} domains, "
            f"data has {data.num_identities} / {data.num_domains}"
        )
    rng = np.random.default_rng(config.seed)
    opt_d, opt_f = discriminator_optimizer(state), feature_optimizer(state)
    iterations = max(1, len(data) // config.batch_size)
    metrics = []
    for epoch in range(1, config.epochs + 1):
        lr = learning_rate_at(config, epoch)
        sums = dict.fromkeys(METRIC_FIELDS[2:], 0.0)
        d_losses = []
        for it in range(iterations):
            if config.adversarial:
                for _ in range(config.disc_steps):
                    batch = sample_pk_batch(data, config.p_identities, config.k_per_identity, rng)
                    before = state.group_hash(FEATURE_GROUPS) if track_hashes else None
                    loss_d = discriminator_step(state, batch, opt_d, lr)
                    d_losses.append(loss_d)
                    if on_step:
                        event = {"kind": "D", "epoch": epoch, "iteration": it, "loss": loss_d}
                        if track_hashes:
                            event["frozen_before"] = before
                            event["frozen_after"] = state.group_hash(FEATURE_GROUPS)
                        on_step(event)
            batch = sample_pk_batch(data, config.p_identities, config.k_per_identity, rng)
            before = state.group_hash(("D",)) if track_hashes else None
            try:
                parts = feature_step(state, batch, opt_f, lr, config)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, iteration {it}: {exc}") from exc
            for k, v in parts.items():
                sums[k] += v
            if on_step:
                event = {"kind": "F", "epoch": epoch, "iteration": it, **parts}
                if track_hashes:
                    event["frozen_before"] = before
                    event["frozen_after"] = state.group_hash(("D",))
                on_step(event)
        row = {"epoch": epoch, "lr": lr}
        row.update({k: v / iterations for k, v in sums.items() if k != "l_D"})
        row["l_D"] = float(np.mean(d_losses)) if d_losses else 0.0
        metrics.append({k: row[k] for k in METRIC_FIELDS})
        log.info("epoch %d lr %.3g total %.4f l_D %.4f", epoch, lr, row["total"], row["l_D"])
        if checkpoint_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(state, f"{checkpoint_dir}/checkpoint_epoch{epoch:03d}.ckpt")
    return state, metrics


def metrics_csv(metrics: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for row in metrics:
        writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])
    return buf.getvalue()
