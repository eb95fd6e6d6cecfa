"""Reptile meta-training over source-city tasks, then target fine-tuning.

The inner loop follows the two-phase recipe exactly: clone the parameters,
take ``update_step`` plain-SGD support steps at rate alpha, store the query
gradient evaluated after each step, and finally apply the summed stored
gradients to the original parameters at rate beta / update_step. The adapt
helper is generic over (module, loss_fn, batch) so the bookkeeping can be
verified on closed-form toy objectives.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import torch
from torch import nn

from .autoencoder import Standardizer
from .data import CityCorpus, forecast_arrays, supervised_starts
from .errors import ConfigError, DataError, TrainingDivergedError
from .forecaster import ForecastModel, forecast_loss
from .seeding import rng_from


@dataclass(frozen=True)
class MetaConfig:
    meta_epochs: int = 20
    meta_batch: int = 2  # tasks per epoch
    batch_size: int = 16
    alpha: float = 5e-4  # support-step learning rate (plain SGD)
    beta: float = 5e-4  # query-gradient application rate
    update_step: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("alpha and beta must be positive")
        if self.update_step < 1:
            raise ConfigError("update_step must be at least 1")
        if self.meta_epochs < 0 or self.meta_batch < 1 or self.batch_size < 1:
            raise ConfigError("meta-training sizes must be positive")


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("fine-tuning sizes must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be non-negative")


class TaskBatch(NamedTuple):
    inputs: torch.Tensor  # [B, N, P, T0, C], standardized
    hours: torch.Tensor  # [B, P]
    labels: torch.Tensor  # [B, N, T', C], standardized


@dataclass(frozen=True)
class Task:
    city_id: str
    support: TaskBatch
    query: TaskBatch
    support_steps: tuple[int, int]  # [start, end) raw-step range
    query_steps: tuple[int, int]


def _batch_from_starts(series, starts, scaler, T0, P, horizon) -> TaskBatch:
    inputs, hours, labels = forecast_arrays(series, list(starts), T0, P, horizon)
    return TaskBatch(
        inputs=torch.as_tensor(scaler.apply(inputs), dtype=torch.float32),
        hours=torch.as_tensor(hours),
        labels=torch.as_tensor(scaler.apply(labels), dtype=torch.float32),
    )


def sample_task(
    corpus: CityCorpus,
    scaler: Standardizer,
    rng: int | np.random.Generator,
    batch_size: int = 16,
    T0: int = 12,
    P: int = 24,
    horizon: int = 6,
) -> Task:
    """Support/query batches from disjoint time ranges of one random city."""
    rng = rng_from(rng)
    series = corpus.cities[int(rng.integers(len(corpus.cities)))]
    starts = supervised_starts(series, T0, P, horizon)
    span = T0 * P + horizon
    # Boundary b: support windows end at or before b, query windows begin at b.
    feasible = [
        k
        for k in range(len(starts))
        if sum(1 for s in starts if s + span <= starts[k]) >= batch_size
        and len(starts) - k >= batch_size
    ]
    if not feasible:
        raise DataError(
            f"city {series.city_id}: not enough windows for disjoint "
            f"support/query batches of {batch_size}"
        )
    boundary = starts[int(rng.choice(feasible))]
    left = [s for s in starts if s + span <= boundary]
    right = [s for s in starts if s >= boundary]
    support = sorted(rng.choice(left, size=batch_size, replace=False).tolist())
    query = sorted(rng.choice(right, size=batch_size, replace=False).tolist())
    return Task(
        city_id=series.city_id,
        support=_batch_from_starts(series, support, scaler, T0, P, horizon),
        query=_batch_from_starts(series, query, scaler, T0, P, horizon),
        support_steps=(support[0], support[-1] + span),
        query_steps=(query[0], query[-1] + span),
    )


LossFn = Callable[[nn.Module, object], torch.Tensor]


def forecast_batch_loss(model: nn.Module, batch: TaskBatch) -> torch.Tensor:
    return forecast_loss(model(batch.inputs, batch.hours), batch.labels)


def adapt_task(
    model: nn.Module,
    loss_fn: LossFn,
    support: object,
    query: object,
    alpha: float,
    update_step: int,
) -> list[dict[str, torch.Tensor]]:
    """Inner loop on a parameter clone; returns the stored query gradients.

    The caller's model is untouched; buffers (the bank) receive no gradient.
    """
    clone = copy.deepcopy(model)
    clone.train()
    named = [(n, p) for n, p in clone.named_parameters() if p.requires_grad]
    params = [p for _, p in named]
    stored: list[dict[str, torch.Tensor]] = []
    for step in range(update_step):
        loss = loss_fn(clone, support)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite support loss at inner step {step}")
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        with torch.no_grad():
            for p, g in zip(params, grads):
                if g is not None:
                    p.add_(g, alpha=-alpha)
        qloss = loss_fn(clone, query)
        if not torch.isfinite(qloss):
            raise TrainingDivergedError(f"non-finite query loss at inner step {step}")
        qgrads = torch.autograd.grad(qloss, params, allow_unused=True)
        snapshot = {}
        for (name, p), g in zip(named, qgrads):
            snapshot[name] = torch.zeros_like(p) if g is None else g.detach().clone()
        stored.append(snapshot)
    return stored


def apply_stored_gradients(
    model: nn.Module, stored: list[dict[str, torch.Tensor]], beta: float, update_step: int
) -> None:
    """Line-15 update: theta <- theta - beta/update_step * sum of stored grads."""
    with torch.no_grad():
        totals: dict[str, torch.Tensor] = {}
        for snapshot in stored:
            for name, g in snapshot.items():
                totals[name] = g if name not in totals else totals[name] + g
        params = dict(model.named_parameters())
        for name, total in totals.items():
            params[name].add_(total, alpha=-beta / update_step)


def reptile_meta_train(
    model: ForecastModel,
    corpus: CityCorpus,
    scaler: Standardizer,
    cfg: MetaConfig,
    loss_fn: LossFn = forecast_batch_loss,
) -> list[float]:
    """Meta-train in place; returns the mean query loss per epoch."""
    bank_before = model.bank.detach().clone()
    rng = rng_from(cfg.seed)
    fcfg = model.cfg
    history: list[float] = []
    for epoch in range(cfg.meta_epochs):
        tasks = [
            sample_task(corpus, scaler, rng, cfg.batch_size, fcfg.T0, fcfg.P, fcfg.horizon)
            for _ in range(cfg.meta_batch)
        ]
        epoch_losses = []
        all_stored = []
        for task in tasks:
            try:
                stored = adapt_task(
                    model, loss_fn, task.support, task.query, cfg.alpha, cfg.update_step
                )
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(
                    f"epoch {epoch}, city {task.city_id}: {exc}"
                ) from exc
            all_stored.append(stored)
            with torch.no_grad():
                epoch_losses.append(float(loss_fn(model, task.query)))
        for stored in all_stored:
            apply_stored_gradients(model, stored, cfg.beta, cfg.update_step)
        history.append(float(np.mean(epoch_losses)))
    if not torch.equal(model.bank, bank_before):
        raise TrainingDivergedError("pattern bank changed during meta-training")
    return history


def fine_tune(
    model: ForecastModel,
    target: CityCorpus,
    scaler: Standardizer,
    cfg: FinetuneConfig,
) -> list[float]:
    """AdamW mini-batch training on the few-shot target city; returns epoch losses."""
    if not target.cities:
        raise DataError("empty target corpus")
    bank_before = model.bank.detach().clone()
    series = target.cities[0]
    fcfg = model.cfg
    starts = supervised_starts(series, fcfg.T0, fcfg.P, fcfg.horizon)
    if not starts:
        raise DataError(f"target city {series.city_id} has no supervised windows")
    batch = _batch_from_starts(series, starts, scaler, fcfg.T0, fcfg.P, fcfg.horizon)
    opt = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )
    rng = rng_from(cfg.seed)
    n = batch.inputs.shape[0]
    history: list[float] = []
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(order[i : i + cfg.batch_size].copy())
            sub = TaskBatch(batch.inputs[idx], batch.hours[idx], batch.labels[idx])
            loss = forecast_loss(model(sub.inputs, sub.hours), sub.labels)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite fine-tuning loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            count += 1
        history.append(total / max(count, 1))
    model.eval()
    if not torch.equal(model.bank, bank_before):
        raise TrainingDivergedError("pattern bank changed during fine-tuning")
    return history
