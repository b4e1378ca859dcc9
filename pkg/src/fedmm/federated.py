"""Federated averaging loop: broadcast, local training, weighted aggregation.

One round broadcasts the global parameters to every client, runs E local
epochs of minibatch Adam on each client's shard, then averages the returned
parameter vectors weighted by local sample counts. After aggregation the new
global model is pushed into every client's representation history, which is
what the contrastive term anchors against in later rounds.

Clients are processed serially in client-id order, but every random choice a
client makes comes from its own (seed, client, round)-derived stream, so any
parallel schedule would produce identical results.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .data import (TAG_CLIENT, TAG_MODEL_INIT, ClientDataset, ModalSample,
                   rng_stream, stack_samples)
from .exceptions import ConfigError, ContractError
from .losses import BatchForward, LossWeights, draw_negative_targets, total_loss
from .model import GlobalModel, default_arch
from .optim import Adam


@dataclass(frozen=True)
class RoundConfig:
    """Protocol knobs of a federated run."""

    rounds: int = 5
    local_epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 0.001
    clients: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0 or self.local_epochs < 0:
            raise ConfigError("rounds and local epochs must be non-negative")
        if self.batch_size < 1 or self.clients < 1:
            raise ConfigError("batch size and client count must be positive")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning rate must be positive")


@dataclass
class AggregationWeights:
    """Per-client sample counts and the normalized averaging weights."""

    counts: list[int]
    normalized: np.ndarray = field(init=False)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.float64)
        if np.any(counts <= 0):
            raise ConfigError("every client needs a non-empty training shard")
        self.normalized = counts / counts.sum()


class RepresentationHistory:
    """Newest-first FIFO of past global models.

    The newest snapshot provides the positive anchor, the remaining ones the
    negatives, so capacity is history_size + 1. Empty until the first
    aggregation has happened.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("history capacity must be >= 1")
        self.capacity = capacity
        self.snapshots: list = []

    def push(self, model) -> None:
        self.snapshots.insert(0, model.clone())
        del self.snapshots[self.capacity:]

    def __len__(self) -> int:
        return len(self.snapshots)


@dataclass
class ClientState:
    """Everything one simulated client owns."""

    client_id: int
    dataset: ClientDataset
    history: RepresentationHistory
    local_model: object = None
    optimizer: Adam | None = None
    rng: np.random.Generator | None = None
    _stacked_train: tuple | None = None

    def stacked_train(self):
        if self._stacked_train is None:
            self._stacked_train = stack_samples(self.dataset.train)
        return self._stacked_train


def broadcast(global_model, clients: list[ClientState], learning_rate: float) -> None:
    """Give every client an independent copy of the global parameters and a
    fresh optimizer (optimizer moments are not carried across rounds)."""
    flat = global_model.get_flat()
    for client in clients:
        client.local_model = global_model.clone()
        if client.local_model.param_count() != flat.size:
            raise ContractError("client/global parameter counts diverged")
        client.optimizer = Adam(client.local_model.named_params(), learning_rate=learning_rate)


def compute_anchor_representations(client: ClientState, batch: dict[str, np.ndarray]):
    """Forward the batch through the stored past global models (no graph).

    Returns (previous-round representations, list of older representations);
    (None, []) when no history exists yet, which tells the caller to skip the
    contrastive term.
    """
    if len(client.history) == 0:
        return None, []
    prev = client.history.snapshots[0].fused_batch(batch)
    older = [snap.fused_batch(batch) for snap in client.history.snapshots[1:]]
    return prev, older


def _grad_norm(named_params) -> float:
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def local_update(client: ClientState, round_idx: int, cfg: RoundConfig,
                 weights: LossWeights, step_log: list | None = None):
    """Run E local epochs of minibatch Adam on the client's shard.

    The final short minibatch of each epoch is kept. Returns the updated
    local model (also left on the client).
    """
    if not client.dataset.train:
        raise ConfigError(f"client {client.client_id} has no training data")
    model = client.local_model
    batch_all, targets_all = client.stacked_train()
    n = targets_all.size
    # anchor models are frozen this round, so their representations of the
    # whole shard can be computed once and sliced per minibatch
    prev_all, history_all = None, []
    if weights.contrast_weight > 0.0 and len(client.history) > 0:
        prev_all, history_all = compute_anchor_representations(client, batch_all)
    step = 0
    for _ in range(cfg.local_epochs):
        order = client.rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = {k: v[idx] for k, v in batch_all.items()}
            targets = targets_all[idx]
            feats, fused, preds = model.forward_batch(batch)
            fwd = BatchForward(predictions=preds, targets=targets,
                               modality_features=feats, fused=fused)
            if weights.mi_weight > 0.0:
                fwd.neg_targets = draw_negative_targets(targets, client.rng)
            if prev_all is not None:
                fwd.prev_fused = prev_all[idx]
                fwd.history = [h[idx] for h in history_all]
            loss, breakdown = total_loss(fwd, weights)
            ad.backward(loss)
            grad_norm = _grad_norm(model.named_params())
            client.optimizer.step()
            if step_log is not None:
                step_log.append({"round": round_idx, "client": client.client_id,
                                 "step": step, "grad_norm": grad_norm, **breakdown})
            step += 1
    return model


def aggregate(models: list, agg: AggregationWeights):
    """Sample-count-weighted parameter average, summed in client-id order."""
    if len(models) != len(agg.counts):
        raise ContractError(f"{len(models)} updates vs {len(agg.counts)} weights")
    flats = [m.get_flat() for m in models]
    count = flats[0].size
    for flat in flats[1:]:
        if flat.size != count:
            raise ContractError("parameter counts differ across client updates")
    mixed = np.zeros(count)
    for w, flat in zip(agg.normalized, flats):
        mixed += w * flat
    merged = models[0].clone()
    merged.set_flat(mixed)
    return merged


def evaluate_mse(model, samples: list[ModalSample]) -> float:
    """Test MSE of the model on a sample list (standardized target units)."""
    batch, targets = stack_samples(samples)
    return _mse_stacked(model, batch, targets)


def _mse_stacked(model, batch: dict[str, np.ndarray], targets: np.ndarray) -> float:
    preds = model.predict_batch(batch)
    return float(np.mean((targets - preds) ** 2))


def run_training(
    clients_data: list[ClientDataset],
    cfg: RoundConfig,
    weights: LossWeights,
    arch=None,
    model=None,
    step_log_path=None,
    save_rounds_dir=None,
):
    """Full federated run. Returns (final global model, per-round trace).

    The trace is a list of round records carrying per-client and pooled test
    MSE, per-client mean loss terms, parameter drift, and wall time; it is
    what the metrics CSV is written from.
    """
    clients_data = sorted(clients_data, key=lambda c: c.client_id)
    if cfg.clients != len(clients_data):
        raise ConfigError(f"config says {cfg.clients} clients, got {len(clients_data)} datasets")
    if model is None:
        if arch is None:
            shapes = {name: arr.shape for name, arr
                      in clients_data[0].train[0].modalities.items()}
            arch = default_arch(shapes)
        model = GlobalModel.build(arch, rng_stream(cfg.seed, TAG_MODEL_INIT))

    agg = AggregationWeights([len(c.train) for c in clients_data])
    states = [ClientState(client_id=c.client_id, dataset=c,
                          history=RepresentationHistory(weights.history_size + 1))
              for c in clients_data]
    test_stacked = {c.client_id: stack_samples(c.test) for c in clients_data}
    pooled_stacked = stack_samples([s for c in clients_data for s in c.test])

    trace = []
    log_fh = open(step_log_path, "w", encoding="utf-8") if step_log_path else None
    try:
        for round_idx in range(cfg.rounds):
            round_start = time.perf_counter()
            broadcast(model, states, cfg.learning_rate)
            base_flat = model.get_flat()
            updates, round_clients = [], {}
            for state in states:
                state.rng = rng_stream(cfg.seed, TAG_CLIENT, state.client_id, round_idx)
                steps: list = []
                t0 = time.perf_counter()
                updated = local_update(state, round_idx, cfg, weights, steps)
                wall_ms = (time.perf_counter() - t0) * 1e3
                updates.append(updated)
                if log_fh is not None:
                    for row in steps:
                        log_fh.write(json.dumps(row, sort_keys=True) + "\n")
                means = {k: float(np.mean([s[k] for s in steps])) if steps else 0.0
                         for k in ("pred", "mi", "kl", "fcl", "total")}
                drift = float(np.linalg.norm(updated.get_flat() - base_flat))
                round_clients[state.client_id] = {"losses": means, "drift": drift,
                                                  "wall_ms": wall_ms}
            model = aggregate(updates, agg)
            for state in states:
                state.history.push(model)
            for state in states:
                round_clients[state.client_id]["mse"] = _mse_stacked(
                    model, *test_stacked[state.client_id])
            pooled = _mse_stacked(model, *pooled_stacked)
            trace.append({"round": round_idx, "clients": round_clients,
                          "pooled_mse": pooled,
                          "wall_ms": (time.perf_counter() - round_start) * 1e3})
            if save_rounds_dir is not None:
                model.save(f"{save_rounds_dir}/model_round{round_idx:03d}.bin")
    finally:
        if log_fh is not None:
            log_fh.close()
    return model, trace


def write_metrics_csv(trace: list[dict], path) -> None:
    """Long-format per-round metrics; client_id 0 is the pooled test row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "client_id", "split", "mse", "loss_pred",
                         "loss_mi", "loss_kl", "loss_fcl", "wall_ms"])
        for rec in trace:
            for cid in sorted(rec["clients"]):
                c = rec["clients"][cid]
                writer.writerow([rec["round"], cid, "test", repr(c["mse"]),
                                 repr(c["losses"]["pred"]), repr(c["losses"]["mi"]),
                                 repr(c["losses"]["kl"]), repr(c["losses"]["fcl"]),
                                 repr(c["wall_ms"])])
            writer.writerow([rec["round"], 0, "test", repr(rec["pooled_mse"]),
                             "", "", "", "", repr(rec["wall_ms"])])


class FederatedMultiModalRegressor(BaseEstimator):
    """Estimator-style wrapper around the federated trainer.

    ``fit`` takes a list of per-client datasets (the federation is part of
    the training protocol, so the input is already partitioned); ``predict``
    scores plain sample lists with the final global model. Hyperparameters
    follow scikit-learn conventions and round-trip through get_params.
    """

    def __init__(self, rounds=5, local_epochs=3, batch_size=32, learning_rate=0.001,
                 latent_dim=16, fusion="attention", bidirectional=True,
                 mi_weight=0.1, align_weight=0.1, contrast_weight=0.1,
                 temperature=0.5, align_sigma=1.0, history_size=2, seed=0):
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.latent_dim = latent_dim
        self.fusion = fusion
        self.bidirectional = bidirectional
        self.mi_weight = mi_weight
        self.align_weight = align_weight
        self.contrast_weight = contrast_weight
        self.temperature = temperature
        self.align_sigma = align_sigma
        self.history_size = history_size
        self.seed = seed

    def _round_config(self, n_clients: int) -> RoundConfig:
        return RoundConfig(rounds=self.rounds, local_epochs=self.local_epochs,
                           batch_size=self.batch_size, learning_rate=self.learning_rate,
                           clients=n_clients, seed=self.seed)

    def _loss_weights(self) -> LossWeights:
        return LossWeights(mi_weight=self.mi_weight, align_weight=self.align_weight,
                           contrast_weight=self.contrast_weight, temperature=self.temperature,
                           align_sigma=self.align_sigma, history_size=self.history_size)

    def fit(self, clients: list[ClientDataset], step_log_path=None, save_rounds_dir=None):
        if not clients:
            raise ConfigError("need at least one client dataset")
        shapes = {name: arr.shape for name, arr in clients[0].train[0].modalities.items()}
        arch = default_arch(shapes, latent_dim=self.latent_dim, fusion=self.fusion,
                            bidirectional=self.bidirectional)
        self.model_, self.trace_ = run_training(
            clients, self._round_config(len(clients)), self._loss_weights(),
            arch=arch, step_log_path=step_log_path, save_rounds_dir=save_rounds_dir)
        return self

    def predict(self, samples: list[ModalSample]) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise ContractError("predict called before fit")
        batch, _ = stack_samples(samples)
        return self.model_.predict_batch(batch)

    def mse(self, samples: list[ModalSample]) -> float:
        if not hasattr(self, "model_"):
            raise ContractError("mse called before fit")
        return evaluate_mse(self.model_, samples)
