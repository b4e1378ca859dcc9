"""Experiment driver: seeded repeated runs, method comparison, reports.

A suite regenerates (or re-splits) the data once per seed, runs every
configured method on that identical realization, and aggregates per-client
and pooled test MSE into mean(std) cells. Reports are deterministic: the CSV
carries full-precision values that parse back exactly, the markdown mirrors
the scenario x client x method grouping with the best mean per row bolded.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import (MultiModalDataset, SyntheticConfig, dataset_hash,
                   load_nir_csv, make_synthetic_dataset, partition_clients)
from .exceptions import ConfigError, ParseError
from .federated import FederatedMultiModalRegressor, RoundConfig, evaluate_mse
from .losses import LossWeights
from .reducers import REDUCER_KINDS, baseline_pipeline

METHOD_LABELS = {"pca": "PCA", "tsvd": "TSVD", "rp": "RP", "fdrmfl": "FDRMFL"}
KNOWN_METHODS = ("fdrmfl", *REDUCER_KINDS)


@dataclass(frozen=True)
class DatasetSpec:
    """What data a scenario runs on; synthetic link or NIR CSV + schema."""

    kind: str = "synthetic"               # "synthetic" | "nir"
    links: tuple[int, ...] = (2,)
    n_train: int = 2000
    n_test: int = 500
    noise_std: float = 0.0
    path: str | None = None
    spectrum_prefix: str | None = None
    spectrum_cols: tuple[str, ...] | None = None
    scalar_cols: tuple[str, ...] = ()
    targets: tuple[str, ...] = ()
    expected_rows: int | None = None
    expected_spectrum_len: int | None = None
    test_fraction: float = 0.25
    spectrum_as_vector: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    clients: int = 3
    partition: str = "uniform"
    rounds: int = 5
    local_epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 0.001
    latent_dim: int = 16
    fusion: str = "attention"
    bidirectional: bool = True
    loss_weights: LossWeights = field(default_factory=LossWeights)
    baseline_components: int | None = None   # default: latent_dim
    methods: tuple[str, ...] = ("fdrmfl", "pca", "tsvd", "rp")
    repeats: int = 10
    base_seed: int = 0

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("at least one method is required")
        for m in self.methods:
            if m not in KNOWN_METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {KNOWN_METHODS}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

    def scenarios(self) -> list[str]:
        if self.dataset.kind == "synthetic":
            return [f"link{l}" for l in self.dataset.links]
        return list(self.dataset.targets)

    def hyper_block(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "mi_weight": self.loss_weights.mi_weight,
            "align_weight": self.loss_weights.align_weight,
            "contrast_weight": self.loss_weights.contrast_weight,
            "temperature": self.loss_weights.temperature,
            "align_sigma": self.loss_weights.align_sigma,
            "history_size": self.loss_weights.history_size,
            "baseline_components": self.baseline_components or self.latent_dim,
            "rounds": self.rounds,
            "local_epochs": self.local_epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "clients": self.clients,
            "partition": self.partition,
            "fusion": self.fusion,
            "repeats": self.repeats,
            "base_seed": self.base_seed,
        }


def load_experiment_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as err:
        raise ParseError(f"{path}: {err}") from None
    return experiment_config_from_dict(raw)


def experiment_config_from_dict(raw: dict) -> ExperimentConfig:
    exp = raw.get("experiment", {})
    ds = raw.get("dataset", {})
    fed = raw.get("federation", {})
    model = raw.get("model", {})
    loss = raw.get("loss", {})
    baselines = raw.get("baselines", {})

    kind = ds.get("kind", "synthetic")
    if kind == "synthetic":
        links = ds.get("links", [ds.get("link", 2)])
        spec = DatasetSpec(kind="synthetic", links=tuple(int(l) for l in links),
                           n_train=int(ds.get("n_train", 2000)),
                           n_test=int(ds.get("n_test", 500)),
                           noise_std=float(ds.get("noise_std", 0.0)))
    elif kind == "nir":
        if "path" not in ds:
            raise ConfigError("nir dataset section needs a 'path'")
        scalar_cols = tuple(ds.get("scalar_cols", ()))
        spec = DatasetSpec(
            kind="nir", path=str(ds["path"]),
            spectrum_prefix=ds.get("spectrum_prefix"),
            spectrum_cols=tuple(ds["spectrum_cols"]) if "spectrum_cols" in ds else None,
            scalar_cols=scalar_cols,
            targets=tuple(ds.get("targets", scalar_cols)),
            expected_rows=ds.get("expected_rows"),
            expected_spectrum_len=ds.get("expected_spectrum_len"),
            test_fraction=float(ds.get("test_fraction", 0.25)),
            spectrum_as_vector=bool(ds.get("spectrum_as_vector", False)),
        )
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")

    weights = LossWeights(
        mi_weight=float(loss.get("mi_weight", 0.1)),
        align_weight=float(loss.get("align_weight", 0.1)),
        contrast_weight=float(loss.get("contrast_weight", 0.1)),
        temperature=float(loss.get("temperature", 0.5)),
        align_sigma=float(loss.get("align_sigma", 1.0)),
        history_size=int(loss.get("history_size", 2)),
    )
    return ExperimentConfig(
        name=str(exp.get("name", "experiment")),
        dataset=spec,
        clients=int(fed.get("clients", 3)),
        partition=str(fed.get("partition", "uniform")),
        rounds=int(fed.get("rounds", 5)),
        local_epochs=int(fed.get("local_epochs", 3)),
        batch_size=int(fed.get("batch_size", 32)),
        learning_rate=float(fed.get("learning_rate", 0.001)),
        latent_dim=int(model.get("latent_dim", 16)),
        fusion=str(model.get("fusion", "attention")),
        bidirectional=bool(model.get("bidirectional", True)),
        loss_weights=weights,
        baseline_components=baselines.get("n_components"),
        methods=tuple(exp.get("methods", ["fdrmfl", "pca", "tsvd", "rp"])),
        repeats=int(exp.get("repeats", 10)),
        base_seed=int(exp.get("base_seed", 0)),
    )


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def build_scenario_dataset(cfg: ExperimentConfig, scenario: str, seed: int) -> MultiModalDataset:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        link = int(scenario.removeprefix("link"))
        return make_synthetic_dataset(SyntheticConfig(
            n_train=ds.n_train, n_test=ds.n_test, link=link,
            noise_std=ds.noise_std, seed=seed))
    return load_nir_csv(
        ds.path, scalar_cols=ds.scalar_cols, target_col=scenario,
        spectrum_cols=ds.spectrum_cols, spectrum_prefix=ds.spectrum_prefix,
        expected_rows=ds.expected_rows, expected_spectrum_len=ds.expected_spectrum_len,
        test_fraction=ds.test_fraction, seed=seed,
        spectrum_as_vector=ds.spectrum_as_vector)


def run_single(cfg: ExperimentConfig, method: str, clients, seed: int) -> dict:
    """One (method, data realization) run; returns per-client + pooled MSE."""
    round_cfg = RoundConfig(rounds=cfg.rounds, local_epochs=cfg.local_epochs,
                            batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                            clients=cfg.clients, seed=seed)
    if method == "fdrmfl":
        w = cfg.loss_weights
        reg = FederatedMultiModalRegressor(
            rounds=cfg.rounds, local_epochs=cfg.local_epochs, batch_size=cfg.batch_size,
            learning_rate=cfg.learning_rate, latent_dim=cfg.latent_dim, fusion=cfg.fusion,
            bidirectional=cfg.bidirectional, mi_weight=w.mi_weight,
            align_weight=w.align_weight, contrast_weight=w.contrast_weight,
            temperature=w.temperature, align_sigma=w.align_sigma,
            history_size=w.history_size, seed=seed)
        reg.fit(clients)
        per_client = {c.client_id: evaluate_mse(reg.model_, c.test) for c in clients}
        pooled = evaluate_mse(reg.model_, [s for c in clients for s in c.test])
        return {"per_client": per_client, "pooled": pooled, "trace": reg.trace_}
    result = baseline_pipeline(clients, method, cfg.baseline_components or cfg.latent_dim,
                               round_cfg)
    return {"per_client": result["per_client"], "pooled": result["pooled"],
            "trace": result["trace"]}


@dataclass
class RunRecord:
    scenario: str
    seed: int
    method: str
    client: str            # "1".."K" or "pooled"
    mse: float
    data_hash: str


@dataclass
class ResultsTable:
    """Mean(std) cells keyed by (scenario, client, method)."""

    scenarios: list[str]
    clients: list[str]
    methods: list[str]
    cells: dict[tuple[str, str, str], tuple[float, float, int]]

    def cell(self, scenario: str, client: str, method: str):
        return self.cells[(scenario, client, method)]


def aggregate_runs(records: list[RunRecord], scenarios, clients, methods) -> ResultsTable:
    cells = {}
    for scenario in scenarios:
        for client in clients:
            for method in methods:
                values = [r.mse for r in records
                          if (r.scenario, r.client, r.method) == (scenario, client, method)]
                if not values:
                    raise ConfigError(f"no runs recorded for {(scenario, client, method)}")
                n = len(values)
                mean = float(np.mean(values))
                std = float(np.std(values, ddof=1)) if n > 1 else 0.0
                cells[(scenario, client, method)] = (mean, std, n)
    return ResultsTable(list(scenarios), list(clients), list(methods), cells)


def run_suite(cfg: ExperimentConfig, progress=None) -> tuple[ResultsTable, list[RunRecord]]:
    """Seeded repetition of every configured method on identical data."""
    say = progress if progress is not None else (lambda msg: None)
    records: list[RunRecord] = []
    client_keys = [str(i) for i in range(1, cfg.clients + 1)] + ["pooled"]
    for scenario in cfg.scenarios():
        for seed in range(cfg.base_seed, cfg.base_seed + cfg.repeats):
            dataset = build_scenario_dataset(cfg, scenario, seed)
            clients = partition_clients(dataset, cfg.clients, cfg.partition, seed)
            digest = dataset_hash(clients)
            for method in cfg.methods:
                t0 = time.perf_counter()
                result = run_single(cfg, method, clients, seed)
                wall = time.perf_counter() - t0
                say(f"[{scenario}] seed={seed} method={method} "
                    f"pooled_mse={result['pooled']:.4f} wall={wall:.1f}s")
                for cid, mse in result["per_client"].items():
                    records.append(RunRecord(scenario, seed, method, str(cid), mse, digest))
                records.append(RunRecord(scenario, seed, method, "pooled",
                                         result["pooled"], digest))
    table = aggregate_runs(records, cfg.scenarios(), client_keys, list(cfg.methods))
    return table, records


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def emit_results_csv(table: ResultsTable, path, hyper: dict | None = None) -> None:
    lines = []
    for key in sorted(hyper or {}):
        lines.append(f"# {key}={hyper[key]}")
    lines.append("scenario,client,method,mean_mse,std_mse,n_runs")
    for scenario in table.scenarios:
        for client in table.clients:
            for method in table.methods:
                mean, std, n = table.cell(scenario, client, method)
                lines.append(f"{scenario},{client},{method},{mean!r},{std!r},{n}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_results_csv(path) -> tuple[ResultsTable, dict]:
    hyper: dict = {}
    cells: dict = {}
    scenarios: list[str] = []
    clients: list[str] = []
    methods: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        rows = [line.rstrip("\n") for line in fh]
    body = []
    for line in rows:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            hyper[key.strip()] = value
        elif line:
            body.append(line)
    if not body or body[0] != "scenario,client,method,mean_mse,std_mse,n_runs":
        raise ParseError(f"{path}: missing results header row")
    for line in body[1:]:
        parts = line.split(",")
        if len(parts) != 6:
            raise ParseError(f"{path}: malformed row {line!r}")
        scenario, client, method = parts[0], parts[1], parts[2]
        cells[(scenario, client, method)] = (float(parts[3]), float(parts[4]), int(parts[5]))
        if scenario not in scenarios:
            scenarios.append(scenario)
        if client not in clients:
            clients.append(client)
        if method not in methods:
            methods.append(method)
    return ResultsTable(scenarios, clients, methods, cells), hyper


def _format_cell(mean: float, std: float) -> str:
    return f"{mean:.4f}({std:.4f})"


def emit_results_markdown(table: ResultsTable, path, hyper: dict | None = None) -> None:
    lines = ["# MSE comparison", ""]
    if hyper:
        lines.append("Configuration:")
        lines.append("")
        for key in sorted(hyper):
            lines.append(f"- `{key} = {hyper[key]}`")
        lines.append("")
    labels = [METHOD_LABELS.get(m, m.upper()) for m in table.methods]
    lines.append("| Scenario | Client | " + " | ".join(labels) + " |")
    lines.append("|" + "---|" * (2 + len(table.methods)))
    had_tie = False
    single_run = False
    for scenario in table.scenarios:
        for client in table.clients:
            stats = [table.cell(scenario, client, m) for m in table.methods]
            best = min(s[0] for s in stats)
            winners = [i for i, s in enumerate(stats) if s[0] == best]
            had_tie = had_tie or len(winners) > 1
            single_run = single_run or any(s[2] == 1 for s in stats)
            row = [scenario, client]
            for i, (mean, std, _) in enumerate(stats):
                cell = _format_cell(mean, std)
                row.append(f"**{cell}**" if i in winners else cell)
            lines.append("| " + " | ".join(row) + " |")
    lines.append("")
    lines.append("Best (lowest mean) per row in bold.")
    if had_tie:
        lines.append("Some rows tie on the mean; all tied methods are bolded.")
    if single_run:
        lines.append("Cells from a single run report std as 0.0000 (undefined for n=1).")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def emit_per_run_csv(records: list[RunRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("scenario,seed,method,client,mse,data_hash\n")
        for r in records:
            fh.write(f"{r.scenario},{r.seed},{r.method},{r.client},{r.mse!r},{r.data_hash}\n")
