"""Dataset construction: synthetic tri-modal generation, NIR CSV ingestion,
target standardization, and client partitioning.

Every random draw comes from a stream derived as ``rng_stream(seed, tag, ...)``
so that regeneration with the same seed is bit-identical and independent of
call order elsewhere in the program.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigError, DomainError, ParseError, ValidationError

# stream tags; distinct first entries keep purposes statistically independent
TAG_MODALITIES = 101
TAG_NOISE = 102
TAG_PARTITION = 103
TAG_SPLIT = 104
TAG_CLIENT = 105
TAG_MODEL_INIT = 106
TAG_REDUCER = 107

STRIDE = 10

SYNTHETIC_SHAPES = {"image": (3, 32, 32), "text": (10, 50), "vector": (32,)}


def rng_stream(*keys: int) -> np.random.Generator:
    """Deterministic generator keyed by a tuple of integers."""
    return np.random.default_rng(list(int(k) for k in keys))


# ---------------------------------------------------------------------------
# core containers
# ---------------------------------------------------------------------------


@dataclass
class ModalSample:
    """One observation: named modality arrays plus a scalar target."""

    modalities: dict[str, np.ndarray]
    target: float


@dataclass
class TargetScaler:
    """Affine map to zero-mean unit-variance units, fit on training targets."""

    mean: float
    std: float

    @classmethod
    def fit(cls, values: np.ndarray) -> "TargetScaler":
        values = np.asarray(values, dtype=np.float64)
        std = float(values.std())
        if std == 0.0:
            std = 1.0
        return cls(mean=float(values.mean()), std=std)

    def standardize(self, values):
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def unstandardize(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


@dataclass
class MultiModalDataset:
    """A train/test split with its target scaler and provenance metadata."""

    train: list[ModalSample]
    test: list[ModalSample]
    target_scaler: TargetScaler
    meta: dict = field(default_factory=dict)

    def modality_shapes(self) -> dict[str, tuple[int, ...]]:
        probe = self.train[0] if self.train else self.test[0]
        return {name: tuple(arr.shape) for name, arr in probe.modalities.items()}


@dataclass
class ClientDataset:
    """One client's shard; ``weight`` is its share of the global train count."""

    client_id: int
    train: list[ModalSample]
    test: list[ModalSample]
    weight: float


@dataclass(frozen=True)
class SyntheticConfig:
    n_train: int = 2000
    n_test: int = 500
    link: int = 2
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("sample counts must be positive")
        if self.link not in (1, 2, 3):
            raise ConfigError(f"link must be 1, 2 or 3, got {self.link}")
        if self.noise_std < 0.0:
            raise ConfigError("noise_std must be non-negative")


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def gen_modalities(cfg: SyntheticConfig) -> tuple[list[dict], list[dict]]:
    """Draw raw modality arrays, i.i.d. standard normal entries.

    Returns (train, test) lists of name->array dicts; targets are attached
    separately so the link function can be swapped without redrawing.
    """
    rng = rng_stream(cfg.seed, TAG_MODALITIES)
    out = []
    for count in (cfg.n_train, cfg.n_test):
        arrays = {name: rng.standard_normal((count, *shape))
                  for name, shape in SYNTHETIC_SHAPES.items()}
        out.append([{name: arrays[name][i] for name in SYNTHETIC_SHAPES} for i in range(count)])
    return out[0], out[1]


def stride_sum(values: np.ndarray, stride: int = STRIDE) -> float:
    """Sum of every ``stride``-th entry of the row-major flattening.

    The selected positions are 0, stride, 2*stride, ... of the 0-based flat
    array (the same element set as 1, 1+stride, ... in 1-based indexing).
    """
    return float(np.asarray(values, dtype=np.float64).reshape(-1)[::stride].sum())


def stride_stats(modalities: dict[str, np.ndarray]) -> tuple[float, float, float]:
    """The three per-modality scalar statistics (image, text, vector order)."""
    return (stride_sum(modalities["image"]),
            stride_sum(modalities["text"]),
            stride_sum(modalities["vector"]))


def _softplus(x: float) -> float:
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def link1(s_img: float, s_txt: float, s_vec: float) -> float:
    """Softplus of the weighted sum plus a weak image*text interaction."""
    return _softplus(0.1 * s_img + 0.1 * s_txt + 0.1 * s_vec + 1e-4 * s_img * s_txt)


def link2(s_img: float, s_txt: float, s_vec: float) -> float:
    """Hyperbolic tangent of the weighted sum; bounded in (-1, 1)."""
    return math.tanh(0.05 * (s_img + s_txt + s_vec))


def link3(s_img: float, s_txt: float, s_vec: float) -> float:
    """Bell-shaped bounded transform: 16 over the sum of e^u and e^-u.

    Peaks at 8 when the weighted sum is zero and decays to 0 in both tails.
    """
    u = 0.02 * (s_img + s_txt + s_vec)
    # guard both exponentials; for |u| > 700 the value underflows to 0 anyway
    u = min(max(u, -700.0), 700.0)
    return 16.0 / (math.exp(u) + math.exp(-u))


LINKS = {1: link1, 2: link2, 3: link3}


def attach_targets(train_raw: list[dict], test_raw: list[dict],
                   cfg: SyntheticConfig) -> MultiModalDataset:
    """Compute targets through the configured link, add optional noise, and
    standardize using training-split statistics only."""
    link = LINKS[cfg.link]
    noise_rng = rng_stream(cfg.seed, TAG_NOISE)

    def raw_targets(raws):
        ys = np.array([link(*stride_stats(mods)) for mods in raws])
        if cfg.noise_std > 0.0:
            ys = ys + noise_rng.normal(0.0, cfg.noise_std, size=ys.size)
        return ys

    y_train = raw_targets(train_raw)
    y_test = raw_targets(test_raw)
    scaler = TargetScaler.fit(y_train)
    train = [ModalSample(mods, float(y)) for mods, y in zip(train_raw, scaler.standardize(y_train))]
    test = [ModalSample(mods, float(y)) for mods, y in zip(test_raw, scaler.standardize(y_test))]
    meta = {"kind": "synthetic", "link": cfg.link, "seed": cfg.seed,
            "noise_std": cfg.noise_std}
    return MultiModalDataset(train=train, test=test, target_scaler=scaler, meta=meta)


def make_synthetic_dataset(cfg: SyntheticConfig) -> MultiModalDataset:
    train_raw, test_raw = gen_modalities(cfg)
    return attach_targets(train_raw, test_raw, cfg)


# ---------------------------------------------------------------------------
# client partitioning
# ---------------------------------------------------------------------------


def _deal_shards(indices: np.ndarray, n_clients: int, shard_order: np.ndarray) -> list[np.ndarray]:
    shards = np.array_split(indices, 2 * n_clients)
    return [np.concatenate([shards[shard_order[2 * i]], shards[shard_order[2 * i + 1]]])
            for i in range(n_clients)]


def partition_clients(dataset: MultiModalDataset, n_clients: int,
                      scheme: str = "uniform", seed: int = 0) -> list[ClientDataset]:
    """Split train and test lists across clients.

    ``uniform``: seeded shuffle, then near-equal contiguous splits.
    ``label_sorted_shards``: sort by target, cut into 2K shards, deal two
    shards per client (a standard heterogeneous-partition construction); the
    test split is dealt with the same shard assignment so each client's test
    distribution matches its train distribution.
    """
    if n_clients < 1:
        raise ConfigError("need at least one client")
    if len(dataset.train) < n_clients or len(dataset.test) < n_clients:
        raise ConfigError(f"{n_clients} clients but only "
                          f"{len(dataset.train)} train / {len(dataset.test)} test samples")
    rng = rng_stream(seed, TAG_PARTITION)
    if scheme == "uniform":
        train_parts = np.array_split(rng.permutation(len(dataset.train)), n_clients)
        test_parts = np.array_split(rng.permutation(len(dataset.test)), n_clients)
    elif scheme == "label_sorted_shards":
        shard_order = rng.permutation(2 * n_clients)
        train_sorted = np.argsort([s.target for s in dataset.train], kind="stable")
        test_sorted = np.argsort([s.target for s in dataset.test], kind="stable")
        train_parts = _deal_shards(train_sorted, n_clients, shard_order)
        test_parts = _deal_shards(test_sorted, n_clients, shard_order)
    else:
        raise ConfigError(f"unknown partition scheme {scheme!r}")

    total = sum(len(p) for p in train_parts)
    clients = []
    for i, (tr, te) in enumerate(zip(train_parts, test_parts), start=1):
        clients.append(ClientDataset(
            client_id=i,
            train=[dataset.train[j] for j in tr],
            test=[dataset.test[j] for j in te],
            weight=len(tr) / total,
        ))
    return clients


# ---------------------------------------------------------------------------
# NIR spectroscopy CSV ingestion
# ---------------------------------------------------------------------------


def load_nir_csv(
    path,
    scalar_cols: Sequence[str],
    target_col: str,
    spectrum_cols: Sequence[str] | None = None,
    spectrum_prefix: str | None = None,
    expected_rows: int | None = None,
    expected_spectrum_len: int | None = None,
    test_fraction: float = 0.25,
    seed: int = 0,
    spectrum_as_vector: bool = False,
) -> MultiModalDataset:
    """Build a bimodal dataset from a headered CSV of spectra plus scalars.

    The spectrum columns (listed explicitly or matched by prefix, in file
    order) become a (wavelengths, 1) sequence modality; the scalar columns
    except the target become the vector modality. Features are z-scored per
    column and the target standardized, both on the training split only.
    ``spectrum_as_vector`` flattens the spectrum to a plain vector so it is
    routed to the MLP encoder instead of the LSTM.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            parsed = []
            for col, cell in zip(header, row):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: non-numeric value {cell!r} "
                                     f"in column {col!r}") from None
            rows.append(parsed)

    col_index = {name: i for i, name in enumerate(header)}
    if spectrum_cols is not None:
        spec_names = list(spectrum_cols)
    elif spectrum_prefix is not None:
        spec_names = [h for h in header if h.startswith(spectrum_prefix)]
        if not spec_names:
            raise ConfigError(f"no columns start with {spectrum_prefix!r}")
    else:
        raise ConfigError("one of spectrum_cols or spectrum_prefix is required")
    for name in [*spec_names, *scalar_cols, target_col]:
        if name not in col_index:
            raise ConfigError(f"column {name!r} not present in {path}")
    if target_col not in scalar_cols:
        raise ConfigError(f"target {target_col!r} must be one of the scalar columns")

    if expected_rows is not None and len(rows) != expected_rows:
        raise ValidationError(f"{path}: expected {expected_rows} rows, found {len(rows)}")
    if expected_spectrum_len is not None and len(spec_names) != expected_spectrum_len:
        raise ValidationError(f"{path}: expected {expected_spectrum_len} spectrum columns, "
                              f"found {len(spec_names)}")

    data = np.asarray(rows, dtype=np.float64)
    spectra = data[:, [col_index[n] for n in spec_names]]
    vector_names = [n for n in scalar_cols if n != target_col]
    vectors = data[:, [col_index[n] for n in vector_names]]
    targets = data[:, col_index[target_col]]

    n = len(rows)
    n_test = max(1, int(round(n * test_fraction)))
    if n_test >= n:
        raise ConfigError(f"test fraction {test_fraction} leaves no training rows")
    perm = rng_stream(seed, TAG_SPLIT).permutation(n)
    test_idx, train_idx = perm[:n_test], perm[n_test:]

    def zscore(matrix):
        mean = matrix[train_idx].mean(axis=0)
        std = matrix[train_idx].std(axis=0)
        std = np.where(std == 0.0, 1.0, std)
        return (matrix - mean) / std

    spectra = zscore(spectra)
    vectors = zscore(vectors)
    scaler = TargetScaler.fit(targets[train_idx])
    targets_std = scaler.standardize(targets)

    def build(idx):
        samples = []
        for i in idx:
            spec = spectra[i]
            modalities = {
                "spectrum": spec if spectrum_as_vector else spec[:, None],
                "vector": vectors[i].copy(),
            }
            samples.append(ModalSample(modalities, float(targets_std[i])))
        return samples

    meta = {"kind": "nir", "path": str(path), "target": target_col,
            "vector_cols": vector_names, "n_wavelengths": len(spec_names), "seed": seed}
    return MultiModalDataset(train=build(train_idx), test=build(test_idx),
                             target_scaler=scaler, meta=meta)


# ---------------------------------------------------------------------------
# snapshots and hashing
# ---------------------------------------------------------------------------


def save_snapshot(dataset: MultiModalDataset, path) -> None:
    """JSON-lines dump, one sample per line, for fixture pinning."""
    with open(path, "w", encoding="utf-8") as fh:
        head = {"meta": dataset.meta,
                "target_scaler": {"mean": dataset.target_scaler.mean,
                                  "std": dataset.target_scaler.std}}
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for split, samples in (("train", dataset.train), ("test", dataset.test)):
            for s in samples:
                record = {"split": split, "target": s.target,
                          "modalities": {k: {"shape": list(v.shape),
                                             "data": np.asarray(v).ravel().tolist()}
                                         for k, v in s.modalities.items()}}
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_snapshot(path) -> MultiModalDataset:
    with open(path, "r", encoding="utf-8") as fh:
        head = json.loads(fh.readline())
        train, test = [], []
        for line in fh:
            rec = json.loads(line)
            mods = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                    for k, v in rec["modalities"].items()}
            sample = ModalSample(mods, float(rec["target"]))
            (train if rec["split"] == "train" else test).append(sample)
    scaler = TargetScaler(**head["target_scaler"])
    return MultiModalDataset(train=train, test=test, target_scaler=scaler, meta=head["meta"])


def dataset_hash(clients: Iterable[ClientDataset]) -> str:
    """Digest of the exact per-client arrays; used to verify that methods
    compared under one seed saw identical data."""
    h = hashlib.sha256()
    for client in clients:
        h.update(str(client.client_id).encode())
        for split in (client.train, client.test):
            for s in split:
                for name in sorted(s.modalities):
                    h.update(name.encode())
                    h.update(np.ascontiguousarray(s.modalities[name], dtype="<f8").tobytes())
                h.update(np.float64(s.target).tobytes())
    return h.hexdigest()


def stack_samples(samples: Sequence[ModalSample]) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Stack a list of samples into batched arrays plus the target vector."""
    if not samples:
        raise DomainError("cannot stack an empty sample list")
    names = list(samples[0].modalities)
    batch = {name: np.stack([s.modalities[name] for s in samples]).astype(np.float64)
             for name in names}
    targets = np.array([s.target for s in samples], dtype=np.float64)
    return batch, targets
