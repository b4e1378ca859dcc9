"""Linear per-modality dimensionality reducers and the baseline pipeline.

PCA, truncated SVD and Gaussian random projection follow the scikit-learn
transformer protocol (fit/transform/get_params) so they compose with the
wider ecosystem. The baseline pipeline fits one reducer per modality on the
pooled training features, reduces every client's samples, and trains the
shared regression head under the same federated loop as the full model with
all regularizers off.
"""

from __future__ import annotations

import json

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import TAG_MODEL_INIT, TAG_REDUCER, ClientDataset, ModalSample, rng_stream, stack_samples
from .exceptions import ConfigError, ContractError
from .federated import RoundConfig, evaluate_mse, run_training
from .losses import LossWeights
from .model import HeadOnlyModel


def _validated(X) -> np.ndarray:
    return check_array(X, dtype=np.float64, ensure_2d=True)


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    """Flip columns so each one's largest-magnitude entry is positive."""
    flipped = basis.copy()
    for j in range(flipped.shape[1]):
        i = int(np.argmax(np.abs(flipped[:, j])))
        if flipped[i, j] < 0:
            flipped[:, j] = -flipped[:, j]
    return flipped


def _top_right_singular(X: np.ndarray, k: int) -> np.ndarray:
    """Leading k right singular vectors of X, as (features, k) columns.

    Wide matrices go through the (samples x samples) Gram matrix, which is
    much cheaper than a full SVD when features >> samples and returns an
    equally orthonormal basis.
    """
    n, p = X.shape
    if p <= n:
        _, _, vt = np.linalg.svd(X, full_matrices=False)
        return np.ascontiguousarray(vt[:k].T)
    gram = X @ X.T
    eigvals, eigvecs = np.linalg.eigh(gram)
    order = np.argsort(eigvals)[::-1][:k]
    sing = np.sqrt(np.maximum(eigvals[order], 0.0))
    if np.any(sing <= np.max(sing) * 1e-12):
        raise ConfigError(f"matrix rank below requested {k} components")
    return (X.T @ eigvecs[:, order]) / sing


class PCAReducer(TransformerMixin, BaseEstimator):
    """Principal components: top eigenvectors of the sample covariance."""

    def __init__(self, n_components: int = 16):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = _validated(X)
        n, p = X.shape
        if n < 2:
            raise ConfigError("PCA needs at least two samples")
        if not 1 <= self.n_components <= min(n, p):
            raise ConfigError(f"n_components={self.n_components} outside [1, {min(n, p)}]")
        self.center_ = X.mean(axis=0)
        self.projection_ = _fix_signs(_top_right_singular(X - self.center_, self.n_components))
        return self

    def transform(self, X):
        check_is_fitted(self, "projection_")
        X = _validated(X)
        if X.shape[1] != self.projection_.shape[0]:
            raise ConfigError(f"expected {self.projection_.shape[0]} features, got {X.shape[1]}")
        return (X - self.center_) @ self.projection_


class TruncatedSVDReducer(TransformerMixin, BaseEstimator):
    """Top right singular vectors of the uncentered data matrix."""

    def __init__(self, n_components: int = 16):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = _validated(X)
        n, p = X.shape
        if n < 2:
            raise ConfigError("truncated SVD needs at least two samples")
        if not 1 <= self.n_components <= min(n, p):
            raise ConfigError(f"n_components={self.n_components} outside [1, {min(n, p)}]")
        self.projection_ = _fix_signs(_top_right_singular(X, self.n_components))
        return self

    def transform(self, X):
        check_is_fitted(self, "projection_")
        X = _validated(X)
        if X.shape[1] != self.projection_.shape[0]:
            raise ConfigError(f"expected {self.projection_.shape[0]} features, got {X.shape[1]}")
        return X @ self.projection_


class RandomProjectionReducer(TransformerMixin, BaseEstimator):
    """Gaussian random projection with entries N(0, 1/n_components).

    The variance choice makes the projection norm-preserving in expectation,
    the usual Johnson-Lindenstrauss scaling. The matrix depends only on the
    seed and the data dimensions.
    """

    def __init__(self, n_components: int = 16, seed: int = 0):
        self.n_components = n_components
        self.seed = seed

    def fit(self, X, y=None):
        X = _validated(X)
        if self.n_components < 1:
            raise ConfigError(f"n_components must be positive, got {self.n_components}")
        rng = rng_stream(self.seed, TAG_REDUCER)
        scale = np.sqrt(1.0 / self.n_components)
        self.projection_ = rng.normal(0.0, scale, size=(X.shape[1], self.n_components))
        return self

    def transform(self, X):
        check_is_fitted(self, "projection_")
        X = _validated(X)
        if X.shape[1] != self.projection_.shape[0]:
            raise ConfigError(f"expected {self.projection_.shape[0]} features, got {X.shape[1]}")
        return X @ self.projection_


REDUCER_KINDS = ("pca", "tsvd", "rp")


def fit_reducer(kind: str, X: np.ndarray, n_components: int, seed: int = 0):
    if kind == "pca":
        return PCAReducer(n_components).fit(X)
    if kind == "tsvd":
        return TruncatedSVDReducer(n_components).fit(X)
    if kind == "rp":
        return RandomProjectionReducer(n_components, seed=seed).fit(X)
    raise ConfigError(f"unknown reducer kind {kind!r}")


def save_reducer(reducer, path) -> None:
    """Snapshot: JSON header line + little-endian projection (and center)."""
    check_is_fitted(reducer, "projection_")
    kind = {PCAReducer: "pca", TruncatedSVDReducer: "tsvd",
            RandomProjectionReducer: "rp"}[type(reducer)]
    header = {"format": "fedmm-reducer", "kind": kind,
              "shape": list(reducer.projection_.shape),
              "has_center": hasattr(reducer, "center_")}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(reducer.projection_.astype("<f8").tobytes())
        if header["has_center"]:
            fh.write(reducer.center_.astype("<f8").tobytes())


def load_reducer(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        raw = fh.read()
    if header.get("format") != "fedmm-reducer":
        raise ContractError(f"{path} is not a reducer snapshot")
    rows, cols = header["shape"]
    values = np.frombuffer(raw, dtype="<f8")
    cls = {"pca": PCAReducer, "tsvd": TruncatedSVDReducer,
           "rp": RandomProjectionReducer}[header["kind"]]
    reducer = cls(n_components=cols)
    reducer.projection_ = values[: rows * cols].reshape(rows, cols).copy()
    if header["has_center"]:
        reducer.center_ = values[rows * cols:].copy()
    return reducer


# ---------------------------------------------------------------------------
# baseline pipeline
# ---------------------------------------------------------------------------


def _flat_modality(samples, name) -> np.ndarray:
    return np.stack([np.asarray(s.modalities[name], dtype=np.float64).ravel()
                     for s in samples])


def fit_modality_reducers(clients: list[ClientDataset], kind: str,
                          n_components: int, seed: int = 0) -> dict:
    """One reducer per modality, fit on the pooled training split only."""
    names = list(clients[0].train[0].modalities)
    pooled = {name: np.concatenate([_flat_modality(c.train, name) for c in clients])
              for name in names}
    return {name: fit_reducer(kind, pooled[name], n_components, seed=seed + i)
            for i, name in enumerate(names)}


def reduce_clients(clients: list[ClientDataset], reducers: dict) -> list[ClientDataset]:
    """Apply the per-modality reducers and concatenate into one feature vector."""
    names = list(reducers)

    def convert(samples):
        if not samples:
            return []
        blocks = [reducers[name].transform(_flat_modality(samples, name)) for name in names]
        feats = np.concatenate(blocks, axis=1)
        return [ModalSample({"features": feats[i]}, s.target)
                for i, s in enumerate(samples)]

    return [ClientDataset(client_id=c.client_id, train=convert(c.train),
                          test=convert(c.test), weight=c.weight) for c in clients]


def train_feature_head(clients: list[ClientDataset], cfg: RoundConfig,
                       head_hidden=(32,)):
    """Federated training of the shared head on single-vector features."""
    input_dim = clients[0].train[0].modalities["features"].size
    model = HeadOnlyModel.build(input_dim, head_hidden, rng_stream(cfg.seed, TAG_MODEL_INIT))
    weights = LossWeights(mi_weight=0.0, align_weight=0.0, contrast_weight=0.0)
    return run_training(clients, cfg, weights, model=model)


def baseline_pipeline(clients: list[ClientDataset], kind: str, n_components: int,
                      cfg: RoundConfig, head_hidden=(32,)) -> dict:
    """Reduce -> federated head regression -> per-client and pooled test MSE."""
    if kind not in REDUCER_KINDS:
        raise ConfigError(f"unknown baseline {kind!r}")
    reducers = fit_modality_reducers(clients, kind, n_components, seed=cfg.seed)
    reduced = reduce_clients(clients, reducers)
    model, trace = train_feature_head(reduced, cfg, head_hidden)
    per_client = {c.client_id: evaluate_mse(model, c.test) for c in reduced}
    pooled = evaluate_mse(model, [s for c in reduced for s in c.test])
    return {"per_client": per_client, "pooled": pooled, "model": model,
            "trace": trace, "reducers": reducers}
