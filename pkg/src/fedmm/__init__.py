"""fedmm: a deterministic, desk-scale federated multi-modal regression
simulator with linear dimensionality-reduction baselines.

The building blocks:

- :mod:`fedmm.autodiff` -- reverse-mode autodiff over dense float64 tensors
- :mod:`fedmm.model` -- per-modality encoders, attention fusion, head
- :mod:`fedmm.losses` -- the four-term training objective
- :mod:`fedmm.federated` -- broadcast / local update / weighted aggregation
- :mod:`fedmm.data` -- synthetic tri-modal generation and NIR CSV loading
- :mod:`fedmm.reducers` -- PCA / truncated SVD / random projection baselines
- :mod:`fedmm.harness` -- seeded repeated-run suites and reports
"""

from .autodiff import Tensor, backward, no_grad
from .data import (ClientDataset, ModalSample, MultiModalDataset, SyntheticConfig,
                   load_nir_csv, make_synthetic_dataset, partition_clients)
from .federated import (FederatedMultiModalRegressor, RoundConfig, run_training)
from .losses import BatchForward, LossWeights
from .model import GlobalModel, ModelArch, default_arch
from .optim import Adam
from .reducers import (PCAReducer, RandomProjectionReducer, TruncatedSVDReducer,
                       baseline_pipeline)

__version__ = "0.1.0"

__all__ = [
    "Adam", "BatchForward", "ClientDataset", "FederatedMultiModalRegressor",
    "GlobalModel", "LossWeights", "ModalSample", "ModelArch", "MultiModalDataset",
    "PCAReducer", "RandomProjectionReducer", "RoundConfig", "SyntheticConfig",
    "Tensor", "TruncatedSVDReducer", "backward", "baseline_pipeline",
    "default_arch", "load_nir_csv", "make_synthetic_dataset", "no_grad",
    "partition_clients", "run_training",
]
