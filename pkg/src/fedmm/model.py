"""Multi-modality encoders, attention fusion, and the regression head.

A :class:`GlobalModel` bundles one encoder per modality (MLP for flat
vectors, CNN for channel-first image grids, LSTM for sequences), a fusion
stage that mixes the per-modality features into one latent vector, and a
small MLP head that reads out a scalar prediction. The full parameter set
can be flattened to a single float64 vector in a fixed traversal order,
which is what the federated loop broadcasts and aggregates.

All forward paths are batched: encoders take ``(batch, ...)`` arrays and
return ``(batch, latent_dim)`` feature tensors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, ContractError, DimensionError, DomainError

# ---------------------------------------------------------------------------
# architecture description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModalityArch:
    """Encoder choice and sizes for one input modality."""

    name: str
    kind: str                      # "mlp" | "conv" | "lstm"
    input_shape: tuple[int, ...]
    mlp_hidden: tuple[int, ...] = (64,)
    conv_layers: tuple[tuple[int, int], ...] = ((8, 3), (16, 4))  # (channels, kernel)
    conv_pool: int = 2
    conv_pooling: str = "avg"      # "avg" | "max"
    conv_fc: int = 64
    lstm_hidden: int = 32
    bidirectional: bool = True


@dataclass(frozen=True)
class ModelArch:
    modalities: tuple[ModalityArch, ...]
    latent_dim: int = 16
    head_hidden: tuple[int, ...] = (32,)
    fusion: str = "attention"      # "attention" | "mean"

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelArch":
        mods = tuple(
            ModalityArch(
                name=m["name"],
                kind=m["kind"],
                input_shape=tuple(m["input_shape"]),
                mlp_hidden=tuple(m["mlp_hidden"]),
                conv_layers=tuple(tuple(l) for l in m["conv_layers"]),
                conv_pool=m["conv_pool"],
                conv_pooling=m.get("conv_pooling", "avg"),
                conv_fc=m["conv_fc"],
                lstm_hidden=m["lstm_hidden"],
                bidirectional=m["bidirectional"],
            )
            for m in d["modalities"]
        )
        return ModelArch(
            modalities=mods,
            latent_dim=d["latent_dim"],
            head_hidden=tuple(d["head_hidden"]),
            fusion=d["fusion"],
        )


def default_arch(
    shapes: dict[str, tuple[int, ...]],
    latent_dim: int = 16,
    fusion: str = "attention",
    bidirectional: bool = True,
) -> ModelArch:
    """Infer the desk-scale architecture from modality shapes.

    3-D inputs (channels, H, W) get the CNN, 2-D inputs (steps, features)
    the LSTM, 1-D inputs the MLP.
    """
    mods = []
    for name, shape in shapes.items():
        shape = tuple(int(s) for s in shape)
        if len(shape) == 3:
            kind = "conv"
        elif len(shape) == 2:
            kind = "lstm"
        elif len(shape) == 1:
            kind = "mlp"
        else:
            raise ConfigError(f"modality {name!r} has unsupported rank {len(shape)}")
        mods.append(ModalityArch(name=name, kind=kind, input_shape=shape,
                                 bidirectional=bidirectional))
    return ModelArch(modalities=tuple(mods), latent_dim=latent_dim, fusion=fusion)


def _init(rng, shape: tuple[int, ...], fan_in: int) -> Tensor:
    if rng is None:
        return Tensor(np.zeros(shape), requires_grad=True)
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


class MlpEncoder:
    """Stacked fully-connected layers with ReLU, linear output to latent_dim.

    Weight matrices follow the (out_features, in_features) column-vector
    convention; forward on a (batch, d_in) array computes a = relu(a W_l^T + b_l)
    through the hidden layers, then a linear output layer.
    """

    def __init__(self, weights: list[Tensor], biases: list[Tensor]):
        self.weights = weights
        self.biases = biases

    @classmethod
    def build(cls, rng, d_in: int, hidden: Sequence[int], d_out: int) -> "MlpEncoder":
        dims = [d_in, *hidden, d_out]
        weights, biases = [], []
        for prev, cur in zip(dims[:-1], dims[1:]):
            weights.append(_init(rng, (cur, prev), prev))
            biases.append(_init(rng, (cur,), prev))
        return cls(weights, biases)

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[1]

    def named_params(self, prefix: str):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}.w{i}", w))
            out.append((f"{prefix}.b{i}", b))
        return out

    def forward(self, x: np.ndarray) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise DimensionError(f"expected (batch, {self.d_in}) input, got {x.shape}")
        a = Tensor(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = ad.matmul(a, w.T) + b
            if i < last:
                a = a.relu()
        return a


class ConvEncoder:
    """Conv -> ReLU -> maxpool stages, then a ReLU dense layer and a linear
    projection to latent_dim.

    Input batches are channel-first (batch, C, H, W) as stored in datasets;
    they are transposed to (batch, H, W, C) before the valid, stride-1
    convolutions. The flattened feature order is row-major over (H, W, C).
    """

    def __init__(self, kernels: list[Tensor], conv_biases: list[Tensor], pool: int,
                 w_fc: Tensor, b_fc: Tensor, w_out: Tensor, b_out: Tensor,
                 input_shape: tuple[int, int, int], pooling: str = "avg"):
        self.kernels = kernels
        self.conv_biases = conv_biases
        self.pool = pool
        self.pooling = pooling
        self.w_fc = w_fc
        self.b_fc = b_fc
        self.w_out = w_out
        self.b_out = b_out
        self.input_shape = input_shape

    @staticmethod
    def stage_shapes(input_shape, conv_layers, pool):
        """Spatial bookkeeping; raises ConfigError on indivisible pooling."""
        c, h, w = input_shape
        shapes = []
        for channels, k in conv_layers:
            h, w = h - k + 1, w - k + 1
            if h < 1 or w < 1:
                raise ConfigError(f"kernel size {k} larger than feature map")
            if h % pool or w % pool:
                raise ConfigError(
                    f"feature map {h}x{w} not divisible by pool stride {pool}")
            h, w = h // pool, w // pool
            c = channels
            shapes.append((c, h, w))
        return shapes

    @classmethod
    def build(cls, rng, input_shape, conv_layers, pool, fc_dim, d_out,
              pooling: str = "avg") -> "ConvEncoder":
        if pooling not in ("avg", "max"):
            raise ConfigError(f"unknown pooling kind {pooling!r}")
        shapes = cls.stage_shapes(input_shape, conv_layers, pool)
        kernels, conv_biases = [], []
        c_in = input_shape[0]
        for channels, k in conv_layers:
            fan = k * k * c_in
            kernels.append(_init(rng, (k, k, c_in, channels), fan))
            conv_biases.append(_init(rng, (channels,), fan))
            c_in = channels
        c, h, w = shapes[-1]
        d_flat = h * w * c
        w_fc = _init(rng, (d_flat, fc_dim), d_flat)
        b_fc = _init(rng, (fc_dim,), d_flat)
        w_out = _init(rng, (fc_dim, d_out), fc_dim)
        b_out = _init(rng, (d_out,), fc_dim)
        return cls(kernels, conv_biases, pool, w_fc, b_fc, w_out, b_out,
                   tuple(input_shape), pooling)

    def named_params(self, prefix: str):
        out = []
        for i, (k, b) in enumerate(zip(self.kernels, self.conv_biases)):
            out.append((f"{prefix}.k{i}", k))
            out.append((f"{prefix}.kb{i}", b))
        out += [(f"{prefix}.w_fc", self.w_fc), (f"{prefix}.b_fc", self.b_fc),
                (f"{prefix}.w_out", self.w_out), (f"{prefix}.b_out", self.b_out)]
        return out

    def forward(self, x: np.ndarray) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise DimensionError(f"expected (batch, {self.input_shape}) input, got {x.shape}")
        a = Tensor(np.ascontiguousarray(x.transpose(0, 2, 3, 1)))
        pool_op = ad.avgpool2d if self.pooling == "avg" else ad.maxpool2d
        for k, b in zip(self.kernels, self.conv_biases):
            a = ad.conv2d(a, k, b)
            a = a.relu()
            a = pool_op(a, self.pool)
        a = a.reshape((x.shape[0], self.w_fc.shape[0]))
        a = (ad.matmul(a, self.w_fc) + self.b_fc).relu()
        return ad.matmul(a, self.w_out) + self.b_out


@dataclass
class LstmGates:
    """One direction's gate parameters, each (hidden, hidden + input)."""

    w_forget: Tensor
    w_input: Tensor
    w_cell: Tensor
    w_output: Tensor
    b_forget: Tensor
    b_input: Tensor
    b_cell: Tensor
    b_output: Tensor

    @classmethod
    def build(cls, rng, d_in: int, d_h: int) -> "LstmGates":
        fan = d_h + d_in
        ws = [_init(rng, (d_h, fan), fan) for _ in range(4)]
        bs = [_init(rng, (d_h,), fan) for _ in range(4)]
        return cls(*ws, *bs)

    @property
    def hidden(self) -> int:
        return self.w_forget.shape[0]

    def named_params(self, prefix: str):
        return [
            (f"{prefix}.w_forget", self.w_forget), (f"{prefix}.w_input", self.w_input),
            (f"{prefix}.w_cell", self.w_cell), (f"{prefix}.w_output", self.w_output),
            (f"{prefix}.b_forget", self.b_forget), (f"{prefix}.b_input", self.b_input),
            (f"{prefix}.b_cell", self.b_cell), (f"{prefix}.b_output", self.b_output),
        ]


def _lstm_step_pre(gates: LstmGates, trans, x_t: Tensor, h_prev: Tensor, c_prev: Tensor):
    wt_f, wt_i, wt_c, wt_o = trans
    joint = ad.concat([h_prev, x_t], axis=1)
    f = ad.sigmoid(ad.matmul(joint, wt_f) + gates.b_forget)
    i = ad.sigmoid(ad.matmul(joint, wt_i) + gates.b_input)
    cand = ad.tanh(ad.matmul(joint, wt_c) + gates.b_cell)
    c_t = f * c_prev + i * cand
    o = ad.sigmoid(ad.matmul(joint, wt_o) + gates.b_output)
    h_t = o * ad.tanh(c_t)
    return h_t, c_t


def _gate_transposes(gates: LstmGates):
    return (gates.w_forget.T, gates.w_input.T, gates.w_cell.T, gates.w_output.T)


def lstm_step(gates: LstmGates, x_t: Tensor, h_prev: Tensor, c_prev: Tensor):
    """One recurrence step on the concatenated [h_prev, x_t] input.

    Returns (h_t, c_t). Gate order: forget scales the old cell state, input
    scales the tanh candidate, output scales tanh of the new cell state.
    """
    return _lstm_step_pre(gates, _gate_transposes(gates), x_t, h_prev, c_prev)


class LstmEncoder:
    """Single-layer (optionally bidirectional) LSTM with a linear projection.

    The sequence feature is the final hidden state of each direction (the
    backward direction reads the sequence reversed, so its final state has
    consumed the first step), concatenated and projected to latent_dim.
    Initial hidden and cell states are zero.
    """

    def __init__(self, forward_gates: LstmGates, backward_gates: LstmGates | None,
                 w_proj: Tensor, b_proj: Tensor, d_in: int):
        self.forward_gates = forward_gates
        self.backward_gates = backward_gates
        self.w_proj = w_proj
        self.b_proj = b_proj
        self.d_in = d_in

    @classmethod
    def build(cls, rng, d_in: int, d_h: int, d_out: int, bidirectional: bool) -> "LstmEncoder":
        fwd = LstmGates.build(rng, d_in, d_h)
        bwd = LstmGates.build(rng, d_in, d_h) if bidirectional else None
        total = 2 * d_h if bidirectional else d_h
        w_proj = _init(rng, (total, d_out), total)
        b_proj = _init(rng, (d_out,), total)
        return cls(fwd, bwd, w_proj, b_proj, d_in)

    @property
    def bidirectional(self) -> bool:
        return self.backward_gates is not None

    def named_params(self, prefix: str):
        out = self.forward_gates.named_params(f"{prefix}.fwd")
        if self.backward_gates is not None:
            out += self.backward_gates.named_params(f"{prefix}.bwd")
        out += [(f"{prefix}.w_proj", self.w_proj), (f"{prefix}.b_proj", self.b_proj)]
        return out

    def _run(self, gates: LstmGates, steps: list[np.ndarray], batch: int) -> Tensor:
        d_h = gates.hidden
        h = Tensor(np.zeros((batch, d_h)))
        c = Tensor(np.zeros((batch, d_h)))
        trans = _gate_transposes(gates)  # shared across the time loop
        for x_t in steps:
            h, c = _lstm_step_pre(gates, trans, Tensor(x_t), h, c)
        return h

    def forward(self, x: np.ndarray) -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.d_in:
            raise DimensionError(f"expected (batch, steps, {self.d_in}) input, got {x.shape}")
        if x.shape[1] < 1:
            raise DomainError("empty sequence")
        batch = x.shape[0]
        steps = [np.ascontiguousarray(x[:, t, :]) for t in range(x.shape[1])]
        h_final = self._run(self.forward_gates, steps, batch)
        if self.backward_gates is not None:
            h_back = self._run(self.backward_gates, steps[::-1], batch)
            h_final = ad.concat([h_final, h_back], axis=1)
        return ad.matmul(h_final, self.w_proj) + self.b_proj


# ---------------------------------------------------------------------------
# fusion and head
# ---------------------------------------------------------------------------


class AttentionFusion:
    """Softmax-weighted mixing of modality features.

    Each modality feature produces a scalar score z_m @ w_att; the softmax
    over scores gives per-sample modality weights that always form a
    probability vector. The weighted sum is passed through one linear layer.
    """

    def __init__(self, w_att: Tensor, w_fusion: Tensor, b_fusion: Tensor):
        self.w_att = w_att
        self.w_fusion = w_fusion
        self.b_fusion = b_fusion

    @classmethod
    def build(cls, rng, d: int) -> "AttentionFusion":
        return cls(_init(rng, (d, 1), d), _init(rng, (d, d), d), _init(rng, (d,), d))

    def named_params(self, prefix: str):
        return [(f"{prefix}.w_att", self.w_att), (f"{prefix}.w_fusion", self.w_fusion),
                (f"{prefix}.b_fusion", self.b_fusion)]

    def forward(self, features: Sequence[Tensor], return_weights: bool = False):
        if len(features) == 0:
            raise DomainError("fusion requires at least one modality feature")
        scores = [ad.matmul(z, self.w_att) for z in features]        # (b,1) each
        stacked = ad.concat(scores, axis=1)                           # (b,M)
        lse = ad.logsumexp_rows(stacked).reshape((stacked.shape[0], 1))
        weights = [ad.exp(s - lse) for s in scores]                   # (b,1) each
        mixed = weights[0] * features[0]
        for w, z in zip(weights[1:], features[1:]):
            mixed = mixed + w * z
        fused = ad.matmul(mixed, self.w_fusion) + self.b_fusion
        if return_weights:
            alpha = np.concatenate([w.data for w in weights], axis=1)
            return fused, alpha
        return fused


class MeanFusion:
    """Uniform-weight fallback: plain average of modality features."""

    def __init__(self, w_fusion: Tensor, b_fusion: Tensor):
        self.w_fusion = w_fusion
        self.b_fusion = b_fusion

    @classmethod
    def build(cls, rng, d: int) -> "MeanFusion":
        return cls(_init(rng, (d, d), d), _init(rng, (d,), d))

    def named_params(self, prefix: str):
        return [(f"{prefix}.w_fusion", self.w_fusion), (f"{prefix}.b_fusion", self.b_fusion)]

    def forward(self, features: Sequence[Tensor], return_weights: bool = False):
        if len(features) == 0:
            raise DomainError("fusion requires at least one modality feature")
        m = len(features)
        mixed = features[0] * (1.0 / m)
        for z in features[1:]:
            mixed = mixed + z * (1.0 / m)
        fused = ad.matmul(mixed, self.w_fusion) + self.b_fusion
        if return_weights:
            alpha = np.full((features[0].shape[0], m), 1.0 / m)
            return fused, alpha
        return fused


class PredictionHead:
    """ReLU MLP ending in a single linear output unit."""

    def __init__(self, weights: list[Tensor], biases: list[Tensor]):
        self.weights = weights
        self.biases = biases

    @classmethod
    def build(cls, rng, d_in: int, hidden: Sequence[int]) -> "PredictionHead":
        dims = [d_in, *hidden, 1]
        weights, biases = [], []
        for prev, cur in zip(dims[:-1], dims[1:]):
            weights.append(_init(rng, (cur, prev), prev))
            biases.append(_init(rng, (cur,), prev))
        return cls(weights, biases)

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[1]

    def named_params(self, prefix: str):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}.w{i}", w))
            out.append((f"{prefix}.b{i}", b))
        return out

    def forward(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.d_in:
            raise DimensionError(f"expected (batch, {self.d_in}) input, got {z.shape}")
        a = z
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = ad.matmul(a, w.T) + b
            if i < last:
                a = a.relu()
        return a.reshape((z.shape[0],))


# ---------------------------------------------------------------------------
# the full parameter set
# ---------------------------------------------------------------------------

_ENCODER_BUILDERS = {
    "mlp": lambda rng, m, d: MlpEncoder.build(rng, m.input_shape[0], m.mlp_hidden, d),
    "conv": lambda rng, m, d: ConvEncoder.build(rng, m.input_shape, m.conv_layers,
                                                m.conv_pool, m.conv_fc, d, m.conv_pooling),
    "lstm": lambda rng, m, d: LstmEncoder.build(rng, m.input_shape[1], m.lstm_hidden,
                                                d, m.bidirectional),
}


class GlobalModel:
    """Encoders + fusion + head, the unit that is broadcast and aggregated."""

    def __init__(self, arch: ModelArch, encoders: dict, fusion, head: PredictionHead):
        self.arch = arch
        self.encoders = encoders
        self.fusion = fusion
        self.head = head
        self.latent_dim = arch.latent_dim

    @classmethod
    def build(cls, arch: ModelArch, rng=None) -> "GlobalModel":
        if not arch.modalities:
            raise ConfigError("model needs at least one modality")
        encoders = {}
        for mod in arch.modalities:
            try:
                builder = _ENCODER_BUILDERS[mod.kind]
            except KeyError:
                raise ConfigError(f"unknown encoder kind {mod.kind!r}") from None
            encoders[mod.name] = builder(rng, mod, arch.latent_dim)
        if arch.fusion == "attention":
            fusion = AttentionFusion.build(rng, arch.latent_dim)
        elif arch.fusion == "mean":
            fusion = MeanFusion.build(rng, arch.latent_dim)
        else:
            raise ConfigError(f"unknown fusion kind {arch.fusion!r}")
        head = PredictionHead.build(rng, arch.latent_dim, arch.head_hidden)
        return cls(arch, encoders, fusion, head)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for mod in self.arch.modalities:
            out += self.encoders[mod.name].named_params(f"enc.{mod.name}")
        out += self.fusion.named_params("fusion")
        out += self.head.named_params("head")
        return out

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for _, p in self.named_params()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.param_count():
            raise ContractError(f"flat vector has {flat.size} entries, model has {self.param_count()}")
        pos = 0
        for _, p in self.named_params():
            p.data[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    def clone(self) -> "GlobalModel":
        twin = GlobalModel.build(self.arch, rng=None)
        twin.set_flat(self.get_flat())
        return twin

    def encode_batch(self, batch: dict[str, np.ndarray]) -> list[Tensor]:
        feats = []
        for mod in self.arch.modalities:
            if mod.name not in batch:
                raise DimensionError(f"batch is missing modality {mod.name!r}")
            feats.append(self.encoders[mod.name].forward(np.asarray(batch[mod.name], dtype=np.float64)))
        return feats

    def forward_batch(self, batch: dict[str, np.ndarray]):
        """Returns (modality features, fused representation, predictions)."""
        feats = self.encode_batch(batch)
        fused = self.fusion.forward(feats)
        preds = self.head.forward(fused)
        return feats, fused, preds

    def predict_batch(self, batch: dict[str, np.ndarray]) -> np.ndarray:
        with ad.no_grad():
            _, _, preds = self.forward_batch(batch)
        return preds.data

    def fused_batch(self, batch: dict[str, np.ndarray]) -> np.ndarray:
        with ad.no_grad():
            _, fused, _ = self.forward_batch(batch)
        return fused.data

    # -- checkpoint io ---------------------------------------------------
    def save(self, path) -> None:
        header = {"format": "fedmm-model", "version": 1, "kind": "multimodal",
                  "arch": self.arch.to_dict(), "param_count": self.param_count()}
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            fh.write(self.get_flat().astype("<f8").tobytes())

    @staticmethod
    def load(path) -> "GlobalModel":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            raw = fh.read()
        if header.get("format") != "fedmm-model":
            raise ContractError(f"{path} is not a model checkpoint")
        flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        if flat.size != header["param_count"]:
            raise ContractError(f"checkpoint holds {flat.size} values, header says {header['param_count']}")
        if header.get("kind") == "head_only":
            model = HeadOnlyModel.build_from_dict(header["arch"])
        else:
            model = GlobalModel.build(ModelArch.from_dict(header["arch"]), rng=None)
        model.set_flat(flat)
        return model


def forward_sample(model: GlobalModel, sample) -> tuple[dict[str, Tensor], Tensor, Tensor]:
    """Single-sample forward pass; keeps the leading batch-of-1 axis.

    Returns per-modality features as a name-keyed dict plus the fused
    representation and prediction tensors.
    """
    batch = {name: np.asarray(arr, dtype=np.float64)[None, ...]
             for name, arr in sample.modalities.items()}
    feats, fused, preds = model.forward_batch(batch)
    named = dict(zip((m.name for m in model.arch.modalities), feats))
    return named, fused, preds


class HeadOnlyModel:
    """Regression head over a single pre-reduced feature vector.

    Used by the dimensionality-reduction baselines: the "encoder" is the
    fixed linear reducer applied at data-preparation time, so the trainable
    part is exactly the same head architecture the full model uses.
    """

    def __init__(self, head: PredictionHead, input_dim: int, head_hidden: tuple[int, ...]):
        self.head = head
        self.input_dim = input_dim
        self.head_hidden = head_hidden

    @classmethod
    def build(cls, input_dim: int, head_hidden: Sequence[int] = (32,), rng=None) -> "HeadOnlyModel":
        return cls(PredictionHead.build(rng, input_dim, head_hidden), input_dim, tuple(head_hidden))

    @classmethod
    def build_from_dict(cls, d: dict) -> "HeadOnlyModel":
        return cls.build(d["input_dim"], tuple(d["head_hidden"]), rng=None)

    def named_params(self):
        return self.head.named_params("head")

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for _, p in self.named_params()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.param_count():
            raise ContractError(f"flat vector has {flat.size} entries, model has {self.param_count()}")
        pos = 0
        for _, p in self.named_params():
            p.data[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    def clone(self) -> "HeadOnlyModel":
        twin = HeadOnlyModel.build(self.input_dim, self.head_hidden, rng=None)
        twin.set_flat(self.get_flat())
        return twin

    def forward_batch(self, batch: dict[str, np.ndarray]):
        x = np.asarray(batch["features"], dtype=np.float64)
        fused = Tensor(x)
        preds = self.head.forward(fused)
        return [], fused, preds

    def predict_batch(self, batch: dict[str, np.ndarray]) -> np.ndarray:
        with ad.no_grad():
            _, _, preds = self.forward_batch(batch)
        return preds.data

    def fused_batch(self, batch: dict[str, np.ndarray]) -> np.ndarray:
        return np.asarray(batch["features"], dtype=np.float64)

    def save(self, path) -> None:
        header = {"format": "fedmm-model", "version": 1, "kind": "head_only",
                  "arch": {"input_dim": self.input_dim, "head_hidden": list(self.head_hidden)},
                  "param_count": self.param_count()}
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            fh.write(self.get_flat().astype("<f8").tobytes())
