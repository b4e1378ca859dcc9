"""Built-in verification battery behind the `check` CLI subcommand.

Each check returns (name, ok, detail). They are quick, deterministic
re-statements of the core invariants: gradient correctness against finite
differences, the closed-form loss anchors, link-function properties,
aggregation oracles, and reducer geometry.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (SyntheticConfig, link1, link2, link3, make_synthetic_dataset,
                   partition_clients, rng_stream)
from .federated import (AggregationWeights, RoundConfig, aggregate, run_training)
from .losses import (LossWeights, infonce_loss, mi_lower_bound_loss, mse_loss,
                     symkl_alignment_loss)
from .model import AttentionFusion, GlobalModel, default_arch
from .optim import Adam
from .reducers import PCAReducer, RandomProjectionReducer, TruncatedSVDReducer


def _fd_gradient(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = x.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return grad


def check_autodiff_gradients():
    worst = 0.0
    for seed in range(20):
        rng = rng_stream(9000, seed)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)

        def loss_value():
            z = ad.tanh(ad.matmul(Tensor(a.data), Tensor(b.data)))
            s = ad.sigmoid(z) * ad.softplus(z)
            return s.mean().item()

        z = ad.tanh(ad.matmul(a, b))
        s = ad.sigmoid(z) * ad.softplus(z)
        ad.backward(s.mean())
        for t in (a, b):
            fd = _fd_gradient(loss_value, t.data)
            err = np.max(np.abs(fd - t.grad) / np.maximum(np.abs(fd), 1.0))
            worst = max(worst, float(err))
            t.grad = None
    return "autodiff gradients vs finite differences", worst < 1e-4, f"max rel err {worst:.2e}"


def check_adam_first_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([("p", p)])
    p.grad = np.array([1.0])
    opt.step()
    delta = 1.0 - p.data[0]
    ok = abs(delta - 0.001) < 1e-6
    return "adam bias-corrected first step", ok, f"moved {delta:.6f} (expect ~0.001)"


def check_loss_anchors():
    details = []
    preds = Tensor(np.zeros(4))
    mi = mi_lower_bound_loss(preds, np.zeros(4), np.zeros(4)).item()
    details.append(abs(mi - 2 * np.log(2.0)) < 1e-9)
    z1 = Tensor(np.array([[0.0, 0.0]]))
    z2 = Tensor(np.array([[2.0, 0.0]]))
    details.append(abs(symkl_alignment_loss([z1, z2], 1.0).item() - 2.0) < 1e-9)
    fused = Tensor(np.array([[1.0, 0.0]]))
    prev = np.array([[1.0, 0.0]])
    hist = [np.array([[1.0, 0.0]])]
    details.append(abs(infonce_loss(fused, prev, hist, 1.0).item() - np.log(2.0)) < 1e-9)
    details.append(infonce_loss(fused, prev, [], 1.0).item() == 0.0)
    details.append(mse_loss(Tensor(np.array([1.0, 1.0])), np.array([0.0, 2.0])).item() == 1.0)
    return "loss closed-form anchors", all(details), f"{sum(details)}/{len(details)} anchors hold"


def check_link_functions():
    oks = [abs(link1(0, 0, 0) - np.log(2.0)) < 1e-12,
           link2(0, 0, 0) == 0.0,
           abs(link3(0, 0, 0) - 8.0) < 1e-12]
    rng = rng_stream(9001)
    s = rng.normal(0, 20, size=(10_000, 3))
    l2 = np.tanh(0.05 * s.sum(axis=1))
    oks.append(np.allclose(l2, -np.tanh(-0.05 * s.sum(axis=1))))
    l3 = np.array([link3(*row) for row in s])
    l3_neg = np.array([link3(*(-row)) for row in s])
    oks.append(np.allclose(l3, l3_neg))
    bumps = np.array([link1(r[0], r[1], r[2] + 0.5) - link1(*r) for r in s[:1000]])
    oks.append(bool(np.all(bumps > 0)))
    return "link anchors and symmetries", all(oks), f"{sum(oks)}/{len(oks)} properties hold"


def check_aggregation():
    rng = rng_stream(9002)
    arch = default_arch({"vector": (6,)}, latent_dim=4)
    models = [GlobalModel.build(arch, rng_stream(9002, i)) for i in range(3)]
    agg = aggregate(models, AggregationWeights([10, 10, 10]))
    mean = np.mean([m.get_flat() for m in models], axis=0)
    diff = np.abs(agg.get_flat() - mean)
    tol = np.spacing(np.abs(mean))
    ok = bool(np.all(diff <= tol))
    return "equal-weight aggregation == mean (1 ulp)", ok, f"max diff {diff.max():.2e}"


def check_fusion_simplex():
    rng = rng_stream(9003)
    fusion = AttentionFusion.build(rng, 5)
    feats = [Tensor(rng.standard_normal((7, 5))) for _ in range(3)]
    _, alpha = fusion.forward(feats, return_weights=True)
    ok = bool(np.all(alpha > 0)) and np.max(np.abs(alpha.sum(axis=1) - 1.0)) < 1e-12
    return "attention weights on the simplex", ok, f"row-sum err {np.max(np.abs(alpha.sum(axis=1)-1)):.1e}"


def check_reducers():
    rng = rng_stream(9004)
    X = rng.standard_normal((60, 12))
    oks = []
    for reducer in (PCAReducer(5).fit(X), TruncatedSVDReducer(5).fit(X)):
        gram = reducer.projection_.T @ reducer.projection_
        oks.append(np.max(np.abs(gram - np.eye(5))) < 1e-8)
    rp = RandomProjectionReducer(64, seed=3).fit(rng.standard_normal((4, 512)))
    pairs = rng.standard_normal((100, 2, 512))
    d_orig = np.linalg.norm(pairs[:, 0] - pairs[:, 1], axis=1) ** 2
    proj = pairs.reshape(-1, 512) @ rp.projection_
    proj = proj.reshape(100, 2, 64)
    d_proj = np.linalg.norm(proj[:, 0] - proj[:, 1], axis=1) ** 2
    ratio = d_proj / d_orig
    frac = float(np.mean((ratio > 0.6) & (ratio < 1.4)))
    oks.append(frac >= 0.95)
    return "reducer orthonormality and distance preservation", all(oks), \
        f"{sum(oks)}/{len(oks)} hold (JL fraction {frac:.2f})"


def check_training_fixed_point():
    dataset = make_synthetic_dataset(SyntheticConfig(n_train=24, n_test=9, link=2, seed=5))
    clients = partition_clients(dataset, 3, "uniform", 5)
    cfg = RoundConfig(rounds=2, local_epochs=0, batch_size=8, clients=3, seed=5)
    model, trace = run_training(clients, cfg, LossWeights())
    fresh = GlobalModel.build(model.arch, rng_stream(5, 106))
    diff = np.abs(model.get_flat() - fresh.get_flat())
    tol = np.spacing(np.abs(fresh.get_flat()))
    ok = bool(np.all(diff <= tol)) and len(trace) == 2
    return "zero-epoch rounds are a fixed point", ok, f"max drift {diff.max():.2e}"


ALL_CHECKS = [
    check_autodiff_gradients,
    check_adam_first_step,
    check_loss_anchors,
    check_link_functions,
    check_aggregation,
    check_fusion_simplex,
    check_reducers,
    check_training_fixed_point,
]


def run_checks(emit=print) -> bool:
    all_ok = True
    for fn in ALL_CHECKS:
        name, ok, detail = fn()
        all_ok = all_ok and ok
        emit(f"[{'ok' if ok else 'FAIL'}] {name}: {detail}")
    return all_ok
