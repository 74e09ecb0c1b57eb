"""Training loop, quality metrics and the network-vs-solver benchmark.

Per batch: the network maps target view patches to layer images, the
differentiable display model reconstructs the views, and the loss is
MSE(reconstruction, target) plus a weighted out-of-range penalty on the
(un-clamped) layers. The checkpoint with the best test PSNR is retained.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step
from .lightfield import max_shift, reconstruct, reconstruct_tensor
from .networks import Checkpoint, build_network, forward_infer, views_to_input
from .solvers import SolveConfig, solve_additive, solve_multiplicative


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 15
    lr: float = 1e-4
    lambda_reg: float = 0.01  # range-penalty weight
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")


@dataclass
class EvalReport:
    epochs: list = field(default_factory=list)  # (epoch, train_loss, train_psnr, test_psnr)
    best_epoch: int = -1
    best_test_psnr: float = -math.inf
    layer_means: list = field(default_factory=list)
    uniformity_cv: float = math.nan
    timings: dict = field(default_factory=dict)  # label -> ms

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("epoch,train_loss,train_psnr,test_psnr\n")
            for ep, loss, tr_psnr, te_psnr in self.epochs:
                f.write(f"{ep},{loss:.6g},{tr_psnr:.6g},{te_psnr:.6g}\n")


def evaluate_psnr(recon, target, crop_border=0):
    """PSNR in dB (peak 1.0) pooled over all views inside the crop.

    Zero-MSE pairs report the 99 dB cap.
    """
    if recon.views.shape != target.views.shape:
        raise ValueError(f"shape mismatch: {recon.views.shape} vs {target.views.shape}")
    r, t = recon.views, target.views
    if crop_border > 0:
        if 2 * crop_border >= min(r.shape[-2:]):
            raise ValueError("crop leaves no pixels")
        r = r[..., crop_border:-crop_border, crop_border:-crop_border]
        t = t[..., crop_border:-crop_border, crop_border:-crop_border]
    mse = float(np.mean((r - t) ** 2))
    if mse == 0.0:
        return 99.0
    return min(99.0, 10.0 * math.log10(1.0 / mse))


def layer_uniformity(stack):
    """Per-layer mean intensities and their coefficient of variation."""
    means = [float(np.mean(layer)) for layer in stack.layers]
    mean_of_means = float(np.mean(means))
    if mean_of_means <= 0:
        raise ValueError("uniformity CV undefined for an all-zero stack")
    cv = float(np.std(means)) / mean_of_means  # population stddev
    return means, cv


def _default_border(geometry, hw):
    border = math.ceil(max_shift(geometry))
    return border if 2 * border < min(hw) else 0


def _test_psnr(network, test_lf, geometry, border):
    stack = forward_infer(network, test_lf, clamp=True, mode=geometry.mode)
    recon = reconstruct(stack, geometry)
    return evaluate_psnr(recon, test_lf, border), stack


def train(train_patches, test_lf, geometry, spec, config=None):
    """Train a network on light field patches; returns (Checkpoint, EvalReport).

    Deterministic given spec.seed and config.seed: initialization draws
    from spec.seed, batch shuffling from config.seed.
    """
    config = config or TrainConfig()
    if not train_patches:
        raise ValueError("empty training set")
    xs = np.stack([views_to_input(p)[0] for p in train_patches])  # (N, UV, h, w)
    if xs.shape[1] != spec.in_channels:
        raise ValueError(f"dataset has {xs.shape[1]} view channels, "
                         f"network expects {spec.in_channels}")
    if spec.out_channels != geometry.num_layers:
        raise ValueError("network output channels must match the layer count")

    network = build_network(spec)
    opt = AdamState(network.parameters(), lr=config.lr)
    shuffle_rng = np.random.default_rng(config.seed)
    border = _default_border(geometry, test_lf.views.shape[-2:])

    report = EvalReport()
    best_params = None
    n = xs.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        epoch_data_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = Tensor(xs[order[start:start + config.batch_size]])
            layers, head_pre = network.forward_training(batch)
            recon = reconstruct_tensor(layers, geometry)
            data_term = ad.mse_loss(recon, batch)
            # penalize the head pre-activation: past the final ReLU the
            # below-zero half of the range penalty would be unreachable
            # and silenced output channels could never recover
            loss = data_term + config.lambda_reg * ad.range_penalty(head_pre)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            ad.backward(loss)
            adam_step(network.parameters(), opt)
            epoch_data_loss += float(data_term.data) * batch.shape[0]
        epoch_data_loss /= n
        train_psnr = (99.0 if epoch_data_loss == 0 else
                      min(99.0, 10.0 * math.log10(1.0 / epoch_data_loss)))

        test_psnr = math.nan
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            test_psnr, _ = _test_psnr(network, test_lf, geometry, border)
            if test_psnr > report.best_test_psnr:
                report.best_test_psnr = test_psnr
                report.best_epoch = epoch
                best_params = {name: p.data.copy()
                               for name, p in network.named_parameters()}
        report.epochs.append((epoch, epoch_data_loss, train_psnr, test_psnr))

    for name, p in network.named_parameters():
        p.data[...] = best_params[name]
    ckpt = Checkpoint.from_network(network, metadata={
        "epoch": report.best_epoch,
        "test_psnr_db": report.best_test_psnr,
        "train_seed": config.seed,
        "init_seed": spec.seed,
    })
    _, best_stack = _test_psnr(network, test_lf, geometry, border)
    report.layer_means, report.uniformity_cv = layer_uniformity(best_stack)
    return ckpt, report


def bench_compare(test_lf, geometry, ckpt, iters=(20, 50, 100), repeats=5):
    """Wall-time network inference against iterative solves on one input.

    Returns rows (method, iters, psnr_db, ms); each timing is the median
    of `repeats` runs after one warmup. Timing excludes disk IO.
    """
    border = _default_border(geometry, test_lf.views.shape[-2:])
    network = ckpt.network()
    solve = solve_additive if geometry.mode == "additive" else solve_multiplicative

    def time_median(fn):
        fn()  # warmup
        times = []
        result = None
        for _ in range(repeats):
            t0 = time.perf_counter()
            result = fn()
            times.append((time.perf_counter() - t0) * 1e3)
        return result, statistics.median(times)

    rows = []
    stack, net_ms = time_median(
        lambda: forward_infer(network, test_lf, clamp=True, mode=geometry.mode))
    recon = reconstruct(stack, geometry)
    rows.append(("network", 0, evaluate_psnr(recon, test_lf, border), net_ms))
    for n_it in iters:
        cfg = SolveConfig(iterations=n_it, trace_every=max(1, n_it))
        (it_stack, _), it_ms = time_median(lambda: solve(test_lf, geometry, cfg))
        recon = reconstruct(it_stack, geometry)
        rows.append(("iterative", n_it, evaluate_psnr(recon, test_lf, border), it_ms))
    return rows


def write_bench_csv(rows, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("method,iters,psnr_db,ms\n")
        for method, n_it, psnr, ms in rows:
            f.write(f"{method},{n_it},{psnr:.6g},{ms:.6g}\n")
