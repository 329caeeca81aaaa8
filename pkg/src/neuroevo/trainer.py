"""Backpropagation through time, cost functions, gradient checks, evaluation.

Training minimizes the halved mean squared error 0.5 * sum((y - yhat)^2) / N
with plain SGD, either per-sample in dataset order (default) or full-batch.
Gradients flow only through unmasked weights; masked entries stay exactly 0.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDataset, LengthMismatch, NonFiniteGradient
from .lstm import GATES, Network, forward_batch

COST_FUNCTIONS = ("mse",)
BATCH_MODES = ("sample", "full")


@dataclass
class TrainConfig:
    epochs: int = 575
    learning_rate: float = 0.001  # 0 is legal: forward-only diagnostic pass
    seed: int = 0
    cost: str = "mse"
    shuffle: bool = False
    batch: str = "sample"
    clip_norm: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.cost not in COST_FUNCTIONS:
            raise ValueError(f"unknown cost {self.cost!r}")
        if self.batch not in BATCH_MODES:
            raise ValueError(f"unknown batch mode {self.batch!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when set")


@dataclass
class TrainReport:
    cost_history: np.ndarray
    final_train_mse: float
    test_mse: float
    test_mae: float
    wall_time_s: float


def _check_pair(predictions, targets):
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size != t.size:
        raise LengthMismatch(f"{p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise EmptyDataset("cost over zero samples")
    return p, t


def mse_cost(predictions, targets) -> float:
    """Halved mean squared error: 0.5 * sum((y - yhat)^2) / N."""
    p, t = _check_pair(predictions, targets)
    d = t - p
    return 0.5 * float(d @ d) / p.size


def mae_cost(predictions, targets) -> float:
    """Mean absolute error: sum(|y - yhat|) / N."""
    p, t = _check_pair(predictions, targets)
    return float(np.abs(t - p).sum()) / p.size


# --- gradients ---

def _gate_backward(dpq_by_gate, cell, x_t, a_prev, keep_w, keep_u, grads, key_prefix):
    """Accumulate one step's gate gradients; returns (dx_t, da_prev)."""
    dx = None
    da = None
    for q in GATES:
        dpq = dpq_by_gate[q]
        gw = cell.gates[q]
        w_eff = np.where(keep_w, gw.w, 0.0) if keep_w is not None else gw.w
        u_eff = np.where(keep_u, gw.u, 0.0) if keep_u is not None else gw.u
        dW = x_t.T @ dpq
        dU = a_prev.T @ dpq
        if keep_w is not None:
            dW *= keep_w
        if keep_u is not None:
            dU *= keep_u
        grads[key_prefix + (q, "w")] = dW
        grads[key_prefix + (q, "u")] = dU
        grads[key_prefix + (q, "bias")] = dpq.sum(axis=0)
        dx = dpq @ w_eff.T if dx is None else dx + dpq @ w_eff.T
        da = dpq @ u_eff.T if da is None else da + dpq @ u_eff.T
    return dx, da


def _track_backward(cells, states, inputs, d_out, keep_w, keep_u, grads, label, width):
    """BPTT over one cell track (an M1 level or the M2 column).

    d_out is (B, T, width): the loss gradient arriving at each step's output.
    Returns the (B, T, n) gradient with respect to the track's inputs.
    """
    B, T = d_out.shape[0], len(cells)
    d_inputs = np.zeros_like(inputs)
    da_carry = np.zeros((B, width))
    dc_carry = np.zeros((B, width))
    for t in reversed(range(T)):
        st = states[t]
        if t > 0:
            a_prev, c_prev = states[t - 1].a, states[t - 1].c
        else:
            a_prev = np.zeros((B, width))
            c_prev = np.zeros((B, width))
        da = d_out[:, t, :] + da_carry
        dc = dc_carry + da * st.o * st.s * (1.0 - st.s)
        dpq = {
            "o": da * st.s * st.o * (1.0 - st.o),
            "f": dc * c_prev * st.f * (1.0 - st.f),
            "i": dc * st.g * st.i * (1.0 - st.i),
            "g": dc * st.i * st.g * (1.0 - st.g),
        }
        dx, da_carry = _gate_backward(dpq, cells[t], inputs[:, t, :], a_prev,
                                      keep_w, keep_u, grads, label + (t,))
        d_inputs[:, t, :] = dx
        dc_carry = dc * st.f
    return d_inputs


def _forward_backward(net: Network, X, y):
    """Cost and gradients for a batch: cost = 0.5 * sum(err^2) / B.

    Returns (cost, grads) where grads maps parameter keys to arrays. Masked
    coordinates carry exactly zero gradient because the forward pass never
    reads them.
    """
    y = np.asarray(y, dtype=np.float64)
    # Overflow/invalid warnings are noise here: non-finite outcomes surface
    # as NonFiniteGradient at the call sites.
    with np.errstate(over="ignore", invalid="ignore"):
        preds, caches = forward_batch(net, X, want_caches=True)
        B = preds.shape[0]
        err = preds - y
        cost = 0.5 * float(err @ err) / B
        dpred = err / B
        grads = {}
        if net.combiner is not None:
            grads[("combiner",)] = caches["m2_outs"].T @ dpred
            d_m2out = np.outer(dpred, net.combiner)
        else:
            d_m2out = np.repeat(dpred[:, None], net.T, axis=1) / net.T
        keep_m1 = net.mesh.m1.astype(bool)
        keep_m2 = net.mesh.m2.astype(bool)[:, None]
        d_flow = _track_backward(
            net.m2_cells, caches["m2_states"], caches["level_inputs"][-1],
            d_m2out[:, :, None], keep_m2, None, grads, ("m2",), width=1,
        )
        for ell in reversed(range(len(net.m1_levels))):
            d_flow = _track_backward(
                net.m1_levels[ell], caches["m1_states"][ell], caches["level_inputs"][ell],
                d_flow, keep_m1, keep_m1, grads, ("m1", ell), width=net.n_inputs,
            )
    return cost, grads


def _param_slots(net: Network):
    """(key, array) pairs in a fixed order matching the gradient keys."""
    for ell, level in enumerate(net.m1_levels):
        for t, cell in enumerate(level):
            for q in GATES:
                gw = cell.gates[q]
                yield ("m1", ell, t, q, "w"), gw.w
                yield ("m1", ell, t, q, "u"), gw.u
                yield ("m1", ell, t, q, "bias"), gw.bias
    for t, cell in enumerate(net.m2_cells):
        for q in GATES:
            gw = cell.gates[q]
            yield ("m2", t, q, "w"), gw.w
            yield ("m2", t, q, "u"), gw.u
            yield ("m2", t, q, "bias"), gw.bias
    if net.combiner is not None:
        yield ("combiner",), net.combiner


def _apply_grads(net: Network, grads, lr: float, clip_norm):
    with np.errstate(over="ignore", invalid="ignore"):
        if clip_norm is not None:
            sq = sum(float((g * g).sum()) for g in grads.values())
            norm = sq ** 0.5
            if norm > clip_norm:
                lr *= clip_norm / norm
        for key, arr in _param_slots(net):
            arr -= lr * grads[key]


def _params_finite(net: Network) -> bool:
    return all(np.isfinite(arr).all() for _, arr in _param_slots(net))


def backprop_epoch(net: Network, data, cfg: TrainConfig, rng=None) -> float:
    """One pass over the dataset; updates ``net`` in place.

    Returns the epoch cost: the training-set cost at the update point for
    full-batch mode, or the training-set cost after the epoch's updates for
    per-sample mode (a clean forward pass, not a running average).
    """
    if len(data) == 0:
        raise EmptyDataset("training dataset is empty")
    if data.T != net.T:
        raise LengthMismatch(f"dataset windows T={data.T}, network T={net.T}")
    if cfg.batch == "full":
        cost, grads = _forward_backward(net, data.X, data.y)
        if not np.isfinite(cost):
            raise NonFiniteGradient(f"full-batch cost {cost!r}")
        _apply_grads(net, grads, cfg.learning_rate, cfg.clip_norm)
        if not _params_finite(net):
            raise NonFiniteGradient("weights left the finite range after a full-batch update")
        return cost
    order = np.arange(len(data))
    if cfg.shuffle:
        (rng or np.random.default_rng(cfg.seed)).shuffle(order)
    for i in order:
        cost, grads = _forward_backward(net, data.X[i:i + 1], data.y[i:i + 1])
        if not np.isfinite(cost):
            raise NonFiniteGradient(f"cost {cost!r} at sample {int(i)} (flight {data.flight_ids[int(i)]})")
        _apply_grads(net, grads, cfg.learning_rate, cfg.clip_norm)
    if not _params_finite(net):
        raise NonFiniteGradient("weights left the finite range during the epoch")
    return mse_cost(forward_batch(net, data.X), data.y)


def train(net: Network, train_data, test_data, cfg: TrainConfig) -> TrainReport:
    """Run cfg.epochs over the training set, then evaluate on the test set."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    history = np.empty(cfg.epochs)
    for epoch in range(cfg.epochs):
        history[epoch] = backprop_epoch(net, train_data, cfg, rng=rng)
    final_train = mse_cost(forward_batch(net, train_data.X), train_data.y)
    measures = evaluate(net, test_data)
    return TrainReport(
        cost_history=history,
        final_train_mse=final_train,
        test_mse=measures["mse"],
        test_mae=measures["mae"],
        wall_time_s=time.perf_counter() - t0,
    )


def evaluate(net: Network, test) -> dict:
    """Forward-only measures over a dataset: {"mse": ..., "mae": ...}."""
    if len(test) == 0:
        raise EmptyDataset("evaluation dataset is empty")
    preds = forward_batch(net, test.X)
    return {"mse": mse_cost(preds, test.y), "mae": mae_cost(preds, test.y)}


def gradient_check(net: Network, sample, eps: float = 1e-6,
                   max_coords: int = 600, subset_seed: int = 0) -> float:
    """Central-difference check of the analytic gradient on one sample.

    ``sample`` is an (X, y) pair. Every unmasked coordinate is checked, or a
    seeded random subset of ``max_coords`` when the network is larger.
    Returns max |g_a - g_n| / max(1e-12, |g_a| + |g_n|).
    """
    if not 1e-8 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-8, 1e-3]")
    X, y = sample
    X = np.asarray(X, dtype=np.float64)[None]
    y = np.asarray([y], dtype=np.float64)
    _, grads = _forward_backward(net, X, y)

    keep_m1 = net.mesh.m1.astype(bool)
    keep_m2 = net.mesh.m2.astype(bool)[:, None]
    coords = []
    for key, arr in _param_slots(net):
        if key[0] == "m1" and key[-1] in ("w", "u"):
            live = np.argwhere(keep_m1)
        elif key[0] == "m2" and key[-1] == "w":
            live = np.argwhere(keep_m2)
        else:
            live = np.argwhere(np.ones(arr.shape, dtype=bool))
        for idx in live:
            coords.append((key, arr, tuple(idx)))
    if len(coords) > max_coords:
        rng = np.random.default_rng(subset_seed)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[p] for p in picks]

    def cost_only():
        preds = forward_batch(net, X)
        return 0.5 * float((preds[0] - y[0]) ** 2)

    worst = 0.0
    for key, arr, idx in coords:
        orig = arr[idx]
        arr[idx] = orig + eps
        hi = cost_only()
        arr[idx] = orig - eps
        lo = cost_only()
        arr[idx] = orig
        g_n = (hi - lo) / (2 * eps)
        g_a = float(grads[key][idx])
        rel = abs(g_a - g_n) / max(1e-12, abs(g_a) + abs(g_n))
        worst = max(worst, rel)
    return worst


def write_train_report(report: TrainReport, path) -> None:
    """CSV of per-epoch cost plus a trailing summary comment line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,cost\n")
        for epoch, cost in enumerate(report.cost_history, start=1):
            fh.write(f"{epoch},{float(cost)!r}\n")
        fh.write(
            f"# final_train_mse={float(report.final_train_mse)!r}"
            f" test_mse={float(report.test_mse)!r}"
            f" test_mae={float(report.test_mae)!r}"
            f" wall_time_s={report.wall_time_s:.3f}\n"
        )
