"""Episodic end-to-end training, the optimizers and SwitchNet's offline/online recipes."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape
from .channel import EpisodeBatch, episode_batch_from_taps, query_mask
from .config import Config, TrainConfig
from .dataset import Dataset
from .models import Model, SwitchNet, switchnet_forward

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["epoch", "step", "loss_total", "loss_init", "loss_ce", "wall_ms"]


class NonFiniteLossError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """Bias-corrected Adam; returns new parameter arrays and mutates ``state``."""
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ad.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        if lr == 0:
            out[name] = p.copy()
            continue
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        out[name] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return out


def sgd_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> dict:
    state.step += 1
    return {k: p - lr * grads[k] for k, p in params.items()}


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

def sample_batch(dataset: Dataset, batch_size: int, n: int, snr_db: float, rng: np.random.Generator,
                 scenario_mix=None, pdp_pool: dict[int, np.ndarray] | None = None) -> EpisodeBatch:
    """Episodes whose support and query come from one uniformly drawn training PDP.

    The scenario is drawn per episode (``scenario_mix`` weights, uniform by
    default), so scenarios interleave within a batch.
    """
    S = dataset.num_scenarios
    if S == 0:
        raise ValueError("empty dataset")
    pool = pdp_pool or {s: dataset.train_pdp_indices(s) for s in range(S)}
    scenarios = [s for s in range(S) if len(pool.get(s, ())) > 0]
    if not scenarios:
        raise ValueError("no PDPs available for sampling")
    weights = None
    if scenario_mix is not None:
        weights = np.asarray([scenario_mix[s] for s in scenarios], dtype=float)
        weights = weights / weights.sum()
    scen = rng.choice(scenarios, size=batch_size, p=weights)
    R = dataset.scenarios[0].taps.shape[1]
    if n + 1 > R:
        raise ValueError(f"episodes need {n + 1} realizations, PDPs hold {R}")
    L = dataset.scenarios[0].taps.shape[2]
    q_taps = np.empty((batch_size, L), dtype=np.complex128)
    s_taps = np.empty((batch_size, n, L), dtype=np.complex128)
    pdp_ids = np.empty(batch_size, dtype=np.int64)
    for b, s in enumerate(scen):
        p = int(rng.choice(pool[s]))
        idx = rng.choice(R, size=n + 1, replace=False)
        taps = dataset.scenarios[s].taps[p]
        q_taps[b] = taps[idx[0]]
        s_taps[b] = taps[idx[1:]]
        pdp_ids[b] = dataset.scenarios[s].pdps[p].pdp_id
    return episode_batch_from_taps(q_taps, s_taps, query_mask(), snr_db, rng, pdp_ids, scenario_ids=scen)


# ---------------------------------------------------------------------------
# one optimisation step
# ---------------------------------------------------------------------------

def target_bounds(dataset: Dataset) -> tuple[float, float]:
    lo, hi = math.inf, -math.inf
    for s in range(dataset.num_scenarios):
        taps = dataset.scenarios[s].taps[dataset.train_pdp_indices(s)]
        H = np.fft.fft(taps, n=len(query_mask()), axis=-1)
        lo = min(lo, float(H.real.min()), float(H.imag.min()))
        hi = max(hi, float(H.real.max()), float(H.imag.max()))
    return lo, hi


def compute_losses(model: Model, batch: EpisodeBatch, params: dict, loss_kind: str = "mse"):
    """Forward pass and the two loss terms (initialisation loss, CE loss)."""
    res = model.forward(batch.support, batch.query, params)
    truth = batch.truth
    if loss_kind == "mse":
        loss_fn = ad.mse_loss
        raw_target = truth
        squash = lambda t: t  # noqa: E731
    else:
        lo, hi = model.output_bounds()
        raw_target = np.clip((truth - lo) / (hi - lo), 0.0, 1.0)
        loss_fn = ad.bce_loss
        squash = ad.sigmoid
    loss_ce = loss_fn(squash(res.h_est), raw_target)
    loss_init = loss_fn(squash(res.s_initial), raw_target) if res.s_initial is not None else None
    return res, loss_init, loss_ce


def gradients(model: Model, batch: EpisodeBatch, loss_kind: str = "mse"):
    """Joint gradient of the two loss terms; also reports untouched parameters."""
    tape = GradientTape()
    P = {k: tape.watch(v) for k, v in model.params.items()}
    _, loss_init, loss_ce = compute_losses(model, batch, P, loss_kind)
    total = loss_ce if loss_init is None else ad.add(loss_init, loss_ce)
    vals = {
        "loss_total": total.item(),
        "loss_init": 0.0 if loss_init is None else loss_init.item(),
        "loss_ce": loss_ce.item(),
    }
    if not all(math.isfinite(v) for v in vals.values()):
        raise NonFiniteLossError(f"non-finite loss {vals}")
    tape.backward(total)
    untouched = [k for k, t in P.items() if t.grad_id not in tape.gradients]
    grads = {k: tape.grad(t) for k, t in P.items()}
    tape.release()
    return grads, vals, untouched


def train_step(model: Model, batch: EpisodeBatch, cfg: TrainConfig, opt_state: OptimizerState):
    grads, vals, untouched = gradients(model, batch, cfg.loss_kind)
    if untouched:
        raise RuntimeError(f"parameters received no gradient: {untouched}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteLossError(f"non-finite gradient for {k}")
    if cfg.optimizer == "adam":
        new = adam_step(model.params, grads, opt_state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    else:
        new = sgd_step(model.params, grads, opt_state, cfg.learning_rate)
    return vals, Model(model.kind, model.cfg, new, model.meta)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _streams(seed: int):
    init_ss, data_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(data_ss)


def train(model_kind: str, dataset: Dataset, config: Config, curve_path=None, pdp_pool=None,
          record_wall_time: bool = True) -> tuple[Model, list[dict]]:
    """Fixed-budget episodic training; deterministic for a fixed ``config.train.seed``."""
    tc = config.train
    tc.validate()
    init_rng, data_rng = _streams(tc.seed)
    model = Model(model_kind, config.model, {})
    from .models import init_params
    model.params = init_params(model_kind, config.model, init_rng)
    if tc.loss_kind == "bce_scaled":
        model.meta["target_bounds"] = list(target_bounds(dataset))
    model.meta.update({"loss_kind": tc.loss_kind, "train_seed": tc.seed, "n_support": tc.n_support})
    grid = list(tc.n_support_train_grid) if model.needs_support else []
    n = tc.n_support if model.needs_support else 0
    steps_per_epoch = max(1, tc.episodes_per_epoch // tc.batch_size)
    state = OptimizerState()
    rows = []
    t0 = time.perf_counter()
    step = 0
    for epoch in range(tc.epochs):
        for _ in range(steps_per_epoch):
            if grid:
                n = int(grid[data_rng.integers(len(grid))])
            batch = sample_batch(dataset, tc.batch_size, n, tc.train_snr_db, data_rng, pdp_pool=pdp_pool)
            vals, model = train_step(model, batch, tc, state)
            step += 1
            wall = int((time.perf_counter() - t0) * 1000) if record_wall_time else 0
            rows.append({"epoch": epoch, "step": step, **vals, "wall_ms": wall})
        log.info("%s epoch %d loss %.5g", model_kind, epoch, rows[-1]["loss_total"])
    if curve_path is not None:
        write_curve(curve_path, rows)
    return model, rows


def write_curve(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], r["step"], repr(r["loss_total"]), repr(r["loss_init"]),
                        repr(r["loss_ce"]), r["wall_ms"]])


# ---------------------------------------------------------------------------
# SwitchNet
# ---------------------------------------------------------------------------

def _ridge(X: np.ndarray, Y: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Least squares ``Y ~ X W^T + b`` with a ridge penalty on ``W``."""
    Xa = np.hstack([X, np.ones((len(X), 1))])
    reg = lam * len(X) * np.eye(Xa.shape[1])
    reg[-1, -1] = 0.0
    beta = np.linalg.solve(Xa.T @ Xa + reg, Xa.T @ Y)
    return beta[:-1].T, beta[-1]


def switchnet_samples(dataset: Dataset, scenario: int, count: int, snr_db: float, rng,
                      pdp_indices=None) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (query LS, truth) pairs from one scenario's training PDPs (or the given subset)."""
    idx = dataset.train_pdp_indices(scenario) if pdp_indices is None else np.asarray(pdp_indices)
    pool = {s: (idx if s == scenario else np.array([], dtype=int)) for s in range(dataset.num_scenarios)}
    b = sample_batch(dataset, count, 0, snr_db, rng, pdp_pool=pool)
    return b.query.reshape(count, -1), b.truth.reshape(count, -1)


def compensator_assignment(dataset: Dataset, M: int) -> list[tuple[int, np.ndarray]]:
    """Scenario and PDP subset for compensators ``1..M``.

    Compensator ``i`` targets scenario ``i mod S``; when several compensators
    share a scenario they split its training PDPs into disjoint chunks.
    """
    S = dataset.num_scenarios
    scen = [i % S for i in range(1, M + 1)]
    out = []
    for i, s in enumerate(scen):
        k = scen.count(s)
        chunks = np.array_split(dataset.train_pdp_indices(s), k)
        if any(len(c) == 0 for c in chunks):
            raise ValueError(f"scenario {s} has too few training PDPs for {k} compensators")
        out.append((s, chunks[scen[:i].count(s)]))
    return out


def switchnet_offline_train(dataset: Dataset, M: int, config: Config) -> SwitchNet:
    """SubNet 0 on scenario 0, then compensator ``i`` on scenario ``i mod S`` with earlier weights frozen.

    Each subnet is a single affine map, so every stage is solved exactly by
    ridge least squares under its fixed alpha indicator (``e_0``, then
    ``e_0 + e_i``).
    """
    if M < 1:
        raise ValueError(f"M = {M} must be >= 1")
    tc = config.train
    assign = compensator_assignment(dataset, M)
    rng = np.random.default_rng(np.random.SeedSequence(tc.seed, spawn_key=(7,)))
    per = tc.switchnet_samples_per_scenario
    W0, th0 = _ridge(*switchnet_samples(dataset, 0, per, tc.train_snr_db, rng), tc.switchnet_ridge)
    params = {"sw.W0": W0, "sw.theta0": th0}
    for i, (s, idx) in enumerate(assign, start=1):
        X, Y = switchnet_samples(dataset, s, per, tc.train_snr_db, rng, idx)
        Z = X @ W0.T + th0
        # h = (W_i + I) z + theta_i
        params[f"sw.W{i}"], params[f"sw.theta{i}"] = _ridge(Z, Y - Z, tc.switchnet_ridge)
    params["sw.alpha"] = np.eye(M + 1)[0]
    return SwitchNet(params, config.model.w, meta={"compensator_scenarios": [s for s, _ in assign]})


@dataclass
class AdaptResult:
    alpha: np.ndarray
    mse_history: list[float]
    trainable: int

    @property
    def final_mse(self) -> float:
        return self.mse_history[-1]


def switchnet_online_adapt(net: SwitchNet, h_ls: np.ndarray, h_true: np.ndarray, steps: int, lr: float) -> AdaptResult:
    """Gradient descent on alpha only (``M + 1`` scalars); subnet weights stay frozen."""
    if len(h_ls) == 0:
        raise ValueError("online adaptation needs at least one labelled support block")
    B = len(h_ls)
    X = h_ls.reshape(B, -1)
    Y = h_true.reshape(B, -1)
    alpha = net.params["sw.alpha"].copy()
    history = []
    for _ in range(steps + 1):
        tape = GradientTape()
        a = tape.watch(alpha)
        loss = ad.mse_loss(switchnet_forward(net.params, X, a), Y)
        history.append(loss.item())
        if len(history) == steps + 1:
            break
        tape.backward(loss)
        alpha = alpha - lr * tape.grad(a)
    return AdaptResult(alpha, history, alpha.size)
