"""Evaluation protocol: episode generation for held-out PDPs, MSE rows, trend checks and the experiment runners."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape
from .channel import (EpisodeBatch, PowerDelayProfile, episode_batch_from_taps, interpolate_pilots,
                      query_mask, realize_taps)
from .config import Config
from .dataset import Dataset
from .models import SwitchNet

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["experiment", "model", "scenario", "pdp_id", "snr_db", "n_support", "seed", "mse"]


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    model: str
    scenario: str
    pdp_id: int
    snr_db: float
    n_support: int
    seed: int
    mse: float

    def __post_init__(self):
        if not self.mse >= 0:
            raise ValueError(f"mse must be non-negative, got {self.mse}")

    def sort_key(self):
        return (self.experiment, self.model, self.scenario, self.pdp_id, self.snr_db, self.n_support, self.seed)


def mse(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-episode mean squared error over the ``2w`` real coordinates."""
    d = (estimate - truth).reshape(len(truth), -1)
    return np.mean(d * d, axis=1)


# ---------------------------------------------------------------------------
# evaluation episodes
# ---------------------------------------------------------------------------

def _snr_key(snr_db: float) -> int:
    if math.isinf(snr_db) and snr_db > 0:
        return 2**31  # noiseless
    return int(round(snr_db * 1000))


def eval_batch(query_pdp: PowerDelayProfile, support_pdp: PowerDelayProfile | None, n: int, snr_db: float,
               samples: int, seed: int, scenario_id: int = 0, stream: int = 0) -> EpisodeBatch:
    """Evaluation episodes for one (PDP, SNR, n, seed) point.

    Query channels and query noise depend only on (query PDP, SNR, seed), so
    curves over ``n`` or over support PDPs are paired on identical queries.
    """
    support_pdp = query_pdp if support_pdp is None else support_pdp
    key = _snr_key(snr_db) * 16 + stream
    q_ss = np.random.SeedSequence(seed, spawn_key=(query_pdp.pdp_id, key, 0))
    s_ss = np.random.SeedSequence(seed, spawn_key=(query_pdp.pdp_id, key, 1, support_pdp.pdp_id, n))
    noise_ss = np.random.SeedSequence(seed, spawn_key=(query_pdp.pdp_id, key, 2))
    q_taps = realize_taps(query_pdp, samples, q_ss)
    qmask = query_mask()
    b = episode_batch_from_taps(q_taps, np.zeros((samples, 0, q_taps.shape[1]), dtype=complex), qmask,
                                snr_db, np.random.default_rng(noise_ss), np.full(samples, query_pdp.pdp_id),
                                scenario_ids=np.full(samples, scenario_id))
    if n:
        s_taps = realize_taps(support_pdp, samples * n, s_ss).reshape(samples, n, -1)
        s_noise = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(query_pdp.pdp_id, key, 3,
                                                                              support_pdp.pdp_id, n)))
        sb = episode_batch_from_taps(s_taps[:, 0], s_taps, qmask, snr_db, s_noise,
                                     np.full(samples, support_pdp.pdp_id))
        b = EpisodeBatch(sb.support, b.query, b.truth, b.pdp_ids, np.full(samples, support_pdp.pdp_id),
                         b.scenario_ids)
    return b


class Estimator:
    """Uniform predict interface over trained models and the closed-form baseline."""

    def __init__(self, name: str, model=None, batch_size: int = 250):
        self.name = name
        self.model = model
        self.batch_size = batch_size

    @property
    def needs_support(self) -> bool:
        return self.model is not None and self.model.needs_support

    def predict(self, batch: EpisodeBatch) -> np.ndarray:
        if self.model is None:
            return interpolate_pilots(batch.query, query_mask(batch.query.shape[1]))
        return self.model.predict(batch.support, batch.query, self.batch_size)


def evaluate_point(est: Estimator, dataset: Dataset, pdp_id: int, snr_db: float, n: int, samples: int,
                   seed: int, support_pdp_id: int | None = None) -> float:
    s, _ = dataset.locate(pdp_id)
    pdp = dataset.pdp(pdp_id)
    sup = None if support_pdp_id is None else dataset.pdp(support_pdp_id)
    batch = eval_batch(pdp, sup, n if est.needs_support else 0, snr_db, samples, seed, s)
    return float(np.mean(mse(est.predict(batch), batch.truth)))


def heldout_pdp_ids(dataset: Dataset, per_scenario: int = 0) -> list[int]:
    ids = []
    for s in range(dataset.num_scenarios):
        idx = dataset.heldout_pdp_indices(s)
        if per_scenario:
            idx = idx[:per_scenario]
        ids.extend(dataset.scenarios[s].pdps[i].pdp_id for i in idx)
    return ids


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def rows_to_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in sorted(rows, key=ResultRow.sort_key):
        w.writerow([r.experiment, r.model, r.scenario, r.pdp_id, repr(float(r.snr_db)), r.n_support, r.seed,
                    repr(float(r.mse))])
    return buf.getvalue()


def write_results(path, rows: list[ResultRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(rows_to_csv(rows).encode("utf-8"))
    return path


def read_results(path) -> list[ResultRow]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULT_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [ResultRow(r["experiment"], r["model"], r["scenario"], int(r["pdp_id"]), float(r["snr_db"]),
                          int(r["n_support"]), int(r["seed"]), float(r["mse"])) for r in reader]


# ---------------------------------------------------------------------------
# aggregation and trend checks
# ---------------------------------------------------------------------------

def seed_means(rows: list[ResultRow], model: str, experiment: str | None = None, **where) -> dict[int, float]:
    """Mean MSE over matching rows, one value per seed."""
    acc: dict[int, list[float]] = {}
    for r in rows:
        if r.model != model or (experiment is not None and r.experiment != experiment):
            continue
        if any(getattr(r, k) != v for k, v in where.items()):
            continue
        acc.setdefault(r.seed, []).append(r.mse)
    return {s: float(np.mean(v)) for s, v in sorted(acc.items())}


def median_over_seeds(rows: list[ResultRow], model: str, experiment: str | None = None, **where) -> float:
    vals = list(seed_means(rows, model, experiment, **where).values())
    return float(np.median(vals)) if vals else math.nan


@dataclass
class TrendCheck:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def ordered(values: list[float], strict: bool = True) -> bool:
    """True when ``values`` decrease (strictly by default); NaN never passes."""
    if any(not math.isfinite(v) for v in values):
        return False
    pairs = zip(values, values[1:])
    return all(a > b for a, b in pairs) if strict else all(a >= b for a, b in pairs)


def _fmt(vals) -> str:
    return ", ".join(f"{v:.4g}" for v in vals)


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------

def run_eval_snr(estimators: list[Estimator], dataset: Dataset, cfg: Config, seed: int,
                 experiment: str = "eval_snr", snr_grid=None, pdp_ids=None) -> list[ResultRow]:
    exp = cfg.experiment
    n = cfg.train.n_support
    pdp_ids = heldout_pdp_ids(dataset, exp.eval_pdps_per_scenario) if pdp_ids is None else pdp_ids
    rows = []
    for est in estimators:
        for pid in pdp_ids:
            scen = dataset.pdp(pid).scenario_name
            for snr in (exp.snr_grid_db if snr_grid is None else snr_grid):
                v = evaluate_point(est, dataset, pid, snr, n, exp.eval_samples, seed)
                rows.append(ResultRow(experiment, est.name, scen, pid, float(snr),
                                      n if est.needs_support else 0, seed, v))
    return rows


def check_snr_trend(rows: list[ResultRow], better: str, worse: str, snrs) -> TrendCheck:
    a = [median_over_seeds(rows, better, snr_db=float(s)) for s in snrs]
    b = [median_over_seeds(rows, worse, snr_db=float(s)) for s in snrs]
    ok = all(math.isfinite(x) and math.isfinite(y) and x <= y for x, y in zip(a, b))
    return TrendCheck(f"{better} <= {worse}", ok,
                      f"SNR {list(snrs)}: {better} [{_fmt(a)}] vs {worse} [{_fmt(b)}]")


def run_sweep_support(fsl: Estimator, zero_shot: Estimator, dataset: Dataset, cfg: Config, seed: int) -> list[ResultRow]:
    exp = cfg.experiment
    snr = exp.sweep_snr_db
    rows = []
    for pid in heldout_pdp_ids(dataset, exp.eval_pdps_per_scenario):
        scen = dataset.pdp(pid).scenario_name
        for n in exp.n_support_grid:
            est = zero_shot if n == 0 else fsl
            v = evaluate_point(est, dataset, pid, snr, n, exp.eval_samples, seed)
            rows.append(ResultRow("sweep_support", fsl.name, scen, pid, float(snr), n, seed, v))
    return rows


def check_support_trend(rows: list[ResultRow], model: str = "fsl_full", tol: float = 0.10) -> list[TrendCheck]:
    med = {n: median_over_seeds(rows, model, "sweep_support", n_support=n) for n in (0, 1, 16, 32)}
    seq = [med[0], med[1], med[16]]
    plateau = (math.isfinite(med[16]) and math.isfinite(med[32])
               and abs(med[32] - med[16]) <= tol * med[16])
    return [
        TrendCheck("MSE(n=0) > MSE(n=1) > MSE(n=16)", ordered(seq), f"[{_fmt(seq)}]"),
        TrendCheck(f"MSE(n=32) within {tol:.0%} of MSE(n=16)", plateau, f"{med[32]:.4g} vs {med[16]:.4g}"),
    ]


def mismatch_partners(dataset: Dataset, pdp_id: int) -> tuple[int, int]:
    """Deterministic partners: the next held-out PDP of the same scenario and the matching one of the next scenario."""
    s, p = dataset.locate(pdp_id)
    held = list(dataset.heldout_pdp_indices(s))
    if len(held) < 2:
        raise ValueError("mismatch study needs at least 2 held-out PDPs per scenario")
    if dataset.num_scenarios < 2:
        raise ValueError("cross-scenario mismatch needs at least 2 scenarios")
    k = held.index(p)
    same = dataset.scenarios[s].pdps[held[(k + 1) % len(held)]].pdp_id
    s2 = (s + 1) % dataset.num_scenarios
    held2 = dataset.heldout_pdp_indices(s2)
    cross = dataset.scenarios[s2].pdps[held2[k % len(held2)]].pdp_id
    return same, cross


def run_mismatch(fsl: Estimator, dataset: Dataset, cfg: Config, seed: int, snr_grid=None) -> list[ResultRow]:
    exp = cfg.experiment
    n = cfg.train.n_support
    rows = []
    for pid in heldout_pdp_ids(dataset, exp.eval_pdps_per_scenario):
        scen = dataset.pdp(pid).scenario_name
        same, cross = mismatch_partners(dataset, pid)
        for snr in (snr_grid or [exp.mismatch_snr_db]):
            for label, sup in (("matched", None), ("same", same), ("cross", cross)):
                v = evaluate_point(fsl, dataset, pid, snr, n, exp.eval_samples, seed, support_pdp_id=sup)
                rows.append(ResultRow(f"mismatch_{label}", fsl.name, scen, pid, float(snr), n, seed, v))
    return rows


def check_mismatch_trend(rows: list[ResultRow], model: str, snr_db: float) -> TrendCheck:
    med = [median_over_seeds(rows, model, e, snr_db=float(snr_db))
           for e in ("mismatch_cross", "mismatch_same", "mismatch_matched")]
    return TrendCheck("matched < mismatch_same < mismatch_cross", ordered(med),
                      f"at {snr_db:g} dB: cross, same, matched = [{_fmt(med)}]")


# ---------------------------------------------------------------------------
# scenario separability
# ---------------------------------------------------------------------------

def _classifier_params(rng, k: int, d: int, hidden: int = 32) -> dict:
    return {
        "c.fc0.w": rng.normal(0, math.sqrt(2 / d), (hidden, d)), "c.fc0.b": np.zeros(hidden),
        "c.fc1.w": rng.normal(0, math.sqrt(1 / hidden), (k, hidden)), "c.fc1.b": np.zeros(k),
    }


def _classifier_logits(params, x):
    h = ad.relu(ad.dense(x, params["c.fc0.w"], params["c.fc0.b"]))
    return ad.dense(h, params["c.fc1.w"], params["c.fc1.b"])


def _classifier_inputs(H: np.ndarray) -> np.ndarray:
    """Per-realization features: cumulative and log delay-power profile, ``B x 2w``.

    Delay position is what tells scenarios apart, so the head is dense rather
    than pooled.
    """
    h = np.fft.ifft(H[..., 0] + 1j * H[..., 1], axis=-1)
    p = np.abs(h) ** 2
    p = p / np.maximum(p.sum(axis=-1, keepdims=True), 1e-300)
    return np.concatenate([np.cumsum(p, axis=-1), np.log10(p + 1e-4)], axis=-1)


@dataclass
class SeparabilityReport:
    accuracy: float
    confusion: list[list[int]]
    scenarios: list[str]

    def text(self) -> str:
        lines = [f"held-out accuracy {self.accuracy:.4f}", "confusion (rows = true, cols = predicted):"]
        width = max(len(s) for s in self.scenarios)
        lines.append(" " * (width + 2) + " ".join(f"{s:>{width}}" for s in self.scenarios))
        for s, row in zip(self.scenarios, self.confusion):
            lines.append(f"{s:>{width}}  " + " ".join(f"{c:>{width}d}" for c in row))
        return "\n".join(lines)


def _realization_set(dataset: Dataset, split: str, per_pdp: int, snr_db: float, rng):
    X, y = [], []
    for s in range(dataset.num_scenarios):
        idx = dataset.train_pdp_indices(s) if split == "train" else dataset.heldout_pdp_indices(s)
        taps = dataset.scenarios[s].taps[idx][:, :per_pdp].reshape(-1, dataset.scenarios[s].taps.shape[-1])
        H = np.fft.fft(taps, n=len(query_mask()), axis=-1)
        sigma = math.sqrt(10 ** (-snr_db / 10) / 2)
        H = H + sigma * (rng.normal(size=H.shape) + 1j * rng.normal(size=H.shape))
        X.append(_classifier_inputs(np.stack([H.real, H.imag], axis=-1)))
        y.append(np.full(len(taps), s))
    return np.concatenate(X), np.concatenate(y)


def run_separability(dataset: Dataset, cfg: Config, seed: int, per_pdp: int = 40, batch: int = 128,
                     lr: float = 3e-3) -> SeparabilityReport:
    """Train a small MLP (one full-band realization -> scenario) and score held-out PDPs."""
    from .training import OptimizerState, adam_step
    S = dataset.num_scenarios
    if S < 2:
        raise ValueError("separability needs at least two scenarios")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    Xtr, ytr = _realization_set(dataset, "train", per_pdp, cfg.train.train_snr_db, rng)
    Xte, yte = _realization_set(dataset, "heldout", per_pdp, cfg.train.train_snr_db, rng)
    mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0) + 1e-6
    Xtr, Xte = (Xtr - mu) / sd, (Xte - mu) / sd
    params = _classifier_params(rng, S, Xtr.shape[1])
    state = OptimizerState()
    for _ in range(cfg.experiment.classifier_epochs):
        order = rng.permutation(len(Xtr))
        for lo in range(0, len(order), batch):
            sel = order[lo:lo + batch]
            tape = GradientTape()
            P = {k: tape.watch(v) for k, v in params.items()}
            loss = ad.cross_entropy(_classifier_logits(P, Xtr[sel]), ytr[sel])
            tape.backward(loss)
            grads = {k: tape.grad(t) for k, t in P.items()}
            tape.release()
            params = adam_step(params, grads, state, lr)
    pred = np.argmax(_classifier_logits(params, Xte).data, axis=1)
    conf = np.zeros((S, S), dtype=int)
    np.add.at(conf, (yte, pred), 1)
    return SeparabilityReport(float(np.mean(pred == yte)), conf.tolist(), dataset.scenario_names())


# ---------------------------------------------------------------------------
# SwitchNet comparison
# ---------------------------------------------------------------------------

@dataclass
class SwitchnetComparison:
    pdp_id: int
    seed: int
    subnet0_mse: float
    adapted_mse: float
    fsl_mse: float
    trainable: int
    online_steps: int


def switchnet_compare(net: SwitchNet, fsl: Estimator | None, dataset: Dataset, pdp_id: int, cfg: Config,
                      seed: int, snr_db: float) -> SwitchnetComparison:
    """Adapt alpha on the PDP's labelled support blocks, then score SubNet 0, adapted SwitchNet and the FSL model."""
    from .training import switchnet_online_adapt
    exp = cfg.experiment
    n = cfg.train.n_support
    pdp = dataset.pdp(pdp_id)
    s, _ = dataset.locate(pdp_id)
    # SwitchNet's support blocks: query-style (w/4 pilot) observations with known truth
    ab = eval_batch(pdp, None, 0, snr_db, n, seed, s, stream=1)
    res = switchnet_online_adapt(net, ab.query, ab.truth, exp.switchnet_online_steps, exp.switchnet_online_lr)
    test = eval_batch(pdp, None, n, snr_db, exp.eval_samples, seed, s)
    base = float(np.mean(mse(net.predict(None, test.query), test.truth)))
    adapted = float(np.mean(mse(net.predict(None, test.query, alpha=res.alpha), test.truth)))
    fsl_v = float(np.mean(mse(fsl.predict(test), test.truth))) if fsl is not None else math.nan
    return SwitchnetComparison(pdp_id, seed, base, adapted, fsl_v, res.trainable, exp.switchnet_online_steps)


def comparison_table(items: list[SwitchnetComparison], M: int) -> str:
    def med(f):
        return float(np.median([f(i) for i in items])) if items else math.nan
    lines = [
        "model             online_trainable  online_steps  truth_at_test  median_mse",
        f"switchnet_subnet0 {0:>16d}  {0:>12d}  {'no':>13}  {med(lambda i: i.subnet0_mse):.4g}",
        f"switchnet_adapted {M + 1:>16d}  {items[0].online_steps if items else 0:>12d}  "
        f"{'yes':>13}  {med(lambda i: i.adapted_mse):.4g}",
        f"fsl_full          {0:>16d}  {0:>12d}  {'no':>13}  {med(lambda i: i.fsl_mse):.4g}",
        "SwitchNet adapts alpha with truth-labelled support blocks; the FSL model only sees their LS observations.",
    ]
    return "\n".join(lines)


def comparison_rows(items: list[SwitchnetComparison], dataset: Dataset, snr_db: float, n: int) -> list[ResultRow]:
    rows = []
    for it in items:
        scen = dataset.pdp(it.pdp_id).scenario_name
        for name, v in (("switchnet_subnet0", it.subnet0_mse), ("switchnet_adapted", it.adapted_mse),
                        ("fsl_full", it.fsl_mse)):
            if math.isfinite(v):
                rows.append(ResultRow("switchnet", name, scen, it.pdp_id, float(snr_db),
                                      n if name == "fsl_full" else 0, it.seed, v))
    return rows

