"""Channel estimators: the attention-based few-shot model, its ablations and SwitchNet.

Parameters live in flat ``name -> ndarray`` dicts. Forward functions accept
either raw arrays or tape-tracked tensors for the same names, so one code
path serves inference and training.

Name prefixes double as the parameter partition used for training:
``cam.*`` and ``cin.*`` form theta_1; ``tam.*``, ``ce.*`` and ``se.*`` form theta_2.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import cam_forward, tam_features, tam_head
from .autodiff import Tensor
from .config import ModelConfig

MODEL_KINDS = ("fsl_full", "fsl_no_cam", "backbone_only", "backbone_with_self_attention")
THETA1_PREFIXES = ("cam.", "cin.")
CHECKPOINT_VERSION = 1
TAM_BIAS_INIT = 1.0
# biases feeding a ReLU start slightly positive so that a window of dead
# units does not land exactly on the kink
RELU_BIAS_INIT = 0.01


class CheckpointError(OSError):
    pass


def uses_support(kind: str) -> bool:
    return kind in ("fsl_full", "fsl_no_cam")


def partition(names) -> tuple[list[str], list[str]]:
    theta1 = sorted(n for n in names if n.startswith(THETA1_PREFIXES))
    theta2 = sorted(n for n in names if not n.startswith(THETA1_PREFIXES))
    return theta1, theta2


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def backbone_layout(cfg: ModelConfig, kind: str) -> list[tuple[int, int]]:
    """(in, out) channels for the ``N + 2`` backbone layers."""
    c = cfg.backbone_channels
    first_in = 4 if (kind == "fsl_full" and cfg.query_skip) else 2
    n_layers = cfg.backbone_hidden_layers + 2
    return [(first_in if i == 0 else c, 2 if i == n_layers - 1 else c) for i in range(n_layers)]


def _he(rng, shape, fan_in, gain=2.0):
    return rng.normal(size=shape) * np.sqrt(gain / fan_in)


def init_params(kind: str, cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    cfg.validate()
    p: dict[str, np.ndarray] = {}
    layout = backbone_layout(cfg, kind)
    K = cfg.backbone_kernel
    for i, (cin, cout) in enumerate(layout):
        last = i == len(layout) - 1
        p[f"ce.layer{i}.w"] = _he(rng, (cout, cin, K), cin * K, 1.0 if last else 2.0)
        p[f"ce.layer{i}.b"] = np.zeros(cout) if last else np.full(cout, RELU_BIAS_INIT)
    attended = layout[:-1]
    if kind == "fsl_full":
        h, c, w, r = cfg.extractor_hidden, cfg.feature_channels, cfg.w, cfg.cam_reduction
        p["cam.ext0.w"] = _he(rng, (h, 2, 3), 6)
        # nonzero biases: zero-input windows (query subcarriers far from a
        # pilot) must not map to an all-zero feature row, where cosine
        # correlation is undefined
        p["cam.ext0.b"] = np.full(h, 0.1)
        p["cam.ext1.w"] = _he(rng, (c, h, 3), 3 * h)
        p["cam.ext1.b"] = rng.normal(0.0, 0.1, c)
        for branch in ("p", "q"):
            p[f"cam.{branch}.W1"] = _he(rng, (w // r, w), w)
            p[f"cam.{branch}.W2"] = _he(rng, (w, w // r), w // r, 1.0)
        ch = cfg.cin_hidden
        p["cin.conv0.w"] = _he(rng, (ch, 2, 3, 3), 18)
        p["cin.conv0.b"] = np.full(ch, RELU_BIAS_INIT)
        p["cin.conv1.w"] = _he(rng, (1, ch, 3, 3), 9 * ch)
        p["cin.conv1.b"] = np.zeros(1)
        p["cin.out.w"] = _he(rng, (2, c, 3), 3 * c, 1.0)
        p["cin.out.b"] = np.zeros(2)
    if uses_support(kind):
        d = cfg.tam_hidden
        p["tam.conv0.w"] = _he(rng, (d, 2, 3, 3), 18)
        p["tam.conv0.b"] = np.full(d, RELU_BIAS_INIT)
        p["tam.conv1.w"] = _he(rng, (d, d, 3, 3), 9 * d)
        p["tam.conv1.b"] = np.full(d, RELU_BIAS_INIT)
        for i, (_, cout) in enumerate(attended):
            p[f"tam.head{i}.w"] = _he(rng, (cout, d), d, 1.0)
            p[f"tam.head{i}.b"] = np.full(cout, TAM_BIAS_INIT)
    if kind == "backbone_with_self_attention":
        for i, (_, cout) in enumerate(attended):
            m = max(1, cout // cfg.se_reduction)
            p[f"se.layer{i}.W1"] = _he(rng, (m, cout), cout)
            p[f"se.layer{i}.b1"] = np.full(m, RELU_BIAS_INIT)
            p[f"se.layer{i}.W2"] = _he(rng, (cout, m), m, 1.0)
            p[f"se.layer{i}.b2"] = np.full(cout, TAM_BIAS_INIT)
    return p


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

@dataclass
class ForwardResult:
    h_est: Tensor
    s_initial: Tensor | None = None
    attention_mults: int = 0


def backbone_forward(params: dict, x, gates=None, self_attention: bool = False) -> ForwardResult:
    """Run the ``N + 2`` conv layers on ``B x w x k`` input.

    ``gates`` is an optional list with one ``B x c_i`` weight vector per
    attended layer (layers ``0..N``); the last layer is never attended.
    """
    x = ad.as_tensor(x)
    n_layers = sum(1 for k in params if k.startswith("ce.layer") and k.endswith(".w"))
    F = ad.transpose(x, (0, 2, 1))
    mults = 0
    for i in range(n_layers):
        F = ad.conv1d(F, params[f"ce.layer{i}.w"], params[f"ce.layer{i}.b"])
        if i == n_layers - 1:
            break
        F = ad.relu(F)
        a = None
        if gates is not None:
            a = gates[i]
        elif self_attention:
            g = ad.mean(F, axis=-1)
            hidden = ad.relu(ad.dense(g, params[f"se.layer{i}.W1"], params[f"se.layer{i}.b1"]))
            a = ad.sigmoid(ad.dense(hidden, params[f"se.layer{i}.W2"], params[f"se.layer{i}.b2"]))
        if a is not None:
            F = ad.mul(F, ad.reshape(a, a.shape + (1,)))
            mults += 1
    return ForwardResult(ad.transpose(F, (0, 2, 1)), None, mults)


def backbone_only_forward(params: dict, query_ls) -> Tensor:
    """Backbone on the masked query LS array alone (no support, no attention)."""
    q = ad.as_tensor(query_ls)
    squeeze = q.ndim == 2
    if squeeze:
        q = ad.reshape(q, (1,) + q.shape)
    h = backbone_forward(params, q).h_est
    return ad.reshape(h, h.shape[1:]) if squeeze else h


def cin_forward(F_initial, params: dict) -> Tensor:
    """Initialization network: ``B x 2n x w x c`` pair stack to ``B x w x 2``.

    The first 2D conv sees all ``2n`` planes with its kernel tied across the
    ``n`` (P_i, Q_i) pairs, which equals a 2-plane conv on the pair mean.
    This keeps the network independent of ``n`` and of support order.
    """
    F_initial = ad.as_tensor(F_initial)
    B, two_n, w, c = F_initial.shape
    n = two_n // 2
    x = ad.mean(ad.reshape(F_initial, (B, n, 2 * w * c)), axis=1)
    x = ad.reshape(x, (B, 2, w, c))
    x = ad.relu(ad.conv2d(x, params["cin.conv0.w"], params["cin.conv0.b"]))
    x = ad.conv2d(x, params["cin.conv1.w"], params["cin.conv1.b"])
    x = ad.transpose(ad.reshape(x, (B, w, c)), (0, 2, 1))
    x = ad.conv1d(x, params["cin.out.w"], params["cin.out.b"])
    return ad.transpose(x, (0, 2, 1))


def tam_gates(params: dict, support, n_heads: int, printed_form: bool = False) -> list[Tensor]:
    feat = tam_features(support, params)
    return [tam_head(feat, params, i, printed_form) for i in range(n_heads)]


def fsl_forward(params: dict, cfg: ModelConfig, support, query, zero_cam_attention: bool = False) -> ForwardResult:
    """Full few-shot estimator on a batch: returns ``s_initial`` and ``h_est`` (both ``B x w x 2``)."""
    support, query = ad.as_tensor(support), ad.as_tensor(query)
    if support.shape[1] == 0:
        raise ValueError("fsl_forward needs n >= 1 support blocks; use backbone_only_forward for n = 0")
    F_initial = cam_forward(support, query, params, cfg.cam_tau, cfg.cam_attention_mode, zero_cam_attention)
    s_initial = cin_forward(F_initial, params)
    n_heads = cfg.backbone_hidden_layers + 1
    gates = tam_gates(params, support, n_heads, cfg.tam_printed_form)
    x = ad.concat([s_initial, query], axis=-1) if cfg.query_skip else s_initial
    res = backbone_forward(params, x, gates)
    return ForwardResult(res.h_est, s_initial, res.attention_mults)


def forward(kind: str, params: dict, cfg: ModelConfig, support, query) -> ForwardResult:
    if kind == "fsl_full":
        return fsl_forward(params, cfg, support, query)
    if kind == "fsl_no_cam":
        if support.shape[1] == 0:
            raise ValueError("fsl_no_cam needs support blocks")
        gates = tam_gates(params, support, cfg.backbone_hidden_layers + 1, cfg.tam_printed_form)
        return backbone_forward(params, query, gates)
    if kind == "backbone_only":
        return backbone_forward(params, query)
    if kind == "backbone_with_self_attention":
        return backbone_forward(params, query, self_attention=True)
    raise ValueError(f"unknown model kind {kind!r}")


@dataclass
class Model:
    kind: str
    cfg: ModelConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, kind: str, cfg: ModelConfig, seed: int) -> "Model":
        return cls(kind, cfg, init_params(kind, cfg, np.random.default_rng(seed)))

    @property
    def needs_support(self) -> bool:
        return uses_support(self.kind)

    def output_bounds(self):
        b = self.meta.get("target_bounds")
        return None if b is None else (float(b[0]), float(b[1]))

    def to_estimate(self, raw: Tensor) -> Tensor:
        """Map raw network output to the channel scale (identity unless trained with bce_scaled)."""
        bounds = self.output_bounds()
        if bounds is None:
            return raw
        lo, hi = bounds
        return ad.shift(ad.scale(ad.sigmoid(raw), hi - lo), lo)

    def forward(self, support, query, params=None) -> ForwardResult:
        return forward(self.kind, self.params if params is None else params, self.cfg, support, query)

    def predict(self, support: np.ndarray, query: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Channel estimates ``B x w x 2`` (no tape)."""
        out = []
        for lo in range(0, len(query), batch_size):
            res = self.forward(support[lo:lo + batch_size], query[lo:lo + batch_size])
            out.append(self.to_estimate(res.h_est).data)
        return np.concatenate(out) if out else np.zeros((0,) + query.shape[1:])


# ---------------------------------------------------------------------------
# SwitchNet baseline
# ---------------------------------------------------------------------------

def switchnet_forward(params: dict, h_ls, alpha=None) -> Tensor:
    """``(sum_i a_i W_i + a_0 I)(W_0 h + theta_0) + sum_i a_i theta_i`` on ``[B,] 2w`` input."""
    h = ad.as_tensor(h_ls)
    squeeze = h.ndim == 1
    if squeeze:
        h = ad.reshape(h, (1,) + h.shape)
    alpha = ad.as_tensor(params["sw.alpha"] if alpha is None else alpha)
    M = alpha.shape[0] - 1
    d = params["sw.W0"].shape[0]
    if h.shape[-1] != d:
        raise ad.ShapeError(f"SwitchNet expects {d} inputs, got {h.shape[-1]}")
    B = h.shape[0]
    z = ad.dense(h, params["sw.W0"], params["sw.theta0"])
    terms = [ad.reshape(z, (B, d, 1))]
    for i in range(1, M + 1):
        terms.append(ad.reshape(ad.dense(z, params[f"sw.W{i}"], params[f"sw.theta{i}"]), (B, d, 1)))
    stacked = ad.concat(terms, axis=-1)
    out = ad.reshape(ad.matmul(stacked, ad.reshape(alpha, (M + 1, 1))), (B, d))
    return ad.reshape(out, (d,)) if squeeze else out


def switchnet_identity(w: int, M: int) -> dict[str, np.ndarray]:
    d = 2 * w
    p = {"sw.W0": np.eye(d), "sw.theta0": np.zeros(d), "sw.alpha": np.eye(M + 1)[0]}
    for i in range(1, M + 1):
        p[f"sw.W{i}"] = np.zeros((d, d))
        p[f"sw.theta{i}"] = np.zeros(d)
    return p


@dataclass
class SwitchNet:
    params: dict[str, np.ndarray]
    w: int
    kind: str = "switchnet"
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.params["sw.alpha"]) - 1

    @property
    def needs_support(self) -> bool:
        return False

    def predict(self, support, query: np.ndarray, batch_size: int = 256, alpha=None) -> np.ndarray:
        B = len(query)
        out = switchnet_forward(self.params, query.reshape(B, -1), alpha).data
        return out.reshape(query.shape)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    return base.with_suffix(".json"), base.with_suffix(".bin")


def save_checkpoint(path, model, config_dict: dict | None = None) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64 arrays)."""
    mpath, bpath = _paths(path)
    names = sorted(model.params)
    entries, chunks, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    cfg = config_dict if config_dict is not None else (
        {"model": _cfg_dict(model.cfg)} if isinstance(model, Model) else {})
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_kind": model.kind,
        "arrays": entries,
        "blob": bpath.name,
        "dtype": "<f8",
        "config": cfg,
        "config_hash": hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16],
        "meta": model.meta,
    }
    if isinstance(model, SwitchNet):
        manifest["w"] = model.w
    try:
        mpath.parent.mkdir(parents=True, exist_ok=True)
        bpath.write_bytes(b"".join(chunks))
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {mpath}: {exc}") from exc
    return mpath


def _cfg_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_checkpoint(path):
    mpath, _ = _paths(path)
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        blob = np.frombuffer((mpath.parent / manifest["blob"]).read_bytes(), dtype="<f8")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {mpath}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{mpath}: unsupported format_version {manifest.get('format_version')}")
    params = {}
    for e in manifest["arrays"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        params[e["name"]] = blob[e["offset"]:e["offset"] + size].reshape(e["shape"]).copy()
    kind = manifest["model_kind"]
    if kind == "switchnet":
        return SwitchNet(params, int(manifest["w"]), meta=manifest.get("meta", {}))
    cfg = ModelConfig(**manifest["config"]["model"])
    return Model(kind, cfg, params, manifest.get("meta", {}))
