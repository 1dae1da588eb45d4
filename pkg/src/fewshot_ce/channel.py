"""Synthetic multipath environments, OFDM pilot observations and few-shot episodes.

An environment is a power delay profile (PDP). A scenario is a distribution
over PDPs. Each OFDM block sees an independent Rayleigh realization of its
PDP (fast fading), observed through unit-modulus QPSK pilots in AWGN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

L_PAD = 72
N_SUBCARRIERS = 72
QUERY_PILOT_SPACING = 4


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    tap_count_range: tuple[int, int]
    delay_spread_range: tuple[int, int]
    decay_exponent_range: tuple[float, float]
    tap_jitter: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "tap_count_range", tuple(int(v) for v in self.tap_count_range))
        object.__setattr__(self, "delay_spread_range", tuple(int(v) for v in self.delay_spread_range))
        object.__setattr__(self, "decay_exponent_range", tuple(float(v) for v in self.decay_exponent_range))

    def validate(self, l_pad: int = L_PAD) -> None:
        lo, hi = self.tap_count_range
        dlo, dhi = self.delay_spread_range
        glo, ghi = self.decay_exponent_range
        if not 1 <= lo <= hi <= l_pad:
            raise ValueError(f"{self.name}: tap_count_range {self.tap_count_range} outside [1, {l_pad}]")
        if not 0 <= dlo <= dhi <= l_pad - 1:
            raise ValueError(f"{self.name}: delay_spread_range {self.delay_spread_range} outside [0, {l_pad - 1}]")
        if hi > dlo + 1:
            raise ValueError(f"{self.name}: {hi} taps do not fit in a delay spread of {dlo}")
        if glo > ghi or glo < 0:
            raise ValueError(f"{self.name}: bad decay_exponent_range {self.decay_exponent_range}")
        if self.tap_jitter < 0:
            raise ValueError(f"{self.name}: tap_jitter must be non-negative")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "tap_count_range": list(self.tap_count_range),
            "delay_spread_range": list(self.delay_spread_range),
            "decay_exponent_range": list(self.decay_exponent_range),
            "tap_jitter": self.tap_jitter,
        }


@dataclass(frozen=True)
class PowerDelayProfile:
    delays: np.ndarray
    powers: np.ndarray
    scenario_name: str
    pdp_id: int

    def to_dict(self) -> dict:
        return {
            "pdp_id": self.pdp_id,
            "delays": [int(d) for d in self.delays],
            "powers": [float(p) for p in self.powers],
        }

    @classmethod
    def from_dict(cls, d: dict, scenario_name: str) -> "PowerDelayProfile":
        return cls(np.asarray(d["delays"], dtype=np.int64), np.asarray(d["powers"], dtype=np.float64),
                   scenario_name, int(d["pdp_id"]))


@dataclass
class ChannelRealization:
    taps: np.ndarray  # complex, length L_PAD
    pdp_id: int

    def to_reals(self) -> np.ndarray:
        return complex_to_reals(self.taps).reshape(-1)


@dataclass
class PilotBlock:
    width: int
    pilot_mask: np.ndarray
    ls_estimate: np.ndarray  # w x 2
    snr_db: float
    kind: str


@dataclass
class Episode:
    support: list[PilotBlock]
    query: PilotBlock
    true_response: np.ndarray
    pdp_id: int
    support_pdp_id: int | None = None
    mismatched: bool = False

    @property
    def n(self) -> int:
        return len(self.support)

    def support_array(self) -> np.ndarray:
        w = self.query.width
        if not self.support:
            return np.zeros((0, w, 2))
        return np.stack([b.ls_estimate for b in self.support])


@dataclass
class EpisodeBatch:
    """Array form of a batch of episodes sharing ``n`` and ``w``."""

    support: np.ndarray   # B x n x w x 2
    query: np.ndarray     # B x w x 2
    truth: np.ndarray     # B x w x 2
    pdp_ids: np.ndarray
    support_pdp_ids: np.ndarray
    scenario_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.query.shape[0]

    @property
    def n(self) -> int:
        return self.support.shape[1]

    @classmethod
    def from_episodes(cls, episodes: list[Episode]) -> "EpisodeBatch":
        return cls(
            np.stack([e.support_array() for e in episodes]),
            np.stack([e.query.ls_estimate for e in episodes]),
            np.stack([e.true_response for e in episodes]),
            np.array([e.pdp_id for e in episodes]),
            np.array([e.pdp_id if e.support_pdp_id is None else e.support_pdp_id for e in episodes]),
        )


def complex_to_reals(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1)


def reals_to_complex(x: np.ndarray) -> np.ndarray:
    return x[..., 0] + 1j * x[..., 1]


def query_mask(w: int = N_SUBCARRIERS, spacing: int = QUERY_PILOT_SPACING) -> np.ndarray:
    """Comb pattern: every ``spacing``-th subcarrier starting at 0."""
    mask = np.zeros(w, dtype=bool)
    mask[::spacing] = True
    return mask


def support_mask(w: int = N_SUBCARRIERS) -> np.ndarray:
    return np.ones(w, dtype=bool)


# ---------------------------------------------------------------------------
# environments and realizations
# ---------------------------------------------------------------------------

def sample_pdp(spec: ScenarioSpec, rng_seed, pdp_id: int = 0, l_pad: int = L_PAD) -> PowerDelayProfile:
    """Draw one environment from a scenario.

    The first arrival sits at delay 0; the remaining ``L - 1`` delays are
    drawn without replacement from ``1..spread``.
    """
    spec.validate(l_pad)
    rng = _rng(rng_seed)
    spread = int(rng.integers(spec.delay_spread_range[0], spec.delay_spread_range[1] + 1))
    L = int(rng.integers(spec.tap_count_range[0], spec.tap_count_range[1] + 1))
    gamma = float(rng.uniform(*spec.decay_exponent_range))
    later = np.sort(rng.choice(np.arange(1, spread + 1), size=L - 1, replace=False)) if L > 1 else []
    delays = np.concatenate([[0], later]).astype(np.int64)
    jitter = rng.normal(size=L) * spec.tap_jitter
    powers = np.exp(-gamma * delays + jitter)
    powers = powers / powers.sum()
    return PowerDelayProfile(delays, powers, spec.name, pdp_id)


def realize_taps(pdp: PowerDelayProfile, count: int, rng_seed, l_pad: int = L_PAD) -> np.ndarray:
    """``count`` independent Rayleigh tap vectors (complex, ``count x l_pad``)."""
    rng = _rng(rng_seed)
    L = len(pdp.delays)
    g = rng.normal(size=(count, L, 2))
    taps = np.zeros((count, l_pad), dtype=np.complex128)
    taps[:, pdp.delays] = np.sqrt(pdp.powers / 2.0) * (g[..., 0] + 1j * g[..., 1])
    return taps


def realize_channel(pdp: PowerDelayProfile, rng_seed, l_pad: int = L_PAD) -> ChannelRealization:
    return ChannelRealization(realize_taps(pdp, 1, rng_seed, l_pad)[0], pdp.pdp_id)


def freq_response_complex(taps: np.ndarray, w: int = N_SUBCARRIERS) -> np.ndarray:
    """``H_k = sum_l h_l exp(-j 2 pi k l / w)`` over the last axis."""
    if w < taps.shape[-1]:
        raise ValueError(f"w = {w} is smaller than the tap count {taps.shape[-1]}")
    return np.fft.fft(taps, n=w, axis=-1)


def freq_response(h: ChannelRealization, w: int = N_SUBCARRIERS) -> np.ndarray:
    return complex_to_reals(freq_response_complex(h.taps, w))


# ---------------------------------------------------------------------------
# pilots and least squares
# ---------------------------------------------------------------------------

def noise_variance(snr_db: float) -> float:
    return 0.0 if math.isinf(snr_db) and snr_db > 0 else 10.0 ** (-snr_db / 10.0)


def ls_observe(H: np.ndarray, mask: np.ndarray, snr_db: float, rng_seed) -> np.ndarray:
    """LS estimates ``Y_k / X_k`` of complex responses ``H`` (``... x w``) at pilot positions.

    Returns reals ``... x w x 2``, zero off the mask. Pilot symbols and noise
    are drawn for every subcarrier so the random stream does not depend on
    the mask.
    """
    rng = _rng(rng_seed)
    shape = H.shape
    q = rng.integers(0, 4, size=shape)
    X = np.exp(1j * (np.pi / 4 + np.pi / 2 * q))
    g = rng.normal(size=shape + (2,))
    var = noise_variance(snr_db)
    N = math.sqrt(var / 2.0) * (g[..., 0] + 1j * g[..., 1])
    Y = H * X + N
    est = np.where(mask, Y / X, 0.0)
    return complex_to_reals(est)


def transmit_and_ls(h: ChannelRealization, pilot_mask: np.ndarray, snr_db: float, rng_seed,
                    kind: str | None = None) -> PilotBlock:
    w = len(pilot_mask)
    H = freq_response_complex(h.taps, w)
    est = ls_observe(H, np.asarray(pilot_mask, dtype=bool), snr_db, rng_seed)
    if kind is None:
        kind = "support" if np.all(pilot_mask) else "query"
    return PilotBlock(w, np.asarray(pilot_mask, dtype=bool), est, float(snr_db), kind)


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

def _episode_streams(rng_seed, n: int):
    ss = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    query_ss, support_ss = ss.spawn(2)
    q_real, q_noise = query_ss.spawn(2)
    s_real, s_noise = support_ss.spawn(2)
    return q_real, q_noise, s_real, s_noise


def _assemble(q_taps, s_taps, qmask, snr_db, q_noise, s_noise, w, pdp_id, support_pdp_id, mismatched):
    Hq = freq_response_complex(q_taps, w)
    query = PilotBlock(w, qmask, ls_observe(Hq, qmask, snr_db, q_noise), float(snr_db), "query")
    support = []
    if len(s_taps):
        Hs = freq_response_complex(s_taps, w)
        full = support_mask(w)
        est = ls_observe(Hs, full, snr_db, s_noise)
        support = [PilotBlock(w, full, e, float(snr_db), "support") for e in est]
    return Episode(support, query, complex_to_reals(Hq), pdp_id, support_pdp_id, mismatched)


def make_episode(pdp: PowerDelayProfile, n: int, query_mask_: np.ndarray, snr_db: float, rng_seed) -> Episode:
    """``n`` full-pilot support blocks and one comb-pilot query block from one PDP.

    The query side depends only on ``rng_seed``, so episodes that differ
    only in ``n`` or in the support PDP share the same query block.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    w = len(query_mask_)
    q_real, q_noise, s_real, s_noise = _episode_streams(rng_seed, n)
    q_taps = realize_taps(pdp, 1, q_real)[0]
    s_taps = realize_taps(pdp, n, s_real)
    return _assemble(q_taps, s_taps, np.asarray(query_mask_, bool), snr_db, q_noise, s_noise, w,
                     pdp.pdp_id, pdp.pdp_id, False)


def make_mismatch_episode(pdp_query: PowerDelayProfile, pdp_support: PowerDelayProfile, n: int,
                          snr_db: float, rng_seed, query_mask_: np.ndarray | None = None) -> Episode:
    if pdp_query.pdp_id == pdp_support.pdp_id:
        raise ValueError("mismatch episode needs two different PDPs")
    qmask = query_mask() if query_mask_ is None else np.asarray(query_mask_, bool)
    w = len(qmask)
    q_real, q_noise, s_real, s_noise = _episode_streams(rng_seed, n)
    q_taps = realize_taps(pdp_query, 1, q_real)[0]
    s_taps = realize_taps(pdp_support, n, s_real)
    return _assemble(q_taps, s_taps, qmask, snr_db, q_noise, s_noise, w,
                     pdp_query.pdp_id, pdp_support.pdp_id, True)


def episode_batch_from_taps(query_taps: np.ndarray, support_taps: np.ndarray, qmask: np.ndarray,
                            snr_db: float, rng: np.random.Generator, pdp_ids, support_pdp_ids=None,
                            scenario_ids=None) -> EpisodeBatch:
    """Vectorized episodes from stored taps: ``query_taps`` B x L, ``support_taps`` B x n x L."""
    w = len(qmask)
    Hq = freq_response_complex(query_taps, w)
    Hs = freq_response_complex(support_taps, w)
    q = ls_observe(Hq, qmask, snr_db, rng)
    s = ls_observe(Hs, support_mask(w), snr_db, rng)
    pdp_ids = np.asarray(pdp_ids)
    sup_ids = pdp_ids if support_pdp_ids is None else np.asarray(support_pdp_ids)
    scen = np.zeros(len(pdp_ids), dtype=np.int64) if scenario_ids is None else np.asarray(scenario_ids)
    return EpisodeBatch(s, q, complex_to_reals(Hq), pdp_ids, sup_ids, scen)


def interpolate_pilots(query_ls: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Classical baseline: circular linear interpolation of pilot LS values.

    ``query_ls`` is ``... x w x 2``; returns the same shape.
    """
    w = len(mask)
    pos = np.flatnonzero(mask)
    k = np.arange(w)
    flat = query_ls.reshape(-1, w, 2)
    out = np.empty_like(flat)
    for b in range(flat.shape[0]):
        for c in range(2):
            out[b, :, c] = np.interp(k, pos, flat[b, pos, c], period=w)
    return out.reshape(query_ls.shape)
