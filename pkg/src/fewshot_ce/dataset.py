"""On-disk channel datasets: a JSON manifest plus one binary file per scenario.

Each scenario file is a flat sequence of little-endian float64 records laid
out as ``[pdp_id, realization_id, 144 tap reals]``; the tap reals interleave
real and imaginary parts of the 72 zero-padded taps.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import (
    L_PAD,
    PowerDelayProfile,
    ScenarioSpec,
    complex_to_reals,
    realize_taps,
    sample_pdp,
)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
RECORD_FIELDS = ["pdp_id", "realization_id", f"taps[{L_PAD}][re,im]"]


class DatasetIOError(OSError):
    pass


def _pdp_seed(seed: int, scenario_index: int, pdp_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(scenario_index, pdp_index, 0))


def _realization_seed(seed: int, scenario_index: int, pdp_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(scenario_index, pdp_index, 1))


def generate_pdps(specs: list[ScenarioSpec], pdps_per_scenario: int, seed: int) -> list[list[PowerDelayProfile]]:
    out = []
    for s, spec in enumerate(specs):
        out.append([sample_pdp(spec, np.random.default_rng(_pdp_seed(seed, s, p)), s * pdps_per_scenario + p)
                    for p in range(pdps_per_scenario)])
    return out


def dataset_manifest(specs: list[ScenarioSpec], pdps_per_scenario: int, realizations_per_pdp: int,
                     rng_seed: int, out_dir) -> dict:
    """Write a deterministic dataset to ``out_dir`` and return its manifest."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(f"cannot create {out_dir}: {exc}") from exc
    for spec in specs:
        spec.validate()
    if len({s.name for s in specs}) != len(specs):
        raise ValueError("scenario names must be unique")
    all_pdps = generate_pdps(specs, pdps_per_scenario, rng_seed)
    scenarios = []
    for s, (spec, pdps) in enumerate(zip(specs, all_pdps)):
        fname = f"scenario_{s:02d}_{spec.name}.bin"
        records = np.empty((pdps_per_scenario, realizations_per_pdp, 2 + 2 * L_PAD), dtype="<f8")
        for p, pdp in enumerate(pdps):
            taps = realize_taps(pdp, realizations_per_pdp, np.random.default_rng(_realization_seed(rng_seed, s, p)))
            records[p, :, 0] = pdp.pdp_id
            records[p, :, 1] = np.arange(realizations_per_pdp)
            records[p, :, 2:] = complex_to_reals(taps).reshape(realizations_per_pdp, -1)
        blob = records.tobytes()
        path = out_dir / fname
        try:
            path.write_bytes(blob)
        except OSError as exc:
            raise DatasetIOError(f"cannot write {path}: {exc}") from exc
        scenarios.append({
            "index": s,
            "spec": spec.to_dict(),
            "file": fname,
            "sha256": hashlib.sha256(blob).hexdigest(),
            "pdps": [p.to_dict() for p in pdps],
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": int(rng_seed),
        "l_pad": L_PAD,
        "pdps_per_scenario": int(pdps_per_scenario),
        "realizations_per_pdp": int(realizations_per_pdp),
        "record_layout": {"dtype": "float64", "byte_order": "little", "fields": RECORD_FIELDS,
                          "record_length": 2 + 2 * L_PAD, "order": "pdp-major, then realization"},
        "scenarios": scenarios,
    }
    path = out_dir / MANIFEST_NAME
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc
    return manifest


@dataclass
class ScenarioData:
    index: int
    spec: ScenarioSpec
    pdps: list[PowerDelayProfile]
    taps: np.ndarray  # pdps x realizations x L_PAD, complex


class Dataset:
    """A loaded dataset with a per-scenario split into training and held-out PDPs."""

    def __init__(self, manifest: dict, scenarios: list[ScenarioData], heldout_per_scenario: int = 0):
        self.manifest = manifest
        self.scenarios = scenarios
        self.heldout_per_scenario = heldout_per_scenario
        self._by_id = {}
        for sc in scenarios:
            for p, pdp in enumerate(sc.pdps):
                self._by_id[pdp.pdp_id] = (sc.index, p)
        for sc in scenarios:
            if heldout_per_scenario >= len(sc.pdps) and sc.pdps:
                raise ValueError(f"scenario {sc.spec.name}: cannot hold out {heldout_per_scenario} "
                                 f"of {len(sc.pdps)} PDPs")

    @classmethod
    def load(cls, path, heldout_per_scenario: int = 0) -> "Dataset":
        path = Path(path)
        mpath = path / MANIFEST_NAME if path.is_dir() else path
        try:
            manifest = json.loads(mpath.read_text(encoding="utf-8"))
        except OSError as exc:
            raise DatasetIOError(f"cannot read {mpath}: {exc}") from exc
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{mpath}: unsupported format_version {manifest.get('format_version')}")
        rl = manifest["record_layout"]["record_length"]
        P, R = manifest["pdps_per_scenario"], manifest["realizations_per_pdp"]
        scenarios = []
        for entry in manifest["scenarios"]:
            spec_d = entry["spec"]
            spec = ScenarioSpec(**spec_d)
            fpath = mpath.parent / entry["file"]
            try:
                raw = np.frombuffer(fpath.read_bytes(), dtype="<f8")
            except OSError as exc:
                raise DatasetIOError(f"cannot read {fpath}: {exc}") from exc
            if raw.size != P * R * rl:
                raise DatasetIOError(f"{fpath}: expected {P * R * rl} values, found {raw.size}")
            rec = raw.reshape(P, R, rl)
            taps = rec[:, :, 2::2] + 1j * rec[:, :, 3::2]
            pdps = [PowerDelayProfile.from_dict(d, spec.name) for d in entry["pdps"]]
            scenarios.append(ScenarioData(entry["index"], spec, pdps, taps))
        return cls(manifest, scenarios, heldout_per_scenario)

    @property
    def num_scenarios(self) -> int:
        return len(self.scenarios)

    def scenario_names(self) -> list[str]:
        return [s.spec.name for s in self.scenarios]

    def train_pdp_indices(self, scenario: int) -> np.ndarray:
        n = len(self.scenarios[scenario].pdps)
        return np.arange(n - self.heldout_per_scenario)

    def heldout_pdp_indices(self, scenario: int) -> np.ndarray:
        n = len(self.scenarios[scenario].pdps)
        return np.arange(n - self.heldout_per_scenario, n)

    def pdp(self, pdp_id: int) -> PowerDelayProfile:
        s, p = self._by_id[pdp_id]
        return self.scenarios[s].pdps[p]

    def locate(self, pdp_id: int) -> tuple[int, int]:
        return self._by_id[pdp_id]

    def taps(self, pdp_id: int) -> np.ndarray:
        s, p = self._by_id[pdp_id]
        return self.scenarios[s].taps[p]
