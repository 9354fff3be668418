"""Device-config file loading, CSV export and result manifests.

The device file is JSON with a versioned schema; see
``data/reference_device.json`` for the shipped reference device and
README for the field-by-field description.
"""

from __future__ import annotations

import csv
import hashlib
import importlib.resources
import json
from pathlib import Path

from .device import (CapacitanceNetwork, CouplerSpec, DeviceConfig,
                     ReadoutSpec, TransmonSpec)
from .errors import ConfigError

SCHEMA = "dualrail-device/1"

_TRANSMON_FIELDS = {
    "f_max_ghz": "f_max",
    "f_min_ghz": "f_min",
    "anharmonicity_ghz": "anharmonicity",
    "t1_us": "t1",
    "t_phi_us": "t_phi",
    "heating_rate_per_us": "heating_rate",
    "flux_period": "flux_period",
}


def _spec_from_entry(entry: dict, cls, path: str):
    kwargs = {"id": entry.get("id")}
    if kwargs["id"] is None:
        raise ConfigError(f"{path}: missing 'id'")
    for key, attr in _TRANSMON_FIELDS.items():
        if key not in entry:
            raise ConfigError(f"{path}[{kwargs['id']}]: missing '{key}'")
        kwargs[attr] = float(entry[key])
    if cls is CouplerSpec:
        if "pad_ground_fF" not in entry:
            raise ConfigError(f"{path}[{kwargs['id']}]: missing 'pad_ground_fF'")
        kwargs["pad_ground_capacitance"] = float(entry["pad_ground_fF"])
    return cls(**kwargs)


def device_from_dict(doc: dict) -> DeviceConfig:
    if doc.get("schema") != SCHEMA:
        raise ConfigError(f"unsupported schema {doc.get('schema')!r}, expected {SCHEMA!r}")
    for section in ("transmons", "ancillas", "couplers", "mutual_capacitances",
                    "dual_rail_pairs", "coupler_bindings", "pad_ground_fF"):
        if section not in doc:
            raise ConfigError(f"missing section '{section}'")
    transmons = tuple(_spec_from_entry(e, TransmonSpec, "transmons")
                      for e in doc["transmons"])
    ancillas = tuple(_spec_from_entry(e, TransmonSpec, "ancillas")
                     for e in doc["ancillas"])
    couplers = tuple(_spec_from_entry(e, CouplerSpec, "couplers")
                     for e in doc["couplers"])
    mutual = {}
    for e in doc["mutual_capacitances"]:
        a, b = e["modes"]
        mutual[frozenset((a, b))] = (float(e["c_fF"]), int(e["sign"]))
    network = CapacitanceNetwork(c_g=float(doc["pad_ground_fF"]), mutual=mutual)
    readout = {anc: ReadoutSpec(snr=float(r["snr"]),
                                assignment_scheme=r["assignment_scheme"])
               for anc, r in doc.get("readout", {}).items()}
    return DeviceConfig(
        transmons=transmons,
        ancillas=ancillas,
        couplers=couplers,
        network=network,
        dual_rail_pairs=tuple(tuple(p) for p in doc["dual_rail_pairs"]),
        coupler_bindings=tuple(tuple(b) for b in doc["coupler_bindings"]),
        readout=readout,
    )


def device_to_dict(config: DeviceConfig, operating_points: dict | None = None) -> dict:
    def entry(spec):
        out = {"id": spec.id}
        for key, attr in _TRANSMON_FIELDS.items():
            out[key] = getattr(spec, attr)
        if isinstance(spec, CouplerSpec):
            out["pad_ground_fF"] = spec.pad_ground_capacitance
        return out

    doc = {
        "schema": SCHEMA,
        "pad_ground_fF": config.network.c_g,
        "transmons": [entry(s) for s in config.transmons],
        "ancillas": [entry(s) for s in config.ancillas],
        "couplers": [entry(s) for s in config.couplers],
        "mutual_capacitances": [
            {"modes": sorted(key), "c_fF": cap, "sign": sign}
            for key, (cap, sign) in sorted(config.network.mutual.items(),
                                           key=lambda kv: sorted(kv[0]))
        ],
        "dual_rail_pairs": [list(p) for p in config.dual_rail_pairs],
        "coupler_bindings": [list(b) for b in config.coupler_bindings],
        "readout": {anc: {"snr": r.snr, "assignment_scheme": r.assignment_scheme}
                    for anc, r in sorted(config.readout.items())},
    }
    if operating_points:
        doc["operating_points"] = operating_points
    return doc


def load_device_config(path) -> DeviceConfig:
    """Load and validate a device-config file; raises ConfigError with the
    offending field on schema violations."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"device config not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}")
    return device_from_dict(doc)


def save_device_config(config: DeviceConfig, path,
                       operating_points: dict | None = None) -> None:
    Path(path).write_text(json.dumps(device_to_dict(config, operating_points),
                                     indent=2) + "\n")


def reference_device_document() -> dict:
    text = importlib.resources.files("dualrail").joinpath(
        "data/reference_device.json").read_text()
    return json.loads(text)


def reference_device() -> DeviceConfig:
    """The versioned reference device shipped with the package."""
    return device_from_dict(reference_device_document())


def reference_operating_points() -> dict:
    return reference_device_document()["operating_points"]


def format_float(x: float) -> str:
    """Stable 12-significant-digit float formatting used in every CSV."""
    return f"{x:.12g}"


def write_csv(path, header, rows) -> None:
    """Write rows of floats/ints/strings with documented stable formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, float) else v
                             for v in row])


def read_csv(path):
    """Read back a CSV written by :func:`write_csv`; floats parsed as floats."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = []
        for raw in reader:
            row = []
            for cell in raw:
                try:
                    row.append(float(cell))
                except ValueError:
                    row.append(cell)
            rows.append(row)
    return header, rows


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, entries: dict) -> Path:
    """Record seed, config hash and versions next to exported data."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    return path
