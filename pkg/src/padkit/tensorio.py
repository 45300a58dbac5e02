"""Tensor files and run configuration.

A tensor file is a strict JSON sidecar plus a raw little-endian blob:
`<base>.json` describes shape, dtype, element order, and unit tag;
`<base>.bin` holds exactly shape-product elements. Round trips are
byte-for-byte lossless. The run configuration is a JSON document parsed
strictly (unknown keys rejected, all seeds explicit).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .imagekit import (
    LabelGrid2D,
    NormalizationParams,
    ScalarGrid2D,
    UNIT_NORM,
    UNIT_RAW,
    UNIT_SUV,
)

_SIDE_KEYS = {"shape", "dtype", "order", "unit_tag", "endianness"}
_DTYPES = {"f64": ("<f8", 8), "i32": ("<i4", 4)}
LABEL_UNIT = "labels"
_SCALAR_UNITS = (UNIT_RAW, UNIT_SUV, UNIT_NORM)


class FormatError(ValueError):
    pass


def _paths(path: str) -> tuple[str, str]:
    base = str(path)
    for ext in (".json", ".bin"):
        if base.endswith(ext):
            base = base[: -len(ext)]
    return base + ".json", base + ".bin"


def write_tensor(grid, path: str) -> None:
    """Write a ScalarGrid2D or LabelGrid2D as sidecar + blob."""
    sidecar_path, blob_path = _paths(path)
    if isinstance(grid, ScalarGrid2D):
        dtype, unit = "f64", grid.unit
        data = grid.values.astype("<f8")
    elif isinstance(grid, LabelGrid2D):
        dtype, unit = "i32", LABEL_UNIT
        data = grid.labels.astype("<i4")
    else:
        raise FormatError(f"cannot serialize object of type {type(grid).__name__}")
    sidecar = {
        "shape": [int(s) for s in data.shape],
        "dtype": dtype,
        "order": "row-major",
        "unit_tag": unit,
        "endianness": "little",
    }
    with open(sidecar_path, "w") as fh:
        json.dump(sidecar, fh)
    data.tofile(blob_path)


def read_tensor(path: str):
    """Read a tensor file back into the matching grid type."""
    sidecar_path, blob_path = _paths(path)
    try:
        with open(sidecar_path) as fh:
            sidecar = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"sidecar {sidecar_path} is not valid JSON: {e}") from e
    if not isinstance(sidecar, dict):
        raise FormatError("sidecar must be a JSON object")
    unknown = set(sidecar) - _SIDE_KEYS
    if unknown:
        raise FormatError(f"sidecar has unknown keys: {sorted(unknown)}")
    missing = _SIDE_KEYS - set(sidecar)
    if missing:
        raise FormatError(f"sidecar is missing keys: {sorted(missing)}")
    if sidecar["order"] != "row-major":
        raise FormatError(f"unsupported element order {sidecar['order']!r} (field 'order')")
    if sidecar["endianness"] != "little":
        raise FormatError(f"unsupported endianness {sidecar['endianness']!r} (field 'endianness')")
    if sidecar["dtype"] not in _DTYPES:
        raise FormatError(f"unsupported dtype {sidecar['dtype']!r} (field 'dtype')")
    shape = sidecar["shape"]
    if (not isinstance(shape, list) or len(shape) != 2
            or not all(isinstance(s, int) and s > 0 for s in shape)):
        raise FormatError(f"bad shape {shape!r} (field 'shape'): need two positive ints")
    np_dtype, el_size = _DTYPES[sidecar["dtype"]]
    expected = shape[0] * shape[1] * el_size
    actual = os.path.getsize(blob_path)
    if actual != expected:
        raise FormatError(f"blob {blob_path} holds {actual} bytes, expected {expected}")
    data = np.fromfile(blob_path, dtype=np_dtype).reshape(shape)
    unit = sidecar["unit_tag"]
    if sidecar["dtype"] == "i32":
        if unit != LABEL_UNIT:
            raise FormatError(f"i32 tensors must carry unit_tag {LABEL_UNIT!r}, got {unit!r}")
        return LabelGrid2D(data)
    if unit not in _SCALAR_UNITS:
        raise FormatError(f"unknown unit_tag {unit!r} for an f64 tensor")
    return ScalarGrid2D(data.astype(np.float64), unit=unit)


def read_scalar(path: str) -> ScalarGrid2D:
    grid = read_tensor(path)
    if not isinstance(grid, ScalarGrid2D):
        raise FormatError(f"{path} holds a label map, expected a scalar grid")
    return grid


def read_labels(path: str) -> LabelGrid2D:
    grid = read_tensor(path)
    if not isinstance(grid, LabelGrid2D):
        raise FormatError(f"{path} holds a scalar grid, expected a label map")
    return grid


# ---------------------------------------------------------------------------
# run configuration


class ConfigError(ValueError):
    pass


def _require(d: dict, key: str, ctx: str):
    if key not in d:
        raise ConfigError(f"{ctx}: missing required key {key!r}")
    return d[key]


def _no_unknown(d: dict, allowed: set, ctx: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{ctx}: unknown keys {sorted(unknown)}")


@dataclass(frozen=True)
class PhaseSettings:
    iterations: int
    initial_lr: float
    freeze_iters: int
    batch_size: int
    lambda_vb: float
    lambda_l1: float
    schedule_kind: str
    T: int
    ema_decay: float
    seed: int
    importance_sampling: bool = True
    deterministic: bool = False
    precision: str = "f32"


@dataclass(frozen=True)
class PhantomSettings:
    count: int
    grid_size: int
    organ_count: int
    suv_lo: float
    suv_hi: float
    mean_lump_count: float
    lump_sigma: float
    texture_fraction: float
    seed: int


@dataclass(frozen=True)
class RunConfig:
    normalization: NormalizationParams
    phantoms: PhantomSettings
    base: PhaseSettings
    super_res: PhaseSettings
    eval_cases: int
    eval_seed: int

    @staticmethod
    def from_file(path: str) -> "RunConfig":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        return RunConfig.from_dict(doc)

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        _no_unknown(doc, {"normalization", "phantoms", "train_base", "train_super", "eval"}, "config")
        norm_doc = _require(doc, "normalization", "config")
        _no_unknown(norm_doc, {"c", "suv_cap"}, "normalization")
        norm = NormalizationParams.from_suv_cap(
            suv_cap=float(norm_doc.get("suv_cap", 50.0)), c=float(norm_doc.get("c", 0.76)))

        ph = _require(doc, "phantoms", "config")
        _no_unknown(ph, {"count", "grid_size", "organ_count", "suv_range",
                         "mean_lump_count", "lump_sigma", "texture_fraction", "seed"}, "phantoms")
        suv_range = _require(ph, "suv_range", "phantoms")
        phantoms = PhantomSettings(
            count=int(_require(ph, "count", "phantoms")),
            grid_size=int(ph.get("grid_size", 32)),
            organ_count=int(ph.get("organ_count", 4)),
            suv_lo=float(suv_range[0]), suv_hi=float(suv_range[1]),
            mean_lump_count=float(ph.get("mean_lump_count", 40.0)),
            lump_sigma=float(ph.get("lump_sigma", 1.5)),
            texture_fraction=float(ph.get("texture_fraction", 0.25)),
            seed=int(_require(ph, "seed", "phantoms")),
        )

        def phase(key: str, default_kind: str, default_l1: float) -> PhaseSettings:
            pd = _require(doc, key, "config")
            _no_unknown(pd, {"iterations", "initial_lr", "freeze_iters", "batch_size",
                             "lambda_vb", "lambda_l1", "schedule_kind", "T", "ema_decay",
                             "seed", "importance_sampling", "deterministic", "precision"}, key)
            return PhaseSettings(
                iterations=int(_require(pd, "iterations", key)),
                initial_lr=float(_require(pd, "initial_lr", key)),
                freeze_iters=int(pd.get("freeze_iters", 0)),
                batch_size=int(pd.get("batch_size", 8)),
                lambda_vb=float(pd.get("lambda_vb", 1.0)),
                lambda_l1=float(pd.get("lambda_l1", default_l1)),
                schedule_kind=str(pd.get("schedule_kind", default_kind)),
                T=int(pd.get("T", 200)),
                ema_decay=float(pd.get("ema_decay", 0.999)),
                seed=int(_require(pd, "seed", key)),
                importance_sampling=bool(pd.get("importance_sampling", True)),
                deterministic=bool(pd.get("deterministic", False)),
                precision=str(pd.get("precision", "f32")),
            )

        ev = _require(doc, "eval", "config")
        _no_unknown(ev, {"cases", "seed"}, "eval")
        return RunConfig(
            normalization=norm,
            phantoms=phantoms,
            base=phase("train_base", "squared_cosine", 0.03),
            super_res=phase("train_super", "linear", 0.02),
            eval_cases=int(_require(ev, "cases", "eval")),
            eval_seed=int(_require(ev, "seed", "eval")),
        )
