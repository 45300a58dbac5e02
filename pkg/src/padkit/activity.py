"""Uniform organ activity maps and synthetic phantom cases.

A uniform activity map assigns every labeled organ its mean uptake and
is the conditioning input of the generative model. Synthetic phantoms
(random ellipse organs + lumpy intra-organ texture) stand in for a
clinical dataset so that the whole pipeline can be trained and
evaluated at desk scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .imagekit import (
    InvalidParameterError,
    LabelGrid2D,
    ScalarGrid2D,
    ShapeError,
    UNIT_SUV,
)
from .tumor import LumpyParams, gaussian_lumpy


class MissingOrganError(InvalidParameterError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class OrganStats:
    label: int
    mean_suv: float
    voxel_count: int


@dataclass(frozen=True)
class PhantomConfig:
    """Knobs for one synthetic case.

    Organ mean SUVs are drawn uniformly from `suv_range`; the texture is
    a lumpy field scaled relative to each organ's mean, with the in-organ
    mean removed so assigned means are preserved by construction.
    """

    grid_size: int = 32
    organ_count: int = 4
    suv_range: tuple[float, float] = (0.5, 10.0)
    texture: LumpyParams = LumpyParams(mean_lump_count=40.0, lump_sigma=1.5, magnitude=1.0)
    texture_fraction: float = 0.25
    radius_range: tuple[float, float] = (3.0, 6.0)
    seed: int = 0

    def __post_init__(self):
        if self.organ_count < 2:
            raise InvalidParameterError("need at least 2 organs")
        if not (0 <= self.suv_range[0] <= self.suv_range[1]):
            raise InvalidParameterError(f"bad suv_range {self.suv_range}")
        if not (0 <= self.texture_fraction < 1):
            raise InvalidParameterError("texture_fraction must be in [0, 1)")


def organ_means(pet: ScalarGrid2D, labels: LabelGrid2D) -> list[OrganStats]:
    """Per-organ mean uptake over exactly the labeled pixels."""
    if (pet.height, pet.width) != (labels.height, labels.width):
        raise ShapeError("image and label map shapes differ")
    out = []
    for lab in labels.present_labels():
        m = labels.labels == lab
        out.append(OrganStats(label=int(lab), mean_suv=float(pet.values[m].mean()),
                              voxel_count=int(m.sum())))
    return out


def build_uniform_map(labels: LabelGrid2D, stats: list[OrganStats], background: float = 0.0) -> ScalarGrid2D:
    """Piecewise-constant map: each organ at its mean, background elsewhere."""
    by_label = {s.label: s.mean_suv for s in stats}
    values = np.full((labels.height, labels.width), float(background), dtype=np.float64)
    for lab in labels.present_labels():
        if int(lab) not in by_label:
            raise MissingOrganError(f"label {int(lab)} has no stats entry")
        values[labels.labels == lab] = by_label[int(lab)]
    return ScalarGrid2D(values, unit=UNIT_SUV)


def organ_stats_to_csv(stats: list[OrganStats], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label", "mean_suv", "voxel_count"])
        for s in stats:
            w.writerow([s.label, repr(float(s.mean_suv)), s.voxel_count])


def organ_stats_from_csv(path) -> list[OrganStats]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [OrganStats(label=int(r["label"]), mean_suv=float(r["mean_suv"]),
                       voxel_count=int(r["voxel_count"])) for r in rows]


def _place_organs(config: PhantomConfig, rng: np.random.Generator) -> LabelGrid2D:
    """Random non-overlapping ellipses; bounded retries per organ."""
    n = config.grid_size
    labels = np.zeros((n, n), dtype=np.int32)
    rows = np.arange(n, dtype=np.float64)[:, None]
    cols = np.arange(n, dtype=np.float64)[None, :]
    for organ in range(1, config.organ_count + 1):
        placed = False
        for _ in range(200):
            r_a = rng.uniform(*config.radius_range)
            r_b = rng.uniform(*config.radius_range)
            theta = rng.uniform(0.0, np.pi)
            margin = max(r_a, r_b) + 1.0
            if n - 1 - margin <= margin:
                continue
            cr = rng.uniform(margin, n - 1 - margin)
            cc = rng.uniform(margin, n - 1 - margin)
            cos_t, sin_t = np.cos(theta), np.sin(theta)
            u = (rows - cr) * cos_t + (cols - cc) * sin_t
            v = -(rows - cr) * sin_t + (cols - cc) * cos_t
            inside = (u / r_a) ** 2 + (v / r_b) ** 2 <= 1.0
            if inside.sum() < 4:
                continue
            if (labels[inside] != 0).any():
                continue
            labels[inside] = organ
            placed = True
            break
        if not placed:
            raise GenerationError(f"could not place organ {organ} after 200 attempts")
    return LabelGrid2D(labels)


def synth_phantom(config: PhantomConfig) -> tuple[LabelGrid2D, ScalarGrid2D, ScalarGrid2D]:
    """One synthetic case: (labels, heterogeneous target, uniform map).

    Deterministic under config.seed. Inside each organ the target is
    mean * (1 + f * h) with h a lumpy field that is clipped and then
    re-centered per organ, so organ means of the target equal the
    assigned values up to floating point.
    """
    rng = np.random.default_rng(config.seed)
    labels = _place_organs(config, rng)
    n = config.grid_size
    means = rng.uniform(config.suv_range[0], config.suv_range[1], size=config.organ_count)
    uniform = np.zeros((n, n), dtype=np.float64)
    target = np.zeros((n, n), dtype=np.float64)
    texture = gaussian_lumpy((n, n), config.texture, rng)
    if config.texture.magnitude > 0:
        # normalize to a dimensionless field of roughly unit spread
        scale = max(1e-12, np.abs(texture).max())
        texture = texture / scale
    for organ in range(1, config.organ_count + 1):
        m = labels.labels == organ
        uniform[m] = means[organ - 1]
        h = np.clip(texture[m], -0.9, 0.9)
        h = h - h.mean()
        target[m] = means[organ - 1] * (1.0 + config.texture_fraction * h)
    return labels, ScalarGrid2D(target, unit=UNIT_SUV), ScalarGrid2D(uniform, unit=UNIT_SUV)
