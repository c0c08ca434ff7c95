"""Synthetic chest-CT-like volumes with planted spherical nodules."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np

from .volume import Annotation, Volume, VolumeHeader

PARENCHYMA_HU = -850.0


class GenerationError(RuntimeError):
    pass


@dataclass
class SynthConfig:
    n_volumes: int = 8
    dims: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    nodules_per_volume: Tuple[int, int] = (1, 3)
    diameter_mm: Tuple[float, float] = (4.0, 12.0)
    contrast_hu: float = 900.0
    noise_sigma: float = 50.0
    edge_softness_mm: float = 0.5
    margin_mm: float = 2.0
    max_retries: int = 200
    id_prefix: str = "syn"

    def validate(self) -> "SynthConfig":
        lo, hi = self.nodules_per_volume
        if not 0 <= lo <= hi:
            raise ValueError(f"bad nodules_per_volume range {self.nodules_per_volume}")
        dlo, dhi = self.diameter_mm
        if not 0 < dlo <= dhi:
            raise ValueError(f"bad diameter range {self.diameter_mm}")
        if dlo < 2 * max(self.spacing):
            raise ValueError("smallest diameter must span at least two voxels")
        if self.n_volumes < 0 or self.noise_sigma < 0 or self.edge_softness_mm <= 0:
            raise ValueError("n_volumes, noise_sigma must be >= 0 and edge_softness_mm > 0")
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d).validate()


def nodule_profile(r_mm: np.ndarray, diameter: float, contrast: float, softness: float) -> np.ndarray:
    """HU increment at distance ``r_mm`` from the centre: sigmoid falloff at radius d/2."""
    z = np.clip((r_mm - diameter / 2.0) / softness, -60.0, 60.0)
    return contrast / (1.0 + np.exp(z))


def _place(rng, cfg: SynthConfig, count: int, extent_mm: np.ndarray):
    placed: List[Tuple[np.ndarray, float]] = []
    tries = 0
    while len(placed) < count:
        tries += 1
        if tries > cfg.max_retries:
            raise GenerationError(f"could not place {count} non-overlapping nodules "
                                  f"after {cfg.max_retries} attempts")
        d = float(rng.uniform(*cfg.diameter_mm))
        lo = d / 2 + cfg.margin_mm
        hi = extent_mm - lo
        if np.any(hi <= lo):
            continue
        c = rng.uniform(lo, hi)
        if all(np.linalg.norm(c - c2) > (d + d2) / 2 + cfg.margin_mm for c2, d2 in placed):
            placed.append((c, d))
    return placed


def synth_volume(cfg: SynthConfig, seed: int, index: int) -> Tuple[Volume, List[Annotation]]:
    rng = np.random.default_rng([seed, index])
    sp = np.asarray(cfg.spacing, dtype=np.float64)
    dims = tuple(cfg.dims)
    vid = f"{cfg.id_prefix}{index:04d}"
    hu = PARENCHYMA_HU + cfg.noise_sigma * rng.standard_normal(dims)
    lo, hi = cfg.nodules_per_volume
    count = int(rng.integers(lo, hi + 1))
    anns = []
    # voxel-centre coordinates in mm, axis order z, y, x
    grids = [(np.arange(n) + 0.5) * s for n, s in zip(dims, sp)]
    for c, d in _place(rng, cfg, count, np.array(dims) * sp):
        r2 = ((grids[0] - c[0])[:, None, None] ** 2 + (grids[1] - c[1])[None, :, None] ** 2
              + (grids[2] - c[2])[None, None, :] ** 2)
        hu += nodule_profile(np.sqrt(r2), d, cfg.contrast_hu, cfg.edge_softness_mm)
        anns.append(Annotation(vid, x=float(c[2]), y=float(c[1]), z=float(c[0]), diameter=d))
    sv = np.clip(np.rint(hu + 1024.0), -32768, 32767).astype(np.int16)
    header = VolumeHeader(vid, dims, tuple(sp), rescale_slope=1.0, rescale_intercept=-1024.0)
    return Volume(header, sv), anns


def synth_generate(cfg: SynthConfig, seed: int = 0) -> List[Tuple[Volume, List[Annotation]]]:
    """Deterministic per ``seed``; volume ``i`` draws from ``default_rng([seed, i])``."""
    cfg.validate()
    return [synth_volume(cfg, seed, i) for i in range(cfg.n_volumes)]
