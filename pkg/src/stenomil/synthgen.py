"""Synthetic CCTA patients: straightened arteries, LV myocardium and FFR labels.

Everything here is a toy generative model.  Artery lumen narrowing drives a
lumped-resistance FFR oracle; the resulting per-territory FFR drives
hypo-attenuation and texture smoothing in a ring-shaped short-axis
myocardium.  Labels are derived from geometry, never sampled.
"""

from __future__ import annotations

import math
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import erfc

from . import formats

VOXEL_MM = 0.3
CROSS_SECTION = 40
MAX_LENGTH = 800
MIN_LENGTH = 50

LUMEN_HU = 400.0
BACKGROUND_HU = 50.0
CALCIUM_HU = 900.0
BOUNDARY_BLUR_MM = 0.25

N_TERRITORIES = 4
ISCHEMIA_FFR = 0.85
MYO_HU = 120.0
CAVITY_HU = 350.0
OUTSIDE_HU = 30.0
MYO_SHAPE = (10, 64, 64)
MYO_SPACING = (2.0, 0.8, 0.8)

FFR_THRESHOLD = 0.8

# R_micro = 1 and c chosen so a 50%-diameter, 10 mm lesion at r0 = 1.5 mm gives FFR 0.80:
# c * 10 * (1/0.75**4 - 1/1.5**4) = 1/0.8 - 1  ->  c = 27/3200
R_MICRO = 1.0
RESISTANCE_COEF = 27.0 / 3200.0


@dataclass
class Stenosis:
    center: float  # centerline points
    length_mm: float
    r_min: float  # mm
    calcified: bool = False

    def __post_init__(self):
        if self.length_mm <= 0 or self.r_min <= 0:
            raise ValueError(f"invalid stenosis {self}")

    @property
    def half_points(self) -> float:
        return 0.5 * self.length_mm / VOXEL_MM


@dataclass
class ArteryGeometry:
    length: int  # centerline points
    r0: float  # mm
    taper: float = 0.0  # fractional radius loss over the distal two thirds
    stenoses: list[Stenosis] = field(default_factory=list)
    territory: int = 0

    def __post_init__(self):
        if not MIN_LENGTH <= self.length <= MAX_LENGTH:
            raise ValueError(f"artery length {self.length} outside [{MIN_LENGTH}, {MAX_LENGTH}]")
        if self.r0 <= 0:
            raise ValueError(f"r0 must be positive, got {self.r0}")
        if not 0 <= self.taper < 1:
            raise ValueError(f"taper must be in [0, 1), got {self.taper}")
        for s in self.stenoses:
            if not 0 < s.center < self.length:
                raise ValueError(f"stenosis at {s.center} outside artery of length {self.length}")
            if s.r_min >= self.reference_radius(s.center):
                raise ValueError(f"stenosis r_min {s.r_min} not below reference radius")

    def reference_radius(self, s) -> np.ndarray | float:
        """Healthy lumen radius (mm) at centerline position ``s``: flat proximal third, then linear taper."""
        s = np.asarray(s, dtype=float)
        start = self.length / 3.0
        frac = np.clip((s - start) / (self.length - start), 0.0, 1.0)
        out = self.r0 * (1.0 - self.taper * frac)
        return float(out) if out.ndim == 0 else out

    def radius_profile(self) -> np.ndarray:
        s = np.arange(self.length, dtype=float)
        ref = self.reference_radius(s)
        r = ref.copy()
        for st in self.stenoses:
            depth = self.reference_radius(st.center) - st.r_min
            u = np.clip((s - st.center) / st.half_points, -1.0, 1.0)
            bump = 0.5 * (1.0 + np.cos(np.pi * u))
            r = np.minimum(r, ref - depth * bump)
        return r


@dataclass
class MprVolume:
    data: np.ndarray  # (L, 40, 40), centerline axis first
    spacing: tuple[float, float, float] = (VOXEL_MM, VOXEL_MM, VOXEL_MM)

    @property
    def length(self) -> int:
        return self.data.shape[0]


@dataclass
class CohortConfig:
    patients: int = 200
    seed: int = 0
    arteries_mean: float = 18.5
    arteries_sd: float = 4.3
    ffr_mean: float = 0.79
    ffr_sd: float = 0.10
    noise_sd: float = 20.0
    myo_noise_sd: float = 15.0
    coupling: float = 60.0
    territory_sd: float = 4.0
    length_min: int = 50
    length_max: int = 160
    extra_lesions: float = 1.5
    lesion_length_min: float = 5.0  # mm
    lesion_length_max: float = 20.0

    def __post_init__(self):
        if self.patients <= 0:
            raise ValueError("patients must be positive")
        if self.arteries_mean <= 0:
            raise ValueError("arteries_mean must be positive")
        for name in ("arteries_sd", "ffr_sd", "noise_sd", "myo_noise_sd", "territory_sd", "coupling", "extra_lesions"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not MIN_LENGTH <= self.length_min <= self.length_max <= MAX_LENGTH:
            raise ValueError(f"artery length range [{self.length_min}, {self.length_max}] invalid")
        if not 0 < self.lesion_length_min <= self.lesion_length_max:
            raise ValueError(f"lesion length range [{self.lesion_length_min}, {self.lesion_length_max}] invalid")


@dataclass
class PatientRecord:
    patient_id: str
    seed: int
    arteries: list[MprVolume]
    geometries: list[ArteryGeometry]
    myo_volume: np.ndarray
    myo_mask: np.ndarray
    ffr: np.ndarray
    territory_ffr: np.ndarray
    min_ffr: float
    label: int

    @property
    def n_arteries(self) -> int:
        return len(self.arteries)


# -- FFR oracle ------------------------------------------------------------------------

def stenosis_resistance(length_mm: float, r_min: float, r_ref: float, c: float = RESISTANCE_COEF) -> float:
    return c * length_mm * (1.0 / r_min**4 - 1.0 / r_ref**4)


def ffr_oracle(geometry: ArteryGeometry, c: float = RESISTANCE_COEF, r_micro: float = R_MICRO) -> float:
    """Lumped-resistance FFR: ``R_micro / (R_micro + sum_i R_i)``."""
    if c <= 0 or r_micro <= 0:
        raise ValueError("oracle constants must be positive")
    total = sum(
        stenosis_resistance(s.length_mm, s.r_min, geometry.reference_radius(s.center), c) for s in geometry.stenoses
    )
    return r_micro / (r_micro + total)


def r_min_for_ffr(target: float, length_mm: float, r_ref: float, c: float = RESISTANCE_COEF, r_micro: float = R_MICRO) -> float:
    """Minimum lumen radius that makes a single lesion produce FFR ``target``."""
    resistance = r_micro * (1.0 / target - 1.0)
    return (1.0 / r_ref**4 + resistance / (c * length_mm)) ** -0.25


# -- rendering ---------------------------------------------------------------------------

def _cross_section_radius() -> np.ndarray:
    ax = (np.arange(CROSS_SECTION) - (CROSS_SECTION - 1) / 2.0) * VOXEL_MM
    return np.hypot(ax[:, None], ax[None, :])


def render_mpr(geometry: ArteryGeometry, noise_sd: float, seed: int) -> MprVolume:
    """Straightened artery: bright tube with erf-smoothed wall, calcium blobs and Gaussian noise."""
    rng = np.random.default_rng(seed)
    rho = _cross_section_radius()
    radius = geometry.radius_profile()
    edge = (rho[None, :, :] - radius[:, None, None]) / (math.sqrt(2.0) * BOUNDARY_BLUR_MM)
    vol = BACKGROUND_HU + (LUMEN_HU - BACKGROUND_HU) * 0.5 * erfc(edge)

    ax = (np.arange(CROSS_SECTION) - (CROSS_SECTION - 1) / 2.0) * VOXEL_MM
    s_mm = np.arange(geometry.length) * VOXEL_MM
    for st in geometry.stenoses:
        if not st.calcified:
            continue
        angle = rng.uniform(0, 2 * np.pi)
        r_wall = geometry.reference_radius(st.center)
        cy, cx = r_wall * np.sin(angle), r_wall * np.cos(angle)
        sigma = 0.5
        blob = (
            np.exp(-((s_mm - st.center * VOXEL_MM) ** 2) / (2 * sigma**2))[:, None, None]
            * np.exp(-((ax - cy) ** 2) / (2 * sigma**2))[None, :, None]
            * np.exp(-((ax - cx) ** 2) / (2 * sigma**2))[None, None, :]
        )
        vol = vol + (CALCIUM_HU - BACKGROUND_HU) * blob
    if noise_sd > 0:
        vol = vol + rng.normal(0.0, noise_sd, vol.shape)
    return MprVolume(vol.astype(np.float32))


def myocardium_geometry(rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Annular LV mask stack and its angular territory map (-1 outside the mask)."""
    z, h, w = MYO_SHAPE
    r_in, r_out = 14.0, 22.0
    if rng is not None:
        r_in += rng.uniform(-1.5, 1.5)
        r_out += rng.uniform(-1.5, 1.5)
    yy, xx = np.mgrid[:h, :w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr = np.hypot(yy - cy, xx - cx)
    ring = (rr >= r_in) & (rr < r_out)
    mask = np.repeat(ring[None], z, axis=0)
    theta = np.arctan2(yy - cy, xx - cx)
    sector = np.floor((theta + np.pi) / (2 * np.pi / N_TERRITORIES)).astype(int) % N_TERRITORIES
    territory = np.where(mask, np.repeat(sector[None], z, axis=0), -1)
    return mask, territory


def ischemic_drop(ffr: float, coupling: float) -> float:
    return coupling * max(0.0, ISCHEMIA_FFR - ffr)


def render_myocardium(
    territory_map: np.ndarray,
    territory_ffr,
    coupling: float,
    noise_sd: float,
    seed: int,
    territory_sd: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Render the LV phantom; returns ``(volume, mask)``.

    Territories fed with FFR below 0.85 lose ``coupling * (0.85 - FFR)`` HU and
    get a smoother texture.  ``territory_sd`` adds benign per-territory
    attenuation variability.
    """
    rng = np.random.default_rng(seed)
    territory_ffr = np.asarray(territory_ffr, dtype=float)
    mask = territory_map >= 0
    z, h, w = territory_map.shape
    yy, xx = np.mgrid[:h, :w]
    rr = np.hypot(yy - (h - 1) / 2.0, xx - (w - 1) / 2.0)
    r_in = rr[mask.any(axis=0)].min()
    base = np.where(rr[None] < r_in, CAVITY_HU, OUTSIDE_HU) * np.ones((z, 1, 1))
    base = np.where(mask, MYO_HU, base)
    base = gaussian_filter(base, sigma=(0, 0.7, 0.7))

    texture = gaussian_filter(rng.standard_normal((z, h, w)), sigma=(0, 1.0, 1.0))
    texture *= 12.0 / texture.std()
    smooth = gaussian_filter(texture, sigma=(0, 2.0, 2.0))
    smooth *= 12.0 / max(smooth.std(), 1e-12)

    benign = rng.normal(0.0, territory_sd, N_TERRITORIES) if territory_sd > 0 else np.zeros(N_TERRITORIES)
    shift = np.zeros((z, h, w))
    blend = np.zeros((z, h, w))
    for t in range(N_TERRITORIES):
        sel = territory_map == t
        shift[sel] = benign[t] - ischemic_drop(territory_ffr[t], coupling)
        blend[sel] = min(1.0, max(0.0, ISCHEMIA_FFR - territory_ffr[t]) / 0.25)
    # territory offsets are soft across sector borders only through the final noise
    tex = (1.0 - blend) * texture + blend * smooth
    vol = base + np.where(mask, shift + tex, 0.0)
    if noise_sd > 0:
        vol = vol + rng.normal(0.0, noise_sd, vol.shape)
    return vol.astype(np.float32), mask


# -- patients ------------------------------------------------------------------------------

def _place_lesion(rng, geom_len: int, r0: float, taper: float, target_ffr: float, length_range=(5.0, 20.0),
                  calcified_p: float = 0.3) -> Stenosis:
    hi_mm = min(length_range[1], 0.6 * geom_len * VOXEL_MM)
    length_mm = rng.uniform(min(length_range[0], hi_mm), hi_mm)
    half = 0.5 * length_mm / VOXEL_MM
    lo, hi = half + 2.0, geom_len - half - 3.0
    center = float(rng.uniform(lo, max(lo, min(hi, 0.75 * geom_len))))
    probe = ArteryGeometry(geom_len, r0, taper)
    r_ref = probe.reference_radius(center)
    r_min = r_min_for_ffr(target_ffr, length_mm, r_ref)
    return Stenosis(center, length_mm, r_min, bool(rng.random() < calcified_p))


def patient_seeds(cfg: CohortConfig, stream: int = 0) -> list[int]:
    """Per-patient seeds; ``stream`` separates the classification cohort (0) from pretraining data (1)."""
    ss = np.random.SeedSequence([cfg.seed, stream])
    return [int(s) for s in ss.generate_state(cfg.patients, dtype=np.uint64)]


def sample_geometries(cfg: CohortConfig, rng: np.random.Generator) -> list[ArteryGeometry]:
    n = int(np.clip(round(rng.normal(cfg.arteries_mean, cfg.arteries_sd)), 4, 30))
    r0 = float(rng.uniform(1.2, 2.0))
    lengths = rng.integers(cfg.length_min, cfg.length_max + 1, size=n)
    tapers = rng.uniform(0.1, 0.3, size=n)
    geoms = [ArteryGeometry(int(L), r0, float(tp), [], i % N_TERRITORIES) for i, (L, tp) in enumerate(zip(lengths, tapers))]

    target = float(np.clip(rng.normal(cfg.ffr_mean, cfg.ffr_sd), 0.45, 0.995))
    order = rng.permutation(n)
    culprit = geoms[order[0]]
    lesion_mm = (cfg.lesion_length_min, cfg.lesion_length_max)
    culprit.stenoses.append(_place_lesion(rng, culprit.length, r0, culprit.taper, target, lesion_mm))
    n_extra = min(int(rng.poisson(cfg.extra_lesions)), n - 1)
    for idx in order[1 : 1 + n_extra]:
        g = geoms[idx]
        ffr_extra = float(rng.uniform(target, 1.0))
        ffr_extra = min(max(ffr_extra, target + 1e-3), 0.999)
        g.stenoses.append(_place_lesion(rng, g.length, r0, g.taper, ffr_extra, lesion_mm))
    return geoms


def generate_patient(cfg: CohortConfig, seed: int, patient_id: str = "P0000") -> PatientRecord:
    rng = np.random.default_rng(seed)
    geoms = sample_geometries(cfg, rng)
    ffr = np.array([ffr_oracle(g) for g in geoms])
    arteries = [render_mpr(g, cfg.noise_sd, int(rng.integers(2**63))) for g in geoms]
    territory_ffr = np.ones(N_TERRITORIES)
    for g, f in zip(geoms, ffr):
        territory_ffr[g.territory] = min(territory_ffr[g.territory], f)
    mask, tmap = myocardium_geometry(rng)
    vol, mask = render_myocardium(tmap, territory_ffr, cfg.coupling, cfg.myo_noise_sd, int(rng.integers(2**63)), cfg.territory_sd)
    min_ffr = float(ffr.min())
    return PatientRecord(
        patient_id=patient_id,
        seed=seed,
        arteries=arteries,
        geometries=geoms,
        myo_volume=vol,
        myo_mask=mask,
        ffr=ffr,
        territory_ffr=territory_ffr,
        min_ffr=min_ffr,
        label=int(min_ffr <= FFR_THRESHOLD),
    )


def iter_cohort(cfg: CohortConfig, stream: int = 0) -> Iterator[PatientRecord]:
    """Generate patients lazily (a full desk-scale cohort does not fit in memory at once)."""
    for i, seed in enumerate(patient_seeds(cfg, stream)):
        yield generate_patient(cfg, seed, f"P{i:04d}" if stream == 0 else f"T{i:04d}")


def cohort_labels(cfg: CohortConfig, stream: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Geometry-only pass: ``(artery counts, min FFR, labels)`` without rendering."""
    counts, mins = [], []
    for seed in patient_seeds(cfg, stream):
        geoms = sample_geometries(cfg, np.random.default_rng(seed))
        counts.append(len(geoms))
        mins.append(min(ffr_oracle(g) for g in geoms))
    mins = np.array(mins)
    return np.array(counts), mins, (mins <= FFR_THRESHOLD).astype(int)


# -- dataset directory ---------------------------------------------------------------------

def write_patient(root, patient: PatientRecord) -> Path:
    pdir = Path(root) / patient.patient_id
    (pdir / "arteries").mkdir(parents=True, exist_ok=True)
    for i, art in enumerate(patient.arteries):
        formats.write_volume(pdir / "arteries" / f"{i:03d}.vol", art.data, art.spacing)
    formats.write_volume(pdir / "myo.vol", patient.myo_volume, MYO_SPACING)
    formats.write_mask(pdir / "myo.mask", patient.myo_mask, MYO_SPACING)
    meta: dict[str, object] = {"patient_id": patient.patient_id, "n_arteries": patient.n_arteries}
    for i, f in enumerate(patient.ffr):
        meta[f"ffr_{i:03d}"] = float(f)
    meta["min_ffr"] = patient.min_ffr
    meta["label"] = patient.label
    meta["seed"] = patient.seed
    formats.write_meta(pdir / "meta", meta)
    return pdir


def read_patient_meta(pdir) -> dict:
    meta = formats.read_meta(Path(pdir) / "meta")
    n = int(meta["n_arteries"])
    return {
        "patient_id": meta["patient_id"],
        "n_arteries": n,
        "ffr": np.array([float(meta[f"ffr_{i:03d}"]) for i in range(n)]),
        "min_ffr": float(meta["min_ffr"]),
        "label": int(meta["label"]),
        "seed": int(meta["seed"]),
    }


def read_patient_volumes(pdir) -> tuple[list[MprVolume], np.ndarray, np.ndarray]:
    pdir = Path(pdir)
    arteries = []
    for f in sorted((pdir / "arteries").glob("*.vol")):
        data, spacing = formats.read_volume(f)
        arteries.append(MprVolume(data, tuple(spacing)))
    vol, _ = formats.read_volume(pdir / "myo.vol")
    mask, _ = formats.read_mask(pdir / "myo.mask")
    return arteries, vol, mask
