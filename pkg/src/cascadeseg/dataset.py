"""Multi-modal scans, preprocessing, synthetic phantoms and cohort handling.

A scan holds the four co-registered modalities (T1, T1c, T2, FLAIR) on one
grid plus optional labels in the {0, 1, 2, 4} convention. Normalization
standardizes each modality over brain voxels; the sagittal reflection is the
training augmentation; phantoms provide analytically known nested tumors so
the whole pipeline can run without external data.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .morphology import brain_mask
from .volume_io import DEFAULT_AXES, Volume, load_volume, save_volume

MODALITIES = ("t1", "t1c", "t2", "flair")
FLAIR_INDEX = MODALITIES.index("flair")
VALID_LABELS = (0, 1, 2, 4)

LABELS_FILE = "labels.vol"


class DegenerateStatsWarning(UserWarning):
    """A modality had (near) zero spread; normalization divided by one."""


class AxisOrderError(ValueError):
    """A reflection was requested without a usable axis-order declaration."""


@dataclass
class MultiModalScan:
    """Four aligned modality volumes, optional labels, and grid metadata."""

    subject_id: str
    t1: np.ndarray
    t1c: np.ndarray
    t2: np.ndarray
    flair: np.ndarray
    labels: np.ndarray | None = None
    spacing: tuple = (1.0, 1.0, 1.0)
    axes: str = DEFAULT_AXES

    def __post_init__(self):
        dims = np.asarray(self.t1).shape
        for name in MODALITIES:
            volume = np.asarray(getattr(self, name))
            if volume.shape != dims:
                raise ValueError(f"{self.subject_id}: modality {name} has shape "
                                 f"{volume.shape}, expected {dims}")
            setattr(self, name, volume)
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != dims:
                raise ValueError(f"{self.subject_id}: labels shape {self.labels.shape} "
                                 f"does not match scan dims {dims}")
            if not np.isin(self.labels, VALID_LABELS).all():
                bad = np.unique(self.labels[~np.isin(self.labels, VALID_LABELS)])
                raise ValueError(f"{self.subject_id}: invalid label values {bad[:8]}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self):
        return self.t1.shape

    def modalities(self):
        return [getattr(self, name) for name in MODALITIES]

    def stack(self, dtype=np.float32):
        """Network input of shape (1, 4, D, H, W); FLAIR is channel 3."""
        return np.stack([m.astype(dtype, copy=False) for m in self.modalities()])[None]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def save_scan(scan, directory):
    """Write one subject directory of native volume files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in MODALITIES:
        save_volume(Volume(getattr(scan, name), spacing=scan.spacing,
                           modality=name, axes=scan.axes),
                    directory / f"{name}.vol")
    if scan.labels is not None:
        save_volume(Volume(scan.labels.astype(np.uint8), spacing=scan.spacing,
                           modality="labels", axes=scan.axes),
                    directory / LABELS_FILE)


def load_scan(directory, subject_id=None):
    """Read one subject directory written by ``save_scan``."""
    directory = Path(directory)
    if subject_id is None:
        subject_id = directory.name
    volumes = {}
    for name in MODALITIES:
        path = directory / f"{name}.vol"
        if not path.exists():
            raise FileNotFoundError(f"{directory}: missing modality file {path.name}")
        volumes[name] = load_volume(path)
    first = volumes[MODALITIES[0]]
    for name, vol in volumes.items():
        if vol.data.shape != first.data.shape or vol.spacing != first.spacing \
                or vol.axes != first.axes:
            raise ValueError(f"{directory}: modality {name} disagrees on grid metadata")
    labels = None
    labels_path = directory / LABELS_FILE
    if labels_path.exists():
        labels = load_volume(labels_path).data
    return MultiModalScan(subject_id=subject_id,
                          **{name: volumes[name].data for name in MODALITIES},
                          labels=labels, spacing=first.spacing, axes=first.axes)


def is_scan_dir(directory):
    return all((Path(directory) / f"{name}.vol").exists() for name in MODALITIES)


def load_cohort(directory):
    """All subject subdirectories of a cohort directory, sorted by name."""
    directory = Path(directory)
    if is_scan_dir(directory):
        return [load_scan(directory)]
    subjects = sorted(p for p in directory.iterdir() if p.is_dir() and is_scan_dir(p))
    if not subjects:
        raise FileNotFoundError(f"{directory}: no subject directories with modality files")
    return [load_scan(p) for p in subjects]


# -- preprocessing -------------------------------------------------------------


def normalize_scan(scan):
    """Standardize each modality over brain voxels; background stays zero.

    Modalities with spread below 1e-8 are centered but divided by one, with a
    ``DegenerateStatsWarning``.
    """
    brain = brain_mask(scan) > 0
    updates = {}
    for name in MODALITIES:
        volume = getattr(scan, name).astype(np.float32, copy=True)
        if brain.any():
            values = volume[brain]
            mean = float(values.mean())
            std = float(values.std())
            if std < 1e-8:
                warnings.warn(f"{scan.subject_id}/{name}: near-constant intensities, "
                              "dividing by one", DegenerateStatsWarning, stacklevel=2)
                std = 1.0
            volume[brain] = (values - mean) / std
        volume[~brain] = 0.0
        updates[name] = volume
    return scan.replace(**updates)


def _reflection_axis(axes):
    for axis, letter in enumerate(axes.upper()):
        if letter in ("L", "R"):
            return axis
    raise AxisOrderError(
        f"axis order {axes!r} does not declare a left-right axis (L or R)")


def reflect_volume(data, axes):
    """Reverse the declared left-right axis of one raw volume."""
    return np.flip(np.asarray(data), axis=_reflection_axis(axes)).copy()


def reflect_sagittal(scan):
    """Mirror a scan across the sagittal plane; labels move with it."""
    axis = _reflection_axis(scan.axes)
    updates = {name: np.flip(getattr(scan, name), axis=axis).copy()
               for name in MODALITIES}
    if scan.labels is not None:
        updates["labels"] = np.flip(scan.labels, axis=axis).copy()
    return scan.replace(**updates)


# -- synthetic phantoms ---------------------------------------------------------

# per-tissue, per-modality (mean, std); edema lights up FLAIR/T2 and the
# enhancing core lights up T1c, mirroring the qualitative contrast behavior
DEFAULT_INTENSITY_PROFILE = {
    "brain": {"t1": (1.0, 0.08), "t1c": (1.0, 0.08), "t2": (1.0, 0.08), "flair": (1.0, 0.08)},
    "edema": {"t1": (0.8, 0.08), "t1c": (0.9, 0.08), "t2": (1.8, 0.08), "flair": (2.0, 0.08)},
    "necrotic": {"t1": (0.5, 0.08), "t1c": (0.6, 0.08), "t2": (1.4, 0.08), "flair": (1.3, 0.08)},
    "enhancing": {"t1": (1.2, 0.08), "t1c": (2.2, 0.08), "t2": (1.2, 0.08), "flair": (1.5, 0.08)},
}

_TISSUE_BY_LABEL = {0: "brain", 1: "necrotic", 2: "edema", 4: "enhancing"}


@dataclass
class PhantomSpec:
    """Recipe for a synthetic brain with nested tumor regions.

    ``tumor_radii`` orders (enhancing, core, whole) strictly increasing: the
    enhancing ball sits inside the core (its shell takes label 1) which sits
    inside the whole tumor (edema shell, label 2).
    """

    dims: tuple = (32, 32, 32)
    seed: int = 0
    brain_center: tuple | None = None
    brain_radii: tuple = (13.5, 13.5, 13.5)
    tumor_center: tuple = (18.5, 17.3, 14.4)
    tumor_radii: tuple = (2.8, 4.6, 7.0)
    intensity_profile: dict = field(default_factory=lambda: DEFAULT_INTENSITY_PROFILE)
    noise: float = 0.05
    center_jitter: float = 2.0
    radius_jitter: float = 0.08
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.brain_center is None:
            self.brain_center = tuple((d - 1) / 2.0 for d in self.dims)
        self.validate()

    def validate(self):
        if any(d < 8 for d in self.dims):
            raise ValueError(f"phantom dims too small: {self.dims}")
        r_et, r_core, r_whole = self.tumor_radii
        if not 0 < r_et < r_core < r_whole:
            raise ValueError(f"tumor radii must nest strictly (et < core < whole), "
                             f"got {self.tumor_radii}")
        for tissue in _TISSUE_BY_LABEL.values():
            table = self.intensity_profile.get(tissue)
            if table is None or any(m not in table for m in MODALITIES):
                raise ValueError(f"intensity profile incomplete for tissue {tissue!r}")
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")

    def to_json(self, path):
        record = dataclasses.asdict(self)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            record = json.load(fh)
        for key in ("dims", "brain_center", "brain_radii", "tumor_center",
                    "tumor_radii", "spacing"):
            if record.get(key) is not None:
                record[key] = tuple(record[key])
        record["intensity_profile"] = {
            tissue: {m: tuple(v) for m, v in table.items()}
            for tissue, table in record["intensity_profile"].items()}
        return cls(**record)


def _ellipsoid(dims, center, radii):
    grids = np.ogrid[:dims[0], :dims[1], :dims[2]]
    acc = np.zeros(dims, dtype=np.float64)
    for grid, c, r in zip(grids, center, radii):
        acc = acc + ((grid - c) / r) ** 2
    return acc <= 1.0


def _ball(dims, center, radius):
    return _ellipsoid(dims, center, (radius, radius, radius))


def generate_phantom(spec, subject_id="phantom"):
    """A deterministic multi-modal scan with nested ground-truth labels."""
    spec.validate()
    dims = spec.dims
    brain = _ellipsoid(dims, spec.brain_center, spec.brain_radii)
    r_et, r_core, r_whole = spec.tumor_radii
    whole = _ball(dims, spec.tumor_center, r_whole)
    core = _ball(dims, spec.tumor_center, r_core)
    enhancing = _ball(dims, spec.tumor_center, r_et)
    if not (whole <= brain).all():
        raise ValueError(f"{subject_id}: tumor extends outside the brain ellipsoid")

    labels = np.zeros(dims, dtype=np.uint8)
    labels[whole] = 2          # edema shell
    labels[core] = 1           # necrotic / non-enhancing shell
    labels[enhancing] = 4      # enhancing core

    rng = np.random.default_rng(spec.seed)
    volumes = {}
    for name in MODALITIES:
        mean_map = np.zeros(dims, dtype=np.float64)
        std_map = np.zeros(dims, dtype=np.float64)
        for label, tissue in _TISSUE_BY_LABEL.items():
            mean, std = spec.intensity_profile[tissue][name]
            region = brain & (labels == label) if label == 0 else labels == label
            mean_map[region] = mean
            std_map[region] = std
        texture = rng.standard_normal(dims)
        noise = rng.standard_normal(dims)
        volume = mean_map + std_map * texture + spec.noise * noise
        volume[~brain] = 0.0
        volumes[name] = volume.astype(np.float32)

    return MultiModalScan(subject_id=subject_id, labels=labels,
                          spacing=spec.spacing, axes=DEFAULT_AXES, **volumes)


def phantom_cohort(spec, count):
    """``count`` phantoms with deterministically jittered tumor geometry."""
    scans = []
    for index in range(count):
        child_seed = int(spec.seed) + index
        jitter_rng = np.random.default_rng([child_seed, 0xC0])
        center = tuple(
            float(c) + float(jitter_rng.integers(-round(spec.center_jitter),
                                                 round(spec.center_jitter) + 1))
            for c in spec.tumor_center)
        scale = 1.0 + spec.radius_jitter * float(jitter_rng.uniform(-1.0, 1.0))
        radii = tuple(r * scale for r in spec.tumor_radii)
        child = dataclasses.replace(spec, seed=child_seed, tumor_center=center,
                                    tumor_radii=radii)
        scans.append(generate_phantom(child, subject_id=f"phantom-{index:03d}"))
    return scans


def analytic_region_volumes(spec):
    """Closed-form ball volumes of the three nested regions, in voxels."""
    r_et, r_core, r_whole = spec.tumor_radii
    ball = lambda r: 4.0 / 3.0 * np.pi * r ** 3
    return {"ET": ball(r_et), "TC": ball(r_core), "WT": ball(r_whole)}


# -- cohort splitting -----------------------------------------------------------


def split_cohort(subjects, fraction, seed):
    """Deterministic shuffled split into (train, development) parts.

    The train side receives round(fraction * n) subjects; both sides must be
    non-empty.
    """
    subjects = list(subjects)
    if not subjects:
        raise ValueError("cannot split an empty cohort")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    n_train = int(len(subjects) * fraction + 0.5)
    if n_train == 0 or n_train == len(subjects):
        raise ValueError(
            f"fraction {fraction} leaves an empty side for {len(subjects)} subjects")
    order = np.random.default_rng(seed).permutation(len(subjects))
    train = [subjects[i] for i in order[:n_train]]
    dev = [subjects[i] for i in order[n_train:]]
    return train, dev
