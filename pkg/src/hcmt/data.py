"""Volume I/O, preprocessing, splits, patch sampling and the synthetic atrium generator."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from hcmt.errors import DataError, ShapeError

log = logging.getLogger(__name__)

DEFAULT_MARGIN = 25
NIFTI_SUFFIXES = (".nii", ".nii.gz")
NRRD_SUFFIXES = (".nrrd", ".nhdr")
RAW_SUFFIXES = (".npy",)


@dataclass
class Volume:
    intensities: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    identifier: str = ""
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.intensities.ndim != 3:
            raise ShapeError(f"volume {self.identifier!r} must be 3D, got shape {self.intensities.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"volume {self.identifier!r}: spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.intensities.shape


@dataclass
class Case:
    """A volume with its (optional) label mask."""

    volume: Volume
    mask: np.ndarray | None = None

    @property
    def id(self) -> str:
        return self.volume.identifier


def validate_mask(mask: np.ndarray, volume: Volume | None = None, source: str = "") -> np.ndarray:
    if volume is not None and mask.shape != volume.shape:
        raise DataError(f"{source or volume.identifier}: mask shape {mask.shape} does not match image shape {volume.shape}")
    values = np.unique(mask)
    if not np.isin(values, (0, 1)).all():
        raise DataError(f"{source}: mask must be binary, found values {values[~np.isin(values, (0, 1))].tolist()}")
    return mask.astype(np.uint8)


# ---------------------------------------------------------------- file I/O

def detect_format(path: str | Path) -> str:
    name = str(path).lower()
    if name.endswith(NIFTI_SUFFIXES):
        return "nifti"
    if name.endswith(NRRD_SUFFIXES):
        return "nrrd"
    if name.endswith(RAW_SUFFIXES):
        return "raw"
    raise DataError(f"{path}: unsupported volume format")


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def read_array(path: str | Path, fmt: str | None = None) -> tuple[np.ndarray, tuple[float, ...]]:
    path = Path(path)
    fmt = fmt or detect_format(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    try:
        if fmt == "nifti":
            import nibabel as nib

            img = nib.load(str(path))
            data = np.asarray(img.dataobj)
            spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
        elif fmt == "nrrd":
            import nrrd

            data, header = nrrd.read(str(path))
            if "space directions" in header and header["space directions"] is not None:
                dirs = np.asarray(header["space directions"], dtype=float)
                spacing = tuple(float(np.linalg.norm(d)) for d in dirs[-3:])
            else:
                spacing = tuple(float(s) for s in header.get("spacings", (1.0, 1.0, 1.0)))
        elif fmt == "raw":
            data = np.load(path, allow_pickle=False)
            meta_path = _sidecar(path)
            spacing = (1.0, 1.0, 1.0)
            if meta_path.exists():
                spacing = tuple(json.loads(meta_path.read_text()).get("spacing", spacing))
        else:
            raise DataError(f"{path}: unknown format {fmt!r}")
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"{path}: cannot read volume ({exc})") from exc
    # native byte order
    data = np.asarray(data)
    if data.dtype.byteorder not in ("=", "|"):
        data = data.astype(data.dtype.newbyteorder("="))
    if data.ndim != 3:
        raise DataError(f"{path}: expected a 3D volume, got shape {data.shape}")
    return data, spacing


def write_array(path: str | Path, data: np.ndarray, spacing=(1.0, 1.0, 1.0), fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = fmt or detect_format(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "nifti":
        import nibabel as nib

        img = nib.Nifti1Image(data, np.diag(list(spacing) + [1.0]))
        img.header.set_zooms(tuple(spacing))
        nib.save(img, str(path))
    elif fmt == "nrrd":
        import nrrd

        nrrd.write(str(path), data, {"space directions": np.diag(spacing).tolist(), "space": "left-posterior-superior"})
    elif fmt == "raw":
        np.save(path, data, allow_pickle=False)
        _sidecar(path).write_text(json.dumps({"spacing": list(spacing), "shape": list(data.shape), "dtype": str(data.dtype)}))
    else:
        raise DataError(f"{path}: unknown format {fmt!r}")
    return path


def load_volume(path: str | Path, fmt: str | None = None, mask_path: str | Path | None = None) -> Case:
    """Read an image (and optionally its label mask) into a :class:`Case`."""
    path = Path(path)
    data, spacing = read_array(path, fmt)
    identifier = path.name.split(".")[0]
    volume = Volume(data, spacing, identifier)
    mask = None
    if mask_path is not None:
        raw, _ = read_array(mask_path)
        mask = validate_mask(raw, volume, str(mask_path))
    return Case(volume, mask)


def save_case(case: Case, directory: str | Path, fmt: str = "nifti") -> dict:
    """Write ``<id>_image`` and ``<id>_label`` files; returns their paths."""
    ext = {"nifti": ".nii.gz", "nrrd": ".nrrd", "raw": ".npy"}[fmt]
    directory = Path(directory)
    out = {"image": str(write_array(directory / f"{case.id}_image{ext}", case.volume.intensities, case.volume.spacing, fmt))}
    if case.mask is not None:
        out["label"] = str(write_array(directory / f"{case.id}_label{ext}", case.mask.astype(np.uint8), case.volume.spacing, fmt))
    return out


# ---------------------------------------------------------------- preprocessing

def foreground_bbox(mask: np.ndarray, margin: int, shape: Sequence[int]) -> tuple[slice, ...]:
    idx = np.nonzero(mask)
    return tuple(
        slice(max(int(i.min()) - margin, 0), min(int(i.max()) + margin + 1, n))
        for i, n in zip(idx, shape)
    )


def zscore(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = x.astype(np.float64)
    std = x.std()
    if std == 0 or not np.isfinite(std):
        return np.zeros(x.shape, np.float32), False
    return ((x - x.mean()) / std).astype(np.float32), True


def preprocess(volume: Volume, mask: np.ndarray | None = None, margin: int = DEFAULT_MARGIN,
               crop_to_mask: bool = True) -> tuple[Volume, np.ndarray | None]:
    """Crop around the labeled foreground (plus ``margin`` voxels) and z-score the crop.

    A constant volume normalizes to zeros and gets the ``zero_variance`` flag.
    """
    x = volume.intensities
    if not np.isfinite(x).all():
        raise DataError(f"{volume.identifier}: non-finite intensities")
    if mask is not None and crop_to_mask:
        if not mask.any():
            raise DataError(f"{volume.identifier}: mask-guided crop requested but mask is empty")
        box = foreground_bbox(mask, margin, x.shape)
        x, mask = x[box], mask[box]
    normed, ok = zscore(x)
    flags = volume.flags if ok else volume.flags + ("zero_variance",)
    if not ok:
        log.warning("%s: zero intensity variance, normalized to zeros", volume.identifier)
    return Volume(normed, volume.spacing, volume.identifier, flags), (None if mask is None else mask.copy())


def pad_to_shape(x: np.ndarray, shape: Sequence[int], mode: str = "constant") -> np.ndarray:
    pads = [(0, max(s - n, 0)) for n, s in zip(x.shape, shape)]
    pads = [(p // 2, p - p // 2) for _, p in pads]
    if not any(p for pair in pads for p in pair):
        return x
    return np.pad(x, pads, mode=mode)


def random_crop(image: np.ndarray, mask: np.ndarray | None, patch_shape: Sequence[int],
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None, tuple[int, ...]]:
    """Uniformly placed patch; the mask (if any) is cut at the same corner."""
    patch_shape = tuple(int(p) for p in patch_shape)
    if any(p > n for p, n in zip(patch_shape, image.shape)):
        raise ShapeError(f"patch {patch_shape} larger than volume {image.shape}")
    corner = tuple(int(rng.integers(0, n - p + 1)) for n, p in zip(image.shape, patch_shape))
    box = tuple(slice(c, c + p) for c, p in zip(corner, patch_shape))
    return image[box], (None if mask is None else mask[box]), corner


# ---------------------------------------------------------------- splits

@dataclass
class DatasetSplit:
    labeled: list[str]
    unlabeled: list[str]
    test: list[str]
    seed: int = 0

    def __post_init__(self):
        ids = self.labeled + self.unlabeled + self.test
        if len(set(ids)) != len(ids):
            raise DataError("split partitions must be disjoint and free of duplicates")

    def to_dict(self) -> dict:
        return {"labeled": self.labeled, "unlabeled": self.unlabeled, "test": self.test, "seed": self.seed}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSplit":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: cannot read split file ({exc})") from exc
        return cls(list(d.get("labeled", [])), list(d.get("unlabeled", [])), list(d.get("test", [])), int(d.get("seed", 0)))


def make_split(ids: Sequence[str], n_labeled: int, n_unlabeled: int, n_test: int, seed: int) -> DatasetSplit:
    """Shuffle ``ids`` with ``seed`` and take test, labeled and unlabeled partitions in that order."""
    ids = sorted(ids)
    if n_labeled + n_unlabeled + n_test > len(ids):
        raise DataError(f"split needs {n_labeled + n_unlabeled + n_test} cases, only {len(ids)} available")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    test = shuffled[:n_test]
    labeled = shuffled[n_test:n_test + n_labeled]
    unlabeled = shuffled[n_test + n_labeled:n_test + n_labeled + n_unlabeled]
    return DatasetSplit(labeled, unlabeled, test, seed)


def load_directory(root: str | Path, ids: Sequence[str] | None = None) -> dict[str, Case]:
    """Read every ``<id>_image.*`` (with optional ``<id>_label.*``) under ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: data directory not found")
    cases = {}
    for image_path in sorted(root.iterdir()):
        name = image_path.name
        if "_image." not in name or name.endswith(".json"):
            continue
        case_id = name.split("_image.")[0]
        if ids is not None and case_id not in ids:
            continue
        label_path = image_path.with_name(name.replace("_image.", "_label."))
        case = load_volume(image_path, mask_path=label_path if label_path.exists() else None)
        case.volume.identifier = case_id
        cases[case_id] = case
    if ids is not None:
        missing = sorted(set(ids) - set(cases))
        if missing:
            raise DataError(f"{root}: cases listed in split not found: {missing[:5]}")
    return cases


# ---------------------------------------------------------------- synthetic data

def _rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def _ellipsoid(coords: np.ndarray, center, axes, rot) -> np.ndarray:
    local = (coords - center) @ rot
    return np.sum((local / axes) ** 2, axis=-1)


def _smooth_field(shape, rng: np.random.Generator, n_terms: int = 4) -> np.ndarray:
    """Low-frequency cosine field with values of order one."""
    grids = np.meshgrid(*[np.linspace(0, 1, n) for n in shape], indexing="ij")
    out = np.zeros(shape)
    for _ in range(n_terms):
        k = rng.uniform(0.3, 1.5, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * sum(ki * g for ki, g in zip(k, grids)) + phase)
    return out / n_terms


@dataclass
class SyntheticParams:
    noise_sigma: float = 0.35
    bias_strength: float = 0.3
    contrast: float = 0.7
    distractors: int = 3
    blur: float = 1.0
    min_fraction: float = 0.02
    max_fraction: float = 0.40


def _shape_mask(shape, rng: np.random.Generator, coords: np.ndarray) -> np.ndarray:
    g = np.asarray(shape, float)
    center = g / 2 + rng.uniform(-0.1, 0.1, 3) * g
    axes = rng.uniform(0.14, 0.26, 3) * g
    rot = _rotation(rng)
    field = _ellipsoid(coords, center, axes, rot)
    body = field <= 1.0
    for _ in range(rng.integers(1, 4)):
        # lobe centered on the body surface, so the union stays connected
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        surface_point = center + rot @ (axes * direction) * 0.9
        lobe_axes = rng.uniform(0.05, 0.12, 3) * g
        body |= _ellipsoid(coords, surface_point, lobe_axes, _rotation(rng)) <= 1.0
    return body


def synthesize_case(shape, rng: np.random.Generator, identifier: str, params: SyntheticParams) -> Case:
    coords = np.stack(np.meshgrid(*[np.arange(n) + 0.5 for n in shape], indexing="ij"), axis=-1)
    n_vox = float(np.prod(shape))
    for _ in range(1000):
        mask = _shape_mask(shape, rng, coords)
        frac = mask.sum() / n_vox
        if not params.min_fraction <= frac <= params.max_fraction:
            continue
        _, n_comp = ndimage.label(mask)  # default structure is 6-connectivity
        if n_comp == 1:
            break
    else:
        raise DataError("synthetic generator failed to produce a valid mask")

    g = np.asarray(shape, float)
    image = np.zeros(shape)
    # distractors: bright structures outside the target that the network must learn to reject
    for _ in range(params.distractors):
        c = rng.uniform(0.1, 0.9, 3) * g
        axes = rng.uniform(0.05, 0.14, 3) * g
        blob = (_ellipsoid(coords, c, axes, _rotation(rng)) <= 1.0) & ~ndimage.binary_dilation(mask, iterations=2)
        image += blob * params.contrast * rng.uniform(0.6, 1.1)
    texture = 1.0 + 0.15 * _smooth_field(shape, rng)
    image += mask * params.contrast * texture
    if params.blur > 0:
        image = ndimage.gaussian_filter(image, params.blur)
    bias = 1.0 + params.bias_strength * _smooth_field(shape, rng, n_terms=2)
    image = image * bias + rng.normal(0.0, params.noise_sigma, size=shape)
    volume = Volume(image.astype(np.float32), (1.0, 1.0, 1.0), identifier)
    return Case(volume, mask.astype(np.uint8))


def generate_synthetic(count: int, grid_size, seed: int, params: SyntheticParams | None = None,
                       prefix: str = "syn") -> list[Case]:
    """``count`` atrium-like cases: a lobed ellipsoid target among distractor blobs, under
    a smooth bias field and Gaussian noise. Each case depends only on ``(seed, index)``."""
    params = params or SyntheticParams()
    shape = (grid_size,) * 3 if np.isscalar(grid_size) else tuple(int(n) for n in grid_size)
    return [
        synthesize_case(shape, np.random.default_rng([seed, i]), f"{prefix}{i:03d}", params)
        for i in range(count)
    ]
