"""Labelled image datasets: CSV / class-folder manifests, batching, and a synthetic generator."""

from __future__ import annotations

import colorsys
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
LABEL_KINDS = ("binary", "one-hot-class", "continuous")


class DatasetError(Exception):
    """A manifest or image that cannot be loaded."""


@dataclass
class DatasetManifest:
    root: Path
    attributes: list[str]
    files: list[str]
    conditions: np.ndarray  # (N, M_c) float64
    resolution: int | None = None
    label_kinds: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.files)

    @property
    def dim_condition(self) -> int:
        return len(self.attributes)

    def path(self, i: int) -> Path:
        return self.root / self.files[i]

    def class_attributes(self) -> list[int]:
        return [i for i, k in enumerate(self.label_kinds) if k == "one-hot-class"]

    def class_labels(self) -> np.ndarray | None:
        """Per-record class index when the attributes form a one-hot class block."""
        idx = self.class_attributes()
        if not idx:
            return None
        return np.asarray(idx)[self.conditions[:, idx].argmax(1)]


def _infer_kinds(conditions: np.ndarray) -> list[str]:
    if conditions.size == 0:
        return []
    binary = np.isin(conditions, (0.0, 1.0)).all(0)
    if binary.all() and np.all(conditions.sum(1) == 1) and conditions.shape[1] > 1:
        return ["one-hot-class"] * conditions.shape[1]
    return ["binary" if b else "continuous" for b in binary]


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Load a CSV manifest (``file`` column + one column per attribute) or a class-folder tree.

    A directory without ``manifest.csv`` is read as ``root/<class_name>/<image>``
    and labelled with one-hot class vectors in sorted class order.
    """
    path = Path(path)
    if path.is_dir():
        csv_path = path / "manifest.csv"
        if csv_path.exists():
            return load_manifest(csv_path, check_files)
        return _load_class_folders(path, check_files)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    root = path.parent
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty manifest") from None
        if not header or header[0] != "file":
            raise DatasetError(f"{path}: first column must be 'file', got {header[:1]}")
        attributes = header[1:]
        files, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(
                    f"{path}:{lineno}: record {row[0]!r} has {len(row) - 1} labels, expected {len(attributes)}")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: record {row[0]!r} has a non-numeric label ({exc})") from None
            files.append(row[0])
    conditions = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(attributes))
    meta = _read_meta(root)
    kinds = meta.get("label_kinds") or _infer_kinds(conditions)
    manifest = DatasetManifest(root, attributes, files, conditions, meta.get("resolution"), list(kinds))
    _validate(manifest, check_files)
    return manifest


def _read_meta(root: Path) -> dict:
    meta = root / "dataset.json"
    return json.loads(meta.read_text()) if meta.exists() else {}


def _load_class_folders(root: Path, check_files: bool) -> DatasetManifest:
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"{root}: no manifest.csv and no class sub-directories")
    files, rows = [], []
    for k, name in enumerate(classes):
        for img in sorted((root / name).iterdir()):
            if img.suffix.lower() in IMAGE_SUFFIXES:
                files.append(f"{name}/{img.name}")
                rows.append(np.eye(len(classes))[k])
    conditions = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(classes))
    manifest = DatasetManifest(root, classes, files, conditions, None, ["one-hot-class"] * len(classes))
    _validate(manifest, check_files)
    return manifest


def _validate(m: DatasetManifest, check_files: bool) -> None:
    if len(m.label_kinds) != m.dim_condition:
        raise DatasetError(f"{m.root}: {len(m.label_kinds)} label kinds for {m.dim_condition} attributes")
    bad_kind = set(m.label_kinds) - set(LABEL_KINDS)
    if bad_kind:
        raise DatasetError(f"{m.root}: unknown label kinds {sorted(bad_kind)}")
    for j, kind in enumerate(m.label_kinds):
        if kind != "continuous":
            col = m.conditions[:, j]
            bad = np.flatnonzero(~np.isin(col, (0.0, 1.0)))
            if bad.size:
                raise DatasetError(
                    f"{m.root}: record {m.files[bad[0]]!r} has non-binary value {col[bad[0]]} "
                    f"for {kind} attribute {m.attributes[j]!r}")
    if check_files:
        for name in m.files:
            if not (m.root / name).is_file():
                raise DatasetError(f"{m.root}: record references missing file {name!r}")


def write_manifest(manifest: DatasetManifest, path: str | Path | None = None) -> Path:
    path = Path(path) if path is not None else manifest.root / "manifest.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["file", *manifest.attributes])
        for name, row in zip(manifest.files, manifest.conditions):
            writer.writerow([name, *(_fmt(v) for v in row)])
    meta = {"label_kinds": manifest.label_kinds}
    if manifest.resolution is not None:
        meta["resolution"] = manifest.resolution
    (path.parent / "dataset.json").write_text(json.dumps(meta, indent=2))
    return path


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


# --------------------------------------------------------------------------
# Image loading and batching

def load_image(path: Path, resolution: int) -> np.ndarray:
    """Decode, centre-crop to square, resize; returns (3, R, R) float32 in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        side = min(w, h)
        if w != h:
            left, top = (w - side) // 2, (h - side) // 2
            im = im.crop((left, top, left + side, top + side))
        if side != resolution:
            im = im.resize((resolution, resolution), Image.BICUBIC)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iterator(manifest: DatasetManifest, batch_size: int, resolution: int, seed: int = 0,
                   epochs: int | None = 1, fail_on_bad_image: bool = False,
                   drop_last: bool = False) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield ``(images, conditions)`` batches, shuffling without replacement each epoch.

    Images are (B, 3, R, R) float32 in [0, 1]; conditions are (B, M_c) float32.
    Undecodable images are skipped with a warning unless ``fail_on_bad_image``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(manifest) == 0:
        raise DatasetError("dataset is empty")
    epoch = 0
    while epochs is None or epoch < epochs:
        order = epoch_order(len(manifest), seed, epoch)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            images, conds = [], []
            for i in idx:
                try:
                    images.append(load_image(manifest.path(i), resolution))
                except (OSError, UnidentifiedImageError) as exc:
                    if fail_on_bad_image:
                        raise DatasetError(f"cannot decode {manifest.files[i]!r}: {exc}") from exc
                    log.warning("skipping undecodable image %s: %s", manifest.files[i], exc)
                    continue
                conds.append(manifest.conditions[i])
            if images:
                yield (torch.from_numpy(np.stack(images)),
                       torch.from_numpy(np.stack(conds).astype(np.float32)))
        epoch += 1


def load_all(manifest: DatasetManifest, resolution: int, fail_on_bad_image: bool = False
             ) -> tuple[torch.Tensor, torch.Tensor]:
    """Every decodable record in manifest order (small datasets only)."""
    images, conds = [], []
    for i in range(len(manifest)):
        try:
            images.append(load_image(manifest.path(i), resolution))
        except (OSError, UnidentifiedImageError) as exc:
            if fail_on_bad_image:
                raise DatasetError(f"cannot decode {manifest.files[i]!r}: {exc}") from exc
            log.warning("skipping undecodable image %s: %s", manifest.files[i], exc)
            continue
        conds.append(manifest.conditions[i])
    if not images:
        raise DatasetError(f"{manifest.root}: no decodable images")
    return torch.from_numpy(np.stack(images)), torch.from_numpy(np.stack(conds).astype(np.float32))


# --------------------------------------------------------------------------
# Synthetic data

@dataclass
class SyntheticSceneSpec:
    """Procedural images of one coloured shape on a grey backdrop.

    The shape's hue is ``base_hue + sum_i c_i * (attribute_hues[i] - base_hue)``
    (degrees, unwrapped); when ``size_attribute`` is set, that attribute scales
    the radius by ``1 + size_gain * c``.
    """

    attributes: list[str] = field(default_factory=lambda: ["red", "blue"])
    label_kind: str = "one-hot-class"
    attribute_hues: list[float] = field(default_factory=lambda: [0.0, 240.0])
    base_hue: float = 120.0
    size_attribute: int | None = None
    size_gain: float = 0.5
    image_size: int = 32
    object_type: str = "disk"
    object_radius: float = 0.22  # fraction of the image side
    radius_jitter: float = 0.0
    shift_jitter: tuple[float, float] = (0.0, 0.0)  # fraction of the side, (x, y)
    background_value: tuple[float, float] = (0.35, 0.65)
    background_saturation: float = 0.08
    saturation: float = 0.85
    value: float = 0.9
    supersample: int = 4

    def validate(self) -> None:
        if self.label_kind not in LABEL_KINDS:
            raise ValueError(f"label_kind must be one of {LABEL_KINDS}")
        if len(self.attribute_hues) != len(self.attributes):
            raise ValueError("attribute_hues must have one entry per attribute")
        if self.object_type not in ("disk", "square"):
            raise ValueError("object_type must be 'disk' or 'square'")
        if self.size_attribute is not None and not 0 <= self.size_attribute < len(self.attributes):
            raise ValueError("size_attribute out of range")
        lo, hi = self.background_value
        if not 0 <= lo <= hi <= 1:
            raise ValueError("background_value must be an ordered range inside [0, 1]")
        if self.image_size < 4 or self.supersample < 1:
            raise ValueError("image_size must be >= 4 and supersample >= 1")

    def hue(self, c: Sequence[float]) -> float:
        return self.base_hue + sum(ci * (h - self.base_hue) for ci, h in zip(c, self.attribute_hues))

    def radius(self, c: Sequence[float]) -> float:
        r = self.object_radius
        if self.size_attribute is not None:
            r *= 1 + self.size_gain * c[self.size_attribute]
        return r

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSceneSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("shift_jitter", "background_value"):
            if key in data:
                data[key] = tuple(data[key])
        spec = cls(**data)
        spec.validate()
        return spec


def sample_labels(spec: SyntheticSceneSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    m = len(spec.attributes)
    if spec.label_kind == "one-hot-class":
        return np.eye(m)[rng.integers(0, m, count)]
    if spec.label_kind == "binary":
        return rng.integers(0, 2, (count, m)).astype(np.float64)
    return rng.uniform(0, 1, (count, m))


def render_synthetic(spec: SyntheticSceneSpec, c: Sequence[float], background: Sequence[float],
                     shift: Sequence[float] = (0.0, 0.0), radius_scale: float = 1.0) -> np.ndarray:
    """One (S, S, 3) uint8 image for condition ``c`` over an RGB ``background``."""
    s = spec.image_size * spec.supersample
    ys, xs = np.mgrid[0:s, 0:s]
    cx = (0.5 + shift[0]) * s - 0.5
    cy = (0.5 + shift[1]) * s - 0.5
    r = spec.radius(c) * radius_scale * s
    if spec.object_type == "disk":
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= r ** 2
    else:
        inside = (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)
    fg = colorsys.hsv_to_rgb((spec.hue(c) % 360.0) / 360.0, spec.saturation, spec.value)
    img = np.empty((s, s, 3))
    img[:] = background
    img[inside] = fg
    k = spec.supersample
    img = img.reshape(spec.image_size, k, spec.image_size, k, 3).mean((1, 3))
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def generate_synthetic(spec: SyntheticSceneSpec, count: int, out_dir: str | Path, seed: int = 0
                       ) -> DatasetManifest:
    """Write ``count`` PNGs plus ``manifest.csv``/``dataset.json`` into ``out_dir``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = sample_labels(spec, count, rng)
    files = []
    for i, c in enumerate(labels):
        bg_value = rng.uniform(*spec.background_value)
        bg_hue = rng.uniform(0, 1)
        background = colorsys.hsv_to_rgb(bg_hue, spec.background_saturation, bg_value)
        shift = (rng.uniform(-spec.shift_jitter[0], spec.shift_jitter[0]),
                 rng.uniform(-spec.shift_jitter[1], spec.shift_jitter[1]))
        rscale = 1.0 + rng.uniform(-spec.radius_jitter, spec.radius_jitter)
        name = f"{i:06d}.png"
        Image.fromarray(render_synthetic(spec, c, background, shift, rscale)).save(out / name)
        files.append(name)
    kinds = [spec.label_kind] * len(spec.attributes)
    manifest = DatasetManifest(out, list(spec.attributes), files, labels, spec.image_size, kinds)
    write_manifest(manifest)
    (out / "synthetic_spec.json").write_text(json.dumps(asdict(spec), indent=2))
    return manifest
