"""On-disk datasets: 8-bit PNG slices plus a JSON manifest, ingestion and patch sampling."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image
from skimage.filters import threshold_otsu

from .phantom import GENERATOR_VERSION, CaseRecord, gen_phantom_case

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


class DataIOError(OSError):
    """File-level failure; the message always carries the offending path."""


def _schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("manifest.schema.json").read_text())


# ---------------------------------------------------------------- image io

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img: np.ndarray, raw: bool = False) -> None:
    """Float image in [0, 1] -> 8-bit grayscale PNG. ``raw`` writes integer labels as-is."""
    path = Path(path)
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a 2-D image, got shape {arr.shape}")
    data = arr.astype(np.uint8) if raw else to_uint8(arr)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(data, mode="L").save(path, format="PNG")
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}") from e


def read_image(path, raw: bool = False) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            data = np.asarray(im.convert("L") if im.mode != "L" else im)
    except FileNotFoundError as e:
        raise DataIOError(f"missing file {path}") from e
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {e}") from e
    return data.astype(np.int64) if raw else data.astype(np.float64) / 255.0


# ---------------------------------------------------------------- manifest

def split_ids(case_ids, fractions=SPLIT_FRACTIONS) -> dict:
    """Deterministic train/val/test assignment by SHA-256 of the case id."""
    order = sorted(case_ids, key=lambda c: hashlib.sha256(c.encode("utf-8")).hexdigest())
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {"train": order[:n_train], "val": order[n_train:n_train + n_val], "test": order[n_train + n_val:]}


def validate_manifest(doc: dict) -> None:
    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as e:
        raise ValueError(f"manifest does not match schema: {e.message}") from None
    ids = [c["case_id"] for c in doc["cases"]]
    if len(set(ids)) != len(ids):
        raise ValueError("manifest case_ids are not unique")
    listed = set(ids)
    for split, members in doc["splits"].items():
        unknown = set(members) - listed
        if unknown:
            raise ValueError(f"split {split!r} references unknown cases {sorted(unknown)[:5]}")


def write_manifest(doc: dict, out_dir) -> Path:
    """Validate and write atomically (temp file in the same directory, then rename)."""
    validate_manifest(doc)
    out_dir = Path(out_dir)
    path = out_dir / MANIFEST_NAME
    try:
        fd, tmp = tempfile.mkstemp(prefix=".manifest.", dir=out_dir)
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
        os.chmod(tmp, 0o644)   # mkstemp creates 0600
        os.replace(tmp, path)
    except OSError as e:
        raise DataIOError(f"cannot write manifest {path}: {e}") from e
    return path


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise DataIOError(f"missing manifest {path}") from e
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: not valid JSON ({e})") from e
    validate_manifest(doc)
    return doc


def save_cases(cases, out_dir, seed=None, size=None, generator: str = "external") -> dict:
    """Write records as PNG slices and return the (already written) manifest document."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"cannot create {out_dir}: {e}") from e
    modalities = list(cases[0].images) if cases else ["A", "B"]
    entries = []
    for rec in cases:
        images = {}
        for mod, img in rec.images.items():
            rel = f"images/{rec.case_id}_{mod}.png"
            write_image(out_dir / rel, img)
            images[mod] = rel
        mrel = f"masks/{rec.case_id}_mask.png"
        write_image(out_dir / mrel, rec.mask, raw=True)
        entries.append({"case_id": rec.case_id, "images": images, "mask": mrel})
    doc = {
        "version": MANIFEST_VERSION, "seed": seed, "generator": generator, "size": size,
        "modalities": modalities, "cases": entries,
        "splits": split_ids([e["case_id"] for e in entries]),
    }
    write_manifest(doc, out_dir)
    return doc


def build_dataset(n_cases: int, seed: int, out_dir, size: int = 32) -> dict:
    """Generate ``n_cases`` phantoms (case i uses sub-seed derived from (seed, i))."""
    if n_cases < 1:
        raise ValueError(f"n_cases must be positive, got {n_cases}")
    cases = [gen_phantom_case(case_seed(seed, i), size, case_id=f"case_{i:05d}") for i in range(n_cases)]
    return save_cases(cases, out_dir, seed=seed, size=size, generator=GENERATOR_VERSION)


def case_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, index]).generate_state(1)[0])


# ---------------------------------------------------------------- ingestion

@dataclass
class Dataset:
    root: Path
    manifest: dict
    cases: dict = field(default_factory=dict)    # case_id -> CaseRecord
    errors: list = field(default_factory=list)   # (case_id, message)

    @property
    def modalities(self) -> list[str]:
        return list(self.manifest["modalities"])

    def split(self, name: str) -> list[CaseRecord]:
        return [self.cases[c] for c in self.manifest["splits"][name] if c in self.cases]

    def arrays(self, name: str, modalities=None):
        """Stack a split as ([N,1,H,W] per modality, [N,H,W] mask)."""
        recs = self.split(name)
        if not recs:
            raise ValueError(f"split {name!r} has no loadable cases")
        mods = modalities or self.modalities[:2]
        imgs = [np.stack([r.images[m] for r in recs])[:, None] for m in mods]
        return imgs, np.stack([r.mask for r in recs])


def otsu_foreground(images) -> np.ndarray:
    mean = np.mean(np.stack(list(images)), axis=0)
    if np.ptp(mean) == 0:
        return np.zeros(mean.shape, bool)
    return mean > threshold_otsu(mean)


def _load_case(root: Path, entry: dict) -> CaseRecord:
    cid = entry["case_id"]
    images = {m: read_image(root / rel) for m, rel in entry["images"].items()}
    mask = read_image(root / entry["mask"], raw=True)
    shapes = {m: im.shape for m, im in images.items()}
    if len(set(shapes.values()) | {mask.shape}) != 1:
        raise ValueError(f"dimension mismatch: {shapes}, mask {mask.shape}")
    rec = CaseRecord(case_id=cid, images=images, mask=mask, provenance="ingested")
    rec.foreground = otsu_foreground(images.values())
    return rec


def ingest_slices(root, manifest: dict | None = None) -> Dataset:
    """Load every manifest case; failing cases are skipped and reported in ``errors``."""
    root = Path(root)
    manifest = manifest if manifest is not None else load_manifest(root)
    ds = Dataset(root=root, manifest=manifest)
    for entry in manifest["cases"]:
        try:
            ds.cases[entry["case_id"]] = _load_case(root, entry)
        except (DataIOError, ValueError) as e:
            ds.errors.append((entry["case_id"], str(e)))
    return ds


# ---------------------------------------------------------------- sampling

def sample_patch(case: CaseRecord, patch: int, rng: np.random.Generator, flip: bool = True) -> CaseRecord:
    """Random ``patch`` x ``patch`` crop shared by every modality and the mask (+ optional h-flip)."""
    h, w = case.mask.shape
    if patch > h or patch > w or patch < 1:
        raise ValueError(f"patch {patch} does not fit image {h}x{w}")
    y0 = int(rng.integers(0, h - patch + 1))
    x0 = int(rng.integers(0, w - patch + 1))
    do_flip = flip and rng.random() < 0.5

    def crop(a):
        c = a[y0:y0 + patch, x0:x0 + patch]
        return np.ascontiguousarray(c[:, ::-1] if do_flip else c)

    return CaseRecord(case_id=case.case_id, images={m: crop(im) for m, im in case.images.items()},
                      mask=crop(case.mask), provenance=case.provenance)


def sample_batch(cases, idx, patch: int, rng: np.random.Generator, modalities, flip: bool = True):
    samples = [sample_patch(cases[i], patch, rng, flip) for i in idx]
    imgs = [np.stack([s.images[m] for s in samples])[:, None] for m in modalities]
    return imgs, np.stack([s.mask for s in samples])
