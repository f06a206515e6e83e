"""Synthetic two-modality head phantoms with an exact 3-class label mask.

Modality "A" (T1-like) shows internal anatomy but the lesion takes the value of
whatever anatomy lies under it; modality "B" (T2-like) is nearly flat inside the
head but the lesion is bright. Only the fusion of both carries everything.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..rng import stream

GENERATOR_VERSION = "phantom-1"
NOISE_SIGMA = 0.02
A_BASE, B_BASE = 0.45, 0.30
A_STRUCT = (0.18, 0.30)     # |offset| of internal structures in A
B_STRUCT = (0.015, 0.04)    # |offset| in B; keeps B tissue contrast <= 0.05
B_LESION = (0.45, 0.55)     # lesion brightening in B
LESION_FRACTION = (0.025, 0.07)
MAX_A_LESION_GAP = 0.035


@dataclass
class CaseRecord:
    case_id: str
    images: dict            # modality name -> float array [H, W] in [0, 1]
    mask: np.ndarray        # int array [H, W], 0 background / 1 tissue / 2 lesion
    provenance: str = "generated"
    foreground: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.images) < 2:
            raise ValueError(f"{self.case_id}: need at least two modalities")
        for name, img in self.images.items():
            if img.shape != self.mask.shape:
                raise ValueError(f"{self.case_id}: modality {name} shape {img.shape} != mask {self.mask.shape}")
        if not np.isin(self.mask, (0, 1, 2)).all():
            raise ValueError(f"{self.case_id}: mask labels must be in {{0, 1, 2}}")


def _ellipse(shape, cy, cx, ry, rx, angle) -> np.ndarray:
    yy, xx = np.mgrid[:shape[0], :shape[1]].astype(np.float64)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def _erode(m: np.ndarray) -> np.ndarray:
    p = np.pad(m, 1)
    return m & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]


def gen_phantom_case(seed: int, size: int = 32, case_id: str | None = None,
                     modalities: tuple = ("A", "B")) -> CaseRecord:
    if size % 8 or size < 32:
        raise ValueError(f"phantom size must be a multiple of 8 and >= 32, got {size}")
    rng = stream(seed, "phantom")
    shape = (size, size)
    for _ in range(200):
        rec = _attempt(rng, shape)
        if rec is not None:
            break
    else:  # pragma: no cover - constraints are loose enough to never exhaust
        raise RuntimeError(f"could not satisfy phantom constraints for seed {seed}")
    a, b, mask = rec
    a = np.clip(a + rng.normal(0.0, NOISE_SIGMA, shape), 0.0, 1.0)
    b = np.clip(b + rng.normal(0.0, NOISE_SIGMA, shape), 0.0, 1.0)
    return CaseRecord(case_id=case_id or f"case_{seed:06d}", images=dict(zip(modalities, (a, b))), mask=mask)


def _attempt(rng: np.random.Generator, shape):
    size = shape[0]
    cy = size / 2 + rng.uniform(-1, 1) * size / 16
    cx = size / 2 + rng.uniform(-1, 1) * size / 16
    head = _ellipse(shape, cy, cx, rng.uniform(0.36, 0.44) * size, rng.uniform(0.33, 0.42) * size,
                    rng.uniform(0, np.pi))
    a = np.where(head, A_BASE, 0.0)
    b = np.where(head, B_BASE, 0.0)
    n_struct = int(rng.integers(2, 5))
    struct_any = np.zeros(shape, bool)
    for i in range(n_struct):
        sign = 1.0 if i % 2 == 0 else -1.0
        ry, rx = rng.uniform(0.07, 0.15, 2) * size
        r_off = rng.uniform(0, 0.22) * size
        phi = rng.uniform(0, 2 * np.pi)
        m = _ellipse(shape, cy + r_off * np.sin(phi), cx + r_off * np.cos(phi), ry, rx, rng.uniform(0, np.pi)) & head
        a[m] = A_BASE + sign * rng.uniform(*A_STRUCT)
        b[m] = B_BASE + sign * rng.uniform(*B_STRUCT)
        struct_any |= m

    inner = _erode(_erode(head))
    head_area = head.sum()
    target = rng.uniform(*LESION_FRACTION) * head_area
    ratio = rng.uniform(0.7, 1.4)
    ry = np.sqrt(target / (np.pi * ratio))
    rx = ry * ratio
    ys, xs = np.nonzero(inner)
    k = int(rng.integers(len(ys)))
    lesion = _ellipse(shape, ys[k] + 0.5, xs[k] + 0.5, ry, rx, rng.uniform(0, np.pi))
    if not lesion.any() or (lesion & ~inner).any():
        return None
    frac = lesion.sum() / head_area
    if not 0.01 <= frac <= 0.08:
        return None
    tissue = head & ~lesion
    if abs(a[lesion].mean() - a[tissue].mean()) >= MAX_A_LESION_GAP:
        return None
    b[lesion] = b[lesion] + rng.uniform(*B_LESION)
    mask = np.where(head, 1, 0)
    mask[lesion] = 2
    return a, b, mask.astype(np.int64)
