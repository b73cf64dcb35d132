"""Classical stand-in for prompt-based segmentation of tactile images.

Pixels are split into intensity bands relative to the image background, bands
are cleaned and split into connected components, and components are labelled
by shape:

* ``Line``: elongated bright component (principal-axis ratio above 4);
* ``Bump``: compact bright component (area over moment-ellipse area above 0.6);
* ``Hole``: the slot-shaped mid-low region, together with any bump inside it.

Pixel coordinates are ``(row, col)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

from .tactile import HOLE_LEVEL, RIM_LEVEL, TactileImage


class Label(str, Enum):
    LINE = "Line"
    BUMP = "Bump"
    HOLE = "Hole"


class InsufficientExtentError(ValueError):
    """Mask too short to fit an orientation."""


MIN_COMPONENT = 5
ELONGATION_LINE = 4.0
COMPACTNESS_BUMP = 0.6
# band edges sit halfway between the photometric levels
_HOLE_LO = HOLE_LEVEL / 2
_HOLE_HI = (HOLE_LEVEL + RIM_LEVEL) / 2
_HIGH = RIM_LEVEL + 0.175
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class Mask:
    bits: np.ndarray
    label: Label
    pixel_count: int = field(init=False)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        self.pixel_count = int(self.bits.sum())

    def coords(self) -> np.ndarray:
        return np.argwhere(self.bits)


@dataclass
class Observation:
    poke_com: np.ndarray | None
    eyelet_pixels: np.ndarray
    N: int
    image_diag: float
    shape: tuple[int, int]
    bump_count: int = 0
    hole_count: int = 0
    overlap: int = 0

    @property
    def bump_present(self) -> bool:
        return self.poke_com is not None


def _moments(coords: np.ndarray):
    mean = coords.mean(axis=0)
    d = coords - mean
    cov = d.T @ d / len(coords)
    evals, evecs = np.linalg.eigh(cov)
    return mean, evals, evecs


def elongation(coords: np.ndarray) -> float:
    _, evals, _ = _moments(coords.astype(float))
    # pixel quantisation variance keeps one-pixel-wide lines finite
    lo, hi = evals + 1.0 / 12
    return math.sqrt(hi / lo)


def compactness(coords: np.ndarray) -> float:
    """Area divided by the area of the moment-equivalent ellipse (1 for a disk)."""
    _, evals, _ = _moments(coords.astype(float))
    lo, hi = evals + 1.0 / 12
    return len(coords) / (4 * math.pi * math.sqrt(lo * hi))


def _shift_reduce(b: np.ndarray, op, fill: bool) -> np.ndarray:
    # separable 3x3 min/max with constant padding, one axis at a time
    p = np.pad(b, 1, constant_values=fill)
    rows = op(op(p[:-2], p[1:-1]), p[2:])
    return op(op(rows[:, :-2], rows[:, 1:-1]), rows[:, 2:])


def _open3(b: np.ndarray) -> np.ndarray:
    """Binary opening with a 3x3 square, matching ``ndimage.binary_opening``."""
    eroded = _shift_reduce(b, np.logical_and, False)
    return _shift_reduce(eroded, np.logical_or, False)


def _components(binary: np.ndarray):
    labels, n = ndimage.label(binary, structure=_EIGHT)
    if n == 0:
        return labels, []
    sizes = np.bincount(labels.ravel())[1:]
    return labels, [i + 1 for i in range(n) if sizes[i] >= MIN_COMPONENT]


def _crop(mask: np.ndarray, margin: int) -> tuple[slice, slice]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    h, w = mask.shape
    return (
        slice(max(rows[0] - margin, 0), min(rows[-1] + margin + 1, h)),
        slice(max(cols[0] - margin, 0), min(cols[-1] + margin + 1, w)),
    )


def _grow(img: np.ndarray, seed: np.ndarray, floor: float) -> np.ndarray:
    """Region around ``seed`` above the local half-contrast level."""
    box = _crop(seed, 8)
    sub, sd = img[box], seed[box]
    near = ndimage.binary_dilation(sd, _EIGHT, iterations=3)
    ring = ndimage.binary_dilation(near, _EIGHT, iterations=3) & ~near
    local_bg = float(np.median(sub[ring])) if ring.any() else 0.0
    peak = float(np.percentile(sub[sd], 90))
    level = max(0.5 * (local_bg + peak), floor)
    grown = (sub > level) & ndimage.binary_dilation(sd, _EIGHT, iterations=4)
    labels, _ = ndimage.label(grown, structure=_EIGHT)
    keep = np.unique(labels[sd & grown])
    keep = keep[keep > 0]
    out = np.zeros_like(seed)
    out[box] = np.isin(labels, keep) | sd
    return out


def segment(image: TactileImage, expected=(Label.LINE, Label.BUMP, Label.HOLE)) -> list[Mask]:
    """Label-keyed masks, at most one per requested label, largest first."""
    expected = {Label(e) for e in expected}
    img = image.intensities
    bg = float(np.median(img))
    high = img > bg + _HIGH
    low = (img > bg + _HOLE_LO) & (img <= bg + _HOLE_HI)
    low = _open3(low)

    lines, bumps = [], []
    labels, ids = _components(high)
    for i in ids:
        seed = labels == i
        comp = _grow(img, seed, bg + _HOLE_HI + 0.05)
        coords = np.argwhere(comp)
        if elongation(coords) > ELONGATION_LINE:
            lines.append(comp)
        elif compactness(coords) > COMPACTNESS_BUMP:
            bumps.append(comp)

    out = []
    if Label.LINE in expected and lines:
        out.append(Mask(max(lines, key=np.count_nonzero), Label.LINE))
    bump = max(bumps, key=np.count_nonzero) if bumps else None
    if Label.BUMP in expected and bump is not None:
        out.append(Mask(bump, Label.BUMP))
    if Label.HOLE in expected:
        hole = _hole_region(low, bump)
        if hole is not None:
            out.append(Mask(hole, Label.HOLE))
    return out


def _hole_region(low: np.ndarray, bump: np.ndarray | None) -> np.ndarray | None:
    labels, ids = _components(low)
    if not ids:
        return None
    sizes = [(labels == i).sum() for i in ids]
    core = labels == ids[int(np.argmax(sizes))]
    region = core.copy()
    if bump is not None:
        box = _crop(bump, 4)
        near_bump = ndimage.binary_dilation(bump[box], _EIGHT, iterations=2)
        near_core = ndimage.binary_dilation(core[box], _EIGHT, iterations=2)
        if (near_bump & core[box]).any():
            # a bump poking through the slot belongs to the hole region;
            # bridge the thin blur ring between the two
            region[box] |= bump[box] | (near_bump & near_core)
    box = _crop(region, 1)
    region[box] = ndimage.binary_fill_holes(region[box])
    return region if region.sum() >= MIN_COMPONENT else None


def find(masks, label) -> Mask | None:
    label = Label(label)
    for m in masks:
        if m.label == label:
            return m
    return None


def mask_com(mask: Mask) -> np.ndarray:
    """Mean (row, col) of the set pixels, summed in integers then divided once."""
    if mask.pixel_count < 1:
        raise ValueError("mask is empty")
    coords = np.argwhere(mask.bits).astype(np.int64)
    return coords.sum(axis=0) / mask.pixel_count


def sample_eyelet_pixels(mask: Mask, N: int, rng: np.random.Generator) -> np.ndarray:
    """``N`` set-pixel coordinates drawn uniformly with replacement."""
    if mask.pixel_count < 1:
        raise ValueError("mask is empty")
    coords = np.argwhere(mask.bits)
    return coords[rng.integers(0, len(coords), size=N)]


def _to_uv(rc: np.ndarray) -> np.ndarray:
    # image u to the right, v up
    return np.column_stack([rc[:, 1], -rc[:, 0]]).astype(float)


def _wrap_angle(deg: float) -> float:
    deg = (deg + 90.0) % 180.0 - 90.0
    return 90.0 if deg == -90.0 else deg


def line_orientation(mask: Mask, min_extent: int = 10) -> float:
    """Incline (degrees, in (-90, 90]) of the line's bottom contour.

    The mask is sliced into one-pixel bins along its principal axis. In each
    bin the contour point is the set pixel lying furthest towards the image
    bottom across the axis; a total-least-squares line through these points
    gives the angle against the image u-axis, with v pointing up. For a
    near-horizontal line the bins are the image columns and the contour is the
    lowest set pixel of each column.
    """
    coords = np.argwhere(mask.bits)
    if len(coords) == 0:
        raise InsufficientExtentError("empty mask")
    uv = _to_uv(coords)
    mean, _, evecs = _moments(uv)
    axis = evecs[:, 1]
    normal = np.array([-axis[1], axis[0]])
    # "bottom" side: lower v, or lower u for a vertical line
    if normal[1] > 1e-9 or (abs(normal[1]) <= 1e-9 and normal[0] > 0):
        normal = -normal
    along = (uv - mean) @ axis
    across = (uv - mean) @ normal
    bins = np.floor(along + 0.5).astype(int)
    uniq = np.unique(bins)
    if len(uniq) < min_extent:
        raise InsufficientExtentError(f"line spans {len(uniq)} slices, need {min_extent}")
    pts = []
    for b in uniq:
        sel = bins == b
        k = np.argmax(across[sel])
        pts.append(uv[sel][k])
    pts = np.asarray(pts)
    _, _, vecs = _moments(pts)
    d = vecs[:, 1]
    return _wrap_angle(math.degrees(math.atan2(d[1], d[0])))


_BORDERS = ("top", "bottom", "left", "right")


def touched_borders(mask: Mask) -> dict[str, int]:
    b = mask.bits
    return {
        "top": int(b[0].sum()),
        "bottom": int(b[-1].sum()),
        "left": int(b[:, 0].sum()),
        "right": int(b[:, -1].sum()),
    }


def _entry_border(mask: Mask) -> str | None:
    touched = {k: v for k, v in touched_borders(mask).items() if v > 0}
    if ("top" in touched and "bottom" in touched) or ("left" in touched and "right" in touched):
        return None
    if not touched:
        return "none"
    # corner crossings resolve to the border with the longer contact
    return max(touched, key=lambda k: (touched[k], -_BORDERS.index(k)))


def _entry_geometry(mask: Mask, border: str):
    """Principal axis pointing into the image and the entry point on ``border``'s pixel row/column."""
    coords = np.argwhere(mask.bits).astype(float)
    mean, _, evecs = _moments(coords)
    axis = evecs[:, 1]
    h, w = mask.bits.shape
    inward = {"top": (1, 0), "bottom": (-1, 0), "left": (0, 1), "right": (0, -1)}[border]
    if axis @ np.array(inward) < 0:
        axis = -axis
    if border == "top":
        edge = coords[coords[:, 0] == 0]
    elif border == "bottom":
        edge = coords[coords[:, 0] == h - 1]
    elif border == "left":
        edge = coords[coords[:, 1] == 0]
    else:
        edge = coords[coords[:, 1] == w - 1]
    entry = edge.mean(axis=0)
    return axis, entry, coords


def line_endpoint(mask: Mask) -> np.ndarray | None:
    """Far end of a line entering from one border, or None when it crosses the image.

    Among the pixels reaching furthest along the principal axis, the one
    closest to the axis (the centre of the end cap) is returned.
    """
    border = _entry_border(mask)
    if border is None:
        return None
    if border == "none":
        coords = np.argwhere(mask.bits).astype(float)
        mean, _, evecs = _moments(coords)
        along = (coords - mean) @ evecs[:, 1]
        return coords[int(np.argmax(along))].astype(int)
    axis, entry, coords = _entry_geometry(mask, border)
    along = (coords - entry) @ axis
    far = along >= along.max() - 1.0
    off = np.abs((coords[far] - entry) @ np.array([-axis[1], axis[0]]))
    # ties on the axis go to the pixel reaching furthest
    best = np.lexsort((-along[far], np.round(off, 9)))[0]
    return coords[far][best].astype(int)


def residual_length(mask: Mask, mm_per_px: float) -> float:
    """Distance along the principal axis from the entry border pixels to the endpoint, in metres."""
    border = _entry_border(mask)
    if border is None or border == "none":
        raise ValueError("line endpoint not visible from a single entry border")
    end = line_endpoint(mask)
    h, w = mask.bits.shape
    on_edge = {"top": end[0] == 0, "bottom": end[0] == h - 1, "left": end[1] == 0, "right": end[1] == w - 1}
    if on_edge[border]:
        return 0.0
    axis, entry, _ = _entry_geometry(mask, border)
    return max(float((end - entry) @ axis), 0.0) * mm_per_px


def principal_angle(coords: np.ndarray) -> float:
    """Principal-axis angle (degrees, (-90, 90]) of pixel coordinates, v up."""
    uv = _to_uv(np.asarray(coords))
    _, _, evecs = _moments(uv)
    a = evecs[:, 1]
    return _wrap_angle(math.degrees(math.atan2(a[1], a[0])))


def build_observation(masks, image: TactileImage, N: int, rng: np.random.Generator) -> Observation:
    """Poke centroid plus ``N`` eyelet samples (the policy's observation)."""
    bump = find(masks, Label.BUMP)
    hole = find(masks, Label.HOLE)
    shape = image.shape
    com = mask_com(bump) if bump is not None else None
    pixels = sample_eyelet_pixels(hole, N, rng) if hole is not None else np.zeros((0, 2), dtype=int)
    overlap = int((bump.bits & hole.bits).sum()) if (bump is not None and hole is not None) else 0
    return Observation(
        poke_com=com,
        eyelet_pixels=pixels,
        N=N if hole is not None else 0,
        image_diag=image.diagonal_px,
        shape=shape,
        bump_count=bump.pixel_count if bump is not None else 0,
        hole_count=hole.pixel_count if hole is not None else 0,
        overlap=overlap,
    )
