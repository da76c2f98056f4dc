"""Patch archives, match-pair files and a synthetic stand-in corpus.

The on-disk layout mirrors the public distribution of the patch
correspondence data: `patchesNNNN.bmp` files, each a 1024x1024 8-bit
grayscale bitmap holding a row-major 16x16 grid of 64x64 patches, an
`info.txt` with one line per patch (`point3d_id ref_image`), and
six-column match files. Synthetic corpora are written in the same layout
so the loaders can be exercised without the multi-gigabyte download.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

PATCH_SIDE = 64
GRID_SIDE = 16
BITMAP_SIDE = PATCH_SIDE * GRID_SIDE
PATCHES_PER_BITMAP = GRID_SIDE * GRID_SIDE

SCENES = ("LY", "ND", "HD", "SYNTH")


class ArchiveError(IOError):
    """Raised when a patch archive is missing or structurally broken."""


class FormatError(ValueError):
    """Raised when a text file (info/pairs) does not parse."""


@dataclass(frozen=True)
class Patch:
    """A single 64x64 grayscale patch with its 3D-point label."""

    pixels: np.ndarray  # (64, 64) float64 in [0, 1]
    patch_id: int
    point3d_id: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.shape != (PATCH_SIDE, PATCH_SIDE):
            raise ValueError(f"patch pixels must be 64x64, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("patch pixels must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("patch intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class PatchSet:
    """Ordered, immutable collection of patches from one scene."""

    scene: str
    patches: tuple[Patch, ...]

    def __post_init__(self):
        if self.scene not in SCENES:
            raise ValueError(f"unknown scene {self.scene!r}, expected one of {SCENES}")
        patches = tuple(self.patches)
        if not patches:
            raise ValueError("PatchSet must be non-empty")
        for i, p in enumerate(patches):
            if p.patch_id != i:
                raise ValueError(f"patch_id {p.patch_id} at position {i}: ordering broken")
        object.__setattr__(self, "patches", patches)

    def __len__(self) -> int:
        return len(self.patches)

    def __getitem__(self, i: int) -> Patch:
        return self.patches[i]

    def pixel_matrix(self) -> np.ndarray:
        """All patches stacked as rows of flattened pixels, shape (n, 4096)."""
        return np.stack([p.pixels.ravel() for p in self.patches])


@dataclass(frozen=True)
class LabeledPair:
    """A match/non-match pair of patch ids."""

    a: int
    b: int
    is_match: bool


def _bitmap_files(directory: Path) -> list[Path]:
    files = sorted(directory.glob("patches*.bmp"))
    return [f for f in files if re.fullmatch(r"patches\d+\.bmp", f.name)]


def load_patch_archive(directory) -> PatchSet:
    """Load a patch archive directory into a PatchSet.

    Patches are read in file-then-grid order; the info file supplies one
    3D-point id per patch and its line count bounds the patch count
    (all-black filler cells beyond it are dropped).
    """
    directory = Path(directory)
    bitmaps = _bitmap_files(directory)
    if not bitmaps:
        raise ArchiveError(f"no patch bitmaps found in {directory}")
    info_path = directory / "info.txt"
    if not info_path.exists():
        raise ArchiveError(f"missing info file {info_path}")
    labels = []
    with open(info_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                labels.append(int(parts[0]))
            except ValueError as exc:
                raise FormatError(f"{info_path}:{lineno}: bad point id {parts[0]!r}") from exc
    if len(labels) > len(bitmaps) * PATCHES_PER_BITMAP:
        raise FormatError(
            f"{info_path}: {len(labels)} lines exceed the "
            f"{len(bitmaps) * PATCHES_PER_BITMAP} patches in {len(bitmaps)} bitmap(s)"
        )

    scene = _infer_scene(directory)
    patches = []
    for bmp in bitmaps:
        try:
            img = np.asarray(Image.open(bmp).convert("L"), dtype=np.float64)
        except OSError as exc:
            raise ArchiveError(f"cannot read patch bitmap {bmp}: {exc}") from exc
        if img.shape != (BITMAP_SIDE, BITMAP_SIDE):
            raise ArchiveError(f"truncated patch bitmap {bmp}: shape {img.shape}")
        img /= 255.0
        for r in range(GRID_SIDE):
            for c in range(GRID_SIDE):
                pid = len(patches)
                if pid >= len(labels):
                    break
                tile = img[r * PATCH_SIDE:(r + 1) * PATCH_SIDE,
                           c * PATCH_SIDE:(c + 1) * PATCH_SIDE]
                patches.append(Patch(pixels=tile, patch_id=pid, point3d_id=labels[pid]))
    return PatchSet(scene=scene, patches=tuple(patches))


def _infer_scene(directory: Path) -> str:
    name = directory.name.upper()
    for scene in ("LY", "ND", "HD"):
        if scene in name.split("_") or name == scene:
            return scene
    aliases = {"LIBERTY": "LY", "NOTREDAME": "ND", "HALFDOME": "HD", "YOSEMITE": "HD"}
    return aliases.get(name, "SYNTH")


def write_patch_archive(pset: PatchSet, directory) -> None:
    """Write a PatchSet in the archive layout (bitmaps + info.txt)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = len(pset)
    n_bitmaps = (n + PATCHES_PER_BITMAP - 1) // PATCHES_PER_BITMAP
    for b in range(n_bitmaps):
        canvas = np.zeros((BITMAP_SIDE, BITMAP_SIDE), dtype=np.uint8)
        for cell in range(PATCHES_PER_BITMAP):
            pid = b * PATCHES_PER_BITMAP + cell
            if pid >= n:
                break
            r, c = divmod(cell, GRID_SIDE)
            tile = np.rint(pset[pid].pixels * 255.0).astype(np.uint8)
            canvas[r * PATCH_SIDE:(r + 1) * PATCH_SIDE,
                   c * PATCH_SIDE:(c + 1) * PATCH_SIDE] = tile
        Image.fromarray(canvas, mode="L").save(directory / f"patches{b:04d}.bmp")
    with open(directory / "info.txt", "w") as fh:
        for p in pset.patches:
            fh.write(f"{p.point3d_id} 0\n")


def load_match_pairs(file, pset: PatchSet | None = None) -> list[LabeledPair]:
    """Parse a six-column match file into labeled pairs.

    Columns: patchID1 3DpointID1 unused patchID2 3DpointID2 unused.
    When a PatchSet is given, patch ids are range-checked and the point
    ids are cross-checked against the set's labels.
    """
    file = Path(file)
    pairs = []
    with open(file) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 6:
                raise FormatError(f"{file}:{lineno}: expected 6 fields, got {len(parts)}")
            try:
                a, pa, _, b, pb, _ = (int(x) for x in parts[:6])
            except ValueError as exc:
                raise FormatError(f"{file}:{lineno}: non-integer field") from exc
            if pset is not None:
                for pid, p3d in ((a, pa), (b, pb)):
                    if not 0 <= pid < len(pset):
                        raise FormatError(f"{file}:{lineno}: patch id {pid} out of range")
                    if pset[pid].point3d_id != p3d:
                        raise FormatError(
                            f"{file}:{lineno}: point id {p3d} disagrees with "
                            f"archive label {pset[pid].point3d_id} for patch {pid}"
                        )
            pairs.append(LabeledPair(a=a, b=b, is_match=(pa == pb)))
    return pairs


def write_match_pairs(pairs: list[LabeledPair], pset: PatchSet, file) -> None:
    """Write pairs in the six-column match file format."""
    with open(Path(file), "w") as fh:
        for pr in pairs:
            pa = pset[pr.a].point3d_id
            pb = pset[pr.b].point3d_id
            fh.write(f"{pr.a} {pa} 0 {pr.b} {pb} 0\n")


def resample_patch(p, side: int) -> np.ndarray:
    """Bilinearly resample a patch to side x side, returned row-major.

    Accepts a Patch or a 2D pixel array. Pixel-center aligned: output
    center (j+0.5)/side maps to input coordinate (j+0.5)*in/side - 0.5.
    """
    if side <= 0:
        raise ValueError(f"side must be positive, got {side}")
    pixels = p.pixels if isinstance(p, Patch) else np.asarray(p, dtype=np.float64)
    n = pixels.shape[0]
    if side == n:
        return pixels.ravel().copy()
    scale = n / side
    coords = (np.arange(side) + 0.5) * scale - 0.5
    coords = np.clip(coords, 0.0, n - 1.0)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = coords - lo
    rows = pixels[lo][:, :] * (1 - frac)[:, None] + pixels[hi][:, :] * frac[:, None]
    out = rows[:, lo] * (1 - frac)[None, :] + rows[:, hi] * frac[None, :]
    return out.ravel()


def resample_batch(pset: PatchSet, side: int) -> np.ndarray:
    """Resample every patch in a set, rows of shape side*side."""
    return np.stack([resample_patch(p, side) for p in pset.patches])


def _base_texture(rng: np.random.Generator, canvas: int) -> np.ndarray:
    """Smooth random texture in [0,1] on a canvas larger than one patch."""
    sigma = rng.uniform(1.5, 4.0)
    tex = ndimage.gaussian_filter(rng.standard_normal((canvas, canvas)), sigma)
    lo, hi = tex.min(), tex.max()
    if hi - lo < 1e-12:
        return np.full((canvas, canvas), 0.5)
    return (tex - lo) / (hi - lo)


def _render_view(base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One jittered view of a base texture: small affine warp + photometric noise."""
    canvas = base.shape[0]
    angle = rng.uniform(-0.12, 0.12)
    scale = rng.uniform(0.95, 1.05)
    shift = rng.uniform(-2.0, 2.0, size=2)
    cosr, sinr = np.cos(angle), np.sin(angle)
    mat = scale * np.array([[cosr, -sinr], [sinr, cosr]])
    center = (canvas - 1) / 2.0
    offset = center - mat @ (center + shift)
    warped = ndimage.affine_transform(base, mat, offset=offset, order=1, mode="nearest")
    m = (canvas - PATCH_SIDE) // 2
    view = warped[m:m + PATCH_SIDE, m:m + PATCH_SIDE]
    contrast = rng.uniform(0.75, 1.25)
    brightness = rng.uniform(-0.12, 0.12)
    noise = rng.normal(0.0, 0.04, size=view.shape)
    view = np.clip(contrast * (view - 0.5) + 0.5 + brightness + noise, 0.0, 1.0)
    # quantize to the 8-bit grid so the archive layout round-trips exactly
    return np.rint(view * 255.0) / 255.0


def synthesize_corpus(seed: int, n_points: int, views_per_point: int
                      ) -> tuple[PatchSet, list[LabeledPair]]:
    """Generate a deterministic synthetic corpus with balanced pair labels.

    Each 3D point is a smooth random texture; its views are small affine
    warps with brightness/contrast jitter and additive noise. Matches pair
    views of the same point, non-matches pair views of different points;
    counts differ by at most one.
    """
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    if views_per_point < 2:
        raise ValueError("views_per_point must be >= 2")
    rng = np.random.default_rng(seed)
    canvas = PATCH_SIDE + 16

    patches = []
    for point in range(n_points):
        base = _base_texture(rng, canvas)
        for _ in range(views_per_point):
            pid = len(patches)
            patches.append(Patch(pixels=_render_view(base, rng),
                                 patch_id=pid, point3d_id=point))
    pset = PatchSet(scene="SYNTH", patches=tuple(patches))

    matches = []
    for point in range(n_points):
        off = point * views_per_point
        for i in range(views_per_point):
            for j in range(i + 1, views_per_point):
                matches.append(LabeledPair(off + i, off + j, True))
    nonmatches = []
    seen = set()
    while len(nonmatches) < len(matches):
        a, b = rng.integers(0, len(pset), size=2)
        if pset[a].point3d_id == pset[b].point3d_id:
            continue
        key = (min(a, b), max(a, b))
        if key in seen:
            continue
        seen.add(key)
        nonmatches.append(LabeledPair(int(a), int(b), False))
    pairs = matches + nonmatches
    order = rng.permutation(len(pairs))
    return pset, [pairs[i] for i in order]
