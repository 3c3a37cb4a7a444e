"""Per-tile chips: windowed raster reads, model preprocessing, dihedral flips.

A chip is the pixel content of one tile: 200x200x3 8-bit RGB at 50 cm/pixel
raw, and 224x224x3 normalized floats once prepared for an encoder. The only
augmentations allowed on labelled tiles are the 8 dihedral transforms, which
leave the population count valid; crops never are.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geogrid import GridDef, Tile
from .geotiff import RasterSource

RAW_SIZE = 200
MODEL_SIZE = 224

# ImageNet channel statistics; pretrained checkpoints may declare their own
# in the encoder manifest.
DEFAULT_NORM_MEAN = (0.485, 0.456, 0.406)
DEFAULT_NORM_STD = (0.229, 0.224, 0.225)


@dataclass
class Chip:
    tile_id: str
    pixels_raw: np.ndarray | None = None
    pixels_model: np.ndarray | None = None
    acquisition_year: int | None = None

    def __post_init__(self):
        if self.pixels_raw is not None and self.pixels_raw.shape != (RAW_SIZE, RAW_SIZE, 3):
            raise ValueError(
                f"chip {self.tile_id}: pixels_raw must be {RAW_SIZE}x{RAW_SIZE}x3, "
                f"got {self.pixels_raw.shape}"
            )
        if self.pixels_model is not None and self.pixels_model.shape != (
            MODEL_SIZE,
            MODEL_SIZE,
            3,
        ):
            raise ValueError(
                f"chip {self.tile_id}: pixels_model must be {MODEL_SIZE}x{MODEL_SIZE}x3, "
                f"got {self.pixels_model.shape}"
            )


@dataclass(frozen=True)
class DihedralTransform:
    """One of the 8 symmetries of the square.

    code 0..3 = counter-clockwise rotation by code*90 degrees;
    code 4..7 = horizontal flip followed by rotation by (code-4)*90.
    """

    code: int

    def __post_init__(self):
        if not 0 <= self.code <= 7:
            raise ValueError(f"dihedral code must be 0..7, got {self.code}")

    @property
    def rotation(self) -> int:
        return self.code % 4

    @property
    def flipped(self) -> bool:
        return self.code >= 4

    def apply_to(self, pixels: np.ndarray) -> np.ndarray:
        out = pixels
        if self.flipped:
            out = out[:, ::-1]
        if self.rotation:
            out = np.rot90(out, k=self.rotation, axes=(0, 1))
        return np.ascontiguousarray(out)

    def compose(self, other: "DihedralTransform") -> "DihedralTransform":
        """Transform equal to applying self first, then other."""
        # flip^f2 rot^r1 = rot^(r1 if f2==0 else -r1) flip^f2
        r1, f1 = self.rotation, self.flipped
        r2, f2 = other.rotation, other.flipped
        r1_moved = r1 if not f2 else (-r1) % 4
        r = (r2 + r1_moved) % 4
        f = f1 ^ f2
        return DihedralTransform((4 if f else 0) + r)

    def inverse(self) -> "DihedralTransform":
        if self.flipped:
            return DihedralTransform(self.code)  # reflections are involutions
        return DihedralTransform((-self.rotation) % 4)


DIHEDRAL_TRANSFORMS = tuple(DihedralTransform(c) for c in range(8))


def apply_dihedral(chip: Chip, t: DihedralTransform) -> Chip:
    """Permute pixels by the group element; label and tile_id untouched."""
    if chip.pixels_raw is None and chip.pixels_model is None:
        raise ValueError(f"chip {chip.tile_id} carries no pixels")
    return replace(
        chip,
        pixels_raw=None if chip.pixels_raw is None else t.apply_to(chip.pixels_raw),
        pixels_model=None if chip.pixels_model is None else t.apply_to(chip.pixels_model),
    )


def extract_chip(raster: RasterSource, tile: Tile, grid: GridDef) -> Chip:
    """Windowed read of the tile's half-open box from a 50 cm mosaic.

    The tile box must lie fully inside the raster and align with its pixel
    lattice; nodata inside the window, missing bands, or a CRS mismatch are
    all hard errors rather than silent padding.
    """
    if raster.n_bands < 3:
        raise ValueError(f"raster has {raster.n_bands} bands, need 3 (RGB)")
    if (
        raster.georef.crs_code is not None
        and raster.georef.crs_code != grid.crs_code
    ):
        raise ValueError(
            f"raster CRS {raster.georef.crs_code!r} does not match grid CRS {grid.crs_code!r}"
        )
    px, py = raster.georef.pixel_size_x, raster.georef.pixel_size_y
    n_px = grid.cell_size / px
    if abs(n_px - RAW_SIZE) > 1e-6 or abs(grid.cell_size / py - RAW_SIZE) > 1e-6:
        raise ValueError(
            f"cell size {grid.cell_size} m over pixel size {px} m must give "
            f"{RAW_SIZE}px windows, got {n_px:.3f}"
        )
    xmin, _, _, ymax = grid.tile_box(tile.row, tile.col)
    col0f = (xmin - raster.georef.origin_x) / px
    row0f = (raster.georef.origin_y - ymax) / py
    col0, row0 = round(col0f), round(row0f)
    if abs(col0f - col0) > 1e-6 or abs(row0f - row0) > 1e-6:
        raise ValueError(
            f"tile {tile.tile_id} box is not aligned to the raster pixel lattice"
        )
    window = raster.read_window(row0, col0, RAW_SIZE, RAW_SIZE)
    if raster.nodata is not None and np.any(window == raster.nodata):
        raise ValueError(f"tile {tile.tile_id} window contains nodata pixels")
    return Chip(tile_id=tile.tile_id, pixels_raw=window[:, :, :3].astype(np.uint8))


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-centre sampling, edges clamped."""
    img = np.asarray(image, dtype=np.float64)
    in_h, in_w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.clip(y0 + 1, 0, in_h - 1)
    x1 = np.clip(x0 + 1, 0, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    if img.ndim == 3:
        wy = wy[:, :, None]
        wx = wx[:, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def prepare_for_model(
    chip: Chip,
    mean: tuple[float, float, float] = DEFAULT_NORM_MEAN,
    std: tuple[float, float, float] = DEFAULT_NORM_STD,
) -> Chip:
    """Resize raw pixels to 224x224, scale to [0, 1], standardize per channel.

    Deterministic: identical bytes in give bit-identical float32 out. The
    normalization constants come from the encoder manifest of whatever
    checkpoint will consume the chips.
    """
    if chip.pixels_raw is None:
        raise ValueError(f"chip {chip.tile_id} has no raw pixels to prepare")
    scaled = resize_bilinear(chip.pixels_raw, MODEL_SIZE, MODEL_SIZE) / 255.0
    mean_arr = np.asarray(mean, dtype=np.float64)
    std_arr = np.asarray(std, dtype=np.float64)
    normalized = (scaled - mean_arr) / std_arr
    return replace(chip, pixels_model=normalized.astype(np.float32))


# --- chip cache ---------------------------------------------------------------


def save_chip(chip: Chip, directory: str | Path) -> Path:
    """PNG of the raw pixels plus a JSON sidecar with acquisition metadata."""
    if chip.pixels_raw is None:
        raise ValueError(f"chip {chip.tile_id} has no raw pixels to cache")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    safe = chip.tile_id.replace(":", "_")
    png_path = directory / f"{safe}.png"
    Image.fromarray(chip.pixels_raw, mode="RGB").save(png_path)
    sidecar = {"tile_id": chip.tile_id, "acquisition_year": chip.acquisition_year}
    (directory / f"{safe}.json").write_text(json.dumps(sidecar))
    return png_path


def load_chip(tile_id: str, directory: str | Path) -> Chip:
    directory = Path(directory)
    safe = tile_id.replace(":", "_")
    png_path = directory / f"{safe}.png"
    if not png_path.exists():
        raise FileNotFoundError(f"no cached chip for tile {tile_id} in {directory}")
    pixels = np.asarray(Image.open(png_path).convert("RGB"), dtype=np.uint8)
    year = None
    sidecar = directory / f"{safe}.json"
    if sidecar.exists():
        year = json.loads(sidecar.read_text()).get("acquisition_year")
    return Chip(tile_id=tile_id, pixels_raw=pixels, acquisition_year=year)


def chip_cache_ids(directory: str | Path) -> list[str]:
    ids = []
    for p in sorted(Path(directory).glob("*.json")):
        ids.append(json.loads(p.read_text())["tile_id"])
    return ids
