"""Minimal GeoTIFF I/O on top of tifffile.

Covers exactly what the toolkit needs: striped or tiled TIFFs in a projected
CRS, 3-band 8-bit imagery mosaics and 32-bit float estimate rasters with a
nodata value. Georeference travels in the ModelPixelScale / ModelTiepoint
tags and the CRS as a ProjectedCSType EPSG geokey.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tifffile

TAG_MODEL_PIXEL_SCALE = 33550
TAG_MODEL_TIEPOINT = 33922
TAG_GEO_KEY_DIRECTORY = 34735
TAG_GDAL_NODATA = 42113

_KEY_MODEL_TYPE = 1024
_KEY_RASTER_TYPE = 1025
_KEY_PROJECTED_CS = 3072


@dataclass(frozen=True)
class GeoRef:
    """Top-left anchored georeference with square-ish pixels, north up."""

    origin_x: float
    origin_y: float
    pixel_size_x: float
    pixel_size_y: float
    crs_code: str | None = None

    def bounds(self, height: int, width: int) -> tuple[float, float, float, float]:
        return (
            self.origin_x,
            self.origin_y - height * self.pixel_size_y,
            self.origin_x + width * self.pixel_size_x,
            self.origin_y,
        )


def _epsg_int(crs_code: str | None) -> int | None:
    if not crs_code:
        return None
    code = crs_code.upper()
    if code.startswith("EPSG:"):
        try:
            return int(code.split(":", 1)[1])
        except ValueError:
            return None
    return None


def _geo_extratags(georef: GeoRef, nodata: float | None) -> list:
    tags = [
        (TAG_MODEL_PIXEL_SCALE, "d", 3, (georef.pixel_size_x, georef.pixel_size_y, 0.0), True),
        (TAG_MODEL_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, georef.origin_x, georef.origin_y, 0.0), True),
    ]
    epsg = _epsg_int(georef.crs_code)
    keys = [(_KEY_MODEL_TYPE, 0, 1, 1), (_KEY_RASTER_TYPE, 0, 1, 1)]
    if epsg is not None:
        keys.append((_KEY_PROJECTED_CS, 0, 1, epsg))
    gkd = (1, 1, 0, len(keys)) + tuple(v for k in keys for v in k)
    tags.append((TAG_GEO_KEY_DIRECTORY, "H", len(gkd), gkd, True))
    if nodata is not None:
        s = repr(float(nodata)).rstrip("0").rstrip(".")
        tags.append((TAG_GDAL_NODATA, "s", 0, s, True))
    return tags


def write_geotiff(
    path: str | Path,
    array: np.ndarray,
    georef: GeoRef,
    nodata: float | None = None,
    description: str | None = None,
    tile: tuple[int, int] | None = None,
) -> None:
    """Write (H, W) or (bands, H, W) as a GeoTIFF; multiband is planar."""
    kwargs = {}
    if array.ndim == 3:
        kwargs["planarconfig"] = "separate"
        kwargs["photometric"] = "rgb" if (array.shape[0] == 3 and array.dtype == np.uint8) else "minisblack"
    elif array.ndim == 2:
        kwargs["photometric"] = "minisblack"
    else:
        raise ValueError(f"expected 2-D or 3-D array, got shape {array.shape}")
    if tile is not None:
        kwargs["tile"] = tile
    tifffile.imwrite(
        str(path),
        array,
        extratags=_geo_extratags(georef, nodata),
        description=description or "",
        **kwargs,
    )


def read_geotiff(path: str | Path) -> tuple[np.ndarray, GeoRef, float | None, str]:
    """Read a GeoTIFF into ((bands, H, W) or (H, W), georef, nodata, description)."""
    with tifffile.TiffFile(str(path)) as tf:
        page = tf.pages[0]
        array = tf.asarray()
        if array.ndim == 3 and page.planarconfig == 2:
            pass  # already (bands, H, W)
        elif array.ndim == 3:
            array = np.moveaxis(array, -1, 0)
        tags = page.tags
        scale = tags.valueof(TAG_MODEL_PIXEL_SCALE)
        tie = tags.valueof(TAG_MODEL_TIEPOINT)
        if scale is None or tie is None:
            raise ValueError(f"{path}: missing georeference tags")
        gkd = tags.valueof(TAG_GEO_KEY_DIRECTORY)
        crs = None
        if gkd is not None:
            entries = list(gkd)[4:]
            for i in range(0, len(entries) - 3, 4):
                key, loc, _count, value = entries[i : i + 4]
                if key == _KEY_PROJECTED_CS and loc == 0:
                    crs = f"EPSG:{value}"
        nodata_raw = tags.valueof(TAG_GDAL_NODATA)
        nodata = float(nodata_raw) if nodata_raw is not None else None
        desc = page.description or ""
    georef = GeoRef(
        origin_x=float(tie[3]),
        origin_y=float(tie[4]),
        pixel_size_x=float(scale[0]),
        pixel_size_y=float(scale[1]),
        crs_code=crs,
    )
    return array, georef, nodata, desc


class RasterSource:
    """In-memory raster with georeference; bands-last layout (H, W, bands)."""

    def __init__(self, array: np.ndarray, georef: GeoRef, nodata: float | None = None):
        if array.ndim == 2:
            array = array[:, :, None]
        self.array = array
        self.georef = georef
        self.nodata = nodata

    @classmethod
    def open(cls, path: str | Path) -> "RasterSource":
        array, georef, nodata, _ = read_geotiff(path)
        if array.ndim == 3:
            array = np.moveaxis(array, 0, -1)
        return cls(array, georef, nodata)

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def n_bands(self) -> int:
        return self.array.shape[2]

    def bounds(self) -> tuple[float, float, float, float]:
        return self.georef.bounds(self.height, self.width)

    def read_window(self, row0: int, col0: int, height: int, width: int) -> np.ndarray:
        if row0 < 0 or col0 < 0 or row0 + height > self.height or col0 + width > self.width:
            raise ValueError(
                f"window ({row0},{col0})+({height}x{width}) outside raster "
                f"{self.height}x{self.width}"
            )
        return self.array[row0 : row0 + height, col0 : col0 + width, :]
