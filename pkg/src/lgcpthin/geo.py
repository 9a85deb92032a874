"""Planar geometry layer: rasters, road networks, point patterns, distances.

Coordinates are assumed projected (planar Euclidean); the conventional unit
throughout the package is kilometers.  Also provides the exploratory
statistics used to diagnose accessibility bias: ECDFs, the two-sample
Kolmogorov-Smirnov test, and Pearson correlation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import kolmogorov

from lgcpthin.errors import LgcpThinError, ParseError


# ---------------------------------------------------------------------------
# Grids and rasters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Regular 2D grid: origin at the lower-left corner, square cells.

    Cell (i, j) has center origin + ((i + 0.5) h, (j + 0.5) h); values on the
    grid are indexed row-major as ``values[j, i]`` (row = y index).
    """

    x0: float
    y0: float
    cell_size: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid must have at least one cell per dimension")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the gridded region."""
        return (self.x0, self.y0,
                self.x0 + self.nx * self.cell_size,
                self.y0 + self.ny * self.cell_size)

    def cell_centers(self) -> np.ndarray:
        """All cell centers, shape (ny*nx, 2), row-major."""
        xs = self.x0 + (np.arange(self.nx) + 0.5) * self.cell_size
        ys = self.y0 + (np.arange(self.ny) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def cell_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(i, j) integer cell indices of points, clamped to the grid."""
        pts = np.atleast_2d(points)
        i = np.clip(((pts[:, 0] - self.x0) / self.cell_size).astype(int), 0, self.nx - 1)
        j = np.clip(((pts[:, 1] - self.y0) / self.cell_size).astype(int), 0, self.ny - 1)
        return i, j

    def extended(self, margin_cells: int) -> "Grid":
        """Grid padded by ``margin_cells`` whole cells on every side."""
        m = int(margin_cells)
        return Grid(self.x0 - m * self.cell_size, self.y0 - m * self.cell_size,
                    self.cell_size, self.nx + 2 * m, self.ny + 2 * m)

    def congruent(self, other: "Grid", tol: float = 1e-9) -> bool:
        return (self.nx == other.nx and self.ny == other.ny
                and abs(self.x0 - other.x0) <= tol
                and abs(self.y0 - other.y0) <= tol
                and abs(self.cell_size - other.cell_size) <= tol)


@dataclass(frozen=True)
class RasterGrid:
    """Values on a :class:`Grid`; the workhorse covariate/field container.

    ``values`` has shape (ny, nx) so that flattening is row-major over cells.
    """

    grid: Grid
    values: np.ndarray
    nodata: float | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.ny, self.grid.nx):
            raise ValueError(
                f"values shape {vals.shape} does not match grid ({self.grid.ny}, {self.grid.nx})")
        object.__setattr__(self, "values", vals)

    # Convenience pass-throughs so a raster can stand in for its grid spec.
    @property
    def origin(self) -> tuple[float, float]:
        return (self.grid.x0, self.grid.y0)

    @property
    def cell_size(self) -> float:
        return self.grid.cell_size

    @property
    def nx(self) -> int:
        return self.grid.nx

    @property
    def ny(self) -> int:
        return self.grid.ny

    @classmethod
    def filled(cls, grid: Grid, value: float = 0.0) -> "RasterGrid":
        return cls(grid, np.full((grid.ny, grid.nx), float(value)))

    def value_at(self, points: np.ndarray) -> np.ndarray:
        """Value of the cell containing each point (nearest-cell lookup)."""
        i, j = self.grid.cell_index(points)
        return self.values[j, i]

    def interpolate(self, points: np.ndarray) -> np.ndarray:
        """Bilinear interpolation between cell centers, clamped at edges."""
        pts = np.atleast_2d(points)
        g = self.grid
        fx = (pts[:, 0] - g.x0) / g.cell_size - 0.5
        fy = (pts[:, 1] - g.y0) / g.cell_size - 0.5
        i0 = np.clip(np.floor(fx).astype(int), 0, g.nx - 2)
        j0 = np.clip(np.floor(fy).astype(int), 0, g.ny - 2)
        wx = np.clip(fx - i0, 0.0, 1.0)
        wy = np.clip(fy - j0, 0.0, 1.0)
        v = self.values
        return ((1 - wx) * (1 - wy) * v[j0, i0]
                + wx * (1 - wy) * v[j0, i0 + 1]
                + (1 - wx) * wy * v[j0 + 1, i0]
                + wx * wy * v[j0 + 1, i0 + 1])

    def crop(self, margin_cells: int) -> "RasterGrid":
        """Drop ``margin_cells`` cells from every side."""
        m = int(margin_cells)
        g = self.grid
        inner = Grid(g.x0 + m * g.cell_size, g.y0 + m * g.cell_size,
                     g.cell_size, g.nx - 2 * m, g.ny - 2 * m)
        return RasterGrid(inner, self.values[m:g.ny - m, m:g.nx - m], self.nodata)


# ---------------------------------------------------------------------------
# Road networks and point patterns
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoadNetwork:
    """Polyline network; each polyline is an (k, 2) vertex array, k >= 2."""

    polylines: tuple[np.ndarray, ...]
    _segments: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.polylines:
            raise ValueError("road network must contain at least one polyline")
        lines = []
        for line in self.polylines:
            arr = np.asarray(line, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
                raise ValueError("each polyline needs >= 2 (x, y) vertices")
            if not np.all(np.isfinite(arr)):
                raise ValueError("polyline coordinates must be finite")
            lines.append(arr)
        object.__setattr__(self, "polylines", tuple(lines))
        segs = np.vstack([np.hstack([arr[:-1], arr[1:]]) for arr in lines])
        object.__setattr__(self, "_segments", segs)

    @property
    def n_segments(self) -> int:
        return self._segments.shape[0]

    def segments(self) -> np.ndarray:
        """All segments as rows (x1, y1, x2, y2)."""
        return self._segments


@dataclass(frozen=True)
class PointPattern:
    """Planar point locations inside a rectangular observation window."""

    points: np.ndarray
    domain: tuple[float, float, float, float]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        xmin, ymin, xmax, ymax = self.domain
        if xmax <= xmin or ymax <= ymin:
            raise ValueError("domain rectangle is empty")
        if pts.size and (pts[:, 0].min() < xmin - 1e-9 or pts[:, 0].max() > xmax + 1e-9
                         or pts[:, 1].min() < ymin - 1e-9 or pts[:, 1].max() > ymax + 1e-9):
            raise ValueError("points fall outside the stated domain")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "domain", tuple(float(v) for v in self.domain))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def area(self) -> float:
        xmin, ymin, xmax, ymax = self.domain
        return (xmax - xmin) * (ymax - ymin)


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def distances_to_roads(points: np.ndarray, roads: RoadNetwork,
                       chunk: int = 2048) -> np.ndarray:
    """Exact minimum point-to-segment distance for each point.

    Vectorized over (points x segments); chunked to bound memory.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    segs = roads.segments()
    a = segs[:, 0:2]
    d = segs[:, 2:4] - a
    seg_len2 = np.maximum(np.einsum("ij,ij->i", d, d), 1e-300)
    out = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], chunk):
        p = pts[start:start + chunk]
        # t = clamp(((p - a) . d) / |d|^2, 0, 1), foot = a + t d
        diff = p[:, None, :] - a[None, :, :]
        t = np.clip(np.einsum("nmj,mj->nm", diff, d) / seg_len2, 0.0, 1.0)
        foot = a[None, :, :] + t[:, :, None] * d[None, :, :]
        dist2 = np.sum((p[:, None, :] - foot) ** 2, axis=2)
        out[start:start + chunk] = np.sqrt(dist2.min(axis=1))
    return out


def distance_to_roads(point, roads: RoadNetwork) -> float:
    """Exact distance from a single (x, y) location to the road network."""
    return float(distances_to_roads(np.asarray(point, dtype=float).reshape(1, 2), roads)[0])


def distance_raster(grid: Grid, roads: RoadNetwork) -> RasterGrid:
    """Distance to the road network evaluated at every cell center."""
    dists = distances_to_roads(grid.cell_centers(), roads)
    return RasterGrid(grid, dists.reshape(grid.ny, grid.nx))


# ---------------------------------------------------------------------------
# Exploratory statistics
# ---------------------------------------------------------------------------

class Ecdf:
    """Right-continuous empirical CDF with jumps 1/n at the sample points."""

    def __init__(self, values):
        vals = np.asarray(values, dtype=float).ravel()
        if vals.size == 0:
            raise ValueError("ecdf requires at least one value")
        if not np.all(np.isfinite(vals)):
            raise ValueError("ecdf values must be finite")
        self.sorted = np.sort(vals)
        self.n = vals.size

    def __call__(self, x) -> np.ndarray | float:
        q = np.searchsorted(self.sorted, np.asarray(x, dtype=float), side="right") / self.n
        return q if np.ndim(x) else float(q)


def ecdf(values) -> Ecdf:
    """Empirical cumulative distribution function of a sample."""
    return Ecdf(values)


def ks_two_sample(a, b) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.

    D is the exact supremum of |ECDF_a - ECDF_b| over the pooled sample
    points; the p-value uses the asymptotic Kolmogorov distribution with
    effective sample size n_a n_b / (n_a + n_b).
    """
    fa, fb = Ecdf(a), Ecdf(b)
    pooled = np.concatenate([fa.sorted, fb.sorted])
    d = float(np.max(np.abs(fa(pooled) - fb(pooled))))
    n_eff = fa.n * fb.n / (fa.n + fb.n)
    p = float(np.clip(kolmogorov(math.sqrt(n_eff) * d), 0.0, 1.0))
    return d, p


def pearson_corr(a, b) -> float:
    """Product-moment correlation; rejects degenerate inputs."""
    x = np.asarray(a, dtype=float).ravel()
    y = np.asarray(b, dtype=float).ravel()
    if x.size != y.size or x.size < 2:
        raise ValueError("inputs must have equal length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float(xc @ xc))
    sy = math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined for zero-variance input")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_esri_ascii(raster: RasterGrid, path) -> None:
    """Write a raster as an ESRI ASCII grid (rows top-down)."""
    g = raster.grid
    nodata = raster.nodata if raster.nodata is not None else -9999.0
    with open(path, "w") as fh:
        fh.write(f"ncols {g.nx}\n")
        fh.write(f"nrows {g.ny}\n")
        fh.write(f"xllcorner {g.x0!r}\n")
        fh.write(f"yllcorner {g.y0!r}\n")
        fh.write(f"cellsize {g.cell_size!r}\n")
        fh.write(f"NODATA_value {nodata!r}\n")
        for row in raster.values[::-1]:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def write_raster_csv(raster: RasterGrid, path) -> None:
    """Write raster values as ``x,y,value`` rows at cell centers."""
    centers = raster.grid.cell_centers()
    flat = raster.values.ravel()
    with open(path, "w") as fh:
        fh.write("x,y,value\n")
        for (x, y), v in zip(centers, flat):
            fh.write(f"{float(x)!r},{float(y)!r},{float(v)!r}\n")


def read_esri_ascii(path) -> RasterGrid:
    """Read an ESRI ASCII grid written by :func:`write_esri_ascii` or GIS tools."""
    header: dict[str, float] = {}
    rows: list[np.ndarray] = []
    keys = {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if parts[0].lower() in keys and len(parts) == 2:
                try:
                    header[parts[0].lower()] = float(parts[1])
                except ValueError as exc:
                    raise ParseError(f"bad header value {parts[1]!r}", path, lineno) from exc
            else:
                try:
                    rows.append(np.array([float(v) for v in parts]))
                except ValueError as exc:
                    raise ParseError(f"non-numeric raster value: {exc}", path, lineno)
    required = {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize"}
    missing = required - header.keys()
    if missing:
        raise ParseError(f"missing header fields: {sorted(missing)}", path)
    nx, ny = int(header["ncols"]), int(header["nrows"])
    if len(rows) != ny or any(r.size != nx for r in rows):
        raise ParseError(f"expected {ny} rows of {nx} values", path)
    grid = Grid(header["xllcorner"], header["yllcorner"], header["cellsize"], nx, ny)
    values = np.vstack(rows)[::-1]
    return RasterGrid(grid, values, header.get("nodata_value"))


def read_points_csv(path, domain=None) -> PointPattern:
    """Read a point pattern from a CSV with header ``x,y``.

    The domain defaults to the points' bounding box when not supplied.
    """
    pts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if lineno == 1 and line.lower().replace(" ", "").startswith("x,y"):
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise ParseError("expected 'x,y' fields", path, lineno)
            try:
                pts.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise ParseError(f"non-numeric coordinate: {exc}", path, lineno)
    arr = np.array(pts, dtype=float).reshape(-1, 2)
    if domain is None:
        if arr.size == 0:
            raise ParseError("empty point file and no domain given", path)
        pad = 1e-9
        domain = (arr[:, 0].min() - pad, arr[:, 1].min() - pad,
                  arr[:, 0].max() + pad, arr[:, 1].max() + pad)
    return PointPattern(arr, domain)


def write_points_csv(pattern: PointPattern, path) -> None:
    with open(path, "w") as fh:
        fh.write("x,y\n")
        for x, y in pattern.points:
            fh.write(f"{float(x)!r},{float(y)!r}\n")


def read_roads_geojson(path) -> RoadNetwork:
    """Read LineString/MultiLineString features from a GeoJSON FeatureCollection."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno)
    features = doc.get("features")
    if doc.get("type") != "FeatureCollection" or features is None:
        raise ParseError("expected a GeoJSON FeatureCollection", path)
    lines = []
    for k, feat in enumerate(features):
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        coords = geom.get("coordinates", [])
        if gtype == "LineString":
            lines.append(np.asarray(coords, dtype=float))
        elif gtype == "MultiLineString":
            lines.extend(np.asarray(part, dtype=float) for part in coords)
        elif gtype is None:
            raise ParseError(f"feature {k} has no geometry", path)
        # Other geometry types are skipped: road layers may carry stray points.
    if not lines:
        raise ParseError("no LineString features found", path)
    return RoadNetwork(tuple(lines))


def write_roads_geojson(roads: RoadNetwork, path) -> None:
    features = [{
        "type": "Feature",
        "properties": {},
        "geometry": {"type": "LineString",
                     "coordinates": [[float(x), float(y)] for x, y in line]},
    } for line in roads.polylines]
    with open(path, "w") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh)


def read_roads_csv(path) -> RoadNetwork:
    """Fallback CSV format: header ``polyline_id,vertex_index,x,y``."""
    rows: dict[str, list[tuple[int, float, float]]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if lineno == 1 and line.lower().startswith("polyline_id"):
                continue
            parts = line.split(",")
            if len(parts) < 4:
                raise ParseError("expected 'polyline_id,vertex_index,x,y'", path, lineno)
            try:
                rows.setdefault(parts[0], []).append(
                    (int(parts[1]), float(parts[2]), float(parts[3])))
            except ValueError as exc:
                raise ParseError(f"bad field: {exc}", path, lineno)
    if not rows:
        raise ParseError("no polylines found", path)
    lines = []
    for key in rows:
        verts = sorted(rows[key])
        lines.append(np.array([[x, y] for _, x, y in verts]))
    return RoadNetwork(tuple(lines))


def read_roads(path) -> RoadNetwork:
    """Dispatch on extension: .geojson/.json or .csv."""
    p = str(path)
    if p.endswith(".csv"):
        return read_roads_csv(p)
    if p.endswith(".json") or p.endswith(".geojson"):
        return read_roads_geojson(p)
    raise LgcpThinError(f"unrecognized road file extension: {p}")
