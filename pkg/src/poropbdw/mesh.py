"""Tetrahedral meshes with tagged boundary regions.

A :class:`Mesh` holds P1 tetrahedra plus a list of boundary triangles, each
carrying exactly one :class:`BoundaryRegion` tag. Meshes come from
:func:`build_phantom` (a box with an interior box-shaped cavity), from the
ASCII ``poromesh 1`` format (:func:`load_mesh` / :func:`save_mesh`), or from a
Gmsh v2 ASCII file with a user supplied physical-name mapping.

Coordinates are in cm.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class BoundaryRegion(enum.Enum):
    NECK = "neck"
    VENTRICLES = "ventricles"
    MRE = "mre"


class MeshError(ValueError):
    """Raised for infeasible geometry or malformed mesh input."""


class MeshParseError(MeshError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


_TAG_CODES = {BoundaryRegion.NECK: 0, BoundaryRegion.VENTRICLES: 1, BoundaryRegion.MRE: 2}
_CODE_TAGS = {v: k for k, v in _TAG_CODES.items()}


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Mesh:
    """Immutable tetrahedral mesh.

    Attributes
    ----------
    nodes : (n_nodes, 3) float array
    elements : (n_elements, 4) int array of node indices
    facets : (n_facets, 3) int array of node indices
    facet_tags : (n_facets,) int array of region codes; use :meth:`facets_of`
    """

    nodes: np.ndarray
    elements: np.ndarray
    facets: np.ndarray
    facet_tags: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(self.nodes, float).reshape(-1, 3))
        object.__setattr__(self, "elements", _frozen(self.elements, np.int64).reshape(-1, 4))
        object.__setattr__(self, "facets", _frozen(self.facets, np.int64).reshape(-1, 3))
        object.__setattr__(self, "facet_tags", _frozen(self.facet_tags, np.int64).reshape(-1))
        if len(self.facet_tags) != len(self.facets):
            raise MeshError("facet_tags and facets differ in length")

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.nodes.min(axis=0), self.nodes.max(axis=0)

    @property
    def frontal_length(self) -> float:
        """Extent of the mesh along the y (frontal) axis."""
        lo, hi = self.bounding_box
        return float(hi[1] - lo[1])

    def facets_of(self, region: BoundaryRegion) -> np.ndarray:
        return self.facets[self.facet_tags == _TAG_CODES[region]]

    def boundary_nodes(self, region: BoundaryRegion) -> np.ndarray:
        """Sorted unique node indices touched by facets of ``region``."""
        key = ("bnodes", region)
        if key not in self._cache:
            self._cache[key] = _frozen(np.unique(self.facets_of(region)), np.int64)
        return self._cache[key]

    def element_volumes(self) -> np.ndarray:
        """Signed volumes; positive under the right-handed vertex convention."""
        return signed_volumes(self.nodes, self.elements)

    def facet_areas(self, region: BoundaryRegion | None = None) -> np.ndarray:
        f = self.facets if region is None else self.facets_of(region)
        return triangle_areas(self.nodes, f)


def signed_volumes(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    x = nodes[elements]
    d = x[:, 1:, :] - x[:, :1, :]
    return np.linalg.det(d) / 6.0


def triangle_areas(nodes: np.ndarray, facets: np.ndarray) -> np.ndarray:
    x = nodes[facets]
    return 0.5 * np.linalg.norm(np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]), axis=1)


def _orient(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    """Swap the last two vertices of every negatively oriented tetrahedron."""
    elements = np.array(elements, dtype=np.int64)
    neg = signed_volumes(nodes, elements) < 0
    elements[neg, 2], elements[neg, 3] = elements[neg, 3].copy(), elements[neg, 2].copy()
    return elements


_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


def exterior_faces(elements: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Faces belonging to exactly one tetrahedron.

    Returns the faces (outward orientation for positively oriented
    tetrahedra) and the index of the owning element.
    """
    faces = elements[:, _TET_FACES].reshape(-1, 3)
    owner = np.repeat(np.arange(len(elements)), 4)
    key = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    once = counts[inverse.ravel()] == 1
    return faces[once], owner[once]


# ---------------------------------------------------------------------------
# Phantom generation


@dataclass(frozen=True)
class PhantomConfig:
    """Box phantom with a box-shaped cavity and a neck patch on the bottom face.

    The outer box spans ``[0, outer[k]]`` along each axis. The neck patch is
    centered on the ``z = 0`` face.
    """

    outer: tuple[float, float, float] = (10.0, 10.0, 10.0)
    cavity_center: tuple[float, float, float] = (5.0, 5.0, 5.0)
    cavity_size: tuple[float, float, float] = (4.0, 2.0, 2.0)
    neck_size: tuple[float, float] = (4.0, 4.0)
    h: float = 1.0

    @property
    def cavity_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.cavity_center, float)
        s = np.asarray(self.cavity_size, float) / 2
        return c - s, c + s

    @property
    def neck_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        o = np.asarray(self.outer[:2], float)
        s = np.asarray(self.neck_size, float) / 2
        return o / 2 - s, o / 2 + s

    def validate(self) -> None:
        outer = np.asarray(self.outer, float)
        if self.h <= 0:
            raise MeshError("mesh size h must be positive")
        if np.any(outer <= 0):
            raise MeshError("outer extents must be positive")
        lo, hi = self.cavity_bounds
        if np.any(np.asarray(self.cavity_size) <= 0):
            raise MeshError("cavity extents must be positive")
        if np.any(lo <= 0) or np.any(hi >= outer):
            raise MeshError("cavity touches or crosses the outer boundary")
        nlo, nhi = self.neck_bounds
        if np.any(np.asarray(self.neck_size) <= 0):
            raise MeshError("neck patch must be nonempty")
        if np.any(nlo < 0) or np.any(nhi > outer[:2]):
            raise MeshError("neck patch exceeds the bottom face")
        gap = min(lo.min(), (outer - hi).min())
        if self.h > min(np.min(self.cavity_size), gap):
            raise MeshError(f"h={self.h} too coarse to resolve the cavity")

    def volume(self) -> float:
        return float(np.prod(self.outer) - np.prod(self.cavity_size))

    def region_area(self, region: BoundaryRegion) -> float:
        ox, oy, oz = self.outer
        cx, cy, cz = self.cavity_size
        neck = float(np.prod(self.neck_size))
        if region is BoundaryRegion.VENTRICLES:
            return 2 * (cx * cy + cy * cz + cx * cz)
        if region is BoundaryRegion.NECK:
            return neck
        return 2 * (ox * oy + oy * oz + ox * oz) - neck


def _axis_coords(breaks: list[float], h: float) -> np.ndarray:
    breaks = sorted(set(breaks))
    pieces = [np.array([breaks[0]])]
    for a, b in zip(breaks[:-1], breaks[1:]):
        n = max(1, int(np.ceil((b - a) / h - 1e-9)))
        pieces.append(np.linspace(a, b, n + 1)[1:])
    return np.concatenate(pieces)


# Kuhn subdivision of the unit cube along the main diagonal; conforming across
# neighbouring cells of a tensor grid.
_KUHN = [
    [(0, 0, 0)] + [tuple(int(k) for k in np.sum([np.eye(3, dtype=int)[a] for a in perm[: j + 1]], axis=0))
                   for j in range(3)]
    for perm in itertools.permutations(range(3))
]


def build_phantom(cfg: PhantomConfig = PhantomConfig()) -> Mesh:
    """Structured tetrahedral mesh of the phantom described by ``cfg``.

    Grid lines are placed on the cavity and neck-patch edges so that volumes
    and tagged areas are exact.
    """
    cfg.validate()
    clo, chi = cfg.cavity_bounds
    nlo, nhi = cfg.neck_bounds
    axes = []
    for k in range(3):
        breaks = [0.0, float(cfg.outer[k]), float(clo[k]), float(chi[k])]
        if k < 2:
            breaks += [float(nlo[k]), float(nhi[k])]
        axes.append(_axis_coords(breaks, cfg.h))
    nx, ny, nz = (len(a) for a in axes)

    def nid(i, j, k):
        return (i * ny + j) * nz + k

    ii, jj, kk = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), np.arange(nz - 1), indexing="ij")
    ii, jj, kk = ii.ravel(), jj.ravel(), kk.ravel()
    centers = np.stack([
        0.5 * (axes[0][ii] + axes[0][ii + 1]),
        0.5 * (axes[1][jj] + axes[1][jj + 1]),
        0.5 * (axes[2][kk] + axes[2][kk + 1]),
    ], axis=1)
    solid = ~np.all((centers > clo) & (centers < chi), axis=1)
    ii, jj, kk = ii[solid], jj[solid], kk[solid]

    tets = []
    for tet in _KUHN:
        tets.append(np.stack([nid(ii + a, jj + b, kk + c) for a, b, c in tet], axis=1))
    elements = np.concatenate(tets, axis=0)

    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    used, elements = np.unique(elements, return_inverse=True)
    elements = elements.reshape(-1, 4)
    nodes = nodes[used]
    elements = _orient(nodes, elements)

    faces, _ = exterior_faces(elements)
    cen = nodes[faces].mean(axis=1)
    outer = np.asarray(cfg.outer, float)
    tol = 1e-9 * outer.max()
    on_outer = np.any((np.abs(cen) < tol) | (np.abs(cen - outer) < tol), axis=1)
    tags = np.full(len(faces), _TAG_CODES[BoundaryRegion.MRE])
    tags[~on_outer] = _TAG_CODES[BoundaryRegion.VENTRICLES]
    neck = (np.abs(cen[:, 2]) < tol) & np.all((cen[:, :2] > nlo) & (cen[:, :2] < nhi), axis=1)
    tags[neck] = _TAG_CODES[BoundaryRegion.NECK]
    return Mesh(nodes, elements, faces, tags)


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class MeshIssue:
    kind: str
    index: int
    message: str


def validate_mesh(m: Mesh) -> list[MeshIssue]:
    """Check the mesh invariants; an empty list means the mesh is valid."""
    issues: list[MeshIssue] = []
    n = m.n_nodes
    bad_el = np.where((m.elements < 0) | (m.elements >= n))[0]
    for e in np.unique(bad_el):
        issues.append(MeshIssue("dangling_index", int(e), f"element {e} references a node outside [0, {n})"))
    bad_f = np.where((m.facets < 0) | (m.facets >= n))[0]
    for f in np.unique(bad_f):
        issues.append(MeshIssue("dangling_index", int(f), f"facet {f} references a node outside [0, {n})"))
    if issues:
        return issues

    vols = m.element_volumes()
    for e in np.where(vols <= 0)[0]:
        issues.append(MeshIssue("inverted_element", int(e), f"element {e} has signed volume {vols[e]:.6g}"))

    valid_codes = set(_CODE_TAGS)
    for f in np.where(~np.isin(m.facet_tags, list(valid_codes)))[0]:
        issues.append(MeshIssue("untagged_facet", int(f), f"facet {f} carries no valid region tag"))

    ext, _ = exterior_faces(m.elements)
    ext_keys = {tuple(k) for k in np.sort(ext, axis=1).tolist()}
    seen: dict[tuple, int] = {}
    for f, key in enumerate(map(tuple, np.sort(m.facets, axis=1).tolist())):
        if key in seen:
            issues.append(MeshIssue("duplicate_facet", f, f"facet {f} duplicates facet {seen[key]}"))
            continue
        seen[key] = f
        if key not in ext_keys:
            issues.append(MeshIssue("interior_facet", f, f"facet {f} is not a face of exactly one element"))
    for key in sorted(ext_keys - set(seen)):
        issues.append(MeshIssue("untagged_facet", -1, f"boundary face {key} has no tagged facet"))
    return issues


# ---------------------------------------------------------------------------
# I/O


def save_mesh(m: Mesh, path: str | Path) -> None:
    """Write ``m`` in the ``poromesh 1`` ASCII format (coordinates round-trip exactly)."""
    lines = ["poromesh 1", f"nodes {m.n_nodes}"]
    lines += [" ".join(repr(float(c)) for c in row) for row in m.nodes]
    lines.append(f"tets {m.n_elements}")
    lines += [" ".join(str(int(i)) for i in row) for row in m.elements]
    lines.append(f"facets {len(m.facets)}")
    for row, tag in zip(m.facets, m.facet_tags):
        lines.append(" ".join(str(int(i)) for i in row) + " " + _CODE_TAGS[int(tag)].value)
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path: str | Path, format: str = "poromesh", tag_map: dict[str, BoundaryRegion] | None = None) -> Mesh:
    """Read a mesh file.

    ``format`` is ``"poromesh"`` (the native ASCII format) or ``"gmsh"`` (Gmsh
    v2 ASCII, physical names mapped to regions through ``tag_map``).
    """
    text = Path(path).read_text()
    if format == "poromesh":
        return _parse_poromesh(text)
    if format == "gmsh":
        if tag_map is None:
            raise MeshError("gmsh import needs a physical-name to region mapping")
        return _parse_gmsh(text, tag_map)
    raise MeshError(f"unknown mesh format {format!r}")


def _tokens(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split()
        if line:
            yield lineno, line


def _parse_poromesh(text: str) -> Mesh:
    it = _tokens(text)

    def next_line():
        try:
            return next(it)
        except StopIteration:
            raise MeshParseError("unexpected end of file") from None

    lineno, head = next_line()
    if head != ["poromesh", "1"]:
        raise MeshParseError("expected header 'poromesh 1'", lineno)

    def section(name: str, width: int, conv):
        lineno, tok = next_line()
        if len(tok) != 2 or tok[0] != name:
            raise MeshParseError(f"expected section '{name} <count>'", lineno)
        try:
            count = int(tok[1])
        except ValueError:
            raise MeshParseError(f"bad count {tok[1]!r}", lineno) from None
        rows = []
        for _ in range(count):
            lineno, tok = next_line()
            if len(tok) != width:
                raise MeshParseError(f"expected {width} fields in section '{name}'", lineno)
            try:
                rows.append(conv(tok, lineno))
            except MeshParseError:
                raise
            except ValueError as exc:
                raise MeshParseError(str(exc), lineno) from None
        return rows

    nodes = section("nodes", 3, lambda t, _: [float(x) for x in t])
    tets = section("tets", 4, lambda t, _: [int(x) for x in t])

    def facet(tok, lineno):
        try:
            tag = BoundaryRegion(tok[3])
        except ValueError:
            raise MeshParseError(f"unknown tag name {tok[3]!r}", lineno) from None
        return [int(x) for x in tok[:3]] + [_TAG_CODES[tag]]

    facets = section("facets", 4, facet)
    nodes = np.array(nodes, float).reshape(-1, 3)
    tets = np.array(tets, np.int64).reshape(-1, 4)
    facets = np.array(facets, np.int64).reshape(-1, 4)
    n = len(nodes)
    for what, arr in (("tet", tets), ("facet", facets[:, :3])):
        bad = np.argwhere((arr < 0) | (arr >= n))
        if len(bad):
            r = bad[0][0]
            raise MeshError(f"dangling node index {arr[r][bad[0][1]]} in {what} {r} of a {n}-node mesh")
    return Mesh(nodes, _orient(nodes, tets), facets[:, :3], facets[:, 3])


def _parse_gmsh(text: str, tag_map: dict[str, BoundaryRegion]) -> Mesh:
    lines = text.splitlines()
    pos = {ln.strip(): i for i, ln in enumerate(lines) if ln.startswith("$")}
    if "$Nodes" not in pos or "$Elements" not in pos:
        raise MeshParseError("missing $Nodes or $Elements section")
    if "$MeshFormat" in pos:
        version = lines[pos["$MeshFormat"] + 1].split()[0]
        if not version.startswith("2"):
            raise MeshParseError(f"unsupported Gmsh version {version}", pos["$MeshFormat"] + 2)

    names: dict[int, str] = {}
    if "$PhysicalNames" in pos:
        start = pos["$PhysicalNames"] + 1
        for i in range(int(lines[start])):
            tok = lines[start + 1 + i].split(maxsplit=2)
            names[int(tok[1])] = tok[2].strip().strip('"')

    start = pos["$Nodes"] + 1
    count = int(lines[start])
    ids, coords = [], []
    for i in range(count):
        tok = lines[start + 1 + i].split()
        ids.append(int(tok[0]))
        coords.append([float(x) for x in tok[1:4]])
    index = {gid: i for i, gid in enumerate(ids)}

    start = pos["$Elements"] + 1
    tets, facets, tags = [], [], []
    for i in range(int(lines[start])):
        lineno = start + 2 + i
        tok = [int(x) for x in lines[start + 1 + i].split()]
        etype, ntags = tok[1], tok[2]
        verts = tok[3 + ntags:]
        try:
            local = [index[v] for v in verts]
        except KeyError as exc:
            raise MeshParseError(f"dangling node id {exc.args[0]}", lineno) from None
        if etype == 4:
            tets.append(local)
        elif etype == 2:
            phys = tok[3] if ntags else None
            name = names.get(phys, str(phys))
            if name not in tag_map:
                raise MeshParseError(f"unknown tag name {name!r}", lineno)
            facets.append(local)
            tags.append(_TAG_CODES[tag_map[name]])
    nodes = np.array(coords, float)
    return Mesh(nodes, _orient(nodes, np.array(tets, np.int64)), np.array(facets, np.int64), np.array(tags, np.int64))
