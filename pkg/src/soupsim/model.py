"""Shared domain types, derived constants, and seed/provenance plumbing."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

KAPPA_MIN = 8.0 / 3.0
KAPPA_MAX = 4.0

GEOM_TOL = 1e-9


class DomainError(ValueError):
    """A parameter is outside its admissible domain."""


class ParameterError(ValueError):
    """Inconsistent or malformed operation parameters."""


class UnsupportedDomainError(ValueError):
    """The requested domain shape is not supported by this operation."""


class ResolutionError(ValueError):
    """A raster/grid resolution request would overflow or is too coarse."""


class TopologyError(ValueError):
    """A domain does not have the connectivity an operation requires."""


class RejectionBudgetError(RuntimeError):
    """Rejection sampling exhausted its budget."""

    def __init__(self, message: str, n_trials: int, n_accepted: int):
        super().__init__(message)
        self.n_trials = n_trials
        self.n_accepted = n_accepted

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / max(self.n_trials, 1)


@dataclass(frozen=True)
class ConstantPack:
    """The kappa-derived constant pack.

    beta = 8/kappa - 1, alpha = (8-kappa)(3kappa-8)/(32 kappa),
    c_intensity = (6-kappa)(3kappa-8)/(2 kappa).
    """

    kappa: float
    beta: float
    alpha: float
    c_intensity: float


def make_constants(kappa: float) -> ConstantPack:
    if not (KAPPA_MIN < kappa <= KAPPA_MAX):
        raise DomainError(
            f"kappa={kappa!r} outside the admissible interval (8/3, 4]"
        )
    beta = 8.0 / kappa - 1.0
    alpha = (8.0 - kappa) * (3.0 * kappa - 8.0) / (32.0 * kappa)
    c = (6.0 - kappa) * (3.0 * kappa - 8.0) / (2.0 * kappa)
    return ConstantPack(kappa=kappa, beta=beta, alpha=alpha, c_intensity=c)


LOOP_KINDS = ("brownian", "cluster_boundary", "cle_loop", "bubble")


@dataclass(frozen=True)
class PlanarLoop:
    """A closed polyline: vertices (n, 2), last vertex implicitly connects to first."""

    vertices: np.ndarray
    kind: str = "brownian"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ParameterError("loop needs at least 3 (x, y) vertices")
        if self.kind not in LOOP_KINDS:
            raise ParameterError(f"unknown loop kind {self.kind!r}")
        d = np.hypot(*(np.roll(v, -1, axis=0) - v).T)
        if np.any(d <= GEOM_TOL):
            raise ParameterError("consecutive loop vertices must be distinct")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @classmethod
    def _unchecked(cls, vertices: np.ndarray, kind: str, meta: dict) -> "PlanarLoop":
        """Fast constructor for sampler hot paths; caller guarantees invariants."""
        obj = object.__new__(cls)
        vertices.setflags(write=False)
        object.__setattr__(obj, "vertices", vertices)
        object.__setattr__(obj, "kind", kind)
        object.__setattr__(obj, "meta", meta)
        return obj

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def bbox(self) -> np.ndarray:
        """[xmin, ymin, xmax, ymax]."""
        v = self.vertices
        return np.array([v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max()])

    def diameter(self) -> float:
        return polyline_diameter(self.vertices)

    def winding_number(self, point) -> int:
        return winding_number(self.vertices, point)

    def contains_point(self, point) -> bool:
        return self.winding_number(point) != 0

    def max_radius_about(self, point) -> float:
        """Smallest R with the loop inside B(point, R)."""
        return float(np.hypot(*(self.vertices - np.asarray(point, float)).T).max())

    def min_distance_to(self, point) -> float:
        return float(point_polyline_distance(np.asarray(point, float), self.vertices))

    def is_simple(self, tol: float = GEOM_TOL) -> bool:
        return polyline_is_simple(self.vertices, tol)


def polyline_diameter(vertices: np.ndarray) -> float:
    """Exact max pairwise vertex distance (convex hull for long polylines)."""
    v = np.asarray(vertices, float)
    if v.shape[0] > 64:
        from scipy.spatial import ConvexHull

        try:
            v = v[ConvexHull(v).vertices]
        except Exception:
            pass  # degenerate (collinear) input: brute force below
    d2 = ((v[:, None, :] - v[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.max()))


def winding_number(vertices: np.ndarray, point) -> int:
    """Winding number of the closed polyline about a point (crossing count)."""
    p = np.asarray(point, dtype=float)
    v = np.asarray(vertices, dtype=float) - p
    x, y = v[:, 0], v[:, 1]
    x2, y2 = np.roll(x, -1), np.roll(y, -1)
    up = (y <= 0) & (y2 > 0)
    down = (y > 0) & (y2 <= 0)
    cross = x * y2 - x2 * y
    return int(np.sum(up & (cross > 0)) - np.sum(down & (cross < 0)))


def winding_numbers(vertices: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Winding numbers of one closed polyline about many points."""
    v = np.asarray(vertices, float)
    p = np.atleast_2d(np.asarray(points, float))
    y = v[:, 1][None, :] - p[:, 1][:, None]
    x = v[:, 0][None, :] - p[:, 0][:, None]
    x2, y2 = np.roll(x, -1, axis=1), np.roll(y, -1, axis=1)
    up = (y <= 0) & (y2 > 0)
    down = (y > 0) & (y2 <= 0)
    cross = x * y2 - x2 * y
    return (np.sum(up & (cross > 0), axis=1) - np.sum(down & (cross < 0), axis=1)).astype(int)


def point_polyline_distance(point: np.ndarray, vertices: np.ndarray) -> float:
    """Min distance from a point to a closed polyline."""
    return float(points_polyline_distance(point[None, :], vertices)[0])


def points_polyline_distance(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Min distances from points (m, 2) to the closed polyline (n, 2)."""
    a = np.asarray(vertices, float)
    b = np.roll(a, -1, axis=0)
    ab = b - a
    den = (ab * ab).sum(axis=1)
    p = np.asarray(points, float)
    out = np.empty(p.shape[0])
    # chunk the (points x segments) broadcast to bound memory
    step = max(1, int(4e6 // max(a.shape[0], 1)))
    for i in range(0, p.shape[0], step):
        q = p[i : i + step]
        ap = q[:, None, :] - a[None, :, :]
        t = np.clip((ap * ab[None, :, :]).sum(axis=2) / den[None, :], 0.0, 1.0)
        proj = a[None, :, :] + t[:, :, None] * ab[None, :, :]
        d = np.hypot(*(q[:, None, :] - proj).transpose(2, 0, 1))
        out[i : i + step] = d.min(axis=1)
    return out


def segments_intersect_distance(a0, a1, b0, b1) -> np.ndarray:
    """Pairwise min distance between segment batches a0->a1 and b0->b1 (aligned)."""
    a0, a1, b0, b1 = (np.asarray(x, float) for x in (a0, a1, b0, b1))

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    d1, d2 = a1 - a0, b1 - b0
    # proper intersection test
    s1 = cross(d1, b0 - a0)
    s2 = cross(d1, b1 - a0)
    s3 = cross(d2, a0 - b0)
    s4 = cross(d2, a1 - b0)
    hits = (s1 * s2 < 0) & (s3 * s4 < 0)

    def pt_seg(p, s0, sd):
        den = (sd * sd).sum(axis=-1)
        den = np.where(den == 0, 1.0, den)
        t = np.clip(((p - s0) * sd).sum(axis=-1) / den, 0.0, 1.0)
        proj = s0 + t[..., None] * sd
        return np.hypot(*(p - proj).T) if p.ndim == 1 else np.linalg.norm(p - proj, axis=-1)

    d = np.minimum.reduce([
        pt_seg(a0, b0, d2),
        pt_seg(a1, b0, d2),
        pt_seg(b0, a0, d1),
        pt_seg(b1, a0, d1),
    ])
    return np.where(hits, 0.0, d)


def polyline_is_simple(vertices: np.ndarray, tol: float = GEOM_TOL) -> bool:
    """Segment-sweep-free O(n^2) simplicity check (fine for traced contours)."""
    v = np.asarray(vertices, float)
    n = v.shape[0]
    a = v
    b = np.roll(v, -1, axis=0)
    for i in range(n - 1):
        j0 = i + 2
        j1 = n if i > 0 else n - 1  # skip shared-endpoint neighbours
        if j0 >= j1:
            continue
        d = segments_intersect_distance(
            np.broadcast_to(a[i], (j1 - j0, 2)),
            np.broadcast_to(b[i], (j1 - j0, 2)),
            a[j0:j1],
            b[j0:j1],
        )
        if np.any(d <= tol):
            return False
    return True


@dataclass(frozen=True)
class DomainSpec:
    """A bounded planar domain: disc, annulus, disc-minus-hull, or halfplane cap."""

    shape: str
    center: tuple = (0.0, 0.0)
    radius: float = 1.0
    r_in: float = 0.0
    r_out: float = 1.0
    hull: PlanarLoop | None = None

    SHAPES = ("disc", "annulus", "disc_minus_hull", "halfplane_cap")

    def __post_init__(self):
        if self.shape not in self.SHAPES:
            raise ParameterError(f"unknown domain shape {self.shape!r}")
        if self.shape == "annulus" and not (0.0 < self.r_in < self.r_out):
            raise DomainError("annulus requires 0 < r_in < r_out")
        if self.shape == "disc" and self.radius <= 0:
            raise DomainError("disc requires radius > 0")
        if self.shape == "disc_minus_hull":
            if self.hull is None:
                raise ParameterError("disc_minus_hull requires a hull loop")
            if self.hull.contains_point(self.center):
                raise DomainError("hull must not contain the domain center")

    @staticmethod
    def disc(radius: float = 1.0, center=(0.0, 0.0)) -> "DomainSpec":
        return DomainSpec(shape="disc", radius=radius, center=tuple(center))

    @staticmethod
    def annulus(r_in: float, r_out: float = 1.0, center=(0.0, 0.0)) -> "DomainSpec":
        return DomainSpec(shape="annulus", r_in=r_in, r_out=r_out, center=tuple(center))

    @staticmethod
    def disc_minus_hull(hull: PlanarLoop, radius: float = 1.0, center=(0.0, 0.0)) -> "DomainSpec":
        return DomainSpec(shape="disc_minus_hull", hull=hull, radius=radius, center=tuple(center))

    @property
    def bounded(self) -> bool:
        return self.shape != "halfplane_cap"

    def outer_radius(self) -> float:
        return self.radius if self.shape in ("disc", "disc_minus_hull") else self.r_out

    def diameter(self) -> float:
        return 2.0 * self.outer_radius()

    def area_box(self) -> np.ndarray:
        """Axis-aligned bounding rectangle [xmin, ymin, xmax, ymax]."""
        cx, cy = self.center
        R = self.outer_radius()
        return np.array([cx - R, cy - R, cx + R, cy + R])

    def contains_points(self, points: np.ndarray, tol: float = GEOM_TOL) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, float)) - np.asarray(self.center, float)
        rr = np.hypot(p[:, 0], p[:, 1])
        if self.shape == "disc":
            return rr <= self.radius - tol
        if self.shape == "annulus":
            return (rr <= self.r_out - tol) & (rr >= self.r_in + tol)
        if self.shape == "disc_minus_hull":
            inside = rr <= self.radius - tol
            w = winding_numbers(self.hull.vertices, np.atleast_2d(points))
            near = points_polyline_distance(np.atleast_2d(points), self.hull.vertices) <= tol
            return inside & (w == 0) & ~near
        raise UnsupportedDomainError("halfplane_cap has no containment test")


@dataclass(frozen=True)
class SoupCutoffs:
    """Approximation knobs for the cutoff soup sampler."""

    t_min: float
    t_max: float
    d_cut: float
    n_steps_per_unit_time: int

    def __post_init__(self):
        if self.t_min <= 0 or self.t_max <= self.t_min:
            raise ParameterError("need 0 < t_min < t_max")
        if self.t_max / self.t_min < 10:
            raise ParameterError("t_max/t_min >= 10 required (degenerate time window)")
        if self.d_cut < 0:
            raise ParameterError("d_cut must be >= 0")
        if self.n_steps_per_unit_time < 1:
            raise ParameterError("n_steps_per_unit_time must be positive")


def default_cutoffs(domain: DomainSpec, n_steps_per_unit_time: int = 4096) -> SoupCutoffs:
    diam = domain.diameter()
    return SoupCutoffs(
        t_min=1e-4,
        t_max=2.0 * diam * diam,
        d_cut=0.01 * diam,
        n_steps_per_unit_time=n_steps_per_unit_time,
    )


@dataclass(frozen=True)
class MCEstimate:
    value: float
    std_err: float
    n_replicates: int
    seed: int
    params_digest: str = ""

    def __post_init__(self):
        if self.std_err < 0:
            raise ParameterError("std_err must be >= 0")
        if self.n_replicates < 1:
            raise ParameterError("n_replicates must be positive")


def mc_estimate(samples: np.ndarray, seed: int, params_digest: str = "") -> MCEstimate:
    """Mean +- stderr summary of i.i.d. replicate values."""
    s = np.asarray(samples, float)
    n = s.size
    se = float(s.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return MCEstimate(value=float(s.mean()), std_err=se, n_replicates=n,
                      seed=int(seed), params_digest=params_digest)


def binomial_estimate(n_success: int, n_total: int, seed: int,
                      params_digest: str = "") -> MCEstimate:
    p = n_success / n_total
    se = math.sqrt(p * (1.0 - p) / n_total)
    return MCEstimate(value=p, std_err=se, n_replicates=n_total, seed=int(seed),
                      params_digest=params_digest)


# ---------------------------------------------------------------------------
# Seed plumbing: one 64-bit root seed, counter-based (Philox) per-stream split.


def stream_rng(root_seed: int, stream: int = 0) -> np.random.Generator:
    """Deterministic generator for (root_seed, stream); streams are independent."""
    key = np.array([root_seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def params_digest(params: dict) -> str:
    """Stable digest of a parameter map (order-independent)."""
    blob = json.dumps(params, sort_keys=True, default=_digest_default)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _digest_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if hasattr(obj, "__dict__"):
        return vars(obj)
    return repr(obj)


# ---------------------------------------------------------------------------
# Loop record wire format: newline-delimited JSON, one loop per line.


def loop_to_record(loop: PlanarLoop, loop_id: str) -> dict:
    meta = {}
    for k, v in loop.meta.items():
        if isinstance(v, np.ndarray):
            v = v.tolist()
        elif isinstance(v, (np.floating, np.integer)):
            v = v.item()
        meta[k] = v
    return {"id": loop_id, "kind": loop.kind,
            "vertices": loop.vertices.tolist(), "meta": meta}


def record_to_loop(rec: dict) -> PlanarLoop:
    return PlanarLoop(vertices=np.array(rec["vertices"], dtype=float),
                      kind=rec["kind"], meta=dict(rec.get("meta", {})))


def write_loops(path, loops: Iterable[PlanarLoop], header: dict | None = None):
    with open(path, "w") as f:
        if header is not None:
            f.write(json.dumps(header) + "\n")
        for i, loop in enumerate(loops):
            f.write(json.dumps(loop_to_record(loop, str(i))) + "\n")


def read_loops(path, expect_header: bool = False):
    """Returns (header_or_None, [PlanarLoop, ...])."""
    header = None
    loops = []
    with open(path) as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if i == 0 and expect_header and "vertices" not in rec:
                header = rec
                continue
            loops.append(record_to_loop(rec))
    return header, loops
