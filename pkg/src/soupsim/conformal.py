"""Numerical conformal invariants.

Conformal radius by walk-on-spheres (log-exit-distance identity), capacity
as -log CR, and conformal modulus from the Dirichlet energy of the harmonic
potential between the two boundary components: CM = exp(-2 pi / E).

The modulus solver runs on a Cartesian cell grid or, for origin-centered
annular domains with a tiny inner hole, on a log-polar grid (log z maps the
annulus to a periodic strip; the Dirichlet energy is conformally invariant,
so the modulus formula is unchanged).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.spatial import cKDTree

from .model import (
    DomainError,
    DomainSpec,
    MCEstimate,
    ParameterError,
    PlanarLoop,
    TopologyError,
    mc_estimate,
    params_digest,
    points_polyline_distance,
    stream_rng,
    winding_numbers,
)

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class HullSpec:
    """A closed set K attached to the unit circle with D \\ K simply connected."""

    hull: PlanarLoop
    diameter: float
    cap_center: tuple | None = None  # analytic distance shortcut for cap hulls
    cap_radius: float = 0.0

    def __post_init__(self):
        v = self.hull.vertices
        if self.hull.winding_number((0.0, 0.0)) != 0:
            raise DomainError("hull must not contain the origin")
        if float(np.hypot(v[:, 0], v[:, 1]).min()) > 1.0 + 1e-9:
            raise DomainError("hull must intersect the closed unit disc")

    def contains_points(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        if self.cap_center is not None:
            c = np.asarray(self.cap_center)
            return (np.hypot(*(p - c).T) <= self.cap_radius) & (np.hypot(*p.T) <= 1.0)
        return winding_numbers(self.hull.vertices, p) != 0


def make_cap_hull(angle: float, cap_radius: float, n_arc: int = 256) -> HullSpec:
    """Circular-cap hull B(x0, s) intersected with the closed unit disc.

    x0 = e^{i angle} on the unit circle, 0 < s < 1.
    """
    if not (0.0 < cap_radius < 1.0):
        raise ParameterError("cap radius must be in (0, 1)")
    s = cap_radius
    x0 = np.array([math.cos(angle), math.sin(angle)])
    # intersection of C(x0, s) with C(0, 1); centers are distance 1 apart
    a = (2.0 - s * s) / 2.0
    hh = math.sqrt(max(1.0 - a * a, 0.0))
    perp = np.array([-x0[1], x0[0]])
    p1 = a * x0 + hh * perp
    p2 = a * x0 - hh * perp
    # arc of C(x0, s) inside the disc, from p1 to p2
    a1 = math.atan2(*(p1 - x0)[::-1])
    a2 = math.atan2(*(p2 - x0)[::-1])
    if a2 > a1:
        a2 -= TWO_PI
    th = np.linspace(a1, a2, n_arc)
    cap_arc = x0 + s * np.column_stack([np.cos(th), np.sin(th)])
    # arc of the unit circle inside B(x0, s), from p2 back to p1
    b2 = math.atan2(p2[1], p2[0])
    b1 = math.atan2(p1[1], p1[0])
    if b1 < b2:
        b1 += TWO_PI
    ph = np.linspace(b2, b1, n_arc)[1:-1]
    circ_arc = np.column_stack([np.cos(ph), np.sin(ph)])
    verts = np.concatenate([cap_arc, circ_arc])
    loop = PlanarLoop(vertices=verts, kind="cluster_boundary", meta={})
    diam = float(np.hypot(p1[0] - p2[0], p1[1] - p2[1]))
    return HullSpec(hull=loop, diameter=diam,
                    cap_center=(float(x0[0]), float(x0[1])), cap_radius=s)


# ---------------------------------------------------------------------------
# Walk-on-spheres.


class PolylineDistance:
    """Lower-bound distance to a polyline via a KD tree of densified points."""

    def __init__(self, vertices: np.ndarray, spacing: float):
        a = np.asarray(vertices, float)
        b = np.roll(a, -1, axis=0)
        seg = b - a
        lens = np.hypot(seg[:, 0], seg[:, 1])
        pts = [a]
        for i in np.nonzero(lens > spacing)[0]:
            k = int(math.ceil(lens[i] / spacing))
            t = np.arange(1, k)[:, None] / k
            pts.append(a[i] + t * seg[i])
        self.spacing = spacing
        self.tree = cKDTree(np.concatenate(pts))

    def __call__(self, points: np.ndarray) -> np.ndarray:
        d, _ = self.tree.query(points, k=1)
        return np.maximum(d - 0.5 * self.spacing, 0.0)


def domain_distance_fn(domain: DomainSpec, eps_shell: float):
    """Lower-bound distance-to-boundary callable for a simply connected domain."""
    c = np.asarray(domain.center, float)
    if domain.shape == "disc":
        R = domain.radius
        return lambda p: R - np.hypot(*(p - c).T)
    if domain.shape == "disc_minus_hull":
        R = domain.radius
        hull = domain.hull
        pd = PolylineDistance(hull.vertices, spacing=max(eps_shell, 1e-6))
        return lambda p: np.minimum(R - np.hypot(*(p - c).T), pd(p))
    raise DomainError(f"{domain.shape} is not simply connected")


def hull_domain_distance_fn(hull: HullSpec, eps_shell: float):
    """Distance to the boundary of D \\ K (unit disc minus hull)."""
    if hull.cap_center is not None:
        cc = np.asarray(hull.cap_center)
        s = hull.cap_radius
        return lambda p: np.minimum(1.0 - np.hypot(*p.T), np.hypot(*(p - cc).T) - s)
    pd = PolylineDistance(hull.hull.vertices, spacing=max(eps_shell, 1e-6))
    return lambda p: np.minimum(1.0 - np.hypot(*p.T), pd(p))


def polygon_domain_distance_fn(vertices: np.ndarray, eps_shell: float):
    pd = PolylineDistance(vertices, spacing=max(eps_shell / 2.0, 1e-6))
    return pd


def wos_log_exit(dist_fn, z0, n_walks: int, eps_shell: float,
                 rng: np.random.Generator, max_jumps: int = 10_000) -> np.ndarray:
    """log |B_tau - z0| samples from walk-on-spheres started at z0."""
    z0 = np.asarray(z0, float)
    pos = np.tile(z0, (n_walks, 1))
    active = np.ones(n_walks, dtype=bool)
    d0 = dist_fn(pos[:1])
    if float(d0[0]) < eps_shell:
        raise DomainError("start point within eps_shell of the boundary")
    for _ in range(max_jumps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        d = dist_fn(pos[idx])
        done = d < eps_shell
        active[idx[done]] = False
        idx = idx[~done]
        if idx.size == 0:
            continue
        r = d[~done]
        th = rng.uniform(0.0, TWO_PI, idx.size)
        pos[idx, 0] += r * np.cos(th)
        pos[idx, 1] += r * np.sin(th)
    rel = pos - z0
    return np.log(np.hypot(rel[:, 0], rel[:, 1]))


def conformal_radius_wos(domain: DomainSpec, z0, n_walks: int = 100_000,
                         eps_shell: float = 1e-4, seed: int = 0,
                         stream: int = 0) -> MCEstimate:
    """CR(domain; z0) via the identity log CR = E[log |B_tau - z0|]."""
    dist = domain_distance_fn(domain, eps_shell)
    return _cr_from_dist(dist, z0, n_walks, eps_shell, seed, stream,
                         digest_params={"op": "cr_wos", "shape": domain.shape})


def conformal_radius_wos_custom(dist_fn, z0, n_walks: int, eps_shell: float,
                                seed: int, stream: int = 0) -> MCEstimate:
    return _cr_from_dist(dist_fn, z0, n_walks, eps_shell, seed, stream,
                         digest_params={"op": "cr_wos_custom"})


def _cr_from_dist(dist_fn, z0, n_walks, eps_shell, seed, stream, digest_params):
    rng = stream_rng(int(seed), stream)
    logs = wos_log_exit(dist_fn, z0, n_walks, eps_shell, rng)
    m = float(logs.mean())
    se = float(logs.std(ddof=1) / math.sqrt(n_walks)) if n_walks > 1 else 0.0
    cr = math.exp(m)
    return MCEstimate(value=cr, std_err=cr * se, n_replicates=n_walks,
                      seed=int(seed), params_digest=params_digest(digest_params))


def capacity(hull: HullSpec, n_walks: int = 100_000, eps_shell: float = 1e-4,
             seed: int = 0, stream: int = 0) -> MCEstimate:
    """capa(K) = -log CR(D \\ K) seen from the origin; +inf if 0 in K."""
    if bool(hull.contains_points(np.zeros((1, 2)))[0]):
        return MCEstimate(value=math.inf, std_err=0.0, n_replicates=1,
                          seed=int(seed), params_digest="capa-infinite")
    dist = hull_domain_distance_fn(hull, eps_shell)
    rng = stream_rng(int(seed), stream)
    logs = wos_log_exit(dist, (0.0, 0.0), n_walks, eps_shell, rng)
    vals = -logs
    return mc_estimate(vals, seed=seed,
                       params_digest=params_digest({"op": "capacity"}))


# ---------------------------------------------------------------------------
# Conformal modulus by grid Dirichlet energy.


@dataclass(frozen=True)
class AnnularSpec:
    """An annular domain: circles r_in < r_out, minus filled loops merged
    into one of the two boundary components ("inner" or "outer")."""

    r_in: float
    r_out: float
    obstacles: tuple = ()  # (PlanarLoop, "inner" | "outer")

    @staticmethod
    def annulus(r_in: float, r_out: float = 1.0) -> "AnnularSpec":
        return AnnularSpec(r_in=r_in, r_out=r_out)

    @staticmethod
    def annulus_minus_hull(r: float, hull: HullSpec) -> "AnnularSpec":
        return AnnularSpec(r_in=r, r_out=1.0,
                           obstacles=((hull.hull, "outer"),))

    @staticmethod
    def annulus_minus_loop(r: float, loop: PlanarLoop,
                           attach: str = "outer") -> "AnnularSpec":
        return AnnularSpec(r_in=r, r_out=1.0, obstacles=((loop, attach),))

    @staticmethod
    def disc_minus_island(loop: PlanarLoop, r_out: float = 1.0) -> "AnnularSpec":
        """Disc minus a filled interior loop (the loop is the inner component)."""
        return AnnularSpec(r_in=0.0, r_out=r_out, obstacles=((loop, "inner"),))


@dataclass(frozen=True)
class DirichletGrid:
    h: float
    values: np.ndarray
    inner_mask: np.ndarray
    outer_mask: np.ndarray
    energy: float


def _classify(spec: AnnularSpec, pts: np.ndarray, h: float):
    """(inner, outer) region membership of the sample points."""
    rr = np.hypot(pts[:, 0], pts[:, 1])
    inner = rr <= spec.r_in if spec.r_in > 0 else np.zeros(len(pts), dtype=bool)
    outer = rr >= spec.r_out
    for loop, attach in spec.obstacles:
        inside = winding_numbers(loop.vertices, pts) != 0
        near = points_polyline_distance(pts, loop.vertices) <= 0.75 * h
        member = inside | near
        if attach == "inner":
            inner |= member
        else:
            outer |= member
    return inner, outer


def _solve_laplace(interior: np.ndarray, values: np.ndarray,
                   periodic_cols: bool = False) -> np.ndarray:
    """Solve the 5-point Laplace system on interior cells; values holds the
    Dirichlet data elsewhere and receives the solution."""
    ny, nx = interior.shape
    idx = -np.ones((ny, nx), dtype=np.int64)
    n = int(interior.sum())
    idx[interior] = np.arange(n)
    rows, cols, data = [], [], []
    rhs = np.zeros(n)
    ii, jj = np.nonzero(interior)
    me = idx[ii, jj]
    rows.append(me)
    cols.append(me)
    data.append(np.full(n, 4.0))
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        ni, nj = ii + di, jj + dj
        if periodic_cols:
            nj = nj % nx
            ok = (ni >= 0) & (ni < ny)
        else:
            ok = (ni >= 0) & (ni < ny) & (nj >= 0) & (nj < nx)
        ni, nj = ni[ok], nj[ok]
        src = me[ok]
        nb = idx[ni, nj]
        is_int = nb >= 0
        rows.append(src[is_int])
        cols.append(nb[is_int])
        data.append(np.full(int(is_int.sum()), -1.0))
        np.add.at(rhs, src[~is_int], values[ni[~is_int], nj[~is_int]])
    A = sparse.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n))
    x = _cg_solve(A, rhs)
    out = values.copy()
    out[interior] = x
    return out


def _cg_solve(A, b):
    try:
        import pyamg

        ml = pyamg.ruge_stuben_solver(A.tocsr())
        return ml.solve(b, tol=1e-10, accel="cg")
    except Exception:
        from scipy.sparse.linalg import cg

        x, info = cg(A, b, rtol=1e-10, atol=0.0, maxiter=20_000)
        if info != 0:
            raise RuntimeError(f"CG failed to converge (info={info})")
        return x


def _dirichlet_energy(values: np.ndarray, member: np.ndarray,
                      periodic_cols: bool = False) -> float:
    """Sum of squared differences over neighbor pairs within the member set."""
    v = np.where(member, values, np.nan)
    e = 0.0
    dy = v[1:, :] - v[:-1, :]
    e += float(np.nansum(dy * dy))
    dx = v[:, 1:] - v[:, :-1]
    e += float(np.nansum(dx * dx))
    if periodic_cols:
        dw = v[:, 0] - v[:, -1]
        e += float(np.nansum(dw * dw))
    return e


def modulus_grid(spec: AnnularSpec, h: float, coords: str = "auto") -> float:
    """Conformal modulus via CM = exp(-2 pi / E) with E the Dirichlet energy."""
    if coords == "auto":
        coords = "logpolar" if (spec.r_in > 0 and spec.r_in < 32 * h) else "cartesian"
    if coords == "logpolar":
        if spec.r_in <= 0:
            raise ParameterError("log-polar coordinates need r_in > 0")
        return _modulus_logpolar(spec, h)
    return _modulus_cartesian(spec, h)


def _modulus_cartesian(spec: AnnularSpec, h: float) -> float:
    R = spec.r_out
    n = int(math.ceil(2.0 * (R + 2 * h) / h))
    xs = -(R + 2 * h) + (np.arange(n) + 0.5) * h
    X, Y = np.meshgrid(xs, xs)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    inner, outer = _classify(spec, pts, h)
    inner = inner.reshape(n, n)
    outer = outer.reshape(n, n)
    return _modulus_from_masks(inner, outer, periodic_cols=False)


def _modulus_logpolar(spec: AnnularSpec, h: float) -> float:
    s0, s1 = math.log(spec.r_in), math.log(spec.r_out)
    ns = int(math.ceil((s1 - s0) / h)) + 4
    nt = int(math.ceil(TWO_PI / h))
    ht = TWO_PI / nt  # exact periodic wrap
    sig = s0 - 2 * h + (np.arange(ns) + 0.5) * h
    th = (np.arange(nt) + 0.5) * ht
    S, T = np.meshgrid(th, sig)  # rows = sigma, cols = theta
    rr = np.exp(T)
    pts = np.column_stack([(rr * np.cos(S)).ravel(), (rr * np.sin(S)).ravel()])
    inner, outer = _classify(spec, pts, h * float(np.exp(s1)))
    inner |= (T <= s0).ravel()
    outer |= (T >= s1).ravel()
    inner = inner.reshape(ns, nt)
    outer = outer.reshape(ns, nt)
    return _modulus_from_masks(inner, outer, periodic_cols=True)


def _modulus_from_masks(inner: np.ndarray, outer: np.ndarray,
                        periodic_cols: bool) -> float:
    if not inner.any() or not outer.any():
        raise TopologyError("a boundary component is empty at this resolution")
    interior = ~(inner | outer)
    # keep only the interior component(s) bridging the two boundary sets
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    lab, nlab = ndimage.label(interior, structure=structure)
    if periodic_cols and nlab > 1:
        # stitch components across the theta wrap
        wrap = (lab[:, 0] > 0) & (lab[:, -1] > 0) & (lab[:, 0] != lab[:, -1])
        mapping = np.arange(nlab + 1)
        for a, b in zip(lab[:, 0][wrap], lab[:, -1][wrap]):
            ra, rb = mapping[a], mapping[b]
            mapping[mapping == rb] = ra
        lab = mapping[lab]
    touch_inner = set(np.unique(lab[_dilate(inner, periodic_cols)])) - {0}
    touch_outer = set(np.unique(lab[_dilate(outer, periodic_cols)])) - {0}
    bridge = touch_inner & touch_outer
    if not bridge:
        raise TopologyError("no interior path between the boundary components")
    interior = np.isin(lab, sorted(bridge))
    if _boundary_component_count(inner, outer, interior, periodic_cols) != 2:
        raise TopologyError("domain boundary does not have exactly 2 components")
    values = np.zeros(inner.shape)
    values[outer] = 1.0
    values = _solve_laplace(interior, values, periodic_cols=periodic_cols)
    member = interior | inner | outer
    energy = _dirichlet_energy(values, member, periodic_cols=periodic_cols)
    if energy <= 0:
        raise TopologyError("zero Dirichlet energy (degenerate domain)")
    return math.exp(-TWO_PI / energy)


def _dilate(mask: np.ndarray, periodic_cols: bool) -> np.ndarray:
    out = ndimage.binary_dilation(mask, structure=np.array(
        [[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool))
    if periodic_cols:
        out[:, 0] |= mask[:, -1]
        out[:, -1] |= mask[:, 0]
    return out


def _boundary_component_count(inner, outer, interior, periodic_cols) -> int:
    """Boundary components adjacent to the retained interior."""
    count = 0
    for region in (inner, outer):
        if not region.any():
            continue
        lab, n = ndimage.label(region, structure=np.ones((3, 3)))
        labels = set(np.unique(lab)) - {0}
        if periodic_cols:
            pairs = {frozenset((int(a), int(b)))
                     for a, b in zip(lab[:, 0], lab[:, -1])
                     if a > 0 and b > 0 and a != b}
            # union-find over wrap-merged labels
            parent = {l: l for l in labels}

            def find(x):
                while parent[x] != x:
                    parent[x] = parent[parent[x]]
                    x = parent[x]
                return x

            for pair in pairs:
                a, b = tuple(pair)
                parent[find(a)] = find(b)
            labels = {find(l) for l in labels}
        count += len(labels)
    return count


def cr_modulus_limit_check(hull: HullSpec, r_sequence,
                           h: float = 1.0 / 256.0,
                           n_walks: int = 200_000, eps_shell: float = 1e-4,
                           seed: int = 0):
    """Ratio table CM(A_r \\ K) / CM(A_r) against 1/CR(D \\ K).

    Returns a list of dict rows: r, cm_ratio, inv_cr, inv_cr_stderr.
    """
    capa = capacity(hull, n_walks=n_walks, eps_shell=eps_shell, seed=seed)
    inv_cr = math.exp(capa.value)
    inv_cr_se = inv_cr * capa.std_err
    rows = []
    for r in r_sequence:
        spec = AnnularSpec.annulus_minus_hull(r, hull)
        cm = modulus_grid(spec, h, coords="logpolar")
        rows.append({"r": float(r), "cm_ratio": cm / r, "inv_cr": inv_cr,
                     "inv_cr_stderr": inv_cr_se})
    return rows
