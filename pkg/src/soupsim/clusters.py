"""Loop-soup clusters: adjacency graph, outer boundaries, annulus disconnection.

Adjacency is the tol-intersection relation (exact min segment-pair distance
<= tol); candidate pairs come from a uniform spatial hash over inflated loop
bounding boxes and components from union-find with path compression.
Boundaries are traced from an even-odd raster fill of the member loops
(union of masks, 1-cell morphological closing, exterior flood fill,
marching-squares contour of the exterior interface).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage
from skimage.measure import find_contours

from .model import (
    ParameterError,
    PlanarLoop,
    ResolutionError,
    winding_number,
)

MAX_RASTER_CELLS = 10**8
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class Cluster:
    loop_ids: frozenset
    outer: PlanarLoop | None
    bbox: np.ndarray


@dataclass(frozen=True)
class ClusterSet:
    clusters: tuple
    outermost_ids: tuple
    raster_res: float


class UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)

    def find(self, i: int) -> int:
        p = self.parent
        root = i
        while p[root] != root:
            root = p[root]
        while p[i] != root:  # path compression
            p[i], i = root, p[i]
        return root

    def union(self, i: int, j: int):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[rj] = ri

    def labels(self) -> np.ndarray:
        return np.array([self.find(i) for i in range(len(self.parent))])


def _polyline_pair_min_dist(va: np.ndarray, vb: np.ndarray) -> np.ndarray:
    """Min distance between closed polylines, batched: va (P,na,2), vb (P,nb,2)."""
    a0 = va
    a1 = np.roll(va, -1, axis=1)
    b0 = vb
    b1 = np.roll(vb, -1, axis=1)
    P, na, _ = va.shape
    nb = vb.shape[1]
    A0 = a0[:, :, None, :]
    A1 = a1[:, :, None, :]
    B0 = b0[:, None, :, :]
    B1 = b1[:, None, :, :]
    d1 = A1 - A0
    d2 = B1 - B0

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    s1 = cross(d1, B0 - A0)
    s2 = cross(d1, B1 - A0)
    s3 = cross(d2, A0 - B0)
    s4 = cross(d2, A1 - B0)
    hits = (s1 * s2 < 0) & (s3 * s4 < 0)

    def pt_seg(p, s0, sd):
        den = (sd * sd).sum(axis=-1)
        den = np.where(den == 0, 1.0, den)
        t = np.clip(((p - s0) * sd).sum(axis=-1) / den, 0.0, 1.0)
        proj = s0 + t[..., None] * sd
        return np.linalg.norm(p - proj, axis=-1)

    d = np.minimum.reduce([
        pt_seg(A0, B0, d2), pt_seg(A1, B0, d2),
        pt_seg(B0, A0, d1), pt_seg(B1, A0, d1),
    ])
    d = np.where(hits, 0.0, d)
    return d.reshape(P, na * nb).min(axis=1)


def _segment_sets_min_dist(va: np.ndarray, sel_a: np.ndarray,
                           vb: np.ndarray, sel_b: np.ndarray) -> float:
    """Exact min distance between chosen segments of two closed polylines."""
    from .model import segments_intersect_distance

    a0 = va[sel_a]
    a1 = va[(sel_a + 1) % va.shape[0]]
    b0 = vb[sel_b]
    b1 = vb[(sel_b + 1) % vb.shape[0]]
    na, nb = a0.shape[0], b0.shape[0]
    ia, ib = np.repeat(np.arange(na), nb), np.tile(np.arange(nb), na)
    d = segments_intersect_distance(a0[ia], a1[ia], b0[ib], b1[ib])
    return float(d.min())


def _candidate_pairs(boxes: np.ndarray, tol: float) -> np.ndarray:
    """Loop index pairs whose tol-inflated bounding boxes overlap."""
    n = boxes.shape[0]
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    lo = boxes[:, :2] - tol
    hi = boxes[:, 2:] + tol
    ext = hi - lo
    cell = max(float(np.percentile(ext.max(axis=1), 90)), 1e-12)
    origin = lo.min(axis=0)
    ij0 = np.floor((lo - origin) / cell).astype(np.int64)
    ij1 = np.floor((hi - origin) / cell).astype(np.int64)
    span = (ij1 - ij0 + 1)
    reps = span[:, 0] * span[:, 1]
    owner = np.repeat(np.arange(n, dtype=np.int64), reps)
    # enumerate covered cells per loop
    cells = np.empty(owner.size, dtype=np.int64)
    ncols = int(ij1[:, 1].max()) + 2
    pos = 0
    for i in range(n):
        ci = np.arange(ij0[i, 0], ij1[i, 0] + 1)
        cj = np.arange(ij0[i, 1], ij1[i, 1] + 1)
        block = (ci[:, None] * ncols + cj[None, :]).ravel()
        cells[pos : pos + block.size] = block
        pos += block.size
    order = np.argsort(cells, kind="stable")
    cells, owner = cells[order], owner[order]
    _, starts = np.unique(cells, return_index=True)
    bounds = np.append(starts, owner.size)
    chunks = []
    for s, e in zip(bounds[:-1], bounds[1:]):
        if e - s < 2:
            continue
        grp = np.unique(owner[s:e])
        if grp.size < 2:
            continue
        i, j = np.triu_indices(grp.size, k=1)
        chunks.append(np.stack([grp[i], grp[j]], axis=1))
    if not chunks:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.unique(np.concatenate(chunks), axis=0)
    # exact bbox-overlap filter
    i, j = pairs.T
    ok = ((lo[i] <= hi[j]).all(axis=1)) & ((lo[j] <= hi[i]).all(axis=1))
    return pairs[ok]


def build_clusters(soup, tol: float | None = None,
                   raster_res: float | None = None) -> ClusterSet:
    """Partition soup loops into tol-intersection clusters (boundaries untraced)."""
    if tol is None:
        tol = soup.cutoffs.d_cut / 100.0
    if tol <= 0:
        raise ParameterError("tol must be > 0")
    if raster_res is None:
        raster_res = soup.cutoffs.d_cut / 4.0
    loops = soup.loops
    if not loops:
        return ClusterSet(clusters=(), outermost_ids=(), raster_res=raster_res)

    n = len(loops)
    boxes = np.array([l.bbox() for l in loops])
    sizes = np.array([l.n_vertices for l in loops])
    pairs = _candidate_pairs(boxes, tol)
    uf = UnionFind(n)
    if pairs.size:
        work = sizes[pairs[:, 0]] * sizes[pairs[:, 1]]
        small = work <= 4096
        # small pairs: exact distances batched by vertex-count signature
        sp = pairs[small]
        if sp.size:
            sig = np.stack([sizes[sp[:, 0]], sizes[sp[:, 1]]], axis=1)
            order = np.lexsort((sig[:, 1], sig[:, 0]))
            sp, sig = sp[order], sig[order]
            starts = np.flatnonzero(np.any(np.diff(sig, axis=0) != 0, axis=1)) + 1
            bounds = np.concatenate([[0], starts, [sp.shape[0]]])
            for s, e in zip(bounds[:-1], bounds[1:]):
                pi, pj = sp[s:e, 0], sp[s:e, 1]
                va = np.stack([loops[x].vertices for x in pi])
                vb = np.stack([loops[x].vertices for x in pj])
                d = _polyline_pair_min_dist(va, vb)
                for x, y in zip(pi[d <= tol], pj[d <= tol]):
                    uf.union(int(x), int(y))
        # large pairs: vertex-distance bounds via KD trees, exact on shortlist
        trees: dict[int, object] = {}
        from scipy.spatial import cKDTree

        def tree_of(i):
            t = trees.get(i)
            if t is None:
                t = trees[i] = cKDTree(loops[i].vertices)
            return t

        seg_len_max = np.array([
            float(np.hypot(*(np.roll(l.vertices, -1, axis=0) - l.vertices).T).max())
            for l in loops])
        for x, y in pairs[~small]:
            x, y = int(x), int(y)
            if uf.find(x) == uf.find(y):
                continue
            slack = seg_len_max[x] + seg_len_max[y]
            dv, _ = tree_of(x).query(loops[y].vertices, k=1)
            dmin = float(dv.min())
            if dmin <= tol:
                uf.union(x, y)
                continue
            if dmin - slack > tol:
                continue
            # exact on segments near the closest approach only
            near_y = np.flatnonzero(dv <= dmin + slack + tol)
            sel_y = np.unique(np.concatenate([near_y, (near_y - 1) % sizes[y]]))
            du, _ = tree_of(y).query(loops[x].vertices, k=1)
            near_x = np.flatnonzero(du <= dmin + slack + tol)
            sel_x = np.unique(np.concatenate([near_x, (near_x - 1) % sizes[x]]))
            d = _segment_sets_min_dist(loops[x].vertices, sel_x,
                                       loops[y].vertices, sel_y)
            if d <= tol:
                uf.union(x, y)

    labels = uf.labels()
    clusters = []
    for root in np.unique(labels):
        ids = np.nonzero(labels == root)[0]
        b = boxes[ids]
        bbox = np.array([b[:, 0].min(), b[:, 1].min(), b[:, 2].max(), b[:, 3].max()])
        clusters.append(Cluster(loop_ids=frozenset(int(i) for i in ids),
                                outer=None, bbox=bbox))
    clusters.sort(key=lambda c: min(c.loop_ids))
    return ClusterSet(clusters=tuple(clusters), outermost_ids=(),
                      raster_res=raster_res)


# ---------------------------------------------------------------------------
# Raster fill and boundary tracing.


def _rasterize(loops, x0: float, y0: float, nx: int, ny: int, res: float) -> np.ndarray:
    """Union of even-odd fills plus the curves themselves, as a boolean grid."""
    img = Image.new("1", (nx, ny), 0)
    draw = ImageDraw.Draw(img)
    for loop in loops:
        px = (loop.vertices[:, 0] - x0) / res
        py = (loop.vertices[:, 1] - y0) / res
        pts = list(zip(px.tolist(), py.tolist()))
        draw.polygon(pts, fill=1, outline=1)
        draw.line(pts + pts[:1], fill=1, width=1)
    return np.asarray(img, dtype=bool)


def _filled_mask(loops, raster_res: float, pad_cells: int = 3):
    """(filled_mask, x0, y0, res): closed and hole-filled union of the loops."""
    boxes = np.array([l.bbox() for l in loops])
    x0b, y0b = boxes[:, 0].min(), boxes[:, 1].min()
    x1b, y1b = boxes[:, 2].max(), boxes[:, 3].max()
    pad = pad_cells * raster_res
    x0, y0 = x0b - pad, y0b - pad
    nx = int(math.ceil((x1b + pad - x0) / raster_res)) + 1
    ny = int(math.ceil((y1b + pad - y0) / raster_res)) + 1
    if nx * ny > MAX_RASTER_CELLS:
        raise ResolutionError(
            f"raster of {nx}x{ny} cells exceeds {MAX_RASTER_CELLS}; "
            "use a coarser raster_res")
    mask = _rasterize(loops, x0, y0, nx, ny, raster_res)
    mask = ndimage.binary_closing(mask, structure=np.ones((3, 3)))
    filled = ndimage.binary_fill_holes(mask, structure=_CROSS)
    return filled, x0, y0


def fill_and_trace(loops, raster_res: float) -> PlanarLoop:
    """Outer boundary of the union of the loops, as a positively oriented contour."""
    boxes = np.array([l.bbox() for l in loops])
    diag = math.hypot(boxes[:, 2].max() - boxes[:, 0].min(),
                      boxes[:, 3].max() - boxes[:, 1].min())
    res = min(raster_res, diag / 16.0)  # keep small clusters resolved
    filled, x0, y0 = _filled_mask(loops, res)
    return _trace_outer(filled, x0, y0, res)


def _trace_outer(filled: np.ndarray, x0: float, y0: float, res: float) -> PlanarLoop:
    contours = find_contours(filled.astype(np.uint8), 0.5)
    if not contours:
        raise ParameterError("no contour found (empty raster)")
    outer = max(contours, key=lambda c: c.shape[0])
    # find_contours yields (row=y, col=x) index coordinates at cell centers
    verts = np.column_stack([x0 + outer[:, 1] * res, y0 + outer[:, 0] * res])
    if np.allclose(verts[0], verts[-1]):
        verts = verts[:-1]
    d = np.hypot(*(np.roll(verts, -1, axis=0) - verts).T)
    verts = verts[d > 1e-12]
    if _signed_area(verts) < 0:
        verts = verts[::-1].copy()
    return PlanarLoop(vertices=verts, kind="cluster_boundary", meta={})


def _signed_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def trace_cluster_boundaries(cluster_set: ClusterSet, soup) -> ClusterSet:
    """Fill in the outer boundary of every cluster."""
    traced = []
    for cl in cluster_set.clusters:
        loops = [soup.loops[i] for i in sorted(cl.loop_ids)]
        traced.append(replace(cl, outer=fill_and_trace(loops, cluster_set.raster_res)))
    return ClusterSet(clusters=tuple(traced), outermost_ids=cluster_set.outermost_ids,
                      raster_res=cluster_set.raster_res)


def cluster_contains_point(cluster: Cluster, soup, point,
                           raster_res: float) -> bool:
    """Whether a point lies in the cluster's filled region.

    Ties where the point falls on the boundary cell (within raster
    tolerance) count as contained.
    """
    p = np.asarray(point, float)
    if not (cluster.bbox[0] <= p[0] <= cluster.bbox[2]
            and cluster.bbox[1] <= p[1] <= cluster.bbox[3]):
        return False
    if cluster.outer is not None:
        return winding_number(cluster.outer.vertices, p) != 0 \
            or cluster.outer.min_distance_to(p) <= raster_res
    loops = [soup.loops[i] for i in sorted(cluster.loop_ids)]
    diag = math.hypot(cluster.bbox[2] - cluster.bbox[0],
                      cluster.bbox[3] - cluster.bbox[1])
    res = min(raster_res, diag / 16.0)
    filled, x0, y0 = _filled_mask(loops, res)
    j = int(round((p[0] - x0) / res))
    i = int(round((p[1] - y0) / res))
    if 0 <= i < filled.shape[0] and 0 <= j < filled.shape[1]:
        return bool(filled[i, j])
    return False


def outermost_filter(cluster_set: ClusterSet, soup) -> ClusterSet:
    """Keep clusters whose representative point lies in no other cluster's fill."""
    clusters = cluster_set.clusters
    reps = [soup.loops[min(cl.loop_ids)].vertices[0] for cl in clusters]
    outermost = []
    for k, cl in enumerate(clusters):
        contained = any(
            j != k and cluster_contains_point(clusters[j], soup, reps[k],
                                              cluster_set.raster_res)
            for j in range(len(clusters)))
        if not contained:
            outermost.append(k)
    return ClusterSet(clusters=clusters, outermost_ids=tuple(outermost),
                      raster_res=cluster_set.raster_res)


# ---------------------------------------------------------------------------
# Annulus disconnection.


def loops_disconnect_annulus(loops, r_in: float, r_out: float,
                             raster_res: float) -> bool:
    """True iff the rasterized union of loops blocks every inner-to-outer path.

    The verdict depends only on the union of the filled loops, so it can be
    evaluated on the raw soup without building the cluster graph.
    """
    if not loops:
        return False
    n = int(math.ceil(2.0 * r_out / raster_res)) + 3
    if n * n > MAX_RASTER_CELLS:
        raise ResolutionError("annulus raster too fine; use a coarser raster_res")
    x0 = y0 = -r_out - 1.5 * raster_res
    blocked = _rasterize(loops, x0, y0, n, n, raster_res)
    blocked = ndimage.binary_closing(blocked, structure=np.ones((3, 3)))
    jj, ii = np.meshgrid(np.arange(n), np.arange(n))
    rr = np.hypot(x0 + jj * raster_res, y0 + ii * raster_res)
    annulus = (rr > r_in) & (rr < r_out)
    free = annulus & ~blocked
    lab, _ = ndimage.label(free, structure=_CROSS)
    band = 2.0 * raster_res
    inner_labels = np.unique(lab[free & (rr < r_in + band)])
    outer_labels = np.unique(lab[free & (rr > r_out - band)])
    common = np.intersect1d(inner_labels[inner_labels > 0],
                            outer_labels[outer_labels > 0])
    return common.size == 0


def disconnects_annulus(cluster_set: ClusterSet, soup, r_in: float,
                        r_out: float) -> bool:
    """Flood-fill disconnection verdict for a clustered soup."""
    loops = [soup.loops[i] for cl in cluster_set.clusters for i in cl.loop_ids]
    return loops_disconnect_annulus(loops, r_in, r_out, cluster_set.raster_res)


def disconnects_annulus_by_winding(cluster_set: ClusterSet,
                                   origin=(0.0, 0.0)) -> bool:
    """Cross-check: some outermost boundary winds around the origin."""
    for k in cluster_set.outermost_ids:
        outer = cluster_set.clusters[k].outer
        if outer is not None and winding_number(outer.vertices, origin) != 0:
            return True
    return False
