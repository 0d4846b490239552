"""Cutoff Brownian loop soup sampler and loop-measure mass estimates.

Rooted loops are drawn from the intensity c * dz^2 * dt/t * mu_t(z,z) with
mu_t(z,z) carrying total mass 1/(2 pi t); the root is forgotten after
sampling.  The time-length density is therefore proportional to 1/t^2 on
[t_min, t_max], sampled by inverse CDF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate

from .model import (
    DomainError,
    DomainSpec,
    MCEstimate,
    ParameterError,
    PlanarLoop,
    SoupCutoffs,
    UnsupportedDomainError,
    mc_estimate,
    params_digest,
    polyline_diameter,
    stream_rng,
)

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class MassWindow:
    """Total rooted candidate mass over the bounding box under time cutoffs."""

    area_box: np.ndarray
    total_rooted_mass: float

    def __post_init__(self):
        if not (self.total_rooted_mass > 0 and math.isfinite(self.total_rooted_mass)):
            raise ParameterError("total_rooted_mass must be positive and finite")


def mass_window(domain: DomainSpec, c: float, cutoffs: SoupCutoffs) -> MassWindow:
    box = domain.area_box()
    area = (box[2] - box[0]) * (box[3] - box[1])
    mass = c * area * (1.0 / TWO_PI) * (1.0 / cutoffs.t_min - 1.0 / cutoffs.t_max)
    return MassWindow(area_box=box, total_rooted_mass=mass)


@dataclass(frozen=True)
class LoopSoup:
    loops: tuple
    domain: DomainSpec
    intensity_c: float
    cutoffs: SoupCutoffs
    seed: int

    def __len__(self):
        return len(self.loops)


def sample_bridge_loop(root, t_len: float, n_steps: int, seed_or_rng) -> PlanarLoop:
    """One planar Brownian bridge loop of time length t_len rooted at root."""
    if n_steps < 8:
        raise ParameterError("n_steps must be >= 8")
    if t_len <= 0:
        raise ParameterError("t_len must be > 0")
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else stream_rng(int(seed_or_rng))
    root = np.asarray(root, dtype=float)
    verts = _bridge_batch(root[None, :], np.array([t_len]), n_steps, rng)[0]
    return PlanarLoop(vertices=verts, kind="brownian", meta={"time_length": float(t_len)})


def _bridge_batch(roots: np.ndarray, t: np.ndarray, n: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Bridges for m loops sharing a step count: (m, n, 2) vertex arrays."""
    m = roots.shape[0]
    sd = np.sqrt(t / n)[:, None, None]
    inc = rng.standard_normal((m, n, 2)) * sd
    inc -= inc.mean(axis=1, keepdims=True)  # condition the walk to close
    verts = np.empty((m, n, 2))
    verts[:, 0, :] = roots
    verts[:, 1:, :] = roots[:, None, :] + np.cumsum(inc[:, :-1, :], axis=1)
    return verts


def _sample_time_lengths(u: np.ndarray, cutoffs: SoupCutoffs) -> np.ndarray:
    """Inverse CDF of the normalized 1/t^2 density on [t_min, t_max]."""
    a, b = 1.0 / cutoffs.t_min, 1.0 / cutoffs.t_max
    return 1.0 / (a - u * (a - b))


def _loop_steps(t: np.ndarray, cutoffs: SoupCutoffs) -> np.ndarray:
    return np.maximum(8, np.ceil(cutoffs.n_steps_per_unit_time * t)).astype(np.int64)


def _batch_inside_domain(verts: np.ndarray, domain: DomainSpec) -> np.ndarray:
    """Exact containment per loop for disc/annulus batches (m, n, 2)."""
    c = np.asarray(domain.center, float)
    rel = verts - c
    rr = np.hypot(rel[..., 0], rel[..., 1])
    if domain.shape == "disc":
        return rr.max(axis=1) < domain.radius
    if domain.shape == "annulus":
        ok_out = rr.max(axis=1) < domain.r_out  # segment max radius is at a vertex
        # segment min radius needs point-to-segment distance from the center
        a = rel
        b = np.roll(rel, -1, axis=1)
        ab = b - a
        den = (ab * ab).sum(axis=2)
        den = np.where(den == 0, 1.0, den)
        tt = np.clip(-(a * ab).sum(axis=2) / den, 0.0, 1.0)
        proj = a + tt[..., None] * ab
        dmin = np.hypot(proj[..., 0], proj[..., 1]).min(axis=1)
        return ok_out & (dmin > domain.r_in)
    raise UnsupportedDomainError(f"soup containment unsupported for {domain.shape}")


def _batch_diameters(verts: np.ndarray) -> np.ndarray:
    """Exact max pairwise vertex distance per loop in a (m, n, 2) batch."""
    m, n, _ = verts.shape
    if n <= 64:
        d2 = ((verts[:, :, None, :] - verts[:, None, :, :]) ** 2).sum(axis=3)
        return np.sqrt(d2.reshape(m, -1).max(axis=1))
    return np.array([polyline_diameter(v) for v in verts])


def sample_soup(domain: DomainSpec, c: float, cutoffs: SoupCutoffs, seed,
                stream: int = 0) -> LoopSoup:
    """Poisson soup of Brownian loops retained inside the domain."""
    if c <= 0:
        raise ParameterError("intensity c must be > 0")
    if not domain.bounded:
        raise UnsupportedDomainError("soup sampling needs a bounded domain")
    rng = stream_rng(int(seed), stream)
    mw = mass_window(domain, c, cutoffs)
    n_cand = int(rng.poisson(mw.total_rooted_mass))
    box = mw.area_box
    roots = np.column_stack([
        rng.uniform(box[0], box[2], n_cand),
        rng.uniform(box[1], box[3], n_cand),
    ])
    t = _sample_time_lengths(rng.uniform(0.0, 1.0, n_cand), cutoffs)
    # a loop passes through its root, so roots outside the domain never survive
    keep = domain.contains_points(roots, tol=0.0)
    roots, t = roots[keep], t[keep]
    steps = _loop_steps(t, cutoffs)

    loops = []
    for n in np.unique(steps):
        sel = steps == n
        verts = _bridge_batch(roots[sel], t[sel], int(n), rng)
        ok = _batch_inside_domain(verts, domain)
        if not ok.any():
            continue
        verts, tv = verts[ok], t[sel][ok]
        if cutoffs.d_cut > 0:
            big = _batch_diameters(verts) >= cutoffs.d_cut
            verts, tv = verts[big], tv[big]
        for v, tl in zip(verts, tv):
            loops.append(PlanarLoop._unchecked(v, "brownian", {"time_length": float(tl)}))
    return LoopSoup(loops=tuple(loops), domain=domain, intensity_c=c,
                    cutoffs=cutoffs, seed=int(seed))


# ---------------------------------------------------------------------------
# Loop-measure masses between circles.


def rho_approx(u: float) -> float:
    """Leading-order loop-hitting kernel 1/(2 log u); error is O(1/(u log u))."""
    if u < 2:
        raise DomainError("rho_approx is only valid for u >= 2")
    return 1.0 / (2.0 * math.log(u))


def lambda_circles(r: float, R: float) -> float:
    """Mass of loops outside the r-disc hitting both C_1 and C_R.

    Adaptive quadrature of 2 * int_r^1 rho(R/s)/s ds; with the leading-order
    rho this equals log(log(R/r)/log(R)) exactly, used as a cross-check.
    """
    if not (0.0 < r < 1.0):
        raise DomainError("need 0 < r < 1")
    if R < 2.0:
        raise DomainError("need R >= 2")
    val, _ = integrate.quad(lambda s: 2.0 * rho_approx(R / s) / s, r, 1.0,
                            epsrel=1e-8, limit=200)
    return val


def circle_hit_flags(loops: Sequence[PlanarLoop], center, radius: float) -> np.ndarray:
    """Whether each closed polyline intersects the circle C(center, radius)."""
    c = np.asarray(center, float)
    out = np.empty(len(loops), dtype=bool)
    for i, loop in enumerate(loops):
        v = loop.vertices - c
        rr = np.hypot(v[:, 0], v[:, 1])
        rmax = rr.max()
        if rmax < radius:
            out[i] = False
            continue
        rmin = loop.min_distance_to(c)
        out[i] = rmin <= radius <= rmax
    return out


def estimate_lambda_mc(domain: DomainSpec, v1, v2, c: float, cutoffs: SoupCutoffs,
                       n_replicates: int, seed) -> MCEstimate:
    """MC estimate of the mass of loops hitting both circles, via E[#hits] = c*mass.

    v1, v2 are (center, radius) circles inside the domain.
    """
    (c1, r1), (c2, r2) = v1, v2
    c1, c2 = np.asarray(c1, float), np.asarray(c2, float)
    gap = float(np.hypot(*(c1 - c2)))
    if gap == 0.0 and r1 == r2:
        raise ParameterError("V1 and V2 must be distinct circles")
    if abs(r1 - r2) <= gap <= r1 + r2:
        raise ParameterError("V1 and V2 must be disjoint circles")
    counts = np.empty(n_replicates)
    for i in range(n_replicates):
        soup = sample_soup(domain, c, cutoffs, seed, stream=i)
        hits = circle_hit_flags(soup.loops, c1, r1) & circle_hit_flags(soup.loops, c2, r2)
        counts[i] = hits.sum() / c
    digest = params_digest({"op": "lambda_mc", "c": c, "v1": [c1.tolist(), r1],
                            "v2": [c2.tolist(), r2], "n": n_replicates})
    return mc_estimate(counts, seed=seed, params_digest=digest)
