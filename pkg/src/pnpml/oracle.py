"""Independent reference solvers: exact characteristics for pure absorption
and a discrete-ordinates source iteration with vacuum or reflective
boundaries.

Rays are traced through the triangulation once per ordinate set; absorption is
integrated exactly per crossed triangle (piecewise-constant data) and smooth
external sources by per-segment Gauss quadrature.  The traced geometry is
frozen into sparse sweep matrices, so each source-iteration step reduces to a
handful of matrix-vector products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.special import roots_legendre

from pnpml.mesh import INTERIOR, Mesh2D
from pnpml.pml import TransportCoefficients, reflect_factor

__all__ = [
    "VACUUM",
    "REFLECT",
    "OrdinateSet",
    "SampledField",
    "SweepOperator",
    "build_ordinates",
    "characteristics_solve",
    "source_iteration",
    "consistency_error",
    "ordinate_mean",
    "boundary_trace_norm",
]

_SEG_GAUSS = roots_legendre(4)
VACUUM = "vacuum"
REFLECT = "reflect"


@dataclass(frozen=True)
class OrdinateSet:
    """Antipodally closed direction set with quadrature weights."""

    directions: np.ndarray  # (nd, 3)
    weights: np.ndarray     # (nd,)
    opposite: np.ndarray    # (nd,) index of -s

    @property
    def n_dirs(self) -> int:
        return self.directions.shape[0]


def build_ordinates(n_polar: int, n_azimuth: int) -> OrdinateSet:
    """Gauss x uniform product set; the azimuth count must be even so that
    every direction has its antipode in the set."""
    if n_azimuth % 2 != 0:
        raise ValueError("n_azimuth must be even for antipodal closure")
    ct, wt = roots_legendre(n_polar)
    st = np.sqrt(1.0 - ct**2)
    phi = 2.0 * np.pi * np.arange(n_azimuth) / n_azimuth
    dirs = np.empty((n_polar * n_azimuth, 3))
    dirs[:, 0] = np.outer(st, np.cos(phi)).ravel()
    dirs[:, 1] = np.outer(st, np.sin(phi)).ravel()
    dirs[:, 2] = np.outer(ct, np.ones(n_azimuth)).ravel()
    weights = np.outer(wt * 2 * np.pi / n_azimuth, np.ones(n_azimuth)).ravel()

    ii, jj = np.meshgrid(np.arange(n_polar), np.arange(n_azimuth), indexing="ij")
    opp = ((n_polar - 1 - ii) * n_azimuth + (jj + n_azimuth // 2) % n_azimuth).ravel()
    ords = OrdinateSet(directions=dirs, weights=weights, opposite=opp)
    assert np.allclose(dirs[opp], -dirs, atol=1e-13)
    return ords


@dataclass
class SampledField:
    """Discrete-ordinates samples: triangle centroids and boundary-edge
    midpoints, one column per ordinate."""

    tri_values: np.ndarray       # (nt, nd)
    boundary_values: np.ndarray  # (nbe, nd)
    ordinates: OrdinateSet
    mesh: Mesh2D


def _ray_triangle_intervals(mesh: Mesh2D, starts: np.ndarray, u: np.ndarray,
                            chunk: int = 128):
    """Parameter intervals [lo, hi] where each backward ray start - t*u lies
    inside each triangle.  Yields (ray slice, lo, hi) per chunk."""
    a, b, c = mesh.corner_coords()
    # half-plane data: edge (p, q) of a CCW triangle keeps the interior where
    # cross(q - p, x - p) >= 0
    ps = np.stack([a, b, c])          # (3, nt, 2)
    qs = np.stack([b, c, a])
    e = qs - ps                       # (3, nt, 2)
    cu = e[..., 0] * (-u[1]) - e[..., 1] * (-u[0])   # cross(e, -u), (3, nt)

    big = 1e30
    n = starts.shape[0]
    for s0 in range(0, n, chunk):
        r = starts[s0:s0 + chunk]     # (m, 2)
        d = r[None, None, :, :] - ps[:, :, None, :]  # (3, nt, m, 2)
        c0 = e[..., None, 0] * d[..., 1] - e[..., None, 1] * d[..., 0]  # (3, nt, m)
        # inside condition: c0 + t * cu >= 0
        cut = cu[..., None]
        lo = np.zeros_like(c0)
        hi = np.full_like(c0, big)
        pos = cut > 1e-14
        neg = cut < -1e-14
        par = ~(pos | neg)
        with np.errstate(divide="ignore", invalid="ignore"):
            bound = -c0 / np.where(par, 1.0, cut)
        lo = np.where(pos, np.maximum(lo, bound), lo)
        hi = np.where(neg, np.minimum(hi, bound), hi)
        # parallel edge with the ray strictly outside: empty interval
        hi = np.where(par & (c0 < -1e-12), -big, hi)
        lo_all = lo.max(axis=0).T     # (m, nt)
        hi_all = hi.min(axis=0).T
        yield slice(s0, s0 + r.shape[0]), lo_all, hi_all


def _segments_for_ray(lo: np.ndarray, hi: np.ndarray, tol: float):
    """Partition of the crossed part of a ray into (triangle, t0, t1) pieces,
    resolved at segment midpoints so overlap/gap roundoff cannot double-count."""
    cand = np.flatnonzero(hi > lo + tol)
    if cand.size == 0:
        return [], 0.0
    pts = np.unique(np.concatenate([lo[cand], hi[cand]]))
    pts = pts[pts >= -tol]
    segs = []
    for t0, t1 in zip(pts[:-1], pts[1:]):
        if t1 - t0 <= tol:
            continue
        mid = 0.5 * (t0 + t1)
        inside = cand[(lo[cand] <= mid) & (mid <= hi[cand])]
        if inside.size:
            segs.append((int(inside[0]), float(max(t0, 0.0)), float(t1)))
    t_exit = segs[-1][2] if segs else 0.0
    return segs, t_exit


class SweepOperator:
    """Frozen transport sweeps for a fixed mesh, absorption, and ordinates.

    For ordinate d the sampled values obey
        u_d = A_d @ src + q_d + f_d * h[exit_edge_d, d]
    where src is any per-triangle isotropic source density added on top of the
    (optional) analytic external source integrated at build time.
    """

    def __init__(self, mesh: Mesh2D, mu_tri: np.ndarray, ordinates: OrdinateSet,
                 q_analytic=None, q_mask: np.ndarray | None = None):
        self.mesh = mesh
        self.ordinates = ordinates
        self.mu = np.asarray(mu_tri, dtype=float)
        nt = mesh.n_triangles
        be = mesh.boundary_edges
        self.edge_mid = 0.5 * (mesh.vertices[be[:, 0]] + mesh.vertices[be[:, 1]])
        nbe = be.shape[0]
        self.n_rays = nt + nbe
        starts = np.vstack([mesh.centroids, self.edge_mid])
        tol = 1e-12 * max(mesh.vertices.max() - mesh.vertices.min(), 1.0)

        owner_edges = {}
        for b_idx, t_idx in enumerate(self._boundary_owners()):
            owner_edges.setdefault(int(t_idx), []).append(b_idx)

        if q_mask is None:
            q_mask = np.ones(nt, dtype=bool)
        gx, gw = _SEG_GAUSS

        self._mats, self._qvec, self._exit_edge, self._exit_fac = [], [], [], []
        for d in range(ordinates.n_dirs):
            s = ordinates.directions[d]
            p = np.hypot(s[0], s[1])
            if p <= 1e-14:
                raise ValueError("ordinate parallel to the invariant axis")
            u = np.array([s[0], s[1]]) / p
            beta = 1.0 / p

            rows, cols, vals = [], [], []
            qvec = np.zeros(self.n_rays)
            exit_edge = np.zeros(self.n_rays, dtype=np.int64)
            exit_fac = np.zeros(self.n_rays)
            for chunk_slice, lo_all, hi_all in _ray_triangle_intervals(mesh, starts, u):
                for k in range(lo_all.shape[0]):
                    ray = chunk_slice.start + k
                    segs, t_exit = _segments_for_ray(lo_all[k], hi_all[k], tol)
                    if not segs:
                        # inflow boundary ray: carries its own inflow value
                        exit_edge[ray] = ray - nt if ray >= nt else 0
                        exit_fac[ray] = 1.0 if ray >= nt else 0.0
                        continue
                    tau = 0.0
                    r0 = starts[ray]
                    for t_idx, t0, t1 in segs:
                        dt = t1 - t0
                        opt = self.mu[t_idx] * beta * dt
                        att = np.exp(-tau)
                        if self.mu[t_idx] > 0:
                            w = att * (1.0 - np.exp(-opt)) / self.mu[t_idx]
                        else:
                            w = att * beta * dt
                        rows.append(ray)
                        cols.append(t_idx)
                        vals.append(w)
                        if q_analytic is not None and q_mask[t_idx]:
                            # 4-point Gauss on q(r - t u) e^{-tau(t)} beta dt
                            tg = t0 + 0.5 * dt * (gx + 1.0)
                            pts = r0[None, :] - tg[:, None] * u[None, :]
                            qv = np.asarray(q_analytic(pts), dtype=float)
                            damp = np.exp(-(tau + self.mu[t_idx] * beta * (tg - t0)))
                            qvec[ray] += 0.5 * dt * beta * np.sum(gw * qv * damp)
                        tau += opt
                    exit_fac[ray] = np.exp(-tau)
                    exit_edge[ray] = self._locate_exit_edge(
                        owner_edges, segs[-1][0], r0 - t_exit * u)
            self._mats.append(csr_matrix((vals, (rows, cols)),
                                         shape=(self.n_rays, nt)))
            self._qvec.append(qvec)
            self._exit_edge.append(exit_edge)
            self._exit_fac.append(exit_fac)

    def _boundary_owners(self) -> np.ndarray:
        mesh = self.mesh
        if mesh._boundary is None:
            mesh._build_boundary()
        return mesh._boundary[3]

    def _locate_exit_edge(self, owner_edges: dict, last_tri: int,
                          exit_point: np.ndarray) -> int:
        cand = owner_edges.get(last_tri)
        if cand is None:
            # roundoff may land the final segment in a neighbouring interior
            # triangle; fall back to the nearest boundary edge midpoint
            d = np.linalg.norm(self.edge_mid - exit_point, axis=1)
            return int(np.argmin(d))
        if len(cand) == 1:
            return cand[0]
        d = np.linalg.norm(self.edge_mid[cand] - exit_point, axis=1)
        return cand[int(np.argmin(d))]

    def apply(self, src_tri: np.ndarray, inflow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """One transport sweep: src_tri is the per-triangle isotropic source
        density, inflow the boundary data (nbe, nd)."""
        nt = self.mesh.n_triangles
        nd = self.ordinates.n_dirs
        tri = np.empty((nt, nd))
        bdry = np.empty((inflow.shape[0], nd))
        for d in range(nd):
            vals = (self._mats[d] @ src_tri
                    + self._qvec[d]
                    + self._exit_fac[d] * inflow[self._exit_edge[d], d])
            tri[:, d] = vals[:nt]
            bdry[:, d] = vals[nt:]
        return tri, bdry


def _iteration_cap(coeffs: TransportCoefficients) -> int:
    mu = coeffs.mu
    sig0 = coeffs.sigma[:, 0] if coeffs.sigma.size else np.zeros_like(mu)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(mu > 0, sig0 / mu, np.where(sig0 > 0, np.inf, 0.0))
    worst = float(ratio.max(initial=0.0))
    if worst >= 1.0:
        raise ValueError("supercritical scattering: sigma_0 >= mu somewhere")
    return 10 * int(np.ceil(1.0 / (1.0 - worst)))


def source_iteration(mesh: Mesh2D, coeffs: TransportCoefficients,
                     ordinates: OrdinateSet, bc: str, tol: float,
                     q=None, max_iter: int | None = None,
                     monitor=None, initial_inflow: np.ndarray | None = None) -> SampledField:
    """Fixed-point transport iteration with isotropic scattering.

    ``bc`` selects vacuum inflow or the reflection rule on the mesh boundary.
    ``q`` may be an analytic spatial callable (integrated accurately along
    rays, restricted to INTERIOR triangles); by default the per-triangle
    source stored in ``coeffs`` is used.  ``initial_inflow`` warm-starts the
    boundary data (reflective problems only).
    """
    if bc not in (VACUUM, REFLECT):
        raise ValueError(f"unknown boundary condition {bc!r}")
    nd = ordinates.n_dirs
    nbe = mesh.boundary_edges.shape[0]

    if callable(q):
        sweep = SweepOperator(mesh, coeffs.mu, ordinates, q_analytic=q,
                              q_mask=mesh.tags == INTERIOR)
        base_src = np.zeros(mesh.n_triangles)
    else:
        sweep = SweepOperator(mesh, coeffs.mu, ordinates)
        base_src = coeffs.source if q is None else np.asarray(q, dtype=float)

    sig0 = coeffs.sigma[:, 0] if coeffs.sigma.size else np.zeros(mesh.n_triangles)
    cap = max_iter if max_iter is not None else _iteration_cap(coeffs)

    if bc == REFLECT:
        s_dot_n = mesh.boundary_normals @ ordinates.directions[:, :2].T  # (nbe, nd)
        inflow_mask = s_dot_n < 0
        factors = np.zeros_like(s_dot_n)
        factors[inflow_mask] = reflect_factor(s_dot_n[inflow_mask])

    u_tri = np.zeros((mesh.n_triangles, nd))
    u_bdry = np.zeros((nbe, nd))
    h = np.zeros((nbe, nd)) if initial_inflow is None else np.array(initial_inflow, dtype=float)
    for it in range(1, cap + 1):
        scatter = base_src + sig0 / (4 * np.pi) * (u_tri @ ordinates.weights)
        new_tri, new_bdry = sweep.apply(scatter, h)
        delta = max(np.max(np.abs(new_tri - u_tri)),
                    np.max(np.abs(new_bdry - u_bdry)) if nbe else 0.0)
        u_tri, u_bdry = new_tri, new_bdry
        if bc == REFLECT:
            h = np.where(inflow_mask, factors * u_bdry[:, ordinates.opposite], 0.0)
        if monitor is not None:
            monitor(it, SampledField(u_tri, u_bdry, ordinates, mesh))
        if delta <= tol:
            return SampledField(u_tri, u_bdry, ordinates, mesh)
    raise RuntimeError(f"source iteration did not converge within {cap} sweeps "
                       f"(last change {delta:.3e} > tol {tol:g})")


def _locate_triangle(mesh: Mesh2D, r: np.ndarray) -> int:
    a, b, c = mesh.corner_coords()
    d1 = (b[:, 0] - a[:, 0]) * (r[1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (r[0] - a[:, 0])
    d2 = (c[:, 0] - b[:, 0]) * (r[1] - b[:, 1]) - (c[:, 1] - b[:, 1]) * (r[0] - b[:, 0])
    d3 = (a[:, 0] - c[:, 0]) * (r[1] - c[:, 1]) - (a[:, 1] - c[:, 1]) * (r[0] - c[:, 0])
    inside = (d1 >= -1e-12) & (d2 >= -1e-12) & (d3 >= -1e-12)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        raise ValueError("point lies outside the mesh")
    return int(idx[0])


def characteristics_solve(mesh: Mesh2D, coeffs: TransportCoefficients,
                          r, s, q=None, inflow=None) -> float:
    """Exact transport solution along one backward characteristic for purely
    absorbing data: attenuated path integral of the source plus the attenuated
    inflow value at the domain boundary."""
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    mu = coeffs.mu
    if callable(q):
        src_tri = None
    else:
        src_tri = coeffs.source if q is None else np.asarray(q, dtype=float)

    p = np.hypot(s[0], s[1])
    if p <= 1e-14:
        # invariant-axis ray: balance absorption against the local source
        t_idx = _locate_triangle(mesh, r)
        if mu[t_idx] <= 0:
            raise ValueError("vertical characteristic in a void has no steady state")
        dens = q(r[None, :])[0] if callable(q) else src_tri[t_idx]
        return float(dens / mu[t_idx])

    u = np.array([s[0], s[1]]) / p
    beta = 1.0 / p
    tol = 1e-12 * max(mesh.vertices.max() - mesh.vertices.min(), 1.0)
    _, lo, hi = next(_ray_triangle_intervals(mesh, r[None, :], u, chunk=1))
    segs, t_exit = _segments_for_ray(lo[0], hi[0], tol)
    if not segs:
        raise ValueError("ray does not intersect the mesh")

    gx, gw = _SEG_GAUSS
    interior = mesh.tags == INTERIOR
    tau = 0.0
    total = 0.0
    for t_idx, t0, t1 in segs:
        dt = t1 - t0
        opt = mu[t_idx] * beta * dt
        if callable(q):
            if interior[t_idx]:
                tg = t0 + 0.5 * dt * (gx + 1.0)
                pts = r[None, :] - tg[:, None] * u[None, :]
                damp = np.exp(-(tau + mu[t_idx] * beta * (tg - t0)))
                total += 0.5 * dt * beta * np.sum(gw * np.asarray(q(pts)) * damp)
        else:
            if mu[t_idx] > 0:
                total += src_tri[t_idx] * np.exp(-tau) * (1 - np.exp(-opt)) / mu[t_idx]
            else:
                total += src_tri[t_idx] * np.exp(-tau) * beta * dt
        tau += opt
    if inflow is not None:
        hit = r - t_exit * u
        val = inflow(hit, s) if callable(inflow) else float(inflow)
        total += np.exp(-tau) * val
    return float(total)


def ordinate_mean(field: SampledField) -> np.ndarray:
    """Angular integral of the sampled field per triangle (the quantity
    exported by the field writer: sqrt(4 pi) times the constant moment)."""
    return field.tri_values @ field.ordinates.weights


def boundary_trace_norm(field: SampledField) -> float:
    """L2 norm of the sampled field over (boundary curve) x (sphere)."""
    lengths = field.mesh.boundary_lengths
    w = field.ordinates.weights
    return float(np.sqrt(np.sum(lengths[:, None] * w[None, :]
                                * field.boundary_values**2)))


def consistency_error(u_vacuum: SampledField, w_reflect: SampledField,
                      tri_map: np.ndarray) -> float:
    """Discrete L2(inner domain x sphere) distance between the vacuum-boundary
    solution on the inner mesh and the reflective solution restricted to it.

    ``tri_map`` sends inner-mesh triangles to their parents in the extended
    mesh (as produced by ``submesh_interior``)."""
    if u_vacuum.ordinates.n_dirs != w_reflect.ordinates.n_dirs or not np.allclose(
            u_vacuum.ordinates.directions, w_reflect.ordinates.directions):
        raise ValueError("fields must share the same ordinate set")
    if tri_map.shape[0] != u_vacuum.mesh.n_triangles:
        raise ValueError("triangle map does not match the inner mesh")
    diff = u_vacuum.tri_values - w_reflect.tri_values[tri_map]
    areas = u_vacuum.mesh.areas
    w = u_vacuum.ordinates.weights
    return float(np.sqrt(np.sum(areas[:, None] * w[None, :] * diff**2)))
