"""Site potentials: interatomic energy as a function of the strain tuple.

A site potential V consumes the reference stencil offsets rho (K, d) and the
strain tuple g (K, m) and returns the site energy, renormalized so that
V(0) = 0 on its own stencil.  Pair potentials and EAM require m == d; the
quadratic bond form works for any m (scalar fields included).

Radial functions carry their own smooth cutoff so that stencils of radius
`support_radius` capture the full interaction exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConfigurationError, SingularityError

# distances below this are treated as a collision (energy undefined)
_R_TINY = 1e-8


class CutoffSpline:
    """Smooth 1 -> 0 taper on [r_lo, r_hi]; value 1 below, 0 above.

    kind="cubic" is the C^1 Hermite taper (value/slope (1,0) at r_lo and
    (0,0) at r_hi); kind="quintic" is the C^2 variant.
    """

    def __init__(self, r_lo: float, r_hi: float, kind: str = "cubic"):
        if not (0 < r_lo < r_hi):
            raise ConfigurationError(f"bad cutoff interval [{r_lo}, {r_hi}]")
        if kind not in ("cubic", "quintic"):
            raise ConfigurationError(f"unknown cutoff kind {kind!r}")
        self.r_lo = float(r_lo)
        self.r_hi = float(r_hi)
        self.kind = kind
        self._h = self.r_hi - self.r_lo

    def _t(self, r):
        return (np.asarray(r, dtype=float) - self.r_lo) / self._h

    def value(self, r):
        t = np.clip(self._t(r), 0.0, 1.0)
        if self.kind == "cubic":
            return 1.0 - t * t * (3.0 - 2.0 * t)
        return 1.0 - t ** 3 * (10.0 - 15.0 * t + 6.0 * t * t)

    def d1(self, r):
        t = self._t(r)
        inside = (t > 0.0) & (t < 1.0)
        t = np.clip(t, 0.0, 1.0)
        if self.kind == "cubic":
            out = (-6.0 * t + 6.0 * t * t) / self._h
        else:
            out = (-30.0 * t * t + 60.0 * t ** 3 - 30.0 * t ** 4) / self._h
        return np.where(inside, out, 0.0)

    def d2(self, r):
        t = self._t(r)
        inside = (t > 0.0) & (t < 1.0)
        t = np.clip(t, 0.0, 1.0)
        if self.kind == "cubic":
            out = (-6.0 + 12.0 * t) / self._h ** 2
        else:
            out = (-60.0 * t + 180.0 * t * t - 120.0 * t ** 3) / self._h ** 2
        return np.where(inside, out, 0.0)


class Radial:
    """A radial function with two derivatives and finite support."""

    support: float

    def value(self, r):  # pragma: no cover - interface
        raise NotImplementedError

    def d1(self, r):  # pragma: no cover - interface
        raise NotImplementedError

    def d2(self, r):  # pragma: no cover - interface
        raise NotImplementedError

    def all(self, r):
        return self.value(r), self.d1(r), self.d2(r)


class MorseRadial(Radial):
    """Tapered Morse pair function, minimum depth -1 at r = 1.

    phi(r) = (exp(-2 a (r-1)) - 2 exp(-a (r-1))) * taper(r).
    """

    def __init__(self, alpha: float = 4.0, taper: CutoffSpline | None = None):
        self.alpha = float(alpha)
        self.taper = taper if taper is not None else CutoffSpline(1.5, 2.3)
        self.support = self.taper.r_hi

    def _raw(self, r):
        a = self.alpha
        e1 = np.exp(-a * (np.asarray(r, dtype=float) - 1.0))
        e2 = e1 * e1
        raw = e2 - 2.0 * e1
        d1 = 2.0 * a * (e1 - e2)
        d2 = 2.0 * a * a * (2.0 * e2 - e1)
        return raw, d1, d2

    def value(self, r):
        raw, _, _ = self._raw(r)
        return raw * self.taper.value(r)

    def d1(self, r):
        raw, dr, _ = self._raw(r)
        return dr * self.taper.value(r) + raw * self.taper.d1(r)

    def d2(self, r):
        raw, dr, ddr = self._raw(r)
        c, c1, c2 = self.taper.value(r), self.taper.d1(r), self.taper.d2(r)
        return ddr * c + 2.0 * dr * c1 + raw * c2


class ExpRadial(Radial):
    """Tapered exponential, used as an EAM electron-density contribution."""

    def __init__(self, beta: float = 4.0, taper: CutoffSpline | None = None):
        self.beta = float(beta)
        self.taper = taper if taper is not None else CutoffSpline(1.5, 2.3)
        self.support = self.taper.r_hi

    def value(self, r):
        e = np.exp(-self.beta * (np.asarray(r, dtype=float) - 1.0))
        return e * self.taper.value(r)

    def d1(self, r):
        e = np.exp(-self.beta * (np.asarray(r, dtype=float) - 1.0))
        return e * (self.taper.d1(r) - self.beta * self.taper.value(r))

    def d2(self, r):
        b = self.beta
        e = np.exp(-b * (np.asarray(r, dtype=float) - 1.0))
        c, c1, c2 = self.taper.value(r), self.taper.d1(r), self.taper.d2(r)
        return e * (c2 - 2.0 * b * c1 + b * b * c)


class SpringRadial(Radial):
    """phi(r) = k (r - r0)^2 with a hard support radius (no taper).

    Handy for analytic checks; the discontinuity at `support` never enters
    when all shells stay well inside.
    """

    def __init__(self, k: float = 1.0, r0: float = 1.0, support: float = 1.4):
        self.k = float(k)
        self.r0 = float(r0)
        self.support = float(support)

    def value(self, r):
        return self.k * (np.asarray(r, dtype=float) - self.r0) ** 2

    def d1(self, r):
        return 2.0 * self.k * (np.asarray(r, dtype=float) - self.r0)

    def d2(self, r):
        return 2.0 * self.k * np.ones_like(np.asarray(r, dtype=float))


# ---------------------------------------------------------------------------
# site potentials


def _radii(v):
    r = np.linalg.norm(v, axis=-1)
    if np.any(r < _R_TINY):
        raise SingularityError("bond length collapsed below 1e-8; sites coincide")
    return r


class SitePotential:
    """Interface: site energy from (stencil offsets, strain tuple)."""

    hess_structure = "diagonal"  # or "diagonal+rank1"

    def make_context(self, offsets: np.ndarray):
        raise NotImplementedError

    def check_field_dim(self, m: int, d: int):
        raise NotImplementedError

    @property
    def support_radius(self) -> float:
        raise NotImplementedError

    # single-site convenience wrappers over the batch kernels
    def eval(self, offsets, g) -> float:
        ctx = self.make_context(np.asarray(offsets, dtype=float))
        return float(self.energy_batch(ctx, np.asarray(g, dtype=float)[None])[0])

    def grad(self, offsets, g) -> np.ndarray:
        ctx = self.make_context(np.asarray(offsets, dtype=float))
        return self.grad_batch(ctx, np.asarray(g, dtype=float)[None])[0]

    def hess(self, offsets, g) -> np.ndarray:
        """Full site Hessian, shape (K, m, K, m)."""
        ctx = self.make_context(np.asarray(offsets, dtype=float))
        G = np.asarray(g, dtype=float)[None]
        K, m = G.shape[1], G.shape[2]
        H = np.zeros((K, m, K, m))
        D = self.hess_diag_batch(ctx, G)[0]
        for k in range(K):
            H[k, :, k, :] = D[k]
        r1 = self.hess_rank1_batch(ctx, G)
        if r1 is not None:
            coef, vec = r1
            b = vec[0]
            H += coef[0] * np.einsum("ki,lj->kilj", b, b)
        return H


class PairPotential(SitePotential):
    """V(g) = 1/2 sum_rho [phi(|rho + g_rho|) - phi(|rho|)]."""

    hess_structure = "diagonal"

    def __init__(self, radial: Radial):
        self.radial = radial

    @property
    def support_radius(self) -> float:
        return self.radial.support

    def check_field_dim(self, m: int, d: int):
        if m != d:
            raise ConfigurationError(f"pair potential needs m == d, got m={m}, d={d}")

    @dataclass
    class _Ctx:
        offsets: np.ndarray
        phi0: np.ndarray

    def make_context(self, offsets):
        offsets = np.asarray(offsets, dtype=float)
        r0 = _radii(offsets)
        return self._Ctx(offsets=offsets, phi0=self.radial.value(r0))

    def reference_site_energy(self, offsets) -> float:
        r0 = _radii(np.asarray(offsets, dtype=float))
        return 0.5 * float(np.sum(self.radial.value(r0)))

    def energy_batch(self, ctx, G):
        r = _radii(ctx.offsets + G)
        return 0.5 * np.sum(self.radial.value(r) - ctx.phi0, axis=-1)

    def grad_batch(self, ctx, G):
        v = ctx.offsets + G
        r = _radii(v)
        w = 0.5 * self.radial.d1(r) / r
        return w[..., None] * v

    def hess_apply_batch(self, ctx, G, W):
        v = ctx.offsets + G
        r = _radii(v)
        p1 = self.radial.d1(r)
        p2 = self.radial.d2(r)
        proj = np.einsum("nkm,nkm->nk", v, W) / (r * r)
        return 0.5 * ((p2 - p1 / r) * proj)[..., None] * v + 0.5 * (p1 / r)[..., None] * W

    def hess_diag_batch(self, ctx, G):
        v = ctx.offsets + G
        r = _radii(v)
        n = v / r[..., None]
        p1 = self.radial.d1(r) / r
        p2 = self.radial.d2(r)
        nn = np.einsum("nki,nkj->nkij", n, n)
        eye = np.eye(v.shape[-1])
        return 0.5 * (p2[..., None, None] * nn + p1[..., None, None] * (eye - nn))

    def hess_rank1_batch(self, ctx, G):
        return None


class MorsePotential(PairPotential):
    """Morse pair potential (alpha = 4 by default) with a smooth taper."""

    def __init__(self, alpha: float = 4.0, taper: CutoffSpline | None = None):
        super().__init__(MorseRadial(alpha=alpha, taper=taper))

    @property
    def alpha(self) -> float:
        return self.radial.alpha


class EAMPotential(SitePotential):
    """Pair part plus Finnis-Sinclair embedding F(s) = -A sqrt(s + eps).

    V(g) = 1/2 sum [phi - phi0] + F(sum psi(r)) - F(sum psi(r0)).
    """

    hess_structure = "diagonal+rank1"

    def __init__(self, pair: Radial | None = None, density: Radial | None = None,
                 A_emb: float = 1.0, eps_embed: float = 1e-30):
        self.pair = pair if pair is not None else MorseRadial()
        self.density = density if density is not None else ExpRadial()
        self.A_emb = float(A_emb)
        self.eps_embed = float(eps_embed)

    @property
    def support_radius(self) -> float:
        return max(self.pair.support, self.density.support)

    def check_field_dim(self, m: int, d: int):
        if m != d:
            raise ConfigurationError(f"EAM potential needs m == d, got m={m}, d={d}")

    def _F(self, s):
        root = np.sqrt(s + self.eps_embed)
        F = -self.A_emb * root
        F1 = -0.5 * self.A_emb / root
        F2 = 0.25 * self.A_emb / root ** 3
        return F, F1, F2

    @dataclass
    class _Ctx:
        offsets: np.ndarray
        phi0: np.ndarray
        F0: float

    def make_context(self, offsets):
        offsets = np.asarray(offsets, dtype=float)
        r0 = _radii(offsets)
        s0 = float(np.sum(self.density.value(r0)))
        F0, _, _ = self._F(s0)
        return self._Ctx(offsets=offsets, phi0=self.pair.value(r0), F0=float(F0))

    def reference_site_energy(self, offsets) -> float:
        r0 = _radii(np.asarray(offsets, dtype=float))
        F0, _, _ = self._F(float(np.sum(self.density.value(r0))))
        return 0.5 * float(np.sum(self.pair.value(r0))) + float(F0)

    def energy_batch(self, ctx, G):
        r = _radii(ctx.offsets + G)
        s = np.sum(self.density.value(r), axis=-1)
        F, _, _ = self._F(s)
        return 0.5 * np.sum(self.pair.value(r) - ctx.phi0, axis=-1) + F - ctx.F0

    def grad_batch(self, ctx, G):
        v = ctx.offsets + G
        r = _radii(v)
        s = np.sum(self.density.value(r), axis=-1)
        _, F1, _ = self._F(s)
        w = (0.5 * self.pair.d1(r) + F1[..., None] * self.density.d1(r)) / r
        return w[..., None] * v

    def hess_apply_batch(self, ctx, G, W):
        v = ctx.offsets + G
        r = _radii(v)
        n = v / r[..., None]
        s = np.sum(self.density.value(r), axis=-1)
        _, F1, F2 = self._F(s)
        p1 = 0.5 * self.pair.d1(r) + F1[..., None] * self.density.d1(r)
        p2 = 0.5 * self.pair.d2(r) + F1[..., None] * self.density.d2(r)
        proj = np.einsum("nkm,nkm->nk", n, W)
        out = ((p2 - p1 / r) * proj)[..., None] * n + (p1 / r)[..., None] * W
        b = self.density.d1(r)[..., None] * n
        dot = np.einsum("nkm,nkm->n", b, W)
        out += (F2 * dot)[..., None, None] * b
        return out

    def hess_diag_batch(self, ctx, G):
        v = ctx.offsets + G
        r = _radii(v)
        n = v / r[..., None]
        s = np.sum(self.density.value(r), axis=-1)
        _, F1, _ = self._F(s)
        p1 = (0.5 * self.pair.d1(r) + F1[..., None] * self.density.d1(r)) / r
        p2 = 0.5 * self.pair.d2(r) + F1[..., None] * self.density.d2(r)
        nn = np.einsum("nki,nkj->nkij", n, n)
        eye = np.eye(v.shape[-1])
        return p2[..., None, None] * nn + p1[..., None, None] * (eye - nn)

    def hess_rank1_batch(self, ctx, G):
        v = ctx.offsets + G
        r = _radii(v)
        n = v / r[..., None]
        s = np.sum(self.density.value(r), axis=-1)
        _, _, F2 = self._F(s)
        return F2, self.density.d1(r)[..., None] * n


class QuadraticFormPotential(SitePotential):
    """Exactly quadratic site energy, any field dimension m.

    V(g) = sum_rho [ w/2 |g_rho|^2 + (L rho) . g_rho ] with optional linear
    map L (m x d).  With broken stencils (defects) the linear term acts as a
    localized forcing; on full point-symmetric stencils it cancels.
    """

    hess_structure = "diagonal"

    def __init__(self, m: int, weight: float = 1.0, linear=None,
                 support: float = 1.0):
        self.m = int(m)
        self.weight = float(weight)
        self.linear = None if linear is None else np.asarray(linear, dtype=float)
        self._support = float(support)
        if self.weight <= 0:
            raise ConfigurationError("quadratic bond weight must be positive")

    @property
    def support_radius(self) -> float:
        return self._support

    def check_field_dim(self, m: int, d: int):
        if m != self.m:
            raise ConfigurationError(f"potential built for m={self.m}, model has m={m}")
        if self.linear is not None and self.linear.shape[1] != d:
            raise ConfigurationError("linear map shape does not match lattice dimension")

    @dataclass
    class _Ctx:
        offsets: np.ndarray
        lin: np.ndarray | None   # (K, m) forcing coefficients

    def make_context(self, offsets):
        offsets = np.asarray(offsets, dtype=float)
        lin = None if self.linear is None else offsets @ self.linear.T
        return self._Ctx(offsets=offsets, lin=lin)

    def energy_batch(self, ctx, G):
        e = 0.5 * self.weight * np.einsum("nkm,nkm->n", G, G)
        if ctx.lin is not None:
            e = e + np.einsum("km,nkm->n", ctx.lin, G)
        return e

    def grad_batch(self, ctx, G):
        out = self.weight * G
        if ctx.lin is not None:
            out = out + ctx.lin
        return out

    def hess_apply_batch(self, ctx, G, W):
        return self.weight * W

    def hess_diag_batch(self, ctx, G):
        n, K, m = G.shape
        eye = self.weight * np.eye(m)
        return np.broadcast_to(eye, (n, K, m, m)).copy()

    def hess_rank1_batch(self, ctx, G):
        return None


# ---------------------------------------------------------------------------
# equilibrium lattice parameter


def find_lattice_parameter(potential: SitePotential, A_unit, window=(0.5, 1.6),
                           samples: int = 400, rel_tol: float = 1e-12) -> float:
    """Scale a0 minimizing the per-site energy of the lattice a * A_unit Z^d.

    Coarse scan over `window` to bracket, then bounded scalar minimization to
    relative tolerance `rel_tol`.  Errors out when no interior minimum exists
    in the window.
    """
    if not hasattr(potential, "reference_site_energy"):
        raise ConfigurationError(
            "potential has no radial structure; lattice parameter is undefined")
    A_unit = np.asarray(A_unit, dtype=float)
    a_min, a_max = float(window[0]), float(window[1])
    if not (0 < a_min < a_max):
        raise ConfigurationError(f"bad scan window {window}")
    support = potential.support_radius
    from .lattice import homogeneous_offsets  # local import: no cycle at module load
    _, vecs = homogeneous_offsets(A_unit, support / a_min)
    norms = np.linalg.norm(vecs, axis=1)

    def e_of(a: float) -> float:
        # keep only bonds inside the support at this scale (hard-support radials)
        return potential.reference_site_energy(a * vecs[a * norms <= support + 1e-9])

    grid = np.linspace(a_min, a_max, samples)
    vals = np.array([e_of(a) for a in grid])
    i = int(np.argmin(vals))
    if i == 0 or i == samples - 1:
        raise ConfigurationError(
            f"no interior energy minimum in scan window {window}")
    res = minimize_scalar(e_of, bounds=(grid[i - 1], grid[i + 1]), method="bounded",
                          options={"xatol": rel_tol * grid[i], "maxiter": 500})
    if not res.success:
        raise ConfigurationError(f"lattice parameter search failed: {res.message}")
    return float(res.x)
