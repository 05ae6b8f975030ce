"""Flat prequantum line bundle L^k on C^n charts and torus quotients.

Conventions: omega = 2*pi * sum dx ^ dy, so g_k = 2*pi*k * Euclidean and the
g_k-normalised coordinate is w = sqrt(2*pi*k) * z. Sections are complex
functions in the unitary symmetric gauge; the Chern connection reads
D = d/dw - wbar/4 and Dbar = d/dwbar + w/4 in w coordinates.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Optional, Sequence, Union

import numpy as np
from scipy.optimize import minimize

from app.errors import ActionDoesNotPreserveDomain, CenterOutsideDomain
from app.geometry.group_rep import (
    FiniteUnitaryAction,
    build_group,
    complex_to_real,
    real_to_complex,
)

logger = logging.getLogger(__name__)

NU = 2.0 * math.pi
TAIL_TOL = 1e-16
BUMP_POWER = 24
TERM_CHUNK = 200_000

Mode = Literal["gaussian", "cutoff", "periodized"]


def truncation_radius(tail_tol: float = TAIL_TOL) -> float:
    """g_k radius beyond which exp(-d^2/4) < tail_tol."""
    return math.sqrt(4.0 * math.log(1.0 / tail_tol))


def bump(t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """C^2 polynomial spline: 1 on [0, 1/2], 0 on [1, inf); returns (beta, beta', beta'')."""
    t = np.asarray(t, dtype=float)
    u = np.clip(2.0 * t - 1.0, 0.0, 1.0)
    inside = (t > 0.5) & (t < 1.0)
    p = BUMP_POWER
    v = u**p
    dv = p * u ** (p - 1) * 2.0
    d2v = p * (p - 1) * u ** (p - 2) * 4.0
    s = 10 * v**3 - 15 * v**4 + 6 * v**5
    ds = 30 * v**2 * (1 - v) ** 2
    d2s = 60 * v * (1 - v) * (1 - 2 * v)
    beta = np.where(t >= 1.0, 0.0, 1.0 - s)
    dbeta = np.where(inside, -ds * dv, 0.0)
    d2beta = np.where(inside, -(d2s * dv**2 + ds * d2v), 0.0)
    return beta, dbeta, d2beta


def bump_slope() -> float:
    """sup |beta'| on [1/2, 1], sampled densely."""
    t = np.linspace(0.5, 1.0, 200_001)
    return float(np.max(np.abs(bump(t)[1])))


def cutoff_gradient_bound(k: int) -> float:
    """Product-rule bound on |grad s| for a cutoff peak of level k.

    The bump only bends where d_k >= R/2 with R = k^(1/6), so the cutoff term
    b = sup|beta'| e^{-R^2/16} / (2R) enters both halves of the gradient on top of
    the Gaussian's own sup (d/2) e^{-d^2/4} = e^{-1/2}/sqrt(2).
    """
    radius = k ** (1.0 / 6.0)
    gaussian = math.exp(-0.5) / math.sqrt(2.0)
    b = bump_slope() * math.exp(-(radius**2) / 16.0) / (2.0 * radius)
    return math.hypot(gaussian + b, b)


@dataclass(frozen=True, eq=False)
class ModelChart:
    """Flat Darboux chart H x C^n with the identity as Darboux map."""

    n: int
    k: int
    action: Optional[FiniteUnitaryAction] = None
    chart_radius: float = math.inf
    omega_scale: float = NU

    def __post_init__(self):
        if self.action is None:
            object.__setattr__(self, "action", build_group([], dimension=self.n))

    @property
    def group(self) -> FiniteUnitaryAction:
        return self.action

    @property
    def scale(self) -> float:
        return math.sqrt(self.k * self.omega_scale)

    def to_gk(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * self.scale

    def from_gk(self, w: np.ndarray) -> np.ndarray:
        return np.asarray(w) / self.scale

    def d_k(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.scale * np.linalg.norm(np.asarray(x) - np.asarray(y), axis=-1)

    def contains(self, z: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self.to_gk(np.atleast_2d(z)), axis=-1) <= self.chart_radius + 1e-12

    @staticmethod
    def metric_matrix() -> np.ndarray:
        return np.eye(2)

    @staticmethod
    def complex_structure(n: int) -> np.ndarray:
        """J on (Re z, Im z): J^2 = -Id."""
        eye = np.eye(n)
        zero = np.zeros((n, n))
        return np.block([[zero, -eye], [eye, zero]])


@dataclass(frozen=True, eq=False)
class TorusQuotient:
    """T^{2n} = C^n / Lambda with a finite unitary group preserving Lambda."""

    n: int
    group: FiniteUnitaryAction
    period_basis: np.ndarray = None
    omega_scale: float = NU
    name: str = ""
    fixed_points: Optional[dict] = None
    integer_form: np.ndarray = field(init=False, repr=False)
    lattice_actions: tuple = field(init=False, repr=False)

    def __post_init__(self):
        basis = (
            np.eye(2 * self.n) if self.period_basis is None else np.asarray(self.period_basis, float)
        )
        object.__setattr__(self, "period_basis", basis)
        columns = real_to_complex(basis.T)
        # gram[i, j] = Im <b_i, b_j>
        gram = np.imag(np.einsum("il,jl->ij", columns, columns.conj()))
        object.__setattr__(self, "integer_form", np.round(gram).astype(int))
        inv = np.linalg.inv(basis)
        actions = tuple(inv @ self.group.real_form(h) @ basis for h in range(self.group.order))
        object.__setattr__(self, "lattice_actions", actions)

    def preserves_lattice(self, tol: float = 1e-9) -> bool:
        return all(np.max(np.abs(m - np.round(m))) <= tol for m in self.lattice_actions)

    def form_is_integral(self, tol: float = 1e-9) -> bool:
        columns = real_to_complex(self.period_basis.T)
        gram = np.imag(np.einsum("il,jl->ij", columns, columns.conj()))
        return bool(np.max(np.abs(gram - np.round(gram))) <= tol)

    def lattice_coords(self, z: np.ndarray) -> np.ndarray:
        return complex_to_real(np.asarray(z)) @ np.linalg.inv(self.period_basis).T

    def from_lattice_coords(self, x: np.ndarray) -> np.ndarray:
        return real_to_complex(np.asarray(x, dtype=float) @ self.period_basis.T)

    def reduce(self, z: np.ndarray) -> np.ndarray:
        x = self.lattice_coords(z)
        return self.from_lattice_coords(x - np.floor(x + 1e-12))

    def lattice_vector(self, m: np.ndarray) -> np.ndarray:
        return self.from_lattice_coords(m)

    def covolume(self) -> float:
        return abs(float(np.linalg.det(self.period_basis)))

    def min_image_difference(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Shortest representative of x - y modulo Lambda (small box search)."""
        diff = self.lattice_coords(np.asarray(x) - np.asarray(y))
        diff = diff - np.round(diff)
        offsets = np.array(list(itertools.product((-1, 0, 1), repeat=2 * self.n)), dtype=float)
        cands = diff[..., None, :] + offsets
        vecs = self.from_lattice_coords(cands)
        norms = np.linalg.norm(vecs, axis=-1)
        best = np.argmin(norms, axis=-1)
        return np.take_along_axis(vecs, best[..., None, None], axis=-2)[..., 0, :]

    def distance(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self.min_image_difference(x, y), axis=-1)

    def fundamental_grid(self, step: float) -> np.ndarray:
        """Points of the fundamental domain on a lattice-coordinate grid of ~step spacing."""
        longest = float(np.max(np.linalg.norm(self.period_basis, axis=0)))
        count = max(1, int(math.ceil(longest / step)))
        ticks = np.arange(count) / count
        mesh = np.array(list(itertools.product(ticks, repeat=2 * self.n)))
        return self.from_lattice_coords(mesh)

    def characteristic(self, k: int) -> np.ndarray:
        """Linear term c of q(m) = sum_{i<j} S_ij m_i m_j + c.m making (-1)^{k q} G-invariant."""
        cache = self.__dict__.setdefault("_characteristic", {})
        parity = k % 2
        if parity not in cache:
            cache[parity] = self._search_characteristic(k)
        return cache[parity]

    def _search_characteristic(self, k: int) -> np.ndarray:
        dim = 2 * self.n
        if k % 2 == 0:
            return np.zeros(dim, dtype=int)
        S = self.integer_form
        cube = np.array(list(itertools.product((0, 1), repeat=dim)), dtype=int)
        mats = [np.round(m).astype(int) for m in self.lattice_actions]
        for c in itertools.product((0, 1), repeat=dim):
            c = np.array(c, dtype=int)
            ok = True
            for mat in mats:
                moved = cube @ mat.T
                if np.any((_quadratic(moved, S, c) - _quadratic(cube, S, c)) % 2):
                    ok = False
                    break
            if ok:
                return c
        raise ActionDoesNotPreserveDomain(
            f"No G-invariant magnetic translation character for k={k} on {self.name or 'torus'}"
        )

    def epsilon(self, m: np.ndarray, k: int) -> np.ndarray:
        q = _quadratic(np.asarray(m, dtype=int), self.integer_form, self.characteristic(k))
        return np.where((k * q) % 2 == 0, 1.0, -1.0)


def _quadratic(m: np.ndarray, S: np.ndarray, c: np.ndarray) -> np.ndarray:
    upper = np.triu(S, 1)
    return np.einsum("...i,ij,...j->...", m, upper, m) + m @ c


Domain = Union[ModelChart, TorusQuotient]


@dataclass(frozen=True)
class Jet:
    """Wirtinger derivatives in g_k coordinates w of a section in the unitary gauge.

    `curvature` is 1 for sections of L^k and 0 for plain functions (trivial connection).
    """

    w: np.ndarray
    value: np.ndarray
    d: np.ndarray
    db: np.ndarray
    dd: Optional[np.ndarray] = None
    ddb: Optional[np.ndarray] = None
    dbdb: Optional[np.ndarray] = None
    curvature: float = 1.0

    def __add__(self, other: "Jet") -> "Jet":
        second = self.dd is not None and other.dd is not None
        return Jet(
            self.w,
            self.value + other.value,
            self.d + other.d,
            self.db + other.db,
            self.dd + other.dd if second else None,
            self.ddb + other.ddb if second else None,
            self.dbdb + other.dbdb if second else None,
            self.curvature,
        )


@dataclass(frozen=True)
class FieldValue:
    value: np.ndarray
    grad: np.ndarray
    dbar: np.ndarray

    @property
    def norm(self) -> np.ndarray:
        return np.abs(self.value)

    @property
    def grad_norm(self) -> np.ndarray:
        return np.linalg.norm(self.grad, axis=-1)

    @property
    def del_part(self) -> np.ndarray:
        n = self.dbar.shape[-1]
        return self.grad[..., :n]

    @property
    def del_norm(self) -> np.ndarray:
        return np.linalg.norm(self.del_part, axis=-1)

    @property
    def dbar_norm(self) -> np.ndarray:
        return np.linalg.norm(self.dbar, axis=-1)


@dataclass(frozen=True)
class SecondOrder:
    dd: np.ndarray
    dbar_d: np.ndarray
    d_dbar: np.ndarray
    dbar_dbar: np.ndarray

    @property
    def hessian_norm(self) -> np.ndarray:
        blocks = [self.dd, self.dbar_d, self.d_dbar, self.dbar_dbar]
        return np.sqrt(sum(np.sum(np.abs(b) ** 2, axis=(-2, -1)) for b in blocks))

    @property
    def nabla_dbar_norm(self) -> np.ndarray:
        blocks = [self.d_dbar, self.dbar_dbar]
        return np.sqrt(sum(np.sum(np.abs(b) ** 2, axis=(-2, -1)) for b in blocks))


def covariant_first(jet: Jet) -> FieldValue:
    alpha = jet.curvature / 4.0
    s = jet.value[:, None]
    d = jet.d - alpha * jet.w.conj() * s
    db = jet.db + alpha * jet.w * s
    return FieldValue(jet.value, np.concatenate([d, db], axis=-1), db)


def covariant_second(jet: Jet) -> SecondOrder:
    if jet.dd is None:
        raise ValueError("jet was computed without second derivatives")
    a = jet.curvature / 4.0
    s = jet.value[:, None, None]
    w = jet.w
    wb = w.conj()
    d, db = jet.d, jet.db
    eye = np.eye(w.shape[-1])[None]
    # [j, k] = D_j D_k s
    dd = (
        jet.dd
        - a * wb[:, None, :] * d[:, :, None]
        - a * wb[:, :, None] * (d[:, None, :] - a * wb[:, None, :] * s)
    )
    # [j, k] = Dbar_j D_k s
    dbar_d = (
        np.swapaxes(jet.ddb, -1, -2)
        - a * eye * s
        - a * wb[:, None, :] * db[:, :, None]
        + a * w[:, :, None] * d[:, None, :]
        - a * a * w[:, :, None] * wb[:, None, :] * s
    )
    # [j, k] = D_j Dbar_k s
    d_dbar = (
        jet.ddb
        + a * eye * s
        + a * w[:, None, :] * d[:, :, None]
        - a * wb[:, :, None] * db[:, None, :]
        - a * a * wb[:, :, None] * w[:, None, :] * s
    )
    # [j, k] = Dbar_j Dbar_k s
    dbar_dbar = (
        jet.dbdb
        + a * w[:, None, :] * db[:, :, None]
        + a * w[:, :, None] * (db[:, None, :] + a * w[:, None, :] * s)
    )
    return SecondOrder(dd, dbar_d, d_dbar, dbar_dbar)


def _as_points(points: np.ndarray, n: int) -> np.ndarray:
    """Accept a single point, a list of points, or scalars when n == 1; return shape (m, n)."""
    pts = np.asarray(points, dtype=complex)
    if pts.ndim == 0:
        return pts.reshape(1, 1)
    if pts.ndim == 1:
        return pts.reshape(-1, 1) if n == 1 else pts.reshape(1, n)
    return pts


class Section:
    """Anything that can report its jet at points given in chart/torus z coordinates."""

    domain: Domain
    k: int

    @property
    def n(self) -> int:
        return self.domain.n

    @property
    def scale(self) -> float:
        return math.sqrt(self.k * NU)

    def jet(self, points: np.ndarray, order: int = 1) -> Jet:
        raise NotImplementedError

    def evaluate(self, points: np.ndarray) -> FieldValue:
        return covariant_first(self.jet(points, order=1))

    def second_order(self, points: np.ndarray) -> SecondOrder:
        return covariant_second(self.jet(points, order=2))

    def values(self, points: np.ndarray) -> np.ndarray:
        return self.jet(points, order=0).value


@dataclass(frozen=True, eq=False)
class ChartPolynomial(Section):
    """Plain polynomial in (w, wbar) with the trivial connection: sum c * w^alpha * wbar^beta."""

    domain: ModelChart
    coefficients: dict
    k: int = 1

    def __post_init__(self):
        object.__setattr__(self, "k", self.domain.k)

    def jet(self, points: np.ndarray, order: int = 1) -> Jet:
        pts = _as_points(points, self.n)
        w = pts * self.scale
        m, n = w.shape
        wb = w.conj()
        value = np.zeros(m, dtype=complex)
        d = np.zeros((m, n), dtype=complex)
        db = np.zeros((m, n), dtype=complex)
        dd = np.zeros((m, n, n), dtype=complex)
        ddb = np.zeros((m, n, n), dtype=complex)
        dbdb = np.zeros((m, n, n), dtype=complex)

        def mono(exps, base, shift):
            exps = np.array(exps, dtype=int) - np.array(shift, dtype=int)
            if np.any(exps < 0):
                return None
            return np.prod(base**exps, axis=-1)

        def coef(exps, shift):
            out = 1.0
            for e, s in zip(exps, shift):
                for i in range(s):
                    out *= e - i
            return out

        for (alpha, beta), c in self.coefficients.items():
            alpha, beta = tuple(alpha), tuple(beta)
            zero = (0,) * n
            value += c * mono(alpha, w, zero) * mono(beta, wb, zero)
            for j in range(n):
                ej = tuple(int(i == j) for i in range(n))
                ma = mono(alpha, w, ej)
                if ma is not None:
                    d[:, j] += c * coef(alpha, ej) * ma * mono(beta, wb, zero)
                mb = mono(beta, wb, ej)
                if mb is not None:
                    db[:, j] += c * coef(beta, ej) * mono(alpha, w, zero) * mb
                if order < 2:
                    continue
                for l in range(n):
                    el = tuple(int(i == l) for i in range(n))
                    ejl = tuple(a + b for a, b in zip(ej, el))
                    maa = mono(alpha, w, ejl)
                    if maa is not None:
                        dd[:, j, l] += c * coef(alpha, ejl) * maa * mono(beta, wb, zero)
                    mbb = mono(beta, wb, ejl)
                    if mbb is not None:
                        dbdb[:, j, l] += c * coef(beta, ejl) * mono(alpha, w, zero) * mbb
                    ma_j = mono(alpha, w, ej)
                    mb_l = mono(beta, wb, el)
                    if ma_j is not None and mb_l is not None:
                        ddb[:, j, l] += c * coef(alpha, ej) * coef(beta, el) * ma_j * mb_l
        if order < 2:
            return Jet(w, value, d, db, curvature=0.0)
        return Jet(w, value, d, db, dd, ddb, dbdb, curvature=0.0)

    @classmethod
    def constant(cls, chart: ModelChart, c: complex) -> "ChartPolynomial":
        zero = (0,) * chart.n
        return cls(chart, {(zero, zero): complex(c)})

    @classmethod
    def coordinate(cls, chart: ModelChart, j: int = 0, power: int = 1, conjugate: bool = False):
        exps = tuple(power if i == j else 0 for i in range(chart.n))
        zero = (0,) * chart.n
        key = (zero, exps) if conjugate else (exps, zero)
        return cls(chart, {key: 1.0 + 0j})


def _gaussian_jet(
    w: np.ndarray,
    centers: np.ndarray,
    coeffs: np.ndarray,
    order: int,
    cutoff_k: Optional[int],
) -> Jet:
    """Sum over Gaussians c * exp(-(|w|^2 + |q|^2)/4 + <w, q>/2), optionally times the bump."""
    m, n = w.shape
    value = np.zeros(m, dtype=complex)
    d = np.zeros((m, n), dtype=complex)
    db = np.zeros((m, n), dtype=complex)
    second = order >= 2
    dd = np.zeros((m, n, n), dtype=complex) if second else None
    ddb = np.zeros((m, n, n), dtype=complex) if second else None
    dbdb = np.zeros((m, n, n), dtype=complex) if second else None
    if len(centers) == 0:
        return Jet(w, value, d, db, dd, ddb, dbdb)
    eye = np.eye(n)
    chunk = max(1, TERM_CHUNK // max(1, m))
    for start in range(0, len(centers), chunk):
        q = centers[start : start + chunk]
        c = coeffs[start : start + chunk]
        delta = w[:, None, :] - q[None, :, :]
        rho = np.sum(np.abs(delta) ** 2, axis=-1)
        phase = 0.5 * np.imag(np.sum(w[:, None, :] * q[None, :, :].conj(), axis=-1))
        g = c[None, :] * np.exp(-rho / 4.0 + 1j * phase)
        E = -w.conj()[:, None, :] / 4.0 + q.conj()[None, :, :] / 2.0
        Eb = np.broadcast_to(-w[:, None, :] / 4.0, E.shape)
        if cutoff_k is None:
            B = np.ones_like(rho)
            Bp = np.zeros_like(rho)
            Bpp = np.zeros_like(rho)
        else:
            radius = cutoff_k ** (1.0 / 6.0)
            r = np.sqrt(rho)
            beta, dbeta, d2beta = bump(r / radius)
            safe = np.where(r > 1e-300, r, 1.0)
            B = beta
            Bp = np.where(dbeta != 0, dbeta / (2.0 * safe * radius), 0.0)
            Bpp = np.where(
                (dbeta != 0) | (d2beta != 0),
                d2beta / (4.0 * safe**2 * radius**2) - dbeta / (4.0 * safe**3 * radius),
                0.0,
            )
        Bj = Bp[..., None] * delta.conj()
        Bbj = Bp[..., None] * delta
        gB = g * B
        value += np.sum(gB, axis=1)
        d += np.sum(g[..., None] * (E * B[..., None] + Bj), axis=1)
        db += np.sum(g[..., None] * (Eb * B[..., None] + Bbj), axis=1)
        if not second:
            continue
        dconj = delta.conj()
        Bjk = Bpp[..., None, None] * dconj[..., :, None] * dconj[..., None, :]
        Bjkb = Bpp[..., None, None] * dconj[..., :, None] * delta[..., None, :] + Bp[
            ..., None, None
        ] * eye
        Bbjk = Bpp[..., None, None] * delta[..., :, None] * delta[..., None, :]
        Bx = B[..., None, None]
        gx = g[..., None, None]
        dd += np.sum(
            gx
            * (
                E[..., :, None] * E[..., None, :] * Bx
                + E[..., :, None] * Bj[..., None, :]
                + E[..., None, :] * Bj[..., :, None]
                + Bjk
            ),
            axis=1,
        )
        ddb += np.sum(
            gx
            * (
                (E[..., :, None] * Eb[..., None, :] - eye / 4.0) * Bx
                + E[..., :, None] * Bbj[..., None, :]
                + Eb[..., None, :] * Bj[..., :, None]
                + Bjkb
            ),
            axis=1,
        )
        dbdb += np.sum(
            gx
            * (
                Eb[..., :, None] * Eb[..., None, :] * Bx
                + Eb[..., :, None] * Bbj[..., None, :]
                + Eb[..., None, :] * Bbj[..., :, None]
                + Bbjk
            ),
            axis=1,
        )
    return Jet(w, value, d, db, dd, ddb, dbdb)


def _periodized_terms(
    quotient: TorusQuotient,
    k: int,
    centers_z: np.ndarray,
    weights: np.ndarray,
    anchor_z: np.ndarray,
    reach: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Magnetic lattice translates of the given Gaussians within g_k distance `reach` of anchor.

    Translate by lambda = B m contributes eps(m) * exp(i/2 Im<q, sigma*lambda>) * s_{p+lambda}.
    """
    sigma = math.sqrt(k * NU)
    basis = quotient.period_basis
    smin = float(np.linalg.svd(basis, compute_uv=False).min())
    T = int(math.ceil(reach / (sigma * smin))) + 1
    dim = 2 * quotient.n
    offsets = np.array(list(itertools.product(range(-T, T + 1), repeat=dim)), dtype=int)
    x_anchor = quotient.lattice_coords(anchor_z[None, :])[0]
    w_anchor = anchor_z * sigma
    out_centers, out_coeffs = [], []
    x_centers = quotient.lattice_coords(centers_z)
    chunk = max(1, 20_000 // len(offsets))
    for start in range(0, len(centers_z), chunk):
        xc = x_centers[start : start + chunk]
        zc = centers_z[start : start + chunk]
        wt = weights[start : start + chunk]
        m0 = np.round(x_anchor[None, :] - xc).astype(int)
        ms = m0[:, None, :] + offsets[None, :, :]
        lam = quotient.from_lattice_coords(ms.astype(float))
        translated = (zc[:, None, :] + lam) * sigma
        keep = np.linalg.norm(translated - w_anchor, axis=-1) <= reach
        if not np.any(keep):
            continue
        q = np.broadcast_to(zc[:, None, :] * sigma, translated.shape)
        phase = 0.5 * np.imag(np.sum(q * (lam * sigma).conj(), axis=-1))
        eps = quotient.epsilon(ms, k)
        coeff = wt[:, None] * eps * np.exp(1j * phase)
        out_centers.append(translated[keep])
        out_coeffs.append(coeff[keep])
    if not out_centers:
        return np.zeros((0, quotient.n), dtype=complex), np.zeros(0, dtype=complex)
    return np.concatenate(out_centers), np.concatenate(out_coeffs)


@dataclass(frozen=True)
class ExpansionTerm:
    center: tuple
    weight: complex
    averaged: bool = False

    def center_array(self) -> np.ndarray:
        return np.array(self.center, dtype=complex)


@dataclass(frozen=True, eq=False)
class SectionExpansion(Section):
    """s = base + sum_i w_i * s_{k,p_i}; terms are (possibly periodized) peak sections."""

    domain: Domain
    k: int
    mode: Mode = "gaussian"
    terms: tuple = ()
    base: Optional[Section] = None
    tail_tol: float = TAIL_TOL

    @property
    def centers(self) -> np.ndarray:
        if not self.terms:
            return np.zeros((0, self.n), dtype=complex)
        return np.array([t.center for t in self.terms], dtype=complex)

    @property
    def weights(self) -> np.ndarray:
        return np.array([t.weight for t in self.terms], dtype=complex)

    @property
    def total_weight(self) -> float:
        own = float(np.sum(np.abs(self.weights))) if self.terms else 0.0
        if isinstance(self.base, SectionExpansion):
            return own + self.base.total_weight
        return own

    def sorted_terms(self) -> tuple:
        return tuple(
            sorted(self.terms, key=lambda t: tuple((c.real, c.imag) for c in t.center))
        )

    def with_terms(self, extra: Sequence[ExpansionTerm]) -> "SectionExpansion":
        return replace(self, terms=self.terms + tuple(extra))

    def scaled(self, factor: complex) -> "SectionExpansion":
        if self.base is not None and not isinstance(self.base, SectionExpansion):
            raise TypeError("only expansion bases can be rescaled")
        base = self.base.scaled(factor) if self.base is not None else None
        terms = tuple(replace(t, weight=t.weight * factor) for t in self.terms)
        return replace(self, terms=terms, base=base)

    def plus(self, other: "SectionExpansion") -> "SectionExpansion":
        flat = other.flattened()
        return replace(self.flattened(), terms=self.flattened().terms + flat.terms)

    def flattened(self) -> "SectionExpansion":
        if self.base is None:
            return self
        if not isinstance(self.base, SectionExpansion):
            raise TypeError("cannot flatten a non-expansion base")
        inner = self.base.flattened()
        return replace(self, terms=inner.terms + self.terms, base=None)

    def jet(self, points: np.ndarray, order: int = 1) -> Jet:
        pts = _as_points(points, self.n)
        w = pts * self.scale
        ordered = self.sorted_terms()
        centers = np.array([t.center for t in ordered], dtype=complex).reshape(-1, self.n)
        weights = np.array([t.weight for t in ordered], dtype=complex)
        cutoff = self.k if self.mode == "cutoff" else None
        if self.mode == "periodized":
            jet = self._periodized_jet(pts, centers, weights, order)
        else:
            jet = _gaussian_jet(w, centers * self.scale, weights, order, cutoff)
        if self.base is not None:
            jet = jet + self.base.jet(pts, order)
        return jet

    def _periodized_jet(self, pts, centers, weights, order) -> Jet:
        quotient = self.domain
        sigma = self.scale
        w = pts * sigma
        m, n = w.shape
        empty = _gaussian_jet(w, np.zeros((0, n), dtype=complex), np.zeros(0, complex), order, None)
        if len(centers) == 0 or m == 0:
            return empty
        reach_tail = truncation_radius(self.tail_tol)
        longest = float(np.max(np.linalg.norm(quotient.period_basis, axis=0)))
        spectral = float(np.linalg.norm(quotient.period_basis, 2))
        bins = max(1, int(math.ceil(sigma * longest / 2.0)))
        x = quotient.lattice_coords(pts)
        keys = np.floor(x * bins).astype(int)
        cell_radius = sigma * spectral * math.sqrt(2 * n) / (2 * bins)
        order_idx = np.lexsort(keys.T[::-1])
        sorted_keys = keys[order_idx]
        boundaries = np.nonzero(np.any(np.diff(sorted_keys, axis=0) != 0, axis=1))[0] + 1
        groups = np.split(order_idx, boundaries)
        value = empty.value.copy()
        d, db = empty.d.copy(), empty.db.copy()
        second = order >= 2
        dd = empty.dd.copy() if second else None
        ddb = empty.ddb.copy() if second else None
        dbdb = empty.dbdb.copy() if second else None
        for idx in groups:
            anchor = quotient.from_lattice_coords((keys[idx[0]] + 0.5) / bins)
            tc, tw = _periodized_terms(
                quotient, self.k, centers, weights, anchor, reach_tail + cell_radius
            )
            part = _gaussian_jet(w[idx], tc, tw, order, None)
            value[idx] = part.value
            d[idx] = part.d
            db[idx] = part.db
            if second:
                dd[idx], ddb[idx], dbdb[idx] = part.dd, part.ddb, part.dbdb
        return Jet(w, value, d, db, dd, ddb, dbdb)

    def to_json(self) -> dict:
        flat = self.flattened()
        return {
            "mode": self.mode,
            "k": self.k,
            "n": self.n,
            "tail_tol": self.tail_tol,
            "terms": [
                {
                    "center": [[float(c.real), float(c.imag)] for c in t.center],
                    "weight": [float(complex(t.weight).real), float(complex(t.weight).imag)],
                    "averaged": t.averaged,
                }
                for t in flat.terms
            ],
        }

    @classmethod
    def from_json(cls, data: dict, domain: Domain) -> "SectionExpansion":
        terms = tuple(
            ExpansionTerm(
                tuple(complex(re, im) for re, im in t["center"]),
                complex(*t["weight"]),
                bool(t.get("averaged", False)),
            )
            for t in data["terms"]
        )
        return cls(domain, int(data["k"]), data["mode"], terms, None, float(data.get("tail_tol", TAIL_TOL)))


@dataclass(frozen=True, eq=False)
class PeakSection(Section):
    domain: Domain
    center: np.ndarray
    k: int
    mode: Mode = "gaussian"
    tail_tol: float = TAIL_TOL

    @property
    def cutoff_radius(self) -> float:
        return self.k ** (1.0 / 6.0)

    @property
    def truncation(self) -> float:
        return truncation_radius(self.tail_tol)

    def as_expansion(self, weight: complex = 1.0) -> SectionExpansion:
        term = ExpansionTerm(tuple(complex(c) for c in self.center), complex(weight))
        return SectionExpansion(self.domain, self.k, self.mode, (term,), None, self.tail_tol)

    def jet(self, points: np.ndarray, order: int = 1) -> Jet:
        return self.as_expansion().jet(points, order)


def peak_section(domain: Domain, p: np.ndarray, k: int, mode: Mode = "gaussian", tail_tol: float = TAIL_TOL) -> PeakSection:
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    center = np.asarray(p, dtype=complex).reshape(domain.n)
    if isinstance(domain, ModelChart):
        if mode == "periodized":
            raise CenterOutsideDomain("periodized peaks live on a torus quotient, not a chart")
        if not bool(ModelChart(domain.n, k, domain.action, domain.chart_radius).contains(center)[0]):
            raise CenterOutsideDomain(f"Center {center} lies outside the chart of g_k radius {domain.chart_radius}")
    elif mode != "periodized":
        raise CenterOutsideDomain("torus sections must be periodized")
    return PeakSection(domain, center, k, mode, tail_tol)


def orbit_with_stabilizer(domain: Domain, point: np.ndarray, tol: float = 1e-9) -> tuple[list, int]:
    """Images rho(h)^{-1} p for every h (with repetitions) and |H_p| (modulo Lambda on a torus)."""
    group = domain.group
    images = [group.act(group.inverse(h), point[None, :])[0] for h in range(group.order)]
    if isinstance(domain, TorusQuotient):
        stab = sum(
            1 for img in images if domain.distance(img[None, :], point[None, :])[0] <= tol
        )
    else:
        stab = sum(1 for img in images if np.linalg.norm(img - point) <= tol)
    return images, stab


def equivariant_average(peak: PeakSection, action: Optional[FiniteUnitaryAction] = None, weight: complex = 1.0) -> SectionExpansion:
    """(1/|H_p|) * sum_h h^* s_{k,p}, with h^* s_{k,p} = s_{k, rho(h)^{-1} p}."""
    domain = peak.domain
    action = action or domain.group
    if action.dimension != domain.n:
        raise ActionDoesNotPreserveDomain(
            f"Group acts on C^{action.dimension} but the domain is C^{domain.n}"
        )
    if isinstance(domain, TorusQuotient) and not domain.preserves_lattice():
        raise ActionDoesNotPreserveDomain("The group does not preserve the period lattice")
    images, stab = orbit_with_stabilizer(domain, peak.center)
    terms = tuple(
        ExpansionTerm(tuple(complex(c) for c in img), complex(weight) / stab, True) for img in images
    )
    return SectionExpansion(domain, peak.k, peak.mode, terms, None, peak.tail_tol)


def evaluate(section: Section, z: np.ndarray) -> FieldValue:
    return section.evaluate(z)


def pullback_check(section: Section, action: FiniteUnitaryAction, points: np.ndarray) -> float:
    """max_{g, z} |s(g z) - s(z)| (the lift of g to L^k is s -> s o rho(g))."""
    pts = _as_points(points, section.n)
    if len(pts) == 0:
        return 0.0
    base = section.values(pts)
    worst = 0.0
    for h in action.non_identity():
        moved = section.values(action.act(h, pts))
        worst = max(worst, float(np.max(np.abs(moved - base))))
    return worst


def sample_ball(n: int, radius_gk: float, spacing_gk: float, center: Optional[np.ndarray] = None, scale: float = 1.0) -> np.ndarray:
    """Grid points (z coordinates) of a g_k ball of given radius with given g_k spacing."""
    ticks = np.arange(-radius_gk, radius_gk + 1e-12, spacing_gk)
    mesh = np.array(list(itertools.product(ticks, repeat=2 * n)))
    mesh = mesh[np.linalg.norm(mesh, axis=1) <= radius_gk + 1e-12]
    pts = real_to_complex(mesh) / scale
    if center is not None:
        pts = pts + np.asarray(center)[None, :]
    return pts


def sup_norms(section: Section, points: np.ndarray, refine: bool = True) -> dict:
    field = section.evaluate(points)
    second = section.second_order(points)
    columns = {
        "s": field.norm,
        "grad": field.grad_norm,
        "dbar": field.dbar_norm,
        "grad_dbar": second.nabla_dbar_norm,
    }
    result = {name: float(np.max(col)) if len(col) else 0.0 for name, col in columns.items()}
    if refine and len(points):
        result = _refine_sups(section, points, columns, result)
    return result


def _refine_sups(section, points, columns, result):
    """Polish each grid maximum by a local search so narrow peaks are not missed."""
    n = section.n
    scale = section.scale

    def make_objective(name):
        def objective(x):
            z = real_to_complex(x[None, :]) / scale
            if name in ("s", "grad", "dbar"):
                f = section.evaluate(z)
                val = {"s": f.norm, "grad": f.grad_norm, "dbar": f.dbar_norm}[name][0]
            else:
                val = section.second_order(z).nabla_dbar_norm[0]
            return -float(val)

        return objective

    for name, col in columns.items():
        best = int(np.argmax(col))
        x0 = complex_to_real(points[best][None, :])[0] * scale
        res = minimize(make_objective(name), x0, method="Nelder-Mead", options={"xatol": 1e-4, "fatol": 1e-14, "maxiter": 400})
        result[name] = max(result[name], -float(res.fun))
    return result


def asymptotic_profile(
    builder: Callable[[int], Section],
    k_list: Sequence[int],
    spacing: float = 0.1,
    radius: Optional[Callable[[int], float]] = None,
    center: Optional[np.ndarray] = None,
) -> dict:
    """Per-k sup norms of |s|, |grad s|, |dbar s|, |grad dbar s| and fitted log-log slopes."""
    if not k_list:
        raise ValueError("k_list must not be empty")
    rows = []
    for k in k_list:
        section = builder(k)
        r = radius(k) if radius else max(3.0, 1.1 * k ** (1.0 / 6.0))
        c = center if center is not None else np.zeros(section.n, dtype=complex)
        pts = sample_ball(section.n, r, spacing, c, section.scale)
        norms = sup_norms(section, pts)
        norms["k"] = int(k)
        rows.append(norms)
        logger.info(
            f"Profile k={k}: |s|={norms['s']:.3e} |grad|={norms['grad']:.3e} "
            f"|dbar|={norms['dbar']:.3e} |grad dbar|={norms['grad_dbar']:.3e}"
        )
    exponents = {}
    ks = np.log(np.array([row["k"] for row in rows], dtype=float))
    for name in ("s", "grad", "dbar", "grad_dbar"):
        vals = np.array([row[name] for row in rows])
        if len(rows) >= 2 and np.all(vals > 1e-14):
            exponents[name] = float(np.polyfit(ks, np.log(vals), 1)[0])
        else:
            exponents[name] = None
    return {"rows": rows, "exponents": exponents}


def peak_bounds(section: Section, center: np.ndarray, radius_gk: float = 8.0, spacing: float = 0.1) -> dict:
    """Measured constants C in |s| <= C e^{-d^2/5} and |grad s| <= C (1 + d) e^{-d^2/5}."""
    pts = sample_ball(section.n, radius_gk, spacing, center, section.scale)
    field = section.evaluate(pts)
    dist = np.linalg.norm(pts - np.asarray(center)[None, :], axis=-1) * section.scale
    envelope = np.exp(-(dist**2) / 5.0)
    return {
        "value_constant": float(np.max(field.norm / envelope)),
        "gradient_constant": float(np.max(field.grad_norm / ((1.0 + dist) * envelope))),
    }
