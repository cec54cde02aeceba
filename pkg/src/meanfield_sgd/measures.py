"""Measure containers and the two metrics the convergence rates live in.

``w2`` is exact where the experiments need it (optimal assignment for
equal-cardinality uniform measures, quantile coupling in one dimension) and
falls back to an entropic approximation otherwise.  The negative-order
Sobolev norm is evaluated spectrally on a periodic box that contains all
atoms: for an atomic or tangent field the Fourier coefficients are exact
finite sums, so no meshing is involved.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "EmpiricalMeasure",
    "SignedAtomicField",
    "SpectralBoxError",
    "SpectralGrid",
    "w2",
    "w2_detailed",
    "moment",
    "sobolev_neg_norm",
    "spectral_coefficients",
    "pair",
    "write_field",
    "read_field",
]

_WEIGHT_TOL = 1e-12


class SpectralBoxError(ValueError):
    """An atom or base point lies outside the open spectral box."""


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted atoms in R^d representing a probability measure."""

    atoms: np.ndarray    # (N, d)
    weights: np.ndarray  # (N,)

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        if atoms.shape[0] == 0:
            raise ValueError("empirical measure needs at least one atom")
        weights = np.asarray(self.weights, dtype=float)
        if weights.shape != (atoms.shape[0],):
            raise ValueError("weights must match the number of atoms")
        if np.any(weights <= 0):
            raise ValueError("weights must be strictly positive")
        if abs(weights.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"weights must sum to 1 (got {weights.sum()!r})")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, atoms: np.ndarray) -> "EmpiricalMeasure":
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        n = atoms.shape[0]
        return cls(atoms, np.full(n, 1.0 / n))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]


class SignedAtomicField:
    """A signed atomic distribution, in one of two representations.

    * atomic: atoms with signed weights, acting as phi -> sum_i s_i phi(X_i)
    * tangent: base points X_i with tangent vectors Y_i and weight 1/N each,
      acting as phi -> (1/N) sum_i grad phi(X_i) . Y_i

    The tangent representation always pairs to zero against constants.
    """

    def __init__(self, kind: str, atoms: np.ndarray, payload: np.ndarray):
        if kind not in ("atomic", "tangent"):
            raise ValueError(f"unknown field kind {kind!r}")
        self.kind = kind
        self.atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        payload = np.asarray(payload, dtype=float)
        if kind == "atomic":
            if payload.shape != (self.atoms.shape[0],):
                raise ValueError("atomic field needs one signed weight per atom")
        else:
            payload = np.atleast_2d(payload)
            if payload.shape != self.atoms.shape:
                raise ValueError("tangent field needs one tangent vector per base point")
        self.payload = payload

    @classmethod
    def atomic(cls, atoms: np.ndarray, signed_weights: np.ndarray) -> "SignedAtomicField":
        return cls("atomic", atoms, signed_weights)

    @classmethod
    def tangent(cls, base: np.ndarray, tangents: np.ndarray) -> "SignedAtomicField":
        return cls("tangent", base, tangents)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def scaled(self, c: float) -> "SignedAtomicField":
        return SignedAtomicField(self.kind, self.atoms, c * self.payload)


@dataclass(frozen=True)
class SpectralGrid:
    """Periodic box and frequency cutoff for the H^{-J} surrogate norm."""

    r_box: float
    k_max: int
    j: int

    def __post_init__(self):
        if self.r_box <= 0:
            raise ValueError("r_box must be positive")
        if self.k_max < 8:
            raise ValueError("k_max must be at least 8")
        if self.j < 1:
            raise ValueError("sobolev order j must be a positive integer")


# --------------------------------------------------------------------------
# Wasserstein-2
# --------------------------------------------------------------------------

_ASSIGNMENT_MAX = 2000


def _w2_quantile_1d(xa, wa, xb, wb) -> float:
    """Exact squared W2 between weighted 1-d measures via CDF coupling."""
    ia = np.argsort(xa, kind="stable")
    ib = np.argsort(xb, kind="stable")
    xa, wa = xa[ia], wa[ia]
    xb, wb = xb[ib], wb[ib]
    ca = np.cumsum(wa)
    cb = np.cumsum(wb)
    # merge the two sets of CDF breakpoints; between consecutive levels both
    # quantile functions are constant
    levels = np.union1d(ca, cb)
    levels = levels[levels <= 1.0 + 1e-15]
    segs = np.diff(np.concatenate(([0.0], levels)))
    mids = levels - 0.5 * segs
    qa = xa[np.minimum(np.searchsorted(ca, mids, side="right"), xa.size - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, mids, side="right"), xb.size - 1)]
    return float(np.sum(segs * (qa - qb) ** 2))


def _w2_assignment(xa: np.ndarray, xb: np.ndarray) -> float:
    """Exact squared W2 for equal-cardinality uniform measures."""
    # lexicographic presort fixes the coupling when costs tie
    xa = xa[np.lexsort(xa.T[::-1])]
    xb = xb[np.lexsort(xb.T[::-1])]
    diff = xa[:, None, :] - xb[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / xa.shape[0])


def _w2_sinkhorn(xa, wa, xb, wb, reg_scale: float = 1e-3, max_iter: int = 5000,
                 tol: float = 1e-10) -> tuple[float, dict]:
    diff = xa[:, None, :] - xb[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    diameter2 = cost.max()
    if diameter2 == 0.0:
        return 0.0, {"backend": "sinkhorn", "reg": 0.0, "marginal_error": 0.0}
    reg = reg_scale * diameter2
    log_k = -cost / reg
    log_u = np.zeros(len(wa))
    log_v = np.zeros(len(wb))
    log_wa = np.log(wa)
    log_wb = np.log(wb)
    err = np.inf
    for _ in range(max_iter):
        log_u = log_wa - _logsumexp_rows(log_k + log_v[None, :])
        log_v = log_wb - _logsumexp_rows((log_k + log_u[:, None]).T)
        plan = np.exp(log_u[:, None] + log_k + log_v[None, :])
        err = abs(plan.sum(axis=1) - wa).max()
        if err < tol:
            break
    value = float(np.sum(plan * cost))
    return value, {"backend": "sinkhorn", "reg": reg, "marginal_error": float(err)}


def _logsumexp_rows(m: np.ndarray) -> np.ndarray:
    mx = m.max(axis=1)
    return mx + np.log(np.exp(m - mx[:, None]).sum(axis=1))


def w2_detailed(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> tuple[float, dict]:
    """Wasserstein-2 distance plus backend information.

    Equal-cardinality uniform measures (up to 2000 atoms) use exact optimal
    assignment; one-dimensional measures use exact quantile coupling;
    everything else uses entropic regularization with the regularization and
    marginal error reported alongside.
    """
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if mu.dim == 1:
        val = _w2_quantile_1d(mu.atoms[:, 0], mu.weights, nu.atoms[:, 0], nu.weights)
        return float(np.sqrt(max(val, 0.0))), {"backend": "quantile"}
    uniform = (
        mu.n_atoms == nu.n_atoms
        and np.allclose(mu.weights, 1.0 / mu.n_atoms, atol=1e-12)
        and np.allclose(nu.weights, 1.0 / nu.n_atoms, atol=1e-12)
    )
    if uniform and mu.n_atoms <= _ASSIGNMENT_MAX:
        val = _w2_assignment(mu.atoms, nu.atoms)
        return float(np.sqrt(max(val, 0.0))), {"backend": "assignment"}
    val, info = _w2_sinkhorn(mu.atoms, mu.weights, nu.atoms, nu.weights)
    return float(np.sqrt(max(val, 0.0))), info


def w2(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    return w2_detailed(mu, nu)[0]


def moment(mu: EmpiricalMeasure, p: int) -> float:
    """<|x|^p, mu> for p in {2, 4}."""
    if p not in (2, 4):
        raise ValueError("moment order p must be 2 or 4")
    norms2 = np.einsum("nd,nd->n", mu.atoms, mu.atoms)
    return float(mu.weights @ (norms2 if p == 2 else norms2**2))


# --------------------------------------------------------------------------
# spectral negative Sobolev norm
# --------------------------------------------------------------------------


def _check_in_box(points: np.ndarray, r_box: float):
    if points.size and np.max(np.abs(points)) >= r_box:
        raise SpectralBoxError(
            f"atom at |coordinate| {np.max(np.abs(points)):.6g} outside the open box "
            f"(-{r_box:.6g}, {r_box:.6g})^d"
        )


def _tail_warning(grid: SpectralGrid, dim: int):
    tail = (1.0 + (np.pi * grid.k_max / grid.r_box) ** 2) ** (-grid.j + dim / 2.0)
    if tail > 1e-8:
        warnings.warn(
            f"k_max={grid.k_max} leaves a relative spectral tail ~{tail:.2e} (> 1e-8); "
            "increase k_max or j",
            stacklevel=3,
        )


def spectral_coefficients(field: SignedAtomicField, grid: SpectralGrid) -> np.ndarray:
    """Fourier coefficients <e^{-i pi k . x / R}, f> on the truncated lattice.

    Returns a complex array of shape (2*k_max+1,)*dim indexed by k in
    {-k_max..k_max}^dim.  Exact finite sums over atoms; for the tangent
    representation the test function gradient is applied analytically.
    """
    _check_in_box(field.atoms, grid.r_box)
    dim = field.dim
    k = np.arange(-grid.k_max, grid.k_max + 1)
    # per-axis phase matrices exp(-i pi k x_a / R): (N, n_modes)
    phases = [
        np.exp(-1j * np.pi * np.outer(field.atoms[:, a], k) / grid.r_box)
        for a in range(dim)
    ]
    if field.kind == "atomic":
        return _contract_weighted(phases, field.payload)
    # tangent: (1/N) sum_i (-i pi k / R) . Y_i e^{-i pi k . X_i / R}
    n = field.atoms.shape[0]
    factor = -1j * np.pi / grid.r_box
    total = None
    for a in range(dim):
        coeff_a = _contract_weighted(phases, field.payload[:, a] / n)
        shape = [1] * dim
        shape[a] = k.size
        coeff_a = coeff_a * (factor * k).reshape(shape)
        total = coeff_a if total is None else total + coeff_a
    return total


def _contract_weighted(phases: list[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """sum_i s_i prod_a phases[a][i, k_a] via successive matrix products."""
    dim = len(phases)
    if dim == 1:
        return phases[0].T @ weights.astype(complex)
    if dim == 2:
        return (phases[0] * weights[:, None]).T @ phases[1]
    acc = weights.astype(complex)
    letters = "klmqrs"
    operands = [acc]
    spec = ["i"]
    for a in range(dim):
        operands.append(phases[a])
        spec.append(f"i{letters[a]}")
    out = "".join(letters[:dim])
    return np.einsum(",".join(spec) + "->" + out, *operands)


def _sobolev_weights(grid: SpectralGrid, dim: int) -> np.ndarray:
    k = np.arange(-grid.k_max, grid.k_max + 1)
    k2_axes = (np.pi * k / grid.r_box) ** 2
    total = np.zeros((k.size,) * dim)
    for a in range(dim):
        shape = [1] * dim
        shape[a] = k.size
        total = total + k2_axes.reshape(shape)
    return (1.0 + total) ** (-grid.j)


def sobolev_neg_norm(field: SignedAtomicField, grid: SpectralGrid) -> float:
    """Truncated spectral H^{-J} norm of a signed atomic or tangent field."""
    _tail_warning(grid, field.dim)
    coeffs = spectral_coefficients(field, grid)
    weights = _sobolev_weights(grid, field.dim)
    norm2 = np.sum(np.abs(coeffs) ** 2 * weights) / (2.0 * grid.r_box) ** field.dim
    return float(np.sqrt(max(norm2, 0.0)))


def sobolev_neg_norm_diff(
    field_a: SignedAtomicField, field_b: SignedAtomicField, grid: SpectralGrid
) -> float:
    """H^{-J} norm of field_a - field_b without forming the combined field."""
    if field_a.dim != field_b.dim:
        raise ValueError("field dimension mismatch")
    _tail_warning(grid, field_a.dim)
    coeffs = spectral_coefficients(field_a, grid) - spectral_coefficients(field_b, grid)
    weights = _sobolev_weights(grid, field_a.dim)
    norm2 = np.sum(np.abs(coeffs) ** 2 * weights) / (2.0 * grid.r_box) ** field_a.dim
    return float(np.sqrt(max(norm2, 0.0)))


# --------------------------------------------------------------------------
# pairing with test functions
# --------------------------------------------------------------------------


def pair(field: SignedAtomicField, phi) -> float:
    """<phi, f>: atomic fields pair by values, tangent fields by gradients.

    ``phi`` must expose ``value(points)`` and, for tangent fields,
    ``grad(points)`` (see diagnostics.TestFunction).
    """
    if field.kind == "atomic":
        vals = np.asarray(phi.value(field.atoms), dtype=float)
        return float(field.payload @ vals)
    grads = np.asarray(phi.grad(field.atoms), dtype=float)
    n = field.atoms.shape[0]
    return float(np.einsum("nd,nd->", grads, field.payload) / n)


# --------------------------------------------------------------------------
# columnar text serialization
# --------------------------------------------------------------------------


def write_field(field: SignedAtomicField, path):
    """Columnar text: a tag line, then one row per atom."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# field kind={field.kind} dim={field.dim}\n")
        for i in range(field.atoms.shape[0]):
            coords = " ".join(f"{v:.17g}" for v in field.atoms[i])
            if field.kind == "atomic":
                fh.write(f"{coords} {field.payload[i]:.17g}\n")
            else:
                tang = " ".join(f"{v:.17g}" for v in field.payload[i])
                fh.write(f"{coords} {tang}\n")


def read_field(path) -> SignedAtomicField:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        rows = np.loadtxt(fh, ndmin=2)
    tags = dict(part.split("=") for part in header.lstrip("# ").split() if "=" in part)
    kind = tags["kind"]
    dim = int(tags["dim"])
    atoms = rows[:, :dim]
    payload = rows[:, dim] if kind == "atomic" else rows[:, dim:]
    return SignedAtomicField(kind, atoms, payload)
