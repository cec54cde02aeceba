"""Time integrators for the particle system and its limits.

The interacting system is integrated by explicit Euler-Maruyama under a
shared finite-dimensional noise: for a finite data measure the cylindrical
Wiener process on L2(theta) reduces exactly to one independent Brownian
channel per data atom, weighted by sqrt(w_p).  Coupled runs (different eps,
different particle counts, tangent systems) consume the identical increment
block, which is what makes the rate experiments variance-free couplings
rather than independent comparisons.

Also here: the discrete SGD chain with its time embedding, the transport
(zero-noise) integrator, and the Picard fixed-point mode that re-solves the
frozen-measure linear equation until the measure path stops moving.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .measures import EmpiricalMeasure, w2

__all__ = [
    "NoisePath",
    "ParticleEnsemble",
    "IntegratorConfig",
    "Trajectory",
    "SimulationError",
    "step_interacting",
    "simulate",
    "simulate_transport",
    "run_sgd",
    "SgdChain",
    "picard_solve",
    "PicardResult",
    "sample_initial",
    "InitialSpec",
    "write_trajectory",
    "seeded_rng",
]


class SimulationError(RuntimeError):
    pass


def seeded_rng(seed: int, tag: str = "") -> np.random.Generator:
    """Deterministic generator for (seed, role); stable across platforms."""
    if tag:
        return np.random.default_rng(np.random.SeedSequence((seed, zlib.crc32(tag.encode()))))
    return np.random.default_rng(np.random.SeedSequence(seed))


class NoisePath:
    """Seeded Gaussian increment block, one channel per data atom.

    ``increments[step, p] ~ Normal(0, dt)`` i.i.d. across (step, p).  A
    coupled pair of runs must hold the same object (or a coarsening of the
    same fine path).  Only (seed, dt, n_steps) ever gets serialized.
    """

    def __init__(self, seed: int, dt: float, n_steps: int, n_channels: int,
                 _increments: np.ndarray | None = None):
        self.seed = int(seed)
        self.dt = float(dt)
        self.n_steps = int(n_steps)
        self.n_channels = int(n_channels)
        if _increments is None:
            rng = seeded_rng(self.seed, "noise")
            _increments = rng.normal(0.0, np.sqrt(self.dt), size=(self.n_steps, self.n_channels))
        self.increments = _increments

    @property
    def meta(self) -> dict:
        return {
            "seed": self.seed,
            "dt": self.dt,
            "n_steps": self.n_steps,
            "n_channels": self.n_channels,
        }

    def coarsened(self, factor: int) -> "NoisePath":
        """Sum consecutive increments in groups of ``factor`` (same Brownian path)."""
        if self.n_steps % factor != 0:
            raise ValueError("coarsening factor must divide the number of steps")
        agg = self.increments.reshape(self.n_steps // factor, factor, self.n_channels).sum(axis=1)
        return NoisePath(self.seed, self.dt * factor, self.n_steps // factor,
                         self.n_channels, _increments=agg)


@dataclass
class ParticleEnsemble:
    """Weighted particles in parameter space with a clock."""

    positions: np.ndarray  # (N, d)
    weights: np.ndarray    # (N,)
    time: float = 0.0

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.positions.shape[0],):
            raise ValueError("one weight per particle required")

    @classmethod
    def uniform(cls, positions: np.ndarray, time: float = 0.0) -> "ParticleEnsemble":
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        n = positions.shape[0]
        return cls(positions, np.full(n, 1.0 / n), time)

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def as_measure(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.positions, self.weights)

    # coefficient evaluators duck-type on .atoms/.weights
    @property
    def atoms(self) -> np.ndarray:
        return self.positions


@dataclass(frozen=True)
class IntegratorConfig:
    """Step size, horizon and noise scale for the Euler-Maruyama solver."""

    dt: float
    horizon: float
    eps: float = 0.0
    scheme: str = "euler-maruyama"
    snapshot_stride: int = 1

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.scheme != "euler-maruyama":
            raise ValueError(f"unknown scheme {self.scheme!r}")
        ratio = self.horizon / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("horizon must be an integer multiple of dt")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass
class Trajectory:
    """Recorded snapshots of an ensemble path plus reproducibility metadata."""

    times: np.ndarray       # (S,)
    positions: np.ndarray   # (S, N, d)
    weights: np.ndarray     # (N,)
    dt: float
    eps: float
    snapshot_stride: int
    noise_meta: dict | None = None

    @property
    def n_snapshots(self) -> int:
        return self.times.shape[0]

    def ensemble_at(self, index: int) -> ParticleEnsemble:
        return ParticleEnsemble(self.positions[index].copy(), self.weights, float(self.times[index]))

    def measure_at(self, index: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.positions[index], self.weights)

    @property
    def is_full_resolution(self) -> bool:
        return self.snapshot_stride == 1


def _check_finite(X: np.ndarray, step: int, time: float):
    if not np.all(np.isfinite(X)):
        bad = int(np.count_nonzero(~np.isfinite(X).all(axis=1)))
        raise SimulationError(
            f"non-finite state at step {step} (t={time:.6g}): {bad} particle(s) diverged"
        )


def step_interacting(ens: ParticleEnsemble, coeffs, cfg: IntegratorConfig,
                     dB: np.ndarray | None) -> ParticleEnsemble:
    """One Euler-Maruyama step; every particle reads the pre-step ensemble
    and the same increment row (common noise)."""
    X = ens.positions
    drift = coeffs.drift(X, ens)
    newX = X + drift * cfg.dt
    if cfg.eps > 0.0:
        if dB is None:
            raise SimulationError("eps > 0 requires a noise increment row")
        if dB.shape != (coeffs.n_channels,):
            raise SimulationError(
                f"increment row has {dB.shape} channels, expected ({coeffs.n_channels},)"
            )
        newX = newX + np.sqrt(cfg.eps) * coeffs.noise_increment(X, ens, dB)
    t = ens.time + cfg.dt
    _check_finite(newX, step=int(round(t / cfg.dt)), time=t)
    return ParticleEnsemble(newX, ens.weights, t)


def _record_indices(n_steps: int, stride: int) -> np.ndarray:
    idx = np.arange(0, n_steps + 1, stride)
    if idx[-1] != n_steps:
        idx = np.append(idx, n_steps)
    return idx


def simulate(initial: ParticleEnsemble, coeffs, cfg: IntegratorConfig,
             noise: NoisePath | None) -> Trajectory:
    """Integrate the interacting system; deterministic in (initial, seed, cfg)."""
    n_steps = cfg.n_steps
    if cfg.eps > 0.0:
        if noise is None:
            raise SimulationError("eps > 0 requires a NoisePath")
        if noise.n_steps < n_steps:
            raise SimulationError("noise path shorter than the time horizon")
        if abs(noise.dt - cfg.dt) > 1e-12 * max(1.0, cfg.dt):
            raise SimulationError("noise path dt differs from integrator dt")
    record = _record_indices(n_steps, cfg.snapshot_stride)
    rec_set = set(int(i) for i in record)
    positions = np.empty((record.size, initial.n_particles, initial.dim))
    times = np.empty(record.size)
    ens = ParticleEnsemble(initial.positions.copy(), initial.weights.copy(), initial.time)
    out = 0
    if 0 in rec_set:
        positions[out] = ens.positions
        times[out] = ens.time
        out += 1
    for step in range(n_steps):
        dB = noise.increments[step] if (cfg.eps > 0.0 and noise is not None) else None
        ens = step_interacting(ens, coeffs, cfg, dB)
        if (step + 1) in rec_set:
            positions[out] = ens.positions
            times[out] = ens.time
            out += 1
    return Trajectory(
        times=times,
        positions=positions,
        weights=initial.weights.copy(),
        dt=cfg.dt,
        eps=cfg.eps,
        snapshot_stride=cfg.snapshot_stride,
        noise_meta=noise.meta if noise is not None else None,
    )


def simulate_transport(initial: ParticleEnsemble, coeffs, cfg: IntegratorConfig) -> Trajectory:
    """The eps = 0 limit; consumes no noise."""
    return simulate(initial, coeffs, replace(cfg, eps=0.0), noise=None)


# --------------------------------------------------------------------------
# SGD
# --------------------------------------------------------------------------


@dataclass
class SgdChain:
    """Discrete parameter chain with its measure-path embedding.

    ``positions[k]`` is the parameter state after k steps; the embedded
    measure path evaluates the chain at step floor(M t) (enabled when the
    chain was produced with time_embedding=True).
    """

    positions: np.ndarray  # (steps+1, M, d)
    alpha: float
    batch_size: int
    seed: int
    time_embedding: bool = True

    @property
    def n_steps(self) -> int:
        return self.positions.shape[0] - 1

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]

    def state_at_step(self, k: int) -> np.ndarray:
        return self.positions[min(max(k, 0), self.n_steps)]

    def measure_at_time(self, t: float) -> EmpiricalMeasure:
        if not self.time_embedding:
            raise ValueError("chain was not built with the time embedding")
        k = int(np.floor(self.n_particles * t))
        return EmpiricalMeasure.uniform(self.state_at_step(k))


def run_sgd(coeffs, n_particles: int, alpha: float, batch_size: int, n_steps: int,
            seed: int, initial: np.ndarray, full_batch: bool = False,
            time_embedding: bool = True) -> SgdChain:
    """Mini-batch SGD on the empirical risk in the mean-field normalization.

    The per-sample update for particle i is
    ``x_i += (alpha / P) * sum_{p in batch} (f_p - f^M(x, theta_p)) grad Phi(x_i, theta_p)``,
    whose data-mean is exactly the drift V(x_i, mu^M) and whose centered part
    is exactly the noise direction G; the fluctuation intensity is alpha / P.
    ``full_batch=True`` replaces the sampled batch by the exact expectation
    (deterministic gradient descent).
    """
    if alpha <= 0:
        raise ValueError("learning rate must be positive")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if coeffs.mode != "network":
        raise ValueError("run_sgd needs network-mode coefficients")
    X = np.atleast_2d(np.asarray(initial, dtype=float)).copy()
    if X.shape != (n_particles, coeffs.dim):
        raise ValueError(f"initial parameters must have shape ({n_particles}, {coeffs.dim})")
    rng = seeded_rng(seed, "sgd-batches")
    w = coeffs.channel_weights
    out = np.empty((n_steps + 1, n_particles, coeffs.dim))
    out[0] = X
    for step in range(n_steps):
        ens = ParticleEnsemble.uniform(X)
        if full_batch:
            X = X + alpha * coeffs.drift(X, ens)
        else:
            batch = rng.choice(coeffs.n_channels, size=batch_size, p=w)
            r = coeffs.residuals(ens)
            grad = coeffs.grad_feature_matrix(X)  # (N, P, d)
            step_dir = np.zeros_like(X)
            for p in batch:
                step_dir += r[p] * grad[:, p, :]
            X = X + (alpha / batch_size) * step_dir
        if not np.all(np.isfinite(X)):
            raise SimulationError(f"SGD diverged at step {step + 1}")
        out[step + 1] = X
    return SgdChain(out, alpha=alpha, batch_size=batch_size, seed=seed,
                    time_embedding=time_embedding)


# --------------------------------------------------------------------------
# Picard fixed point
# --------------------------------------------------------------------------


@dataclass
class PicardResult:
    trajectory: Trajectory
    gaps: list
    converged: bool
    iterations: int


def _solve_frozen(initial: ParticleEnsemble, coeffs, cfg: IntegratorConfig,
                  noise: NoisePath | None, frozen: np.ndarray,
                  frozen_weights: np.ndarray) -> np.ndarray:
    """Linear solve with the measure path frozen to ``frozen[step]``."""
    n_steps = cfg.n_steps
    path = np.empty((n_steps + 1, initial.n_particles, initial.dim))
    X = initial.positions.copy()
    path[0] = X
    sqrt_eps = np.sqrt(cfg.eps)
    for step in range(n_steps):
        measure = (frozen[step], frozen_weights)
        drift = coeffs.drift(X, measure)
        newX = X + drift * cfg.dt
        if cfg.eps > 0.0:
            dB = noise.increments[step]
            newX = newX + sqrt_eps * coeffs.noise_increment(X, measure, dB)
        _check_finite(newX, step + 1, (step + 1) * cfg.dt)
        X = newX
        path[step + 1] = X
    return path


def picard_solve(initial: ParticleEnsemble, coeffs, cfg: IntegratorConfig,
                 noise: NoisePath | None, tol: float, max_iter: int = 50) -> PicardResult:
    """Fixed-point iteration on the measure path driving the linear solves.

    Iterate n solves the SDE whose measure argument is the path of iterate
    n-1 (same noise); the gap is sup over steps of W2 between consecutive
    measure paths.  Starts from the constant-in-time initial measure.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n_steps = cfg.n_steps
    if cfg.eps > 0 and (noise is None or noise.n_steps < n_steps):
        raise SimulationError("noise path shorter than the time horizon")
    weights = initial.weights.copy()
    prev = np.repeat(initial.positions[None, :, :], n_steps + 1, axis=0)
    gaps: list[float] = []
    converged = False
    current = prev
    for it in range(1, max_iter + 1):
        current = _solve_frozen(initial, coeffs, cfg, noise, prev, weights)
        gap = 0.0
        for s in range(n_steps + 1):
            g = w2(EmpiricalMeasure(current[s], weights), EmpiricalMeasure(prev[s], weights))
            if g > gap:
                gap = g
        gaps.append(gap)
        prev = current
        if gap < tol:
            converged = True
            break
    record = _record_indices(n_steps, cfg.snapshot_stride)
    traj = Trajectory(
        times=record * cfg.dt,
        positions=current[record],
        weights=weights,
        dt=cfg.dt,
        eps=cfg.eps,
        snapshot_stride=cfg.snapshot_stride,
        noise_meta=noise.meta if noise is not None else None,
    )
    return PicardResult(trajectory=traj, gaps=gaps, converged=converged, iterations=len(gaps))


# --------------------------------------------------------------------------
# initial ensembles
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class InitialSpec:
    """Initial law: uniform box, box-truncated Gaussian, or explicit atoms."""

    kind: str                      # "uniform" | "gaussian" | "atoms"
    low: Sequence[float] | None = None
    high: Sequence[float] | None = None
    mean: Sequence[float] | None = None
    cov: Sequence[Sequence[float]] | float | None = None
    box: float | None = None       # half-width of the truncation box
    atoms: np.ndarray | None = None

    def second_moment(self) -> float:
        """<|x|^2> of the spec (ignoring Gaussian truncation, valid for wide boxes)."""
        if self.kind == "uniform":
            lo = np.asarray(self.low, float)
            hi = np.asarray(self.high, float)
            return float(np.sum((hi**2 + hi * lo + lo**2) / 3.0))
        if self.kind == "gaussian":
            mean = np.asarray(self.mean, float)
            cov = self.cov
            if np.isscalar(cov):
                tr = float(cov) * mean.size
            else:
                tr = float(np.trace(np.asarray(cov, float)))
            return float(mean @ mean + tr)
        if self.kind == "atoms":
            atoms = np.atleast_2d(np.asarray(self.atoms, float))
            return float(np.mean(np.einsum("nd,nd->n", atoms, atoms)))
        raise ValueError(f"unknown initial spec kind {self.kind!r}")


def sample_initial(spec: InitialSpec, n: int, seed: int) -> ParticleEnsemble:
    """N i.i.d. draws with uniform weights, deterministic per seed."""
    rng = seeded_rng(seed, "initial")
    if spec.kind == "atoms":
        atoms = np.atleast_2d(np.asarray(spec.atoms, dtype=float))
        return ParticleEnsemble.uniform(atoms.copy())
    if spec.kind == "uniform":
        lo = np.asarray(spec.low, dtype=float)
        hi = np.asarray(spec.high, dtype=float)
        pts = rng.uniform(lo, hi, size=(n, lo.size))
        return ParticleEnsemble.uniform(pts)
    if spec.kind == "gaussian":
        mean = np.asarray(spec.mean, dtype=float)
        d = mean.size
        cov = spec.cov
        cov = np.eye(d) * float(cov) if np.isscalar(cov) else np.asarray(cov, dtype=float)
        box = spec.box if spec.box is not None else np.inf
        pts = np.empty((n, d))
        filled = 0
        while filled < n:
            draw = rng.multivariate_normal(mean, cov, size=n)
            keep = draw[np.all(np.abs(draw) < box, axis=1)]
            take = min(n - filled, keep.shape[0])
            pts[filled : filled + take] = keep[:take]
            filled += take
        return ParticleEnsemble.uniform(pts)
    raise ValueError(f"unknown initial spec kind {spec.kind!r}")


# --------------------------------------------------------------------------
# trajectory serialization
# --------------------------------------------------------------------------


def write_trajectory(traj: Trajectory, path, tangents: np.ndarray | None = None):
    """Columnar text: step, time, particle id, coordinates (and optional
    tangent columns).  The noise is referenced by metadata only."""
    with open(path, "w", encoding="utf-8") as fh:
        if traj.noise_meta is not None:
            m = traj.noise_meta
            fh.write(f"# noise seed={m['seed']} dt={m['dt']:.17g} steps={m['n_steps']}\n")
        fh.write("# columns: step time pid x1..xd" + (" y1..yd" if tangents is not None else "") + "\n")
        for s in range(traj.n_snapshots):
            step = int(round(traj.times[s] / traj.dt))
            for i in range(traj.positions.shape[1]):
                coords = " ".join(f"{v:.17g}" for v in traj.positions[s, i])
                row = f"{step} {traj.times[s]:.17g} {i} {coords}"
                if tangents is not None:
                    row += " " + " ".join(f"{v:.17g}" for v in tangents[s, i])
                fh.write(row + "\n")
