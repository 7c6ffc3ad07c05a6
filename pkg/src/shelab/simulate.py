"""Explicit finite-difference integrator for du = 1/2 u_xx dt + sigma(u) dW.

One path of the equation with flat initial data u0 = 1 is produced on a
truncated domain [-L, L] by the standard explicit Euler / centered-difference
scheme driven by iid N(0, dt*dx) cell increments of space-time white noise:

    u[m+1, j] = u[m, j] + dt/(2 dx^2) * (u[m, j+1] - 2 u[m, j] + u[m, j-1])
                + sigma(u[m, j]) * dW[m, j] / dx

Boundaries are pinned at 1 (the mean of the solution), with the domain
margin L >= R_max + 6 sqrt(T) making the truncation error negligible next
to Monte Carlo noise.  Noise is drawn from a counter-based generator keyed
by (master_seed, path_id), so every path is bit-reproducible no matter how
work is scheduled.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox

from . import backend

_U64 = 1 << 64

PATH_DUMP_MAGIC = b"SHE1"
PATH_DUMP_HEADER = struct.Struct("<4sII d d 4x")  # 32 bytes


class StabilityError(ValueError):
    """Grid violates an explicit-scheme or localization constraint."""


class PathAbortedError(RuntimeError):
    """A path produced a non-finite value and was stopped."""

    def __init__(self, path_id: int, step: int, node: int):
        super().__init__(
            f"path {path_id} aborted: non-finite value at step {step}, node {node}"
        )
        self.path_id = path_id
        self.step = step
        self.node = node


@dataclass(frozen=True)
class GridSpec:
    """Space-time grid on [0, T] x [-L, L] with averaging budget R_max."""

    T: float
    nt: int
    L: float
    nx: int
    R_max: float

    def __post_init__(self):
        if self.T <= 0 or self.L <= 0 or self.R_max <= 0:
            raise StabilityError("T, L and R_max must be positive")
        if self.nt < 2 or self.nx < 2:
            raise StabilityError("nt and nx must both be >= 2")
        slack = 1.0 + 1e-12
        if self.dt > (self.dx * self.dx / 2.0) * slack:
            raise StabilityError(
                f"explicit scheme unstable: dt <= dx^2/2 violated "
                f"(dt = {self.dt:.6g}, dx^2/2 = {self.dx * self.dx / 2.0:.6g})"
            )
        margin = self.R_max + 6.0 * math.sqrt(self.T)
        if self.L * slack < margin:
            raise StabilityError(
                f"localization margin violated: L >= R_max + 6*sqrt(T) requires "
                f"L >= {margin:.6g}, got L = {self.L:.6g}"
            )

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.nx

    @classmethod
    def from_resolution(
        cls,
        T: float,
        R_max: float,
        dx: float,
        L: float | None = None,
        dt: float | None = None,
    ) -> "GridSpec":
        """Build a grid from target spacings.

        L defaults to the localization margin R_max + 6 sqrt(T); dt defaults
        to the stability bound dx^2/2.  nx is kept even so that x = 0 is a
        node, and the realized spacings never exceed the targets.
        """
        if L is None:
            L = R_max + 6.0 * math.sqrt(T)
        nx = 2 * math.ceil(L / dx - 1e-12)
        real_dx = 2.0 * L / nx
        if dt is None:
            dt = real_dx * real_dx / 2.0
        nt = math.ceil(T / dt - 1e-9)
        return cls(T=T, nt=nt, L=L, nx=nx, R_max=R_max)

    def x_nodes(self) -> np.ndarray:
        return -self.L + self.dx * np.arange(self.nx + 1)

    def time_index(self, t: float) -> int:
        """Nearest time-grid index for t, with an off-grid warning."""
        idx = round(t / self.dt)
        if not 0 <= idx <= self.nt:
            raise ValueError(f"time {t} outside [0, T = {self.T}]")
        if abs(idx * self.dt - t) > 1e-9 * max(1.0, self.T):
            import warnings

            warnings.warn(
                f"time {t} snapped to nearest grid node {idx * self.dt:.9g}",
                stacklevel=3,
            )
        return idx

    def window_slice(self, R: float) -> tuple[int, int]:
        """Node index range [j0, j1] covering [-R, R], nearest-node snapped."""
        if R > self.R_max * (1.0 + 1e-12):
            raise ValueError(
                f"R = {R} exceeds R_max = {self.R_max}; truncation margin not designed for it"
            )
        half = round(R / self.dx)
        if abs(half * self.dx - R) > 1e-9 * max(1.0, R):
            import warnings

            warnings.warn(f"R = {R} snapped to nearest node {half * self.dx:.9g}", stacklevel=3)
        center = self.nx // 2
        return center - half, center + half


_SIGMA_KINDS = ("constant", "linear", "affine", "sine")


@dataclass(frozen=True)
class SigmaSpec:
    """Diffusion coefficient sigma(u) with its Lipschitz bound.

    kinds: ``constant`` sigma = c (additive noise), ``linear`` sigma = u
    (parabolic Anderson), ``affine`` sigma = a + b u, ``sine`` sigma = sin(u)
    (bounded smooth preset).
    """

    kind: str
    c: float = 1.0
    a: float = 0.0
    b: float = 1.0
    lipschitz_bound: float = field(default=-1.0)

    def __post_init__(self):
        if self.kind not in _SIGMA_KINDS:
            raise ValueError(f"unknown sigma kind {self.kind!r}; expected one of {_SIGMA_KINDS}")
        canonical = self._canonical_lipschitz()
        if self.lipschitz_bound < 0:
            object.__setattr__(self, "lipschitz_bound", canonical)
        elif self.lipschitz_bound < canonical * (1.0 - 1e-12):
            raise ValueError(
                f"lipschitz_bound {self.lipschitz_bound} is not a valid Lipschitz "
                f"constant for kind {self.kind!r} (needs >= {canonical})"
            )

    def _canonical_lipschitz(self) -> float:
        if self.kind == "constant":
            return 0.0
        if self.kind == "linear":
            return 1.0
        if self.kind == "affine":
            return abs(self.b)
        return 1.0  # |cos| <= 1

    def kernel_params(self) -> tuple[int, float, float]:
        """(kind id, pa, pb) consumed by the stepping kernels."""
        if self.kind == "constant":
            return 0, self.c, 0.0
        if self.kind == "linear":
            return 1, 0.0, 0.0
        if self.kind == "affine":
            return 2, self.a, self.b
        return 3, 0.0, 0.0

    def at_one(self) -> float:
        return float(sigma_eval(self, 1.0))

    def is_degenerate(self) -> bool:
        """True when sigma(1) = 0, the case where Var may fail to grow."""
        return self.at_one() == 0.0


def sigma_eval(spec: SigmaSpec, u):
    """sigma(u) for a scalar or array u."""
    if spec.kind == "constant":
        return spec.c if np.isscalar(u) else np.full_like(np.asarray(u, float), spec.c)
    if spec.kind == "linear":
        return u
    if spec.kind == "affine":
        return spec.a + spec.b * u
    return np.sin(u)


@dataclass(frozen=True)
class NoiseField:
    """White-noise cell increments for one path: iid N(0, dt*dx)."""

    increments: np.ndarray
    master_seed: int
    path_id: int


@dataclass(frozen=True)
class PathField:
    """One simulated solution u on the grid nodes, shape (nt+1, nx+1)."""

    values: np.ndarray
    grid: GridSpec


def derive_stream(master_seed: int, path_id: int) -> tuple[int, int]:
    """Counter-based generator key for a path: the pair (seed, path) itself.

    Distinct pairs are distinct 128-bit Philox keys and therefore
    statistically independent streams.
    """
    if not 0 <= master_seed < _U64:
        raise ValueError("master_seed must fit in an unsigned 64-bit integer")
    if not 0 <= path_id < _U64:
        raise ValueError("path_id must fit in an unsigned 64-bit integer")
    return master_seed, path_id


def stream_generator(master_seed: int, path_id: int) -> Generator:
    return Generator(Philox(key=list(derive_stream(master_seed, path_id))))


def sample_noise(grid: GridSpec, master_seed: int, path_id: int) -> NoiseField:
    """Draw the full (nt, nx) increment array for one path.

    The array is a pure function of (master_seed, path_id, grid): the Philox
    counter enumerates (step, cell) positions in row-major order.
    """
    gen = stream_generator(master_seed, path_id)
    scale = math.sqrt(grid.dt * grid.dx)
    increments = gen.standard_normal((grid.nt, grid.nx))
    increments *= scale
    return NoiseField(increments=increments, master_seed=master_seed, path_id=path_id)


def integrate_path(
    grid: GridSpec,
    sigma: SigmaSpec,
    master_seed: int,
    path_id: int,
    backend_name: str | None = None,
) -> PathField:
    """Integrate one path; bit-reproducible for fixed (grid, sigma, seed, id)."""
    noise = sample_noise(grid, master_seed, path_id)
    values = integrate_from_noise(grid, sigma, noise.increments, path_id, backend_name)
    return PathField(values=values, grid=grid)


def integrate_from_noise(
    grid: GridSpec,
    sigma: SigmaSpec,
    increments: np.ndarray,
    path_id: int = 0,
    backend_name: str | None = None,
) -> np.ndarray:
    if increments.shape != (grid.nt, grid.nx):
        raise ValueError(
            f"noise shape {increments.shape} does not match grid ({grid.nt}, {grid.nx})"
        )
    kind, pa, pb = sigma.kernel_params()
    c = grid.dt / (2.0 * grid.dx * grid.dx)
    inv_dx = 1.0 / grid.dx
    u = np.empty((grid.nt + 1, grid.nx + 1), dtype=np.float64)
    u[0, :] = 1.0
    step = backend.resolve(backend_name)
    bad = step(np.ascontiguousarray(increments), c, inv_dx, kind, pa, pb, u)
    if bad is not None:
        raise PathAbortedError(path_id, bad[0], bad[1])
    return u


def write_path_dump(path: PathField, file) -> None:
    """Raw binary dump: 32-byte header then row-major float64 node values."""
    g = path.grid
    file.write(PATH_DUMP_HEADER.pack(PATH_DUMP_MAGIC, g.nt, g.nx, g.T, g.L))
    file.write(np.ascontiguousarray(path.values, dtype="<f8").tobytes())


def read_path_dump(file) -> tuple[np.ndarray, dict]:
    header = file.read(PATH_DUMP_HEADER.size)
    magic, nt, nx, T, L = PATH_DUMP_HEADER.unpack(header)
    if magic != PATH_DUMP_MAGIC:
        raise ValueError(f"not a path dump (magic {magic!r})")
    data = np.frombuffer(file.read(), dtype="<f8").reshape(nt + 1, nx + 1)
    return data, {"nt": nt, "nx": nx, "T": T, "L": L}
