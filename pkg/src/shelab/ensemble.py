"""Deterministic parallel Monte Carlo over paths, with mergeable summaries.

Paths are processed in fixed-size blocks; each block reduces its paths to
exact partial sums (see accum.ExactSum) plus bounded reservoirs, and blocks
merge in index order.  Because every accumulator is exactly mergeable, the
final summary is a pure function of the configuration: worker count, thread
timing and checkpoint placement cannot change a single bit.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
import zlib
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field

import numpy as np

from .accum import ExactSum, Reservoir, path_priority
from .simulate import GridSpec, PathAbortedError, SigmaSpec, integrate_path, sigma_eval

BLOCK_PATHS = 128  # accumulation granularity, independent of worker count
CHECKPOINT_MAGIC = b"SHEE"
CHECKPOINT_VERSION = 1
MAX_ABORT_FRACTION = 1e-3
DEFAULT_RESERVOIR_CAP = 65536


class EnsembleError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt, truncated or from a different config."""


@dataclass(frozen=True)
class EnsembleConfig:
    """Everything a Monte Carlo run depends on."""

    grid: GridSpec
    sigma: SigmaSpec
    n_paths: int
    master_seed: int
    observation_times: tuple[float, ...]
    R_values: tuple[float, ...]
    record_xi: bool = True
    reservoir_cap: int = DEFAULT_RESERVOIR_CAP

    def __post_init__(self):
        object.__setattr__(self, "observation_times", tuple(float(t) for t in self.observation_times))
        object.__setattr__(self, "R_values", tuple(float(r) for r in self.R_values))
        if self.n_paths < 0:
            raise ValueError("n_paths must be >= 0")
        if not self.observation_times:
            raise ValueError("at least one observation time is required")
        if list(self.observation_times) != sorted(set(self.observation_times)):
            raise ValueError("observation_times must be strictly increasing")
        for t in self.observation_times:
            if not 0.0 < t <= self.grid.T * (1 + 1e-12):
                raise ValueError(f"observation time {t} outside (0, T = {self.grid.T}]")
        if not self.R_values:
            raise ValueError("at least one averaging half-width R is required")
        if list(self.R_values) != sorted(set(self.R_values)):
            raise ValueError("R_values must be strictly increasing")
        for r in self.R_values:
            if r <= 0:
                raise ValueError("R values must be positive")
            if r > self.grid.R_max * (1 + 1e-12):
                raise ValueError(f"R = {r} exceeds grid R_max = {self.grid.R_max}")

    def canonical_text(self) -> str:
        g, s = self.grid, self.sigma
        lines = [
            f"grid = T={g.T!r} nt={g.nt} L={g.L!r} nx={g.nx} R_max={g.R_max!r}",
            f"sigma = kind={s.kind} c={s.c!r} a={s.a!r} b={s.b!r} lip={s.lipschitz_bound!r}",
            f"n_paths = {self.n_paths}",
            f"master_seed = {self.master_seed}",
            f"observation_times = {','.join(repr(t) for t in self.observation_times)}",
            f"R_values = {','.join(repr(r) for r in self.R_values)}",
            f"record_xi = {self.record_xi}",
            f"reservoir_cap = {self.reservoir_cap}",
        ]
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> int:
        digest = hashlib.sha256(self.canonical_text().encode()).digest()
        return int.from_bytes(digest[:8], "little")


def _moment_keys(config: EnsembleConfig):
    """Canonical accumulator names, in serialization order."""
    keys = []
    nR = len(config.R_values)
    nT = len(config.observation_times)
    for i in range(nR):
        for k in range(nT):
            keys.append(f"m1/{i}/{k}")
            keys.append(f"m2/{i}/{k}")
        for k in range(nT):
            for l in range(k + 1, nT):
                keys.append(f"cross/{i}/{k}/{l}")
                keys.append(f"d2/{i}/{k}/{l}")
                keys.append(f"d4/{i}/{k}/{l}")
    if config.record_xi:
        for k in range(nT):
            keys.append(f"xi1/{k}")
            keys.append(f"xi2/{k}")
    return keys


class EnsembleSummary:
    """Mergeable moment sums, reservoirs and abort accounting for one config."""

    def __init__(self, config: EnsembleConfig):
        self.config = config
        self.fingerprint = config.fingerprint()
        self.sums: dict[str, ExactSum] = {k: ExactSum() for k in _moment_keys(config)}
        self.reservoirs: dict[str, Reservoir] = {
            f"res/{i}/{k}": Reservoir(config.reservoir_cap)
            for i in range(len(config.R_values))
            for k in range(len(config.observation_times))
        }
        self.n_paths_done = 0
        self.n_ok = 0
        self.n_aborted = 0
        self.aborts: list[tuple[int, int, int]] = []
        self.ranges: list[tuple[int, int]] = []  # covered path-id intervals

    def _add_range(self, lo: int, hi: int) -> None:
        for a, b in self.ranges:
            if lo < b and a < hi:
                raise EnsembleError(
                    f"path ranges overlap: [{lo}, {hi}) collides with [{a}, {b})"
                )
        merged = sorted(self.ranges + [(lo, hi)])
        out = [merged[0]]
        for a, b in merged[1:]:
            if a == out[-1][1]:
                out[-1] = (out[-1][0], b)
            else:
                out.append((a, b))
        self.ranges = out

    def next_path(self) -> int:
        """First unsimulated path id; requires contiguous coverage from 0."""
        if not self.ranges:
            return 0
        if len(self.ranges) != 1 or self.ranges[0][0] != 0:
            raise EnsembleError(f"summary coverage {self.ranges} is not a prefix [0, n)")
        return self.ranges[0][1]

    # -- indexing helpers ------------------------------------------------

    def _ri(self, R: float) -> int:
        for i, r in enumerate(self.config.R_values):
            if abs(r - R) <= 1e-9 * max(1.0, R):
                return i
        raise KeyError(f"R = {R} not recorded; available: {self.config.R_values}")

    def _ti(self, t: float) -> int:
        for k, tt in enumerate(self.config.observation_times):
            if abs(tt - t) <= 1e-9 * max(1.0, t):
                return k
        raise KeyError(f"t = {t} not recorded; available: {self.config.observation_times}")

    # -- statistics ------------------------------------------------------

    @property
    def count(self) -> int:
        return self.n_ok

    def moment_sum(self, key: str) -> float:
        return self.sums[key].value()

    def mean(self, R: float, t: float) -> float:
        i, k = self._ri(R), self._ti(t)
        return self.moment_sum(f"m1/{i}/{k}") / self.n_ok

    def variance(self, R: float, t: float) -> float:
        i, k = self._ri(R), self._ti(t)
        n = self.n_ok
        s1 = self.moment_sum(f"m1/{i}/{k}")
        s2 = self.moment_sum(f"m2/{i}/{k}")
        return (s2 - s1 * s1 / n) / (n - 1)

    def covariance(self, R: float, t1: float, t2: float) -> float:
        i = self._ri(R)
        k, l = self._ti(t1), self._ti(t2)
        if k == l:
            return self.variance(R, t1)
        if k > l:
            k, l = l, k
        n = self.n_ok
        s12 = self.moment_sum(f"cross/{i}/{k}/{l}")
        s1 = self.moment_sum(f"m1/{i}/{k}")
        s2 = self.moment_sum(f"m1/{i}/{l}")
        return (s12 - s1 * s2 / n) / (n - 1)

    def increment_moment(self, p: int, R: float, s: float, t: float) -> float:
        """Raw moment E|G_R(t) - G_R(s)|^p, p in {2, 4}."""
        if p not in (2, 4):
            raise ValueError("only p = 2 and p = 4 increments are recorded")
        i = self._ri(R)
        k, l = self._ti(s), self._ti(t)
        if k == l:
            return 0.0
        if k > l:
            k, l = l, k
        return self.moment_sum(f"d{p}/{i}/{k}/{l}") / self.n_ok

    def xi_estimate(self, t: float) -> tuple[float, float]:
        """(mean, standard error) of the windowed sigma(u)^2 average at t."""
        if not self.config.record_xi:
            raise EnsembleError("xi accumulators were not recorded for this run")
        k = self._ti(t)
        n = self.n_ok
        s1 = self.moment_sum(f"xi1/{k}")
        s2 = self.moment_sum(f"xi2/{k}")
        mean = s1 / n
        var = max((s2 - s1 * s1 / n) / (n - 1), 0.0)
        return mean, math.sqrt(var / n)

    def samples(self, R: float, t: float) -> np.ndarray:
        i, k = self._ri(R), self._ti(t)
        return np.array(self.reservoirs[f"res/{i}/{k}"].values())

    def split_samples(self, R: float, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Disjoint halves (even path ids, odd path ids) of the reservoir."""
        i, k = self._ri(R), self._ti(t)
        items = self.reservoirs[f"res/{i}/{k}"].items()
        even = np.array([v for (_, pid, v) in items if pid % 2 == 0])
        odd = np.array([v for (_, pid, v) in items if pid % 2 == 1])
        return even, odd

    # -- merging ---------------------------------------------------------

    def merge(self, other: "EnsembleSummary") -> "EnsembleSummary":
        """Exact in-place merge of a summary over a disjoint path range."""
        if self.fingerprint != other.fingerprint:
            raise EnsembleError("cannot merge: config fingerprints differ")
        for lo, hi in other.ranges:
            self._add_range(lo, hi)
        for key, acc in other.sums.items():
            self.sums[key].merge(acc)
        for key, res in other.reservoirs.items():
            self.reservoirs[key].merge(res)
        self.n_paths_done += other.n_paths_done
        self.n_ok += other.n_ok
        self.n_aborted += other.n_aborted
        self.aborts = (self.aborts + other.aborts)[:100]
        return self

    # -- serialization ---------------------------------------------------

    def to_json_dict(self) -> dict:
        moments = {key: acc.value() for key, acc in self.sums.items()}
        return {
            "schema_version": 1,
            "fingerprint": f"{self.fingerprint:016x}",
            "n_paths_done": self.n_paths_done,
            "n_ok": self.n_ok,
            "n_aborted": self.n_aborted,
            "R_values": list(self.config.R_values),
            "observation_times": list(self.config.observation_times),
            "moment_sums": moments,
        }

    def save(self, path) -> None:
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", CHECKPOINT_VERSION))
        buf.write(struct.pack("<Q", self.fingerprint))
        meta = {
            "config_text": self.config.canonical_text(),
            "n_paths_done": self.n_paths_done,
            "n_ok": self.n_ok,
            "n_aborted": self.n_aborted,
            "aborts": self.aborts,
            "ranges": self.ranges,
        }
        _write_block(buf, "meta", json.dumps(meta, sort_keys=True).encode())
        for key in sorted(self.sums):
            _write_block(buf, f"sum/{key}", np.array(self.sums[key].partials, "<f8").tobytes())
        for key in sorted(self.reservoirs):
            items = self.reservoirs[key].items()
            rec = np.array(items, dtype=[("prio", "<u8"), ("pid", "<u8"), ("val", "<f8")])
            _write_block(buf, key, rec.tobytes())
        payload = buf.getvalue()
        payload += struct.pack("<I", zlib.crc32(payload))
        tmp = str(path) + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path, config: EnsembleConfig | None = None) -> "EnsembleSummary":
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < 20:
            raise CheckpointError("checkpoint truncated: shorter than the fixed header")
        body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
        if zlib.crc32(body) != crc:
            raise CheckpointError("checkpoint corrupt: CRC mismatch")
        buf = io.BytesIO(body)
        if buf.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError("not an ensemble checkpoint (bad magic)")
        (version,) = struct.unpack("<I", buf.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (fingerprint,) = struct.unpack("<Q", buf.read(8))
        blocks = {}
        while True:
            item = _read_block(buf)
            if item is None:
                break
            blocks[item[0]] = item[1]
        meta = json.loads(blocks.pop("meta").decode())
        if config is None:
            config = _config_from_canonical_text(meta["config_text"])
        summary = cls(config)
        if summary.fingerprint != fingerprint:
            raise CheckpointError(
                "checkpoint belongs to a different configuration "
                f"(fingerprint {fingerprint:016x} != {summary.fingerprint:016x})"
            )
        summary.n_paths_done = int(meta["n_paths_done"])
        summary.n_ok = int(meta["n_ok"])
        summary.n_aborted = int(meta["n_aborted"])
        summary.aborts = [tuple(a) for a in meta["aborts"]]
        summary.ranges = [tuple(r) for r in meta["ranges"]]
        for key in summary.sums:
            data = blocks.pop(f"sum/{key}", None)
            if data is None:
                raise CheckpointError(f"checkpoint missing accumulator block sum/{key}")
            summary.sums[key] = ExactSum(np.frombuffer(data, "<f8").tolist())
        for key in summary.reservoirs:
            data = blocks.pop(key, None)
            if data is None:
                raise CheckpointError(f"checkpoint missing reservoir block {key}")
            rec = np.frombuffer(data, dtype=[("prio", "<u8"), ("pid", "<u8"), ("val", "<f8")])
            summary.reservoirs[key] = Reservoir(
                config.reservoir_cap,
                [(int(p), int(i), float(v)) for p, i, v in rec],
            )
        if blocks:
            raise CheckpointError(f"checkpoint has unknown blocks: {sorted(blocks)}")
        return summary


def _write_block(buf, name: str, payload: bytes) -> None:
    encoded = name.encode()
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)


def _read_block(buf):
    head = buf.read(2)
    if not head:
        return None
    (name_len,) = struct.unpack("<H", head)
    name = buf.read(name_len).decode()
    (size,) = struct.unpack("<Q", buf.read(8))
    payload = buf.read(size)
    if len(payload) != size:
        raise CheckpointError(f"checkpoint truncated inside block {name!r}")
    return name, payload


def _config_from_canonical_text(text: str) -> EnsembleConfig:
    fields = {}
    for line in text.strip().splitlines():
        key, _, value = line.partition(" = ")
        fields[key] = value
    gparts = dict(p.split("=", 1) for p in fields["grid"].split())
    sparts = dict(p.split("=", 1) for p in fields["sigma"].split())
    grid = GridSpec(
        T=float(gparts["T"]),
        nt=int(gparts["nt"]),
        L=float(gparts["L"]),
        nx=int(gparts["nx"]),
        R_max=float(gparts["R_max"]),
    )
    sigma = SigmaSpec(
        kind=sparts["kind"],
        c=float(sparts["c"]),
        a=float(sparts["a"]),
        b=float(sparts["b"]),
        lipschitz_bound=float(sparts["lip"]),
    )
    return EnsembleConfig(
        grid=grid,
        sigma=sigma,
        n_paths=int(fields["n_paths"]),
        master_seed=int(fields["master_seed"]),
        observation_times=tuple(float(v) for v in fields["observation_times"].split(",")),
        R_values=tuple(float(v) for v in fields["R_values"].split(",")),
        record_xi=fields["record_xi"] == "True",
        reservoir_cap=int(fields["reservoir_cap"]),
    )


# -- path reduction -------------------------------------------------------


def summarize_path(values: np.ndarray, config: EnsembleConfig) -> tuple[np.ndarray, np.ndarray]:
    """Reduce one path field to (G values [R x t], xi window means [t])."""
    grid = config.grid
    dx = grid.dx
    t_idx = [grid.time_index(t) for t in config.observation_times]
    windows = [grid.window_slice(R) for R in config.R_values]
    G = np.empty((len(windows), len(t_idx)))
    for k, mi in enumerate(t_idx):
        row = values[mi]
        for i, (j0, j1) in enumerate(windows):
            seg = row[j0 : j1 + 1]
            integral = (seg.sum() - 0.5 * (seg[0] + seg[-1])) * dx
            G[i, k] = integral - (j1 - j0) * dx  # minus 2R at node resolution
    xi = np.empty(len(t_idx))
    if config.record_xi:
        # central 50% of the domain; truncation breaks stationarity near x = +-L
        j0, j1 = grid.nx // 4, 3 * grid.nx // 4
        for k, mi in enumerate(t_idx):
            seg = sigma_eval(config.sigma, values[mi, j0 : j1 + 1])
            if np.isscalar(seg):
                xi[k] = seg * seg
            else:
                xi[k] = float(np.mean(np.square(seg)))
    return G, xi


@dataclass
class _BlockResult:
    index: int
    start: int
    stop: int
    n_ok: int
    partials: dict[str, tuple[float, ...]]
    reservoir: dict[str, list[tuple[int, int, float]]]
    aborts: list[tuple[int, int, int]] = field(default_factory=list)


def _run_block(config: EnsembleConfig, index: int, start: int, stop: int) -> _BlockResult:
    sums = {k: ExactSum() for k in _moment_keys(config)}
    reservoir = {
        f"res/{i}/{k}": []
        for i in range(len(config.R_values))
        for k in range(len(config.observation_times))
    }
    aborts = []
    n_ok = 0
    nT = len(config.observation_times)
    for pid in range(start, stop):
        try:
            path = integrate_path(config.grid, config.sigma, config.master_seed, pid)
        except PathAbortedError as exc:
            aborts.append((pid, exc.step, exc.node))
            continue
        G, xi = summarize_path(path.values, config)
        prio = path_priority(config.master_seed, pid)
        for i in range(len(config.R_values)):
            for k in range(nT):
                g = float(G[i, k])
                sums[f"m1/{i}/{k}"].add(g)
                sums[f"m2/{i}/{k}"].add(g * g)
                reservoir[f"res/{i}/{k}"].append((prio, pid, g))
            for k in range(nT):
                for l in range(k + 1, nT):
                    gk, gl = float(G[i, k]), float(G[i, l])
                    d = gl - gk
                    sums[f"cross/{i}/{k}/{l}"].add(gk * gl)
                    sums[f"d2/{i}/{k}/{l}"].add(d * d)
                    sums[f"d4/{i}/{k}/{l}"].add(d * d * d * d)
        if config.record_xi:
            for k in range(nT):
                v = float(xi[k])
                sums[f"xi1/{k}"].add(v)
                sums[f"xi2/{k}"].add(v * v)
        n_ok += 1
    return _BlockResult(
        index=index,
        start=start,
        stop=stop,
        n_ok=n_ok,
        partials={k: tuple(acc.partials) for k, acc in sums.items()},
        reservoir=reservoir,
        aborts=aborts,
    )


def _absorb_block(summary: EnsembleSummary, block: _BlockResult) -> None:
    summary._add_range(block.start, block.stop)
    for key, partials in block.partials.items():
        summary.sums[key].merge(ExactSum(partials))
    for key, entries in block.reservoir.items():
        res = summary.reservoirs[key]
        for prio, pid, val in entries:
            res.add(prio, pid, val)
    summary.n_paths_done += block.stop - block.start
    summary.n_ok += block.n_ok
    summary.n_aborted += len(block.aborts)
    summary.aborts = (summary.aborts + block.aborts)[:100]


def resolve_workers(workers: int | None = None) -> int:
    """Explicit argument, then SHELAB_WORKERS, then the CPU count."""
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("SHELAB_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def run_ensemble(
    config: EnsembleConfig,
    workers: int | None = None,
    resume_from: EnsembleSummary | None = None,
    checkpoint_path=None,
    checkpoint_every: int = 16,
) -> EnsembleSummary:
    """Simulate paths [0, n_paths) and accumulate their statistics.

    The result is bit-identical for any worker count.  With resume_from, the
    run continues from the next unsimulated path id.  If checkpoint_path is
    set, the merged prefix is persisted every ``checkpoint_every`` blocks.
    """
    workers = resolve_workers(workers)
    if resume_from is not None:
        if resume_from.fingerprint != config.fingerprint():
            raise EnsembleError("resume summary does not match this configuration")
        summary = resume_from
    else:
        summary = EnsembleSummary(config)
    start = summary.n_paths_done
    if start > config.n_paths:
        raise EnsembleError(
            f"summary already covers {start} paths but config asks for {config.n_paths}"
        )

    edges = list(range(start, config.n_paths, BLOCK_PATHS)) + [config.n_paths]
    blocks = [
        (idx, lo, hi) for idx, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])) if hi > lo
    ]

    def maybe_checkpoint(force=False):
        if checkpoint_path is not None and (force or merged_blocks[0] % checkpoint_every == 0):
            summary.save(checkpoint_path)

    merged_blocks = [0]
    if workers == 1 or len(blocks) <= 1:
        for idx, lo, hi in blocks:
            _absorb_block(summary, _run_block(config, idx, lo, hi))
            merged_blocks[0] += 1
            maybe_checkpoint()
    else:
        pending: dict[int, _BlockResult] = {}
        next_index = 0
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_run_block, config, idx, lo, hi): idx for idx, lo, hi in blocks
            }
            remaining = set(futures)
            while remaining:
                done, remaining = wait(remaining, return_when=FIRST_COMPLETED)
                for fut in done:
                    block = fut.result()
                    pending[block.index] = block
                # merge the contiguous prefix, in block order
                while next_index in pending:
                    _absorb_block(summary, pending.pop(next_index))
                    next_index += 1
                    merged_blocks[0] += 1
                    maybe_checkpoint()
    for key in summary.reservoirs:
        summary.reservoirs[key].finalize()
    if summary.n_paths_done and summary.n_aborted > MAX_ABORT_FRACTION * summary.n_paths_done:
        raise EnsembleError(
            f"{summary.n_aborted} of {summary.n_paths_done} paths aborted "
            f"(> {MAX_ABORT_FRACTION:.1%}); first aborts: {summary.aborts[:5]}"
        )
    if checkpoint_path is not None:
        maybe_checkpoint(force=True)
    return summary


def merge(a: EnsembleSummary, b: EnsembleSummary) -> EnsembleSummary:
    """Merge two summaries over disjoint path ranges into a fresh one."""
    out = EnsembleSummary(a.config)
    out.merge(a)
    out.merge(b)
    return out
