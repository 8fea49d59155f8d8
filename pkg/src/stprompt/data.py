"""Dataset ingestion, normalization, patching, and mask construction.

A dataset on disk is a directory with a ``meta.json`` file referencing an
adjacency CSV and a raw float32 signal payload (see :func:`load_dataset`).
In memory, signals live in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-6


class DatasetError(ValueError):
    """Raised when a dataset violates its format or invariants."""


@dataclass
class Graph:
    """Sensor graph: node set plus normalized weighted adjacency."""

    num_nodes: int
    adjacency: np.ndarray  # N x N, weights in [0, 1]
    node_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DatasetError(f"adjacency must be square, got {a.shape}")
        if a.shape[0] != self.num_nodes:
            raise DatasetError(
                f"dimension mismatch: num_nodes={self.num_nodes} but adjacency is {a.shape[0]}x{a.shape[1]}"
            )
        if self.num_nodes < 1:
            raise DatasetError("graph needs at least one node")
        if not np.all(np.isfinite(a)):
            raise DatasetError("adjacency contains non-finite entries")
        if a.min() < 0.0 or a.max() > 1.0:
            raise DatasetError("adjacency out of range [0, 1]")
        self.adjacency = a
        if not self.node_ids:
            self.node_ids = [str(i) for i in range(self.num_nodes)]
        elif len(self.node_ids) != self.num_nodes:
            raise DatasetError(
                f"dimension mismatch: {len(self.node_ids)} node_ids for {self.num_nodes} nodes"
            )


@dataclass
class SignalTensor:
    """Raw sensor readings on a uniform clock.

    values: N x T x d_x in physical units. Timestamps are implied by
    (start_epoch, interval): step t occurs at start_epoch + t * interval.
    """

    values: np.ndarray
    start_epoch: int
    interval: int  # seconds per step
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise DatasetError(f"values must be N x T x d_x, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DatasetError("signal contains non-finite values")
        if self.interval <= 0:
            raise DatasetError("interval must be positive")
        self.values = v
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(v.shape[2])]

    @property
    def num_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def num_steps(self) -> int:
        return self.values.shape[1]

    @property
    def num_channels(self) -> int:
        return self.values.shape[2]

    def slice_steps(self, start: int, stop: int) -> "SignalTensor":
        """Time-window view [start, stop) with a shifted epoch."""
        return SignalTensor(
            values=self.values[:, start:stop, :],
            start_epoch=self.start_epoch + start * self.interval,
            interval=self.interval,
            channel_names=list(self.channel_names),
        )

    def select_nodes(self, idx: np.ndarray) -> "SignalTensor":
        return SignalTensor(
            values=self.values[np.asarray(idx)],
            start_epoch=self.start_epoch,
            interval=self.interval,
            channel_names=list(self.channel_names),
        )


@dataclass
class NormStats:
    """Per-channel mean/std in signal units. std is floored away from zero."""

    mean: np.ndarray  # (d_x,)
    std: np.ndarray  # (d_x,)

    @classmethod
    def fit(cls, signal: SignalTensor) -> "NormStats":
        """Compute stats over all nodes and steps of the given split.

        Raises DatasetError for a channel whose std falls below the floor
        (a degenerate, constant channel).
        """
        v = signal.values
        mean = v.mean(axis=(0, 1))
        std = v.std(axis=(0, 1))
        if np.any(std < STD_FLOOR):
            bad = int(np.argmin(std))
            raise DatasetError(f"degenerate channel {bad}: std {std[bad]:.3g} below floor")
        return cls(mean=mean, std=std)

    @classmethod
    def identity(cls, num_channels: int) -> "NormStats":
        return cls(mean=np.zeros(num_channels), std=np.ones(num_channels))


def zscore(signal: SignalTensor, stats: NormStats) -> SignalTensor:
    if np.any(stats.std < STD_FLOOR):
        raise DatasetError("degenerate channel: std below floor")
    return SignalTensor(
        values=(signal.values - stats.mean) / stats.std,
        start_epoch=signal.start_epoch,
        interval=signal.interval,
        channel_names=list(signal.channel_names),
    )


def unzscore(signal: SignalTensor, stats: NormStats) -> SignalTensor:
    return SignalTensor(
        values=signal.values * stats.std + stats.mean,
        start_epoch=signal.start_epoch,
        interval=signal.interval,
        channel_names=list(signal.channel_names),
    )


@dataclass
class PatchSet:
    """Non-overlapping per-node patches of a signal.

    patch_values: N x T_p x (L * d_x), channel-major within a patch so that
    entry [i, t, s * d_x + c] is step t*L+s, channel c of node i.
    tod_index / dow_index describe the first step of each patch.
    """

    patch_values: np.ndarray
    patch_len: int
    num_channels: int
    tod_index: np.ndarray  # (T_p,) ints in [0, 24)
    dow_index: np.ndarray  # (T_p,) ints in [0, 7), 0 = Monday
    start_epoch: int
    interval: int

    @property
    def num_nodes(self) -> int:
        return self.patch_values.shape[0]

    @property
    def num_patches(self) -> int:
        return self.patch_values.shape[1]


def time_features(signal: SignalTensor, patch_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Hour-of-day and day-of-week (0=Monday) of each patch's first step.

    Patch spans that divide a day evenly (e.g. one hour) keep the indices
    aligned across days; other spans drift but stay well-defined.
    """
    span = signal.interval * patch_len
    num_patches = signal.num_steps // patch_len
    tod = np.empty(num_patches, dtype=np.int64)
    dow = np.empty(num_patches, dtype=np.int64)
    for t in range(num_patches):
        dt = datetime.fromtimestamp(signal.start_epoch + t * span, tz=timezone.utc)
        tod[t] = dt.hour
        dow[t] = dt.weekday()
    return tod, dow


def patchify(signal: SignalTensor, patch_len: int) -> PatchSet:
    """Split each node's series into non-overlapping patches of patch_len steps."""
    n, t_raw, d_x = signal.values.shape
    if patch_len < 1:
        raise DatasetError("patch length must be >= 1")
    if t_raw % patch_len != 0:
        raise DatasetError(
            f"length not divisible by patch size: {t_raw} steps, patch {patch_len}"
        )
    t_p = t_raw // patch_len
    values = signal.values.reshape(n, t_p, patch_len * d_x)
    tod, dow = time_features(signal, patch_len)
    return PatchSet(
        patch_values=values,
        patch_len=patch_len,
        num_channels=d_x,
        tod_index=tod,
        dow_index=dow,
        start_epoch=signal.start_epoch,
        interval=signal.interval,
    )


def unpatchify(patches: PatchSet) -> SignalTensor:
    """Exact inverse of patchify."""
    n, t_p, width = patches.patch_values.shape
    d_x = patches.num_channels
    if width != patches.patch_len * d_x:
        raise DatasetError("malformed patch set: width != patch_len * channels")
    values = patches.patch_values.reshape(n, t_p * patches.patch_len, d_x)
    return SignalTensor(
        values=values,
        start_epoch=patches.start_epoch,
        interval=patches.interval,
    )


@dataclass
class MaskSpec:
    """Union-structured mask: patch (i, t) is masked iff i in masked_nodes or t in masked_steps.

    eval_cells optionally restricts the loss/metric positions to an explicit
    subset of masked (node, step) pairs; None means all masked cells.
    """

    num_nodes: int
    num_steps: int
    masked_nodes: np.ndarray  # sorted unique node indices
    masked_steps: np.ndarray  # sorted unique patch indices
    eval_cells: np.ndarray | None = None  # (K, 2) rows of (node, step)

    def __post_init__(self):
        self.masked_nodes = np.unique(np.asarray(self.masked_nodes, dtype=np.int64))
        self.masked_steps = np.unique(np.asarray(self.masked_steps, dtype=np.int64))
        if self.masked_nodes.size and (
            self.masked_nodes[0] < 0 or self.masked_nodes[-1] >= self.num_nodes
        ):
            raise DatasetError("masked node index out of range")
        if self.masked_steps.size and (
            self.masked_steps[0] < 0 or self.masked_steps[-1] >= self.num_steps
        ):
            raise DatasetError("masked step index out of range")
        if self.num_unmasked_nodes < 1 or self.num_unmasked_steps < 1:
            raise DatasetError("mask leaves no unmasked input for the encoder")
        if self.eval_cells is not None:
            cells = np.asarray(self.eval_cells, dtype=np.int64).reshape(-1, 2)
            grid = self.masked_grid()
            if not np.all(grid[cells[:, 0], cells[:, 1]]):
                raise DatasetError("eval_cells must be a subset of masked cells")
            self.eval_cells = cells

    @property
    def num_unmasked_nodes(self) -> int:
        return self.num_nodes - self.masked_nodes.size

    @property
    def num_unmasked_steps(self) -> int:
        return self.num_steps - self.masked_steps.size

    def unmasked_nodes(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.num_nodes), self.masked_nodes)

    def unmasked_steps(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.num_steps), self.masked_steps)

    def masked_grid(self) -> np.ndarray:
        """Boolean N x T_p grid of masked cells."""
        grid = np.zeros((self.num_nodes, self.num_steps), dtype=bool)
        grid[self.masked_nodes, :] = True
        grid[:, self.masked_steps] = True
        return grid

    def eval_cell_array(self) -> np.ndarray:
        """eval_cells, defaulting to every masked cell in row-major order."""
        if self.eval_cells is not None:
            return self.eval_cells
        rows, cols = np.nonzero(self.masked_grid())
        return np.stack([rows, cols], axis=1)

    def masked_fraction(self) -> float:
        total = self.num_nodes * self.num_steps
        unmasked = self.num_unmasked_nodes * self.num_unmasked_steps
        return 1.0 - unmasked / total


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def sample_random_mask(
    num_nodes: int,
    num_steps: int,
    total_ratio: float,
    rng: np.random.Generator,
) -> MaskSpec:
    """Sample node and step subsets so the union masks total_ratio of patches.

    The per-dimension ratio r solves (1 - r)^2 = 1 - total_ratio, i.e. both
    dimensions carry an equal share; counts use round-half-up.
    """
    if not 0.0 <= total_ratio < 1.0:
        raise DatasetError(f"total masking ratio must be in [0, 1), got {total_ratio}")
    r = 1.0 - np.sqrt(1.0 - total_ratio)
    n_mask = _round_half_up(r * num_nodes)
    t_mask = _round_half_up(r * num_steps)
    if num_nodes - n_mask < 1 or num_steps - t_mask < 1:
        raise DatasetError(
            f"ratio {total_ratio} leaves no unmasked input for {num_nodes}x{num_steps}"
        )
    masked_nodes = rng.choice(num_nodes, size=n_mask, replace=False)
    masked_steps = rng.choice(num_steps, size=t_mask, replace=False)
    return MaskSpec(
        num_nodes=num_nodes,
        num_steps=num_steps,
        masked_nodes=masked_nodes,
        masked_steps=masked_steps,
    )


def gather_unmasked(patches, mask: MaskSpec):
    """Compact the unmasked block out of an N x T_p x d array (numpy or torch).

    Returns (block, node_map, step_map) where block has shape
    [..., N_u, T_u, d], and block[..., a, b, :] == patches[..., node_map[a],
    step_map[b], :]. Leading batch dims pass through.
    """
    node_map = mask.unmasked_nodes()
    step_map = mask.unmasked_steps()
    block = patches[..., node_map[:, None], step_map[None, :], :]
    return block, node_map, step_map


def scatter_unmasked(block, node_map, step_map, full):
    """Inverse of gather_unmasked: write block back into full (in place)."""
    full[..., node_map[:, None], step_map[None, :], :] = block
    return full


# --- on-disk format ---------------------------------------------------------

META_KEYS = {
    "num_nodes",
    "num_steps",
    "num_channels",
    "interval_seconds",
    "start_epoch",
    "adjacency_file",
    "values_file",
    "node_ids",
}


def load_dataset(meta_path: str | Path) -> tuple[Graph, SignalTensor]:
    """Load a dataset directory via its meta file.

    The values payload is raw little-endian float32, row-major
    [node][time][channel]: node i, step t, channel c sits at byte offset
    4 * ((i * T + t) * d_x + c).
    """
    meta_path = Path(meta_path)
    if meta_path.is_dir():
        meta_path = meta_path / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"missing file: {meta_path}")
    meta = json.loads(meta_path.read_text())
    missing = META_KEYS - set(meta)
    if missing:
        raise DatasetError(f"meta file missing keys: {sorted(missing)}")

    n = int(meta["num_nodes"])
    t = int(meta["num_steps"])
    d_x = int(meta["num_channels"])
    base = meta_path.parent

    adj_path = base / meta["adjacency_file"]
    if not adj_path.exists():
        raise DatasetError(f"missing file: {adj_path}")
    adjacency = np.loadtxt(adj_path, delimiter=",", dtype=np.float64, ndmin=2)
    if adjacency.shape != (n, n):
        raise DatasetError(
            f"dimension mismatch: meta declares {n} nodes, adjacency is {adjacency.shape}"
        )

    values_path = base / meta["values_file"]
    if not values_path.exists():
        raise DatasetError(f"missing file: {values_path}")
    raw = np.fromfile(values_path, dtype="<f4")
    if raw.size != n * t * d_x:
        raise DatasetError(
            f"dimension mismatch: payload holds {raw.size} values, meta implies {n * t * d_x}"
        )
    values = raw.reshape(n, t, d_x).astype(np.float64)

    graph = Graph(num_nodes=n, adjacency=adjacency, node_ids=list(meta["node_ids"]))
    signal = SignalTensor(
        values=values,
        start_epoch=int(meta["start_epoch"]),
        interval=int(meta["interval_seconds"]),
    )
    return graph, signal


def save_dataset(out_dir: str | Path, graph: Graph, signal: SignalTensor) -> Path:
    """Write a dataset directory in the load_dataset format. Returns meta path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savetxt(out_dir / "adjacency.csv", graph.adjacency, delimiter=",", fmt="%.17g")
    signal.values.astype("<f4").tofile(out_dir / "values.bin")
    meta = {
        "num_nodes": graph.num_nodes,
        "num_steps": signal.num_steps,
        "num_channels": signal.num_channels,
        "interval_seconds": signal.interval,
        "start_epoch": signal.start_epoch,
        "adjacency_file": "adjacency.csv",
        "values_file": "values.bin",
        "node_ids": graph.node_ids,
    }
    meta_path = out_dir / "meta.json"
    meta_path.write_text(json.dumps(meta, indent=1))
    return meta_path
