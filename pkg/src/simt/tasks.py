"""Task distributions, episode sampling and the supervised task losses."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError


class FlatDatasetError(ValueError):
    """Malformed flat dataset file; ``offset`` is the byte offset of the bad line."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


@dataclass
class Episode:
    """One task: support ``(x_s, y_s)`` and query ``(x_q, y_q)``.

    Arrays may carry a leading task axis when several episodes are stacked
    with :func:`stack_episodes`. ``support_idx``/``query_idx`` identify the
    underlying examples and are disjoint.
    """

    x_s: np.ndarray
    y_s: np.ndarray
    x_q: np.ndarray
    y_q: np.ndarray
    task_kind: str
    class_map: np.ndarray | None = None
    support_idx: np.ndarray | None = None
    query_idx: np.ndarray | None = None
    task_params: dict = field(default_factory=dict)

    @property
    def batched(self) -> bool:
        return self.x_s.ndim == 3

    @property
    def num_tasks(self) -> int:
        return self.x_s.shape[0] if self.batched else 1


def stack_episodes(episodes: Sequence[Episode]) -> Episode:
    first = episodes[0]

    def stack(attr):
        vals = [getattr(e, attr) for e in episodes]
        return None if vals[0] is None else np.stack(vals)

    return Episode(
        x_s=stack("x_s"), y_s=stack("y_s"), x_q=stack("x_q"), y_q=stack("y_q"),
        task_kind=first.task_kind, class_map=stack("class_map"),
        support_idx=stack("support_idx"), query_idx=stack("query_idx"),
    )


# ---------------------------------------------------------------------------
# task families


@dataclass(frozen=True)
class SinusoidFamily:
    amplitude: tuple[float, float] = (0.1, 5.0)
    phase: tuple[float, float] = (0.0, math.pi)
    input_range: tuple[float, float] = (-5.0, 5.0)
    noise_sigma: float = 0.0
    task_kind = "regression-mse"

    def __post_init__(self):
        if self.amplitude[0] <= 0:
            raise ValueError("amplitude must be positive")

    def sample_episode(self, n_way: int, k_shot: int, q_query: int,
                       rng: np.random.Generator) -> Episode:
        amp = rng.uniform(*self.amplitude)
        phase = rng.uniform(*self.phase)
        n = k_shot + q_query
        x = rng.uniform(*self.input_range, size=(n, 1))
        y = amp * np.sin(x + phase)
        if self.noise_sigma > 0:
            y = y + self.noise_sigma * rng.standard_normal(y.shape)
        idx = np.arange(n)
        return Episode(x[:k_shot], y[:k_shot], x[k_shot:], y[k_shot:], self.task_kind,
                       support_idx=idx[:k_shot], query_idx=idx[k_shot:],
                       task_params={"amplitude": amp, "phase": phase})


@dataclass(frozen=True)
class AngleTaskFamily:
    """Pose regression: recover the rotation angle of a per-task 2-D template.

    Each task owns a random template of ``points`` 2-D points; an example is
    the template rotated by an angle in ``rotation`` and linearly projected
    to ``feature_dim`` features by a generator matrix shared by all tasks.
    Targets lie in ``[0, 2*pi)``.
    """

    feature_dim: int = 16
    points: int = 4
    rotation: tuple[float, float] = (0.0, 2 * math.pi)
    feature_seed: int = 0
    task_kind = "regression-angular"

    def generator(self) -> np.ndarray:
        rng = np.random.default_rng(self.feature_seed)
        return rng.standard_normal((2 * self.points, self.feature_dim)) / np.sqrt(2 * self.points)

    def sample_episode(self, n_way: int, k_shot: int, q_query: int,
                       rng: np.random.Generator) -> Episode:
        template = rng.standard_normal((self.points, 2))
        n = k_shot + q_query
        angles = rng.uniform(*self.rotation, size=n)
        c, s = np.cos(angles), np.sin(angles)
        rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # (n, 2, 2)
        pts = np.einsum("nij,pj->npi", rot, template).reshape(n, -1)
        x = pts @ self.generator()
        y = np.mod(angles, 2 * math.pi)[:, None]
        idx = np.arange(n)
        return Episode(x[:k_shot], y[:k_shot], x[k_shot:], y[k_shot:], self.task_kind,
                       support_idx=idx[:k_shot], query_idx=idx[k_shot:])


class ClusterFamily:
    """Classification tasks over a finite pool of examples grouped by latent class.

    Synthetic pools are Gaussian blobs; :func:`load_flat_dataset` builds the
    same structure from a file. Episodes draw ``n_way`` classes, then
    ``k_shot + q_query`` distinct examples from each.
    """

    task_kind = "classification"

    def __init__(self, pools: Sequence[np.ndarray], class_ids: Sequence[int] | None = None):
        pools = [np.asarray(p, dtype=np.float64) for p in pools]
        if not pools:
            raise ValueError("need at least one class")
        dims = {p.shape[1] for p in pools}
        if len(dims) != 1:
            raise ValueError(f"inconsistent feature dims {sorted(dims)}")
        self.pools = pools
        self.class_ids = np.arange(len(pools)) if class_ids is None else np.asarray(class_ids)
        self.feature_dim = dims.pop()
        self._offsets = np.concatenate([[0], np.cumsum([len(p) for p in pools])])

    @classmethod
    def synthetic(cls, num_latent_classes: int = 64, feature_dim: int = 16,
                  examples_per_class: int = 60, spread: float = 1.0,
                  distance: float = 3.0, seed: int = 0) -> "ClusterFamily":
        rng = np.random.default_rng(seed)
        centers = rng.standard_normal((num_latent_classes, feature_dim))
        centers *= distance / np.sqrt(feature_dim)
        pools = [c + spread / np.sqrt(feature_dim) * rng.standard_normal((examples_per_class, feature_dim))
                 for c in centers]
        return cls(pools)

    @property
    def num_latent_classes(self) -> int:
        return len(self.pools)

    def split(self, counts: Sequence[int]) -> list["ClusterFamily"]:
        """Partition latent classes into disjoint consecutive groups (e.g. train/val/test)."""
        if sum(counts) > len(self.pools):
            raise ValueError(f"split {list(counts)} needs more than {len(self.pools)} classes")
        out, start = [], 0
        for c in counts:
            out.append(ClusterFamily(self.pools[start:start + c], self.class_ids[start:start + c]))
            start += c
        return out

    def sample_episode(self, n_way: int, k_shot: int, q_query: int,
                       rng: np.random.Generator) -> Episode:
        if n_way > len(self.pools):
            raise ValueError(f"{n_way}-way episode needs {n_way} classes, family has {len(self.pools)}")
        classes = rng.choice(len(self.pools), size=n_way, replace=False)
        xs, ys, xq, yq, si, qi = [], [], [], [], [], []
        for local, c in enumerate(classes):
            pool = self.pools[c]
            if len(pool) < k_shot + q_query:
                raise ValueError(f"class {self.class_ids[c]} has {len(pool)} examples, "
                                 f"need {k_shot + q_query}")
            rows = rng.choice(len(pool), size=k_shot + q_query, replace=False)
            xs.append(pool[rows[:k_shot]])
            xq.append(pool[rows[k_shot:]])
            ys += [local] * k_shot
            yq += [local] * q_query
            si.append(self._offsets[c] + rows[:k_shot])
            qi.append(self._offsets[c] + rows[k_shot:])
        return Episode(np.concatenate(xs), np.array(ys), np.concatenate(xq), np.array(yq),
                       self.task_kind, class_map=self.class_ids[classes],
                       support_idx=np.concatenate(si), query_idx=np.concatenate(qi))


def sample_episode(family, n_way: int, k_shot: int, q_query: int,
                   rng: np.random.Generator) -> Episode:
    return family.sample_episode(n_way, k_shot, q_query, rng)


def sample_batch(family, n_tasks: int, n_way: int, k_shot: int, q_query: int,
                 rng: np.random.Generator) -> Episode:
    return stack_episodes([family.sample_episode(n_way, k_shot, q_query, rng)
                           for _ in range(n_tasks)])


# ---------------------------------------------------------------------------
# flat dataset files

_MAGIC = "SIMT-DS"


def dump_flat_dataset(family: ClusterFamily, path: str | os.PathLike) -> None:
    with open(path, "w") as f:
        f.write(f"{_MAGIC} v1 {family.num_latent_classes} {family.feature_dim}\n")
        for c, pool in enumerate(family.pools):
            for row in pool:
                f.write(" ".join([str(c)] + [repr(float(v)) for v in row]) + "\n")


def load_flat_dataset(path: str | os.PathLike) -> ClusterFamily:
    with open(path, "rb") as f:
        data = f.read()
    offset = 0
    lines = data.split(b"\n")
    if not data.endswith(b"\n"):
        # the final line was cut off mid-row
        last_start = len(data) - len(lines[-1])
        raise FlatDatasetError("truncated file: last line is not newline-terminated", last_start)
    header = lines[0].decode("ascii", errors="replace").split()
    if len(header) != 4 or header[0] != _MAGIC or header[1] != "v1":
        raise FlatDatasetError(f"bad header {lines[0][:60]!r}", 0)
    try:
        num_classes, dim = int(header[2]), int(header[3])
    except ValueError:
        raise FlatDatasetError(f"bad header {lines[0][:60]!r}", 0) from None
    if num_classes < 1 or dim < 1:
        raise FlatDatasetError("header counts must be positive", 0)
    offset = len(lines[0]) + 1
    rows: list[list[np.ndarray]] = [[] for _ in range(num_classes)]
    for line in lines[1:-1]:
        start = offset
        offset += len(line) + 1
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != dim + 1:
            raise FlatDatasetError(f"row has {len(fields) - 1} features, expected {dim}", start)
        try:
            cid = int(fields[0])
            vals = np.array([float(v) for v in fields[1:]])
        except ValueError:
            raise FlatDatasetError("unparseable number", start) from None
        if not 0 <= cid < num_classes:
            raise FlatDatasetError(f"unknown class id {cid}", start)
        rows[cid].append(vals)
    for c, r in enumerate(rows):
        if not r:
            raise FlatDatasetError(f"class {c} has no rows", offset)
    return ClusterFamily([np.stack(r) for r in rows])


# ---------------------------------------------------------------------------
# losses; all are means over examples (and tasks, when stacked)


def mse_loss(pred: Node, y) -> Node:
    y = np.asarray(y, dtype=np.float64)
    if pred.shape != y.shape:
        raise ShapeError("mse_loss", pred.shape, y.shape)
    d = ad.sub(pred, pred.graph.constant(y))
    # squared norm per example, averaged over examples
    return ad.scale(ad.sum(ad.square(d)), 1.0 / (y.size // y.shape[-1]))


def angular_loss(pred: Node, y) -> Node:
    y = np.asarray(y, dtype=np.float64)
    if pred.shape != y.shape:
        raise ShapeError("angular_loss", pred.shape, y.shape)
    dc = ad.sub(ad.cos(pred), pred.graph.constant(np.cos(y)))
    ds = ad.sub(ad.sin(pred), pred.graph.constant(np.sin(y)))
    return ad.mean(ad.add(ad.square(dc), ad.square(ds)))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return np.eye(num_classes)[labels.astype(int)]


def ce_loss(logits: Node, labels) -> Node:
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise ShapeError("ce_loss", logits.shape, labels.shape)
    oh = one_hot(labels, logits.shape[-1])
    picked = ad.sum(ad.mask_mul(ad.log_softmax(logits), oh))
    return ad.scale(picked, -1.0 / labels.size)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


TASK_LOSSES = {
    "regression-mse": mse_loss,
    "regression-angular": angular_loss,
    "classification": ce_loss,
}
