"""Road and calendar embeddings.

Road vectors come from skip-gram with negative sampling over unbiased random
walks on the road graph (numpy, fully seeded). Calendar features are one-hot
day-of-week and slot-of-day. Both feed the spatio-temporal embedding module,
whose two-layer projections are the only trainable parts.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataio import SpeedSeries, steps_per_day
from .errors import ConfigError
from .roadnet import RoadNetwork


def random_walks(
    network: RoadNetwork,
    walks_per_road: int = 10,
    walk_length: int = 20,
    seed: int = 0,
) -> list:
    """Uniform random walks, `walks_per_road` starts from every road.

    A walk stops early at a road with no neighbours.
    """
    rng = np.random.default_rng(seed)
    nbrs = [np.nonzero(network.adjacency[i])[0] for i in range(network.num_roads)]
    walks = []
    for _ in range(walks_per_road):
        for start in range(network.num_roads):
            walk = [start]
            while len(walk) < walk_length:
                options = nbrs[walk[-1]]
                if options.size == 0:
                    break
                walk.append(int(options[rng.integers(options.size)]))
            walks.append(walk)
    return walks


def _skipgram_pairs(walks: list, window: int) -> np.ndarray:
    pairs = []
    for walk in walks:
        for i, center in enumerate(walk):
            lo = max(0, i - window)
            hi = min(len(walk), i + window + 1)
            for j in range(lo, hi):
                if j != i:
                    pairs.append((center, walk[j]))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def train_road_embeddings(
    network: RoadNetwork,
    raw_dim: int = 64,
    walks_per_road: int = 10,
    walk_length: int = 20,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    lr: float = 0.025,
    seed: int = 0,
) -> np.ndarray:
    """Skip-gram road vectors, (N, raw_dim) float64, deterministic in seed.

    Negative samples are drawn from the walk-corpus unigram distribution
    raised to 3/4. Batched SGD; accumulation uses add.at so repeated roads
    in a batch each contribute.
    """
    n = network.num_roads
    rng = np.random.default_rng(seed)
    walks = random_walks(network, walks_per_road, walk_length, seed=seed + 1)
    pairs = _skipgram_pairs(walks, window)
    if pairs.shape[0] == 0:
        # graph with no edges at all: fall back to random vectors
        return rng.normal(0.0, 0.1, size=(n, raw_dim))

    counts = np.bincount(pairs[:, 0], minlength=n).astype(np.float64)
    noise = (counts + 1.0) ** 0.75
    noise /= noise.sum()

    in_vec = rng.normal(0.0, 0.1, size=(n, raw_dim))
    out_vec = np.zeros((n, raw_dim))
    batch = 512
    for _ in range(epochs):
        order = rng.permutation(pairs.shape[0])
        for lo in range(0, order.size, batch):
            idx = order[lo : lo + batch]
            centers, contexts = pairs[idx, 0], pairs[idx, 1]
            negs = rng.choice(n, size=(idx.size, negatives), p=noise)

            v = in_vec[centers]  # (B, d)
            u_pos = out_vec[contexts]  # (B, d)
            u_neg = out_vec[negs]  # (B, K, d)

            g_pos = 1.0 - _sigmoid((v * u_pos).sum(-1))  # (B,)
            g_neg = _sigmoid((v[:, None, :] * u_neg).sum(-1))  # (B, K)

            d_v = g_pos[:, None] * u_pos - (g_neg[..., None] * u_neg).sum(1)
            np.add.at(in_vec, centers, lr * d_v)
            np.add.at(out_vec, contexts, lr * g_pos[:, None] * v)
            np.add.at(
                out_vec,
                negs.reshape(-1),
                (-lr * g_neg[..., None] * v[:, None, :]).reshape(-1, raw_dim),
            )
    return in_vec


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -30.0, 30.0)))


def save_embedding_cache(path, embedding: np.ndarray, seed: int) -> None:
    path = Path(path)
    np.save(path, embedding)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(
        json.dumps({"n": embedding.shape[0], "dim": embedding.shape[1], "seed": seed})
    )


def load_embedding_cache(path, n: int, dim: int, seed: int):
    """Cached embedding, or None when missing or keyed differently."""
    path = Path(path)
    npy = path if path.suffix == ".npy" else path.with_suffix(".npy")
    sidecar = npy.with_suffix(".json")
    if not npy.exists() or not sidecar.exists():
        return None
    meta = json.loads(sidecar.read_text())
    if meta != {"n": n, "dim": dim, "seed": seed}:
        return None
    return np.load(npy)


# ---------------------------------------------------------------------------
# calendar features


def time_feature_table(series: SpeedSeries) -> np.ndarray:
    """(T, 7 + Z) one-hot day-of-week and slot-of-day for every timestep."""
    z = steps_per_day(series.slot_minutes)
    table = np.zeros((series.num_steps, 7 + z), dtype=np.float32)
    for t in range(series.num_steps):
        ts = series.timestamp_of(t)
        table[t, ts.weekday()] = 1.0
        table[t, 7 + (ts.hour * 60 + ts.minute) // series.slot_minutes] = 1.0
    return table


# ---------------------------------------------------------------------------
# the embedding module


class STEmbedding(nn.Module):
    """Summed spatial and temporal embeddings, (B, K, N, d_model).

    The raw road vectors are a frozen buffer; each branch passes through its
    own two-layer ReLU projection into d_model.
    """

    def __init__(self, road_vectors: np.ndarray, time_dim: int, d_model: int):
        super().__init__()
        if road_vectors.ndim != 2:
            raise ConfigError(f"road vectors must be (N, raw_dim), got {road_vectors.shape}")
        self.register_buffer(
            "road_vectors", torch.as_tensor(road_vectors, dtype=torch.float32)
        )
        raw_dim = road_vectors.shape[1]
        self.spatial_proj = nn.Sequential(
            nn.Linear(raw_dim, d_model), nn.ReLU(), nn.Linear(d_model, d_model)
        )
        self.temporal_proj = nn.Sequential(
            nn.Linear(time_dim, d_model), nn.ReLU(), nn.Linear(d_model, d_model)
        )

    def forward(self, time_features: torch.Tensor) -> torch.Tensor:
        """time_features: (B, K, 7+Z) -> embeddings (B, K, N, d_model)."""
        spatial = self.spatial_proj(self.road_vectors)  # (N, d)
        temporal = self.temporal_proj(time_features)  # (B, K, d)
        return spatial[None, None, :, :] + temporal[:, :, None, :]

    def spatial_only(self) -> torch.Tensor:
        """(N, d_model) projected road embeddings."""
        return self.spatial_proj(self.road_vectors)
