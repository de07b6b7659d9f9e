"""Training, evaluation, baselines, ablation, and checkpointing.

Window origins are assigned to train/val/test by where their target block
falls: a window belongs to a split iff all Q target steps lie inside it.
Histories may reach back across the boundary (never forward), so deep
weekly filters remain usable on short series without leaking targets.
"""

from __future__ import annotations

import dataclasses
import io
import json
import time
import warnings
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, variant_features
from .dataio import (
    NormalizationStats,
    SpeedSeries,
    TimeFilterArray,
    build_time_filter,
    recent_only_filter,
    split_boundaries,
    steps_per_day,
    valid_origins,
    zscore_fit_transform,
)
from .embeddings import time_feature_table, train_road_embeddings
from .errors import CheckpointError, ContractError, TrainingError
from .model import ICSTDNet
from .primitives import AdamState, adam_step, seed_all
from .roadnet import RoadNetwork, RoadPairSet, enumerate_road_pairs


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedData:
    """Series tensors plus per-split window origins, ready to batch."""

    stats: NormalizationStats
    filt: TimeFilterArray
    horizon: int
    values_norm: torch.Tensor = field(repr=False)  # (T, N, 1) float32
    values_raw: torch.Tensor = field(repr=False)  # (T, N, 1) float64
    time_table: torch.Tensor = field(repr=False)  # (T, 7+Z) float32
    origins: dict = field(default_factory=dict)  # split -> int64 array
    offsets_asc: torch.Tensor = field(default=None, repr=False)  # (P,)

    @property
    def time_dim(self) -> int:
        return self.time_table.shape[1]

    @property
    def num_roads(self) -> int:
        return self.values_norm.shape[1]


def prepare_data(
    series: SpeedSeries,
    filt: TimeFilterArray,
    horizon: int,
    min_depth: int | None = None,
) -> PreparedData:
    """Normalize, tabulate calendar features, and assign window origins.

    `min_depth` forces the earliest usable origin (to share an origin set
    across filters of different depth, for fair model comparisons).
    """
    t_total = series.num_steps
    b1, b2 = split_boundaries(t_total)
    normalized, stats = zscore_fit_transform(series, train_len=b1)

    origins_all = valid_origins(t_total, filt, horizon)
    if min_depth is not None:
        origins_all = origins_all[origins_all >= min_depth]
    first = {
        "train": None,
        "val": b1 - 1,
        "test": b2 - 1,
    }
    splits = {}
    splits["train"] = origins_all[origins_all + horizon < b1]
    splits["val"] = origins_all[
        (origins_all >= first["val"]) & (origins_all + horizon < b2)
    ]
    splits["test"] = origins_all[origins_all >= first["test"]]
    if splits["train"].size == 0:
        raise TrainingError(
            f"no training windows: series length {t_total}, "
            f"filter depth {filt.depth}, horizon {horizon}"
        )
    for name in ("val", "test"):
        if splits[name].size == 0:
            warnings.warn(f"no {name} windows for this series/filter/horizon")

    return PreparedData(
        stats=stats,
        filt=filt,
        horizon=horizon,
        values_norm=torch.as_tensor(normalized.values, dtype=torch.float32),
        values_raw=torch.as_tensor(series.values, dtype=torch.float64),
        time_table=torch.as_tensor(time_feature_table(series)),
        origins=splits,
        offsets_asc=torch.as_tensor(filt.ascending()),
    )


def gather_batch(prepared: PreparedData, origins: np.ndarray):
    """Assemble (history, time_hist, future, time_future) for given origins."""
    t = torch.as_tensor(origins, dtype=torch.long)
    hist_idx = t[:, None] + prepared.offsets_asc[None, :]  # (B, P)
    fut_idx = t[:, None] + torch.arange(1, prepared.horizon + 1)[None, :]
    return (
        prepared.values_norm[hist_idx],  # (B, P, N, 1)
        prepared.time_table[hist_idx],  # (B, P, 7+Z)
        prepared.values_norm[fut_idx],  # (B, Q, N, 1)
        prepared.time_table[fut_idx],  # (B, Q, 7+Z)
        fut_idx,
    )


# ---------------------------------------------------------------------------
# loss and metrics


def regularization(named_params: dict, lambda_l2: float) -> torch.Tensor:
    """(lambda/2) * sum of squared weight-matrix entries; biases excluded."""
    total = torch.zeros(())
    for name, p in named_params.items():
        if p.ndim >= 2:
            total = total + (p * p).sum()
    return 0.5 * lambda_l2 * total


def mse_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    named_params: dict | None = None,
    lambda_l2: float = 0.0,
) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ContractError(
            f"prediction shape {tuple(pred.shape)} != target {tuple(target.shape)}"
        )
    if torch.isnan(pred).any() or torch.isnan(target).any():
        raise TrainingError("NaN in loss inputs")
    loss = ((pred - target) ** 2).mean()
    if named_params is not None and lambda_l2 > 0:
        loss = loss + regularization(named_params, lambda_l2)
    return loss


@dataclass
class MetricsReport:
    horizons: dict  # h (1-based) -> {"mae", "rmse", "mape"}
    avg: dict
    mape_excluded: int = 0

    def to_dict(self) -> dict:
        doc = {f"h{h}": m for h, m in sorted(self.horizons.items())}
        doc["avg"] = self.avg
        doc["mape_excluded"] = self.mape_excluded
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def compute_metrics(pred, obs) -> MetricsReport:
    """MAE/RMSE/MAPE per horizon and averaged, on denormalized values.

    The percentage error divides by the predicted value; entries with
    near-zero predictions are excluded and counted.
    """
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {obs.shape}")
    if pred.ndim < 2:
        raise ContractError(f"expected (S, Q, ...) arrays, got {pred.shape}")
    q = pred.shape[1]
    horizons = {}
    excluded = 0
    for h in range(q):
        err = pred[:, h] - obs[:, h]
        mae = float(np.abs(err).mean())
        rmse = float(np.sqrt((err**2).mean()))
        denom = np.abs(pred[:, h])
        ok = denom > 1e-8
        excluded += int((~ok).sum())
        mape = float((np.abs(err)[ok] / denom[ok]).mean() * 100.0) if ok.any() else 0.0
        horizons[h + 1] = {"mae": mae, "rmse": rmse, "mape": mape}
    avg = {
        key: float(np.mean([m[key] for m in horizons.values()]))
        for key in ("mae", "rmse", "mape")
    }
    return MetricsReport(horizons=horizons, avg=avg, mape_excluded=excluded)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = float("inf")
    aborted: bool = False

    def to_csv(self) -> str:
        header = "epoch,train_loss,val_mae,val_rmse,val_mape,seconds"
        lines = [header]
        for r in self.rows:
            lines.append(
                f"{r['epoch']},{r['train_loss']!r},{r['val_mae']!r},"
                f"{r['val_rmse']!r},{r['val_mape']!r},{r['seconds']:.3f}"
            )
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())


def _batched(origins: np.ndarray, batch_size: int):
    for lo in range(0, origins.size, batch_size):
        yield origins[lo : lo + batch_size]


def _model_inputs(model: ICSTDNet, hist, t_hist, t_fut):
    if model.features.get("ste"):
        return model(hist, t_hist, t_fut)
    return model(hist)


def predict_batches(
    model: ICSTDNet, prepared: PreparedData, origins: np.ndarray, batch_size: int = 256
):
    """Denormalized predictions and observations for the given origins."""
    model.eval()
    preds, obss = [], []
    with torch.no_grad():
        for chunk in _batched(origins, batch_size):
            hist, t_hist, fut, t_fut, fut_idx = gather_batch(prepared, chunk)
            out = _model_inputs(model, hist, t_hist, t_fut)
            raw = out.double() * prepared.stats.std + prepared.stats.mean
            preds.append(raw.numpy())
            obss.append(prepared.values_raw[fut_idx].numpy())
    return np.concatenate(preds), np.concatenate(obss)


def evaluate(model: ICSTDNet, prepared: PreparedData, split: str = "test") -> MetricsReport:
    origins = prepared.origins[split]
    if origins.size == 0:
        raise TrainingError(f"split {split!r} has no windows to evaluate")
    pred, obs = predict_batches(model, prepared, origins)
    return compute_metrics(pred, obs)


def normalized_mae(model: ICSTDNet, prepared: PreparedData, split: str) -> float:
    """Plain MAE in normalized units over a split (training-quality probe)."""
    pred, obs = predict_batches(model, prepared, prepared.origins[split])
    return float(np.abs((pred - obs) / prepared.stats.std).mean())


def train(
    model: ICSTDNet,
    prepared: PreparedData,
    cfg: TrainConfig,
    progress: bool = False,
) -> TrainLog:
    """Full-batch-shuffled Adam training with best-validation retention.

    A NaN loss aborts training and restores the best weights seen so far
    (an error if no epoch ever finished).
    """
    named = dict(model.named_parameters())
    state = AdamState(lr=cfg.lr)
    log = TrainLog()
    best_state = None
    rng = np.random.default_rng(cfg.seed ^ 0x5EED)
    have_val = prepared.origins["val"].size > 0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(prepared.origins["train"])
        total, count = 0.0, 0
        try:
            for chunk in _batched(order, cfg.batch_size):
                hist, t_hist, fut, t_fut, _ = gather_batch(prepared, chunk)
                out = _model_inputs(model, hist, t_hist, t_fut)
                loss = mse_loss(out, fut, named, cfg.lambda_l2)
                if torch.isnan(loss):
                    raise TrainingError(f"NaN loss at epoch {epoch}")
                for p in named.values():
                    if p.grad is not None:
                        p.grad = None
                loss.backward()
                grads = {}
                for name, p in named.items():
                    if p.grad is None:
                        continue
                    if torch.isnan(p.grad).any():
                        raise TrainingError(f"NaN gradient in {name} at epoch {epoch}")
                    grads[name] = p.grad
                adam_step(named, grads, state)
                total += float(loss) * len(chunk)
                count += len(chunk)
        except TrainingError:
            if best_state is None:
                raise
            model.load_state_dict(best_state)
            log.aborted = True
            warnings.warn(f"training aborted at epoch {epoch}; best weights restored")
            break

        train_loss = total / max(count, 1)
        if have_val:
            val = evaluate(model, prepared, "val")
            val_mae, val_rmse, val_mape = (
                val.avg["mae"], val.avg["rmse"], val.avg["mape"],
            )
        else:
            val_mae = val_rmse = val_mape = float("nan")
        row = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_mae": val_mae,
            "val_rmse": val_rmse,
            "val_mape": val_mape,
            "seconds": time.perf_counter() - t0,
        }
        log.rows.append(row)
        if progress:
            print(
                f"epoch {epoch:4d}  loss {train_loss:.5f}  val mae {val_mae:.4f}",
                flush=True,
            )
        if have_val and val_mae < log.best_val_mae:
            log.best_val_mae = val_mae
            log.best_epoch = epoch
            best_state = {k: v.clone() for k, v in model.state_dict().items()}

    if cfg.keep_best_val and best_state is not None and not log.aborted:
        model.load_state_dict(best_state)
    return log


# ---------------------------------------------------------------------------
# pipeline: series + network + config -> trained model


@dataclass
class TrainedRun:
    model: ICSTDNet
    cfg: TrainConfig
    prepared: PreparedData
    log: TrainLog
    pair_set: RoadPairSet | None
    road_vectors: np.ndarray | None


def pick_filter(cfg: TrainConfig) -> tuple:
    """The variant's input filter plus the depth shared by all variants.

    Variants below the time-filter rung use a contiguous recent window of
    the same length P, so every variant sees equally many input steps and
    (via min_depth) the same candidate origins.
    """
    deep = build_time_filter(cfg.recent, cfg.daily, cfg.weekly, cfg.slot_minutes)
    if variant_features(cfg.variant)["time_filter"]:
        return deep, deep.depth - 1
    return recent_only_filter(deep.num_selected), deep.depth - 1


def train_pipeline(
    series: SpeedSeries,
    network: RoadNetwork,
    cfg: TrainConfig,
    progress: bool = False,
    road_vectors: np.ndarray | None = None,
) -> TrainedRun:
    seed_all(cfg.seed)
    features = variant_features(cfg.variant)
    filt, min_depth = pick_filter(cfg)
    prepared = prepare_data(series, filt, cfg.horizon, min_depth=min_depth)

    pair_set = None
    if features["stcl"]:
        pair_set = enumerate_road_pairs(network)
    if features["ste"] and road_vectors is None:
        road_vectors = train_road_embeddings(
            network, raw_dim=cfg.raw_embed_dim, seed=cfg.seed
        )

    seed_all(cfg.seed)  # model init independent of embedding RNG consumption
    model = ICSTDNet(
        cfg,
        num_roads=series.num_roads,
        filter_len=filt.num_selected,
        pair_set=pair_set,
        road_vectors=road_vectors if features["ste"] else None,
        time_dim=prepared.time_dim,
    )
    log = train(model, prepared, cfg, progress=progress)
    return TrainedRun(
        model=model,
        cfg=cfg,
        prepared=prepared,
        log=log,
        pair_set=pair_set,
        road_vectors=road_vectors,
    )


def run_ablation(
    series: SpeedSeries,
    network: RoadNetwork,
    base_cfg: TrainConfig,
    variants: tuple,
    progress: bool = False,
) -> dict:
    """Train each variant with identical data/seed; returns tag -> report."""
    results = {}
    shared_vectors = None
    for tag in variants:
        cfg = dataclasses.replace(base_cfg, variant=tag)
        if variant_features(tag)["ste"] and shared_vectors is None:
            seed_all(cfg.seed)
            shared_vectors = train_road_embeddings(
                network, raw_dim=cfg.raw_embed_dim, seed=cfg.seed
            )
        run = train_pipeline(
            series, network, cfg, progress=progress, road_vectors=shared_vectors
        )
        results[tag] = evaluate(run.model, run.prepared, "test")
    return results


# ---------------------------------------------------------------------------
# baselines


def slot_of_week(series_start, slot_minutes: int, steps: np.ndarray) -> np.ndarray:
    s = steps_per_day(slot_minutes)
    start = (
        series_start.weekday() * s
        + (series_start.hour * 60 + series_start.minute) // slot_minutes
    )
    return (start + np.asarray(steps)) % (7 * s)


def ha_baseline(
    series: SpeedSeries, prepared: PreparedData, split: str = "test"
) -> tuple:
    """Historical average per (road, slot-of-week) from the training steps.

    Returns (pred, obs) denormalized arrays shaped like the model's output.
    """
    t_total = series.num_steps
    b1, _ = split_boundaries(t_total)
    sow = slot_of_week(series.start_timestamp, series.slot_minutes, np.arange(t_total))
    week_len = 7 * steps_per_day(series.slot_minutes)
    values = series.values[:, :, 0]  # (T, N)

    table = np.zeros((week_len, series.num_roads))
    fallback = values[:b1].mean(axis=0)  # per-road mean
    for slot in range(week_len):
        mask = sow[:b1] == slot
        table[slot] = values[:b1][mask].mean(axis=0) if mask.any() else fallback

    origins = prepared.origins[split]
    fut_idx = origins[:, None] + np.arange(1, prepared.horizon + 1)[None, :]
    pred = table[sow[fut_idx]][..., None]  # (S, Q, N, 1)
    obs = values[fut_idx][..., None]
    return pred, obs


def persistence_baseline(
    series: SpeedSeries, prepared: PreparedData, split: str = "test"
) -> tuple:
    """Repeat the origin-step speed across all Q horizons."""
    origins = prepared.origins[split]
    values = series.values[:, :, 0]
    fut_idx = origins[:, None] + np.arange(1, prepared.horizon + 1)[None, :]
    pred = np.repeat(values[origins][:, None, :], prepared.horizon, axis=1)[..., None]
    obs = values[fut_idx][..., None]
    return pred, obs


# ---------------------------------------------------------------------------
# checkpointing


FORMAT_VERSION = 1


def _archive_entries(model: ICSTDNet):
    """(archive_name, tensor) pairs; the pair bank is split per road pair."""
    entries = []
    bank = getattr(model, "stcl", None)
    bank_keys = ()
    if bank is not None:
        bank_keys = ("stcl.b1", "stcl.b_rest", "stcl.a", "stcl.nf_w1",
                     "stcl.nf_w_rest", "stcl.nf_b")
        slots = ["shared"] if bank.share_weights else [
            f"pair_{m}_{n}" for m, n in bank.pairs
        ]
        for i, slot in enumerate(slots):
            prefix = f"stcl/{slot}"
            entries.append((f"{prefix}/B1", bank.b1[i]))
            for q in range(2, bank.q_r + 1):
                entries.append((f"{prefix}/B{q}", bank.b_rest[q - 2, i]))
            for q in range(1, bank.q_r + 1):
                entries.append((f"{prefix}/A{q}", bank.a[q - 1, i]))
            entries.append((f"{prefix}/nf1/W", bank.nf_w1[i]))
            for s in range(2, bank.l_nf + 1):
                entries.append((f"{prefix}/nf{s}/W", bank.nf_w_rest[s - 2, i]))
            for s in range(1, bank.l_nf + 1):
                entries.append((f"{prefix}/nf{s}/b", bank.nf_b[s - 1, i]))
    for name, tensor in model.state_dict().items():
        if name in bank_keys:
            continue
        entries.append((name.replace(".", "/"), tensor))
    return entries


def save_checkpoint(
    model: ICSTDNet,
    path,
    stats: NormalizationStats | None = None,
    filt: TimeFilterArray | None = None,
    time_dim: int | None = None,
    adam: AdamState | None = None,
    extra: dict | None = None,
) -> None:
    entries = _archive_entries(model)
    manifest = {
        "format": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.config_hash(),
        "num_roads": model.num_roads,
        "filter_len": model.filter_len,
        "filter_offsets": list(filt.offsets) if filt is not None else None,
        "time_dim": time_dim,
        "stats": None if stats is None else {"mean": stats.mean, "std": stats.std},
        "pairs": None,
        "order_tags": None,
        "share_weights": None,
        "tensors": {
            name: {"shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")}
            for name, t in entries
        },
        "adam": None,
        "extra": extra or {},
    }
    bank = getattr(model, "stcl", None)
    if bank is not None:
        manifest["pairs"] = [list(p) for p in bank.pairs]
        manifest["order_tags"] = list(bank.order_tags)
        manifest["share_weights"] = bank.share_weights
    if adam is not None:
        manifest["adam"] = {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "step_count": adam.step_count,
        }

    path = Path(path)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True, indent=1))
        for name, tensor in entries:
            buf = io.BytesIO()
            np.save(buf, tensor.detach().numpy())
            zf.writestr(f"tensors/{name}.npy", buf.getvalue())


def _read_tensor(zf: zipfile.ZipFile, name: str) -> torch.Tensor:
    with zf.open(f"tensors/{name}.npy") as fh:
        return torch.as_tensor(np.load(io.BytesIO(fh.read())))


def load_checkpoint(path, expect_config_hash: str | None = None):
    """Rebuild (model, manifest). The archive is fully validated first."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            bad = zf.testzip()
            if bad is not None:
                raise CheckpointError(f"corrupt checkpoint entry: {bad}")
            manifest = json.loads(zf.read("manifest.json"))
            tensors = {
                name: _read_tensor(zf, name) for name in manifest["tensors"]
            }
    except (zipfile.BadZipFile, KeyError, OSError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc

    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')}")
    cfg = TrainConfig.from_dict(manifest["config"])
    if cfg.config_hash() != manifest["config_hash"]:
        raise CheckpointError(
            f"config hash mismatch: manifest {manifest['config_hash']}, "
            f"recomputed {cfg.config_hash()}"
        )
    if expect_config_hash is not None and expect_config_hash != manifest["config_hash"]:
        raise CheckpointError(
            f"checkpoint config hash {manifest['config_hash']} != expected "
            f"{expect_config_hash}"
        )
    for name, meta in manifest["tensors"].items():
        if list(tensors[name].shape) != meta["shape"]:
            raise CheckpointError(
                f"tensor {name}: stored shape {list(tensors[name].shape)} != "
                f"manifest {meta['shape']}"
            )

    pair_set = None
    if manifest["pairs"] is not None:
        pair_set = RoadPairSet(
            pairs=tuple(tuple(p) for p in manifest["pairs"]),
            order_tags=tuple(manifest["order_tags"]),
        )
    road_vectors = None
    if "ste/road_vectors" in tensors:
        road_vectors = tensors["ste/road_vectors"].numpy()

    model = ICSTDNet(
        cfg,
        num_roads=manifest["num_roads"],
        filter_len=manifest["filter_len"],
        pair_set=pair_set,
        road_vectors=road_vectors,
        time_dim=manifest["time_dim"],
    )

    state = {}
    bank = getattr(model, "stcl", None)
    if bank is not None:
        slots = ["shared"] if manifest["share_weights"] else [
            f"pair_{m}_{n}" for m, n in pair_set.pairs
        ]
        state["stcl.b1"] = torch.stack([tensors[f"stcl/{s}/B1"] for s in slots])
        state["stcl.b_rest"] = torch.stack(
            [
                torch.stack([tensors[f"stcl/{s}/B{q}"] for s in slots])
                for q in range(2, bank.q_r + 1)
            ]
        ) if bank.q_r > 1 else model.stcl.b_rest.detach()
        state["stcl.a"] = torch.stack(
            [
                torch.stack([tensors[f"stcl/{s}/A{q}"] for s in slots])
                for q in range(1, bank.q_r + 1)
            ]
        )
        state["stcl.nf_w1"] = torch.stack([tensors[f"stcl/{s}/nf1/W"] for s in slots])
        state["stcl.nf_w_rest"] = torch.stack(
            [
                torch.stack([tensors[f"stcl/{s}/nf{q}/W"] for s in slots])
                for q in range(2, bank.l_nf + 1)
            ]
        ) if bank.l_nf > 1 else model.stcl.nf_w_rest.detach()
        state["stcl.nf_b"] = torch.stack(
            [
                torch.stack([tensors[f"stcl/{s}/nf{q}/b"] for s in slots])
                for q in range(1, bank.l_nf + 1)
            ]
        )
    for name in model.state_dict():
        if name in state:
            continue
        archive = name.replace(".", "/")
        if archive not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {archive}")
        state[name] = tensors[archive]
    model.load_state_dict(state)
    model.eval()
    return model, manifest
