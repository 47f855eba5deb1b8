"""MetalGAN training (Reptile over cluster tasks) and the plain cGAN baseline.

One MetalGAN epoch visits every query image. For each query the generator
is copied, adapted to the query's cluster with ``n_meta_iter`` SGD steps,
and the outer generator is moved a fraction ``stepsize_ml`` of the way
towards the adapted copy. The discriminator is then trained on every image
of that cluster against the updated generator.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .advloss import LossError, LossWeights, as_batch, discriminator_losses, generator_losses
from .datapipe import ColorDataset, load_batch, substream
from .netcore import (
    arch_dict,
    build_discriminator,
    build_generator,
    flatten_params,
    load_params,
    param_count,
)
from .taskforge import ClusterModel, retrieve_cluster

log = logging.getLogger(__name__)

TRACE_COLUMNS = ["epoch", "query_index", "step", "loss_g_adv", "loss_g_l1", "loss_d"]
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_epochs: int = 200
    n_meta_iter: int = 100
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    stepsize_ml: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    k: int = 64
    query_fraction: float = 0.1
    batch_size: int = 1
    seed: int = 0
    mode: str = "metalgan"
    # data and architecture
    test_fraction: float = 0.2
    image_size: int = 32
    g_depth: int = 3
    g_width: int = 16
    d_blocks: int = 3
    d_width: int = 16
    d_patch: bool = False
    d_negative_slope: float = 0.2
    # optimizer and loop options
    momentum: float = 0.0
    d_pass_max_batches: int | None = None
    resample_queries: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.validate()

    def validate(self):
        if self.mode not in ("metalgan", "cgan"):
            raise ValueError(f"mode must be 'metalgan' or 'cgan', got {self.mode!r}")
        # zero rates are allowed: they turn the corresponding update into a no-op
        for name in ("lr_g", "lr_d", "stepsize_ml"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.n_meta_iter < 0 or self.n_epochs < 0:
            raise ValueError("n_meta_iter and n_epochs must be nonnegative")
        if not 0.0 < self.query_fraction <= 1.0:
            raise ValueError("query_fraction must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.image_size % 2**self.g_depth:
            raise ValueError(f"image_size {self.image_size} is not divisible by 2**g_depth")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @classmethod
    def desk(cls, **overrides):
        """Settings sized for the 500-image toy corpus on one CPU core.

        Rates are raised to match the much shorter run (20 epochs, 8 clusters).
        """
        base = dict(n_epochs=20, k=8, lr_g=1e-3, lr_d=1e-3, stepsize_ml=0.1)
        base.update(overrides)
        return cls(**base)

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]

    def to_json(self):
        doc = asdict(self)
        doc["weights"] = asdict(self.weights)
        return doc

    @classmethod
    def from_json(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


@dataclass
class QuerySet:
    queries: list
    resolved: dict

    def __len__(self):
        return len(self.queries)


def sample_query_set(ids, fraction, rng, clusters: ClusterModel | None = None) -> QuerySet:
    """Draw ``round(fraction * len(ids))`` query ids without replacement.

    With ``clusters`` given, each query is resolved to its nearest-centroid
    task and ids without a usable descriptor are not eligible.
    """
    ids = list(ids)
    if not ids:
        raise ValueError("cannot draw queries from an empty dataset")
    if len(ids) * fraction < 1.0 - 1e-12:
        raise ValueError(f"{len(ids)} images is fewer than 1/fraction = {1 / fraction:g}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    if clusters is not None:
        usable = [i for i in ids if i in clusters.descriptors and not clusters.descriptor(i).degenerate]
        if len(usable) < len(ids):
            log.warning("%d images have no usable descriptor and cannot be queries", len(ids) - len(usable))
        ids = usable
    n = max(1, int(round(fraction * len(ids))))
    picks = rng.choice(len(ids), size=n, replace=False)
    queries = [ids[i] for i in picks]
    resolved = {}
    if clusters is not None:
        for q in queries:
            resolved[q] = retrieve_cluster(clusters.descriptor(q), clusters.clusters).cluster_id
    return QuerySet(queries, resolved)


def reptile_update(theta_g, theta_tilde, stepsize_ml):
    """theta_g + stepsize_ml * (theta_tilde - theta_g), returned as a new array."""
    theta_g = np.asarray(theta_g)
    theta_tilde = np.asarray(theta_tilde)
    if theta_g.shape != theta_tilde.shape:
        raise ValueError(f"length mismatch: {theta_g.shape} vs {theta_tilde.shape}")
    if stepsize_ml == 1:
        return theta_tilde.copy()
    return theta_g + theta_g.dtype.type(stepsize_ml) * (theta_tilde - theta_g)


def _sgd_step(params, grads, lr, momentum=0.0, buffers=None):
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if momentum:
                buffers[i].mul_(momentum).add_(g)
                g = buffers[i]
            p.add_(g, alpha=-lr)


def _check(value, what, context):
    if not math.isfinite(value):
        raise LossError(f"non-finite {what} loss ({value}) at {context}")


def generator_step(g, d, batch, cfg: TrainConfig, buffers=None):
    """One SGD step on the generator; returns (adv, l1)."""
    L, ab = as_batch(batch, cfg.torch_dtype)
    params = list(g.parameters())
    total, adv, l1 = generator_losses(g, d, L, ab, cfg.weights)
    _check(total.item(), "generator", "generator step")
    grads = torch.autograd.grad(total, params)
    _sgd_step(params, grads, cfg.lr_g, cfg.momentum, buffers)
    return adv.item(), l1.item()


def discriminator_step(d, g, batch, cfg: TrainConfig, buffers=None):
    L, ab = as_batch(batch, cfg.torch_dtype)
    params = list(d.parameters())
    total, _, _ = discriminator_losses(d, g, L, ab)
    _check(total.item(), "discriminator", "discriminator step")
    grads = torch.autograd.grad(total, params)
    _sgd_step(params, grads, cfg.lr_d, cfg.momentum, buffers)
    return total.item()


def _zeros_like(net):
    return [torch.zeros_like(p) for p in net.parameters()]


def inner_loop(task, g, d, cfg: TrainConfig, dataset: ColorDataset, rng, trace=None):
    """Adapt a copy of ``g`` to one task; return the adapted flat parameters.

    ``g`` and ``d`` are left untouched. Per-step (adv, l1) losses are appended
    to ``trace`` when given.
    """
    fast = copy.deepcopy(g)
    buffers = _zeros_like(fast) if cfg.momentum else None
    for j in range(cfg.n_meta_iter):
        batch = load_batch(task, dataset, cfg.batch_size, rng)
        try:
            losses = generator_step(fast, d, batch, cfg, buffers)
        except LossError as exc:
            raise LossError(f"{exc}; inner step {j} on task {getattr(task, 'cluster_id', '?')}") from None
        if trace is not None:
            trace.append(losses)
    return flatten_params(fast)


def discriminator_pass(task, d, g, cfg: TrainConfig, dataset: ColorDataset, rng, buffers=None):
    """Train ``d`` in place on every image of the task, in shuffled batches.

    Returns the per-batch discriminator losses. ``cfg.d_pass_max_batches``
    bounds the number of batches.
    """
    members = list(task.member_ids)
    dataset.require_train(members)
    order = rng.permutation(len(members))
    n_batches = math.ceil(len(members) / cfg.batch_size)
    if cfg.d_pass_max_batches is not None:
        n_batches = min(n_batches, cfg.d_pass_max_batches)
    losses = []
    for b in range(n_batches):
        ids = [members[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
        losses.append(discriminator_step(d, g, dataset.pairs(ids), cfg, buffers))
    return losses


# ---------------------------------------------------------------------------
# Run state, checkpoints and traces


@dataclass
class TrainState:
    cfg: TrainConfig
    g: torch.nn.Module
    d: torch.nn.Module
    rng: np.random.Generator
    epoch: int = 0  # completed epochs
    queries: QuerySet | None = None
    d_buffers: list | None = None
    g_buffers: list | None = None  # cgan mode only
    trace: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def new_state(cfg: TrainConfig) -> TrainState:
    g_seed = int(substream(cfg.seed, "init_g").integers(2**31))
    d_seed = int(substream(cfg.seed, "init_d").integers(2**31))
    g = build_generator(cfg.g_depth, cfg.g_width, seed=g_seed, dtype=cfg.torch_dtype)
    d = build_discriminator(cfg.d_blocks, cfg.d_width, cfg.d_patch, cfg.d_negative_slope, seed=d_seed, dtype=cfg.torch_dtype)
    state = TrainState(cfg, g, d, substream(cfg.seed, "train"))
    if cfg.momentum:
        state.d_buffers = _zeros_like(d)
        if cfg.mode == "cgan":
            state.g_buffers = _zeros_like(g)
    return state


def _param_blob(state):
    return np.concatenate([flatten_params(state.g), flatten_params(state.d)])


def save_checkpoint(state: TrainState, directory) -> Path:
    """Write ``params.bin`` (generator then discriminator, raw little-endian) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = _param_blob(state)
    blob.astype(blob.dtype.newbyteorder("<"), copy=False).tofile(directory / "params.bin")
    manifest = {
        "arch": {"generator": arch_dict(state.g), "discriminator": arch_dict(state.d)},
        "epoch": state.epoch,
        "mode": state.cfg.mode,
        "seed": state.cfg.seed,
        "param_count": int(blob.size),
        "generator_param_count": param_count(state.g),
        "discriminator_param_count": param_count(state.d),
        "dtype": state.cfg.dtype,
        "config": state.cfg.to_json(),
        "rng_state": state.rng.bit_generator.state,
        "queries": None if state.queries is None else {"queries": state.queries.queries, "resolved": state.queries.resolved},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    if state.d_buffers is not None or state.g_buffers is not None:
        torch.save({"d": state.d_buffers, "g": state.g_buffers}, directory / "momentum.pt")
    return directory


def load_checkpoint(directory, cfg: TrainConfig | None = None) -> TrainState:
    """Rebuild a :class:`TrainState` from a checkpoint directory.

    ``cfg`` overrides the stored config (e.g. a larger ``n_epochs`` to extend
    a run); architecture fields must match the stored ones.
    """
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    stored = TrainConfig.from_json(manifest["config"])
    cfg = stored if cfg is None else cfg
    for name in ("g_depth", "g_width", "d_blocks", "d_width", "d_patch", "dtype", "mode"):
        if getattr(cfg, name) != getattr(stored, name):
            raise TrainingError(f"config field {name} differs from checkpoint ({getattr(cfg, name)!r} vs {getattr(stored, name)!r})")
    state = new_state(cfg)
    dtype = np.dtype(np.float32 if cfg.dtype == "float32" else np.float64).newbyteorder("<")
    blob = np.fromfile(directory / "params.bin", dtype=dtype).astype(dtype.newbyteorder("="))
    if blob.size != manifest["param_count"]:
        raise TrainingError(f"params.bin holds {blob.size} values, manifest says {manifest['param_count']}")
    n_g = param_count(state.g)
    load_params(state.g, blob[:n_g])
    load_params(state.d, blob[n_g:])
    state.rng.bit_generator.state = manifest["rng_state"]
    state.epoch = manifest["epoch"]
    if manifest["queries"] is not None:
        state.queries = QuerySet(manifest["queries"]["queries"], manifest["queries"]["resolved"])
    mom = directory / "momentum.pt"
    if mom.exists():
        bufs = torch.load(mom)
        state.d_buffers, state.g_buffers = bufs["d"], bufs["g"]
    return state


def load_networks(directory):
    """(generator, discriminator, config) from a checkpoint."""
    state = load_checkpoint(directory)
    return state.g, state.d, state.cfg


def write_trace(rows, path, append=False):
    path = Path(path)
    new = not (append and path.exists())
    with path.open("w" if new else "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(TRACE_COLUMNS)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


def read_trace(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class TrainResult:
    state: TrainState
    checkpoints: list

    @property
    def g(self):
        return self.state.g

    @property
    def d(self):
        return self.state.d

    @property
    def trace(self):
        return self.state.trace

    def generator_rows(self):
        return [r for r in self.state.trace if r[3] is not None]


def _finish_epoch(state, out_dir, rows):
    state.epoch += 1
    state.trace.extend(rows)
    if out_dir is not None:
        ck = save_checkpoint(state, Path(out_dir) / f"epoch_{state.epoch:04d}")
        write_trace(rows, ck / "trace.csv")
        write_trace(rows, Path(out_dir) / "loss_trace.csv", append=state.epoch > 1 or bool(state.checkpoints))
        state.checkpoints.append(ck)


def _start(cfg, resume, mode):
    if cfg.mode != mode:
        raise TrainingError(f"config mode is {cfg.mode!r}, expected {mode!r}")
    if resume is None:
        return new_state(cfg)
    state = load_checkpoint(resume, cfg)
    log.info("resuming %s run at epoch %d", mode, state.epoch)
    return state


def train_metalgan(dataset: ColorDataset, clusters: ClusterModel, cfg: TrainConfig, out_dir=None, resume=None,
                   on_epoch=None) -> TrainResult:
    """Run MetalGAN until ``cfg.n_epochs`` epochs have completed.

    Trace rows are ``(epoch, query_index, step, loss_g_adv, loss_g_l1, loss_d)``;
    inner-loop rows leave ``loss_d`` empty and discriminator rows leave the
    generator columns empty.
    """
    if clusters.k != cfg.k:
        raise TrainingError(f"cluster file has k={clusters.k} but config says k={cfg.k}")
    state = _start(cfg, resume, "metalgan")
    train_ids = dataset.index.train_ids
    by_id = {c.cluster_id: c for c in clusters.clusters}
    if state.queries is None:
        state.queries = sample_query_set(train_ids, cfg.query_fraction, state.rng, clusters)
    while state.epoch < cfg.n_epochs:
        epoch = state.epoch
        if cfg.resample_queries and epoch > 0:
            state.queries = sample_query_set(train_ids, cfg.query_fraction, state.rng, clusters)
        rows = []
        for qi, q in enumerate(state.queries.queries):
            task = by_id[state.queries.resolved[q]]
            inner = []
            theta_tilde = inner_loop(task, state.g, state.d, cfg, dataset, state.rng, inner)
            rows.extend((epoch, qi, j, adv, l1, None) for j, (adv, l1) in enumerate(inner))
            theta = reptile_update(flatten_params(state.g), theta_tilde, cfg.stepsize_ml)
            load_params(state.g, theta)
            d_losses = discriminator_pass(task, state.d, state.g, cfg, dataset, state.rng, state.d_buffers)
            rows.extend((epoch, qi, b, None, None, ld) for b, ld in enumerate(d_losses))
        _finish_epoch(state, out_dir, rows)
        if on_epoch is not None:
            on_epoch(state)
    return TrainResult(state, list(state.checkpoints))


def train_cgan(dataset: ColorDataset, cfg: TrainConfig, out_dir=None, resume=None, on_epoch=None) -> TrainResult:
    """Alternating generator/discriminator SGD over shuffled batches of the train split."""
    state = _start(cfg, resume, "cgan")
    train_ids = dataset.index.train_ids
    dataset.require_train(train_ids)
    while state.epoch < cfg.n_epochs:
        epoch = state.epoch
        order = state.rng.permutation(len(train_ids))
        rows = []
        for b in range(math.ceil(len(train_ids) / cfg.batch_size)):
            batch = dataset.pairs([train_ids[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]])
            adv, l1 = generator_step(state.g, state.d, batch, cfg, state.g_buffers)
            ld = discriminator_step(state.d, state.g, batch, cfg, state.d_buffers)
            rows.append((epoch, None, b, adv, l1, ld))
        _finish_epoch(state, out_dir, rows)
        if on_epoch is not None:
            on_epoch(state)
    return TrainResult(state, list(state.checkpoints))


def train(dataset, cfg: TrainConfig, clusters=None, out_dir=None, resume=None, on_epoch=None) -> TrainResult:
    if cfg.mode == "metalgan":
        if clusters is None:
            raise TrainingError("metalgan mode needs a cluster model")
        return train_metalgan(dataset, clusters, cfg, out_dir, resume, on_epoch)
    return train_cgan(dataset, cfg, out_dir, resume, on_epoch)
