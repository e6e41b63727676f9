"""End-to-end training loop joining the model, key pools, and losses.

One training step runs a fixed pipeline:

1. live forward pass (features, projection, logits);
2. key forward pass for the same batch through the momentum twin;
3. per-query key-batch sampling, slot 0 = the query's own key;
4. enabled losses, backward, SGD-with-momentum update (weight decay
   folded into the gradient, boosted learning rate for the heads);
5. momentum update of the twin (after the optimizer step, so keys always
   come from the slow weights);
6. the batch's keys join the pool (queue append, or snapshot mixing in
   memory-bank mode).

Keys are sampled before the batch is enqueued, so a batch never contrasts
against its own fresh keys. When every contrastive term is disabled the
step collapses to vanilla fine-tuning and skips stages 2, 3, 5 and 6
entirely. In memory-bank mode the twin is used only to initialize the
snapshots during warm-up; afterwards keys live in the bank and stage 6
mixes in the *live* (detached) query features.

Determinism: a run's randomness comes from named substreams spawned from
the run seed (dataset, split, subsample, init, batching, sampling), so
identical config + seed reproduces the metric log bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import losses as losses_mod
from . import model as model_mod
from . import ndgrad as nd
from .config import RunConfig
from .keypool import EmptyPoolError, KeyEntry, MemoryBank, MocoQueues
from .model import ModelDims, ModelParams, MomentumTwin
from .ndgrad import NonFiniteError, Tensor


@dataclass
class OptimizerState:
    """SGD-with-momentum state: one velocity buffer per parameter.

    Weight decay is classic (added to the gradient before the velocity
    update). Head parameters (classifier and projector) train at
    base_lr * head_lr_multiplier; encoder parameters at base_lr. The
    schedule is a list of (iteration, multiplier) decay points applied
    once when that iteration starts.
    """

    base_lr: float
    head_lr_multiplier: float = 10.0
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: tuple[tuple[int, float], ...] = ()
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    head_names: set[str] = field(default_factory=set)
    lr_mult: float = 1.0

    def effective_lr(self, name: str) -> float:
        boost = self.head_lr_multiplier if name in self.head_names else 1.0
        return self.base_lr * self.lr_mult * boost


@dataclass
class MetricRow:
    iteration: int
    ce: float | None = None
    cce: float | None = None
    ccl: float | None = None
    total: float | None = None
    val_acc: float | None = None


@dataclass
class TrainRun:
    """Everything a finished run produced, metric log included."""

    config: RunConfig
    seed: int
    iterations: int
    metric_log: list[MetricRow]
    final_val_acc: float
    best_val_acc: float
    wall_seconds: float
    params: ModelParams
    twin: MomentumTwin
    pool: MocoQueues | MemoryBank


def resolve_schedule(spec, iterations: int) -> tuple[tuple[int, float], ...]:
    """'auto' decays x0.1 at 2/3 and 5/6 of the run; 'none' never decays."""
    if spec == "none" or iterations <= 0:
        return ()
    if spec == "auto":
        points = sorted({max(1, (2 * iterations) // 3), max(1, (5 * iterations) // 6)})
        return tuple((p, 0.1) for p in points)
    return tuple(spec)


def init_optimizer(params: ModelParams, cfg: RunConfig) -> OptimizerState:
    opt = OptimizerState(
        base_lr=cfg.optimizer.base_lr,
        head_lr_multiplier=cfg.optimizer.head_lr_multiplier,
        sgd_momentum=cfg.optimizer.sgd_momentum,
        weight_decay=cfg.optimizer.weight_decay,
        schedule=resolve_schedule(cfg.optimizer.schedule, cfg.optimizer.iterations),
    )
    opt.velocities = {name: np.zeros_like(t.data) for name, t in params.named_parameters()}
    opt.head_names = params.head_names()
    return opt


def advance_schedule(opt: OptimizerState, iteration: int) -> None:
    for point, mult in opt.schedule:
        if point == iteration:
            opt.lr_mult *= mult


def sgd_apply(params: ModelParams, opt: OptimizerState) -> None:
    """One SGD-momentum update; consumes and clears gradients.

    Parameters whose gradient was never touched this step are skipped
    (no decay either), mirroring the usual deep-learning convention.
    """
    for name, t in params.named_parameters():
        if t.grad is None:
            continue
        g = t.grad + opt.weight_decay * t.data
        v = opt.velocities[name]
        v *= opt.sgd_momentum
        v += g
        t.data -= opt.effective_lr(name) * v
        t.zero_grad()
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"parameter {name} became non-finite after the optimizer step")


def _row_normalize_np(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _key_entries(h_norm: np.ndarray, z: np.ndarray, labels: np.ndarray) -> list[KeyEntry]:
    return [
        KeyEntry(h_key=h_norm[i].copy(), z_key=z[i].copy(), label=int(labels[i]))
        for i in range(labels.shape[0])
    ]


def step(
    params: ModelParams,
    twin: MomentumTwin,
    pool: MocoQueues | MemoryBank,
    batch: tuple[np.ndarray, np.ndarray, np.ndarray],
    opt: OptimizerState,
    cfg: RunConfig,
    rng: np.random.Generator,
) -> losses_mod.LossTerms:
    """One optimization step over (features, labels, example_ids)."""
    x_np, y, ids = batch
    w_ce, w_cce, w_ccl = cfg.losses.weights()
    contrastive = w_cce != 0.0 or w_ccl != 0.0
    bank_mode = isinstance(pool, MemoryBank)

    x = Tensor(x_np)
    h_q, z_q, logits = model_mod.forward_query(params, x)

    key_batches = None
    h_k = z_k = None
    if contrastive:
        if len(pool) == 0:
            raise EmptyPoolError("contrastive terms enabled but the key pool is empty; run warmup first")
        if bank_mode:
            queries = [pool.entry(int(i)) for i in ids]
            key_batches = [
                pool.sample(cfg.keys.keys_per_class, q, rng, uniform=cfg.keys.bank_uniform)
                for q in queries
            ]
        else:
            h_k_t, z_k_t = model_mod.forward_key(twin, x)
            h_k, z_k = h_k_t.data, z_k_t.data
            queries = _key_entries(h_k, z_k, y)
            key_batches = [pool.sample(cfg.keys.keys_per_class, q, rng) for q in queries]

    terms = losses_mod.LossTerms(weights=(w_ce, w_cce, w_ccl))
    if w_ce != 0.0:
        terms.ce = losses_mod.ce(logits, y, reduction=cfg.losses.reduction)
    if w_cce != 0.0:
        h_q_norm = nd.row_l2_normalize(h_q)
        terms.cce = losses_mod.cce(
            h_q_norm, y, params.classifier_W, key_batches, cfg.losses.tau,
            variant=cfg.losses.cce_variant, reduction=cfg.losses.reduction,
        )
    if w_ccl != 0.0:
        terms.ccl = losses_mod.ccl(z_q, y, key_batches, cfg.losses.tau, reduction=cfg.losses.reduction)

    total = losses_mod.joint_total(terms)
    total.backward()
    sgd_apply(params, opt)

    if contrastive:
        if bank_mode:
            pool.update(ids, _row_normalize_np(h_q.data), z_q.data)
        else:
            model_mod.momentum_update(twin, params)
            pool.enqueue(_key_entries(h_k, z_k, y))
    return terms


def warmup(
    params: ModelParams,
    twin: MomentumTwin,
    pool: MocoQueues | MemoryBank,
    ds: data_mod.Dataset,
    cfg: RunConfig,
) -> None:
    """Fill the key pool with one gradient-free pass through the twin.

    Queue mode forwards the newest queue_size examples of each class (in
    dataset order), so every present class starts with a full buffer.
    Bank mode snapshots every example.
    """
    if len(ds) == 0:
        raise data_mod.DataError("cannot warm up from an empty dataset")
    if isinstance(pool, MemoryBank):
        _init_bank_snapshots(twin, pool, ds)
        return
    selected: list[np.ndarray] = []
    for c in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size:
            selected.append(idx[-pool.queue_size:])
    order = np.sort(np.concatenate(selected))
    h_t, z_t = model_mod.forward_key(twin, Tensor(ds.features[order]))
    pool.enqueue(_key_entries(h_t.data, z_t.data, ds.labels[order]))


def evaluate(params: ModelParams, ds: data_mod.Dataset) -> float:
    """Top-1 accuracy through the classifier path; argmax ties resolve to
    the lowest class index."""
    if len(ds) == 0:
        raise data_mod.DataError("cannot evaluate on an empty dataset")
    logits = model_mod.forward_logits(params, Tensor(ds.features))
    pred = np.argmax(logits.data, axis=1)
    return float(np.mean(pred == ds.labels))


def build_dataset(cfg: RunConfig, seed_seq: np.random.SeedSequence) -> data_mod.Dataset:
    """Construct the full dataset named by the config.

    Synthetic generators use dataset.seed when given (fixing the data
    across run seeds), otherwise a substream of the run seed.
    """
    dc = cfg.dataset
    gen_seed = dc.seed if dc.seed is not None else seed_seq
    if dc.kind == "blobs":
        return data_mod.make_blobs(dc.classes, dc.per_class, dc.dim, dc.separation, dc.noise, gen_seed)
    if dc.kind == "rings":
        return data_mod.make_rings(dc.classes, dc.per_class, dc.noise, gen_seed)
    if dc.kind == "file":
        return data_mod.load_delimited(dc.path, dc.delimiter, dc.label_column, dc.has_header)
    raise ValueError(f"unknown dataset kind {dc.kind!r}")


def prepare_data(cfg: RunConfig) -> tuple[data_mod.Dataset, data_mod.Dataset]:
    """Dataset -> stratified split -> per-class subsample of the train side.

    Shared by training and standalone evaluation so both see the same
    split for the same config.
    """
    ss = np.random.SeedSequence(cfg.seed)
    s_data, s_split, s_sub, _, _, _ = ss.spawn(6)
    full = build_dataset(cfg, s_data)
    train, val = data_mod.split_stratified(full, cfg.dataset.train_fraction, s_split)
    if cfg.dataset.sampling_rate != 1.0:
        train = data_mod.subsample_per_class(train, cfg.dataset.sampling_rate, s_sub)
    return train, val


class _Batcher:
    """Shuffled mini-batches, reshuffling at each epoch boundary."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos >= self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        out = self.perm[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return out


def fit(cfg: RunConfig) -> TrainRun:
    """Warm up, train for cfg.optimizer.iterations steps, log, evaluate."""
    started = time.perf_counter()
    ss = np.random.SeedSequence(cfg.seed)
    _, _, _, s_init, s_batch, s_sample = ss.spawn(6)
    train, val = prepare_data(cfg)

    dims = ModelDims(
        in_dim=train.in_dim,
        hidden=cfg.model.hidden,
        feature_dim=cfg.model.feature_dim,
        class_count=train.class_count,
        projector_dim=cfg.model.projector_dim,
    )
    params = model_mod.init_params(dims, np.random.default_rng(s_init), classifier_bias=cfg.model.classifier_bias)
    twin = model_mod.init_twin(params, cfg.keys.momentum)
    if cfg.keys.generator == "membank":
        pool: MocoQueues | MemoryBank = MemoryBank(train.labels, m_bank=cfg.keys.bank_momentum)
    else:
        pool = MocoQueues(train.class_count, cfg.keys.queue_size)

    _, w_cce, w_ccl = cfg.losses.weights()
    contrastive = w_cce != 0.0 or w_ccl != 0.0
    if contrastive and cfg.keys.warmup_mode == "prefill":
        warmup(params, twin, pool, train, cfg)

    opt = init_optimizer(params, cfg)
    batcher = _Batcher(len(train), cfg.optimizer.batch_size, np.random.default_rng(s_batch))
    sample_rng = np.random.default_rng(s_sample)

    log: list[MetricRow] = [MetricRow(iteration=0, val_acc=evaluate(params, val))]
    best = log[0].val_acc
    iterations = cfg.optimizer.iterations
    for it in range(1, iterations + 1):
        advance_schedule(opt, it)
        idx = batcher.next()
        batch = (train.features[idx], train.labels[idx], train.example_ids[idx])
        if contrastive and cfg.keys.warmup_mode == "defer" and len(pool) == 0:
            _fill_pool_from_batch(twin, pool, batch, train, cfg)
        terms = step(params, twin, pool, batch, opt, cfg, sample_rng)

        due_log = it % cfg.log_every == 0
        due_eval = it % cfg.eval_every == 0 or it == iterations
        if due_log or due_eval:
            vals = terms.values()
            row = MetricRow(iteration=it, ce=vals["ce"], cce=vals["cce"], ccl=vals["ccl"], total=vals["total"])
            if due_eval:
                row.val_acc = evaluate(params, val)
                best = max(best, row.val_acc)
            log.append(row)

    final = log[-1].val_acc if log[-1].val_acc is not None else evaluate(params, val)
    return TrainRun(
        config=cfg,
        seed=cfg.seed,
        iterations=iterations,
        metric_log=log,
        final_val_acc=final,
        best_val_acc=best,
        wall_seconds=time.perf_counter() - started,
        params=params,
        twin=twin,
        pool=pool,
    )


def _init_bank_snapshots(twin: MomentumTwin, pool: MemoryBank, ds: data_mod.Dataset) -> None:
    h_parts, z_parts = [], []
    for lo in range(0, len(ds), 256):
        h_t, z_t = model_mod.forward_key(twin, Tensor(ds.features[lo:lo + 256]))
        h_parts.append(h_t.data)
        z_parts.append(z_t.data)
    pool.initialize(np.vstack(h_parts), np.vstack(z_parts))


def _fill_pool_from_batch(twin, pool, batch, train, cfg) -> None:
    """Deferred warm-up: the first contrastive step seeds the pool itself."""
    x_np, y, _ = batch
    if isinstance(pool, MemoryBank):
        _init_bank_snapshots(twin, pool, train)
        return
    h_t, z_t = model_mod.forward_key(twin, Tensor(x_np))
    pool.enqueue(_key_entries(h_t.data, z_t.data, y))


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def metrics_csv_lines(run: TrainRun) -> list[str]:
    """Deterministic CSV rows: identical runs serialize byte-identically."""
    lines = ["iteration,ce,cce,ccl,total,val_acc"]
    for row in run.metric_log:
        lines.append(
            f"{row.iteration},{_fmt(row.ce)},{_fmt(row.cce)},{_fmt(row.ccl)},{_fmt(row.total)},{_fmt(row.val_acc)}"
        )
    return lines
