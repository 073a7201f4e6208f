"""Training regimes: end-to-end backprop and block-local parallel updates.

Both regimes share the same per-step skeleton. The global stepper records
one tape across the whole stack and takes one update over all parameters
(auxiliary heads stay untrained). The local stepper records an independent
tape per block, severing activations between blocks, so every block's
gradient and update depend only on its own loss; block updates are prepared
concurrently by a thread pool and committed only after every worker
succeeds, keeping a failed step side-effect free.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .data import epoch_batches
from .errors import ConfigError, DivergenceError, EvaluationError
from .optim import OptimConfig, Optimizer, global_loss, local_loss

MODES = ("global", "local")


@dataclass
class TrainConfig:
    mode: str = "local"
    lam: float = 2e-4
    epochs: int = 10
    batch_size: int = 128
    workers: int = 1
    seed: int = 0
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.workers < 1:
            raise ConfigError(f"worker count must be >= 1, got {self.workers}")
        if self.lam < 0:
            raise ConfigError(f"orthogonality weight must be non-negative, got {self.lam}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch size >= 1")


@dataclass
class MetricsRecord:
    epoch: int
    cls_loss: list  # per block; None where the head is untrained
    orth_loss: list
    total_loss: list
    test_accuracy: list  # per block; None where not evaluated
    step_ms: float
    drift: float
    diverged: bool = False


def batch_layout(model):
    return "features" if model.input_kind == "vector" else "nchw"


def local_forward(model, batch, lam):
    """Forward sweep with per-block tapes and detached hand-off.

    Returns one (loss, cls, orth) triple per block; each loss is recorded on
    its own tape and depends only on that block's parameters.
    """
    results = []
    x = batch.x.detach()
    for block in model.blocks:
        with ag.Tape():
            h = block.forward(x)
            logits = block.head.forward(h)
            cls = ag.softmax_cross_entropy(logits, batch.y)
            orth = block.orth_penalty()
            results.append((local_loss(cls, orth, lam), cls, orth))
        x = h.detach()
    return results


def global_forward(model, batch, lam):
    """Single-tape forward pass; returns (loss, task, per-block penalties)."""
    with ag.Tape():
        h = batch.x.detach()
        penalties = []
        for block in model.blocks:
            h = block.forward(h)
            penalties.append(block.orth_penalty())
        logits = model.blocks[-1].head.forward(h)
        task = ag.softmax_cross_entropy(logits, batch.y)
        orth_sum = penalties[0]
        for p in penalties[1:]:
            orth_sum = ag.add(orth_sum, p)
        return global_loss(task, orth_sum, lam), task, penalties


class GlobalStepper:
    def __init__(self, model, cfg):
        self.model = model
        self.cfg = cfg
        self.opt = Optimizer(model.global_parameters(), cfg.optim)

    def step(self, batch):
        loss, task, penalties = global_forward(self.model, batch, self.cfg.lam)
        if not np.isfinite(loss.item()):
            raise DivergenceError(f"non-finite global loss {loss.item()}")
        self.opt.zero_grad()
        ag.backward(loss)
        self.opt.step()
        n = len(self.model.blocks)
        cls = [None] * (n - 1) + [task.item()]
        orth = [p.item() for p in penalties]
        total = [(c or 0.0) + self.cfg.lam * o for c, o in zip(cls, orth)]
        return cls, orth, total

    def close(self):
        pass


class LocalStepper:
    def __init__(self, model, cfg):
        self.model = model
        self.cfg = cfg
        self.opts = [Optimizer(block.parameters(), cfg.optim) for block in model.blocks]
        self.pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None

    def _block_task(self, index, loss):
        opt = self.opts[index]
        opt.zero_grad()
        ag.backward(loss)
        return opt.prepare()

    def step(self, batch):
        per_block = local_forward(self.model, batch, self.cfg.lam)
        for i, (loss, _, _) in enumerate(per_block):
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite local loss {loss.item()} in block {i}")
        # prepare updates in parallel; commit only once every block succeeded
        if self.pool is not None:
            staged = list(self.pool.map(self._block_task, range(len(per_block)),
                                        [loss for loss, _, _ in per_block]))
        else:
            staged = [self._block_task(i, loss) for i, (loss, _, _) in enumerate(per_block)]
        for opt, s in zip(self.opts, staged):
            opt.commit(s)
        cls = [c.item() for _, c, _ in per_block]
        orth = [o.item() for _, _, o in per_block]
        total = [t.item() for t, _, _ in per_block]
        return cls, orth, total

    def close(self):
        if self.pool is not None:
            self.pool.shutdown(wait=True)


def make_stepper(model, cfg):
    return GlobalStepper(model, cfg) if cfg.mode == "global" else LocalStepper(model, cfg)


def _block_activations(model, x):
    hs = []
    for block in model.blocks:
        x = block.forward(x)
        hs.append(x)
    return hs


def evaluate(model, dataset, batch_size=256, all_heads=False):
    """Accuracy of the final head (or of every head) without recording a tape."""
    if dataset is None or len(dataset) == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    layout = batch_layout(model)
    n = len(dataset)
    hits = np.zeros(len(model.blocks) if all_heads else 1)
    for batch in epoch_batches(dataset, min(batch_size, n), seed=0, epoch=0, layout=layout):
        if all_heads:
            hs = _block_activations(model, batch.x)
            for i, (block, h) in enumerate(zip(model.blocks, hs)):
                pred = block.head.forward(h).data.argmax(axis=1)
                hits[i] += (pred == batch.y).sum()
        else:
            pred = model.forward_logits(batch.x).data.argmax(axis=1)
            hits[0] += (pred == batch.y).sum()
    acc = hits / n
    return acc.tolist() if all_heads else float(acc[0])


def _run(model, train_set, cfg, test_set, on_epoch):
    stepper = make_stepper(model, cfg)
    layout = batch_layout(model)
    nblocks = len(model.blocks)
    records = []
    try:
        for epoch in range(cfg.epochs):
            sums = [np.zeros(nblocks), np.zeros(nblocks), np.zeros(nblocks)]
            cls_seen = np.zeros(nblocks)
            steps = 0
            elapsed = 0.0
            for batch in epoch_batches(train_set, cfg.batch_size, cfg.seed, epoch, layout):
                t0 = time.perf_counter()
                try:
                    cls, orth, total = stepper.step(batch)
                except DivergenceError as err:
                    nan = [float("nan")] * nblocks
                    records.append(MetricsRecord(epoch, nan, nan, nan, [None] * nblocks,
                                                 0.0, model.max_gram_drift(), diverged=True))
                    if on_epoch:
                        on_epoch(records[-1])
                    raise DivergenceError(str(err), records) from None
                elapsed += time.perf_counter() - t0
                steps += 1
                for i in range(nblocks):
                    if cls[i] is not None:
                        sums[0][i] += cls[i]
                        cls_seen[i] += 1
                    sums[1][i] += orth[i]
                    sums[2][i] += total[i]
            if test_set is not None:
                if cfg.mode == "local":
                    accs = evaluate(model, test_set, all_heads=True)
                else:
                    accs = [None] * (nblocks - 1) + [evaluate(model, test_set)]
            else:
                accs = [None] * nblocks
            record = MetricsRecord(
                epoch=epoch,
                cls_loss=[sums[0][i] / cls_seen[i] if cls_seen[i] else None for i in range(nblocks)],
                orth_loss=(sums[1] / steps).tolist(),
                total_loss=(sums[2] / steps).tolist(),
                test_accuracy=accs,
                step_ms=1e3 * elapsed / steps,
                drift=model.max_gram_drift(),
            )
            records.append(record)
            if on_epoch:
                on_epoch(record)
    finally:
        stepper.close()
    return records


def train_global(model, train_set, cfg, test_set=None, on_epoch=None):
    if cfg.mode != "global":
        raise ConfigError("train_global requires mode='global'")
    return _run(model, train_set, cfg, test_set, on_epoch)


def train_local(model, train_set, cfg, test_set=None, on_epoch=None):
    if cfg.mode != "local":
        raise ConfigError("train_local requires mode='local'")
    return _run(model, train_set, cfg, test_set, on_epoch)


def train(model, train_set, cfg, test_set=None, on_epoch=None):
    if cfg.mode == "global":
        return train_global(model, train_set, cfg, test_set, on_epoch)
    return train_local(model, train_set, cfg, test_set, on_epoch)


def measure_step_time(model, dataset, cfg, mode, steps=40, warmup=10):
    """Wall-clock per optimizer step; warmup excluded, identical batch stream
    for every mode compared under the same config seed."""
    run_cfg = TrainConfig(mode=mode, lam=cfg.lam, epochs=1, batch_size=cfg.batch_size,
                          workers=cfg.workers, seed=cfg.seed, optim=cfg.optim)
    stepper = make_stepper(model, run_cfg)
    layout = batch_layout(model)
    times = []
    try:
        done = 0
        epoch = 0
        while done < warmup + steps:
            for batch in epoch_batches(dataset, cfg.batch_size, cfg.seed, epoch, layout):
                t0 = time.perf_counter()
                stepper.step(batch)
                dt = time.perf_counter() - t0
                if done >= warmup:
                    times.append(dt * 1e3)
                done += 1
                if done >= warmup + steps:
                    break
            epoch += 1
    finally:
        stepper.close()
    times = np.asarray(times)
    return {
        "mode": mode,
        "workers": cfg.workers if mode == "local" else 1,
        "median_ms": float(np.median(times)),
        "p10_ms": float(np.percentile(times, 10)),
        "p90_ms": float(np.percentile(times, 90)),
        "steps": int(steps),
    }
