"""Training loop, checkpoint selection, completion metrics and corruption sweeps."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import model as mdl
from .dataset_io import Dataset
from .hexgrid import block_table
from .masking import (BATCH_STREAM, EVAL_STREAM, MASK_STREAM, VALIDATION_STREAM, sample_masks,
                      stream_rng)
from .neighborhoods import gather_blocks
from .preprocess import DEFAULT_MAX_RADIUS, CompletionProvenance, Source, median_complete

log = logging.getLogger(__name__)

DEFAULT_LR_GRID = (1e-2, 1e-3, 1e-4, 1e-5)


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, iteration, reason):
        super().__init__(f"training diverged at iteration {iteration}: {reason}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    max_iterations: int = 10_000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rho: float = 0.30
    val_every: int = 100
    seed: int = 0
    max_radius_hops: int = DEFAULT_MAX_RADIUS
    divergence_factor: float = 1e4
    standardize: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must be in [0, 1]")
        if self.max_iterations < 0 or self.val_every < 1:
            raise ValueError("max_iterations must be >= 0 and val_every >= 1")


class Adam:
    """Adam with PyTorch's default update rule (no weight decay, no amsgrad)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, state=None, step=0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = step
        if state:
            self.m = {k: state["m." + k].copy() for k in params}
            self.v = {k: state["v." + k].copy() for k in params}
        else:
            self.m = {k: np.zeros_like(p) for k, p in params.items()}
            self.v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, params, grads):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2_sqrt = math.sqrt(1.0 - self.beta2**t)
        step_size = self.lr / bc1
        for name, p in params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v)
            denom /= bc2_sqrt
            denom += self.eps
            p -= step_size * (m / denom)

    def state(self):
        out = {"m." + k: a for k, a in self.m.items()}
        out.update({"v." + k: a for k, a in self.v.items()})
        return out


# --------------------------------------------------------------------------
# synthetic corruption
# --------------------------------------------------------------------------


@dataclass(eq=False)
class CorruptionCase:
    """Observed entries of one split hidden at rate ``rho`` and median re-completed.

    ``held_out`` marks the hidden entries, ``truth`` the original expression,
    ``completed``/``provenance`` the corrupted dataset after median completion.
    """

    rho: float
    split: str
    spots: np.ndarray
    held_out: np.ndarray
    truth: np.ndarray
    completed: Dataset
    provenance: CompletionProvenance

    @property
    def checksum(self) -> str:
        return hashlib.sha256(np.packbits(self.held_out).tobytes()).hexdigest()[:16]


def corruption_seed(seed: int, rho: float) -> np.random.Generator:
    return stream_rng(seed, EVAL_STREAM, int(round(rho * 1_000_000)))


def corrupt(ds: Dataset, provenance: CompletionProvenance, rho: float, rng, *, split="val",
            max_radius_hops=DEFAULT_MAX_RADIUS) -> CorruptionCase:
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"corruption rate must be in (0, 1], got {rho}")
    real = provenance.real
    if not np.array_equal(real, ds.observed):
        raise TrainingError("provenance does not match the dataset's observed mask")
    spots = ds.spots_in_split(split)
    if spots.size == 0:
        raise TrainingError(f"split {split!r} has no spots")
    draw = rng.random((spots.size, ds.g)) < rho
    held_out = np.zeros(real.shape, dtype=bool)
    held_out[spots] = draw & real[spots]
    if not held_out.any():
        raise TrainingError(f"no maskable entries in split {split!r} at rho={rho}")
    kept = real & ~held_out
    corrupted = ds.replace(observed=kept, expression=np.where(kept, ds.expression, 0.0), completion=None)
    completed, prov = median_complete(corrupted, max_radius_hops)
    return CorruptionCase(rho, split, spots, held_out, ds.expression.copy(), completed, prov)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    method: str
    rho: float | str
    mse: float
    pcc: float
    per_gene_pcc: list[float]
    num_evaluated_entries: int
    mask_checksum: str = ""


def compute_metrics(pred, truth, held_out, *, method, rho, checksum="") -> EvalReport:
    """MSE over held-out entries and gene-wise PCC averaged over evaluable genes.

    Genes with fewer than two held-out entries are excluded (NaN in
    ``per_gene_pcc``); genes where either side has zero variance count as 0.
    """
    held_out = np.asarray(held_out, dtype=bool)
    n = int(held_out.sum())
    if n == 0:
        raise TrainingError("no evaluated entries")
    diff = (pred - truth)[held_out]
    mse = float(np.mean(diff * diff))
    per_gene = []
    for j in range(truth.shape[1]):
        sel = held_out[:, j]
        if sel.sum() < 2:
            per_gene.append(math.nan)
            continue
        x, y = truth[sel, j], pred[sel, j]
        xc, yc = x - x.mean(), y - y.mean()
        den = math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
        per_gene.append(float(np.dot(xc, yc)) / den if den > 0 else 0.0)
    valid = [v for v in per_gene if not math.isnan(v)]
    pcc = float(np.mean(valid)) if valid else math.nan
    return EvalReport(method, rho, mse, pcc, per_gene, n, checksum)


# --------------------------------------------------------------------------
# model completion
# --------------------------------------------------------------------------


def inference_inputs(expression, real, table, spots, config: mdl.ModelConfig):
    """Blocks for ``spots`` masked at every present but unobserved entry."""
    values, presence, real_tok = gather_blocks(expression, real, table, spots)
    keep = real_tok | ~presence[:, :, None]
    e_m = config.standardize(values) * keep
    return e_m, presence, keep[:, 0, :], values[:, 0, :]


def model_complete(ckpt: mdl.Checkpoint, ds: Dataset, real, spots, *, table=None):
    """Completed center vectors ``[len(spots), g]`` with observed entries passed through."""
    if table is None:
        table = block_table(ds)
    e_m, presence, keep, center = inference_inputs(ds.expression, real, table, spots, ckpt.config)
    return mdl.complete_centers(ckpt.params, ckpt.config, e_m, presence, keep, center)


def complete_dataset(ckpt: mdl.Checkpoint, ds: Dataset, provenance: CompletionProvenance):
    """Replace every originally missing entry by the model's reconstruction."""
    if ckpt.config.g != ds.g:
        raise mdl.ModelError(f"checkpoint expects g={ckpt.config.g}, dataset has g={ds.g}")
    spots = np.arange(ds.num_spots)
    completed = model_complete(ckpt, ds, provenance.real, spots)
    source = np.where(provenance.real, Source.OBSERVED, Source.MODEL).astype(np.int8)
    expr = np.where(provenance.real, ds.expression, completed)
    return ds.replace(expression=expr, completion="model"), CompletionProvenance(source)


def _score_case(ckpt, case: CorruptionCase, method: str) -> EvalReport:
    if method == "median":
        pred = case.completed.expression
    elif method == "spackle":
        pred = np.zeros_like(case.truth)
        pred[case.spots] = model_complete(ckpt, case.completed, case.provenance.real, case.spots)
    else:
        raise ValueError(f"unknown method {method!r}")
    return compute_metrics(pred, case.truth, case.held_out, method=method, rho=case.rho,
                           checksum=case.checksum)


def evaluate(ckpt, ds, provenance, rho, seed, *, split="val", method="spackle",
             max_radius_hops=DEFAULT_MAX_RADIUS) -> EvalReport:
    """Hide observed entries of ``split`` at rate ``rho`` and score the completion."""
    case = corrupt(ds, provenance, rho, corruption_seed(seed, rho), split=split,
                   max_radius_hops=max_radius_hops)
    return _score_case(ckpt, case, method)


def corruption_sweep(ckpt, ds, provenance, rhos, seed, *, split="val",
                     max_radius_hops=DEFAULT_MAX_RADIUS):
    """One (spackle, median) report pair per rate, both scored on the same hidden entries."""
    if not rhos:
        raise ValueError("rhos must be non-empty")
    pairs = []
    for rho in rhos:
        case = corrupt(ds, provenance, rho, corruption_seed(seed, rho), split=split,
                       max_radius_hops=max_radius_hops)
        pairs.append((_score_case(ckpt, case, "spackle"), _score_case(ckpt, case, "median")))
        log.info("rho=%.2f spackle mse=%.5f median mse=%.5f", rho, pairs[-1][0].mse, pairs[-1][1].mse)
    return pairs


def write_sweep_tsv(pairs, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("rho\tmethod\tmse\tpcc\tn_entries\n")
        for pair in pairs:
            for r in pair:
                fh.write(f"{r.rho!r}\t{r.method}\t{r.mse!r}\t{r.pcc!r}\t{r.num_evaluated_entries}\n")


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


class _Validator:
    """Validation MSE on a fixed corruption of the validation split."""

    def __init__(self, ds, provenance, config: mdl.ModelConfig, train_config: TrainConfig, table):
        rng = stream_rng(train_config.seed, VALIDATION_STREAM)
        rho = train_config.rho if train_config.rho > 0 else 0.3
        self.case = corrupt(ds, provenance, rho, rng, split="val",
                            max_radius_hops=train_config.max_radius_hops)
        c = self.case
        self.inputs = inference_inputs(c.completed.expression, c.provenance.real, table, c.spots, config)
        self.held = c.held_out[c.spots]
        self.truth = c.truth[c.spots]

    def __call__(self, params, config) -> float:
        e_m, presence, keep, center = self.inputs
        pred = mdl.complete_centers(params, config, e_m, presence, keep, center)
        diff = (pred - self.truth)[self.held]
        return float(np.mean(diff * diff))


def _batches(train_spots, batch_size, seed):
    epoch = 0
    order = np.empty(0, dtype=np.intp)
    pos = 0
    while True:
        out = []
        while len(out) < batch_size:
            if pos >= order.size:
                order = train_spots[stream_rng(seed, BATCH_STREAM, epoch).permutation(train_spots.size)]
                epoch += 1
                pos = 0
            take = min(batch_size - len(out), order.size - pos)
            out.extend(order[pos : pos + take].tolist())
            pos += take
        yield np.array(out, dtype=np.intp)


def gene_statistics(ds: Dataset, provenance: CompletionProvenance, split="train") -> dict:
    """Per-gene mean and standard deviation of observed training entries.

    Genes with no spread (or no observations) keep a unit scale.
    """
    rows = ds.spots_in_split(split)
    real = provenance.real[rows]
    x = ds.expression[rows]
    n = real.sum(axis=0)
    safe_n = np.maximum(n, 1)
    mean = np.where(real, x, 0.0).sum(axis=0) / safe_n
    var = np.where(real, (x - mean) ** 2, 0.0).sum(axis=0) / safe_n
    std = np.sqrt(var)
    std = np.where((n > 1) & (std > 1e-8), std, 1.0)
    return {"gene_center": tuple(mean.tolist()), "gene_scale": tuple(std.tolist())}


def train(ds: Dataset, provenance: CompletionProvenance, model_config: mdl.ModelConfig,
          train_config: TrainConfig, *, init: mdl.Checkpoint | None = None, progress=None) -> mdl.Checkpoint:
    """Train on median-completed data and return the lowest-validation-MSE checkpoint.

    Validation runs before the first step, every ``val_every`` steps, and after
    the final step. ``extra["history"]`` of the returned checkpoint holds
    ``[iteration, mean train loss since last validation, val_mse]`` rows.

    With ``standardize`` on, inputs are z-scored per gene using observed
    training entries before masking, so the training loss is in standardized
    units while validation MSE stays in expression units.
    """
    if ds.completion is None:
        raise TrainingError("training expects a median-completed dataset")
    if model_config.g != ds.g:
        raise mdl.ModelError(f"model g={model_config.g} does not match dataset g={ds.g}")
    train_spots = ds.spots_in_split("train")
    if train_spots.size == 0 or ds.spots_in_split("val").size == 0:
        raise TrainingError("train and val splits must both be non-empty")

    tc = train_config
    if init is not None:
        model_config = init.config
    elif tc.standardize and model_config.gene_center is None:
        model_config = dataclasses.replace(model_config, **gene_statistics(ds, provenance))
    table = block_table(ds)
    real = provenance.real
    expression = ds.expression
    validator = _Validator(ds, provenance, model_config, tc, table)

    if init is None:
        params = mdl.init_params(model_config, tc.seed)
        opt = Adam(params, tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
    else:
        params = {k: v.copy() for k, v in init.params.items()}
        opt = Adam(params, tc.learning_rate, tc.beta1, tc.beta2, tc.eps,
                   state=init.optimizer or None, step=init.optimizer_step)

    def snapshot(iteration, val):
        return mdl.Checkpoint(
            config=model_config, params={k: v.copy() for k, v in params.items()}, iteration=iteration,
            best_val_mse=val, seed=tc.seed, optimizer={k: v.copy() for k, v in opt.state().items()},
            optimizer_step=opt.step_count,
        )

    history = []
    val = validator(params, model_config)
    best = snapshot(0, val)
    history.append([0, math.nan, val])
    batches = _batches(train_spots, tc.batch_size, tc.seed)
    running, n_running, first_loss = 0.0, 0, None

    for it in range(tc.max_iterations):
        spots = next(batches)
        values, presence, real_tok = gather_blocks(expression, real, table, spots)
        values = model_config.standardize(values)
        keep = sample_masks(real_tok, tc.rho, stream_rng(tc.seed, MASK_STREAM, it))
        try:
            loss, grads = mdl.loss_and_gradients(params, model_config, values, values * keep, presence)
        except FloatingPointError as exc:
            raise TrainingDiverged(it, str(exc)) from None
        if first_loss is None:
            first_loss = loss
        if loss > tc.divergence_factor * max(first_loss, 1e-12):
            raise TrainingDiverged(it, f"loss {loss:.4g} exceeds {tc.divergence_factor:g}x the initial loss")
        opt.step(params, grads)
        running += loss
        n_running += 1

        done = it + 1
        if done % tc.val_every == 0 or done == tc.max_iterations:
            val = validator(params, model_config)
            if not math.isfinite(val):
                raise TrainingDiverged(done, "non-finite validation MSE")
            history.append([done, running / n_running, val])
            running, n_running = 0.0, 0
            if val < best.best_val_mse:
                best = snapshot(done, val)
            if progress is not None:
                progress(done, history[-1][1], val, best.best_val_mse)

    best.extra = {"history": history, "initial_train_loss": first_loss, "train_config": tc.__dict__.copy()}
    return best


def train_loss_trace(ckpt: mdl.Checkpoint):
    return [row[1] for row in ckpt.extra.get("history", [])]


@dataclass
class LrSearchRow:
    learning_rate: float
    val_mse: float
    diverged: bool = False
    note: str = ""


def lr_search(ds, provenance, model_config, base_train_config: TrainConfig, grid=DEFAULT_LR_GRID,
              *, budget: int = 1000):
    """Short training run per learning rate; returns (best lr, table rows in grid order)."""
    if not grid:
        raise ValueError("learning-rate grid must be non-empty")
    rows = []
    for lr in grid:
        tc = replace(base_train_config, learning_rate=float(lr), max_iterations=budget)
        try:
            ckpt = train(ds, provenance, model_config, tc)
            rows.append(LrSearchRow(float(lr), ckpt.best_val_mse))
        except TrainingDiverged as exc:
            rows.append(LrSearchRow(float(lr), math.inf, True, str(exc)))
        log.info("lr=%g val_mse=%s", lr, rows[-1].val_mse)
    ok = [r for r in rows if not r.diverged]
    if not ok:
        raise TrainingError("every learning rate in the grid diverged")
    best = min(ok, key=lambda r: (r.val_mse, r.learning_rate))
    return best.learning_rate, rows
