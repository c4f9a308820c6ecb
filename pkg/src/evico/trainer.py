"""Training loop, ablation and labeled-ratio sweep drivers."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, DomainError, EmptyBatchError, TrainingDiverged
from .export import export_uncertainty_maps  # noqa: F401  re-exported driver
from .heads import ACTIVATIONS
from .losses import LossToggles, ScheduleState, dcnet_terms
from .metrics import EvalResult, evaluate_set
from .netmodel import PREDICT_MODES, ModelParams, forward, init_params, save_checkpoint
from .synthdata import Dataset, generate, make_batches

log = logging.getLogger(__name__)

LOSS_LOG_COLUMNS = ("iter", "L_CE", "L_ECE", "L_KL", "L_UEGV", "L_UVGE", "total",
                    "lambda_kl", "lambda_c", "lr")
EVAL_LOG_COLUMNS = ("iter", "dice", "jaccard", "asd", "hd95")

# Ablation settings in table order: (name, CE, ENC, UEGV, UVGE)
ABLATION_ROWS = (
    ("CE", LossToggles(True, False, False, False)),
    ("CE+ENC", LossToggles(True, True, False, False)),
    ("CE+ENC+UEGV", LossToggles(True, True, True, False)),
    ("CE+ENC+UVGE", LossToggles(True, True, False, True)),
    ("DC-Net", LossToggles(True, True, True, True)),
)
BASELINE = LossToggles(True, True, False, False)
FULL = LossToggles(True, True, True, True)

FULL_SCALE = {"max_iterations": 30000, "batch_size": 8, "labeled_per_batch": 4, "lr0": 0.1}


@dataclass
class TrainConfig:
    max_iterations: int = 3000
    batch_size: int = 8
    labeled_per_batch: int = 4
    lr0: float = 0.1
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iters_per_epoch: int = 150
    kl_denominator: float = 150.0
    con_denominator: float = 40.0
    con_amplitude: float = 0.1
    loss_ce: bool = True
    loss_enc: bool = True
    loss_uegv: bool = True
    loss_uvge: bool = True
    stop_gradient: bool = True
    activation: str = "softplus"
    predict_mode: str = "auto"
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.max_iterations <= 0:
            raise ConfigError("max_iterations must be > 0")
        if not 0 < self.labeled_per_batch <= self.batch_size:
            raise ConfigError("need 0 < labeled_per_batch <= batch_size")
        if not (self.loss_ce or self.loss_enc):
            raise ConfigError("at least one supervised term (CE or ENC) must be enabled")
        if self.iters_per_epoch <= 0:
            raise ConfigError("iters_per_epoch must be > 0")
        if self.lr0 <= 0 or self.poly_power < 0:
            raise ConfigError("need lr0 > 0 and poly_power >= 0")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("need 0 <= momentum < 1 and weight_decay >= 0")
        if self.con_amplitude < 0:
            raise ConfigError("con_amplitude must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.predict_mode not in ("auto",) + PREDICT_MODES:
            raise ConfigError(f"predict_mode must be auto or one of {PREDICT_MODES}")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")

    @property
    def toggles(self):
        return LossToggles(self.loss_ce, self.loss_enc, self.loss_uegv, self.loss_uvge)

    def with_toggles(self, t: LossToggles, **kw):
        return replace(self, loss_ce=t.ce, loss_enc=t.enc, loss_uegv=t.uegv,
                       loss_uvge=t.uvge, **kw)

    def resolved_predict_mode(self):
        if self.predict_mode != "auto":
            return self.predict_mode
        if not self.loss_enc:
            return "vanilla"
        if not self.loss_ce:
            return "evidential"
        return "fused"

    def schedule(self, iteration):
        return ScheduleState(
            t=iteration // self.iters_per_epoch,
            kl_denominator=self.kl_denominator,
            con_denominator=self.con_denominator,
            con_amplitude=self.con_amplitude,
        )

    def learning_rate(self, iteration):
        return self.lr0 * (1.0 - iteration / self.max_iterations) ** self.poly_power


@dataclass
class RunRecord:
    config: TrainConfig
    losses: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    params: ModelParams | None = None
    final: EvalResult | None = None
    checkpoint: Path | None = None
    n_labeled: int = 0
    n_unlabeled: int = 0


class _SGD:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: ModelParams, momentum, weight_decay):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr):
        for name, p in self.params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p -= lr * v


def _eval_row(iteration, res: EvalResult):
    m = res.mean
    return {"iter": iteration, "dice": m.dice, "jaccard": m.jaccard, "asd": m.asd, "hd95": m.hd95}


def train(config: TrainConfig, dataset: Dataset, out_dir=None) -> RunRecord:
    """Run the full optimisation; deterministic for a given config and dataset.

    Writes the loss log, eval log and final checkpoint if ``out_dir`` is given.
    """
    toggles = config.toggles
    labeled = dataset.labeled
    if not labeled:
        raise EmptyBatchError("dataset has no labeled training samples")
    use_unlabeled = toggles.uses_unlabeled and bool(dataset.unlabeled)
    if use_unlabeled and config.labeled_per_batch == config.batch_size:
        use_unlabeled = False
    k = dataset.spec.num_classes
    params = init_params(config.seed, k)
    opt = _SGD(params, config.momentum, config.weight_decay)
    stream = make_batches(dataset.train, config.batch_size, config.labeled_per_batch,
                          config.seed, include_unlabeled=use_unlabeled)
    rec = RunRecord(config, params=params, n_labeled=len(labeled),
                    n_unlabeled=len(dataset.unlabeled) if use_unlabeled else 0)
    mode = config.resolved_predict_mode()

    for it in range(config.max_iterations):
        batch = next(stream)
        sched = config.schedule(it)
        lr = config.learning_rate(it)
        tape = dc.Tape()
        leaves = {name: tape.leaf(v) for name, v in params.items()}
        try:
            out = forward(leaves, batch.images, tape, config.activation)
            terms = dcnet_terms(out.p_vanilla, out.evidential, batch.labels, sched, toggles,
                                config.stop_gradient)
        except DomainError as exc:
            # non-finite activations reach the special functions first
            raise TrainingDiverged(f"non-finite values at iteration {it}: {exc}",
                                   {"iter": it, "lr": lr}) from exc
        vals = terms.values()
        row = {"iter": it, "L_CE": vals["ce"], "L_ECE": vals["ece"], "L_KL": vals["kl"],
               "L_UEGV": vals["uegv"], "L_UVGE": vals["uvge"], "total": vals["total"],
               "lambda_kl": terms.lambda_kl, "lambda_c": terms.lambda_c, "lr": lr}
        rec.losses.append(row)
        if not all(math.isfinite(v) for v in vals.values()):
            raise TrainingDiverged(f"non-finite loss at iteration {it}: {vals}", row)
        grads = tape.backward(terms.total)
        opt.step({name: grads[leaf] for name, leaf in leaves.items()}, lr)

        done = it + 1
        if config.eval_every and done % config.eval_every == 0 and done < config.max_iterations \
                and dataset.test:
            res = evaluate_set(params, dataset.test, mode, config.activation, allow_undefined=True)
            rec.evals.append(_eval_row(done, res))
            log.info("iter %d dice %.4f", done, res.mean.dice)

    if dataset.test:
        rec.final = evaluate_set(params, dataset.test, mode, config.activation,
                                 allow_undefined=True)
        rec.evals.append(_eval_row(config.max_iterations, rec.final))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_loss_log(rec, out / "loss_log.csv")
        write_eval_log(rec, out / "eval_log.csv")
        rec.checkpoint = save_checkpoint(params, out / "checkpoint.bin")
    return rec


def _cell(v):
    if v is None:
        return ""
    return str(v) if isinstance(v, int) else repr(float(v))


def write_loss_log(rec: RunRecord, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOSS_LOG_COLUMNS)
        for row in rec.losses:
            wr.writerow([_cell(row[c]) for c in LOSS_LOG_COLUMNS])
    return Path(path)


def write_eval_log(rec: RunRecord, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(EVAL_LOG_COLUMNS)
        for row in rec.evals:
            wr.writerow([_cell(row[c]) for c in EVAL_LOG_COLUMNS])
    return Path(path)


# ---------------------------------------------------------------- experiment drivers

@dataclass
class SummaryRow:
    name: str
    labeled: int
    unlabeled: int
    toggles: LossToggles
    dice: float       # percent, mean over seeds
    jaccard: float    # percent
    asd: float | None
    hd95: float | None
    seed_dice: list[float]
    records: list[RunRecord] = field(default_factory=list, repr=False)
    labeled_fraction: float | None = None


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _summarise(name, toggles, records, fraction=None) -> SummaryRow:
    finals = [r.final.mean for r in records]
    return SummaryRow(
        name=name,
        labeled=records[0].n_labeled,
        unlabeled=records[0].n_unlabeled,
        toggles=toggles,
        dice=100.0 * float(np.mean([m.dice for m in finals])),
        jaccard=100.0 * float(np.mean([m.jaccard for m in finals])),
        asd=_mean_defined([m.asd for m in finals]),
        hd95=_mean_defined([m.hd95 for m in finals]),
        seed_dice=[100.0 * m.dice for m in finals],
        records=list(records),
        labeled_fraction=fraction,
    )


def _run_seeds(config, toggles, dataset, seeds, out_dir, tag):
    records = []
    for s in seeds:
        sub = None if out_dir is None else Path(out_dir) / f"{tag}_seed{s}"
        records.append(train(config.with_toggles(toggles, seed=s), dataset, sub))
    return records


def run_ablation(base: TrainConfig, dataset: Dataset, seeds=(0,), out_dir=None,
                 rows=ABLATION_ROWS) -> list[SummaryRow]:
    """Train each ablation setting for every seed; rows keep the table order."""
    if not seeds:
        raise ConfigError("run_ablation needs at least one seed")
    table = []
    for i, (name, toggles) in enumerate(rows, 1):
        log.info("ablation row %d (%s)", i, name)
        recs = _run_seeds(base, toggles, dataset, seeds, out_dir, f"row{i}")
        table.append(_summarise(name, toggles, recs))
    return table


def run_ratio_sweep(config: TrainConfig, spec, fractions, seeds=(0,), out_dir=None):
    """Baseline (CE+ENC, labeled only) and DC-Net at every labeled fraction."""
    if not seeds:
        raise ConfigError("run_ratio_sweep needs at least one seed")
    table = []
    for frac in fractions:
        if not 0 < frac <= 1:
            raise ConfigError(f"labeled fraction {frac} outside (0, 1]")
        ds = generate(replace(spec, labeled_fraction=frac))
        for name, toggles in (("baseline", BASELINE), ("DC-Net", FULL)):
            tag = f"frac{frac:g}_{name}"
            recs = _run_seeds(config, toggles, ds, seeds, out_dir, tag)
            table.append(_summarise(name, toggles, recs, fraction=frac))
    return table


SUMMARY_COLUMNS = ("setting", "labeled_fraction", "labeled", "unlabeled", "CE", "ENC", "UEGV",
                   "UVGE", "dice", "jaccard", "asd", "hd95", "seed_dice")


def _fmt4(v):
    return "" if v is None else f"{v:.4f}"


def write_summary_csv(rows: list[SummaryRow], path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SUMMARY_COLUMNS)
        for r in rows:
            t = r.toggles
            wr.writerow([r.name, "" if r.labeled_fraction is None else f"{r.labeled_fraction:g}",
                         r.labeled, r.unlabeled, int(t.ce), int(t.enc), int(t.uegv), int(t.uvge),
                         f"{r.dice:.2f}", f"{r.jaccard:.2f}", _fmt4(r.asd), _fmt4(r.hd95),
                         " ".join(f"{d:.2f}" for d in r.seed_dice)])
    return Path(path)
