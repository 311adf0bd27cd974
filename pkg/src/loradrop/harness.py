"""Experiment driver: the training loop, axis sweeps, the named-method
comparison with significance testing, and run-directory persistence.

Layout of a run directory:

    <out>/<run_id>/config.json    the exact configuration used
    <out>/<run_id>/metrics.jsonl  one record per eval interval (deterministic)
    <out>/<run_id>/best.ckpt      parameters at the best eval metric
    <out>/<run_id>/run_info.json  timing and summary (wall time lives here,
                                  outside the deterministic metrics file)
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .dropout import DropoutSpec, Position
from .errors import ContractError, NumericError
from .losses import CompensationKind, CompensationSpec, twin_pass_step
from .masks import StructuralPattern
from .model import Model
from .optim import AdamW, linear_schedule
from .tasks import Dataset, generate

EVAL_CHUNK = 256

METHOD_NAMES = ("baseline", "dropkey", "dropattention", "hiddencut", "hiddenkey-", "hiddenkey")

# standard grids used when a sweep is run without explicit values
DEFAULT_SWEEP_VALUES = {
    "dropout_rate": [0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
    "lora_rank": [1, 2, 4, 8, 16, 32],
    "kl_weight": [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0],
}


@dataclass
class RunRecord:
    step: int
    train_loss: float
    train_metric: float
    eval_metric: float
    consistency_loss: float
    config_hash: str
    seed: int
    wall_time: float = 0.0  # informational; not serialized into metrics.jsonl

    def metrics_line(self) -> str:
        d = dataclasses.asdict(self)
        d.pop("wall_time")
        return json.dumps(d, sort_keys=True)


@dataclass
class TrainResult:
    records: list[RunRecord]
    best_eval: float
    best_step: int
    final: RunRecord
    run_dir: Path | None
    model: Model


@dataclass
class SweepSpec:
    axis: str  # dropout_rate | lora_rank | kl_weight
    values: list
    seeds: list[int]
    base_config: RunConfig

    def __post_init__(self):
        if self.axis not in ("dropout_rate", "lora_rank", "kl_weight"):
            raise ContractError(f"unknown sweep axis {self.axis!r}")
        if not self.values or not self.seeds:
            raise ContractError("sweep needs non-empty values and seeds")


def derive_step_seed(run_seed: int, step: int) -> int:
    ss = np.random.SeedSequence([int(run_seed), 0x57E9, int(step)])
    return int(ss.generate_state(1, np.uint64)[0])


def _metric(output: np.ndarray, targets: np.ndarray, regression: bool) -> tuple[float, float]:
    """Returns (metric, loss-style mse or nan). For classification the
    metric is accuracy; for regression the Pearson correlation."""
    if regression:
        if np.std(output) == 0.0 or np.std(targets) == 0.0:
            r = 0.0
        else:
            r = float(np.corrcoef(output, targets)[0, 1])
        return r, float(np.mean((output - targets) ** 2))
    pred = np.argmax(output, axis=1)
    return float(np.mean(pred == targets)), float("nan")


def evaluate(model: Model, tokens: np.ndarray, targets: np.ndarray) -> float:
    """Metric with all dropout disabled (inference mode)."""
    regression = model.config.head == "regressor"
    outs = []
    with T.no_grad():
        for start in range(0, tokens.shape[0], EVAL_CHUNK):
            res = model.forward(tokens[start:start + EVAL_CHUNK], training=False)
            outs.append(res.output.data)
    output = np.concatenate(outs, axis=0)
    metric, _ = _metric(output, targets, regression)
    return metric


def _prepare_run_dir(out_dir, run_id: str) -> Path:
    run_dir = Path(out_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def run_id_for(config: RunConfig) -> str:
    return f"{config.task.kind}-{config.config_hash()}-seed{config.seed}"


def train(config: RunConfig, out_dir=None, dataset: Dataset | None = None) -> TrainResult:
    """Train one configuration to completion.

    Deterministic in (config, seed): identical inputs yield bit-identical
    metrics files and checkpoints. Aborts with a diagnostic record if the
    loss goes non-finite.
    """
    config.validate()
    t0 = time.monotonic()
    cfg_hash = config.config_hash()
    seed = config.seed
    data = dataset if dataset is not None else generate(config.task)
    model = Model(config.model, config.dropout, init_seed=seed)
    opt_cfg = config.optimizer
    opt = AdamW(model.trainable_parameters(), lr=opt_cfg.lr, weight_decay=opt_cfg.weight_decay,
                beta1=opt_cfg.beta1, beta2=opt_cfg.beta2, eps=opt_cfg.eps)

    n_train = data.train_tokens.shape[0]
    batch = opt_cfg.batch_size
    steps_per_epoch = math.ceil(n_train / batch)
    total_steps = opt_cfg.epochs * steps_per_epoch
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    regression = config.task.regression

    run_dir = None
    metrics_f = None
    if out_dir is not None:
        run_dir = _prepare_run_dir(out_dir, run_id_for(config))
        config.save(run_dir / "config.json")
        metrics_f = open(run_dir / "metrics.jsonl", "w")

    records: list[RunRecord] = []
    best_eval = -math.inf
    best_step = -1
    step = 0
    loss_accum = 0.0
    cons_accum = 0.0
    loss_count = 0

    def write_record(rec: RunRecord):
        records.append(rec)
        if metrics_f is not None:
            metrics_f.write(rec.metrics_line() + "\n")
            metrics_f.flush()

    try:
        for epoch in range(opt_cfg.epochs):
            perm = order_rng.permutation(n_train)
            for start in range(0, n_train, batch):
                idx = perm[start:start + batch]
                step_seed = derive_step_seed(seed, step)
                result = twin_pass_step(
                    (data.train_tokens[idx], data.train_targets[idx]),
                    model, config.compensation, step_seed,
                )
                if not math.isfinite(result.total_loss):
                    rec = RunRecord(step, result.total_loss, float("nan"), float("nan"),
                                    result.consistency_loss, cfg_hash, seed,
                                    time.monotonic() - t0)
                    write_record(rec)
                    raise NumericError(f"non-finite loss {result.total_loss} at step {step}")
                model.zero_grad()
                T.backward(result.loss)
                opt.step(lr_scale=linear_schedule(step, total_steps))
                loss_accum += result.total_loss
                cons_accum += result.consistency_loss
                loss_count += 1
                step += 1

            last_epoch = epoch == opt_cfg.epochs - 1
            if (epoch + 1) % opt_cfg.eval_every == 0 or last_epoch:
                train_metric = evaluate(model, data.train_tokens, data.train_targets)
                eval_metric = evaluate(model, data.eval_tokens, data.eval_targets)
                rec = RunRecord(
                    step=step,
                    train_loss=loss_accum / max(1, loss_count),
                    train_metric=train_metric,
                    eval_metric=eval_metric,
                    consistency_loss=cons_accum / max(1, loss_count),
                    config_hash=cfg_hash,
                    seed=seed,
                    wall_time=time.monotonic() - t0,
                )
                write_record(rec)
                loss_accum = cons_accum = 0.0
                loss_count = 0
                if eval_metric > best_eval:
                    best_eval = eval_metric
                    best_step = step
                    if run_dir is not None:
                        model.save_checkpoint(run_dir / "best.ckpt")
    finally:
        if metrics_f is not None:
            metrics_f.close()

    if run_dir is not None:
        info = {
            "run_id": run_id_for(config),
            "config_hash": cfg_hash,
            "seed": seed,
            "best_eval_metric": best_eval,
            "best_step": best_step,
            "total_steps": step,
            "wall_time_s": time.monotonic() - t0,
        }
        with open(run_dir / "run_info.json", "w") as f:
            json.dump(info, f, indent=2)
            f.write("\n")

    return TrainResult(records=records, best_eval=best_eval, best_step=best_step,
                       final=records[-1], run_dir=run_dir, model=model)


# ---------------------------------------------------------------------------
# sweeps


def _with_axis_value(config: RunConfig, axis: str, value) -> RunConfig:
    doc = config.to_dict()
    if axis == "dropout_rate":
        if not doc["dropout"]:
            raise ContractError("dropout_rate sweep needs at least one dropout spec in the config")
        for spec in doc["dropout"]:
            spec["rate"] = float(value)
    elif axis == "lora_rank":
        doc["model"]["lora_rank"] = int(value)
    elif axis == "kl_weight":
        doc["compensation"]["weight"] = float(value)
        if doc["compensation"]["kind"] == "none":
            doc["compensation"]["kind"] = "kl_bidirectional"
    from .config import from_dict

    return from_dict(doc)


def _with_seed(config: RunConfig, seed: int) -> RunConfig:
    doc = config.to_dict()
    doc["seed"] = int(seed)
    from .config import from_dict

    return from_dict(doc)


@dataclass
class SweepCell:
    value: object
    seed: int
    best_eval: float
    final_eval: float


@dataclass
class SweepResult:
    axis: str
    cells: list[SweepCell]

    def median_best(self) -> dict:
        out = {}
        for cell in self.cells:
            out.setdefault(cell.value, []).append(cell.best_eval)
        return {v: float(np.median(scores)) for v, scores in out.items()}


def sweep(spec: SweepSpec, out_dir=None, dataset: Dataset | None = None) -> SweepResult:
    """Grid of train() calls over (value, seed); medians per value."""
    data = dataset if dataset is not None else generate(spec.base_config.task)
    cells = []
    for value in spec.values:
        for seed in spec.seeds:
            cfg = _with_seed(_with_axis_value(spec.base_config, spec.axis, value), seed)
            res = train(cfg, out_dir=out_dir, dataset=data)
            cells.append(SweepCell(value=value, seed=seed, best_eval=res.best_eval,
                                   final_eval=res.final.eval_metric))
    return SweepResult(axis=spec.axis, cells=cells)


# ---------------------------------------------------------------------------
# named method bundles and the comparison command


def hiddenkey_bundle(rate_attn: float, rate_ffn: float, kl_weight: float,
                     ) -> tuple[list[DropoutSpec], CompensationSpec]:
    """Column-wise logit dropout + element-wise hidden dropout, plus the
    bidirectional-KL twin-pass loss; kl_weight 0 drops the extra loss."""
    specs = [
        DropoutSpec(position=Position.ATTN_LOGITS, pattern=StructuralPattern.COLUMN, rate=rate_attn),
        DropoutSpec(position=Position.FFN_HIDDEN, pattern=StructuralPattern.ELEMENT, rate=rate_ffn),
    ]
    if kl_weight > 0:
        comp = CompensationSpec(kind=CompensationKind.KL_BIDIRECTIONAL, weight=kl_weight)
    else:
        comp = CompensationSpec(kind=CompensationKind.NONE, weight=0.0)
    return specs, comp


def method_bundle(name: str, rate_attn: float, rate_ffn: float, kl_weight: float,
                  ) -> tuple[list[DropoutSpec], CompensationSpec]:
    none = CompensationSpec()
    if name == "baseline":
        return [], none
    if name == "dropkey":
        return [DropoutSpec(position=Position.ATTN_LOGITS, pattern=StructuralPattern.COLUMN,
                            rate=rate_attn)], none
    if name == "dropattention":
        return [DropoutSpec(position=Position.ATTN_WEIGHTS, pattern=StructuralPattern.COLUMN,
                            rate=rate_attn, grad_stop_denominator=True)], none
    if name == "hiddencut":
        return [DropoutSpec(position=Position.FFN_HIDDEN, pattern=StructuralPattern.ELEMENT,
                            rate=rate_ffn)], none
    if name == "hiddenkey-":
        return hiddenkey_bundle(rate_attn, rate_ffn, 0.0)
    if name == "hiddenkey":
        return hiddenkey_bundle(rate_attn, rate_ffn, kl_weight)
    raise ContractError(f"unknown method {name!r}; known: {', '.join(METHOD_NAMES)}")


def config_for_method(base: RunConfig, name: str) -> RunConfig:
    specs, comp = method_bundle(name, base.compare.rate_attn, base.compare.rate_ffn,
                                base.compare.kl_weight)
    doc = base.to_dict()
    from .config import _dropout_to_dict, from_dict

    doc["dropout"] = [_dropout_to_dict(s) for s in specs]
    doc["compensation"] = {"kind": comp.kind.value, "weight": comp.weight}
    return from_dict(doc)


@dataclass
class MethodSummary:
    name: str
    median: float
    mad: float
    best_evals: list[float]


@dataclass
class CompareReport:
    methods: list[MethodSummary]
    p_values: dict  # (name_a, name_b) -> two-sided sign-flip p-value

    def to_json(self) -> str:
        doc = {
            "methods": [dataclasses.asdict(m) for m in self.methods],
            "p_values": {f"{a}|{b}": p for (a, b), p in self.p_values.items()},
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def compare(method_names: list[str], base: RunConfig, seeds: list[int],
            out_dir=None, dataset: Dataset | None = None) -> CompareReport:
    """Run every (method, seed) cell, then report per-method median/MAD of
    the best eval metric and pairwise paired permutation p-values."""
    from .stats import median_and_mad, paired_permutation_test

    if len(method_names) < 2:
        raise ContractError("compare needs at least 2 methods")
    if len(seeds) < 2:
        raise ContractError("compare needs at least 2 seeds")
    data = dataset if dataset is not None else generate(base.task)

    scores: dict[str, list[float]] = {}
    for name in method_names:
        cfg_m = config_for_method(base, name)
        per_seed = []
        for seed in seeds:
            res = train(_with_seed(cfg_m, seed), out_dir=out_dir, dataset=data)
            per_seed.append(res.best_eval)
        scores[name] = per_seed

    summaries = []
    for name in method_names:
        med, mad = median_and_mad(scores[name])
        summaries.append(MethodSummary(name=name, median=med, mad=mad, best_evals=scores[name]))

    p_values = {}
    for i, a in enumerate(method_names):
        for b in method_names[i + 1:]:
            p_values[(a, b)] = paired_permutation_test(scores[a], scores[b])

    return CompareReport(methods=summaries, p_values=p_values)


# ---------------------------------------------------------------------------
# run-directory reporting


def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def report(run_dir, csv_path=None) -> dict:
    """Summarize a run directory; optionally write the curves as CSV."""
    recs = read_metrics(run_dir)
    if not recs:
        raise ContractError(f"no metrics found under {run_dir}")
    best = max(recs, key=lambda r: r["eval_metric"])
    summary = {
        "run_dir": str(run_dir),
        "records": len(recs),
        "final_step": recs[-1]["step"],
        "final_train_loss": recs[-1]["train_loss"],
        "final_train_metric": recs[-1]["train_metric"],
        "final_eval_metric": recs[-1]["eval_metric"],
        "best_eval_metric": best["eval_metric"],
        "best_eval_step": best["step"],
        "config_hash": recs[0]["config_hash"],
        "seed": recs[0]["seed"],
    }
    if csv_path is not None:
        cols = ["step", "train_loss", "train_metric", "eval_metric", "consistency_loss"]
        with open(csv_path, "w") as f:
            f.write(",".join(cols) + "\n")
            for r in recs:
                f.write(",".join(repr(r[c]) for c in cols) + "\n")
    return summary
