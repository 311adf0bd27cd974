"""Run configuration: one JSON document covering model, task, dropout,
compensation and optimizer settings. Unknown keys are rejected so typos
fail loudly instead of silently using defaults."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .dropout import DropoutSpec, LayerScope, Position, Rescale
from .errors import ContractError
from .losses import CompensationKind, CompensationSpec
from .masks import StructuralPattern
from .model import ModelConfig
from .tasks import SyntheticTask


@dataclass
class OptimizerConfig:
    lr: float = 5e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_ratio: float = 0.06
    epochs: int = 200
    batch_size: int = 32
    eval_every: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ContractError("epochs, batch_size and eval_every must be positive")


@dataclass
class CompareDefaults:
    """Shared rates used when the compare command builds method bundles."""

    rate_attn: float = 0.1
    rate_ffn: float = 0.1
    kl_weight: float = 1.0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: SyntheticTask = field(default_factory=SyntheticTask)
    dropout: list[DropoutSpec] = field(default_factory=list)
    compensation: CompensationSpec = field(default_factory=CompensationSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    compare: CompareDefaults = field(default_factory=CompareDefaults)
    seed: int = 1

    def validate(self) -> "RunConfig":
        if self.model.vocab_size != self.task.vocab_size:
            raise ContractError("model.vocab_size must equal task.vocab_size")
        if self.model.max_len < self.task.seq_len:
            raise ContractError("model.max_len must cover task.seq_len")
        if self.task.regression:
            if self.model.head != "regressor":
                raise ContractError("scalar_sum task needs a regressor head")
        else:
            if self.model.head != "classifier":
                raise ContractError("classification task needs a classifier head")
            if self.model.num_classes != self.task.num_classes:
                raise ContractError(
                    f"model.num_classes {self.model.num_classes} != task classes {self.task.num_classes}"
                )
        return self

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "model": dataclasses.asdict(self.model),
            "task": dataclasses.asdict(self.task),
            "dropout": [_dropout_to_dict(s) for s in self.dropout],
            "compensation": {"kind": self.compensation.kind.value, "weight": self.compensation.weight},
            "optimizer": dataclasses.asdict(self.optimizer),
            "compare": dataclasses.asdict(self.compare),
            "seed": self.seed,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")


def _dropout_to_dict(s: DropoutSpec) -> dict:
    return {
        "position": s.position.value,
        "pattern": s.pattern.value,
        "rate": s.rate,
        "rescale": s.rescale.value,
        "grad_stop_denominator": s.grad_stop_denominator,
        "layer_scope": s.layer_scope.value,
    }


def _take(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ContractError(f"unknown keys in {where}: {sorted(unknown)}")


def _build(cls, d: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    _take(d, names, where)
    return cls(**d)


def dropout_spec_from_dict(d: dict) -> DropoutSpec:
    _take(d, {"position", "pattern", "rate", "rescale", "grad_stop_denominator", "layer_scope"}, "dropout spec")
    kwargs = dict(d)
    kwargs["position"] = Position(kwargs["position"])
    if "pattern" in kwargs:
        kwargs["pattern"] = StructuralPattern(kwargs["pattern"])
    if "rescale" in kwargs and kwargs["rescale"] is not None:
        kwargs["rescale"] = Rescale(kwargs["rescale"])
    if "layer_scope" in kwargs:
        kwargs["layer_scope"] = LayerScope(kwargs["layer_scope"])
    return DropoutSpec(**kwargs)


def from_dict(doc: dict) -> RunConfig:
    _take(doc, {"model", "task", "dropout", "compensation", "optimizer", "compare", "seed"}, "config")
    model = _build(ModelConfig, dict(doc.get("model", {})), "model")
    task = _build(SyntheticTask, dict(doc.get("task", {})), "task")
    dropout = [dropout_spec_from_dict(dict(s)) for s in doc.get("dropout", [])]
    comp_doc = dict(doc.get("compensation", {}))
    _take(comp_doc, {"kind", "weight"}, "compensation")
    compensation = CompensationSpec(
        kind=CompensationKind(comp_doc.get("kind", "none")),
        weight=float(comp_doc.get("weight", 0.0)),
    )
    optimizer = _build(OptimizerConfig, dict(doc.get("optimizer", {})), "optimizer")
    compare = _build(CompareDefaults, dict(doc.get("compare", {})), "compare")
    seed = int(doc.get("seed", 1))
    return RunConfig(model=model, task=task, dropout=dropout, compensation=compensation,
                     optimizer=optimizer, compare=compare, seed=seed).validate()


def load(path) -> RunConfig:
    with open(path) as f:
        return from_dict(json.load(f))


def default_config(task_kind: str = "majority_class", seed: int = 1) -> RunConfig:
    """The desk-scale default: small enough to overfit in minutes on one core."""
    task = SyntheticTask(kind=task_kind)
    head = "regressor" if task.regression else "classifier"
    num_classes = task.num_classes or 2
    model = ModelConfig(head=head, num_classes=num_classes,
                        vocab_size=task.vocab_size, max_len=task.seq_len)
    return RunConfig(model=model, task=task, seed=seed).validate()
