"""Experiment configuration: strict JSON in, fully resolved settings out."""

from __future__ import annotations

import json
import os
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

FAMILIES = ("sinusoid", "angle", "clusters", "flat-file", "nav2d")
REGRESSION_FAMILIES = ("sinusoid", "angle")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every violation found."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n" + "\n".join(f"  - {e}" for e in self.errors))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class AlgorithmSpec(_Strict):
    kind: Literal["maml", "fomaml", "anil", "metasgd", "protonet"] = "maml"
    steps: Optional[int] = Field(None, ge=0)
    alpha: Optional[float] = Field(None, gt=0)
    second_order: Optional[bool] = None
    eval_steps: Optional[int] = Field(None, ge=0)


class SimtSpec(_Strict):
    lam: Optional[float] = Field(None, ge=0, lt=1)
    eta: Optional[float] = Field(None, ge=0, lt=1)
    temperature: float = Field(4.0, gt=0)
    dropout_p: Optional[float] = Field(None, ge=0, lt=1)
    dropout_layers: Literal["all", "last"] = "all"
    lambda_rampup_steps: int = Field(0, ge=0)
    teach_on_support: bool = False
    momentum_on_query: bool = False


class TaskSpec(_Strict):
    family: Literal["sinusoid", "angle", "clusters", "flat-file", "nav2d"] = "sinusoid"
    n_way: int = Field(5, ge=1)
    k_shot: int = Field(5, ge=1)
    q_query: int = Field(10, ge=1)
    path: Optional[str] = None
    feature_dim: int = Field(16, ge=1)
    num_latent_classes: int = Field(100, ge=3)
    examples_per_class: int = Field(60, ge=2)
    class_split: tuple[int, int, int] = (64, 16, 20)


class ModelSpec(_Strict):
    hidden: tuple[int, ...] = (40, 40)
    activation: Literal["relu", "tanh"] = "relu"

    @model_validator(mode="after")
    def _positive(self):
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden sizes must be positive")
        return self


class ScheduleSpec(_Strict):
    iterations: Optional[int] = Field(None, ge=0)
    batch_size: Optional[int] = Field(None, ge=1)
    eval_every: int = Field(250, ge=1)
    val_tasks: int = Field(100, ge=1)
    test_tasks: int = Field(200, ge=1)
    checkpoint_every: Optional[int] = Field(None, ge=1)


class OptimizerSpec(_Strict):
    lr: Optional[float] = Field(None, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class RLSpec(_Strict):
    rollouts: int = Field(20, ge=1)
    horizon: int = Field(100, ge=1)
    alpha: float = Field(0.1, gt=0)
    eval_alphas: tuple[float, ...] = (0.1, 0.05, 0.05)
    delta: float = Field(0.01, gt=0)
    gamma: float = Field(0.95, ge=0, lt=1)
    gae_lambda: float = Field(1.0, ge=0, le=1)
    cg_iters: int = Field(10, ge=1)
    cg_damping: float = Field(1e-2, ge=0)
    backtrack_ratio: float = Field(0.5, gt=0, lt=1)
    max_backtracks: int = Field(10, ge=1)
    normalize_advantages: bool = True
    task_chunk: Optional[int] = Field(5, ge=1)


class ExperimentConfig(_Strict):
    mode: Literal["few-shot", "rl"] = "few-shot"
    seed: int = Field(0, ge=0)
    output_dir: str = "runs/default"
    deterministic: bool = True
    algorithm: AlgorithmSpec = AlgorithmSpec()
    simt: Optional[SimtSpec] = None
    task: TaskSpec = TaskSpec()
    model: ModelSpec = ModelSpec()
    schedule: ScheduleSpec = ScheduleSpec()
    optimizer: OptimizerSpec = OptimizerSpec()
    rl: RLSpec = RLSpec()

    @property
    def task_kind(self) -> str:
        fam = self.task.family
        if fam == "sinusoid":
            return "regression-mse"
        if fam == "angle":
            return "regression-angular"
        if fam == "nav2d":
            return "rl"
        return "classification"


def _semantic_errors(cfg: ExperimentConfig) -> list[str]:
    errs = []
    fam, kind = cfg.task.family, cfg.algorithm.kind
    if (cfg.mode == "rl") != (fam == "nav2d"):
        errs.append(f"mode {cfg.mode!r} does not match task.family {fam!r}")
    if cfg.mode == "rl" and kind != "maml":
        errs.append(f"rl mode supports algorithm.kind 'maml' only, got {kind!r}")
    if kind == "protonet" and fam in REGRESSION_FAMILIES:
        errs.append("algorithm.kind 'protonet' needs a classification family")
    if fam == "flat-file" and not cfg.task.path:
        errs.append("task.path is required for family 'flat-file'")
    if fam in ("clusters", "flat-file") and cfg.task.n_way < 2:
        errs.append("task.n_way must be at least 2 for classification")
    if fam == "clusters":
        split = cfg.task.class_split
        if sum(split) > cfg.task.num_latent_classes:
            errs.append(f"task.class_split {split} exceeds task.num_latent_classes "
                        f"{cfg.task.num_latent_classes}")
        if min(split) < cfg.task.n_way:
            errs.append(f"every class split needs at least n_way={cfg.task.n_way} classes")
        if cfg.task.k_shot + cfg.task.q_query > cfg.task.examples_per_class:
            errs.append("k_shot + q_query exceeds task.examples_per_class")
    return errs


def _strict_loads(text: str):
    def no_constants(name):
        raise ValueError(f"non-standard JSON constant {name}")

    def no_duplicates(pairs):
        seen = {}
        for k, v in pairs:
            if k in seen:
                raise ValueError(f"duplicate key {k!r}")
            seen[k] = v
        return seen

    return json.loads(text, parse_constant=no_constants, object_pairs_hook=no_duplicates)


def parse_config(data: dict | str) -> ExperimentConfig:
    """Validate a config mapping or JSON text; raises ``ConfigError`` with every violation."""
    if isinstance(data, str):
        try:
            data = _strict_loads(data)
        except ValueError as e:
            raise ConfigError([f"JSON: {e}"]) from None
    if not isinstance(data, dict):
        raise ConfigError(["top level must be a JSON object"])
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        errs = []
        for item in e.errors():
            loc = ".".join(str(x) for x in item["loc"]) or "<root>"
            errs.append(f"{loc}: {item['msg']}")
        raise ConfigError(errs) from None
    errs = _semantic_errors(cfg)
    if errs:
        raise ConfigError(errs)
    return resolve_defaults(cfg)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    return parse_config(text)


# per-algorithm defaults; sinusoid keeps the customary step sizes of that benchmark
_LAMBDA = {"maml": 0.5, "fomaml": 0.5, "anil": 0.5, "metasgd": 0.1, "protonet": 5e-3}
_DROPOUT = {"maml": 0.2, "fomaml": 0.2, "anil": 0.2, "metasgd": 0.1, "protonet": 0.1}


def _defaults(cfg: ExperimentConfig) -> dict:
    fam, kind = cfg.task.family, cfg.algorithm.kind
    if fam == "nav2d":
        return {"alpha": cfg.rl.alpha, "lr": None, "batch": 20, "iterations": 200,
                "lam": 0.1, "eta": 0.995, "p": 0.0, "steps": 1}
    if fam == "sinusoid":
        alpha, lr, batch = 0.01, 1e-3, 10
    elif fam == "angle":
        alpha, lr, batch = 2e-3, 5e-4, 10
    else:
        alpha, lr = 1e-2, 1e-3
        batch = 1 if kind == "protonet" else (4 if cfg.task.k_shot == 1 else 2)
    classification = fam in ("clusters", "flat-file")
    eta = 0.999 if classification and cfg.task.k_shot == 5 else 0.995
    return {"alpha": alpha, "lr": lr, "batch": batch, "iterations": 5000,
            "lam": _LAMBDA[kind], "eta": eta, "p": _DROPOUT[kind], "steps": 5}


def resolve_defaults(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill every ``null`` knob from the per-algorithm default table."""
    d = _defaults(cfg)
    alg = cfg.algorithm
    alg = alg.model_copy(update={
        "steps": d["steps"] if alg.steps is None else alg.steps,
        "alpha": d["alpha"] if alg.alpha is None else alg.alpha,
    })
    sched = cfg.schedule
    sched = sched.model_copy(update={
        "iterations": d["iterations"] if sched.iterations is None else sched.iterations,
        "batch_size": d["batch"] if sched.batch_size is None else sched.batch_size,
        "checkpoint_every": sched.eval_every if sched.checkpoint_every is None
        else sched.checkpoint_every,
    })
    opt = cfg.optimizer
    if opt.lr is None and d["lr"] is not None:
        opt = opt.model_copy(update={"lr": d["lr"]})
    simt = cfg.simt
    if simt is not None:
        simt = simt.model_copy(update={
            "lam": d["lam"] if simt.lam is None else simt.lam,
            "eta": d["eta"] if simt.eta is None else simt.eta,
            "dropout_p": d["p"] if simt.dropout_p is None else simt.dropout_p,
        })
    return cfg.model_copy(update={"algorithm": alg, "schedule": sched, "optimizer": opt,
                                  "simt": simt})


def config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True, allow_nan=False)
