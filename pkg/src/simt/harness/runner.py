"""Training/evaluation orchestration for one experiment directory."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from ..adapt import AdaptConfig
from ..engine import (AdamConfig, FewShotModel, MomentumState, SimtConfig, TrainState,
                      evaluate_params, init_train_state, network_params, simt_train_step,
                      sq_train_step, summarize)
from ..nn import DropoutSpec, MLPConfig
from ..rl.advantage import GAEConfig
from ..rl.metarl import (MetaRLConfig, RLSimtConfig, RLState, evaluate_policy, init_rl_state,
                         meta_rl_iteration)
from ..rl.policy import GaussianPolicy
from ..rl.trpo import TRPOConfig
from ..tasks import (AngleTaskFamily, ClusterFamily, SinusoidFamily, load_flat_dataset,
                     sample_batch)
from . import checkpoint as ck
from .config import ExperimentConfig, config_to_json
from .metrics import MetricsRow, MetricsWriter

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
RETURNS_FILE = "returns.csv"
REPORT_FILE = "report.json"
LAST_CKPT = "last.ckpt"
BEST_CKPT = "best.ckpt"


def rng_streams(seed: int) -> dict:
    """Independent generators for every consumer of randomness in a run."""
    names = ("tasks", "dropout", "val", "test", "eval", "directions")
    return dict(zip(names, np.random.SeedSequence(seed).spawn(len(names))))


def _clock() -> float:
    return time.perf_counter()


# ---------------------------------------------------------------------------
# few-shot setup


@dataclass
class FewShotSetup:
    model: FewShotModel
    train: object
    val: object
    test: object
    simt: SimtConfig | None
    adam: AdamConfig
    n_way: int
    k_shot: int
    q_query: int

    def batch(self, family, n: int, rng: np.random.Generator):
        return sample_batch(family, n, self.n_way, self.k_shot, self.q_query, rng)


def _split_counts(total: int, wanted) -> tuple[int, ...]:
    if sum(wanted) <= total:
        return tuple(wanted)
    # proportional split when a file has fewer classes than the default split asks for
    frac = np.asarray(wanted, dtype=float) / sum(wanted)
    counts = np.floor(frac * total).astype(int)
    counts[0] += total - counts.sum()
    return tuple(int(c) for c in counts)


def build_fewshot(cfg: ExperimentConfig) -> FewShotSetup:
    t, fam = cfg.task, cfg.task.family
    kind = cfg.task_kind
    if fam == "sinusoid":
        train = val = test = SinusoidFamily()
        in_dim, n_way = 1, 1
    elif fam == "angle":
        train = val = test = AngleTaskFamily(feature_dim=t.feature_dim, feature_seed=cfg.seed)
        in_dim, n_way = t.feature_dim, 1
    else:
        if fam == "clusters":
            pool = ClusterFamily.synthetic(t.num_latent_classes, t.feature_dim,
                                           t.examples_per_class, seed=cfg.seed)
        else:
            pool = load_flat_dataset(t.path)
        train, val, test = pool.split(_split_counts(pool.num_latent_classes, t.class_split))
        in_dim, n_way = pool.feature_dim, t.n_way
    hidden = tuple(cfg.model.hidden)
    alg = cfg.algorithm
    if alg.kind == "protonet":
        mlp = MLPConfig(in_dim, hidden, hidden[-1], cfg.model.activation, cfg.seed)
    else:
        out_dim = n_way if kind == "classification" else 1
        mlp = MLPConfig(in_dim, hidden, out_dim, cfg.model.activation, cfg.seed)
    adapt = AdaptConfig(alg.kind, alg.steps, alg.alpha, alg.second_order, None, alg.eval_steps)
    model = FewShotModel(mlp, adapt, kind, n_way if kind == "classification" else None)
    simt = None
    if cfg.simt is not None:
        s = cfg.simt
        layers = "all" if s.dropout_layers == "all" else (len(hidden) - 1,)
        spec = DropoutSpec(s.dropout_p, layers, 0)
        spec.rng = np.random.default_rng(rng_streams(cfg.seed)["dropout"])
        simt = SimtConfig(s.lam, s.temperature, spec, s.eta, s.teach_on_support,
                          s.lambda_rampup_steps)
    o = cfg.optimizer
    return FewShotSetup(model, train, val, test, simt, AdamConfig(o.lr, o.beta1, o.beta2, o.eps),
                        n_way, t.k_shot, t.q_query)


def _higher_is_better(cfg: ExperimentConfig) -> bool:
    return cfg.task_kind in ("classification", "rl")


def _reported_network(cfg: ExperimentConfig) -> str:
    return "momentum" if cfg.simt is not None else "theta"


# ---------------------------------------------------------------------------
# checkpoints of training state


def fewshot_sections(state: TrainState, rngs: dict, best: tuple[float, int]) -> dict:
    sec = {"meta/step": ck.scalar(state.step), "meta/best_value": ck.scalar(best[0]),
           "meta/best_step": ck.scalar(best[1])}
    ck.put_params(sec, "theta", state.theta)
    if state.metasgd is not None:
        ck.put_params(sec, "alpha", state.metasgd.alpha)
    if state.momentum is not None:
        sec["meta/eta"] = ck.scalar(state.momentum.eta)
        ck.put_params(sec, "moment", state.momentum.theta_moment)
        ck.put_params(sec, "alpha_moment", state.momentum.alpha_moment)
    sec["adam/t"] = ck.scalar(state.optimizer.t)
    ck.put_params(sec, "adam_m", state.optimizer.m)
    ck.put_params(sec, "adam_v", state.optimizer.v)
    for name, rng in rngs.items():
        sec[f"rng/{name}"] = ck.rng_to_array(rng)
    return sec


def restore_fewshot(sec: dict, state: TrainState) -> tuple[TrainState, dict, tuple[float, int]]:
    """Overwrite a freshly initialized state with checkpoint buffers (shapes must match)."""
    theta = ck.get_params(sec, "theta")
    if theta is None or not theta.compatible(state.theta):
        raise ck.CheckpointError("checkpoint parameters do not match the configured model")
    state.theta = theta
    if state.metasgd is not None:
        state.metasgd.alpha = ck.get_params(sec, "alpha")
    moment = ck.get_params(sec, "moment")
    if state.momentum is not None:
        if moment is None:
            raise ck.CheckpointError("config enables the momentum network but checkpoint has none")
        state.momentum = MomentumState(moment, state.momentum.eta,
                                       ck.get_params(sec, "alpha_moment"))
    state.optimizer.t = int(sec["adam/t"])
    state.optimizer.m = ck.get_params(sec, "adam_m")
    state.optimizer.v = ck.get_params(sec, "adam_v")
    state.step = int(sec["meta/step"])
    rngs = {k[len("rng/"):]: ck.rng_from_array(v) for k, v in sec.items() if k.startswith("rng/")}
    best = (float(sec["meta/best_value"]), int(sec["meta/best_step"]))
    return state, rngs, best


def load_networks(path, cfg: ExperimentConfig) -> dict:
    """``{"theta": (params, alpha), "momentum": (params, alpha)}`` from a checkpoint."""
    sec = ck.load(path)
    theta = ck.get_params(sec, "theta")
    if theta is None:
        raise ck.CheckpointError(f"{path}: no parameters in checkpoint")
    expect = (init_rl_state(_rl_config(cfg)).theta if cfg.mode == "rl"
              else init_train_state(build_fewshot(cfg).model, AdamConfig()).theta)
    if not theta.compatible(expect):
        raise ck.CheckpointError(f"{path}: parameters do not match the configured model")
    moment = ck.get_params(sec, "moment")
    alpha = ck.get_params(sec, "alpha")
    out = {"theta": (theta, alpha)}
    if moment is not None:
        out["momentum"] = (moment, ck.get_params(sec, "alpha_moment"))
    return out


# ---------------------------------------------------------------------------
# few-shot run


def _eval_rows(setup: FewShotSetup, state: TrainState, batch, networks) -> dict:
    out = {}
    for which in networks:
        params, alpha = network_params(state, which)
        losses, acc = evaluate_params(params, batch, setup.model, alpha)
        out[which] = (losses, acc)
    return out


def _row_from_eval(step, split, which, losses, acc) -> MetricsRow:
    m = float(np.mean(losses))
    a = float(np.mean(acc)) if not np.all(np.isnan(acc)) else math.nan
    return MetricsRow(step, split, m, 0.0, m, a, 0.0, which)


def _score(cfg, losses, acc) -> float:
    return float(np.mean(acc)) if _higher_is_better(cfg) else float(np.mean(losses))


def _better(cfg, new: float, old: float) -> bool:
    if math.isnan(old):
        return True
    return new > old if _higher_is_better(cfg) else new < old


def run(cfg: ExperimentConfig, resume: str | os.PathLike | None = None) -> dict:
    """Train per ``cfg`` into ``cfg.output_dir``; returns the final report."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "config.json"), "w", encoding="utf-8") as f:
        f.write(config_to_json(cfg) + "\n")
    if cfg.mode == "rl":
        return _run_rl(cfg, resume)
    return _run_fewshot(cfg, resume)


def _run_fewshot(cfg: ExperimentConfig, resume) -> dict:
    setup = build_fewshot(cfg)
    streams = rng_streams(cfg.seed)
    sched = cfg.schedule
    state = init_train_state(setup.model, setup.adam, setup.simt)
    task_rng = np.random.default_rng(streams["tasks"])
    val_batch = setup.batch(setup.val, sched.val_tasks, np.random.default_rng(streams["val"]))
    best = (math.nan, 0)
    if resume is not None:
        state, rngs, best = restore_fewshot(ck.load(resume), state)
        task_rng = rngs["tasks"]
        if setup.simt is not None:
            setup.simt.dropout.rng = rngs["dropout"]
    out = cfg.output_dir
    writer = MetricsWriter(os.path.join(out, METRICS_FILE),
                           truncate_after=state.step if resume is not None else None)
    networks = ("theta", "momentum") if setup.simt is not None else ("theta",)
    chosen = _reported_network(cfg)

    def rngs_now():
        r = {"tasks": task_rng}
        if setup.simt is not None:
            r["dropout"] = setup.simt.dropout.rng
        return r

    while state.step < sched.iterations:
        t0 = _clock()
        batch = setup.batch(setup.train, sched.batch_size, task_rng)
        if setup.simt is None:
            state, row = sq_train_step(state, batch, setup.model)
        else:
            state, row = simt_train_step(state, batch, setup.model, setup.simt)
        wall = 0.0 if cfg.deterministic else (_clock() - t0) * 1e3
        step = state.step
        writer.write(MetricsRow(step, "train", row["task_loss"], row["kd_loss"],
                                row["total_loss"], row["accuracy"], wall, "theta"))
        if step % sched.eval_every == 0 or step == sched.iterations:
            res = _eval_rows(setup, state, val_batch, networks)
            for which in networks:
                writer.write(_row_from_eval(step, "val", which, *res[which]))
            score = _score(cfg, *res[chosen])
            if _better(cfg, score, best[0]):
                best = (score, step)
                ck.save(os.path.join(out, BEST_CKPT), fewshot_sections(state, rngs_now(), best))
        if step % sched.checkpoint_every == 0 or step == sched.iterations:
            ck.save(os.path.join(out, LAST_CKPT), fewshot_sections(state, rngs_now(), best))

    # final report: best checkpoint, fresh test tasks, momentum network when active
    best_path = os.path.join(out, BEST_CKPT)
    if os.path.exists(best_path):
        state, _, _ = restore_fewshot(ck.load(best_path),
                                      init_train_state(setup.model, setup.adam, setup.simt))
    test_batch = setup.batch(setup.test, sched.test_tasks, np.random.default_rng(streams["test"]))
    res = _eval_rows(setup, state, test_batch, networks)
    report = {"best_step": best[1], "best_val": best[0], "network": chosen, "test": {}}
    for which in networks:
        losses, acc = res[which]
        writer.write(_row_from_eval(sched.iterations, "test", which, losses, acc))
        entry = {"loss": summarize(losses)}
        if not np.all(np.isnan(acc)):
            entry["accuracy"] = summarize(acc)
        report["test"][which] = entry
    _write_report(out, report)
    return report


def _write_report(out: str, report: dict) -> None:
    with open(os.path.join(out, REPORT_FILE), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# meta-RL run


def _rl_config(cfg: ExperimentConfig) -> MetaRLConfig:
    r = cfg.rl
    simt = None
    if cfg.simt is not None:
        simt = RLSimtConfig(cfg.simt.lam, cfg.simt.eta, cfg.simt.lambda_rampup_steps,
                            cfg.simt.momentum_on_query)
    policy = GaussianPolicy(MLPConfig(2, tuple(cfg.model.hidden), 2, cfg.model.activation,
                                      cfg.seed))
    return MetaRLConfig(
        iterations=cfg.schedule.iterations, meta_batch=cfg.schedule.batch_size,
        rollouts=r.rollouts, horizon=r.horizon, alpha=cfg.algorithm.alpha,
        gae=GAEConfig(r.gamma, r.gae_lambda),
        trpo=TRPOConfig(r.delta, r.cg_iters, r.cg_damping, r.backtrack_ratio, r.max_backtracks),
        normalize_advantages=r.normalize_advantages, policy=policy, simt=simt, seed=cfg.seed,
        eval_tasks=cfg.schedule.val_tasks, eval_steps=tuple(r.eval_alphas),
        task_chunk=r.task_chunk)


def rl_sections(state: RLState, rng: np.random.Generator, best_iter: int) -> dict:
    sec = {"meta/step": ck.scalar(state.iteration), "meta/best_value": ck.scalar(state.best_return),
           "meta/best_step": ck.scalar(best_iter)}
    ck.put_params(sec, "theta", state.theta)
    ck.put_params(sec, "moment", state.theta_moment)
    sec["rng/tasks"] = ck.rng_to_array(rng)
    return sec


def _returns_header(path: str, truncate_after: int | None) -> None:
    header = "iteration,grad_steps,mean_return,std_return,seed\n"
    if truncate_after is not None and os.path.exists(path):
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()[1:]
        keep = [ln for ln in lines if int(ln.split(",")[0]) <= truncate_after]
        with open(path, "w", encoding="utf-8") as f:
            f.write(header)
            f.writelines(keep)
    else:
        with open(path, "w", encoding="utf-8") as f:
            f.write(header)


def _run_rl(cfg: ExperimentConfig, resume) -> dict:
    rcfg = _rl_config(cfg)
    streams = rng_streams(cfg.seed)
    sched = cfg.schedule
    out = cfg.output_dir
    state = init_rl_state(rcfg)
    rng = np.random.default_rng(streams["tasks"])
    best_iter = 0
    if resume is not None:
        sec = ck.load(resume)
        theta = ck.get_params(sec, "theta")
        if theta is None or not theta.compatible(state.theta):
            raise ck.CheckpointError("checkpoint parameters do not match the configured policy")
        state.theta = theta
        state.theta_moment = ck.get_params(sec, "moment")
        state.iteration = int(sec["meta/step"])
        state.best_return = float(sec["meta/best_value"])
        best_iter = int(sec["meta/best_step"])
        rng = ck.rng_from_array(sec["rng/tasks"])
    truncate = state.iteration if resume is not None else None
    writer = MetricsWriter(os.path.join(out, METRICS_FILE), truncate_after=truncate)
    returns_path = os.path.join(out, RETURNS_FILE)
    _returns_header(returns_path, truncate)
    networks = ("theta", "momentum") if state.theta_moment is not None else ("theta",)

    while state.iteration < sched.iterations:
        t0 = _clock()
        before = (state.theta, state.theta_moment)
        state, info, stats = meta_rl_iteration(state, rcfg, rng)
        wall = 0.0 if cfg.deterministic else (_clock() - t0) * 1e3
        it = state.iteration
        writer.write(MetricsRow(it, "train", stats["task_loss"], stats["kd_loss"],
                                stats["total_loss"], stats["post_return"], wall, "theta"))
        if stats["post_return"] > state.best_return:
            # the training returns were collected with the pre-update parameters
            state.best_return, best_iter = stats["post_return"], it - 1
            best = RLState(before[0], before[1], it - 1, state.best_return)
            ck.save(os.path.join(out, BEST_CKPT), rl_sections(best, rng, best_iter))
        if it % sched.eval_every == 0 or it == sched.iterations:
            for which in networks:
                params = state.theta if which == "theta" else state.theta_moment
                # same validation goals and noise for both networks
                curve = evaluate_policy(params, rcfg, np.random.default_rng(streams["val"]))
                ret1 = curve[min(1, len(curve) - 1)]["mean_return"]
                writer.write(MetricsRow(it, "val", -ret1, 0.0, -ret1, ret1, 0.0, which))
                if which == _reported_network(cfg):
                    with open(returns_path, "a", encoding="utf-8") as f:
                        for c in curve:
                            f.write(f"{it},{c['grad_steps']},{c['mean_return']!r},"
                                    f"{c['std_return']!r},{cfg.seed}\n")
        if it % sched.checkpoint_every == 0 or it == sched.iterations:
            ck.save(os.path.join(out, LAST_CKPT), rl_sections(state, rng, best_iter))

    best_path = os.path.join(out, BEST_CKPT)
    nets = load_networks(best_path, cfg) if os.path.exists(best_path) else {
        "theta": (state.theta, None), "momentum": (state.theta_moment, None)}
    chosen = _reported_network(cfg)
    report = {"best_step": best_iter, "best_train_return": state.best_return,
              "network": chosen, "test": {}}
    for which in networks:
        curve = evaluate_policy(nets[which][0], rcfg, np.random.default_rng(streams["test"]),
                                n_tasks=sched.test_tasks)
        ret1 = curve[min(1, len(curve) - 1)]
        writer.write(MetricsRow(sched.iterations, "test", -ret1["mean_return"], 0.0,
                                -ret1["mean_return"], ret1["mean_return"], 0.0, which))
        report["test"][which] = {f"return_after_{c['grad_steps']}": summarize(c["per_task"])
                                 for c in curve}
    _write_report(out, report)
    return report


# ---------------------------------------------------------------------------
# stand-alone evaluation


def evaluate(checkpoint: str | os.PathLike, cfg: ExperimentConfig, network: str = "theta",
             n_tasks: int | None = None, seed: int | None = None) -> dict:
    """Adapt the chosen network on fresh test tasks; mean, std and 95% CI over tasks."""
    nets = load_networks(checkpoint, cfg)
    if network not in nets:
        raise ck.CheckpointError(f"checkpoint has no {network!r} network")
    params, alpha = nets[network]
    n = cfg.schedule.test_tasks if n_tasks is None else n_tasks
    ss = rng_streams(cfg.seed)["eval"] if seed is None else np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    if cfg.mode == "rl":
        curve = evaluate_policy(params, _rl_config(cfg), rng, n_tasks=n)
        return {"network": network, "tasks": n,
                "returns": {str(c["grad_steps"]): summarize(c["per_task"]) for c in curve}}
    setup = build_fewshot(cfg)
    batch = setup.batch(setup.test, n, rng)
    losses, acc = evaluate_params(params, batch, setup.model, alpha)
    out = {"network": network, "tasks": n, "loss": summarize(losses)}
    if not np.all(np.isnan(acc)):
        out["accuracy"] = summarize(acc)
    return out
