"""Training and inference loops, config files, checkpoints and iteration logs."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .envs import Environment, GateConfig, ReacherConfig, make_env
from .nn import AdamState, DenseNet, TensorFileError, dumps_tensors, load_tensors
from .policy import Expert, MixturePolicy, act_batch
from .updates import (Critic, RolloutBatch, UpdateAborted, UpdateConfig, categorical_entropy,
                      context_advantages, context_targets, expert_advantages, update_context_critic,
                      update_context_ebm, update_expert, update_expert_critic)

log = logging.getLogger(__name__)

ENV_CONFIGS = {"reacher": ReacherConfig, "gate": GateConfig}


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class TrainingHalted(RuntimeError):
    def __init__(self, msg, diagnostics):
        super().__init__(msg)
        self.diagnostics = diagnostics


# ------------------------------------------------------------------- config

@dataclass
class ModelConfig:
    n_experts: int = 10
    expert_hidden: tuple = (32, 32)
    energy_hidden: tuple = (16, 16)
    critic_hidden: tuple = (32, 32)
    context_critic_hidden: tuple = (32, 32)
    init_std: float = 1.0


@dataclass
class RunConfig:
    seed: int = 0
    max_iterations: int = 1000
    env_batch_size: int = 5000
    eval_every: int = 10
    eval_contexts: int = 200
    checkpoint_every: int = 50
    checkpoint: str = "checkpoint.txt"
    log: str = "log.csv"


@dataclass
class TrainConfig:
    env: str = "reacher"
    env_params: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    update: UpdateConfig = field(default_factory=UpdateConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if self.env not in ENV_CONFIGS:
            raise ConfigError(f"unknown environment {self.env!r}")
        known = {f.name for f in dataclasses.fields(ENV_CONFIGS[self.env])}
        bad = set(self.env_params) - known
        if bad:
            raise ConfigError(f"unknown [env] keys for {self.env}: {sorted(bad)}")
        for name in ("max_iterations", "env_batch_size", "eval_every", "eval_contexts", "checkpoint_every"):
            if getattr(self.run, name) < 1:
                raise ConfigError(f"[run] {name} must be positive")
        if self.model.n_experts < 1:
            raise ConfigError("[model] n_experts must be positive")
        if self.run.env_batch_size < self.update.samples_per_expert:
            raise ConfigError("env_batch_size must be at least samples_per_expert")

    def make_env(self) -> Environment:
        return make_env(self.env, **self.env_params)


_HASHED_RUN_FIELDS = ("seed", "env_batch_size")


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(int(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(x) for x in text.split(",") if x.strip())
    return text


def _section_items(obj):
    return [(f.name, getattr(obj, f.name)) for f in dataclasses.fields(obj)]


def config_to_text(cfg: TrainConfig) -> str:
    lines = ["[env]", f"name = {cfg.env}"]
    env_defaults = ENV_CONFIGS[cfg.env]()
    for name, _ in _section_items(env_defaults):
        if name in cfg.env_params:
            lines.append(f"{name} = {_format_value(cfg.env_params[name])}")
    for section, obj in (("model", cfg.model), ("update", cfg.update), ("run", cfg.run)):
        lines.append("")
        lines.append(f"[{section}]")
        lines += [f"{k} = {_format_value(v)}" for k, v in _section_items(obj)]
    return "\n".join(lines) + "\n"


def config_from_text(text) -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    extra = set(parser.sections()) - {"env", "model", "update", "run"}
    if extra:
        raise ConfigError(f"unknown sections {sorted(extra)}")
    env_sec = dict(parser["env"]) if parser.has_section("env") else {}
    env_name = env_sec.pop("name", "reacher")
    if env_name not in ENV_CONFIGS:
        raise ConfigError(f"unknown environment {env_name!r}")
    env_defaults = ENV_CONFIGS[env_name]()
    env_params = {}
    for k, v in env_sec.items():
        if not hasattr(env_defaults, k):
            raise ConfigError(f"unknown key [env] {k}")
        env_params[k] = _parse_value(v, getattr(env_defaults, k))
    parts = {}
    for section, cls in (("model", ModelConfig), ("update", UpdateConfig), ("run", RunConfig)):
        defaults = cls()
        kwargs = {}
        if parser.has_section(section):
            for k, v in parser[section].items():
                if not hasattr(defaults, k):
                    raise ConfigError(f"unknown key [{section}] {k}")
                try:
                    kwargs[k] = _parse_value(v, getattr(defaults, k))
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {k}: {exc}") from exc
        try:
            parts[section] = cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return TrainConfig(env_name, env_params, parts["model"], parts["update"], parts["run"])


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_text(fh.read())


def save_config(cfg: TrainConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))


def config_hash(cfg: TrainConfig) -> str:
    """Hash of everything that shapes the model and its training stream."""
    hashed = dataclasses.replace(cfg, run=RunConfig(**{k: getattr(cfg.run, k) for k in _HASHED_RUN_FIELDS}))
    text = config_to_text(hashed)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def default_config(env="reacher") -> TrainConfig:
    """Defaults of the 5-link reacher hyperparameter table."""
    return TrainConfig(env=env)


# ---------------------------------------------------------------------- rng

_STREAMS = {"env": 0, "curriculum": 1, "theta": 2, "eval": 3, "init": 4}


def stream(seed, iteration, name, index=0):
    """Independent generator for ``(seed, iteration, name, index)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(iteration), _STREAMS[name], int(index)))
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------- log

LOG_HEADER = [
    "iteration", "episodes", "mean_return", "success_rate", "eval_return", "eval_success",
    "max_kl", "expert_return", "expert_entropy", "curriculum_entropy", "expert_surrogate",
    "expert_kl", "critic_loss", "context_critic_loss",
]


def _f(x):
    return repr(float(x))


def _join(xs):
    return ";".join(_f(x) for x in xs)


@dataclass
class IterationLog:
    iteration: int
    episodes: int
    mean_return: float
    success_rate: float
    eval_return: float | None
    eval_success: float | None
    max_kl: float
    expert_return: list
    expert_entropy: list
    curriculum_entropy: list
    expert_surrogate: list
    expert_kl: list
    critic_loss: list
    context_critic_loss: list
    wall_time: float = 0.0

    def row(self):
        return [
            str(self.iteration), str(self.episodes), _f(self.mean_return), _f(self.success_rate),
            "" if self.eval_return is None else _f(self.eval_return),
            "" if self.eval_success is None else _f(self.eval_success),
            _f(self.max_kl), _join(self.expert_return), _join(self.expert_entropy),
            _join(self.curriculum_entropy), _join(self.expert_surrogate), _join(self.expert_kl),
            _join(self.critic_loss), _join(self.context_critic_loss),
        ]


def read_log(path):
    """Rows of a training log as dicts; numeric columns parsed, lists split on ';'."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LOG_HEADER:
            raise ValueError(f"{path}: unexpected log header {reader.fieldnames}")
        for r in reader:
            row = {}
            for k, v in r.items():
                if k in ("iteration", "episodes"):
                    row[k] = int(v)
                elif v == "":
                    row[k] = None
                elif ";" in v or k.startswith(("expert_", "curriculum_", "critic_", "context_")):
                    row[k] = [float(x) for x in v.split(";")]
                else:
                    row[k] = float(v)
            out.append(row)
    return out


# ------------------------------------------------------------------ trainer

class Trainer:
    def __init__(self, cfg: TrainConfig, policy=None, critics=None, adams=None, iteration=0):
        self.cfg = cfg
        self.env = cfg.make_env()
        m, u = cfg.model, cfg.update
        K = m.n_experts
        rng = stream(cfg.run.seed, 0, "init")
        if policy is None:
            policy = MixturePolicy.create(K, self.env.context_dim, self.env.param_dim, rng,
                                          m.expert_hidden, m.energy_hidden, m.init_std)
            policy.estimate_log_z(self.env.sample_contexts(cfg.run.env_batch_size, stream(cfg.run.seed, 0, "env")))
        self.policy = policy
        if critics is None:
            critics = {
                "expert": [Critic.create(self.env.context_dim, m.critic_hidden, rng, u.lr_critic) for _ in range(K)],
                "context": [Critic.create(self.env.context_dim, m.context_critic_hidden, rng, u.lr_critic)
                            for _ in range(K)],
            }
        self.critics = critics
        if adams is None:
            adams = {
                "expert": [AdamState.zeros(e.flat().size, u.lr_policy) for e in policy.experts],
                "energy": [AdamState.zeros(n.params.size, u.lr_ebm) for n in policy.energies],
            }
        self.adams = adams
        self.iteration = iteration
        self.eval_contexts = self.env.sample_contexts(cfg.run.eval_contexts, stream(cfg.run.seed, 0, "eval")).contexts
        self.last_snapshot = None
        self.last_rollouts = None

    # ------------------------------------------------------------ one step
    def collect(self, batch, snapshot):
        """Curriculum-sampled rollouts for every expert against ``snapshot``."""
        seed, k = self.cfg.run.seed, self.iteration + 1
        m = self.cfg.update.samples_per_expert
        C_all = batch.contexts
        rollouts = []
        for o in range(snapshot.n_experts):
            e = snapshot.energy(o, C_all)
            p = np.exp(e - logsumexp(e))
            cdf = np.cumsum(p)
            u = stream(seed, k, "curriculum", o).random(m) * cdf[-1]
            idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(C_all) - 1)
            C = C_all[idx]
            ex = snapshot.experts[o]
            th = ex.mean(C) + stream(seed, k, "theta", o).standard_normal((m, ex.dim)) @ ex.chol.T
            res = self.env.evaluate_batch(C, th)
            logp = ex.log_prob(C, th)
            resp = np.exp(snapshot.log_responsibilities(C, th))
            rollouts.append(RolloutBatch(o, C, th, res.returns, logp, resp, idx, res.success))
        return rollouts

    def step(self) -> IterationLog:
        t0 = time.perf_counter()
        cfg, u = self.cfg, self.cfg.update
        k = self.iteration + 1
        batch = self.env.sample_contexts(cfg.run.env_batch_size, stream(cfg.run.seed, k, "env"))
        self.policy.estimate_log_z(batch)
        snapshot = self.policy.snapshot()
        rollouts = self.collect(batch, snapshot)
        reports = []
        try:
            for o, rb in enumerate(rollouts):
                ec = self.critics["expert"][o]
                closs = update_expert_critic(ec, rb, u.alpha, u.critic_epochs)
                adv = expert_advantages(rb, ec, u.alpha, u.normalize_advantages)
                erep = update_expert(self.policy, snapshot, o, rb, adv, u, self.adams["expert"][o])
                cc = self.critics["context"][o]
                ccloss = update_context_critic(cc, rb.contexts, context_targets(o, rb, snapshot, u), u.critic_epochs)
                cadv = context_advantages(o, rb, self.policy, snapshot, u, cc, batch.contexts)
                crep = update_context_ebm(self.policy, snapshot, o, batch.contexts, rb, cadv, u,
                                          self.adams["energy"][o])
                reports.append((erep, crep, closs[-1] if closs else float("nan"),
                                ccloss[-1] if ccloss else float("nan")))
        except UpdateAborted as exc:
            path = cfg.run.checkpoint + ".aborted"
            self.save_checkpoint(path)
            raise TrainingHalted(f"iteration {k}: {exc}; state saved to {path}", exc.diagnostics) from exc
        self.policy.estimate_log_z(batch)
        self.iteration = k
        self.last_snapshot, self.last_rollouts = snapshot, rollouts

        curr_H = []
        for o in range(self.policy.n_experts):
            e = self.policy.energy(o, batch.contexts)
            curr_H.append(categorical_entropy(np.exp(e - logsumexp(e))))
        returns = np.concatenate([r.returns for r in rollouts])
        success = np.concatenate([r.success for r in rollouts])
        eval_ret = eval_succ = None
        if k % cfg.run.eval_every == 0:
            eval_ret, eval_succ = self.evaluate()
        return IterationLog(
            iteration=k,
            episodes=k * self.policy.n_experts * u.samples_per_expert,
            mean_return=float(returns.mean()),
            success_rate=float(success.mean()),
            eval_return=eval_ret,
            eval_success=eval_succ,
            max_kl=max(r[0].max_kl for r in reports),
            expert_return=[float(r.returns.mean()) for r in rollouts],
            expert_entropy=[r[0].entropy for r in reports],
            curriculum_entropy=curr_H,
            expert_surrogate=[r[0].surrogate for r in reports],
            expert_kl=[r[0].max_kl for r in reports],
            critic_loss=[r[2] for r in reports],
            context_critic_loss=[r[3] for r in reports],
            wall_time=time.perf_counter() - t0,
        )

    def evaluate(self, deterministic=True):
        """Mean return and success rate of the inference procedure on the fixed eval contexts."""
        o, th = act_batch(self.policy, self.eval_contexts, stream(self.cfg.run.seed, self.iteration, "eval", 1),
                          deterministic)
        res = self.env.evaluate_batch(self.eval_contexts, th)
        return float(res.returns.mean()), float(res.success.mean())

    # ----------------------------------------------------------- main loop
    def run(self, append=False):
        cfg = self.cfg
        log_path = cfg.run.log
        timing_path = log_path + ".timing"
        if not append or not os.path.exists(log_path):
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(LOG_HEADER)
            with open(timing_path, "w", newline="") as fh:
                fh.write("iteration,wall_time\n")
        while self.iteration < cfg.run.max_iterations:
            rec = self.step()
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(rec.row())
            with open(timing_path, "a", newline="") as fh:
                fh.write(f"{rec.iteration},{rec.wall_time:.6f}\n")
            log.info("iter %d  return %.3f  success %.3f  max_kl %.4f", rec.iteration, rec.mean_return,
                     rec.success_rate, rec.max_kl)
            if self.iteration % cfg.run.checkpoint_every == 0 or self.iteration == cfg.run.max_iterations:
                self.save_checkpoint(cfg.run.checkpoint)
        return cfg.run.checkpoint

    # ---------------------------------------------------------- checkpoints
    def checkpoint_text(self):
        t, meta = {}, {}
        for o, (e, n) in enumerate(zip(self.policy.experts, self.policy.energies)):
            t[f"expert.{o}.mean_net"] = e.mean_net.params
            t[f"expert.{o}.chol_raw"] = e.chol_raw
            t[f"energy.{o}"] = n.params
            for kind in ("expert", "energy"):
                a = self.adams[kind][o]
                t[f"adam.{kind}.{o}.m"] = a.m
                t[f"adam.{kind}.{o}.v"] = a.v
                meta[f"adam.{kind}.{o}"] = {"t": a.t, "lr": a.lr}
            for kind in ("expert", "context"):
                c = self.critics[kind][o]
                t[f"critic.{kind}.{o}"] = c.net.params
                t[f"adam.critic.{kind}.{o}.m"] = c.adam.m
                t[f"adam.critic.{kind}.{o}.v"] = c.adam.v
                meta[f"critic.{kind}.{o}"] = {"t": c.adam.t, "lr": c.adam.lr, "shift": c.shift, "scale": c.scale}
        t["log_z"] = self.policy.log_z
        meta["config"] = config_to_text(self.cfg)
        meta["config_hash"] = config_hash(self.cfg)
        meta["iteration"] = self.iteration
        # every stream is derived from (seed, iteration, name, index)
        meta["rng"] = {"seed": self.cfg.run.seed, "next_iteration": self.iteration + 1}
        return dumps_tensors(t, meta)

    def save_checkpoint(self, path):
        text = self.checkpoint_text()
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
        return path

    @classmethod
    def from_checkpoint(cls, path, cfg: TrainConfig | None = None):
        try:
            tf = load_tensors(path)
        except (OSError, TensorFileError, ValueError) as exc:
            raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
        stored = config_from_text(tf.meta["config"])
        if cfg is None:
            cfg = stored
        elif config_hash(cfg) != tf.meta["config_hash"]:
            raise CheckpointError(f"config hash {config_hash(cfg)} does not match checkpoint "
                                  f"({tf.meta['config_hash']}); refusing to load")
        env = cfg.make_env()
        m = cfg.model
        T = tf.tensors
        try:
            experts, energies, critics = [], [], {"expert": [], "context": []}
            adams = {"expert": [], "energy": []}
            for o in range(m.n_experts):
                net = DenseNet([env.context_dim, *m.expert_hidden, env.param_dim], params=T[f"expert.{o}.mean_net"])
                raw = T[f"expert.{o}.chol_raw"]
                if raw.shape != (env.param_dim, env.param_dim):
                    raise CheckpointError(f"expert {o}: Cholesky shape {raw.shape}")
                experts.append(Expert(net, raw.copy()))
                energies.append(DenseNet([env.context_dim, *m.energy_hidden, 1], params=T[f"energy.{o}"]))
                for kind in ("expert", "energy"):
                    st = tf.meta[f"adam.{kind}.{o}"]
                    adams[kind].append(AdamState(T[f"adam.{kind}.{o}.m"].copy(), T[f"adam.{kind}.{o}.v"].copy(),
                                                 lr=st["lr"], t=st["t"]))
                for kind, hidden in (("expert", m.critic_hidden), ("context", m.context_critic_hidden)):
                    st = tf.meta[f"critic.{kind}.{o}"]
                    cnet = DenseNet([env.context_dim, *hidden, 1], params=T[f"critic.{kind}.{o}"])
                    cad = AdamState(T[f"adam.critic.{kind}.{o}.m"].copy(), T[f"adam.critic.{kind}.{o}.v"].copy(),
                                    lr=st["lr"], t=st["t"])
                    critics[kind].append(Critic(cnet, cad, st["shift"], st["scale"]))
            policy = MixturePolicy(experts, energies, T["log_z"].copy())
            for kind in adams:
                for o, a in enumerate(adams[kind]):
                    n = experts[o].flat().size if kind == "expert" else energies[o].params.size
                    if a.m.shape != (n,):
                        raise CheckpointError(f"optimizer state shape mismatch for {kind} {o}")
        except KeyError as exc:
            raise CheckpointError(f"checkpoint is missing tensor {exc}") from exc
        except ValueError as exc:
            raise CheckpointError(f"incompatible checkpoint shapes: {exc}") from exc
        return cls(cfg, policy, critics, adams, int(tf.meta["iteration"]))


# ------------------------------------------------------------- entry points

def train(cfg: TrainConfig):
    """Run training from scratch; returns the trainer (checkpoint and log written)."""
    tr = Trainer(cfg)
    tr.run(append=False)
    return tr


def resume(checkpoint, cfg: TrainConfig | None = None, max_iterations=None):
    """Continue a run from ``checkpoint`` until ``max_iterations``; a no-op when already there."""
    tr = Trainer.from_checkpoint(checkpoint, cfg)
    if max_iterations is not None:
        tr.cfg.run.max_iterations = int(max_iterations)
    if tr.iteration >= tr.cfg.run.max_iterations:
        log.info("checkpoint already at iteration %d; nothing to do", tr.iteration)
        return tr
    tr.run(append=True)
    return tr


@dataclass
class InferenceResult:
    contexts: np.ndarray
    experts: np.ndarray
    thetas: np.ndarray
    results: object

    def __len__(self):
        return len(self.contexts)


def infer(checkpoint, contexts=None, deterministic=True, n_contexts=None, seed=0, cfg=None) -> InferenceResult:
    """Choose an expert and MP parameters per context, then run the episodes."""
    tr = checkpoint if isinstance(checkpoint, Trainer) else Trainer.from_checkpoint(checkpoint, cfg)
    rng = np.random.default_rng(seed)
    if contexts is None:
        contexts = tr.env.sample_contexts(n_contexts or 100, rng).contexts
    C = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    o, th = act_batch(tr.policy, C, rng, deterministic)
    res = tr.env.evaluate_batch(C, th)
    return InferenceResult(C, o, th, res)


def checkpoint_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def file_digest(path):
    return checkpoint_digest(path)


__all__ = [
    "TrainConfig", "ModelConfig", "RunConfig", "UpdateConfig", "Trainer", "IterationLog",
    "train", "resume", "infer", "load_config", "save_config", "config_to_text", "config_from_text",
    "config_hash", "default_config", "stream", "read_log", "LOG_HEADER", "CheckpointError",
    "ConfigError", "TrainingHalted", "InferenceResult", "checkpoint_digest",
]
