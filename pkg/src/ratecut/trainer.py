"""Two-stage mini-batch training loop and evaluation.

Per batch: forward both heads, build the affinity from the current
embeddings (detached: the cut loss never produces an embedding gradient),
then optimize

    warm-up   (epochs 1..T1):       -R(Z)      + L_cut(Pi; A)
    fine-tune (epochs T1+1..T1+T2): -R(Z) + Rc(Z, Pi) + L_cut(Pi; A)

with Adam, constant lr during warm-up and cosine annealing during
fine-tuning. During warm-up the feature head sees only -R and the cluster
head only L_cut; the two paths meet in the shared pre-feature layer.
"""

import dataclasses
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from ratecut.coding_rate import EmbeddingBatch, Membership, rate_R, rate_Rc
from ratecut.data import ConfigError, FeatureMatrix
from ratecut.graph import DegenerateGraphError, build_affinity, ncut_loss, spectral_labels
from ratecut.metrics import clustering_accuracy, nmi
from ratecut.network import Model
from ratecut.optim import Adam, lr_schedule

# A run fails when more than this fraction of batches is skipped for
# degenerate affinity graphs.
MAX_SKIPPED_FRACTION = 0.01


@dataclass
class TrainConfig:
    """Hyper-parameters of a training run.

    Defaults follow the reference recipe for CLIP-feature clustering;
    ``k`` has no sensible default and must always be given.
    """

    k: int
    lr: float = 1e-4
    wd: float = 5e-4
    d: int = 128
    t1: int = 10
    t2: int = 10
    batch_size: int = 512
    gamma: float = 70.0
    eps: float = 0.5
    sparsity: int = 10
    affinity: str = "cosine"
    sigma: float | None = None
    tau: float = 1.0
    seed: int = 0
    eval_every: int = 5
    hidden_dim: int = 4096
    decoupled_wd: bool = True
    include_self: bool = True

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"k must be at least 2, got {self.k}")
        for name in ("lr", "d", "batch_size", "eps", "tau", "hidden_dim", "sparsity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("wd", "gamma", "t1", "t2", "eval_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.sparsity > self.batch_size:
            raise ValueError(
                f"sparsity {self.sparsity} exceeds batch size {self.batch_size}")
        if self.affinity not in ("cosine", "gaussian"):
            raise ValueError(f"unknown affinity mode {self.affinity!r}")
        if self.affinity == "gaussian" and (self.sigma is None or self.sigma <= 0):
            raise ValueError("gaussian affinity requires a positive sigma")

    _BOOL_FIELDS = ("decoupled_wd", "include_self")

    @classmethod
    def from_mapping(cls, mapping) -> "TrainConfig":
        """Build from a flat str->str mapping (config file contents)."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(mapping) - set(fields))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "k" not in mapping:
            raise ConfigError("missing required config key 'k'")
        kwargs = {}
        for key, raw in mapping.items():
            typ = fields[key].type
            try:
                if key in cls._BOOL_FIELDS:
                    if raw.lower() not in ("true", "false"):
                        raise ValueError(f"expected true/false, got {raw!r}")
                    kwargs[key] = raw.lower() == "true"
                elif typ is int:
                    kwargs[key] = int(raw)
                elif typ is float or typ == float | None:
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = raw
            except ValueError as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from None
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class TrainLog:
    """Per-iteration loss terms and periodic metric snapshots."""

    iterations: list = field(default_factory=list)  # (t, R, Rc, ncut, lr)
    evals: list = field(default_factory=list)  # (epoch, acc_ch, nmi_ch, acc_sc, nmi_sc)
    skipped_batches: int = 0

    def iterations_csv(self) -> str:
        lines = ["iter,R,Rc,ncut,lr"]
        for t, r, rc, cut, lr in self.iterations:
            lines.append(f"{t},{r!r},{rc!r},{cut!r},{lr!r}")
        return "\n".join(lines) + "\n"

    def evals_csv(self) -> str:
        lines = ["epoch,acc_ch,nmi_ch,acc_sc,nmi_sc"]
        for epoch, acc_ch, nmi_ch, acc_sc, nmi_sc in self.evals:
            lines.append(f"{epoch},{acc_ch!r},{nmi_ch!r},{acc_sc!r},{nmi_sc!r}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "iterations": self.iterations,
            "evals": self.evals,
            "skipped_batches": self.skipped_batches,
        })

    @classmethod
    def from_json(cls, text) -> "TrainLog":
        raw = json.loads(text)
        return cls(iterations=[tuple(r) for r in raw["iterations"]],
                   evals=[tuple(r) for r in raw["evals"]],
                   skipped_batches=raw.get("skipped_batches", 0))


def _forward_eval(model: Model, features: np.ndarray):
    z, pi, _ = model.forward(features, train=False)
    return z, pi


def evaluate(model: Model, data: FeatureMatrix, sparsity: int = 10,
             include_self: bool = True, seed: int = 0, eps: float = 0.5):
    """Metrics for both heads on a dataset in eval mode.

    Returns a dict with pseudo-labels always present; ACC/NMI only when the
    dataset carries ground-truth labels.
    """
    z, pi = _forward_eval(model, data.features)
    labels_ch = pi.argmax(axis=1)
    zb = EmbeddingBatch(z, eps=eps, validate=False)
    graph = build_affinity(zb, s=min(sparsity, data.n_points), include_self=include_self)
    labels_sc = spectral_labels(graph, model.n_clusters, kmeans_seed=seed)
    out = {
        "labels_ch": labels_ch,
        "labels_sc": labels_sc,
        "n": data.n_points,
        "k": model.n_clusters,
    }
    if data.labels is not None:
        out["acc_ch"] = clustering_accuracy(labels_ch, data.labels)
        out["nmi_ch"] = nmi(labels_ch, data.labels)
        out["acc_sc"] = clustering_accuracy(labels_sc, data.labels)
        out["nmi_sc"] = nmi(labels_sc, data.labels)
    return out


def train(cfg: TrainConfig, data: FeatureMatrix):
    """Run the two-stage loop; returns (model, log)."""
    if data.n_points < cfg.batch_size:
        raise ValueError(
            f"dataset has {data.n_points} points, fewer than batch size {cfg.batch_size}")
    root = np.random.SeedSequence(cfg.seed)
    model_seq, shuffle_seq, gumbel_seq, eval_seq = root.spawn(4)
    model = Model(data.dim, cfg.hidden_dim, cfg.d, cfg.k, tau=cfg.tau,
                  seed=model_seq)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    gumbel_rng = np.random.default_rng(gumbel_seq)
    eval_seed = int(eval_seq.generate_state(1)[0] % (2**31))

    opt = Adam(model.parameters(), lr=cfg.lr, wd=cfg.wd,
               decoupled=cfg.decoupled_wd, names=model.parameter_names())
    log = TrainLog()

    iters_per_epoch = data.n_points // cfg.batch_size
    total_epochs = cfg.t1 + cfg.t2
    t = 0
    for epoch in range(1, total_epochs + 1):
        order = shuffle_rng.permutation(data.n_points)
        warm_up = epoch <= cfg.t1
        for it in range(iters_per_epoch):
            batch = data.features[order[it * cfg.batch_size:(it + 1) * cfg.batch_size]]
            lr = lr_schedule(t, cfg.t1, cfg.t2, iters_per_epoch, cfg.lr)
            z, pi, cache = model.forward(batch, train=True, rng=gumbel_rng)
            zb = EmbeddingBatch(z, eps=cfg.eps, validate=False)
            membership = Membership(pi, validate=False)
            graph = build_affinity(zb, s=cfg.sparsity, mode=cfg.affinity,
                                   sigma=cfg.sigma, include_self=cfg.include_self)
            r_value, r_grad_z = rate_R(zb)
            rc_value, rc_grad_z, rc_grad_pi = rate_Rc(zb, membership)
            try:
                cut_value, cut_grad_pi = ncut_loss(graph, membership, cfg.gamma)
            except DegenerateGraphError as exc:
                log.skipped_batches += 1
                warnings.warn(f"skipping batch at iteration {t}: {exc}", stacklevel=2)
                log.iterations.append((t, r_value, rc_value, float("nan"), lr))
                t += 1
                continue
            if warm_up:
                grad_z = -r_grad_z
                grad_pi = cut_grad_pi
            else:
                grad_z = rc_grad_z - r_grad_z
                grad_pi = rc_grad_pi + cut_grad_pi
            grads = model.backward(cache, grad_z, grad_pi)
            opt.step(grads, lr=lr)
            log.iterations.append((t, r_value, rc_value, cut_value, lr))
            t += 1
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == total_epochs):
            if data.labels is not None:
                m = evaluate(model, data, sparsity=cfg.sparsity,
                             include_self=cfg.include_self, seed=eval_seed, eps=cfg.eps)
                log.evals.append((epoch, m["acc_ch"], m["nmi_ch"], m["acc_sc"], m["nmi_sc"]))

    total_batches = max(total_epochs * iters_per_epoch, 1)
    if log.skipped_batches / total_batches > MAX_SKIPPED_FRACTION:
        raise DegenerateGraphError(
            f"{log.skipped_batches} of {total_batches} batches skipped for "
            "degenerate affinity graphs; raise sparsity s or check the features")
    return model, log
