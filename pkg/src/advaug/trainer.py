"""Alternating augment-then-train loop.

One training run is K rounds of [minimization phase, maximization phase]
followed by a final minimization phase.  A minimization phase performs
stochastic gradient updates on the current (augmented) dataset; a
maximization phase freezes the model, perturbs freshly sampled examples by
feature-space gradient ascent and appends them, labels unchanged.  K = 0
degenerates to plain empirical risk minimization.

Determinism contract: given (cfg.seed, initial net, dataset) the trained
weights and the run log are bit-identical across runs.  Phase RNG streams
are spawned from ``SeedSequence(cfg.seed)`` in execution order (min/max per
round, then the final phase), so the K = 0 run and a bare final phase with
the first spawned stream coincide exactly.  Optimizer state is reset at the
start of every minimization phase.

Run directory layout (see README.md): config.json, models/round_k.adaw,
model.adaw, log.jsonl, dataset.augmented.bin.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .net import Network, batch_loss_param_grads, batch_losses, param_list
from .surrogate import ascend_batch

OPTIMIZERS = ("adam", "sgd")


class TrainingError(RuntimeError):
    """Non-finite loss or gradient during training; carries a state dump."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = dict(state or {})


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1e-4  # learning rate
    eta: float = 1.0  # ascent step
    gamma: float = 1.0  # transport penalty weight
    k_rounds: int = 2  # minimax rounds; 0 degenerates to ERM
    t_min: int = 100  # updates per minimization phase
    t_max: int = 15  # ascent iterations per perturbed sample
    t_final: int = 3000  # updates in the final phase
    batch_size: int = 32
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    n_append: int | None = None  # per max phase; None = original dataset size

    def validate(self):
        if self.alpha < 0 or self.eta < 0 or self.gamma < 0:
            raise ValueError("alpha, eta and gamma must be nonnegative")
        if self.k_rounds < 0:
            raise ValueError("k_rounds must be >= 0")
        if min(self.t_min, self.t_final) < 0 or self.t_max < 1:
            raise ValueError("phase lengths out of range")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.n_append is not None and self.n_append < 0:
            raise ValueError("n_append must be nonnegative")


class AugmentedDataset:
    """Example store with per-example provenance (0 = original, k = round)."""

    def __init__(self, features, labels, rounds, n_classes):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.rounds = np.asarray(rounds, dtype=np.int64)
        self.n_classes = int(n_classes)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.rounds.shape != (n,):
            raise ValueError("labels/rounds must have one entry per example")

    @classmethod
    def from_dataset(cls, ds):
        return cls(
            ds.features.copy(),
            ds.labels.copy(),
            np.zeros(len(ds), dtype=np.int64),
            ds.n_classes,
        )

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_original(self):
        return int(np.count_nonzero(self.rounds == 0))

    def append(self, feats, labels, round_k):
        feats = np.asarray(feats, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        self.features = np.concatenate([self.features, feats.reshape(-1, self.features.shape[1])])
        self.labels = np.concatenate([self.labels, labels])
        self.rounds = np.concatenate(
            [self.rounds, np.full(len(labels), int(round_k), dtype=np.int64)]
        )

    def to_dataset(self):
        return data_mod.Dataset(self.features.copy(), self.labels.copy(), self.n_classes)


# -- optimizers ----------------------------------------------------------------


class _Sgd:
    def __init__(self, alpha):
        self.alpha = alpha

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.alpha * g


class _Adam:
    def __init__(self, alpha, beta1, beta2, eps, params):
        self.alpha = alpha
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p -= self.alpha * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def _make_optimizer(cfg, params):
    if cfg.optimizer == "sgd":
        return _Sgd(cfg.alpha)
    return _Adam(cfg.alpha, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, params)


# -- phases --------------------------------------------------------------------


def _window_means(losses, window=100):
    return [
        float(np.mean(losses[i : i + window])) for i in range(0, len(losses), window)
    ]


def min_phase(net, dataset, cfg, steps, rng=None):
    """Exactly ``steps`` optimizer updates on uniform resamples of the dataset.

    Returns a new network (the input is untouched) and a metrics dict.
    Optimizer state starts fresh; the phase is one optimization episode.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if len(dataset) == 0 and steps > 0:
        raise ValueError("cannot train on an empty dataset")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    net = net.copy()
    params = param_list(net)
    opt = _make_optimizer(cfg, params)
    losses = []
    for t in range(steps):
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        batch_loss, grads = batch_loss_param_grads(
            net, dataset.features[idx], dataset.labels[idx]
        )
        if not np.isfinite(batch_loss):
            raise TrainingError(
                f"non-finite loss at step {t}",
                state={"step": t, "loss": batch_loss, "batch_indices": idx.tolist()},
            )
        opt.step(params, grads)
        losses.append(batch_loss)
    net.check_finite()
    metrics = {
        "steps": steps,
        "mean_loss": float(np.mean(losses)) if losses else None,
        "final_loss": losses[-1] if losses else None,
        "loss_window_means": _window_means(losses),
    }
    return net, metrics


def max_phase(net, dataset, cfg, rng=None):
    """Perturb freshly sampled examples against the frozen model.

    Samples ``cfg.n_append`` examples uniformly (with replacement) from the
    whole current dataset, ascends each with itself as the transport anchor,
    and returns the new examples plus loss metrics.  The model is untouched.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n_append = cfg.n_append if cfg.n_append is not None else dataset.n_original
    if n_append == 0:
        empty = np.zeros((0, dataset.features.shape[1]))
        return empty, np.zeros(0, dtype=np.int64), {"n_append": 0}
    idx = rng.integers(0, len(dataset), size=n_append)
    x0 = dataset.features[idx].copy()
    y0 = dataset.labels[idx].copy()
    x_adv = ascend_batch(net, x0, y0, cfg.gamma, cfg.eta, cfg.t_max)
    metrics = {
        "n_append": int(n_append),
        "source_mean_loss": float(np.mean(batch_losses(net, x0, y0))),
        "appended_mean_loss": float(np.mean(batch_losses(net, x_adv, y0))),
    }
    return x_adv, y0, metrics


@dataclass
class TrainResult:
    net: Network
    log: list = field(default_factory=list)
    dataset: AugmentedDataset | None = None


def train(net0, dataset, cfg, checkpoint_dir=None):
    """Run the full loop: K rounds of (min phase, max phase), then the final
    minimization phase.  Returns the trained net, the run log and the
    augmented dataset; inputs are never mutated."""
    cfg.validate()
    if isinstance(dataset, AugmentedDataset):
        ds = AugmentedDataset(
            dataset.features.copy(),
            dataset.labels.copy(),
            dataset.rounds.copy(),
            dataset.n_classes,
        )
    else:
        ds = AugmentedDataset.from_dataset(dataset)
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    streams = np.random.SeedSequence(cfg.seed).spawn(2 * cfg.k_rounds + 1)
    log = []
    net = net0.copy()
    si = 0
    for k in range(1, cfg.k_rounds + 1):
        t0 = time.perf_counter()
        net, metrics = min_phase(net, ds, cfg, cfg.t_min, rng=np.random.default_rng(streams[si]))
        si += 1
        log.append(
            {
                "event": "min_phase",
                "round": k,
                "dataset_size": len(ds),
                "wall_time": time.perf_counter() - t0,
                **metrics,
            }
        )
        if checkpoint_dir is not None:
            net.save(checkpoint_dir / f"round_{k}.adaw")

        t0 = time.perf_counter()
        x_adv, y_adv, metrics = max_phase(net, ds, cfg, rng=np.random.default_rng(streams[si]))
        si += 1
        ds.append(x_adv, y_adv, k)
        log.append(
            {
                "event": "max_phase",
                "round": k,
                "dataset_size": len(ds),
                "wall_time": time.perf_counter() - t0,
                **metrics,
            }
        )

    t0 = time.perf_counter()
    net, metrics = min_phase(net, ds, cfg, cfg.t_final, rng=np.random.default_rng(streams[si]))
    log.append(
        {
            "event": "final_phase",
            "round": cfg.k_rounds,
            "dataset_size": len(ds),
            "wall_time": time.perf_counter() - t0,
            **metrics,
        }
    )
    return TrainResult(net=net, log=log, dataset=ds)


def run_training(out_dir, net0, dataset, cfg, extra_config=None):
    """Train and write the run directory artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {"train": asdict(cfg), "net": {"dims": net0.dims, "activations": net0.activations}}
    if extra_config:
        resolved.update(extra_config)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)

    result = train(net0, dataset, cfg, checkpoint_dir=out_dir / "models")
    result.net.save(out_dir / "model.adaw")
    with open(out_dir / "log.jsonl", "w") as fh:
        for event in result.log:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
    data_mod.write_dataset(out_dir / "dataset.augmented.bin", result.dataset.to_dataset())
    return result
