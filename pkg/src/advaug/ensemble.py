"""Penalty-grid ensembles with per-test-point member selection.

Each member is trained with a different transport penalty weight gamma,
so the members cover fictitious target domains at different distances from
the source.  At test time the member whose maximum class score is largest
handles the input: ``max_logit`` (default) compares raw logits, and
``max_softmax`` compares maximum softmax probabilities instead.  Both modes
break ties toward the lowest member index, and per-member class predictions
break ties toward the lowest class index.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .net import Network, logits_batch, predict_batch
from .trainer import train

SELECTION_MODES = ("max_logit", "max_softmax")


class EnsembleModel:
    """Trained members indexed by gamma plus the selection rule."""

    def __init__(self, members, selection="max_logit"):
        members = [(float(g), net) for g, net in members]
        if not members:
            raise ValueError("ensemble needs at least one member")
        gammas = [g for g, _ in members]
        if len(set(gammas)) != len(gammas):
            raise ValueError(f"member gammas must be distinct, got {gammas}")
        if selection not in SELECTION_MODES:
            raise ValueError(f"unknown selection mode {selection!r}")
        self.members = members
        self.selection = selection

    def __len__(self):
        return len(self.members)

    @property
    def gammas(self):
        return [g for g, _ in self.members]


def member_seed(base_seed, index):
    return int(base_seed) ^ int(index)


def train_ensemble(dataset, base_cfg, gamma_grid, dims, activation="tanh", selection="max_logit"):
    """One training run per grid value; member i uses seed base_seed ^ i."""
    gamma_grid = [float(g) for g in gamma_grid]
    if not gamma_grid:
        raise ValueError("gamma grid must be nonempty")
    members = []
    for i, gamma in enumerate(gamma_grid):
        cfg = replace(base_cfg, gamma=gamma, seed=member_seed(base_cfg.seed, i))
        net0 = Network.initialize(dims, activation, seed=cfg.seed)
        result = train(net0, dataset, cfg)
        members.append((gamma, result.net))
    return EnsembleModel(members, selection=selection)


def _member_scores(ens, X):
    """Per-member selection score for each row of X: shape (s, B)."""
    scores = np.empty((len(ens.members), X.shape[0]))
    for u, (_, net) in enumerate(ens.members):
        logits = logits_batch(net, X)
        if ens.selection == "max_softmax":
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            scores[u] = (e / e.sum(axis=1, keepdims=True)).max(axis=1)
        else:
            scores[u] = logits.max(axis=1)
    return scores


def select(ens, x):
    """Index of the member with the greatest maximum class score.

    Deterministic; exact ties go to the lowest member index.
    """
    x = np.asarray(x, dtype=np.float64)
    scores = _member_scores(ens, x[None, :])[:, 0]
    return int(np.argmax(scores))


def predict(ens, x):
    """Class predicted by the selected member (ties to the lowest class)."""
    _, net = ens.members[select(ens, x)]
    return int(predict_batch(net, np.asarray(x, dtype=np.float64)[None, :])[0])


def predict_ensemble_batch(ens, X):
    """Vectorized predict: selection and prediction per row."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    scores = _member_scores(ens, X)
    chosen = np.argmax(scores, axis=0)
    preds = np.empty(X.shape[0], dtype=np.int64)
    for u, (_, net) in enumerate(ens.members):
        mask = chosen == u
        if np.any(mask):
            preds[mask] = predict_batch(net, X[mask])
    return preds


def model_accuracy(net, ds):
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict_batch(net, ds.features) == ds.labels))


def ensemble_accuracy(ens, ds):
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict_ensemble_batch(ens, ds.features) == ds.labels))


# -- manifest I/O -----------------------------------------------------------------


def save_ensemble(out_dir, ens, base_seed):
    """Write member model files plus a JSON manifest listing them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (gamma, net) in enumerate(ens.members):
        name = f"member_{i}.adaw"
        net.save(out_dir / name)
        entries.append({"gamma": gamma, "seed": member_seed(base_seed, i), "model": name})
    manifest = {"version": 1, "selection": ens.selection, "members": entries}
    path = out_dir / "ensemble.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def load_ensemble(manifest_path):
    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != 1:
        raise ValueError(f"unsupported ensemble manifest version {manifest.get('version')}")
    members = [
        (entry["gamma"], Network.load(manifest_path.parent / entry["model"]))
        for entry in manifest["members"]
    ]
    return EnsembleModel(members, selection=manifest.get("selection", "max_logit"))
