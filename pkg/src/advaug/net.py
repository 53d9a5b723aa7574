"""Small feedforward softmax classifier with analytic derivatives.

The model is an affine stack (the feature extractor) followed by a bias-free
linear classification layer.  The extractor maps an input x to a feature
vector z; the classification layer turns z into class logits.  All arithmetic
is float64 and all derivatives are hand-written backprop (no autodiff):
gradients with respect to the feature vector, the raw input and every
parameter, plus the feature-space Hessian of the loss.

All public functions are pure given an immutable network; weight mutation is
the trainer's job.  The binary model format is documented byte-exactly in
README.md.
"""

from __future__ import annotations

import struct

import numpy as np

MODEL_MAGIC = b"ADAW"
MODEL_VERSION = 1

ACTIVATIONS = ("tanh", "relu", "linear")
_ACT_CODE = {"tanh": 0, "relu": 1, "linear": 2}
_ACT_NAME = {code: name for name, code in _ACT_CODE.items()}


class ModelFormatError(ValueError):
    """Model file failed magic, version or structural validation."""


class LabeledExample:
    """A single (input vector, class index) pair."""

    __slots__ = ("x", "y")

    def __init__(self, x, y):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = int(y)
        if self.x.ndim != 1:
            raise ValueError(f"x must be 1-D, got shape {self.x.shape}")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("x contains non-finite entries")
        if self.y < 0:
            raise ValueError(f"label must be nonnegative, got {self.y}")

    def __repr__(self):
        return f"LabeledExample(x=<{self.x.shape[0]}-vector>, y={self.y})"


class Network:
    """Feedforward classifier: affine + activation layers, then theta_c.

    ``dims = [d, h_1, ..., p, m]``: the extractor applies ``len(dims) - 2``
    affine layers (``weights[i]``: shape ``(dims[i+1], dims[i])``,
    ``biases[i]``: shape ``(dims[i+1],)``), each followed by its activation
    tag; ``theta_c`` is ``(p, m)`` with column j the classifier vector for
    class j.  The classification layer carries no bias.
    """

    def __init__(self, dims, activations, weights, biases, theta_c):
        dims = [int(v) for v in dims]
        if len(dims) < 3:
            raise ValueError("dims needs at least [input, feature, classes]")
        if any(v <= 0 for v in dims):
            raise ValueError(f"dims must be positive, got {dims}")
        n_layers = len(dims) - 2
        if isinstance(activations, str):
            activations = [activations] * n_layers
        activations = [str(a) for a in activations]
        if len(activations) != n_layers:
            raise ValueError(
                f"need {n_layers} activation tags, got {len(activations)}"
            )
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if len(weights) != n_layers or len(biases) != n_layers:
            raise ValueError("weights/biases count must match layer count")

        self.dims = dims
        self.activations = activations
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.theta_c = np.asarray(theta_c, dtype=np.float64)

        for i in range(n_layers):
            want = (dims[i + 1], dims[i])
            if self.weights[i].shape != want:
                raise ValueError(
                    f"layer {i} weight shape {self.weights[i].shape}, want {want}"
                )
            if self.biases[i].shape != (dims[i + 1],):
                raise ValueError(
                    f"layer {i} bias shape {self.biases[i].shape}, want ({dims[i+1]},)"
                )
        if self.theta_c.shape != (dims[-2], dims[-1]):
            raise ValueError(
                f"theta_c shape {self.theta_c.shape}, want {(dims[-2], dims[-1])}"
            )
        self.check_finite()

    # -- basic properties ------------------------------------------------

    @property
    def input_dim(self):
        return self.dims[0]

    @property
    def feature_dim(self):
        return self.dims[-2]

    @property
    def n_classes(self):
        return self.dims[-1]

    def check_finite(self):
        """Raise if any weight is NaN/Inf (invariant after every update)."""
        for a in param_list(self):
            if not np.all(np.isfinite(a)):
                raise ValueError("network parameters contain non-finite values")

    def copy(self):
        return Network(
            self.dims,
            list(self.activations),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.theta_c.copy(),
        )

    @classmethod
    def initialize(cls, dims, activation="tanh", seed=0):
        """Seeded uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases."""
        rng = np.random.default_rng(seed)
        dims = [int(v) for v in dims]
        weights, biases = [], []
        for i in range(len(dims) - 2):
            fan_in, fan_out = dims[i], dims[i + 1]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        p, m = dims[-2], dims[-1]
        lim = np.sqrt(6.0 / (p + m))
        theta_c = rng.uniform(-lim, lim, size=(p, m))
        return cls(dims, activation, weights, biases, theta_c)

    # -- binary model format ----------------------------------------------

    def save(self, path):
        """Write the little-endian ADAW model file (see README.md)."""
        parts = [struct.pack("<4sII", MODEL_MAGIC, MODEL_VERSION, len(self.dims))]
        parts.append(struct.pack(f"<{len(self.dims)}I", *self.dims))
        codes = [_ACT_CODE[a] for a in self.activations]
        parts.append(struct.pack(f"<{len(codes)}B", *codes))
        for w, b in zip(self.weights, self.biases):
            parts.append(w.astype("<f8").tobytes())
            parts.append(b.astype("<f8").tobytes())
        parts.append(self.theta_c.astype("<f8").tobytes())
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            blob = fh.read()
        head = struct.calcsize("<4sII")
        if len(blob) < head:
            raise ModelFormatError("file too short for header")
        magic, version, n_dims = struct.unpack_from("<4sII", blob, 0)
        if magic != MODEL_MAGIC:
            raise ModelFormatError(f"bad magic {magic!r}, want {MODEL_MAGIC!r}")
        if version != MODEL_VERSION:
            raise ModelFormatError(f"unsupported version {version}")
        off = head
        dims = struct.unpack_from(f"<{n_dims}I", blob, off)
        off += 4 * n_dims
        n_layers = n_dims - 2
        codes = struct.unpack_from(f"<{n_layers}B", blob, off)
        off += n_layers
        try:
            acts = [_ACT_NAME[c] for c in codes]
        except KeyError as exc:
            raise ModelFormatError(f"unknown activation code {exc}") from None

        expected = off
        for i in range(n_layers):
            expected += 8 * (dims[i + 1] * dims[i] + dims[i + 1])
        expected += 8 * dims[-2] * dims[-1]
        if len(blob) != expected:
            raise ModelFormatError(
                f"truncated or oversized file: expected {expected} bytes, got {len(blob)}"
            )

        weights, biases = [], []
        for i in range(n_layers):
            n = dims[i + 1] * dims[i]
            weights.append(
                np.frombuffer(blob, "<f8", n, off).reshape(dims[i + 1], dims[i]).copy()
            )
            off += 8 * n
            biases.append(np.frombuffer(blob, "<f8", dims[i + 1], off).copy())
            off += 8 * dims[i + 1]
        theta_c = (
            np.frombuffer(blob, "<f8", dims[-2] * dims[-1], off)
            .reshape(dims[-2], dims[-1])
            .copy()
        )
        return cls(dims, acts, weights, biases, theta_c)


# -- activations ---------------------------------------------------------


def _apply_act(name, u):
    if name == "tanh":
        return np.tanh(u)
    if name == "relu":
        return np.maximum(u, 0.0)
    return u


def _act_grad(name, u):
    if name == "tanh":
        t = np.tanh(u)
        return 1.0 - t * t
    if name == "relu":
        return (u > 0.0).astype(np.float64)
    return np.ones_like(u)


# -- forward / backward core (batched; rows are independent samples) ------


def _forward(net, X):
    """Run the extractor on a (B, d) batch; returns (activations, preacts)."""
    acts = [X]
    pres = []
    a = X
    for w, b, tag in zip(net.weights, net.biases, net.activations):
        u = a @ w.T + b
        pres.append(u)
        a = _apply_act(tag, u)
        acts.append(a)
    return acts, pres


def _backprop(net, acts, pres, d_z, with_params):
    """Propagate an upstream feature gradient d_z (B, p) back to the input.

    Returns (param_grads, d_x) where param_grads is [dW0, db0, ...] summed
    over the batch (empty list when with_params is False).
    """
    grads = []
    da = d_z
    for i in range(len(net.weights) - 1, -1, -1):
        dpre = da * _act_grad(net.activations[i], pres[i])
        if with_params:
            grads.insert(0, dpre.sum(axis=0))
            grads.insert(0, dpre.T @ acts[i])
        da = dpre @ net.weights[i]
    return grads, da


# -- public operations -----------------------------------------------------


def features(net, x):
    """Feature vector z of a single input x (length d -> length p)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise ValueError(f"input shape {x.shape}, want ({net.input_dim},)")
    acts, _ = _forward(net, x[None, :])
    return acts[-1][0]


def softmax_probs(theta_c, z):
    """Class probabilities for features z; max-logit subtracted for stability."""
    theta_c = np.asarray(theta_c, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    logits = theta_c.T @ z
    e = np.exp(logits - logits.max())
    return e / e.sum()


def loss_z(theta_c, z, y):
    """Negative log softmax probability of class y, as a function of z."""
    theta_c = np.asarray(theta_c, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    logits = theta_c.T @ z
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    return float(lse - logits[y])


def loss(net, example):
    """Classification loss of a labeled example under the full network."""
    if example.y >= net.n_classes:
        raise ValueError(f"label {example.y} out of range for {net.n_classes} classes")
    return loss_z(net.theta_c, features(net, example.x), example.y)


def grad_z_loss(theta_c, z, y):
    """Analytic feature-space gradient: -theta_y + sum_j p_j theta_j."""
    theta_c = np.asarray(theta_c, dtype=np.float64)
    p = softmax_probs(theta_c, z)
    return theta_c @ p - theta_c[:, y]


def hessian_z_loss(theta_c, z, y=None):
    """Feature-space Hessian of the loss (independent of the label y).

    H = Theta diag(p) Theta^T - (Theta p)(Theta p)^T, symmetric PSD.
    """
    theta_c = np.asarray(theta_c, dtype=np.float64)
    p = softmax_probs(theta_c, z)
    mean_col = theta_c @ p
    h = (theta_c * p) @ theta_c.T - np.outer(mean_col, mean_col)
    return 0.5 * (h + h.T)


def grad_params_loss(net, example):
    """Backpropagated loss gradient for every parameter array.

    Returned list matches :func:`param_list` order:
    [dW0, db0, dW1, db1, ..., dtheta_c].
    """
    x = np.asarray(example.x, dtype=np.float64)
    acts, pres = _forward(net, x[None, :])
    z = acts[-1][0]
    probs = softmax_probs(net.theta_c, z)
    dlogits = probs.copy()
    dlogits[example.y] -= 1.0
    d_theta_c = np.outer(z, dlogits)
    d_z = (net.theta_c @ dlogits)[None, :]
    grads, _ = _backprop(net, acts, pres, d_z, with_params=True)
    grads.append(d_theta_c)
    return grads


def grad_input_loss(net, example):
    """Loss gradient with respect to the raw input x (length d)."""
    x = np.asarray(example.x, dtype=np.float64)
    acts, pres = _forward(net, x[None, :])
    z = acts[-1][0]
    probs = softmax_probs(net.theta_c, z)
    dlogits = probs.copy()
    dlogits[example.y] -= 1.0
    d_z = (net.theta_c @ dlogits)[None, :]
    _, d_x = _backprop(net, acts, pres, d_z, with_params=False)
    return d_x[0]


def feature_vjp(net, x, v):
    """Jacobian-transpose product of the feature map: J(x)^T v."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    acts, pres = _forward(net, x[None, :])
    _, d_x = _backprop(net, acts, pres, v[None, :], with_params=False)
    return d_x[0]


def logits_batch(net, X):
    """Class scores (B, m) for a batch of inputs (B, d)."""
    X = np.asarray(X, dtype=np.float64)
    acts, _ = _forward(net, X)
    return acts[-1] @ net.theta_c


def predict_batch(net, X):
    """Predicted class per row (ties broken toward the lowest index)."""
    return np.argmax(logits_batch(net, X), axis=1)


# -- parameter plumbing ----------------------------------------------------


def param_list(net):
    """Live parameter arrays in canonical order [W0, b0, ..., theta_c]."""
    out = []
    for w, b in zip(net.weights, net.biases):
        out.append(w)
        out.append(b)
    out.append(net.theta_c)
    return out


def flatten_params(net):
    return np.concatenate([a.ravel() for a in param_list(net)])


def set_flat_params(net, vec):
    """Overwrite all parameters in place from a flat vector."""
    vec = np.asarray(vec, dtype=np.float64)
    off = 0
    for a in param_list(net):
        n = a.size
        a[...] = vec[off : off + n].reshape(a.shape)
        off += n
    if off != vec.size:
        raise ValueError(f"flat vector has {vec.size} entries, network needs {off}")


# -- batched training helpers ----------------------------------------------


def _softmax_rows(logits):
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def batch_losses(net, X, y):
    """Per-sample losses (B,) for inputs X (B, d) and labels y (B,)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    logits = logits_batch(net, X)
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return lse - logits[np.arange(len(y)), y]


def batch_loss_param_grads(net, X, y):
    """Mean batch loss and its parameter gradient (param_list order)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n = X.shape[0]
    acts, pres = _forward(net, X)
    z = acts[-1]
    logits = z @ net.theta_c
    mx = logits.max(axis=1)
    lse = mx + np.log(np.exp(logits - mx[:, None]).sum(axis=1))
    mean_loss = float(np.mean(lse - logits[np.arange(n), y]))
    dlogits = _softmax_rows(logits)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    d_theta_c = z.T @ dlogits
    d_z = dlogits @ net.theta_c.T
    grads, _ = _backprop(net, acts, pres, d_z, with_params=True)
    grads.append(d_theta_c)
    return mean_loss, grads
