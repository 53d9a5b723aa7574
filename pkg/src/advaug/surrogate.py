"""Robust surrogate loss: inner maximizers, proxies and bound checkers.

The surrogate of a pointwise loss l at an anchor z0 with penalty weight gamma
is

    phi_gamma(z0) = sup_z { l(z) - (gamma / 2) ||z - z0||^2 }.

Two solver paths exist on purpose.  Training uses plain fixed-step gradient
ascent in input space (:func:`ascend_x`) -- exactly the update the
augmentation loop performs, no line search.  Diagnostics use a damped Newton
ascent in feature space (:func:`maximize_z_exact`), which is certifiable:
when gamma exceeds the gradient-Lipschitz constant of the loss the inner
problem is strongly concave and the returned point carries an explicit
suboptimality certificate.  The checkers at the bottom turn the method's
closeness and sandwich bounds into machine-verified inequalities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .net import (
    LabeledExample,
    _backprop,
    _forward,
    _softmax_rows,
    feature_vjp,
    features,
    grad_input_loss,
    grad_z_loss,
    hessian_z_loss,
    loss_z,
    softmax_probs,
)


class CurvatureError(ValueError):
    """gamma does not dominate the loss curvature; inner problem not concave."""


class ConvergenceError(RuntimeError):
    """Inner solver ran out of iterations; carries the last iterate."""

    def __init__(self, message, last_z):
        super().__init__(message)
        self.last_z = last_z


class AscentError(RuntimeError):
    """Gradient ascent produced a non-finite iterate."""


@dataclass(frozen=True)
class LipschitzCertificate:
    """Constants bounding the loss (L0), its gradient (L1 and l_theta) and
    its Hessian variation (L2), each tagged with how it was obtained."""

    l0: float
    l1: float
    l2: float
    l_theta: float
    methods: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.l1 > self.l_theta + 1e-12:
            raise ValueError("L1 must not exceed l_theta")
        for name in ("l0", "l1", "l2", "l_theta"):
            v = getattr(self, name)
            if np.isnan(v) or v < 0:
                raise ValueError(f"{name} must be a nonnegative number, got {v}")


@dataclass(frozen=True)
class SurrogateResult:
    """Inner maximizer plus its certified suboptimality."""

    z_star: np.ndarray
    phi: float
    ascent_steps: int
    epsilon_cert: float
    gamma: float


# -- pointwise losses --------------------------------------------------------


class SoftmaxLoss:
    """Softmax loss in feature space for a fixed classifier and label."""

    def __init__(self, theta_c, y):
        self.theta_c = np.asarray(theta_c, dtype=np.float64)
        self.y = int(y)

    def value(self, z):
        return loss_z(self.theta_c, z, self.y)

    def grad(self, z):
        return grad_z_loss(self.theta_c, z, self.y)

    def hessian(self, z):
        return hessian_z_loss(self.theta_c, z, self.y)

    def curvature_bound(self):
        return l_theta(self.theta_c)

    def lipschitz(self, **kwargs):
        return lipschitz_constants(self.theta_c, **kwargs)


class LinearLoss:
    """a^T z + b; test plumbing with exactly known constants."""

    def __init__(self, a, b=0.0):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = float(b)

    def value(self, z):
        return float(self.a @ z + self.b)

    def grad(self, z):
        return self.a.copy()

    def hessian(self, z):
        return np.zeros((self.a.size, self.a.size))

    def curvature_bound(self):
        return 0.0

    def lipschitz(self, **kwargs):
        return LipschitzCertificate(
            l0=float(np.linalg.norm(self.a)),
            l1=0.0,
            l2=0.0,
            l_theta=0.0,
            methods={"l0": "analytic", "l1": "analytic", "l2": "analytic"},
        )


class QuadraticLoss:
    """0.5 z^T A z + b^T z; gradient grows without bound, so L0 is infinite."""

    def __init__(self, a_mat, b):
        self.a_mat = np.asarray(a_mat, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)

    def value(self, z):
        return float(0.5 * z @ self.a_mat @ z + self.b @ z)

    def grad(self, z):
        return self.a_mat @ z + self.b

    def hessian(self, z):
        return self.a_mat.copy()

    def curvature_bound(self):
        return float(np.linalg.norm(self.a_mat, 2))

    def lipschitz(self, **kwargs):
        l1 = self.curvature_bound()
        return LipschitzCertificate(
            l0=np.inf,
            l1=l1,
            l2=0.0,
            l_theta=l1,
            methods={"l0": "unbounded", "l1": "analytic", "l2": "analytic"},
        )


# -- Lipschitz machinery ------------------------------------------------------


def l_theta(theta_c):
    """Curvature cap of the softmax loss: 2 max_j ||col_j|| * sum_j ||col_j||."""
    norms = np.linalg.norm(np.asarray(theta_c, dtype=np.float64), axis=0)
    return float(2.0 * norms.max() * norms.sum())


def gradient_bound(theta_c):
    """Bound on ||grad_z loss||: the gradient is -theta_y + sum_j p_j theta_j."""
    norms = np.linalg.norm(np.asarray(theta_c, dtype=np.float64), axis=0)
    return float(2.0 * norms.max())


def _hessian_batch(theta_c, zs):
    logits = zs @ theta_c
    probs = _softmax_rows(logits)
    mean_cols = probs @ theta_c.T  # (n, p)
    h = np.einsum("pj,nj,qj->npq", theta_c, probs, theta_c)
    h -= np.einsum("np,nq->npq", mean_cols, mean_cols)
    return h


def empirical_hessian_lipschitz(theta_c, n_pairs=10000, seed=0):
    """Largest sampled ratio ||H(z) - H(z')|| / ||z - z'|| (no safety factor).

    Pairs mix long-range and short-range separations so both the global
    variation and the local third derivative get probed.
    """
    theta_c = np.asarray(theta_c, dtype=np.float64)
    p = theta_c.shape[0]
    rng = np.random.default_rng(seed)
    norms = np.linalg.norm(theta_c, axis=0)
    scale = 3.0 / max(float(norms.mean()), 1e-9)
    z_a = rng.normal(0.0, scale, size=(n_pairs, p))
    step = rng.normal(size=(n_pairs, p))
    step /= np.linalg.norm(step, axis=1, keepdims=True)
    radii = scale * 10.0 ** rng.uniform(-3.0, 0.0, size=(n_pairs, 1))
    z_b = z_a + radii * step

    h_a = _hessian_batch(theta_c, z_a)
    h_b = _hessian_batch(theta_c, z_b)
    diff_norms = np.linalg.norm(h_a - h_b, ord=2, axis=(1, 2))
    seps = np.linalg.norm(z_a - z_b, axis=1)
    return float(np.max(diff_norms / seps))


def lipschitz_constants(theta_c, n_pairs=10000, seed=0, safety=2.0, l2_override=None):
    """Certificate for the softmax loss: analytic L0/L1, sampled L2.

    L2 has no closed form here; it is estimated from >= n_pairs random pairs
    and inflated by ``safety``.  Pass ``l2_override`` to substitute an
    analytic bound.
    """
    theta_c = np.asarray(theta_c, dtype=np.float64)
    if not np.any(theta_c):
        raise ValueError("theta_c must be nonzero")
    lt = l_theta(theta_c)
    if l2_override is not None:
        l2 = float(l2_override)
        l2_method = "analytic-override"
    else:
        l2 = safety * empirical_hessian_lipschitz(theta_c, n_pairs=n_pairs, seed=seed)
        l2_method = f"empirical*{safety:g}"
    return LipschitzCertificate(
        l0=gradient_bound(theta_c),
        l1=lt,
        l2=l2,
        l_theta=lt,
        methods={"l0": "analytic", "l1": "analytic", "l2": l2_method},
    )


# -- exact inner maximization (feature space) --------------------------------


def maximize_z_exact(loss, z0, gamma, tol=1e-10, max_iter=200):
    """Maximize l(z) - (gamma/2)||z - z0||^2 by damped Newton ascent.

    Requires gamma > L1 so the objective is (gamma - L1)-strongly concave.
    Stops once ||grad h|| <= tol; strong concavity then certifies the value
    is within epsilon = tol^2 / (2 (gamma - L1)) of the supremum.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    l1 = loss.curvature_bound()
    if gamma <= l1:
        raise CurvatureError(f"need gamma > L1: gamma={gamma}, L1={l1}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")

    def h_val(z):
        d = z - z0
        return loss.value(z) - 0.5 * gamma * float(d @ d)

    def h_grad(z):
        return loss.grad(z) - gamma * (z - z0)

    z = z0.copy()
    h = h_val(z)
    eye = np.eye(z0.size)
    steps = 0
    converged = False
    for _ in range(max_iter):
        g = h_grad(z)
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            converged = True
            break
        direction = np.linalg.solve(gamma * eye - loss.hessian(z), g)
        t = 1.0
        advanced = False
        for _ in range(60):
            z_new = z + t * direction
            h_new = h_val(z_new)
            # accept on value increase, or (near the optimum, where value
            # differences fall below float resolution) on gradient decrease
            if h_new > h or np.linalg.norm(h_grad(z_new)) < gn:
                z, h = z_new, max(h, h_new)
                advanced = True
                break
            t *= 0.5
        if not advanced:
            # Newton stalled; safe short gradient step
            z_new = z + g / (gamma + l1 + 1.0)
            h_new = h_val(z_new)
            if h_new > h or np.linalg.norm(h_grad(z_new)) < gn:
                z, h = z_new, max(h, h_new)
            else:
                raise ConvergenceError(
                    f"inner ascent stalled at ||grad||={gn:.3e} (tol={tol:.3e})",
                    last_z=z,
                )
        steps += 1
    if not converged and float(np.linalg.norm(h_grad(z))) > tol:
        raise ConvergenceError(
            f"inner ascent did not reach tol={tol:.3e} in {max_iter} iterations",
            last_z=z,
        )

    phi = h_val(z)
    phi0 = loss.value(z0)
    # zero perturbation is always feasible, so the surrogate dominates the loss
    assert phi >= phi0, "surrogate fell below the unperturbed loss"
    return SurrogateResult(
        z_star=z,
        phi=phi,
        ascent_steps=steps,
        epsilon_cert=tol * tol / (2.0 * (gamma - l1)),
        gamma=float(gamma),
    )


def newton_proxy(loss, z0, gamma):
    """Closed-form perturbation proxy: z0 + (1/gamma)(I - H/gamma)^{-1} g."""
    z0 = np.asarray(z0, dtype=np.float64)
    h = loss.hessian(z0)
    h_norm = float(np.linalg.norm(h, 2))
    if gamma <= h_norm:
        raise CurvatureError(f"need gamma > ||H||: gamma={gamma}, ||H||={h_norm}")
    g = loss.grad(z0)
    step = np.linalg.solve(np.eye(z0.size) - h / gamma, g) / gamma
    return z0 + step


# -- bound checkers -----------------------------------------------------------


def check_theorem1(loss, z0, gamma, tol=1e-10, cert=None):
    """Squared distance between the exact maximizer and the Newton proxy,
    against its certified upper bound.  Returns a report dict."""
    if cert is None:
        cert = loss.lipschitz()
    if gamma <= cert.l1:
        raise CurvatureError(f"need gamma > L1: gamma={gamma}, L1={cert.l1}")
    res = maximize_z_exact(loss, z0, gamma, tol=tol)
    proxy = newton_proxy(loss, z0, gamma)
    lhs = float(np.sum((res.z_star - proxy) ** 2))
    eps = res.epsilon_cert
    slack = gamma - cert.l1
    rhs = 2.0 * eps / slack
    if cert.l2 > 0.0:
        rhs += (cert.l2 / (3.0 * slack)) * (
            (5.0 * cert.l0 / gamma) ** 3
            + (cert.l0 / slack) ** 3
            + (2.0 * eps / gamma) ** 1.5
        )
    return {
        "check": "newton_proxy_bound",
        "gamma": float(gamma),
        "tol": float(tol),
        "epsilon": eps,
        "lhs": lhs,
        "rhs": rhs,
        "passed": bool(lhs <= rhs),
        "constants": {
            "l0": cert.l0,
            "l1": cert.l1,
            "l2": cert.l2,
            "l_theta": cert.l_theta,
            "methods": dict(cert.methods),
        },
    }


def check_lemma3(loss, z0, gamma, tol=1e-10, cert=None):
    """Distance of the exact maximizer from the plain first-order step,
    against the 4 L0 / gamma + sqrt(2 eps / gamma) bound."""
    if cert is None:
        cert = loss.lipschitz()
    if gamma <= cert.l1:
        raise CurvatureError(f"need gamma > L1: gamma={gamma}, L1={cert.l1}")
    z0 = np.asarray(z0, dtype=np.float64)
    res = maximize_z_exact(loss, z0, gamma, tol=tol)
    eps = res.epsilon_cert
    first_order = z0 + loss.grad(z0) / gamma
    lhs = float(np.linalg.norm(res.z_star - first_order))
    rhs = 4.0 * cert.l0 / gamma + float(np.sqrt(2.0 * eps / gamma))
    return {
        "check": "first_order_closeness",
        "gamma": float(gamma),
        "tol": float(tol),
        "epsilon": eps,
        "lhs": lhs,
        "rhs": rhs,
        "passed": bool(lhs <= rhs),
        "constants": {
            "l0": cert.l0,
            "l1": cert.l1,
            "l2": cert.l2,
            "l_theta": cert.l_theta,
            "methods": dict(cert.methods),
        },
    }


def check_theorem2_sandwich(theta_c, z, y, gamma, tol=1e-11):
    """Sandwich the surrogate gap phi - l by the classifier-deviation term.

    R = ||theta_y - sum_j p_j theta_j||^2.  Asserted: the half-factor window
    R/(2(gamma+L)) <= phi - l <= R/(2(gamma-L)) and the looser upper bound
    R/(gamma-L).  The looser lower bound R/(gamma+L) is reported but not
    asserted (it does not hold in general; see README).
    """
    theta_c = np.asarray(theta_c, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    lt = l_theta(theta_c)
    if gamma <= lt:
        raise CurvatureError(f"need gamma > L(theta): gamma={gamma}, L={lt}")
    loss = SoftmaxLoss(theta_c, y)
    res = maximize_z_exact(loss, z, gamma, tol=tol)
    gap = res.phi - loss.value(z)
    probs = softmax_probs(theta_c, z)
    deviation = theta_c[:, int(y)] - theta_c @ probs
    r = float(deviation @ deviation)

    lower = r / (2.0 * (gamma + lt))
    upper = r / (2.0 * (gamma - lt))
    upper_loose = r / (gamma - lt)
    lower_loose = r / (gamma + lt)
    eps = res.epsilon_cert
    float_slack = 1e-14 * max(1.0, r)
    passed = (
        gap >= lower - eps - float_slack
        and gap <= upper + float_slack
        and gap <= upper_loose + float_slack
    )
    return {
        "check": "surrogate_gap_sandwich",
        "gamma": float(gamma),
        "l_theta": lt,
        "regularizer": r,
        "gap": float(gap),
        "lower": lower,
        "upper": upper,
        "upper_loose": upper_loose,
        "lower_loose_unasserted": lower_loose,
        "epsilon": eps,
        "passed": bool(passed),
    }


# -- training-path ascent (input space) ---------------------------------------


def ascend_x(net, example, anchor, gamma, eta, t_max):
    """Fixed-step gradient ascent on l(x) - gamma * 0.5 ||g(x) - g(x_a)||^2.

    Runs exactly ``t_max`` iterations with step ``eta`` and returns a new
    example carrying the anchor's label; inputs are never modified.
    """
    if example.y != anchor.y:
        raise ValueError(f"label mismatch: {example.y} vs {anchor.y}")
    if eta < 0:
        raise ValueError(f"eta must be nonnegative, got {eta}")
    if t_max < 1:
        raise ValueError(f"t_max must be >= 1, got {t_max}")
    z_anchor = features(net, anchor.x)
    x = np.array(example.x, dtype=np.float64)
    y = example.y
    for t in range(t_max):
        g_loss = grad_input_loss(net, LabeledExample(x, y))
        z = features(net, x)
        g_cost = feature_vjp(net, x, z - z_anchor)
        g = g_loss - gamma * g_cost
        if not np.all(np.isfinite(g)):
            raise AscentError(f"non-finite ascent gradient at step {t}")
        x = x + eta * g
    return LabeledExample(x, y)


def ascend_batch(net, x0, y, gamma, eta, t_max):
    """Vectorized :func:`ascend_x` with each sample anchored at itself.

    Rows evolve independently; this is the per-sample ascent, just batched.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y)
    if eta < 0:
        raise ValueError(f"eta must be nonnegative, got {eta}")
    if t_max < 1:
        raise ValueError(f"t_max must be >= 1, got {t_max}")
    if x0.shape[0] == 0:
        return x0.copy()
    z_anchor = _forward(net, x0)[0][-1]
    x = x0.copy()
    idx = np.arange(x.shape[0])
    for t in range(t_max):
        acts, pres = _forward(net, x)
        z = acts[-1]
        dlogits = _softmax_rows(z @ net.theta_c)
        dlogits[idx, y] -= 1.0
        d_z = dlogits @ net.theta_c.T - gamma * (z - z_anchor)
        _, d_x = _backprop(net, acts, pres, d_z, with_params=False)
        if not np.all(np.isfinite(d_x)):
            raise AscentError(f"non-finite ascent gradient at step {t}")
        x = x + eta * d_x
    return x


# -- envelope identity ---------------------------------------------------------


def envelope_grad_check(net, example, gamma, fd_step=1e-5, inner_tol=1e-10):
    """Danskin check: d/d(theta_c) of the surrogate equals the plain loss
    gradient evaluated at the inner maximizer.

    The surrogate is re-solved for every perturbed classifier entry and the
    central difference is compared against the analytic outer product
    z* (p(z*) - onehot(y)).  Smooth activations assumed.
    """
    lt = l_theta(net.theta_c)
    if gamma <= lt:
        raise CurvatureError(f"need gamma > L(theta): gamma={gamma}, L={lt}")
    z0 = features(net, example.x)
    y = example.y

    def phi(theta_c):
        res = maximize_z_exact(SoftmaxLoss(theta_c, y), z0, gamma, tol=inner_tol)
        return res.phi

    base = maximize_z_exact(SoftmaxLoss(net.theta_c, y), z0, gamma, tol=inner_tol)
    z_star = base.z_star
    probs_star = softmax_probs(net.theta_c, z_star)
    onehot = np.zeros(net.n_classes)
    onehot[y] = 1.0
    analytic = np.outer(z_star, probs_star - onehot)

    fd = np.empty_like(analytic)
    for i in range(analytic.shape[0]):
        for j in range(analytic.shape[1]):
            bumped = net.theta_c.copy()
            bumped[i, j] += fd_step
            hi = phi(bumped)
            bumped[i, j] -= 2.0 * fd_step
            lo = phi(bumped)
            fd[i, j] = (hi - lo) / (2.0 * fd_step)

    denom = max(float(np.linalg.norm(fd)), 1e-300)
    rel_err = float(np.linalg.norm(analytic - fd)) / denom
    return {
        "check": "envelope_gradient",
        "gamma": float(gamma),
        "rel_err": rel_err,
        "grad_norm": float(np.linalg.norm(fd)),
        "phi": base.phi,
        "passed": bool(rel_err <= 1e-4),
    }
