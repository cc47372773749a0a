"""Denoisers D(x, sigma): the exact Gaussian-mixture posterior mean and a small MLP.

Both expose the same surface used by the samplers and optimizers:

* ``__call__(x, sigma)`` -> denoised batch, ``x`` of shape (B, d) or (d,)
* ``sigma_grad(x, sigma)`` -> partial derivative in sigma with ``x`` held fixed
* ``vjp(x, sigma, g)`` -> ``(g^T dD/dx, g^T dD/dsigma)``

``sigma`` may be a scalar or a per-row array of shape (B,).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from fewstep.core import InvalidParameterError


def _as_batch(x, sigma):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],))
    if np.any(sig <= 0) or not np.all(np.isfinite(sig)):
        raise InvalidParameterError("sigma must be positive and finite")
    return x, sig, single


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Isotropic Gaussian mixture: weights (K,), means (K, d), scales (K,)."""

    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        s = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        if not (w.size == mu.shape[0] == s.size):
            raise InvalidParameterError("weights, means and scales disagree on component count")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidParameterError("mixture weights must be nonnegative and sum to 1")
        if np.any(s <= 0):
            raise InvalidParameterError("component scales must be positive")
        for name, arr in (("weights", w), ("means", mu), ("scales", s)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @property
    def n_components(self) -> int:
        return int(self.weights.size)

    def data_std(self) -> float:
        """Root mean per-coordinate standard deviation of the mixture."""
        mean = self.weights @ self.means
        second = self.weights @ (np.sum(self.means**2, axis=1) + self.dim * self.scales**2)
        return float(np.sqrt((second - mean @ mean) / self.dim))

    def log_density(self, y, sigma: float = 0.0) -> np.ndarray:
        """log p_sigma(y) of the mixture convolved with N(0, sigma^2 I)."""
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        var = self.scales**2 + sigma**2
        r2 = np.sum((y[:, None, :] - self.means[None]) ** 2, axis=-1)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        terms = logw - 0.5 * self.dim * np.log(2 * np.pi * var) - r2 / (2 * var)
        return logsumexp(terms, axis=1)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "scales": self.scales.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianMixture":
        unknown = set(doc) - {"weights", "means", "scales"}
        if unknown:
            raise InvalidParameterError(f"unknown mixture keys: {sorted(unknown)}")
        return cls(doc["weights"], doc["means"], doc["scales"])


def gmm_sample(gmm: GaussianMixture, count: int, rng: np.random.Generator, return_labels=False):
    if count < 1:
        raise InvalidParameterError("count must be at least 1")
    labels = rng.choice(gmm.n_components, size=count, p=gmm.weights)
    noise = rng.standard_normal((count, gmm.dim))
    x = gmm.means[labels] + gmm.scales[labels, None] * noise
    return (x, labels) if return_labels else x


def two_gaussians(separation: float = 2.0, scale: float = 0.5, dim: int = 2) -> GaussianMixture:
    """Equal-weight pair of components at +-separation along the first axis."""
    mu = np.zeros((2, dim))
    mu[0, 0], mu[1, 0] = separation, -separation
    return GaussianMixture([0.5, 0.5], mu, [scale, scale])


def single_gaussian(mean=0.0, scale: float = 1.0, dim: int = 1) -> GaussianMixture:
    mu = np.broadcast_to(np.asarray(mean, dtype=np.float64), (dim,))
    return GaussianMixture([1.0], mu[None, :], [scale])


class GMMDenoiser:
    """Exact posterior mean E[x | x + sigma * eps = y] for a GaussianMixture."""

    kind = "analytic-gmm"

    def __init__(self, gmm: GaussianMixture):
        self.gmm = gmm

    @property
    def dim(self) -> int:
        return self.gmm.dim

    def _parts(self, y, sig):
        g = self.gmm
        var = g.scales[None, :] ** 2 + sig[:, None] ** 2  # (B, K)
        diff = y[:, None, :] - g.means[None]  # (B, K, d)
        r2 = np.sum(diff**2, axis=-1)
        with np.errstate(divide="ignore"):
            logpi = np.log(g.weights)
        # log-sum-exp normalisation keeps this finite at large sigma
        logits = logpi - 0.5 * g.dim * np.log(var) - r2 / (2 * var)
        post = softmax(logits, axis=1)
        shrink = g.scales[None, :] ** 2 / var
        cond = g.means[None] + shrink[..., None] * diff
        return var, diff, r2, post, shrink, cond

    def posterior_weights(self, y, sigma) -> np.ndarray:
        y, sig, single = _as_batch(y, sigma)
        post = self._parts(y, sig)[3]
        return post[0] if single else post

    def __call__(self, y, sigma) -> np.ndarray:
        y, sig, single = _as_batch(y, sigma)
        _, _, _, post, _, cond = self._parts(y, sig)
        out = np.einsum("bk,bkd->bd", post, cond)
        return out[0] if single else out

    def score(self, y, sigma) -> np.ndarray:
        """grad_y log p_sigma(y)."""
        y, sig, single = _as_batch(y, sigma)
        var, diff, _, post, _, _ = self._parts(y, sig)
        out = -np.einsum("bk,bkd->bd", post / var, diff)
        return out[0] if single else out

    def _dsigma(self, y, sig, parts):
        var, diff, r2, post, shrink, cond = parts
        dvar = 2 * sig[:, None]
        dshrink = -shrink * dvar / var
        dlogit = -0.5 * self.gmm.dim * dvar / var + r2 * dvar / (2 * var**2)
        dlogit = dlogit - np.sum(post * dlogit, axis=1, keepdims=True)
        return np.einsum("bk,bkd->bd", post * dshrink, diff) + np.einsum(
            "bk,bkd->bd", post * dlogit, cond
        )

    def sigma_grad(self, y, sigma) -> np.ndarray:
        y, sig, single = _as_batch(y, sigma)
        out = self._dsigma(y, sig, self._parts(y, sig))
        return out[0] if single else out

    def vjp(self, y, sigma, g):
        y, sig, single = _as_batch(y, sigma)
        g = np.atleast_2d(np.asarray(g, dtype=np.float64))
        parts = self._parts(y, sig)
        var, diff, _, post, shrink, cond = parts
        # J = sum_k w_k a_k I + sum_k w_k m_k (grad log w_k)^T
        gk = -diff / var[..., None]
        gbar = np.einsum("bk,bkd->bd", post, gk)
        proj = np.einsum("bd,bkd->bk", g, cond)
        gx = np.sum(post * shrink, axis=1)[:, None] * g + np.einsum(
            "bk,bkd->bd", post * proj, gk - gbar[:, None, :]
        )
        gs = np.sum(g * self._dsigma(y, sig, parts), axis=1)
        return (gx[0], gs[0]) if single else (gx, gs)


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a, z: 1.0 - z**2),
    "relu": (lambda a: np.maximum(a, 0.0), lambda a, z: (a > 0).astype(a.dtype)),
    "silu": (
        lambda a: a / (1.0 + np.exp(-a)),
        lambda a, z: (s := 1.0 / (1.0 + np.exp(-a))) * (1.0 + a * (1.0 - s)),
    ),
}


@dataclass
class MlpSpec:
    dim: int = 2
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    # EDM-style input/skip/output scaling; False gives the raw D(x, sigma) network
    precondition: bool = True
    sigma_data: float = 0.5
    init_scale: float = 1.0

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise InvalidParameterError(f"unknown activation {self.activation!r}")
        if self.dim < 1 or any(int(h) < 1 for h in self.hidden):
            raise InvalidParameterError("layer widths must be positive")
        if self.sigma_data <= 0:
            raise InvalidParameterError("sigma_data must be positive")
        self.hidden = [int(h) for h in self.hidden]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        widths = [self.dim + 1, *self.hidden, self.dim]
        out = []
        for a, b in zip(widths[:-1], widths[1:]):
            out += [(a, b), (b,)]
        return out

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpSpec":
        known = {"dim", "hidden", "activation", "precondition", "sigma_data", "init_scale"}
        unknown = set(doc) - known
        if unknown:
            raise InvalidParameterError(f"unknown MLP keys: {sorted(unknown)}")
        return cls(**doc)


class MlpDenoiser:
    """Fully connected D_theta(x, sigma) with a log-sigma input feature.

    Parameters live in one flat float64 vector ``theta``; the per-layer arrays are
    views into it, so optimizers can update ``theta`` in place.
    """

    kind = "trainable-mlp"

    def __init__(self, spec: MlpSpec, theta=None, rng: np.random.Generator | None = None):
        self.spec = spec
        if theta is None:
            theta = self.init_params(spec, rng if rng is not None else np.random.default_rng(0))
        theta = np.array(theta, dtype=np.float64)
        if theta.shape != (spec.n_params,):
            raise InvalidParameterError(f"expected {spec.n_params} parameters, got {theta.shape}")
        self.theta = theta
        self._act, self._dact = _ACTIVATIONS[spec.activation]

    @staticmethod
    def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
        parts = []
        for shape in spec.shapes:
            if len(shape) == 2:
                std = spec.init_scale * np.sqrt(2.0 / (shape[0] + shape[1]))
                parts.append(rng.normal(0.0, std, size=shape).ravel())
            else:
                parts.append(np.zeros(shape))
        return np.concatenate(parts)

    @property
    def dim(self) -> int:
        return self.spec.dim

    def layers(self, theta=None):
        theta = self.theta if theta is None else theta
        out, i = [], 0
        for shape in self.spec.shapes:
            n = int(np.prod(shape))
            out.append(theta[i : i + n].reshape(shape))
            i += n
        return list(zip(out[0::2], out[1::2]))

    def copy(self) -> "MlpDenoiser":
        return MlpDenoiser(self.spec, self.theta.copy())

    # -- preconditioning coefficients and their sigma derivatives
    def _coeffs(self, sig):
        if not self.spec.precondition:
            one, zero = np.ones_like(sig), np.zeros_like(sig)
            return (zero, one, one, np.log(sig)), (zero, zero, zero, 1.0 / sig)
        sd = self.spec.sigma_data
        q = sig**2 + sd**2
        c_skip = sd**2 / q
        c_out = sig * sd / np.sqrt(q)
        c_in = 1.0 / np.sqrt(q)
        c_noise = np.log(sig) / 4.0
        d_skip = -2.0 * sig * sd**2 / q**2
        d_out = sd**3 / q**1.5
        d_in = -sig / q**1.5
        d_noise = 0.25 / sig
        return (c_skip, c_out, c_in, c_noise), (d_skip, d_out, d_in, d_noise)

    def _forward(self, x, sig):
        (c_skip, c_out, c_in, c_noise), _ = self._coeffs(sig)
        h = np.concatenate([c_in[:, None] * x, c_noise[:, None]], axis=1)
        acts, pre = [h], []
        layers = self.layers()
        for W, b in layers[:-1]:
            a = h @ W + b
            h = self._act(a)
            pre.append(a)
            acts.append(h)
        W, b = layers[-1]
        F = h @ W + b
        D = c_skip[:, None] * x + c_out[:, None] * F
        return D, (acts, pre, F)

    def __call__(self, x, sigma) -> np.ndarray:
        x, sig, single = _as_batch(x, sigma)
        D = self._forward(x, sig)[0]
        return D[0] if single else D

    def sigma_grad(self, x, sigma) -> np.ndarray:
        x, sig, single = _as_batch(x, sigma)
        (c_skip, c_out, c_in, c_noise), (d_skip, d_out, d_in, d_noise) = self._coeffs(sig)
        _, (acts, pre, F) = self._forward(x, sig)
        # forward-mode tangent through the network
        dh = np.concatenate([d_in[:, None] * x, d_noise[:, None]], axis=1)
        layers = self.layers()
        for (W, _), a, z in zip(layers[:-1], pre, acts[1:]):
            dh = self._dact(a, z) * (dh @ W)
        dF = dh @ layers[-1][0]
        out = d_skip[:, None] * x + d_out[:, None] * F + c_out[:, None] * dF
        return out[0] if single else out

    def _backward(self, x, sig, g, cache):
        (c_skip, c_out, c_in, c_noise), (d_skip, d_out, d_in, d_noise) = self._coeffs(sig)
        acts, pre, F = cache
        layers = self.layers()
        grads = []
        gh = c_out[:, None] * g
        W, _ = layers[-1]
        grads.append((acts[-1].T @ gh, gh.sum(axis=0)))
        gh = gh @ W.T
        for i in range(len(layers) - 2, -1, -1):
            W, _ = layers[i]
            ga = gh * self._dact(pre[i], acts[i + 1])
            grads.append((acts[i].T @ ga, ga.sum(axis=0)))
            gh = ga @ W.T
        grads.reverse()
        gtheta = np.concatenate([p.ravel() for pair in grads for p in pair])
        d = self.dim
        gx = c_skip[:, None] * g + c_in[:, None] * gh[:, :d]
        gs = (
            d_skip * np.sum(g * x, axis=1)
            + d_out * np.sum(g * F, axis=1)
            + d_in * np.sum(gh[:, :d] * x, axis=1)
            + d_noise * gh[:, d]
        )
        return gtheta, gx, gs

    def vjp(self, x, sigma, g):
        x, sig, single = _as_batch(x, sigma)
        g = np.atleast_2d(np.asarray(g, dtype=np.float64))
        _, cache = self._forward(x, sig)
        _, gx, gs = self._backward(x, sig, g, cache)
        return (gx[0], gs[0]) if single else (gx, gs)

    def loss_and_grad(self, x_noisy, sigma, target, weight=1.0):
        """Batch mean of ``weight * ||D(x_noisy, sigma) - target||^2`` and its theta-gradient."""
        x, sig, _ = _as_batch(x_noisy, sigma)
        target = np.atleast_2d(np.asarray(target, dtype=np.float64))
        w = np.broadcast_to(np.asarray(weight, dtype=np.float64), (x.shape[0],))
        D, cache = self._forward(x, sig)
        resid = D - target
        per = w * np.sum(resid**2, axis=1)
        g = (2.0 / x.shape[0]) * w[:, None] * resid
        gtheta = self._backward(x, sig, g, cache)[0]
        return float(per.mean()), gtheta

    # -- persistence: flat little-endian float64 blob plus a JSON sidecar
    def save(self, path) -> None:
        path = Path(path)
        self.theta.astype("<f8").tofile(path)
        sidecar = {
            "format_version": 1,
            "dtype": "<f8",
            "n_params": self.spec.n_params,
            "shapes": [list(s) for s in self.spec.shapes],
            "spec": asdict(self.spec),
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "MlpDenoiser":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        spec = MlpSpec.from_dict(sidecar["spec"])
        theta = np.fromfile(path, dtype=sidecar["dtype"]).astype(np.float64)
        if [list(s) for s in spec.shapes] != sidecar["shapes"]:
            raise InvalidParameterError("parameter sidecar shapes do not match its spec")
        return cls(spec, theta)


def denoise(h, x_noisy, sigma):
    return h(x_noisy, sigma)


def denoise_sigma_grad(h, x_noisy, sigma):
    return h.sigma_grad(x_noisy, sigma)


def mlp_forward_backward(h, x_noisy, sigma, target, weight=1.0):
    if getattr(h, "kind", None) != "trainable-mlp":
        raise TypeError("mlp_forward_backward needs a trainable denoiser")
    return h.loss_and_grad(x_noisy, sigma, target, weight)
