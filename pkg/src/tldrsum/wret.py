"""Wasserstein flow encoder for the audio-text stream.

A one-block transformer encodes the sequence; its mean-pooled state
parameterizes a Gaussian posterior. The sampled latent is transported through
a stack of planar flows (closed-form log-determinants), regularized toward a
standard-normal prior with a Gaussian-kernel MMD plus a KLD / log-det
correction, and decoded by a small generator whose output conditions the
per-position states handed to fusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Stream
from . import tensor as tt
from .tensor import Tensor
from .layers import DenseBlock, Linear

INVERTIBILITY_MARGIN = -1.0 + 1e-6


# ---------------------------------------------------------------------------
# latent geometry


class RiemannianMetric:
    """Position-dependent inner-product matrix G(z); identity by default."""

    def __init__(self, g=None):
        self._g = g

    def matrix(self, z: np.ndarray) -> np.ndarray | None:
        """None means the identity metric (handled exactly, no multiply)."""
        if self._g is None:
            return None
        return np.asarray(self._g(z), dtype=np.float64)


def riemannian_inner(u, v, metric: RiemannianMetric, z) -> float:
    """<u, v>_G = u^T G(z) v. Plain dot product under the identity metric."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise tt.ShapeError(f"riemannian_inner vector shapes disagree: {u.shape} vs {v.shape}")
    g = metric.matrix(np.asarray(z, dtype=np.float64))
    if g is None:
        return float(np.dot(u, v))
    if g.shape != (u.shape[0], u.shape[0]) or not np.allclose(g, g.T, atol=1e-12):
        raise tt.NumericError("metric matrix is not symmetric")
    try:
        np.linalg.cholesky(g)
    except np.linalg.LinAlgError:
        raise tt.NumericError("metric matrix is not positive definite") from None
    return float(np.dot(u, g @ v))


# ---------------------------------------------------------------------------
# planar flows


class FlowLayer:
    """Planar flow f(z) = z + u * tanh(w.z + b)."""

    def __init__(self, stream: Stream, d_z: int):
        self.u = tt.gaussian_param(stream.derive("u"), (d_z,))
        self.w = tt.gaussian_param(stream.derive("w"), (d_z,))
        self.b = tt.zeros((1,), requires_grad=True)
        self.enforce_invertible()

    def enforce_invertible(self) -> None:
        """Project u so w.u >= -1 + 1e-6 (softplus reparameterization).

        Called after construction and after every optimizer update; a no-op
        while the constraint already holds.
        """
        w = self.w.data
        wu = float(w @ self.u.data)
        if wu >= INVERTIBILITY_MARGIN:
            return
        wnorm = float(w @ w)
        if wnorm == 0.0:
            return
        target = INVERTIBILITY_MARGIN + np.log1p(np.exp(wu))
        self.u.data = self.u.data + (target - wu) * w / wnorm

    def invert(self, y: np.ndarray, tol: float = 1e-14) -> np.ndarray:
        """Numerical inverse: bisection on the scalar tanh argument."""
        w = self.w.data
        u = self.u.data
        b = float(self.b.data[0])
        wu = float(w @ u)
        rhs = float(w @ y) + b
        # g(t) = t + wu*tanh(t) - rhs is strictly increasing under the constraint
        span = abs(rhs) + abs(wu) + 1.0
        lo, hi = -span, span
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid + wu * np.tanh(mid) - rhs < 0.0:
                lo = mid
            else:
                hi = mid
            if hi - lo < tol:
                break
        t = 0.5 * (lo + hi)
        return y - u * np.tanh(t)

    def named(self, prefix: str):
        yield f"{prefix}.u", self.u
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class FlowStack:
    def __init__(self, stream: Stream, d_z: int, depth: int = 4):
        self.layers = [FlowLayer(stream.derive("layer", k), d_z) for k in range(depth)]

    def enforce_invertible(self) -> None:
        for layer in self.layers:
            layer.enforce_invertible()

    def invert(self, y: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            y = layer.invert(y)
        return y

    def named(self, prefix: str):
        for k, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}.f{k}")


def apply_flow(stack: FlowStack, z: Tensor) -> tuple[Tensor, Tensor]:
    """Compose the stack over z; returns (z_prime, summed log|det Jacobian|).

    Per layer the determinant is 1 + (u.w)(1 - tanh^2(w.z + b)), positive
    under the invertibility constraint; magnitudes below 1e-12 abort.
    """
    log_det = tt.scalar(0.0)
    for layer in stack.layers:
        t = tt.add(tt.vdot(layer.w, z), layer.b)
        h = tt.tanh(t)
        one_minus_h2 = tt.shift(tt.scale(tt.mul(h, h), -1.0), 1.0)
        det = tt.shift(tt.mul(tt.vdot(layer.u, layer.w), one_minus_h2), 1.0)
        if abs(det.item()) < 1e-12:
            raise tt.NumericError("flow Jacobian determinant vanished")
        log_det = tt.add(log_det, tt.log(det))
        z = tt.add(z, tt.smul(layer.u, h))
    return z, log_det


# ---------------------------------------------------------------------------
# posterior + latent state


@dataclass
class LatentState:
    mean: Tensor
    logvar: Tensor
    z: Tensor
    states: Tensor        # encoder last-layer per-position states [T x d]
    pooled: Tensor        # mean-pooled states [d]
    z_prime: Tensor | None = None
    log_det: Tensor | None = None


class WretParams:
    def __init__(self, stream: Stream, d: int, d_z: int, n_heads: int = 8,
                 flow_depth: int = 4, ffn_mult: int = 4):
        self.d = d
        self.d_z = d_z
        self.block = DenseBlock(stream.derive("block"), d, n_heads, ffn_mult)
        self.w_mu = Linear(stream.derive("mu"), d, d_z)
        self.w_lv = Linear(stream.derive("lv"), d, d_z)
        self.flows = FlowStack(stream.derive("flow"), d_z)
        self.gen = Generator(stream.derive("gen"), d_z, d)
        self.ff = Linear(stream.derive("ff"), d, d)

    def named(self, prefix: str):
        yield from self.block.named(f"{prefix}.block")
        yield from self.w_mu.named(f"{prefix}.mu")
        yield from self.w_lv.named(f"{prefix}.lv")
        yield from self.flows.named(f"{prefix}.flow")
        yield from self.gen.named(f"{prefix}.gen")
        yield from self.ff.named(f"{prefix}.ff")


class Generator:
    """Latent-to-feature reconstruction map: two-layer ReLU net d_z -> d."""

    def __init__(self, stream: Stream, d_z: int, d: int):
        self.lin1 = Linear(stream.derive("lin1"), d_z, d)
        self.lin2 = Linear(stream.derive("lin2"), d, d)

    def apply(self, z: Tensor) -> Tensor:
        return self.lin2.apply_vec(tt.relu(self.lin1.apply_vec(z)))

    def named(self, prefix: str):
        yield from self.lin1.named(f"{prefix}.lin1")
        yield from self.lin2.named(f"{prefix}.lin2")


def encode_posterior(params: WretParams, x_seq: Tensor, stream: Stream,
                     mask: np.ndarray | None = None) -> LatentState:
    """Run the encoder block and sample z = mean + exp(logvar/2) * eps.

    logvar is clamped to [-8, 8]; eps comes from `stream`, so a fixed stream
    reproduces z bit-identically.
    """
    if x_seq.shape[0] < 1:
        raise tt.ShapeError("encode_posterior on empty sequence")
    states = params.block.apply(x_seq, mask)
    pooled = tt.mean_rows(states)
    mean = params.w_mu.apply_vec(pooled)
    logvar = tt.clip(params.w_lv.apply_vec(pooled), -8.0, 8.0)
    eps = Tensor(stream.normal(params.d_z))
    z = tt.add(mean, tt.mul(tt.exp(tt.scale(logvar, 0.5)), eps))
    return LatentState(mean=mean, logvar=logvar, z=z, states=states, pooled=pooled)


def run_latent(params: WretParams, x_seq: Tensor, stream: Stream,
               mask: np.ndarray | None = None) -> LatentState:
    state = encode_posterior(params, x_seq, stream, mask)
    state.z_prime, state.log_det = apply_flow(params.flows, state.z)
    return state


def wret_encode(params: WretParams, x_seq: Tensor, stream: Stream,
                mask: np.ndarray | None = None) -> tuple[Tensor, LatentState]:
    """Stream representation for fusion: FF(states) + G(z') broadcast-added."""
    state = run_latent(params, x_seq, stream, mask)
    gen_out = params.gen.apply(state.z_prime)
    out = tt.add_bias(params.ff.apply(state.states), gen_out)
    return out, state


# ---------------------------------------------------------------------------
# divergences


def mmd(samples_q: Tensor, samples_p: Tensor) -> Tensor:
    """Biased V-statistic MMD with Gaussian kernel k(a,b) = exp(-||a-b||^2).

    Exactly zero on identical sample sets; needs at least two samples a side.
    """
    if samples_q.data.ndim != 2 or samples_p.data.ndim != 2:
        raise tt.ShapeError("mmd expects rank-2 sample matrices")
    m = samples_q.shape[0]
    if samples_p.shape[0] != m:
        raise tt.ShapeError(f"mmd sample counts disagree: {m} vs {samples_p.shape[0]}")
    if m < 2:
        raise tt.ShapeError("mmd needs at least 2 samples per side")

    def kernel_mean(a: Tensor, b: Tensor) -> Tensor:
        sq_a = tt.sqnorm_rows(a)
        sq_b = tt.sqnorm_rows(b)
        dist = tt.add_colvec(tt.add_bias(tt.scale(tt.matmul(a, tt.transpose(b)), -2.0), sq_b), sq_a)
        return tt.scale(tt.sum_all(tt.exp(tt.scale(dist, -1.0))), 1.0 / (m * m))

    qq = kernel_mean(samples_q, samples_q)
    pp = kernel_mean(samples_p, samples_p)
    qp = kernel_mean(samples_q, samples_p)
    return tt.sub(tt.add(qq, pp), tt.scale(qp, 2.0))


def kld_gaussian(mean: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)) = 0.5 sum(exp(lv) + mean^2 - 1 - lv)."""
    inner = tt.sub(tt.add(tt.exp(logvar), tt.mul(mean, mean)), tt.shift(logvar, 1.0))
    return tt.scale(tt.sum_all(inner), 0.5)


def wret_objective(x_pooled, states, params: WretParams, lam: float, alpha: float,
                   prior_samples: Tensor):
    """loss = rec + lam*MMD(z', prior) + alpha*(KLD - log_det), plus components.

    `x_pooled` / `states` are a single pooled vector + LatentState or lists of
    them (a batch). rec is the MSE between each pooled representation and the
    generator output G(z'); MMD runs on the batch of transported latents
    against `prior_samples` and is skipped (zero) for single-sample batches,
    since the V-statistic needs two points a side.

    Returns (loss, components) where components maps rec/mmd/kld/logdet to
    floats; the loss tensor is composed exactly as
    rec + (lam*mmd + alpha*(kld - logdet)).
    """
    if lam < 0 or alpha < 0:
        raise ValueError(f"regularizer weights must be non-negative, got lam={lam} alpha={alpha}")
    if isinstance(states, LatentState):
        states = [states]
        x_pooled = [x_pooled]
    m = len(states)
    d = x_pooled[0].shape[0]

    rec = None
    kld = None
    logdet = None
    for x_i, st in zip(x_pooled, states):
        diff = tt.sub(x_i, params.gen.apply(st.z_prime))
        r = tt.scale(tt.vdot(diff, diff), 1.0 / d)
        k = kld_gaussian(st.mean, st.logvar)
        rec = r if rec is None else tt.add(rec, r)
        kld = k if kld is None else tt.add(kld, k)
        logdet = st.log_det if logdet is None else tt.add(logdet, st.log_det)
    rec = tt.scale(rec, 1.0 / m)
    kld = tt.scale(kld, 1.0 / m)
    logdet = tt.scale(logdet, 1.0 / m)

    if m >= 2:
        zp = tt.concat_rows([tt.reshape(st.z_prime, (1, params.d_z)) for st in states])
        mmd_term = mmd(zp, prior_samples)
    else:
        mmd_term = tt.scalar(0.0)

    loss = tt.add(rec, tt.add(tt.scale(mmd_term, lam), tt.scale(tt.sub(kld, logdet), alpha)))
    components = {
        "rec": rec.item(),
        "mmd": mmd_term.item(),
        "kld": kld.item(),
        "logdet": logdet.item(),
    }
    for name, value in components.items():
        if not np.isfinite(value):
            raise tt.NumericError(f"non-finite wret component {name}={value}")
    return loss, components
