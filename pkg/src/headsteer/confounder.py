"""Latent factor models over concatenated head activations.

The confounder proxy for a sample is the posterior mean of the latent factor
given its activations. Two model kinds are available:

* ``"ppca"`` (default): probabilistic PCA fit in closed form from the
  eigendecomposition of the sample covariance; the posterior mean is exact.
* ``"vae"``: a two-layer MLP variational autoencoder with a diagonal Gaussian
  posterior; the encoder mean network is the proxy.

Inputs are standardized per dimension before fitting (constant dimensions
keep unit scale).
"""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import DimensionMismatch, InsufficientSamples, NonConvergence, ValidationError

log = logging.getLogger(__name__)


def default_latent_dim(D: int) -> int:
    return 32 if D >= 64 else max(1, D // 2)


@dataclass
class FactorModel:
    kind: str
    latent_dim: int
    mean: np.ndarray
    scale: np.ndarray
    W: np.ndarray | None = None  # PPCA loading (D, d_c), standardized units
    noise_var: float | None = None  # PPCA sigma^2_x
    vae: MlpVae | None = field(default=None, repr=False)
    seed: int = 0
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def observed_dim(self) -> int:
        return len(self.mean)

    def standardize(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale

    def posterior_map(self) -> tuple[np.ndarray, np.ndarray]:
        """PPCA encode as ``c = A @ (x - mean)``; returns (A, mean)."""
        if self.kind != "ppca":
            raise ValidationError("posterior_map is PPCA only")
        W, s2 = self.W, self.noise_var
        M = W.T @ W + s2 * np.eye(self.latent_dim)
        A = np.linalg.solve(M, W.T) / self.scale[None, :]
        return A, self.mean

    def reconstruct(self, X) -> np.ndarray:
        """PPCA: project onto the principal subspace; VAE: decode the encoder mean."""
        X = np.atleast_2d(X)
        if self.kind == "ppca":
            c = encode(self, X)
            W, s2 = self.W, self.noise_var
            M = W.T @ W + s2 * np.eye(self.latent_dim)
            Xs = c @ np.linalg.solve(W.T @ W, M).T @ W.T
        else:
            with torch.no_grad():
                mu, _ = self.vae.encode(torch.as_tensor(self.standardize(X)))
                Xs = self.vae.decode(mu).numpy()
        return Xs * self.scale + self.mean


class MlpVae(nn.Module):
    def __init__(self, D: int, d_c: int, hidden: int, gen: torch.Generator):
        super().__init__()

        def lin(i, o):
            layer = nn.Linear(i, o, dtype=torch.float64)
            with torch.no_grad():
                layer.weight.copy_(torch.randn(o, i, generator=gen, dtype=torch.float64) / math.sqrt(i))
                layer.bias.zero_()
            return layer

        self.enc = nn.Sequential(lin(D, hidden), nn.Tanh(), lin(hidden, hidden), nn.Tanh())
        self.enc_mu = lin(hidden, d_c)
        self.enc_logvar = lin(hidden, d_c)
        self.dec = nn.Sequential(lin(d_c, hidden), nn.Tanh(), lin(hidden, hidden), nn.Tanh(), lin(hidden, D))
        self.log_noise = nn.Parameter(torch.zeros((), dtype=torch.float64))

    def encode(self, x):
        h = self.enc(x)
        return self.enc_mu(h), self.enc_logvar(h)

    def decode(self, c):
        return self.dec(c)

    def elbo(self, x, eps):
        mu, logvar = self.encode(x)
        c = mu + torch.exp(0.5 * logvar) * eps
        xr = self.decode(c)
        D = x.shape[1]
        nll = 0.5 * ((x - xr) ** 2).sum(1) * torch.exp(-self.log_noise) \
            + 0.5 * D * (self.log_noise + math.log(2 * math.pi))
        kl = 0.5 * (mu ** 2 + torch.exp(logvar) - 1.0 - logvar).sum(1)
        return (-nll - kl).mean()


def _fit_ppca(Xs: np.ndarray, d_c: int):
    n, D = Xs.shape
    S = Xs.T @ Xs / n
    evals, evecs = np.linalg.eigh(S)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    noise = float(evals[d_c:].mean())
    floor = 1e-14 * max(float(evals.sum()) / D, 1e-300)
    noise = max(noise, floor)
    W = evecs[:, :d_c] * np.sqrt(np.clip(evals[:d_c] - noise, 0.0, None))
    # A zero column would leave W rank-deficient; give it the floor magnitude.
    tiny = np.linalg.norm(W, axis=0) == 0
    W[:, tiny] = evecs[:, :d_c][:, tiny] * math.sqrt(floor)
    return W, noise


def fit_factor_model(X, latent_dim: int | None = None, kind: str = "ppca", seed: int = 0,
                     standardize: bool = True, hidden: int = 64, max_epochs: int = 200,
                     lr: float = 1e-2, tol: float = 1e-5, patience: int = 10) -> FactorModel:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch("X must be a matrix")
    n, D = X.shape
    d_c = default_latent_dim(D) if latent_dim is None else int(latent_dim)
    if d_c < 1:
        raise ValidationError("latent_dim must be >= 1")
    if n <= d_c:
        raise InsufficientSamples(f"need more samples ({n}) than latent dims ({d_c})")
    if d_c >= D:
        raise ValidationError(f"latent_dim {d_c} must be below observed dim {D}")
    mean = X.mean(0)
    if standardize:
        scale = X.std(0)
        scale[scale == 0] = 1.0
    else:
        scale = np.ones(D)
    Xs = (X - mean) / scale
    if kind == "ppca":
        W, noise = _fit_ppca(Xs, d_c)
        return FactorModel("ppca", d_c, mean, scale, W=W, noise_var=noise, seed=seed)
    if kind != "vae":
        raise ValidationError(f"unknown factor model kind {kind!r}")

    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    vae = MlpVae(D, d_c, hidden, gen)
    opt = torch.optim.Adam(vae.parameters(), lr=lr)
    x = torch.as_tensor(Xs)
    history: list[float] = []
    for ep in range(max_epochs):
        eps = torch.randn(n, d_c, generator=gen, dtype=torch.float64)
        loss = -vae.elbo(x, eps)
        if not torch.isfinite(loss):
            raise NonConvergence(f"ELBO became non-finite at epoch {ep}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(-loss.item())
        if len(history) > patience and history[-1] - history[-1 - patience] < tol:
            break
    vae.eval()
    return FactorModel("vae", d_c, mean, scale, vae=vae, seed=seed, history=history)


def encode(model: FactorModel, x) -> np.ndarray:
    """Posterior mean of the latent factor; accepts one vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.observed_dim:
        raise DimensionMismatch(f"expected {model.observed_dim} dims, got {X.shape[1]}")
    if model.kind == "ppca":
        A, mu = model.posterior_map()
        C = (X - mu) @ A.T
    else:
        with torch.no_grad():
            C = model.vae.encode(torch.as_tensor(model.standardize(X)))[0].numpy()
    return C[0] if single else C


def encode_torch(model: FactorModel, X: torch.Tensor) -> torch.Tensor:
    """Differentiable encode for use inside fine-tuning objectives."""
    if model.kind == "ppca":
        A, mu = model.posterior_map()
        return (X - torch.as_tensor(mu)) @ torch.as_tensor(A).T
    Xs = (X - torch.as_tensor(model.mean)) / torch.as_tensor(model.scale)
    return model.vae.encode(Xs)[0]


def to_bytes(model: FactorModel) -> bytes:
    """Serialized factor model (numpy ``.npz`` container) for the pipeline state."""
    buf = io.BytesIO()
    arrays = dict(kind=np.array(model.kind), latent_dim=np.array(model.latent_dim),
                  mean=model.mean, scale=model.scale, seed=np.array(model.seed))
    if model.kind == "ppca":
        arrays.update(W=model.W, noise_var=np.array(model.noise_var))
    else:
        for k, v in model.vae.state_dict().items():
            arrays["vae." + k] = v.numpy()
        arrays["hidden"] = np.array(model.vae.enc[0].out_features)
    np.savez(buf, **arrays)
    return buf.getvalue()


def from_bytes(raw: bytes) -> FactorModel:
    z = np.load(io.BytesIO(raw))
    kind = str(z["kind"])
    fm = FactorModel(kind, int(z["latent_dim"]), z["mean"], z["scale"], seed=int(z["seed"]))
    if kind == "ppca":
        fm.W, fm.noise_var = z["W"], float(z["noise_var"])
    else:
        vae = MlpVae(len(fm.mean), fm.latent_dim, int(z["hidden"]), torch.Generator())
        vae.load_state_dict({k[4:]: torch.as_tensor(z[k]) for k in z.files if k.startswith("vae.")})
        vae.eval()
        fm.vae = vae
    return fm
