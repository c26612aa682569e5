"""Variational autoencoder over pooled node features.

One network is shared by every (index, node, month) triple; that sharing is
the parameter-transfer step of the pipeline. The encoder emits a mean and a
log-variance; training draws z = mu + exp(logvar/2) * noise and minimizes

    squared error (continuous block) + KL(N(mu, sigma^2) || N(0, I))
    + binary cross-entropy (discrete block)

averaged over the batch. Inference returns the encoder mean, so embeddings
are deterministic. Everything is plain float64 numpy with hand-written
backpropagation; activations are tanh, the discrete head is a sigmoid and the
continuous head is linear.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingError, ValidationError
from .features import NodeFeatures

BCE_CLIP = 1e-7
CHECKPOINT_VERSION = "1"


@dataclass
class VaeConfig:
    embedding_dim: int = 5
    hidden: tuple[int, ...] = (96, 48, 24)
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 256
    epochs: int = 200
    patience: int = 20
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class VaeParams:
    """All weights plus the input standardization baked in at training time."""

    input_dim: int
    n_continuous: int
    d: int
    hidden: tuple[int, ...]
    enc_w: list[np.ndarray]
    enc_b: list[np.ndarray]
    w_mu: np.ndarray
    b_mu: np.ndarray
    w_logvar: np.ndarray
    b_logvar: np.ndarray
    dec_w: list[np.ndarray]
    dec_b: list[np.ndarray]
    w_out: np.ndarray
    b_out: np.ndarray
    cont_mean: np.ndarray
    cont_scale: np.ndarray
    seed: int = 0

    def weight_arrays(self) -> list[np.ndarray]:
        return (
            [a for pair in zip(self.enc_w, self.enc_b) for a in pair]
            + [self.w_mu, self.b_mu, self.w_logvar, self.b_logvar]
            + [a for pair in zip(self.dec_w, self.dec_b) for a in pair]
            + [self.w_out, self.b_out]
        )

    def n_parameters(self) -> int:
        return sum(a.size for a in self.weight_arrays())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weight_arrays()])

    def set_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for arr in self.weight_arrays():
            arr[...] = flat[offset : offset + arr.size].reshape(arr.shape)
            offset += arr.size

    def standardize(self, x: np.ndarray) -> np.ndarray:
        out = np.array(x, dtype=np.float64)
        nc = self.n_continuous
        out[..., :nc] = (out[..., :nc] - self.cont_mean) / self.cont_scale
        return out


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


def init_params(
    input_dim: int,
    n_continuous: int,
    config: VaeConfig,
    rng: np.random.Generator | None = None,
) -> VaeParams:
    if not 0 < n_continuous <= input_dim:
        raise ValidationError("n_continuous must lie in (0, input_dim]")
    rng = rng if rng is not None else np.random.default_rng(
        np.random.PCG64(config.seed)
    )
    sizes_enc = [input_dim, *config.hidden]
    sizes_dec = [config.embedding_dim, *reversed(config.hidden)]
    enc_w = [_glorot(rng, a, b) for a, b in zip(sizes_enc, sizes_enc[1:])]
    enc_b = [np.zeros(b) for b in sizes_enc[1:]]
    last = sizes_enc[-1]
    w_mu = _glorot(rng, last, config.embedding_dim)
    w_logvar = _glorot(rng, last, config.embedding_dim)
    dec_w = [_glorot(rng, a, b) for a, b in zip(sizes_dec, sizes_dec[1:])]
    dec_b = [np.zeros(b) for b in sizes_dec[1:]]
    w_out = _glorot(rng, sizes_dec[-1], input_dim)
    return VaeParams(
        input_dim=input_dim,
        n_continuous=n_continuous,
        d=config.embedding_dim,
        hidden=tuple(config.hidden),
        enc_w=enc_w,
        enc_b=enc_b,
        w_mu=w_mu,
        b_mu=np.zeros(config.embedding_dim),
        w_logvar=w_logvar,
        b_logvar=np.zeros(config.embedding_dim),
        dec_w=dec_w,
        dec_b=dec_b,
        w_out=w_out,
        b_out=np.zeros(input_dim),
        cont_mean=np.zeros(n_continuous),
        cont_scale=np.ones(n_continuous),
        seed=config.seed,
    )


def _encode(params: VaeParams, x: np.ndarray):
    h = x
    cache = [h]
    for w, b in zip(params.enc_w, params.enc_b):
        h = np.tanh(h @ w + b)
        cache.append(h)
    mu = h @ params.w_mu + params.b_mu
    logvar = h @ params.w_logvar + params.b_logvar
    return mu, logvar, cache


def _decode(params: VaeParams, z: np.ndarray):
    g = z
    cache = [g]
    for w, b in zip(params.dec_w, params.dec_b):
        g = np.tanh(g @ w + b)
        cache.append(g)
    out = g @ params.w_out + params.b_out
    nc = params.n_continuous
    y_cont = out[:, :nc]
    y_disc = _sigmoid(out[:, nc:])
    return y_cont, y_disc, cache


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _loss_terms(params: VaeParams, x, mu, logvar, y_cont, y_disc):
    nc = params.n_continuous
    x_cont, x_disc = x[:, :nc], x[:, nc:]
    recon = np.sum((x_cont - y_cont) ** 2, axis=1)
    kl = -0.5 * np.sum(1.0 + logvar - mu**2 - np.exp(logvar), axis=1)
    y_clip = np.clip(y_disc, BCE_CLIP, 1.0 - BCE_CLIP)
    bce = -np.sum(
        x_disc * np.log(y_clip) + (1.0 - x_disc) * np.log(1.0 - y_clip), axis=1
    )
    components = {
        "reconstruction_continuous": float(np.mean(recon)),
        "kl": float(np.mean(kl)),
        "reconstruction_discrete": float(np.mean(bce)),
    }
    total = components["reconstruction_continuous"] + components["kl"] + \
        components["reconstruction_discrete"]
    return total, components


def vae_loss(params: VaeParams, x: np.ndarray, noise: np.ndarray):
    """Mean loss over a batch plus its component breakdown.

    ``x`` must already be in model space (standardized continuous block);
    ``noise`` supplies the reparameterization draws, shape (batch, d).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if len(x) == 0:
        raise ValidationError("empty batch")
    if x.shape[1] != params.input_dim:
        raise ValidationError(
            f"feature layout mismatch: got {x.shape[1]} columns, model "
            f"expects {params.input_dim}"
        )
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    if noise.shape != (len(x), params.d):
        raise ValidationError("noise must have shape (batch, embedding_dim)")
    mu, logvar, _ = _encode(params, x)
    z = mu + np.exp(0.5 * logvar) * noise
    y_cont, y_disc, _ = _decode(params, z)
    total, components = _loss_terms(params, x, mu, logvar, y_cont, y_disc)
    if not np.isfinite(total):
        bad = [k for k, v in components.items() if not np.isfinite(v)]
        raise TrainingError(f"non-finite loss component(s): {', '.join(bad)}")
    return total, components


def vae_backward(params: VaeParams, x: np.ndarray, noise: np.ndarray):
    """Loss, components, and analytic gradients (same layout as the params)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    batch = len(x)
    nc = params.n_continuous

    mu, logvar, enc_cache = _encode(params, x)
    std = np.exp(0.5 * logvar)
    z = mu + std * noise
    y_cont, y_disc, dec_cache = _decode(params, z)
    total, components = _loss_terms(params, x, mu, logvar, y_cont, y_disc)
    if not np.isfinite(total):
        bad = [k for k, v in components.items() if not np.isfinite(v)]
        raise TrainingError(f"non-finite loss component(s): {', '.join(bad)}")

    grads = {
        "enc_w": [np.zeros_like(a) for a in params.enc_w],
        "enc_b": [np.zeros_like(a) for a in params.enc_b],
        "dec_w": [np.zeros_like(a) for a in params.dec_w],
        "dec_b": [np.zeros_like(a) for a in params.dec_b],
    }

    # output layer: squared error on the continuous head, clipped BCE on the
    # sigmoid head (the clip zeroes the gradient where it is active)
    d_out = np.empty((batch, params.input_dim))
    d_out[:, :nc] = 2.0 * (y_cont - x[:, :nc]) / batch
    active = (y_disc > BCE_CLIP) & (y_disc < 1.0 - BCE_CLIP)
    d_out[:, nc:] = np.where(active, y_disc - x[:, nc:], 0.0) / batch

    g_last = dec_cache[-1]
    grads["w_out"] = g_last.T @ d_out
    grads["b_out"] = d_out.sum(axis=0)
    d_h = d_out @ params.w_out.T
    for layer in range(len(params.dec_w) - 1, -1, -1):
        h_out = dec_cache[layer + 1]
        d_pre = d_h * (1.0 - h_out**2)
        grads["dec_w"][layer] = dec_cache[layer].T @ d_pre
        grads["dec_b"][layer] = d_pre.sum(axis=0)
        d_h = d_pre @ params.dec_w[layer].T
    d_z = d_h

    # reparameterization plus the closed-form KL term
    d_mu = d_z + mu / batch
    d_logvar = d_z * 0.5 * std * noise + 0.5 * (np.exp(logvar) - 1.0) / batch

    h_enc = enc_cache[-1]
    grads["w_mu"] = h_enc.T @ d_mu
    grads["b_mu"] = d_mu.sum(axis=0)
    grads["w_logvar"] = h_enc.T @ d_logvar
    grads["b_logvar"] = d_logvar.sum(axis=0)
    d_h = d_mu @ params.w_mu.T + d_logvar @ params.w_logvar.T
    for layer in range(len(params.enc_w) - 1, -1, -1):
        h_out = enc_cache[layer + 1]
        d_pre = d_h * (1.0 - h_out**2)
        grads["enc_w"][layer] = enc_cache[layer].T @ d_pre
        grads["enc_b"][layer] = d_pre.sum(axis=0)
        d_h = d_pre @ params.enc_w[layer].T
    return total, components, grads


def grad_arrays(params: VaeParams, grads: dict) -> list[np.ndarray]:
    """Gradient arrays in the same order as VaeParams.weight_arrays()."""
    return (
        [a for pair in zip(grads["enc_w"], grads["enc_b"]) for a in pair]
        + [grads["w_mu"], grads["b_mu"], grads["w_logvar"], grads["b_logvar"]]
        + [a for pair in zip(grads["dec_w"], grads["dec_b"]) for a in pair]
        + [grads["w_out"], grads["b_out"]]
    )


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    reconstruction_continuous: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    reconstruction_discrete: list[float] = field(default_factory=list)
    best_epoch: int = -1
    epochs_run: int = 0
    train_months: tuple[int, int] | None = None


def train_vae(
    features: np.ndarray,
    n_continuous: int,
    config: VaeConfig,
    train_months: tuple[int, int] | None = None,
) -> tuple[VaeParams, TrainReport]:
    """Fit the shared VAE on pooled raw feature vectors.

    Continuous columns are standardized with statistics of the training split
    only; the transform is stored in the returned params so inference applies
    it transparently. Fixed seed implies bit-identical output.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValidationError("training set must be a non-empty matrix")
    rng = np.random.default_rng(np.random.PCG64(config.seed))

    n = len(X)
    perm = rng.permutation(n)
    n_val = int(round(n * config.val_fraction))
    n_val = min(max(n_val, 0), n - 1)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    mean = X[train_idx, :n_continuous].mean(axis=0)
    std = X[train_idx, :n_continuous].std(axis=0)
    std = np.where(std > 0.0, std, 1.0)

    Xm = X.copy()
    Xm[:, :n_continuous] = (Xm[:, :n_continuous] - mean) / std
    X_train, X_val = Xm[train_idx], Xm[val_idx]

    params = init_params(X.shape[1], n_continuous, config, rng=rng)
    params.cont_mean = mean
    params.cont_scale = std

    velocity = [np.zeros_like(a) for a in params.weight_arrays()]
    report = TrainReport(train_months=train_months)
    best_val = np.inf
    best_params = None
    stale = 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(X_train))
        epoch_loss = 0.0
        epoch_comps = {"reconstruction_continuous": 0.0, "kl": 0.0,
                       "reconstruction_discrete": 0.0}
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            noise = rng.standard_normal((len(idx), params.d))
            try:
                loss, comps, grads = vae_backward(params, X_train[idx], noise)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
            for vel, arr, grad in zip(
                velocity, params.weight_arrays(), grad_arrays(params, grads)
            ):
                vel *= config.momentum
                vel -= config.learning_rate * grad
                arr += vel
            epoch_loss += loss * len(idx)
            for key in epoch_comps:
                epoch_comps[key] += comps[key] * len(idx)
        epoch_loss /= len(X_train)
        report.train_loss.append(epoch_loss)
        report.reconstruction_continuous.append(
            epoch_comps["reconstruction_continuous"] / len(X_train)
        )
        report.kl.append(epoch_comps["kl"] / len(X_train))
        report.reconstruction_discrete.append(
            epoch_comps["reconstruction_discrete"] / len(X_train)
        )

        if len(X_val):
            noise = rng.standard_normal((len(X_val), params.d))
            val, _ = vae_loss(params, X_val, noise)
            report.val_loss.append(val)
            if val < best_val:
                best_val = val
                best_params = copy.deepcopy(params)
                report.best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale > config.patience:
                    report.epochs_run = epoch + 1
                    break
        report.epochs_run = epoch + 1

    if best_params is not None:
        params = best_params
    return params, report


@dataclass(frozen=True)
class NodeEmbedding:
    values: np.ndarray  # (d,)
    t: int
    index_id: str
    node: int


def embed(params: VaeParams, features) -> NodeEmbedding:
    """Encoder mean for one feature vector; no sampling at inference."""
    if isinstance(features, NodeFeatures):
        raw = features.vector()
        ids = (features.t, features.index_id, features.node)
    else:
        raw = np.asarray(features, dtype=np.float64)
        ids = (0, "", -1)
    if raw.shape != (params.input_dim,):
        raise ValidationError(
            f"feature layout mismatch: got shape {raw.shape}, model expects "
            f"({params.input_dim},)"
        )
    mu, _, _ = _encode(params, params.standardize(raw)[None, :])
    return NodeEmbedding(values=mu[0], t=ids[0], index_id=ids[1], node=ids[2])


def embed_matrix(params: VaeParams, X_raw: np.ndarray) -> np.ndarray:
    """Encoder means for a matrix of raw feature vectors."""
    X_raw = np.atleast_2d(np.asarray(X_raw, dtype=np.float64))
    if X_raw.shape[1] != params.input_dim:
        raise ValidationError(
            f"feature layout mismatch: got {X_raw.shape[1]} columns, model "
            f"expects {params.input_dim}"
        )
    mu, _, _ = _encode(params, params.standardize(X_raw))
    return mu


def save_checkpoint(params: VaeParams, path) -> None:
    arrays = {}
    for i, (w, b) in enumerate(zip(params.enc_w, params.enc_b)):
        arrays[f"enc_w_{i}"], arrays[f"enc_b_{i}"] = w, b
    for i, (w, b) in enumerate(zip(params.dec_w, params.dec_b)):
        arrays[f"dec_w_{i}"], arrays[f"dec_b_{i}"] = w, b
    np.savez_compressed(
        path,
        version=CHECKPOINT_VERSION,
        input_dim=params.input_dim,
        n_continuous=params.n_continuous,
        d=params.d,
        hidden=np.array(params.hidden, dtype=np.int64),
        n_enc=len(params.enc_w),
        w_mu=params.w_mu, b_mu=params.b_mu,
        w_logvar=params.w_logvar, b_logvar=params.b_logvar,
        w_out=params.w_out, b_out=params.b_out,
        cont_mean=params.cont_mean, cont_scale=params.cont_scale,
        seed=params.seed,
        **arrays,
    )


def load_checkpoint(path) -> VaeParams:
    with np.load(path, allow_pickle=False) as bundle:
        version = str(bundle["version"])
        if version != CHECKPOINT_VERSION:
            raise ValidationError(
                f"checkpoint version '{version}' unsupported (expected "
                f"'{CHECKPOINT_VERSION}')"
            )
        n_enc = int(bundle["n_enc"])
        return VaeParams(
            input_dim=int(bundle["input_dim"]),
            n_continuous=int(bundle["n_continuous"]),
            d=int(bundle["d"]),
            hidden=tuple(int(h) for h in bundle["hidden"]),
            enc_w=[bundle[f"enc_w_{i}"] for i in range(n_enc)],
            enc_b=[bundle[f"enc_b_{i}"] for i in range(n_enc)],
            w_mu=bundle["w_mu"], b_mu=bundle["b_mu"],
            w_logvar=bundle["w_logvar"], b_logvar=bundle["b_logvar"],
            dec_w=[bundle[f"dec_w_{i}"] for i in range(n_enc)],
            dec_b=[bundle[f"dec_b_{i}"] for i in range(n_enc)],
            w_out=bundle["w_out"], b_out=bundle["b_out"],
            cont_mean=bundle["cont_mean"], cont_scale=bundle["cont_scale"],
            seed=int(bundle["seed"]),
        )
