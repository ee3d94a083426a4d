"""Dense VAE with Gaussian encoder heads, reparametrized sampling and an SSE decoder loss.

Architectures are written as the encoder size list, e.g. ``784,256,32,24,16``:
ReLU hidden layers 784->256->32->24, two identity heads 24->16 (mean and
log-variance), and a mirrored decoder 16->24->32->256->784 ending in a sigmoid.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datasets import Dataset, minibatches
from .errors import ConfigError, DimensionError, DivergenceError
from .nn import Adam, DenseLayer, Rng

PENALTY_MODES = ("kl", "quadratic_mu")
RECON_LOSSES = ("sse", "bce")


@dataclass
class VaeModel:
    encoder_body: list
    mu_head: DenseLayer
    logvar_head: DenseLayer
    decoder: list

    def __post_init__(self):
        if not self.decoder:
            raise DimensionError("decoder needs at least one layer")
        for chain in (self.encoder_body + [self.mu_head], self.decoder):
            for a, b in zip(chain[:-1], chain[1:]):
                if a.out_size != b.in_size:
                    raise DimensionError(f"layer sizes do not chain: {a.W.shape} -> {b.W.shape}")
        latent = self.mu_head.out_size
        if self.logvar_head.out_size != latent or self.logvar_head.in_size != self.mu_head.in_size:
            raise DimensionError("mean and log-variance heads disagree in shape")
        if self.decoder[0].in_size != latent:
            raise DimensionError(
                f"decoder input size {self.decoder[0].in_size} != latent_dim {latent}"
            )
        if self.decoder[-1].out_size != self.input_dim:
            raise DimensionError(
                f"decoder output size {self.decoder[-1].out_size} != input_dim {self.input_dim}"
            )

    @property
    def latent_dim(self) -> int:
        return self.mu_head.out_size

    @property
    def input_dim(self) -> int:
        first = self.encoder_body[0] if self.encoder_body else self.mu_head
        return first.in_size

    @property
    def arch(self) -> list:
        return [l.in_size for l in self.encoder_body] + [self.mu_head.in_size, self.latent_dim]

    @classmethod
    def build(cls, sizes: Sequence[int], rng: Rng) -> "VaeModel":
        """Initialise a model for the encoder size list ``sizes`` (input first, latent last)."""
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ConfigError(f"invalid architecture {sizes}")
        body = [DenseLayer.init(a, b, "relu", rng) for a, b in zip(sizes[:-2], sizes[1:-1])]
        mu = DenseLayer.init(sizes[-2], sizes[-1], "identity", rng)
        logvar = DenseLayer.init(sizes[-2], sizes[-1], "identity", rng)
        rev = sizes[::-1]
        decoder = [
            DenseLayer.init(a, b, "sigmoid" if i == len(rev) - 2 else "relu", rng)
            for i, (a, b) in enumerate(zip(rev[:-1], rev[1:]))
        ]
        return cls(body, mu, logvar, decoder)

    def layers(self):
        return [*self.encoder_body, self.mu_head, self.logvar_head, *self.decoder]

    def named_params(self):
        out = []
        groups = [("encoder", self.encoder_body), ("mu_head", [self.mu_head]),
                  ("logvar_head", [self.logvar_head]), ("decoder", self.decoder)]
        for gname, layers in groups:
            for i, layer in enumerate(layers):
                prefix = gname if gname.endswith("head") else f"{gname}[{i}]"
                out.append((f"{prefix}.W", layer.W))
                out.append((f"{prefix}.b", layer.b))
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def optimizer(self, lr: float = 1e-3) -> Adam:
        named = self.named_params()
        return Adam([p for _, p in named], [n for n, _ in named], lr=lr)


@dataclass
class EncoderOutput:
    mu: np.ndarray
    logvar: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.logvar)


@dataclass
class LatentSample:
    z: np.ndarray
    eps: np.ndarray


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lam: float = 1.0
    sampling_enabled: bool = True
    penalty_mode: str = "kl"
    seed: int = 0
    learning_rate: float = 1e-3
    recon_loss: str = "sse"

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.penalty_mode not in PENALTY_MODES:
            raise ConfigError(f"unknown penalty mode {self.penalty_mode!r}")
        if self.recon_loss not in RECON_LOSSES:
            raise ConfigError(f"unknown reconstruction loss {self.recon_loss!r}")
        if self.penalty_mode == "quadratic_mu" and self.sampling_enabled:
            raise ConfigError("quadratic_mu penalty requires sampling to be disabled")
        return self


@dataclass
class TrainLog:
    """Per-minibatch training record; per-variable arrays are stacked row-wise."""

    latent_dim: int
    epoch: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    sigma2_mean: list = field(default_factory=list)
    mu_var: list = field(default_factory=list)

    def __len__(self):
        return len(self.loss)

    def append(self, epoch, loss, recon, kl, sigma2_mean, mu_var):
        self.epoch.append(epoch)
        self.loss.append(loss)
        self.recon.append(recon)
        self.kl.append(kl)
        self.sigma2_mean.append(sigma2_mean)
        self.mu_var.append(mu_var)

    def header(self):
        k = range(self.latent_dim)
        return (["batch", "epoch", "loss", "recon", "kl"]
                + [f"sigma2_mean_{i}" for i in k] + [f"mu_var_{i}" for i in k])

    def rows(self):
        for i in range(len(self)):
            yield [i, self.epoch[i], self.loss[i], self.recon[i], self.kl[i],
                   *self.sigma2_mean[i], *self.mu_var[i]]


def _check_input(model, x, dim, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionError(f"{what} shape {x.shape} does not match model dimension {dim}")
    return x


def encode(model: VaeModel, x) -> EncoderOutput:
    h = _check_input(model, x, model.input_dim, "input")
    for layer in model.encoder_body:
        h = layer.forward(h)
    return EncoderOutput(model.mu_head.forward(h), model.logvar_head.forward(h))


def reparameterize(enc: EncoderOutput, rng: Optional[Rng] = None, eps=None) -> LatentSample:
    if eps is None:
        eps = rng.normal(enc.mu.shape)
    eps = np.asarray(eps, dtype=np.float64)
    return LatentSample(enc.mu + np.exp(0.5 * enc.logvar) * eps, eps)


def decode(model: VaeModel, z) -> np.ndarray:
    h = _check_input(model, z, model.latent_dim, "latent")
    for layer in model.decoder:
        h = layer.forward(h)
    return h


def kl_term(enc: EncoderOutput):
    """Closed-form KL to the unit Gaussian, batch-averaged.

    Returns ``(per_variable, total)``.
    """
    mu = np.atleast_2d(enc.mu)
    lv = np.atleast_2d(enc.logvar)
    per = 0.5 * (mu * mu + np.exp(lv) - lv - 1.0)
    per_var = per.mean(axis=0)
    return per_var, float(per_var.sum())


@dataclass
class LatentNoise:
    """Extra Gaussian noise of std ``amplitude`` on one latent coordinate."""

    index: int
    amplitude: float


def _forward_backward(model, x, config, eps=None, noise=None, frozen=None, grads=True):
    """Loss, breakdown and (optionally) parameter gradients for one batch.

    ``noise`` is ``(index, amplitude, draws)``; ``frozen`` is a boolean mask of
    latent coordinates forced to the prior (mean 0, log-variance 0).
    """
    B = x.shape[0]
    acts = [x]
    for layer in model.encoder_body:
        acts.append(layer.forward(acts[-1]))
    h = acts[-1]
    mu = model.mu_head.forward(h)
    lv = model.logvar_head.forward(h)
    if frozen is not None and frozen.any():
        mu[:, frozen] = 0.0
        lv[:, frozen] = 0.0
    var = np.exp(lv)

    if config.sampling_enabled:
        std = np.exp(0.5 * lv)
        z = mu + std * eps
    else:
        z = mu.copy()
    if noise is not None:
        idx, amp, draws = noise
        z[:, idx] += amp * draws

    dec = [z]
    for layer in model.decoder[:-1]:
        dec.append(layer.forward(dec[-1]))
    last = model.decoder[-1]
    logits = last.preactivation(dec[-1])
    xhat = last.activate(logits)

    diff = xhat - x
    if config.recon_loss == "bce":
        if last.activation != "sigmoid":
            raise ConfigError("bce reconstruction needs a sigmoid output layer")
        # softplus(a) - x * a, the cross-entropy written on the logits
        sp = np.maximum(logits, 0.0) + np.log1p(np.exp(-np.abs(logits)))
        recon_per = np.sum(sp - x * logits, axis=1)
    else:
        recon_per = np.einsum("ij,ij->i", diff, diff)
    kl_per_var = 0.5 * (mu * mu + var - lv - 1.0)
    kl_img = kl_per_var.sum(axis=1)
    if config.penalty_mode == "kl":
        reg_img = kl_img
    else:
        reg_img = 0.5 * np.einsum("ij,ij->i", mu, mu)
    loss = float(np.mean(recon_per + config.lam * reg_img))
    parts = {
        "loss": loss,
        "recon": float(recon_per.mean()),
        "kl": float(kl_img.mean()),
        "penalty": float(reg_img.mean()),
        "kl_per_var": kl_per_var.mean(axis=0),
        "mu": mu,
        "var": var,
    }
    if not grads:
        return loss, parts, None

    if config.recon_loss == "bce":
        d_logits = diff / B
    else:
        d_logits = last.activation_grad(xhat, 2.0 * diff / B)
    gW, gb, up = last.linear_backward(dec[-1], d_logits)
    dec_grads = [(gW, gb)]
    for i in range(len(model.decoder) - 2, -1, -1):
        gW, gb, up = model.decoder[i].backward(dec[i], dec[i + 1], up)
        dec_grads.append((gW, gb))
    dec_grads.reverse()
    dz = up

    lam = config.lam
    dmu = dz.copy()
    if config.penalty_mode == "kl":
        dmu += lam * mu / B
        dlv = lam * 0.5 * (var - 1.0) / B
    else:
        dmu += lam * mu / B
        dlv = np.zeros_like(lv)
    if config.sampling_enabled:
        dlv = dlv + dz * eps * 0.5 * std
    if frozen is not None and frozen.any():
        dmu[:, frozen] = 0.0
        dlv[:, frozen] = 0.0

    gWm, gbm, dh_mu = model.mu_head.backward(h, mu, dmu)
    gWl, gbl, dh_lv = model.logvar_head.backward(h, lv, dlv)
    up = dh_mu + dh_lv
    enc_grads = []
    for i in range(len(model.encoder_body) - 1, -1, -1):
        gW, gb, up = model.encoder_body[i].backward(acts[i], acts[i + 1], up)
        enc_grads.append((gW, gb))
    enc_grads.reverse()

    out = []
    for gW, gb in enc_grads:
        out += [gW, gb]
    out += [gWm, gbm, gWl, gbl]
    for gW, gb in dec_grads:
        out += [gW, gb]
    return loss, parts, out


def vae_loss(x, model: VaeModel, config: TrainConfig, rng: Optional[Rng] = None, eps=None):
    """Minibatch objective: mean over images of ``SSE + lambda * regulariser``.

    With sampling enabled the latent is ``mu + sigma * eps`` (``eps`` drawn from
    ``rng`` unless given). Returns ``(loss, parts)``.
    """
    config.validate()
    x = _check_input(model, x, model.input_dim, "input")
    if config.sampling_enabled and eps is None:
        eps = rng.normal((x.shape[0], model.latent_dim))
    loss, parts, _ = _forward_backward(model, x, config, eps=eps, grads=False)
    return loss, parts


def loss_and_grads(x, model: VaeModel, config: TrainConfig, eps=None, noise=None, frozen=None):
    """Like :func:`vae_loss` but also returns gradients in ``model.params()`` order."""
    config.validate()
    x = _check_input(model, x, model.input_dim, "input")
    return _forward_backward(model, x, config, eps=eps, noise=noise, frozen=frozen)


def train(
    model: VaeModel,
    dataset: Dataset,
    config: TrainConfig,
    *,
    optimizer: Optional[Adam] = None,
    rng: Optional[Rng] = None,
    noise: Optional[LatentNoise] = None,
    frozen=None,
    log: Optional[TrainLog] = None,
):
    """Minibatch Adam training, mutating ``model`` in place.

    ``rng`` drives shuffling and sampling noise; by default it is the child
    stream 1 of ``config.seed`` (stream 0 is used for weight init by the CLI).
    """
    config.validate()
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    rng = rng if rng is not None else Rng(config.seed).child(1)
    opt = optimizer if optimizer is not None else model.optimizer(config.learning_rate)
    log = log if log is not None else TrainLog(model.latent_dim)
    if frozen is not None:
        frozen = np.asarray(frozen, dtype=bool)
    k = model.latent_dim
    last_good = None
    for epoch in range(config.epochs):
        for idx in minibatches(dataset, config.batch_size, rng):
            x = dataset.images[idx]
            eps = rng.normal((len(idx), k)) if config.sampling_enabled else None
            nz = None
            if noise is not None:
                nz = (noise.index, noise.amplitude, rng.normal(len(idx)))
            # overflow shows up as a non-finite loss, reported just below
            with np.errstate(over="ignore", invalid="ignore"):
                loss, parts, grads = _forward_backward(model, x, config, eps=eps, noise=nz, frozen=frozen)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss in epoch {epoch}", last_good)
            opt.step(grads)
            log.append(epoch, loss, parts["recon"], parts["kl"],
                       parts["var"].mean(axis=0), parts["mu"].var(axis=0))
        last_good = epoch
    return model, log


def sample_prior(model: VaeModel, n: int, rng: Rng, zero_mask=None) -> np.ndarray:
    """Decode ``n`` draws from the unit Gaussian prior, with ``zero_mask`` coordinates set to 0."""
    z = rng.normal((int(n), model.latent_dim))
    if zero_mask:
        idx = sorted(int(i) for i in zero_mask)
        bad = [i for i in idx if not 0 <= i < model.latent_dim]
        if bad:
            raise IndexError(f"latent indices {bad} out of range for latent_dim {model.latent_dim}")
        z[:, idx] = 0.0
    return decode(model, z)
