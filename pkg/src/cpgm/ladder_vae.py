"""Ladder VAE with class-conditional Gaussian latent prior (CPGM-VAE).

The encoder climbs ``L`` conv blocks, emitting a diagonal Gaussian per
layer. The decoder descends from the top sample, and at each middle layer
merges its top-down Gaussian with the bottom-up one by precision
weighting before sampling the next latent. The top latent is pulled
towards a learnable class mean ``mu_k`` and fed to a softmax classifier.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from cpgm.autodiff import functional as F
from cpgm.autodiff.layers import Conv2d, ConvBlock, ConvTranspose2d, Linear, ParameterSet
from cpgm.autodiff.optim import OptimizerState, sgd_step
from cpgm.autodiff.tensor import Tensor, as_tensor, backward
from cpgm.errors import ContractError, DomainError, ShapeError

ARCHITECTURES = ("ladder", "plain", "cnn")


@dataclass
class VaeConfig:
    num_classes: int
    input_shape: tuple = (1, 16, 16)
    channels: tuple = (16, 32, 64)
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    latent_dim: int = 32
    ladder_dims: tuple | None = None
    lam: float = 100.0
    learning_rate: float = 0.001
    momentum: float = 0.0
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    architecture: str = "ladder"
    var_floor: float = 1e-6

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.channels = tuple(self.channels)
        if self.ladder_dims is None:
            self.ladder_dims = (self.latent_dim,) * (len(self.channels) - 1)
        self.ladder_dims = tuple(self.ladder_dims)
        if self.num_layers < 2:
            raise ContractError("a ladder needs at least 2 layers")
        if len(self.ladder_dims) != self.num_layers - 1:
            raise ContractError("ladder_dims needs one entry per middle layer")
        if self.latent_dim < 1 or self.num_classes < 2:
            raise ContractError("latent_dim must be >= 1 and num_classes >= 2")
        if not self.lam > 0:
            raise ContractError("lam must be positive")
        if self.architecture not in ARCHITECTURES:
            raise ContractError(f"architecture must be one of {ARCHITECTURES}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ContractError("epochs must be >= 1 and batch_size >= 2")

    @property
    def num_layers(self):
        return len(self.channels)

    @property
    def layer_dims(self):
        return self.ladder_dims + (self.latent_dim,)

    def beta(self, epoch):
        """KL weight rising linearly from 0 at the first epoch to 1 at the last."""
        if self.epochs == 1:
            return 1.0
        return min(1.0, max(0.0, epoch / (self.epochs - 1)))

    def to_dict(self):
        return asdict(self)


class Gaussian(NamedTuple):
    mu: Tensor
    var: Tensor


class LatentCode(NamedTuple):
    mu: Tensor
    var: Tensor
    z: Tensor


class LadderLayerStats(NamedTuple):
    bottom_up: Gaussian
    top_down: Gaussian
    merged: Gaussian


class VaeForward(NamedTuple):
    upward: list
    top: LatentCode
    ladder: list
    reconstruction: Tensor | None
    logits: Tensor


# -- Gaussian algebra ----------------------------------------------------------------

def _check_positive(*variances):
    for v in variances:
        if np.any(as_tensor(v).data <= 0):
            raise DomainError("variances must be strictly positive")


def merge_gaussian(mu, var, mu_tilde, var_tilde):
    """Precision-weighted combination of bottom-up and top-down Gaussians."""
    mu, var, mu_tilde, var_tilde = map(as_tensor, (mu, var, mu_tilde, var_tilde))
    _check_positive(var, var_tilde)
    prec, prec_tilde = 1.0 / var, 1.0 / var_tilde
    total = prec + prec_tilde
    q_mu = (mu_tilde * prec_tilde + mu * prec) / total
    q_var = 1.0 / total
    return q_mu, q_var


def kl_gaussian(q_mu, q_var, p_mu, p_var):
    """KL(N(q_mu, q_var) || N(p_mu, p_var)) summed over the last axis."""
    q_mu, q_var, p_mu, p_var = map(as_tensor, (q_mu, q_var, p_mu, p_var))
    _check_positive(q_var, p_var)
    terms = (p_var / q_var).log() + (q_var + (q_mu - p_mu).square()) / p_var - 1.0
    return terms.sum(axis=-1) * 0.5


def kl_conditional(mu, var, mu_k):
    """KL(N(mu, var) || N(mu_k, I)) summed over the last axis."""
    mu, var, mu_k = map(as_tensor, (mu, var, mu_k))
    _check_positive(var)
    terms = 1.0 + var.log() - (mu - mu_k).square() - var
    return terms.sum(axis=-1) * -0.5


def class_mean(label, centers):
    """Row of the class-centre embedding selected by one-hot ``label``."""
    onehot = np.asarray(label, dtype=np.float64)
    squeeze = onehot.ndim == 1
    onehot = np.atleast_2d(onehot)
    if onehot.shape[1] != centers.shape[0]:
        raise ContractError(f"one-hot width {onehot.shape[1]} != {centers.shape[0]} classes")
    if not (np.all((onehot == 0) | (onehot == 1)) and np.all(onehot.sum(axis=1) == 1)):
        raise ContractError("label is not a valid one-hot vector")
    out = Tensor(onehot) @ centers
    return out[0] if squeeze else out


# -- model -----------------------------------------------------------------------

class Inference(NamedTuple):
    latent: np.ndarray
    scores: np.ndarray
    recon_error: np.ndarray | None
    reconstruction: np.ndarray | None = None


class CPGMVae:
    kind = "cpgm_vae"

    def __init__(self, config):
        self.config = config
        self.params = ParameterSet()
        self.buffers = {}
        rng = np.random.default_rng([config.seed, 0])
        c = config
        self.shapes = [tuple(c.input_shape)]
        h, w = c.input_shape[1:]
        for ch in c.channels:
            h = F.conv_output_size(h, c.kernel, c.stride, c.padding)
            w = F.conv_output_size(w, c.kernel, c.stride, c.padding)
            if h < 1 or w < 1:
                raise ShapeError("input too small for the configured layers")
            self.shapes.append((ch, h, w))
        flat = [int(np.prod(s)) for s in self.shapes]
        dims = c.layer_dims
        p, b = self.params, self.buffers

        self.enc_blocks, self.enc_mu, self.enc_var = [], [], []
        for l in range(c.num_layers):
            conv = Conv2d(p, f"enc.{l}.conv", self.shapes[l][0], c.channels[l],
                          c.kernel, c.stride, c.padding, rng)
            self.enc_blocks.append(ConvBlock(conv, p, b, f"enc.{l}", c.channels[l]))
            self.enc_mu.append(Linear(p, f"enc.{l}.mu", flat[l + 1], dims[l], rng))
            self.enc_var.append(Linear(p, f"enc.{l}.var", flat[l + 1], dims[l], rng))

        # decoder step l maps the layer-l latent down to the layer l-1 feature map
        self.dec_unflatten, self.dec_convt, self.dec_mu, self.dec_var = {}, {}, {}, {}
        for l in range(c.num_layers, 0, -1):
            src, dst = self.shapes[l], self.shapes[l - 1]
            self.dec_unflatten[l] = Linear(p, f"dec.{l}.unflatten", dims[l - 1], flat[l], rng)
            natural = (src[1] - 1) * c.stride - 2 * c.padding + c.kernel
            out_pad = dst[1] - natural
            if not 0 <= out_pad < max(c.stride, 1):
                raise ShapeError("cannot invert the encoder geometry with a transposed conv")
            convt = ConvTranspose2d(p, f"dec.{l}.convt", src[0], dst[0], c.kernel, c.stride,
                                    c.padding, out_pad, rng)
            if l > 1:
                self.dec_convt[l] = ConvBlock(convt, p, b, f"dec.{l}", dst[0])
                self.dec_mu[l - 1] = Linear(p, f"dec.{l}.mu", flat[l - 1], dims[l - 2], rng)
                self.dec_var[l - 1] = Linear(p, f"dec.{l}.var", flat[l - 1], dims[l - 2], rng)
            else:
                self.dec_convt[l] = convt

        self.classifier = Linear(p, "classifier", c.latent_dim, c.num_classes, rng)
        self.centers = p.add(
            "centers.embedding",
            rng.uniform(-1.0, 1.0, size=(c.num_classes, c.latent_dim)) * math.sqrt(6.0 / c.num_classes),
        )

    # -- pieces -----------------------------------------------------------------
    def _variance(self, head, h):
        return F.softplus(head(h)) + self.config.var_floor

    def encode_upward(self, x, training=False):
        """Bottom-up Gaussians ``[(mu_1, var_1), ..., (mu_L, var_L)]``."""
        x = as_tensor(x)
        if tuple(x.shape[1:]) != self.shapes[0]:
            raise ShapeError(f"expected input of shape [N, {self.shapes[0]}], got {x.shape}")
        stats = []
        top_only = self.config.architecture == "cnn"
        for l in range(self.config.num_layers):
            x = self.enc_blocks[l](x, training)
            if top_only and l < self.config.num_layers - 1:
                continue
            h = F.flatten(x)
            stats.append(Gaussian(self.enc_mu[l](h), self._variance(self.enc_var[l], h)))
        return stats

    def _top_down_step(self, l, z, training):
        c = F.unflatten(self.dec_unflatten[l](z), self.shapes[l])
        if l > 1:
            return self.dec_convt[l](c, training)
        return self.dec_convt[l](c)

    def decode_downward(self, z, upward, training=False, rng=None):
        """Descend from the top latent; returns ``(reconstruction, ladder stats)``.

        With the ladder active, each middle layer merges top-down and
        bottom-up statistics and samples from the merge (training) or uses
        its mean (inference). Without it the top-down mean is propagated.
        """
        z = z.z if isinstance(z, LatentCode) else as_tensor(z)
        ladder = self.config.architecture == "ladder"
        stats = []
        for l in range(self.config.num_layers, 1, -1):
            feat = self._top_down_step(l, z, training)
            h = F.flatten(feat)
            mu_t = self.dec_mu[l - 1](h)
            if not ladder:
                z = mu_t
                continue
            var_t = self._variance(self.dec_var[l - 1], h)
            bottom = upward[l - 2]
            q_mu, q_var = merge_gaussian(bottom.mu, bottom.var, mu_t, var_t)
            stats.append(LadderLayerStats(bottom, Gaussian(mu_t, var_t), Gaussian(q_mu, q_var)))
            z = F.reparameterize(q_mu, q_var, rng) if training else q_mu
        logits = self._top_down_step(1, z, training)
        return F.sigmoid(logits), stats

    def classify_logits(self, z):
        return self.classifier(as_tensor(z))

    def classify(self, z):
        """Softmax class scores for latent(s) ``z``."""
        return F.softmax(self.classify_logits(z))

    def forward(self, x, training=False, rng=None):
        upward = self.encode_upward(x, training)
        top = upward[-1]
        if training and self.config.architecture != "cnn":
            z = F.reparameterize(top.mu, top.var, rng)
        else:
            z = top.mu
        code = LatentCode(top.mu, top.var, z)
        recon, ladder = None, []
        if self.config.architecture != "cnn":
            recon, ladder = self.decode_downward(code, upward, training, rng)
        return VaeForward(upward, code, ladder, recon, self.classify_logits(z))

    # -- inference --------------------------------------------------------------
    def infer(self, images, with_reconstruction=True, batch_size=256, keep_reconstruction=False):
        """Deterministic latents, class scores and reconstruction errors."""
        images = np.asarray(images, dtype=np.float64)
        if with_reconstruction and self.config.architecture == "cnn":
            raise ContractError("a classifier-only model has no decoder")
        latents, scores, errors, recons = [], [], [], []
        for start in range(0, len(images), batch_size):
            x = images[start : start + batch_size]
            upward = self.encode_upward(x, training=False)
            mu = upward[-1].mu
            latents.append(mu.data)
            scores.append(self.classify(mu).data)
            if with_reconstruction:
                recon, _ = self.decode_downward(mu, upward, training=False)
                errors.append(((x - recon.data) ** 2).reshape(len(x), -1).sum(axis=1))
                if keep_reconstruction:
                    recons.append(recon.data)
        return Inference(
            np.concatenate(latents),
            np.concatenate(scores),
            np.concatenate(errors) if with_reconstruction else None,
            np.concatenate(recons) if keep_reconstruction else None,
        )


# -- objective -------------------------------------------------------------------

def classification_loss(logits, labels):
    """Mean of ``-ln S_c`` over the batch."""
    onehot = F.one_hot(labels, logits.shape[1])
    return -(F.log_softmax(logits) * onehot).sum(axis=1).mean()


def vae_loss(x, labels, model, beta, rng=None, training=True):
    """Minimised objective ``recon + beta * kl + lam * cls`` and its parts.

    ``recon`` sums squared pixel errors per image, ``kl`` averages the
    class-conditional top KL and the middle-layer KLs (merged vs top-down)
    over the ``L`` layers, and ``cls`` is the softmax cross-entropy. All
    three are averaged over the batch.
    """
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta must lie in [0, 1], got {beta}")
    cfg = model.config
    labels = np.asarray(labels)
    rng = np.random.default_rng(0) if rng is None else rng
    out = model.forward(x, training=training, rng=rng)
    cls = classification_loss(out.logits, labels)
    if cfg.architecture == "cnn":
        zero = Tensor(0.0)
        total = cls * cfg.lam
        return total, {"recon": zero, "kl": zero, "cls": cls}
    x = as_tensor(x)
    recon = (x - out.reconstruction).square().reshape(x.shape[0], -1).sum(axis=1).mean()
    mu_k = class_mean(F.one_hot(labels, cfg.num_classes), model.centers)
    kl = kl_conditional(out.top.mu, out.top.var, mu_k)
    if cfg.architecture == "ladder":
        for layer in out.ladder:
            kl = kl + kl_gaussian(layer.merged.mu, layer.merged.var,
                                  layer.top_down.mu, layer.top_down.var)
        kl = kl * (1.0 / cfg.num_layers)
    kl = kl.mean()
    total = recon + kl * beta + cls * cfg.lam
    return total, {"recon": recon, "kl": kl, "cls": cls}


# -- training --------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    trace: list = field(default_factory=list)


def accuracy(model, dataset, batch_size=256):
    inf = model.infer(dataset.images, with_reconstruction=False, batch_size=batch_size)
    return float(np.mean(np.argmax(inf.scores, axis=1) == dataset.labels))


def train_cpgm_vae(dataset, config, log=None):
    """Mini-batch SGD over shuffled epochs; returns the model and a loss trace."""
    if len(dataset) == 0:
        raise ContractError("training set is empty")
    labels = dataset.labels
    if labels.min() < 0 or labels.max() >= config.num_classes:
        raise ContractError(f"labels must lie in [0, {config.num_classes})")
    model = CPGMVae(config)
    state = OptimizerState(config.learning_rate, config.momentum)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    sample_rng = np.random.default_rng([config.seed, 2])
    n = len(dataset)
    trace = []
    for epoch in range(config.epochs):
        beta = config.beta(epoch)
        order = shuffle_rng.permutation(n)
        sums = {"loss": 0.0, "recon": 0.0, "kl": 0.0, "cls": 0.0}
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            total, parts = vae_loss(dataset.images[idx], labels[idx], model, beta, sample_rng)
            backward(total)
            sgd_step(model.params, state, allow_missing=True)
            sums["loss"] += total.item()
            for key in ("recon", "kl", "cls"):
                sums[key] += parts[key].item()
            batches += 1
        row = {"epoch": epoch, "beta": beta}
        row.update({k: v / max(batches, 1) for k, v in sums.items()})
        row["train_acc"] = accuracy(model, dataset)
        trace.append(row)
        if log is not None:
            log(row)
    return TrainResult(model, trace)
