"""Adversarial autoencoder with conditional Gaussian latent (CPGM-AAE).

Three wirings share one code path:

``cpgm``
    The encoder emits ``z0`` and a categorical ``y``. Class means
    ``mu = centers(y)`` are added as ``z = alpha * mu + z0``; ``z0`` is
    matched to ``N(0, I)`` by the discriminator, ``y`` feeds the
    classifier, and the detector sees ``z``.
``variant1``
    No categorical head. ``z`` is matched to ``N(mu_label, I)`` with the
    one-hot label concatenated at the discriminator input; ``z`` feeds
    both classifier and detector.
``variant2``
    Categorical head as in ``cpgm`` but ``z0`` is decoded and handed to
    the detector directly; the centres never touch the latent.

Training cycles through reconstruction, regularisation, classification
and centre-learning phases on every mini-batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from cpgm.autodiff import functional as F
from cpgm.autodiff.layers import (
    Conv2d,
    ConvBlock,
    ConvTranspose2d,
    Linear,
    ParameterSet,
    PReLU,
)
from cpgm.autodiff.optim import OptimizerState, clip_grad_norm, sgd_step
from cpgm.autodiff.tensor import Tensor, as_tensor, backward, concat
from cpgm.errors import ContractError, ShapeError
from cpgm.ladder_vae import Inference, TrainResult, accuracy, classification_loss

VARIANTS = ("cpgm", "variant1", "variant2")
BCE_CLAMP = 1e-7
COINCIDENT = 1e-12
CLASSIFIER_GAIN = 4.0


@dataclass
class AaeConfig:
    num_classes: int
    input_shape: tuple = (1, 16, 16)
    channels: tuple = (16, 32, 64)
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    latent_dim: int = 32
    alpha: float = 10.0
    eta: float = 1.0
    learning_rate: float = 0.1
    momentum: float = 0.0
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    variant: str = "cpgm"
    disc_hidden: tuple = (128, 64)
    classifier_only: bool = False
    grad_clip: float | None = 5.0

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.channels = tuple(self.channels)
        self.disc_hidden = tuple(self.disc_hidden)
        if not (self.alpha > 0 and self.eta > 0):
            raise ContractError("alpha and eta must be positive")
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}")
        if self.num_classes < 2 or self.latent_dim < 1:
            raise ContractError("num_classes must be >= 2 and latent_dim >= 1")
        if self.epochs < 1 or self.batch_size < 2:
            raise ContractError("epochs must be >= 1 and batch_size >= 2")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ContractError("grad_clip must be positive or None")

    def to_dict(self):
        return asdict(self)


class EncoderOutput(NamedTuple):
    z0: Tensor
    y: Tensor | None
    y_logits: Tensor | None


def compose_latent(z0, mu_k, alpha):
    """``alpha * mu_k + z0``."""
    z0, mu_k = as_tensor(z0), as_tensor(mu_k)
    if z0.shape[-1] != mu_k.shape[-1]:
        raise ShapeError(f"latent {z0.shape} and centre {mu_k.shape} differ")
    return mu_k * alpha + z0


def distance_loss(centers, eta):
    """Hinged pairwise squared distance summed over unordered centre pairs.

    A pair contributes ``||mu_i - mu_j||^2`` when that value is at most
    ``eta`` and nothing otherwise.
    """
    centers = as_tensor(centers)
    k = centers.shape[0]
    total = Tensor(0.0)
    for i in range(k):
        for j in range(i + 1, k):
            d = (centers[i] - centers[j]).square().sum()
            if d.item() <= eta:
                total = total + d
    return total


def binary_cross_entropy(prob, target):
    p = as_tensor(prob).clip(BCE_CLAMP, 1.0 - BCE_CLAMP)
    if target == 1:
        return -p.log().mean()
    return -(1.0 - p).log().mean()


class CPGMAae:
    def __init__(self, config):
        self.config = config
        c = config
        self.kind = {"cpgm": "cpgm_aae"}.get(c.variant, c.variant)
        self.params = ParameterSet()
        self.buffers = {}
        self.rng = np.random.default_rng([c.seed, 10])
        rng = np.random.default_rng([c.seed, 0])
        p, b = self.params, self.buffers
        shapes = [tuple(c.input_shape)]
        h, w = c.input_shape[1:]
        for ch in c.channels:
            h = F.conv_output_size(h, c.kernel, c.stride, c.padding)
            w = F.conv_output_size(w, c.kernel, c.stride, c.padding)
            if h < 1 or w < 1:
                raise ShapeError("input too small for the configured layers")
            shapes.append((ch, h, w))
        self.shapes = shapes
        top_flat = int(np.prod(shapes[-1]))
        J, K = c.latent_dim, c.num_classes

        self.enc_blocks = []
        for l, ch in enumerate(c.channels):
            conv = Conv2d(p, f"enc.{l}.conv", shapes[l][0], ch, c.kernel, c.stride, c.padding, rng)
            self.enc_blocks.append(ConvBlock(conv, p, b, f"enc.{l}", ch))
        self.z_head = Linear(p, "enc.z0", top_flat, J, rng)
        self.y_head = None if c.variant == "variant1" else Linear(p, "enc.y", top_flat, K, rng)

        self.dec_unflatten = Linear(p, "dec.unflatten", J, top_flat, rng)
        self.dec_layers = []
        for l in range(len(c.channels), 0, -1):
            src, dst = shapes[l], shapes[l - 1]
            natural = (src[1] - 1) * c.stride - 2 * c.padding + c.kernel
            out_pad = dst[1] - natural
            if not 0 <= out_pad < max(c.stride, 1):
                raise ShapeError("cannot invert the encoder geometry with a transposed conv")
            convt = ConvTranspose2d(p, f"dec.{l}.convt", src[0], dst[0], c.kernel, c.stride,
                                    c.padding, out_pad, rng)
            self.dec_layers.append(ConvBlock(convt, p, b, f"dec.{l}", dst[0]) if l > 1 else convt)

        cls_in = J if c.variant == "variant1" else K
        self.classifier = Linear(p, "classifier", cls_in, K, rng)
        if c.variant != "variant1":
            # y is already a class distribution: start with corner k -> class k
            self.classifier.weight.data[...] = CLASSIFIER_GAIN * np.eye(K)
        self.centers = p.add("centers.weight", rng.uniform(-1.0, 1.0, size=(K, J)) * np.sqrt(6.0 / K))

        d_in = J + (K if c.variant == "variant1" else 0)
        self.disc = []
        for i, width in enumerate(c.disc_hidden):
            self.disc.append(Linear(p, f"disc.{i}", d_in, width, rng))
            self.disc.append(PReLU(p, f"disc.{i}.act", width))
            d_in = width
        # zero output layer: D = 0.5 everywhere before training
        self.disc.append(Linear(p, "disc.out", d_in, 1, rng, zero_init=True))

    # -- parameter groups -------------------------------------------------------
    def group(self, *prefixes):
        return self.params.subset(prefixes)

    # -- forward pieces --------------------------------------------------------
    def encode(self, x, training=False):
        x = as_tensor(x)
        if tuple(x.shape[1:]) != self.shapes[0]:
            raise ShapeError(f"expected input of shape [N, {self.shapes[0]}], got {x.shape}")
        for block in self.enc_blocks:
            x = block(x, training)
        h = F.flatten(x)
        z0 = self.z_head(h)
        if self.y_head is None:
            return EncoderOutput(z0, None, None)
        logits = self.y_head(h)
        return EncoderOutput(z0, F.softmax(logits), logits)

    def center_of(self, y):
        return as_tensor(y) @ self.centers

    def latent(self, enc):
        """Latent handed to the decoder."""
        if self.config.variant == "cpgm":
            return compose_latent(enc.z0, self.center_of(enc.y), self.config.alpha)
        return enc.z0

    def detector_latent(self, enc):
        return self.latent(enc) if self.config.variant == "cpgm" else enc.z0

    def classifier_input(self, enc):
        return enc.z0 if self.config.variant == "variant1" else enc.y

    def decode(self, z, training=False):
        x = F.unflatten(self.dec_unflatten(as_tensor(z)), self.shapes[-1])
        for layer in self.dec_layers[:-1]:
            x = layer(x, training)
        return F.sigmoid(self.dec_layers[-1](x))

    def discriminate(self, z, onehot=None):
        h = as_tensor(z)
        if self.config.variant == "variant1":
            h = concat([h, Tensor(onehot)], axis=1)
        for layer in self.disc:
            h = layer(h)
        return F.sigmoid(h)

    def classify(self, inputs):
        return F.softmax(self.classifier(inputs))

    def infer(self, images, with_reconstruction=True, batch_size=256, keep_reconstruction=False):
        images = np.asarray(images, dtype=np.float64)
        if with_reconstruction and self.config.classifier_only:
            raise ContractError("a classifier-only model has no trained decoder")
        latents, scores, errors, recons = [], [], [], []
        for start in range(0, len(images), batch_size):
            x = images[start : start + batch_size]
            enc = self.encode(x)
            latents.append(self.detector_latent(enc).data)
            scores.append(self.classify(self.classifier_input(enc)).data)
            if with_reconstruction:
                recon = self.decode(self.latent(enc)).data
                errors.append(((x - recon) ** 2).reshape(len(x), -1).sum(axis=1))
                if keep_reconstruction:
                    recons.append(recon)
        return Inference(
            np.concatenate(latents),
            np.concatenate(scores),
            np.concatenate(errors) if with_reconstruction else None,
            np.concatenate(recons) if keep_reconstruction else None,
        )


# -- losses (pure, used by the phase steps and the gradient checks) ----------------

def reconstruction_loss(x, model, training=True):
    x = as_tensor(x)
    recon = model.decode(model.latent(model.encode(x, training)), training)
    return (x - recon).square().reshape(x.shape[0], -1).sum(axis=1).mean()


def _prior_samples(model, labels, rng):
    c = model.config
    n = len(labels)
    eps = rng.standard_normal((n, c.latent_dim))
    if c.variant == "variant1":
        return eps + model.centers.data[labels]
    return eps


def discriminator_loss(x, labels, model, rng, training=True):
    c = model.config
    onehot = F.one_hot(labels, c.num_classes)
    fake = model.encode(x, training).z0.detach()
    real = Tensor(_prior_samples(model, labels, rng))
    return (binary_cross_entropy(model.discriminate(real, onehot), 1)
            + binary_cross_entropy(model.discriminate(fake, onehot), 0))


def generator_loss(x, labels, model, training=True):
    onehot = F.one_hot(labels, model.config.num_classes)
    z0 = model.encode(x, training).z0
    return binary_cross_entropy(model.discriminate(z0, onehot), 1)


def aae_classification_loss(x, labels, model, training=True):
    enc = model.encode(x, training)
    return classification_loss(model.classifier(model.classifier_input(enc)), labels)


def batch_centers(x, labels, model, training=True):
    """Class means ``mu_k`` for every known class from the current batch."""
    c = model.config
    sources = np.eye(c.num_classes)
    if c.variant != "variant1":
        # y enters detached: centre learning must not move the classifier path
        y = model.encode(x, training).y.data
        for k in range(c.num_classes):
            mask = labels == k
            if mask.any():
                sources[k] = y[mask].mean(axis=0)
    return model.center_of(sources)


# -- phase steps ------------------------------------------------------------------

class PhaseOptimizers:
    def __init__(self, config):
        lr, m = config.learning_rate, config.momentum
        self.reconstruction = OptimizerState(lr, m)
        self.discriminator = OptimizerState(lr, m)
        self.generator = OptimizerState(lr, m)
        self.classification = OptimizerState(lr, m)
        self.centers = OptimizerState(lr, m)


def _step(model, loss, groups, state):
    model.params.zero_grad()
    backward(loss)
    group = model.group(*groups)
    if model.config.grad_clip is not None:
        # lr 0.1 with alpha = 10 can saturate the categorical head otherwise
        clip_grad_norm(group, model.config.grad_clip)
    sgd_step(group, state, allow_missing=True)
    model.params.zero_grad()


def reconstruction_phase_step(x, model, state):
    loss = reconstruction_loss(x, model)
    _step(model, loss, ("enc.", "dec."), state)
    return loss.item()


def regularization_phase_step(x, labels, model, opts, rng):
    d_loss = discriminator_loss(x, labels, model, rng)
    _step(model, d_loss, ("disc.",), opts.discriminator)
    g_loss = generator_loss(x, labels, model)
    _step(model, g_loss, ("enc.",), opts.generator)
    return d_loss.item(), g_loss.item()


def classification_phase_step(x, labels, model, state):
    loss = aae_classification_loss(x, labels, model)
    _step(model, loss, ("enc.", "classifier."), state)
    return loss.item()


def center_learning_step(x, labels, model, state, eta=None):
    """Push class centres apart inside the hinge radius; returns the hinge value.

    The update ascends the hinged distance (descends its negative) so that
    nearby centres separate. Exactly coincident centres have a zero
    gradient, so they are first nudged apart by a tiny seeded jitter.
    """
    eta = model.config.eta if eta is None else eta
    centers = batch_centers(x, labels, model)
    gaps = [
        float(((centers.data[i] - centers.data[j]) ** 2).sum())
        for i in range(len(centers.data)) for j in range(i + 1, len(centers.data))
    ]
    if gaps and min(gaps) < COINCIDENT:
        model.centers.data += 1e-6 * model.rng.standard_normal(model.centers.shape)
        centers = batch_centers(x, labels, model)
    value = distance_loss(centers, eta)
    if value.requires_grad:
        _step(model, -value, ("centers.",), state)
    return value.item()


def train_cpgm_aae(dataset, config, log=None):
    """Run the four phases on every mini-batch for ``config.epochs`` epochs."""
    if len(dataset) == 0:
        raise ContractError("training set is empty")
    labels = dataset.labels
    if labels.min() < 0 or labels.max() >= config.num_classes:
        raise ContractError(f"labels must lie in [0, {config.num_classes})")
    model = CPGMAae(config)
    opts = PhaseOptimizers(config)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    prior_rng = np.random.default_rng([config.seed, 3])
    n = len(dataset)
    trace = []
    keys = ("recon", "d_loss", "g_loss", "cls", "dist")
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        sums = dict.fromkeys(keys, 0.0)
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            x, y = dataset.images[idx], labels[idx]
            if not config.classifier_only:
                sums["recon"] += reconstruction_phase_step(x, model, opts.reconstruction)
                d, g = regularization_phase_step(x, y, model, opts, prior_rng)
                sums["d_loss"] += d
                sums["g_loss"] += g
            sums["cls"] += classification_phase_step(x, y, model, opts.classification)
            if not config.classifier_only:
                sums["dist"] += center_learning_step(x, y, model, opts.centers)
            batches += 1
        row = {"epoch": epoch}
        row.update({k: v / max(batches, 1) for k, v in sums.items()})
        row["train_acc"] = accuracy(model, dataset)
        trace.append(row)
        if log is not None:
            log(row)
    return TrainResult(model, trace)
