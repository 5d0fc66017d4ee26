"""Open-set decision rule: per-class latent Gaussians plus a reconstruction gate.

A test sample is rejected as unknown when its latent falls outside every
class Gaussian (containment below ``tau_l`` for all classes) or when its
reconstruction error exceeds ``tau_r``; otherwise it takes the
classifier's arg-max label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from cpgm.errors import ContractError, FormatError, InsufficientDataError

VAR_FLOOR = 1e-6
UNKNOWN = -1

RULES = ("softmax", "cgd", "re", "cgd_or_re")


@dataclass
class ClassGaussian:
    class_id: int
    m: np.ndarray
    var: np.ndarray
    count: int

    @property
    def std(self):
        return np.sqrt(self.var)


@dataclass
class Thresholds:
    tau_l: float = 0.5
    tau_r: float = math.inf

    def __post_init__(self):
        if not 0.0 < self.tau_l < 1.0:
            raise ContractError(f"tau_l must lie in (0, 1), got {self.tau_l}")
        if self.tau_r < 0:
            raise ContractError(f"tau_r must be non-negative, got {self.tau_r}")


@dataclass
class DetectionResult:
    label: int
    containment: np.ndarray
    reconstruction_error: float

    @property
    def is_unknown(self):
        return self.label == UNKNOWN

    @property
    def verdict(self):
        return "unknown" if self.is_unknown else f"known({self.label})"


def fit_class_gaussians(latents, labels, predictions, num_classes):
    """Mean and (n-1)-normalised variance of correctly classified latents per class."""
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if not (len(latents) == len(labels) == len(predictions)):
        raise ContractError("latents, labels and predictions differ in length")
    if num_classes < 1:
        raise ContractError("num_classes must be >= 1")
    out = []
    for k in range(num_classes):
        z = latents[(labels == k) & (predictions == k)]
        if len(z) < 2:
            raise InsufficientDataError(k, len(z))
        var = np.maximum(z.var(axis=0, ddof=1), VAR_FLOOR)
        out.append(ClassGaussian(k, z.mean(axis=0), var, len(z)))
    return out


def containment_probability(z, g):
    """``1 - prod_j erf(|z_j - m_j| / (sigma_j sqrt 2))``.

    This is one minus the Gaussian mass of the axis-aligned box centred on
    the class mean whose corner is ``z``; it is 1 at the mean and decays
    towards 0 as any coordinate moves away.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != g.m.shape[-1]:
        raise ContractError(f"latent dimension {z.shape[-1]} != {g.m.shape[-1]}")
    inner = erf(np.abs(z - g.m) / (g.std * math.sqrt(2.0)))
    return 1.0 - np.prod(inner, axis=-1)


def containment_matrix(latents, gaussians):
    """``[N, K]`` containment of every latent in every class Gaussian."""
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    return np.stack([containment_probability(latents, g) for g in gaussians], axis=1)


def calibrate_re_threshold(training_res, coverage=0.95):
    """Nearest-rank quantile: the ``ceil(coverage * n)``-th smallest error."""
    errs = np.sort(np.asarray(training_res, dtype=np.float64).ravel())
    if errs.size == 0:
        raise ContractError("need at least one reconstruction error")
    if not 0.0 < coverage < 1.0:
        raise ContractError("coverage must lie in (0, 1)")
    rank = math.ceil(coverage * errs.size)
    return float(errs[rank - 1])


def unknown_mask(scores, containment, recon_errors, thresholds, rule="cgd_or_re"):
    """Boolean rejection mask under one of the supported rules.

    ``softmax`` rejects when the top class score is below 0.5, ``cgd``
    when every containment value is below ``tau_l``, ``re`` when the
    reconstruction error exceeds ``tau_r``; ``cgd_or_re`` is their union.
    """
    if rule not in RULES:
        raise ContractError(f"rule must be one of {RULES}")
    if rule == "softmax":
        return np.max(scores, axis=1) < 0.5
    cgd = re = None
    if rule in ("cgd", "cgd_or_re"):
        cgd = np.all(containment < thresholds.tau_l, axis=1)
    if rule in ("re", "cgd_or_re"):
        re = np.asarray(recon_errors) > thresholds.tau_r
    if rule == "cgd":
        return cgd
    if rule == "re":
        return re
    return cgd | re


def decide(scores, containment, recon_errors, thresholds, rule="cgd_or_re"):
    """Predicted labels with ``-1`` for rejected samples; ties go to the lowest index."""
    pred = np.argmax(scores, axis=1)
    return np.where(unknown_mask(scores, containment, recon_errors, thresholds, rule), UNKNOWN, pred)


class UnknownDetector:
    """Fitted class Gaussians and thresholds; immutable once built."""

    def __init__(self, gaussians, thresholds):
        self.gaussians = list(gaussians)
        self.thresholds = thresholds

    @property
    def num_classes(self):
        return len(self.gaussians)

    @classmethod
    def fit(cls, model, train, tau_l=0.5, coverage=0.95, needs_reconstruction=True):
        inf = model.infer(train.images, with_reconstruction=needs_reconstruction)
        pred = np.argmax(inf.scores, axis=1)
        gaussians = fit_class_gaussians(inf.latent, train.labels, pred, model.config.num_classes)
        tau_r = calibrate_re_threshold(inf.recon_error, coverage) if needs_reconstruction else math.inf
        return cls(gaussians, Thresholds(tau_l, tau_r))

    def containment(self, latents):
        return containment_matrix(latents, self.gaussians)

    def predict(self, inference, rule="cgd_or_re"):
        cont = self.containment(inference.latent) if rule in ("cgd", "cgd_or_re") else None
        return decide(inference.scores, cont, inference.recon_error, self.thresholds, rule)

    def to_text(self):
        """Line-oriented export; see :func:`detector_from_text`."""
        lines = [f"thresholds {self.thresholds.tau_l:.17g} {self.thresholds.tau_r:.17g}"]
        for g in self.gaussians:
            fields = [str(g.class_id), str(len(g.m))]
            fields += [f"{v:.17g}" for v in g.m]
            fields += [f"{v:.17g}" for v in g.var]
            fields.append(str(g.count))
            lines.append("class " + " ".join(fields))
        return "\n".join(lines) + "\n"


def detector_from_text(text):
    """Parse the output of :meth:`UnknownDetector.to_text`.

    Format: first line ``thresholds <tau_l> <tau_r>``; then one line per
    class ``class <id> <J> <m_1..m_J> <var_1..var_J> <count>``.
    """
    thresholds, gaussians = None, []
    for n, line in enumerate(text.strip().splitlines(), 1):
        parts = line.split()
        if parts[0] == "thresholds" and len(parts) == 3:
            thresholds = Thresholds(float(parts[1]), float(parts[2]))
        elif parts[0] == "class" and len(parts) >= 4:
            cid, dim, count = int(parts[1]), int(parts[2]), int(parts[-1])
            values = np.array([float(v) for v in parts[3:-1]])
            if len(values) != 2 * dim:
                raise FormatError(f"line {n}: expected {2 * dim} values, found {len(values)}")
            gaussians.append(ClassGaussian(cid, values[:dim], values[dim:], count))
        else:
            raise FormatError(f"line {n}: unrecognised record {parts[0]!r}")
    if thresholds is None:
        raise FormatError("missing thresholds record")
    return UnknownDetector(gaussians, thresholds)


def detect(x, model, gaussians, thresholds):
    """Algorithm-1 decision for a single image ``x`` of shape ``[C, H, W]``."""
    gaussians = list(gaussians)
    if len(gaussians) != model.config.num_classes:
        raise ContractError(
            f"{len(gaussians)} class Gaussians for a {model.config.num_classes}-class model"
        )
    x = np.asarray(x, dtype=np.float64)
    inf = model.infer(x[None] if x.ndim == 3 else x)
    cont = containment_matrix(inf.latent, gaussians)[0]
    err = float(inf.recon_error[0])
    unknown = bool(np.all(cont < thresholds.tau_l) or err > thresholds.tau_r)
    label = UNKNOWN if unknown else int(np.argmax(inf.scores[0]))
    return DetectionResult(label, cont, err)
