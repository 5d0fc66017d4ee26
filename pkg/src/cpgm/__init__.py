"""Open-set recognition with class-conditional Gaussian latents.

Two generative backbones share one detection rule: a ladder VAE
(:mod:`cpgm.ladder_vae`) and an adversarial autoencoder
(:mod:`cpgm.aae`). Both are trained with a numpy reverse-mode autodiff
engine (:mod:`cpgm.autodiff`); :mod:`cpgm.detector` fits per-class latent
Gaussians and a reconstruction-error threshold, and
:mod:`cpgm.evaluation` runs openness sweeps and ablations.
"""

from cpgm.aae import AaeConfig, CPGMAae, train_cpgm_aae
from cpgm.detector import Thresholds, UnknownDetector, containment_probability, detect
from cpgm.evaluation import macro_f1, openness
from cpgm.ladder_vae import CPGMVae, VaeConfig, train_cpgm_vae

__version__ = "0.1.0"

__all__ = [
    "AaeConfig",
    "CPGMAae",
    "CPGMVae",
    "Thresholds",
    "UnknownDetector",
    "VaeConfig",
    "containment_probability",
    "detect",
    "macro_f1",
    "openness",
    "train_cpgm_aae",
    "train_cpgm_vae",
]
