"""
Where the adversarial autoencoder puts its classes
==================================================

The AAE latent is ``alpha * center(y) + z0``: a class centre picked by the
categorical code plus a Gaussian-regularised style part. After training
the centres sit well apart and uniform noise lands far from all of them.
Takes about a minute.
"""

import numpy as np

from cpgm.aae import AaeConfig, train_cpgm_aae
from cpgm.detector import UnknownDetector
from cpgm.evaluation import desk_data

data = desk_data(0)
config = AaeConfig(num_classes=data.num_known, seed=0, epochs=20)
result = train_cpgm_aae(data.train, config)
model = result.model
print("final epoch", {k: round(v, 4) for k, v in result.trace[-1].items()})

# pairwise distances between the scaled centres
centers = config.alpha * model.centers.data
dist = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
print("centre distances\n", np.round(dist, 2))

# per-class latent spread against centre separation
inf = model.infer(data.known_test.images)
for k in range(data.num_known):
    zk = inf.latent[data.known_test.labels == k]
    print(f"class {k}: mean distance to own centre {np.linalg.norm(zk - centers[k], axis=1).mean():.2f}")

# the detector flags noise images through the reconstruction error
detector = UnknownDetector.fit(model, data.train)
noise = data.unknown_pool["noise"]
verdicts = detector.predict(model.infer(noise.images))
print(f"noise rejected: {np.mean(verdicts == -1):.3f}; tau_r = {detector.thresholds.tau_r:.2f}")
