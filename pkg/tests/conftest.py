"""Shared desk-scale fixtures.

Training the desk models takes a couple of minutes per seed, so one
session-wide cache serves the module tests and the acceptance suite.
"""

import functools
import time

import pytest

from cpgm.evaluation import ExperimentSpec, ModelCache, desk_data

DESK_SEEDS = (0, 1, 2)
# the VAE reaches its plateau well before the AAE does
DESK_EPOCHS = {"cpgm_vae": 10, "cpgm_aae": 20, "variant1": 20, "variant2": 20}


class DeskBench:
    def __init__(self):
        self.cache = ModelCache()
        # wall-clock training seconds per (kind, architecture, seed)
        self.train_seconds = {}

    @functools.lru_cache(maxsize=None)
    def data(self, seed):
        return desk_data(seed)

    def experiment(self, kind, mode, seed):
        return ExperimentSpec(kind, mode, [seed], {"epochs": DESK_EPOCHS[kind]})

    def trained(self, kind, mode, seed):
        experiment = self.experiment(kind, mode, seed)
        key = (kind, experiment.training, seed)
        start = time.perf_counter()
        result = self.cache.get(experiment, self.data(seed), seed)
        if key not in self.train_seconds:
            self.train_seconds[key] = time.perf_counter() - start
        return result


@pytest.fixture(scope="session")
def desk():
    return DeskBench()
