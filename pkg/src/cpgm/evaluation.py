"""Openness sweeps, macro-F1 over known classes plus *unknown*, ablation grids."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from cpgm.aae import AaeConfig, train_cpgm_aae
from cpgm.data import (
    GLYPHS,
    Dataset,
    SplitSpec,
    concat_datasets,
    gen_glyph_dataset,
    gen_noise_dataset,
    make_split,
)
from cpgm.detector import UNKNOWN, UnknownDetector, decide
from cpgm.errors import ContractError, DomainError, SpecError
from cpgm.ladder_vae import VaeConfig, train_cpgm_vae

VAE_KINDS = ("cpgm_vae",)
AAE_KINDS = ("cpgm_aae", "variant1", "variant2")
MODEL_KINDS = VAE_KINDS + AAE_KINDS

# mode -> (training architecture, rejection rule)
VAE_MODES = {
    "cnn": ("cnn", "softmax"),
    "cvae": ("plain", "softmax"),
    "lcvae": ("ladder", "softmax"),
    "cvae_cgd": ("plain", "cgd"),
    "lcvae_cgd": ("ladder", "cgd"),
    "lcvae_re": ("ladder", "re"),
    "full": ("ladder", "cgd_or_re"),
}
AAE_MODES = {
    "cnn": ("cnn", "softmax"),
    "caae": ("full", "softmax"),
    "caae_cgd": ("full", "cgd"),
    "caae_re": ("full", "re"),
    "full": ("full", "cgd_or_re"),
}
AAE_VARIANT = {"cpgm_aae": "cpgm", "variant1": "variant1", "variant2": "variant2"}

SWEEP_CSV_COLUMNS = ("seed", "model_kind", "mode", "unknown_count", "openness", "macro_f1", "closed_acc")


def openness(n_train, n_test, n_target):
    """``1 - sqrt(2 * n_train / (n_test + n_target))``."""
    if n_train < 1:
        raise DomainError("n_train must be >= 1")
    if n_test + n_target <= 0:
        raise DomainError("n_test + n_target must be positive")
    return 1.0 - math.sqrt(2.0 * n_train / (n_test + n_target))


def confusion_matrix(y_true, y_pred, num_known):
    """``(K+1) x (K+1)`` counts, rows = truth, last index = unknown."""
    size = num_known + 1
    t = np.where(np.asarray(y_true) == UNKNOWN, num_known, np.asarray(y_true))
    p = np.where(np.asarray(y_pred) == UNKNOWN, num_known, np.asarray(y_pred))
    out = np.zeros((size, size), dtype=np.int64)
    np.add.at(out, (t, p), 1)
    return out


def macro_f1(confusion):
    """Unweighted mean F1 over all rows (unknown included); empty classes score 0."""
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ContractError("confusion matrix must be square")
    if np.any(cm < 0):
        raise ContractError("confusion counts must be non-negative")
    per_class = []
    for c in range(cm.shape[0]):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        if tp + fp == 0 or tp + fn == 0 or tp == 0:
            per_class.append(0.0)
            continue
        precision, recall = tp / (tp + fp), tp / (tp + fn)
        per_class.append(float(2 * precision * recall / (precision + recall)))
    return float(np.mean(per_class)), per_class


@dataclass
class OpennessSpec:
    n_train: int
    n_target: int
    unknown_class_counts: list

    def __post_init__(self):
        if self.n_train < 1 or any(c < 0 for c in self.unknown_class_counts):
            raise SpecError("n_train must be >= 1 and unknown counts >= 0")

    def openness_at(self, count):
        return openness(self.n_train, self.n_target + count, self.n_target)


@dataclass
class ExperimentSpec:
    model_kind: str
    ablation_mode: str = "full"
    seeds: list = field(default_factory=lambda: [0])
    config: dict = field(default_factory=dict)
    tau_l: float = 0.5
    coverage: float = 0.95

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise SpecError(f"model_kind must be one of {MODEL_KINDS}")
        if self.ablation_mode not in self.modes:
            raise SpecError(f"mode {self.ablation_mode!r} is not defined for {self.model_kind}")

    @property
    def modes(self):
        return VAE_MODES if self.model_kind in VAE_KINDS else AAE_MODES

    @property
    def training(self):
        return self.modes[self.ablation_mode][0]

    @property
    def rule(self):
        return self.modes[self.ablation_mode][1]

    def build_config(self, num_classes, seed, input_shape):
        base = dict(self.config)
        base.update(num_classes=num_classes, seed=seed, input_shape=tuple(input_shape))
        if self.model_kind in VAE_KINDS:
            base["architecture"] = self.training
            return VaeConfig(**base)
        base["variant"] = AAE_VARIANT[self.model_kind]
        base["classifier_only"] = self.training == "cnn"
        return AaeConfig(**base)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    macro_f1: float
    openness: float
    closed_set_accuracy: float
    per_class_f1: list
    unknown_recall: float = float("nan")
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "confusion": np.asarray(self.confusion).tolist(),
            "macro_f1": self.macro_f1,
            "openness": self.openness,
            "closed_set_accuracy": self.closed_set_accuracy,
            "per_class_f1": list(self.per_class_f1),
            "unknown_recall": self.unknown_recall,
            "meta": self.meta,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def confusion_csv(self):
        k = len(self.confusion) - 1
        names = [str(i) for i in range(k)] + ["unknown"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["true\\pred"] + names)
        for name, row in zip(names, np.asarray(self.confusion)):
            writer.writerow([name] + [int(v) for v in row])
        return buf.getvalue()


def closed_set_accuracy(model, known_test):
    """Arg-max accuracy on known classes with the detector bypassed."""
    if len(known_test) == 0:
        raise ContractError("known test set is empty")
    inf = model.infer(known_test.images, with_reconstruction=False)
    return float(np.mean(np.argmax(inf.scores, axis=1) == known_test.labels))


@dataclass
class OpenSetData:
    """Known train/test data plus a pool of unknown sources.

    ``unknown_pool`` maps a source key (a held-out class id or a name such
    as ``"noise"``) to a dataset of unknown samples.
    """

    train: Dataset
    known_test: Dataset
    unknown_pool: dict
    known_classes: list

    def __post_init__(self):
        overlap = [k for k in self.unknown_pool if k in set(self.known_classes)]
        if overlap:
            raise SpecError(f"unknown pool overlaps known classes: {overlap}")

    @property
    def num_known(self):
        return len(self.known_classes)


def train_model(experiment, data, seed, log=None):
    """Train the model that ``experiment``'s mode calls for on ``data.train``."""
    cfg = experiment.build_config(data.num_known, seed, data.train.image_shape)
    if experiment.model_kind in VAE_KINDS:
        result = train_cpgm_vae(data.train, cfg, log=log)
    else:
        result = train_cpgm_aae(data.train, cfg, log=log)
    return result


def _needs_reconstruction(rule):
    return rule in ("re", "cgd_or_re")


class ModelCache:
    """Trains each (model kind, architecture, seed) once and shares it across modes."""

    def __init__(self, log=None):
        self._models = {}
        self.log = log

    def get(self, experiment, data, seed):
        key = (experiment.model_kind, experiment.training, seed, json.dumps(experiment.config, sort_keys=True))
        if key not in self._models:
            self._models[key] = train_model(experiment, data, seed, self.log)
        return self._models[key]


def evaluate(model, known_test, unknown_test, rule, detector=None, openness_value=float("nan"), meta=None):
    """Apply ``rule`` to known + unknown test samples and score the result."""
    parts = [known_test] + ([unknown_test] if unknown_test is not None and len(unknown_test) else [])
    test = concat_datasets(parts)
    inf = model.infer(test.images, with_reconstruction=_needs_reconstruction(rule))
    if rule == "softmax":
        pred = decide(inf.scores, None, None, None, "softmax")
    else:
        if detector is None:
            raise ContractError(f"rule {rule!r} needs a fitted detector")
        pred = detector.predict(inf, rule)
    k = model.config.num_classes
    cm = confusion_matrix(test.labels, pred, k)
    macro, per_class = macro_f1(cm)
    n_known = len(known_test)
    closed = float(np.mean(np.argmax(inf.scores[:n_known], axis=1) == known_test.labels))
    unknown = test.labels == UNKNOWN
    recall = float(np.mean(pred[unknown] == UNKNOWN)) if unknown.any() else float("nan")
    return MetricsReport(cm, macro, openness_value, closed, per_class, recall, dict(meta or {}))


class SweepPoint(NamedTuple):
    openness: float
    macro_f1: float
    closed_acc: float
    unknown_count: int
    sources: tuple
    report: MetricsReport


def _point_sources(pool_keys, count, seed, index):
    if count > len(pool_keys):
        raise SpecError(f"requested {count} unknown sources but the pool has {len(pool_keys)}")
    rng = np.random.default_rng([seed, 1000 + index])
    chosen = rng.choice(len(pool_keys), size=count, replace=False)
    return tuple(pool_keys[i] for i in sorted(chosen))


def sweep_trained(trained, experiment, spec, data, seed):
    """Evaluate an already trained model at every openness point of ``spec``."""
    model = trained.model
    detector = None
    if experiment.rule != "softmax":
        detector = UnknownDetector.fit(
            model, data.train, experiment.tau_l, experiment.coverage,
            needs_reconstruction=_needs_reconstruction(experiment.rule),
        )
    keys = sorted(data.unknown_pool, key=str)
    points = []
    for i, count in enumerate(spec.unknown_class_counts):
        sources = _point_sources(keys, count, seed, i)
        unknown = concat_datasets([data.unknown_pool[s] for s in sources]) if sources else None
        value = spec.openness_at(count)
        meta = {"model_kind": experiment.model_kind, "mode": experiment.ablation_mode,
                "seed": seed, "unknown_sources": [str(s) for s in sources]}
        report = evaluate(model, data.known_test, unknown, experiment.rule, detector, value, meta)
        points.append(SweepPoint(value, report.macro_f1, report.closed_set_accuracy, count, sources, report))
    return points


def run_openness_sweep(spec, experiment, data, seed=None, cache=None):
    """Train once on known classes and evaluate at each unknown-class count."""
    seed = experiment.seeds[0] if seed is None else seed
    cache = ModelCache() if cache is None else cache
    return sweep_trained(cache.get(experiment, data, seed), experiment, spec, data, seed)


class AblationRow(NamedTuple):
    model_kind: str
    mode: str
    seed: int
    points: list


def run_ablation(grid, data, spec, cache=None):
    """Sweep every experiment of ``grid`` for each of its seeds.

    Modes that share a training recipe reuse one trained model, so their
    differences come from the rejection rule alone.
    """
    cache = ModelCache() if cache is None else cache
    rows = []
    for experiment in grid:
        for seed in experiment.seeds:
            points = run_openness_sweep(spec, experiment, data, seed, cache)
            rows.append(AblationRow(experiment.model_kind, experiment.ablation_mode, seed, points))
    return rows


def sweep_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_CSV_COLUMNS)
    for row in rows:
        for p in row.points:
            writer.writerow([row.seed, row.model_kind, row.mode, p.unknown_count,
                             repr(p.openness), repr(p.macro_f1), repr(p.closed_acc)])
    return buf.getvalue()


# -- desk-scale benchmark data ---------------------------------------------------------

DESK_KNOWN = (0, 1, 2, 3)
DESK_HELDOUT = (4,)


def open_set_data(ds, known, heldout=(), noise=True, seed=0, test_fraction=0.2):
    """Split ``ds`` into known train/test and an unknown pool.

    Each held-out class becomes one pool source; ``noise`` adds a uniform
    noise source the size of the known test set.
    """
    split = make_split(ds, SplitSpec(list(known), ("heldout", list(heldout)), test_fraction, seed))
    pool = {}
    for cls in heldout:
        mask = ds.labels == cls
        if not mask.any():
            raise SpecError(f"held-out class {cls} has no samples")
        pool[int(cls)] = Dataset(ds.images[mask], np.full(int(mask.sum()), UNKNOWN))
    if noise:
        pool["noise"] = gen_noise_dataset(len(split.known_test), *ds.image_shape, seed=seed)
    return OpenSetData(split.train, split.known_test, pool, [int(c) for c in known])


def desk_data(seed, n_per_class=250, size=16, known=DESK_KNOWN, heldout=DESK_HELDOUT, noise=True):
    """Glyph images: known classes split 80/20, held-out glyphs and uniform noise as unknowns."""
    classes = sorted(set(known) | set(heldout))
    ds = gen_glyph_dataset(n_per_class, classes, size, seed)
    return open_set_data(ds, known, heldout, noise, seed)


def desk_openness_spec(data):
    k = data.num_known
    return OpennessSpec(k, k, list(range(1, len(data.unknown_pool) + 1)))


def class_names_for(known):
    return [GLYPHS[c] for c in known]
