"""JSON run configuration with field-level validation.

A config names the model kind, the ablation mode, the dataset, optional
model hyper-parameters and detector thresholds. :func:`resolve` fills in
every default so the echoed result reproduces the run on its own.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from cpgm.aae import AaeConfig
from cpgm.data import load_idx
from cpgm.errors import CPGMError, ConfigError
from cpgm.evaluation import (
    AAE_MODES,
    MODEL_KINDS,
    VAE_KINDS,
    VAE_MODES,
    ExperimentSpec,
    OpennessSpec,
    desk_data,
    open_set_data,
)
from cpgm.ladder_vae import VaeConfig

TOP_FIELDS = ("model_kind", "ablation_mode", "seed", "dataset", "vae", "aae", "thresholds", "sweep")
GLYPH_DEFAULTS = {"kind": "glyphs", "n_per_class": 250, "size": 16, "known": [0, 1, 2, 3],
                  "heldout": [4], "noise": True}
IDX_DEFAULTS = {"kind": "idx", "images": None, "labels": None, "known": None,
                "heldout": [], "noise": True, "test_fraction": 0.2}
THRESHOLD_DEFAULTS = {"tau_l": 0.5, "coverage": 0.95}
# fields fixed by the model kind, mode and dataset rather than by the user
DERIVED_FIELDS = {"num_classes", "seed", "input_shape", "architecture", "variant", "classifier_only"}


def _check_keys(section, given, allowed):
    for key in given:
        if key not in allowed:
            raise ConfigError(f"{section}.{key}" if section else key, "unknown field")


def _model_section(kind):
    return "vae" if kind in VAE_KINDS else "aae"


def _model_fields(kind):
    cls = VaeConfig if kind in VAE_KINDS else AaeConfig
    return {f.name: f.default for f in dataclasses.fields(cls)
            if f.name not in DERIVED_FIELDS and f.default is not dataclasses.MISSING}


def _resolve_dataset(raw):
    if not isinstance(raw, dict):
        raise ConfigError("dataset", "must be an object")
    kind = raw.get("kind", "glyphs")
    if kind == "glyphs":
        out = dict(GLYPH_DEFAULTS)
    elif kind == "idx":
        out = dict(IDX_DEFAULTS)
    else:
        raise ConfigError("dataset.kind", f"must be 'glyphs' or 'idx', got {kind!r}")
    _check_keys("dataset", raw, out)
    out.update(raw)
    if kind == "idx":
        for key in ("images", "labels", "known"):
            if out[key] is None:
                raise ConfigError(f"dataset.{key}", "is required for idx datasets")
    if not out["known"] or len(out["known"]) < 2:
        raise ConfigError("dataset.known", "needs at least two classes")
    overlap = set(out["known"]) & set(out["heldout"])
    if overlap:
        raise ConfigError("dataset.heldout", f"classes {sorted(overlap)} are also known")
    return out


def resolve(raw, seed=None):
    """Validate ``raw`` and return it with every default materialised."""
    if not isinstance(raw, dict):
        raise ConfigError("config", "must be a JSON object")
    _check_keys("", raw, TOP_FIELDS)
    if "model_kind" not in raw:
        raise ConfigError("model_kind", "is required")
    kind = raw["model_kind"]
    if kind not in MODEL_KINDS:
        raise ConfigError("model_kind", f"must be one of {list(MODEL_KINDS)}, got {kind!r}")
    modes = VAE_MODES if kind in VAE_KINDS else AAE_MODES
    mode = raw.get("ablation_mode", "full")
    if mode not in modes:
        raise ConfigError("ablation_mode", f"must be one of {list(modes)} for {kind}")
    section = _model_section(kind)
    other = "aae" if section == "vae" else "vae"
    if other in raw:
        raise ConfigError(other, f"not allowed for model_kind {kind!r}; use '{section}'")
    seed = raw.get("seed", 0) if seed is None else seed
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")

    model = _model_fields(kind)
    given = raw.get(section, {})
    if not isinstance(given, dict):
        raise ConfigError(section, "must be an object")
    _check_keys(section, given, model)
    model.update(given)
    for key, value in model.items():
        if isinstance(value, tuple):
            model[key] = list(value)

    thresholds = dict(THRESHOLD_DEFAULTS)
    _check_keys("thresholds", raw.get("thresholds", {}), thresholds)
    thresholds.update(raw.get("thresholds", {}))

    sweep = {"modes": list(modes), "seeds": [seed], "unknown_class_counts": None}
    _check_keys("sweep", raw.get("sweep", {}), sweep)
    sweep.update(raw.get("sweep", {}))
    bad = [m for m in sweep["modes"] if m not in modes]
    if bad:
        raise ConfigError("sweep.modes", f"{bad} are not modes of {kind}")

    resolved = {
        "model_kind": kind,
        "ablation_mode": mode,
        "seed": seed,
        "dataset": _resolve_dataset(raw.get("dataset", {})),
        section: model,
        "thresholds": thresholds,
        "sweep": sweep,
    }
    # build once so type and range problems surface as config errors
    try:
        experiment(resolved).build_config(2, seed, (1, 16, 16))
    except (TypeError, CPGMError) as exc:
        raise ConfigError(section, str(exc)) from exc
    return resolved


def load(path, seed=None):
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError("--config", f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return resolve(raw, seed)


def dumps(resolved):
    return json.dumps(resolved, indent=2, sort_keys=True) + "\n"


def experiment(resolved, mode=None, seeds=None):
    kind = resolved["model_kind"]
    t = resolved["thresholds"]
    try:
        return ExperimentSpec(
            kind,
            mode or resolved["ablation_mode"],
            list(seeds or [resolved["seed"]]),
            dict(resolved[_model_section(kind)]),
            t["tau_l"],
            t["coverage"],
        )
    except CPGMError as exc:
        raise ConfigError("ablation_mode", str(exc)) from exc


def open_set(resolved, seed=None):
    """Build the known/unknown data the config describes."""
    d = resolved["dataset"]
    seed = resolved["seed"] if seed is None else seed
    if d["kind"] == "glyphs":
        return desk_data(seed, d["n_per_class"], d["size"], d["known"], d["heldout"], d["noise"])
    ds = load_idx(d["images"], d["labels"])
    return open_set_data(ds, d["known"], d["heldout"], d["noise"], seed, d["test_fraction"])


def openness_spec(resolved, data):
    counts = resolved["sweep"]["unknown_class_counts"]
    if counts is None:
        counts = list(range(1, len(data.unknown_pool) + 1))
    k = data.num_known
    return OpennessSpec(k, k, list(counts))
