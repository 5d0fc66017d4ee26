"""``cpgm`` command line: train, eval, sweep, export-embeddings, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from cpgm import checkpoint, config as cfg
from cpgm.aae import (
    CPGMAae,
    aae_classification_loss,
    batch_centers,
    discriminator_loss,
    distance_loss,
    generator_loss,
    reconstruction_loss,
)
from cpgm.autodiff.gradcheck import finite_difference_check, kink_margin
from cpgm.data import concat_datasets
from cpgm.detector import UnknownDetector
from cpgm.errors import CPGMError, ConfigError
from cpgm.evaluation import (
    ModelCache,
    VAE_KINDS,
    evaluate,
    run_ablation,
    sweep_csv,
    train_model,
)
from cpgm.ladder_vae import CPGMVae, vae_loss

log = logging.getLogger("cpgm")

GRADCHECK_TOL = 1e-4
# candidate two-sample batches scanned for the one furthest from any PReLU kink
GRADCHECK_CANDIDATES = 8


def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError("--out", f"cannot create {out}: {exc.strerror}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError("--out", f"{out} is not writable")
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(v):
    return repr(float(v))


def _load_checkpoint(path, resolved):
    try:
        model = checkpoint.load(path)
    except FileNotFoundError as exc:
        raise ConfigError("--checkpoint", f"file not found: {path}") from exc
    if model.kind != resolved["model_kind"]:
        raise ConfigError("--checkpoint", f"holds a {model.kind} model but the config asks for "
                          f"{resolved['model_kind']}")
    training = cfg.experiment(resolved).training
    c = model.config
    built = getattr(c, "architecture", None) or ("cnn" if c.classifier_only else "full")
    if built != training:
        raise ConfigError("--checkpoint", f"was trained as {built!r} but mode "
                          f"{resolved['ablation_mode']!r} needs {training!r}")
    return model


# -- commands ---------------------------------------------------------------------------

def cmd_train(args, resolved):
    out = _out_dir(args.out)
    data = cfg.open_set(resolved)
    experiment = cfg.experiment(resolved)
    result = train_model(experiment, data, resolved["seed"], log=lambda row: log.info("%s", row))
    checkpoint.save(result.model, out / "model.ckpt")
    keys = list(result.trace[0])
    _write_csv(out / "loss.csv", keys,
               [[row["epoch"]] + [_fmt(row[k]) for k in keys[1:]] for row in result.trace])
    echo = dict(resolved)
    echo["model_config"] = result.model.config.to_dict()
    (out / "config.json").write_text(cfg.dumps(echo))
    log.info("wrote %s", out / "model.ckpt")
    return 0


def _test_set(data, on):
    if on == "train":
        return data.train, None, 0
    keys = sorted(data.unknown_pool, key=str)
    unknown = concat_datasets([data.unknown_pool[k] for k in keys]) if keys else None
    return data.known_test, unknown, len(keys)


def cmd_eval(args, resolved):
    out = _out_dir(args.out)
    model = _load_checkpoint(args.checkpoint, resolved)
    data = cfg.open_set(resolved)
    experiment = cfg.experiment(resolved)
    detector = None
    if experiment.rule != "softmax":
        detector = UnknownDetector.fit(model, data.train, experiment.tau_l, experiment.coverage,
                                       needs_reconstruction=experiment.rule in ("re", "cgd_or_re"))
        (out / "detector.txt").write_text(detector.to_text())
    known, unknown, count = _test_set(data, args.on)
    spec = cfg.OpennessSpec(data.num_known, data.num_known, [count])
    meta = {"model_kind": experiment.model_kind, "mode": experiment.ablation_mode,
            "seed": resolved["seed"], "on": args.on}
    report = evaluate(model, known, unknown, experiment.rule, detector, spec.openness_at(count), meta)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "confusion.csv").write_text(report.confusion_csv())
    (out / "config.json").write_text(cfg.dumps(resolved))
    print(f"macro_f1={report.macro_f1:.4f} closed_set_accuracy={report.closed_set_accuracy:.4f} "
          f"openness={report.openness:.4f}")
    return 0


def cmd_sweep(args, resolved):
    out = _out_dir(args.out)
    sweep = resolved["sweep"]
    rows = []
    for seed in sweep["seeds"]:
        data = cfg.open_set(resolved, seed)
        spec = cfg.openness_spec(resolved, data)
        grid = [cfg.experiment(resolved, mode, [seed]) for mode in sweep["modes"]]
        rows += run_ablation(grid, data, spec, ModelCache(log=lambda row: log.info("%s", row)))
    (out / "sweep.csv").write_text(sweep_csv(rows))
    reports = [p.report.to_dict() for row in rows for p in row.points]
    (out / "reports.json").write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(cfg.dumps(resolved))
    log.info("wrote %d sweep rows", sum(len(r.points) for r in rows))
    return 0


def cmd_export_embeddings(args, resolved):
    out = _out_dir(args.out)
    model = _load_checkpoint(args.checkpoint, resolved)
    data = cfg.open_set(resolved)
    known, unknown, _ = _test_set(data, args.on)
    ds = concat_datasets([known] + ([unknown] if unknown is not None else []))
    with_re = not getattr(model.config, "classifier_only", False) and \
        getattr(model.config, "architecture", "") != "cnn"
    inf = model.infer(ds.images, with_reconstruction=with_re)
    dim = inf.latent.shape[1]
    header = ["sample_id", "label"] + [f"z{j}" for j in range(dim)] + ["recon_error"]
    errors = inf.recon_error if with_re else np.full(len(ds), np.nan)
    rows = ([i, int(label)] + [_fmt(v) for v in z] + [_fmt(e)]
            for i, (label, z, e) in enumerate(zip(ds.labels, inf.latent, errors)))
    _write_csv(out / "embeddings.csv", header, rows)
    return 0


def gradcheck_losses(model, x, labels):
    """Named ``(loss closure, parameters)`` pairs covering every objective of ``model``."""
    every = model.params
    if isinstance(model, CPGMVae):
        return {"vae_loss": (lambda: vae_loss(x, labels, model, 0.5, np.random.default_rng(0))[0], every)}
    losses = {"classification": (lambda: aae_classification_loss(x, labels, model), every)}
    if not model.config.classifier_only:
        losses["reconstruction"] = (lambda: reconstruction_loss(x, model), every)
        losses["discriminator"] = (
            lambda: discriminator_loss(x, labels, model, np.random.default_rng(0)), every)
        losses["generator"] = (lambda: generator_loss(x, labels, model), every)
        # y is detached inside centre learning, so only the centres carry gradient;
        # eta is large enough that every pair sits inside the hinge
        losses["distance"] = (lambda: distance_loss(batch_centers(x, labels, model), 1e6),
                              model.group("centers."))
    return losses


def cmd_gradcheck(args, resolved):
    out = _out_dir(args.out)
    data = cfg.open_set(resolved)
    experiment = cfg.experiment(resolved)
    model_config = experiment.build_config(data.num_known, resolved["seed"], data.train.image_shape)
    model = (CPGMVae if experiment.model_kind in VAE_KINDS else CPGMAae)(model_config)
    first, second = (np.flatnonzero(data.train.labels == k) for k in range(2))
    batches = [[int(a), int(b)] for a, b in zip(first[:GRADCHECK_CANDIDATES], second)]
    margins = [min(kink_margin(fn) for fn, _ in
                   gradcheck_losses(model, data.train.images[i], data.train.labels[i]).values())
               for i in batches]
    idx = batches[int(np.argmax(margins))]
    x, labels = data.train.images[idx], data.train.labels[idx]
    log.info("gradcheck on samples %s (PReLU kink margin %.2e)", idx, max(margins))
    lines, failed = [], False
    rng = np.random.default_rng([resolved["seed"], 5])
    for name, (fn, params) in gradcheck_losses(model, x, labels).items():
        report = finite_difference_check(fn, params, step=1e-5, n_coords=args.coords,
                                         rng=rng, report=True)
        for param, err in sorted(report.per_parameter.items()):
            ok = err < GRADCHECK_TOL
            failed |= not ok
            lines.append(f"{name}\t{param}\t{err:.3e}\t{'PASS' if ok else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    (out / "gradcheck.txt").write_text(text)
    sys.stdout.write(text)
    print("gradcheck " + ("FAILED" if failed else "passed"))
    return 1 if failed else 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "export-embeddings": cmd_export_embeddings,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="cpgm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval", "export-embeddings"):
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--on", choices=("test", "train"), default="test",
                           help="evaluate known test + all unknowns, or the training set")
        if name == "gradcheck":
            p.add_argument("--coords", type=int, default=6, help="coordinates probed per tensor")
    return parser


def _thread_limit():
    raw = os.environ.get("CPGM_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError("CPGM_THREADS", f"must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("CPGM_THREADS", "must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            resolved = cfg.load(args.config, args.seed)
            return COMMANDS[args.command](args, resolved)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CPGMError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
