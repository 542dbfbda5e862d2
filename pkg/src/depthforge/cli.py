"""Command-line entry point.

Every subcommand works inside one output directory and writes
``config_resolved.json`` there. Exit codes: 0 success, 1 runtime failure,
2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from functools import cached_property
from pathlib import Path

import numpy as np

from . import baselines, cdcgan, classify, features, galatent, metrics, nncore
from .config import ConfigError, RunConfig, config_from_dict, parse_config, write_resolved
from .dataio import (FixtureConfig, fixture_arrays, fixture_generate, load_dataset, load_image,
                     normalize, read_manifest, save_image, split)
from .distill import KdConfig

log = logging.getLogger("depthforge")

METHODS = ("proposed", "gan", "gmm", "kde")
GAN_METHODS = ("proposed", "gan")
COMMANDS = {
    "fixture": "render the procedural depth-face dataset to <out>/fixture",
    "train": "train the conditional GAN (writes losses.csv and checkpoint/)",
    "generate": "write synthetic images for the chosen method",
    "evolve": "search generator latents with the genetic algorithm",
    "features": "extract fused HOG/LBP/Sobel/intensity features",
    "classify": "train and score DT/RF/GBT classifiers (runs.csv, report.json)",
    "evaluate": "compute FID/IS/SSIM/PSNR, optionally comparing run directories",
    "pipeline": "train, evolve, generate, extract, classify and evaluate in one go",
    "gradcheck": "finite-difference check of every layer kind",
}
RUN_COLUMNS = ["repeat", "scenario", "model", "test_on", "n_train", "n_test",
               "accuracy", "precision", "recall", "f1"]


class UsageError(Exception):
    """Bad combination of command-line options."""


@dataclasses.dataclass
class Context:
    run: RunConfig
    out: Path
    method: str = "proposed"
    use_ga: bool = True
    test_on: str = "real"
    repeats: int = 1
    compare: tuple = ()

    @cached_property
    def real(self):
        return load_real(self.run)

    @property
    def synth_dir(self):
        return self.out / {"gmm": "baseline_gmm", "kde": "baseline_kde"}.get(self.method, "synth")

    @property
    def kd(self):
        kd = self.run.kd
        return KdConfig(kd.tau, 0.0, 0.0) if self.method == "gan" else kd


# -- data -------------------------------------------------------------------

def load_real(run):
    """All real images (n, H, W) in [0, 1] with integer labels."""
    size = run.gan.image_size
    if run.dataio.manifest:
        manifest = read_manifest(run.dataio.manifest, run.classes)
        return load_dataset(manifest, size)
    fx = FixtureConfig(run.dataio.n_per_class, size, run.dataio.fixture_seed, run.dataio.noise)
    return fixture_arrays(fx, run.classes)


def real_split(ctx, offset=0):
    _, labels = ctx.real
    return split(labels, ctx.run.classify.split_ratio, ctx.run.dataio.split_seed + offset)


def load_synth(directory, classes):
    """Images written as ``<class>_<index>.png``, sorted by class then index."""
    imgs, labels = [], []
    for c, name in enumerate(classes):
        for p in sorted(Path(directory).glob(f"{name}_*.png")):
            imgs.append(load_image(p).pixels)
            labels.append(c)
    if not imgs:
        raise FileNotFoundError(f"no generated images in {directory}")
    return np.stack(imgs), np.array(labels, dtype=np.int64)


def write_images(directory, images, labels, classes):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stale in directory.glob("*.png"):
        stale.unlink()
    counters = {}
    for im, y in zip(images, labels):
        i = counters.get(int(y), 0)
        counters[int(y)] = i + 1
        save_image(directory / f"{classes[y]}_{i:04d}.png", im, 8)


# -- commands ---------------------------------------------------------------

def cmd_fixture(ctx):
    run = ctx.run
    fx = FixtureConfig(run.dataio.n_per_class, run.gan.image_size, run.dataio.fixture_seed,
                       run.dataio.noise)
    m = fixture_generate(fx, ctx.out / "fixture", run.classes)
    print(f"wrote {len(m)} images and manifest.csv to {ctx.out / 'fixture'}")


def _require_gan(ctx, command):
    if ctx.method not in GAN_METHODS:
        raise UsageError(f"{command} applies to --method proposed or gan, not {ctx.method}")


def cmd_train(ctx):
    _require_gan(ctx, "train")
    imgs, labels = ctx.real
    tr, _ = real_split(ctx)
    x = normalize(imgs[tr])[:, None].astype(np.float32)

    def progress(ev):
        if ev.epoch % 10 == 0 or ev.epoch == ctx.run.gan.epochs:
            log.info("epoch %d: d=%.4f g_adv=%.4f kd_g=%.5f kd_d=%.5f", *ev.row())

    cdcgan.train(x, labels[tr], ctx.run.gan, ctx.kd, ctx.out, progress=progress)
    print(f"trained {ctx.run.gan.epochs} epochs; checkpoint in {ctx.out / 'checkpoint'}")


def _generator(ctx):
    ckpt = ctx.out / "checkpoint"
    if not (ckpt / "arch.json").exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}; run train first")
    return cdcgan.sampling_generator(ckpt, use_student=ctx.method == "gan")


def cmd_evolve(ctx):
    _require_gan(ctx, "evolve")
    gen = _generator(ctx)
    galatent.evolve_all_classes(gen, ctx.run.ga, ctx.run.fitness, ctx.run.synth_per_class,
                                len(ctx.run.classes), ctx.out, list(ctx.run.classes))
    print(f"evolved latents for {len(ctx.run.classes)} classes in {ctx.out}")


def cmd_generate(ctx):
    run, n = ctx.run, ctx.run.synth_per_class
    imgs, labels = [], []
    if ctx.method in GAN_METHODS:
        gen = _generator(ctx)
        rng = np.random.default_rng([run.seed, 1])
        for c, name in enumerate(run.classes):
            if ctx.use_ga:
                path = ctx.out / f"latents_{name}.csv"
                if not path.exists():
                    raise FileNotFoundError(f"{path} missing; run evolve first")
                z = np.stack([ind.genes for ind in galatent.read_bank(path)])[:n]
            else:
                z = rng.standard_normal((n, gen.meta["latent_dim"]))
            imgs.append((cdcgan.generate(gen, z, c).astype(np.float64) + 1.0) / 2.0)
            labels.append(np.full(len(z), c))
    else:
        real, real_labels = ctx.real
        tr, _ = real_split(ctx)
        bc = run.baselines
        if ctx.method == "kde":
            sampler = baselines.kde_fit(real[tr], real_labels[tr], bc.kde_bandwidth)
            draw = lambda c: baselines.kde_sample(sampler, c, n, run.seed)  # noqa: E731
        else:
            sampler = baselines.gmm_fit(real[tr], real_labels[tr], bc.gmm_k, bc.gmm_d, run.seed,
                                        bc.gmm_max_iter, bc.gmm_tol)
            draw = lambda c: baselines.gmm_sample(sampler, c, n, run.seed)  # noqa: E731
        for c in range(len(run.classes)):
            imgs.append(draw(c))
            labels.append(np.full(n, c))
    write_images(ctx.synth_dir, np.concatenate(imgs), np.concatenate(labels), run.classes)
    print(f"wrote {sum(len(i) for i in imgs)} images to {ctx.synth_dir}")


def _features(ctx, synthetic):
    """Cached feature matrix for the real or synthetic set."""
    path = ctx.out / ("features_synth.csv" if synthetic else "features.csv")
    if path.exists():
        X, y, _ = features.read_features_csv(path, list(ctx.run.classes))
        return X, y
    if synthetic:
        imgs, labels = load_synth(ctx.synth_dir, ctx.run.classes)
    else:
        imgs, labels = ctx.real
    X, spans = features.extract(imgs, ctx.run.features)
    features.write_features_csv(path, X, labels, spans, list(ctx.run.classes))
    return X, labels


def cmd_features(ctx):
    for stale in ("features.csv", "features_synth.csv"):
        (ctx.out / stale).unlink(missing_ok=True)
    X, _ = _features(ctx, False)
    msg = f"features.csv: {X.shape[0]} x {X.shape[1]}"
    if ctx.synth_dir.exists():
        Xs, _ = _features(ctx, True)
        msg += f"; features_synth.csv: {Xs.shape[0]} x {Xs.shape[1]}"
    print(msg)


def _scenarios(ctx, Xr, yr, Xs, ys, r):
    """(name, X_train, y_train, X_test, y_test) for each training scenario."""
    ratio, seed = ctx.run.classify.split_ratio, ctx.run.dataio.split_seed + r
    rtr, rte = split(yr, ratio, seed)
    out = [("real", Xr[rtr], yr[rtr], Xr[rte], yr[rte])]
    if Xs is not None:
        str_, ste = split(ys, ratio, seed)
        if ctx.test_on == "real":
            Xt, yt = Xr[rte], yr[rte]
        else:
            Xt, yt = Xs[ste], ys[ste]
        out.append(("synthetic", Xs[str_], ys[str_], Xt, yt))
        out.append(("combined", np.concatenate([Xr[rtr], Xs[str_]]),
                    np.concatenate([yr[rtr], ys[str_]]), Xt, yt))
    return out


def cmd_classify(ctx):
    run = ctx.run
    n_classes = len(run.classes)
    Xr, yr = _features(ctx, False)
    Xs = ys = None
    if (ctx.out / "features_synth.csv").exists() or ctx.synth_dir.exists():
        Xs, ys = _features(ctx, True)
    elif ctx.test_on == "synthetic":
        raise FileNotFoundError("--test-on synthetic needs generated images; run generate first")
    rows, reports = [], {}
    for r in range(ctx.repeats):
        for scen, Xtr, ytr, Xte, yte in _scenarios(ctx, Xr, yr, Xs, ys, r):
            test_on = "real" if scen == "real" else ctx.test_on
            for kind in run.classify.models:
                model = classify.train_model(kind, Xtr, ytr, run.classify, seed=run.seed + r,
                                             n_classes=n_classes)
                rep = classify.evaluate(model.predict(Xte), yte, n_classes)
                rows.append([r, scen, kind, test_on, len(ytr), len(yte), rep.accuracy,
                             rep.precision, rep.recall, rep.f1])
                reports.setdefault(f"{scen}/{kind}", []).append(rep)
                if r == 0:
                    (ctx.out / "models").mkdir(exist_ok=True)
                    classify.save_model(ctx.out / "models" / f"{scen}_{kind}.json", model)
    with open(ctx.out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_COLUMNS)
        for row in rows:
            w.writerow(row[:6] + [repr(float(v)) for v in row[6:]])
    summary = {"method": ctx.method, "test_on": ctx.test_on, "repeats": ctx.repeats, "results": {}}
    for key, reps in reports.items():
        entry = reps[0].to_dict()
        for m in ("accuracy", "precision", "recall", "f1"):
            vals = np.array([getattr(x, m) for x in reps])
            entry[f"{m}_mean"], entry[f"{m}_std"] = float(vals.mean()), float(vals.std())
        summary["results"][key] = entry
    (ctx.out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_lda_kde(ctx, Xr, yr, Xs, ys)
    for key, reps in reports.items():
        print(f"{key}: accuracy {np.mean([x.accuracy for x in reps]):.4f} over {len(reps)} run(s)")


def _write_lda_kde(ctx, Xr, yr, Xs, ys):
    """One ``lda_kde_<class>.csv`` per class with rows (data, grid, density)."""
    sets = [("real", Xr, yr)]
    if Xs is not None:
        sets += [("synthetic", Xs, ys), ("combined", np.concatenate([Xr, Xs]), np.concatenate([yr, ys]))]
    rows = {c: [] for c in range(len(ctx.run.classes))}
    for name, X, y in sets:
        proj, _, _ = classify.lda_project(X, y, 1)
        for c in rows:
            sel = proj[y == c, 0]
            if len(sel) < 2:
                continue
            grid, dens = classify.kde1d(sel)
            rows[c].extend((name, g, d) for g, d in zip(grid, dens))
    for c, name in enumerate(ctx.run.classes):
        with open(ctx.out / f"lda_kde_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["data", "grid", "density"])
            for d, g, v in rows[c]:
                w.writerow([d, repr(float(g)), repr(float(v))])


def cmd_evaluate(ctx):
    if ctx.synth_dir.exists():
        real, real_labels = ctx.real
        synth, synth_labels = load_synth(ctx.synth_dir, ctx.run.classes)
        Xr, _ = _features(ctx, False)
        rep = metrics.evaluate_report(real, real_labels, synth, synth_labels, ctx.run.metrics,
                                      ctx.run.features, real_feats=Xr)
        doc = {"method": ctx.method, **rep.to_dict()}
        (ctx.out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        print(f"fid {rep.fid:.4f}  is {rep.is_mean:.4f}  ssim {rep.ssim_mean:.4f}  "
              f"psnr {rep.psnr_db_mean:.2f} dB")
    elif not ctx.compare:
        raise FileNotFoundError(f"no generated images in {ctx.synth_dir}")
    if ctx.compare:
        write_comparison(ctx.compare, ctx.out)


def write_comparison(run_dirs, out):
    """Collect ``metrics.json`` and ``report.json`` from run directories into
    ``comparison_metrics.csv`` and ``comparison_classify.csv``."""
    mcols = ["run", "method", "fid", "is_mean", "is_std", "ssim_mean", "psnr_db_mean"]
    ccols = ["run", "method", "scenario", "model", "test_on", "accuracy", "precision", "recall", "f1"]
    mrows, crows = [], []
    for d in map(Path, run_dirs):
        if (d / "metrics.json").exists():
            m = json.loads((d / "metrics.json").read_text())
            mrows.append([str(d)] + [m[k] for k in mcols[1:]])
        if (d / "report.json").exists():
            rep = json.loads((d / "report.json").read_text())
            for key, e in sorted(rep["results"].items()):
                scen, model = key.split("/")
                test_on = "real" if scen == "real" else rep["test_on"]
                crows.append([str(d), rep["method"], scen, model, test_on]
                             + [e[f"{k}_mean"] for k in ("accuracy", "precision", "recall", "f1")])
    for name, cols, rows in (("comparison_metrics.csv", mcols, mrows),
                             ("comparison_classify.csv", ccols, crows)):
        with open(Path(out) / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            w.writerows(rows)
    print(f"compared {len(run_dirs)} run(s) into {out}")


def cmd_pipeline(ctx):
    for stale in ("features.csv", "features_synth.csv"):
        (ctx.out / stale).unlink(missing_ok=True)
    if ctx.method in GAN_METHODS:
        cmd_train(ctx)
        if ctx.use_ga:
            cmd_evolve(ctx)
    cmd_generate(ctx)
    cmd_features(ctx)
    cmd_classify(ctx)
    cmd_evaluate(ctx)


def cmd_gradcheck(ctx):
    ok = True
    for spec in nncore.standard_gradcheck_specs():
        rep = nncore.gradient_check(spec, random_seed=ctx.run.seed)
        ok &= rep.passed
        detail = " ".join(f"{k}={v:.2e}" for k, v in rep.max_rel_err.items())
        print(f"{rep.layer:<14} {'PASS' if rep.passed else 'FAIL'}  worst {rep.worst:.3e}  ({detail})")
    return 0 if ok else 1


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# -- argument handling ------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="depthforge", description="Synthesise, evolve and evaluate depth-face images.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name])
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--out", type=Path, help="output directory (overrides config 'out')")
        p.add_argument("--seed", type=int, help="global seed (overrides config 'seed')")
        p.add_argument("--method", choices=METHODS, default="proposed")
        p.add_argument("--use-ga", action=argparse.BooleanOptionalAction, default=None,
                       help="sample evolved latents (default: config 'use_ga'; always off for gan)")
        p.add_argument("--test-on", choices=("real", "synthetic"), default="real")
        p.add_argument("--repeats", type=int, default=1, help="classification repeats")
        if name == "evaluate":
            p.add_argument("runs", nargs="*", type=Path, help="run directories to compare")
    return parser


def make_context(args):
    if args.config is not None:
        run, missing = parse_config(args.config)
        if missing:
            log.warning("defaults used for: %s", ", ".join(missing))
    else:
        run, _ = config_from_dict({})
    if args.seed is not None:
        run = run.with_overrides(seed=args.seed)
        run.gan = dataclasses.replace(run.gan, seed=args.seed)
        run.ga = dataclasses.replace(run.ga, seed=args.seed)
    if args.out is not None:
        run = run.with_overrides(out=str(args.out))
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    use_ga = run.use_ga if args.use_ga is None else args.use_ga
    if args.method == "gan":
        if args.use_ga:
            raise UsageError("--method gan runs without the GA; drop --use-ga")
        use_ga = False
    return Context(run, Path(run.out), args.method, use_ga, args.test_on, args.repeats,
                   tuple(getattr(args, "runs", ()) or ()))


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        ctx = make_context(args)
        ctx.out.mkdir(parents=True, exist_ok=True)
        write_resolved(ctx.run, ctx.out)
        code = HANDLERS[args.command](ctx)
        return int(code or 0)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and exit 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
