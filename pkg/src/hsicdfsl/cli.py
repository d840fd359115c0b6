"""
Command-line driver.

Every subcommand reads one run configuration (``--config FILE``) with
per-key overrides (``--set section.key=value``, repeatable). Exit codes:
0 success, 1 configuration or input error, 2 numeric failure, 3 a check
or acceptance threshold was not met.
"""

import argparse
import logging
import os
import sys
import time

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import dump_config, load_config
from .errors import ConfigError, FormatError, NumericError, RenderError, SamplingError
from .hsidata import read_cube, reduce_dataset, synth_domain_pair, write_cube

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3
log = logging.getLogger("hsicdfsl")
PROG_DESCRIPTION = ("Cross-domain few-shot hyperspectral classification: synthetic data, "
                    "training, adaptation and evaluation. Exit codes: 0 ok, 1 config or "
                    "input error, 2 numeric failure, 3 check failed.")


def _load_datasets(cfg, data_dir):
    from .pipeline import Datasets, prepare_datasets

    if data_dir is None:
        return prepare_datasets(cfg)
    out = []
    for name in ("source", "target"):
        ds = read_cube(os.path.join(data_dir, f"{name}.hsic"))
        if ds.cube.shape[2] != cfg.run.pca_bands:
            ds, _ = reduce_dataset(ds, cfg.run.pca_bands)
        if ds.patch_radius != cfg.generator.patch_radius:
            raise ConfigError(f"{name}.hsic has patch radius {ds.patch_radius}",
                              "generator.patch_radius")
        out.append(ds)
    return Datasets(*out)


def _source_model(cfg, args, datasets):
    from .pipeline import run_source_phase

    if getattr(args, "checkpoint", None):
        params, extra = load_checkpoint(args.checkpoint)
        if params.config != cfg.encoder:
            raise ConfigError("checkpoint encoder differs from the configured encoder",
                              "encoder")
        return params, list(extra.get("source_losses", []))
    return run_source_phase(cfg, datasets.source, log=log.info)


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(cfg, args):
    from .pipeline import _rng

    os.makedirs(args.out, exist_ok=True)
    src, tgt = synth_domain_pair(cfg.generator, _rng(cfg.run.seed, 0))
    for name, ds in (("source", src), ("target", tgt)):
        path = os.path.join(args.out, f"{name}.hsic")
        write_cube(ds, path)
        print(f"{path}: {ds.cube.shape[0]}x{ds.cube.shape[1]}x{ds.cube.shape[2]}, "
              f"{ds.n_classes} classes")
    return EXIT_OK


def cmd_pca(cfg, args):
    ds = read_cube(args.input)
    bands = args.bands or cfg.run.pca_bands
    red, model = reduce_dataset(ds, bands)
    write_cube(red, args.out)
    total = ds.cube.reshape(-1, ds.cube.shape[2]).astype(np.float64).var(axis=0, ddof=1).sum()
    share = model.explained_variance.sum() / total if total > 0 else 1.0
    print(f"{args.out}: {ds.cube.shape[2]} -> {bands} bands, {100 * share:.2f}% of the "
          "variance kept")
    return EXIT_OK


def cmd_train_source(cfg, args):
    from .pipeline import run_source_phase

    datasets = _load_datasets(cfg, args.data)
    params, losses = run_source_phase(cfg, datasets.source, log=log.info)
    save_checkpoint(args.out, params, {"source_losses": np.array(losses)})
    tail = np.mean(losses[-50:]) if losses else float("nan")
    print(f"{args.out}: {len(losses)} source episodes, final 50-episode loss {tail:.4f}")
    return EXIT_OK


def cmd_adapt(cfg, args):
    from .pipeline import FULL, VARIANTS, _rng, run_intermediate_phase, sample_target_support

    datasets = _load_datasets(cfg, args.data)
    params, _ = load_checkpoint(args.checkpoint)
    rng = _rng(cfg.run.seed, 2, args.trial)
    sup_idx, sup_y = sample_target_support(datasets.target, cfg.run.k_shot, rng)
    variant = VARIANTS.get(args.variant, FULL)
    trace, audit = run_intermediate_phase(cfg, params, datasets, sup_idx, sup_y, rng, variant,
                                          log.info)
    save_checkpoint(args.out, params, {"support_index": sup_idx.astype(float),
                                       "trial": np.array([args.trial], dtype=float)})
    for row in trace:
        print("trace " + " ".join(f"{v:.6g}" for v in row))
    print(f"{args.out}: adapted for trial {args.trial}")
    return EXIT_OK


def cmd_eval(cfg, args):
    from .pipeline import RunReport, TrialResult, _rng, evaluate, sample_target_support
    from .report import write_report

    datasets = _load_datasets(cfg, args.data)
    params, extra = load_checkpoint(args.checkpoint)
    trial = int(extra["trial"][0]) if "trial" in extra else args.trial
    rng = _rng(cfg.run.seed, 2, trial)
    sup_idx, sup_y = sample_target_support(datasets.target, cfg.run.k_shot, rng)
    if "support_index" in extra and not np.array_equal(extra["support_index"], sup_idx):
        raise ConfigError("checkpoint was adapted on a different support draw", "run.seed")
    oa, aa, kc, cm, pmap = evaluate(cfg, params, datasets.target, sup_idx, sup_y,
                                    _rng(cfg.run.seed, 3, trial), not args.no_smooth)
    rep = RunReport("eval", list(datasets.target.class_names),
                    [TrialResult(trial, oa, aa, kc, cm.per_class_accuracy(), cm.counts,
                                 prediction_map=pmap)])
    paths = write_report(rep, cfg, args.out, figures=not args.no_figures)
    print(f"trial {trial}: OA={oa:.4f} AA={aa:.4f} KC={kc:.4f}  report: {paths['text']}")
    return EXIT_OK


def cmd_gradcheck(cfg, args):
    from .gradcheck import THRESHOLD, gradcheck

    phases = ("adapt", "warmup") if args.phase == "both" else (args.phase,)
    ok = True
    for phase in phases:
        rep = gradcheck(phase=phase, seed=cfg.run.seed)
        print("\n".join(rep.lines()))
        ok &= rep.passed(args.threshold or THRESHOLD)
    print("gradcheck " + ("PASS" if ok else "FAIL"))
    return EXIT_OK if ok else EXIT_CHECK


def cmd_dump_embeddings(cfg, args):
    from .encoder import embed

    datasets = _load_datasets(cfg, args.data)
    params, _ = load_checkpoint(args.checkpoint)
    ds = getattr(datasets, args.domain)
    idx = ds.labelled_index()
    z = np.concatenate([embed(ds.patches(idx[i:i + 512]), params)
                        for i in range(0, len(idx), 512)])
    np.savez(args.out, embeddings=z, labels=ds.labels.reshape(-1)[idx], index=idx)
    print(f"{args.out}: {z.shape[0]} embeddings of dimension {z.shape[1]}")
    return EXIT_OK


def _run(cfg, args, names):
    from .pipeline import run_variants
    from .report import ablation_lines, write_report

    t0 = time.perf_counter()
    datasets = _load_datasets(cfg, args.data)
    t1 = time.perf_counter()
    source = _source_model(cfg, args, datasets)
    t2 = time.perf_counter()
    reports, _, (params, losses) = run_variants(cfg, names, datasets, source, log.info)
    for rep in reports.values():
        rep.timings.update(data=t1 - t0, source=t2 - t1)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "source.mifo")
    save_checkpoint(ckpt, params, {"source_losses": np.array(losses)})
    with open(os.path.join(args.out, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    for rep in reports.values():
        rep.paths["checkpoint"] = "source.mifo"
        paths = write_report(rep, cfg, args.out, figures=not args.no_figures)
        print(f"[{rep.variant}] report: {paths['text']}")
    for line in ablation_lines(reports):
        print(line)
    return reports


def cmd_run(cfg, args):
    _run(cfg, args, ("full",))
    return EXIT_OK


# directional thresholds of the ablation check, in OA points
ABLATION_MARGINS = {"source-only": 10.0, "no-smoothing": 3.0, "no-intermediate": 2.0}


def ablation_verdicts(reports):
    """``[(variant, full - variant in points, margin, passed)]``."""
    full = 100 * reports["full"].summary()[0][0]
    out = []
    for name, margin in ABLATION_MARGINS.items():
        if name in reports:
            gap = full - 100 * reports[name].summary()[0][0]
            out.append((name, gap, margin, gap >= margin))
    return out


def cmd_ablate(cfg, args):
    names = ("full",) + tuple(ABLATION_MARGINS)
    reports = _run(cfg, args, names)
    ok = True
    for name, gap, margin, passed in ablation_verdicts(reports):
        print(f"{'PASS' if passed else 'FAIL'}: full - {name} = {gap:+.2f} points "
              f"(needs >= {margin:.0f})")
        ok &= passed
    return EXIT_OK if ok or not args.check else EXIT_CHECK


def cmd_show_config(cfg, args):
    sys.stdout.write(dump_config(cfg))
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="hsicdfsl", description=PROG_DESCRIPTION)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="progress logging")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.set_defaults(fn=fn)
        return s

    def data_arg(s):
        s.add_argument("--data", help="directory with source.hsic and target.hsic "
                                      "(default: generate from the config)")

    s = add("gen-data", cmd_gen_data, "write a synthetic source/target cube pair")
    s.add_argument("--out", required=True, help="output directory")
    s = add("pca", cmd_pca, "reduce a cube to its leading principal components")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--bands", type=int, help="components to keep (default run.pca_bands)")
    s = add("train-source", cmd_train_source, "source phase; writes a checkpoint")
    data_arg(s)
    s.add_argument("--out", required=True, help="checkpoint path")
    s = add("adapt", cmd_adapt, "target adaptation for one trial's support draw")
    data_arg(s)
    s.add_argument("--checkpoint", required=True, help="source checkpoint")
    s.add_argument("--trial", type=int, default=0)
    s.add_argument("--variant", default="full", choices=["full", "no-smoothing",
                                                         "no-intermediate"])
    s.add_argument("--out", required=True, help="adapted checkpoint path")
    s = add("eval", cmd_eval, "score a checkpoint on the target raster")
    data_arg(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--trial", type=int, default=0, help="support draw (read from adapted "
                                                        "checkpoints)")
    s.add_argument("--no-smooth", action="store_true", help="nearest prototype, no smoothing")
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("--out", required=True, help="report directory")
    s = add("gradcheck", cmd_gradcheck, "finite-difference audit of a tiny encoder")
    s.add_argument("--phase", default="adapt", choices=["adapt", "warmup", "both"])
    s.add_argument("--threshold", type=float, help="maximum relative error (default 1e-3)")
    s = add("dump-embeddings", cmd_dump_embeddings, "embed every labelled pixel to .npz")
    data_arg(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--domain", default="target", choices=["source", "target"])
    s.add_argument("--out", required=True)
    for name, fn, help_ in (("run", cmd_run, "full pipeline over all trials"),
                            ("ablate", cmd_ablate, "full pipeline and its ablation variants")):
        s = add(name, fn, help_)
        data_arg(s)
        s.add_argument("--checkpoint", help="reuse a source checkpoint")
        s.add_argument("--no-figures", action="store_true")
        s.add_argument("--out", required=True, help="report directory")
        if name == "ablate":
            s.add_argument("--check", action="store_true",
                           help="exit 3 when a directional threshold is missed")
    add("show-config", cmd_show_config, "print the resolved configuration")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.set)
        return args.fn(cfg, args)
    except (ConfigError, FormatError, SamplingError, RenderError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
