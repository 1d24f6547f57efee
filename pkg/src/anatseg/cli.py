"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical or
training error. Reports are written as line-delimited JSON, to ``--out``
when given and to stdout otherwise.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autoencoder as ae_mod
from . import latent, phantoms, pipeline
from .anatomy import AnatomyConfig, delta
from .clinical import evaluate_stack
from .core import StudyMetadata, load_stack, save_stack
from .errors import AnatsegError, NumericalError
from .preprocess import preprocess_stack
from .synth import SynthParams, synth_stack
from .volumetric import select_slices


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _emit(records, out=None):
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(lines, encoding="utf-8")
    else:
        sys.stdout.write(lines)


def _anatomy(args) -> AnatomyConfig:
    return AnatomyConfig.from_file(args.anatomy_config) if args.anatomy_config else AnatomyConfig()


def _k_range(text):
    try:
        lo, hi = (int(t) for t in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}")
    if not 1 <= lo <= hi:
        raise argparse.ArgumentTypeError("need 1 <= LO <= HI")
    return lo, hi


def _pair(text):
    parts = text.replace("x", ",").split(",")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or N,M, got {text!r}")
    return (vals[0], vals[0]) if len(vals) == 1 else tuple(vals[:2])


# -- subcommands --------------------------------------------------------------

def cmd_preprocess(args):
    stack, meta = load_stack(args.stack)
    out = preprocess_stack(stack, meta, args.clahe_tiles, args.clahe_clip, args.size, args.turns)
    save_stack(out, meta, args.out)


def cmd_synth(args):
    stack, meta = load_stack(args.stack)
    ref, _ = load_stack(args.ref)
    params = SynthParams(args.scar_fraction, args.blur_sigma, args.gain, args.speckle_sigma, args.seed)
    save_stack(synth_stack(stack, ref.images, params), meta, args.out)


def cmd_generate_phantoms(args):
    stack, flags = phantoms.generate_phantoms(args.n, args.size, args.seed, args.c_fraction,
                                              args.scar_fraction, args.slice_gap)
    save_stack(stack, StudyMetadata(patient_id="phantom"), args.out)
    _emit([{"slice": i, "c_shape": f} for i, f in enumerate(flags)], args.report)


def cmd_train_ae(args):
    stack, _ = load_stack(args.stack)
    masks = pipeline.training_masks(stack, args.input_size)
    cfg = ae_mod.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                             rng_seed=args.seed)
    log = (lambda e, loss: print(json.dumps({"epoch": e, "loss": loss}), file=sys.stderr)) if args.verbose else None
    model, hist = ae_mod.train_autoencoder(masks, cfg, d=args.d, log=log)
    ae_mod.save_model(model, args.out)
    if args.latents:
        np.save(args.latents, ae_mod.encode(model, masks))
    _emit([{"epoch": i, "loss": l} for i, l in enumerate(hist)], args.report)


def cmd_fit_gmm(args):
    z = np.load(args.latents)
    lo, hi = args.k_range
    sel = latent.select_model(z, range(lo, hi + 1), args.folds, args.seed)
    k = args.k if args.k is not None else sel.chosen_k
    fit = latent.fit_gmm_em(z, k, seed=args.seed)
    latent.save_gmm_bank(args.out, fit.model)
    _emit(sel.rows() + [{"fitted_k": k, "train_nll": fit.nll}], args.report)


def cmd_build_bank(args):
    model, _ = latent.load_gmm_bank(args.gmm)
    ae = ae_mod.load_model(args.ae)
    train = np.load(args.latents) if args.latents else None
    bank = latent.build_latent_bank(model, ae, _anatomy(args), args.n, args.max_trials, args.seed, train)
    latent.save_gmm_bank(args.out, model, bank)
    _emit([{"bank_size": len(bank), "acceptance_rate": bank.acceptance_rate, "trials": bank.trials,
            "training_inserted": bank.provenance.count("training")}], args.report)


def cmd_validate(args):
    stack, _ = load_stack(args.stack)
    cfg = _anatomy(args)
    recs = []
    for i, m in enumerate(stack.masks):
        if m is None:
            continue
        recs.append({"slice": i, **delta(m.myocardium, cfg).to_dict()})
    _emit(recs, args.out)
    return 0


def cmd_repair(args):
    stack, meta = load_stack(args.stack)
    ae = ae_mod.load_model(args.ae)
    _, bank = latent.load_gmm_bank(args.bank)
    fixed, reports = pipeline.repair_stack(stack, ae, bank, _anatomy(args), args.alpha_steps)
    save_stack(fixed, meta, args.out)
    _emit(reports, args.report)


def cmd_select_slices(args):
    stack, _ = load_stack(args.stack)
    _emit([select_slices(stack, args.tau).to_dict()], args.out)


def cmd_metrics(args):
    pred, _ = load_stack(args.pred)
    gt, _ = load_stack(args.gt)
    kept = args.kept
    if kept is None and args.select:
        kept = select_slices(pred, args.tau).kept
    _emit([evaluate_stack(pred, gt, kept)], args.out)


def cmd_scar(args):
    stack, _ = load_stack(args.stack)
    _emit(pipeline.scar_records(stack), args.out)


def cmd_run(args):
    cfg = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    if args.seed is not None:
        cfg["seed"] = args.seed
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    result = pipeline.run_pipeline(cfg, args.out, resume=args.resume, log=log)
    _emit([result], args.report)


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anatseg", description="Anatomically constrained cardiac MRI segmentation tools.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--config", help="JSON file whose keys provide defaults for this command's flags")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--verbose", action="store_true")
        return sp

    sp = add("preprocess", cmd_preprocess, "window, rotate, CLAHE, crop/pad and byte-scale a stack")
    sp.add_argument("--stack", required=True)
    sp.add_argument("--clahe-tiles", type=_pair, default=(8, 8))
    sp.add_argument("--clahe-clip", type=float, default=2.0)
    sp.add_argument("--size", type=int, default=192)
    sp.add_argument("--turns", type=int, default=None, help="quarter turns; default from the stack manifest")
    sp.add_argument("--out", required=True)

    sp = add("synth", cmd_synth, "make pseudo-enhanced images with known scar")
    sp.add_argument("--stack", required=True)
    sp.add_argument("--ref", required=True, help="stack of reference enhanced images")
    sp.add_argument("--scar-fraction", type=float, default=None)
    sp.add_argument("--blur-sigma", type=float, default=1.5)
    sp.add_argument("--gain", type=float, default=1.0)
    sp.add_argument("--speckle-sigma", type=float, default=0.08)
    sp.add_argument("--out", required=True)

    sp = add("generate-phantoms", cmd_generate_phantoms, "write a stack of synthetic ring phantoms")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--c-fraction", type=float, default=0.0)
    sp.add_argument("--scar-fraction", type=float, default=0.5)
    sp.add_argument("--slice-gap", type=float, default=8.0)
    sp.add_argument("--report")
    sp.add_argument("--out", required=True)

    sp = add("train-ae", cmd_train_ae, "train the mask autoencoder")
    sp.add_argument("--stack", required=True)
    sp.add_argument("--input-size", type=int, default=64)
    sp.add_argument("--d", type=int, default=16)
    sp.add_argument("--epochs", type=int, default=60)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--latents", help="also save training encodings (.npy)")
    sp.add_argument("--report")
    sp.add_argument("--out", required=True)

    sp = add("fit-gmm", cmd_fit_gmm, "select k by cross-validation and fit the latent mixture")
    sp.add_argument("--latents", required=True)
    sp.add_argument("--k-range", type=_k_range, default=(1, 8))
    sp.add_argument("--folds", type=int, default=10)
    sp.add_argument("--k", type=int, default=None, help="fit this k instead of the selected one")
    sp.add_argument("--report")
    sp.add_argument("--out", required=True)

    sp = add("build-bank", cmd_build_bank, "sample certified latent vectors")
    sp.add_argument("--gmm", required=True)
    sp.add_argument("--ae", required=True)
    sp.add_argument("--n", type=int, default=10000)
    sp.add_argument("--max-trials", type=int, default=None)
    sp.add_argument("--latents", help="training encodings to insert when valid")
    sp.add_argument("--anatomy-config")
    sp.add_argument("--report")
    sp.add_argument("--out", required=True)

    sp = add("validate", cmd_validate, "run the anatomical checks on every mask")
    sp.add_argument("--stack", required=True)
    sp.add_argument("--anatomy-config")
    sp.add_argument("--out")

    sp = add("repair", cmd_repair, "repair anatomically invalid masks")
    sp.add_argument("--stack", required=True)
    sp.add_argument("--ae", required=True)
    sp.add_argument("--bank", required=True)
    sp.add_argument("--alpha-steps", type=int, default=32)
    sp.add_argument("--anatomy-config")
    sp.add_argument("--report")
    sp.add_argument("--out", required=True)

    sp = add("select-slices", cmd_select_slices, "choose the last slice to keep")
    sp.add_argument("--stack", required=True)
    sp.add_argument("--tau", type=float, default=0.6)
    sp.add_argument("--out")

    sp = add("metrics", cmd_metrics, "compare predicted and reference stacks")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--kept", type=int, default=None)
    sp.add_argument("--select", action="store_true", help="score only the slices kept by select-slices")
    sp.add_argument("--tau", type=float, default=0.6)
    sp.add_argument("--out")

    sp = add("scar", cmd_scar, "FWHM scar quantification per slice")
    sp.add_argument("--stack", required=True)
    sp.add_argument("--out")

    sp = add("run", cmd_run, "run the whole pipeline")
    sp.set_defaults(seed=None)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--report")
    sp.add_argument("--out", required=True)
    return p


def _config_defaults(parser, argv):
    """Feed ``--config`` JSON keys to the chosen subcommand as defaults, so explicit flags win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or known.command in (None, "run"):
        return
    with open(known.config, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sp = sub.choices.get(known.command)
    if sp is None:
        return
    section = cfg.get(known.command, cfg)
    dests = {a.dest for a in sp._actions}
    vals = {k.replace("-", "_"): v for k, v in section.items() if isinstance(k, str)}
    unknown = [k for k in vals if k not in dests and k not in pipeline.STAGES]
    if section is not cfg and unknown:
        raise UsageError(f"unknown keys for {known.command}: {unknown}")
    sp.set_defaults(**{k: v for k, v in vals.items() if k in dests})
    for a in sp._actions:
        if a.dest in vals and a.required:
            a.required = False


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _config_defaults(parser, argv)
        args = parser.parse_args(argv)
        rc = args.func(args)
        return int(rc or 0)
    except UsageError as exc:
        print(f"anatseg: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except AnatsegError as exc:
        print(f"anatseg: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, OverflowError) as exc:
        print(f"anatseg: numerical error: {exc}", file=sys.stderr)
        return NumericalError.exit_code
    except (OSError, ValueError) as exc:
        print(f"anatseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
