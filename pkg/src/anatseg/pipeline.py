"""End-to-end batch pipeline with hash-stamped stages.

Stages run in order: data, synth, train-ae, fit-gmm, build-bank, target,
repair, select-slices, metrics, scar. Each writes its artifacts under the
output directory and a stamp recording the hashes of its inputs, its
configuration and its outputs; ``resume`` skips stages whose stamp still
matches.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autoencoder as ae_mod
from . import latent, phantoms
from .anatomy import AnatomyConfig, fill_holes
from .clinical import evaluate_stack, fwhm_scar
from .core import BLOOD_POOL, FIBROSIS, MYOCARDIUM, SegMask, StudyMetadata, VolumeStack, load_stack, save_stack
from .errors import AnatsegError, InputError, StageError
from .preprocess import crop_or_pad, uncrop
from .synth import SynthParams, synth_stack
from .volumetric import select_slices

STAGES = ("data", "synth", "train-ae", "fit-gmm", "build-bank", "target", "repair",
          "select-slices", "metrics", "scar")

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {"stack": None, "n": 200, "size": 64, "c_fraction": 0.0, "scar_fraction": 0.5, "slice_gap": 8.0},
    "synth": {"enabled": True, "scar_fraction": None, "blur_sigma": 1.5, "enhancement_gain": 1.0,
              "speckle_sigma": 0.08},
    "autoencoder": {"input_size": 64, "d": 16, "widths": list(ae_mod.DEFAULT_WIDTHS), "epochs": 60,
                    "batch_size": 8, "learning_rate": 1e-3},
    "gmm": {"k_range": [1, 8], "folds": 10, "k": None, "reg": latent.DEFAULT_REG},
    "bank": {"n": 10000, "max_trials": None},
    "anatomy": {},
    "repair": {"stack": None, "alpha_steps": 32, "perturb_fraction": 0.5},
    "tau": 0.6,
}


def merge_config(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if k not in out:
            raise InputError(f"unknown config key {k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            for kk in v:
                if kk not in out[k]:
                    raise InputError(f"unknown config key {k}.{kk}")
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def stage_seed(seed: int, stage: str) -> int:
    """Independent per-stage seed split from the global one."""
    return int(np.random.SeedSequence([int(seed), STAGES.index(stage)]).generate_state(1, np.uint32)[0])


# -- hashing ------------------------------------------------------------------

def hash_path(path) -> str:
    p = Path(path)
    h = hashlib.sha256()
    if p.is_dir():
        for f in sorted(q for q in p.rglob("*") if q.is_file()):
            h.update(f.relative_to(p).as_posix().encode())
            h.update(hashlib.sha256(f.read_bytes()).digest())
    elif p.is_file():
        h.update(p.read_bytes())
    else:
        return ""
    return h.hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n", encoding="utf-8")


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# -- shared stage helpers (also used by the CLI) ----------------------------

def training_masks(stack: VolumeStack, size: int) -> np.ndarray:
    """Binary myocardium of every labelled slice, centre-cropped or padded to ``size``."""
    out = [crop_or_pad(m.myocardium.astype(np.uint8), size)[0] for m in stack.masks if m is not None]
    if not out:
        raise InputError("stack has no labelled slices to train on")
    return np.array(out)


def labels_from_myocardium(old_labels, myo) -> np.ndarray:
    """Rebuild a label grid around a new myocardium; the enclosed cavity becomes blood pool."""
    old = np.asarray(old_labels)
    myo = np.asarray(myo).astype(bool)
    labels = np.zeros(old.shape, dtype=np.uint8)
    labels[fill_holes(myo) & ~myo] = BLOOD_POOL
    labels[myo] = MYOCARDIUM
    labels[myo & (old == FIBROSIS)] = FIBROSIS
    return labels


def repair_stack(stack: VolumeStack, ae: ae_mod.AeModel, bank: latent.LatentBank,
                 cfg: AnatomyConfig = AnatomyConfig(), alpha_steps: int = 32):
    """Repair every labelled, non-empty slice; returns ``(stack, per-slice reports)``."""
    out, reports = [], []
    for i, (img, mask) in enumerate(stack.slices):
        if mask is None or not mask.myocardium.any():
            reports.append({"slice": i, "action": "skipped"})
            out.append((img, mask))
            continue
        myo = mask.myocardium.astype(np.uint8)
        local, off = crop_or_pad(myo, ae.input_size)
        fixed, rep = latent.repair_mask(local, ae, bank, cfg, alpha_steps)
        reports.append({"slice": i, **rep.to_dict()})
        if rep.action == "untouched" and np.array_equal(uncrop(local, off, myo.shape), myo):
            out.append((img, mask))
            continue
        new_myo = uncrop(fixed, off, myo.shape)
        out.append((img, SegMask(labels_from_myocardium(mask.labels, new_myo))))
    return stack.with_slices(out), reports


def perturb_stack(stack: VolumeStack, fraction: float, seed: int):
    """Break the myocardium of a random subset of slices; returns ``(stack, kinds)``."""
    rng = np.random.default_rng(seed)
    out, kinds = [], []
    for img, mask in stack.slices:
        if mask is None or not mask.myocardium.any() or rng.random() >= fraction:
            out.append((img, mask))
            kinds.append(None)
            continue
        j = int(rng.integers(len(phantoms.PERTURBATIONS)))
        broken = phantoms.PERTURBATIONS[j](mask.myocardium.astype(np.uint8), rng)
        out.append((img, SegMask(labels_from_myocardium(mask.labels, broken))))
        kinds.append(phantoms.PERTURBATIONS[j].__name__.removeprefix("perturb_"))
    return stack.with_slices(out), kinds


def scar_records(stack: VolumeStack) -> list[dict]:
    recs = []
    for i, (img, mask) in enumerate(stack.slices):
        if mask is None:
            continue
        recs.append({"slice": i, **fwhm_scar(img, mask.fibrosis, img.spacing).to_dict()})
    return recs


# -- runner -------------------------------------------------------------------

class Runner:
    def __init__(self, config: dict, out, resume: bool = False, log: Optional[Callable] = None):
        self.cfg = merge_config(DEFAULT_CONFIG, config)
        self.out = Path(out)
        self.resume = resume
        self.log = log or (lambda msg: None)
        self.executed: list[str] = []
        self.skipped: list[str] = []

    def path(self, name) -> Path:
        return self.out / name

    def _stamp_path(self, stage):
        return self.out / "stamps" / f"{stage}.json"

    def _stamp(self, stage, inputs, section):
        h = hashlib.sha256(json.dumps({"section": section, "seed": self.cfg["seed"]}, sort_keys=True).encode())
        for p in inputs:
            h.update(hash_path(p).encode())
        return h.hexdigest()

    def run_stage(self, stage, inputs, outputs, section, fn):
        for p in inputs:
            if not Path(p).exists():
                raise StageError(stage, InputError(f"missing input {Path(p).name}"))
        key = self._stamp(stage, inputs, section)
        sp = self._stamp_path(stage)
        if self.resume and sp.exists():
            stamp = json.loads(sp.read_text(encoding="utf-8"))
            if stamp.get("inputs") == key and all(
                    stamp.get("outputs", {}).get(Path(o).name) == hash_path(o) for o in outputs):
                self.skipped.append(stage)
                self.log(f"{stage}: up to date")
                return
        try:
            fn()
        except StageError:
            raise
        except AnatsegError as exc:
            raise StageError(stage, exc) from exc
        except (OSError, ValueError, FloatingPointError) as exc:
            raise StageError(stage, exc) from exc
        sp.parent.mkdir(parents=True, exist_ok=True)
        _write_json(sp, {"stage": stage, "inputs": key,
                         "outputs": {Path(o).name: hash_path(o) for o in outputs}})
        self.executed.append(stage)
        self.log(f"{stage}: done")

    def run(self) -> dict:
        c = self.cfg
        seed = c["seed"]
        self.out.mkdir(parents=True, exist_ok=True)
        acfg = AnatomyConfig.from_dict(c["anatomy"])
        P = self.path

        data_dir = Path(c["data"]["stack"]) if c["data"]["stack"] else P("data")

        def do_data():
            d = c["data"]
            stack, flags = phantoms.generate_phantoms(d["n"], d["size"], stage_seed(seed, "data"),
                                                      d["c_fraction"], d["scar_fraction"], d["slice_gap"])
            save_stack(stack, StudyMetadata(patient_id="phantom"), data_dir)

        if not c["data"]["stack"]:
            self.run_stage("data", [], [data_dir], c["data"], do_data)

        synth_dir = P("synth")

        def do_synth():
            stack, meta = load_stack(data_dir)
            s = c["synth"]
            params = SynthParams(s["scar_fraction"], s["blur_sigma"], s["enhancement_gain"], s["speckle_sigma"],
                                 stage_seed(seed, "synth"))
            save_stack(synth_stack(stack, stack.images, params), meta, synth_dir)

        if c["synth"]["enabled"]:
            self.run_stage("synth", [data_dir], [synth_dir], c["synth"], do_synth)

        ae_path, lat_path = P("ae.bin"), P("latents.npy")

        def do_train():
            a = c["autoencoder"]
            stack, _ = load_stack(data_dir)
            masks = training_masks(stack, a["input_size"])
            tc = ae_mod.TrainConfig(epochs=a["epochs"], batch_size=a["batch_size"],
                                    learning_rate=a["learning_rate"], rng_seed=stage_seed(seed, "train-ae"))
            model, _ = ae_mod.train_autoencoder(masks, tc, d=a["d"], widths=tuple(a["widths"]))
            ae_mod.save_model(model, ae_path)
            np.save(lat_path, ae_mod.encode(model, masks))

        self.run_stage("train-ae", [data_dir], [ae_path, lat_path], c["autoencoder"], do_train)

        gmm_path, sel_path = P("gmm.bin"), P("gmm_selection.jsonl")

        def do_gmm():
            g = c["gmm"]
            z = np.load(lat_path)
            lo, hi = g["k_range"]
            sel = latent.select_model(z, range(lo, hi + 1), g["folds"], stage_seed(seed, "fit-gmm"), g["reg"])
            k = g["k"] if g["k"] is not None else sel.chosen_k
            fit = latent.fit_gmm_em(z, k, g["reg"], stage_seed(seed, "fit-gmm"))
            write_jsonl(sel_path, sel.rows() + [{"fitted_k": k, "train_nll": fit.nll}])
            latent.save_gmm_bank(gmm_path, fit.model)

        self.run_stage("fit-gmm", [lat_path], [gmm_path, sel_path], c["gmm"], do_gmm)

        bank_path = P("bank.bin")

        def do_bank():
            model, _ = latent.load_gmm_bank(gmm_path)
            ae = ae_mod.load_model(ae_path)
            b = c["bank"]
            bank = latent.build_latent_bank(model, ae, acfg, b["n"], b["max_trials"], stage_seed(seed, "build-bank"),
                                            training_latents=np.load(lat_path))
            latent.save_gmm_bank(bank_path, model, bank)

        self.run_stage("build-bank", [gmm_path, ae_path, lat_path], [bank_path],
                       {**c["bank"], "anatomy": c["anatomy"]}, do_bank)

        if c["repair"]["stack"]:
            target_dir = Path(c["repair"]["stack"])
        else:
            target_dir = P("target")

            def do_target():
                stack, meta = load_stack(data_dir)
                broken, kinds = perturb_stack(stack, c["repair"]["perturb_fraction"], stage_seed(seed, "target"))
                save_stack(broken, meta, target_dir)
                write_jsonl(P("target.jsonl"), [{"slice": i, "perturbation": k} for i, k in enumerate(kinds)])

            self.run_stage("target", [data_dir], [target_dir, P("target.jsonl")], c["repair"], do_target)

        rep_dir, rep_log = P("repaired"), P("repair.jsonl")

        def do_repair():
            stack, meta = load_stack(target_dir)
            ae = ae_mod.load_model(ae_path)
            _, bank = latent.load_gmm_bank(bank_path)
            fixed, reports = repair_stack(stack, ae, bank, acfg, c["repair"]["alpha_steps"])
            save_stack(fixed, meta, rep_dir)
            write_jsonl(rep_log, reports)

        self.run_stage("repair", [target_dir, ae_path, bank_path], [rep_dir, rep_log],
                       {**c["repair"], "anatomy": c["anatomy"]}, do_repair)

        sel_json = P("selection.json")

        def do_select():
            stack, _ = load_stack(rep_dir)
            _write_json(sel_json, select_slices(stack, c["tau"]).to_dict())

        self.run_stage("select-slices", [rep_dir], [sel_json], {"tau": c["tau"]}, do_select)

        metrics_json = P("metrics.json")

        def do_metrics():
            pred, _ = load_stack(rep_dir)
            gt, _ = load_stack(data_dir)
            kept = json.loads(sel_json.read_text(encoding="utf-8"))["i"] + 1
            _write_json(metrics_json, evaluate_stack(pred, gt, kept))

        if not c["repair"]["stack"]:
            self.run_stage("metrics", [rep_dir, data_dir, sel_json], [metrics_json], {}, do_metrics)

        scar_path = P("scar.jsonl")

        def do_scar():
            stack, _ = load_stack(rep_dir)
            write_jsonl(scar_path, scar_records(stack))

        self.run_stage("scar", [rep_dir], [scar_path], {}, do_scar)
        return {"executed": self.executed, "skipped": self.skipped}


def run_pipeline(config: dict, out, resume: bool = False, log=None) -> dict:
    return Runner(config, out, resume, log).run()
