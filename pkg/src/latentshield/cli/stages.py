"""Pipeline stages. Each stage reads its upstream artifacts from the run
directory, writes per-image files and records them in the manifest."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .. import diagnostics as diag
from ..attacks import AttackConfig, pgd_protect, save_result
from ..checkpoint import load_checkpoint, save_checkpoint
from ..data import DOMAINS, load_array, load_mask_png, load_png, make_dataset, read_dataset, save_png, \
    write_dataset
from ..evaluation.report import build_report
from ..models import AutoencoderConfig, DenoiserConfig, PixelDmConfig, train_ldm, train_pixel_dm
from ..threats import generate, inpaint, invert_embedding, sdedit
from .config import section_hash
from .manifest import Manifest

log = logging.getLogger(__name__)

REFERENCE_SEED_OFFSET = diag.REFERENCE_SEED_OFFSET
STAGES = ("gen-data", "train", "protect", "edit", "diagnose", "evaluate", "report")
UPSTREAM = {
    "gen-data": (),
    "train": ("gen-data",),
    "protect": ("gen-data", "train"),
    "edit": ("gen-data", "train", "protect"),
    "diagnose": ("gen-data", "train", "protect"),
    "evaluate": ("gen-data", "train", "protect", "edit"),
    "report": ("evaluate",),
}


class StageError(RuntimeError):
    kind = "stage_error"


class MissingUpstreamError(StageError):
    kind = "missing_upstream"


class OutputExistsError(StageError):
    kind = "output_exists"


def derive_seed(*parts) -> int:
    """Stable 31-bit seed from arbitrary parts (e.g. global seed, image index, method)."""
    h = hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


class Context:
    def __init__(self, cfg: dict, force: bool = False, jobs: int = 1):
        self.cfg = cfg
        self.force = force
        self.jobs = max(1, int(jobs))
        self.out = Path(cfg["output_dir"])
        self.manifest = Manifest(self.out, section_hash(cfg))

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def upstream_key(self, stage: str) -> list:
        keys = []
        for up in UPSTREAM[stage]:
            st = self.manifest.stage(up)
            if not st or st.get("status") not in ("complete", "cached"):
                raise MissingUpstreamError(f"stage {stage!r} needs {up!r} to have completed first")
            keys.append(self.manifest.artifact_digest(up))
        return keys

    def primary_bundle(self):
        return load_checkpoint(self.out / self._model_artifact("primary"))

    def optional_bundle(self, role):
        rel = self._model_artifact(role, required=False)
        return load_checkpoint(self.out / rel) if rel else None

    def _model_artifact(self, role, required=True):
        st = self.manifest.stage("train") or {}
        rel = st.get("models", {}).get(role)
        if rel is None and required:
            raise MissingUpstreamError(f"no trained {role} model recorded; run 'train' first")
        return rel


def run_stage(ctx: Context, name: str, fn, section) -> dict:
    key = section_hash(name, section, ctx.upstream_key(name))
    if not ctx.force and ctx.manifest.is_current(name, key):
        ctx.manifest.mark_cached(name)
        return {"stage": name, "status": "cached"}
    t0 = time.perf_counter()
    artifacts, extra = fn(ctx)
    ctx.manifest.record(name, key, artifacts, time.perf_counter() - t0, extra=extra)
    return {"stage": name, "status": "complete", "artifacts": len(artifacts)}


# -- gen-data -----------------------------------------------------------------------

def _gen_data(ctx):
    root = ctx.path("data")
    if root.exists() and any(root.rglob("*")) and not ctx.force:
        raise OutputExistsError(f"{root} is not empty; pass --force to overwrite")
    arts = []
    for split in ("dataset", "eval_dataset"):
        d = ctx.cfg[split]
        ds = make_dataset(d["per_domain"], d["size"], seed=d["seed"], style=d["style"])
        out = root / ("train" if split == "dataset" else "eval")
        if out.exists():
            for p in out.iterdir():
                p.unlink()
        man = write_dataset(ds, out, split)
        arts += [man] + [out / e["file"] for e in json.loads(man.read_text())["images"]]
    return arts, None


def cmd_gen_data(ctx):
    return run_stage(ctx, "gen-data", _gen_data, [ctx.cfg["dataset"], ctx.cfg["eval_dataset"]])


def _datasets(ctx):
    return read_dataset(ctx.path("data", "train", "manifest.json")), \
        read_dataset(ctx.path("data", "eval", "manifest.json"))


# -- train -------------------------------------------------------------------------

def _train(ctx):
    train, _ = _datasets(ctx)
    arts, models = [], {}
    mdir = ctx.path("models")
    mdir.mkdir(parents=True, exist_ok=True)
    for role in ("primary", "transfer", "pixel"):
        spec = ctx.cfg["models"].get(role)
        if not spec:
            continue
        dest = mdir / f"{role}.lshd"
        if spec.get("checkpoint"):
            bundle = load_checkpoint(spec["checkpoint"])
        elif role == "pixel":
            bundle = train_pixel_dm(train, PixelDmConfig(**spec.get("pixel_dm", {})))
        else:
            ae = dict(spec.get("autoencoder", {}))
            dn = dict(spec.get("denoiser", {}))
            if role == "transfer":
                ae.setdefault("seed", ctx.cfg["seed"] + 1)
                dn.setdefault("seed", ctx.cfg["seed"] + 1)
            bundle = train_ldm(train, AutoencoderConfig(**ae), DenoiserConfig(**dn))
        save_checkpoint(bundle, dest)
        arts.append(dest)
        models[role] = str(dest.relative_to(ctx.out))
    return arts, {"models": models}


def cmd_train(ctx):
    return run_stage(ctx, "train", _train, [ctx.cfg["models"], ctx.cfg["seed"]])


# -- protect -----------------------------------------------------------------------

def _image_ids(ds):
    return [f"{DOMAINS[int(l)]}_{i:05d}" for i, l in enumerate(ds.labels)]


def _protect(ctx):
    _, ev = _datasets(ctx)
    bundle = ctx.primary_bundle()
    x = torch.from_numpy(ev.images)
    ids = _image_ids(ev)
    tasks = []
    for a in ctx.cfg["attacks"]:
        for i in range(len(ids)):
            tasks.append((a, i))

    def work(task):
        a, i = task
        base = AttackConfig.from_dict(a)
        seed = derive_seed(ctx.cfg["seed"], i, a["method"], a.get("seed", 0))
        cfg = AttackConfig.from_dict({**base.to_dict(), "seed": seed})
        res = pgd_protect(x[i], bundle, cfg)
        paths = save_result(res, ctx.path("protect", a["method"]), ids[i])
        return list(paths.values())

    torch.set_num_threads(1) if ctx.jobs > 1 else None
    with ThreadPoolExecutor(max_workers=ctx.jobs) as pool:
        results = list(pool.map(work, tasks))
    return [Path(p) for r in results for p in r], None


def cmd_protect(ctx):
    return run_stage(ctx, "protect", _protect, [ctx.cfg["attacks"], ctx.cfg["seed"]])


def load_protected(ctx, method, ev):
    """Clean images plus exact stored perturbations (PNG round-trip avoided)."""
    ids = _image_ids(ev)
    deltas = np.stack([load_array(ctx.path("protect", method, f"{i}_delta.npz")) for i in ids])
    return torch.from_numpy(np.clip(ev.images + deltas, 0, 1).astype(np.float32))


def _methods(ctx):
    return [a["method"] for a in ctx.cfg["attacks"]]


# -- edit ---------------------------------------------------------------------------

def edit_label(e) -> str:
    if e["kind"] == "sdedit":
        return f"sdedit_{e['strength']:g}"
    return e["kind"]


def _edit(ctx):
    _, ev = _datasets(ctx)
    bundle = ctx.primary_bundle()
    ids = _image_ids(ev)
    x = torch.from_numpy(ev.images)
    inputs = {"clean": x} | {m: load_protected(ctx, m, ev) for m in _methods(ctx)}
    arts = []
    for e in ctx.cfg["edits"]:
        label = edit_label(e)
        seed = derive_seed(ctx.cfg["seed"], label, e.get("seed", 0))
        if e["kind"] == "embed_invert":
            arts += _embed_invert(ctx, bundle, e, ev, inputs, seed)
            continue
        runs = dict(inputs)
        if e["kind"] == "sdedit":
            edit = lambda im, s: sdedit(im, bundle, e["strength"], e.get("steps"), e.get("cond"), s)
        else:
            mask = load_mask_png(e["mask"])
            edit = lambda im, s: inpaint(im, mask, bundle, e.get("cond"), e.get("steps", 50), s)
        outs = {name: edit(im, seed) for name, im in runs.items()}
        outs["reference"] = edit(x, seed + REFERENCE_SEED_OFFSET)
        for name, imgs in outs.items():
            d = ctx.path("edit", label, name)
            d.mkdir(parents=True, exist_ok=True)
            for i, img in zip(ids, imgs):
                save_png(img.numpy(), d / f"{i}.png")
                arts.append(d / f"{i}.png")
            np.savez(d / "edits.npz", data=imgs.numpy())
            arts.append(d / "edits.npz")
    return arts, None


def _embed_invert(ctx, bundle, e, ev, inputs, seed):
    arts = []
    label = edit_label(e)
    for name, imgs in inputs.items():
        for c, dom in enumerate(DOMAINS):
            sel = imgs[torch.from_numpy(ev.labels == c)]
            if sel.shape[0] < 3:
                continue
            emb = invert_embedding(sel, bundle, e.get("iters", 2000), e.get("lr", 5e-4), seed)
            gen = generate(bundle, emb, e.get("count", 8), seed)
            d = ctx.path("edit", label, name)
            d.mkdir(parents=True, exist_ok=True)
            for k, img in enumerate(gen):
                save_png(img.numpy(), d / f"{dom}_{k:03d}.png")
                arts.append(d / f"{dom}_{k:03d}.png")
            np.save(d / f"{dom}_embedding.npy", emb.numpy())
            arts.append(d / f"{dom}_embedding.npy")
    return arts


def cmd_edit(ctx):
    return run_stage(ctx, "edit", _edit, [ctx.cfg["edits"], ctx.cfg["seed"]])


# -- evaluate ---------------------------------------------------------------------------

def _evaluate(ctx):
    _, ev = _datasets(ctx)
    bundle = ctx.primary_bundle()
    results = {}
    for m in _methods(ctx):
        side = json.loads(ctx.path("protect", m, f"{_image_ids(ev)[0]}.json").read_text()) if len(ev) else {}
        results[m] = {"x_adv": load_protected(ctx, m, ev).numpy(),
                      "seconds_per_iter": side.get("grad_seconds_per_iter", float("nan"))}
    edits = {}
    for e in ctx.cfg["edits"]:
        if e["kind"] == "embed_invert":
            continue
        label = edit_label(e)
        key = e["strength"] if e["kind"] == "sdedit" else label
        per = {}
        for name in ["reference", "clean"] + _methods(ctx):
            p = ctx.path("edit", label, name, "edits.npz")
            if p.exists():
                per[name] = load_array(p)
        edits[key] = per
    rep = build_report(ev.images, results, edits, bundle, ctx.cfg["metrics"], _image_ids(ev),
                       ctx.cfg["min_count"])
    paths = rep.write(ctx.path("evaluate"))
    return [Path(p) for p in paths.values()], {"missing": rep.missing}


def cmd_evaluate(ctx):
    return run_stage(ctx, "evaluate", _evaluate, [ctx.cfg["metrics"], ctx.cfg["min_count"], ctx.cfg["seed"]])


# -- diagnose ---------------------------------------------------------------------------

def _diagnose(ctx):
    d = ctx.cfg["diagnostics"]
    _, ev = _datasets(ctx)
    bundle = ctx.primary_bundle()
    x = torch.from_numpy(ev.images)
    out = ctx.path("diagnostics")
    out.mkdir(parents=True, exist_ok=True)
    summary, arts = {}, []
    seed = ctx.cfg["seed"]
    S = d["strength"]
    advs = {m: load_protected(ctx, m, ev) for m in _methods(ctx)}
    if d["budget_ratio"]:
        summary["budget_ratio"] = {}
        for m, xa in advs.items():
            rep = diag.budget_ratio(x, xa, bundle, ev.labels)
            arts += [rep.write_csv(out / f"budget_ratio_{m}.csv"),
                     rep.write_histogram_csv(out / f"budget_ratio_hist_{m}.csv")]
            summary["budget_ratio"][m] = {"median": rep.median(), "per_domain": rep.per_domain()}
    if d["reflection"]:
        base = diag.roundtrip_reflection(x, bundle, S, seed)
        rows = {"clean": float(base.mean())}
        for m, xa in advs.items():
            rows[m] = float(diag.roundtrip_reflection(xa, bundle, S, seed).mean())
        summary["reflection"] = rows
    if d["robustness_budgets"]:
        n = min(d["robustness_images"], len(ev))
        rows = diag.denoiser_robustness_probe(bundle, x[:n], d["robustness_budgets"], seed=seed, strength=S)
        arts.append(diag.write_rows(rows, out / "denoiser_robustness.csv"))
        summary["denoiser_robustness"] = rows
    if d["loss_curves"] and len(ev):
        n = min(d["loss_curve_images"], len(ev))
        full = AttackConfig(method="advdm", seed=seed)
        sds = AttackConfig(method="sds_plus", seed=seed)
        lc = diag.loss_curve_compare(x[:n], bundle, (full, sds))
        rows = [{"iteration": i, "full": float(a), "sds": float(b)} for i, (a, b) in enumerate(zip(lc.full, lc.sds))]
        arts.append(diag.write_rows(rows, out / "loss_curves.csv"))
        summary["loss_curves"] = {"divergence": lc.divergence, "full_seconds_per_iter": lc.full_seconds_per_iter,
                                  "sds_seconds_per_iter": lc.sds_seconds_per_iter}
    other = ctx.optional_bundle("transfer")
    if d["transfer"] and other is not None:
        summary["transfer"] = {m: {k: v for k, v in diag.transfer_probe(x, xa, bundle, other, S, seed).items()
                                   if not k.endswith("per_image")} for m, xa in advs.items()}
    pixel = ctx.optional_bundle("pixel")
    if d["pixel_probe"] and pixel is not None:
        n = min(d["pixel_probe_images"], len(ev))
        summary["pixel_probe"] = diag.pixel_dm_attack_probe(pixel, x[:n], strength=S, seed=seed,
                                                            metric_bundle=bundle)
    p = out / "summary.json"
    p.write_text(json.dumps(summary, indent=2, sort_keys=True, default=float))
    arts.append(p)
    return arts, None


def cmd_diagnose(ctx):
    return run_stage(ctx, "diagnose", _diagnose, [ctx.cfg["diagnostics"], ctx.cfg["seed"]])


# -- report -----------------------------------------------------------------------------

def _report(ctx):
    summary = json.loads(ctx.path("evaluate", "metrics.json").read_text())
    lines = ["| section | method | metric | kind | strength | mean | std | n |",
             "|---|---|---|---|---|---|---|---|"]
    for r in summary["aggregate"]:
        mean = "missing" if r["mean"] is None else f"{r['mean']:.4f}"
        std = "" if r["std"] is None else f"{r['std']:.4f}"
        lines.append(f"| {r['section']} | {r['method']} | {r['metric']} | {r['metric_kind']} | "
                     f"{r['strength']} | {mean} | {std} | {r['count']} |")
    p = ctx.path("report.md")
    p.write_text("\n".join(lines) + "\n")
    return [p], None


def cmd_report(ctx):
    return run_stage(ctx, "report", _report, [])


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "protect": cmd_protect,
    "edit": cmd_edit,
    "diagnose": cmd_diagnose,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}
