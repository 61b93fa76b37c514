"""``neuroencode`` command line: gen, features, fit, finetune, eval, transfer, probe, report.

Every command reads a JSON run config (``--config``), applies flag overrides,
writes its outputs under the output directory and prints a JSON summary.
On failure the files written by the failing command are removed and the exit
code is 1.

Output layout (relative to ``out``)::

    features/<model>/<story>.bin      volume-aligned features
    fits/<model>/<subject>.bin        ridge fits
    baseline/<subject>.json           pretrained test-story correlation per scope
    finetune/<subject>/<roi>/         epochs.jsonl, epochNNN.bin, best.json
    eval/<subject>_<roi>.csv          improvement per scope
    transfer/<roi>.csv                (train subject, test subject, scope) improvements
    probes/probes.csv                 probe sweep
    report/*.csv                      consolidated tables
    manifest/<command>*.json          seeds and input checksums
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import container, encoder as enc, featurize as fz, finetune as ft, probes as pr, ridge, synthdata as sd

ROI_CHOICES = sd.ROI_NAMES
SCOPES = ("all", "ac", "non_ac", "left", "right")
PRETRAINED = "pretrained"


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    dataset: Path
    out: Path
    synth: sd.DatasetConfig = field(default_factory=sd.DatasetConfig)
    train: ft.TrainConfig = field(default_factory=ft.TrainConfig)
    roi: str = "all"
    train_subjects: list[str] | None = None
    test_subjects: list[str] | None = None
    seed: int = 0
    probe: dict = field(default_factory=dict)
    source: str | None = None

    @classmethod
    def load(cls, path: str | None, overrides: argparse.Namespace) -> "RunConfig":
        raw: dict = {}
        root = Path.cwd()
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise CliError(f"config file {path} does not exist")
            raw = json.loads(p.read_text())
            root = p.resolve().parent
        seed = int(overrides.seed if overrides.seed is not None else raw.get("seed", 0))
        synth_raw = dict(raw.get("synth", {}))
        if "model" in raw:
            synth_raw.setdefault("teacher", {})["encoder"] = dict(raw["model"])
        synth = sd.DatasetConfig.from_dict(synth_raw)
        synth = replace(synth, seed=seed,
                        teacher=replace(synth.teacher, encoder=replace(synth.teacher.encoder, seed=seed)))
        train = ft.TrainConfig.from_dict({**raw.get("train", {}), "seed": seed})
        roi = overrides.roi or raw.get("roi", "all")
        if roi not in ROI_CHOICES:
            raise CliError(f"unknown roi {roi!r}; choose from {', '.join(ROI_CHOICES)}")
        train = replace(train, roi=roi)
        subjects = raw.get("subjects", {})
        out = overrides.out or raw.get("out", "runs")
        return cls(dataset=_resolve(root, raw.get("dataset", "data")), out=_resolve(root, out), synth=synth,
                   train=train, roi=roi, train_subjects=subjects.get("train"), test_subjects=subjects.get("test"),
                   seed=seed, probe=dict(raw.get("probe", {})), source=path)

    def to_dict(self) -> dict:
        return {"dataset": str(self.dataset), "out": str(self.out), "synth": self.synth.to_dict(),
                "train": self.train.to_dict(), "roi": self.roi, "seed": self.seed, "probe": self.probe,
                "subjects": {"train": self.train_subjects, "test": self.test_subjects}}


def _resolve(root: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else root / q


def n_threads() -> int:
    raw = os.environ.get("NEUROENCODE_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise CliError(f"NEUROENCODE_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise CliError("NEUROENCODE_THREADS must be at least 1")
        return n
    return os.cpu_count() or 1


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Map over a thread pool capped by ``NEUROENCODE_THREADS``; results keep input order."""
    workers = min(n_threads(), max(1, len(items)))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# output bookkeeping


class Outputs:
    """Tracks files and directories created by one command so a failure can roll them back."""

    def __init__(self):
        self.created: list[Path] = []

    def path(self, p: Path) -> Path:
        missing = []
        q = p.parent
        while not q.exists():
            missing.append(q)
            q = q.parent
        self.created.extend(reversed(missing))
        if not p.exists():
            self.created.append(p)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def rollback(self) -> None:
        for p in reversed(self.created):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def write_text(outputs: Outputs, p: Path, text: str) -> None:
    outputs.path(p).write_text(text)


def fmt(x: float) -> str:
    return f"{x:.6f}"


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def write_manifest(outputs: Outputs, cfg: RunConfig, name: str, inputs: dict[str, str], extra: dict | None = None):
    body = {"command": name, "seed": cfg.seed, "train_seed": cfg.train.seed, "dataset_seed": cfg.synth.seed,
            "config": cfg.to_dict(), "inputs": dict(sorted(inputs.items())), **(extra or {})}
    write_text(outputs, cfg.out / "manifest" / f"{name}.json", json.dumps(body, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# shared loading


class Workspace:
    """Lazily loaded dataset, base encoder and prepared stories."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        if not (cfg.dataset / "manifest.json").is_file():
            raise CliError(f"no dataset at {cfg.dataset}; run `neuroencode gen` first")
        self.ds = sd.load_dataset(cfg.dataset)
        self.base = enc.load_weights(cfg.dataset / "base_encoder.bin")
        self._prepared: dict[str, fz.PreparedStory] | None = None

    @property
    def prepared(self) -> dict[str, fz.PreparedStory]:
        if self._prepared is None:
            self._prepared = self.ds.prepare(self.base.config.window_s)
        return self._prepared

    def subjects(self, which: str = "train") -> list[str]:
        chosen = self.cfg.train_subjects if which == "train" else self.cfg.test_subjects
        ids = list(self.ds.subjects) if chosen is None else list(chosen)
        for s in ids:
            if s not in self.ds.subjects:
                raise CliError(f"unknown subject {s!r}")
        return ids

    def study(self, subject: str) -> ft.StudyData:
        split = self.ds.split
        return ft.StudyData(self.prepared, self.ds.responses[subject], split["train"], split["val"], split["test"],
                            self.ds.config.tr)

    def rois(self, subject: str) -> dict[str, np.ndarray]:
        return self.ds.rois(subject)

    def inputs(self) -> dict[str, str]:
        return {"dataset": sd.dataset_checksum(self.cfg.dataset),
                "base_encoder": container.sha256_file(self.cfg.dataset / "base_encoder.bin")}


def run_dir(cfg: RunConfig, subject: str, roi: str) -> Path:
    return cfg.out / "finetune" / subject / roi


def load_best(cfg: RunConfig, subject: str, roi: str) -> tuple[enc.EncoderWeights | None, enc.LoraAdapterSet | None,
                                                                int, Path]:
    d = run_dir(cfg, subject, roi)
    best = d / "best.json"
    if not best.is_file():
        raise CliError(f"missing fine-tuned checkpoint for subject {subject} roi {roi} ({best})")
    epoch = int(json.loads(best.read_text())["epoch"])
    path = d / f"epoch{epoch:03d}.bin"
    header, _ = container.read(path)
    if header["kind"] == "lora_adapters":
        adapters, _, _, _ = enc.load_adapters(path)
        return None, adapters, epoch, path
    return enc.load_weights(path), None, epoch, path


def scope_means(rho: np.ndarray, rois: dict[str, np.ndarray]) -> dict[str, float]:
    return {s: float(rho[rois[s]].mean()) for s in SCOPES}


def percent(model: float, pre: float) -> float:
    """Percent change of voxel-mean correlation: ``100 * (model - pre) / pre``."""
    return 100.0 * (model - pre) / pre


def heldout(ws: Workspace, weights: enc.EncoderWeights | None, adapters, subject: str) -> np.ndarray:
    return ft.heldout_scores(weights or ws.base, adapters, ws.study(subject), ws.cfg.train.cv, ws.cfg.train.delays)


def baseline(ws: Workspace, outputs: Outputs | None, subject: str) -> dict:
    """Pretrained test-story correlation per scope, cached in ``baseline/<subject>.json``."""
    path = ws.cfg.out / "baseline" / f"{subject}.json"
    if path.is_file():
        return json.loads(path.read_text())
    rho = heldout(ws, None, None, subject)
    body = {"subject": subject, "scopes": scope_means(rho, ws.rois(subject)), "per_voxel": [float(x) for x in rho]}
    if outputs is not None:
        write_text(outputs, path, json.dumps(body, sort_keys=True, indent=1) + "\n")
    return body


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig, args, outputs: Outputs) -> dict:
    if (cfg.dataset / "manifest.json").exists():
        existing = json.loads((cfg.dataset / "manifest.json").read_text())
        if existing["config"] != cfg.synth.to_dict():
            raise CliError(f"{cfg.dataset} holds a dataset generated from a different config")
    base = enc.init_encoder(cfg.synth.teacher.encoder)
    ds = sd.generate(cfg.synth, base)
    for sub in ("stories", "responses", "rois"):
        outputs.path(cfg.dataset / sub)
    outputs.path(cfg.dataset / "manifest.json")
    manifest = sd.save_dataset(ds, cfg.dataset)
    enc.save_weights(outputs.path(cfg.dataset / "base_encoder.bin"), base)
    checksum = sd.dataset_checksum(cfg.dataset)
    write_manifest(outputs, cfg, "gen", {}, {"dataset_checksum": checksum})
    return {"dataset": str(cfg.dataset), "stories": len(ds.stories), "subjects": sorted(ds.subjects),
            "split": manifest["split"], "checksum": checksum}


def _model_for(ws: Workspace, subject: str | None) -> tuple[str, enc.EncoderWeights, enc.LoraAdapterSet | None]:
    if subject is None:
        return PRETRAINED, ws.base, None
    weights, adapters, _, _ = load_best(ws.cfg, subject, ws.cfg.roi)
    return f"{subject}-{ws.cfg.roi}", weights or ws.base, adapters


def cmd_features(cfg: RunConfig, args, outputs: Outputs) -> dict:
    ws = Workspace(cfg)
    model_id, weights, adapters = _model_for(ws, args.subject)
    layer = weights.config.readout_layer
    ids = ws.ds.story_ids
    mats = parallel_map(lambda sid: fz.story_volume_features(weights, adapters, ws.prepared[sid], layer), ids)
    sums = {}
    for sid, m in zip(ids, mats):
        p = outputs.path(cfg.out / "features" / model_id / f"{sid}.bin")
        sums[sid] = fz.save_features(p, m, tr=ws.ds.config.tr, delays=list(cfg.train.delays),
                                     model_checksum=weights.checksum(), meta={"story": sid, "layer": layer})
    write_manifest(outputs, cfg, f"features-{model_id}", ws.inputs())
    return {"model": model_id, "stories": len(ids), "dim": int(mats[0].shape[1]), "checksums": sums}


def _load_or_extract(ws: Workspace, model_id: str) -> dict[str, np.ndarray]:
    d = ws.cfg.out / "features" / model_id
    if not d.is_dir():
        raise CliError(f"missing features for {model_id}; run `neuroencode features` first")
    return {sid: fz.load_features(d / f"{sid}.bin")[0] for sid in ws.ds.story_ids}


def cmd_fit(cfg: RunConfig, args, outputs: Outputs) -> dict:
    ws = Workspace(cfg)
    feats = _load_or_extract(ws, PRETRAINED)
    subjects = [args.subject] if args.subject else ws.subjects("train")
    summary = {}
    for sub in subjects:
        data = ws.study(sub)
        fit = ft.fit_encoding(feats, data.targets, data.train, cfg.train.cv, cfg.train.delays, data.tr)
        ridge.save_fit(outputs.path(cfg.out / "fits" / PRETRAINED / f"{sub}.bin"), fit, {"subject": sub})
        rho = ft.score_encoding(fit, feats, data.targets, data.test, cfg.train.delays, data.tr)
        scopes = scope_means(rho, ws.rois(sub))
        body = {"subject": sub, "scopes": scopes, "per_voxel": [float(x) for x in rho]}
        write_text(outputs, cfg.out / "baseline" / f"{sub}.json", json.dumps(body, sort_keys=True, indent=1) + "\n")
        summary[sub] = scopes
    write_manifest(outputs, cfg, "fit", ws.inputs())
    return {"baseline_rho": summary}


def cmd_finetune(cfg: RunConfig, args, outputs: Outputs) -> dict:
    ws = Workspace(cfg)
    subject = args.subject or ws.subjects("train")[0]
    if subject not in ws.ds.subjects:
        raise CliError(f"unknown subject {subject!r}")
    mask = None if cfg.roi == "all" else ws.rois(subject)[cfg.roi]
    out = outputs.path(run_dir(cfg, subject, cfg.roi))
    res = ft.finetune(ws.base, ws.study(subject), cfg.train, roi_mask=mask, out_dir=out)
    write_manifest(outputs, cfg, f"finetune-{subject}-{cfg.roi}", ws.inputs())
    return {"subject": subject, "roi": cfg.roi, "best_epoch": res.best_epoch,
            "val_rho": [r.val_rho for r in res.reports], "run_dir": str(out)}


def cmd_eval(cfg: RunConfig, args, outputs: Outputs) -> dict:
    ws = Workspace(cfg)
    subjects = [args.subject] if args.subject else [s for s in ws.subjects("train")
                                                     if (run_dir(cfg, s, cfg.roi) / "best.json").is_file()]
    if not subjects:
        raise CliError(f"no fine-tuned runs with roi {cfg.roi!r} under {cfg.out}")
    scopes = SCOPES if args.scope in (None, "all") else (args.scope,)
    summary = {}
    for sub in subjects:
        base = baseline(ws, outputs, sub)["scopes"]
        weights, adapters, epoch, ckpt = load_best(cfg, sub, cfg.roi)
        model = scope_means(heldout(ws, weights, adapters, sub), ws.rois(sub))
        rows = [[sub, cfg.roi, s, base[s], model[s], percent(model[s], base[s])] for s in scopes]
        text = csv_text(["subject", "roi_trained", "scope", "rho_pretrained", "rho_model", "percent_improvement"],
                        rows)
        write_text(outputs, cfg.out / "eval" / f"{sub}_{cfg.roi}.csv", text)
        summary[sub] = {"best_epoch": epoch, **{s: percent(model[s], base[s]) for s in scopes}}
    write_manifest(outputs, cfg, f"eval-{cfg.roi}", ws.inputs())
    return {"roi": cfg.roi, "percent_improvement": summary}


TRANSFER_SCOPES = ("all", "ac", "non_ac")


def transfer_matrix(ws: Workspace, train_subjects: Sequence[str], test_subjects: Sequence[str], roi: str,
                    outputs: Outputs | None = None) -> dict[tuple[str, str], dict[str, tuple[float, float]]]:
    """``(train, test) -> scope -> (rho_pretrained, rho_model)`` on the test subject's test story."""
    models = {s: load_best(ws.cfg, s, roi) for s in train_subjects}
    bases = {t: baseline(ws, outputs, t)["scopes"] for t in test_subjects}
    cells = [(s, t) for s in train_subjects for t in test_subjects]

    def run(cell):
        s, t = cell
        weights, adapters, _, _ = models[s]
        return scope_means(heldout(ws, weights, adapters, t), ws.rois(t))

    results = parallel_map(run, cells)
    return {cell: {sc: (bases[cell[1]][sc], res[sc]) for sc in TRANSFER_SCOPES} for cell, res in zip(cells, results)}


def cmd_transfer(cfg: RunConfig, args, outputs: Outputs) -> dict:
    ws = Workspace(cfg)
    train = ws.subjects("train")
    test = ws.subjects("test")
    for s in train:
        if not (run_dir(cfg, s, cfg.roi) / "best.json").is_file():
            raise CliError(f"missing fine-tuned checkpoint for subject {s} roi {cfg.roi}")
    mat = transfer_matrix(ws, train, test, cfg.roi, outputs)
    rows = []
    summary: dict = {sc: {} for sc in TRANSFER_SCOPES}
    for (s, t), scopes in mat.items():
        for sc, (pre, model) in scopes.items():
            rows.append([s, t, sc, pre, model, percent(model, pre)])
            summary[sc][f"{s}->{t}"] = percent(model, pre)
    text = csv_text(["train_subject", "test_subject", "scope", "rho_pretrained", "rho_model", "percent_improvement"],
                    rows)
    write_text(outputs, cfg.out / "transfer" / f"{cfg.roi}.csv", text)
    write_manifest(outputs, cfg, f"transfer-{cfg.roi}", ws.inputs())
    return {"roi": cfg.roi, "percent_improvement": summary}


def probe_models(ws: Workspace) -> dict[str, tuple[enc.EncoderWeights, enc.LoraAdapterSet | None]]:
    models = {PRETRAINED: (ws.base, None)}
    root = ws.cfg.out / "finetune"
    if root.is_dir():
        for sub_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            for roi_dir in sorted(p for p in sub_dir.iterdir() if (p / "best.json").is_file()):
                weights, adapters, _, _ = load_best(ws.cfg, sub_dir.name, roi_dir.name)
                models[f"{sub_dir.name}-{roi_dir.name}"] = (weights or ws.base, adapters)
    return models


def cmd_probe(cfg: RunConfig, args, outputs: Outputs) -> dict:
    ws = Workspace(cfg)
    pc = cfg.probe
    anchor = pc.get("anchor", "offset")
    stories = {}
    for sid, spec in ws.ds.stories.items():
        words = pr.WordAlignment(tuple((t.token_id, t.onset, t.offset) for t in spec.tokens))
        stories[sid] = pr.prepare_probe_story(ws.ds.waveforms[sid], words, ws.base.config.window_s,
                                              n_mels=int(pc.get("n_mels", 24)), anchor=anchor)
    table = pr.EmbeddingTable.seeded(ws.ds.config.vocab.n_tokens, cfg.seed)
    split = ws.ds.split
    models = probe_models(ws)
    kinds = tuple(pc.get("kinds", pr.PROBE_KINDS))
    layers = pc.get("layers")
    rows = pr.probe_sweep(models, stories, split["train"], split["val"] + split["test"], table, layers=layers,
                          kinds=kinds, cv=cfg.train.cv, anchor=anchor)
    write_text(outputs, cfg.out / "probes" / "probes.csv", pr.rows_to_csv(rows))
    write_manifest(outputs, cfg, "probe", ws.inputs())
    return {"models": sorted(models), "cells": len(rows)}


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(cfg: RunConfig, args, outputs: Outputs) -> dict:
    out = cfg.out
    run_logs = sorted((out / "finetune").glob("*/*/epochs.jsonl")) if (out / "finetune").is_dir() else []
    if not run_logs:
        raise CliError(f"no runs found under {out}")
    evals = sorted((out / "eval").glob("*.csv")) if (out / "eval").is_dir() else []
    transfers = sorted((out / "transfer").glob("*.csv")) if (out / "transfer").is_dir() else []
    probe_csv = out / "probes" / "probes.csv"
    missing = [name for name, ok in (("eval", evals), ("transfer", transfers), ("probes", probe_csv.is_file()))
               if not ok]
    if missing:
        raise CliError(f"missing inputs: {', '.join(missing)}")

    curve_rows = []
    for log in run_logs:
        reports = [json.loads(line) for line in log.read_text().splitlines() if line.strip()]
        base = reports[0]["val_rho"]
        for r in reports:
            v = r["val_rho"]
            pct = percent(v, base) if v is not None else ""
            curve_rows.append([log.parent.parent.name, log.parent.name, r["epoch"], float(r["train_loss"]),
                               float(v) if v is not None else "", float(pct) if pct != "" else ""])
    tables = {
        "curves.csv": csv_text(["subject", "roi_trained", "epoch", "train_loss", "val_rho", "val_percent_change"],
                               curve_rows),
    }
    roi_rows = []
    for p in evals:
        for r in _read_csv(p):
            roi_rows.append([r["subject"], r["roi_trained"], r["scope"], float(r["rho_pretrained"]),
                             float(r["rho_model"]), float(r["percent_improvement"])])
    tables["roi_improvement.csv"] = csv_text(
        ["subject", "roi_trained", "scope", "rho_pretrained", "rho_model", "percent_improvement"], roi_rows)
    tr_rows = []
    for p in transfers:
        for r in _read_csv(p):
            tr_rows.append([p.stem, r["train_subject"], r["test_subject"], r["scope"], float(r["percent_improvement"])])
    tables["transfer.csv"] = csv_text(["roi_trained", "train_subject", "test_subject", "scope", "percent_improvement"],
                                      tr_rows)
    tables["probes.csv"] = csv_text(["model_id", "layer", "probe_kind", "r2", "r2_minus_pretrained"],
                                    [[r["model_id"], int(r["layer"]), r["probe_kind"], float(r["r2"]),
                                      float(r["r2_minus_pretrained"])] for r in _read_csv(probe_csv)])
    for name, text in tables.items():
        write_text(outputs, out / "report" / name, text)
    return {"tables": sorted(tables), "runs": len(run_logs), "report_dir": str(out / "report")}


def cmd_all(cfg: RunConfig, args, outputs: Outputs) -> dict:
    """gen -> features -> fit -> finetune (every train subject) -> eval -> transfer -> probe -> report."""
    summary = {"gen": cmd_gen(cfg, args, outputs)}
    sub_args = argparse.Namespace(**{**vars(args), "subject": None, "scope": None})
    summary["features"] = cmd_features(cfg, sub_args, outputs)
    summary["fit"] = cmd_fit(cfg, sub_args, outputs)
    ws = Workspace(cfg)
    for s in ws.subjects("train"):
        cmd_finetune(cfg, argparse.Namespace(**{**vars(sub_args), "subject": s}), outputs)
    summary["eval"] = cmd_eval(cfg, sub_args, outputs)
    summary["transfer"] = cmd_transfer(cfg, sub_args, outputs)
    summary["probe"] = cmd_probe(cfg, sub_args, outputs)
    summary["report"] = cmd_report(cfg, sub_args, outputs)
    return summary


COMMANDS = {"gen": cmd_gen, "features": cmd_features, "fit": cmd_fit, "finetune": cmd_finetune, "eval": cmd_eval,
            "transfer": cmd_transfer, "probe": cmd_probe, "report": cmd_report, "all": cmd_all}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuroencode", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--roi", choices=ROI_CHOICES, help="voxel subset used for fine-tuning")
    parser.add_argument("--subject", help="subject id")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="seed for data generation, initialisation and batching")
    parser.add_argument("--scope", choices=SCOPES, help="eval: report a single scope (default: all scopes)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    outputs = Outputs()
    try:
        cfg = RunConfig.load(args.config, args)
        summary = COMMANDS[args.command](cfg, args, outputs)
    except (CliError, ValueError, OSError, KeyError, container.ContainerError) as exc:
        outputs.rollback()
        print(json.dumps({"command": args.command, "ok": False, "error": str(exc)}), file=sys.stderr)
        return 1
    except BaseException:
        outputs.rollback()
        raise
    print(json.dumps({"command": args.command, "ok": True, **summary}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
