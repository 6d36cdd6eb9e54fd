"""Objective evaluation: speaker similarity, held-out mel error, anchor agreement.

Phoneme error rate needs an external recognizer, so held-out mel MAE between
synthesized and ground-truth mels stands in as the articulation-fidelity
score. Reports label it as such.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .curriculum import crop, make_schedule
from .sv import embed_utterance

PER_SURROGATE = "mel_mae (held-out synthesized vs ground-truth log-mel; PER surrogate)"


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def speaker_similarity(synth_mel, ref_mel, sv):
    a = embed_utterance(np.asarray(synth_mel), sv).data
    b = embed_utterance(np.asarray(ref_mel), sv).data
    return cosine_similarity(a, b)


@dataclass
class EvalReport:
    group: str
    records: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def finalize(self):
        keys = [k for k in self.records[0] if isinstance(self.records[0][k], float)] if self.records else []
        self.aggregates = {f"mean_{k}": float(np.mean([r[k] for r in self.records])) for k in keys}
        self.aggregates["count"] = len(self.records)
        return self

    def to_dict(self):
        return {"group": self.group, "metric_note": PER_SURROGATE,
                "aggregates": self.aggregates, "records": self.records}


def _reference_for(entries, i):
    """Another utterance of the same speaker (cyclic), or the entry itself."""
    spk = entries[i].speaker
    same = [j for j, e in enumerate(entries) if e.speaker == spk]
    pos = same.index(i)
    return entries[same[(pos + 1) % len(same)]]


def evaluate(model, entries, group="", ref_ratio=None):
    """Zero-shot style evaluation on `entries`.

    Each utterance is synthesized from its tokens and durations, conditioned on
    a short prefix (``ref_ratio``, default the shortest curriculum ratio) of a
    different utterance by the same speaker. The student encodes the reference
    when it is enabled, otherwise the teacher does.
    """
    cfg = model.cfg
    if ref_ratio is None:
        ref_ratio = make_schedule(max(cfg.stage_count, 1), cfg.stage_count).ratios[-1]
    role = "student" if cfg.student_enabled else "teacher"
    report = EvalReport(group or f"{role}:{cfg.mode}")
    for i, e in enumerate(entries):
        ref = _reference_for(entries, i)
        ref_view = crop(ref.mel.shape[0], ref_ratio).apply(ref.mel)
        w = model.style(ref_view, role).data
        synth = model.synth(e.tokens, e.durations, w).data
        own_view = crop(e.mel.shape[0], ref_ratio).apply(e.mel)
        w_t = model.style(e.mel, "teacher").data
        w_s = model.style(own_view, "student").data
        report.records.append({
            "id": Path(e.audio).stem,
            "mode": report.group,
            "speaker": e.speaker,
            "cosine_sim": speaker_similarity(synth, e.mel, model.sv),
            "mel_mae": float(np.mean(np.abs(synth - e.mel))),
            "anchor_mae": float(np.mean(np.abs(w_s - w_t))),
            "anchor_cos": cosine_similarity(w_s, w_t),
        })
    return report.finalize()


def teacher_forced_mae(model, entries):
    """Reconstruction error with the teacher encoding each utterance's own full mel."""
    errs = []
    for e in entries:
        w = model.style(e.mel, "teacher").data
        errs.append(float(np.mean(np.abs(model.synth(e.tokens, e.durations, w).data - e.mel))))
    return float(np.mean(errs))


def write_report(report_or_reports, json_path=None, csv_path=None):
    reports = report_or_reports if isinstance(report_or_reports, list) else [report_or_reports]
    if json_path is not None:
        Path(json_path).write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "mode", "cosine_sim", "mel_mae"])
            for r in reports:
                for rec in r.records:
                    w.writerow([rec["id"], rec["mode"], repr(rec["cosine_sim"]), repr(rec["mel_mae"])])


def compare_modes(manifest, cfg_progressive, cfg_random, out_dir=None, entries=None, train_fn=None):
    """Train the progressive and random curricula on identical data and seeds.

    ``train_fn`` defaults to trainer.run_training; callers may pass a caching
    wrapper with the same signature.
    """
    from .corpus import read_manifest
    from .trainer import run_training

    train_fn = train_fn or run_training
    a = {k: v for k, v in asdict(cfg_progressive).items() if k != "mode"}
    b = {k: v for k, v in asdict(cfg_random).items() if k != "mode"}
    if a != b:
        diff = sorted(k for k in a if a[k] != b[k])
        raise ValueError(f"runs must share data, seed and settings apart from mode; differ in {diff}")
    if entries is None:
        entries = read_manifest(manifest)
    reports = []
    for i, cfg in enumerate((cfg_progressive, cfg_random)):
        sub = None if out_dir is None else Path(out_dir) / f"run{i}_{cfg.mode.replace(':', '_')}"
        run = train_fn(manifest, cfg, sub, entries=entries)
        reports.append(evaluate(run.model, run.heldout, group=cfg.mode))
    p, r = reports
    summary = {
        "modes": [p.group, r.group],
        "mean_cosine_sim": [p.aggregates["mean_cosine_sim"], r.aggregates["mean_cosine_sim"]],
        "mean_mel_mae": [p.aggregates["mean_mel_mae"], r.aggregates["mean_mel_mae"]],
        "cosine_gap_random_minus_progressive": r.aggregates["mean_cosine_sim"] - p.aggregates["mean_cosine_sim"],
        "mel_mae_gap_random_minus_progressive": r.aggregates["mean_mel_mae"] - p.aggregates["mean_mel_mae"],
        "metric_note": PER_SURROGATE,
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_report(reports, out_dir / "compare.json", out_dir / "compare.csv")
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return reports, summary
