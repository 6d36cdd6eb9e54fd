"""Joint training loop: the teacher conditions the backbone, the student chases it.

One step:
  teacher(full reference mel)      -> w_t -> backbone reconstructs the mel
  student(curriculum prefix view)  -> w_s -> MAE against detached w_t
and a single Adam update on mel_weight * mel_mae + anchor_weight * anchor_mae.
With the student disabled the curriculum view is fed to the teacher instead,
so teacher-only runs still train under the curriculum.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .backbone import BackboneConfig, decode_mel, init_backbone, length_regulate, synthesize, text_encode, total_loss
from .corpus import read_manifest, split_entries
from .curriculum import crop, make_schedule, parse_mode, ratio_for_step, stage_end_steps, step_rng
from .encoders import EncoderConfig, encode, init_encoder
from .sv import init_sv

log = logging.getLogger(__name__)

N_MELS = 80


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 5000
    stage_count: int = 3
    batch_size: int = 4
    seed: int = 0
    mode: str = "progressive"
    student_enabled: bool = True
    mel_weight: float = 1.0
    anchor_weight: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    freeze_sv: bool = False
    holdout: int = 2
    log_every: int = 50
    checkpoint_every: int = 0
    vocab: int = 32
    style_dim: int = 128
    enc_hidden: int = 128
    enc_layers: int = 3
    enc_kernel: int = 3
    window: int = 32
    text_dim: int = 256
    dec_kernel: int = 3

    def __post_init__(self):
        if not self.total_steps >= self.stage_count >= 1:
            raise ConfigError("need total_steps >= stage_count >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        try:
            parse_mode(self.mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def encoder(self):
        return EncoderConfig(self.style_dim, self.enc_hidden, self.enc_layers, self.enc_kernel, self.window)

    @property
    def backbone(self):
        return BackboneConfig(self.vocab, self.text_dim, self.style_dim, N_MELS, self.dec_kernel)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _coerce(name, typ, raw):
    raw = str(raw).strip()
    if typ in (bool, "bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def config_from_pairs(pairs, base=None):
    """Build a TrainConfig from {key: string} overrides on top of `base`."""
    base = base or TrainConfig()
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kw = {}
    for key, raw in pairs.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        kw[key] = _coerce(key, fields[key], raw)
    return dataclasses.replace(base, **kw)


def parse_config_text(text):
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def load_config(path, overrides=None):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config not found: {path}")
    pairs = parse_config_text(path.read_text())
    pairs.update(overrides or {})
    return config_from_pairs(pairs)


def dump_config(cfg):
    return "".join(f"{f.name}={getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


# ---------------------------------------------------------------- model

META_KEYS = ("window", "enc_layers", "enc_kernel", "dec_kernel")


class Model:
    """All trainable weights: SV stand-in, teacher, student, backbone."""

    def __init__(self, cfg, mel_mean=None):
        self.cfg = cfg
        self.params = dc.Params()
        seed = cfg.seed
        init_sv(self.params.scope("sv"), np.random.default_rng([seed, 100]), N_MELS)
        # same seed for both encoders: they start identical and drift apart
        init_encoder(self.params.scope("teacher"), np.random.default_rng([seed, 200]), cfg.encoder)
        init_encoder(self.params.scope("student"), np.random.default_rng([seed, 200]), cfg.encoder)
        init_backbone(self.params.scope("backbone"), np.random.default_rng([seed, 300]), cfg.backbone, mel_mean)
        self.sv = self.params.scope("sv")
        self.teacher = self.params.scope("teacher")
        self.student = self.params.scope("student")
        self.backbone = self.params.scope("backbone")

    def style(self, mel, role):
        enc = self.teacher if role == "teacher" else self.student
        return encode(mel, self.sv, enc, self.cfg.encoder)

    def synth(self, tokens, durations, w):
        return synthesize(tokens, durations, w, self.backbone)

    def meta_arrays(self):
        return {f"meta.{k}": np.array([getattr(self.cfg, k)], dtype=np.float64) for k in META_KEYS}

    @classmethod
    def from_arrays(cls, arrays):
        """Rebuild a model from checkpoint arrays, inferring widths from shapes."""
        kw = {k: int(arrays[f"meta.{k}"][0]) for k in META_KEYS if f"meta.{k}" in arrays}
        vocab, text_dim = arrays["backbone.embed"].shape
        enc_hidden, style_dim = arrays["teacher.out.w"].shape
        cfg = TrainConfig(total_steps=1, stage_count=1, vocab=vocab, text_dim=text_dim,
                          enc_hidden=enc_hidden, style_dim=style_dim, **kw)
        model = cls(cfg)
        model.params.load_arrays({k: v for k, v in arrays.items() if k in model.params})
        return model


# ---------------------------------------------------------------- training

def _group(batch):
    groups = {}
    for e in batch:
        groups.setdefault((e.mel.shape[0], len(e.tokens)), []).append(e)
    return list(groups.values())


def train_step(model, opt, batch, step, cfg, sched, ratio=None):
    """One optimizer step on a batch of corpus entries; returns a loss record."""
    if ratio is None:
        stage, ratio = ratio_for_step(sched, step, cfg.mode, cfg.seed)
    else:
        stage = -1
    model.params.zero_grad()
    total = mel_sum = anchor_sum = None
    for group in _group(batch):
        frac = len(group) / len(batch)
        mel = np.stack([e.mel for e in group])
        tokens = np.stack([e.tokens for e in group])
        durations = np.stack([e.durations for e in group])
        view = crop(mel.shape[1], ratio, stage).apply(mel)
        if cfg.student_enabled:
            w_t = model.style(mel, "teacher")
            w_s = model.style(view, "student")
        else:
            w_t = model.style(view, "teacher")
            w_s = None
        mel_hat = decode_mel(length_regulate(text_encode(tokens, model.backbone), durations), w_t, model.backbone)
        loss, mel_term, anchor = total_loss(mel_hat, mel, w_s, w_t, cfg.mel_weight, cfg.anchor_weight)
        loss = dc.scale(loss, frac)
        total = loss if total is None else dc.add(total, loss)
        mel_sum = (mel_sum or 0.0) + frac * mel_term.item()
        anchor_sum = (anchor_sum or 0.0) + (frac * anchor.item() if anchor is not None else 0.0)
    total.backward()
    if cfg.freeze_sv:
        for name in model.params.names("sv."):
            model.params[name].grad = None
    opt.step(model.params)
    return {"mel_mae": mel_sum, "anchor_mae": anchor_sum, "total": total.item(),
            "stage": int(stage), "ratio": float(ratio)}


def make_optimizer(cfg):
    return dc.Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


def sample_batch(train, cfg, step):
    rng = step_rng(cfg.seed, step, stream=0)
    replace = len(train) < cfg.batch_size
    idx = rng.choice(len(train), size=cfg.batch_size, replace=replace)
    return [train[i] for i in idx]


@dataclass
class RunResult:
    model: Model
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    train: list = field(default_factory=list)
    heldout: list = field(default_factory=list)
    stopped_at: int = None


def save_state(path, model, opt, step, acc):
    arrays = dict(model.params.arrays())
    arrays.update(model.meta_arrays())
    arrays.update(opt.state_arrays())
    arrays["state.step"] = np.array([step], dtype=np.float64)
    arrays["state.acc"] = np.asarray(acc, dtype=np.float64)
    dc.save_checkpoint(path, arrays)


def load_model(path):
    return Model.from_arrays(dc.load_checkpoint(path))


def run_training(manifest, cfg, out_dir=None, resume=None, entries=None, callback=None):
    """Seeded, resumable training run.

    Writes metrics.jsonl (one line per log interval, values averaged over the
    interval), a checkpoint at the end of every curriculum stage and
    final.avck. ``entries`` may be passed to skip re-reading the manifest.
    ``callback(model, line)`` runs after each logged interval; a truthy return
    stops the run early.
    """
    if entries is None:
        entries = read_manifest(manifest)
    train, heldout = split_entries(entries, cfg.holdout)
    if not train:
        raise ValueError("no training entries after holdout split")
    sched = make_schedule(cfg.total_steps, cfg.stage_count)
    mel_mean = np.mean(np.concatenate([e.mel for e in train]), axis=0)
    model = Model(cfg, mel_mean)
    opt = make_optimizer(cfg)
    start, acc = 0, np.zeros(4)
    if resume is not None:
        arrays = dc.load_checkpoint(resume)
        try:
            model.params.load_arrays({k: v for k, v in arrays.items()
                                      if not k.startswith(("adam.", "state.", "meta."))})
            opt.load_state_arrays(arrays)
            start = int(arrays["state.step"][0])
            acc = np.array(arrays["state.acc"])
        except (KeyError, dc.ShapeError) as exc:
            raise dc.CheckpointError(f"{resume}: incompatible checkpoint ({exc})") from None

    result = RunResult(model, train=train, heldout=heldout)
    metrics_file = ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(dump_config(cfg))
        metrics_path = out_dir / "metrics.jsonl"
        kept = []
        if start > 0 and metrics_path.exists():
            kept = [ln for ln in metrics_path.read_text().splitlines()
                    if ln.strip() and json.loads(ln)["step"] <= start]
        metrics_path.write_text("".join(ln + "\n" for ln in kept))
        metrics_file = metrics_path.open("a")

    stage_ends = {s: k for k, s in enumerate(stage_end_steps(sched))}
    try:
        for step in range(start, cfg.total_steps):
            rec = train_step(model, opt, sample_batch(train, cfg, step), step, cfg, sched)
            acc += (rec["mel_mae"], rec["anchor_mae"], rec["total"], 1.0)
            done = step + 1
            if done % cfg.log_every == 0 or done == cfg.total_steps:
                line = {"step": done, "mel_mae": float(acc[0] / acc[3]), "anchor_mae": float(acc[1] / acc[3]),
                        "total": float(acc[2] / acc[3]), "stage": rec["stage"], "ratio": rec["ratio"]}
                acc = np.zeros(4)
                result.metrics.append(line)
                if metrics_file is not None:
                    metrics_file.write(json.dumps(line) + "\n")
                    metrics_file.flush()
                if callback is not None and callback(model, line):
                    result.stopped_at = done
                    break
            if ckpt_dir is not None:
                if done in stage_ends:
                    path = ckpt_dir / f"stage{stage_ends[done]}.avck"
                    save_state(path, model, opt, done, acc)
                    result.checkpoints.append(path)
                elif cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                    path = ckpt_dir / f"step{done:07d}.avck"
                    save_state(path, model, opt, done, acc)
                    result.checkpoints.append(path)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if out_dir is not None:
        final = out_dir / "final.avck"
        save_state(final, model, opt, result.stopped_at or cfg.total_steps, acc)
        result.checkpoints.append(final)
    return result
