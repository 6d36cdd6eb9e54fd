import json

import numpy as np
import pytest

from anchorvoice import diffcore as dc
from anchorvoice.corpus import ManifestError, make_synthetic_corpus, read_manifest, split_entries
from anchorvoice.curriculum import make_schedule
from anchorvoice.trainer import (ConfigError, Model, TrainConfig, config_from_pairs, dump_config, load_config,
                                 load_model, make_optimizer, parse_config_text, run_training, sample_batch,
                                 train_step)


# ---------------------------------------------------------------- corpus

def test_corpus_shape(corpus):
    path, entries = corpus
    assert len(entries) == 40
    assert len({e.speaker for e in entries}) == 4
    for e in entries:
        assert e.mel.shape == (sum(e.durations), 80)
        assert np.all(np.isfinite(e.mel))


def test_corpus_is_byte_identical_across_runs(tmp_path, corpus):
    path, _ = corpus
    again = make_synthetic_corpus(tmp_path / "again", seed=0)
    assert again.read_bytes() == path.read_bytes()
    for wav in sorted((path.parent / "wavs").iterdir()):
        assert (again.parent / "wavs" / wav.name).read_bytes() == wav.read_bytes()


def test_corpus_seed_changes_audio(tmp_path):
    a = make_synthetic_corpus(tmp_path / "a", n_speakers=2, n_utts=1, seed=1)
    b = make_synthetic_corpus(tmp_path / "b", n_speakers=2, n_utts=1, seed=2)
    assert (a.parent / "wavs/spk0_utt000.wav").read_bytes() != (b.parent / "wavs/spk0_utt000.wav").read_bytes()


def test_corpus_needs_two_speakers(tmp_path):
    with pytest.raises(ValueError):
        make_synthetic_corpus(tmp_path, n_speakers=1)


def test_manifest_errors(tmp_path, corpus):
    with pytest.raises(ManifestError, match="not found"):
        read_manifest(tmp_path / "nope.jsonl")
    m = tmp_path / "m.jsonl"
    m.write_text(json.dumps({"audio": "missing.wav", "tokens": [1], "durations": [59], "speaker": "a"}) + "\n")
    with pytest.raises(ManifestError, match="missing.wav"):
        read_manifest(m)
    wav = corpus[0].parent / "wavs" / "spk0_utt000.wav"
    m.write_text(json.dumps({"audio": str(wav), "tokens": [1, 2], "durations": [30, 30], "speaker": "a"}) + "\n")
    with pytest.raises(ManifestError, match="frames"):
        read_manifest(m)
    m.write_text("{not json\n")
    with pytest.raises(ManifestError):
        read_manifest(m)


def test_split_holds_out_last_per_speaker(corpus):
    train, held = split_entries(corpus[1], 2)
    assert len(train) == 32 and len(held) == 8
    assert sorted({e.audio[-10:] for e in held}) == ["utt008.wav", "utt009.wav"]


# ---------------------------------------------------------------- config

def test_config_text_roundtrip(tmp_path):
    cfg = TrainConfig(total_steps=123, mode="fixed:2", student_enabled=False, anchor_weight=0.5)
    p = tmp_path / "cfg.txt"
    p.write_text("# comment line\n" + dump_config(cfg))
    assert load_config(p) == cfg
    assert load_config(p, {"seed": "9"}).seed == 9


@pytest.mark.parametrize("pairs", [{"bogus": "1"}, {"total_steps": "x"}, {"student_enabled": "maybe"},
                                   {"mode": "sideways"}, {"total_steps": "2", "stage_count": "3"},
                                   {"batch_size": "0"}])
def test_config_errors(pairs):
    with pytest.raises(ConfigError):
        config_from_pairs(pairs)


def test_parse_config_text_rejects_garbage():
    with pytest.raises(ConfigError):
        parse_config_text("seed 3\n")


# ---------------------------------------------------------------- steps

def _setup(entries, cfg):
    train, _ = split_entries(entries)
    model = Model(cfg, np.mean(np.concatenate([e.mel for e in train]), axis=0))
    return model, make_optimizer(cfg), make_schedule(cfg.total_steps, cfg.stage_count), train


def test_student_disabled_leaves_student_untouched(corpus, tiny_cfg):
    cfg = tiny_cfg.replace(student_enabled=False)
    model, opt, sched, train = _setup(corpus[1], cfg)
    before = {n: model.params[n].data.copy() for n in model.params.names("student.")}
    teacher_before = model.params["teacher.out.w"].data.copy()
    for step in range(3):
        rec = train_step(model, opt, sample_batch(train, cfg, step), step, cfg, sched)
        assert rec["anchor_mae"] == 0
    for n, v in before.items():
        assert model.params[n].data.tobytes() == v.tobytes()
    assert not np.array_equal(model.params["teacher.out.w"].data, teacher_before)


def test_identical_encoders_full_view_give_zero_anchor(corpus, tiny_cfg):
    model, opt, sched, train = _setup(corpus[1], tiny_cfg)
    rec = train_step(model, opt, sample_batch(train, tiny_cfg, 0), 0, tiny_cfg, sched, ratio=1.0)
    assert rec["anchor_mae"] == 0.0
    assert rec["mel_mae"] > 0


def test_step_record_fields(corpus, tiny_cfg):
    model, opt, sched, train = _setup(corpus[1], tiny_cfg)
    rec = train_step(model, opt, sample_batch(train, tiny_cfg, 0), 0, tiny_cfg, sched)
    assert set(rec) == {"mel_mae", "anchor_mae", "total", "stage", "ratio"}
    assert rec["stage"] == 0 and rec["ratio"] == 0.75
    assert abs(rec["total"] - rec["mel_mae"] - rec["anchor_mae"]) < 1e-12
    assert rec["anchor_mae"] > 0


def test_frozen_sv_does_not_move(corpus, tiny_cfg):
    cfg = tiny_cfg.replace(freeze_sv=True)
    model, opt, sched, train = _setup(corpus[1], cfg)
    before = model.params["sv.proj.w"].data.copy()
    train_step(model, opt, sample_batch(train, cfg, 0), 0, cfg, sched)
    assert model.params["sv.proj.w"].data.tobytes() == before.tobytes()


def test_fusion_gets_gradient_from_style(corpus, tiny_cfg):
    model, opt, sched, train = _setup(corpus[1], tiny_cfg)
    train_step(model, opt, sample_batch(train, tiny_cfg, 0), 0, tiny_cfg, sched)
    assert np.linalg.norm(model.params["backbone.fuse.gain.w"].grad) > 0
    assert np.linalg.norm(model.params["teacher.out.w"].grad) > 0


# ---------------------------------------------------------------- runs

def test_stage_checkpoints_for_300_steps(tmp_path, corpus):
    from conftest import TINY
    cfg = TrainConfig(total_steps=300, stage_count=3, **{**TINY, "log_every": 100})
    res = run_training(corpus[0], cfg, tmp_path, entries=corpus[1])
    stages = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert stages == ["stage0.avck", "stage1.avck", "stage2.avck"]
    assert (tmp_path / "final.avck").is_file()
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(ln)["step"] for ln in lines] == [100, 200, 300]
    assert set(json.loads(lines[0])) == {"step", "mel_mae", "anchor_mae", "total", "stage", "ratio"}
    assert [m["ratio"] for m in res.metrics] == [0.75, 0.5, 0.25]


def test_resume_is_bit_identical(tmp_path, corpus, tiny_cfg):
    cfg = tiny_cfg.replace(checkpoint_every=25)
    run_training(corpus[0], cfg, tmp_path / "full", entries=corpus[1])
    # a run stopped after step 25: keep its checkpoint and the metrics written so far
    resumed = tmp_path / "part"
    run_training(corpus[0], cfg, resumed, entries=corpus[1])
    kept = [ln for ln in (resumed / "metrics.jsonl").read_text().splitlines() if json.loads(ln)["step"] <= 25]
    (resumed / "metrics.jsonl").write_text("".join(ln + "\n" for ln in kept) + '{"step": 999}\n')
    run_training(corpus[0], cfg, resumed, resume=resumed / "checkpoints" / "step0000025.avck", entries=corpus[1])
    full = (tmp_path / "full" / "metrics.jsonl").read_bytes()
    assert (resumed / "metrics.jsonl").read_bytes() == full
    a = dc.load_checkpoint(tmp_path / "full" / "final.avck")
    b = dc.load_checkpoint(resumed / "final.avck")
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_resume_from_stage_boundary_mid_interval(tmp_path, corpus):
    from conftest import TINY
    cfg = TrainConfig(total_steps=45, stage_count=2, **{**TINY, "log_every": 10})
    run_training(corpus[0], cfg, tmp_path / "full", entries=corpus[1])
    out = tmp_path / "res"
    run_training(corpus[0], cfg, out, entries=corpus[1])
    # stage 0 ends at step 22, in the middle of a logging interval
    run_training(corpus[0], cfg, out, resume=out / "checkpoints" / "stage0.avck", entries=corpus[1])
    assert (out / "metrics.jsonl").read_bytes() == (tmp_path / "full" / "metrics.jsonl").read_bytes()


def test_corrupt_resume_checkpoint(tmp_path, corpus, tiny_cfg):
    bad = tmp_path / "bad.avck"
    bad.write_bytes(b"AVCK\x01\x00\x00\x00\x05")
    with pytest.raises(dc.CheckpointError):
        run_training(corpus[0], tiny_cfg, resume=bad, entries=corpus[1])


def test_load_model_roundtrip(tmp_path, corpus, tiny_cfg):
    cfg = tiny_cfg.replace(total_steps=5)
    res = run_training(corpus[0], cfg, tmp_path, entries=corpus[1])
    back = load_model(tmp_path / "final.avck")
    mel = corpus[1][0].mel
    for role in ("teacher", "student"):
        assert back.style(mel, role).data.tobytes() == res.model.style(mel, role).data.tobytes()
    assert back.cfg.window == cfg.window


def test_loss_drops_over_500_steps(corpus_factory):
    for seed in range(3):
        path, entries = corpus_factory(seed)
        res = run_training(path, TrainConfig(total_steps=500, seed=seed, log_every=10), entries=entries)
        assert res.metrics[-1]["total"] < res.metrics[0]["total"]
