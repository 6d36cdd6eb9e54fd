"""Progressive multi-view cropping schedule for the student encoder.

Training is split into C equal stages; stage k keeps the first
1 - (k+1)/(C+1) of the reference frames, so the student sees ever shorter
prefixes. A random variant draws one of the same ratios every step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CurriculumSchedule:
    total_steps: int
    stage_count: int
    per_stage_steps: int
    ratios: tuple


@dataclass(frozen=True)
class CropView:
    kept_frames: int
    stage: int
    ratio: float
    source_frames: int

    def apply(self, mel):
        return mel[..., : self.kept_frames, :]


def make_schedule(total_steps, stage_count):
    if stage_count < 1:
        raise ValueError(f"stage_count must be >= 1, got {stage_count}")
    if total_steps < stage_count:
        raise ValueError(f"total_steps ({total_steps}) must be >= stage_count ({stage_count})")
    ratios = tuple(1.0 - (k + 1) / (stage_count + 1) for k in range(stage_count))
    return CurriculumSchedule(total_steps, stage_count, total_steps // stage_count, ratios)


def stage_for_step(sched, step):
    if not 0 <= step < sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps})")
    # the last few steps would index past the ladder without the clamp
    return min(step // sched.per_stage_steps, sched.stage_count - 1)


def stage_end_steps(sched):
    """Step counts after which each stage is complete (the last one is S)."""
    ends = [(k + 1) * sched.per_stage_steps for k in range(sched.stage_count - 1)]
    return ends + [sched.total_steps]


def crop(frames, ratio, stage=-1):
    if frames < 1:
        raise ValueError("cannot crop an empty clip")
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    kept = max(1, int(np.floor(ratio * frames)))
    return CropView(kept, stage, float(ratio), frames)


def parse_mode(mode):
    """'progressive' | 'random' | 'fixed:<k>' (also accepts 'fixed(k)')."""
    if isinstance(mode, tuple):
        return mode
    m = str(mode).strip().lower()
    if m in ("progressive", "random"):
        return (m, None)
    for prefix in ("fixed:", "fixed("):
        if m.startswith(prefix):
            try:
                return ("fixed", int(m[len(prefix):].rstrip(")")))
            except ValueError:
                break
    raise ValueError(f"invalid augmentation mode {mode!r}")


def step_rng(seed, step, stream=0):
    """Independent generator per (seed, step) so resumed runs replay exactly."""
    return np.random.default_rng([int(seed), int(step), int(stream)])


def ratio_for_step(sched, step, mode, seed=0):
    kind, k = parse_mode(mode)
    stage = stage_for_step(sched, step)
    if kind == "progressive":
        return stage, sched.ratios[stage]
    if kind == "fixed":
        if not 0 <= k < sched.stage_count:
            raise ValueError(f"fixed stage {k} outside [0, {sched.stage_count})")
        return k, sched.ratios[k]
    j = int(step_rng(seed, step, stream=1).integers(sched.stage_count))
    return j, sched.ratios[j]


def student_view(frames, sched, step, mode="progressive", seed=0):
    stage, ratio = ratio_for_step(sched, step, mode, seed)
    return crop(frames, ratio, stage)
