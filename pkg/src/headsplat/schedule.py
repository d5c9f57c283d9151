"""Three-phase learning-rate schedule: linear warmup, constant peak, exponential decay."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field


@dataclass(frozen=True)
class GroupSchedule:
    peak: float
    start: float = 1e-10
    warmup: float = 0.2  # fraction of total iterations
    stable_end: float = 0.8  # fraction of total iterations
    end: float | None = None  # defaults to peak / 100

    def __post_init__(self):
        if self.start > self.peak:
            raise ValueError("start rate must not exceed the peak rate")
        if not 0.0 <= self.warmup <= self.stable_end <= 1.0:
            raise ValueError("need 0 <= warmup <= stable_end <= 1")

    @property
    def end_rate(self):
        return self.peak / 100.0 if self.end is None else self.end


def constant(rate):
    """A schedule that holds ``rate`` for the whole run."""
    return GroupSchedule(peak=rate, start=rate, warmup=0.0, stable_end=1.0, end=rate)


@dataclass(frozen=True)
class ScheduleSpec:
    total: int
    groups: dict = field(default_factory=dict)

    def to_dict(self):
        return {"total": self.total, "groups": {k: asdict(v) for k, v in self.groups.items()}}


def default_flame_groups(pose_peak=1e-5, shape_peak=1e-5, expression_peak=1e-4, start=1e-10):
    return {
        "pose": GroupSchedule(peak=pose_peak, start=start),
        "shape": GroupSchedule(peak=shape_peak, start=start),
        "expression": GroupSchedule(peak=expression_peak, start=start),
    }


def schedule_rate(spec, group, iteration):
    """Learning rate of ``group`` at ``iteration`` (0 <= iteration <= total)."""
    if not 0 <= iteration <= spec.total:
        raise ValueError(f"iteration {iteration} outside [0, {spec.total}]")
    g = spec.groups[group]
    total = spec.total
    warm_end = g.warmup * total
    decay_start = g.stable_end * total
    if iteration < warm_end:
        t = iteration / warm_end
        return g.start * (1.0 - t) + g.peak * t
    if iteration <= decay_start or decay_start >= total:
        return g.peak
    t = (iteration - decay_start) / (total - decay_start)
    # peak**(1-t) * end**t hits both endpoints exactly
    return g.peak ** (1.0 - t) * g.end_rate**t
