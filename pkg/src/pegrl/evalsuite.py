"""Evaluation protocol: 12 unknown holes x 3 lightings x 16 starts x 10
repetitions of greedy episodes, with success-rate / completion-time
statistics, confidence intervals, and two-tailed z-tests.

Episodes run either against live worlds (sim_online) or against stored hole
maps (offline). Completion time counts 2.5 s per search step and is
averaged over successful episodes only.
"""

import csv
import math
import warnings
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from pegrl.agent import greedy_action, observation_record, state_from_records
from pegrl.errors import ConfigError, DegenerateConfigError, UsageError
from pegrl.holemap import OfflineEnv
from pegrl.world import LIGHTING_CONDITIONS, PegWorld, TERMINAL_FOUND

SECONDS_PER_STEP = 2.5


def initial_positions():
    """The 16 start offsets: 3 mm and 4 mm along x, y, or both axes."""
    out = []
    for m in (3.0, 4.0):
        out += [(m, 0.0), (-m, 0.0), (0.0, m), (0.0, -m),
                (m, m), (m, -m), (-m, m), (-m, -m)]
    return np.array(out)


@dataclass(frozen=True)
class EvalProtocol:
    hole_ids: tuple = tuple(range(2, 14))
    lightings: tuple = LIGHTING_CONDITIONS
    repetitions: int = 10
    mode: str = "sim_online"            # sim_online | offline
    master_seed: int = 0
    prl_room_only: bool = True

    def __post_init__(self):
        if self.mode not in ("sim_online", "offline"):
            raise ConfigError(f"eval mode must be sim_online or offline, got {self.mode!r}")
        for li in self.lightings:
            if li not in LIGHTING_CONDITIONS:
                raise ConfigError(f"unknown lighting {li!r}")


@dataclass
class EpisodeRecord:
    hole: int
    lighting: str
    position_index: int
    repetition: int
    outcome: str
    steps: int
    seed: int


@dataclass
class EvalResult:
    kind: str
    records: list = field(default_factory=list)

    def _mask(self, lighting=None):
        if lighting is None:
            return self.records
        return [r for r in self.records if r.lighting == lighting]

    def success_rate(self, lighting=None):
        recs = self._mask(lighting)
        if not recs:
            return None
        return sum(r.outcome == TERMINAL_FOUND for r in recs) / len(recs)

    def completion_time(self, lighting=None):
        """Mean seconds over successful episodes; None when none succeeded."""
        steps = [r.steps for r in self._mask(lighting) if r.outcome == TERMINAL_FOUND]
        if not steps:
            return None
        return SECONDS_PER_STEP * float(np.mean(steps))

    def sr_samples(self, lighting=None):
        return np.array([r.outcome == TERMINAL_FOUND for r in self._mask(lighting)], dtype=float)

    def ct_samples(self, lighting=None):
        return np.array([SECONDS_PER_STEP * r.steps for r in self._mask(lighting)
                         if r.outcome == TERMINAL_FOUND])

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["hole", "lighting", "position_index", "repetition",
                        "outcome", "steps", "seed"])
            for r in self.records:
                w.writerow([r.hole, r.lighting, r.position_index, r.repetition,
                            r.outcome, r.steps, r.seed])


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def ci95(samples, proportion=False):
    """(mean, halfwidth) of a normal-approximation 95% interval."""
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    if n < 2:
        raise UsageError(f"ci95 needs at least 2 samples, got {n}")
    m = float(samples.mean())
    if proportion:
        half = 1.96 * math.sqrt(m * (1.0 - m) / n)
    else:
        half = 1.96 * float(samples.std(ddof=1)) / math.sqrt(n)
    return m, half


def ztest_two(a, b, kind):
    """Two-tailed z-test p-value comparing two samples.

    kind='proportion' uses the pooled-proportion statistic on 0/1 samples;
    kind='mean' uses a pooled-variance statistic. Identical samples give
    p = 1.0; zero pooled variance with differing means is an undefined test.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if kind not in ("proportion", "mean"):
        raise UsageError(f"ztest_two kind must be proportion or mean, got {kind!r}")
    if min(a.size, b.size) < 30:
        warnings.warn("ztest_two: fewer than 30 samples per side; the normal "
                      "approximation is unreliable", stacklevel=2)
    diff = a.mean() - b.mean()
    if diff == 0.0:
        return 1.0
    if kind == "proportion":
        pool = (a.sum() + b.sum()) / (a.size + b.size)
        var = pool * (1.0 - pool) * (1.0 / a.size + 1.0 / b.size)
    else:
        sp2 = (((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1))
               / (a.size + b.size - 2))
        var = sp2 * (1.0 / a.size + 1.0 / b.size)
    if var <= 0.0:
        raise DegenerateConfigError("zero pooled variance with differing means: z undefined")
    z = diff / math.sqrt(var)
    return float(math.erfc(abs(z) / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# episode execution
# ---------------------------------------------------------------------------


def episode_seed(master, hole, lighting, position_index, repetition):
    li = LIGHTING_CONDITIONS.index(lighting)
    ss = np.random.SeedSequence((int(master), int(hole), li,
                                 int(position_index), int(repetition)))
    return int(ss.generate_state(1)[0])


def greedy_episode(model, env, start):
    """Run one exploration-free episode; returns (outcome, steps)."""
    obs = env.reset(start)
    records = [observation_record(model, obs)]
    while env.terminal is None:
        state = state_from_records(model, records)
        a = greedy_action(model.policy.forward_np(state[None])[0])
        res = env.step(a)
        records.append(observation_record(model, res.observation))
        if len(records) > model.window:
            records.pop(0)
    return env.terminal, env.steps_taken


def _eval_block(model, protocol, hole, lighting, world_spec, holemap, positions):
    recs = []
    for pi, pos in enumerate(positions):
        for rep in range(protocol.repetitions):
            seed = episode_seed(protocol.master_seed, hole, lighting, pi, rep)
            if protocol.mode == "sim_online":
                env = PegWorld(world_spec.with_lighting(lighting),
                               episode_key=(seed & 0xFFFFFFFF,))
            else:
                env = OfflineEnv(holemap)
            outcome, steps = greedy_episode(model, env, pos)
            recs.append(EpisodeRecord(hole=hole, lighting=lighting, position_index=pi,
                                      repetition=rep, outcome=outcome, steps=steps,
                                      seed=seed))
    return recs


def run_eval(model, protocol, worlds=None, maps=None, jobs=1, log_cb=None):
    """Evaluate a trained model over the full grid of conditions.

    worlds: {hole_id: WorldSpec} for sim_online mode.
    maps:   {(hole_id, lighting): HoleMap} for offline mode.
    """
    lightings = protocol.lightings
    if model.kind == "prl" and protocol.prl_room_only:
        lightings = tuple(li for li in lightings if li == "room")
    positions = initial_positions()

    blocks = []
    missing = []
    for hole in protocol.hole_ids:
        for lighting in lightings:
            if protocol.mode == "sim_online":
                if worlds is None or hole not in worlds:
                    missing.append(f"world spec for hole {hole}")
                    continue
                blocks.append((hole, lighting, worlds[hole], None))
            else:
                if maps is None or (hole, lighting) not in maps:
                    missing.append(f"hole map for hole {hole} under {lighting} lighting")
                    continue
                blocks.append((hole, lighting, None, maps[(hole, lighting)]))
    if missing:
        raise ConfigError("missing evaluation artifacts: " + "; ".join(sorted(set(missing))))

    result = EvalResult(kind=model.kind)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futures = [ex.submit(_eval_block, model, protocol, h, li, ws, hm, positions)
                       for h, li, ws, hm in blocks]
            for fut, (h, li, _, _) in zip(futures, blocks):
                result.records.extend(fut.result())
                if log_cb:
                    log_cb(f"evaluated hole {h} / {li}")
    else:
        for h, li, ws, hm in blocks:
            result.records.extend(_eval_block(model, protocol, h, li, ws, hm, positions))
            if log_cb:
                log_cb(f"evaluated hole {h} / {li}")
    return result


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

_DISPLAY = OrderedDict([("prl", "P-RL"), ("aerl", "AE-RL"),
                        ("saprl", "SAP-RL"), ("saprle", "SAP-RL-E")])


def _fmt_pct(v):
    return "-" if v is None else f"{100.0 * v:.1f}"


def _fmt_ct(v):
    return "-" if v is None else f"{v:.2f}"


def summary_table(results):
    """Markdown table in the offline/online results layout: per-lighting SR
    and CT plus pooled values with 95% confidence intervals."""
    lines = [
        "| Model | Room SR[%] | Room CT[s] | Left SR[%] | Left CT[s] "
        "| Bottom SR[%] | Bottom CT[s] | All SR[%] (CI) | All CT[s] (CI) |",
        "|---|---|---|---|---|---|---|---|---|",
    ]
    for kind, res in results.items():
        name = _DISPLAY.get(kind, kind)
        cells = [name]
        for li in LIGHTING_CONDITIONS:
            recs = res._mask(li)
            cells.append(_fmt_pct(res.success_rate(li) if recs else None))
            cells.append(_fmt_ct(res.completion_time(li) if recs else None))
        sr_m, sr_h = ci95(res.sr_samples(), proportion=True)
        ct = res.ct_samples()
        if len(ct) >= 2:
            ct_m, ct_h = ci95(ct)
            ct_cell = f"{ct_m:.2f} +- {ct_h:.2f}"
        else:
            ct_cell = "-"
        cells.append(f"{100 * sr_m:.1f} +- {100 * sr_h:.1f}")
        cells.append(ct_cell)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
