"""Synthetic paired exo/ego feature sequences with step annotations and injected errors.

Each pair performs S steps drawn from a dataset-level action vocabulary. The exo
stream lays them out in order with idle filler frames in between; the ego stream
imitates the same layout with a per-segment pace warp, a constant view offset
and, per step, a chance of substituting an action that is not in the plan.
With ``vocab = 0`` every pair draws fresh prototypes and an erroneous step is a
rotated copy of the demonstrated one.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, SyntheticConfig
from .io import read_features, write_features
from .objective import GroundTruthEvent


@dataclass
class VideoPair:
    video_id: str
    z_exo: np.ndarray  # (T_x, d) float32
    z_ego: np.ndarray  # (T_y, d) float32
    events: list[GroundTruthEvent] = field(default_factory=list)
    overall_label: int = 0
    exo_steps: list[tuple[int, int]] = field(default_factory=list)  # frame ranges [start, end)


def pair_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, dtype=np.uint32)[0])


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def dataset_constants(cfg: SyntheticConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """View-offset direction, idle direction and step vocabulary shared by every pair of a dataset."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF1E1D]))
    offset_dir, idle_dir = _unit(rng, cfg.d), _unit(rng, cfg.d)
    vocab = np.stack([_unit(rng, cfg.d) for _ in range(cfg.vocab)]) if cfg.vocab else np.zeros((0, cfg.d))
    return offset_dir, idle_dir, vocab


def _split(rng: np.random.Generator, total: int, weights: np.ndarray, minimum: int) -> np.ndarray:
    """Integer split of ``total`` proportional to ``weights`` with a per-part floor."""
    n = len(weights)
    spare = total - minimum * n
    if spare < 0:
        raise ConfigError("layout infeasible: sequence too short for the requested parts")
    raw = weights / weights.sum() * spare
    parts = np.floor(raw).astype(int)
    rest = spare - parts.sum()
    if rest:
        frac_order = np.argsort(-(raw - parts), kind="stable")
        parts[frac_order[:rest]] += 1
    return parts + minimum


def _layout(rng, length: int, step_weights: np.ndarray, gap_weights: np.ndarray, redundancy: float, min_step: int):
    s = len(step_weights)
    n_fill = int(round(redundancy * length))
    n_step = length - n_fill
    if n_step < s * min_step:
        raise ConfigError(
            f"infeasible layout: {s} steps x {min_step} frames exceed {n_step} non-filler frames of {length}"
        )
    steps = _split(rng, n_step, step_weights, min_step)
    gaps = _split(rng, n_fill, gap_weights, 0) if n_fill else np.zeros(s + 1, dtype=int)
    ranges, t = [], 0
    for i in range(s):
        t += gaps[i]
        ranges.append((int(t), int(t + steps[i])))
        t += steps[i]
    return ranges


def _rotate(rng, p: np.ndarray, angle_deg: float) -> np.ndarray:
    u = rng.standard_normal(p.shape[0])
    u -= u.dot(p) * p
    u /= np.linalg.norm(u)
    a = math.radians(angle_deg)
    return math.cos(a) * p + math.sin(a) * u


def generate_pair(cfg: SyntheticConfig, seed: int, video_id: str | None = None) -> VideoPair:
    """Deterministic in (cfg, seed)."""
    if cfg.exo_len_min < cfg.steps or cfg.ego_len_min < cfg.steps:
        raise ConfigError("sequence lengths must be at least the number of steps")
    rng = np.random.default_rng(seed)
    d, s = cfg.d, cfg.steps
    scale = cfg.scale if cfg.scale > 0 else math.sqrt(d)
    offset_dir, idle_dir, vocab = dataset_constants(cfg)
    if cfg.vocab:
        if cfg.vocab <= s:
            raise ConfigError("data.vocab must exceed data.steps")
        plan = rng.choice(cfg.vocab, size=s, replace=False)
        protos = vocab[plan]
    else:
        protos = np.stack([_unit(rng, d) for _ in range(s)])

    t_x = int(rng.integers(cfg.exo_len_min, cfg.exo_len_max + 1))
    t_y = int(rng.integers(cfg.ego_len_min, cfg.ego_len_max + 1))
    base = rng.uniform(0.6, 1.4, size=s)
    gap_base = rng.dirichlet(np.ones(s + 1))
    # the imitation follows the demonstration's layout up to a pace warp per step and per gap
    warp = rng.uniform(cfg.warp_min, cfg.warp_max, size=s)
    gap_warp = rng.uniform(cfg.warp_min, cfg.warp_max, size=s + 1)
    exo_ranges = _layout(rng, t_x, base, gap_base, cfg.redundancy, cfg.min_step_len)
    ego_ranges = _layout(rng, t_y, base * warp, gap_base * gap_warp, cfg.redundancy, cfg.min_step_len)

    corrupted = rng.random(s) < cfg.error_rate
    ego_protos = protos.copy()
    unused = np.setdiff1d(np.arange(cfg.vocab), plan) if cfg.vocab else None
    for i in np.nonzero(corrupted)[0]:
        if cfg.vocab:
            ego_protos[i] = vocab[rng.choice(unused)]
        else:
            ego_protos[i] = _rotate(rng, protos[i], cfg.corruption_angle)

    def render(length, ranges, table, noise_rng):
        z = np.tile(0.5 * idle_dir, (length, 1))
        for (a, b), p in zip(ranges, table):
            z[a:b] = p
        return scale * (z + cfg.noise * noise_rng.standard_normal((length, d)) / math.sqrt(d))

    z_exo = render(t_x, exo_ranges, protos, rng)
    z_ego = render(t_y, ego_ranges, ego_protos, rng) + scale * cfg.view_offset * offset_dir
    events = [
        GroundTruthEvent(float(a / t_y), float(b / t_y), int(corrupted[i])) for i, (a, b) in enumerate(ego_ranges)
    ]
    return VideoPair(
        video_id=video_id if video_id is not None else f"pair{seed:010d}",
        z_exo=z_exo.astype(np.float32),
        z_ego=z_ego.astype(np.float32),
        events=events,
        overall_label=int(corrupted.any()),
        exo_steps=exo_ranges,
    )


def generate_dataset(cfg: SyntheticConfig, n: int, split: str = "train") -> list[VideoPair]:
    offset = {"train": 0, "eval": 1_000_000}.get(split, 2_000_000)
    return [
        generate_pair(cfg, pair_seed(cfg.seed, offset + i), f"{split}{i:05d}") for i in range(n)
    ]


def save_dataset(directory: str | Path, pairs: list[VideoPair]) -> None:
    """One ``.svxf`` file per stream plus ``annotations.json`` holding spans and labels."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = []
    for p in pairs:
        write_features(directory / f"{p.video_id}.exo.svxf", p.z_exo)
        write_features(directory / f"{p.video_id}.ego.svxf", p.z_ego)
        meta.append({
            "video_id": p.video_id,
            "overall_label": p.overall_label,
            "events": [[e.t_st, e.t_ed, e.error] for e in p.events],
            "exo_steps": [list(r) for r in p.exo_steps],
        })
    (directory / "annotations.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")


def load_dataset(directory: str | Path) -> list[VideoPair]:
    directory = Path(directory)
    meta_path = directory / "annotations.json"
    if not meta_path.exists():
        raise ConfigError(f"no annotations.json in {directory}")
    pairs = []
    for m in json.loads(meta_path.read_text(encoding="utf-8")):
        vid = m["video_id"]
        pairs.append(VideoPair(
            video_id=vid,
            z_exo=read_features(directory / f"{vid}.exo.svxf"),
            z_ego=read_features(directory / f"{vid}.ego.svxf"),
            events=[GroundTruthEvent(a, b, int(e)) for a, b, e in m["events"]],
            overall_label=int(m["overall_label"]),
            exo_steps=[tuple(r) for r in m["exo_steps"]],
        ))
    return pairs
