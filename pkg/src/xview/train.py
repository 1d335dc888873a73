"""Training loop, evaluation, checkpoint state and ablation sweeps."""
from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import Config, ConfigError, config_hash, dump_config, parse_config
from .data import VideoPair, generate_dataset
from .detector import inference_select
from .io import PredictionRecord
from .metrics import GTSegment, ScoredPrediction, evaluate_predictions, EvalReport
from .model import CrossViewDetector, PipelineOutput
from .objective import LossReport, dvc_loss, imit_fine_loss, imit_overall_loss, total_loss

_log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def pair_loss(model: CrossViewDetector, pair: VideoPair, generator: torch.Generator | None = None):
    z_exo = torch.from_numpy(pair.z_exo).double()
    z_ego = torch.from_numpy(pair.z_ego).double()
    out = model(z_exo, z_ego, generator)
    return losses_from_output(out, pair, model.cfg)


def losses_from_output(out: PipelineOutput, pair: VideoPair, cfg: Config) -> dict[str, torch.Tensor]:
    terms, rows = dvc_loss(out.layers, pair.events, cfg.loss_config())
    final = out.final
    labels = [e.error for e in pair.events]
    terms["imit_fine"] = imit_fine_loss(final.error_logits[torch.as_tensor(rows, dtype=torch.long)], labels)
    terms["imit_overall"] = imit_overall_loss(final.overall_logit, pair.overall_label)
    terms.update(out.regularizers)
    return terms


@dataclass
class TrainState:
    model: CrossViewDetector
    optimizer: torch.optim.Optimizer
    generator: torch.Generator  # batch sampling and Gumbel noise
    step: int = 0
    history: list[LossReport] = field(default_factory=list)


def make_state(cfg: Config) -> TrainState:
    torch.set_num_threads(1)
    model = CrossViewDetector(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    gen = torch.Generator().manual_seed(cfg.train.seed + 1)
    return TrainState(model, opt, gen)


def train_step(state: TrainState, data: list[VideoPair]) -> LossReport:
    cfg = state.model.cfg
    state.model.train()
    batch = torch.randint(0, len(data), (cfg.train.batch,), generator=state.generator).tolist()
    lcfg = cfg.loss_config()
    total = None
    sums: dict[str, float] = {}
    for i in batch:
        terms = pair_loss(state.model, data[i], state.generator)
        loss, rep = total_loss(terms, lcfg)
        for k, v in rep.components.items():
            sums[k] = sums.get(k, 0.0) + v / len(batch)
        total = loss / len(batch) if total is None else total + loss / len(batch)
    if not torch.isfinite(total):
        bad = [k for k, v in sums.items() if not math.isfinite(v)]
        raise TrainingError(f"non-finite loss at step {state.step}; offending components: {bad or ['total']}")
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.train.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.train.grad_clip)
    state.optimizer.step()
    state.step += 1
    report = LossReport(sums, float(total.detach()))
    state.history.append(report)
    return report


def train(cfg: Config, data: list[VideoPair] | None = None, state: TrainState | None = None,
          steps: int | None = None, on_step=None) -> TrainState:
    if data is None:
        data = generate_dataset(cfg.data, cfg.train.n_train, "train")
    state = make_state(cfg) if state is None else state
    target = cfg.train.steps if steps is None else state.step + steps
    while state.step < target:
        # a non-finite loss raises before the optimizer step, so parameters stay last-good
        report = train_step(state, data)
        if cfg.train.log_every and state.step % cfg.train.log_every == 0:
            _log.info("step %d %s", state.step, report.line())
        if on_step is not None:
            on_step(state, report)
    return state


# checkpoint state -----------------------------------------------------------

def state_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    tensors = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    names = {id(p): n for n, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if not st:
                continue
            for key, value in st.items():
                tensors[f"optim.{names[id(p)]}.{key}"] = torch.as_tensor(value)
    tensors["rng.generator"] = state.generator.get_state()
    tensors["train.step"] = torch.tensor([state.step], dtype=torch.int64)
    return tensors


def load_state(cfg: Config, tensors: dict[str, torch.Tensor]) -> TrainState:
    state = make_state(cfg)
    model_sd = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    state.model.load_state_dict(model_sd)
    params = dict(state.model.named_parameters())
    for key, value in tensors.items():
        if not key.startswith("optim."):
            continue
        pname, field_name = key[len("optim."):].rsplit(".", 1)
        state.optimizer.state[params[pname]][field_name] = value.clone()
    state.generator.set_state(tensors["rng.generator"])
    state.step = int(tensors["train.step"][0])
    return state


def checkpoint_payload(state: TrainState) -> tuple[dict[str, torch.Tensor], str, str]:
    cfg = state.model.cfg
    return state_tensors(state), config_hash(cfg), dump_config(cfg)


def restore(tensors: dict[str, torch.Tensor], chash: str, ctext: str, cfg: Config | None = None) -> TrainState:
    saved_cfg = parse_config(ctext).validate()
    if cfg is not None and config_hash(cfg) != chash:
        raise ConfigError("config hash mismatch between checkpoint and evaluation config")
    if config_hash(saved_cfg) != chash:
        raise ConfigError("checkpoint config text does not match its hash")
    return load_state(cfg if cfg is not None else saved_cfg, tensors)


# evaluation -----------------------------------------------------------------

def predict_pair(model: CrossViewDetector, pair: VideoPair) -> list[PredictionRecord]:
    with torch.no_grad():
        out = model(torch.from_numpy(pair.z_exo).double(), torch.from_numpy(pair.z_ego).double())
    return [
        PredictionRecord(pair.video_id, ev.t_st, ev.t_ed, ev.fg_score, ev.error_prob,
                         "error" if ev.error_prob >= 0.5 else "correct")
        for ev in inference_select(out.final)
    ]


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("XVIEW_THREADS", "1")))
    except ValueError:
        return 1


def predict(model: CrossViewDetector, pairs: list[VideoPair], threads: int | None = None) -> list[PredictionRecord]:
    model.eval()
    threads = eval_threads() if threads is None else threads
    if threads <= 1:
        chunks = [predict_pair(model, p) for p in pairs]
    else:
        with ThreadPoolExecutor(threads) as pool:
            chunks = list(pool.map(lambda p: predict_pair(model, p), pairs))
    return [r for chunk in chunks for r in chunk]


def score_predictions(records: list[PredictionRecord], pairs: list[VideoPair], tiou_side: str = "gt") -> EvalReport:
    # every kept event is a candidate for both classes, ranked by its class-conditional confidence
    gts = [
        GTSegment(p.video_id, e.t_st, e.t_ed, "error" if e.error else "correct")
        for p in pairs for e in p.events
    ]
    by_class = {
        "error": [ScoredPrediction(r.video_id, r.t_st, r.t_ed, r.fg_score * r.error_prob, "error") for r in records],
        "correct": [ScoredPrediction(r.video_id, r.t_st, r.t_ed, r.fg_score * (1.0 - r.error_prob), "correct") for r in records],
    }
    loc = [ScoredPrediction(r.video_id, r.t_st, r.t_ed, r.fg_score, r.cls) for r in records]
    return evaluate_predictions(by_class, gts, loc, tiou_side)


def evaluate(model: CrossViewDetector, pairs: list[VideoPair], threads: int | None = None) -> tuple[EvalReport, list[PredictionRecord]]:
    records = predict(model, pairs, threads)
    return score_predictions(records, pairs, model.cfg.eval.tiou_side), records


def cosine_probe(model: CrossViewDetector, pairs: list[VideoPair]) -> list[tuple[float, float]]:
    """(pre, post) cosine similarity of time-pooled ego/exo representations per pair."""
    model.eval()
    rows = []
    with torch.no_grad():
        for p in pairs:
            out = model(torch.from_numpy(p.z_exo).double(), torch.from_numpy(p.z_ego).double())
            vals = []
            for reps in (out.pre_sve, out.post_sve):
                a, b = reps["ego"].mean(dim=0), reps["exo"].mean(dim=0)
                vals.append(float(torch.nn.functional.cosine_similarity(a, b, dim=0)))
            rows.append((vals[0], vals[1]))
    return rows


# ablation -------------------------------------------------------------------

MODULE_GRID = list(itertools.product((False, True), repeat=3))


def ablation_variants(cfg: Config, axis: str) -> list[tuple[str, Config]]:
    variants = []
    if axis == "modules":
        for a_s, sve, bix in MODULE_GRID:
            c = cfg.copy()
            c.modules.adaptive_sampling, c.modules.sve, c.modules.bix = a_s, sve, bix
            variants.append((f"AS={int(a_s)} SVE={int(sve)} BiX={int(bix)}", c))
    elif axis == "fusion":
        for mode in ("bix", "exo2ego", "ego2exo", "concat_channel", "concat_time"):
            c = cfg.copy()
            c.modules.bix = True
            c.fusion.mode = mode
            variants.append((f"fusion={mode}", c))
    elif axis == "k_ratio":
        for k in (0.1, 0.2, 0.3, 0.5, 0.7, 0.9):
            c = cfg.copy()
            c.sampler.k_ratio = k
            variants.append((f"k_ratio={k}", c))
    elif axis == "M":
        c = cfg.copy()
        c.modules.sve = False
        variants.append(("sve=off", c))
        c = cfg.copy()
        c.sve.fixed_tokens = True
        variants.append(("sve=fixed_tokens", c))
        for m in (2, 4, 8, 16, 32):
            c = cfg.copy()
            c.sve.M = m
            variants.append((f"M={m}", c))
    elif axis == "input":
        variants.append(("dual_view", cfg.copy()))
        c = cfg.copy()
        c.modules.ego_only = True
        variants.append(("ego_only", c))
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    return variants


@dataclass
class AblationRow:
    name: str
    seed: int
    report: EvalReport


def run_variant(cfg: Config, seed: int) -> tuple[EvalReport, TrainState, list[VideoPair]]:
    c = cfg.copy()
    c.train.seed = seed
    c.data.seed = seed
    c.validate()
    train_pairs = generate_dataset(c.data, c.train.n_train, "train")
    eval_pairs = generate_dataset(c.data, c.train.n_eval, "eval")
    state = train(c, train_pairs)
    report, _ = evaluate(state.model, eval_pairs)
    return report, state, eval_pairs


def ablate(cfg: Config, axis: str, seeds: list[int], progress=None) -> list[AblationRow]:
    rows = []
    for name, variant in ablation_variants(cfg, axis):
        for seed in seeds:
            report, _, _ = run_variant(variant, seed)
            rows.append(AblationRow(name, seed, report))
            if progress is not None:
                progress(name, seed, report)
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "seed", "auprc@0.3", "auprc@0.5", "auprc@0.7", "mean_auprc", "avg_tiou", "no_skill"])
    for r in rows:
        a = r.report.auprc["error"]
        w.writerow([r.name, r.seed, *(f"{a[t]:.6f}" for t in (0.3, 0.5, 0.7)),
                    f"{r.report.mean_auprc('error'):.6f}",
                    "" if r.report.avg_tiou is None else f"{r.report.avg_tiou:.6f}",
                    f"{r.report.prevalence['error']:.6f}"])
    names = list(dict.fromkeys(r.name for r in rows))
    for name in names:
        sub = [r for r in rows if r.name == name]
        if len(sub) > 1:
            w.writerow([name, "mean", *(f"{np.mean([r.report.auprc['error'][t] for r in sub]):.6f}" for t in (0.3, 0.5, 0.7)),
                        f"{np.mean([r.report.mean_auprc('error') for r in sub]):.6f}",
                        f"{np.mean([r.report.avg_tiou or 0.0 for r in sub]):.6f}",
                        f"{np.mean([r.report.prevalence['error'] for r in sub]):.6f}"])
    return buf.getvalue()


def cosine_csv(rows: list[tuple[float, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair", "cos_pre_sve", "cos_post_sve"])
    for i, (a, b) in enumerate(rows):
        w.writerow([i, f"{a:.6f}", f"{b:.6f}"])
    return buf.getvalue()
