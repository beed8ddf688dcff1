"""Task-sequential training loop, optimizer, and method runners.

Methods:
    adafgrad  - full objective: CE + prototype-contrastive + self-similarity
                + replay CE + gradient distillation, 2 epochs per task.
    er        - CE + replay CE only (the replay-only ablation), 10 epochs.
    finetune  - CE only, sequential (the lower bound), 10 epochs.
    joint     - CE only on the shuffled union of all tasks (the upper bound).

Training is single-threaded batch-size-1 and fully determined by
(config, manifest, seed). Evaluation may fan out over slides; the
ADAFGRAD_THREADS environment variable caps that pool.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .buffer import RehearsalBuffer
from .data import Manifest, read_prototype_buffer
from .errors import ConfigurationError, ConsistencyError, NonFiniteError
from .losses import LossWeights, cross_entropy, infonce, ppgd, self_similarity
from .metrics import (
    AccMatrix,
    backward_transfer,
    class_il_accuracy,
    forgetting,
    forward_transfer,
    macro_auc,
    masked_accuracy,
    mean_accuracy,
)
from .model import (
    ModelDims,
    ModelParams,
    ReplayTarget,
    StepTargets,
    backward,
    forward,
    init_params,
    logit_head_gradient,
    param_items,
)
from .prototypes import PrototypeBuffer, accumulate_task

METHODS = ("adafgrad", "finetune", "joint", "er")

DEFAULT_LEARNING_RATE = 1e-2
DEFAULT_BUFFER_CAPACITY = 10
EPOCHS_ADAFGRAD = 2
EPOCHS_BASELINE = 10


@dataclass
class RunConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = DEFAULT_LEARNING_RATE
    epochs_per_task: int | None = None   # method default when None
    buffer_capacity: int = DEFAULT_BUFFER_CAPACITY
    replay_draws_per_step: int = 1
    seed: int = 0
    method: str = "adafgrad"
    d_model: int = 16
    d_attn: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(
                f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.epochs_per_task is not None and self.epochs_per_task < 1:
            raise ConfigurationError("epochs_per_task must be >= 1")
        if self.replay_draws_per_step < 1:
            raise ConfigurationError("replay_draws_per_step must be >= 1")

    @property
    def epochs(self) -> int:
        if self.epochs_per_task is not None:
            return self.epochs_per_task
        return EPOCHS_ADAFGRAD if self.method == "adafgrad" else EPOCHS_BASELINE

    def effective_weights(self) -> LossWeights:
        """Gate objective terms by method; adafgrad keeps everything."""
        w = self.weights
        if self.method == "adafgrad":
            return w
        if self.method == "er":
            return replace(w, alpha=0.0, beta=0.0, lambda_ppgd=0.0)
        return replace(w, alpha=0.0, beta=0.0, gamma=0.0, lambda_ppgd=0.0)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "weights"}
        d["weights"] = dict(self.weights.__dict__)
        return d


def config_from_dict(raw: dict, method: str | None = None) -> RunConfig:
    raw = dict(raw)
    weight_fields = set(LossWeights.__dataclass_fields__)
    weights_raw = dict(raw.pop("weights", {}))
    # Weight keys may also appear at the top level of a config file.
    for key in list(raw):
        if key in weight_fields:
            weights_raw[key] = raw.pop(key)
    unknown = set(weights_raw) - weight_fields
    if unknown:
        raise ConfigurationError(f"unknown weight keys: {sorted(unknown)}")
    cfg_fields = set(RunConfig.__dataclass_fields__) - {"weights"}
    unknown = set(raw) - cfg_fields
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    if method is not None:
        raw["method"] = method
    return RunConfig(weights=LossWeights(**weights_raw), **raw)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimizerState:
    m: ModelParams
    v: ModelParams
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        from .model import zeros_like_params

        return cls(m=zeros_like_params(params), v=zeros_like_params(params))


def adam_step(params: ModelParams, grads: ModelParams, opt: OptimizerState,
              cfg: RunConfig) -> None:
    """One in-place Adam update (bias-corrected, eps outside the sqrt)."""
    opt.step += 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    triplets = zip(param_items(params), param_items(grads),
                   param_items(opt.m), param_items(opt.v))
    for (_, p), (_, g), (_, m), (_, v) in triplets:
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# Training


def _log_row(task, epoch, step, slide_id, ce, nce, sim, rce, ppgd_val, total):
    return {"task": task, "epoch": epoch, "step": step, "slide_id": slide_id,
            "ce": ce, "infonce": nce, "self_sim": sim, "replay_ce": rce,
            "ppgd": ppgd_val, "total": total}


def train_task(params: ModelParams, opt: OptimizerState, slides,
               proto_buffer: PrototypeBuffer, rehearsal: RehearsalBuffer,
               cfg: RunConfig, rng: np.random.Generator, *,
               task_label: int = 0) -> list:
    """Train on one task's slides for cfg.epochs; returns the step log.

    Per step: forward, objective terms, store the target logit's head
    gradient into the rehearsal buffer, replay (for rehearsal methods) with
    replay CE and gradient distillation against the stored gradient, then
    one optimizer step on the combined gradient.
    """
    w = cfg.effective_weights()
    c_total = params.head_w.shape[1]
    replaying = cfg.method in ("adafgrad", "er")
    logs = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(slides))
        for step, idx in enumerate(order):
            s = slides[int(idx)]
            if not 0 <= s.global_class < c_total:
                raise ConsistencyError(
                    f"slide {s.slide_id!r} has class {s.global_class} outside "
                    f"the declared head of {c_total}")
            trace = forward(params, s)
            ce_val = cross_entropy(trace.probs, s.global_class)
            nce_val = sim_val = None
            if w.alpha > 0:
                nce_val = infonce(trace.aligned_gz, proto_buffer,
                                  s.global_class, w)
            if w.beta > 0:
                sim_val = self_similarity(trace.region_features_z,
                                          trace.aligned_gz)

            rehearsal.conditional_add(
                s, logit_head_gradient(trace, s.global_class), rng)

            replays, rce_vals, ppgd_vals = [], [], []
            if replaying:
                for _ in range(cfg.replay_draws_per_step):
                    r_slide, r_grad = rehearsal.sample_replay(rng)
                    r_trace = forward(params, r_slide)
                    replays.append(ReplayTarget(
                        slide=r_slide, target=r_slide.global_class,
                        stored_grad=r_grad, trace=r_trace))
                    if w.gamma > 0:
                        rce_vals.append(cross_entropy(
                            r_trace.probs, r_slide.global_class))
                    if w.lambda_ppgd > 0:
                        ppgd_vals.append(ppgd(r_grad, r_trace.slide_embedding, w))

            rce_val = float(np.mean(rce_vals)) if rce_vals else None
            ppgd_val = float(np.mean(ppgd_vals)) if ppgd_vals else None
            total = w.ce_weight * ce_val
            total += w.alpha * nce_val if nce_val is not None else 0.0
            total += w.beta * sim_val if sim_val is not None else 0.0
            total += w.gamma * rce_val if rce_val is not None else 0.0
            total += w.lambda_ppgd * ppgd_val if ppgd_val is not None else 0.0
            if not np.isfinite(total):
                raise NonFiniteError("non-finite training loss", context=s.slide_id)

            grads = backward(params, trace, s, w, StepTargets(
                target=s.global_class, prototypes=proto_buffer,
                replay=tuple(replays)))
            adam_step(params, grads, opt, cfg)
            logs.append(_log_row(task_label, epoch, step, s.slide_id, ce_val,
                                 nce_val, sim_val, rce_val, ppgd_val, total))
    return logs


# ---------------------------------------------------------------------------
# Evaluation


def _eval_threads() -> int:
    raw = os.environ.get("ADAFGRAD_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def evaluate_slides(params: ModelParams, slides):
    """Logits, probs, truths, and task ids for a list of slides."""
    n_threads = _eval_threads()
    if n_threads > 1 and len(slides) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            traces = list(pool.map(lambda s: forward(params, s), slides))
    else:
        traces = [forward(params, s) for s in slides]
    logits = np.stack([t.logits for t in traces])
    probs = np.stack([t.probs for t in traces])
    truths = np.array([s.global_class for s in slides])
    task_ids = np.array([s.task_index for s in slides])
    return logits, probs, truths, task_ids


def evaluate_random_baseline(params: ModelParams, test_splits) -> np.ndarray:
    """Class-incremental accuracy of the untouched model on each task."""
    rand = np.zeros(len(test_splits))
    for i, slides in enumerate(test_splits):
        logits, _, truths, _ = evaluate_slides(params, slides)
        rand[i] = class_il_accuracy(logits, truths)
    return rand


def _five_number(values: np.ndarray) -> dict:
    qs = np.quantile(values, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {"min": float(qs[0]), "q1": float(qs[1]), "median": float(qs[2]),
            "q3": float(qs[3]), "max": float(qs[4]),
            "mean": float(np.mean(values)), "n": int(values.shape[0])}


# ---------------------------------------------------------------------------
# Reports


@dataclass
class RunReport:
    method: str
    seed: int
    config: dict
    n_tasks: int
    task_names: list
    task_class_counts: list
    acc_matrix: AccMatrix
    metrics: dict
    confidence_summaries: list
    loss_log: list
    wall_clock_seconds: float

    def to_dict(self) -> dict:
        def cell(v):
            return None if (v is None or (isinstance(v, float) and np.isnan(v))) else v

        return {
            "schema": "adafgrad-run-report-v1",
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "n_tasks": self.n_tasks,
            "task_names": list(self.task_names),
            "task_class_counts": list(self.task_class_counts),
            "acc_matrix": [[cell(float(v)) for v in row]
                           for row in self.acc_matrix.acc],
            "rand_acc": [cell(float(v)) for v in self.acc_matrix.rand],
            "metrics": {k: cell(v) for k, v in self.metrics.items()},
            "confidence_summaries": self.confidence_summaries,
            "loss_log": self.loss_log,
            "wall_clock_seconds": self.wall_clock_seconds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def report_from_dict(raw: dict) -> RunReport:
    def cell(v):
        return np.nan if v is None else float(v)

    acc = np.array([[cell(v) for v in row] for row in raw["acc_matrix"]])
    if acc.size == 0:
        acc = acc.reshape(0, raw["n_tasks"])
    matrix = AccMatrix(n_tasks=raw["n_tasks"], acc=acc,
                       rand=np.array([cell(v) for v in raw["rand_acc"]]),
                       task_class_counts=list(raw["task_class_counts"]))
    return RunReport(
        method=raw["method"], seed=raw["seed"], config=raw["config"],
        n_tasks=raw["n_tasks"], task_names=list(raw["task_names"]),
        task_class_counts=list(raw["task_class_counts"]), acc_matrix=matrix,
        metrics={k: (None if v is None else float(v))
                 for k, v in raw["metrics"].items()},
        confidence_summaries=raw["confidence_summaries"],
        loss_log=raw["loss_log"],
        wall_clock_seconds=raw["wall_clock_seconds"],
    )


# ---------------------------------------------------------------------------
# Sequence runner


def _load_prototype_slices(manifest: Manifest):
    """Per-task (cls_pairs, neg_pairs) slices of the unit-normalized file."""
    full = read_prototype_buffer(manifest.prototype_path()).normalized()
    counts = manifest.class_counts
    if len(full.cls) != sum(counts):
        raise ConsistencyError(
            f"prototype file holds {len(full.cls)} class prototypes, manifest "
            f"declares {sum(counts)}")
    if int(full.width) != int(manifest.dims["C_text"]):
        raise ConsistencyError("prototype width differs from manifest C_text")
    if len(full.neg) % manifest.n_tasks != 0:
        raise ConsistencyError(
            f"{len(full.neg)} negatives do not divide evenly over "
            f"{manifest.n_tasks} tasks")
    per_task_neg = len(full.neg) // manifest.n_tasks
    slices, offset = [], 0
    for t, c_t in enumerate(counts):
        cls_pairs = full.cls[offset: offset + c_t]
        neg_pairs = full.neg[t * per_task_neg: (t + 1) * per_task_neg]
        slices.append((cls_pairs, neg_pairs))
        offset += c_t
    return slices


def run_sequence(cfg: RunConfig, manifest: Manifest):
    """Train per the configured method and fill the accuracy matrix.

    Sequential methods train task by task, evaluating every earlier task and
    the next task after each boundary. Joint training runs once over the
    shuffled union and fills a single evaluation row; its sequence metrics
    are undefined and reported as None.

    Returns (AccMatrix, RunReport, final ModelParams).
    """
    t_start = time.perf_counter()
    n_tasks = manifest.n_tasks
    dims = ModelDims(
        d_vis=int(manifest.dims["d_vis"]), d_model=cfg.d_model,
        d_attn=cfg.d_attn, c_text=int(manifest.dims["C_text"]),
        c_total=manifest.total_classes,
    )
    params = init_params(dims, cfg.seed)
    opt = OptimizerState.for_params(params)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))

    train_splits = [manifest.load_split(t, "train") for t in range(n_tasks)]
    test_splits = [manifest.load_split(t, "test") for t in range(n_tasks)]
    ranges = manifest.mask_ranges()

    rand = evaluate_random_baseline(params, test_splits)
    proto_slices = _load_prototype_slices(manifest)
    protos = PrototypeBuffer()
    rehearsal = RehearsalBuffer(cfg.buffer_capacity)
    logs = []

    if cfg.method == "joint":
        union = [s for split in train_splits for s in split]
        for cls_pairs, neg_pairs in proto_slices:
            protos = accumulate_task(protos, cls_pairs, neg_pairs)
        logs += train_task(params, opt, union, protos, rehearsal, cfg, rng,
                           task_label=0)
        acc = np.full((1, n_tasks), np.nan)
        final_evals = []
        for i in range(n_tasks):
            logits, probs, truths, task_ids = evaluate_slides(params, test_splits[i])
            final_evals.append((logits, probs, truths, task_ids))
            acc[0, i] = class_il_accuracy(logits, truths)
        matrix = AccMatrix(n_tasks=n_tasks, acc=acc, rand=rand,
                           task_class_counts=manifest.class_counts)
    else:
        acc = np.full((n_tasks, n_tasks), np.nan)
        final_evals = [None] * n_tasks
        for t in range(n_tasks):
            cls_pairs, neg_pairs = proto_slices[t]
            protos = accumulate_task(protos, cls_pairs, neg_pairs)
            logs += train_task(params, opt, train_splits[t], protos, rehearsal,
                               cfg, rng, task_label=t)
            for i in range(min(t + 2, n_tasks)):
                logits, probs, truths, task_ids = evaluate_slides(
                    params, test_splits[i])
                acc[t, i] = class_il_accuracy(logits, truths)
                if t == n_tasks - 1:
                    final_evals[i] = (logits, probs, truths, task_ids)
        matrix = AccMatrix(n_tasks=n_tasks, acc=acc, rand=rand,
                           task_class_counts=manifest.class_counts)

    # Pooled final metrics over every task's test split.
    all_logits = np.concatenate([e[0] for e in final_evals])
    all_probs = np.concatenate([e[1] for e in final_evals])
    all_truths = np.concatenate([e[2] for e in final_evals])
    all_tasks = np.concatenate([e[3] for e in final_evals])
    offsets = manifest.offsets()

    per_dataset_auc = []
    confidence = []
    for i, (logits, probs, truths, _) in enumerate(final_evals):
        s, e = ranges[i]
        per_dataset_auc.append(macro_auc(probs[:, s:e], truths - offsets[i]))
        confidence.append(dict(task=i, **_five_number(
            probs[np.arange(len(truths)), truths])))

    metrics = {
        "acc": class_il_accuracy(all_logits, all_truths),
        "masked_acc": masked_accuracy(all_logits, all_truths, all_tasks, ranges),
        "auc": float(np.mean(per_dataset_auc)),
    }
    if cfg.method == "joint":
        metrics.update({"macc": None, "bwt": None, "fwt": None, "fgt": None})
    else:
        metrics.update({
            "macc": mean_accuracy(matrix),
            "bwt": backward_transfer(matrix) if n_tasks > 1 else None,
            "fwt": forward_transfer(matrix) if n_tasks > 1 else None,
            "fgt": forgetting(matrix),
        })
    for key, value in metrics.items():
        if value is not None and not np.isfinite(value):
            raise NonFiniteError(f"metric {key} is not finite")

    report = RunReport(
        method=cfg.method, seed=cfg.seed, config=cfg.to_dict(),
        n_tasks=n_tasks, task_names=[t.name for t in manifest.tasks],
        task_class_counts=manifest.class_counts, acc_matrix=matrix,
        metrics=metrics, confidence_summaries=confidence, loss_log=logs,
        wall_clock_seconds=time.perf_counter() - t_start,
    )
    return matrix, report, params
