"""GRU fall predictor: masked-segment training, streaming trigger with
debounce latch, FAR / lead-time evaluation, and the segmentation ablation.

FAR is computed pre-debounce (per-frame classifications) while the trigger
is post-debounce; both are reported. To keep rows of the ablation
comparable, FAR is always measured on the conservative stable region
t <= floor(2T/3) regardless of the boundaries used for training, and lead
time is measured against the true impact frame T. Trajectories never
triggered before T are excluded from the lead-time mean and reported as
misses instead (averaging zeros would flatter the lead time).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .config import PredictorConfig
from .datagen import (
    Dataset,
    LABEL_AMBIGUOUS,
    LABEL_SAFE,
    SegmentationError,
    Trajectory,
    segment,
)
from .seeding import make_rng


@dataclass
class PredictorEval:
    far: float
    lead_time_mean: float
    lead_times: np.ndarray
    miss_rate: float
    n_safe_frames: int


@dataclass
class TrainLog:
    losses: list[tuple[int, int, float]] = field(default_factory=list)  # (epoch, step, loss)

    def epoch_mean(self, epoch: int) -> float:
        vals = [l for e, _, l in self.losses if e == epoch]
        return float(np.mean(vals)) if vals else float("nan")


def _cell_labels(traj: Trajectory, cfg: PredictorConfig,
                 rate_hz: float) -> tuple[np.ndarray, np.ndarray]:
    """(class, mask) per frame for one trajectory under cfg's segmentation.

    Safe -> class 0, Falling -> class 1. Ambiguous frames are loss-masked
    when cfg.mask_ambiguous, otherwise trained as falling.
    """
    labels = segment(traj.T, traj.n_frames, rate_hz, cfg.t2_offset_s,
                     cfg.t1_rule, getattr(cfg, "t2_rule", "offset"))
    classes = (labels != LABEL_SAFE).astype(np.int64)
    if cfg.mask_ambiguous:
        mask = (labels != LABEL_AMBIGUOUS).astype(np.float64)
    else:
        mask = np.ones(traj.n_frames)
    return classes, mask


def _pad_batch(trajs: list[Trajectory], cfg: PredictorConfig,
               rate_hz: float):
    maxlen = max(t.n_frames for t in trajs)
    B = len(trajs)
    D = trajs[0].obs.shape[1]
    x = np.zeros((B, maxlen, D))
    y = np.zeros((B, maxlen), dtype=np.int64)
    mask = np.zeros((B, maxlen))
    for b, t in enumerate(trajs):
        n = t.n_frames
        x[b, :n] = t.obs
        classes, m = _cell_labels(t, cfg, rate_hz)
        y[b, :n] = classes
        mask[b, :n] = m  # padding keeps mask 0 and never contributes
    return x, y, mask


def train_predictor(dataset: Dataset, cfg: PredictorConfig, seed: int,
                    rate_hz: float = 50.0) -> tuple[nn.GruParams, TrainLog]:
    """Minimize the masked NLL over the train split with AdamW."""
    train = dataset.train
    if not train:
        raise ValueError("dataset has no training trajectories")
    rng = make_rng(seed, "predictor-init")
    params = nn.GruParams.create(train[0].obs.shape[1], cfg.hidden, 2, rng)
    adam = nn.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    order_rng = make_rng(seed, "predictor-batches")
    log = TrainLog()
    pdict = params.as_dict()
    batch = max(1, min(cfg.batch, len(train)))
    # length buckets keep per-batch padding waste low; batch order is
    # shuffled per epoch
    by_length = sorted(range(len(train)), key=lambda i: -train[i].n_frames)
    buckets = [by_length[s:s + batch]
               for s in range(0, len(by_length), batch)]
    for epoch in range(cfg.epochs):
        for step, b in enumerate(order_rng.permutation(len(buckets))):
            idx = buckets[b]
            x, y, mask = _pad_batch([train[i] for i in idx], cfg, rate_hz)
            loss, grads, all_masked = nn.masked_nll(params, x, y, mask)
            if all_masked:
                continue
            if cfg.grad_clip > 0:
                norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > cfg.grad_clip:
                    scale = cfg.grad_clip / norm
                    for g in grads.values():
                        g *= scale
            nn.adam_step(adam, pdict, grads)
            log.losses.append((epoch, step, loss))
    return params, log


# ---------------------------------------------------------------------------
# streaming inference


@dataclass
class StreamState:
    hidden: np.ndarray
    consecutive: int = 0
    triggered: bool = False


def init_stream(params: nn.GruParams) -> StreamState:
    return StreamState(hidden=np.zeros(params.hidden, dtype=params.w_z.dtype))


def predict_stream(params: nn.GruParams, frame: np.ndarray,
                   state: StreamState, debounce: int = 2
                   ) -> tuple[float, StreamState]:
    """One streaming step: GRU cell + softmax. The trigger latches after
    `debounce` consecutive frames with p_fall > 0.5 and stays latched."""
    frame = np.asarray(frame, dtype=params.w_z.dtype)
    if not np.all(np.isfinite(frame)):
        raise ValueError("non-finite observation frame (sensor fault)")
    logits, h = nn.gru_cell(params, frame, state.hidden)
    p_fall = float(nn.softmax(logits[None, :])[0, 1])
    consecutive = state.consecutive + 1 if p_fall > 0.5 else 0
    triggered = state.triggered or consecutive >= debounce
    return p_fall, StreamState(h, consecutive, triggered)


def stream_probabilities(params: nn.GruParams, obs: np.ndarray) -> np.ndarray:
    """Per-frame fall probabilities over one stored observation sequence."""
    logits, _, _ = nn.gru_forward(
        params, obs[None, :, :].astype(np.float64)
    )
    return nn.softmax(logits)[0, :, 1]


def first_trigger(p_fall: np.ndarray, debounce: int) -> int | None:
    """Frame index where the debounced latch first fires, else None."""
    consecutive = 0
    for i, p in enumerate(p_fall):
        consecutive = consecutive + 1 if p > 0.5 else 0
        if consecutive >= debounce:
            return i
    return None


# ---------------------------------------------------------------------------
# evaluation


def evaluate_far_lt(params: nn.GruParams, trajectories: list[Trajectory],
                    cfg: PredictorConfig, rate_hz: float = 50.0,
                    prob_fn=None) -> PredictorEval:
    """`prob_fn(traj) -> per-frame p_fall` overrides the model (used to
    check the metric definitions against oracle predictions)."""
    dt = 1.0 / rate_hz
    n_safe = 0
    n_false = 0
    lead_times = []
    misses = 0
    for traj in trajectories:
        p = (prob_fn(traj) if prob_fn is not None
             else stream_probabilities(params, traj.obs))
        stable_end = (2 * traj.T) // 3  # fixed stable region, all cells
        safe = p[: stable_end + 1]
        n_safe += safe.size
        n_false += int((safe > 0.5).sum())
        idx = first_trigger(p, cfg.debounce)
        if idx is None or idx >= traj.T:
            misses += 1
        else:
            lead_times.append((traj.T - idx) * dt)
    lead_times = np.asarray(lead_times)
    return PredictorEval(
        far=n_false / n_safe if n_safe else 0.0,
        lead_time_mean=float(lead_times.mean()) if lead_times.size else 0.0,
        lead_times=lead_times,
        miss_rate=misses / len(trajectories) if trajectories else 0.0,
        n_safe_frames=n_safe,
    )


# ---------------------------------------------------------------------------
# ablation over segmentation boundaries (the predictor design grid)


@dataclass(frozen=True)
class AblationCell:
    config_id: str
    t1_rule: str  # "two_thirds" | "at_t2"
    t2_rule: str  # "offset" | "two_thirds"
    t2_offset_s: float
    masked: bool


DEFAULT_GRID = (
    AblationCell("unmasked_t1eq_t2-0.2", "at_t2", "offset", 0.2, False),
    AblationCell("unmasked_t1eq_2T3", "at_t2", "two_thirds", 0.0, False),
    AblationCell("unmasked_t2-0.2", "two_thirds", "offset", 0.2, False),
    AblationCell("masked_t2-0.1", "two_thirds", "offset", 0.1, True),
    AblationCell("masked_t2-0.2", "two_thirds", "offset", 0.2, True),
    AblationCell("masked_t2-0.4", "two_thirds", "offset", 0.4, True),
)


def _ablation_cell(args):
    dataset, base_cfg, seed, cell, rate_hz = args
    import dataclasses as dc

    cfg = dc.replace(
        base_cfg,
        t1_rule=cell.t1_rule,
        t2_offset_s=cell.t2_offset_s,
        mask_ambiguous=cell.masked,
    )
    # t2_rule is an ablation-only axis, not part of PredictorConfig
    cfg.t2_rule = cell.t2_rule
    params, _ = train_predictor(dataset, cfg, seed, rate_hz)
    ev = evaluate_far_lt(params, dataset.val, cfg, rate_hz)
    return {
        "config_id": cell.config_id,
        "t1_rule": cell.t1_rule,
        "t2_offset_s": (cell.t2_offset_s if cell.t2_rule == "offset"
                        else -1.0),
        "masked": int(cell.masked),
        "far": ev.far,
        "lt_mean_s": ev.lead_time_mean,
        "miss_rate": ev.miss_rate,
    }


def ablation_grid(dataset: Dataset, base_cfg: PredictorConfig, seed: int,
                  cells: tuple[AblationCell, ...] = DEFAULT_GRID,
                  rate_hz: float = 50.0, jobs: int = 1) -> list[dict]:
    """Train/evaluate one predictor per grid cell; rows ready for CSV.

    Cells are independent trainings, so `jobs` parallelizes them without
    changing any result."""
    tasks = [(dataset, base_cfg, seed, cell, rate_hz) for cell in cells]
    if jobs > 1:
        import multiprocessing as mp

        with mp.Pool(min(jobs, len(tasks))) as pool:
            return pool.map(_ablation_cell, tasks)
    return [_ablation_cell(t) for t in tasks]
