"""Training loop and evaluation metrics.

Training uses per-utterance gradient accumulation, an Adam-style optimizer
with linear-warmup inverse-square-root learning rate, and global gradient
norm clipping. The objective is a weighted sum of the final CTC loss and the
CTC losses of any self-conditioning taps; utterances whose target cannot fit
a tapped output length are skipped and counted rather than poisoning the run
with infinite losses.

Evaluation reports the edit-distance error decomposition (substitutions,
deletions, insertions, their sum over the total reference length), the mean
pooled-to-downsampled length ratio, and how often a detected weight valley
falls near a true token boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ctc
from . import model as model_mod
from . import numcore as nc
from .synthdata import Utterance


class NumericalError(Exception):
    """Non-finite loss; carries the offending utterance id."""

    def __init__(self, uid: str, detail: str):
        super().__init__(f"non-finite loss on utterance {uid}: {detail}")
        self.uid = uid


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 1000
    epochs: int = 30
    batch_size: int = 4
    lambda_final: float = 0.5
    lambda_inter: float = 0.1
    clip_norm: float = 5.0
    seed: int = 0
    checkpoint_every: int = 1       # epochs between "last" checkpoint writes
    stop_dev_cer: float | None = None  # early stop once dev CER reaches this

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.lambda_final < 0 or self.lambda_inter < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class CerCounts:
    sub: int
    dele: int
    ins: int
    cer: float

    @property
    def distance(self) -> int:
        return self.sub + self.dele + self.ins


@dataclass
class EvalReport:
    n_utterances: int
    ref_tokens: int
    sub: int
    dele: int
    ins: int
    cer: float                       # uncapped: may exceed 1 on bad models
    mean_length_ratio: float         # mean over utterances of I / T'
    boundary_hit_rate: float
    boundary_window: int
    per_utterance: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("per_utterance")
        return d


# ---------------------------------------------------------------------------
# losses and schedule
# ---------------------------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig) -> float:
    """peak * min(step/warmup, sqrt(warmup/step)): linear warmup, inverse-sqrt decay."""
    if step < 1:
        raise ValueError("schedule is defined for step >= 1")
    return cfg.peak_lr * min(step / cfg.warmup_steps, np.sqrt(cfg.warmup_steps / step))


def total_loss_op(trace: model_mod.ForwardTrace, target: Sequence[int],
                  cfg: TrainConfig) -> nc.Tensor:
    """lambda_final * final CTC + lambda_inter * sum of tapped CTC losses (taped)."""
    total = nc.scale(ctc.ctc_loss_op(trace.logits, target), cfg.lambda_final)
    for _, logits in trace.intermediates:
        total = nc.add(total, nc.scale(ctc.ctc_loss_op(logits, target), cfg.lambda_inter))
    return total


def total_loss(trace: model_mod.ForwardTrace, target: Sequence[int],
               cfg: TrainConfig) -> float:
    """Untaped recomputation of total_loss_op, accumulated in the same order."""
    total = cfg.lambda_final * ctc.ctc_loss(trace.logits.data, target).loss
    for _, logits in trace.intermediates:
        total = total + cfg.lambda_inter * ctc.ctc_loss(logits.data, target).loss
    return total


# ---------------------------------------------------------------------------
# edit distance
# ---------------------------------------------------------------------------


def cer(reference: Sequence[int], hypothesis: Sequence[int]) -> CerCounts:
    """Unit-cost Levenshtein alignment with a deterministic error breakdown.

    Ties between optimal alignments are broken preferring substitution over
    a deletion+insertion pair, then deletion over insertion. The rate is
    (sub + del + ins) / len(reference), uncapped.
    """
    ref = list(reference)
    hyp = list(hypothesis)
    m, n = len(ref), len(hyp)
    if m < 1:
        raise ValueError("reference must be non-empty")
    dist = np.zeros((m + 1, n + 1), dtype=np.int64)
    dist[:, 0] = np.arange(m + 1)
    dist[0, :] = np.arange(n + 1)
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            sub_cost = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(sub_cost, dist[i - 1, j] + 1, dist[i, j - 1] + 1)

    sub = dele = ins = 0
    i, j = m, n
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return CerCounts(sub=int(sub), dele=dele, ins=ins, cer=(sub + dele + ins) / m)


# ---------------------------------------------------------------------------
# boundary alignment
# ---------------------------------------------------------------------------


def boundary_hits(segmentation, boundaries: Sequence[tuple[int, int]], subsample: int,
                  total_frames: int, window: int = 2) -> tuple[int, int]:
    """Count token boundaries with a valley within +/- window downsampled steps.

    A token's boundary is the gap from its last frame to the next token's
    first frame (or the utterance end); both gap edges are mapped to the
    downsampled grid and a valley anywhere in the widened span counts.
    """
    t_down = segmentation.n_frames
    valleys = np.asarray(segmentation.valleys)
    hits = 0
    for k, (start, end) in enumerate(boundaries):
        gap_right = boundaries[k + 1][0] if k + 1 < len(boundaries) else total_frames
        lo = int(np.clip(round(end / subsample) - window, 1, t_down))
        hi = int(np.clip(round(gap_right / subsample) + window, 1, t_down))
        if np.any((valleys >= lo) & (valleys <= hi)):
            hits += 1
    return hits, len(boundaries)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(params: model_mod.ModelParams, utts: Sequence[Utterance],
             boundary_window: int = 2) -> EvalReport:
    sub = dele = ins = ref_total = 0
    ratios = []
    hit_count = bound_count = 0
    records = []
    for utt in utts:
        trace = model_mod.model_forward(params, utt.features)
        hyp = ctc.greedy_decode(trace.logits.data)
        counts = cer(utt.tokens, hyp)
        sub += counts.sub
        dele += counts.dele
        ins += counts.ins
        ref_total += len(utt.tokens)
        ratios.append(trace.output_len / trace.downsampled_len)
        h, b = boundary_hits(trace.segmentation, utt.boundaries,
                             params.config.subsample, utt.features.shape[0],
                             window=boundary_window)
        hit_count += h
        bound_count += b
        records.append({
            "uid": utt.uid,
            "ref": list(utt.tokens),
            "hyp": hyp,
            "sub": counts.sub,
            "del": counts.dele,
            "ins": counts.ins,
            "cer": counts.cer,
            "n_pooled": trace.output_len,
            "n_downsampled": trace.downsampled_len,
        })
    return EvalReport(
        n_utterances=len(records),
        ref_tokens=ref_total,
        sub=sub,
        dele=dele,
        ins=ins,
        cer=(sub + dele + ins) / ref_total if ref_total else 0.0,
        mean_length_ratio=float(np.mean(ratios)) if ratios else 0.0,
        boundary_hit_rate=hit_count / bound_count if bound_count else 0.0,
        boundary_window=boundary_window,
        per_utterance=records,
    )


def format_report(report: EvalReport) -> str:
    lines = [
        f"utterances:        {report.n_utterances}",
        f"reference tokens:  {report.ref_tokens}",
        f"substitutions:     {report.sub}",
        f"deletions:         {report.dele}",
        f"insertions:        {report.ins}",
        f"CER:               {report.cer:.4f} (uncapped)",
        f"mean I/T' ratio:   {report.mean_length_ratio:.3f}",
        f"boundary hit rate: {report.boundary_hit_rate:.3f} "
        f"(+/-{report.boundary_window} downsampled steps)",
    ]
    return "\n".join(lines) + "\n"


def save_report(report: EvalReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(format_report(report))
    payload = {"summary": report.summary(), "per_utterance": report.per_utterance}
    (out / "report.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best_params: model_mod.ModelParams
    last_params: model_mod.ModelParams
    best_dev_cer: float
    best_epoch: int
    steps: int
    skipped: int
    history: list[dict]


class AdamState:
    """Moment estimates per parameter; beta2=0.98 and eps=1e-9 suit warmup schedules."""

    def __init__(self, params: model_mod.ModelParams,
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def update(self, params: model_mod.ModelParams, grads: dict[str, np.ndarray],
               lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params.arrays[name] -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k] = arrays[f"opt.m.{k}"].copy()
            self.v[k] = arrays[f"opt.v.{k}"].copy()
        self.t = t


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if clip_norm > 0 and total > clip_norm:
        factor = clip_norm / total
        for g in grads.values():
            g *= factor
    return total


def train(
    params: model_mod.ModelParams,
    train_utts: Sequence[Utterance],
    dev_utts: Sequence[Utterance],
    cfg: TrainConfig,
    out_dir=None,
    log_fp=None,
    optimizer: AdamState | None = None,
    start_epoch: int = 0,
) -> TrainResult:
    """Optimize params in place; returns best-dev and final parameters.

    Deterministic for a fixed seed on a single thread. Writes best.ckpt and
    last.ckpt under out_dir when given; metric records go to log_fp as JSON
    lines (one per optimizer step, one per epoch).
    """
    if not train_utts:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 1)
    opt = optimizer or AdamState(params)
    skipped = 0
    history: list[dict] = []
    best_cer = np.inf
    best_epoch = -1
    best_params = params.copy()

    def emit(record: dict) -> None:
        if log_fp is not None:
            log_fp.write(json.dumps(record, sort_keys=True) + "\n")

    def write_ckpt(name: str, p: model_mod.ModelParams, epoch: int, with_opt: bool) -> None:
        if out_dir is None:
            return
        meta = {"epoch": epoch, "step": opt.t, "best_dev_cer": None if best_cer == np.inf else best_cer,
                "train_config": asdict(cfg)}
        extra = opt.arrays() if with_opt else None
        model_mod.save_checkpoint(Path(out_dir) / name, p, extra_meta=meta, extra_arrays=extra)

    acc: dict[str, np.ndarray] | None = None
    acc_count = 0

    def flush_batch(epoch: int) -> None:
        nonlocal acc, acc_count
        if acc_count == 0:
            return
        grads = {k: g / acc_count for k, g in acc.items()}
        norm = clip_gradients(grads, cfg.clip_norm)
        lr = lr_at(opt.t + 1, cfg)
        opt.update(params, grads, lr)
        emit({"step": opt.t, "epoch": epoch, "lr": lr, "grad_norm": norm,
              "loss": batch_loss_sum / acc_count,
              "loss_final": batch_final_sum / acc_count,
              "loss_inter": batch_inter_sum / acc_count})
        acc = None
        acc_count = 0

    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        order = rng.permutation(len(train_utts))
        epoch_losses = []
        batch_loss_sum = batch_final_sum = batch_inter_sum = 0.0
        for idx in order:
            utt = train_utts[idx]
            tape = nc.Tape()
            with tape:
                leaves = model_mod.make_leaves(params)
                trace = model_mod.model_forward(params, utt.features, leaves=leaves,
                                                training=True, drop_rng=drop_rng)
                if not np.all(np.isfinite(trace.logits.data)):
                    raise NumericalError(utt.uid, "non-finite logits")
                try:
                    final_term = nc.scale(ctc.ctc_loss_op(trace.logits, utt.tokens),
                                          cfg.lambda_final)
                    inter_val = 0.0
                    loss_t = final_term
                    for _, logits in trace.intermediates:
                        term = nc.scale(ctc.ctc_loss_op(logits, utt.tokens), cfg.lambda_inter)
                        inter_val += term.item()
                        loss_t = nc.add(loss_t, term)
                except ctc.CtcInfeasibleError:
                    skipped += 1
                    continue
            loss_val = loss_t.item()
            if not np.isfinite(loss_val):
                raise NumericalError(utt.uid, f"loss={loss_val}")
            tape.backward(loss_t)
            if acc is None:
                acc = {k: lv.grad.copy() if lv.grad is not None else np.zeros_like(lv.data)
                       for k, lv in leaves.items()}
            else:
                for k, lv in leaves.items():
                    if lv.grad is not None:
                        acc[k] += lv.grad
            acc_count += 1
            epoch_losses.append(loss_val)
            batch_loss_sum += loss_val
            batch_final_sum += final_term.item()
            batch_inter_sum += inter_val
            if acc_count >= cfg.batch_size:
                flush_batch(epoch)
                batch_loss_sum = batch_final_sum = batch_inter_sum = 0.0
        flush_batch(epoch)

        dev_report = evaluate(params, dev_utts)
        record = {
            "epoch": epoch,
            "mean_train_loss": float(np.mean(epoch_losses)) if epoch_losses else None,
            "median_train_loss": float(np.median(epoch_losses)) if epoch_losses else None,
            "dev_cer": dev_report.cer,
            "dev_length_ratio": dev_report.mean_length_ratio,
            "dev_boundary_hit_rate": dev_report.boundary_hit_rate,
            "skipped_so_far": skipped,
            "steps": opt.t,
        }
        history.append(record)
        emit(record)
        if dev_report.cer < best_cer:
            best_cer = dev_report.cer
            best_epoch = epoch
            best_params = params.copy()
            write_ckpt("best.ckpt", best_params, epoch, with_opt=False)
        if (epoch - start_epoch) % cfg.checkpoint_every == 0:
            write_ckpt("last.ckpt", params, epoch, with_opt=True)
        if cfg.stop_dev_cer is not None and best_cer <= cfg.stop_dev_cer:
            break

    write_ckpt("last.ckpt", params, history[-1]["epoch"] if history else start_epoch,
               with_opt=True)
    return TrainResult(
        best_params=best_params,
        last_params=params,
        best_dev_cer=float(best_cer),
        best_epoch=best_epoch,
        steps=opt.t,
        skipped=skipped,
        history=history,
    )
