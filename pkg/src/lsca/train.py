"""Training: the interpolated multi-head CTC objective and the two-stage recipe.

Stage 1 pre-trains each monolingual model (one encoder plus its head) with
plain CTC.  Stage 2 builds the dual-encoder model from those checkpoints and
optimises ``(1 - lam) * mix + lam * (man + eng) / 2`` on code-switching
data, where the per-head targets replace other-language tokens by unk.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import diffcore as dc
from .ctc import ctc_loss_batch, ctc_loss_op, is_feasible
from .data import Manifest, read_features
from .model import (
    ModelConfig,
    ModelParams,
    average_checkpoints,
    forward,
    init_params,
    load_checkpoint,
    load_from_pretrained,
    save_checkpoint,
    subsampled_length,
)
from .vocab import Lang, LabelSequence, VocabSet

log = logging.getLogger(__name__)

STAGES = ("pretrain_man", "pretrain_eng", "cs_train")


class TrainError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.0
    warmup_steps: int = 200
    lr_scale: float = 1.0
    epochs: int = 10
    max_frames_per_batch: int = 2000
    dropout: float = 0.1
    freq_masks: int = 2
    freq_width: int = 2
    time_masks: int = 2
    time_width: int = 3
    seed: int = 0
    checkpoint_every: int = 1
    average_last_n: int = 5
    freeze_pretrained: bool = False
    collapse_unk_runs: bool = False
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise TrainError(f"lambda out of range: {self.lam}")
        if self.warmup_steps < 1:
            raise TrainError("warmup_steps must be >= 1")
        if self.epochs < 1 or self.checkpoint_every < 1 or self.average_last_n < 1:
            raise TrainError("epochs, checkpoint_every and average_last_n must be >= 1")
        if self.max_frames_per_batch < 1:
            raise TrainError("max_frames_per_batch must be >= 1")


# objective --------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    """Batch-mean losses of the three heads and their interpolation."""

    lam: float
    mix_loss: Optional[float]
    man_loss: Optional[float]
    eng_loss: Optional[float]
    n_used: int = 0
    n_skipped: int = 0

    @property
    def ls_loss(self) -> Optional[float]:
        # a monolingual report carries only one of the two heads
        parts = [x for x in (self.man_loss, self.eng_loss) if x is not None]
        if not parts:
            return None
        return sum(parts) / len(parts)

    @property
    def total(self) -> float:
        if self.lam == 0.0:
            return self.mix_loss
        if self.lam == 1.0:
            return self.ls_loss
        return (1.0 - self.lam) * self.mix_loss + self.lam * self.ls_loss

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {
            "mix_loss": self.mix_loss,
            "man_loss": self.man_loss,
            "eng_loss": self.eng_loss,
            "total": self.total,
        }


@dataclass
class Batch:
    utt_ids: List[str]
    feats: np.ndarray  # (B, T, F) zero padded
    lengths: np.ndarray  # (B,)
    targets: List[LabelSequence]  # mixture vocabulary

    @property
    def out_lengths(self) -> np.ndarray:
        return np.array([subsampled_length(int(n)) for n in self.lengths])


def head_targets(
    v: VocabSet, targets: Sequence[LabelSequence], lang: Lang, collapse_unk_runs: bool = False
) -> List[Tuple[int, ...]]:
    """Language-specific targets in the head's own vocabulary."""
    return [v.project_label_ids(v.remap_targets(y, lang, collapse_unk_runs), lang).ids for y in targets]


def _mean(values: np.ndarray, mask: np.ndarray) -> Optional[float]:
    mask = mask & np.isfinite(values)
    if not mask.any():
        return None
    return float(values[mask].sum() / mask.sum())


def combined_loss(
    params: ModelParams,
    batch: Batch,
    lam: float,
    v: VocabSet,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    collapse_unk_runs: bool = False,
) -> Tuple[LossBreakdown, Optional[dc.Tensor]]:
    """Interpolated mixture / language-specific CTC loss for one batch.

    Terms with zero weight are evaluated for reporting only and stay off the
    gradient path.  An utterance contributes only if every weighted term is
    feasible for it; the loss is the mean over contributing utterances.
    """
    if not 0.0 <= lam <= 1.0:
        raise TrainError(f"lambda out of range: {lam}")
    has_mix = params.has_mixture()
    if lam < 1.0 and not has_mix:
        raise TrainError("lambda < 1 needs a mixture head")
    logits, out_lens = forward(params, batch.feats, batch.lengths, train=train, rng=rng)

    tgt = {"mix": [y.ids for y in batch.targets]}
    tgt["man"] = head_targets(v, batch.targets, Lang.MANDARIN, collapse_unk_runs)
    tgt["eng"] = head_targets(v, batch.targets, Lang.ENGLISH, collapse_unk_runs)
    weight = {"mix": 1.0 - lam, "man": lam / 2.0, "eng": lam / 2.0}

    feas = {h: np.array([is_feasible(int(n), y) for n, y in zip(out_lens, tgt[h])]) for h in tgt}
    used = np.ones(len(batch.targets), dtype=bool)
    for h in tgt:
        if weight[h] > 0:
            used &= feas[h]
    n_used = int(used.sum())

    total = None
    values: Dict[str, Optional[float]] = {}
    for h in ("mix", "man", "eng"):
        if h not in logits:
            values[h] = None
            continue
        if weight[h] > 0 and n_used:
            w = np.where(used, weight[h] / n_used, 0.0)
            term, losses = ctc_loss_op(logits[h], out_lens, tgt[h], w)
            total = term if total is None else dc.add(total, term)
        else:
            logp = dc._log_softmax(logits[h].data.astype(np.float64), -1)
            losses, _ = ctc_loss_batch(logp, out_lens, tgt[h])
        values[h] = _mean(losses, used if weight[h] > 0 else used & feas[h])
    bd = LossBreakdown(lam, values["mix"], values["man"], values["eng"], n_used, len(used) - n_used)
    return bd, total


def mixture_only_loss(
    params: ModelParams, batch: Batch, train: bool = False, rng: Optional[np.random.Generator] = None
) -> Tuple[float, Optional[dc.Tensor]]:
    """The baseline objective: mean mixture-head CTC over feasible utterances."""
    logits, out_lens = forward(params, batch.feats, batch.lengths, train=train, rng=rng)
    targets = [y.ids for y in batch.targets]
    ok = np.array([is_feasible(int(n), y) for n, y in zip(out_lens, targets)])
    if not ok.any():
        return math.nan, None
    term, losses = ctc_loss_op(logits["mix"], out_lens, targets, np.where(ok, 1.0 / ok.sum(), 0.0))
    return float(losses[ok].mean()), term


def monolingual_loss(
    params: ModelParams,
    batch: Batch,
    lang: Lang,
    v: VocabSet,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[LossBreakdown, Optional[dc.Tensor]]:
    """Plain CTC of one monolingual model on its own-vocabulary targets."""
    head = Lang(lang).value
    logits, out_lens = forward(params, batch.feats, batch.lengths, train=train, rng=rng, heads=(head,))
    targets = head_targets(v, batch.targets, lang)
    ok = np.array([is_feasible(int(n), y) for n, y in zip(out_lens, targets)])
    n = int(ok.sum())
    total = None
    value = None
    if n:
        total, losses = ctc_loss_op(logits[head], out_lens, targets, np.where(ok, 1.0 / n, 0.0))
        value = float(losses[ok].mean())
    vals = {"man": None, "eng": None, head: value}
    # reported as a single-head objective: total is this head's loss
    bd = LossBreakdown(1.0, None, vals["man"], vals["eng"], n, len(ok) - n)
    return bd, total


# schedule, augmentation, batching ------------------------------------------------------


def lr_at(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """Transformer warmup schedule: linear rise to ``warmup`` then inverse square root decay."""
    if step < 1:
        raise TrainError("step must be >= 1")
    return scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


def spec_augment(
    x: np.ndarray,
    rng: np.random.Generator,
    freq_masks: int = 2,
    freq_width: int = 10,
    time_masks: int = 3,
    time_width: int = 50,
) -> np.ndarray:
    """Zero ``freq_masks`` random feature bands and ``time_masks`` random frame spans."""
    out = np.array(x, copy=True)
    t_len, f_dim = out.shape
    for _ in range(freq_masks):
        f = min(int(rng.integers(0, freq_width + 1)), f_dim)
        f0 = int(rng.integers(0, f_dim - f + 1))
        out[:, f0 : f0 + f] = 0.0
    for _ in range(time_masks):
        t = min(int(rng.integers(0, time_width + 1)), t_len)
        t0 = int(rng.integers(0, t_len - t + 1))
        out[t0 : t0 + t, :] = 0.0
    return out


def make_batches(lengths: Dict[str, int], max_frames: int, seed: int) -> List[List[str]]:
    """Shuffle utterance ids, then pack greedily so each batch holds at most ``max_frames`` frames."""
    for utt, n in lengths.items():
        if n > max_frames:
            raise TrainError(f"utterance {utt} has {n} frames, above the batch cap of {max_frames}")
    ids = list(lengths)
    order = np.random.default_rng(seed).permutation(len(ids))
    batches: List[List[str]] = []
    cur: List[str] = []
    frames = 0
    for i in order:
        utt = ids[int(i)]
        n = lengths[utt]
        if cur and frames + n > max_frames:
            batches.append(cur)
            cur, frames = [], 0
        cur.append(utt)
        frames += n
    if cur:
        batches.append(cur)
    return batches


def collate(utt_ids: Sequence[str], feats: Dict[str, np.ndarray], targets: Dict[str, LabelSequence]) -> Batch:
    lengths = np.array([feats[u].shape[0] for u in utt_ids], dtype=np.int64)
    f_dim = feats[utt_ids[0]].shape[1]
    x = np.zeros((len(utt_ids), int(lengths.max()), f_dim), dtype=dc.get_dtype())
    for b, u in enumerate(utt_ids):
        x[b, : lengths[b]] = feats[u]
    return Batch(list(utt_ids), x, lengths, [targets[u] for u in utt_ids])


# optimiser --------------------------------------------------------------------------------


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ModelParams, lr: float, skip: Sequence[str] = ()) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.tensors.items():
            if p.grad is None or name.startswith(tuple(skip)):
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_step(
    params: ModelParams,
    opt: Adam,
    batch: Batch,
    lr: float,
    loss_fn,
    skip: Sequence[str] = (),
):
    """One optimisation step; ``loss_fn(params, batch)`` returns (report, loss tensor)."""
    for p in params.parameters():
        p.grad = None
    with dc.Graph() as g:
        report, total = loss_fn(params, batch)
    if total is not None:
        g.backward(total, params.parameters())
        opt.step(params, lr, skip)
    return report


# training loop ------------------------------------------------------------------------------


@dataclass
class TrainData:
    """Features and mixture-vocabulary targets held in memory."""

    feats: Dict[str, np.ndarray]
    targets: Dict[str, LabelSequence]

    @classmethod
    def from_manifest(cls, manifest: Manifest, v: VocabSet) -> "TrainData":
        feats = {}
        targets = {}
        for rec in manifest:
            feats[rec.utt_id] = read_features(manifest.feature_path(rec)).astype(dc.get_dtype())
            targets[rec.utt_id] = v.tokenize(rec.text)
        return cls(feats, targets)

    def lengths(self) -> Dict[str, int]:
        return {u: x.shape[0] for u, x in self.feats.items()}


@dataclass
class TrainResult:
    params: ModelParams
    checkpoints: List[Path]
    final_checkpoint: Optional[Path]
    metrics: List[dict] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    trained: int = 0
    skipped: int = 0


def train_loop(
    stage: str,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data: TrainData,
    v: VocabSet,
    out_dir: Union[str, Path, None] = None,
    pretrained: Optional[Tuple] = None,
) -> TrainResult:
    """Run one training stage and return the checkpoint-averaged parameters.

    ``pretrained`` is ``(man_ckpt, eng_ckpt)`` for ``cs_train``.
    """
    if stage not in STAGES:
        raise TrainError(f"unknown stage {stage!r}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    cfg = replace(model_cfg, dropout=train_cfg.dropout)
    lam = train_cfg.lam
    skip: Tuple[str, ...] = ()

    if stage == "cs_train":
        if pretrained is None or any(p is None for p in pretrained):
            raise TrainError("cs_train needs both pretrained checkpoints")
        if lam < 1.0 and not cfg.with_mixture_head:
            raise TrainError("lambda < 1 needs a mixture head")
        params = init_params(cfg, train_cfg.seed)
        params = load_from_pretrained(params, *pretrained)
        if train_cfg.freeze_pretrained:
            skip = ("man.", "eng.")

        def loss_fn(p, b, rng=None):
            return combined_loss(p, b, lam, v, train=True, rng=rng, collapse_unk_runs=train_cfg.collapse_unk_runs)

    else:
        lang = Lang.MANDARIN if stage == "pretrain_man" else Lang.ENGLISH
        cfg = replace(cfg, with_mixture_head=False)
        params = init_params(cfg, train_cfg.seed, parts=(lang.value,))

        def loss_fn(p, b, rng=None):
            return monolingual_loss(p, b, lang, v, train=True, rng=rng)

    opt = Adam(train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    lengths = data.lengths()
    step = 0
    saved: List[Tuple[int, Path, ModelParams]] = []
    result = TrainResult(params, [], None)
    metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8") if out is not None else None
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            aug_rng = np.random.default_rng([train_cfg.seed, epoch, 1])
            drop_rng = np.random.default_rng([train_cfg.seed, epoch, 2])
            batches = make_batches(lengths, train_cfg.max_frames_per_batch, seed=train_cfg.seed * 1000 + epoch)
            feats = {
                u: spec_augment(
                    x,
                    aug_rng,
                    train_cfg.freq_masks,
                    train_cfg.freq_width,
                    train_cfg.time_masks,
                    train_cfg.time_width,
                )
                for u, x in ((u, data.feats[u]) for b in batches for u in b)
            }
            epoch_total, epoch_n = 0.0, 0
            trained = skipped = 0
            for utts in batches:
                step += 1
                lr = lr_at(step, cfg.d_model, train_cfg.warmup_steps, train_cfg.lr_scale)
                batch = collate(utts, feats, data.targets)
                report = train_step(params, opt, batch, lr, lambda p, b: loss_fn(p, b, drop_rng), skip)
                trained += report.n_used
                skipped += report.n_skipped
                rec = {"step": step, "lr": lr, **report.as_dict()}
                result.metrics.append(rec)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(rec) + "\n")
                if report.total is not None:
                    epoch_total += report.total * report.n_used
                    epoch_n += report.n_used
            result.trained, result.skipped = trained, skipped
            result.epoch_losses.append(epoch_total / max(epoch_n, 1))
            log.info("%s epoch %d: loss %.4f (%d skipped)", stage, epoch, result.epoch_losses[-1], skipped)
            if epoch % train_cfg.checkpoint_every == 0 or epoch == train_cfg.epochs:
                snap = params.copy()
                path = None
                if out is not None:
                    path = out / f"epoch{epoch}.ckpt"
                    save_checkpoint(path, snap)
                    result.checkpoints.append(path)
                saved.append((epoch, path, snap))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    final = average_checkpoints([s for _, _, s in saved[-train_cfg.average_last_n :]])
    result.params = final
    if out is not None:
        result.final_checkpoint = out / "final.ckpt"
        save_checkpoint(result.final_checkpoint, final)
    return result
