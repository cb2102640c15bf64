"""Posterior fusion decoding and the lambda/alpha sweep.

Per frame and mixture unit ``u`` the fused score is

    Mandarin u:  (1 - a) * P_mix[u] + a * P_man[u]
    English u:   (1 - a) * P_mix[u] + a * P_eng[u]
    blank:       (1 - a) * P_mix[blank] + a * (P_man[blank] + P_eng[blank]) / 2
    unk:         P_mix[unk]

Scores are not renormalised; greedy decoding only needs the argmax.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .ctc import greedy_decode
from .model import CheckpointError, ModelParams, _as_params, posteriors
from .evaluation import MerReport, score_set
from .vocab import BLANK, UNK, LabelSequence, VocabSet

PAPER_REFERENCE_MER = {(0.0, 0.0): 27.35, (0.7, 0.7): 23.13, (1.0, 1.0): 23.57}
PAPER_PRETRAINED_ONLY_MER = 47.84
UNK_RULES = ("average", "zero")


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.0
    lsm_only: bool = False
    lsm_only_unk: str = "average"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise FusionError(f"alpha out of range: {self.alpha}")
        if self.lsm_only_unk not in UNK_RULES:
            raise FusionError(f"lsm_only_unk must be one of {UNK_RULES}")


def fuse_posteriors(
    p_mix: Optional[np.ndarray],
    p_man: np.ndarray,
    p_eng: np.ndarray,
    alpha: float,
    v: VocabSet,
    lsm_only: bool = False,
    lsm_only_unk: str = "average",
) -> np.ndarray:
    """Fused (T, V_mix) score grid from the three heads' posteriors.

    Without a mixture head (``lsm_only``) alpha is taken as 1 and the unk
    score is the mean of both heads' unk probabilities (or 0 with
    ``lsm_only_unk="zero"``).
    """
    if not 0.0 <= alpha <= 1.0:
        raise FusionError(f"alpha out of range: {alpha}")
    if lsm_only_unk not in UNK_RULES:
        raise FusionError(f"lsm_only_unk must be one of {UNK_RULES}")
    p_man = np.asarray(p_man, dtype=np.float64)
    p_eng = np.asarray(p_eng, dtype=np.float64)
    t = p_man.shape[0]
    if p_eng.shape[0] != t or (p_mix is not None and np.shape(p_mix)[0] != t):
        raise FusionError(
            f"frame counts differ: mix {None if p_mix is None else np.shape(p_mix)[0]}, man {t}, eng {p_eng.shape[0]}"
        )
    if p_man.shape[1] != v.man_size or p_eng.shape[1] != v.eng_size:
        raise FusionError("per-head grids do not match the vocabulary sizes")
    man = slice(v.man_offset, v.eng_offset)
    eng = slice(v.eng_offset, v.mix_size)
    out = np.empty((t, v.mix_size))

    if lsm_only:
        out[:, man] = p_man[:, 2:]
        out[:, eng] = p_eng[:, 2:]
        out[:, BLANK] = (p_man[:, BLANK] + p_eng[:, BLANK]) / 2
        out[:, UNK] = (p_man[:, UNK] + p_eng[:, UNK]) / 2 if lsm_only_unk == "average" else 0.0
        return out

    if p_mix is None:
        raise FusionError("mixture posteriors missing; use lsm_only to decode without a mixture head")
    p_mix = np.asarray(p_mix, dtype=np.float64)
    if p_mix.shape[1] != v.mix_size:
        raise FusionError("mixture grid does not match the vocabulary size")
    a = float(alpha)
    out[:, man] = (1 - a) * p_mix[:, man] + a * p_man[:, 2:]
    out[:, eng] = (1 - a) * p_mix[:, eng] + a * p_eng[:, 2:]
    out[:, BLANK] = (1 - a) * p_mix[:, BLANK] + a * ((p_man[:, BLANK] + p_eng[:, BLANK]) / 2)
    out[:, UNK] = p_mix[:, UNK]
    return out


def decode_fused(scores: np.ndarray) -> LabelSequence:
    """Greedy decoding over a fused score grid."""
    return greedy_decode(scores, "mix")


# decoding over a test set -----------------------------------------------------------


@dataclass
class TestSet:
    """Test utterances held in memory, in manifest order."""

    __test__ = False  # not a pytest class

    utt_ids: List[str]
    feats: List[np.ndarray]
    texts: List[str]
    categories: List[str]

    @classmethod
    def from_manifest(cls, manifest) -> "TestSet":
        from .data import read_features

        recs = list(manifest)
        return cls(
            [r.utt_id for r in recs],
            [read_features(manifest.feature_path(r)).astype(np.float64) for r in recs],
            [r.text for r in recs],
            [r.category for r in recs],
        )

    def __len__(self) -> int:
        return len(self.utt_ids)


def compute_posteriors(
    params: ModelParams, test: TestSet, batch_frames: int = 4000, jobs: int = 1
) -> Dict[str, List[np.ndarray]]:
    """Evaluation-mode posteriors of every head, per utterance, in test order."""
    order = sorted(range(len(test)), key=lambda i: (test.feats[i].shape[0], i))
    groups: List[List[int]] = []
    cur: List[int] = []
    for i in order:
        n = test.feats[i].shape[0]
        if cur and (len(cur) + 1) * n > batch_frames:
            groups.append(cur)
            cur = []
        cur.append(i)
    if cur:
        groups.append(cur)

    def run(group):
        lens = np.array([test.feats[i].shape[0] for i in group])
        x = np.zeros((len(group), int(lens.max()), test.feats[group[0]].shape[1]))
        for b, i in enumerate(group):
            x[b, : lens[b]] = test.feats[i]
        post, _ = posteriors(params, x, lens)
        return group, post

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(run, groups))
    else:
        results = [run(g) for g in groups]
    out: Dict[str, List[Optional[np.ndarray]]] = {}
    for group, post in results:
        for head, grids in post.items():
            slot = out.setdefault(head, [None] * len(test))
            for i, grid in zip(group, grids):
                slot[i] = grid
    return out


def decode_set(
    post: Dict[str, List[np.ndarray]],
    v: VocabSet,
    alpha: float,
    lsm_only: bool = False,
    lsm_only_unk: str = "average",
) -> List[LabelSequence]:
    n = len(post["man"])
    hyps = []
    for i in range(n):
        if alpha == 0.0 and not lsm_only:
            # no language-specific weight: plain greedy search on the mixture head
            hyps.append(greedy_decode(post["mix"][i], "mix"))
            continue
        s = fuse_posteriors(
            None if lsm_only else post["mix"][i], post["man"][i], post["eng"][i], alpha, v, lsm_only, lsm_only_unk
        )
        hyps.append(decode_fused(s))
    return hyps


def score_hypotheses(hyps: Sequence[LabelSequence], test: TestSet, v: VocabSet) -> MerReport:
    return score_set(test.texts, [v.detokenize(h) for h in hyps], test.categories)


# sweep -------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:g}"


@dataclass
class SweepTable:
    lambdas: List[float]
    alphas: List[float]
    cells: Dict[Tuple[float, float], Optional[MerReport]] = field(default_factory=dict)

    def mer(self, lam: float, alpha: float) -> Optional[float]:
        rep = self.cells.get((lam, alpha))
        return None if rep is None else rep.mer("overall")

    def available(self) -> List[Tuple[float, float]]:
        return [k for k, r in self.cells.items() if r is not None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        refs = "; ".join(f"lambda={_fmt(l)} alpha={_fmt(a)}: {m:.2f}" for (l, a), m in PAPER_REFERENCE_MER.items())
        buf.write(f"# paper reference MER% (metadata, not reproduced): {refs}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda"] + [_fmt(a) for a in self.alphas])
        for lam in self.lambdas:
            row = [_fmt(lam)]
            for a in self.alphas:
                rep = self.cells.get((lam, a))
                row.append("-" if rep is None else rep.display("overall"))
            w.writerow(row)
        return buf.getvalue()


def sweep(
    models: Dict[float, ModelParams],
    test: TestSet,
    v: VocabSet,
    alpha_grid: Sequence[float],
    lsm_only_unk: str = "average",
    jobs: int = 1,
    posterior_cache: Optional[Dict[float, Dict[str, List[np.ndarray]]]] = None,
) -> SweepTable:
    """MER for every (lambda, alpha) cell.

    A model without a mixture head (lambda = 1) can only be decoded with
    alpha = 1; its other cells are unavailable.
    """
    for a in alpha_grid:
        if not 0.0 <= a <= 1.0:
            raise FusionError(f"alpha out of range: {a}")
    lambdas = sorted(models)
    alphas = sorted(alpha_grid)
    table = SweepTable(lambdas, alphas)
    for lam in lambdas:
        params = models[lam]
        post = posterior_cache.get(lam) if posterior_cache else None
        if post is None:
            post = compute_posteriors(params, test, jobs=jobs)
        for a in alphas:
            if not params.has_mixture():
                if a < 1.0:
                    table.cells[(lam, a)] = None
                    continue
                hyps = decode_set(post, v, 1.0, lsm_only=True, lsm_only_unk=lsm_only_unk)
            else:
                hyps = decode_set(post, v, a)
            table.cells[(lam, a)] = score_hypotheses(hyps, test, v)
    return table


# decoding straight from the two monolingual models --------------------------------------


def _role_tensors(ckpt: ModelParams, role: str) -> ModelParams:
    langs = [p for p in ckpt.parts if p in ("man", "eng")]
    if len(langs) != 1 or ckpt.has_mixture():
        raise CheckpointError(f"expected a monolingual checkpoint for the {role} role, found parts {ckpt.parts}")
    src = langs[0]
    tensors = {}
    for name, t in ckpt.tensors.items():
        tensors[role + name[len(src) :]] = t
    head = tensors[f"{role}.head.w"]
    if head.shape[1] != ckpt.cfg.vocab_size(role):
        raise CheckpointError(
            f"{src} checkpoint head has {head.shape[1]} outputs; the {role} vocabulary has {ckpt.cfg.vocab_size(role)}"
        )
    return ModelParams(ckpt.cfg, tensors)


def combine_monolingual(man_ckpt, eng_ckpt) -> ModelParams:
    """A mixture-free dual model assembled from two monolingual checkpoints."""
    man = _role_tensors(_as_params(man_ckpt), "man")
    eng = _role_tensors(_as_params(eng_ckpt), "eng")
    if man.cfg.architecture() != eng.cfg.architecture():
        raise CheckpointError(
            f"incompatible checkpoints: {man.cfg.architecture()} vs {eng.cfg.architecture()}"
        )
    return ModelParams(replace(man.cfg, with_mixture_head=False), {**man.tensors, **eng.tensors})


def decode_pretrained_only(
    man_ckpt, eng_ckpt, test: TestSet, v: VocabSet, lsm_only_unk: str = "average", jobs: int = 1
) -> Tuple[List[LabelSequence], MerReport]:
    """Decode with two monolingual models only, fused without a mixture head."""
    params = combine_monolingual(man_ckpt, eng_ckpt)
    if params.cfg.man_vocab_size != v.man_size or params.cfg.eng_vocab_size != v.eng_size:
        raise CheckpointError("checkpoint vocabulary sizes do not match the vocabulary files")
    post = compute_posteriors(params, test, jobs=jobs)
    hyps = decode_set(post, v, 1.0, lsm_only=True, lsm_only_unk=lsm_only_unk)
    return hyps, score_hypotheses(hyps, test, v)
