"""End-to-end experiment: corpus, monolingual pre-training, code-switching
training over a lambda grid, the lambda/alpha sweep, and before/after probes.

Each stage leaves a DONE marker in its directory so an interrupted run can be
resumed; a failure leaves a RESUME file naming the stage that failed.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from .config import RunConfig
from .data import read_manifest, synth_corpus
from .evaluation import own_language_confidence, probe_csv, probe_dump, probe_svg
from .fusion import (
    PAPER_PRETRAINED_ONLY_MER,
    PAPER_REFERENCE_MER,
    TestSet,
    combine_monolingual,
    compute_posteriors,
    decode_set,
    score_hypotheses,
    sweep,
)
from .model import ModelParams, load_checkpoint
from .train import TrainData, train_loop
from .vocab import ENG, MAN, VocabSet, build_vocab

log = logging.getLogger(__name__)

DONE = "DONE"
RESUME = "RESUME"
PROBE_LAMBDA = 0.7


@dataclass(frozen=True)
class ExperimentPlan:
    """Everything needed to (re)run one experiment."""

    run: RunConfig
    out_dir: str
    corpus_dir: Optional[str] = None
    jobs: int = 1

    @property
    def lambdas(self):
        return self.run.lambdas

    @property
    def alphas(self):
        return self.run.alphas

    def to_dict(self) -> Dict[str, object]:
        return {
            "config": {k: _jsonable(v) for k, v in sorted(self.run.flat().items())},
            "corpus_dir": self.corpus_dir,
            "stages": ["corpus", "pretrain_man", "pretrain_eng"] + [lambda_dir(l) for l in sorted(self.lambdas)],
        }


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def lambda_dir(lam: float) -> str:
    return f"lambda_{lam:g}"


def _done(d: Path) -> bool:
    return (d / DONE).is_file()


def _mark(d: Path) -> None:
    (d / DONE).write_text("ok\n", encoding="utf-8")


@dataclass
class ExperimentResult:
    out_dir: Path
    sweep_csv: Path
    report: Dict[str, object]


def _stage_corpus(plan: ExperimentPlan, out: Path) -> Path:
    if plan.corpus_dir is not None:
        return Path(plan.corpus_dir)
    d = out / "corpus"
    if not _done(d):
        if d.exists():
            shutil.rmtree(d)
        synth_corpus(plan.run.synth, d)
        _mark(d)
    return d


def _train_stage(d: Path, fn) -> ModelParams:
    ckpt = d / "final.ckpt"
    if _done(d) and ckpt.is_file():
        log.info("reusing %s", d)
        return load_checkpoint(ckpt)
    if d.exists():
        shutil.rmtree(d)
    fn(d)
    _mark(d)
    return load_checkpoint(ckpt)


def _probe_stats(post: Dict[str, List[np.ndarray]], idx: List[int], v: VocabSet) -> Optional[float]:
    records = []
    for i in idx:
        records.extend(probe_dump(post[MAN][i], post[ENG][i], v))
    return own_language_confidence(records)


def _write_probes(d: Path, tag: str, post, test: TestSet, idx: List[int], v: VocabSet) -> None:
    for i in idx:
        recs = probe_dump(post[MAN][i], post[ENG][i], v)
        stem = f"{tag}_{test.utt_ids[i]}"
        (d / f"{stem}.csv").write_text(probe_csv(recs), encoding="utf-8")
        (d / f"{stem}.svg").write_text(probe_svg(recs, f"{tag}: {test.texts[i]}"), encoding="utf-8")


def _round(x: Optional[float]) -> Optional[float]:
    return None if x is None else round(x, 6)


def run_experiment(plan: ExperimentPlan) -> ExperimentResult:
    """Run (or resume) the experiment and write sweep.csv and report.json."""
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    (out / "run_config.txt").write_text(plan.run.to_text(), encoding="utf-8")
    stage = "corpus"
    try:
        corpus = _stage_corpus(plan, out)
        v = build_vocab(corpus / "vocab_man.txt", corpus / "vocab_eng.txt")
        test = TestSet.from_manifest(read_manifest(corpus / "test.jsonl"))
        feat_dim = test.feats[0].shape[1]
        model_cfg = replace(
            plan.run.model, man_vocab_size=v.man_size, eng_vocab_size=v.eng_size, feat_dim=feat_dim
        )

        pre = {}
        for lang in (MAN, ENG):
            stage = f"pretrain_{lang}"
            d = out / stage

            def fn(d, lang=lang):
                data = TrainData.from_manifest(read_manifest(corpus / f"pretrain_{lang}.jsonl"), v)
                train_loop(f"pretrain_{lang}", model_cfg, plan.run.pretrain, data, v, d)

            pre[lang] = _train_stage(d, fn)

        train_data = None
        models: Dict[float, ModelParams] = {}
        for lam in sorted(plan.lambdas):
            stage = lambda_dir(lam)
            d = out / stage

            def fn(d, lam=lam):
                nonlocal train_data
                if train_data is None:
                    train_data = TrainData.from_manifest(read_manifest(corpus / "train.jsonl"), v)
                cfg = replace(model_cfg, with_mixture_head=lam < 1.0)
                tcfg = replace(plan.run.train, lam=lam)
                train_loop("cs_train", cfg, tcfg, train_data, v, d, pretrained=(pre[MAN], pre[ENG]))

            models[lam] = _train_stage(d, fn)

        stage = "sweep"
        posts = {lam: compute_posteriors(p, test, jobs=plan.jobs) for lam, p in models.items()}
        table = sweep(models, test, v, plan.alphas, plan.run.fusion.lsm_only_unk, posterior_cache=posts)
        sweep_csv = out / "sweep.csv"
        sweep_csv.write_text(table.to_csv(), encoding="utf-8")

        stage = "pretrained_only"
        mono = combine_monolingual(pre[MAN], pre[ENG])
        mono_post = compute_posteriors(mono, test, jobs=plan.jobs)
        mono_hyps = decode_set(mono_post, v, 1.0, lsm_only=True, lsm_only_unk=plan.run.fusion.lsm_only_unk)
        mono_report = score_hypotheses(mono_hyps, test, v)
        hyp_langs = sorted({v.classify_token(i).value for h in mono_hyps for i in h.ids})

        stage = "probe"
        probe_dir = out / "probe"
        probe_dir.mkdir(exist_ok=True)
        cs_idx = [i for i, c in enumerate(test.categories) if c == "cs"]
        sample = cs_idx[: plan.run.probe_utts]
        after_lam = min(models, key=lambda l: (abs(l - PROBE_LAMBDA), l))
        _write_probes(probe_dir, "before", mono_post, test, sample, v)
        _write_probes(probe_dir, "after", posts[after_lam], test, sample, v)
        before_conf = _probe_stats(mono_post, cs_idx, v)
        after_conf = _probe_stats(posts[after_lam], cs_idx, v)

        stage = "report"
        base = table.cells.get((0.0, 0.0))
        cells = {}
        for lam in table.lambdas:
            for a in table.alphas:
                rep = table.cells[(lam, a)]
                cells[f"{lam:g}/{a:g}"] = None if rep is None else rep.as_dict()
        available = [(k, table.mer(*k)) for k in table.available()]
        best = min(available, key=lambda kv: (kv[1], kv[0])) if available else None
        report = {
            "baseline": None
            if base is None
            else {"lambda": 0.0, "alpha": 0.0, "mer_pct": float(base.display()), "report": base.as_dict()},
            "best": None if best is None else {"lambda": best[0][0], "alpha": best[0][1], "mer_pct": _round(best[1])},
            "cells": cells,
            "comparison_to_baseline": {
                k: (None if base is None or cells[k] is None else round(cells[k]["overall"]["mer_pct"] - float(base.display()), 2))
                for k in cells
            },
            "pretrained_only": {"report": mono_report.as_dict(), "hypothesis_languages": hyp_langs},
            "probe": {
                "lambda_after": after_lam,
                "utterances": [test.utt_ids[i] for i in sample],
                "own_language_confidence_before": _round(before_conf),
                "own_language_confidence_after": _round(after_conf),
                "frames_scope": "all code-switched test utterances",
            },
            "paper_reference_mer": {
                **{f"{l:g}/{a:g}": m for (l, a), m in PAPER_REFERENCE_MER.items()},
                "pretrained_only": PAPER_PRETRAINED_ONLY_MER,
            },
        }
        (out / "report.json").write_text(json.dumps(report, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    except BaseException:
        (out / RESUME).write_text(f"failed at stage {stage}\n", encoding="utf-8")
        raise
    resume = out / RESUME
    if resume.exists():
        resume.unlink()
    return ExperimentResult(out, sweep_csv, report)


def load_report(out_dir: Union[str, Path]) -> Dict[str, object]:
    return json.loads((Path(out_dir) / "report.json").read_text(encoding="utf-8"))
