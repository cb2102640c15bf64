"""Command-line interface: ``lsca <subcommand> [flags]``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
Every subcommand writes its resolved configuration and a summary into
``--out-dir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import config as C
from .data import SPLITS, read_manifest, synth_corpus
from .evaluation import probe_csv, probe_dump, probe_svg, score_set
from .fusion import (
    TestSet,
    combine_monolingual,
    compute_posteriors,
    decode_set,
    score_hypotheses,
    sweep,
)
from .model import average_checkpoints, load_checkpoint, save_checkpoint
from .pipeline import ExperimentPlan, run_experiment
from .train import TrainData, train_loop
from .vocab import ENG, MAN, build_vocab

log = logging.getLogger("lsca")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="flat key = value config file (default: none)")
    g.add_argument("--profile", choices=C.PROFILES, default=None, help="built-in profile (default: toy)")
    g.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key; repeatable"
    )
    g.add_argument("--seed", type=int, default=None, help="global seed (default: config, then $LSCA_SEED, then 0)")
    g.add_argument("--out-dir", required=out_required, help="directory for all outputs")
    g.add_argument("--jobs", type=int, default=1, help="parallel decoding workers (default: 1)")
    g.add_argument("--log-level", default="INFO", help="logging level (default: INFO)")


def _corpus_args(p: argparse.ArgumentParser, split: Optional[str]) -> None:
    p.add_argument("--corpus", required=True, help="corpus directory with vocab files and split manifests")
    if split is not None:
        p.add_argument("--split", default=split, help=f"manifest name inside --corpus (default: {split})")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="lsca", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate the synthetic bilingual corpus", formatter_class=fmt)
    _common(p)

    p = sub.add_parser("pretrain", help="pre-train one monolingual model", formatter_class=fmt)
    _common(p)
    _corpus_args(p, None)
    p.add_argument("--lang", choices=(MAN, ENG), required=True, help="language to pre-train")

    p = sub.add_parser("train", help="code-switching training with the LSCA objective", formatter_class=fmt)
    _common(p)
    _corpus_args(p, "train")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="LS loss weight (default: train.lam)")
    p.add_argument("--pretrained-man", required=True, help="Mandarin monolingual checkpoint")
    p.add_argument("--pretrained-eng", required=True, help="English monolingual checkpoint")

    p = sub.add_parser("decode", help="fusion decoding of a test manifest", formatter_class=fmt)
    _common(p)
    _corpus_args(p, "test")
    p.add_argument("--ckpt", help="dual-encoder checkpoint")
    p.add_argument("--man-ckpt", help="Mandarin monolingual checkpoint (pretrained-only decoding)")
    p.add_argument("--eng-ckpt", help="English monolingual checkpoint (pretrained-only decoding)")
    p.add_argument("--alpha", type=float, default=None, help="LS posterior weight (default: fusion.alpha)")
    p.add_argument("--lsm-only", action="store_true", help="decode without the mixture head")

    p = sub.add_parser("sweep", help="MER over a lambda x alpha grid", formatter_class=fmt)
    _common(p)
    _corpus_args(p, "test")
    p.add_argument("--lambda-ckpts", required=True, help="comma-separated LAMBDA=CKPT pairs")
    p.add_argument("--alpha", type=_floats, default=None, help="comma-separated alpha grid (default: config)")
    p.add_argument("--out", default=None, help="CSV path (default: OUT_DIR/sweep.csv)")

    p = sub.add_parser("score", help="score hypotheses against a manifest", formatter_class=fmt)
    _common(p)
    _corpus_args(p, "test")
    p.add_argument("--hyps", required=True, help="hypothesis file: utt_id<TAB>text per line")

    p = sub.add_parser("probe", help="per-frame top-1 dump of the two language heads", formatter_class=fmt)
    _common(p)
    _corpus_args(p, "test")
    p.add_argument("--ckpt", help="dual-encoder checkpoint")
    p.add_argument("--man-ckpt", help="Mandarin monolingual checkpoint")
    p.add_argument("--eng-ckpt", help="English monolingual checkpoint")
    p.add_argument("--utt", action="append", default=[], help="utterance id; repeatable (default: first 3 cs)")
    p.add_argument("--svg", action="store_true", help="also write an SVG per utterance")

    p = sub.add_parser("avg-ckpt", help="average checkpoints element-wise", formatter_class=fmt)
    _common(p)
    p.add_argument("ckpts", nargs="+", help="checkpoint files")
    p.add_argument("--out", default=None, help="output checkpoint (default: OUT_DIR/avg.ckpt)")

    p = sub.add_parser("experiment", help="full pipeline: pretrain, train per lambda, sweep, probe", formatter_class=fmt)
    _common(p)
    p.add_argument("--corpus", default=None, help="existing corpus directory (default: synthesize)")
    return ap


# helpers -------------------------------------------------------------------------


def _resolve(args, extra: Optional[Dict[str, object]] = None) -> C.RunConfig:
    file_values = C.read_config_file(args.config) if args.config else {}
    overrides: Dict[str, object] = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, raw = item.split("=", 1)
        overrides[k.strip()] = C.parse_value(k.strip(), raw)
    if args.seed is not None:
        overrides["seed"] = args.seed
    overrides.update(extra or {})
    return C.resolve(args.profile, file_values, overrides)


def _need_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _corpus(args):
    root = Path(args.corpus)
    vm, ve = _need_file(root / "vocab_man.txt", "vocab file"), _need_file(root / "vocab_eng.txt", "vocab file")
    return root, build_vocab(vm, ve)


def _manifest(root: Path, split: str):
    return read_manifest(_need_file(root / f"{split}.jsonl", "manifest"))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")


def _model_cfg(run: C.RunConfig, v, feat_dim: int, mixture: bool = True):
    return replace(
        run.model, man_vocab_size=v.man_size, eng_vocab_size=v.eng_size, feat_dim=feat_dim, with_mixture_head=mixture
    )


def _dual_or_pair(args):
    if args.ckpt:
        if args.man_ckpt or args.eng_ckpt:
            raise UsageError("give either --ckpt or --man-ckpt/--eng-ckpt, not both")
        return load_checkpoint(_need_file(args.ckpt, "checkpoint")), False
    if not (args.man_ckpt and args.eng_ckpt):
        raise UsageError("need --ckpt or both --man-ckpt and --eng-ckpt")
    man = load_checkpoint(_need_file(args.man_ckpt, "checkpoint"))
    eng = load_checkpoint(_need_file(args.eng_ckpt, "checkpoint"))
    return combine_monolingual(man, eng), True


# subcommands ----------------------------------------------------------------------


def cmd_synth(args, run: C.RunConfig, out: Path) -> Dict[str, object]:
    paths = synth_corpus(run.synth, out)
    counts = {s: len(read_manifest(paths[s])) for s in SPLITS}
    return {"splits": counts}


def cmd_pretrain(args, run, out):
    root, v = _corpus(args)
    data = TrainData.from_manifest(_manifest(root, f"pretrain_{args.lang}"), v)
    feat_dim = next(iter(data.feats.values())).shape[1]
    res = train_loop(f"pretrain_{args.lang}", _model_cfg(run, v, feat_dim, False), run.pretrain, data, v, out)
    return {"final_checkpoint": res.final_checkpoint.name, "epoch_losses": res.epoch_losses, "skipped": res.skipped}


def cmd_train(args, run, out):
    root, v = _corpus(args)
    pm = _need_file(args.pretrained_man, "checkpoint")
    pe = _need_file(args.pretrained_eng, "checkpoint")
    data = TrainData.from_manifest(_manifest(root, args.split), v)
    feat_dim = next(iter(data.feats.values())).shape[1]
    lam = run.train.lam
    cfg = _model_cfg(run, v, feat_dim, lam < 1.0)
    res = train_loop("cs_train", cfg, run.train, data, v, out, pretrained=(pm, pe))
    return {"lambda": lam, "final_checkpoint": res.final_checkpoint.name, "epoch_losses": res.epoch_losses, "skipped": res.skipped}


def cmd_decode(args, run, out):
    root, v = _corpus(args)
    test = TestSet.from_manifest(_manifest(root, args.split))
    params, pair = _dual_or_pair(args)
    lsm_only = args.lsm_only or run.fusion.lsm_only or pair or not params.has_mixture()
    alpha = 1.0 if lsm_only else run.fusion.alpha
    post = compute_posteriors(params, test, jobs=args.jobs)
    hyps = decode_set(post, v, alpha, lsm_only=lsm_only, lsm_only_unk=run.fusion.lsm_only_unk)
    report = score_hypotheses(hyps, test, v)
    lines = [f"{u}\t{v.detokenize(h)}\n" for u, h in zip(test.utt_ids, hyps)]
    (out / "hyps.txt").write_text("".join(lines), encoding="utf-8")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    return {"alpha": alpha, "lsm_only": lsm_only, "mer": report.as_dict()["overall"]}


def _lambda_ckpts(text: str) -> Dict[float, Path]:
    out = {}
    for item in text.split(","):
        if "=" not in item:
            raise UsageError(f"--lambda-ckpts expects LAMBDA=CKPT pairs, got {item!r}")
        lam, path = item.split("=", 1)
        try:
            lam_f = float(lam)
        except ValueError:
            raise UsageError(f"bad lambda {lam!r}") from None
        if not 0.0 <= lam_f <= 1.0:
            raise UsageError(f"lambda out of range: {lam_f}")
        out[lam_f] = _need_file(path, "checkpoint")
    return out


def cmd_sweep(args, run, out):
    root, v = _corpus(args)
    ckpts = _lambda_ckpts(args.lambda_ckpts)
    test = TestSet.from_manifest(_manifest(root, args.split))
    models = {lam: load_checkpoint(p) for lam, p in ckpts.items()}
    table = sweep(models, test, v, run.alphas, run.fusion.lsm_only_unk, jobs=args.jobs)
    dest = Path(args.out) if args.out else out / "sweep.csv"
    dest.write_text(table.to_csv(), encoding="utf-8")
    print(table.to_csv(), end="")
    return {"csv": str(dest), "cells": {f"{l:g}/{a:g}": table.mer(l, a) for (l, a) in table.cells}}


def cmd_score(args, run, out):
    root, _ = _corpus(args)
    manifest = _manifest(root, args.split)
    hyps: Dict[str, str] = {}
    for lineno, line in enumerate(_need_file(args.hyps, "hypothesis file").read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        utt, _, text = line.partition("\t")
        hyps[utt] = text
    recs = list(manifest)
    missing = [r.utt_id for r in recs if r.utt_id not in hyps]
    if missing:
        raise UsageError(f"no hypothesis for {len(missing)} utterances, e.g. {missing[0]}")
    report = score_set([r.text for r in recs], [hyps[r.utt_id] for r in recs], [r.category for r in recs])
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    return {"mer": report.as_dict()["overall"]}


def cmd_probe(args, run, out):
    root, v = _corpus(args)
    test = TestSet.from_manifest(_manifest(root, args.split))
    params, _ = _dual_or_pair(args)
    if args.utt:
        unknown = [u for u in args.utt if u not in test.utt_ids]
        if unknown:
            raise UsageError(f"unknown utterance id {unknown[0]}")
        idx = [test.utt_ids.index(u) for u in args.utt]
    else:
        idx = [i for i, c in enumerate(test.categories) if c == "cs"][: run.probe_utts]
    sub = TestSet([test.utt_ids[i] for i in idx], [test.feats[i] for i in idx], [test.texts[i] for i in idx], [test.categories[i] for i in idx])
    post = compute_posteriors(params, sub, jobs=args.jobs)
    files = []
    for k, utt in enumerate(sub.utt_ids):
        recs = probe_dump(post[MAN][k], post[ENG][k], v)
        (out / f"{utt}.csv").write_text(probe_csv(recs), encoding="utf-8")
        files.append(f"{utt}.csv")
        if args.svg:
            (out / f"{utt}.svg").write_text(probe_svg(recs, sub.texts[k]), encoding="utf-8")
            files.append(f"{utt}.svg")
    return {"files": files}


def cmd_avg_ckpt(args, run, out):
    paths = [_need_file(p, "checkpoint") for p in args.ckpts]
    avg = average_checkpoints(paths)
    dest = Path(args.out) if args.out else out / "avg.ckpt"
    save_checkpoint(dest, avg)
    return {"inputs": [str(p) for p in paths], "output": str(dest)}


def cmd_experiment(args, run, out):
    res = run_experiment(ExperimentPlan(run, str(out), corpus_dir=args.corpus, jobs=args.jobs))
    print(res.sweep_csv.read_text(encoding="utf-8"), end="")
    return {"sweep_csv": res.sweep_csv.name, "best": res.report["best"]}


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "decode": cmd_decode,
    "sweep": cmd_sweep,
    "score": cmd_score,
    "probe": cmd_probe,
    "avg-ckpt": cmd_avg_ckpt,
    "experiment": cmd_experiment,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(levelname)s %(message)s")
        extra: Dict[str, object] = {}
        if getattr(args, "lam", None) is not None:
            extra["train.lam"] = args.lam
        if getattr(args, "alpha", None) is not None:
            if args.cmd == "sweep":
                extra["experiment.alphas"] = tuple(args.alpha)
            else:
                extra["fusion.alpha"] = args.alpha
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = _resolve(args, extra)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        C.write_run_config(out, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:  # invalid configuration values
        print(f"error: {e}", file=sys.stderr)
        return 2

    try:
        summary = COMMANDS[args.cmd](args, cfg, out)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    _write_json(out / "summary.json", {"command": args.cmd, **summary})
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
