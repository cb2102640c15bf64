"""Mixed error rate scoring and the frame-probability probe.

Mandarin is scored per character and English per whole word, over a single
alignment of the mixed unit sequence.
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .vocab import BLANK, CONTINUATION, UNK, VocabSet, _CJK_CLASS

CATEGORIES = ("man", "eng", "cs")
REPORT_KEYS = CATEGORIES + ("overall",)
BLANK_MARK = "#"
UNK_MARK = "*"

_UNIT_RE = re.compile(r"<unk>|[" + _CJK_CLASS + r"]|[^\s<" + _CJK_CLASS + r"]+|<")


class ScoringError(ValueError):
    pass


def to_scoring_tokens(text: str) -> List[str]:
    """Split text into scoring units: one per CJK character, one per word.

    Subword continuations ("DAY@@ DREAM") are joined first.
    """
    text = text.replace(CONTINUATION + " ", "").replace(CONTINUATION, "")
    return _UNIT_RE.findall(text)


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> Tuple[int, int, int]:
    """(substitutions, deletions, insertions) of a minimal alignment.

    Ties in the backtrace prefer the diagonal, then a deletion, then an
    insertion, so the decomposition is deterministic.
    """
    n, m = len(ref), len(hyp)
    cost = [list(range(m + 1))]
    for i in range(1, n + 1):
        r, prev = ref[i - 1], cost[i - 1]
        row = [i] + [0] * m
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (r != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1)
        cost.append(row)
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i][j] == cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i][j] == cost[i - 1][j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), d, ins


@dataclass
class ErrorCounts:
    S: int = 0
    D: int = 0
    I: int = 0
    N: int = 0

    @property
    def errors(self) -> int:
        return self.S + self.D + self.I

    def add(self, s: int, d: int, i: int, n: int) -> None:
        self.S += s
        self.D += d
        self.I += i
        self.N += n


def _round_pct(errors: int, n: int) -> Decimal:
    return (Decimal(100 * errors) / Decimal(n)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


@dataclass
class MerReport:
    counts: Dict[str, ErrorCounts] = field(default_factory=lambda: {k: ErrorCounts() for k in REPORT_KEYS})

    def mer(self, category: str = "overall") -> Optional[float]:
        """Unrounded MER percentage, or None for an empty category."""
        c = self.counts[category]
        return None if c.N == 0 else 100.0 * c.errors / c.N

    def display(self, category: str = "overall") -> str:
        c = self.counts[category]
        return "-" if c.N == 0 else str(_round_pct(c.errors, c.N))

    def as_dict(self) -> Dict[str, Dict[str, object]]:
        out = {}
        for k in REPORT_KEYS:
            c = self.counts[k]
            pct = None if c.N == 0 else float(_round_pct(c.errors, c.N))
            out[k] = {"S": c.S, "D": c.D, "I": c.I, "N": c.N, "mer_pct": pct}
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=False) + "\n"

    def to_text(self) -> str:
        lines = [f"{'category':<9}{'S':>7}{'D':>7}{'I':>7}{'N':>8}{'MER%':>9}"]
        for k in REPORT_KEYS:
            c = self.counts[k]
            lines.append(f"{k:<9}{c.S:>7}{c.D:>7}{c.I:>7}{c.N:>8}{self.display(k):>9}")
        return "\n".join(lines) + "\n"


def score_set(refs: Sequence[str], hyps: Sequence[str], categories: Sequence[Optional[str]]) -> MerReport:
    """Accumulate per-category error counts over a test set."""
    if not (len(refs) == len(hyps) == len(categories)):
        raise ScoringError(f"length mismatch: {len(refs)} refs, {len(hyps)} hyps, {len(categories)} categories")
    if not refs:
        raise ScoringError("empty test set")
    report = MerReport()
    for k, (ref, hyp, cat) in enumerate(zip(refs, hyps, categories)):
        if cat not in CATEGORIES:
            raise ScoringError(f"utterance {k}: missing or unknown category {cat!r}")
        r, h = to_scoring_tokens(ref), to_scoring_tokens(hyp)
        s, d, i = edit_distance(r, h)
        report.counts[cat].add(s, d, i, len(r))
        report.counts["overall"].add(s, d, i, len(r))
    return report


# probe ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeRecord:
    frame: int
    man_token: str
    man_prob: float
    eng_token: str
    eng_prob: float
    man_id: int
    eng_id: int


def _render(v: VocabSet, idx: int, head: str) -> str:
    if idx == BLANK:
        return BLANK_MARK
    if idx == UNK:
        return UNK_MARK
    return v.symbol(idx, head)


def probe_dump(p_man: np.ndarray, p_eng: np.ndarray, v: VocabSet) -> List[ProbeRecord]:
    """Top-1 token and probability of both heads per frame.

    Frames where both heads predict blank are dropped.
    """
    p_man = np.asarray(p_man)
    p_eng = np.asarray(p_eng)
    if p_man.shape[0] != p_eng.shape[0]:
        raise ScoringError(f"frame counts differ: man {p_man.shape[0]}, eng {p_eng.shape[0]}")
    man_top = p_man.argmax(axis=1)
    eng_top = p_eng.argmax(axis=1)
    out = []
    for t in range(p_man.shape[0]):
        a, b = int(man_top[t]), int(eng_top[t])
        if a == BLANK and b == BLANK:
            continue
        out.append(
            ProbeRecord(t, _render(v, a, "man"), float(p_man[t, a]), _render(v, b, "eng"), float(p_eng[t, b]), a, b)
        )
    return out


def probe_csv(records: Sequence[ProbeRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "man_token", "man_prob", "eng_token", "eng_prob"])
    for r in records:
        w.writerow([r.frame, r.man_token, f"{r.man_prob:.6f}", r.eng_token, f"{r.eng_prob:.6f}"])
    return buf.getvalue()


def own_language_confidence(records: Sequence[ProbeRecord]) -> Optional[float]:
    """Mean top-1 probability over frames where a head predicts one of its own tokens."""
    vals = [r.man_prob for r in records if r.man_id > UNK] + [r.eng_prob for r in records if r.eng_id > UNK]
    return float(np.mean(vals)) if vals else None


_SVG_W, _SVG_H, _PAD = 640, 240, 40


def probe_svg(records: Sequence[ProbeRecord], title: str = "") -> str:
    """Scatter of both heads' top-1 probabilities; unk points are not drawn."""
    n = max((r.frame for r in records), default=0) + 1
    pw, ph = _SVG_W - 2 * _PAD, _SVG_H - 2 * _PAD

    def xy(frame: int, prob: float) -> Tuple[float, float]:
        x = _PAD + (frame + 0.5) * pw / n
        return x, _PAD + (1.0 - prob) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}">',
        f'<rect x="{_PAD}" y="{_PAD}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>',
        f'<text x="{_PAD}" y="{_PAD - 12}" font-size="12">{_xml(title)}</text>',
        f'<text x="{_PAD - 30}" y="{_PAD + 4}" font-size="10">1.0</text>',
        f'<text x="{_PAD - 30}" y="{_PAD + ph + 4}" font-size="10">0.0</text>',
    ]
    for r in records:
        if r.man_token != UNK_MARK:
            x, y = xy(r.frame, r.man_prob)
            parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="#c0392b"><title>{_xml(r.man_token)}</title></circle>')
        if r.eng_token != UNK_MARK:
            x, y = xy(r.frame, r.eng_prob)
            parts.append(
                f'<rect x="{x - 3:.2f}" y="{y - 3:.2f}" width="6" height="6" fill="#2c7fb8"><title>{_xml(r.eng_token)}</title></rect>'
            )
    for k, (label, color) in enumerate((("man", "#c0392b"), ("eng", "#2c7fb8"))):
        y = _SVG_H - 14
        parts.append(f'<text x="{_PAD + 60 * k}" y="{y}" font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _xml(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
