"""Vocabularies for the mixture model and the two language-specific heads.

Every vocabulary reserves index 0 for the CTC blank and index 1 for unk.
The mixture vocabulary continues with the Mandarin characters followed by
the English subword units; each per-head vocabulary continues with its own
tokens only.  English continuation pieces carry an ``@@`` suffix.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

BLANK = 0
UNK = 1
BLANK_SYMBOL = "<blank>"
UNK_SYMBOL = "<unk>"
CONTINUATION = "@@"

MIX = "mix"
MAN = "man"
ENG = "eng"


class Lang(str, enum.Enum):
    MANDARIN = "man"
    ENGLISH = "eng"
    BLANK = "blank"
    UNK = "unk"


class VocabError(ValueError):
    pass


def is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return (
        0x4E00 <= cp <= 0x9FFF
        or 0x3400 <= cp <= 0x4DBF
        or 0xF900 <= cp <= 0xFAFF
        or 0x20000 <= cp <= 0x2FA1F
    )


def is_latin(ch: str) -> bool:
    return ("A" <= ch <= "Z") or ("a" <= ch <= "z")


# <unk> literal, one CJK character, a Latin-letter run, or any other
# non-space character.
_CJK_CLASS = "\u3400-\u4dbf\u4e00-\u9fff\uf900-\ufaff\U00020000-\U0002fa1f"
_CHUNK_RE = re.compile(r"<unk>|[" + _CJK_CLASS + r"]|[A-Za-z]+|\S")
_CJK_SPACE_RE = re.compile(r"(?<=[" + _CJK_CLASS + r"]) | (?=[" + _CJK_CLASS + r"])")


@dataclass(frozen=True)
class LabelSequence:
    """Token ids in one of the vocabularies ("mix", "man" or "eng")."""

    vocab_id: str
    ids: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if self.vocab_id not in (MIX, MAN, ENG):
            raise VocabError(f"unknown vocabulary {self.vocab_id!r}")
        if any(i < 0 for i in self.ids):
            raise VocabError("negative token id")
        if BLANK in self.ids:
            raise VocabError("blank is not allowed in a label sequence")

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


class VocabSet:
    """The mixture vocabulary plus the two per-head vocabularies.

    Instances are immutable after construction.
    """

    def __init__(self, man_tokens: Sequence[str], eng_tokens: Sequence[str]):
        man_tokens = tuple(man_tokens)
        eng_tokens = tuple(eng_tokens)
        if not man_tokens:
            raise VocabError("empty Mandarin token list")
        if not eng_tokens:
            raise VocabError("empty English token list")
        seen = {BLANK_SYMBOL, UNK_SYMBOL}
        for tok in man_tokens + eng_tokens:
            if not tok or any(c.isspace() for c in tok):
                raise VocabError(f"invalid token {tok!r}")
            if tok in seen:
                raise VocabError(f"duplicate token {tok!r}")
            seen.add(tok)
        for tok in man_tokens:
            if not all(is_cjk(c) for c in tok):
                raise VocabError(f"Mandarin token {tok!r} is not CJK")
        for tok in eng_tokens:
            body = tok[: -len(CONTINUATION)] if tok.endswith(CONTINUATION) else tok
            if not body or not all(is_latin(c) for c in body):
                raise VocabError(f"English token {tok!r} is not a Latin subword")

        self.man_tokens = man_tokens
        self.eng_tokens = eng_tokens
        self._mix_symbols = (BLANK_SYMBOL, UNK_SYMBOL) + man_tokens + eng_tokens
        self._mix_index: Dict[str, int] = {s: i for i, s in enumerate(self._mix_symbols)}
        self._eng_set = frozenset(eng_tokens)
        self._max_piece = max(len(t) for t in eng_tokens)

    # sizes and layout ---------------------------------------------------

    @property
    def man_offset(self) -> int:
        return 2

    @property
    def eng_offset(self) -> int:
        return 2 + len(self.man_tokens)

    @property
    def mix_size(self) -> int:
        return 2 + len(self.man_tokens) + len(self.eng_tokens)

    @property
    def man_size(self) -> int:
        return 2 + len(self.man_tokens)

    @property
    def eng_size(self) -> int:
        return 2 + len(self.eng_tokens)

    def size(self, vocab_id: str) -> int:
        return {MIX: self.mix_size, MAN: self.man_size, ENG: self.eng_size}[vocab_id]

    def symbols(self, vocab_id: str = MIX) -> Tuple[str, ...]:
        if vocab_id == MIX:
            return self._mix_symbols
        if vocab_id == MAN:
            return (BLANK_SYMBOL, UNK_SYMBOL) + self.man_tokens
        if vocab_id == ENG:
            return (BLANK_SYMBOL, UNK_SYMBOL) + self.eng_tokens
        raise VocabError(f"unknown vocabulary {vocab_id!r}")

    def index(self, token: str) -> int:
        """Mixture index of ``token`` (unk if absent)."""
        return self._mix_index.get(token, UNK)

    def symbol(self, idx: int, vocab_id: str = MIX) -> str:
        syms = self.symbols(vocab_id)
        if not 0 <= idx < len(syms):
            raise VocabError(f"id {idx} out of range for {vocab_id} vocabulary")
        return syms[idx]

    def classify_token(self, idx: int) -> Lang:
        if not 0 <= idx < self.mix_size:
            raise VocabError(f"id {idx} out of range for mixture size {self.mix_size}")
        if idx == BLANK:
            return Lang.BLANK
        if idx == UNK:
            return Lang.UNK
        if idx < self.eng_offset:
            return Lang.MANDARIN
        return Lang.ENGLISH

    def check(self, seq: LabelSequence) -> LabelSequence:
        n = self.size(seq.vocab_id)
        for i in seq.ids:
            if i >= n:
                raise VocabError(f"id {i} out of range for {seq.vocab_id} vocabulary")
        return seq

    # text <-> ids -------------------------------------------------------

    def _segment_word(self, word: str) -> List[int]:
        out: List[int] = []
        i = 0
        n = len(word)
        while i < n:
            match = None
            for j in range(min(n, i + self._max_piece), i, -1):
                piece = word[i:j] if j == n else word[i:j] + CONTINUATION
                if piece in self._eng_set:
                    match = (j, piece)
                    break
            if match is None:
                # the unmatched remainder of the word becomes a single unk
                out.append(UNK)
                break
            i, piece = match
            out.append(self._mix_index[piece])
        return out

    def tokenize(self, text: str) -> LabelSequence:
        ids: List[int] = []
        for chunk in _CHUNK_RE.findall(text):
            if chunk == UNK_SYMBOL:
                ids.append(UNK)
            elif is_latin(chunk[0]):
                ids.extend(self._segment_word(chunk))
            else:
                ids.append(self._mix_index.get(chunk, UNK) if is_cjk(chunk) else UNK)
        return LabelSequence(MIX, ids)

    def detokenize(self, seq: Union[LabelSequence, Iterable[int]]) -> str:
        """Render mixture ids as text: CJK glued, Latin words space-separated."""
        ids = seq.ids if isinstance(seq, LabelSequence) else tuple(seq)
        text = " ".join(self._mix_symbols[i] for i in ids if i != BLANK)
        text = text.replace(CONTINUATION + " ", "")
        if text.endswith(CONTINUATION):
            text = text[: -len(CONTINUATION)]
        # drop spaces that touch a CJK character
        return _CJK_SPACE_RE.sub("", text)

    # language-specific targets -----------------------------------------

    def remap_targets(
        self, original: LabelSequence, lang: Lang, collapse_unk_runs: bool = False
    ) -> LabelSequence:
        """Replace every token of the other language by unk.

        With ``collapse_unk_runs`` a run of consecutive unk tokens is reduced
        to one unk, so the result can be shorter than the input.
        """
        lang = Lang(lang)
        if lang not in (Lang.MANDARIN, Lang.ENGLISH):
            raise VocabError(f"cannot remap to {lang}")
        if original.vocab_id != MIX:
            raise VocabError("remap_targets expects mixture-vocabulary ids")
        self.check(original)
        out: List[int] = []
        for i in original.ids:
            cls = self.classify_token(i)
            tok = i if cls in (lang, Lang.UNK) else UNK
            if collapse_unk_runs and tok == UNK and out and out[-1] == UNK:
                continue
            out.append(tok)
        return LabelSequence(MIX, out)

    def project_label_ids(self, seq: LabelSequence, lang: Lang) -> LabelSequence:
        """Translate remapped mixture ids into the per-head vocabulary of ``lang``."""
        lang = Lang(lang)
        self.check(seq)
        head = MAN if lang == Lang.MANDARIN else ENG
        offset = self.man_offset if lang == Lang.MANDARIN else self.eng_offset
        out = []
        for i in seq.ids:
            cls = self.classify_token(i)
            if cls == Lang.UNK:
                out.append(UNK)
            elif cls == lang:
                out.append(i - offset + 2)
            else:
                raise VocabError(
                    f"token {self._mix_symbols[i]!r} is not a {lang.value} token; remap first"
                )
        return LabelSequence(head, out)

    def unproject_label_ids(self, seq: LabelSequence) -> LabelSequence:
        """Inverse of :meth:`project_label_ids`."""
        self.check(seq)
        if seq.vocab_id == MIX:
            return seq
        offset = self.man_offset if seq.vocab_id == MAN else self.eng_offset
        return LabelSequence(MIX, [i if i < 2 else i - 2 + offset for i in seq.ids])

    def head_to_mix_index(self, lang: Lang):
        """Array mapping per-head ids to mixture ids."""
        import numpy as np

        lang = Lang(lang)
        n = self.man_size if lang == Lang.MANDARIN else self.eng_size
        offset = self.man_offset if lang == Lang.MANDARIN else self.eng_offset
        return np.concatenate([[BLANK, UNK], np.arange(n - 2) + offset]).astype(np.int64)


def read_token_file(path: Union[str, Path]) -> List[str]:
    path = Path(path)
    tokens = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()]
    tokens = [t for t in tokens if t]
    if not tokens:
        raise VocabError(f"empty token file: {path}")
    seen = set()
    for t in tokens:
        if t in seen:
            raise VocabError(f"duplicate token {t!r} in {path}")
        seen.add(t)
    return tokens


def build_vocab(man_token_file: Union[str, Path], eng_token_file: Union[str, Path]) -> VocabSet:
    return VocabSet(read_token_file(man_token_file), read_token_file(eng_token_file))


def write_token_file(path: Union[str, Path], tokens: Iterable[str]) -> None:
    Path(path).write_text("".join(t + "\n" for t in tokens), encoding="utf-8")
