"""Feature files, manifests and the synthetic bilingual corpus.

Feature file layout (little-endian)::

    b"LSCAFEAT" | u32 version=1 | u32 T | u32 F | T*F float32, row-major

Manifests are JSON lines with ``utt_id``, ``feats`` (path relative to the
manifest), ``text`` and ``category`` (``man``, ``eng`` or ``cs``).
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .vocab import Lang, VocabSet, write_token_file

FEAT_MAGIC = b"LSCAFEAT"
FEAT_VERSION = 1
CATEGORIES = ("man", "eng", "cs")

# Common characters used as the synthetic Mandarin inventory.
_HANZI = (
    "的一是不了人我在有他这中大来上国个到说们为子和你地出道也时年得就那要下以生会自着去之过家学对可"
    "她里后小么心多天而能好都然没日于起还发成事只作当想看文无开手十用主行方又如前所本见经头面公同三"
    "已老从动两长知民样现分将外但身些与高意进把法此实回二理美点月明其种声全工己话儿者向情部正名定女"
)


class DataError(ValueError):
    pass


# features -------------------------------------------------------------------


def write_features(path: Union[str, Path], feats: np.ndarray) -> None:
    feats = np.asarray(feats)
    if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
        raise DataError(f"feature matrix must be T x F with T, F >= 1, got {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise DataError("feature matrix contains non-finite values")
    t, f = feats.shape
    header = FEAT_MAGIC + struct.pack("<III", FEAT_VERSION, t, f)
    Path(path).write_bytes(header + np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_features(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise DataError(f"{path}: truncated header at offset {len(raw)}")
    if raw[:8] != FEAT_MAGIC:
        raise DataError(f"{path}: bad magic at offset 0")
    version, t, f = struct.unpack("<III", raw[8:20])
    if version != FEAT_VERSION:
        raise DataError(f"{path}: unsupported version {version} at offset 8")
    need = 20 + 4 * t * f
    if len(raw) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(raw)} (truncated at offset {len(raw)})")
    return np.frombuffer(raw, dtype="<f4", offset=20).reshape(t, f).copy()


# manifests ------------------------------------------------------------------------


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    feats: str
    text: str
    category: str

    def to_json(self) -> str:
        return json.dumps(
            {"utt_id": self.utt_id, "feats": self.feats, "text": self.text, "category": self.category},
            ensure_ascii=False,
        )


@dataclass
class Manifest:
    records: List[Utterance]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.records)

    def feature_path(self, rec: Utterance) -> Path:
        return self.root / rec.feats

    def load_features(self) -> Dict[str, np.ndarray]:
        return {r.utt_id: read_features(self.feature_path(r)) for r in self.records}


def read_manifest(path: Union[str, Path]) -> Manifest:
    path = Path(path)
    records = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
        if not isinstance(obj, dict):
            raise DataError(f"{path}:{lineno}: record is not an object")
        for key in ("utt_id", "feats", "text", "category"):
            if key not in obj:
                raise DataError(f"{path}:{lineno}: missing field {key!r}")
        if obj["category"] not in CATEGORIES:
            raise DataError(f"{path}:{lineno}: unknown category {obj['category']!r}")
        if obj["utt_id"] in seen:
            raise DataError(f"{path}:{lineno}: duplicate utt_id {obj['utt_id']!r}")
        seen.add(obj["utt_id"])
        records.append(Utterance(str(obj["utt_id"]), str(obj["feats"]), str(obj["text"]), obj["category"]))
    return Manifest(records, path.parent)


def write_manifest(path: Union[str, Path], records: Sequence[Utterance]) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


def category_of(v: VocabSet, ids: Sequence[int]) -> str:
    langs = {v.classify_token(i) for i in ids} & {Lang.MANDARIN, Lang.ENGLISH}
    if langs == {Lang.MANDARIN}:
        return "man"
    if langs == {Lang.ENGLISH}:
        return "eng"
    return "cs"


# synthetic corpus --------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    man_vocab_size: int = 30
    eng_vocab_size: int = 30
    tokens_per_utt: Tuple[int, int] = (3, 8)
    frames_per_token: Tuple[int, int] = (4, 8)
    silence_frames: Tuple[int, int] = (1, 3)
    noise: float = 0.3
    ratios: Tuple[float, float, float] = (0.27, 0.25, 0.48)
    feat_dim: int = 16
    band_width: int = 3
    n_pretrain: int = 3000
    n_train: int = 8000
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise DataError(f"category ratios must be non-negative and sum to 1: {self.ratios}")
        for name in ("tokens_per_utt", "frames_per_token", "silence_frames"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise DataError(f"{name} range is empty: {lo}..{hi}")
        if self.tokens_per_utt[0] < 1 or self.frames_per_token[0] < 1:
            raise DataError("utterances need at least one token of at least one frame")
        if self.feat_dim < 4 or self.feat_dim % 2:
            raise DataError("feat_dim must be an even number >= 4")
        half = self.feat_dim // 2
        if not 1 <= self.band_width <= half:
            raise DataError("band_width must fit in half the feature dimension")
        n_sub = _n_choose_k(half, self.band_width)
        if self.man_vocab_size > min(n_sub, len(_HANZI)) or self.eng_vocab_size > n_sub:
            raise DataError(f"at most {n_sub} distinct templates fit in a band of {half} rows")
        if self.man_vocab_size < 2 or self.eng_vocab_size < 4:
            raise DataError("inventories too small")


def _n_choose_k(n: int, k: int) -> int:
    from math import comb

    return comb(n, k)


def _make_eng_inventory(rng: np.random.Generator, n: int) -> List[str]:
    letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    n_cont = n // 2
    out: List[str] = []
    seen = set()
    while len(out) < n:
        length = int(rng.integers(2, 5))
        body = "".join(letters[int(i)] for i in rng.integers(0, 26, size=length))
        tok = body + "@@" if len(out) < n_cont else body
        if tok not in seen:
            seen.add(tok)
            out.append(tok)
    return out


def make_templates(cfg: SynthConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Spectral templates: Mandarin tokens energise lower-band rows, English the upper band."""
    half = cfg.feat_dim // 2
    subsets = list(itertools.combinations(range(half), cfg.band_width))

    def pick(n, offset):
        order = rng.permutation(len(subsets))[:n]
        t = np.zeros((n, cfg.feat_dim))
        for row, k in enumerate(order):
            t[row, [offset + j for j in subsets[k]]] = 1.0
        return t

    return pick(cfg.man_vocab_size, 0), pick(cfg.eng_vocab_size, half)


class SynthCorpus:
    """Deterministic generator of utterances over a fixed inventory."""

    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0])
        man = list(_HANZI[: cfg.man_vocab_size])
        eng = _make_eng_inventory(rng, cfg.eng_vocab_size)
        self.vocab = VocabSet(man, eng)
        self.man_templates, self.eng_templates = make_templates(cfg, rng)
        v = self.vocab
        self.templates = np.zeros((v.mix_size, cfg.feat_dim))
        self.templates[v.man_offset : v.eng_offset] = self.man_templates
        self.templates[v.eng_offset :] = self.eng_templates
        self._eng_cont = [v.index(t) for t in eng if t.endswith("@@")]
        self._eng_final = [v.index(t) for t in eng if not t.endswith("@@")]
        self._man_ids = list(range(v.man_offset, v.eng_offset))

    def _pick(self, rng, pool: Sequence[int], prev: Optional[int]) -> int:
        while True:
            tok = pool[int(rng.integers(len(pool)))]
            if tok != prev:
                return tok

    def _span(self, rng, lang: str, k: int, prev: Optional[int]) -> List[int]:
        out: List[int] = []
        for i in range(k):
            last = out[-1] if out else prev
            if lang == "man":
                out.append(self._pick(rng, self._man_ids, last))
            elif i < k - 1 and rng.random() < 0.4:
                out.append(self._pick(rng, self._eng_cont, last))
            else:
                out.append(self._pick(rng, self._eng_final, last))
        return out

    def sample_tokens(self, rng: np.random.Generator, category: str) -> List[int]:
        lo, hi = self.cfg.tokens_per_utt
        while True:
            n = int(rng.integers(lo, hi + 1))
            if category in ("man", "eng"):
                ids = self._span(rng, category, n, None)
            else:
                n = max(n, 2)
                lang = "man" if rng.random() < 0.5 else "eng"
                ids = []
                while len(ids) < n:
                    k = min(int(rng.integers(1, 4)), n - len(ids))
                    if not ids and k == n:
                        k = n - 1
                    ids += self._span(rng, lang, k, ids[-1] if ids else None)
                    lang = "eng" if lang == "man" else "man"
            if list(self.vocab.tokenize(self.vocab.detokenize(ids)).ids) == ids:
                return ids

    def render(self, rng: np.random.Generator, ids: Sequence[int]) -> np.ndarray:
        cfg = self.cfg
        rows = [np.zeros((int(rng.integers(cfg.silence_frames[0], cfg.silence_frames[1] + 1)), cfg.feat_dim))]
        for tok in ids:
            d = int(rng.integers(cfg.frames_per_token[0], cfg.frames_per_token[1] + 1))
            rows.append(np.tile(self.templates[tok], (d, 1)))
        rows.append(np.zeros((int(rng.integers(cfg.silence_frames[0], cfg.silence_frames[1] + 1)), cfg.feat_dim)))
        x = np.concatenate(rows)
        if cfg.noise > 0:
            x = x + cfg.noise * rng.standard_normal(x.shape)
        return x.astype(np.float32)

    def sample(self, rng: np.random.Generator, category: str) -> Tuple[List[int], str, np.ndarray]:
        ids = self.sample_tokens(rng, category)
        return ids, self.vocab.detokenize(ids), self.render(rng, ids)


SPLITS = ("pretrain_man", "pretrain_eng", "train", "test")


def synth_corpus(cfg: SynthConfig, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write vocab files, per-utterance features and one manifest per split.

    Returns the paths of the written manifests and vocabulary files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = SynthCorpus(cfg)
    write_token_file(out / "vocab_man.txt", corpus.vocab.man_tokens)
    write_token_file(out / "vocab_eng.txt", corpus.vocab.eng_tokens)
    (out / "synth_config.json").write_text(json.dumps(asdict(cfg), sort_keys=True) + "\n", encoding="utf-8")
    paths = {"vocab_man": out / "vocab_man.txt", "vocab_eng": out / "vocab_eng.txt"}
    sizes = {"pretrain_man": cfg.n_pretrain, "pretrain_eng": cfg.n_pretrain, "train": cfg.n_train, "test": cfg.n_test}
    for split_no, split in enumerate(SPLITS):
        rng = np.random.default_rng([cfg.seed, 1, split_no])
        feat_dir = out / "feats" / split
        feat_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for i in range(sizes[split]):
            if split == "pretrain_man":
                category = "man"
            elif split == "pretrain_eng":
                category = "eng"
            else:
                category = CATEGORIES[int(rng.choice(3, p=cfg.ratios))]
            ids, text, feats = corpus.sample(rng, category)
            utt_id = f"{split}-{i:06d}"
            rel = f"feats/{split}/{utt_id}.feat"
            write_features(out / rel, feats)
            records.append(Utterance(utt_id, rel, text, category))
        write_manifest(out / f"{split}.jsonl", records)
        paths[split] = out / f"{split}.jsonl"
    return paths
