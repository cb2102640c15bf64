import json
import struct

import numpy as np
import pytest

from lsca.data import (
    FEAT_MAGIC,
    DataError,
    SynthConfig,
    SynthCorpus,
    Utterance,
    category_of,
    read_features,
    read_manifest,
    synth_corpus,
    write_features,
    write_manifest,
)
from lsca.vocab import build_vocab

SMALL = SynthConfig(n_pretrain=6, n_train=20, n_test=10, seed=4)


def test_feature_roundtrip(tmp_path):
    x = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32)
    write_features(tmp_path / "a.feat", x)
    assert np.array_equal(read_features(tmp_path / "a.feat"), x)
    raw = (tmp_path / "a.feat").read_bytes()
    assert raw[:8] == FEAT_MAGIC
    assert struct.unpack("<III", raw[8:20]) == (1, 7, 5)


def test_feature_errors(tmp_path):
    with pytest.raises(DataError):
        write_features(tmp_path / "a.feat", np.zeros((0, 3)))
    with pytest.raises(DataError, match="non-finite"):
        write_features(tmp_path / "a.feat", np.array([[np.nan]]))
    write_features(tmp_path / "a.feat", np.ones((4, 3)))
    raw = (tmp_path / "a.feat").read_bytes()
    (tmp_path / "t.feat").write_bytes(raw[:-4])
    with pytest.raises(DataError, match="offset"):
        read_features(tmp_path / "t.feat")
    (tmp_path / "m.feat").write_bytes(b"NOTAFEAT" + raw[8:])
    with pytest.raises(DataError, match="magic"):
        read_features(tmp_path / "m.feat")


def test_manifest_roundtrip(tmp_path):
    recs = [Utterance("u1", "f/u1.feat", "播放DREAM", "cs"), Utterance("u2", "f/u2.feat", "的", "man")]
    write_manifest(tmp_path / "m.jsonl", recs)
    m = read_manifest(tmp_path / "m.jsonl")
    assert m.records == recs
    assert m.feature_path(recs[0]) == tmp_path / "f/u1.feat"


@pytest.mark.parametrize(
    "line,msg",
    [
        ("{not json", "malformed"),
        ('{"utt_id": "a", "feats": "x", "text": "t"}', "missing field"),
        ('{"utt_id": "a", "feats": "x", "text": "t", "category": "fr"}', "unknown category"),
    ],
)
def test_manifest_errors(tmp_path, line, msg):
    (tmp_path / "m.jsonl").write_text(line + "\n")
    with pytest.raises(DataError, match=msg):
        read_manifest(tmp_path / "m.jsonl")


def test_manifest_duplicate_id(tmp_path):
    line = json.dumps({"utt_id": "a", "feats": "x", "text": "t", "category": "man"})
    (tmp_path / "m.jsonl").write_text(line + "\n" + line + "\n")
    with pytest.raises(DataError, match=":2: duplicate"):
        read_manifest(tmp_path / "m.jsonl")


def test_synth_config_validation():
    with pytest.raises(DataError):
        SynthConfig(ratios=(0.5, 0.5, 0.5))
    with pytest.raises(DataError):
        SynthConfig(feat_dim=7)
    with pytest.raises(DataError):
        SynthConfig(tokens_per_utt=(5, 2))


def test_templates_separate_languages():
    c = SynthCorpus(SMALL)
    half = SMALL.feat_dim // 2
    assert not c.man_templates[:, half:].any() and not c.eng_templates[:, :half].any()
    rows = np.vstack([c.man_templates, c.eng_templates])
    assert len({tuple(r) for r in rows}) == len(rows)


def test_samples_have_category_and_roundtrip():
    c = SynthCorpus(SMALL)
    rng = np.random.default_rng(0)
    for cat in ("man", "eng", "cs") * 10:
        ids, text, feats = c.sample(rng, cat)
        assert category_of(c.vocab, ids) == cat
        assert list(c.vocab.tokenize(text).ids) == ids
        assert all(ids[i] != ids[i - 1] for i in range(1, len(ids)))
        assert feats.shape[1] == SMALL.feat_dim
        lo = SMALL.frames_per_token[0] * len(ids) + 2 * SMALL.silence_frames[0]
        assert feats.shape[0] >= lo


def test_synth_corpus_is_deterministic(tmp_path):
    a = synth_corpus(SMALL, tmp_path / "a")
    b = synth_corpus(SMALL, tmp_path / "b")
    for split in ("pretrain_man", "pretrain_eng", "train", "test"):
        assert a[split].read_bytes() == b[split].read_bytes()
    m = read_manifest(a["test"])
    assert len(m) == 10
    fa, fb = m.load_features(), read_manifest(b["test"]).load_features()
    assert all(np.array_equal(fa[u], fb[u]) for u in fa)
    v = build_vocab(a["vocab_man"], a["vocab_eng"])
    assert {r.category for r in read_manifest(a["pretrain_eng"])} == {"eng"}
    assert all(category_of(v, v.tokenize(r.text).ids) == r.category for r in m)


def test_seed_changes_corpus(tmp_path):
    from dataclasses import replace

    a = synth_corpus(SMALL, tmp_path / "a")
    b = synth_corpus(replace(SMALL, seed=5), tmp_path / "b")
    assert a["train"].read_bytes() != b["train"].read_bytes()
