"""Tests for the unified transformer: pathways, sequence assembly, packing masks."""

from types import SimpleNamespace

import numpy as np
import pytest

from dualenc import corpus as cp
from dualenc import model as md
from dualenc import numerics as nm
from dualenc.model import (ModelConfig, SequenceError, assemble_sequence,
                           build_model_params, forward_windows, make_attention_mask)

VOCAB = cp.TextVocab()


def make_cfg(**kw):
    kw.setdefault("text_vocab", len(VOCAB))
    return ModelConfig(**kw)


def make_model(seed=0, **kw):
    cfg = make_cfg(**kw)
    store = build_model_params(cfg, np.random.default_rng(seed))
    return cfg, store


def render_one(seed=0):
    rng = np.random.default_rng(seed)
    return cp.render_scene(cp.sample_scene(rng))


# -- configuration and parameters ---------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        make_cfg(hidden=130, heads=4)
    with pytest.raises(ValueError):
        make_cfg(understanding_pathway="nope")
    with pytest.raises(ValueError):
        make_cfg(image_side=18, und_patch=4)


def test_params_follow_pathway():
    _, enc = make_model(understanding_pathway="encoder")
    assert "model/und_enc/patch/w" in enc
    assert "model/und_adaptor/fc1/w" in enc
    assert enc["model/und_adaptor/fc1/w"].shape[0] == 64

    _, vq = make_model(understanding_pathway="vq_ids")
    assert not any(p.startswith("model/und_") for p in vq.paths())

    cfg, sem = make_model(understanding_pathway="semantic")
    assert "model/und_adaptor/fc1/w" in sem
    assert sem["model/und_adaptor/fc1/w"].shape[0] == cfg.sem_hidden
    assert not any(p.startswith("model/und_enc") for p in sem.paths())


def test_param_build_is_deterministic():
    _, a = make_model(seed=5)
    _, b = make_model(seed=5)
    for p in a.paths():
        assert np.array_equal(a[p].data, b[p].data)


# -- pathways -------------------------------------------------------------------


def test_understanding_encoder_shapes_and_bidirectionality():
    cfg, store = make_model(seed=1)
    imgs = np.stack([render_one(0), render_one(1)])
    with nm.no_grad():
        feats = md.encode_understanding(store, cfg, imgs)
    assert feats.shape == (2, cfg.und_tokens, cfg.und_width)

    # perturbing the LAST patch must change features at EVERY position
    bumped = imgs.copy()
    bumped[0, 12:16, 12:16, :] += 0.5
    with nm.no_grad():
        feats2 = md.encode_understanding(store, cfg, bumped)
    delta = np.abs(feats2.data[0] - feats.data[0]).max(axis=1)
    assert np.all(delta > 0), "encoder should attend bidirectionally"
    assert np.allclose(feats2.data[1], feats.data[1])


def test_adapt_generation_uses_codebook_rows():
    cfg, store = make_model(seed=2)
    k, d = 128, cfg.code_dim
    cb = nm.Tensor(np.random.default_rng(0).normal(size=(k, d)).astype(np.float32),
                   requires_grad=False)
    ids = np.array([[0, 5, 7], [2, 2, 127]])
    with nm.no_grad():
        out = md.adapt_generation(store, ids, cb)
    assert out.shape == (2, 3, cfg.hidden)
    # identical ids give identical embeddings
    assert np.array_equal(out.data[1, 0], out.data[1, 1])
    with pytest.raises(nm.ShapeError):
        md.adapt_generation(store, np.array([k]), cb)


def test_frozen_codebook_gets_no_gradient():
    cfg, store = make_model(seed=3)
    cb = nm.Tensor(np.random.default_rng(1).normal(size=(128, cfg.code_dim)).astype(np.float32),
                   requires_grad=False)
    out = md.adapt_generation(store, np.arange(4), cb)
    nm.mean(out * out).backward()
    assert cb.grad is None
    assert store["model/gen_adaptor/fc1/w"].grad is not None


# -- sequence assembly ------------------------------------------------------------


def test_text_sequence_layout():
    cfg, _ = make_model()
    seq = assemble_sequence("text", {"text": "a red square"}, cfg, VOCAB)
    toks = VOCAB.tokenize("a red square")
    assert seq.ids.tolist() == [cp.BOS] + toks + [cp.EOS]
    assert seq.targets.tolist() == [-1] + toks + [cp.EOS]
    assert all(m == md.MOD_TEXT for m in seq.target_modality[1:])


def test_generation_sequence_layout():
    cfg, _ = make_model()
    ids = np.arange(16) % 5
    seq = assemble_sequence("gen", {"caption": "a red square at top left.",
                                    "image_ids": ids}, cfg, VOCAB)
    cap = VOCAB.tokenize("a red square at top left.")
    n = len(cap)
    assert seq.ids[:n].tolist() == cap
    assert seq.ids[n] == cp.BOI
    assert seq.ids[n + 1:n + 17].tolist() == ids.tolist()
    assert seq.ids[-1] == cp.EOI
    assert np.all(seq.targets[:n + 1] == -1), "no loss on the caption or marker"
    assert seq.targets[n + 1:n + 17].tolist() == ids.tolist()
    assert all(m == md.MOD_IMAGE for m in seq.target_modality[n + 1:n + 17])
    assert seq.targets[-1] == cp.EOI and seq.target_modality[-1] == md.MOD_TEXT
    assert seq.n_loss() == 17


def test_understanding_sequence_layout_encoder_pathway():
    cfg, _ = make_model()
    img = render_one()
    seq = assemble_sequence("und", {"question": "what color is at top left?",
                                    "answer": "red", "image": img}, cfg, VOCAB)
    q = VOCAB.tokenize("what color is at top left?")
    n = cfg.und_tokens
    assert seq.ids[0] == cp.BOI and seq.ids[n + 1] == cp.EOI
    assert np.all(seq.kinds[1:n + 1] == md.KIND_INJECT)
    assert seq.inject[0] == "image"
    a = VOCAB.tokenize("red")
    assert seq.targets[-2:].tolist() == a + [cp.EOS]
    assert seq.n_loss() == len(a) + 1
    # loss only on the answer span
    assert np.all(seq.targets[:n + 2 + len(q)] == -1)


def test_understanding_sequence_vq_ids_pathway():
    cfg, _ = make_model(understanding_pathway="vq_ids")
    ids = np.arange(16)
    seq = assemble_sequence("und", {"question": "what color is at top left?",
                                    "answer": "red", "image_ids": ids}, cfg, VOCAB)
    assert np.all(seq.kinds[1:17] == md.KIND_IMAGE)
    assert seq.ids[1:17].tolist() == ids.tolist()
    assert seq.inject is None
    assert np.all(seq.targets[1:17] == -1), "no loss on understanding image tokens"
    with pytest.raises(SequenceError):
        assemble_sequence("und", {"question": "what color is at top left?",
                                  "answer": "red"}, cfg, VOCAB)


def test_understanding_sequence_semantic_pathway():
    cfg, _ = make_model(understanding_pathway="semantic")
    ids = np.arange(16) % 9
    seq = assemble_sequence("und", {"question": "is there a red square?",
                                    "answer": "yes", "image_ids": ids}, cfg, VOCAB)
    assert np.all(seq.kinds[1:17] == md.KIND_INJECT)
    assert seq.inject[0] == "sem_ids"
    assert np.array_equal(seq.inject[1], ids)


def test_sft_sequence_layout():
    cfg, _ = make_model()
    img = render_one(2)
    turns = [{"q": "what color is at top left?", "a": "red"},
             {"q": "what shape is at top left?", "a": "square"}]
    seq = assemble_sequence("sft", {"turns": turns, "image": img}, cfg, VOCAB)
    ids = seq.ids.tolist()
    assert ids[0] == cp.USER and ids[1] == cp.BOI
    assert ids.count(cp.USER) == 2 and ids.count(cp.ASSISTANT) == 2
    assert ids.count(cp.BOI) == 1, "image appears in the first turn only"
    # loss on both assistant answers and both terminators, nothing else
    a1, a2 = VOCAB.tokenize("red"), VOCAB.tokenize("square")
    scored = seq.targets[seq.targets >= 0].tolist()
    assert scored == a1 + [cp.EOS] + a2 + [cp.EOS]
    # control slots are never loss targets
    for marker in (cp.USER, cp.ASSISTANT, cp.NEWLINE, cp.BOI, cp.EOI):
        at = np.nonzero(seq.ids == marker)[0]
        assert np.all(seq.targets[at] == -1)


def test_sequence_errors():
    cfg, _ = make_model()
    with pytest.raises(SequenceError):
        assemble_sequence("und", {"question": "what color is at top left?",
                                  "answer": "", "image": render_one()}, cfg, VOCAB)
    long_text = " ".join(["a red square and a blue circle ."] * 12)
    with pytest.raises(SequenceError):
        assemble_sequence("text", {"text": long_text}, cfg, VOCAB)
    with pytest.raises(SequenceError):
        assemble_sequence("bogus", {"text": "a"}, cfg, VOCAB)


def test_validate_rejects_corrupted_layouts():
    cfg, _ = make_model()
    seq = assemble_sequence("text", {"text": "a red square"}, cfg, VOCAB)
    seq.targets[0] = cp.BOS
    with pytest.raises(SequenceError):
        seq.validate(cfg)

    seq2 = assemble_sequence("gen", {"caption": "a red square at top left.",
                                     "image_ids": np.arange(16)}, cfg, VOCAB)
    boi = int(np.nonzero(seq2.ids == cp.BOI)[0][0])
    seq2.ids[boi] = cp.EOS  # visual run no longer opened by the marker
    with pytest.raises(SequenceError):
        seq2.validate(cfg)


# -- attention mask ---------------------------------------------------------------


def test_attention_mask_oracle():
    segs = np.array([[0, 0, 1, 1]])
    mask = make_attention_mask(segs)
    assert mask.shape == (1, 1, 4, 4)
    allowed = mask[0, 0] == 0.0
    expect = np.array([
        [True, False, False, False],
        [True, True, False, False],
        [False, False, True, False],
        [False, False, True, True],
    ])
    assert np.array_equal(allowed, expect)
    assert np.all(mask[0, 0][~expect] == md.NEG_MASK)


# -- batched forward -------------------------------------------------------------


def window_from_sequences(cfg, seqs, length=None):
    """Minimal single-window packing: each sequence its own segment."""
    t = length or cfg.context_len
    kinds = np.zeros((1, t), dtype=np.int8)
    ids = np.full((1, t), cp.PAD, dtype=np.int64)
    segments = np.full((1, t), -1, dtype=np.int64)
    positions = np.zeros((1, t), dtype=np.int64)
    injections = []
    cursor = 0
    for si, seq in enumerate(seqs):
        n = len(seq)
        kinds[0, cursor:cursor + n] = seq.kinds
        ids[0, cursor:cursor + n] = np.where(seq.ids >= 0, seq.ids, 0)
        segments[0, cursor:cursor + n] = si
        positions[0, cursor:cursor + n] = np.arange(n)
        if seq.inject is not None:
            start = cursor + int(np.nonzero(seq.kinds == md.KIND_INJECT)[0][0])
            injections.append((0, start, seq.inject))
        cursor += n
    # pad slots: unique negative segments so they attend only to themselves
    for p in range(cursor, t):
        segments[0, p] = -(p + 2)
    return SimpleNamespace(kinds=kinds, ids=ids, segments=segments,
                           positions=positions, injections=injections)


def test_forward_windows_shapes_and_determinism():
    cfg, store = make_model(seed=4)
    img = render_one(3)
    seqs = [
        assemble_sequence("text", {"text": "a red square"}, cfg, VOCAB),
        assemble_sequence("und", {"question": "what color is at top left?",
                                  "answer": "red", "image": img}, cfg, VOCAB),
    ]
    win = window_from_sequences(cfg, seqs)
    cb = nm.Tensor(np.random.default_rng(0).uniform(-1, 1, size=(128, cfg.code_dim))
                   .astype(np.float32), requires_grad=False)
    with nm.no_grad():
        h1 = forward_windows(store, cfg, win, codebook=cb)
        h2 = forward_windows(store, cfg, win, codebook=cb)
    assert h1.shape == (1, cfg.context_len, cfg.hidden)
    assert np.array_equal(h1.data, h2.data)


def test_forward_windows_isolates_segments():
    """A sequence's hidden states do not depend on its window neighbours."""
    cfg, store = make_model(seed=5)
    cb = nm.Tensor(np.random.default_rng(0).uniform(-1, 1, size=(128, cfg.code_dim))
                   .astype(np.float32), requires_grad=False)
    target = assemble_sequence("gen", {"caption": "a red square at top left.",
                                       "image_ids": np.arange(16) % 7}, cfg, VOCAB)
    other = assemble_sequence("text", {"text": "the background is dark."}, cfg, VOCAB)

    alone = window_from_sequences(cfg, [target])
    packed = window_from_sequences(cfg, [target, other])
    with nm.no_grad():
        h_alone = forward_windows(store, cfg, alone, codebook=cb)
        h_packed = forward_windows(store, cfg, packed, codebook=cb)
    n = len(target)
    assert np.allclose(h_alone.data[0, :n], h_packed.data[0, :n], atol=1e-6)


def test_forward_windows_requires_codebook_for_image_tokens():
    cfg, store = make_model(seed=6)
    seq = assemble_sequence("gen", {"caption": "a red square at top left.",
                                    "image_ids": np.arange(16) % 3}, cfg, VOCAB)
    win = window_from_sequences(cfg, [seq])
    with pytest.raises(SequenceError):
        forward_windows(store, cfg, win, codebook=None)


def test_heads_read_hidden_states():
    cfg, store = make_model(seed=7)
    h = nm.Tensor(np.random.default_rng(2).normal(size=(3, cfg.hidden)).astype(np.float32))
    with nm.no_grad():
        lt = md.text_logits(store, h)
        li = md.image_logits(store, h)
    assert lt.shape == (3, cfg.text_vocab)
    assert li.shape == (3, cfg.image_vocab)
