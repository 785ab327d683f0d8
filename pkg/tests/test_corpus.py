import json

import numpy as np
import pytest

from dualenc import corpus as cp


def scene_of(*placed, background=0):
    cells = [None] * 4
    for idx, color, shape in placed:
        cells[idx] = (color, shape)
    return cp.Scene(cells=tuple(cells), background=background)


def test_scene_invariants():
    with pytest.raises(cp.SceneError):
        cp.Scene(cells=(None, None, None, None))
    with pytest.raises(cp.SceneError):
        scene_of((0, 9, 0))
    s = scene_of((0, 2, 1), background=1)
    assert cp.Scene.from_json(s.to_json()) == s


def test_palette_separation():
    assert cp.MIN_SEPARATION >= 64.0


def test_render_single_cell_two_colors():
    img = cp.render_scene_u8(scene_of((0, 0, 0)))  # red square, dark bg
    colors = {tuple(c) for c in img.reshape(-1, 3)}
    assert colors == {(200, 0, 0), (64, 64, 64)}


def test_render_deterministic():
    s = scene_of((1, 3, 1), (2, 5, 0), background=1)
    a = cp.render_scene(s)
    b = cp.render_scene(s)
    assert np.array_equal(a, b)
    assert a.dtype == np.float32 and a.min() >= 0.0 and a.max() <= 1.0


def test_round_trip_random_scenes():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        s = cp.sample_scene(rng)
        assert cp.parse_image(cp.render_scene(s)) == s


def test_round_trip_full_scene_space():
    # the whole world is enumerable; the oracle must be exact on all of it
    n = 0
    for s in cp.enumerate_scene_space():
        assert cp.parse_image(cp.render_scene(s)) == s
        n += 1
    assert n == (13 ** 4 - 1) * 2


def test_parse_rejects_noise():
    rng = np.random.default_rng(1)
    rejected = sum(cp.parse_image(rng.random((16, 16, 3)).astype(np.float32)) is None
                   for _ in range(200))
    assert rejected >= 195


def test_parse_rejects_midpoint_color():
    s = scene_of((0, 0, 0))
    img = cp.render_scene(s).copy()
    # overwrite the cell with a color midway between red and magenta
    mid = (cp.COLOR_RGB[0] + cp.COLOR_RGB[5]) / 2.0 / 255.0
    img[1:7, 1:7] = mid.astype(np.float32)
    assert cp.parse_image(img) is None


def test_parse_rejects_all_empty():
    img = np.tile(cp.BACKGROUND_RGB[0].astype(np.float32) / 255.0, (16, 16, 1))
    assert cp.parse_image(img) is None


def test_parse_shape_discrimination():
    sq = cp.parse_image(cp.render_scene(scene_of((3, 2, 0), background=1)))
    ci = cp.parse_image(cp.render_scene(scene_of((3, 2, 1), background=1)))
    assert sq.cells[3] == (2, 0)
    assert ci.cells[3] == (2, 1)


def test_captions_forms():
    s1 = scene_of((0, 0, 0))
    assert cp.full_caption(s1) == "a red square at top left. the background is dark."
    assert cp.category_caption(s1) == "red square"
    assert cp.counting_caption(s1) is None

    s2 = scene_of((0, 1, 1), (3, 1, 1), background=1)
    assert cp.counting_caption(s2) == "two green circles. the background is light."
    assert cp.category_caption(s2) is None
    assert "and" in cp.full_caption(s2)


def test_caption_round_trip_identity():
    rng = np.random.default_rng(2)
    for _ in range(3000):
        s = cp.sample_scene(rng)
        facts = cp.parse_caption(cp.full_caption(s))
        assert facts.kind == "full"
        assert facts.background == s.background
        assert set(facts.clauses) == {(i, c, sh) for i, c, sh in s.objects()}
        assert cp.caption_consistent(s, facts)


def test_caption_grammar_injective_over_scenes():
    # distinct scenes never share a full caption
    rng = np.random.default_rng(3)
    seen = {}
    for _ in range(10000):
        s = cp.sample_scene(rng)
        cap = cp.full_caption(s)
        if cap in seen:
            assert seen[cap] == s
        seen[cap] = s


def test_counting_caption_consistency():
    s = scene_of((1, 4, 0), (2, 4, 0), (3, 4, 0))
    cap = cp.counting_caption(s)
    facts = cp.parse_caption(cap)
    assert facts.count == (3, 4, 0)
    assert cp.caption_consistent(s, facts)
    extra = scene_of((0, 0, 1), (1, 4, 0), (2, 4, 0), (3, 4, 0))
    assert not cp.caption_consistent(extra, facts)


def test_category_caption_consistency_is_existential():
    facts = cp.parse_caption("red square")
    assert cp.caption_consistent(scene_of((0, 0, 0), (3, 2, 1)), facts)
    assert not cp.caption_consistent(scene_of((0, 1, 0)), facts)


def test_truncated_caption_still_parses():
    s = scene_of((0, 0, 0), (1, 1, 1), background=1)
    rng = np.random.default_rng(0)
    short = cp.truncate_caption(cp.full_caption(s), rng, p=1.0)
    assert short == "a red square at top left and a green circle at top right."
    facts = cp.parse_caption(short)
    assert facts.background is None
    assert cp.caption_consistent(s, facts)


def test_parse_caption_rejects_garbage():
    for bad in ["", "red", "a red square at top left",  # no period
                "a red banana at top left.", "five red squares.",
                "a red square at top left and a blue circle at top left."]:
        with pytest.raises(cp.CaptionParseError):
            cp.parse_caption(bad)


def test_qa_answers_come_from_scene_attributes():
    rng = np.random.default_rng(4)
    for _ in range(500):
        s = cp.sample_scene(rng)
        q, a, t = cp.make_qa(s, rng)
        assert a == cp.oracle_answer(s, q)
        if t == "color_at":
            assert a in cp.COLOR_NAMES + ("empty",)
        elif t == "shape_at":
            assert a in cp.SHAPE_NAMES + ("empty",)
        elif t == "count_color":
            assert a in cp.NUMBER_WORDS
        elif t == "exists_color":
            assert a in ("yes", "no")
        else:
            assert a == cp.full_caption(s)


def test_one_cell_scene_one_clause():
    cap = cp.full_caption(scene_of((2, 3, 0)))
    assert " and " not in cap


def test_truncation_frequency():
    rng = np.random.default_rng(5)
    cap = "a red square at top left. the background is dark."
    hits = sum(cp.truncate_caption(cap, rng, p=0.25).count(".") == 1
               for _ in range(10000))
    assert abs(hits / 10000 - 0.25) <= 0.02


def test_truncation_edge_probabilities():
    rng = np.random.default_rng(6)
    cap = "a red square at top left. the background is dark."
    assert all(cp.truncate_caption(cap, rng, p=0.0) == cap for _ in range(100))
    single = "red square"
    assert cp.truncate_caption(single, rng, p=1.0) in (single, single + ".")


def test_tokenize_round_trip():
    v = cp.TextVocab()
    assert v.tokenize("") == []
    assert v.detokenize([]) == ""
    assert len(v.tokenize("red circle")) == 2
    for w in cp._GRAMMAR_WORDS:
        if w in (".", "?"):
            continue
        assert v.detokenize(v.tokenize(w)) == w
    rng = np.random.default_rng(7)
    for _ in range(500):
        s = cp.sample_scene(rng)
        for text in [cp.full_caption(s), cp.make_qa(s, rng)[0]]:
            assert v.detokenize(v.tokenize(text)) == text


def test_tokenize_unknown_word_names_it():
    v = cp.TextVocab()
    with pytest.raises(cp.VocabError, match="banana"):
        v.tokenize("a red banana")


def test_vocab_stable_and_pad_zero():
    a, b = cp.TextVocab(), cp.TextVocab()
    assert a.id_to_word == b.id_to_word
    assert cp.PAD == 0 and a.id_to_word[0] == "<pad>"
    assert a.grammar_hash() == b.grammar_hash()


def test_preprocess_understanding_rules():
    img = np.ones((8, 16, 3), dtype=np.float32) * 0.5  # 2:1 aspect
    out = cp.preprocess_understanding(img, side=16)
    assert out.shape == (16, 16, 3)
    pad_rows = np.all(out == cp.PAD_VALUE, axis=(1, 2))
    assert pad_rows.sum() == 8  # half the rows are padding
    assert out[0, 0, 0] == np.float32(127.0 / 255.0)

    sq = np.random.default_rng(8).random((8, 8, 3)).astype(np.float32)
    out2 = cp.preprocess_understanding(sq, side=16)
    assert not np.any(np.all(out2 == cp.PAD_VALUE, axis=(1, 2)))


def test_preprocess_generation_rules():
    rng = np.random.default_rng(9)
    sq = rng.random((16, 16, 3)).astype(np.float32)
    assert np.array_equal(cp.preprocess_generation(sq, 16), sq)
    wide = rng.random((16, 32, 3)).astype(np.float32)
    out = cp.preprocess_generation(wide, 16)
    assert out.shape == (16, 16, 3)
    assert np.array_equal(out, wide[:, 8:24])


def test_preprocess_idempotent():
    rng = np.random.default_rng(10)
    img = rng.random((10, 22, 3)).astype(np.float32)
    for f in (cp.preprocess_understanding, cp.preprocess_generation):
        once = f(img, 16)
        assert np.array_equal(f(once, 16), once)


def test_preprocess_zero_dim_errors():
    bad = np.zeros((0, 4, 3), dtype=np.float32)
    with pytest.raises(cp.SceneError):
        cp.preprocess_understanding(bad)
    with pytest.raises(cp.SceneError):
        cp.preprocess_generation(bad)


def small_config(**kw):
    base = dict(n_text=30, n_und=60, n_gen_category=20, n_gen_full=60,
                n_sft=40, n_heldout_qa=30, n_heldout_prompts=24,
                train_seed=11, heldout_seed=22)
    base.update(kw)
    return cp.CorpusConfig(**base)


def test_build_corpus_deterministic(tmp_path):
    cfg = small_config()
    m1 = cp.build_corpus(cfg, tmp_path / "a")
    m2 = cp.build_corpus(cfg, tmp_path / "b")
    assert m1 == m2
    for name in cp.SPLIT_NAMES + ("manifest.json",):
        fn = name if name.endswith(".json") else f"{name}.jsonl"
        assert (tmp_path / "a" / fn).read_bytes() == (tmp_path / "b" / fn).read_bytes()


def test_build_corpus_sizes_and_disjointness(tmp_path):
    cfg = small_config()
    manifest = cp.build_corpus(cfg, tmp_path)
    assert manifest["counts"]["und"] == 60
    assert manifest["counts"]["heldout_qa"] == 30
    train_scenes = set()
    for name in ("text", "und", "gen_category", "gen_full", "sft"):
        for rec in cp.load_split(tmp_path, name):
            if rec.get("scene"):
                train_scenes.add(cp.Scene.from_json(rec["scene"]).key())
    held = {cp.Scene.from_json(r["scene"]).key()
            for r in cp.load_split(tmp_path, "heldout_qa")}
    assert not (train_scenes & held)


def test_build_corpus_seed_collision_rejected():
    with pytest.raises(ValueError, match="seed"):
        small_config(train_seed=5, heldout_seed=5)


def test_corpus_records_have_valid_images(tmp_path):
    cp.build_corpus(small_config(), tmp_path)
    recs = cp.load_split(tmp_path, "und")
    r = recs[0]
    img = cp.image_from_hex(r["image_hex"], 16)
    s = cp.Scene.from_json(r["scene"])
    assert cp.parse_image(img) == s
    assert cp.oracle_answer(s, r["question"]) == r["answer"]


def test_heldout_prompts_parse(tmp_path):
    cp.build_corpus(small_config(), tmp_path)
    for rec in cp.load_split(tmp_path, "heldout_prompts"):
        facts = cp.parse_caption(rec["caption"])
        assert rec["category"] in ("color", "position", "counting")
        if rec["category"] == "counting":
            assert facts.kind == "counting"
