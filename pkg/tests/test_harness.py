"""Tests for the evaluation and ablation harness.

The scoring helpers are checked against the corpus oracle (a render of a
caption's canonical scene must score as valid, consistent, and at zero palette
distance), and the ablation plumbing is exercised end to end on tiny budgets.
"""

import json
from pathlib import Path

import numpy as np
import pytest

import dualenc.corpus as cp
import dualenc.harness as hn
import dualenc.image_tokenizer as tok
import dualenc.model as md
import dualenc.numerics as nm
import dualenc.training as tr


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("harness_corpus")
    cfg = cp.CorpusConfig(n_text=40, n_und=48, n_gen_category=40, n_gen_full=48,
                          n_sft=30, n_heldout_qa=16, n_heldout_prompts=12)
    cp.build_corpus(cfg, out)
    return out


@pytest.fixture(scope="module")
def vocab():
    return cp.TextVocab()


@pytest.fixture(scope="module")
def vq_assets():
    """Untrained VQ tokenizer parameters, enough for plumbing tests."""
    tcfg = tok.TokenizerConfig()
    store = tok.build_tokenizer_params(tcfg, np.random.default_rng(11),
                                       mode="vq_only")
    return tcfg, store, "vq_only"


@pytest.fixture(scope="module")
def sem_assets():
    tcfg = tok.TokenizerConfig()
    store = tok.build_tokenizer_params(tcfg, np.random.default_rng(12),
                                       mode="semantic")
    return tcfg, store, "semantic"


@pytest.fixture(scope="module")
def tok_assets(vq_assets, sem_assets):
    return {"vq": vq_assets, "semantic": sem_assets}


@pytest.fixture(scope="module")
def und_setup(vocab, vq_assets):
    """Untrained encoder-pathway model over the VQ tokenizer store."""
    tcfg, base_store, mode = vq_assets
    mcfg = md.ModelConfig(text_vocab=len(vocab), understanding_pathway="encoder")
    store = hn.merged_store(base_store, mcfg, np.random.default_rng(21))
    tokenizer = tok.Tokenizer(tcfg, store, mode=mode)
    return store, mcfg, tokenizer


# -- answer scoring ------------------------------------------------------------------


def test_normalize_answer_strips_and_lowercases():
    assert hn.normalize_answer("  Red ") == "red"
    assert hn.normalize_answer("two") == "two"


def _oracle_answerer(store, mcfg, tokenizer, vocab, image, question,
                     config=None, rng=None):
    scene = cp.parse_image(np.asarray(image))
    return cp.oracle_answer(scene, question), False


def test_eval_understanding_oracle_scores_perfectly(monkeypatch, corpus_dir,
                                                    vocab, und_setup):
    store, mcfg, tokenizer = und_setup
    monkeypatch.setattr(hn.inf, "answer_question", _oracle_answerer)
    qa = cp.load_split(corpus_dir, "heldout_qa")
    res = hn.eval_understanding(store, mcfg, tokenizer, vocab, qa)
    assert res["accuracy"] == 1.0
    assert res["n"] == len(qa)
    assert sum(c["n"] for c in res["by_qtype"].values()) == len(qa)
    for cell in res["by_qtype"].values():
        assert cell["accuracy"] == 1.0


def test_eval_understanding_scores_wrong_answers_as_zero(monkeypatch, corpus_dir,
                                                         vocab, und_setup):
    store, mcfg, tokenizer = und_setup
    monkeypatch.setattr(hn.inf, "answer_question",
                        lambda *a, **k: ("definitely wrong", False))
    qa = cp.load_split(corpus_dir, "heldout_qa")
    res = hn.eval_understanding(store, mcfg, tokenizer, vocab, qa, limit=6)
    assert res["accuracy"] == 0.0
    assert res["n"] == 6


def test_eval_understanding_rejects_empty_set(corpus_dir, vocab, und_setup):
    store, mcfg, tokenizer = und_setup
    with pytest.raises(hn.HarnessError):
        hn.eval_understanding(store, mcfg, tokenizer, vocab, [])


# -- generation scoring against the render oracle ------------------------------------


def test_palette_histogram_matches_pixel_counts():
    scene = cp.Scene(cells=((0, 0), None, None, None), background=0)
    image = cp.render_scene(scene, 16)
    hist = hn.palette_histogram(image)
    palette = np.vstack([cp.COLOR_RGB, cp.BACKGROUND_RGB]).astype(np.float64)
    px = image.reshape(-1, 3) * 255.0
    expected = np.zeros(len(palette))
    for p in px:
        expected[int(np.argmin(((p - palette) ** 2).sum(axis=1)))] += 1
    expected /= expected.sum()
    assert np.allclose(hist, expected)
    assert hist.sum() == pytest.approx(1.0)


def test_reference_scene_render_scores_perfectly_full():
    caption = cp.full_caption(cp.Scene(
        cells=((2, 1), None, (0, 0), None), background=1))
    facts = cp.parse_caption(caption)
    image = cp.render_scene(hn.reference_scene(facts), 16)
    valid, consistent, dist = hn.score_generation(image, facts)
    assert valid and consistent
    assert dist == 0.0


def test_reference_scene_render_scores_perfectly_category():
    facts = cp.parse_caption(cp.category_caption(cp.Scene(
        cells=((3, 0), None, None, None), background=0)))
    assert facts.kind == "category"
    image = cp.render_scene(hn.reference_scene(facts), 16)
    valid, consistent, dist = hn.score_generation(image, facts)
    assert valid and consistent
    assert dist == 0.0


def test_reference_scene_counting_caption_is_consistent():
    scene = cp.Scene(cells=((1, 1), (1, 1), None, None), background=0)
    caption = cp.counting_caption(scene)
    facts = cp.parse_caption(caption)
    assert facts.kind == "counting"
    ref = hn.reference_scene(facts)
    assert cp.caption_consistent(ref, facts)
    valid, consistent, dist = hn.score_generation(cp.render_scene(ref, 16), facts)
    assert valid and consistent and dist == 0.0


def test_score_generation_flags_inconsistent_image():
    facts = cp.parse_caption("a red square at top left.")
    wrong = cp.render_scene(cp.Scene(cells=(None, None, None, (1, 0)),
                                     background=0), 16)
    valid, consistent, dist = hn.score_generation(wrong, facts)
    assert valid
    assert not consistent
    assert dist > 0.0


def test_score_generation_flags_invalid_image():
    rng = np.random.default_rng(5)
    noise = rng.uniform(0.1, 0.9, size=(16, 16, 3)).astype(np.float32)
    valid, consistent, _ = hn.score_generation(noise, cp.parse_caption("a red square at top left."))
    assert not valid
    assert not consistent


def test_palette_distance_is_half_l1_of_histograms():
    facts = cp.parse_caption("a red square at top left.")
    img = cp.render_scene(cp.Scene(cells=((1, 0), None, None, None),
                                   background=1), 16)
    ref = cp.render_scene(hn.reference_scene(facts), 16)
    expected = 0.5 * np.abs(hn.palette_histogram(img)
                            - hn.palette_histogram(ref)).sum()
    assert hn.palette_distance(img, facts) == pytest.approx(expected)


# -- generation evaluation plumbing --------------------------------------------------


def test_eval_generation_structure_and_category_counts(corpus_dir, vocab, und_setup):
    store, mcfg, tokenizer = und_setup
    prompts = cp.load_split(corpus_dir, "heldout_prompts")
    res = hn.eval_generation(store, mcfg, tokenizer, vocab, prompts,
                             limit=4, seed=0)
    assert res["n_images"] == 4
    assert 0.0 <= res["validity"] <= 1.0
    assert 0.0 <= res["consistency"] <= 1.0
    assert res["palette_distance"] >= 0.0
    assert sum(c["n"] for c in res["by_category"].values()) == 4


def test_eval_generation_is_deterministic(corpus_dir, vocab, und_setup):
    store, mcfg, tokenizer = und_setup
    prompts = cp.load_split(corpus_dir, "heldout_prompts")
    a = hn.eval_generation(store, mcfg, tokenizer, vocab, prompts, limit=3, seed=9)
    b = hn.eval_generation(store, mcfg, tokenizer, vocab, prompts, limit=3, seed=9)
    assert a == b


def test_eval_generation_rejects_empty_prompts(vocab, und_setup):
    store, mcfg, tokenizer = und_setup
    with pytest.raises(hn.HarnessError):
        hn.eval_generation(store, mcfg, tokenizer, vocab, [])


def test_paired_guidance_eval_structure(corpus_dir, vocab, und_setup):
    store, mcfg, tokenizer = und_setup
    prompts = cp.load_split(corpus_dir, "heldout_prompts")
    res = hn.paired_guidance_eval(store, mcfg, tokenizer, vocab, prompts,
                                  scales=(0.0, 5.0), seeds=(0, 1), limit=3)
    assert res["n_prompts"] == 3
    assert res["scales"] == [0.0, 5.0]
    assert [row["seed"] for row in res["per_seed"]] == [0, 1]
    for row in res["per_seed"]:
        for key in ("s0", "s5"):
            assert set(row[key]) == {"validity", "consistency", "palette_distance"}
    rerun = hn.paired_guidance_eval(store, mcfg, tokenizer, vocab, prompts,
                                    scales=(0.0, 5.0), seeds=(0, 1), limit=3)
    assert rerun == res


# -- tokenizer pretraining helpers ---------------------------------------------------


def test_tokenizer_training_images_split_by_difficulty(corpus_dir):
    simple, full = hn.tokenizer_training_images(corpus_dir)
    assert simple.shape[1:] == (16, 16, 3)
    assert full.shape[1:] == (16, 16, 3)
    assert len(simple) == 40  # one record per single-object scene
    assert len(full) == 48 + 48  # multi-object generation plus QA scenes
    for img in simple[:5]:
        scene = cp.parse_image(img)
        assert scene is not None
        assert sum(c is not None for c in scene.cells) == 1


def test_understanding_teacher_matches_encoder_features(und_setup):
    store, mcfg, _ = und_setup
    teacher = hn.understanding_teacher(store, mcfg)
    rng = np.random.default_rng(3)
    images = rng.uniform(0, 1, size=(2, 16, 16, 3)).astype(np.float32)
    feats = teacher(images)
    direct = md.encode_understanding(store, mcfg, images).data
    assert feats.shape == direct.shape
    assert np.array_equal(feats, direct)


# -- experiment grid -----------------------------------------------------------------


def test_experiment_wiring_table():
    for exp in hn.EXPERIMENTS:
        spec = hn.ExperimentSpec(exp=exp, seeds=(0,))
        assert spec.pathway == hn.EXP_WIRING[exp]["pathway"]
        assert spec.tokenizer_kind == hn.EXP_WIRING[exp]["tokenizer"]
        assert spec.tasks == hn.EXP_WIRING[exp]["tasks"]
    assert hn.ExperimentSpec(exp="D").pathway == "encoder"
    assert hn.ExperimentSpec(exp="A").pathway == "vq_ids"
    assert hn.ExperimentSpec(exp="B").pathway == "semantic"
    assert hn.ExperimentSpec(exp="F").tasks == "gen"
    assert hn.ExperimentSpec(exp="C").tasks == "und"


def test_experiment_spec_validation():
    with pytest.raises(hn.HarnessError):
        hn.ExperimentSpec(exp="Z")
    with pytest.raises(hn.HarnessError):
        hn.ExperimentSpec(exp="A", stage_steps=(10, 10))
    with pytest.raises(hn.HarnessError):
        hn.ExperimentSpec(exp="A", stage_steps=(10, 0, 10))
    with pytest.raises(hn.HarnessError):
        hn.ExperimentSpec(exp="A", seeds=())


def test_task_ratio_zeroes_excluded_sources():
    for stage in (1, 2, 3):
        und, text, gen = tr.STAGE_RATIOS[stage]
        assert hn._task_ratio("both", stage) == (und, text, gen)
        assert hn._task_ratio("und", stage) == (und, text, 0)
        assert hn._task_ratio("gen", stage) == (0, text, gen)
    with pytest.raises(hn.HarnessError):
        hn._task_ratio("neither", 1)


def test_stage_configs_scale_warmup_with_budget():
    spec = hn.ExperimentSpec(exp="D", stage_steps=(60, 600, 120),
                             batch_sizes=(4, 4, 4))
    scaled = hn.stage_configs_for(spec)
    desk = tr.desk_stage_configs(batch_sizes=(4, 4, 4))
    for got, base, steps in zip(scaled, desk, (60, 600, 120)):
        assert got.total_steps == steps
        assert got.lr == base.lr
        assert got.schedule == base.schedule
        assert got.weight_decay == base.weight_decay
        assert got.batch_size == 4
        assert got.warmup_steps == round(steps * base.warmup_steps
                                         / base.total_steps)
    assert scaled[0].warmup_steps > 0
    assert scaled[2].warmup_steps == 0


def test_merged_store_copies_tokenizer_params(vq_assets):
    tcfg, base_store, _ = vq_assets
    mcfg = md.ModelConfig(text_vocab=64, understanding_pathway="encoder")
    merged = hn.merged_store(base_store, mcfg, np.random.default_rng(0))
    for p in base_store.paths():
        assert np.array_equal(merged[p].data, base_store[p].data)
    # mutating the merged copy must not touch the source asset
    probe = next(iter(base_store.paths()))
    before = base_store[probe].data.copy()
    merged[probe].data += 1.0
    assert np.array_equal(base_store[probe].data, before)
    assert any(p.startswith("model/") for p in merged.paths())


def test_config_hash_depends_on_spec_and_grammar():
    a = hn.config_hash(hn.ExperimentSpec(exp="A"), "g1")
    b = hn.config_hash(hn.ExperimentSpec(exp="B"), "g1")
    a2 = hn.config_hash(hn.ExperimentSpec(exp="A"), "g2")
    assert a != b
    assert a != a2
    assert a == hn.config_hash(hn.ExperimentSpec(exp="A"), "g1")


def test_validate_matched_steps():
    ok = {"D": hn.ExperimentSpec(exp="D", stage_steps=(4, 6, 4)),
          "E": hn.ExperimentSpec(exp="E", stage_steps=(4, 6, 4)),
          "F": hn.ExperimentSpec(exp="F", stage_steps=(4, 6, 4))}
    hn.validate_matched_steps(ok)
    bad = dict(ok)
    bad["E"] = hn.ExperimentSpec(exp="E", stage_steps=(4, 6, 5))
    with pytest.raises(hn.HarnessError):
        hn.validate_matched_steps(bad)
    hn.validate_matched_steps({"A": hn.ExperimentSpec(exp="A")})


def test_default_ablation_specs_cover_grid_and_match_steps():
    specs = hn.default_ablation_specs(seeds=(0,), stage_steps=(2, 2, 2))
    assert set(specs) == set(hn.EXPERIMENTS)
    hn.validate_matched_steps(specs)


# -- tiny end-to-end runs ------------------------------------------------------------


def _tiny_spec(exp, seeds=(0,)):
    return hn.ExperimentSpec(exp=exp, seeds=seeds, stage_steps=(2, 3, 2),
                             batch_sizes=(4, 4, 4), eval_qa_limit=4,
                             eval_prompt_limit=3)


def test_run_experiment_seed_reports_applicable_metrics(corpus_dir, tok_assets):
    res = hn.run_experiment_seed(_tiny_spec("F"), corpus_dir, tok_assets, seed=0)
    assert res["steps_per_stage"] == [2, 3, 2]
    assert "generation" in res and "understanding" not in res

    res = hn.run_experiment_seed(_tiny_spec("E"), corpus_dir, tok_assets, seed=0)
    assert "understanding" in res and "generation" not in res


def test_run_ablation_writes_validated_report(corpus_dir, tok_assets, tmp_path):
    spec = _tiny_spec("D")
    report = hn.run_ablation(spec, corpus_dir, tok_assets, run_dir=tmp_path)
    assert report.schema == hn.SCHEMA_VERSION
    assert report.exp == "D"
    assert report.stage_steps == [2, 3, 2]
    assert report.steps_per_stage_by_seed == [[2, 3, 2]]
    assert report.understanding_accuracy is not None
    assert report.generation_validity is not None
    assert report.category_breakdown is not None
    assert sum(c["n"] for c in report.category_breakdown.values()) \
        == sum(r["generation"]["n_images"] for r in report.per_seed)
    report.validate()
    on_disk = json.loads((tmp_path / "report_D.json").read_text())
    assert on_disk["schema"] == hn.SCHEMA_VERSION
    assert on_disk["config_hash"] == report.config_hash


def test_run_ablation_is_deterministic(corpus_dir, tok_assets):
    spec = _tiny_spec("F")
    a = hn.run_ablation(spec, corpus_dir, tok_assets)
    b = hn.run_ablation(spec, corpus_dir, tok_assets)
    assert a.to_json() == b.to_json()


def test_metrics_report_validation_catches_bad_rates():
    report = hn.MetricsReport(
        schema=hn.SCHEMA_VERSION, exp="A", encoder="x", tasks="both",
        seeds=[0], config_hash="h", stage_steps=[1, 1, 1],
        steps_per_stage_by_seed=[[1, 1, 1]], understanding_accuracy=1.2,
        generation_validity=None, generation_consistency=None,
        palette_distance=None)
    with pytest.raises(hn.HarnessError):
        report.validate()


def test_ablation_table_formats_missing_metrics():
    gen_only = hn.MetricsReport(
        schema=hn.SCHEMA_VERSION, exp="F", encoder="vq ids", tasks="gen",
        seeds=[0], config_hash="h", stage_steps=[1, 1, 1],
        steps_per_stage_by_seed=[[1, 1, 1]], understanding_accuracy=None,
        generation_validity=0.5, generation_consistency=0.25,
        palette_distance=0.1)
    und_only = hn.MetricsReport(
        schema=hn.SCHEMA_VERSION, exp="E", encoder="und encoder", tasks="und",
        seeds=[0], config_hash="h", stage_steps=[1, 1, 1],
        steps_per_stage_by_seed=[[1, 1, 1]], understanding_accuracy=0.75,
        generation_validity=None, generation_consistency=None,
        palette_distance=None)
    table = hn.ablation_table({"F": gen_only, "E": und_only})
    lines = table.splitlines()
    assert lines[0].split() == ["exp", "encoder", "tasks", "und_acc",
                                "gen_consistency", "validity"]
    row_e = lines[1].split()
    row_f = lines[2].split()
    assert row_e[0] == "E" and row_e[-3:] == ["0.750", "-", "-"]
    assert row_f[0] == "F" and row_f[-3:] == ["-", "0.250", "0.500"]
