"""Evaluation metrics and the six-way encoder ablation.

Understanding is scored as exact-match question answering against the scene
oracle; generation is scored by parsing generated images back into scenes and
checking them against the prompt caption.  The ablation grid varies how the
two visual pathways are wired:

  A  shared VQ ids for both tasks (generation adaptor feeds understanding)
  B  shared semantic tokenizer (features for understanding, ids for generation)
  C  semantic tokenizer, understanding only
  D  decoupled: understanding encoder + VQ ids, both tasks
  E  understanding encoder only (no generation task)
  F  VQ generation only (no understanding task)

D/E must train with identical step counts, as must D/F, so the unified-versus-
single-task comparisons are matched update for update.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus as cp
from . import image_tokenizer as tok
from . import inference as inf
from . import model as md
from . import numerics as nm
from . import training as tr


class HarnessError(RuntimeError):
    pass


SCHEMA_VERSION = "metrics-report/v1"

EXPERIMENTS = ("A", "B", "C", "D", "E", "F")

# pathway: how understanding inputs reach the trunk; tokenizer: which image
# tokenizer the run uses; tasks: which task mix the stages include.
EXP_WIRING = {
    "A": {"pathway": "vq_ids", "tokenizer": "vq", "tasks": "both",
          "encoder": "shared vq ids"},
    "B": {"pathway": "semantic", "tokenizer": "semantic", "tasks": "both",
          "encoder": "shared semantic"},
    "C": {"pathway": "semantic", "tokenizer": "semantic", "tasks": "und",
          "encoder": "semantic feats"},
    "D": {"pathway": "encoder", "tokenizer": "vq", "tasks": "both",
          "encoder": "decoupled"},
    "E": {"pathway": "encoder", "tokenizer": "vq", "tasks": "und",
          "encoder": "und encoder"},
    "F": {"pathway": "vq_ids", "tokenizer": "vq", "tasks": "gen",
          "encoder": "vq ids"},
}


# -- understanding evaluation --------------------------------------------------------


def normalize_answer(text: str) -> str:
    return text.lower().strip()


def eval_understanding(store, mcfg, tokenizer, vocab, records,
                       config: inf.SamplerConfig | None = None,
                       limit: int | None = None) -> dict:
    """Greedy QA over held-out scenes; exact match after normalization."""
    if limit is not None:
        records = records[:limit]
    if not records:
        raise HarnessError("empty held-out QA set")
    side = mcfg.image_side
    by_qtype: dict[str, dict] = {}
    correct = 0
    for rec in records:
        image = cp.image_from_hex(rec["image_hex"], side)
        pred, _ = inf.answer_question(store, mcfg, tokenizer, vocab,
                                      image, rec["question"], config)
        hit = normalize_answer(pred) == normalize_answer(rec["answer"])
        correct += int(hit)
        cell = by_qtype.setdefault(rec["qtype"], {"n": 0, "correct": 0})
        cell["n"] += 1
        cell["correct"] += int(hit)
    for cell in by_qtype.values():
        cell["accuracy"] = cell["correct"] / cell["n"]
    return {"accuracy": correct / len(records), "n": len(records),
            "by_qtype": by_qtype}


# -- generation evaluation -----------------------------------------------------------


_PALETTE = np.vstack([cp.COLOR_RGB, cp.BACKGROUND_RGB]).astype(np.float64)


def palette_histogram(image) -> np.ndarray:
    """Fraction of pixels nearest each palette entry (colors then backgrounds)."""
    px = np.asarray(image, dtype=np.float64).reshape(-1, 3) * 255.0
    d2 = ((px[:, None, :] - _PALETTE[None, :, :]) ** 2).sum(axis=2)
    counts = np.bincount(np.argmin(d2, axis=1), minlength=len(_PALETTE))
    return counts / counts.sum()


def reference_scene(facts: cp.CaptionFacts) -> cp.Scene:
    """A canonical scene satisfying the caption, for fidelity comparison."""
    bg = facts.background if facts.background is not None else 0
    if facts.kind == "full":
        cells = [None] * cp.N_CELLS
        for pos, color, shape in facts.clauses:
            cells[pos] = (color, shape)
        return cp.Scene(cells=tuple(cells), background=bg)
    if facts.kind == "counting":
        n, color, shape = facts.count
        cells = [(color, shape) if i < n else None for i in range(cp.N_CELLS)]
        return cp.Scene(cells=tuple(cells), background=bg)
    color, shape = facts.category
    cells = [(color, shape)] + [None] * (cp.N_CELLS - 1)
    return cp.Scene(cells=tuple(cells), background=bg)


def palette_distance(image, facts: cp.CaptionFacts) -> float:
    """Total-variation distance between palette histograms of the image and a
    canonical render of the caption."""
    ref = cp.render_scene(reference_scene(facts), np.asarray(image).shape[0])
    a = palette_histogram(image)
    b = palette_histogram(ref)
    return float(0.5 * np.abs(a - b).sum())


def score_generation(image, facts: cp.CaptionFacts) -> tuple:
    """(valid, consistent, palette distance) for one generated image."""
    scene = cp.parse_image(image)
    valid = scene is not None
    consistent = bool(valid and cp.caption_consistent(scene, facts))
    return valid, consistent, palette_distance(image, facts)


def eval_generation(store, mcfg, tokenizer, vocab, prompts,
                    n_per_prompt: int = 1,
                    config: inf.SamplerConfig | None = None,
                    seed: int = 0, limit: int | None = None) -> dict:
    """Generate n images per prompt and score validity/consistency by oracle."""
    if limit is not None:
        prompts = prompts[:limit]
    if not prompts:
        raise HarnessError("empty prompt set")
    if n_per_prompt < 1:
        raise HarnessError("n_per_prompt must be positive")
    config = config if config is not None else inf.SamplerConfig()
    by_cat: dict[str, dict] = {}
    n_valid = n_consistent = 0
    distances = []
    total = 0
    for i, rec in enumerate(prompts):
        facts = cp.parse_caption(rec["caption"])
        cell = by_cat.setdefault(rec["category"], {"n": 0, "valid": 0, "consistent": 0})
        for j in range(n_per_prompt):
            rng = np.random.default_rng([seed, i, j])
            _, image = inf.generate_image(store, mcfg, tokenizer, vocab,
                                          rec["caption"], config, rng)
            valid, consistent, dist = score_generation(image, facts)
            n_valid += int(valid)
            n_consistent += int(consistent)
            distances.append(dist)
            cell["n"] += 1
            cell["valid"] += int(valid)
            cell["consistent"] += int(consistent)
            total += 1
    for cell in by_cat.values():
        cell["validity"] = cell["valid"] / cell["n"]
        cell["consistency"] = cell["consistent"] / cell["n"]
    return {"validity": n_valid / total, "consistency": n_consistent / total,
            "palette_distance": float(np.mean(distances)),
            "n_images": total, "by_category": by_cat}


def paired_guidance_eval(store, mcfg, tokenizer, vocab, prompts,
                         scales=(0.0, 5.0), seeds=(0, 1, 2),
                         limit: int | None = None) -> dict:
    """Per-seed metrics at each guidance scale over the same prompt list.

    The rng stream for prompt i under seed s is identical across scales, so the
    comparison is paired both on prompts and on sampling noise.
    """
    if limit is not None:
        prompts = prompts[:limit]
    if not prompts:
        raise HarnessError("empty prompt set")
    out = {"n_prompts": len(prompts), "scales": list(scales), "per_seed": []}
    for seed in seeds:
        row = {"seed": seed}
        for scale in scales:
            config = inf.SamplerConfig(cfg_scale=scale)
            res = eval_generation(store, mcfg, tokenizer, vocab, prompts,
                                  n_per_prompt=1, config=config, seed=seed)
            row[f"s{scale:g}"] = {"validity": res["validity"],
                                  "consistency": res["consistency"],
                                  "palette_distance": res["palette_distance"]}
        out["per_seed"].append(row)
    return out


# -- tokenizer pretraining -----------------------------------------------------------


def tokenizer_training_images(corpus_dir):
    """(simple, full) image stacks: single-object renders first, everything after."""
    manifest = cp.load_manifest(corpus_dir)
    side = manifest["image_side"]

    def stack(names):
        imgs = []
        for name in names:
            for rec in cp.load_split(corpus_dir, name):
                if rec.get("image_hex"):
                    imgs.append(cp.image_from_hex(rec["image_hex"], side))
        return np.stack(imgs)

    return stack(["gen_category"]), stack(["gen_full", "und"])


def train_vq_tokenizer(corpus_dir, seed: int = 0, steps=(300, 700),
                       batch_size: int = 32, lr: float = 1e-3):
    simple, full = tokenizer_training_images(corpus_dir)
    return tok.train_tokenizer(simple, full, tok.TokenizerConfig(),
                               mode="vq_only", seed=seed, steps=steps,
                               batch_size=batch_size, lr=lr)


def train_semantic_tokenizer(corpus_dir, teacher_fn, vq_store=None,
                             seed: int = 0, steps=(0, 400),
                             batch_size: int = 32, lr: float = 1e-4):
    """Distillation stage of the two-stage semantic tokenizer.

    Starts from a pretrained VQ tokenizer when ``vq_store`` is given (its
    encoder, codebook, and pixel decoder are copied), adds a fresh causal
    decoder, and trains everything against ``teacher_fn`` features.
    """
    cfg = tok.TokenizerConfig()
    rng = np.random.default_rng(seed)
    store = tok.build_tokenizer_params(cfg, rng, mode="semantic")
    if vq_store is not None:
        store.load_values({p: vq_store[p].data.copy() for p in vq_store.paths()})
    simple, full = tokenizer_training_images(corpus_dir)
    return tok.train_tokenizer(simple, full, cfg, mode="semantic", seed=seed + 1,
                               steps=steps, batch_size=batch_size, lr=lr,
                               teacher_fn=teacher_fn, store=store)


def understanding_teacher(store, mcfg):
    """Frozen feature extractor from a trained understanding encoder."""
    def teacher_fn(images):
        with nm.no_grad():
            return md.encode_understanding(store, mcfg, images).data.copy()
    return teacher_fn


# -- ablation grid -------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    exp: str
    seeds: tuple = (0, 1, 2)
    stage_steps: tuple = (60, 600, 120)
    batch_sizes: tuple = (8, 16, 8)
    eval_qa_limit: int | None = 150
    eval_prompt_limit: int | None = 60
    n_per_prompt: int = 1

    def __post_init__(self):
        if self.exp not in EXPERIMENTS:
            raise HarnessError(f"unknown experiment '{self.exp}'")
        if len(self.stage_steps) != 3 or any(s < 1 for s in self.stage_steps):
            raise HarnessError("stage_steps must be three positive counts")
        if not self.seeds:
            raise HarnessError("at least one seed required")

    @property
    def wiring(self) -> dict:
        return EXP_WIRING[self.exp]

    @property
    def pathway(self) -> str:
        return self.wiring["pathway"]

    @property
    def tokenizer_kind(self) -> str:
        return self.wiring["tokenizer"]

    @property
    def tasks(self) -> str:
        return self.wiring["tasks"]

    def to_json(self) -> dict:
        return {"exp": self.exp, "seeds": list(self.seeds),
                "stage_steps": list(self.stage_steps),
                "batch_sizes": list(self.batch_sizes),
                "eval_qa_limit": self.eval_qa_limit,
                "eval_prompt_limit": self.eval_prompt_limit,
                "n_per_prompt": self.n_per_prompt, "wiring": dict(self.wiring)}


def _task_ratio(tasks: str, stage: int) -> tuple:
    und, text, gen = tr.STAGE_RATIOS[stage]
    if tasks == "both":
        return (und, text, gen)
    if tasks == "und":
        return (und, text, 0)
    if tasks == "gen":
        return (0, text, gen)
    raise HarnessError(f"unknown task mix '{tasks}'")


def stage_configs_for(spec: ExperimentSpec) -> list:
    """Three-stage schedule with the desk recipe scaled to the spec's budget."""
    desk = tr.desk_stage_configs(batch_sizes=spec.batch_sizes)
    out = []
    for stage_cfg, steps in zip(desk, spec.stage_steps):
        warmup = round(steps * stage_cfg.warmup_steps / stage_cfg.total_steps)
        out.append(tr.StageConfig(
            stage=stage_cfg.stage, total_steps=steps,
            batch_size=stage_cfg.batch_size, lr=stage_cfg.lr,
            schedule=stage_cfg.schedule, weight_decay=stage_cfg.weight_decay,
            warmup_steps=warmup, ratio=_task_ratio(spec.tasks, stage_cfg.stage)))
    return out


def merged_store(tok_store, mcfg: md.ModelConfig, rng) -> nm.ParameterStore:
    """Fresh store holding copies of the tokenizer parameters plus model init."""
    store = nm.ParameterStore()
    for p in tok_store.paths():
        store.add(p, tok_store[p].data.copy())
    md.build_model_params(mcfg, rng, store=store)
    return store


def config_hash(spec: ExperimentSpec, grammar_hash: str) -> str:
    blob = json.dumps({"spec": spec.to_json(), "grammar": grammar_hash},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_experiment_seed(spec: ExperimentSpec, corpus_dir, tok_assets: dict,
                        seed: int, run_dir=None) -> dict:
    """Train one seed of one experiment and evaluate its applicable metrics."""
    vocab = cp.TextVocab()
    tcfg, base_store, mode = tok_assets[spec.tokenizer_kind]
    mcfg = md.ModelConfig(text_vocab=len(vocab),
                          understanding_pathway=spec.pathway)
    root = np.random.default_rng([ord(spec.exp), seed])
    r_init, r_train = root.spawn(2)
    store = merged_store(base_store, mcfg, r_init)
    tokenizer = tok.Tokenizer(tcfg, store, mode=mode)
    data = tr.prepare_train_data(corpus_dir, tokenizer, spec.pathway)
    stages = stage_configs_for(spec)
    log, _ = tr.run_pipeline(store, mcfg, stages, data, r_train, run_dir=run_dir)

    steps_per_stage = [sum(1 for r in log if r["stage"] == k) for k in (1, 2, 3)]
    result = {"exp": spec.exp, "seed": seed, "steps_per_stage": steps_per_stage,
              "final_loss": log[-1]["loss"]}
    if spec.tasks != "gen":
        qa = cp.load_split(corpus_dir, "heldout_qa")
        result["understanding"] = eval_understanding(
            store, mcfg, tokenizer, vocab, qa, limit=spec.eval_qa_limit)
    if spec.tasks != "und":
        prompts = cp.load_split(corpus_dir, "heldout_prompts")
        result["generation"] = eval_generation(
            store, mcfg, tokenizer, vocab, prompts,
            n_per_prompt=spec.n_per_prompt, seed=seed,
            limit=spec.eval_prompt_limit)
    return result


@dataclass
class MetricsReport:
    schema: str
    exp: str
    encoder: str
    tasks: str
    seeds: list
    config_hash: str
    stage_steps: list
    steps_per_stage_by_seed: list
    understanding_accuracy: float | None
    generation_validity: float | None
    generation_consistency: float | None
    palette_distance: float | None
    category_breakdown: dict | None = None
    per_seed: list = field(default_factory=list)

    def to_json(self) -> dict:
        return dict(self.__dict__)

    def validate(self):
        for rate in (self.understanding_accuracy, self.generation_validity,
                     self.generation_consistency):
            if rate is not None and not 0.0 <= rate <= 1.0:
                raise HarnessError(f"rate out of range: {rate}")
        for cell in (self.category_breakdown or {}).values():
            for key in ("validity", "consistency"):
                if not 0.0 <= cell[key] <= 1.0:
                    raise HarnessError(f"category rate out of range: {cell}")
        for seed_result in self.per_seed:
            gen = seed_result.get("generation")
            if gen:
                total = sum(c["n"] for c in gen["by_category"].values())
                if total != gen["n_images"]:
                    raise HarnessError("category counts do not sum to total")


def _category_breakdown(per_seed: list) -> dict | None:
    """Mean per-category generation rates over the seeds that generated."""
    cats: dict[str, dict] = {}
    for res in per_seed:
        gen = res.get("generation")
        if not gen:
            continue
        for cat, cell in gen["by_category"].items():
            agg = cats.setdefault(cat, {"validity": [], "consistency": [],
                                        "n": 0})
            agg["validity"].append(cell["validity"])
            agg["consistency"].append(cell["consistency"])
            agg["n"] += cell["n"]
    if not cats:
        return None
    return {cat: {"validity": float(np.mean(agg["validity"])),
                  "consistency": float(np.mean(agg["consistency"])),
                  "n": agg["n"]}
            for cat, agg in cats.items()}


def run_ablation(spec: ExperimentSpec, corpus_dir, tok_assets: dict,
                 run_dir=None) -> MetricsReport:
    """All seeds of one experiment; means over seeds plus per-seed detail."""
    grammar = cp.TextVocab().grammar_hash()
    per_seed = []
    for seed in spec.seeds:
        seed_dir = None if run_dir is None else Path(run_dir) / f"{spec.exp}_seed{seed}"
        per_seed.append(run_experiment_seed(spec, corpus_dir, tok_assets, seed,
                                            run_dir=seed_dir))
    for res in per_seed:
        if res["steps_per_stage"] != list(spec.stage_steps):
            raise HarnessError(
                f"experiment {spec.exp} seed {res['seed']} logged "
                f"{res['steps_per_stage']} steps, configured {list(spec.stage_steps)}")

    def mean_of(path):
        vals = [r[path[0]][path[1]] for r in per_seed if path[0] in r]
        return float(np.mean(vals)) if vals else None

    report = MetricsReport(
        schema=SCHEMA_VERSION, exp=spec.exp, encoder=spec.wiring["encoder"],
        tasks=spec.tasks, seeds=list(spec.seeds),
        config_hash=config_hash(spec, grammar),
        stage_steps=list(spec.stage_steps),
        steps_per_stage_by_seed=[r["steps_per_stage"] for r in per_seed],
        understanding_accuracy=mean_of(("understanding", "accuracy")),
        generation_validity=mean_of(("generation", "validity")),
        generation_consistency=mean_of(("generation", "consistency")),
        palette_distance=mean_of(("generation", "palette_distance")),
        category_breakdown=_category_breakdown(per_seed),
        per_seed=per_seed)
    report.validate()
    if run_dir is not None:
        out = Path(run_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"report_{spec.exp}.json", "w") as f:
            json.dump(report.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")
    return report


def validate_matched_steps(specs: dict):
    """D/E share understanding budgets and D/F generation budgets by step count."""
    d = specs.get("D")
    for other in ("E", "F"):
        if d is not None and other in specs \
                and tuple(specs[other].stage_steps) != tuple(d.stage_steps):
            raise HarnessError(
                f"experiment {other} must match D's step counts "
                f"{tuple(d.stage_steps)}, got {tuple(specs[other].stage_steps)}")


def default_ablation_specs(seeds=(0, 1, 2), stage_steps=(60, 600, 120),
                           **kw) -> dict:
    return {exp: ExperimentSpec(exp=exp, seeds=tuple(seeds),
                                stage_steps=tuple(stage_steps), **kw)
            for exp in EXPERIMENTS}


def run_ablation_suite(corpus_dir, tok_assets: dict, specs: dict | None = None,
                       run_dir=None) -> dict:
    specs = specs if specs is not None else default_ablation_specs()
    validate_matched_steps(specs)
    reports = {}
    for exp in sorted(specs):
        reports[exp] = run_ablation(specs[exp], corpus_dir, tok_assets,
                                    run_dir=run_dir)
    if run_dir is not None:
        with open(Path(run_dir) / "ablation_table.txt", "w") as f:
            f.write(ablation_table(reports) + "\n")
    return reports


def ablation_table(reports: dict) -> str:
    """Aligned plain-text summary, one row per experiment."""
    header = ("exp", "encoder", "tasks", "und_acc", "gen_consistency", "validity")
    rows = [header]
    for exp in sorted(reports):
        r = reports[exp]
        fmt = lambda v: "-" if v is None else f"{v:.3f}"
        rows.append((r.exp, r.encoder, r.tasks, fmt(r.understanding_accuracy),
                     fmt(r.generation_consistency), fmt(r.generation_validity)))
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    return "\n".join(lines)
