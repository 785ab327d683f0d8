"""Command-line front end: corpus building, tokenizer pretraining, staged
model training, sampling, evaluation, and the encoder ablation grid.

Every subcommand takes --config (a JSON file of overrides) and --seed, and
writes its outputs under a run directory with a manifest, so any invocation is
reproducible byte-for-byte from (config, seed).
"""

import argparse
import json
import subprocess
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import corpus as cp
from . import harness as hn
from . import image_tokenizer as tok
from . import inference as inf
from . import model as md
from . import numerics as nm
from . import training as tr


class CliError(RuntimeError):
    pass


# -- small IO helpers ---------------------------------------------------------------


def write_ppm(path, image):
    """Binary P6 at maxval 255 from a float image in [0,1]."""
    img = np.asarray(image, dtype=np.float64)
    u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = u8.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise CliError(f"'{path}' is not a binary P6 image")
    # Scan the three header integers by hand: pixel bytes may themselves be
    # whitespace values, so a naive split() can misplace the data offset.
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CliError(f"'{path}' has a truncated header")
        fields.append(int(raw[start:pos]))
    pos += 1  # exactly one whitespace byte separates maxval from pixel data
    w, h, maxval = fields
    if maxval != 255:
        raise CliError(f"unsupported maxval {maxval}")
    if len(raw) - pos < w * h * 3:
        raise CliError(f"'{path}' truncated")
    px = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return px.reshape(h, w, 3).astype(np.float32) / np.float32(255.0)


def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise CliError("config file must hold a JSON object")
    return cfg


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def make_run_dir(path) -> Path:
    run = Path(path)
    run.mkdir(parents=True, exist_ok=True)
    return run


# -- tokenizer persistence ----------------------------------------------------------


def save_tokenizer(path, tokenizer: tok.Tokenizer) -> str:
    return nm.save_checkpoint(path, tokenizer.store,
                              meta={"kind": "tokenizer", "mode": tokenizer.mode,
                                    "config": asdict(tokenizer.cfg)})


def load_tokenizer(path) -> tok.Tokenizer:
    store, _, meta = nm.load_checkpoint(path)
    if meta.get("kind") != "tokenizer":
        raise CliError(f"'{path}' is not a tokenizer checkpoint")
    cfg = tok.TokenizerConfig(**meta["config"])
    return tok.Tokenizer(cfg, store, mode=meta["mode"])


# -- model-run persistence ----------------------------------------------------------


def load_run(run_dir):
    """(store, mcfg, tokenizer, vocab) from a training run directory."""
    run = Path(run_dir)
    with open(run / "run_manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    store, _, _ = nm.load_checkpoint(run / "stage3.ckpt")
    mcfg = md.ModelConfig(**manifest["model_config"])
    tcfg = tok.TokenizerConfig(**manifest["tokenizer_config"])
    tokenizer = tok.Tokenizer(tcfg, store, mode=manifest["tokenizer_mode"])
    return store, mcfg, tokenizer, cp.TextVocab()


# -- subcommands --------------------------------------------------------------------


def cmd_corpus_build(args) -> int:
    cfg = load_config(args.config).get("corpus", {})
    if args.seed is not None:
        cfg.setdefault("train_seed", args.seed)
        cfg.setdefault("heldout_seed", args.seed + 10_000)
    ccfg = cp.CorpusConfig(**cfg)
    manifest = cp.build_corpus(ccfg, args.out)
    print(f"corpus written to {args.out}")
    for name, n in sorted(manifest["counts"].items()):
        print(f"  {name}: {n}")
    return 0


def cmd_tokenizer_train(args) -> int:
    run = make_run_dir(args.out)
    cfg = load_config(args.config).get("tokenizer", {})
    default_steps = (300, 700) if args.mode == "vq_only" else (0, 400)
    steps = tuple(cfg.get("steps", default_steps))
    batch = cfg.get("batch_size", 32)
    lr = cfg.get("lr", 1e-3 if args.mode == "vq_only" else 1e-4)
    seed = args.seed if args.seed is not None else 0
    if args.mode == "vq_only":
        tokenizer, log = hn.train_vq_tokenizer(args.corpus, seed=seed, steps=steps,
                                               batch_size=batch, lr=lr)
    else:
        if args.teacher_run is None:
            raise CliError("semantic tokenizer training needs --teacher-run")
        t_store, t_mcfg, _, _ = load_run(args.teacher_run)
        teacher = hn.understanding_teacher(t_store, t_mcfg)
        vq_store = load_tokenizer(args.vq_init).store if args.vq_init else None
        tokenizer, log = hn.train_semantic_tokenizer(
            args.corpus, teacher, vq_store=vq_store, seed=seed, steps=steps,
            batch_size=batch, lr=lr)
    ckpt = run / "tokenizer.ckpt"
    ckpt_hash = save_tokenizer(ckpt, tokenizer)
    write_json(run / "tokenizer_manifest.json",
               {"mode": args.mode, "steps": list(steps), "batch_size": batch,
                "lr": lr, "seed": seed, "checkpoint_hash": ckpt_hash,
                "git_describe": git_describe(),
                "final": log[-1] if log else None})
    print(f"tokenizer checkpoint {ckpt} ({ckpt_hash[:12]})")
    return 0


def cmd_tokenizer_encode(args) -> int:
    tokenizer = load_tokenizer(args.tokenizer)
    image = read_ppm(args.image)
    ids = tokenizer.encode_ids(image)
    payload = {"ids": [int(i) for i in ids], "grid_side": tokenizer.cfg.grid_side}
    write_json(args.out, payload)
    print(f"{len(ids)} ids -> {args.out}")
    return 0


def cmd_tokenizer_decode(args) -> int:
    tokenizer = load_tokenizer(args.tokenizer)
    with open(args.ids, encoding="utf-8") as f:
        ids = np.array(json.load(f)["ids"], dtype=np.int64)
    with nm.no_grad():
        image = tokenizer.decode_pixels(ids).data
    write_ppm(args.out, image)
    print(f"image -> {args.out}")
    return 0


def _stage_overrides(config: dict):
    stages = tr.desk_stage_configs()
    overrides = config.get("stages")
    if not overrides:
        return list(stages)
    out = []
    for base, over in zip(stages, overrides):
        fields = base.to_json()
        fields.pop("ratio_names", None)
        fields["ratio"] = tuple(fields["ratio"])
        fields.update(over)
        fields["ratio"] = tuple(fields["ratio"])
        out.append(tr.StageConfig(**fields))
    return out


def cmd_train(args) -> int:
    config = load_config(args.config)
    seed = args.seed if args.seed is not None else 0
    run = make_run_dir(args.out)
    vocab = cp.TextVocab()
    pathway = config.get("pathway", args.pathway)
    if args.stage is not None and args.stage > 1 and not args.init:
        raise CliError(f"--stage {args.stage} needs --init with the run "
                       "directory holding the previous stage's checkpoint")

    if args.init:
        init_run = Path(args.init)
        tokenizer = load_tokenizer(init_run / "tokenizer.ckpt")
        tok_source = {"path": str(init_run / "tokenizer.ckpt")}
    elif args.tokenizer:
        tokenizer = load_tokenizer(args.tokenizer)
        tok_source = {"path": str(args.tokenizer)}
    else:
        tok_cfg = config.get("tokenizer", {})
        tokenizer, _ = hn.train_vq_tokenizer(
            args.corpus, seed=seed,
            steps=tuple(tok_cfg.get("steps", (300, 700))),
            batch_size=tok_cfg.get("batch_size", 32),
            lr=tok_cfg.get("lr", 1e-3))
        tok_source = {"trained_inline": True, "seed": seed}
    tok_hash = save_tokenizer(run / "tokenizer.ckpt", tokenizer)

    mcfg = md.ModelConfig(text_vocab=len(vocab), understanding_pathway=pathway,
                          **config.get("model", {}))
    store = hn.merged_store(tokenizer.store, mcfg, np.random.default_rng(seed + 1))
    tokenizer = tok.Tokenizer(tokenizer.cfg, store, mode=tokenizer.mode)
    data = tr.prepare_train_data(args.corpus, tokenizer, pathway)
    stages = _stage_overrides(config)
    root_rng = np.random.default_rng(seed + 2)
    if args.stage is not None:
        # Single-stage run: resume from the previous stage's checkpoint and
        # consume the same per-stage rng the full pipeline would have used, so
        # chaining stages 1..3 reproduces one pipeline run bit for bit.
        stage_cfg = stages[args.stage - 1]
        if args.stage > 1:
            prev, _, _ = nm.load_checkpoint(
                Path(args.init) / f"stage{args.stage - 1}.ckpt")
            store.load_values({p: prev[p].data for p in prev.paths()})
        stage_rng = root_rng.spawn(len(stages))[args.stage - 1]
        log, ckpt_hash = tr.run_stage(store, mcfg, stage_cfg, data, stage_rng,
                                      run_dir=run)
        manifest = {"stages": [{"config": stage_cfg.to_json(),
                                "checkpoint_hash": ckpt_hash,
                                "final_loss": log[-1]["loss"]}],
                    "pathway": pathway,
                    "grammar_hash": vocab.grammar_hash()}
    else:
        log, manifest = tr.run_pipeline(store, mcfg, stages, data, root_rng,
                                        run_dir=run)
    with open(run / "training_log.jsonl", "w", encoding="utf-8") as f:
        for row in log:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    model_cfg_json = asdict(mcfg)
    write_json(run / "run_manifest.json", {
        "seed": seed, "pathway": pathway, "config_snapshot": config,
        "model_config": model_cfg_json,
        "tokenizer_config": asdict(tokenizer.cfg),
        "tokenizer_mode": tokenizer.mode, "tokenizer_source": tok_source,
        "tokenizer_hash": tok_hash,
        "git_describe": git_describe(),
        "grammar_hash": vocab.grammar_hash(),
        "stage_checkpoints": [s["checkpoint_hash"] for s in manifest["stages"]],
    })
    print(f"run complete: {run}")
    for s in manifest["stages"]:
        print(f"  stage {s['config']['stage']}: final loss {s['final_loss']:.4f} "
              f"ckpt {s['checkpoint_hash'][:12]}")
    return 0


def cmd_generate(args) -> int:
    store, mcfg, tokenizer, vocab = load_run(args.run)
    config = inf.SamplerConfig(cfg_scale=args.cfg_scale,
                               temperature=args.temperature,
                               seed=args.seed if args.seed is not None else 0)
    ids, image = inf.generate_image(store, mcfg, tokenizer, vocab, args.prompt,
                                    config)
    write_ppm(args.out, image)
    if args.trace:
        print("ids:", " ".join(str(int(i)) for i in ids))
    print(f"image -> {args.out}")
    return 0


def cmd_ask(args) -> int:
    store, mcfg, tokenizer, vocab = load_run(args.run)
    image = read_ppm(args.image)
    config = inf.greedy_config(seed=args.seed if args.seed is not None else 0) \
        if args.temperature is None else \
        inf.SamplerConfig(temperature=args.temperature,
                          seed=args.seed if args.seed is not None else 0)
    text, truncated = inf.answer_question(store, mcfg, tokenizer, vocab,
                                          image, args.question, config)
    if args.trace:
        print("tokens:", " ".join(text.split()))
    print(text + (" [truncated]" if truncated else ""))
    return 0


def cmd_eval(args) -> int:
    store, mcfg, tokenizer, vocab = load_run(args.run)
    out = {}
    if args.what in ("qa", "all"):
        qa = cp.load_split(args.corpus, "heldout_qa")
        out["understanding"] = hn.eval_understanding(
            store, mcfg, tokenizer, vocab, qa, limit=args.limit)
    if args.what in ("gen", "all"):
        prompts = cp.load_split(args.corpus, "heldout_prompts")
        out["generation"] = hn.eval_generation(
            store, mcfg, tokenizer, vocab, prompts,
            config=inf.SamplerConfig(cfg_scale=args.cfg_scale),
            seed=args.seed if args.seed is not None else 0, limit=args.limit)
    if args.what == "paired":
        prompts = cp.load_split(args.corpus, "heldout_prompts")
        out["paired"] = hn.paired_guidance_eval(
            store, mcfg, tokenizer, vocab, prompts, limit=args.limit)
    out["schema"] = hn.SCHEMA_VERSION
    write_json(args.out, out)
    print(f"report -> {args.out}")
    return 0


def cmd_ablate(args) -> int:
    run = make_run_dir(args.out)
    config = load_config(args.config).get("ablation", {})
    seeds = tuple(config.get("seeds", (args.seed,) if args.seed is not None else (0,)))
    stage_steps = tuple(config.get("stage_steps", (60, 600, 120)))
    kw = {k: config[k] for k in ("eval_qa_limit", "eval_prompt_limit", "n_per_prompt")
          if k in config}

    assets = {}
    if args.vq_tokenizer:
        t = load_tokenizer(args.vq_tokenizer)
        assets["vq"] = (t.cfg, t.store, t.mode)
    if args.semantic_tokenizer:
        t = load_tokenizer(args.semantic_tokenizer)
        assets["semantic"] = (t.cfg, t.store, t.mode)

    exps = EXPERIMENT_CHOICES if args.exp == "all" else [args.exp]
    specs = {e: hn.ExperimentSpec(exp=e, seeds=seeds, stage_steps=stage_steps, **kw)
             for e in exps}
    hn.validate_matched_steps(specs)
    for e in exps:
        need = specs[e].tokenizer_kind
        if need not in assets:
            raise CliError(f"experiment {e} needs a --{need.replace('_', '-')}"
                           "-tokenizer checkpoint"
                           if need != "vq" else
                           f"experiment {e} needs --vq-tokenizer")
    reports = {}
    for e in exps:
        reports[e] = hn.run_ablation(specs[e], args.corpus, assets, run_dir=run)
    table = hn.ablation_table(reports)
    with open(run / "ablation_table.txt", "w", encoding="utf-8") as f:
        f.write(table + "\n")
    print(table)
    return 0


EXPERIMENT_CHOICES = list(hn.EXPERIMENTS)


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualenc",
                                description="unified multimodal model workbench")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config overrides")
        sp.add_argument("--seed", type=int, default=None)

    pc = sub.add_parser("corpus", help="corpus utilities")
    pcs = pc.add_subparsers(dest="subcommand", required=True)
    b = pcs.add_parser("build", help="generate all corpus splits")
    b.add_argument("--out", required=True)
    common(b)
    b.set_defaults(fn=cmd_corpus_build)

    pt = sub.add_parser("tokenizer", help="image tokenizer utilities")
    pts = pt.add_subparsers(dest="subcommand", required=True)
    t = pts.add_parser("train", help="pretrain an image tokenizer")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=["vq_only", "semantic"], default="vq_only")
    t.add_argument("--teacher-run", default=None,
                   help="training run dir supplying the distillation teacher")
    t.add_argument("--vq-init", default=None,
                   help="VQ tokenizer checkpoint to warm-start from")
    common(t)
    t.set_defaults(fn=cmd_tokenizer_train)
    e = pts.add_parser("encode", help="image -> code ids")
    e.add_argument("--tokenizer", required=True)
    e.add_argument("--image", required=True)
    e.add_argument("--out", required=True)
    common(e)
    e.set_defaults(fn=cmd_tokenizer_encode)
    d = pts.add_parser("decode", help="code ids -> image")
    d.add_argument("--tokenizer", required=True)
    d.add_argument("--ids", required=True)
    d.add_argument("--out", required=True)
    common(d)
    d.set_defaults(fn=cmd_tokenizer_decode)

    tr_p = sub.add_parser("train", help="three-stage training pipeline")
    tr_p.add_argument("--corpus", required=True)
    tr_p.add_argument("--out", required=True)
    tr_p.add_argument("--pathway", choices=list(md.PATHWAYS), default="encoder")
    tr_p.add_argument("--tokenizer", default=None,
                      help="pretrained tokenizer checkpoint (else trained inline)")
    tr_p.add_argument("--stage", type=int, choices=[1, 2, 3], default=None,
                      help="run a single stage instead of the full pipeline")
    tr_p.add_argument("--init", default=None,
                      help="run directory with the previous stage's checkpoint")
    common(tr_p)
    tr_p.set_defaults(fn=cmd_train)

    g = sub.add_parser("generate", help="sample an image from a caption")
    g.add_argument("--run", required=True)
    g.add_argument("--prompt", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--cfg-scale", type=float, default=5.0)
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--trace", action="store_true")
    common(g)
    g.set_defaults(fn=cmd_generate)

    a = sub.add_parser("ask", help="answer a question about an image")
    a.add_argument("--run", required=True)
    a.add_argument("--image", required=True)
    a.add_argument("--question", required=True)
    a.add_argument("--temperature", type=float, default=None,
                   help="sampling temperature (default: greedy)")
    a.add_argument("--trace", action="store_true")
    common(a)
    a.set_defaults(fn=cmd_ask)

    ev = sub.add_parser("eval", help="score a trained run against held-out data")
    ev.add_argument("--run", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--what", choices=["qa", "gen", "paired", "all"], default="all")
    ev.add_argument("--cfg-scale", type=float, default=5.0)
    ev.add_argument("--limit", type=int, default=None)
    common(ev)
    ev.set_defaults(fn=cmd_eval)

    ab = sub.add_parser("ablate", help="run encoder ablation experiments")
    ab.add_argument("--corpus", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--exp", choices=EXPERIMENT_CHOICES + ["all"], default="all")
    ab.add_argument("--vq-tokenizer", default=None)
    ab.add_argument("--semantic-tokenizer", default=None)
    common(ab)
    ab.set_defaults(fn=cmd_ablate)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, cp.SceneError, cp.VocabError, cp.CaptionParseError,
            tok.TokenizerError, md.SequenceError, tr.TrainingError,
            inf.InferenceError, hn.HarnessError, nm.CheckpointError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
