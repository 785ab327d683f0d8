"""Three-stage training: freeze maps, data mixing, packing, condition dropout.

Stage 1 aligns the visual adaptors and image head against a frozen trunk,
stage 2 unfreezes the trunk, text embeddings/head, and the understanding
encoder for unified pretraining, and stage 3 fine-tunes everything except the
generation-side VQ autoencoder on instruction-style data.  Each stage draws
examples from its (understanding : text : generation) ratio, packs them into
fixed-length windows with block-diagonal causal attention, and minimizes one
cross-entropy averaged over all loss positions, text and image heads alike.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import corpus as cp
from . import model as md
from . import numerics as nm
from .image_tokenizer import Tokenizer
from .model import ModelConfig, UnifiedSequence

GRAD_CLIP = 1.0
CONDITION_DROPOUT_P = 0.10
CAPTION_TRUNCATE_P = 0.25
STAGE_RATIOS = {1: (1, 0, 1), 2: (2, 3, 5), 3: (7, 3, 10)}
CURRICULUM_FRACTION = {1: 1.0, 2: 2.0 / 3.0, 3: 0.0}
SOURCE_NAMES = ("und", "text", "gen")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage: int
    total_steps: int
    batch_size: int
    lr: float
    schedule: str
    weight_decay: float
    warmup_steps: int
    ratio: tuple
    checkpoint_every: int = 0  # 0: checkpoint at stage end only

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise TrainingError("stage id must be 1, 2, or 3")
        if self.total_steps < 1 or self.batch_size < 1:
            raise TrainingError("steps and batch size must be positive")
        if len(self.ratio) != 3 or any(r < 0 for r in self.ratio) or sum(self.ratio) == 0:
            raise TrainingError("ratio must be three non-negative entries, not all zero")

    def to_json(self) -> dict:
        return {"stage": self.stage, "total_steps": self.total_steps,
                "batch_size": self.batch_size, "lr": self.lr,
                "schedule": self.schedule, "weight_decay": self.weight_decay,
                "warmup_steps": self.warmup_steps, "ratio": list(self.ratio),
                "checkpoint_every": self.checkpoint_every}


def desk_stage_configs(scale: float = 1.0, batch_sizes=(8, 16, 8)) -> tuple:
    """Default stage schedule: the reference 10k/180k/24k recipe shrunk to
    300/3000/600 steps (warmups scaled alongside), batch sizes desk-sized."""
    s1 = StageConfig(stage=1, total_steps=max(1, round(300 * scale)),
                     batch_size=batch_sizes[0], lr=1e-3, schedule="cosine",
                     weight_decay=0.0, warmup_steps=max(1, round(9 * scale)),
                     ratio=STAGE_RATIOS[1])
    s2 = StageConfig(stage=2, total_steps=max(1, round(3000 * scale)),
                     batch_size=batch_sizes[1], lr=1e-4, schedule="constant",
                     weight_decay=0.0, warmup_steps=max(1, round(83 * scale)),
                     ratio=STAGE_RATIOS[2])
    s3 = StageConfig(stage=3, total_steps=max(1, round(600 * scale)),
                     batch_size=batch_sizes[2], lr=2e-5, schedule="constant",
                     weight_decay=0.1, warmup_steps=0, ratio=STAGE_RATIOS[3])
    return s1, s2, s3


# -- freeze maps -------------------------------------------------------------------

GEN_ENCODER_PREFIXES = ("tokenizer/enc/", "tokenizer/dec/", "tokenizer/codebook")
STAGE1_TRAINABLE = ("model/und_adaptor/", "model/gen_adaptor/", "model/image_head/")
TRUNK_PREFIXES = ("model/trunk/", "model/pos", "model/text_embed",
                  "model/text_head/", "model/final_ln")


def understanding_encoder_prefixes(pathway: str) -> tuple:
    if pathway == "encoder":
        return ("model/und_enc/",)
    if pathway == "semantic":
        return ("tokenizer/sem/",)
    return ()


def stage_trainable_predicate(stage: int, pathway: str):
    """Parameter-path predicate: True where the stage may update."""
    if stage == 1:
        allowed = STAGE1_TRAINABLE
        return lambda path: path.startswith(allowed)
    if stage == 2:
        allowed = STAGE1_TRAINABLE + TRUNK_PREFIXES + understanding_encoder_prefixes(pathway)
        return lambda path: path.startswith(allowed)
    if stage == 3:
        return lambda path: not path.startswith(GEN_ENCODER_PREFIXES)
    raise ValueError("stage id must be 1, 2, or 3")


# -- data plumbing -----------------------------------------------------------------

@dataclass
class TrainData:
    """Corpus records plus precomputed per-image artifacts for one pathway."""
    vocab: cp.TextVocab
    tokenizer: Tokenizer
    pathway: str
    pools: dict
    images: dict
    code_ids: dict


def _decode_pool_images(records, side):
    if not records:
        return np.zeros((0, side, side, 3), dtype=np.float32)
    return np.stack([cp.image_from_hex(r["image_hex"], side) for r in records])


def prepare_train_data(corpus_dir, tokenizer: Tokenizer, pathway: str,
                       batch: int = 256) -> TrainData:
    """Load splits, split the dialogue data by kind, precompute code ids."""
    manifest = cp.load_manifest(corpus_dir)
    side = manifest["image_side"]
    pools = {name: cp.load_split(corpus_dir, name)
             for name in ("text", "und", "gen_category", "gen_full", "sft")}
    pools["sft_und"] = [r for r in pools["sft"] if r["kind"] == "und"]
    pools["sft_text"] = [r for r in pools["sft"] if r["kind"] == "text"]
    del pools["sft"]

    images, code_ids = {}, {}
    need_ids = {"gen_category", "gen_full"}
    if pathway in ("vq_ids", "semantic"):
        need_ids |= {"und", "sft_und"}
    else:
        images["und"] = _decode_pool_images(pools["und"], side)
        images["sft_und"] = _decode_pool_images(pools["sft_und"], side)
    for name in sorted(need_ids):
        imgs = _decode_pool_images(pools[name], side)
        ids = [tokenizer.encode_ids(imgs[i:i + batch]) for i in range(0, len(imgs), batch)]
        code_ids[name] = np.concatenate(ids) if ids else np.zeros((0, 0), dtype=np.int64)
    return TrainData(vocab=cp.TextVocab(), tokenizer=tokenizer, pathway=pathway,
                     pools=pools, images=images, code_ids=code_ids)


def _visual_parts(data: TrainData, pool: str, idx: int) -> dict:
    if data.pathway == "encoder":
        return {"image": data.images[pool][idx]}
    return {"image_ids": data.code_ids[pool][idx]}


def assemble_example(data: TrainData, mcfg: ModelConfig, source: str, pool: str,
                     record: dict, idx: int, rng: np.random.Generator,
                     sft_format: bool) -> UnifiedSequence:
    """Turn one corpus record into a UnifiedSequence for its source role."""
    prov = (pool, idx)
    if source == "text":
        if sft_format:
            return md.assemble_sequence(
                "sft", {"turns": [{"q": t["q"], "a": t["a"]} for t in record["turns"]]},
                mcfg, data.vocab, provenance=prov)
        return md.assemble_sequence("text", {"text": record["text"]},
                                    mcfg, data.vocab, provenance=prov)
    if source == "und":
        if sft_format:
            parts = {"turns": [{"q": t["q"], "a": t["a"]} for t in record["turns"]]}
            parts.update(_visual_parts(data, pool, idx))
            return md.assemble_sequence("sft", parts, mcfg, data.vocab, provenance=prov)
        parts = {"question": record["question"], "answer": record["answer"]}
        parts.update(_visual_parts(data, pool, idx))
        return md.assemble_sequence("und", parts, mcfg, data.vocab, provenance=prov)
    if source == "gen":
        caption = record["caption"]
        if pool == "gen_full":
            caption = cp.truncate_caption(caption, rng, CAPTION_TRUNCATE_P)
        return md.assemble_sequence(
            "gen", {"caption": caption, "image_ids": data.code_ids[pool][idx]},
            mcfg, data.vocab, provenance=prov)
    raise TrainingError(f"unknown source '{source}'")


# -- mixing, curriculum, dropout -----------------------------------------------------


class Cycler:
    """Epoch-reshuffled pass over one record pool."""

    def __init__(self, pool_name: str, records: list, rng: np.random.Generator):
        if not records:
            raise TrainingError(f"source '{pool_name}' has no records")
        self.pool_name = pool_name
        self.records = records
        self._rng = rng
        self._order = rng.permutation(len(records))
        self._at = 0

    def draw(self):
        if self._at == len(self._order):
            self._order = self._rng.permutation(len(self.records))
            self._at = 0
        idx = int(self._order[self._at])
        self._at += 1
        return self.records[idx], idx


def mix_stream(sources: dict, ratio, rng: np.random.Generator):
    """Infinite (source_name, record, index) stream from a ratio triple.

    ``sources`` maps the names "und"/"text"/"gen" to Cyclers (or to callables
    returning a Cycler, resolved at draw time for curriculum switching).
    """
    ratio = np.asarray(ratio, dtype=np.float64)
    if ratio.shape != (3,) or np.any(ratio < 0) or ratio.sum() == 0:
        raise TrainingError("ratio must be three non-negative entries, not all zero")
    for name, r in zip(SOURCE_NAMES, ratio):
        if r > 0 and sources.get(name) is None:
            raise TrainingError(f"nonzero ratio for source '{name}' but no data")
    p = np.cumsum(ratio / ratio.sum())
    while True:
        u = rng.random()
        name = SOURCE_NAMES[int(np.searchsorted(p, u, side="right"))]
        cycler = sources[name]
        if callable(cycler):
            cycler = cycler()
        record, idx = cycler.draw()
        yield name, cycler.pool_name, record, idx


def curriculum_select(step: int, total_steps: int, fraction: float = 2.0 / 3.0) -> str:
    """Generation sub-source for this step: simple captions early, full later."""
    if not 0 <= step < total_steps:
        raise TrainingError(f"step {step} outside [0, {total_steps})")
    return "category" if step < fraction * total_steps else "full"


def apply_condition_dropout(seq: UnifiedSequence, rng: np.random.Generator,
                            p: float = CONDITION_DROPOUT_P) -> UnifiedSequence:
    """With probability p, blank the whole caption prefix to PAD tokens."""
    if seq.task != "gen":
        raise TrainingError("condition dropout applies to generation sequences only")
    if p > 0 and rng.random() < p:
        boi = int(np.nonzero(seq.ids == cp.BOI)[0][0])
        ids = seq.ids.copy()
        ids[:boi] = cp.PAD
        return UnifiedSequence(task=seq.task, kinds=seq.kinds, ids=ids,
                               targets=seq.targets, target_modality=seq.target_modality,
                               inject=seq.inject, provenance=seq.provenance)
    return seq


# -- packing -----------------------------------------------------------------------


def pack_sequences(seqs, context_len: int):
    """Greedy first-fit in arrival order; no sequence is ever split."""
    packs, room = [], []
    for seq in seqs:
        n = len(seq)
        if n > context_len:
            raise TrainingError(f"sequence of length {n} exceeds context {context_len}")
        for i, free in enumerate(room):
            if n <= free:
                packs[i].append(seq)
                room[i] -= n
                break
        else:
            packs.append([seq])
            room.append(context_len - n)
    return packs


@dataclass
class PackedBatch:
    kinds: np.ndarray
    ids: np.ndarray
    segments: np.ndarray
    positions: np.ndarray
    targets: np.ndarray
    target_modality: np.ndarray
    tasks: np.ndarray  # per-slot task tag index into TASK_ORDER, -1 for padding
    injections: list
    provenance: list


TASK_ORDER = ("text", "und", "gen", "sft")


def batch_from_packs(packs, context_len: int) -> PackedBatch:
    b = len(packs)
    t = context_len
    kinds = np.zeros((b, t), dtype=np.int8)
    ids = np.full((b, t), cp.PAD, dtype=np.int64)
    segments = np.zeros((b, t), dtype=np.int64)
    positions = np.zeros((b, t), dtype=np.int64)
    targets = np.full((b, t), -1, dtype=np.int64)
    modality = np.zeros((b, t), dtype=np.int8)
    tasks = np.full((b, t), -1, dtype=np.int8)
    injections, provenance = [], []
    for w, pack in enumerate(packs):
        cursor, seg = 0, 0
        for seq in pack:
            n = len(seq)
            sl = slice(cursor, cursor + n)
            kinds[w, sl] = seq.kinds
            ids[w, sl] = np.where(seq.ids >= 0, seq.ids, cp.PAD)
            segments[w, sl] = seg
            positions[w, sl] = np.arange(n)
            targets[w, sl] = seq.targets
            modality[w, sl] = seq.target_modality
            tasks[w, sl] = TASK_ORDER.index(seq.task)
            if seq.inject is not None:
                start = cursor + int(np.nonzero(seq.kinds == md.KIND_INJECT)[0][0])
                injections.append((w, start, seq.inject))
            provenance.append(seq.provenance)
            cursor += n
            seg += 1
        # padding tail: each pad slot sits alone in its own segment
        for pos in range(cursor, t):
            segments[w, pos] = seg
            seg += 1
    return PackedBatch(kinds=kinds, ids=ids, segments=segments, positions=positions,
                       targets=targets, target_modality=modality, tasks=tasks,
                       injections=injections, provenance=provenance)


# -- loss --------------------------------------------------------------------------


def batch_loss(store, mcfg: ModelConfig, batch: PackedBatch, codebook=None,
               semantic_decoder=None):
    """Single mean cross-entropy over every loss position in the batch.

    Returns (loss tensor, stats) where stats carries per-task position counts
    and per-task summed loss values for logging.
    """
    hidden = md.forward_windows(store, mcfg, batch, codebook=codebook,
                                semantic_decoder=semantic_decoder)
    b, t, h = hidden.shape
    flat = hidden.reshape(b * t, h)
    tgt_pos = np.nonzero(batch.targets.reshape(-1) >= 0)[0]
    if len(tgt_pos) == 0:
        raise TrainingError("batch has no loss positions")
    mods = batch.target_modality.reshape(-1)[tgt_pos]
    tids = batch.targets.reshape(-1)[tgt_pos]
    tasks = batch.tasks.reshape(-1)[tgt_pos]

    total = None
    stats = {"positions": {}, "loss_sums": {}}
    for mod, head in ((md.MOD_TEXT, md.text_logits), (md.MOD_IMAGE, md.image_logits)):
        sel = np.nonzero(mods == mod)[0]
        for task_id in np.unique(tasks[sel]) if len(sel) else ():
            tsel = sel[tasks[sel] == task_id]
            logits = head(store, nm.gather_rows(flat, tgt_pos[tsel] - 1))
            part = nm.softmax_cross_entropy(logits, tids[tsel], reduction="sum")
            total = part if total is None else total + part
            name = TASK_ORDER[task_id]
            stats["positions"][name] = stats["positions"].get(name, 0) + len(tsel)
            stats["loss_sums"][name] = stats["loss_sums"].get(name, 0.0) + float(part.data)
    n = len(tgt_pos)
    loss = total * (1.0 / n)
    stats["n_positions"] = n
    return loss, stats


# -- stage execution ---------------------------------------------------------------


def trunk_kwargs(data: TrainData, store) -> dict:
    """Forward-pass extras the configured pathway needs."""
    kwargs = {}
    if "tokenizer/codebook" in store:
        kwargs["codebook"] = store["tokenizer/codebook"]
    if data.pathway == "semantic":
        kwargs["semantic_decoder"] = data.tokenizer.decode_semantic
    return kwargs


def _stage_sources(data: TrainData, stage: StageConfig, rng: np.random.Generator,
                   step_ref: list):
    """Cyclers for the (und, text, gen) roles of this stage.

    The gen entry is a callable resolving the curriculum sub-source from the
    current step (read out of ``step_ref``).
    """
    r_und, r_text, r_cat, r_full = rng.spawn(4)
    sources = {"und": None, "text": None, "gen": None}
    sft = stage.stage == 3
    if stage.ratio[0] > 0:
        pool = "sft_und" if sft else "und"
        sources["und"] = Cycler(pool, data.pools[pool], r_und)
    if stage.ratio[1] > 0:
        pool = "sft_text" if sft else "text"
        sources["text"] = Cycler(pool, data.pools[pool], r_text)
    if stage.ratio[2] > 0:
        fraction = CURRICULUM_FRACTION[stage.stage]
        cat = Cycler("gen_category", data.pools["gen_category"], r_cat) if fraction > 0 else None
        full = Cycler("gen_full", data.pools["gen_full"], r_full) if fraction < 1 else None

        def gen_source():
            which = curriculum_select(step_ref[0], stage.total_steps, fraction)
            return cat if which == "category" else full

        sources["gen"] = gen_source
    return sources


def _uncond_probe(data: TrainData, mcfg: ModelConfig, stage: StageConfig,
                  rng: np.random.Generator, n: int = 8):
    """Fixed all-PAD-caption generation batch for tracking the unconditional path."""
    pool = "gen_category" if CURRICULUM_FRACTION[stage.stage] >= 1 else "gen_full"
    records = data.pools[pool]
    take = [int(i) for i in rng.choice(len(records), size=min(n, len(records)), replace=False)]
    seqs = []
    for idx in take:
        seq = md.assemble_sequence(
            "gen", {"caption": records[idx]["caption"], "image_ids": data.code_ids[pool][idx]},
            mcfg, data.vocab, provenance=(pool, idx))
        seqs.append(apply_condition_dropout(seq, rng, p=1.0))
    return batch_from_packs(pack_sequences(seqs, mcfg.context_len), mcfg.context_len)


def run_stage(store, mcfg: ModelConfig, stage: StageConfig, data: TrainData,
              rng: np.random.Generator, run_dir=None):
    """Execute one stage; returns (log rows, checkpoint hash or None)."""
    store.set_trainable(stage_trainable_predicate(stage.stage, data.pathway))
    opt = nm.OptimizerState.fresh(store)
    schedule = nm.LrSchedule(stage.schedule, stage.lr, stage.warmup_steps,
                             stage.total_steps, 0.0)
    r_sources, r_mix, r_assemble, r_dropout, r_probe = rng.spawn(5)
    step_ref = [0]
    sources = _stage_sources(data, stage, r_sources, step_ref)
    stream = mix_stream(sources, stage.ratio, r_mix)
    fw = trunk_kwargs(data, store)
    probe = _uncond_probe(data, mcfg, stage, r_probe) if stage.ratio[2] > 0 else None
    probe_every = max(1, stage.total_steps // 12)

    log = []
    for step in range(stage.total_steps):
        step_ref[0] = step
        draws = [next(stream) for _ in range(stage.batch_size)]
        seqs = []
        for name, pool, record, idx in draws:
            sft_format = stage.stage == 3 and name in ("und", "text")
            seq = assemble_example(data, mcfg, name, pool, record, idx,
                                   r_assemble, sft_format)
            if name == "gen":
                seq = apply_condition_dropout(seq, r_dropout)
            seqs.append(seq)
        batch = batch_from_packs(pack_sequences(seqs, mcfg.context_len), mcfg.context_len)
        try:
            loss, stats = batch_loss(store, mcfg, batch, **fw)
            if not np.isfinite(loss.data):
                raise TrainingError("non-finite loss")
            store.zero_grad()
            loss.backward()
            grads = store.collect_grads()
            grads, gnorm = nm.clip_gradients(grads, GRAD_CLIP)
        except (TrainingError, nm.NonFiniteError, ArithmeticError) as e:
            raise TrainingError(
                f"stage {stage.stage} aborted at step {step}: {e}; "
                f"batch provenance {batch.provenance}") from e
        # 1-based during warmup so the very first update has a positive rate
        lr = nm.lr_at(schedule, step + 1 if step < stage.warmup_steps else step)
        nm.adamw_step(store, grads, opt, lr=lr, weight_decay=stage.weight_decay)

        mix_counts = {}
        for name, _, _, _ in draws:
            mix_counts[name] = mix_counts.get(name, 0) + 1
        row = {"stage": stage.stage, "step": step, "loss": float(loss.data),
               "lr": lr, "grad_norm": float(gnorm), "mix": mix_counts,
               "task_positions": stats["positions"], "task_loss_sums": stats["loss_sums"],
               "n_windows": batch.kinds.shape[0]}
        if probe is not None and (step % probe_every == 0 or step == stage.total_steps - 1):
            with nm.no_grad():
                ploss, _ = batch_loss(store, mcfg, probe, **fw)
            row["uncond_probe"] = float(ploss.data)
        log.append(row)

        if run_dir is not None and stage.checkpoint_every > 0 \
                and (step + 1) % stage.checkpoint_every == 0 \
                and step + 1 < stage.total_steps:
            _write_checkpoint(run_dir, f"stage{stage.stage}_step{step + 1}", store, opt, stage)

    ckpt_hash = None
    if run_dir is not None:
        ckpt_hash = _write_checkpoint(run_dir, f"stage{stage.stage}", store, opt, stage)
    return log, ckpt_hash


def _write_checkpoint(run_dir, name, store, opt, stage: StageConfig) -> str:
    import os
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, f"{name}.ckpt")
    return nm.save_checkpoint(path, store, optimizer=opt,
                              meta={"stage": stage.to_json()})


def run_pipeline(store, mcfg: ModelConfig, stages, data: TrainData,
                 rng: np.random.Generator, run_dir=None):
    """Run stages 1 -> 2 -> 3 in order; returns (consolidated log, manifest)."""
    ids = [s.stage for s in stages]
    if ids != [1, 2, 3]:
        raise TrainingError(f"pipeline requires stages [1, 2, 3] in order, got {ids}")
    stage_rngs = rng.spawn(len(stages))
    log = []
    manifest = {"stages": [], "pathway": data.pathway,
                "grammar_hash": data.vocab.grammar_hash()}
    for stage, srng in zip(stages, stage_rngs):
        stage_log, ckpt_hash = run_stage(store, mcfg, stage, data, srng, run_dir=run_dir)
        log.extend(stage_log)
        manifest["stages"].append({"config": stage.to_json(),
                                   "checkpoint_hash": ckpt_hash,
                                   "final_loss": stage_log[-1]["loss"]})
    if run_dir is not None:
        import os
        with open(os.path.join(run_dir, "training_manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
    return log, manifest
