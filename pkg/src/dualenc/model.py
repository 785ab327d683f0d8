"""Unified multimodal autoregressive transformer with decoupled visual encoding.

One causal trunk consumes a mixed stream of text tokens, discrete image
tokens, and injected continuous image features.  Understanding and generation
use separate visual pathways: a small bidirectional patch encoder plus MLP
adaptor feeds semantic features in, while generation looks code ids up in the
(frozen) codebook and passes them through its own adaptor.  Two independent
affine heads read hidden states out, one over the text vocabulary and one
over the image-code vocabulary.

Sequence layout conventions (ids refer to the corpus vocabulary):
  text          [BOS, w1..wn, EOS]                      loss on w1..EOS
  understanding [BOI, feats, EOI, q.., a.., EOS]        loss on a..EOS
  generation    [caption, BOI, img ids, EOI]            loss on ids + EOI
  sft           [USER, (BOI feats EOI)?, q.., NL, ASSISTANT, a.., EOS] x turns,
                loss on every assistant span incl. its EOS
A target at position p is predicted from hidden state p-1; generation's
closing EOI is scored by the text head, everything else by the head of its
own modality.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import corpus as cp
from . import numerics as nm
from .numerics import ParameterStore, Tensor

NEG_MASK = np.float32(-1e9)

PATHWAYS = ("encoder", "vq_ids", "semantic")


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    text_vocab: int
    image_vocab: int = 128
    hidden: int = 128
    layers: int = 4
    heads: int = 4
    context_len: int = 80
    mlp_ratio: int = 4
    # understanding encoder (continuous pathway)
    image_side: int = 16
    und_patch: int = 4
    und_width: int = 64
    und_depth: int = 2
    und_heads: int = 2
    # generation pathway input width (codebook dim)
    code_dim: int = 16
    # semantic-pathway feature width (appendix tokenizer variant)
    sem_hidden: int = 64
    adaptor_hidden: int = 128
    understanding_pathway: str = "encoder"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden dim must divide evenly across heads")
        if self.und_width % self.und_heads:
            raise ValueError("encoder width must divide evenly across its heads")
        if self.image_side % self.und_patch:
            raise ValueError("image side must be divisible by the patch size")
        if self.understanding_pathway not in PATHWAYS:
            raise ValueError(f"unknown understanding pathway '{self.understanding_pathway}'")

    @property
    def und_tokens(self) -> int:
        return (self.image_side // self.und_patch) ** 2

    def und_adaptor_in(self) -> int | None:
        if self.understanding_pathway == "encoder":
            return self.und_width
        if self.understanding_pathway == "semantic":
            return self.sem_hidden
        return None  # vq_ids rides the generation adaptor


# -- parameter construction -----------------------------------------------------

def _linear(store, prefix, n_in, n_out, rng, std=None):
    std = std if std is not None else 1.0 / np.sqrt(n_in)
    store.add(prefix + "/w", (rng.normal(size=(n_in, n_out)) * std).astype(np.float32))
    store.add(prefix + "/b", np.zeros(n_out, dtype=np.float32))


def add_block_params(store: ParameterStore, prefix: str, width: int, mlp_ratio: int,
                     rng: np.random.Generator):
    store.add(prefix + "/ln1_g", np.ones(width, dtype=np.float32))
    store.add(prefix + "/ln1_b", np.zeros(width, dtype=np.float32))
    for name in ("wq", "wk", "wv", "wo"):
        _linear(store, f"{prefix}/{name}", width, width, rng, std=0.02)
    store.add(prefix + "/ln2_g", np.ones(width, dtype=np.float32))
    store.add(prefix + "/ln2_b", np.zeros(width, dtype=np.float32))
    _linear(store, prefix + "/fc1", width, mlp_ratio * width, rng, std=0.02)
    _linear(store, prefix + "/fc2", mlp_ratio * width, width, rng, std=0.02)


def block_forward(store: ParameterStore, prefix: str, x: Tensor, heads: int,
                  mask: np.ndarray | None) -> Tensor:
    """Pre-norm transformer block on [B, T, W]; mask is additive or None."""
    b, t, w = x.shape
    dh = w // heads

    def proj(name, h):
        return h @ store[f"{prefix}/{name}/w"] + store[f"{prefix}/{name}/b"]

    h = nm.layer_norm(x, store[prefix + "/ln1_g"], store[prefix + "/ln1_b"])

    def split_heads(v):
        return nm.transpose(v.reshape(b, t, heads, dh), (0, 2, 1, 3))

    att = nm.masked_attention(split_heads(proj("wq", h)), split_heads(proj("wk", h)),
                              split_heads(proj("wv", h)), mask)
    att = nm.transpose(att, (0, 2, 1, 3)).reshape(b, t, w)
    x = x + proj("wo", att)
    h2 = nm.layer_norm(x, store[prefix + "/ln2_g"], store[prefix + "/ln2_b"])
    h2 = nm.gelu(h2 @ store[prefix + "/fc1/w"] + store[prefix + "/fc1/b"])
    return x + (h2 @ store[prefix + "/fc2/w"] + store[prefix + "/fc2/b"])


def build_model_params(cfg: ModelConfig, rng: np.random.Generator,
                       store: ParameterStore | None = None) -> ParameterStore:
    store = store if store is not None else ParameterStore()
    store.add("model/text_embed",
              (rng.normal(size=(cfg.text_vocab, cfg.hidden)) * 0.02).astype(np.float32))
    store.add("model/pos",
              (rng.normal(size=(cfg.context_len, cfg.hidden)) * 0.01).astype(np.float32))
    for i in range(cfg.layers):
        add_block_params(store, f"model/trunk/{i}", cfg.hidden, cfg.mlp_ratio, rng)
    store.add("model/final_ln_g", np.ones(cfg.hidden, dtype=np.float32))
    store.add("model/final_ln_b", np.zeros(cfg.hidden, dtype=np.float32))
    _linear(store, "model/text_head", cfg.hidden, cfg.text_vocab, rng, std=0.02)
    _linear(store, "model/image_head", cfg.hidden, cfg.image_vocab, rng, std=0.02)

    if cfg.understanding_pathway == "encoder":
        patch_in = cfg.und_patch * cfg.und_patch * 3
        _linear(store, "model/und_enc/patch", patch_in, cfg.und_width, rng)
        store.add("model/und_enc/pos",
                  (rng.normal(size=(cfg.und_tokens, cfg.und_width)) * 0.01).astype(np.float32))
        for i in range(cfg.und_depth):
            add_block_params(store, f"model/und_enc/block{i}", cfg.und_width,
                             cfg.mlp_ratio, rng)
        store.add("model/und_enc/final_ln_g", np.ones(cfg.und_width, dtype=np.float32))
        store.add("model/und_enc/final_ln_b", np.zeros(cfg.und_width, dtype=np.float32))

    und_in = cfg.und_adaptor_in()
    if und_in is not None:
        _linear(store, "model/und_adaptor/fc1", und_in, cfg.adaptor_hidden, rng)
        _linear(store, "model/und_adaptor/fc2", cfg.adaptor_hidden, cfg.hidden, rng)
    _linear(store, "model/gen_adaptor/fc1", cfg.code_dim, cfg.adaptor_hidden, rng)
    _linear(store, "model/gen_adaptor/fc2", cfg.adaptor_hidden, cfg.hidden, rng)
    return store


# -- pathway ops ------------------------------------------------------------------

def embed_text(store: ParameterStore, ids) -> Tensor:
    return nm.gather_rows(store["model/text_embed"], np.asarray(ids))


def _mlp2(store, prefix, x: Tensor) -> Tensor:
    h = nm.gelu(x @ store[prefix + "/fc1/w"] + store[prefix + "/fc1/b"])
    return h @ store[prefix + "/fc2/w"] + store[prefix + "/fc2/b"]


def encode_understanding(store: ParameterStore, cfg: ModelConfig,
                         images: np.ndarray) -> Tensor:
    """Bidirectional patch encoder: images [B,S,S,3] -> features [B,n,W]."""
    imgs = np.asarray(images, dtype=np.float32)
    single = imgs.ndim == 3
    if single:
        imgs = imgs[None]
    b, s1, s2, c = imgs.shape
    if s1 != cfg.image_side or s2 != cfg.image_side or c != 3:
        raise SequenceError(
            f"expected [{cfg.image_side},{cfg.image_side},3] images, got {imgs.shape[1:]}")
    p = cfg.und_patch
    g = s1 // p
    x = imgs.reshape(b, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(b, g * g, p * p * 3)
    h = Tensor(x) @ store["model/und_enc/patch/w"] + store["model/und_enc/patch/b"]
    h = h + store["model/und_enc/pos"]
    for i in range(cfg.und_depth):
        h = block_forward(store, f"model/und_enc/block{i}", h, cfg.und_heads, None)
    h = nm.layer_norm(h, store["model/und_enc/final_ln_g"], store["model/und_enc/final_ln_b"])
    return h.reshape(g * g, cfg.und_width) if single else h


def adapt_understanding(store: ParameterStore, features: Tensor) -> Tensor:
    shape = features.shape
    flat = features.reshape(-1, shape[-1]) if features.ndim > 2 else features
    out = _mlp2(store, "model/und_adaptor", flat)
    if features.ndim > 2:
        out = out.reshape(*shape[:-1], out.shape[-1])
    return out


def adapt_generation(store: ParameterStore, ids, codebook: Tensor) -> Tensor:
    """Code ids -> codebook rows -> two-layer adaptor -> trunk input space."""
    rows = nm.gather_rows(codebook, np.asarray(ids))
    shape = rows.shape
    flat = rows.reshape(-1, shape[-1]) if rows.ndim > 2 else rows
    out = _mlp2(store, "model/gen_adaptor", flat)
    if rows.ndim > 2:
        out = out.reshape(*shape[:-1], out.shape[-1])
    return out


def text_logits(store: ParameterStore, hidden: Tensor) -> Tensor:
    return hidden @ store["model/text_head/w"] + store["model/text_head/b"]


def image_logits(store: ParameterStore, hidden: Tensor) -> Tensor:
    return hidden @ store["model/image_head/w"] + store["model/image_head/b"]


# -- unified sequences ---------------------------------------------------------

KIND_TEXT, KIND_IMAGE, KIND_INJECT = 0, 1, 2
MOD_NONE, MOD_TEXT, MOD_IMAGE = 0, 1, 2


@dataclass
class UnifiedSequence:
    """One task instance laid out slot by slot.

    ``targets[p]`` >= 0 marks a loss position: the model predicts it from
    hidden state p-1 with the head named by ``target_modality[p]``.  Injected
    feature slots carry their payload in ``inject``: ("image", [S,S,3]) for
    the encoder pathway or ("sem_ids", [n]) for the semantic-decoder pathway;
    the vq_ids pathway stores plain image-token slots instead.
    """
    task: str
    kinds: np.ndarray
    ids: np.ndarray
    targets: np.ndarray
    target_modality: np.ndarray
    inject: tuple | None = None
    provenance: tuple = ()

    def __len__(self):
        return len(self.kinds)

    def n_loss(self) -> int:
        return int((self.targets >= 0).sum())

    def validate(self, cfg: ModelConfig):
        n = len(self)
        if n > cfg.context_len:
            raise SequenceError(f"sequence length {n} exceeds context {cfg.context_len}")
        if self.n_loss() < 1:
            raise SequenceError("sequence has no loss positions")
        if self.targets[0] >= 0:
            raise SequenceError("first slot cannot carry a loss target")
        # image-token / injected runs must be contiguous and delimited
        inside = False
        for i in range(n):
            visual = self.kinds[i] != KIND_TEXT
            if visual and not inside:
                if i == 0 or self.ids[i - 1] != cp.BOI:
                    raise SequenceError("visual run must open right after a begin-of-image marker")
                inside = True
            elif not visual and inside:
                if self.ids[i] != cp.EOI:
                    raise SequenceError("visual run must close with an end-of-image marker")
                inside = False
        if inside:
            raise SequenceError("unterminated visual run")
        # task/modality contract
        mods = set(self.target_modality[self.targets >= 0].tolist())
        if self.task == "gen":
            if not mods <= {MOD_IMAGE, MOD_TEXT}:
                raise SequenceError("generation loss must target image ids (+ closing marker)")
            text_pos = np.nonzero((self.targets >= 0) & (self.target_modality == MOD_TEXT))[0]
            if len(text_pos) != 1 or self.targets[text_pos[0]] != cp.EOI:
                raise SequenceError("generation's only text target is the closing marker")
        elif mods != {MOD_TEXT}:
            raise SequenceError(f"{self.task} loss must target text ids only")


def _seq(task, slots, inject=None, provenance=()):
    kinds = np.array([s[0] for s in slots], dtype=np.int8)
    ids = np.array([s[1] for s in slots], dtype=np.int64)
    targets = np.array([s[2] for s in slots], dtype=np.int64)
    mods = np.array([s[3] for s in slots], dtype=np.int8)
    return UnifiedSequence(task=task, kinds=kinds, ids=ids, targets=targets,
                           target_modality=mods, inject=inject, provenance=provenance)


def _text_slot(tid, target=False):
    return (KIND_TEXT, tid, tid if target else -1, MOD_TEXT if target else MOD_NONE)


def _visual_slots(cfg: ModelConfig, parts: dict):
    """Slots for one image span under the configured understanding pathway."""
    if cfg.understanding_pathway == "vq_ids":
        ids = parts.get("image_ids")
        if ids is None:
            raise SequenceError("vq_ids pathway needs precomputed image token ids")
        return [(KIND_IMAGE, int(i), -1, MOD_NONE) for i in ids]
    if cfg.understanding_pathway == "semantic":
        ids = parts.get("image_ids")
        if ids is None:
            raise SequenceError("semantic pathway needs precomputed image token ids")
        n = len(ids)
    else:
        n = cfg.und_tokens
    return [(KIND_INJECT, -1, -1, MOD_NONE)] * n


def assemble_sequence(task: str, parts: dict, cfg: ModelConfig,
                      vocab: cp.TextVocab, provenance=()) -> UnifiedSequence:
    """Build the slot layout for one training/eval example.

    parts by task:
      text: {text}
      gen:  {caption, image_ids}
      und:  {question, answer, image or features or image_ids}
      sft:  {turns: [{q, a}...], image/features/image_ids (optional, first turn)}
    """
    if task == "text":
        toks = vocab.tokenize(parts["text"])
        if not toks:
            raise SequenceError("empty text record")
        slots = [_text_slot(cp.BOS)] + [_text_slot(t, target=True) for t in toks]
        slots.append(_text_slot(cp.EOS, target=True))
        seq = _seq("text", slots, provenance=provenance)

    elif task == "gen":
        cap = vocab.tokenize(parts["caption"])
        ids = np.asarray(parts["image_ids"])
        if ids.ndim != 1 or len(ids) == 0:
            raise SequenceError("generation needs a flat nonempty image id list")
        slots = [_text_slot(t) for t in cap]
        slots.append(_text_slot(cp.BOI))
        slots += [(KIND_IMAGE, int(i), int(i), MOD_IMAGE) for i in ids]
        slots.append(_text_slot(cp.EOI, target=True))
        seq = _seq("gen", slots, provenance=provenance)

    elif task == "und":
        q = vocab.tokenize(parts["question"])
        a = vocab.tokenize(parts["answer"])
        if not a:
            raise SequenceError("empty answer")
        vis = _visual_slots(cfg, parts)
        slots = [_text_slot(cp.BOI)] + vis + [_text_slot(cp.EOI)]
        slots += [_text_slot(t) for t in q]
        slots += [_text_slot(t, target=True) for t in a]
        slots.append(_text_slot(cp.EOS, target=True))
        seq = _seq("und", slots, inject=_inject_payload(cfg, parts), provenance=provenance)

    elif task == "sft":
        slots = []
        has_image = any(k in parts for k in ("image", "features", "image_ids"))
        for turn_i, turn in enumerate(parts["turns"]):
            q = vocab.tokenize(turn["q"])
            a = vocab.tokenize(turn["a"])
            if not a:
                raise SequenceError("empty answer")
            slots.append(_text_slot(cp.USER))
            if turn_i == 0 and has_image:
                slots.append(_text_slot(cp.BOI))
                slots += _visual_slots(cfg, parts)
                slots.append(_text_slot(cp.EOI))
            slots += [_text_slot(t) for t in q]
            slots.append(_text_slot(cp.NEWLINE))
            slots.append(_text_slot(cp.ASSISTANT))
            slots += [_text_slot(t, target=True) for t in a]
            slots.append(_text_slot(cp.EOS, target=True))
        inject = _inject_payload(cfg, parts) if has_image else None
        seq = _seq("sft", slots, inject=inject, provenance=provenance)

    else:
        raise SequenceError(f"unknown task '{task}'")

    seq.validate(cfg)
    return seq


def _inject_payload(cfg: ModelConfig, parts: dict):
    if cfg.understanding_pathway == "encoder":
        img = parts.get("image")
        if img is None:
            raise SequenceError("encoder pathway needs the raw image")
        return ("image", np.asarray(img, dtype=np.float32))
    if cfg.understanding_pathway == "semantic":
        # carry the code ids; the semantic decoder runs inside the forward pass
        return ("sem_ids", np.asarray(parts["image_ids"], dtype=np.int64))
    return None  # vq_ids: plain token slots, nothing to inject


# -- batched trunk forward --------------------------------------------------------

def make_attention_mask(segment_ids: np.ndarray) -> np.ndarray:
    """Block-diagonal causal additive mask from per-position segment ids [B,T]."""
    b, t = segment_ids.shape
    same = segment_ids[:, :, None] == segment_ids[:, None, :]
    causal = np.tril(np.ones((t, t), dtype=bool))
    allowed = same & causal
    mask = np.where(allowed, np.float32(0.0), NEG_MASK)
    return mask[:, None, :, :]


def forward_windows(store: ParameterStore, cfg: ModelConfig, windows,
                    codebook: Tensor | None = None,
                    semantic_decoder=None) -> Tensor:
    """Run the trunk over packed windows; returns hidden states [B, T, hidden].

    ``windows`` is an object with arrays kinds/ids/segments/positions [B,T]
    and a list ``injections`` of (window, start, payload) for injected spans;
    payloads are ("image", [S,S,3]) or ("sem_ids", [n]) and
    ``semantic_decoder(ids [B,n]) -> Tensor [B,n,dim]`` handles the latter.
    Position indices restart at 0 inside every segment; padding slots carry
    PAD text ids in their own segments.
    """
    kinds = windows.kinds
    b, t = kinds.shape
    if t > cfg.context_len:
        raise SequenceError(f"window length {t} exceeds context {cfg.context_len}")
    flat_kinds = kinds.reshape(-1)
    flat_ids = windows.ids.reshape(-1)
    n_flat = b * t

    parts = []
    text_pos = np.nonzero(flat_kinds == KIND_TEXT)[0]
    if len(text_pos):
        emb = embed_text(store, flat_ids[text_pos])
        parts.append(nm.scatter_rows(n_flat, text_pos, emb))
    img_pos = np.nonzero(flat_kinds == KIND_IMAGE)[0]
    if len(img_pos):
        if codebook is None:
            raise SequenceError("image-token slots present but no codebook given")
        emb = adapt_generation(store, flat_ids[img_pos], codebook)
        parts.append(nm.scatter_rows(n_flat, img_pos, emb))

    inj = getattr(windows, "injections", [])
    if inj:
        image_payloads = [(w, s, p[1]) for (w, s, p) in inj if p[0] == "image"]
        sem_payloads = [(w, s, p[1]) for (w, s, p) in inj if p[0] == "sem_ids"]
        if image_payloads:
            stack = np.stack([img for _, _, img in image_payloads])
            feats = encode_understanding(store, cfg, stack)
            rows = adapt_understanding(store, feats)
            n = cfg.und_tokens
            pos = np.concatenate([w * t + s + np.arange(n)
                                  for w, s, _ in image_payloads])
            parts.append(nm.scatter_rows(n_flat, pos, rows.reshape(-1, cfg.hidden)))
        if sem_payloads:
            if semantic_decoder is None:
                raise SequenceError("semantic injections present but no semantic decoder given")
            stack = np.stack([ids for _, _, ids in sem_payloads])
            feats = semantic_decoder(stack)
            rows = adapt_understanding(store, feats)
            n = stack.shape[1]
            pos = np.concatenate([w * t + s + np.arange(n)
                                  for w, s, _ in sem_payloads])
            parts.append(nm.scatter_rows(n_flat, pos, rows.reshape(-1, cfg.hidden)))

    x = parts[0]
    for extra in parts[1:]:
        x = x + extra
    pos_emb = nm.gather_rows(store["model/pos"], windows.positions.reshape(-1))
    x = (x + pos_emb).reshape(b, t, cfg.hidden)

    mask = make_attention_mask(windows.segments)
    for i in range(cfg.layers):
        x = block_forward(store, f"model/trunk/{i}", x, cfg.heads, mask)
    return nm.layer_norm(x, store["model/final_ln_g"], store["model/final_ln_b"])
