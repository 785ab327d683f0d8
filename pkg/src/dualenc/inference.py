"""Sampling-time entry points: classifier-free guided image generation and
greedy/stochastic question answering over a trained model.

Image generation keeps two sequences in lockstep: the conditional one starts
from the caption, the unconditional one from a pad-token prefix of the same
length (the exact construction condition dropout uses during training).  At
every step the image-head logits of both branches are combined as
``l_u + s * (l_c - l_u)`` and a single id is sampled and appended to both.
"""

from dataclasses import dataclass

import numpy as np

from . import corpus as cp
from . import model as md
from . import numerics as nm
from . import training as tr


class InferenceError(RuntimeError):
    pass


# Temperatures at or below this behave as exact argmax (lowest index on ties).
GREEDY_TEMPERATURE = 1e-9
_ARGMAX_CUTOFF = 1e-8


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    top_k: int | None = None
    cfg_scale: float = 5.0
    max_new_tokens: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise InferenceError("temperature must be positive")
        if self.top_k is not None and self.top_k < 1:
            raise InferenceError("top_k must be a positive integer")
        if self.cfg_scale < 0:
            raise InferenceError("cfg scale must be non-negative")
        if self.max_new_tokens < 1:
            raise InferenceError("max_new_tokens must be positive")


def greedy_config(**kw) -> SamplerConfig:
    kw.setdefault("temperature", GREEDY_TEMPERATURE)
    return SamplerConfig(**kw)


def cfg_logits(cond, uncond, scale: float) -> np.ndarray:
    """Guided logits ``l_u + scale * (l_c - l_u)`` in float64.

    The scale 0 and 1 endpoints return the unconditional/conditional logits
    exactly rather than through the subtraction, so the limit identities hold
    bit-for-bit.
    """
    cond = np.asarray(cond, dtype=np.float64)
    uncond = np.asarray(uncond, dtype=np.float64)
    if cond.shape != uncond.shape:
        raise InferenceError(
            f"conditional/unconditional logits differ in shape: {cond.shape} vs {uncond.shape}")
    if scale < 0:
        raise InferenceError("cfg scale must be non-negative")
    if scale == 0.0:
        return uncond.copy()
    if scale == 1.0:
        return cond.copy()
    return uncond + scale * (cond - uncond)


def sample_token(logits, config: SamplerConfig, rng: np.random.Generator) -> int:
    """One categorical draw from temperature-scaled, optionally top-k, logits."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if logits.size == 0:
        raise InferenceError("empty logits")
    if not np.all(np.isfinite(logits)):
        raise InferenceError("non-finite logits")
    if config.temperature <= _ARGMAX_CUTOFF:
        return int(np.argmax(logits))
    keep = None
    if config.top_k is not None and config.top_k < logits.size:
        keep = np.argsort(-logits, kind="stable")[:config.top_k]
    z = logits / config.temperature
    z = z - z.max()
    p = np.exp(z)
    if keep is not None:
        mask = np.zeros_like(p)
        mask[keep] = p[keep]
        p = mask
    p = p / p.sum()
    cum = np.cumsum(p)
    idx = int(np.searchsorted(cum, rng.random(), side="right"))
    return min(idx, logits.size - 1)


# -- shared plumbing ---------------------------------------------------------------


def forward_kwargs(store, mcfg: md.ModelConfig, tokenizer) -> dict:
    kwargs = {}
    if "tokenizer/codebook" in store:
        kwargs["codebook"] = store["tokenizer/codebook"]
    if mcfg.understanding_pathway == "semantic":
        kwargs["semantic_decoder"] = tokenizer.decode_semantic
    return kwargs


def _window_batch(kinds, ids, injections):
    n = ids.shape[1]
    shape = ids.shape
    return tr.PackedBatch(
        kinds=kinds, ids=ids,
        segments=np.zeros(shape, dtype=np.int64),
        positions=np.broadcast_to(np.arange(n), shape),
        targets=np.full(shape, -1, dtype=np.int64),
        target_modality=np.zeros(shape, dtype=np.int8),
        tasks=np.full(shape, -1, dtype=np.int8),
        injections=injections, provenance=[])


def _last_hidden(store, mcfg, kinds, ids, injections, fw) -> np.ndarray:
    """Hidden state at the final position of every window, as [B, hidden]."""
    batch = _window_batch(kinds, ids, injections)
    hidden = md.forward_windows(store, mcfg, batch, **fw)
    b, t, h = hidden.shape
    rows = nm.gather_rows(hidden.reshape(b * t, h),
                          np.arange(b) * t + (t - 1))
    return rows


# -- image generation --------------------------------------------------------------


def generate_image(store, mcfg: md.ModelConfig, tokenizer, vocab, caption: str,
                   config: SamplerConfig | None = None,
                   rng: np.random.Generator | None = None):
    """CFG-guided sampling of one image; returns (ids [g*g], image [S,S,3])."""
    config = config if config is not None else SamplerConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    cap_ids = vocab.tokenize(caption)
    n_codes = tokenizer.cfg.tokens_per_image
    prefix = len(cap_ids) + 1
    total = prefix + n_codes
    if total > mcfg.context_len:
        raise InferenceError(
            f"caption of {len(cap_ids)} tokens plus {n_codes} image tokens "
            f"exceeds context {mcfg.context_len}")

    ids = np.full((2, total), cp.PAD, dtype=np.int64)
    ids[0, :len(cap_ids)] = cap_ids
    ids[:, prefix - 1] = cp.BOI
    kinds = np.full((2, total), md.KIND_TEXT, dtype=np.int8)
    kinds[:, prefix:] = md.KIND_IMAGE
    fw = forward_kwargs(store, mcfg, tokenizer)
    # the scale 0 / 1 endpoints use only one branch; forwarding just that
    # window makes the limit identities exact rather than numerical
    if config.cfg_scale == 1.0:
        active = slice(0, 1)
    elif config.cfg_scale == 0.0:
        active = slice(1, 2)
    else:
        active = slice(0, 2)

    with nm.no_grad():
        for t in range(n_codes):
            cur = prefix + t
            rows = _last_hidden(store, mcfg, kinds[active, :cur], ids[active, :cur],
                                [], fw)
            logits = md.image_logits(store, rows).data
            if logits.shape[0] == 2:
                guided = cfg_logits(logits[0], logits[1], config.cfg_scale)
            else:
                guided = logits[0]
            code = sample_token(guided, config, rng)
            ids[:, cur] = code
        code_ids = ids[0, prefix:].copy()
        image = tokenizer.decode_pixels(code_ids).data
    return code_ids, image


# -- question answering ------------------------------------------------------------


def _understanding_prefix(mcfg, tokenizer, vocab, image, question: str):
    """Sequence prefix [BOI, visual, EOI, question] in the training layout."""
    parts = {"question": question, "answer": vocab.id_to_word[len(cp.SPECIALS)]}
    if mcfg.understanding_pathway == "encoder":
        parts["image"] = np.asarray(image, dtype=np.float32)
    else:
        parts["image_ids"] = tokenizer.encode_ids(image)
    seq = md.assemble_sequence("und", parts, mcfg, vocab)
    p0 = int(np.nonzero(seq.targets >= 0)[0][0])  # first answer slot
    return seq.ids[:p0].copy(), seq.kinds[:p0].copy(), seq.inject


def answer_question(store, mcfg: md.ModelConfig, tokenizer, vocab, image,
                    question: str, config: SamplerConfig | None = None,
                    rng: np.random.Generator | None = None):
    """Decode an answer; returns (text, truncated) where truncated means the
    token budget or the context ran out before EOS."""
    if not question.strip():
        raise InferenceError("empty question")
    config = config if config is not None else greedy_config()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    ids, kinds, inject = _understanding_prefix(mcfg, tokenizer, vocab, image, question)
    injections = [] if inject is None else [(0, int(np.nonzero(kinds == md.KIND_INJECT)[0][0]), inject)]
    fw = forward_kwargs(store, mcfg, tokenizer)

    out: list[int] = []
    truncated = True
    with nm.no_grad():
        for _ in range(config.max_new_tokens):
            if len(ids) >= mcfg.context_len:
                break
            rows = _last_hidden(store, mcfg, kinds[None, :], ids[None, :],
                                injections, fw)
            logits = md.text_logits(store, rows).data[0]
            token = sample_token(logits, config, rng)
            if token == cp.EOS:
                truncated = False
                break
            out.append(token)
            ids = np.append(ids, np.int64(token))
            kinds = np.append(kinds, np.int8(md.KIND_TEXT))
    return vocab.detokenize(out), truncated
