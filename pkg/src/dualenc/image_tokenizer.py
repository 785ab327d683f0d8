"""Discrete image tokenizer: convolutional VQ autoencoder over 16x16 scenes.

A small strided conv encoder maps an image to a 4x4 grid of continuous
latents, each latent snaps to its nearest codebook row (straight-through
estimator for the encoder gradient, codebook/commitment terms for the
embedding table), and a transposed-conv decoder reconstructs pixels from the
quantized grid.

The ``semantic`` variant adds a second, causal decoder head over the code
grid in raster order: position i sees codes 0..i only and is trained to
regress a teacher network's per-position features via a cosine loss.  That
head lets the same discrete ids double as inputs for understanding without
running a separate continuous encoder at inference time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ParameterStore, Tensor
from .model import add_block_params, block_forward

COMMITMENT_WEIGHT = 0.25
DISTILL_WEIGHT = 0.25
COLLAPSE_ENTROPY = math.log(2.0)  # warn when batch code usage drops this low
REVIVE_EVERY = 25                 # steps between dead-code sweeps

MODES = ("vq_only", "semantic")


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerConfig:
    image_side: int = 16
    downsample_factor: int = 4
    codebook_size: int = 128
    code_dim: int = 16
    channels: tuple = (32, 64)
    sem_depth: int = 2
    sem_heads: int = 2
    sem_hidden: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.downsample_factor != 2 ** len(self.channels):
            raise ValueError("downsample factor must be 2 per strided conv stage")
        if self.image_side % self.downsample_factor:
            raise ValueError("image side must be divisible by the downsample factor")
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least two entries")
        if self.sem_hidden % self.sem_heads:
            raise ValueError("semantic width must divide evenly across its heads")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.downsample_factor

    @property
    def tokens_per_image(self) -> int:
        return self.grid_side ** 2


# -- parameters ------------------------------------------------------------------

def _conv_init(rng, kh, kw, cin, cout):
    std = 1.0 / np.sqrt(kh * kw * cin)
    return (rng.normal(size=(kh, kw, cin, cout)) * std).astype(np.float32)


def build_tokenizer_params(cfg: TokenizerConfig, rng: np.random.Generator,
                           mode: str = "semantic",
                           store: ParameterStore | None = None) -> ParameterStore:
    if mode not in MODES:
        raise TokenizerError(f"unknown tokenizer mode '{mode}'")
    store = store if store is not None else ParameterStore()
    c1, c2 = cfg.channels
    d = cfg.code_dim

    # Non-overlapping kernels: every latent sees exactly its own
    # (downsample x downsample) patch, so code ids are context-free.
    store.add("tokenizer/enc/conv1/w", _conv_init(rng, 2, 2, 3, c1))
    store.add("tokenizer/enc/conv1/b", np.zeros(c1, dtype=np.float32))
    store.add("tokenizer/enc/conv2/w", _conv_init(rng, 2, 2, c1, c2))
    store.add("tokenizer/enc/conv2/b", np.zeros(c2, dtype=np.float32))
    store.add("tokenizer/enc/conv3/w", _conv_init(rng, 1, 1, c2, d))
    store.add("tokenizer/enc/conv3/b", np.zeros(d, dtype=np.float32))

    k = cfg.codebook_size
    store.add("tokenizer/codebook",
              rng.uniform(-1.0 / k, 1.0 / k, size=(k, d)).astype(np.float32))

    store.add("tokenizer/dec/conv1/w", _conv_init(rng, 1, 1, d, c2))
    store.add("tokenizer/dec/conv1/b", np.zeros(c2, dtype=np.float32))
    store.add("tokenizer/dec/up1/w", _conv_init(rng, 2, 2, c2, c1))
    store.add("tokenizer/dec/up1/b", np.zeros(c1, dtype=np.float32))
    store.add("tokenizer/dec/up2/w", _conv_init(rng, 2, 2, c1, c1))
    store.add("tokenizer/dec/up2/b", np.zeros(c1, dtype=np.float32))
    store.add("tokenizer/dec/conv2/w", _conv_init(rng, 1, 1, c1, 3))
    store.add("tokenizer/dec/conv2/b", np.zeros(3, dtype=np.float32))

    if mode == "semantic":
        w = cfg.sem_hidden
        store.add("tokenizer/sem/proj/w",
                  (rng.normal(size=(d, w)) / np.sqrt(d)).astype(np.float32))
        store.add("tokenizer/sem/proj/b", np.zeros(w, dtype=np.float32))
        store.add("tokenizer/sem/pos",
                  (rng.normal(size=(cfg.tokens_per_image, w)) * 0.01).astype(np.float32))
        for i in range(cfg.sem_depth):
            add_block_params(store, f"tokenizer/sem/block{i}", w, cfg.mlp_ratio, rng)
        store.add("tokenizer/sem/final_ln_g", np.ones(w, dtype=np.float32))
        store.add("tokenizer/sem/final_ln_b", np.zeros(w, dtype=np.float32))
    return store


class Tokenizer:
    """Bundles config, parameters, and code-usage counters."""

    def __init__(self, cfg: TokenizerConfig, store: ParameterStore, mode: str = "semantic"):
        if mode not in MODES:
            raise TokenizerError(f"unknown tokenizer mode '{mode}'")
        if mode == "semantic" and "tokenizer/sem/proj/w" not in store:
            raise TokenizerError("semantic mode requires semantic decoder parameters")
        self.cfg = cfg
        self.store = store
        self.mode = mode
        self.usage = np.zeros(cfg.codebook_size, dtype=np.int64)

    # -- encoder ---------------------------------------------------------

    def encode(self, images) -> Tensor:
        """Images [B,S,S,3] (or a single [S,S,3]) -> latents [B,g,g,D]."""
        imgs = np.asarray(images, dtype=np.float32)
        single = imgs.ndim == 3
        if single:
            imgs = imgs[None]
        s = self.cfg.image_side
        if imgs.shape[1:] != (s, s, 3):
            raise TokenizerError(f"expected [{s},{s},3] images, got {imgs.shape[1:]}")
        st = self.store
        h = nm.gelu(nm.conv2d(Tensor(imgs), st["tokenizer/enc/conv1/w"],
                              st["tokenizer/enc/conv1/b"], stride=2, padding=0))
        h = nm.gelu(nm.conv2d(h, st["tokenizer/enc/conv2/w"],
                              st["tokenizer/enc/conv2/b"], stride=2, padding=0))
        z = nm.conv2d(h, st["tokenizer/enc/conv3/w"],
                      st["tokenizer/enc/conv3/b"], stride=1, padding=0)
        return z.reshape(*z.shape[1:]) if single else z

    # -- quantization ------------------------------------------------------

    def quantize(self, latents: Tensor):
        """Snap latents [B,g,g,D] to nearest codes.

        Returns (ids [B, g*g], straight-through quantized latents, vq loss).
        Ties in the distance argmin resolve to the lowest code id.  The
        straight-through output equals the code rows in value but routes its
        gradient entirely to the encoder latents; the loss term trains the
        codebook toward the (frozen) latents plus a weighted commitment pull
        of the latents toward their codes.
        """
        single = latents.ndim == 3
        if single:
            latents = latents.reshape(1, *latents.shape)
        b, g1, g2, d = latents.shape
        cb = self.store["tokenizer/codebook"]
        k = cb.shape[0]
        flat = latents.data.reshape(-1, d)
        d2 = np.sum(flat * flat, axis=1, keepdims=True) \
            - 2.0 * flat @ cb.data.T + np.sum(cb.data * cb.data, axis=1)
        ids = np.argmin(d2, axis=1).astype(np.int64)  # argmin takes the lowest index on ties
        self.usage += np.bincount(ids, minlength=k)

        rows = nm.gather_rows(cb, ids)
        codes = rows.reshape(b, g1, g2, d)
        quantized = nm.straight_through(latents, codes)
        codebook_term = nm.mean((nm.stop_gradient(latents) - codes) ** 2.0)
        commit_term = nm.mean((latents - nm.stop_gradient(codes)) ** 2.0)
        vq_loss = codebook_term + COMMITMENT_WEIGHT * commit_term

        ids = ids.reshape(b, g1 * g2)
        if single:
            return ids[0], quantized.reshape(g1, g2, d), vq_loss
        return ids, quantized, vq_loss

    def encode_ids(self, images) -> np.ndarray:
        """Images -> code ids [B, g*g] (or [g*g]); no gradients, no usage count."""
        with nm.no_grad():
            z = self.encode(images)
            single = z.ndim == 3
            flat = z.data.reshape(-1, self.cfg.code_dim)
            cb = self.store["tokenizer/codebook"].data
            d2 = np.sum(flat * flat, axis=1, keepdims=True) \
                - 2.0 * flat @ cb.T + np.sum(cb * cb, axis=1)
            ids = np.argmin(d2, axis=1).astype(np.int64)
        n = self.cfg.tokens_per_image
        return ids if single else ids.reshape(-1, n)

    def lookup(self, ids) -> Tensor:
        """Code ids -> codebook rows, shaped [..., g, g, D] for the decoder."""
        ids = np.asarray(ids)
        g = self.cfg.grid_side
        if ids.ndim == 1:
            if len(ids) != g * g:
                raise TokenizerError(f"expected {g * g} ids per image, got {len(ids)}")
            rows = nm.gather_rows(self.store["tokenizer/codebook"], ids)
            return rows.reshape(g, g, self.cfg.code_dim)
        rows = nm.gather_rows(self.store["tokenizer/codebook"], ids.reshape(-1))
        return rows.reshape(ids.shape[0], g, g, self.cfg.code_dim)

    # -- decoders ----------------------------------------------------------

    def decode_pixels(self, quantized) -> Tensor:
        """Quantized latents [B,g,g,D] (or ids) -> images [B,S,S,3] in [0,1]."""
        if not isinstance(quantized, Tensor):
            quantized = self.lookup(quantized)
        single = quantized.ndim == 3
        if single:
            quantized = quantized.reshape(1, *quantized.shape)
        st = self.store
        h = nm.gelu(nm.conv2d(quantized, st["tokenizer/dec/conv1/w"],
                              st["tokenizer/dec/conv1/b"], stride=1, padding=0))
        h = nm.gelu(nm.conv_transpose2d(h, st["tokenizer/dec/up1/w"],
                                        st["tokenizer/dec/up1/b"], stride=2, padding=0))
        h = nm.gelu(nm.conv_transpose2d(h, st["tokenizer/dec/up2/w"],
                                        st["tokenizer/dec/up2/b"], stride=2, padding=0))
        out = nm.conv2d(h, st["tokenizer/dec/conv2/w"],
                        st["tokenizer/dec/conv2/b"], stride=1, padding=0)
        out = nm.clamp(out, 0.0, 1.0)
        return out.reshape(*out.shape[1:]) if single else out

    def decode_semantic(self, quantized) -> Tensor:
        """Quantized latents (or ids) -> causal features [B, g*g, sem_hidden].

        Raster order: output position i depends only on code positions <= i.
        """
        if self.mode != "semantic":
            raise TokenizerError("semantic decoding requires mode='semantic'")
        if not isinstance(quantized, Tensor):
            quantized = self.lookup(quantized)
        single = quantized.ndim == 3
        if single:
            quantized = quantized.reshape(1, *quantized.shape)
        b = quantized.shape[0]
        n = self.cfg.tokens_per_image
        st = self.store
        x = quantized.reshape(b, n, self.cfg.code_dim)
        h = x @ st["tokenizer/sem/proj/w"] + st["tokenizer/sem/proj/b"]
        h = h + st["tokenizer/sem/pos"]
        mask = np.where(np.tril(np.ones((n, n), dtype=bool)),
                        np.float32(0.0), np.float32(-1e9))[None, None]
        for i in range(self.cfg.sem_depth):
            h = block_forward(st, f"tokenizer/sem/block{i}", h, self.cfg.sem_heads, mask)
        h = nm.layer_norm(h, st["tokenizer/sem/final_ln_g"], st["tokenizer/sem/final_ln_b"])
        return h.reshape(n, self.cfg.sem_hidden) if single else h

    # -- usage bookkeeping --------------------------------------------------

    def reset_usage(self):
        self.usage[:] = 0

    def usage_entropy(self) -> float:
        return usage_entropy(self.usage)


def usage_entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def semantic_distill_loss(pred: Tensor, teacher: np.ndarray) -> Tensor:
    """Weighted mean cosine mismatch between predicted and teacher rows.

    loss = 0.25 * mean_i (1 - cos(pred_i, teacher_i)), where a zero teacher
    row contributes cos = 0.  The teacher is a constant; no gradient flows
    into it.
    """
    teacher = np.asarray(teacher, dtype=pred.data.dtype)
    if pred.shape != teacher.shape:
        raise TokenizerError(
            f"prediction shape {pred.shape} does not match teacher shape {teacher.shape}")
    flat = pred.reshape(-1, pred.shape[-1]) if pred.ndim > 2 else pred
    t = teacher.reshape(flat.shape)
    norms = np.linalg.norm(t, axis=1, keepdims=True)
    t_unit = np.divide(t, norms, out=np.zeros_like(t), where=norms > 0)
    dots = nm.sum_(flat * t_unit, axis=1)
    pred_norm = nm.sqrt(nm.sum_(flat * flat, axis=1) + 1e-24)
    cos = dots / pred_norm
    return DISTILL_WEIGHT * nm.mean(1.0 - cos)


def mean_cosine(pred: np.ndarray, teacher: np.ndarray) -> float:
    """Plain-numpy evaluation twin of the distill loss's cosine term."""
    p = pred.reshape(-1, pred.shape[-1]).astype(np.float64)
    t = teacher.reshape(-1, teacher.shape[-1]).astype(np.float64)
    pn = np.linalg.norm(p, axis=1)
    tn = np.linalg.norm(t, axis=1)
    denom = np.maximum(pn * tn, 1e-24)
    cos = np.where((pn > 0) & (tn > 0), (p * t).sum(axis=1) / denom, 0.0)
    return float(cos.mean())


# -- training --------------------------------------------------------------------

def train_tokenizer(images_stage1: np.ndarray, images_stage2: np.ndarray,
                    cfg: TokenizerConfig, mode: str = "vq_only", seed: int = 0,
                    steps: tuple = (150, 350), batch_size: int = 32,
                    lr: float = 1e-3, teacher_fn=None, store=None):
    """Two-phase tokenizer training: simple images first, then the full set.

    Each step minimizes reconstruction MSE + VQ loss (+ the semantic distill
    term when mode='semantic'; ``teacher_fn(images) -> [B, n, dim]`` supplies
    regression targets).  Returns (Tokenizer, log rows).
    """
    if mode == "semantic" and teacher_fn is None:
        raise TokenizerError("semantic training needs a teacher_fn")
    rng = np.random.default_rng(seed)
    if store is None:
        store = build_tokenizer_params(cfg, rng, mode=mode)
    tok = Tokenizer(cfg, store, mode=mode)
    opt = nm.OptimizerState.fresh(store)
    log = []
    step = 0
    # dead-code sweeps stop before the end so freshly seeded rows settle
    revive_until = int(0.8 * (steps[0] + steps[1]))
    window_usage = np.zeros(cfg.codebook_size, dtype=np.int64)
    for phase, (images, n_steps) in enumerate(
            ((images_stage1, steps[0]), (images_stage2, steps[1]))):
        if n_steps == 0:
            continue
        if len(images) == 0:
            raise TokenizerError(f"phase {phase} has no training images")
        order = rng.permutation(len(images))
        cursor = 0
        for _ in range(n_steps):
            if cursor + batch_size > len(order):
                order = rng.permutation(len(images))
                cursor = 0
            batch = images[order[cursor:cursor + batch_size]]
            cursor += batch_size
            tok.reset_usage()

            z = tok.encode(batch)
            ids, quantized, vq_loss = tok.quantize(z)
            recon = tok.decode_pixels(quantized)
            recon_loss = nm.mean((recon - batch.astype(np.float32)) ** 2.0)
            loss = recon_loss + vq_loss
            sem_val = 0.0
            if mode == "semantic":
                feats = tok.decode_semantic(quantized)
                target = teacher_fn(batch)
                sem_loss = semantic_distill_loss(feats, target)
                loss = loss + sem_loss
                sem_val = float(sem_loss.data)
            store.zero_grad()
            loss.backward()
            grads = store.collect_grads()
            nm.adamw_step(store, grads, opt, lr=lr, weight_decay=0.0)

            window_usage += tok.usage
            revived = 0
            if (step + 1) % REVIVE_EVERY == 0 and step < revive_until:
                revived = _revive_dead_codes(tok, opt, window_usage,
                                             z.data, rng)
                window_usage[:] = 0
            entropy = tok.usage_entropy()
            log.append({"step": step, "phase": phase, "recon": float(recon_loss.data),
                        "vq": float(vq_loss.data), "semantic": sem_val,
                        "usage_entropy": entropy, "revived": revived,
                        "collapse_warning": bool(entropy < COLLAPSE_ENTROPY)})
            step += 1
    tok.reset_usage()
    return tok, log


def _revive_dead_codes(tok: Tokenizer, opt, window_usage: np.ndarray,
                       latents: np.ndarray, rng: np.random.Generator) -> int:
    """Re-seed codes unused over the sweep window from current encoder latents.

    Replaced rows restart with zeroed optimizer moments so stale momentum
    cannot immediately drag them away from the data again.
    """
    dead = np.nonzero(window_usage == 0)[0]
    if len(dead) == 0:
        return 0
    cb = tok.store["tokenizer/codebook"]
    flat = latents.reshape(-1, tok.cfg.code_dim)
    picks = rng.integers(0, len(flat), size=len(dead))
    noise = rng.normal(scale=0.01, size=(len(dead), tok.cfg.code_dim))
    cb.data[dead] = flat[picks] + noise.astype(cb.data.dtype)
    path = "tokenizer/codebook"
    if path in opt.m:
        opt.m[path][dead] = 0.0
        opt.v[path][dead] = 0.0
    return int(len(dead))
