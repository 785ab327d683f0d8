"""Synthetic shapes-world corpus with an exact render/parse oracle.

Scenes are 2x2 grids of colored shapes (square or circle) on one of two
backgrounds.  Rendering is a pure function of the scene; ``parse_image``
inverts it exactly, so generated images can be scored without a learned
judge.  The module also owns the caption/QA grammar, the closed-vocabulary
word tokenizer, image preprocessing, and corpus serialization.

Geometry: each grid quadrant keeps a 1-pixel background gutter around a
filled inner block, so the background stays observable in every scene and
rendering is invertible over the whole scene space.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COLOR_NAMES = ("red", "green", "blue", "yellow", "cyan", "magenta")
COLOR_RGB = np.array([
    (200, 0, 0),
    (0, 200, 0),
    (0, 0, 200),
    (200, 200, 0),
    (0, 200, 200),
    (200, 0, 200),
], dtype=np.float64)

BACKGROUND_NAMES = ("dark", "light")
BACKGROUND_RGB = np.array([
    (64, 64, 64),
    (235, 235, 235),
], dtype=np.float64)

SHAPE_NAMES = ("square", "circle")
POSITION_NAMES = ("top left", "top right", "bottom left", "bottom right")
NUMBER_WORDS = ("zero", "one", "two", "three", "four")

GRID = 2
N_CELLS = GRID * GRID

_ALL_ENTRIES = np.concatenate([COLOR_RGB, BACKGROUND_RGB], axis=0)


def _min_palette_separation() -> float:
    n = len(_ALL_ENTRIES)
    best = np.inf
    for i in range(n):
        for j in range(i + 1, n):
            best = min(best, np.max(np.abs(_ALL_ENTRIES[i] - _ALL_ENTRIES[j])))
    return float(best)


MIN_SEPARATION = _min_palette_separation()
HALF_SEPARATION = MIN_SEPARATION / 2.0
assert MIN_SEPARATION >= 64.0, "palette entries must be separable"


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Scene:
    """cells: raster-ordered tuple of None or (color index, shape index)."""
    cells: tuple
    background: int = 0

    def __post_init__(self):
        if len(self.cells) != N_CELLS:
            raise SceneError(f"expected {N_CELLS} cells, got {len(self.cells)}")
        if all(c is None for c in self.cells):
            raise SceneError("scene must contain at least one object")
        for c in self.cells:
            if c is None:
                continue
            color, shape = c
            if not (0 <= color < len(COLOR_NAMES) and 0 <= shape < len(SHAPE_NAMES)):
                raise SceneError(f"cell out of range: {c}")
        if not 0 <= self.background < len(BACKGROUND_NAMES):
            raise SceneError(f"background out of range: {self.background}")

    def key(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    def to_json(self):
        return {"cells": [list(c) if c is not None else None for c in self.cells],
                "background": self.background}

    @classmethod
    def from_json(cls, d):
        cells = tuple(tuple(c) if c is not None else None for c in d["cells"])
        return cls(cells=cells, background=d["background"])

    def objects(self):
        """(cell index, color, shape) for each occupied cell, raster order."""
        return [(i, c[0], c[1]) for i, c in enumerate(self.cells) if c is not None]


# -- rendering ---------------------------------------------------------------

def _cell_geometry(side: int):
    if side % 4 != 0 or side < 8:
        raise SceneError(f"image side must be a multiple of 4 and >= 8, got {side}")
    quad = side // 2
    inner = quad - 2          # 1px background gutter on every quadrant edge
    return quad, inner


def _disc_mask(inner: int) -> np.ndarray:
    r = inner / 2.0
    c = np.arange(inner) + 0.5
    dy = c - r
    mask = (dy[:, None] ** 2 + dy[None, :] ** 2) <= r * r
    return mask


def render_scene_u8(scene: Scene, side: int = 16) -> np.ndarray:
    """Render to uint8 RGB. Deterministic; bit-identical for equal scenes."""
    quad, inner = _cell_geometry(side)
    bg = BACKGROUND_RGB[scene.background].astype(np.uint8)
    img = np.empty((side, side, 3), dtype=np.uint8)
    img[:, :] = bg
    disc = _disc_mask(inner)
    for idx, cell in enumerate(scene.cells):
        if cell is None:
            continue
        color, shape = cell
        r0 = (idx // GRID) * quad + 1
        c0 = (idx % GRID) * quad + 1
        block = img[r0:r0 + inner, c0:c0 + inner]
        rgb = COLOR_RGB[color].astype(np.uint8)
        if shape == 0:
            block[:, :] = rgb
        else:
            block[disc] = rgb
    return img


def render_scene(scene: Scene, side: int = 16) -> np.ndarray:
    """Render to float32 RGB in [0,1]."""
    return render_scene_u8(scene, side).astype(np.float32) / np.float32(255.0)


def _nearest_entry(rgb255: np.ndarray):
    """(entry index into colors+backgrounds, max-norm distance)."""
    d = np.max(np.abs(_ALL_ENTRIES - rgb255), axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])


def parse_image(image: np.ndarray):
    """Invert render_scene. Returns a Scene, or None if the image does not
    resolve to a clean scene (any region farther than half the minimum
    palette separation from its nearest entry, inconsistent background, or
    no objects)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != img.shape[1] or img.shape[2] != 3:
        raise SceneError(f"expected square [S,S,3] image, got {img.shape}")
    side = img.shape[0]
    quad, inner = _cell_geometry(side)
    px = img.astype(np.float64) * 255.0

    gutter = np.ones((side, side), dtype=bool)
    for idx in range(N_CELLS):
        r0 = (idx // GRID) * quad + 1
        c0 = (idx % GRID) * quad + 1
        gutter[r0:r0 + inner, c0:c0 + inner] = False
    bg_idx, bg_dist = _nearest_entry(px[gutter].mean(axis=0))
    if bg_dist > HALF_SEPARATION or bg_idx < len(COLOR_NAMES):
        return None
    background = bg_idx - len(COLOR_NAMES)

    cells = []
    for idx in range(N_CELLS):
        r0 = (idx // GRID) * quad + 1
        c0 = (idx % GRID) * quad + 1
        block = px[r0:r0 + inner, c0:c0 + inner]
        entry, dist = _nearest_entry(block.reshape(-1, 3).mean(axis=0))
        if dist > HALF_SEPARATION:
            return None
        if entry >= len(COLOR_NAMES):
            if entry - len(COLOR_NAMES) != background:
                return None
            cells.append(None)
            continue
        color = entry
        corner_entry, corner_dist = _nearest_entry(block[0, 0])
        if corner_dist > HALF_SEPARATION:
            return None
        if corner_entry == color:
            shape = 0
        elif corner_entry == len(COLOR_NAMES) + background:
            shape = 1
        else:
            return None
        cells.append((color, shape))
    if all(c is None for c in cells):
        return None
    return Scene(cells=tuple(cells), background=background)


# -- captions and QA ----------------------------------------------------------

def full_caption(scene: Scene) -> str:
    clauses = [f"a {COLOR_NAMES[c]} {SHAPE_NAMES[s]} at {POSITION_NAMES[i]}"
               for i, c, s in scene.objects()]
    return (" and ".join(clauses) + "."
            + f" the background is {BACKGROUND_NAMES[scene.background]}.")


def category_caption(scene: Scene):
    """Short '<color> <shape>' form; only defined for single-object scenes."""
    objs = scene.objects()
    if len(objs) != 1:
        return None
    _, c, s = objs[0]
    return f"{COLOR_NAMES[c]} {SHAPE_NAMES[s]}"


def counting_caption(scene: Scene):
    """'<n> <color> <shape>s ...' form for scenes of n >= 2 identical objects."""
    objs = scene.objects()
    if len(objs) < 2:
        return None
    attrs = {(c, s) for _, c, s in objs}
    if len(attrs) != 1:
        return None
    (c, s), = attrs
    n = len(objs)
    return (f"{NUMBER_WORDS[n]} {COLOR_NAMES[c]} {SHAPE_NAMES[s]}s."
            + f" the background is {BACKGROUND_NAMES[scene.background]}.")


@dataclass(frozen=True)
class CaptionFacts:
    """Parsed caption: either positioned clauses, a count, or a bare category."""
    kind: str                      # "full" | "category" | "counting"
    clauses: tuple = ()            # (position, color, shape) triples for kind=full
    count: tuple | None = None     # (n, color, shape) for kind=counting
    category: tuple | None = None  # (color, shape) for kind=category
    background: int | None = None


class CaptionParseError(ValueError):
    pass


def parse_caption(text: str) -> CaptionFacts:
    """Inverse of the caption grammar. Raises on non-grammar input."""
    text = text.strip()
    if not text:
        raise CaptionParseError("empty caption")
    if "." not in text:
        words = text.split()
        if (len(words) == 2 and words[0] in COLOR_NAMES and words[1] in SHAPE_NAMES):
            return CaptionFacts(kind="category",
                                category=(COLOR_NAMES.index(words[0]),
                                          SHAPE_NAMES.index(words[1])))
        raise CaptionParseError(f"not a category caption: {text!r}")

    sentences = [s.strip() for s in text.split(".") if s.strip()]
    background = None
    if len(sentences) == 2:
        bw = sentences[1].split()
        if len(bw) == 4 and bw[:3] == ["the", "background", "is"] and bw[3] in BACKGROUND_NAMES:
            background = BACKGROUND_NAMES.index(bw[3])
        else:
            raise CaptionParseError(f"bad background sentence: {sentences[1]!r}")
    elif len(sentences) != 1:
        raise CaptionParseError(f"too many sentences: {text!r}")

    first = sentences[0].split()
    if first and first[0] in NUMBER_WORDS:
        if (len(first) == 3 and first[1] in COLOR_NAMES
                and first[2].endswith("s") and first[2][:-1] in SHAPE_NAMES):
            n = NUMBER_WORDS.index(first[0])
            if n < 2:
                raise CaptionParseError(f"counting caption needs n >= 2: {text!r}")
            return CaptionFacts(kind="counting",
                                count=(n, COLOR_NAMES.index(first[1]),
                                       SHAPE_NAMES.index(first[2][:-1])),
                                background=background)
        raise CaptionParseError(f"bad counting sentence: {sentences[0]!r}")

    clauses = []
    for clause in " ".join(first).split(" and "):
        w = clause.split()
        if (len(w) == 6 and w[0] == "a" and w[1] in COLOR_NAMES
                and w[2] in SHAPE_NAMES and w[3] == "at"
                and " ".join(w[4:]) in POSITION_NAMES):
            clauses.append((POSITION_NAMES.index(" ".join(w[4:])),
                            COLOR_NAMES.index(w[1]), SHAPE_NAMES.index(w[2])))
        else:
            raise CaptionParseError(f"bad clause: {clause!r}")
    positions = [p for p, _, _ in clauses]
    if len(set(positions)) != len(positions):
        raise CaptionParseError(f"duplicate positions: {text!r}")
    return CaptionFacts(kind="full", clauses=tuple(clauses), background=background)


def caption_consistent(scene: Scene, facts: CaptionFacts) -> bool:
    """Does the scene satisfy everything the caption asserts?

    Full and counting captions describe the complete object set, so extra
    objects violate them; category captions only claim existence.
    """
    if facts.background is not None and scene.background != facts.background:
        return False
    objs = scene.objects()
    if facts.kind == "category":
        c, s = facts.category
        return any(co == c and sh == s for _, co, sh in objs)
    if facts.kind == "counting":
        n, c, s = facts.count
        return len(objs) == n and all(co == c and sh == s for _, co, sh in objs)
    stated = {p: (c, s) for p, c, s in facts.clauses}
    for i in range(N_CELLS):
        cell = scene.cells[i]
        if i in stated:
            if cell is None or (cell[0], cell[1]) != stated[i]:
                return False
        elif cell is not None:
            return False
    return True


QA_TYPES = ("color_at", "shape_at", "count_color", "exists_color", "describe")


def oracle_answer(scene: Scene, question: str) -> str:
    """Ground-truth answer for any grammar question about ``scene``."""
    q = question.strip().rstrip("?.").split()
    if q[:3] == ["what", "color", "is"] and q[-1] == "cell":
        pos = " ".join(q[4:-1])
        cell = scene.cells[POSITION_NAMES.index(pos)]
        return "empty" if cell is None else COLOR_NAMES[cell[0]]
    if q[:4] == ["what", "shape", "is", "in"] and q[-1] == "cell":
        pos = " ".join(q[5:-1])
        cell = scene.cells[POSITION_NAMES.index(pos)]
        return "empty" if cell is None else SHAPE_NAMES[cell[1]]
    if q[:2] == ["how", "many"] and q[2] in COLOR_NAMES:
        n = sum(1 for _, c, _ in scene.objects() if c == COLOR_NAMES.index(q[2]))
        return NUMBER_WORDS[n]
    if q[:2] == ["is", "there"] and q[3] in COLOR_NAMES:
        return "yes" if any(c == COLOR_NAMES.index(q[3]) for _, c, _ in scene.objects()) else "no"
    if q[:1] == ["describe"]:
        return full_caption(scene)
    raise CaptionParseError(f"unrecognized question: {question!r}")


def make_qa(scene: Scene, rng: np.random.Generator, qtype: str | None = None):
    """One (question, answer, qtype) for the scene."""
    if qtype is None:
        qtype = QA_TYPES[rng.integers(0, len(QA_TYPES))]
    if qtype == "color_at":
        pos = POSITION_NAMES[rng.integers(0, N_CELLS)]
        q = f"what color is the {pos} cell?"
    elif qtype == "shape_at":
        pos = POSITION_NAMES[rng.integers(0, N_CELLS)]
        q = f"what shape is in the {pos} cell?"
    elif qtype == "count_color":
        color = COLOR_NAMES[rng.integers(0, len(COLOR_NAMES))]
        q = f"how many {color} cells are there?"
    elif qtype == "exists_color":
        color = COLOR_NAMES[rng.integers(0, len(COLOR_NAMES))]
        q = f"is there a {color} cell?"
    elif qtype == "describe":
        q = "describe the image in detail."
    else:
        raise ValueError(f"unknown question type '{qtype}'")
    return q, oracle_answer(scene, q), qtype


def truncate_caption(caption: str, rng: np.random.Generator, p: float = 0.25) -> str:
    """With probability p keep only the first sentence (through its period)."""
    if not caption:
        raise CaptionParseError("empty caption")
    if p > 0 and rng.random() < p:
        head = caption.split(".")[0]
        return head + "."
    return caption


# -- text vocabulary ----------------------------------------------------------

SPECIALS = ("<pad>", "<bos>", "<eos>", "<boi>", "<eoi>", "<user>", "<assistant>", "<nl>")
PAD, BOS, EOS, BOI, EOI, USER, ASSISTANT, NEWLINE = range(8)

_GRAMMAR_WORDS = sorted(set(
    list(COLOR_NAMES) + list(SHAPE_NAMES) + [s + "s" for s in SHAPE_NAMES]
    + list(NUMBER_WORDS) + list(BACKGROUND_NAMES)
    + ["top", "bottom", "left", "right"]
    + ["a", "at", "and", "the", "background", "is",
       "what", "color", "shape", "in", "cell", "cells",
       "how", "many", "are", "there", "yes", "no", "empty",
       "describe", "image", "detail", "repeat"]
    + [".", "?"]
))


class VocabError(ValueError):
    pass


class TextVocab:
    """Closed word-level vocabulary over the grammar, specials first."""

    def __init__(self):
        self.id_to_word = list(SPECIALS) + _GRAMMAR_WORDS
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}

    def __len__(self):
        return len(self.id_to_word)

    def grammar_hash(self) -> str:
        blob = json.dumps({"specials": SPECIALS, "words": _GRAMMAR_WORDS,
                           "positions": POSITION_NAMES, "colors": COLOR_NAMES,
                           "shapes": SHAPE_NAMES}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for raw in text.split():
            chunks = [raw]
            if len(raw) > 1 and raw[-1] in ".?":
                chunks = [raw[:-1], raw[-1]]
            for w in chunks:
                wid = self.word_to_id.get(w)
                if wid is None or wid < len(SPECIALS):
                    raise VocabError(f"unknown word {w!r}")
                ids.append(wid)
        return ids

    def detokenize(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.id_to_word):
                raise VocabError(f"id {i} out of range")
            w = self.id_to_word[i]
            if w in (".", "?") and out:
                out[-1] += w
            else:
                out.append(w)
        return " ".join(out)


# -- image preprocessing -------------------------------------------------------

PAD_VALUE = np.float32(127.0 / 255.0)


def _nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    ri = np.minimum((np.floor((np.arange(out_h) + 0.5) * h / out_h)).astype(int), h - 1)
    ci = np.minimum((np.floor((np.arange(out_w) + 0.5) * w / out_w)).astype(int), w - 1)
    return img[ri][:, ci]


def _check_image(image: np.ndarray):
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise SceneError(f"expected [H,W,3] image, got {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise SceneError("zero-dimension image")
    return img


def preprocess_understanding(image: np.ndarray, side: int = 16) -> np.ndarray:
    """Resize the long side to ``side`` keeping aspect; pad the short side
    symmetrically with 127/255 gray."""
    img = _check_image(image)
    h, w = img.shape[:2]
    if h >= w:
        nh = side
        nw = max(1, round(w * side / h))
    else:
        nw = side
        nh = max(1, round(h * side / w))
    resized = _nearest_resize(img, nh, nw)
    out = np.full((side, side, 3), PAD_VALUE, dtype=np.float32)
    top = (side - nh) // 2
    left = (side - nw) // 2
    out[top:top + nh, left:left + nw] = resized
    return out


def preprocess_generation(image: np.ndarray, side: int = 16) -> np.ndarray:
    """Resize the short side to ``side``; center-crop the long side."""
    img = _check_image(image)
    h, w = img.shape[:2]
    if h <= w:
        nh = side
        nw = max(side, round(w * side / h))
    else:
        nw = side
        nh = max(side, round(h * side / w))
    resized = _nearest_resize(img, nh, nw)
    top = (nh - side) // 2
    left = (nw - side) // 2
    return resized[top:top + side, left:left + side]


# -- scene samplers ------------------------------------------------------------

def sample_scene(rng: np.random.Generator, p_empty: float = 0.35) -> Scene:
    while True:
        cells = []
        for _ in range(N_CELLS):
            if rng.random() < p_empty:
                cells.append(None)
            else:
                cells.append((int(rng.integers(0, len(COLOR_NAMES))),
                              int(rng.integers(0, len(SHAPE_NAMES)))))
        if any(c is not None for c in cells):
            return Scene(cells=tuple(cells), background=int(rng.integers(0, 2)))


def sample_single_object_scene(rng: np.random.Generator) -> Scene:
    cells = [None] * N_CELLS
    cells[int(rng.integers(0, N_CELLS))] = (int(rng.integers(0, len(COLOR_NAMES))),
                                            int(rng.integers(0, len(SHAPE_NAMES))))
    return Scene(cells=tuple(cells), background=int(rng.integers(0, 2)))


def sample_counting_scene(rng: np.random.Generator) -> Scene:
    n = int(rng.integers(2, N_CELLS + 1))
    spots = rng.choice(N_CELLS, size=n, replace=False)
    obj = (int(rng.integers(0, len(COLOR_NAMES))), int(rng.integers(0, len(SHAPE_NAMES))))
    cells = [None] * N_CELLS
    for s in spots:
        cells[int(s)] = obj
    return Scene(cells=tuple(cells), background=int(rng.integers(0, 2)))


# -- corpus build ---------------------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    image_side: int = 16
    n_text: int = 400
    n_und: int = 1600
    n_gen_category: int = 300
    n_gen_full: int = 1600
    n_sft: int = 900
    n_heldout_qa: int = 300
    n_heldout_prompts: int = 240
    train_seed: int = 1001
    heldout_seed: int = 2002
    p_empty: float = 0.35

    def __post_init__(self):
        if self.train_seed == self.heldout_seed:
            raise ValueError("train and held-out seeds must differ")
        if self.image_side % 4 != 0:
            raise ValueError("image side must be a multiple of 4")


SPLIT_NAMES = ("text", "und", "gen_category", "gen_full", "sft",
               "heldout_qa", "heldout_prompts")

_QA_TRAIN_WEIGHTS = {"color_at": 0.25, "shape_at": 0.25, "count_color": 0.20,
                     "exists_color": 0.15, "describe": 0.15}
_QA_EVAL_TYPES = ("color_at", "shape_at", "count_color", "exists_color")


def _image_hex(scene: Scene, side: int) -> str:
    return render_scene_u8(scene, side).tobytes().hex()


def image_from_hex(hexstr: str, side: int) -> np.ndarray:
    raw = bytes.fromhex(hexstr)
    u8 = np.frombuffer(raw, dtype=np.uint8).reshape(side, side, 3)
    return u8.astype(np.float32) / np.float32(255.0)


def _pick_qtype(rng, weights: dict):
    names = list(weights)
    probs = np.array([weights[n] for n in names])
    return names[int(rng.choice(len(names), p=probs / probs.sum()))]


def build_corpus(config: CorpusConfig, out_dir) -> dict:
    """Generate all splits and a manifest; files are byte-identical per config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    side = config.image_side
    vocab = TextVocab()
    train_rng = np.random.default_rng(config.train_seed)
    held_rng = np.random.default_rng(config.heldout_seed)

    train_keys: set[str] = set()
    records: dict[str, list] = {name: [] for name in SPLIT_NAMES}

    def train_scene(sampler):
        if sampler is sample_scene:
            s = sampler(train_rng, config.p_empty)
        else:
            s = sampler(train_rng)
        train_keys.add(s.key())
        return s

    # text-only: plain grammar sentences (captions without images)
    for _ in range(config.n_text):
        s = train_scene(sample_scene)
        cap = counting_caption(s)
        if cap is None or train_rng.random() >= 0.3:
            cap = full_caption(s)
        records["text"].append({"task": "text", "text": cap})

    # understanding QA with images
    for _ in range(config.n_und):
        s = train_scene(sample_scene)
        q, a, t = make_qa(s, train_rng, _pick_qtype(train_rng, _QA_TRAIN_WEIGHTS))
        records["und"].append({"task": "und", "scene": s.to_json(),
                               "image_hex": _image_hex(s, side),
                               "question": q, "answer": a, "qtype": t})

    # generation, category-style curriculum phase
    for _ in range(config.n_gen_category):
        s = train_scene(sample_single_object_scene)
        records["gen_category"].append({"task": "gen", "scene": s.to_json(),
                                        "image_hex": _image_hex(s, side),
                                        "caption": category_caption(s)})

    # generation, full captions (counting captions mixed in where they apply)
    for _ in range(config.n_gen_full):
        if train_rng.random() < 0.25:
            s = train_scene(sample_counting_scene)
            cap = counting_caption(s)
        else:
            s = train_scene(sample_scene)
            cap = full_caption(s)
        records["gen_full"].append({"task": "gen", "scene": s.to_json(),
                                    "image_hex": _image_hex(s, side),
                                    "caption": cap})

    # instruction-style dialogues
    for _ in range(config.n_sft):
        if train_rng.random() < 0.75:
            s = train_scene(sample_scene)
            n_turns = 1 if train_rng.random() < 0.6 else 2
            if n_turns == 1:
                qa = [make_qa(s, train_rng, _pick_qtype(train_rng, _QA_TRAIN_WEIGHTS))]
            else:
                short = {k: v for k, v in _QA_TRAIN_WEIGHTS.items() if k != "describe"}
                qa = [make_qa(s, train_rng, _pick_qtype(train_rng, short))
                      for _ in range(2)]
            records["sft"].append({"task": "sft", "kind": "und",
                                   "scene": s.to_json(),
                                   "image_hex": _image_hex(s, side),
                                   "turns": [{"q": q, "a": a, "qtype": t}
                                             for q, a, t in qa]})
        else:
            s = train_scene(sample_scene)
            cap = full_caption(s)
            records["sft"].append({"task": "sft", "kind": "text", "scene": None,
                                   "image_hex": None,
                                   "turns": [{"q": f"repeat {cap}", "a": cap,
                                              "qtype": "repeat"}]})

    # held-out QA on scenes never seen in training
    guard = 0
    while len(records["heldout_qa"]) < config.n_heldout_qa:
        s = sample_scene(held_rng, config.p_empty)
        guard += 1
        if guard > 100 * config.n_heldout_qa:
            raise RuntimeError("could not find enough disjoint held-out scenes")
        if s.key() in train_keys:
            continue
        t = _QA_EVAL_TYPES[len(records["heldout_qa"]) % len(_QA_EVAL_TYPES)]
        q, a, t = make_qa(s, held_rng, t)
        records["heldout_qa"].append({"task": "und", "scene": s.to_json(),
                                      "image_hex": _image_hex(s, side),
                                      "question": q, "answer": a, "qtype": t})

    # held-out generation prompts across the three scoring categories
    per_cat = config.n_heldout_prompts // 3
    for _ in range(per_cat):
        s = sample_single_object_scene(held_rng)
        records["heldout_prompts"].append({"task": "prompt", "category": "color",
                                           "caption": category_caption(s)})
    for _ in range(per_cat):
        s = sample_scene(held_rng, p_empty=0.5)
        records["heldout_prompts"].append({"task": "prompt", "category": "position",
                                           "caption": full_caption(s)})
    for _ in range(config.n_heldout_prompts - 2 * per_cat):
        s = sample_counting_scene(held_rng)
        records["heldout_prompts"].append({"task": "prompt", "category": "counting",
                                           "caption": counting_caption(s)})

    for name in SPLIT_NAMES:
        with open(out / f"{name}.jsonl", "w", encoding="utf-8") as f:
            for rec in records[name]:
                f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")

    manifest = {
        "format_version": 1,
        "image_side": side,
        "counts": {name: len(records[name]) for name in SPLIT_NAMES},
        "train_seed": config.train_seed,
        "heldout_seed": config.heldout_seed,
        "p_empty": config.p_empty,
        "grammar_hash": vocab.grammar_hash(),
        "palette": {"colors": {n: list(map(int, c)) for n, c in zip(COLOR_NAMES, COLOR_RGB)},
                    "backgrounds": {n: list(map(int, c))
                                    for n, c in zip(BACKGROUND_NAMES, BACKGROUND_RGB)}},
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return manifest


def load_split(corpus_dir, name: str) -> list[dict]:
    path = Path(corpus_dir) / f"{name}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"missing corpus split '{name}' under {corpus_dir}")
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def load_manifest(corpus_dir) -> dict:
    with open(Path(corpus_dir) / "manifest.json", encoding="utf-8") as f:
        return json.load(f)


def enumerate_scene_space():
    """Yield every valid Scene (13 cell states ^ 4 cells x 2 backgrounds)."""
    states = [None] + [(c, s) for c in range(len(COLOR_NAMES))
                       for s in range(len(SHAPE_NAMES))]
    idx = np.zeros(N_CELLS, dtype=int)
    n = len(states)
    total = n ** N_CELLS
    for flat in range(total):
        x = flat
        cells = []
        for _ in range(N_CELLS):
            cells.append(states[x % n])
            x //= n
        if all(c is None for c in cells):
            continue
        for bg in range(2):
            yield Scene(cells=tuple(cells), background=bg)
