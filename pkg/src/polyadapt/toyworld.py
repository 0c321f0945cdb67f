"""Synthetic scenes, a family of constructed languages, and their datasets.

A scene holds one or two coloured shapes on a 3x3 grid and renders to a
[3, 16, 16] image. Every language describes a scene with the same four slots
(size, color, shape, cell) through its own bijective lexicon, slot order and
optional filler word, so captions in different languages are exact
translations with disjoint vocabularies.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from polyadapt.errors import ContractViolation
from polyadapt.numerics import Rng, hash64

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
SIZES = ("small", "large")
CELLS = ("top-left", "top", "top-right", "left", "center", "right",
         "bottom-left", "bottom", "bottom-right")
SEMANTIC_WORDS = SHAPES + COLORS + SIZES + CELLS
SLOTS = ("size", "color", "shape", "cell")
ANCHOR = "anchor"
ANCHOR_CONJ = "and"
MAX_LEN = 12

IMG = 16
CELL_CENTERS = (3, 8, 12)
BACKGROUND = 0.5
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}

DATASET_VERSION = 1
IMAGE_MAGIC = b"MLTW"


@dataclass(frozen=True)
class Obj:
    shape: str
    color: str
    size: str
    cell: int


@dataclass(frozen=True)
class Scene:
    objects: tuple

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 2:
            raise ContractViolation(f"scene must hold 1-2 objects, got {len(self.objects)}")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ContractViolation(f"objects share a cell: {cells}")
        for o in self.objects:
            if (o.shape not in SHAPES or o.color not in COLORS or o.size not in SIZES
                    or not 0 <= o.cell < 9):
                raise ContractViolation(f"invalid object {o}")

    def to_json(self):
        return [[o.shape, o.color, o.size, o.cell] for o in self.objects]

    @classmethod
    def from_json(cls, rows):
        return cls(tuple(Obj(s, c, z, int(k)) for s, c, z, k in rows))


def sample_scene(rng: Rng) -> Scene:
    n = 1 if rng.random() < 0.6 else 2
    cells = rng.choice(9, size=n, replace=False)
    objs = []
    for cell in cells:
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = COLORS[rng.integers(len(COLORS))]
        size = SIZES[rng.integers(len(SIZES))]
        objs.append(Obj(shape, color, size, int(cell)))
    return Scene(tuple(objs))


def _stencil(shape, n):
    c = n // 2
    i, j = np.mgrid[0:n, 0:n]
    if shape == "square":
        return np.ones((n, n), bool)
    if shape == "circle":
        return (i - c) ** 2 + (j - c) ** 2 <= (n / 2.0) ** 2 - 0.5
    if shape == "triangle":
        return np.abs(j - c) <= np.floor(i * c / (n - 1) + 0.5)
    if shape == "cross":
        t = 0 if n == 5 else 1
        return (np.abs(i - c) <= t) | (np.abs(j - c) <= t)
    raise ValueError(shape)


STENCILS = {(s, z): _stencil(s, 5 if z == "small" else 7) for s in SHAPES for z in SIZES}


def render(scene: Scene) -> np.ndarray:
    """Rasterise a scene to float64 pixels [3, 16, 16] in [0, 1]."""
    img = np.full((3, IMG, IMG), BACKGROUND)
    for o in scene.objects:
        st = STENCILS[(o.shape, o.size)]
        n = st.shape[0]
        cy, cx = CELL_CENTERS[o.cell // 3], CELL_CENTERS[o.cell % 3]
        y0, x0 = cy - n // 2, cx - n // 2
        ys, xs = np.nonzero(st)
        ys, xs = ys + y0, xs + x0
        keep = (ys >= 0) & (ys < IMG) & (xs >= 0) & (xs < IMG)
        for ch, val in enumerate(PALETTE[o.color]):
            img[ch, ys[keep], xs[keep]] = val
    return img


# ---------------------------------------------------------------- languages

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class LanguageSpec:
    lang_id: str
    lexicon: dict
    slot_order: tuple
    conjunction: str
    filler: str | None = None
    filler_pos: int | None = None

    def surface_tokens(self):
        toks = [self.lexicon[w] for w in SEMANTIC_WORDS] + [self.conjunction]
        if self.filler:
            toks.append(self.filler)
        return toks

    def to_json(self):
        return {"lang_id": self.lang_id, "lexicon": [self.lexicon[w] for w in SEMANTIC_WORDS],
                "slot_order": list(self.slot_order), "conjunction": self.conjunction,
                "filler": self.filler, "filler_pos": self.filler_pos}

    @classmethod
    def from_json(cls, d):
        return cls(d["lang_id"], dict(zip(SEMANTIC_WORDS, d["lexicon"])),
                   tuple(d["slot_order"]), d["conjunction"], d["filler"], d["filler_pos"])


def anchor_language() -> LanguageSpec:
    return LanguageSpec(ANCHOR, {w: w for w in SEMANTIC_WORDS}, SLOTS, ANCHOR_CONJ)


def _pseudo_word(rng, taken):
    while True:
        n_syl = 2 + int(rng.integers(2))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(n_syl))
        if w not in taken:
            taken.add(w)
            return w


def make_language(rng: Rng, lang_id: str, existing=()) -> LanguageSpec:
    """Draw a fresh language; surface tokens carry a ``_<lang_id>`` suffix so
    distinct languages never share a token."""
    if lang_id in existing:
        raise ContractViolation(f"duplicate language id {lang_id!r}")
    if lang_id == ANCHOR:
        return anchor_language()
    taken = set()
    words = [_pseudo_word(rng, taken) for _ in range(len(SEMANTIC_WORDS) + 2)]
    tag = f"_{lang_id}"
    lexicon = {sem: words[i] + tag for i, sem in enumerate(SEMANTIC_WORDS)}
    conj = words[-2] + tag
    order = tuple(SLOTS[i] for i in rng.permutation(len(SLOTS)))
    has_filler = rng.random() < 0.5
    filler = words[-1] + tag if has_filler else None
    pos = int(rng.integers(1, len(SLOTS))) if has_filler else None
    return LanguageSpec(lang_id, lexicon, order, conj, filler, pos)


class Vocabulary:
    PAD = "<pad>"

    def __init__(self, tokens=()):
        self.tokens = [self.PAD]
        self.index = {self.PAD: 0}
        for t in tokens:
            self.add(t)

    @classmethod
    def from_languages(cls, langs):
        v = cls()
        for lang in langs:
            for t in lang.surface_tokens():
                v.add(t)
        return v

    def add(self, tok):
        if tok not in self.index:
            self.index[tok] = len(self.tokens)
            self.tokens.append(tok)
        return self.index[tok]

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def encode(self, words):
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise ContractViolation(f"unknown surface token {exc.args[0]!r}") from None


@dataclass
class CaptionRecord:
    scene_id: int
    lang_id: str
    tokens: list
    text: str

    @property
    def words(self):
        return self.text.split(" ")

    def to_json(self):
        return {"scene_id": self.scene_id, "lang_id": self.lang_id,
                "tokens": self.tokens, "text": self.text}


def caption_words(scene: Scene, lang: LanguageSpec):
    clauses = []
    for o in scene.objects:
        sem = {"size": o.size, "color": o.color, "shape": o.shape, "cell": CELLS[o.cell]}
        clause = [lang.lexicon[sem[slot]] for slot in lang.slot_order]
        if lang.filler:
            clause.insert(lang.filler_pos, lang.filler)
        clauses.append(clause)
    words = clauses[0] if len(clauses) == 1 else clauses[0] + [lang.conjunction] + clauses[1]
    assert len(words) <= MAX_LEN
    return words


def caption(scene: Scene, lang: LanguageSpec, vocab: Vocabulary | None = None,
            scene_id: int = 0) -> CaptionRecord:
    words = caption_words(scene, lang)
    vocab = vocab if vocab is not None else Vocabulary(lang.surface_tokens())
    return CaptionRecord(scene_id, lang.lang_id, vocab.encode(words), " ".join(words))


def decode_caption(words, lang: LanguageSpec) -> Scene:
    """Invert a caption back to its scene through the lexicon and slot order."""
    inverse = {tok: sem for sem, tok in lang.lexicon.items()}
    words = [w for w in words if w != lang.filler]
    clauses, cur = [], []
    for w in words:
        if w == lang.conjunction:
            clauses.append(cur)
            cur = []
        else:
            cur.append(w)
    clauses.append(cur)
    objs = []
    for clause in clauses:
        sem = {slot: inverse[w] for slot, w in zip(lang.slot_order, clause)}
        objs.append(Obj(sem["shape"], sem["color"], sem["size"], CELLS.index(sem["cell"])))
    return Scene(tuple(objs))


# ---------------------------------------------------------------- datasets

@dataclass
class DatasetConfig:
    n_train_scenes: int = 2000
    n_eval_scenes: int = 256
    train_langs: int = 8
    holdout_langs: int = 4
    seed: int = 0
    # share of train scenes whose holdout-language captions the encoder
    # alignment stage may see (low-resource exposure); never used downstream
    holdout_align_fraction: float = 0.125


@dataclass
class DatasetHandle:
    config: DatasetConfig
    languages: dict
    train_langs: list
    holdout_langs: list
    scenes: list
    images: np.ndarray
    captions: dict
    vocab: Vocabulary
    lambda_fraction: Fraction = Fraction(1)
    train_ids: list = field(default_factory=list)

    @property
    def n_train(self):
        return self.config.n_train_scenes

    @property
    def eval_ids(self):
        return list(range(self.config.n_train_scenes, len(self.scenes)))

    @property
    def all_langs(self):
        return [ANCHOR] + self.train_langs + self.holdout_langs

    def caption_of(self, scene_id, lang_id) -> CaptionRecord:
        return self.captions[lang_id][scene_id]

    def shuffle_order(self):
        rng = Rng(hash64(self.config.seed, 0x1A3B))
        return [int(i) for i in rng.permutation(self.config.n_train_scenes)]

    def subsample(self, fraction) -> "DatasetHandle":
        lam = Fraction(fraction).limit_denominator(1 << 20)
        if not 0 < lam <= 1:
            raise ContractViolation(f"lambda fraction {lam} outside (0, 1]")
        n = max(1, math.floor(lam * self.config.n_train_scenes + Fraction(1, 2)))
        ids = self.shuffle_order()[:n]
        return DatasetHandle(self.config, self.languages, self.train_langs, self.holdout_langs,
                             self.scenes, self.images, self.captions, self.vocab, lam, ids)

    def anchor_view(self, split="train"):
        ids = self.train_ids if split == "train" else self.eval_ids
        return [self.captions[ANCHOR][i] for i in ids]

    def parallel_view(self):
        """(anchor caption, other-language caption) for train scenes and train languages."""
        return [(self.captions[ANCHOR][i], self.captions[lang][i])
                for lang in self.train_langs for i in self.train_ids]

    def holdout_align_ids(self):
        k = int(round(self.config.holdout_align_fraction * len(self.train_ids)))
        return self.train_ids[:k]

    def alignment_view(self, include_holdout=True):
        """Captions usable for encoder alignment: anchor + train languages on all
        train scenes, holdout languages only on the low-resource subset."""
        out = [self.captions[lang][i] for lang in [ANCHOR] + self.train_langs
               for i in self.train_ids]
        if include_holdout:
            out += [self.captions[lang][i] for lang in self.holdout_langs
                    for i in self.holdout_align_ids()]
        return out

    def same_content(self, a: int, b: int) -> bool:
        return self.captions[ANCHOR][a].text == self.captions[ANCHOR][b].text


def build_dataset(config: DatasetConfig | None = None, **overrides) -> DatasetHandle:
    cfg = config or DatasetConfig()
    if overrides:
        cfg = DatasetConfig(**{**cfg.__dict__, **overrides})
    if cfg.n_train_scenes < 1 or cfg.n_eval_scenes < 1:
        raise ContractViolation("scene counts must be >= 1")
    lang_rng = Rng(hash64(cfg.seed, 101))
    train = [f"L{i + 1}" for i in range(cfg.train_langs)]
    hold = [f"H{i + 1}" for i in range(cfg.holdout_langs)]
    languages = {ANCHOR: anchor_language()}
    for i, lid in enumerate(train + hold):
        languages[lid] = make_language(lang_rng.child(i), lid, existing=languages)
    vocab = Vocabulary.from_languages(languages.values())

    scene_rng = Rng(hash64(cfg.seed, 202))
    n = cfg.n_train_scenes + cfg.n_eval_scenes
    scenes = [sample_scene(scene_rng) for _ in range(n)]
    images = np.stack([render(s) for s in scenes])
    captions = {lid: [caption(s, lang, vocab, i) for i, s in enumerate(scenes)]
                for lid, lang in languages.items()}
    return DatasetHandle(cfg, languages, train, hold, scenes, images, captions, vocab,
                         Fraction(1), list(range(cfg.n_train_scenes)))


def write_dataset(ds: DatasetHandle, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": DATASET_VERSION,
        "seed": ds.config.seed,
        "config": dict(ds.config.__dict__),
        "counts": {"train": ds.config.n_train_scenes, "eval": ds.config.n_eval_scenes,
                   "languages": len(ds.languages), "vocab": len(ds.vocab)},
        "train_langs": ds.train_langs,
        "holdout_langs": ds.holdout_langs,
        "languages": [lang.to_json() for lang in ds.languages.values()],
        "scenes": [s.to_json() for s in ds.scenes],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    with open(d / "captions.jsonl", "w") as fh:
        for lid in ds.languages:
            for rec in ds.captions[lid]:
                fh.write(json.dumps(rec.to_json()) + "\n")
    write_images(d / "images.bin", ds.images)


def write_images(path, images):
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC + struct.pack("<II", DATASET_VERSION, len(images)))
        fh.write(np.ascontiguousarray(images, dtype="<f4").tobytes())


def read_images(path):
    raw = Path(path).read_bytes()
    if raw[:4] != IMAGE_MAGIC:
        raise ContractViolation(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack("<II", raw[4:12])
    if version != DATASET_VERSION:
        raise ContractViolation(f"{path}: unsupported version {version}")
    body = raw[12:]
    if len(body) != count * 3 * IMG * IMG * 4:
        raise ContractViolation(f"{path}: truncated image buffer")
    return np.frombuffer(body, dtype="<f4").reshape(count, 3, IMG, IMG).astype(np.float64)


def read_dataset(directory) -> DatasetHandle:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest["format_version"] != DATASET_VERSION:
        raise ContractViolation(f"unsupported dataset version {manifest['format_version']}")
    cfg = DatasetConfig(**manifest["config"])
    languages = {}
    for spec in manifest["languages"]:
        languages[spec["lang_id"]] = LanguageSpec.from_json(spec)
    vocab = Vocabulary.from_languages(languages.values())
    scenes = [Scene.from_json(s) for s in manifest["scenes"]]
    captions = {lid: [None] * len(scenes) for lid in languages}
    with open(d / "captions.jsonl") as fh:
        for line in fh:
            r = json.loads(line)
            captions[r["lang_id"]][r["scene_id"]] = CaptionRecord(
                r["scene_id"], r["lang_id"], r["tokens"], r["text"])
    images = read_images(d / "images.bin")
    return DatasetHandle(cfg, languages, manifest["train_langs"], manifest["holdout_langs"],
                         scenes, images, captions, vocab, Fraction(1),
                         list(range(cfg.n_train_scenes)))
