"""Synthetic referring-expression scenes.

Scenes are colored shapes placed on a coarse grid. Each sample pairs a
rendered image with a templated expression that designates exactly one
object (the referent). Everything is a pure function of an integer seed,
so datasets are stored as manifests of seeds and re-rendered on demand.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CANVAS = 96
GRID = 6
CELL = CANVAS // GRID
MAX_QUERY_LEN = 12

PAD, BEGIN, END = 0, 1, 2
SPECIAL_TOKENS = ("<pad>", "<begin>", "<end>")

COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
COLOR_RGB = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
    ],
    dtype=np.float32,
)
SIZES = ("small", "medium", "large")
SIZE_PIXELS = (10, 13, 16)

# Three shapes per topology cluster; the third of each is held out as novel.
CATEGORIES = (
    "square", "disk", "diamond",
    "frame", "ring", "lozenge",
    "plus", "cross", "star",
    "triangle", "wedge", "flag",
)
RELATIONS = ("left", "right", "above", "below")
RELATION_WORDS = ("left of", "right of", "above", "below")

SPLITS = ("train", "val-standard", "test-standard", "test-openvocab")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}

TEMPLATES = ("category", "attribute", "relation")
TEMPLATE_WEIGHTS = (0.2, 0.35, 0.45)


@dataclass(frozen=True)
class VocabularySplit:
    """Partition of categories into base (seen) and novel (held-out) sets."""

    base_categories: frozenset[int]
    novel_categories: frozenset[int]
    cluster_map: dict[int, int]

    def __post_init__(self):
        if self.base_categories & self.novel_categories:
            raise ValueError("base and novel categories overlap")
        base_clusters = {self.cluster_map[c] for c in self.base_categories}
        for c in self.novel_categories:
            if self.cluster_map[c] not in base_clusters:
                raise ValueError(f"novel category {c} shares no cluster with a base category")

    @classmethod
    def default(cls) -> VocabularySplit:
        novel = frozenset(range(2, len(CATEGORIES), 3))
        base = frozenset(range(len(CATEGORIES))) - novel
        return cls(base, novel, {c: c // 3 for c in range(len(CATEGORIES))})


@dataclass(frozen=True)
class SceneObject:
    category: int
    color: int
    size: int
    cell: tuple[int, int]  # (row, col)


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    canvas_size: int = CANVAS
    relation_graph: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.objects) < 2:
            raise ValueError("a scene needs at least two objects")
        boxes = [object_box_pixels(o, self.canvas_size) for o in self.objects]
        for left, top, w, h in boxes:
            if left < 0 or top < 0 or left + w > self.canvas_size or top + h > self.canvas_size:
                raise ValueError("object extends outside the canvas")
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                if _pixel_iou(boxes[i], boxes[j]) > 0.2:
                    raise ValueError(f"objects {i} and {j} overlap by more than 20% IoU")


@dataclass
class GroundingSample:
    image: np.ndarray  # (3, canvas, canvas) float32 in [0, 1]
    query: str
    query_tokens: np.ndarray  # (MAX_QUERY_LEN,) int64
    query_mask: np.ndarray  # (MAX_QUERY_LEN,) bool
    gt_box: tuple[float, float, float, float]  # normalized (x, y, w, h)
    referent_idx: int
    split_tag: str
    seed: int
    template: str
    scene: SceneSpec


@dataclass(frozen=True)
class Description:
    """A query predicate: category plus optional attributes and one relation."""

    category: int
    color: int | None = None
    size: int | None = None
    relation: int | None = None
    anchor: Description | None = None

    def matches(self, idx: int, objects: Sequence[SceneObject]) -> bool:
        obj = objects[idx]
        if obj.category != self.category:
            return False
        if self.color is not None and obj.color != self.color:
            return False
        if self.size is not None and obj.size != self.size:
            return False
        if self.relation is None:
            return True
        return any(
            j != idx and self.anchor.matches(j, objects) and relation_holds(self.relation, obj, objects[j])
            for j in range(len(objects))
        )

    def text(self) -> str:
        words = []
        if self.size is not None:
            words.append(SIZES[self.size])
        if self.color is not None:
            words.append(COLORS[self.color])
        words.append(CATEGORIES[self.category])
        if self.relation is not None:
            words.append(RELATION_WORDS[self.relation])
            words.append(self.anchor.text())
        return " ".join(words)


def relation_holds(relation: int, subject: SceneObject, anchor: SceneObject) -> bool:
    (sr, sc), (ar, ac) = subject.cell, anchor.cell
    return (sc < ac, sc > ac, sr < ar, sr > ar)[relation]


def relation_graph(objects: Sequence[SceneObject]) -> list[tuple[int, int, int]]:
    return [
        (i, r, j)
        for i in range(len(objects))
        for j in range(len(objects))
        if i != j
        for r in range(len(RELATIONS))
        if relation_holds(r, objects[i], objects[j])
    ]


def matching_objects(desc: Description, objects: Sequence[SceneObject]) -> list[int]:
    return [i for i in range(len(objects)) if desc.matches(i, objects)]


# ---------------------------------------------------------------------------
# Vocabulary and tokenization
# ---------------------------------------------------------------------------


class VocabTable:
    """Closed word table; ids 0..2 are reserved for padding and sentinels."""

    def __init__(self, words: Iterable[str] | None = None):
        if words is None:
            words = [*COLORS, *SIZES, *CATEGORIES, "left", "right", "of", "above", "below"]
        self.itos = list(SPECIAL_TOKENS)
        for w in words:
            if w not in self.itos:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids]


def tokenize(query: str, vocab_table: VocabTable, max_len: int = MAX_QUERY_LEN) -> tuple[np.ndarray, np.ndarray]:
    """Map a query onto fixed-length token ids with sentinels and padding.

    Words beyond ``max_len - 2`` are dropped so the end sentinel always
    survives truncation.

    Raises:
        KeyError: if a word is outside the closed vocabulary.
    """
    if max_len < 2:
        raise ValueError("max_len must leave room for both sentinels")
    ids = []
    for word in query.split():
        if word not in vocab_table.stoi:
            raise KeyError(f"unknown word {word!r} (closed vocabulary)")
        ids.append(vocab_table.stoi[word])
    ids = [BEGIN, *ids[: max_len - 2], END]
    tokens = np.full(max_len, PAD, dtype=np.int64)
    tokens[: len(ids)] = ids
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(ids)] = True
    return tokens, mask


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def shape_mask(category: int, size: int) -> np.ndarray:
    """Boolean ``size x size`` mask whose tight bounding box is the full square."""
    idx = np.arange(size, dtype=np.float64)
    c = (size - 1) / 2.0
    yy, xx = np.meshgrid(idx - c, idx - c, indexing="ij")
    half = size / 2.0
    thick = max(2.0, size / 5.0)
    bar = max(0.5, size / 12.0)
    name = CATEGORIES[category]

    def disk(r):
        return xx**2 + yy**2 <= r**2

    def rhombus(r):
        return np.abs(xx) + np.abs(yy) <= r

    def triangle_up():
        rows = np.arange(size)[:, None]
        return np.abs(xx) <= np.maximum(0.5, (rows + 1) / 2.0)

    def diagonals():
        return (np.abs(xx - yy) <= bar * np.sqrt(2)) | (np.abs(xx + yy) <= bar * np.sqrt(2))

    def plus():
        return (np.abs(xx) <= bar) | (np.abs(yy) <= bar)

    if name == "square":
        m = np.ones((size, size), dtype=bool)
    elif name == "disk":
        m = disk(half)
    elif name == "diamond":
        m = rhombus(half)
    elif name == "frame":
        m = np.ones((size, size), dtype=bool)
        t = int(thick)
        m[t:-t, t:-t] = False
    elif name == "ring":
        m = disk(half) & ~disk(half - thick)
    elif name == "lozenge":
        m = rhombus(half) & ~rhombus(half - 1.5 * thick)
    elif name == "plus":
        m = plus()
    elif name == "cross":
        m = diagonals()
    elif name == "star":
        m = plus() | diagonals()
    elif name == "triangle":
        m = triangle_up()
    elif name == "wedge":
        m = triangle_up()[::-1]
    elif name == "flag":
        m = triangle_up().T
    else:  # pragma: no cover
        raise ValueError(name)
    m = np.ascontiguousarray(m)
    m.setflags(write=False)
    return m


def object_box_pixels(obj: SceneObject, canvas_size: int = CANVAS) -> tuple[int, int, int, int]:
    """(left, top, width, height) in pixels; objects sit centered in their cell."""
    cell = canvas_size // GRID
    s = SIZE_PIXELS[obj.size]
    row, col = obj.cell
    off = (cell - s) // 2
    return col * cell + off, row * cell + off, s, s


def _pixel_iou(a, b) -> float:
    ix = max(0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def render(spec: SceneSpec) -> np.ndarray:
    """Rasterize a scene onto a black canvas, no anti-aliasing."""
    n = spec.canvas_size
    image = np.zeros((3, n, n), dtype=np.float32)
    for obj in spec.objects:
        left, top, w, h = object_box_pixels(obj, n)
        mask = shape_mask(obj.category, SIZE_PIXELS[obj.size])
        region = image[:, top : top + h, left : left + w]
        region[:, mask] = COLOR_RGB[obj.color][:, None]
    return image


def rendered_extent(image: np.ndarray, color: int, window: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
    """Tight pixel extent of ``color`` inside a (left, top, w, h) window."""
    left, top, w, h = window
    patch = image[:, top : top + h, left : left + w]
    hit = np.all(patch == COLOR_RGB[color][:, None, None], axis=0) & (patch.sum(axis=0) > 0)
    rows = np.flatnonzero(hit.any(axis=1))
    cols = np.flatnonzero(hit.any(axis=0))
    return left + cols[0], top + rows[0], cols[-1] - cols[0] + 1, rows[-1] - rows[0] + 1


def normalized_box(obj: SceneObject, canvas_size: int = CANVAS) -> tuple[float, float, float, float]:
    left, top, w, h = object_box_pixels(obj, canvas_size)
    return (left / canvas_size, top / canvas_size, w / canvas_size, h / canvas_size)


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


def _describe(template: str, ref: int, objects: list[SceneObject], rng: np.random.Generator) -> Description | None:
    """First candidate description of the given template that picks out ``ref`` alone."""
    obj = objects[ref]
    if template == "category":
        candidates = [Description(obj.category)]
    elif template == "attribute":
        pair = [Description(obj.category, color=obj.color), Description(obj.category, size=obj.size)]
        rng.shuffle(pair)
        candidates = [*pair, Description(obj.category, color=obj.color, size=obj.size)]
    else:
        candidates = []
        anchors = [j for j in range(len(objects)) if j != ref]
        rng.shuffle(anchors)
        for j in anchors:
            a = objects[j]
            for r in range(len(RELATIONS)):
                if not relation_holds(r, obj, a):
                    continue
                for anchor in (Description(a.category), Description(a.category, color=a.color)):
                    candidates.append(Description(obj.category, relation=r, anchor=anchor))
        order = rng.permutation(len(candidates))
        # plain-category anchors first keeps expressions short when they suffice
        candidates = sorted((candidates[i] for i in order), key=lambda d: d.anchor.color is not None)
    for desc in candidates:
        if matching_objects(desc, objects) == [ref]:
            return desc
    return None


def generate_scene(
    seed: int,
    split: str,
    vocab: VocabularySplit | None = None,
    vocab_table: VocabTable | None = None,
) -> GroundingSample:
    """Deterministically build one grounding sample.

    Referents of ``test-openvocab`` samples come from the novel categories
    (distractors may mix base and novel); every other split uses base
    categories only.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    if split not in _SPLIT_CODE:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    vocab = vocab or VocabularySplit.default()
    vocab_table = vocab_table or VocabTable()
    if not vocab.base_categories:
        raise ValueError("vocabulary has an empty base category set")

    rng = np.random.default_rng([seed, _SPLIT_CODE[split]])
    base = sorted(vocab.base_categories)
    if split == "test-openvocab":
        if not vocab.novel_categories:
            raise ValueError("open-vocabulary split needs novel categories")
        referent_pool = sorted(vocab.novel_categories)
        distractor_pool = sorted(vocab.base_categories | vocab.novel_categories)
    else:
        referent_pool = base
        distractor_pool = base

    template = TEMPLATES[rng.choice(len(TEMPLATES), p=TEMPLATE_WEIGHTS)]
    while True:
        n = int(rng.integers(3, 6))
        cells = rng.choice(GRID * GRID, size=n, replace=False)
        ref_cat = int(rng.choice(referent_pool))
        cats = [ref_cat]
        if template == "category":
            others = [c for c in distractor_pool if c != ref_cat]
            first = int(rng.choice(others))
            cats += [first, first]
            cats += [int(rng.choice(others)) for _ in range(n - 3)]
        else:
            cats.append(ref_cat)
            cats += [int(rng.choice(distractor_pool)) for _ in range(n - 2)]
        colors = rng.integers(0, len(COLORS), size=n)
        sizes = rng.integers(0, len(SIZES), size=n)
        perm = rng.permutation(n)
        objects = [
            SceneObject(cats[k], int(colors[k]), int(sizes[k]), divmod(int(cells[k]), GRID)) for k in perm
        ]
        ref = int(np.flatnonzero(perm == 0)[0])
        desc = _describe(template, ref, objects, rng)
        if desc is not None:
            break

    spec = SceneSpec(objects, CANVAS, relation_graph(objects))
    query = desc.text()
    tokens, mask = tokenize(query, vocab_table)
    return GroundingSample(
        image=render(spec),
        query=query,
        query_tokens=tokens,
        query_mask=mask,
        gt_box=normalized_box(objects[ref]),
        referent_idx=ref,
        split_tag=split,
        seed=seed,
        template=template,
        scene=spec,
    )


def parse_query(query: str) -> Description:
    """Inverse of :meth:`Description.text` for generated expressions."""
    words = query.split()

    def noun_phrase(ws):
        size = color = None
        if ws and ws[0] in SIZES:
            size = SIZES.index(ws.pop(0))
        if ws and ws[0] in COLORS:
            color = COLORS.index(ws.pop(0))
        return CATEGORIES.index(ws.pop(0)), color, size

    cat, color, size = noun_phrase(words)
    if not words:
        return Description(cat, color, size)
    rel = words.pop(0)
    if rel in ("left", "right"):
        words.pop(0)  # "of"
    a_cat, a_color, a_size = noun_phrase(words)
    return Description(cat, color, size, RELATIONS.index(rel), Description(a_cat, a_color, a_size))


# ---------------------------------------------------------------------------
# Datasets and manifests
# ---------------------------------------------------------------------------

SEED_STRIDE = 1_000_000


def split_seeds(split: str, n: int, data_seed: int = 0) -> range:
    if n >= SEED_STRIDE:
        raise ValueError(f"at most {SEED_STRIDE - 1} samples per split")
    start = data_seed * SEED_STRIDE
    return range(start, start + n)


@dataclass
class GroundingDataset:
    """Stacked arrays for one split; images are kept as uint8 to save memory."""

    split: str
    seeds: np.ndarray
    images: np.ndarray  # (N, 3, H, W) uint8 in {0, 255}
    tokens: np.ndarray  # (N, L) int64
    masks: np.ndarray  # (N, L) bool
    boxes: np.ndarray  # (N, 4) float32
    queries: list[str]
    templates: list[str]
    referent_categories: np.ndarray

    def __len__(self) -> int:
        return len(self.seeds)


def build_dataset(
    split: str,
    n: int,
    data_seed: int = 0,
    vocab: VocabularySplit | None = None,
    vocab_table: VocabTable | None = None,
) -> GroundingDataset:
    vocab = vocab or VocabularySplit.default()
    vocab_table = vocab_table or VocabTable()
    samples = [generate_scene(s, split, vocab, vocab_table) for s in split_seeds(split, n, data_seed)]
    return collate_samples(split, samples)


def collate_samples(split: str, samples: Sequence[GroundingSample]) -> GroundingDataset:
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    return GroundingDataset(
        split=split,
        seeds=np.array([s.seed for s in samples], dtype=np.int64),
        images=np.stack([(s.image * 255).astype(np.uint8) for s in samples]),
        tokens=np.stack([s.query_tokens for s in samples]),
        masks=np.stack([s.query_mask for s in samples]),
        boxes=np.array([s.gt_box for s in samples], dtype=np.float32),
        queries=[s.query for s in samples],
        templates=[s.template for s in samples],
        referent_categories=np.array([s.scene.objects[s.referent_idx].category for s in samples]),
    )


def write_manifest(path: str | Path, samples: Iterable[GroundingSample]) -> None:
    """One JSON record per line: seed, split, query, gt box."""
    with open(path, "w") as f:
        for s in samples:
            record = {"seed": s.seed, "split_tag": s.split_tag, "query": s.query, "gt_box": list(s.gt_box)}
            f.write(json.dumps(record) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def regenerate_from_manifest(
    path: str | Path, vocab: VocabularySplit | None = None, vocab_table: VocabTable | None = None
) -> list[GroundingSample]:
    """Re-render samples listed in a manifest and check they match the record."""
    out = []
    for rec in read_manifest(path):
        s = generate_scene(rec["seed"], rec["split_tag"], vocab, vocab_table)
        if s.query != rec["query"] or not np.allclose(s.gt_box, rec["gt_box"]):
            raise ValueError(f"manifest record for seed {rec['seed']} does not match the generator")
        out.append(s)
    return out
