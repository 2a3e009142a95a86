"""Synthetic scenes, captions and QA pairs, plus PPM / JSON-lines dataset I/O.

Objects are drawn inside single 32x32 cells, so every caption, answer and
per-cell class label is an exact function of the rendered image.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

CELL = 32
SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 220),
    "yellow": (230, 210, 40),
}
COUNT_WORDS = ("one", "two", "three")
ANSWERS = COLORS + COUNT_WORDS + ("yes", "no")
NUM_CELL_CLASSES = 1 + len(SHAPES) * len(COLORS)
MIN_SIZE, MAX_SIZE = 14, 28
MAX_OBJECTS = 3

CAPTION_TEMPLATES = ("{objs}", "there is {objs}", "a picture of {objs}")
QA_TEMPLATES = {
    "color": "what color is the {shape}",
    "count": "how many objects are there",
    "exists": "is there a {color} {shape}",
}
SPLIT_CODES = {"train": 0, "val": 1, "test": 2, "cnn": 3, "cnn_val": 4}


class DatasetError(ValueError):
    pass


def cell_class(shape: str, color: str) -> int:
    """Cell label: 0 is background, then shape-major over colors."""
    return 1 + SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


def class_name(label: int) -> str:
    if label == 0:
        return "background"
    s, c = divmod(label - 1, len(COLORS))
    return f"{COLORS[c]}-{SHAPES[s]}"


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    row: int
    col: int
    size: int
    top: int
    left: int


@dataclass
class SceneSpec:
    height: int
    width: int
    objects: list[SceneObject]
    background: int

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.height // CELL, self.width // CELL

    def ordered(self) -> list[SceneObject]:
        return sorted(self.objects, key=lambda o: (o.row, o.col))

    def cell_labels(self) -> np.ndarray:
        labels = np.zeros(self.grid_shape, dtype=np.int64)
        for o in self.objects:
            labels[o.row, o.col] = cell_class(o.shape, o.color)
        return labels


def shape_mask(shape: str, size: int) -> np.ndarray:
    c = (np.arange(size) + 0.5)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        r = size / 2
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    if shape == "triangle":
        # apex at the top centre, base along the bottom edge
        return np.abs(xx - size / 2) <= yy / 2
    raise ValueError(f"unknown shape {shape!r}")


def render(scene: SceneSpec) -> np.ndarray:
    """Rasterize to an (H, W, 3) uint8 array."""
    img = np.full((scene.height, scene.width, 3), scene.background, dtype=np.uint8)
    for o in scene.objects:
        m = shape_mask(o.shape, o.size)
        patch = img[o.top:o.top + o.size, o.left:o.left + o.size]
        patch[m] = PALETTE[o.color]
    return img


def to_image(pixels: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) -> float32 (3, H, W) in [0, 1]."""
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def generate_scene(rng: np.random.Generator, image_h: int, image_w: int,
                   n_objects: Optional[int] = None) -> tuple[SceneSpec, np.ndarray]:
    if image_h % CELL or image_w % CELL or image_h <= 0 or image_w <= 0:
        raise ValueError(f"image dims must be positive multiples of {CELL}, got {image_h}x{image_w}")
    rows, cols = image_h // CELL, image_w // CELL
    n_cells = rows * cols
    if n_objects is None:
        n_objects = int(rng.integers(1, min(MAX_OBJECTS, n_cells) + 1))
    if n_objects > n_cells or n_objects < 1:
        raise ValueError(f"cannot place {n_objects} objects on a {rows}x{cols} grid")
    cells = rng.choice(n_cells, size=n_objects, replace=False)
    objects = []
    for cell in cells:
        r, c = divmod(int(cell), cols)
        size = int(rng.integers(MIN_SIZE, MAX_SIZE + 1))
        top = r * CELL + int(rng.integers(2, CELL - size - 1))
        left = c * CELL + int(rng.integers(2, CELL - size - 1))
        objects.append(SceneObject(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=COLORS[rng.integers(len(COLORS))],
            row=r, col=c, size=size, top=top, left=left,
        ))
    scene = SceneSpec(image_h, image_w, objects, background=int(rng.integers(0, 61)))
    return scene, to_image(render(scene))


def verify_cell_labels(pixels: np.ndarray) -> np.ndarray:
    """Recover per-cell class labels from rendered pixels alone.

    Background is always gray and every palette color is not, so object
    pixels are exactly the non-gray ones; shape follows from the fill ratio of
    the object's bounding box.
    """
    h, w, _ = pixels.shape
    labels = np.zeros((h // CELL, w // CELL), dtype=np.int64)
    px = pixels.astype(np.int32)
    colored = (px[..., 0] != px[..., 1]) | (px[..., 1] != px[..., 2])
    for r in range(h // CELL):
        for c in range(w // CELL):
            m = colored[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL]
            if not m.any():
                continue
            ys, xs = np.nonzero(m)
            rgb = tuple(pixels[r * CELL + ys[0], c * CELL + xs[0]])
            color = next(k for k, v in PALETTE.items() if v == rgb)
            box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
            fill = m.sum() / box
            shape = "square" if fill > 0.93 else "circle" if fill > 0.65 else "triangle"
            labels[r, c] = cell_class(shape, color)
    return labels


def _object_phrase(o: SceneObject) -> str:
    return f"a {o.color} {o.shape}"


def render_caption(scene: SceneSpec, rng: np.random.Generator) -> str:
    objs = " and ".join(_object_phrase(o) for o in scene.ordered())
    template = CAPTION_TEMPLATES[rng.integers(len(CAPTION_TEMPLATES))]
    return template.format(objs=objs)


def generate_qa(scene: SceneSpec, rng: np.random.Generator) -> tuple[str, str]:
    shapes = [o.shape for o in scene.objects]
    unique = [s for s in SHAPES if shapes.count(s) == 1]
    kinds = ["count", "exists"]
    if unique:
        kinds.insert(0, "color")
    kind = kinds[rng.integers(len(kinds))]
    if kind == "color":
        shape = unique[rng.integers(len(unique))]
        color = next(o.color for o in scene.objects if o.shape == shape)
        return QA_TEMPLATES["color"].format(shape=shape), color
    if kind == "exists":
        present = {(o.color, o.shape) for o in scene.objects}
        if rng.random() < 0.5:
            o = scene.objects[rng.integers(len(scene.objects))]
            return QA_TEMPLATES["exists"].format(color=o.color, shape=o.shape), "yes"
        absent = [(c, s) for s in SHAPES for c in COLORS if (c, s) not in present]
        c, s = absent[rng.integers(len(absent))]
        return QA_TEMPLATES["exists"].format(color=c, shape=s), "no"
    return QA_TEMPLATES["count"], COUNT_WORDS[len(scene.objects) - 1]


def grammar_terminals() -> set[str]:
    words: set[str] = set(COLORS) | set(SHAPES) | {"a", "and"}
    for t in CAPTION_TEMPLATES + tuple(QA_TEMPLATES.values()):
        words |= set(re.findall(r"[a-z]+", re.sub(r"\{\w+\}", " ", t)))
    return words


@dataclass
class Record:
    id: str
    type: str
    text: str
    cell_labels: list
    answer: Optional[str] = None
    image: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    pixels: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def manifest_entry(self) -> dict:
        entry = {"id": self.id, "type": self.type, "text": self.text,
                 "cell_labels": self.cell_labels}
        if self.type == "qa":
            entry["answer"] = self.answer
        return entry


def generate_record(seed: int, split: str, index: int, image_h: int, image_w: int,
                    kind: Optional[str] = None) -> Record:
    """Record ``index`` of ``split``; depends only on (seed, split, index)."""
    rng = np.random.default_rng([seed, SPLIT_CODES[split], index])
    scene, image = generate_scene(rng, image_h, image_w)
    if kind is None:
        kind = "caption" if index % 2 == 0 else "qa"
    if kind == "caption":
        text, answer = render_caption(scene, rng), None
    else:
        text, answer = generate_qa(scene, rng)
    pixels = render(scene)
    return Record(id=f"{split}-{index:06d}", type=kind, text=text, answer=answer,
                  cell_labels=scene.cell_labels().tolist(), image=image, pixels=pixels)


def generate_split(seed: int, split: str, n: int, image_h: int, image_w: int) -> list[Record]:
    return [generate_record(seed, split, i, image_h, image_w) for i in range(n)]


# ---------------------------------------------------------------------------
# PPM and manifests
# ---------------------------------------------------------------------------

def write_ppm(path, pixels: np.ndarray) -> None:
    h, w, c = pixels.shape
    if c != 3 or pixels.dtype != np.uint8:
        raise ValueError("PPM writer expects uint8 (H, W, 3)")
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise DatasetError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(x) for x in fields[1:])
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    pos += 1
    body = raw[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DatasetError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def load_image(path) -> np.ndarray:
    return to_image(read_ppm(path))


_MANIFEST_FIELDS = {"id", "type", "text", "cell_labels", "answer"}


def write_dataset(records: Iterable[Record], directory, split: str) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = d / f"{split}.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for rec in sorted(records, key=lambda r: r.id):
            if rec.pixels is None:
                raise DatasetError(f"record {rec.id} has no pixels to write")
            write_ppm(d / f"{rec.id}.ppm", rec.pixels)
            f.write(json.dumps(rec.manifest_entry()) + "\n")
    return manifest


def _parse_entry(line: str, where: str) -> dict:
    try:
        entry = json.loads(line)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{where}: malformed JSON ({e.msg})") from None
    if not isinstance(entry, dict):
        raise DatasetError(f"{where}: expected an object")
    unknown = set(entry) - _MANIFEST_FIELDS
    if unknown:
        raise DatasetError(f"{where}: unknown fields {sorted(unknown)}")
    for key in ("id", "type", "text", "cell_labels"):
        if key not in entry:
            raise DatasetError(f"{where}: missing field {key!r}")
    if entry["type"] not in ("caption", "qa"):
        raise DatasetError(f"{where}: bad type {entry['type']!r}")
    if entry["type"] == "qa" and entry.get("answer") not in ANSWERS:
        raise DatasetError(f"{where}: qa record needs an answer from {ANSWERS}")
    if entry["type"] == "caption" and "answer" in entry:
        raise DatasetError(f"{where}: caption record must not carry an answer")
    return entry


def read_dataset(directory, split: str, load_images: bool = True) -> list[Record]:
    d = Path(directory)
    manifest = d / f"{split}.jsonl"
    if not manifest.exists():
        raise DatasetError(f"split {split!r} not found in {d}")
    records = []
    with open(manifest, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            entry = _parse_entry(line, f"{manifest}:{lineno}")
            img_path = d / f"{entry['id']}.ppm"
            if not img_path.exists():
                raise DatasetError(f"missing image file {img_path}")
            rec = Record(id=entry["id"], type=entry["type"], text=entry["text"],
                         cell_labels=entry["cell_labels"], answer=entry.get("answer"))
            if load_images:
                rec.pixels = read_ppm(img_path)
                rec.image = to_image(rec.pixels)
            records.append(rec)
    records.sort(key=lambda r: r.id)
    return records
