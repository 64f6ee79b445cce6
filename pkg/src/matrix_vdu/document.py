"""Pages, words, lines and the OCR-style JSON ingestion format.

All geometry inside a :class:`Document` lives in the content-relative frame:
``(0, 0)`` is the top-left corner of the non-padded page content and
``(1, 1)`` its bottom-right corner.  Pixel boxes only exist on disk.

OCR-input file (UTF-8 JSON, one page per file)::

    {"image": "doc.png" | null, "content_w": int, "content_h": int,
     "lines": [{"id": int, "box": [l, t, w, h],
                "words": [{"text": str, "box": [l, t, w, h], "label": str?}]}],
     "page_class": str?, "rulings": [[l, t, w, h], ...]?}

A corpus is a directory of such files plus ``manifest.json`` listing each
file with its split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

MIN_EXTENT = 1e-4
BOX_TOL = 1e-9
CONTAIN_TOL = 1e-6
MANIFEST = "manifest.json"
SPLITS = ("train", "val", "test")


class DocumentError(ValueError):
    """Base class for ingestion and validation failures."""


class SchemaError(DocumentError):
    pass


class BoxError(DocumentError):
    pass


class ContainmentError(DocumentError):
    pass


class ImageError(DocumentError):
    pass


class Modality(IntEnum):
    TEXT = 0
    VISION = 1


@dataclass(frozen=True)
class RelBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.x >= -BOX_TOL and self.y >= -BOX_TOL and self.w > 0 and self.h > 0):
            raise BoxError(f"degenerate or negative box {self}")
        if self.x + self.w > 1 + BOX_TOL or self.y + self.h > 1 + BOX_TOL:
            raise BoxError(f"box {self} leaves the unit square")

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    def contains(self, other: "RelBox", tol: float = CONTAIN_TOL) -> bool:
        x1, y1, x2, y2 = self.corners
        a1, b1, a2, b2 = other.corners
        return a1 >= x1 - tol and b1 >= y1 - tol and a2 <= x2 + tol and b2 <= y2 + tol

    @staticmethod
    def union(boxes: Iterable["RelBox"]) -> "RelBox":
        boxes = list(boxes)
        x1 = min(b.x for b in boxes)
        y1 = min(b.y for b in boxes)
        x2 = max(b.x + b.w for b in boxes)
        y2 = max(b.y + b.h for b in boxes)
        return RelBox(x1, y1, x2 - x1, y2 - y1)


FULL_PAGE = RelBox(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class Word:
    text: str
    box: RelBox
    line_id: int
    label: Optional[str] = None


@dataclass(frozen=True)
class Line:
    id: int
    box: RelBox
    word_ids: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class PageImage:
    """Grayscale page, 0 is ink and 1 is background.

    ``pixels`` may extend past the content area (padding); only the top-left
    ``content_h x content_w`` block holds the page.
    """

    pixels: np.ndarray
    content_w: int
    content_h: int

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 2:
            raise ImageError(f"expected a 2-D grayscale array, got shape {p.shape}")
        if not (0 < self.content_w <= p.shape[1] and 0 < self.content_h <= p.shape[0]):
            raise ImageError(f"content {self.content_w}x{self.content_h} exceeds image {p.shape[1]}x{p.shape[0]}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ImageError("pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, PageImage):
            return NotImplemented
        return (
            self.content_w == other.content_w
            and self.content_h == other.content_h
            and self.pixels.shape == other.pixels.shape
            and bool(np.array_equal(self.pixels, other.pixels))
        )


@dataclass(frozen=True)
class Document:
    words: tuple[Word, ...]
    lines: tuple[Line, ...]
    content_w: int
    content_h: int
    image: Optional[PageImage] = None
    page_class: Optional[str] = None
    rulings: tuple[RelBox, ...] = field(default=())

    def __post_init__(self):
        validate(self)

    @property
    def tags(self) -> list[Optional[str]]:
        return [w.label for w in self.words]

    def line_of(self, word_index: int) -> Line:
        return self.lines_by_id[self.words[word_index].line_id]

    @property
    def lines_by_id(self) -> dict[int, Line]:
        return {ln.id: ln for ln in self.lines}


def validate(doc: Document, max_words: Optional[int] = None) -> None:
    if max_words is not None and len(doc.words) > max_words:
        raise DocumentError(f"{len(doc.words)} words exceed the maximum of {max_words}")
    by_id = {}
    for ln in doc.lines:
        if ln.id in by_id:
            raise SchemaError(f"duplicate line id {ln.id}")
        if not ln.word_ids:
            raise SchemaError(f"line {ln.id} has no words")
        by_id[ln.id] = ln
    owner = {}
    for ln in doc.lines:
        for wi in ln.word_ids:
            if not 0 <= wi < len(doc.words):
                raise SchemaError(f"line {ln.id} references missing word {wi}")
            if wi in owner:
                raise SchemaError(f"word {wi} belongs to lines {owner[wi]} and {ln.id}")
            owner[wi] = ln.id
    for wi, w in enumerate(doc.words):
        if not w.text:
            raise SchemaError(f"word {wi} has empty text")
        if owner.get(wi) != w.line_id:
            raise SchemaError(f"word {wi} ({w.text!r}) claims line {w.line_id} but is listed under {owner.get(wi)}")
        ln = by_id[w.line_id]
        if not ln.box.contains(w.box):
            raise ContainmentError(f"word {wi} ({w.text!r}) lies outside the box of line {ln.id}")


# --------------------------------------------------------------------------
# coordinates


def normalize_box(pixel_box: Sequence[float], content_w: int, content_h: int, what: str = "box") -> RelBox:
    """Pixel ``(left, top, width, height)`` to the content-relative frame."""
    if content_w <= 0 or content_h <= 0:
        raise BoxError(f"content size must be positive, got {content_w}x{content_h}")
    left, top, width, height = (float(v) for v in pixel_box)
    if left < 0 or top < 0 or width < 0 or height < 0 or left + width > content_w or top + height > content_h:
        raise BoxError(f"{what} {list(pixel_box)} lies outside the {content_w}x{content_h} content area")
    w = max(width / content_w, MIN_EXTENT)
    h = max(height / content_h, MIN_EXTENT)
    x = min(left / content_w, 1.0 - w)
    y = min(top / content_h, 1.0 - h)
    return RelBox(x, y, w, h)


def denormalize_box(box: RelBox, content_w: int, content_h: int) -> tuple[float, float, float, float]:
    return (box.x * content_w, box.y * content_h, box.w * content_w, box.h * content_h)


def _pixel_list(box: RelBox, cw: int, ch: int) -> list[int]:
    return [int(round(v)) for v in denormalize_box(box, cw, ch)]


# --------------------------------------------------------------------------
# file I/O


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ImageError(f"cannot read image {path}: {exc}") from exc
    return arr


def write_png(path: Path, pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def _require(obj: dict, key: str, kind, where: str):
    if key not in obj:
        raise SchemaError(f"{where}: missing key {key!r}")
    val = obj[key]
    if not isinstance(val, kind) or isinstance(val, bool):
        raise SchemaError(f"{where}: key {key!r} has wrong type {type(val).__name__}")
    return val


def _box(obj: dict, where: str) -> list:
    box = _require(obj, "box", list, where)
    if len(box) != 4 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in box):
        raise SchemaError(f"{where}: box must be four numbers")
    return box


def document_from_json(data: dict, base_dir: Optional[Path] = None, max_words: int = 512) -> Document:
    if not isinstance(data, dict):
        raise SchemaError("top level must be an object")
    cw = _require(data, "content_w", int, "document")
    ch = _require(data, "content_h", int, "document")
    lines_raw = _require(data, "lines", list, "document")
    words, lines = [], []
    for li, ln in enumerate(lines_raw):
        where = f"lines[{li}]"
        if not isinstance(ln, dict):
            raise SchemaError(f"{where}: must be an object")
        lid = _require(ln, "id", int, where)
        lbox = normalize_box(_box(ln, where), cw, ch, f"line {lid}")
        ids = []
        for wj, wd in enumerate(_require(ln, "words", list, where)):
            wwhere = f"{where}.words[{wj}]"
            if not isinstance(wd, dict):
                raise SchemaError(f"{wwhere}: must be an object")
            text = _require(wd, "text", str, wwhere)
            label = wd.get("label")
            if label is not None and not isinstance(label, str):
                raise SchemaError(f"{wwhere}: label must be a string")
            box = normalize_box(_box(wd, wwhere), cw, ch, f"word {text!r}")
            ids.append(len(words))
            words.append(Word(text=text, box=box, line_id=lid, label=label))
        lines.append(Line(id=lid, box=lbox, word_ids=tuple(ids)))
    image = None
    if data.get("image") is not None:
        rel = data["image"]
        if not isinstance(rel, str):
            raise SchemaError("document: image must be a relative path or null")
        path = (base_dir or Path(".")) / rel
        if not path.exists():
            raise ImageError(f"image {path} does not exist")
        image = PageImage(_read_png(path), cw, ch)
    rulings = tuple(normalize_box(b, cw, ch, "ruling") for b in data.get("rulings", []))
    page_class = data.get("page_class")
    if page_class is not None and not isinstance(page_class, str):
        raise SchemaError("document: page_class must be a string")
    doc = Document(tuple(words), tuple(lines), cw, ch, image, page_class, rulings)
    validate(doc, max_words)
    return doc


def load_document(path, max_words: int = 512) -> Document:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    return document_from_json(data, path.parent, max_words)


def document_to_json(doc: Document, image_name: Optional[str] = None) -> dict:
    cw, ch = doc.content_w, doc.content_h
    lines = []
    for ln in doc.lines:
        words = []
        for wi in ln.word_ids:
            w = doc.words[wi]
            entry = {"text": w.text, "box": _pixel_list(w.box, cw, ch)}
            if w.label is not None:
                entry["label"] = w.label
            words.append(entry)
        lines.append({"id": ln.id, "box": _pixel_list(ln.box, cw, ch), "words": words})
    out = {"image": image_name, "content_w": cw, "content_h": ch, "lines": lines}
    if doc.page_class is not None:
        out["page_class"] = doc.page_class
    if doc.rulings:
        out["rulings"] = [_pixel_list(b, cw, ch) for b in doc.rulings]
    return out


def save_document(doc: Document, path) -> None:
    """Write ``doc`` as JSON, with its bitmap next to it as ``<stem>.png``."""
    path = Path(path)
    image_name = None
    if doc.image is not None:
        image_name = path.with_suffix(".png").name
        write_png(path.with_suffix(".png"), doc.image.pixels)
    path.write_text(json.dumps(document_to_json(doc, image_name), indent=1) + "\n", encoding="utf-8")


def write_corpus(out_dir, docs: Sequence[Document], splits: Sequence[str]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (doc, split) in enumerate(zip(docs, splits)):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        name = f"doc_{k:05d}.json"
        save_document(doc, out_dir / name)
        entries.append({"file": name, "split": split})
    manifest = {"version": 1, "documents": entries}
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return out_dir


def read_manifest(corpus_dir) -> list[dict]:
    path = Path(corpus_dir) / MANIFEST
    if not path.exists():
        raise SchemaError(f"{corpus_dir} has no {MANIFEST}")
    data = json.loads(path.read_text(encoding="utf-8"))
    entries = data.get("documents")
    if not isinstance(entries, list):
        raise SchemaError(f"{path}: 'documents' must be a list")
    return entries


def load_corpus(corpus_dir, split: Optional[str] = None, max_words: int = 512) -> list[Document]:
    corpus_dir = Path(corpus_dir)
    docs = []
    for e in read_manifest(corpus_dir):
        if split is None or e.get("split") == split:
            docs.append(load_document(corpus_dir / e["file"], max_words))
    return docs
