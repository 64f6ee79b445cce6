"""Form-like synthetic pages with rendered bitmaps and BIO ground truth.

Each template is one layout family (the page class).  Content is drawn
first from the seeded generator, then laid out at a font scale; if it does
not fit the page the layout is retried at a smaller scale, so the words and
labels for a given ``(seed, template_id)`` never depend on the retry.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .document import Document, Line, PageImage, RelBox, Word, normalize_box
from .glyphs import ADVANCE, GLYPH_H, render_text, text_extent

TEMPLATES = ("invoice", "receipt", "form", "letter", "report", "ledger", "table", "memo")
CONTENT_W = {
    "invoice": 448,
    "receipt": 320,
    "form": 384,
    "letter": 448,
    "report": 512,
    "ledger": 512,
    "table": 480,
    "memo": 416,
}
ENTITY_TYPES = ("KEY", "VALUE", "HEADER", "OTHER")

PROSE = (
    "the of and to in for on with is was are this that by from at as be it we our your "
    "all new service account please note report summary section details general terms "
    "information customer order payment review period annual quarterly product office "
    "team project plan results status total update request notice first second final "
    "date policy shipping delivery return contact support schedule meeting agenda items "
    "records statement budget overview purpose scope background approval required "
    "number name due invoice amount balance phone address reference company subject "
    "item price code tax department description"
).split()

KEYS = {
    ("invoice", "number"): "number",
    ("invoice", "date"): "date",
    ("due", "date"): "date",
    ("date",): "date",
    ("order", "number"): "number",
    ("order", "date"): "date",
    ("account", "number"): "number",
    ("account", "name"): "name",
    ("customer", "name"): "name",
    ("name",): "name",
    ("contact", "name"): "name",
    ("phone",): "phone",
    ("ship", "to"): "address",
    ("bill", "to"): "address",
    ("address",): "address",
    ("payment", "terms"): "terms",
    ("payment", "method"): "method",
    ("reference",): "code",
    ("policy", "number"): "code",
    ("patient", "id"): "code",
    ("issue", "date"): "date",
    ("company",): "company",
    ("to",): "name",
    ("from",): "name",
    ("subject",): "phrase",
    ("description",): "phrase",
    ("department",): "phrase",
    ("status",): "phrase",
    ("notes",): "phrase",
}
TOTAL_KEYS = {
    ("total",): "amount",
    ("subtotal",): "amount",
    ("tax",): "amount",
    ("amount", "due"): "amount",
    ("balance", "due"): "amount",
    ("total", "amount"): "amount",
    ("discount",): "amount",
}
TABLE_KEYS = {
    ("item",): "item",
    ("qty",): "qty",
    ("unit", "price"): "amount",
    ("price",): "amount",
    ("amount",): "amount",
    ("code",): "code",
    ("date",): "sdate",
}
ITEMS = "coffee tea bread milk paper toner pens cable chair desk lamp folder stapler ink label box tape".split()
FIRST = "john mary alex sara li ana omar eva paul nina tom kate raj lena ivan".split()
LAST = "smith jones brown garcia chen patel kim lopez mueller rossi nguyen silva khan".split()
STREETS = "oak main pine maple cedar elm park lake hill river".split()
SUFFIX = "street avenue road lane drive".split()
CITIES = "boston austin denver seattle dallas miami".split()
MONTHS = "jan feb mar apr may jun jul aug sep oct nov dec".split()
TERMS = [["net", "30"], ["net", "60"], ["due", "on", "receipt"], ["net", "15"]]
METHODS = [["credit", "card"], ["cash"], ["bank", "transfer"], ["check"]]
COMPANIES = [["acme", "corp"], ["globex"], ["initech", "llc"], ["umbrella", "co"], ["stark", "industries"]]


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    page_h: int = 512
    font_scale: int = 2
    min_font_scale: int = 1
    margin: int = 16


# --------------------------------------------------------------------------
# content


def _value(kind: str, rng: np.random.Generator) -> list[str]:
    pick = lambda seq: seq[int(rng.integers(len(seq)))]  # noqa: E731
    if kind == "number":
        return [str(int(rng.integers(1000, 9999999)))]
    if kind == "amount":
        amt = f"{int(rng.integers(1, 9999))}.{int(rng.integers(0, 100)):02d}"
        return ["$", amt] if rng.random() < 0.4 else [amt]
    if kind in ("date", "sdate"):
        d, m, y = int(rng.integers(1, 29)), int(rng.integers(1, 13)), int(rng.integers(2015, 2025))
        if kind == "sdate" or rng.random() < 0.5:
            return [f"{m:02d}/{d:02d}/{y}"]
        return [str(d), MONTHS[m - 1], str(y)]
    if kind == "name":
        return [pick(FIRST), pick(LAST)]
    if kind == "address":
        out = [str(int(rng.integers(1, 999))), pick(STREETS), pick(SUFFIX)]
        return out + [pick(CITIES)] if rng.random() < 0.5 else out
    if kind == "phone":
        return [f"{int(rng.integers(200, 999))}-{int(rng.integers(1000, 9999))}"]
    if kind == "terms":
        return list(pick(TERMS))
    if kind == "method":
        return list(pick(METHODS))
    if kind == "company":
        return list(pick(COMPANIES))
    if kind == "code":
        letters = "".join(chr(97 + int(c)) for c in rng.integers(0, 26, 2))
        return [f"{letters}{int(rng.integers(100, 9999))}"]
    if kind == "item":
        return [pick(ITEMS)]
    if kind == "qty":
        return [str(int(rng.integers(1, 20)))]
    if kind == "phrase":
        return [pick(PROSE) for _ in range(int(rng.integers(1, 4)))]
    raise KeyError(kind)


def _pick_keys(table: dict, k: int, rng: np.random.Generator) -> list[tuple]:
    keys = list(table)
    idx = rng.choice(len(keys), size=min(k, len(keys)), replace=False)
    return [keys[int(i)] for i in idx]


def _phrase(rng, lo, hi) -> list[str]:
    return [PROSE[int(rng.integers(len(PROSE)))] for _ in range(int(rng.integers(lo, hi + 1)))]


def _sentence(rng) -> list[str]:
    words = _phrase(rng, 3, 7)
    words[-1] = words[-1] + "."
    return words


def _kv(table, rng, k, style):
    return [("kv", list(key), _value(table[key], rng), style) for key in _pick_keys(table, k, rng)]


def _content(template: str, rng: np.random.Generator) -> list[tuple]:
    n = lambda lo, hi: int(rng.integers(lo, hi + 1))  # noqa: E731
    blocks: list[tuple] = []
    if template == "invoice":
        blocks.append(("header", _phrase(rng, 1, 2), "center"))
        blocks += _kv(KEYS, rng, n(3, 4), "side")
        if rng.random() < 0.5:
            blocks.append(("note", _phrase(rng, 2, 3)))
        cols = [list(k) for k in _pick_keys(TABLE_KEYS, 3, rng)]
        kinds = [TABLE_KEYS[tuple(c)] for c in cols]
        blocks.append(("table", cols, [[_value(k, rng) for k in kinds] for _ in range(n(2, 3))]))
        blocks += _kv(TOTAL_KEYS, rng, n(1, 2), "right")
    elif template == "receipt":
        blocks.append(("header", _phrase(rng, 1, 2), "center"))
        for _ in range(n(4, 6)):
            blocks.append(("kv", [ITEMS[int(rng.integers(len(ITEMS)))]], _value("amount", rng), "right"))
        blocks += _kv(TOTAL_KEYS, rng, n(1, 2), "right")
        blocks.append(("footer", ["page", str(n(1, 3))]))
    elif template == "form":
        for _ in range(n(2, 3)):
            blocks.append(("header", _phrase(rng, 1, 3), "left"))
            blocks += _kv(KEYS, rng, n(2, 3), "stacked")
    elif template == "letter":
        blocks.append(("header", _phrase(rng, 1, 2), "left"))
        blocks += _kv({("date",): "date"}, rng, 1, "side")
        blocks.append(("prose", [_sentence(rng) for _ in range(n(2, 3))]))
        blocks += _kv({("name",): "name", ("phone",): "phone"}, rng, 2, "side")
    elif template == "report":
        for _ in range(2):
            blocks.append(("header", _phrase(rng, 1, 3), "left"))
            blocks.append(("prose", [_sentence(rng) for _ in range(n(1, 2))]))
        blocks.append(("note", _phrase(rng, 2, 3)))
        blocks.append(("footer", ["page", str(n(1, 9))]))
    elif template == "ledger":
        blocks.append(("header", _phrase(rng, 1, 2), "left"))
        short = {k: v for k, v in KEYS.items() if v not in ("address", "company")}
        keys = _pick_keys(short, 2 * n(2, 3), rng)
        for a, b in zip(keys[0::2], keys[1::2]):
            blocks.append(("kv2", (list(a), _value(short[a], rng)), (list(b), _value(short[b], rng))))
        if rng.random() < 0.5:
            blocks.append(("note", _phrase(rng, 2, 3)))
    elif template == "table":
        blocks.append(("header", _phrase(rng, 1, 2), "center"))
        cols = [list(k) for k in _pick_keys(TABLE_KEYS, 3, rng)]
        kinds = [TABLE_KEYS[tuple(c)] for c in cols]
        blocks.append(("table", cols, [[_value(k, rng) for k in kinds] for _ in range(n(3, 4))]))
        blocks.append(("note", _phrase(rng, 2, 3)))
    elif template == "memo":
        memo = {("to",): "name", ("from",): "name", ("date",): "date", ("subject",): "phrase"}
        blocks += [("kv", list(k), _value(v, rng), "side") for k, v in memo.items()]
        blocks.append(("header", _phrase(rng, 1, 2), "left"))
        blocks.append(("prose", [_sentence(rng) for _ in range(n(1, 2))]))
    else:
        raise GenerationError(f"unknown template {template!r}")
    return blocks


def _tags(words: list[str], etype: Optional[str]) -> list[tuple[str, str]]:
    if etype is None:
        return [(w, "O") for w in words]
    return [(w, ("B-" if k == 0 else "I-") + etype) for k, w in enumerate(words)]


# --------------------------------------------------------------------------
# geometry


class _Overflow(Exception):
    pass


class _Layout:
    def __init__(self, width: int, height: int, scale: int, margin: int):
        self.W, self.H, self.s, self.m = width, height, scale, margin
        self.row_h = (GLYPH_H + 5) * scale
        self.y = margin
        self.rows: list[list[dict]] = []

    def span(self, words) -> int:
        return text_extent(" ".join(w for w, _ in words), self.s)[0]

    def seg(self, x: int, words, underline=False) -> dict:
        if x < self.m or x + self.span(words) > self.W - self.m:
            raise _Overflow
        return {"x": x, "words": words, "underline": underline}

    def row(self, segs: list[dict]) -> None:
        if self.y + GLYPH_H * self.s + 2 * self.s > self.H - self.m:
            raise _Overflow
        for sg in segs:
            sg["y"] = self.y
        self.rows.append(segs)
        self.y += self.row_h

    @property
    def usable(self) -> int:
        return self.W - 2 * self.m

    def place(self, block: tuple) -> None:
        kind = block[0]
        m, s = self.m, self.s
        if kind == "header":
            words = _tags(block[1], "HEADER")
            x = m if block[2] == "left" else (self.W - self.span(words)) // 2
            self.row([self.seg(x, words, underline=True)])
            self.y += s * 2
        elif kind in ("note", "footer"):
            words = _tags(block[1], "OTHER" if kind == "note" else None)
            self.row([self.seg(m, words)])
        elif kind == "kv":
            _, key, value, style = block
            kw, vw = _tags(key, "KEY"), _tags(value, "VALUE")
            if style == "side":
                self.row([self.seg(m, kw), self.seg(m + int(0.45 * self.usable), vw)])
            elif style == "right":
                self.row([self.seg(m, kw), self.seg(self.W - m - self.span(vw), vw)])
            else:
                self.row([self.seg(m, kw)])
                self.row([self.seg(m + 2 * ADVANCE * s, vw)])
        elif kind == "kv2":
            half = self.usable // 2
            pairs = block[1:]
            self.row([self.seg(m + c * half, _tags(k, "KEY")) for c, (k, _) in enumerate(pairs)])
            self.row([self.seg(m + c * half + ADVANCE * s, _tags(v, "VALUE")) for c, (_, v) in enumerate(pairs)])
        elif kind == "table":
            _, cols, rows = block
            colw = self.usable // len(cols)
            heads = [self.seg(m + c * colw, _tags(k, "KEY")) for c, k in enumerate(cols)]
            self._fit_cols(heads, colw)
            self.row(heads)
            for r in rows:
                cells = [self.seg(m + c * colw, _tags(v, "VALUE")) for c, v in enumerate(r)]
                self._fit_cols(cells, colw)
                self.row(cells)
        elif kind == "prose":
            words = [wt for sent in block[1] for wt in _tags(sent, "OTHER")]
            line: list = []
            for wt in words:
                trial = line + [wt]
                if line and self.span(trial) > self.usable:
                    self.row([self.seg(m, line)])
                    line = [wt]
                else:
                    line = trial
            if line:
                self.row([self.seg(m, line)])
        else:
            raise GenerationError(f"unknown block {kind!r}")
        if kind in ("table", "prose"):
            self.y += s * 4

    def _fit_cols(self, segs, colw) -> None:
        for sg in segs:
            if self.span(sg["words"]) > colw - ADVANCE * self.s:
                raise _Overflow


def _layout(blocks, width, height, scale, margin) -> _Layout:
    lay = _Layout(width, height, scale, margin)
    for b in blocks:
        lay.place(b)
    return lay


def generate_synthetic(seed: int, template_id: int, config: GeneratorConfig = GeneratorConfig()) -> Document:
    """Deterministic page for ``(seed, template_id)`` with bitmap and labels."""
    if not 0 <= template_id < len(TEMPLATES):
        raise GenerationError(f"template_id {template_id} not in [0, {len(TEMPLATES)})")
    name = TEMPLATES[template_id]
    rng = np.random.default_rng([seed, template_id])
    blocks = _content(name, rng)
    width, height = CONTENT_W[name], config.page_h
    lay = None
    for scale in range(config.font_scale, config.min_font_scale - 1, -1):
        try:
            lay = _layout(blocks, width, height, scale, config.margin)
            break
        except _Overflow:
            continue
    if lay is None:
        raise GenerationError(f"template {name} (seed {seed}) does not fit even at font scale {config.min_font_scale}")
    s = lay.s
    pixels = np.ones((height, width), dtype=np.float64)
    words: list[Word] = []
    lines: list[Line] = []
    rulings: list[RelBox] = []
    for segs in lay.rows:
        for sg in sorted(segs, key=lambda g: g["x"]):
            lid = len(lines)
            ids, boxes = [], []
            x = sg["x"]
            for text, tag in sg["words"]:
                tw, th = text_extent(text, s)
                render_text(pixels, text, x, sg["y"], s)
                box = normalize_box((x, sg["y"], tw, th), width, height, text)
                ids.append(len(words))
                boxes.append(box)
                words.append(Word(text=text, box=box, line_id=lid, label=tag))
                x += tw + (ADVANCE + 1) * s
            span = x - (ADVANCE + 1) * s - sg["x"]
            lines.append(Line(id=lid, box=normalize_box((sg["x"], sg["y"], span, GLYPH_H * s), width, height), word_ids=tuple(ids)))
            if sg["underline"]:
                uy = sg["y"] + (GLYPH_H + 1) * s
                pixels[uy : uy + s, sg["x"] : sg["x"] + span] = 0.0
                rulings.append(normalize_box((sg["x"], uy, span, s), width, height))
    image = PageImage(pixels, width, height)
    return Document(tuple(words), tuple(lines), width, height, image, name, tuple(rulings))


def generate_corpus(n_docs: int, seed: int, n_templates: int = len(TEMPLATES), config: GeneratorConfig = GeneratorConfig(),
                    split_fracs: tuple[float, float, float] = (0.75, 0.125, 0.125)) -> tuple[list[Document], list[str]]:
    """``n_docs`` pages cycling through the first ``n_templates`` layouts.

    Splits are assigned by position inside each template cycle so every split
    sees every layout family.
    """
    if not 1 <= n_templates <= len(TEMPLATES):
        raise GenerationError(f"n_templates must be in [1, {len(TEMPLATES)}]")
    docs, splits = [], []
    for k in range(n_docs):
        docs.append(generate_synthetic(seed * 1_000_003 + k, k % n_templates, config))
        u = ((k // n_templates) * 0.6180339887498949) % 1.0
        splits.append("train" if u < split_fracs[0] else "val" if u < split_fracs[0] + split_fracs[1] else "test")
    return docs, splits
