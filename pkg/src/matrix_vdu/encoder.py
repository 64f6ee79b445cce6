"""Token assembly, the strided-conv visual backbone and the transformer stack.

A sequence is ``[CLS] + words + visual cells``.  CLS is a TEXT token with
the full-page box; the word tokens are pooled subword embeddings; the
visual tokens are backbone cells, one per 32x32 input patch.  Every token
gets the output of the one shared :class:`SpatialEmbedder` added to it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .attention import BiasTable, BiasVariant, MultiHeadAttention, bias_matrix
from .document import FULL_PAGE, Document, Modality, PageImage
from .numerics import LAYER_NORM_EPS, NumericError, dropout, gelu
from .spatial import SpatialEmbedder, SpatialFeature, visual_positions
from .tokenizer import EmbeddingTable, Vocab, tokenize

REDUCTION = 32
BACKBONE_CHANNELS = (16, 32, 64, 128)


@dataclass
class EncoderConfig:
    layers: int = 4
    heads: int = 4
    d_model: int = 128
    max_seq: int = 128
    bias_variant: str = "MODALITY_AWARE"
    max_image_side: int = 256
    reduction: int = REDUCTION
    x_buckets: int = 33
    y_buckets: int = 33
    max_index_delta: int = 64
    bucket_scheme: str = "linear"
    dropout: float = 0.1
    vocab_size: int = 2048

    def __post_init__(self):
        BiasVariant(self.bias_variant)
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.reduction != REDUCTION:
            raise ValueError(f"reduction is fixed at {REDUCTION}")
        if self.max_image_side % self.reduction:
            raise ValueError(f"max_image_side {self.max_image_side} not a multiple of {self.reduction}")

    @property
    def max_visual(self) -> int:
        return (self.max_image_side // self.reduction) ** 2

    @property
    def index_norm(self) -> int:
        """Divisor turning integer token indices into ``[0, 1]`` fractions."""
        return 1 + self.max_seq + self.max_visual

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class Ablation:
    """Modality switches; everything on is the full model."""

    spatial: bool = True
    visual: bool = True
    bias: bool = True


LADDER = {
    "text-only": Ablation(spatial=False, visual=False, bias=False),
    "+bias": Ablation(spatial=False, visual=False, bias=True),
    "+spatial": Ablation(spatial=True, visual=False, bias=True),
    "+visual": Ablation(spatial=True, visual=True, bias=True),
}


# --------------------------------------------------------------------------
# images


@dataclass
class PreparedImage:
    """Resized page padded to a multiple of the reduction ratio."""

    pixels: np.ndarray
    content_w: int
    content_h: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.pixels.shape[0] // REDUCTION, self.pixels.shape[1] // REDUCTION

    @property
    def content_frac(self) -> tuple[float, float]:
        return self.content_w / self.pixels.shape[1], self.content_h / self.pixels.shape[0]


def prepare_image(image: PageImage, side: int, pad_value: float = 0.0) -> PreparedImage:
    """Scale the content so its long side is ``side`` and pad to multiples of 32."""
    content = image.pixels[: image.content_h, : image.content_w]
    scale = side / max(image.content_w, image.content_h)
    nw = max(1, int(round(image.content_w * scale)))
    nh = max(1, int(round(image.content_h * scale)))
    if (nw, nh) == (image.content_w, image.content_h):
        resized = content.astype(np.float64)
    else:
        im = Image.fromarray(content.astype(np.float32), mode="F").resize((nw, nh), Image.Resampling.BILINEAR)
        resized = np.clip(np.asarray(im, dtype=np.float64), 0.0, 1.0)
    ph = -(-nh // REDUCTION) * REDUCTION
    pw = -(-nw // REDUCTION) * REDUCTION
    out = np.full((ph, pw), pad_value, dtype=np.float64)
    out[:nh, :nw] = resized
    return PreparedImage(out, nw, nh)


class LayerNorm2d(nn.Module):
    """Channel-wise layer norm at every spatial position (size independent)."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=LAYER_NORM_EPS)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class VisualBackbone(nn.Module):
    """Five stride-2 3x3 conv blocks: one ``d_model`` feature per 32x32 patch."""

    def __init__(self, d_model: int):
        super().__init__()
        chans = (1,) + BACKBONE_CHANNELS + (d_model,)
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, stride=2, padding=1) for a, b in zip(chans, chans[1:]))
        self.norms = nn.ModuleList(LayerNorm2d(b) for b in chans[1:])

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        """``(B, 1, H, W)`` with H, W multiples of 32 -> ``(B, d_model, H/32, W/32)``."""
        if pixels.shape[-1] % REDUCTION or pixels.shape[-2] % REDUCTION:
            raise ValueError(f"image {tuple(pixels.shape[-2:])} not padded to a multiple of {REDUCTION}")
        x = pixels
        for conv, norm in zip(self.convs, self.norms):
            x = gelu(norm(conv(x)))
        return x


def visual_backbone(image: PageImage, config: EncoderConfig, backbone: VisualBackbone, side: Optional[int] = None) -> torch.Tensor:
    """Grid of features for a page resized to ``side`` (default the config maximum)."""
    side = side or config.max_image_side
    if side % REDUCTION:
        raise ValueError(f"image side {side} not a multiple of {REDUCTION}")
    prep = prepare_image(image, side)
    if max(prep.content_w, prep.content_h) > side:
        raise ValueError(f"image exceeds {side} px after resizing")
    x = torch.as_tensor(prep.pixels)[None, None]
    return backbone(x)[0]


# --------------------------------------------------------------------------
# per-document inputs


@dataclass
class DocInput:
    """Everything the model reads from one page, already tokenised and resized.

    ``pieces`` holds the subword ids of each word; corruption edits them in
    place of the raw text.  ``boxes`` are content-relative ``(x, y, w, h)``.
    """

    pieces: list[list[int]]
    boxes: np.ndarray
    line_ids: np.ndarray
    image: Optional[PreparedImage] = None
    doc: Optional[Document] = field(default=None, repr=False, compare=False)

    @property
    def n_words(self) -> int:
        return len(self.pieces)


def doc_input(doc: Document, vocab: Vocab, side: Optional[int] = None, max_seq: Optional[int] = None) -> DocInput:
    if max_seq is not None and len(doc.words) > max_seq:
        raise ValueError(
            f"document has {len(doc.words)} words but max_seq is {max_seq}; truncate the corpus explicitly"
        )
    pieces = [tokenize(w.text, vocab) for w in doc.words]
    boxes = np.array([[w.box.x, w.box.y, w.box.w, w.box.h] for w in doc.words], dtype=np.float64).reshape(-1, 4)
    line_ids = np.array([w.line_id for w in doc.words], dtype=np.int64)
    image = prepare_image(doc.image, side) if (doc.image is not None and side) else None
    return DocInput(pieces, boxes, line_ids, image, doc)


@dataclass
class TokenSequence:
    embeddings: torch.Tensor
    spatial: torch.Tensor
    modality: torch.Tensor
    valid: torch.Tensor
    indices: torch.Tensor
    text_count: int
    grid: Optional[tuple[int, int]] = None

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def visual_count(self) -> int:
        return self.n - 1 - self.text_count


@dataclass
class Batch:
    """Padded region layout ``[CLS | words (Tmax) | visual (Vmax)]``."""

    x: torch.Tensor
    spatial: torch.Tensor
    modality: torch.Tensor
    valid: torch.Tensor
    indices: torch.Tensor
    text_counts: list[int]
    grids: list[Optional[tuple[int, int]]]
    t_max: int
    v_max: int

    @property
    def text_slice(self) -> slice:
        return slice(1, 1 + self.t_max)

    @property
    def visual_slice(self) -> slice:
        return slice(1 + self.t_max, 1 + self.t_max + self.v_max)

    @property
    def word_mask(self) -> torch.Tensor:
        return self.valid[:, self.text_slice]


def collate(seqs: Sequence[TokenSequence]) -> Batch:
    t_max = max(s.text_count for s in seqs)
    v_max = max(s.visual_count for s in seqs)
    n = 1 + t_max + v_max
    B, d = len(seqs), seqs[0].embeddings.shape[1]
    dtype = seqs[0].embeddings.dtype
    x = torch.zeros(B, n, d, dtype=dtype)
    sp = torch.zeros(B, n, 5, dtype=dtype)
    mod = torch.zeros(B, n, dtype=torch.long)
    valid = torch.zeros(B, n, dtype=torch.bool)
    idx = torch.zeros(B, n, dtype=torch.long)
    rows = []
    for b, s in enumerate(seqs):
        t, v = s.text_count, s.visual_count
        dst = torch.cat([torch.arange(0, 1 + t), torch.arange(1 + t_max, 1 + t_max + v)])
        rows.append(dst)
        x = x.index_put((torch.full_like(dst, b), dst), s.embeddings)
        sp[b, dst] = s.spatial
        mod[b, dst] = s.modality
        valid[b, dst] = s.valid
        idx[b, dst] = s.indices
    return Batch(x, sp, mod, valid, idx, [s.text_count for s in seqs], [s.grid for s in seqs], t_max, v_max)


# --------------------------------------------------------------------------
# model


class EncoderBlock(nn.Module):
    def __init__(self, d_model: int, heads: int, p_drop: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model, eps=LAYER_NORM_EPS)
        self.attn = MultiHeadAttention(d_model, heads)
        self.ln2 = nn.LayerNorm(d_model, eps=LAYER_NORM_EPS)
        self.ff1 = nn.Linear(d_model, 4 * d_model)
        self.ff2 = nn.Linear(4 * d_model, d_model)
        self.p = p_drop

    def forward(self, x, bias, valid):
        h = x + dropout(self.attn(self.ln1(x), bias, valid), self.p, self.training)
        h = h + dropout(self.ff2(gelu(self.ff1(self.ln2(h)))), self.p, self.training)
        return h * valid[..., None].to(h.dtype)


class MatrixEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.embed = EmbeddingTable(config.vocab_size, d)
        self.cls = nn.Parameter(torch.randn(d) * 0.02)
        self.spatial = SpatialEmbedder(d)
        self.backbone = VisualBackbone(d)
        self.vis_proj = nn.Linear(d, d)
        self.bias = BiasTable(
            BiasVariant(config.bias_variant), config.heads, config.x_buckets, config.y_buckets,
            config.max_index_delta, config.bucket_scheme,
        )
        # the summed embeddings are small next to the block outputs; without this
        # norm the per-token box/text signal is drowned after the first block
        self.emb_norm = nn.LayerNorm(d, eps=LAYER_NORM_EPS)
        self.blocks = nn.ModuleList(EncoderBlock(d, config.heads, config.dropout) for _ in range(config.layers))
        self.final_norm = nn.LayerNorm(d, eps=LAYER_NORM_EPS)

    # -- assembly --------------------------------------------------------

    def visual_features(self, inputs: Sequence[DocInput]) -> list[Optional[torch.Tensor]]:
        """Backbone grids per document, batching pages of equal padded size."""
        out: list[Optional[torch.Tensor]] = [None] * len(inputs)
        groups: dict[tuple, list[int]] = {}
        for k, di in enumerate(inputs):
            if di.image is not None:
                groups.setdefault(di.image.pixels.shape, []).append(k)
        for shape in sorted(groups):
            ks = groups[shape]
            px = torch.as_tensor(np.stack([inputs[k].image.pixels for k in ks]))[:, None]
            feats = self.backbone(px)
            for j, k in enumerate(ks):
                out[k] = feats[j]
        return out

    def assemble(self, di: DocInput, ablation: Ablation = Ablation(), grid_feats: Optional[torch.Tensor] = None,
                 word_emb: Optional[torch.Tensor] = None) -> TokenSequence:
        cfg = self.config
        nw = di.n_words
        if nw > cfg.max_seq:
            raise ValueError(f"{nw} words exceed max_seq={cfg.max_seq}; truncate the corpus explicitly")
        d = cfg.d_model
        dtype = self.cls.dtype
        norm = cfg.index_norm
        sp = [SpatialFeature.of(0, norm, FULL_PAGE).as_tuple()]
        sp += [(min((k + 1) / norm, 1.0), *map(float, di.boxes[k])) for k in range(nw)]
        tokens = [self.cls[None]]
        if nw:
            tokens.append(self.embed.pooled(di.pieces) if word_emb is None else word_emb)
        modality = [Modality.TEXT] * (1 + nw)
        valid = [True] * (1 + nw)
        grid = None
        if ablation.visual and di.image is not None:
            if grid_feats is None:
                grid_feats = self.backbone(torch.as_tensor(di.image.pixels)[None, None])[0]
            gh, gw = grid_feats.shape[1:]
            fw, fh = di.image.content_frac
            feats, vvalid = visual_positions(gh, gw, fw, fh, nw, norm)
            sp += [f.as_tuple() for f in feats]
            tokens.append(self.vis_proj(grid_feats.flatten(1).T))
            modality += [Modality.VISION] * (gh * gw)
            valid += vvalid
            grid = (gh, gw)
        spatial = torch.tensor(sp, dtype=dtype)
        emb = torch.cat(tokens, 0)
        if ablation.spatial:
            emb = emb + self.spatial(spatial)
        n = emb.shape[0]
        return TokenSequence(
            embeddings=emb,
            spatial=spatial,
            modality=torch.tensor([int(m) for m in modality], dtype=torch.long),
            valid=torch.tensor(valid, dtype=torch.bool),
            indices=torch.arange(n, dtype=torch.long),
            text_count=nw,
            grid=grid,
        )

    # -- transformer -----------------------------------------------------

    def encode(self, batch: Batch, ablation: Ablation = Ablation()) -> torch.Tensor:
        bias = bias_matrix(batch.spatial, batch.indices, batch.modality, self.bias) if ablation.bias else None
        h = self.emb_norm(batch.x) * batch.valid[..., None].to(batch.x.dtype)
        for k, blk in enumerate(self.blocks):
            h = blk(h, bias, batch.valid)
            if not bool(torch.isfinite(h).all()):
                raise NumericError(f"non-finite activations after encoder layer {k}")
        return self.final_norm(h) * batch.valid[..., None].to(h.dtype)

    def forward(self, inputs: Sequence[DocInput], ablation: Ablation = Ablation(),
                word_embs: Optional[Sequence[torch.Tensor]] = None) -> tuple[Batch, torch.Tensor]:
        grids = self.visual_features(inputs) if ablation.visual else [None] * len(inputs)
        seqs = [
            self.assemble(di, ablation, g, None if word_embs is None else word_embs[k])
            for k, (di, g) in enumerate(zip(inputs, grids))
        ]
        batch = collate(seqs)
        return batch, self.encode(batch, ablation)


def assemble(model: MatrixEncoder, document: Document, vocab: Vocab, image: Optional[PageImage] = None,
             ablation: Ablation = Ablation(), side: Optional[int] = None) -> TokenSequence:
    """Build the token sequence of one page (image defaults to the page's own)."""
    if len(document.words) > model.config.max_seq:
        raise ValueError(
            f"document has {len(document.words)} words but max_seq is {model.config.max_seq}; "
            "truncate the corpus explicitly"
        )
    di = doc_input(document, vocab, None)
    img = image if image is not None else document.image
    if img is not None:
        di.image = prepare_image(img, side or model.config.max_image_side)
    return model.assemble(di, ablation)


def visual_grid(batch: Batch, hidden: torch.Tensor, b: int) -> torch.Tensor:
    """Vision-token outputs of document ``b`` as a ``(d, gh, gw)`` grid."""
    gh, gw = batch.grids[b]
    v = hidden[b, batch.visual_slice][: gh * gw]
    return v.T.reshape(-1, gh, gw)
