"""Optimiser, schedule, checkpoints and the pre-training / fine-tuning loops.

Reference mode is single-threaded and sequential: with the same seed,
config and corpus, two runs produce bit-identical metrics logs.  Batch
order and corruption seeds are pure functions of ``(seed, step)``, so a run
resumed from a checkpoint replays the uninterrupted one exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .config import RunConfig
from .document import Document
from .encoder import Ablation, DocInput, EncoderConfig, MatrixEncoder, doc_input
from .finetune import FinetuneHeads, LabelSet, entity_scores, EntityScores
from .numerics import NumericError, cross_entropy
from .pretrain import TASKS, ALPHA, PretrainHeads, combined_loss, corrupt, pretrain_losses
from .tokenizer import Vocab, build_vocab

MAGIC = b"MTRXCKPT"
VERSION = 1


# --------------------------------------------------------------------------
# optimisation


def lr_schedule(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear ramp from 0 to ``base_lr`` over ``warmup_steps``, then constant."""
    if warmup_steps < 0:
        raise ValueError("warmup_steps must be non-negative")
    if warmup_steps == 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


class AdamW:
    """Adaptive moments with decoupled weight decay and global-norm clipping."""

    def __init__(self, named_params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, clip_norm: Optional[float] = None,
                 lr_scale: Optional[dict[str, float]] = None):
        self.params: list[tuple[str, torch.Tensor]] = list(named_params)
        self.betas, self.eps, self.weight_decay, self.clip_norm = betas, eps, weight_decay, clip_norm
        self.lr_scale = lr_scale or {}
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params}
        self.v = {n: torch.zeros_like(p) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def clip(self) -> float:
        """Scale gradients so their global L2 norm is at most ``clip_norm``; return the pre-clip norm."""
        sq = 0.0
        for name, p in self.params:
            if p.grad is None:
                continue
            if not bool(torch.isfinite(p.grad).all()):
                raise NumericError(f"non-finite gradient for parameter {name}")
            sq += float((p.grad * p.grad).sum())
        norm = math.sqrt(sq)
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
            for _, p in self.params:
                if p.grad is not None:
                    p.grad.mul_(scale)
        return norm

    @torch.no_grad()
    def step(self, lr: float) -> float:
        norm = self.clip()
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            plr = lr * self.lr_scale.get(name, 1.0)
            if self.weight_decay and p.dim() >= 2:
                p.mul_(1 - plr * self.weight_decay)
            p.sub_(plr * (m / c1) / ((v / c2).sqrt() + self.eps))
        return norm

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, t: int, m: dict, v: dict) -> None:
        self.t = t
        for n in self.m:
            self.m[n].copy_(m[n])
            self.v[n].copy_(v[n])


# --------------------------------------------------------------------------
# checkpoints


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    vocab: Vocab
    tensors: dict[str, np.ndarray]
    kind: str = "pretrain"
    step: int = 0
    optim_t: int = 0
    torch_rng: bytes = b""
    meta: dict = field(default_factory=dict)


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def save_checkpoint(ck: Checkpoint, path) -> None:
    cfg = asdict(ck.config)
    cfg["tasks"] = list(cfg["tasks"])
    payload = io.BytesIO()
    index = []
    for name in sorted(ck.tensors):
        arr = np.ascontiguousarray(ck.tensors[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": payload.tell(), "nbytes": arr.nbytes})
        payload.write(arr.tobytes())
    blob = payload.getvalue()
    header = {
        "version": VERSION,
        "kind": ck.kind,
        "config": cfg,
        "config_hash": _config_hash(cfg),
        "vocab": ck.vocab.pieces,
        "tensors": index,
        "step": ck.step,
        "optim_t": ck.optim_t,
        "torch_rng": ck.torch_rng.hex(),
        "meta": ck.meta,
        "payload_sha256": hashlib.sha256(blob).hexdigest(),
        "payload_bytes": len(blob),
    }
    head = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    raw = path.read_bytes()
    if raw[:8] != MAGIC or len(raw) < 20:
        raise CheckpointCorruptError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    if len(raw) < 20 + hlen:
        raise CheckpointCorruptError(f"{path} is truncated inside its header")
    header = json.loads(raw[20 : 20 + hlen])
    blob = raw[20 + hlen :]
    if len(blob) != header["payload_bytes"] or hashlib.sha256(blob).hexdigest() != header["payload_sha256"]:
        raise CheckpointCorruptError(f"{path} payload is truncated or corrupted")
    if _config_hash(header["config"]) != header["config_hash"]:
        raise ConfigMismatchError(f"{path}: stored config does not match its hash")
    cfg = dict(header["config"])
    cfg["tasks"] = tuple(cfg["tasks"])
    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return Checkpoint(
        config=RunConfig(**cfg),
        vocab=Vocab(header["vocab"]),
        tensors=tensors,
        kind=header["kind"],
        step=header["step"],
        optim_t=header["optim_t"],
        torch_rng=bytes.fromhex(header["torch_rng"]),
        meta=header["meta"],
    )


ARCH_KEYS = ("layers", "heads", "d_model", "max_seq", "max_image_side", "bias_variant", "x_buckets", "y_buckets",
             "max_index_delta", "bucket_scheme")


def check_compatible(ck: Checkpoint, cfg: RunConfig, skip: Sequence[str] = ()) -> None:
    diff = [k for k in ARCH_KEYS if k not in skip and getattr(ck.config, k) != getattr(cfg, k)]
    if diff:
        raise ConfigMismatchError("config disagrees with checkpoint on " + ", ".join(
            f"{k} ({getattr(cfg, k)} vs {getattr(ck.config, k)})" for k in diff))


def module_tensors(prefix: str, module: nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{n}": p.detach().numpy().copy() for n, p in module.state_dict().items()}


def load_module(prefix: str, module: nn.Module, tensors: dict[str, np.ndarray], strict: bool = True,
                exclude: str = "") -> None:
    sd = {n[len(prefix) + 1 :]: torch.as_tensor(a) for n, a in tensors.items() if n.startswith(prefix + ".")}
    if exclude:
        sd = {n: a for n, a in sd.items() if not n.startswith(exclude)}
    missing, unexpected = module.load_state_dict(sd, strict=False)
    if exclude:
        missing = [n for n in missing if not n.startswith(exclude)]
    if strict and (missing or unexpected):
        raise ConfigMismatchError(f"{prefix}: missing {missing[:3]}, unexpected {unexpected[:3]}")


# --------------------------------------------------------------------------
# shared plumbing


def bias_lr_scale(named, scale: float) -> dict[str, float]:
    """Learning-rate multiplier for the relative-bias tables."""
    return {n: scale for n, _ in named if ".bias.t" in n}


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)


def vocab_for(docs: Sequence[Document], size: int) -> Vocab:
    return build_vocab([w.text for d in docs for w in d.words], size)


def build_encoder(cfg: RunConfig, vocab: Vocab) -> MatrixEncoder:
    return MatrixEncoder(cfg.encoder_config(len(vocab)))


def prepare_inputs(docs: Sequence[Document], vocab: Vocab, cfg: RunConfig, side: Optional[int] = None) -> list[DocInput]:
    side = side or cfg.side
    return [doc_input(d, vocab, side, cfg.max_seq) for d in docs]


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 101]).permutation(n)


def batch_at(step: int, cfg: RunConfig, n: int) -> np.ndarray:
    per_epoch = math.ceil(n / cfg.batch_size)
    epoch, pos = divmod(step, per_epoch)
    order = epoch_order(cfg.seed, epoch, n)
    return order[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]


def steps_per_epoch(cfg: RunConfig, n: int) -> int:
    return math.ceil(n / cfg.batch_size)


def fmt(v: float) -> str:
    return repr(float(v))


# --------------------------------------------------------------------------
# pre-training


class Pretrainer:
    """Owns encoder, heads and optimiser for one pre-training run."""

    def __init__(self, cfg: RunConfig, vocab: Vocab, inputs: Sequence[DocInput], ablation: Ablation = Ablation()):
        self.cfg, self.vocab, self.inputs, self.ablation = cfg, vocab, list(inputs), ablation
        seed_everything(cfg.seed)
        self.model = build_encoder(cfg, vocab)
        self.heads = PretrainHeads(cfg.d_model)
        named = [("encoder." + n, p) for n, p in self.model.named_parameters()]
        named += [("pretrain." + n, p) for n, p in self.heads.named_parameters()]
        self.opt = AdamW(named, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay, cfg.grad_clip,
                         bias_lr_scale(named, cfg.bias_lr_scale))
        self.step = 0
        self.columns = ["step", "lr"] + list(cfg.tasks) + ["total"]

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * steps_per_epoch(self.cfg, len(self.inputs))

    def train_step(self) -> dict[str, float]:
        cfg = self.cfg
        idx = batch_at(self.step, cfg, len(self.inputs))
        clean = [self.inputs[i] for i in idx]
        corrupt_seed = int(np.random.default_rng([cfg.seed, self.step, 202]).integers(2**31))
        corrupted, plans = corrupt(clean, cfg.rates(), corrupt_seed, len(self.vocab), self.vocab.mask_id)
        self.model.train()
        self.heads.train()
        losses = pretrain_losses(self.model, self.heads, clean, corrupted, plans, cfg.tasks, self.ablation, cfg.stop_target)
        total = combined_loss(losses)
        self.opt.zero_grad()
        total.backward()
        lr = lr_schedule(self.step, cfg.learning_rate, cfg.warmup_steps)
        self.opt.step(lr)
        self.step += 1
        row = {"step": self.step, "lr": lr, **{k: float(v.detach()) for k, v in losses.items()}, "total": float(total.detach())}
        return row

    def log_line(self, row: dict) -> str:
        return "\t".join(str(row["step"]) if c == "step" else fmt(row[c]) for c in self.columns)

    def run(self, log_path=None, max_steps: Optional[int] = None, callback: Optional[Callable] = None) -> list[dict]:
        end = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        rows = []
        fh = None
        if log_path is not None:
            new = self.step == 0 or not Path(log_path).exists()
            fh = open(log_path, "w" if new else "a", encoding="utf-8")
            if new:
                fh.write("\t".join(self.columns) + "\n")
        try:
            while self.step < end:
                row = self.train_step()
                rows.append(row)
                if fh:
                    fh.write(self.log_line(row) + "\n")
                if callback:
                    callback(self, row)
        finally:
            if fh:
                fh.close()
        return rows

    def checkpoint(self) -> Checkpoint:
        tensors = {**module_tensors("encoder", self.model), **module_tensors("pretrain", self.heads)}
        for n in self.opt.m:
            tensors["optim.m." + n] = self.opt.m[n].numpy().copy()
            tensors["optim.v." + n] = self.opt.v[n].numpy().copy()
        return Checkpoint(self.cfg, self.vocab, tensors, "pretrain", self.step, self.opt.t,
                          torch.get_rng_state().numpy().tobytes())

    def save(self, path) -> None:
        save_checkpoint(self.checkpoint(), path)

    @classmethod
    def resume(cls, path, inputs: Sequence[DocInput], ablation: Ablation = Ablation()) -> "Pretrainer":
        ck = load_checkpoint(path)
        if ck.kind != "pretrain":
            raise CheckpointError(f"expected a pre-training checkpoint, got {ck.kind!r}")
        tr = cls(ck.config, ck.vocab, inputs, ablation)
        load_module("encoder", tr.model, ck.tensors)
        load_module("pretrain", tr.heads, ck.tensors)
        tr.opt.load_state(
            ck.optim_t,
            {n: torch.as_tensor(ck.tensors["optim.m." + n]) for n in tr.opt.m},
            {n: torch.as_tensor(ck.tensors["optim.v." + n]) for n in tr.opt.v},
        )
        tr.step = ck.step
        torch.set_rng_state(torch.as_tensor(np.frombuffer(ck.torch_rng, dtype=np.uint8).copy()))
        return tr


# --------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneResult:
    scores: Optional[EntityScores]
    accuracy: Optional[float]
    log: list[dict]

    def report(self) -> str:
        if self.scores is not None:
            return self.scores.to_tsv()
        return f"metric\tvalue\naccuracy\t{self.accuracy:.6f}\n"


class Finetuner:
    """Encoder plus tagging/classification heads.

    With ``fresh_bias`` the relative-bias tables are not taken from
    ``pretrained``; they start from zero in whatever variant ``cfg`` names.
    """

    def __init__(self, cfg: RunConfig, vocab: Vocab, task: str, ablation: Ablation = Ablation(),
                 pretrained: Optional[Checkpoint] = None, labels: LabelSet = LabelSet.default(),
                 fresh_bias: bool = False):
        if task not in ("labels", "classify"):
            raise ValueError(f"unknown fine-tuning task {task!r}")
        self.cfg, self.vocab, self.task, self.ablation, self.labels = cfg, vocab, task, ablation, labels
        seed_everything(cfg.seed)
        self.model = build_encoder(cfg, vocab)
        if pretrained is not None:
            check_compatible(pretrained, cfg, ("bias_variant",) if fresh_bias else ())
            load_module("encoder", self.model, pretrained.tensors, exclude="bias." if fresh_bias else "")
        self.heads = FinetuneHeads(cfg.d_model, labels, seed=cfg.seed)
        named = [("encoder." + n, p) for n, p in self.model.named_parameters()]
        named += [("finetune." + n, p) for n, p in self.heads.named_parameters()]
        self.opt = AdamW(named, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay, cfg.finetune_grad_clip,
                         bias_lr_scale(named, cfg.bias_lr_scale))
        self.step = 0

    def _targets(self, inputs: Sequence[DocInput], t_max: int):
        if self.task == "classify":
            return torch.tensor([self.labels.class_id(di.doc.page_class) for di in inputs], dtype=torch.long)
        y = torch.zeros(len(inputs), t_max, dtype=torch.long)
        for b, di in enumerate(inputs):
            for k, w in enumerate(di.doc.words):
                y[b, k] = self.labels.tag_id(w.label)
        return y

    def loss(self, inputs: Sequence[DocInput]) -> torch.Tensor:
        batch, hidden = self.model(inputs, self.ablation)
        y = self._targets(inputs, batch.t_max)
        if self.task == "classify":
            return cross_entropy(self.heads.classifier(hidden[:, 0]), y)
        logits = self.heads.tagger(hidden[:, batch.text_slice])
        wm = batch.word_mask
        return cross_entropy(logits[wm], y[wm])

    def train(self, inputs: Sequence[DocInput], log_path=None, views: Sequence[Sequence[DocInput]] = ()) -> list[dict]:
        """Run ``finetune_epochs`` epochs over ``inputs``.

        ``views`` are extra renderings of the same documents (for example at
        other image sizes); step ``s`` reads view ``s % (1 + len(views))``.
        """
        cfg = self.cfg
        views = [list(inputs), *map(list, views)]
        if any(len(v) != len(inputs) for v in views):
            raise ValueError("every view must hold the same documents as inputs")
        total = cfg.finetune_epochs * steps_per_epoch(cfg, len(inputs))
        rows = []
        fh = open(log_path, "w", encoding="utf-8") if log_path else None
        if fh:
            fh.write("step\tlr\tloss\n")
        try:
            while self.step < total:
                idx = batch_at(self.step, cfg, len(inputs))
                self.model.train()
                view = views[self.step % len(views)]
                loss = self.loss([view[i] for i in idx])
                self.opt.zero_grad()
                loss.backward()
                lr = lr_schedule(self.step, cfg.learning_rate, cfg.warmup_steps)
                self.opt.step(lr)
                self.step += 1
                row = {"step": self.step, "lr": lr, "loss": float(loss.detach())}
                rows.append(row)
                if fh:
                    fh.write(f"{self.step}\t{fmt(lr)}\t{fmt(row['loss'])}\n")
        finally:
            if fh:
                fh.close()
        return rows

    @torch.no_grad()
    def predict(self, inputs: Sequence[DocInput], batch_size: int = 16):
        self.model.eval()
        out = []
        for s in range(0, len(inputs), batch_size):
            chunk = inputs[s : s + batch_size]
            batch, hidden = self.model(chunk, self.ablation)
            if self.task == "classify":
                out += self.heads.classifier(hidden[:, 0]).argmax(-1).tolist()
            else:
                pred = self.heads.tagger(hidden[:, batch.text_slice]).argmax(-1)
                for b, di in enumerate(chunk):
                    out.append([self.labels.tags[t] for t in pred[b, : di.n_words].tolist()])
        return out

    def evaluate(self, inputs: Sequence[DocInput]) -> FinetuneResult:
        pred = self.predict(inputs)
        if self.task == "classify":
            gold = [self.labels.class_id(di.doc.page_class) for di in inputs]
            acc = float(np.mean([p == g for p, g in zip(pred, gold)])) if gold else 0.0
            return FinetuneResult(None, acc, [])
        gold = [[w.label or "O" for w in di.doc.words] for di in inputs]
        return FinetuneResult(entity_scores(pred, gold), None, [])

    def checkpoint(self) -> Checkpoint:
        tensors = {**module_tensors("encoder", self.model), **module_tensors("finetune", self.heads)}
        return Checkpoint(self.cfg, self.vocab, tensors, "finetune", self.step, self.opt.t,
                          torch.get_rng_state().numpy().tobytes(),
                          {"task": self.task, "ablation": asdict(self.ablation)})

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, cfg: Optional[RunConfig] = None) -> "Finetuner":
        if ck.kind != "finetune":
            raise CheckpointError(f"expected a fine-tuned checkpoint, got {ck.kind!r}")
        cfg = cfg or ck.config
        check_compatible(ck, cfg)
        ft = cls(cfg, ck.vocab, ck.meta["task"], Ablation(**ck.meta["ablation"]))
        load_module("encoder", ft.model, ck.tensors)
        load_module("finetune", ft.heads, ck.tensors)
        return ft
