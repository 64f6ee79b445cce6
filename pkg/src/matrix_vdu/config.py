"""Run configuration read from flat ``key = value`` text files.

Blank lines and ``#`` comments are ignored.  Every key maps to one field of
:class:`RunConfig`; unknown keys are rejected.  Documented keys (defaults in
brackets):

    # architecture
    layers [4]  heads [4]  d_model [128]  max_seq [128]  max_image_side [256]
    bias_variant [MODALITY_AWARE]  x_buckets [33]  y_buckets [33]
    max_index_delta [64]  bucket_scheme [linear]  dropout [0.1]  vocab_size [2048]
    # optimisation (pre-training / fine-tuning knobs)
    epochs [20]  batch_size [8]  learning_rate [1e-4]  warmup_steps [200]
    grad_clip [2.0]  finetune_grad_clip [4.0]  finetune_epochs [20]
    optimizer [adamw]  weight_decay [0.01]  bias_lr_scale [1.0]
    beta1 [0.9]  beta2 [0.999]  adam_eps [1e-8]  lower_case [true]  seed [0]
    # pre-training tasks
    tasks [lreg,lred,mlm,ts,ltr,tdi]  mask_rate [0.15]  switch_rate [0.15]
    redact_rate [0.15]  mismatch_rate [0.2]  stop_target [false]
    # runtime
    image_side [0: use max_image_side]
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Union

from .encoder import EncoderConfig
from .pretrain import TASKS, CorruptionRates


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    layers: int = 4
    heads: int = 4
    d_model: int = 128
    max_seq: int = 128
    max_image_side: int = 256
    bias_variant: str = "MODALITY_AWARE"
    x_buckets: int = 33
    y_buckets: int = 33
    max_index_delta: int = 64
    bucket_scheme: str = "linear"
    dropout: float = 0.1
    vocab_size: int = 2048

    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-4
    warmup_steps: int = 200
    grad_clip: float = 2.0
    finetune_grad_clip: float = 4.0
    finetune_epochs: int = 20
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    bias_lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lower_case: bool = True
    seed: int = 0

    tasks: tuple = TASKS
    mask_rate: float = 0.15
    switch_rate: float = 0.15
    redact_rate: float = 0.15
    mismatch_rate: float = 0.2
    stop_target: bool = False

    image_side: int = 0

    def __post_init__(self):
        if self.optimizer.lower() != "adamw":
            raise ConfigError(f"optimizer {self.optimizer!r} unsupported; only adamw is implemented")
        if not self.lower_case:
            raise ConfigError("lower_case=false is unsupported; the tokenizer always lower-cases")
        bad = [t for t in self.tasks if t not in TASKS]
        if bad:
            raise ConfigError(f"unknown pre-training tasks {bad}")
        self.tasks = tuple(self.tasks)
        try:
            self.encoder_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def encoder_config(self, vocab_size: int = 0) -> EncoderConfig:
        return EncoderConfig.from_dict({**asdict(self), "vocab_size": vocab_size or self.vocab_size})

    def rates(self) -> CorruptionRates:
        return CorruptionRates(self.mask_rate, self.switch_rate, self.redact_rate, self.mismatch_rate)

    @property
    def side(self) -> int:
        return self.image_side or self.max_image_side

    def replace(self, **kw) -> "RunConfig":
        return RunConfig(**{**asdict(self), **kw})


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        if kind in ("bool", bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in ("tuple", tuple):
            return tuple(t.strip() for t in raw.split(",") if t.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str, base: RunConfig = None) -> RunConfig:
    kinds = {f.name: f.type for f in fields(RunConfig)}
    values = asdict(base or RunConfig())
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, kinds[key], raw)
    return RunConfig(**values)


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(encoding="utf-8"))


def dump_config(cfg: RunConfig) -> str:
    out = []
    for k, v in asdict(cfg).items():
        if isinstance(v, (tuple, list)):
            v = ",".join(v)
        elif isinstance(v, bool):
            v = str(v).lower()
        out.append(f"{k} = {v}")
    return "\n".join(out) + "\n"
