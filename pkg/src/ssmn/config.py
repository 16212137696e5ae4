"""Run configuration: plain ``key = value`` files with CLI overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .factors import ModelSpec

OUTPUT_ENV = "SSMN_OUTPUT_DIR"


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_ENV, "runs")


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    output_dir: str = ""
    # patches
    crop_fraction: float = 0.2
    patch_size: int = 32
    ink_threshold: float = 0.98
    use_dt: bool = True
    # model
    use_fgc: bool = True
    use_fp: bool = True
    dual_encoder: bool = False
    min_name_count: int = 2
    # search
    train_beam: int = 5
    eval_beam: int = 100
    target_order: str = "shuffle"
    # optimizer and schedule
    lr: float = 1e-4
    momentum: float = 0.9
    lr_decay: float = 0.95
    laso_lr: float = 1e-4
    amn_max_epochs: int = 5
    amn_patience: int = 3
    amn_min_delta: float = 0.2
    laso_epochs: int = 1
    mn_max_epochs: int = 5
    workers: int = 1

    def __post_init__(self):
        if not self.output_dir:
            self.output_dir = default_output_dir()
        if self.target_order not in ("shuffle", "fixed"):
            raise ValueError(f"target_order must be 'shuffle' or 'fixed', got {self.target_order!r}")
        for name in ("train_beam", "eval_beam", "patch_size", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.crop_fraction <= 1:
            raise ValueError("crop_fraction must lie in (0, 1]")
        if not 0 < self.ink_threshold < 1:
            raise ValueError("ink_threshold must lie in (0, 1)")

    # keys that change the meaning or shape of stored parameters
    ARCH_KEYS = ("patch_size", "crop_fraction", "ink_threshold", "use_dt", "dual_encoder", "min_name_count")

    # where a run reads and writes; kept out of checkpoints so they depend only on the experiment
    LOCATION_KEYS = ("data_dir", "output_dir", "workers")

    def stored_text(self) -> str:
        return self.to_text([f.name for f in fields(self) if f.name not in self.LOCATION_KEYS])

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.patch_size, self.use_fgc, self.use_fp, self.dual_encoder)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self, keys=None) -> str:
        names = [f.name for f in fields(self)] if keys is None else list(keys)
        return "".join(f"{k} = {_format(getattr(self, k))}\n" for k in sorted(names))

    def arch_hash(self) -> str:
        return hashlib.sha256(self.to_text(self.ARCH_KEYS).encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        return cls(**parse_pairs(text, source))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), str(path))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(field_type: str, raw: str, key: str, source: str):
    try:
        if field_type == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if field_type == "int":
            return int(raw)
        if field_type == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"{source}: {key}: cannot parse {raw!r} as {field_type}") from None


def parse_pairs(text: str, source: str = "<config>") -> dict:
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(types[key], raw, key, source)
    return out
