"""Training configuration: a flat key=value text format.

Unknown keys are errors; every field has a documented default. The same
flat map is embedded into checkpoints and hashed for reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    # patching and windows
    patch_len: int = 12
    window_patches: int = 25
    window_stride: int = 0  # raw steps between window starts; 0 = one patch
    # model sizes
    hidden_dim: int = 128
    decoder_dim: int = 32
    num_heads: int = 4
    temporal_layers: int = 4
    spatial_layers: int = 4
    decoder_layers: int = 6
    tcn_kernel: int = 3
    max_hop: int = 4
    head_hidden: tuple = (128, 256)
    # prompting
    num_prompts: int = 25
    prompt_threshold: float = 0.5
    single_domain_bank: bool = False
    single_task_bank: bool = False
    # optimization
    lr_pretrain: float = 1e-3
    lr_prompt: float = 5e-3
    weight_decay: float = 1e-4
    epochs_pretrain: int = 50
    epochs_domain: int = 50
    epochs_task: int = 50
    patience: int = 10
    batch_size: int = 8
    mask_ratio: float = 0.75
    tune_head: bool = False
    normalize: bool = True
    # split protocol
    source_train_frac: float = 0.8
    target_train_days: float = 3.0
    target_select_days: float = 3.0

    def __post_init__(self):
        if self.window_stride == 0:
            self.window_stride = self.patch_len
        positive = (
            "patch_len", "window_patches", "hidden_dim", "decoder_dim",
            "num_heads", "tcn_kernel", "num_prompts", "lr_pretrain", "lr_prompt",
            "epochs_pretrain", "epochs_domain", "epochs_task", "patience",
            "batch_size", "window_stride", "source_train_frac",
            "target_train_days", "target_select_days",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("temporal_layers", "spatial_layers", "decoder_layers",
                     "max_hop", "seed", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.decoder_layers < 1:
            raise ConfigError("decoder needs at least one layer")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError("num_heads must divide hidden_dim")
        if self.tcn_kernel % 2 != 1:
            raise ConfigError("tcn_kernel must be odd")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1)")
        if not 0.0 <= self.prompt_threshold <= 1.0:
            raise ConfigError("prompt_threshold must lie in [0, 1]")
        if not 0.0 < self.source_train_frac < 1.0:
            raise ConfigError("source_train_frac must lie in (0, 1)")
        if self.window_stride % self.patch_len != 0:
            raise ConfigError("window_stride must be a multiple of patch_len")
        self.head_hidden = tuple(int(h) for h in self.head_hidden)

    @property
    def window_steps(self) -> int:
        return self.window_patches * self.patch_len

    def to_flat(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                out[f.name] = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                out[f.name] = "true" if v else "false"
            else:
                out[f.name] = repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in flat.items():
            if key not in known:
                raise ConfigError(f"unknown config key: {key!r}")
            default = getattr(cls, key, None)
            if default is None:
                default = known[key].default
            kwargs[key] = _coerce(key, raw, known[key].type)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        flat = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            flat[key.strip()] = value.strip()
        return cls.from_flat(flat)

    def save(self, path: str | Path):
        flat = self.to_flat()
        Path(path).write_text("".join(f"{k}={flat[k]}\n" for k in flat))

    def replace(self, **kwargs) -> "TrainConfig":
        merged = {f.name: getattr(self, f.name) for f in fields(self)}
        merged.update(kwargs)
        return TrainConfig(**merged)


def _coerce(key: str, raw, annot):
    if not isinstance(raw, str):
        return raw
    annot = str(annot)
    try:
        if "bool" in annot:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if "tuple" in annot:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if "int" in annot:
            return int(raw)
        if "float" in annot:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw
