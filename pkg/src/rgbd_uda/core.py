"""Shared types, run configuration, named RNG streams and checkpoint I/O."""

from __future__ import annotations

import ast
import dataclasses
import io
import zipfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

IGNORE_INDEX = 255
PYRAMID_STRIDES = (4, 8, 16, 32)


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class ShapeMismatchError(CheckpointError):
    def __init__(self, name: str, expected, got):
        super().__init__(f"shape mismatch for parameter '{name}': expected {tuple(expected)}, got {tuple(got)}")
        self.name = name


# ---------------------------------------------------------------------------
# domain types


def check_image(data: torch.Tensor, role: str = "image") -> torch.Tensor:
    """Validate an image tensor [B, C, H, W] with finite values."""
    if data.ndim != 4:
        raise ValueError(f"{role}: expected [batch, channels, height, width], got shape {tuple(data.shape)}")
    if data.shape[2] <= 0 or data.shape[3] <= 0:
        raise ValueError(f"{role}: empty spatial size {tuple(data.shape)}")
    if not torch.isfinite(data).all():
        raise ValueError(f"{role}: contains NaN/Inf")
    return data


def check_labels(data: torch.Tensor, num_classes: int) -> torch.Tensor:
    if data.ndim != 3:
        raise ValueError(f"labels: expected [batch, height, width], got {tuple(data.shape)}")
    valid = data != IGNORE_INDEX
    if valid.any() and (data[valid].min() < 0 or data[valid].max() >= num_classes):
        raise ValueError(f"labels: values outside [0, {num_classes}) that are not IGNORE ({IGNORE_INDEX})")
    return data


@dataclass
class FeaturePyramid:
    """Four encoder levels at strides 4, 8, 16, 32."""

    features: list[torch.Tensor]
    strides: tuple[int, ...] = PYRAMID_STRIDES

    def __post_init__(self):
        if len(self.features) != len(self.strides):
            raise ValueError(f"pyramid has {len(self.features)} levels, expected {len(self.strides)}")

    def __len__(self):
        return len(self.features)

    def __iter__(self):
        return iter(self.features)

    def __getitem__(self, i):
        return self.features[i]

    def check_input_size(self, input_hw: tuple[int, int]) -> None:
        h, w = input_hw
        for f, s in zip(self.features, self.strides):
            want = (-(-h // s), -(-w // s))
            if tuple(f.shape[-2:]) != want:
                raise ValueError(f"stride {s} level has size {tuple(f.shape[-2:])}, expected {want}")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    num_classes: int = 6
    input_size: int = 64
    block_size_px: int = 64
    ratio_start: float = 0.7
    ratio_end: float = 0.3
    pool_factors_train: list[int] = field(default_factory=lambda: [4, 2, 1, 1])
    pool_factors_eval: list[int] = field(default_factory=lambda: [2, 1, 1, 1])
    ema_momentum: float = 0.999
    lr_depth: float = 6e-5
    lr_head: float = 6e-4
    lr_rgb: float = 6e-5
    weight_decay: float = 0.01
    warmup_iters: int = 1500
    poly_power: float = 0.9
    total_iters: int = 2000
    batch_size: int = 2
    seed: int = 0
    # architecture
    rgb_widths: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    depth_widths: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    rgb_depths: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    depth_depths: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    head_width: int = 64
    use_depth: bool = True
    freeze_rgb: bool = True
    fusion_mode: str = "local_global"  # local_global | local | global | add
    fuse_bn_momentum: float = 0.1
    fuse_gamma_init: float = 1.0
    # masking
    masking: str = "complementary"  # complementary | per_level | independent | rgb | none
    # batch composition (rows of the batch ablation); default is full + masked mix
    full_batch: bool = True
    mask_src: bool = False
    mask_mix: bool = True
    loss_weight_full: float = 1.0
    loss_weight_masked: float = 1.0
    # self-training
    pseudo_threshold: float = 0.968
    pseudo_weighting: bool = True
    color_jitter: float = 0.2
    blur_sigma_min: float = 0.15
    blur_sigma_max: float = 1.15
    # io
    source_dir: str = ""
    target_dir: str = ""
    val_dir: str = ""
    out_dir: str = "runs/default"
    rgb_init: str = ""
    name_map: str = ""
    log_every: int = 50
    ckpt_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("ratio_start", "ratio_end", "ema_momentum", "pseudo_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        for name in ("lr_depth", "lr_head", "lr_rgb", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.num_classes < 1 or self.num_classes >= IGNORE_INDEX:
            raise ConfigError(f"num_classes={self.num_classes} invalid")
        if self.block_size_px < 1:
            raise ConfigError("block_size_px must be >= 1")
        if self.total_iters < 0 or self.warmup_iters < 0:
            raise ConfigError("iteration counts must be non-negative")
        for name in ("pool_factors_train", "pool_factors_eval"):
            v = getattr(self, name)
            if len(v) != 4 or any(p < 1 for p in v):
                raise ConfigError(f"{name} must be four factors >= 1")
        for name in ("rgb_widths", "depth_widths", "rgb_depths", "depth_depths"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"{name} must have four entries")
        if self.fusion_mode not in ("local_global", "local", "global", "add"):
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.masking not in ("complementary", "per_level", "independent", "rgb", "none"):
            raise ConfigError(f"unknown masking {self.masking!r}")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in self.to_dict().items())

    @classmethod
    def loads(cls, text: str, overrides: Mapping[str, str] | None = None) -> "RunConfig":
        values: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        values.update(overrides or {})
        return cls.from_strings(values)

    @classmethod
    def parse_values(cls, values: Mapping[str, str]) -> dict[str, Any]:
        """Typed values for a subset of keys; unknown keys are an error."""
        valid = cls.keys()
        unknown = sorted(set(values) - set(valid))
        if unknown:
            raise ConfigError(f"unknown config key(s) {unknown}; valid keys: {', '.join(valid)}")
        types = {f.name: f.default if f.default is not dataclasses.MISSING else f.default_factory()
                 for f in dataclasses.fields(cls)}
        return {k: _coerce(k, v, types[k]) for k, v in values.items()}

    @classmethod
    def from_strings(cls, values: Mapping[str, str]) -> "RunConfig":
        return cls(**cls.parse_values(values))

    @classmethod
    def from_file(cls, path, overrides: Mapping[str, str] | None = None) -> "RunConfig":
        return cls.loads(Path(path).read_text(), overrides)


def _coerce(key: str, raw: str, default):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, str):
        try:
            v = ast.literal_eval(raw)
            return v if isinstance(v, str) else raw
        except (ValueError, SyntaxError):
            return raw
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        v = ast.literal_eval(raw)
    except (ValueError, SyntaxError) as e:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from e
    if isinstance(default, float) and isinstance(v, int):
        v = float(v)
    if isinstance(default, list) and isinstance(v, tuple):
        v = list(v)
    if type(v) is not type(default):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {raw!r}")
    return v


# ---------------------------------------------------------------------------
# RNG


def seeded_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent deterministic generator for the named stream."""
    return np.random.default_rng([seed, zlib.crc32(stream.encode())])


def torch_generator(seed: int, stream: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seeded_rng(seed, stream).integers(2**62)))
    return g


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: a stored (uncompressed) zip with
#   manifest.txt    one "name shape dtype" line per array, shape as 2x3x4 (or "scalar")
#   config.txt      RunConfig key = value lines
#   meta.txt        iteration = N
#   arrays/<name>   raw little-endian bytes

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: RunConfig | None = None
    iteration: int = 0


def _format_shape(shape) -> str:
    return "x".join(str(s) for s in shape) if len(shape) else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(s) for s in text.split("x"))


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(state: Checkpoint, path) -> None:
    manifest = []
    blobs = []
    for name, arr in state.params.items():
        arr = np.asarray(arr)
        if " " in name or "\n" in name:
            raise CheckpointError(f"invalid parameter name {name!r}")
        if arr.dtype.kind == "f" and not np.isfinite(arr).all():
            raise CheckpointError(f"parameter '{name}' has non-finite values")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        manifest.append(f"{name} {_format_shape(arr.shape)} {le.dtype.str}\n")
        blobs.append((name, np.ascontiguousarray(le).tobytes()))
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _write_entry(zf, "manifest.txt", "".join(manifest).encode())
        _write_entry(zf, "config.txt", (state.config.dumps() if state.config else "").encode())
        _write_entry(zf, "meta.txt", f"iteration = {int(state.iteration)}\n".encode())
        for name, data in blobs:
            _write_entry(zf, f"arrays/{name}", data)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = zf.read("manifest.txt").decode()
            config_text = zf.read("config.txt").decode()
            meta = zf.read("meta.txt").decode()
            params = {}
            for line in manifest.splitlines():
                if not line.strip():
                    continue
                name, shape_text, dtype_text = line.split()
                shape = _parse_shape(shape_text)
                dtype = np.dtype(dtype_text)
                data = zf.read(f"arrays/{name}")
                count = int(np.prod(shape)) if shape else 1
                if len(data) != count * dtype.itemsize:
                    got = (len(data) // dtype.itemsize,)
                    raise ShapeMismatchError(name, shape, got)
                params[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    except (zipfile.BadZipFile, KeyError, EOFError, ValueError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    config = RunConfig.loads(config_text) if config_text.strip() else None
    iteration = int(meta.split("=", 1)[1])
    return Checkpoint(params=params, config=config, iteration=iteration)


def state_dict_to_numpy(sd: Mapping[str, torch.Tensor]) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in sd.items()}
