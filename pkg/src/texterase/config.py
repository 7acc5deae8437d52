"""Model scale presets, validation, and flat key-value config files.

The preset depth/channel/head tables follow the public configurations of the
Swin, Swin v2, and PVT backbone families; the last decoder stage is
parameterized separately (see ``dec_last``).
"""

from __future__ import annotations

import dataclasses
from collections import namedtuple
from typing import Sequence

BLOCK_TYPES = ("swin", "swinv2", "pvt")

DecLast = namedtuple(
    "DecLast",
    ["in_channels", "out_channels", "depth", "heads", "sra_reduction", "ffn_expansion"],
)


class UnknownPresetError(KeyError):
    pass


class ConfigFormatError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    block_type: str
    enc_depths: tuple  # N_i^enc, 4 stages
    enc_channels: tuple  # C_i^enc
    enc_heads: tuple
    dec_last_depth: int
    dec_last_in_channels: int
    dec_last_out_channels: int
    dec_last_heads: int
    window_size: int = 8
    sra_reduction: int = 8  # stage-1 KV reduction for pvt; halves per stage
    ffn_expansion: float = 4.0
    dec_last_sra_reduction: int = 16
    dec_last_ffn_expansion: float = 4.0
    input_size: int = 512

    def __post_init__(self):
        object.__setattr__(self, "enc_depths", tuple(self.enc_depths))
        object.__setattr__(self, "enc_channels", tuple(self.enc_channels))
        object.__setattr__(self, "enc_heads", tuple(self.enc_heads))

    # Decoder stages 1-4 mirror the encoder.
    @property
    def dec_depths(self):
        d = tuple(self.enc_depths[4 - i - 1] for i in range(4))
        return d + (self.dec_last_depth,)

    @property
    def dec_channels(self):
        """Output channels of each decoder stage's patch splitting layer."""
        c = tuple(self.enc_channels[3 - i - 1] for i in range(3))
        return c + (self.dec_last_in_channels, self.dec_last_out_channels)

    @property
    def dec_heads(self):
        h = tuple(self.enc_heads[4 - i - 1] for i in range(4))
        return h + (self.dec_last_heads,)

    @property
    def dec_last(self) -> DecLast:
        return DecLast(
            in_channels=self.dec_last_in_channels,
            out_channels=self.dec_last_out_channels,
            depth=self.dec_last_depth,
            heads=self.dec_last_heads,
            sra_reduction=self.dec_last_sra_reduction,
            ffn_expansion=self.dec_last_ffn_expansion,
        )


_SWIN_TABLES = {
    "tiny": dict(depths=(2, 2, 6, 2), channels=(96, 192, 384, 768), heads=(3, 6, 12, 24)),
    "small": dict(depths=(2, 2, 18, 2), channels=(96, 192, 384, 768), heads=(3, 6, 12, 24)),
    "base": dict(depths=(2, 2, 18, 2), channels=(128, 256, 512, 1024), heads=(4, 8, 16, 32)),
}

_PVT_TABLES = {
    "tiny": dict(depths=(2, 2, 2, 2)),
    "small": dict(depths=(3, 4, 6, 3)),
    "medium": dict(depths=(3, 4, 18, 3)),
    "large": dict(depths=(3, 8, 27, 3)),
}

PRESET_NAMES = (
    "swin-tiny", "swin-small", "swin-base",
    "swinv2-tiny", "swinv2-small", "swinv2-base",
    "pvt-tiny", "pvt-small", "pvt-medium", "pvt-large",
    "nano",
)


def preset(name: str) -> ModelConfig:
    """Return the named scale preset.

    Raises UnknownPresetError for names outside PRESET_NAMES.
    """
    if name == "nano":
        # Desk-scale test preset: exercises every stage at input_size 64.
        return ModelConfig(
            block_type="swinv2",
            enc_depths=(1, 1, 2, 1),
            enc_channels=(16, 32, 64, 128),
            enc_heads=(1, 2, 4, 8),
            dec_last_depth=2,
            dec_last_in_channels=8,  # C_3^dec / 2
            dec_last_out_channels=4,  # C_3^dec / 4
            dec_last_heads=2,
            window_size=4,
            input_size=64,
        )
    if name.startswith(("swin-", "swinv2-")):
        block, _, flavor = name.partition("-")
        table = _SWIN_TABLES.get(flavor)
        if table is None:
            raise UnknownPresetError(f"unknown preset: {name!r}")
        c1 = table["channels"][0]
        return ModelConfig(
            block_type=block,
            enc_depths=table["depths"],
            enc_channels=table["channels"],
            enc_heads=table["heads"],
            dec_last_depth=2,
            dec_last_in_channels=c1 // 2,
            dec_last_out_channels=c1 // 4,
            dec_last_heads=2,
            window_size=7 if block == "swin" else 8,
        )
    if name.startswith("pvt-"):
        flavor = name[len("pvt-"):]
        table = _PVT_TABLES.get(flavor)
        if table is None:
            raise UnknownPresetError(f"unknown preset: {name!r}")
        return ModelConfig(
            block_type="pvt",
            enc_depths=table["depths"],
            enc_channels=(64, 128, 320, 512),
            enc_heads=(1, 2, 5, 8),
            dec_last_depth=2,
            dec_last_in_channels=32,
            dec_last_out_channels=32,
            dec_last_heads=1,
            sra_reduction=8,
            dec_last_sra_reduction=16,
            dec_last_ffn_expansion=8.0,
        )
    raise UnknownPresetError(f"unknown preset: {name!r}")


def validate(config: ModelConfig) -> list:
    """Check every structural invariant; returns a list of violation strings."""
    report = []
    if config.block_type not in BLOCK_TYPES:
        report.append(f"block_type: must be one of {BLOCK_TYPES}, got {config.block_type!r}")
    for field in ("enc_depths", "enc_channels", "enc_heads"):
        vals = getattr(config, field)
        if len(vals) != 4:
            report.append(f"{field}: expected 4 stages, got {len(vals)}")
        if any(v <= 0 for v in vals):
            report.append(f"{field}: all entries must be positive")
    for field in ("dec_last_depth", "dec_last_in_channels", "dec_last_out_channels",
                  "dec_last_heads", "window_size", "sra_reduction", "input_size"):
        if getattr(config, field) <= 0:
            report.append(f"{field}: must be positive")
    if config.ffn_expansion <= 0:
        report.append("ffn_expansion: must be positive")
    for i, (c, h) in enumerate(zip(config.enc_channels, config.enc_heads)):
        if c % h != 0:
            report.append(f"enc_channels[{i}]: {c} not divisible by enc_heads[{i}]={h}")
    if config.dec_last_in_channels % config.dec_last_heads != 0:
        report.append("dec_last_in_channels: not divisible by dec_last_heads")
    if config.block_type in ("swin", "swinv2") and len(config.enc_channels) == 4:
        c3_dec = config.enc_channels[0]  # C_3^dec mirrors C_1^enc
        if c3_dec % 2 != 0 or config.dec_last_in_channels != c3_dec // 2:
            report.append(
                f"dec_last_in_channels: must equal C_3^dec/2 = {c3_dec}/2 "
                f"for {config.block_type}, got {config.dec_last_in_channels}")
        if c3_dec % 4 != 0 or config.dec_last_out_channels != c3_dec // 4:
            report.append(
                f"dec_last_out_channels: must equal C_3^dec/4 = {c3_dec}/4 "
                f"for {config.block_type}, got {config.dec_last_out_channels}")
    if config.input_size % 32 != 0:
        report.append(f"input_size mod 32: {config.input_size} is not divisible by 32")
    elif config.input_size // 4 < config.window_size:
        # Stage-1 token grid must hold at least one window; deeper stages
        # fall back to padded/clamped windows.
        report.append(
            f"window_size: stage-1 grid {config.input_size // 4} smaller than "
            f"window {config.window_size}")
    return report


_INT_FIELDS = {
    "dec_last_depth", "dec_last_in_channels", "dec_last_out_channels",
    "dec_last_heads", "window_size", "sra_reduction", "dec_last_sra_reduction",
    "input_size",
}
_TUPLE_FIELDS = {"enc_depths", "enc_channels", "enc_heads"}
_FLOAT_FIELDS = {"ffn_expansion", "dec_last_ffn_expansion"}
_FIELD_NAMES = {f.name for f in dataclasses.fields(ModelConfig)}


def dumps(config: ModelConfig) -> str:
    """Serialize to the flat ``key = value`` format."""
    lines = []
    for f in dataclasses.fields(ModelConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> ModelConfig:
    """Parse the flat key-value format; unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _FIELD_NAMES:
            raise ConfigFormatError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigFormatError(f"line {lineno}: duplicate key {key!r}")
        try:
            if key in _TUPLE_FIELDS:
                values[key] = tuple(int(x) for x in val.replace(",", " ").split())
            elif key in _INT_FIELDS:
                values[key] = int(val)
            elif key in _FLOAT_FIELDS:
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as e:
            raise ConfigFormatError(f"line {lineno}: bad value for {key!r}: {val!r}") from e
    missing = _FIELD_NAMES - set(values)
    # Fields with defaults may be omitted.
    required = {f.name for f in dataclasses.fields(ModelConfig)
                if f.default is dataclasses.MISSING}
    missing_required = required & missing
    if missing_required:
        raise ConfigFormatError(f"missing keys: {sorted(missing_required)}")
    return ModelConfig(**values)


def save(config: ModelConfig, path) -> None:
    with open(path, "w") as f:
        f.write(dumps(config))


def load(path) -> ModelConfig:
    with open(path) as f:
        return loads(f.read())


def apply_overrides(config: ModelConfig, overrides: Sequence[str]) -> ModelConfig:
    """Apply ``key=value`` override strings on top of a config."""
    if not overrides:
        return config
    base = dumps(config).splitlines()
    kv = {}
    for ov in overrides:
        if "=" not in ov:
            raise ConfigFormatError(f"override must be key=value, got {ov!r}")
        k, _, v = ov.partition("=")
        kv[k.strip()] = v.strip()
    out = []
    for line in base:
        key = line.split("=", 1)[0].strip()
        if key in kv:
            out.append(f"{key} = {kv.pop(key)}")
        else:
            out.append(line)
    for k, v in kv.items():
        out.append(f"{k} = {v}")  # loads() rejects unknown keys
    return loads("\n".join(out))
