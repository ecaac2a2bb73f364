"""Run configuration: a small TOML-style file format plus CLI overrides.

The file holds `[section]` headers and `key = value` lines; values are
ints, floats, booleans, quoted strings or bracketed lists. Unknown sections
or keys are rejected outright so typos fail loudly. Section contents map
onto the dataclasses of the data generator, the embedding, the trainer and
the evaluator.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .embed import EmbedConfig
from .episodes import SynthConfig
from .errors import ValidationError
from .trainer import TrainConfig

_SCHEMA = {
    "data": {f.name for f in fields(SynthConfig)} | {"novel"},
    "embed": {f.name for f in fields(EmbedConfig)},
    "train": {f.name for f in fields(TrainConfig)},
    "eval": {"k", "n", "q", "num_tasks", "seed", "shots", "split"},
    "paths": {"out_dir", "dataset_dir", "checkpoint"},
}


def _parse_value(raw: str, where: str) -> Any:
    raw = raw.strip()
    if not raw:
        raise ValidationError(f"{where}: empty value")
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        return [_parse_value(tok, where) for tok in inner.split(",")] if inner else []
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    if (raw.startswith('"') and raw.endswith('"')) or (raw.startswith("'") and raw.endswith("'")):
        return raw[1:-1]
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw  # bare word, treated as string


def parse_config_text(text: str, source: str = "<config>") -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    section: Optional[str] = None
    for ln, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"{source}:{ln}"
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in _SCHEMA:
                raise ValidationError(f"{where}: unknown section [{section}]")
            out.setdefault(section, {})
            continue
        if "=" not in stripped:
            raise ValidationError(f"{where}: expected 'key = value'")
        if section is None:
            raise ValidationError(f"{where}: key outside any [section]")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _SCHEMA[section]:
            raise ValidationError(f"{where}: unknown key {key!r} in [{section}]")
        if key in out[section]:
            raise ValidationError(f"{where}: duplicate key {key!r}")
        out[section][key] = _parse_value(raw, where)
    return out


def parse_config_file(path) -> dict[str, dict[str, Any]]:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), source=str(p))


@dataclass
class RunConfig:
    """Resolved configuration for one CLI invocation."""

    data: dict = field(default_factory=dict)
    embed: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        raw = parse_config_file(path) if path else {}
        return cls(**{k: raw.get(k, {}) for k in _SCHEMA})

    def synth_config(self) -> SynthConfig:
        kw = {k: v for k, v in self.data.items() if k != "novel"}
        try:
            return SynthConfig(**kw)
        except TypeError as e:
            raise ValidationError(f"bad [data] section: {e}") from None

    def novel_ids(self) -> list[int]:
        return [int(x) for x in self.data.get("novel", [])]

    def embed_config(self) -> EmbedConfig:
        kw = dict(self.embed)
        for key in ("block_channels", "dilations_block3", "dilations_block4"):
            if key in kw:
                kw[key] = tuple(kw[key])
        try:
            return EmbedConfig(**kw)
        except TypeError as e:
            raise ValidationError(f"bad [embed] section: {e}") from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**self.train)
        except TypeError as e:
            raise ValidationError(f"bad [train] section: {e}") from None

    def as_dict(self) -> dict:
        return {"data": self.data, "embed": self.embed, "train": self.train,
                "eval": self.eval, "paths": self.paths}
