"""Run configuration: a flat INI-style text form (one section per concern,
``key = value`` pairs, no nesting) plus the named presets that pin the
desk-scale and full-scale experiment setups.

``parse_config(format_config(cfg)) == cfg`` is a hard contract; the run
directory snapshot and the checkpoint header both rely on it.
"""

from __future__ import annotations

import configparser
import dataclasses
import io

from .errors import ConfigError
from .models import ModelConfig
from .training import TrainConfig


@dataclasses.dataclass
class DataConfig:
    corpus: str = "data/tinyshakespeare.txt"
    train_windows: int = 50_000
    test_windows: int = 5_000
    bracket_total: int = 2_000
    bracket_min_len: int = 512
    bracket_max_len: int = 1_024


@dataclasses.dataclass
class SampleConfig:
    prompt: str = "First"
    length: int = 200
    temperature: float = 0.8
    top_k: int = 40
    greedy: bool = False


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    sample: SampleConfig = dataclasses.field(default_factory=SampleConfig)
    command: str = ""
    seed: int = 42
    run_dir: str = ""
    checkpoint: str = ""
    deterministic: bool = False
    desk_scale: bool = False

    def validate(self):
        self.model.validate()
        self.train.validate()
        if self.seed != self.train.seed:
            self.train.seed = self.seed
        return self


_SECTIONS = {
    "run": None,       # scalar fields of RunConfig itself
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "sample": SampleConfig,
}

_RUN_FIELDS = ("command", "seed", "run_dir", "checkpoint", "deterministic",
               "desk_scale")


def format_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    parser["run"] = {k: str(getattr(cfg, k)) for k in sorted(_RUN_FIELDS)}
    for section, sub in (("model", cfg.model), ("train", cfg.train),
                         ("data", cfg.data), ("sample", cfg.sample)):
        parser[section] = {k: str(v) for k, v in
                           sorted(dataclasses.asdict(sub).items())}
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def _coerce(raw: str, typ):
    if typ is bool or typ == "bool":
        if raw not in ("True", "False"):
            raise ConfigError(f"expected True/False, got {raw!r}")
        return raw == "True"
    if typ is int or typ == "int":
        return int(raw)
    if typ is float or typ == "float":
        return float(raw)
    return raw


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    def section_kwargs(name, cls):
        if name not in parser:
            return {}
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in parser[name].items():
            if key not in fields:
                raise ConfigError(f"unknown key {key!r} in section [{name}]")
            kwargs[key] = _coerce(raw, fields[key])
        return kwargs

    if "model" not in parser:
        raise ConfigError("config is missing the [model] section")
    cfg = RunConfig(
        model=ModelConfig(**section_kwargs("model", ModelConfig)),
        train=TrainConfig(**section_kwargs("train", TrainConfig)),
        data=DataConfig(**section_kwargs("data", DataConfig)),
        sample=SampleConfig(**section_kwargs("sample", SampleConfig)),
    )
    if "run" in parser:
        run_fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
        for key, raw in parser["run"].items():
            if key not in _RUN_FIELDS:
                raise ConfigError(f"unknown key {key!r} in section [run]")
            setattr(cfg, key, _coerce(raw, run_fields[key]))
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


# ---------------------------------------------------------------------------
# presets

def _lm_model(variant, task, d, n, **kw):
    return ModelConfig(variant=variant, task=task, embed_dim=d, vocab_size=65,
                       seq_len=n, n_max=n, **kw)


def _bracket_model(variant, d, n_max, **kw):
    return ModelConfig(variant=variant, task="classify", embed_dim=d,
                       vocab_size=7, seq_len=n_max, n_max=n_max, pad_id=6, **kw)


def _presets():
    p = {}

    # Desk-scale language modeling: n=128, d=40, 5 epochs over 5,000 train
    # windows and 1,000 test windows. Runs offline on the synthetic corpus.
    desk_lm_data = dict(corpus="synthetic", train_windows=5_000, test_windows=1_000)
    desk_lm_train = dict(epochs=5, batch_size=64, lr=1e-3)
    p["lm-v1-desk"] = RunConfig(
        model=_lm_model("tree", "lm-one", 40, 128),
        train=TrainConfig(weight_decay=0.0, **desk_lm_train),
        data=DataConfig(**desk_lm_data), desk_scale=True)
    p["lm-v2-desk"] = RunConfig(
        model=_lm_model("tree-scan", "lm-seq", 40, 128),
        train=TrainConfig(weight_decay=0.01, **desk_lm_train),
        data=DataConfig(**desk_lm_data), desk_scale=True)
    p["lm-v3-desk"] = RunConfig(
        model=_lm_model("tree-chunk", "lm-seq", 40, 128, chunk_size=32),
        train=TrainConfig(weight_decay=0.01, **desk_lm_train),
        data=DataConfig(**desk_lm_data), desk_scale=True)
    p["lm-transformer-desk"] = RunConfig(
        model=_lm_model("transformer", "lm-seq", 28, 128),
        train=TrainConfig(weight_decay=0.01, **desk_lm_train),
        data=DataConfig(**desk_lm_data), desk_scale=True)

    # Full-scale language modeling: n=512, batch 64, fetches the real corpus.
    p["lm-v1-paper"] = RunConfig(
        model=_lm_model("tree", "lm-one", 40, 512),
        train=TrainConfig(weight_decay=0.0, epochs=60, batch_size=64))
    p["lm-v2-paper"] = RunConfig(
        model=_lm_model("tree-scan", "lm-seq", 40, 512),
        train=TrainConfig(weight_decay=0.01, epochs=30, batch_size=64))
    p["lm-v3-paper"] = RunConfig(
        model=_lm_model("tree-chunk", "lm-seq", 40, 512, chunk_size=32),
        train=TrainConfig(weight_decay=0.01, epochs=30, batch_size=64))
    # transformer dim chosen so totals match the tree models within 10%
    p["lm-transformer-seq-paper"] = RunConfig(
        model=_lm_model("transformer", "lm-seq", 32, 512),
        train=TrainConfig(weight_decay=0.01, epochs=30, batch_size=64))
    p["lm-transformer-one-paper"] = RunConfig(
        model=_lm_model("transformer", "lm-one", 32, 512),
        train=TrainConfig(weight_decay=0.01, epochs=60, batch_size=64))

    # Bracket balance, desk scale: lengths 64..128, ~30K parameters each.
    desk_br_data = dict(bracket_min_len=64, bracket_max_len=128)
    desk_br_train = dict(weight_decay=0.01, epochs=30, batch_size=64,
                         patience=10, lr=1e-3)
    p["brackets-tree-desk"] = RunConfig(
        model=_bracket_model("tree", 48, 128),
        train=TrainConfig(**desk_br_train),
        data=DataConfig(**desk_br_data), desk_scale=True)
    p["brackets-chunk-desk"] = RunConfig(
        model=_bracket_model("tree-chunk", 48, 128, chunk_size=32),
        train=TrainConfig(**desk_br_train),
        data=DataConfig(**desk_br_data), desk_scale=True)
    p["brackets-transformer-desk"] = RunConfig(
        model=_bracket_model("transformer", 32, 128),
        train=TrainConfig(**desk_br_train),
        data=DataConfig(**desk_br_data), desk_scale=True)

    # Bracket balance, full scale: lengths 512..1024.
    full_br_train = dict(weight_decay=0.01, epochs=60, batch_size=64,
                         patience=10)
    p["brackets-tree-paper"] = RunConfig(
        model=_bracket_model("tree", 24, 1024),
        train=TrainConfig(**full_br_train))
    p["brackets-chunk-paper"] = RunConfig(
        model=_bracket_model("tree-chunk", 24, 1024, chunk_size=32),
        train=TrainConfig(**full_br_train))
    p["brackets-transformer-paper"] = RunConfig(
        model=_bracket_model("transformer", 20, 1024),
        train=TrainConfig(**full_br_train))
    return p


def preset_names():
    return sorted(_presets().keys())


def get_preset(name: str) -> RunConfig:
    presets = _presets()
    if name not in presets:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(sorted(presets))}")
    return presets[name]
