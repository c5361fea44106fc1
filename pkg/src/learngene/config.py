"""Flat ``key = value`` run configuration.

Every EvolutionConfig field is a key of its own; the remaining keys describe
the dataset, the output directory and the evaluation protocols. ``#`` starts a
comment. Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .evolution import ConfigError, EvolutionConfig


@dataclass
class RunConfig:
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    dataset: str | None = None
    dataset_format: str = "flat-records"
    image_size: int = 0                  # >0 block-averages images to this side length
    max_per_class: int = 0               # >0 caps images per class
    output_dir: str = "runs/default"
    finetune_epochs: int = 3
    finetune_lr: float = 0.01
    finetune_momentum: float = 0.9
    probe_iterations: tuple[int, ...] = (0, 10, 30)
    probe_lr: float = 0.05
    probe_batch_size: int = 16
    probe_momentum: float = 0.0
    n_way: int = 2
    k_shot: int = 5
    query_per_class: int = 15
    episodes: int = 20
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def validate(self, check_paths: bool = True) -> "RunConfig":
        self.evolution.validate()
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if list(self.probe_iterations) != sorted(self.probe_iterations):
            raise ConfigError("probe_iterations must be sorted ascending")
        if check_paths and self.dataset is not None and not Path(self.dataset).exists():
            raise ConfigError(f"dataset {self.dataset} does not exist")
        return self


_RUN_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "evolution"}
_EVO_FIELDS = {f.name: f for f in fields(EvolutionConfig)}
_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _convert(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return _BOOL[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw.strip()


def parse_config(text: str, base_dir: str | os.PathLike = ".") -> RunConfig:
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       delimiters=("=",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from None
    run_defaults, evo_defaults = RunConfig(), EvolutionConfig()
    run_kw, evo_kw = {}, {}
    for key, raw in parser["run"].items():
        if key in _EVO_FIELDS:
            evo_kw[key] = _convert(key, raw, getattr(evo_defaults, key))
        elif key in _RUN_FIELDS:
            run_kw[key] = _convert(key, raw, getattr(run_defaults, key))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    for key in ("dataset", "output_dir"):
        if key in run_kw and not os.path.isabs(run_kw[key]):
            run_kw[key] = str(Path(base_dir) / run_kw[key])
    return RunConfig(evolution=EvolutionConfig(**evo_kw), **run_kw)


def load_config(path: str | os.PathLike, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path.parent).validate(check_paths)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name in _EVO_FIELDS:
        lines.append(f"{name} = {_fmt(getattr(cfg.evolution, name))}")
    for name in _RUN_FIELDS:
        value = getattr(cfg, name)
        if value is not None:
            lines.append(f"{name} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    return str(value)


def with_overrides(cfg: RunConfig, seed: int | None = None, ablation: str | None = None,
                   workers: int | None = None) -> RunConfig:
    evo = cfg.evolution
    if seed is not None:
        evo = replace(evo, master_seed=seed)
    if ablation is not None:
        if ablation not in ("no_mutation", "random_tournaments_and_pool", "population_one", "no_evolution"):
            raise ConfigError(f"unknown ablation {ablation!r}")
        evo = replace(evo, **{ablation: True})
    if workers is not None:
        evo = replace(evo, workers=workers)
    return replace(cfg, evolution=evo)
