"""Run configuration: YAML in, validated dataclasses out.

Everything that affects results lives here (the CLI only picks commands and
paths).  Unknown keys are rejected with their dotted path, and every artifact
embeds the full snapshot from :meth:`RunConfig.to_dict`.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Invalid or unknown configuration; message carries the dotted key path."""


@dataclass
class PathsConfig:
    kg: str = ""
    items: str = ""
    corpus: str = ""
    out_dir: str = "runs/default"


@dataclass
class EncoderSection:
    d_text: int = 64
    d_ent: int = 64
    text_layers: int = 2
    text_heads: int = 2
    max_len: int = 512
    rgcn_layers: int = 1
    rgcn_bases: int = 4
    vocab_size: int = 0  # 0 keeps the full corpus vocabulary

    def validate(self, path: str) -> None:
        for name in ("d_text", "d_ent", "text_layers", "text_heads", "max_len"):
            _require_positive_int(getattr(self, name), f"{path}.{name}")
        _require_nonnegative_int(self.rgcn_layers, f"{path}.rgcn_layers")
        _require_positive_int(self.rgcn_bases, f"{path}.rgcn_bases")
        _require_nonnegative_int(self.vocab_size, f"{path}.vocab_size")
        if self.d_text % self.text_heads != 0:
            raise ConfigError(f"{path}.d_text: must be divisible by text_heads")


@dataclass
class TreeSection:
    depth: int = 2
    degree: int = 3
    sim_source: str = "rgcn"  # or "table": raw embedding rows before convolution

    def validate(self, path: str) -> None:
        _require_nonnegative_int(self.depth, f"{path}.depth")
        _require_nonnegative_int(self.degree, f"{path}.degree")
        _require_choice(self.sim_source, ("rgcn", "table"), f"{path}.sim_source")


@dataclass
class ModelSection:
    d_fusion: int = 64
    d_dec: int = 64
    dec_layers: int = 2
    dec_heads: int = 2
    soft_len_rec: int = 10
    soft_len_conv: int = 20
    pooling: str = "last"  # hidden state feeding the rec head
    max_new_tokens: int = 30
    max_entities: int = 10  # most recent mentions kept when a dialogue exceeds this
    decoder_weights: str = ""  # optional plm.npz with pretrained decoder weights
    use_tree_prompt: bool = True
    use_user_prompt: bool = True
    use_align: bool = True

    def validate(self, path: str) -> None:
        for name in ("d_fusion", "d_dec", "dec_layers", "dec_heads", "soft_len_rec", "soft_len_conv", "max_new_tokens", "max_entities"):
            _require_positive_int(getattr(self, name), f"{path}.{name}")
        _require_choice(self.pooling, ("last", "anchor", "mean", "max", "first"), f"{path}.pooling")
        if self.d_dec % self.dec_heads != 0:
            raise ConfigError(f"{path}.d_dec: must be divisible by dec_heads")
        if self.use_align and not self.use_tree_prompt:
            raise ConfigError(f"{path}.use_align: alignment needs the tree side; set use_align false when use_tree_prompt is false")


@dataclass
class LossSection:
    alpha: float = 0.02
    beta: float = 0.002
    tau: float = 0.07
    align_literal_eq21: bool = False
    align_normalize: bool = True
    align_order_sensitive: bool = True
    cross_normalize: bool = True
    reduction: str = "sum"
    distinct_pooled: bool = True

    def validate(self, path: str) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"{path}.alpha/beta: loss weights must be non-negative")
        if self.tau <= 0:
            raise ConfigError(f"{path}.tau: temperature must be positive")
        _require_choice(self.reduction, ("sum", "mean"), f"{path}.reduction")


@dataclass
class TrainingSection:
    lr_decoder: float = 1e-3
    lr_stage1: float = 5e-4
    lr_stage2: float = 1e-4
    adam_eps: float = 0.01
    weight_decay: float = 0.01
    batch_rec: int = 64
    batch_conv: int = 8
    decoder_pretrain_steps: int = 200
    stage1_steps: int = 200
    stage2_steps: int = 200
    eval_every: int = 50  # 0 disables mid-stage validation
    patience: int = 3  # 0 disables early stopping
    seed_init: int = 0
    seed_shuffle: int = 1
    seed_split: int = 2

    def validate(self, path: str) -> None:
        for name in ("lr_decoder", "lr_stage1", "lr_stage2"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{path}.{name}: learning rate must be positive")
        if self.adam_eps <= 0:
            raise ConfigError(f"{path}.adam_eps: must be positive")
        if self.weight_decay < 0:
            raise ConfigError(f"{path}.weight_decay: must be non-negative")
        for name in ("batch_rec", "batch_conv"):
            _require_positive_int(getattr(self, name), f"{path}.{name}")
        for name in ("decoder_pretrain_steps", "stage1_steps", "stage2_steps", "eval_every", "patience"):
            _require_nonnegative_int(getattr(self, name), f"{path}.{name}")


@dataclass
class EvalSection:
    rec_response_source: str = "generated"  # response appended to rec input at eval time
    split: str = "test"
    n_seeds: int = 5  # seed count for ablation averaging

    def validate(self, path: str) -> None:
        _require_choice(self.rec_response_source, ("generated", "gold", "none"), f"{path}.rec_response_source")
        _require_choice(self.split, ("train", "valid", "test"), f"{path}.split")
        _require_positive_int(self.n_seeds, f"{path}.n_seeds")


@dataclass
class RunConfig:
    task: str = "rec"
    paths: PathsConfig = field(default_factory=PathsConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    tree: TreeSection = field(default_factory=TreeSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        _require_choice(self.task, ("rec", "conv"), "task")
        self.encoder.validate("encoder")
        self.tree.validate("tree")
        self.model.validate("model")
        self.loss.validate("loss")
        self.training.validate("training")
        self.eval.validate("eval")
        if self.model.use_tree_prompt and self.tree.degree > 0 and self.tree.depth == 0:
            # depth 0 still yields root-only trees, which is fine; nothing to check
            pass

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        config = _build(cls, data, path="")
        config.validate()
        return config

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_seed(self, seed: int) -> "RunConfig":
        """Rebase the three named seeds on one base seed (init, shuffle, split)."""
        out = dataclasses.replace(self)
        out.training = dataclasses.replace(
            self.training, seed_init=seed, seed_shuffle=seed + 1, seed_split=seed + 2
        )
        return out


_SECTIONS = {
    "paths": PathsConfig,
    "encoder": EncoderSection,
    "tree": TreeSection,
    "model": ModelSection,
    "loss": LossSection,
    "training": TrainingSection,
    "eval": EvalSection,
}


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        dotted = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"{dotted}: unknown key")
        if key in _SECTIONS and cls is RunConfig:
            kwargs[key] = _build(_SECTIONS[key], value, dotted)
        else:
            kwargs[key] = _coerce(known[key], value, dotted)
    return cls(**kwargs)


def _coerce(spec: dataclasses.Field, value, dotted: str):
    expected = spec.type if isinstance(spec.type, type) else None
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{dotted}: expected a boolean, got {type(value).__name__}")
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{dotted}: expected an integer, got {type(value).__name__}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{dotted}: expected a number, got {type(value).__name__}")
        return float(value)
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(f"{dotted}: expected a string, got {type(value).__name__}")
        return value
    raise ConfigError(f"{dotted}: unsupported value")


def _require_positive_int(value: int, dotted: str) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(f"{dotted}: expected a positive integer, got {value!r}")


def _require_nonnegative_int(value: int, dotted: str) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise ConfigError(f"{dotted}: expected a non-negative integer, got {value!r}")


def _require_choice(value: str, choices: tuple, dotted: str) -> None:
    if value not in choices:
        raise ConfigError(f"{dotted}: expected one of {choices}, got {value!r}")
