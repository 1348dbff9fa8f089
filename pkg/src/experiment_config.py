"""
Experiment configuration: a sectioned INI file parsed into typed dataclasses.

    [task]         kind (required), dims, data sizes, perturbation grid
    [model]        kind and layers (required), width, nonlinearity, DUST constants
    [constraints]  descent factors alpha and the reference loss f0
    [dual]         resilience coefficient, dual step size, resilient mode
    [train]        epochs, batch size, optimizer, warmup, variants
    [run]          seeds and output directory (not part of the config hash)
"""

import configparser
import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union, get_args, get_origin, get_type_hints

from .data_tasks import DEFAULT_GAMMA_GRID, GAMMA_RESOLUTION, STRUCTURES, gamma_key
from .exceptions import ConfigError, ParameterError
from .models import MODEL_KINDS, ORIENTATIONS, Nonlinearity
from .trainer import RESILIENT_MODES, ConstraintSchedule, DualState, TrainConfig

logger = logging.getLogger(__name__)

TASK_KINDS = ("denoising", "classification")
VARIANTS = ("constrained", "unconstrained")
SHARING = ("auto", "shared", "per_layer")


@dataclass
class TaskSection:
    kind: str
    n: int = 16
    t: int = 8
    num_classes: int = 2
    separation: float = 2.0
    structure: str = "smooth"
    data_offset: float = 0.0
    signal_scale: float = 1.0
    train_count: int = 2048
    heldout_count: int = 512
    gamma_train: float = 0.2
    gamma_grid: Tuple[float, ...] = DEFAULT_GAMMA_GRID
    cache_data: bool = False


@dataclass
class ModelSection:
    kind: str
    layers: int
    d: int = 16
    nonlinearity: str = "relu"
    orientation: str = "source"
    eta: float = 1.0
    lambda1: float = 0.9
    lambda2: float = 0.25
    c: float = 1.0
    dictionary_sharing: str = "auto"


@dataclass
class ConstraintsSection:
    alpha: Tuple[float, ...] = (0.2,)
    f0: float = 1.0
    use_f0_for_first: bool = False


@dataclass
class DualSection:
    beta: float = 1.0
    eta2: float = 3e-2
    resilient_mode: str = "off"
    literal_decay: bool = False
    slack_lr: Optional[float] = None


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 64
    eta1: float = 3e-4
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    primal_warmup_epochs: int = 0
    resilience_restart_each_epoch: bool = False
    record_wall_time: bool = False
    divergence_threshold: float = 1e12
    variants: Tuple[str, ...] = VARIANTS


@dataclass
class RunSection:
    seeds: Tuple[int, ...] = (0, 1, 2)
    output_dir: Optional[str] = None


SECTIONS = (
    ("task", TaskSection),
    ("model", ModelSection),
    ("constraints", ConstraintsSection),
    ("dual", DualSection),
    ("train", TrainSection),
    ("run", RunSection),
)


def _parse(kind, raw: str):
    origin = get_origin(kind)
    if origin is Union:
        inner = next(arg for arg in get_args(kind) if arg is not type(None))
        if raw.strip().lower() in ("", "none"):
            return None
        return _parse(inner, raw)
    if origin is tuple:
        item = get_args(kind)[0]
        return tuple(_parse(item, part) for part in raw.split(",") if part.strip())
    text = raw.strip()
    if kind is bool:
        lowered = text.lower()
        if lowered in ("true", "yes", "on", "1"):
            return True
        if lowered in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got '{text}'")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    task: TaskSection
    model: ModelSection
    constraints: ConstraintsSection = field(default_factory=ConstraintsSection)
    dual: DualSection = field(default_factory=DualSection)
    train: TrainSection = field(default_factory=TrainSection)
    run: RunSection = field(default_factory=RunSection)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError("file", f"cannot parse config: {e}") from e

        known = {name for name, _ in SECTIONS}
        for section in parser.sections():
            if section not in known:
                raise ConfigError(section, "unknown section")

        built = {}
        for name, section_cls in SECTIONS:
            hints = get_type_hints(section_cls)
            values = dict(parser.items(name)) if parser.has_section(name) else {}
            names = {f.name for f in dataclasses.fields(section_cls)}
            for key in values:
                if key not in names:
                    raise ConfigError(f"{name}.{key}", "unknown key")
            kwargs = {}
            for f in dataclasses.fields(section_cls):
                required = f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
                if f.name not in values:
                    if required:
                        raise ConfigError(f"{name}.{f.name}", "required field is missing")
                    continue
                try:
                    kwargs[f.name] = _parse(hints[f.name], values[f.name])
                except ValueError as e:
                    raise ConfigError(f"{name}.{f.name}", str(e)) from e
            built[name] = section_cls(**kwargs)
        config = cls(**built)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path, 'r') as f:
                text = f.read()
        except OSError as e:
            raise ConfigError("config", f"cannot read {path}: {e}") from e
        return cls.from_text(text)

    def to_ini(self, include_run: bool = True) -> str:
        """Canonical INI text; every set field is written"""
        lines = []
        for name, _ in SECTIONS:
            if name == "run" and not include_run:
                continue
            section = getattr(self, name)
            lines.append(f"[{name}]")
            for f in dataclasses.fields(section):
                value = getattr(section, f.name)
                if value is not None:
                    lines.append(f"{f.name} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        """SHA-256 of the canonical text without [run]"""
        return hashlib.sha256(self.to_ini(include_run=False).encode("utf-8")).hexdigest()

    def run_name(self, seed: int) -> str:
        return f"{self.config_hash()[:12]}-seed{seed}"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seeds=(seed,)))

    def validate(self):
        """Cross-field checks; raises ConfigError naming the offending field"""
        task, model, cons, dual, train, run = self.task, self.model, self.constraints, self.dual, self.train, self.run

        def require(condition: bool, field_name: str, message: str):
            if not condition:
                raise ConfigError(field_name, message)

        require(task.kind in TASK_KINDS, "task.kind", f"must be one of {TASK_KINDS}")
        require(model.kind in MODEL_KINDS, "model.kind", f"must be one of {MODEL_KINDS}")
        require(task.n >= 1 and task.t >= 1, "task.n", "signal dimensions must be positive")
        require(task.train_count >= 1, "task.train_count", "must be positive")
        require(task.heldout_count >= 1, "task.heldout_count", "must be positive")
        require(task.structure in STRUCTURES, "task.structure", f"must be one of {STRUCTURES}")
        require(task.signal_scale > 0, "task.signal_scale", "must be positive")
        require(task.gamma_train >= 0, "task.gamma_train", "must be nonnegative")
        require(len(task.gamma_grid) > 0, "task.gamma_grid", "must not be empty")
        require(all(g >= 0 for g in task.gamma_grid), "task.gamma_grid", "levels must be nonnegative")
        require(len({gamma_key(g) for g in task.gamma_grid}) == len(task.gamma_grid), "task.gamma_grid",
                f"levels must be distinct and at least {GAMMA_RESOLUTION:g} apart")
        if task.kind == "classification":
            require(task.num_classes >= 2, "task.num_classes", "classification needs at least 2 classes")
            require(task.separation > 0, "task.separation", "must be positive")

        require(model.layers >= 1, "model.layers", "must be at least 1")
        require(model.d >= 1, "model.d", "must be positive")
        require(model.orientation in ORIENTATIONS, "model.orientation", f"must be one of {ORIENTATIONS}")
        require(0.0 < model.eta <= 1.0, "model.eta", "must lie in (0, 1]")
        require(model.dictionary_sharing in SHARING, "model.dictionary_sharing", f"must be one of {SHARING}")
        try:
            nonlinearity = Nonlinearity.parse(model.nonlinearity)
        except ParameterError as e:
            raise ConfigError("model.nonlinearity", str(e)) from e
        if model.kind == "dust":
            require(task.kind == "denoising", "model.kind", "dust models only support the denoising task")
            require(model.d > task.n, "model.d", "dust dictionary must be overcomplete (d > n)")
            require(model.c > 0, "model.c", "must be positive")
            require(model.lambda1 >= 0 and model.lambda2 >= 0, "model.lambda1", "must be nonnegative")
        if model.kind == "ut":
            require(nonlinearity.kind == "relu", "model.nonlinearity", "ut models use relu")

        require(len(cons.alpha) in (1, model.layers), "constraints.alpha",
                f"give one value or one per layer ({model.layers})")
        require(cons.f0 > 0, "constraints.f0", "must be positive")

        require(dual.resilient_mode in RESILIENT_MODES, "dual.resilient_mode", f"must be one of {RESILIENT_MODES}")
        require(dual.beta > 0, "dual.beta", "must be positive")
        require(dual.eta2 > 0, "dual.eta2", "must be positive")
        require(dual.slack_lr is None or dual.slack_lr > 0, "dual.slack_lr", "must be positive")

        require(train.epochs >= 0, "train.epochs", "must be nonnegative")
        require(train.batch_size >= 1, "train.batch_size", "must be at least 1")
        require(train.eta1 > 0, "train.eta1", "must be positive")
        require(train.optimizer in ("sgd", "adam"), "train.optimizer", "must be sgd or adam")
        require(train.primal_warmup_epochs >= 0, "train.primal_warmup_epochs", "must be nonnegative")
        require(train.divergence_threshold > 0, "train.divergence_threshold", "must be positive")
        require(len(train.variants) > 0 and all(v in VARIANTS for v in train.variants), "train.variants",
                f"must list some of {VARIANTS}")
        require(len(run.seeds) > 0, "run.seeds", "must list at least one seed")
        return True

    def schedule(self) -> ConstraintSchedule:
        alpha = list(self.constraints.alpha)
        if len(alpha) == 1:
            alpha = alpha * self.model.layers
        return ConstraintSchedule(alpha, self.constraints.f0, self.constraints.use_f0_for_first)

    def dual_state(self) -> DualState:
        return DualState.zeros(
            self.model.layers, beta=self.dual.beta, eta2=self.dual.eta2,
            resilient_mode=self.dual.resilient_mode, literal_decay=self.dual.literal_decay,
            slack_lr=self.dual.slack_lr,
        )

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.epochs, batch_size=t.batch_size, eta1=t.eta1, optimizer=t.optimizer,
            adam_beta1=t.adam_beta1, adam_beta2=t.adam_beta2, adam_eps=t.adam_eps,
            primal_warmup_epochs=t.primal_warmup_epochs,
            resilience_restart_each_epoch=t.resilience_restart_each_epoch, seed=seed,
            record_wall_time=t.record_wall_time, divergence_threshold=t.divergence_threshold,
        )

    def shared_dictionary(self, variant: str) -> bool:
        sharing = self.model.dictionary_sharing
        if sharing == "auto":
            return variant == "unconstrained"
        return sharing == "shared"

    def model_kwargs(self, variant: str, seed: int) -> dict:
        """Keyword arguments for ``models.init_model``"""
        return dict(
            kind=self.model.kind,
            n=self.task.n,
            d=self.model.d,
            layers=self.model.layers,
            nonlinearity=Nonlinearity.parse(self.model.nonlinearity),
            num_classes=self.task.num_classes if self.task.kind == "classification" else None,
            seed=seed,
            orientation=self.model.orientation,
            eta=self.model.eta,
            shared_dictionary=self.model.kind == "dust" and self.shared_dictionary(variant),
            lambda1=self.model.lambda1,
            lambda2=self.model.lambda2,
            c=self.model.c,
        )
