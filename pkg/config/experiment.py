"""Strict INI experiment configuration.

Every section and key must appear in SCHEMA; anything else is a ConfigError.
CLI overrides are applied on top and the effective values land in the run summary.
"""
import configparser
from dataclasses import dataclass, field
from pathlib import Path

from config.settings import Config
from hlq.errors.handlers import ConfigError, HLQError
from hlq.harness import model as models
from hlq.harness.data import load_dataset, synthetic_dataset
from hlq.harness.optim import OptimizerConfig
from hlq.harness.train import TrainConfig
from hlq.models.strategy import BackwardStrategy


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    return tuple(int(part) for part in text.replace(",", " ").split())


def _name_list(text):
    return tuple(part for part in text.replace(",", " ").split())


def _optional_int(text):
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


# section -> key -> (parser, default)
SCHEMA = {
    "experiment": {
        "name": (str, "hlq"),
        "out_dir": (str, Config.DEFAULT_OUT_DIR),
        "seeds": (_int_list, (0,)),
        "model": (str, "reference_cnn"),
        "workers": (int, 1),
        "dump_acbp": (_bool, False),
    },
    "train": {
        "epochs": (int, 8),
        "batch_size": (int, 32),
        "optimizer": (str, "sgd"),
        "lr": (float, 0.05),
        "momentum": (float, 0.9),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "weight_decay": (float, 5e-4),
        "schedule": (str, "step"),
        "warmup_epochs": (_optional_int, None),
        "warmup_bits": (int, Config.WARMUP_BITS),
        "val_fraction": (float, 0.2),
        "record_timing": (_bool, False),
    },
    "strategy": {
        "name": (str, "hlq"),
        "bits_gx": (int, Config.BITS_GX),
        "bits_gw": (int, Config.BITS_GW),
        "rank": (int, Config.RANK),
        "block_size": (int, Config.BLOCK_SIZE),
        "rounding": (str, Config.ROUNDING),
        "acbp": (_bool, True),
        "per_channel_gw": (_bool, False),
        "per_row_gx": (_bool, Config.PER_ROW_GX),
        "cache_weight_ht": (_bool, False),
        "pad_short_axes": (_bool, Config.PAD_SHORT_AXES),
        "calibrate": (_bool, False),
        "exempt": (_name_list, ()),
    },
    "data": {
        "source": (str, "synthetic"),
        "path": (str, ""),
        "num_samples": (int, 2048),
        "num_classes": (int, 10),
        "image_size": (int, 16),
        "noise": (float, 0.6),
        "seed": (int, 0),
    },
    "ablation": {
        "bits": (int, 4),
        "rounding": (str, "stochastic"),
    },
    "cost": {
        "catalog": (str, ""),
        "batch": (_optional_int, None),
        "overhead_op_bits": (int, Config.COST_OVERHEAD_OP_BITS),
    },
    "gradcheck": {
        "batch_size": (int, 32),
        "max_coords": (_optional_int, 24),
        "strategies": (_name_list, ("naive", "hq", "lbp-wht", "hlq")),
        "model": (str, ""),
    },
    "quant_error": {
        "trials": (int, 100),
        "bits": (int, 4),
        "sigma": (float, 2.0),
        "rows": (int, 16),
        "cols": (int, 256),
        "rounding": (str, "stochastic"),
    },
}

# options naming files that must exist: (section, key, only-when)
REFERENCED_FILES = (
    ("data", "path", lambda values: values["data"]["source"] == "file"),
    ("cost", "catalog", lambda values: bool(values["cost"]["catalog"])),
)

CHOICES = {
    ("data", "source"): ("synthetic", "file"),
    ("experiment", "model"): ("reference_cnn", "small_cnn", "reference_mlp"),
    ("strategy", "rounding"): ("pseudo", "stochastic"),
    ("ablation", "rounding"): ("pseudo", "stochastic"),
    ("quant_error", "rounding"): ("pseudo", "stochastic"),
}


def _defaults():
    return {section: {key: default for key, (_, default) in keys.items()} for section, keys in SCHEMA.items()}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=_defaults)
    source: Path = None
    overrides: dict = field(default_factory=dict)

    @classmethod
    def from_string(cls, text, base_dir=None, source=None):
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        try:
            parser.read_string(text, source=str(source) if source else "<config>")
        except configparser.Error as e:
            raise ConfigError(f"cannot parse config: {e}")
        values = _defaults()
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                convert, _ = SCHEMA[section][key]
                try:
                    values[section][key] = convert(raw)
                except ValueError as e:
                    raise ConfigError(f"[{section}] {key}: {e}")
        config = cls(values, source)
        config._resolve_paths(Path(base_dir) if base_dir else Path.cwd())
        config.validate()
        return config

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_string(path.read_text(encoding="utf-8"), path.parent, path)

    def _resolve_paths(self, base_dir):
        for section, key, _ in REFERENCED_FILES:
            value = self.values[section][key]
            if value and not Path(value).is_absolute():
                self.values[section][key] = str(base_dir / value)

    def validate(self):
        for (section, key), allowed in CHOICES.items():
            if self.values[section][key] not in allowed:
                raise ConfigError(f"[{section}] {key} must be one of {allowed}, got {self.values[section][key]!r}")
        for section, key, needed in REFERENCED_FILES:
            if needed(self.values) and not Path(self.values[section][key]).is_file():
                raise ConfigError(f"[{section}] {key}: file not found: {self.values[section][key]}")
        if not self.values["experiment"]["seeds"]:
            raise ConfigError("[experiment] seeds must list at least one seed")
        # building the typed objects surfaces range errors as config errors
        try:
            self.strategy()
            self.train_config()
        except HLQError as e:
            raise ConfigError(str(e))

    def get(self, section, key):
        return self.values[section][key]

    def override(self, section, key, value):
        """CLI override; None leaves the file value in place."""
        if value is None:
            return self
        if key not in SCHEMA.get(section, {}):
            raise ConfigError(f"cannot override unknown option {section}.{key}")
        self.values[section][key] = value
        self.overrides[f"{section}.{key}"] = value
        return self

    @property
    def seeds(self):
        return self.values["experiment"]["seeds"]

    @property
    def out_dir(self):
        return self.values["experiment"]["out_dir"]

    def strategy(self, name=None):
        s = self.values["strategy"]
        options = dict(
            rounding=s["rounding"], acbp=s["acbp"], per_channel_gw=s["per_channel_gw"],
            per_row_gx=s["per_row_gx"], cache_weight_ht=s["cache_weight_ht"], pad_short_axes=s["pad_short_axes"],
        )
        return BackwardStrategy.from_name(
            name or s["name"], s["bits_gx"], s["bits_gw"], s["rank"], s["block_size"], **options
        )

    def optimizer_config(self):
        t = self.values["train"]
        return OptimizerConfig(
            kind=t["optimizer"], lr=t["lr"], momentum=t["momentum"],
            betas=(t["beta1"], t["beta2"]), weight_decay=t["weight_decay"],
        )

    def train_config(self, seed=None):
        t = self.values["train"]
        return TrainConfig(
            epochs=t["epochs"], batch_size=t["batch_size"], optimizer=self.optimizer_config(),
            schedule=t["schedule"], warmup_epochs=t["warmup_epochs"], warmup_bits=t["warmup_bits"],
            strategy=self.strategy(), seed=self.seeds[0] if seed is None else seed,
            val_fraction=t["val_fraction"], record_timing=t["record_timing"],
        )

    def model_spec(self, seed=None, model=None):
        name = model or self.values["experiment"]["model"]
        d = self.values["data"]
        seed = self.seeds[0] if seed is None else seed
        exempt = self.values["strategy"]["exempt"]
        if name == "reference_cnn":
            unknown = set(exempt) - set(models.REFERENCE_CNN_LAYERS)
            if unknown:
                raise ConfigError(f"[strategy] exempt names unknown layers: {sorted(unknown)}")
            return models.reference_cnn(
                num_classes=d["num_classes"], image_size=d["image_size"], seed=seed,
                overrides={layer: BackwardStrategy.vanilla() for layer in exempt},
                calibrate=self.values["strategy"]["calibrate"],
            )
        if name == "small_cnn":
            return models.small_cnn(num_classes=d["num_classes"], image_size=d["image_size"], seed=seed)
        if name == "reference_mlp":
            return models.reference_mlp(image_size=d["image_size"], num_classes=d["num_classes"], seed=seed)
        raise ConfigError(f"unknown model {name!r}")

    def dataset(self):
        d = self.values["data"]
        if d["source"] == "file":
            return load_dataset(d["path"])
        return synthetic_dataset(
            num_samples=d["num_samples"], num_classes=d["num_classes"],
            image_size=d["image_size"], noise=d["noise"], seed=d["seed"],
        )

    def effective(self):
        """Every option after overrides, JSON-ready."""
        return {
            section: {key: list(value) if isinstance(value, tuple) else value for key, value in keys.items()}
            for section, keys in self.values.items()
        }
