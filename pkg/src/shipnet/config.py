"""Flat key=value run configuration with typed keys, file + command-line
override layering, and a canonical echo. Unknown keys are hard errors."""

from __future__ import annotations

from dataclasses import dataclass

from .models import VARIANTS, ModelConfig
from .train import RunSpec


def _parse_bool(raw):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_int_tuple(raw):
    return tuple(int(x) for x in raw.split(",") if x.strip())


def _parse_float_tuple(raw):
    vals = tuple(float(x) for x in raw.split(",") if x.strip())
    if len(vals) != 3:
        raise ValueError(f"expected 3 comma-separated floats, got {raw!r}")
    return vals


def _fmt(value):
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    # model surface
    variant: str = "baseline"
    preset: str = "full"
    num_classes: int = 4
    cbam_stages: tuple = ()
    reduction_ratio: int = 16
    spatial_kernel: int = 7
    multiscale_fusion: bool = False
    dwsep_stages: tuple = ()
    dilated_stage5: bool = False
    # training surface
    seed: int = 42
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    val_fraction: float = 0.2
    split_ratio: float = 0.8
    drop_last: bool = False
    workers: int = 1
    # data surface
    data_dir: str = ""
    out_dir: str = ""
    lenient_scan: bool = False
    exclude_below: int = 0
    augment: bool = True
    rotation_deg: float = 10.0
    hflip: bool = True
    vflip: bool = True
    norm: str = "dataset"      # "dataset" or "custom"
    norm_mean: tuple = (0.5, 0.5, 0.5)
    norm_std: tuple = (0.25, 0.25, 0.25)
    # model detail overrides (0 keeps the preset value)
    base_width: int = 0
    input_size: int = 0
    # variant defaults applied unless the key was set explicitly
    _explicit: tuple = ()

    _PARSERS = {
        "variant": str, "preset": str, "num_classes": int,
        "cbam_stages": _parse_int_tuple, "reduction_ratio": int,
        "spatial_kernel": int, "multiscale_fusion": _parse_bool,
        "dwsep_stages": _parse_int_tuple, "dilated_stage5": _parse_bool,
        "seed": int, "epochs": int, "batch_size": int, "lr": float,
        "lr_decay_factor": float, "lr_decay_every": int,
        "val_fraction": float, "split_ratio": float, "drop_last": _parse_bool,
        "workers": int, "data_dir": str, "out_dir": str,
        "lenient_scan": _parse_bool, "exclude_below": int,
        "augment": _parse_bool, "rotation_deg": float,
        "hflip": _parse_bool, "vflip": _parse_bool,
        "norm": str, "norm_mean": _parse_float_tuple,
        "norm_std": _parse_float_tuple, "base_width": int, "input_size": int,
    }

    @classmethod
    def known_keys(cls):
        return sorted(cls._PARSERS)

    def set_key(self, key, raw):
        parser = self._PARSERS.get(key)
        if parser is None:
            raise KeyError(f"unknown config key {key!r} (known: {', '.join(self.known_keys())})")
        try:
            value = parser(raw)
        except ValueError as exc:
            raise ValueError(f"config key {key}: {exc}") from exc
        setattr(self, key, value)
        self._explicit = tuple(set(self._explicit) | {key})

    @classmethod
    def load(cls, path=None, overrides=()):
        """Layer a key=value file (``#`` comments) under CLI overrides."""
        cfg = cls()
        if path is not None:
            with open(path) as fh:
                for lineno, line in enumerate(fh, 1):
                    stripped = line.split("#", 1)[0].strip()
                    if not stripped:
                        continue
                    if "=" not in stripped:
                        raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
                    key, value = stripped.split("=", 1)
                    cfg.set_key(key.strip(), value.strip())
        for key, value in overrides:
            cfg.set_key(key, value)
        cfg.validate()
        return cfg

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.preset not in ("full", "tiny"):
            raise ValueError(f"preset must be full or tiny, got {self.preset!r}")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must be in (0,1)")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0,1)")
        if self.norm not in ("dataset", "custom"):
            raise ValueError("norm must be 'dataset' or 'custom'")
        return self

    def echo(self):
        """Canonical resolved config text (sorted keys)."""
        return "".join(f"{k}={_fmt(getattr(self, k))}\n" for k in self.known_keys())

    def model_config(self, variant=None):
        overrides = {}
        if self.base_width:
            overrides["base_width"] = self.base_width
        if self.input_size:
            overrides["input_size"] = (self.input_size, self.input_size)
        overrides["num_classes"] = self.num_classes
        overrides["reduction_ratio"] = self.reduction_ratio
        overrides["spatial_kernel"] = self.spatial_kernel
        # structural keys override variant defaults only when set explicitly
        for key in ("cbam_stages", "multiscale_fusion", "dwsep_stages", "dilated_stage5"):
            if key in self._explicit:
                overrides[key] = getattr(self, key)
        return ModelConfig.make(variant or self.variant, preset=self.preset, **overrides)

    def run_spec(self, norm_mean=None, norm_std=None):
        return RunSpec(
            epochs=self.epochs, batch_size=self.batch_size, base_lr=self.lr,
            lr_decay_factor=self.lr_decay_factor, lr_decay_every=self.lr_decay_every,
            seed=self.seed, val_fraction=self.val_fraction, augment=self.augment,
            rotation_deg=self.rotation_deg, hflip=self.hflip, vflip=self.vflip,
            drop_last=self.drop_last, workers=self.workers,
            norm_mean=tuple(norm_mean if norm_mean is not None else self.norm_mean),
            norm_std=tuple(norm_std if norm_std is not None else self.norm_std),
            resize_to=self.model_config().input_size,
        )
