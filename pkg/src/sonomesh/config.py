"""Versioned JSON configuration shared by every CLI stage.

One document drives all stages so that no two stages can disagree about
the chirp, the scene or the seeds.  Unknown keys are rejected so that a
typo cannot silently fall back to a default.
"""

import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import skeleton as sk
from .errors import ConfigError
from .signal import SPEED_OF_SOUND, ChirpConfig

SCHEMA_VERSION = 1


def _build(cls, section, data):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{section} must be an object")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigError(f"{section}.{extra[0]}: unknown key")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass(frozen=True)
class SceneSection:
    pose_id: str = "standing"
    snr_db: float = 20.0  # None means noise off
    seed: int = 0
    standoff: float = 1.5
    n_profiles: int = 64
    scale: float = 1.7
    density: float = 50.0
    background: bool = True
    radial_velocity: float = 0.05
    aperture_angle: float = 0.2

    def __post_init__(self):
        if self.pose_id not in sk.POSE_IDS:
            raise ConfigError(f"scene.pose_id: {self.pose_id!r} is not one of {sk.POSE_IDS}")
        if self.snr_db is not None and not np.isfinite(self.snr_db):
            raise ConfigError("scene.snr_db must be finite or null")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("scene.seed must be a non-negative integer")
        if not self.standoff > 0:
            raise ConfigError("scene.standoff must be > 0")
        if not isinstance(self.n_profiles, int) or self.n_profiles < 2:
            raise ConfigError("scene.n_profiles must be an integer >= 2")
        if not self.scale > 0:
            raise ConfigError("scene.scale must be > 0")
        if not self.density > 0:
            raise ConfigError("scene.density must be > 0")
        if not self.aperture_angle > 0:
            raise ConfigError("scene.aperture_angle must be > 0")


@dataclass(frozen=True)
class ImagingSection:
    pad: int = 4
    window: str = None  # None or "hann"
    autofocus: bool = True
    max_iters: int = 15
    tol: float = 1e-4
    focus_rows: int = 40
    align: str = "linear"  # "linear" or "none"
    recenter: bool = True
    crop_m: float = 1.2  # half-height of the range window kept around the gate

    def __post_init__(self):
        if not isinstance(self.pad, int) or self.pad < 1:
            raise ConfigError("imaging.pad must be an integer >= 1")
        if self.window not in (None, "hann"):
            raise ConfigError("imaging.window must be null or \"hann\"")
        if not isinstance(self.max_iters, int) or self.max_iters < 1:
            raise ConfigError("imaging.max_iters must be an integer >= 1")
        if not self.tol > 0:
            raise ConfigError("imaging.tol must be > 0")
        if self.focus_rows is not None and (not isinstance(self.focus_rows, int) or self.focus_rows < 1):
            raise ConfigError("imaging.focus_rows must be null or an integer >= 1")
        if self.align not in ("linear", "none"):
            raise ConfigError("imaging.align must be \"linear\" or \"none\"")
        if not self.crop_m > 0:
            raise ConfigError("imaging.crop_m must be > 0")


@dataclass(frozen=True)
class PoseSection:
    threshold_q: float = 0.90
    K: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.threshold_q < 1:
            raise ConfigError("pose.threshold_q must lie in (0, 1)")
        if not isinstance(self.K, int) or self.K < 2:
            raise ConfigError("pose.K must be an integer >= 2")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("pose.seed must be a non-negative integer")


@dataclass(frozen=True)
class RegistrationSection:
    grid_dims: tuple = (9, 9, 9)
    temperature: float = 0.1
    checkpoint: str = None
    lr: float = 1e-3
    epochs: int = 50
    n_train: int = 50
    seed: int = 0

    def __post_init__(self):
        dims = tuple(self.grid_dims)
        if len(dims) != 3 or any(not isinstance(d, int) or d < 2 for d in dims):
            raise ConfigError("registration.grid_dims must be three integers >= 2")
        object.__setattr__(self, "grid_dims", dims)
        if not self.temperature > 0:
            raise ConfigError("registration.temperature must be > 0")
        if not self.lr > 0:
            raise ConfigError("registration.lr must be > 0")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError("registration.epochs must be an integer >= 1")
        if not isinstance(self.n_train, int) or self.n_train < 1:
            raise ConfigError("registration.n_train must be an integer >= 1")


@dataclass(frozen=True)
class FusionSection:
    checkpoint: str = None
    lam: float = 0.1
    mask_p: float = 0.5
    lr: float = 1e-3
    epochs: int = 5
    n_train: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("fusion.lam must be >= 0")
        if not 0 <= self.mask_p <= 1:
            raise ConfigError("fusion.mask_p must lie in [0, 1]")
        if not self.lr > 0:
            raise ConfigError("fusion.lr must be > 0")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError("fusion.epochs must be an integer >= 1")
        if not isinstance(self.n_train, int) or self.n_train < 1:
            raise ConfigError("fusion.n_train must be an integer >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    chirp: ChirpConfig = field(default_factory=ChirpConfig)
    scene: SceneSection = field(default_factory=SceneSection)
    imaging: ImagingSection = field(default_factory=ImagingSection)
    pose: PoseSection = field(default_factory=PoseSection)
    registration: RegistrationSection = field(default_factory=RegistrationSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    output_dir: str = "out"

    @classmethod
    def body(cls, **kw):
        """Defaults plus the long-chirp preset that body-scale scenes need."""
        return cls(chirp=ChirpConfig.imaging(), **kw)

    def check_scene_range(self):
        """Raise ConfigError if the scene does not fit the unambiguous range."""
        limit = SPEED_OF_SOUND * self.chirp.T_e / 2
        # farthest echo: the body top or the back-wall reflector, whichever is farther
        far = self.scene.standoff + max(0.6 * self.scene.scale, 1.2) + 0.05
        if far > limit:
            raise ConfigError(
                f"chirp.T_e: unambiguous range {limit:.2f} m is shorter than the scene "
                f"(needs {far:.2f} m); use a longer T_e")

    def to_dict(self):
        d = {"schema_version": SCHEMA_VERSION, "output_dir": self.output_dir}
        for name in ("chirp", "scene", "imaging", "pose", "registration", "fusion"):
            d[name] = asdict(getattr(self, name))
        d["registration"]["grid_dims"] = list(self.registration.grid_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        if "schema_version" not in d:
            raise ConfigError("schema_version: missing")
        if d["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {d['schema_version']!r}")
        extra = sorted(set(d) - {"schema_version", "output_dir", "chirp", "scene", "imaging",
                                 "pose", "registration", "fusion"})
        if extra:
            raise ConfigError(f"{extra[0]}: unknown key")
        out_dir = d.get("output_dir", "out")
        if not isinstance(out_dir, str) or not out_dir:
            raise ConfigError("output_dir must be a non-empty string")
        return cls(chirp=_build(ChirpConfig, "chirp", d.get("chirp")),
                   scene=_build(SceneSection, "scene", d.get("scene")),
                   imaging=_build(ImagingSection, "imaging", d.get("imaging")),
                   pose=_build(PoseSection, "pose", d.get("pose")),
                   registration=_build(RegistrationSection, "registration", d.get("registration")),
                   fusion=_build(FusionSection, "fusion", d.get("fusion")),
                   output_dir=out_dir)

    @classmethod
    def load(cls, path):
        from .io import read_json

        if not os.path.exists(path):
            raise FileNotFoundError(path)
        return cls.from_dict(read_json(path))

    def resolve(self, path):
        """Paths inside the config are relative to the output directory."""
        return path if os.path.isabs(path) else os.path.join(self.output_dir, path)
