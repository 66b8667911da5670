"""Pipeline configuration: one TOML document holding every tunable default.

Every free parameter of the pipeline (smoothing sigma, percentile window,
NSD tolerance, split seed, backend table, palette) lives here so it is
auditable in one place. The file is validated before any stage runs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .errors import ValidationError
from .mesh import DEFAULT_PALETTE, MaterialSpec
from .registration import RegistrationConfig
from .segmentation import BackendDescriptor

ENV_CONFIG = "MAMMOFORGE_CONFIG"


@dataclass(frozen=True)
class PreprocessConfig:
    """Denoise + percentile-normalization preset.

    DCE gets its own upper percentile: enhancing lesions occupy well under
    1% of the volume, so a 99th-percentile cut saturates the lesion into
    the clamp along with the brightest normal tissue and destroys the
    contrast the lesion stages depend on.
    """

    sigma_mm: float = 0.5
    p_low: float = 1.0
    p_high: float = 99.0
    dce_p_low: float = 1.0
    dce_p_high: float = 99.9

    def __post_init__(self):
        if self.sigma_mm <= 0:
            raise ValidationError("preprocess.sigma_mm must be > 0")
        for lo, hi in ((self.p_low, self.p_high),
                       (self.dce_p_low, self.dce_p_high)):
            if not 0 <= lo < hi <= 100:
                raise ValidationError("preprocess percentiles must satisfy "
                                      "0 <= low < high <= 100")

    def percentiles_for(self, sequence: str) -> tuple[float, float]:
        if sequence == "dce":
            return self.dce_p_low, self.dce_p_high
        return self.p_low, self.p_high


@dataclass(frozen=True)
class SegmentationConfig:
    lesion_delta: float = 0.2
    completion_profile: str = "elliptic"

    def __post_init__(self):
        if self.lesion_delta < 0:
            raise ValidationError("segmentation.lesion_delta must be >= 0")
        if self.completion_profile not in ("elliptic", "linear"):
            raise ValidationError("segmentation.completion_profile must be "
                                  "'elliptic' or 'linear'")


@dataclass(frozen=True)
class SplitConfig:
    fraction: float = 0.75
    seed: int = 42

    def __post_init__(self):
        if not 0 < self.fraction < 1:
            raise ValidationError("split.fraction must be in (0, 1)")


@dataclass(frozen=True)
class PipelineConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    tau_mm: float = 2.0
    archive_revisions: bool = False
    backends: dict = field(default_factory=dict)
    palette: dict = field(default_factory=lambda: dict(DEFAULT_PALETTE))

    def __post_init__(self):
        if self.tau_mm <= 0:
            raise ValidationError("evaluation.tau_mm must be > 0")

    def backend(self, name: str) -> BackendDescriptor:
        if name not in self.backends:
            raise ValidationError(
                f"no backend {name!r} configured; known: "
                f"{sorted(self.backends) or 'none'}")
        return self.backends[name]


_LABEL_BY_NAME = {"whole_breast": 1, "fibroglandular": 2, "lesion": 3}


def _build(data: dict) -> PipelineConfig:
    unknown = set(data) - {"preprocess", "registration", "segmentation",
                           "split", "evaluation", "hitl", "backends",
                           "palette"}
    if unknown:
        raise ValidationError(f"unknown config sections {sorted(unknown)}")

    pre = PreprocessConfig(**data.get("preprocess", {}))
    reg = RegistrationConfig(**data.get("registration", {}))
    seg = SegmentationConfig(**data.get("segmentation", {}))
    split = SplitConfig(**data.get("split", {}))
    tau = float(data.get("evaluation", {}).get("tau_mm", 2.0))
    archive = bool(data.get("hitl", {}).get("archive_revisions", False))

    backends = {}
    for name, spec in data.get("backends", {}).items():
        backends[name] = BackendDescriptor(
            name=name,
            executable=spec["executable"],
            model_id=spec.get("model_id", name),
            timeout_s=int(spec.get("timeout_s", 300)),
            expected_labels=frozenset(spec.get("expected_labels", [1, 2, 3])))

    palette = dict(DEFAULT_PALETTE)
    for name, spec in data.get("palette", {}).items():
        if name not in _LABEL_BY_NAME:
            raise ValidationError(f"palette entry {name!r} is not a known "
                                  "structure name")
        label = _LABEL_BY_NAME[name]
        rgb = tuple(float(v) for v in spec.get("rgb", palette[label].rgb))
        alpha = float(spec.get("alpha", palette[label].alpha))
        palette[label] = MaterialSpec(name, rgb, alpha)

    return PipelineConfig(preprocess=pre, registration=reg, segmentation=seg,
                          split=split, tau_mm=tau, archive_revisions=archive,
                          backends=backends, palette=palette)


def load_config(path=None) -> PipelineConfig:
    """Load the TOML config; falls back to $MAMMOFORGE_CONFIG, then defaults."""
    if path is None:
        env = os.environ.get(ENV_CONFIG)
        path = Path(env) if env else None
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"config {path} is not valid TOML: {exc}") from exc
    try:
        return _build(data)
    except TypeError as exc:
        raise ValidationError(f"config {path}: {exc}") from exc
