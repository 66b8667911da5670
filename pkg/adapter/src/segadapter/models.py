"""Adapter model registry: deterministic dummies plus a plugin hook.

A model is selected by the request's ``model_id`` string:

    dummy_threshold                      threshold 0.5
    dummy_threshold:threshold=0.4        explicit parameter
    dummy_sphere:cx=10,cy=12,cz=8,r=5    sphere in voxel indices
    plugin:module=mypkg.mymodel          import a module exposing
    plugin:path=/some/model.py           segment(voxels, request) -> labels

Dummy kinds are pure functions of their parameters, so their output is
bitwise reproducible across runs.
"""

from __future__ import annotations

import importlib
import importlib.util
import traceback
from dataclasses import dataclass, field

import numpy as np

from .niftiio import NiftiVolume

KINDS = ("dummy_threshold", "dummy_sphere", "plugin")


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class AdapterModel:
    model_id: str
    kind: str
    params: dict = field(default_factory=dict)

    @staticmethod
    def parse(model_id: str) -> "AdapterModel":
        kind, _, param_text = model_id.partition(":")
        if kind not in KINDS:
            raise ModelError(f"unknown model kind {kind!r}; expected one of "
                             f"{KINDS}")
        params: dict = {}
        if param_text:
            for item in param_text.split(","):
                key, sep, value = item.partition("=")
                if not sep:
                    raise ModelError(f"malformed parameter {item!r} in "
                                     f"model_id {model_id!r}")
                params[key.strip()] = value.strip()
        return AdapterModel(model_id=model_id, kind=kind, params=params)

    def _float(self, key: str, default: float | None = None) -> float:
        if key in self.params:
            try:
                return float(self.params[key])
            except ValueError as exc:
                raise ModelError(f"parameter {key}={self.params[key]!r} is "
                                 "not a number") from exc
        if default is None:
            raise ModelError(f"model {self.model_id!r} needs parameter {key!r}")
        return default

    def segment(self, volume: NiftiVolume, request: dict) -> np.ndarray:
        labels_requested = request.get("labels_requested") or []
        if not labels_requested:
            raise ModelError("request carries no labels_requested")
        label = int(labels_requested[0])

        if self.kind == "dummy_threshold":
            threshold = self._float("threshold", 0.5)
            return (np.asarray(volume.voxels, dtype=np.float64)
                    >= threshold).astype(np.uint8) * label

        if self.kind == "dummy_sphere":
            center = (self._float("cx", 0.0), self._float("cy", 0.0),
                      self._float("cz", 0.0))
            radius = self._float("r", 0.0)
            nx, ny, nz = volume.dims
            x, y, z = np.meshgrid(np.arange(nx), np.arange(ny),
                                  np.arange(nz), indexing="ij")
            dist_sq = ((x - center[0]) ** 2 + (y - center[1]) ** 2
                       + (z - center[2]) ** 2)
            # strict inequality: radius 0 is a legal, empty sphere
            return (dist_sq < radius ** 2).astype(np.uint8) * label

        # plugin
        module = self._load_plugin()
        result = module.segment(np.asarray(volume.voxels), dict(request))
        labels = np.asarray(result)
        if labels.shape != volume.dims:
            raise ModelError(f"plugin returned shape {labels.shape}, "
                             f"expected {volume.dims}")
        return labels.astype(np.uint8)

    def _load_plugin(self):
        try:
            if "module" in self.params:
                return importlib.import_module(self.params["module"])
            if "path" in self.params:
                spec = importlib.util.spec_from_file_location(
                    "segadapter_plugin", self.params["path"])
                if spec is None or spec.loader is None:
                    raise ImportError(f"cannot load {self.params['path']}")
                module = importlib.util.module_from_spec(spec)
                spec.loader.exec_module(module)
                return module
            raise ModelError("plugin model needs a module= or path= parameter")
        except ModelError:
            raise
        except Exception:
            raise ModelError("plugin import failed:\n" + traceback.format_exc())
