"""Experiment configuration: recipes, config files and dataset loading.

A config is a JSON object. Values are resolved in this order, later
entries winning: built-in defaults, the named recipe, the config file,
command-line flags. Nested objects (``dataset``, ``hp``, ``sweep``,
``curriculum``) are merged key by key.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .archs import preset
from .datasets import (
    DatasetBundle,
    IngestionError,
    load_7scenes_scene,
    load_bundle,
    load_cambridge_sequence,
    load_tum_sequence,
)
from .inputs import InputConfig, default_intrinsics
from .synthetic import SceneSpec, generate_synthetic_scene
from .train import HyperParams, SweepGrid

OUTPUT_ROOT_ENV = "CNNMAP_OUTPUT_ROOT"
FAMILIES = ("synthetic", "bundle", "tum", "7scenes", "cambridge")

DEFAULTS = {
    "dataset": {"family": "synthetic", "seed": 7, "spec": {}},
    "arch": "MINI",
    "modality": "rgb",
    "side": None,
    "scene_scale": 1.0,
    "init_std": 0.01,
    "pretrained": None,
    "hp": HyperParams().to_dict(),
    "sweep": {"combos": 20, "epochs": 250, "workers": 1, "grid": {}},
    "curriculum": {"test": None, "order": None},
    "out": None,
}


def load_recipes() -> dict:
    return json.loads(resources.files("cnnmap").joinpath("data/recipes.json").read_text())["recipes"]


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``None`` values in ``override`` do not clear ``base`` entries."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        elif v is not None or k not in out:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    dataset: dict
    arch: str
    modality: str
    side: int | None
    scene_scale: float
    init_std: object
    pretrained: str | None
    hp: HyperParams
    sweep: dict = field(default_factory=dict)
    curriculum: dict = field(default_factory=dict)
    out: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = merge(DEFAULTS, d)
        unknown = set(d) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if d["dataset"].get("family") not in FAMILIES:
            raise ValueError(f"dataset family must be one of {FAMILIES}, got {d['dataset'].get('family')!r}")
        std = d["init_std"]
        if not (std == "he" or isinstance(std, (int, float))):
            raise ValueError(f"init_std must be a number or 'he', got {std!r}")
        return cls(d["dataset"], d["arch"], d["modality"], d["side"], float(d["scene_scale"]), std,
                   d["pretrained"], HyperParams.from_dict(d["hp"]), d["sweep"], d["curriculum"], d["out"])

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "arch": self.arch, "modality": self.modality, "side": self.side,
                "scene_scale": self.scene_scale, "init_std": self.init_std, "pretrained": self.pretrained,
                "hp": self.hp.to_dict(), "sweep": self.sweep, "curriculum": self.curriculum, "out": self.out}

    @property
    def seed(self) -> int:
        return self.hp.seed

    def input_config(self) -> InputConfig:
        return InputConfig(self.modality, self.arch_spec().input_side, self.scene_scale)

    def arch_spec(self):
        from .inputs import Modality

        return preset(self.arch, Modality.parse(self.modality).channels, self.side)

    def sweep_grid(self) -> SweepGrid:
        g = {k: tuple(v) for k, v in self.sweep.get("grid", {}).items()}
        return SweepGrid(**g)

    def output_dir(self, command: str) -> Path:
        tag = self.modality.replace("+", "-")
        return output_path(self.out, f"{command}-{self.arch}-{tag}-seed{self.seed}")


def output_path(out, default_name: str) -> Path:
    """``out`` if given, else ``default_name``; relative paths go under ``$CNNMAP_OUTPUT_ROOT`` (default ``runs``)."""
    p = Path(out) if out else Path(default_name)
    return p if p.is_absolute() else Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / p


def resolve_config(recipe: str | None = None, config_file=None, overrides: dict | None = None) -> ExperimentConfig:
    """Build a config from defaults, a recipe name, a JSON file and flag overrides.

    A file written as an experiment manifest (with a top-level ``config``
    entry) can be passed directly, which replays that experiment.
    """
    d: dict = {}
    if recipe is not None:
        recipes = load_recipes()
        if recipe not in recipes:
            raise ValueError(f"unknown recipe {recipe!r}; available: {sorted(recipes)}")
        d = merge(d, recipes[recipe])
    if config_file is not None:
        try:
            doc = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ValueError(f"cannot read config {config_file}: {e}") from e
        d = merge(d, doc.get("config", doc))
    return ExperimentConfig.from_dict(merge(d, overrides or {}))


def _root(spec: dict) -> Path:
    if not spec.get("root"):
        raise IngestionError(f"dataset family {spec['family']!r} needs a root directory (--data)")
    root = Path(spec["root"])
    if not root.exists():
        raise IngestionError(f"dataset root {root} does not exist")
    return root


def load_dataset(spec: dict) -> DatasetBundle:
    """Load the bundle a config's ``dataset`` entry describes."""
    family = spec.get("family")
    if family == "synthetic":
        return generate_synthetic_scene(SceneSpec(**spec.get("spec", {})), int(spec.get("seed", 0)))
    if family == "bundle":
        return load_bundle(_root(spec))
    if family == "7scenes":
        return load_7scenes_scene(_root(spec), tuple(spec.get("validation", ())))
    if family == "cambridge":
        root = _root(spec)
        train = load_cambridge_sequence(root, spec.get("train_split", "dataset_train.txt"), "train")
        test = load_cambridge_sequence(root, spec.get("test_split", "dataset_test.txt"), "test")
        return DatasetBundle(root.name, [train, test], {"rgb"})
    if family == "tum":
        root = _root(spec)
        intr = default_intrinsics(spec.get("camera", "tum_fr3"))
        tol = float(spec.get("assoc_tolerance", 0.02))
        trajs = []
        for role in ("train", "validation", "test"):
            for name in spec.get(role, []):
                trajs.append(load_tum_sequence(root / name, tol, role, intr))
        if not trajs:
            raise IngestionError("tum dataset lists no sequences")
        return DatasetBundle(root.name, trajs, {"rgb", "depth"})
    raise ValueError(f"unknown dataset family {family!r}")
