"""Persistence formats, experiment orchestration and the command line."""

from .formats import (load_basis, load_bases, load_grid, load_scene, save_basis, save_grid,
                      save_scene, scene_from_doc, scene_hash, scene_to_doc)
from .pipeline import (REPORT_COLUMNS, RunFlags, generate_dataset, load_dataset, measure, replay,
                       run_experiment, run_scene)

__all__ = [
    "REPORT_COLUMNS", "RunFlags", "generate_dataset", "load_basis", "load_bases", "load_dataset",
    "load_grid", "load_scene", "measure", "replay", "run_experiment", "run_scene", "save_basis",
    "save_grid", "save_scene", "scene_from_doc", "scene_hash", "scene_to_doc",
]
