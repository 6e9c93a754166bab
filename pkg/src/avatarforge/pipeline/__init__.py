"""End-to-end orchestration: config, datasets, synthesis, stages, metrics."""

from .config import RunConfig, apply_preset, config_hash, from_json, load_config, save_config, to_json
from .dataset import Dataset, DatasetError, load_dataset, save_dataset
from .stages import STAGE_ORDER, StageError, evaluate_against_gt, run_all, run_stage
