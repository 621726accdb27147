import json
import os
from typing import Any, Dict, Optional

from utils.logger import get_logger

logger = get_logger('tracker')


class ExperimentTracker:
    """
    Per-run metric log: JSON lines in `<output_dir>/metrics.jsonl`, the resolved
    config in `config.json`, optionally mirrored to Weights & Biases.
    """
    def __init__(
        self,
        project_name: str,
        experiment_name: str,
        config: Dict[str, Any],
        output_dir: str = "./experiments",
        use_wandb: bool = False
    ):
        self.experiment_name = experiment_name
        self.output_dir = output_dir
        self.use_wandb = use_wandb
        self.metrics_path = os.path.join(self.output_dir, "metrics.jsonl")

        os.makedirs(self.output_dir, exist_ok=True)
        # a re-run into the same directory starts a fresh log
        if os.path.exists(self.metrics_path):
            os.remove(self.metrics_path)

        self._wandb = None
        if use_wandb:
            import wandb
            wandb.init(
                project=project_name,
                name=experiment_name,
                config=config
            )
            self._wandb = wandb

        self._save_config(config)

    def _save_config(self, config: Dict[str, Any]):
        config_path = os.path.join(self.output_dir, "config.json")
        with open(config_path, 'w', encoding='utf-8') as f:
            json.dump(config, f, indent=2)

    def log_metrics(self, metrics: Dict[str, float], step: Optional[int] = None):
        record = dict(metrics)
        if step is not None:
            record['step'] = step

        if self._wandb is not None:
            self._wandb.log(metrics, step=step)

        with open(self.metrics_path, 'a', encoding='utf-8') as f:
            f.write(json.dumps(record) + '\n')

    def save_artifact(self, name: str, artifact_path: str):
        """Upload a checkpoint as a wandb model artifact (no-op without wandb)."""
        if self._wandb is not None:
            artifact = self._wandb.Artifact(name, type='model')
            artifact.add_file(artifact_path)
            self._wandb.log_artifact(artifact)

    def finish(self):
        if self._wandb is not None:
            self._wandb.finish()
            logger.info(f"Finished wandb run {self.experiment_name}")
