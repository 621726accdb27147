import os
import sys

import yaml

from data.phantom import Subject
from models.swin_fod import init_params
from trainers.trainer import Trainer
from utils.config import build_sections, load_config
from utils.experiment_tracker import ExperimentTracker
from utils.logger import get_logger

logger = get_logger('train')


def load_subjects(data_dir):
    """Training and validation subjects of a phantom directory.

    A cohort directory (with split.yaml) yields its train/val subjects; a single
    subject directory yields that subject for training and no validation set.
    """
    split_path = os.path.join(data_dir, 'split.yaml')
    if not os.path.exists(split_path):
        return [Subject.load(data_dir)], []
    with open(split_path, 'r', encoding='utf-8') as f:
        split = yaml.safe_load(f) or {}
    train = [Subject.load(os.path.join(data_dir, name)) for name in split.get('train', [])]
    val = [Subject.load(os.path.join(data_dir, name)) for name in split.get('val', [])]
    if not train:
        raise ValueError(f"{split_path} lists no training subjects")
    return train, val


def train_model(config_path=None, data_dir='phantom', output_dir=None, overrides=None, sections=None):
    """Train a FodSwinNet on phantom subjects.

    Returns:
        (path of the best checkpoint, TrainHistory)
    """
    if sections is None:
        sections = build_sections(load_config(config_path), overrides)
    model_cfg, train_cfg = sections['model'], sections['training']
    output_dir = output_dir or train_cfg.checkpoint_dir

    train_subjects, val_subjects = load_subjects(data_dir)
    logger.info(f"Training on {len(train_subjects)} subject(s), validating on {len(val_subjects)}")

    model = init_params(model_cfg, seed=train_cfg.seed)
    tracker = ExperimentTracker(
        project_name=train_cfg.wandb_project,
        experiment_name=os.path.basename(os.path.abspath(output_dir)),
        config={name: cfg.to_dict() for name, cfg in sections.items()},
        output_dir=output_dir,
        use_wandb=train_cfg.use_wandb,
    )
    try:
        trainer = Trainer(model, train_subjects, val_subjects, train_cfg, output_dir=output_dir, tracker=tracker)
        history = trainer.train(train_cfg.max_epochs)
    finally:
        tracker.finish()
    return trainer.best_checkpoint_path, history


if __name__ == "__main__":
    from cli import run
    sys.exit(run(['train'] + sys.argv[1:]))
