import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from data.dataset import FodPatchDataset, channel_statistics, get_dataloader, sample_patch_set
from data.phantom import Subject
from models.swin_fod import FodSwinNet
from trainers.optim import Adam
from utils.config import TrainConfig
from utils.errors import NonFiniteError
from utils.experiment_tracker import ExperimentTracker
from utils.logger import get_logger
from utils.losses import get_loss, mse

logger = get_logger('trainer')

HISTORY_COLUMNS = ['epoch', 'train_mse', 'val_mse', 'seconds']
BEST_CHECKPOINT = 'best.ckpt'
LAST_CHECKPOINT = 'last.ckpt'


@dataclass
class TrainHistory:
    records: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mse: float = math.inf
    # mse of the untrained model on the first epoch's patches
    initial_train_mse: float = math.nan
    stopped_early: bool = False

    def append(self, epoch, train_mse, val_mse, seconds):
        self.records.append({'epoch': epoch, 'train_mse': train_mse, 'val_mse': val_mse, 'seconds': seconds})
        if val_mse < self.best_val_mse:
            self.best_val_mse = val_mse
            self.best_epoch = epoch
            return True
        return False

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=HISTORY_COLUMNS)

    def save_csv(self, path):
        self.to_frame().to_csv(path, index=False)

    @property
    def final_train_mse(self) -> float:
        return self.records[-1]['train_mse'] if self.records else math.nan


class Trainer:
    """MSE training of a FodSwinNet on tissue-gated patches.

    Every epoch draws `patches_per_epoch` fresh patches from one seeded stream;
    validation uses a patch set sampled once from `val_seed` and kept frozen.
    The model is checkpointed whenever validation MSE improves and training
    stops after `patience` epochs without improvement.
    """

    def __init__(self, model: FodSwinNet, train_subjects: Sequence[Subject],
                 val_subjects: Optional[Sequence[Subject]], config: TrainConfig,
                 output_dir: Optional[str] = None, tracker: Optional[ExperimentTracker] = None,
                 normalize=True):
        if not train_subjects:
            raise ValueError("need at least one training subject")
        self.config = config
        self.dtype = torch.float64 if config.dtype == 'float64' else torch.float32
        self.device = torch.device('cpu')
        self.model = model.to(device=self.device, dtype=self.dtype)
        self.train_subjects = list(train_subjects)
        if not val_subjects:
            logger.warning("No validation subjects given, validating on separate patches of the training subjects")
            val_subjects = self.train_subjects
        self.val_subjects = list(val_subjects)
        self.output_dir = output_dir or config.checkpoint_dir
        self.tracker = tracker
        self.patch_size = model.config.patch_size

        if normalize:
            stats = channel_statistics(self.train_subjects, residual=model.config.residual)
            self.model.set_normalization(stats.input_mean, stats.input_std, stats.output_mean, stats.output_std)

        # gradients follow config.loss; history always reports the plain MSE
        self.criterion = get_loss(config.loss, channel_scale=self.model.output_std)
        self.optimizer = Adam(self.model.parameters(), lr=config.learning_rate)
        self.rng = np.random.default_rng(config.seed)

        val_specs = sample_patch_set(self.val_subjects, config.val_patches, self.patch_size,
                                     config.min_tissue_frac, config.val_seed, config.max_attempts)
        self.val_loader = get_dataloader(FodPatchDataset(self.val_subjects, val_specs, self.dtype),
                                         batch_size=config.batch_size)

        self.patience = config.patience
        self.no_improvement = 0
        self.history = TrainHistory()

    def _epoch_loader(self):
        specs = sample_patch_set(self.train_subjects, self.config.patches_per_epoch, self.patch_size,
                                 self.config.min_tissue_frac, self.rng, self.config.max_attempts)
        return get_dataloader(FodPatchDataset(self.train_subjects, specs, self.dtype),
                              batch_size=self.config.batch_size)

    def train(self, epochs: Optional[int] = None) -> TrainHistory:
        """Full training loop with validation, checkpointing and early stopping."""
        epochs = epochs or self.config.max_epochs
        os.makedirs(self.output_dir, exist_ok=True)
        loader = self._epoch_loader()
        self.history.initial_train_mse = self.evaluate(loader)
        logger.info(f"Initial train MSE {self.history.initial_train_mse:.6g}")

        for epoch in range(1, epochs + 1):
            start = time.perf_counter()
            train_mse = self.train_epoch(loader)
            val_mse = self.validate()
            seconds = time.perf_counter() - start
            improved = self.history.append(epoch, train_mse, val_mse, seconds)
            logger.info(f"Epoch {epoch}/{epochs}: train_mse={train_mse:.6g} val_mse={val_mse:.6g} ({seconds:.1f}s)")
            if self.tracker is not None:
                # wall time goes to history.csv only
                self.tracker.log_metrics({'train_mse': train_mse, 'val_mse': val_mse}, step=epoch)

            if improved:
                self.no_improvement = 0
                self._save_checkpoint(epoch, val_mse, BEST_CHECKPOINT)
            else:
                self.no_improvement += 1
            self._save_checkpoint(epoch, val_mse, LAST_CHECKPOINT)

            if self.no_improvement >= self.patience:
                logger.info(f"Early stopping: no improvement for {self.patience} epochs")
                self.history.stopped_early = True
                break
            if epoch < epochs:
                loader = self._epoch_loader()

        self.history.save_csv(os.path.join(self.output_dir, 'history.csv'))
        if self.tracker is not None:
            self.tracker.save_artifact('best-model', self.best_checkpoint_path)
        logger.info(f"Best epoch {self.history.best_epoch} with val_mse={self.history.best_val_mse:.6g}")
        return self.history

    def train_epoch(self, loader) -> float:
        """One pass over a patch loader; returns the per-patch mean training MSE."""
        self.model.train()
        total, count = 0.0, 0
        for inputs, targets in tqdm(loader, desc="Training", leave=False):
            self.optimizer.zero_grad()
            outputs = self.model(inputs)
            loss = self.criterion(outputs, targets)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite training loss {loss.item()}")
            loss.backward()
            self.optimizer.step()
            total += mse(outputs.detach(), targets).item() * inputs.shape[0]
            count += inputs.shape[0]
        return total / count

    @torch.no_grad()
    def evaluate(self, loader) -> float:
        self.model.eval()
        total, count = 0.0, 0
        for inputs, targets in loader:
            loss = mse(self.model(inputs), targets)
            total += loss.item() * inputs.shape[0]
            count += inputs.shape[0]
        return total / count

    def validate(self) -> float:
        """MSE on the frozen validation patch set."""
        val_mse = self.evaluate(self.val_loader)
        if not math.isfinite(val_mse):
            raise NonFiniteError(f"non-finite validation loss {val_mse}")
        return val_mse

    @property
    def best_checkpoint_path(self) -> str:
        return os.path.join(self.output_dir, BEST_CHECKPOINT)

    def _save_checkpoint(self, epoch, val_mse, filename):
        self.model.save_pretrained(
            os.path.join(self.output_dir, filename),
            train_config=self.config.to_dict(),
            seed=self.config.seed,
            epoch=epoch,
            val_mse=val_mse,
        )
