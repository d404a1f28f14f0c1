"""
Two-stage triplet training with plain SGD.

Stage 1 trains the backbone and W_g on single-slice descriptors (every slice
is an independent example, losses averaged over slices). Stage 2 trains the
full multi-slice model. Each epoch draws one positive and one negative per
query, shuffles the triplets and takes one SGD step per batch; gradients of a
batch are summed in triplet order so results do not depend on ``jobs``.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from bev.raster import BevConfig, make_bev_stack
from clouds.pointcloud import PointCloud, rotate_z
from datasets.io import atomic_write_csv
from descriptors.autograd import gradients
from descriptors.pipeline import DescriptorModel, describe_graph, describe_single_slices
from forestlpr.exceptions import ConfigError, DatasetError
from mining.overlap import PairSet

from .losses import triplet_loss

logger = logging.getLogger(__name__)

CURVE_FIELDS = ['epoch', 'stage', 'mean_loss']


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.3
    lr: float = 1e-3
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    batch_size: int = 4
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if not self.margin > 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Triplet:
    query: str
    positive: str
    negative: str

    def __post_init__(self):
        if len({self.query, self.positive, self.negative}) != 3:
            raise DatasetError(f"triplet ids must be distinct: {self.query}, {self.positive}, {self.negative}")


@dataclass
class TrainingResult:
    model: DescriptorModel
    curve: list = field(default_factory=list)

    def losses(self, stage: int | None = None) -> list[float]:
        return [row['mean_loss'] for row in self.curve if stage is None or row['stage'] == stage]


def augment(cloud: PointCloud, rng: np.random.Generator) -> PointCloud:
    """Rotate about z by an angle drawn uniformly from (-pi, pi)."""
    return rotate_z(cloud, rng.uniform(-math.pi, math.pi))


def sample_triplets(pairs: PairSet, rng: np.random.Generator, available=None) -> list[Triplet]:
    """One (positive, negative) draw per query, in sorted query order."""
    triplets = []
    for query in pairs.trainable_queries():
        positives = [p for p in pairs.positives_of(query) if available is None or p in available]
        negatives = [n for n in pairs.negatives_of(query) if available is None or n in available]
        if (available is not None and query not in available) or not positives or not negatives:
            continue
        triplets.append(Triplet(query, positives[rng.integers(len(positives))], negatives[rng.integers(len(negatives))]))
    return triplets


def triplet_objective(images, model: DescriptorModel, stage: int, margin: float):
    """
    Loss of one (query, positive, negative) image triple as a tape value.

    Stage 1 averages the per-slice triplet losses of single-slice
    descriptors; stage 2 (and concat fusion) uses the fused descriptor.
    """
    if stage == 1 and model.fusion != 'concat':
        q, p, n = (describe_single_slices(im, model) for im in images)
        return sum(triplet_loss(a, b, c, margin) for a, b, c in zip(q, p, n)) * (1.0 / len(q))
    q, p, n = (describe_graph(im, model) for im in images)
    return triplet_loss(q, p, n, margin)


def trainable_parameters(model: DescriptorModel, stage: int) -> list:
    """Parameters that reach the loss in the given stage."""
    high = max(model.backbone.config.levels)
    params = []
    for name in model.backbone.names():
        if name.startswith('layers.') and int(name.split('.')[1]) >= high:
            continue
        params.append(model.backbone[name])
    uses_weights = stage == 2 and model.fusion in ('interaction', 'no_interaction')
    if uses_weights:
        params.append(model.head['w_a'])
    params.append(model.head['w_g'])
    return params


class Trainer:

    def __init__(self, model: DescriptorModel, clouds: dict, pairs: PairSet, cfg: TrainConfig,
                 bev: BevConfig, jobs: int = 1):
        self.model = model
        self.clouds = clouds
        self.pairs = pairs
        self.cfg = cfg
        self.bev = bev
        self.jobs = max(1, jobs)
        self.rng = np.random.default_rng(cfg.seed)
        self._static = {}

    def _images(self, submap_id: str, view: PointCloud | None) -> np.ndarray:
        if view is None:
            return self._static[submap_id]
        return make_bev_stack(view, self.bev).as_array()

    def _triplet_loss(self, item, stage: int, params):
        triplet, views = item
        ids = (triplet.query, triplet.positive, triplet.negative)
        images = [self._images(sid, view) for sid, view in zip(ids, views)]
        loss = triplet_objective(images, self.model, stage, self.cfg.margin)
        return loss.item(), gradients(loss, params)

    def run_epoch(self, stage: int) -> float:
        triplets = sample_triplets(self.pairs, self.rng, available=self.clouds)
        if not triplets:
            raise DatasetError("no valid triplets: every query needs a positive and a negative")
        order = self.rng.permutation(len(triplets))
        params = trainable_parameters(self.model, stage)
        total = 0.0
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            for start in range(0, len(order), self.cfg.batch_size):
                batch = [triplets[i] for i in order[start:start + self.cfg.batch_size]]
                items = [(t, self._views(t)) for t in batch]
                results = list(pool.map(lambda item: self._triplet_loss(item, stage, params), items))
                summed = [sum(r[1][k] for r in results) for k in range(len(params))]
                scale = self.cfg.lr / len(batch)
                for tensor, grad in zip(params, summed):
                    tensor.data = tensor.data - scale * grad
                total += sum(r[0] for r in results)
        return total / len(triplets)

    def _views(self, triplet: Triplet):
        """Augmented clouds of a triplet; without augmentation, caches the fixed images instead."""
        ids = (triplet.query, triplet.positive, triplet.negative)
        if self.cfg.augment:
            return tuple(augment(self.clouds[sid], self.rng) for sid in ids)
        for sid in ids:
            if sid not in self._static:
                self._static[sid] = make_bev_stack(self.clouds[sid], self.bev).as_array()
        return (None, None, None)

    def train(self, progress=None) -> TrainingResult:
        result = TrainingResult(self.model)
        epoch = 0
        for stage, epochs in ((1, self.cfg.stage1_epochs), (2, self.cfg.stage2_epochs)):
            for _ in range(epochs):
                epoch += 1
                mean_loss = self.run_epoch(stage)
                result.curve.append({'epoch': epoch, 'stage': stage, 'mean_loss': mean_loss})
                logger.info(f"stage {stage} epoch {epoch}: mean loss {mean_loss:.6f}")
                if progress is not None:
                    progress(epoch, stage, mean_loss)
        return result


def train(model: DescriptorModel, clouds: dict, pairs: PairSet, cfg: TrainConfig, bev: BevConfig,
          jobs: int = 1, progress=None) -> TrainingResult:
    """Train ``model`` in place on pre-processed clouds keyed by submap id."""
    if not sample_triplets(pairs, np.random.default_rng(cfg.seed), available=clouds):
        raise DatasetError("no valid triplets: every query needs a positive and a negative")
    return Trainer(model, clouds, pairs, cfg, bev, jobs=jobs).train(progress)


def write_loss_curve(result: TrainingResult, path):
    rows = [{'epoch': r['epoch'], 'stage': r['stage'], 'mean_loss': repr(float(r['mean_loss']))} for r in result.curve]
    return atomic_write_csv(path, CURVE_FIELDS, rows)
