"""Training loop with precision warmup and optional basis calibration."""
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from calibration_cache import CalibrationCache
from config.settings import Config
from hlq.errors.handlers import DatasetError, ParameterError
from hlq.harness.data import batches
from hlq.harness.layers import StepContext
from hlq.harness.model import Model, backward_step, forward, predict
from hlq.harness.optim import SCHEDULES, OptimizerConfig, learning_rate, make_optimizer
from hlq.models.quantized import RngState
from hlq.models.reports import EpochMetrics, MetricsHistory
from hlq.models.strategy import BackwardStrategy
from hlq.models.tensor import Tensor, pad_axis
from hlq.ops.backprop import ht_axis
from hlq.ops.hadamard import basis_coefficients, select_bases
from hlq.utils.sysmetrics import rss_mb

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: str = "step"
    warmup_epochs: int = None
    warmup_bits: int = Config.WARMUP_BITS
    strategy: BackwardStrategy = field(default_factory=BackwardStrategy.vanilla)
    seed: int = 0
    val_fraction: float = 0.2
    record_timing: bool = False

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ParameterError("epochs and batch size must be positive")
        if self.warmup_epochs is None:
            object.__setattr__(self, "warmup_epochs", int(self.epochs * Config.WARMUP_FRACTION))
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ParameterError(f"warmup_epochs {self.warmup_epochs} outside [0, {self.epochs}]")
        if self.warmup_bits not in Config.SUPPORTED_BITS:
            raise ParameterError(f"warmup bits must be one of {Config.SUPPORTED_BITS}")
        if self.schedule not in SCHEDULES:
            raise ParameterError(f"unknown schedule {self.schedule!r}")

    def with_strategy(self, strategy):
        return replace(self, strategy=strategy)

    def with_seed(self, seed):
        return replace(self, seed=seed)


def strategy_in_effect(strategy, epoch, warmup_epochs, warmup_bits=Config.WARMUP_BITS):
    """Every quantizer runs at `warmup_bits` during the first `warmup_epochs` epochs."""
    if epoch < warmup_epochs and strategy.quantized:
        return strategy.with_bits(warmup_bits)
    return strategy


def calibrate(model, strategies, batch, cache):
    """L1 basis selection on one batch for each calibrating layer; freezes the cache."""
    with cache:
        pending = [
            name for name in model.calibrated_layers
            if cache.needs_calibration(name) and strategies[name].grad_w.low_rank
        ]
    if pending:
        fp = forward(model, batch, StepContext(training=False), keep_inputs=pending)
    with cache:
        for name in pending:
            strategy = strategies[name]
            x3 = Tensor(fp.inputs[name])
            n = strategy.block_size
            B, L, _ = x3.shape
            axis = ht_axis(B, L, n, strategy.pad_short_axes)
            coefficients = basis_coefficients(pad_axis(x3, axis, n), axis, n)
            cache.update(name, select_bases(coefficients, strategy.grad_w.rank))
        cache.freeze()
        return cache.get_bases()


def fit(model, config, train_set, val_set, cache=None):
    """Train `model` in place; returns the per-epoch MetricsHistory."""
    if len(train_set) < config.batch_size:
        raise DatasetError(f"{len(train_set)} training samples cannot fill a batch of {config.batch_size}")
    if tuple(train_set.sample_shape) != tuple(model.spec.input_shape):
        raise DatasetError(f"dataset samples {train_set.sample_shape} do not match model input {model.spec.input_shape}")
    cache = cache or CalibrationCache(config.strategy.block_size)
    optimizer = make_optimizer(config.optimizer)
    history = MetricsHistory()
    run_rng = RngState(config.seed)
    bases = {}
    step = 0
    for epoch in range(config.epochs):
        started = time.perf_counter()
        if model.calibrated_layers and epoch == config.warmup_epochs and not cache.frozen:
            first = next(batches(train_set, config.batch_size, config.seed, epoch))
            bases = calibrate(model, model.strategy_map(config.strategy), first, cache)
            logger.info("calibrated bases at epoch %d: %s", epoch, bases)
        in_effect = strategy_in_effect(config.strategy, epoch, config.warmup_epochs, config.warmup_bits)
        strategies = {
            name: strategy_in_effect(s, epoch, config.warmup_epochs, config.warmup_bits)
            for name, s in model.strategy_map(config.strategy, bases).items()
        }
        lr = learning_rate(config.schedule, config.optimizer.lr, epoch, config.epochs)
        losses, correct, seen = [], 0, 0
        for images, labels in batches(train_set, config.batch_size, config.seed, epoch):
            ctx = StepContext(rng=run_rng.advance(step), strategies=strategies)
            fp = forward(model, (images, labels), ctx)
            grads = backward_step(model, fp)
            optimizer.step(model.named_parameters(), grads, lr)
            losses.append(fp.loss)
            correct += int(np.sum(np.argmax(fp.logits, axis=1) == labels))
            seen += labels.size
            step += 1
        val_accuracy = accuracy(model, val_set)
        metrics = EpochMetrics(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            train_accuracy=100.0 * correct / seen,
            val_accuracy=val_accuracy,
            strategy=in_effect.name,
            bits_gx=in_effect.grad_x.bits,
            bits_gw=in_effect.grad_w.bits,
            wall_time=time.perf_counter() - started,
            rss_mb=rss_mb(),
        )
        history.append(metrics)
        if not np.isfinite(metrics.train_loss):
            logger.warning("epoch %d: training loss is not finite", epoch)
        logger.info(
            "epoch %d  loss %.4f  train %.2f%%  val %.2f%%  %s (gx=%s, gw=%s)  lr %.4g",
            epoch, metrics.train_loss, metrics.train_accuracy, val_accuracy,
            in_effect.name, in_effect.grad_x.label, in_effect.grad_w.label, lr,
        )
        logger.debug("epoch %d: %.2fs, rss %.1f MB", epoch, metrics.wall_time, metrics.rss_mb)
    return history


def accuracy(model, dataset):
    if len(dataset) == 0:
        return 0.0
    return 100.0 * float(np.mean(predict(model, dataset.images) == dataset.labels))


def train(model_spec, config, dataset):
    """Build the model, split off validation data, and train; deterministic given config.seed."""
    train_set, val_set = dataset.split(config.val_fraction, config.seed)
    model = Model(model_spec)
    return fit(model, config, train_set, val_set)
