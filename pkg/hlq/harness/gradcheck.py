"""Gradient fidelity: finite differences for the exact path, cosine and bias for approximate ones."""
import logging
from dataclasses import dataclass, field

import numpy as np

from hlq.errors.handlers import ParameterError
from hlq.harness.data import synthetic_dataset
from hlq.harness.layers import StepContext
from hlq.harness.model import Model, backward_step, forward
from hlq.models.quantized import RngState
from hlq.models.strategy import BackwardStrategy

logger = logging.getLogger(__name__)

MAX_FD_PARAMS = 10 ** 4
FD_EPS = 1e-6
# each retry shrinks the step tenfold when a ReLU flips inside the difference
FD_KINK_RETRIES = 2


def _flatten(grads, names):
    return np.concatenate([np.asarray(grads[name], dtype=np.float64).ravel() for name in names])


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / denom) if denom else 1.0


def relative_error(estimate, reference):
    """||estimate - reference|| / max(||estimate||, ||reference||)."""
    estimate = np.asarray(estimate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    scale = max(np.linalg.norm(estimate), np.linalg.norm(reference))
    return float(np.linalg.norm(estimate - reference) / scale) if scale else 0.0


def gradients(model, batch, strategy, rng=None):
    ctx = StepContext(rng=rng, strategies=model.strategy_map(strategy))
    return backward_step(model, forward(model, batch, ctx))


def _loss_and_masks(model, batch):
    fp = forward(model, batch, StepContext(training=False))
    masks = [cache for layer, cache in zip(model.layers, fp.caches) if layer.kind == "relu"]
    return fp.loss, masks


def _same_masks(a, b):
    return all(np.array_equal(left, right) for left, right in zip(a, b))


def _central_difference(model, batch, flat, i, eps):
    """(estimate, kink): kink is set when a ReLU mask differs between the two evaluations."""
    original = flat[i]
    flat[i] = original + eps
    plus, plus_masks = _loss_and_masks(model, batch)
    flat[i] = original - eps
    minus, minus_masks = _loss_and_masks(model, batch)
    flat[i] = original
    return (plus - minus) / (2 * eps), not _same_masks(plus_masks, minus_masks)


def finite_difference_grads(model, batch, eps=FD_EPS, max_coords=None, seed=0):
    """Central differences of the mean loss; `max_coords` samples coordinates per tensor.

    A difference that straddles a ReLU kink is retried with a smaller step;
    coordinates that still cross one are left NaN.
    """
    rng = np.random.default_rng(seed)
    estimates = {}
    skipped = 0
    for name, value in model.named_parameters():
        flat = value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        estimate = np.full(flat.size, np.nan)
        for i in coords:
            step = eps
            for _ in range(FD_KINK_RETRIES + 1):
                value_i, kink = _central_difference(model, batch, flat, i, step)
                if not kink:
                    estimate[i] = value_i
                    break
                step /= 10
            else:
                skipped += 1
        estimates[name] = estimate.reshape(value.shape)
    if skipped:
        logger.debug("finite differences: %d coordinates sit on a ReLU kink and were skipped", skipped)
    return estimates


@dataclass
class GradCheckReport:
    max_rel_error: float = None
    rel_errors: dict = field(default_factory=dict)
    cosine: dict = field(default_factory=dict)
    bias: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "max_rel_error": self.max_rel_error,
            "rel_errors": self.rel_errors,
            "cosine": self.cosine,
            "bias": self.bias,
        }


def check_finite_differences(model_spec, batch, eps=FD_EPS, max_coords=None):
    """Per-tensor relative error of vanilla gradients vs central differences, in float64.

    Models of MAX_FD_PARAMS or more parameters need `max_coords` sampling.
    """
    model = Model(model_spec, dtype=np.float64)
    if max_coords is None and model.param_count >= MAX_FD_PARAMS:
        raise ParameterError(
            f"{model.param_count} parameters is too many for full finite differences; sample with max_coords"
        )
    images, labels = batch
    batch = (images.astype(np.float64), labels)
    analytic = gradients(model, batch, BackwardStrategy.vanilla())
    numeric = finite_difference_grads(model, batch, eps, max_coords)
    errors = {}
    for name, estimate in numeric.items():
        mask = np.isfinite(estimate)
        errors[name] = relative_error(analytic[name][mask], estimate[mask])
    return errors


def grad_check(model_spec, strategies, seeds, batch_size=32, dataset=None, eps=FD_EPS, max_coords=None,
               finite_differences=True):
    """Fidelity report of `strategies` ({label: BackwardStrategy}) against the exact gradients.

    cosine: per strategy, mean and min over seeded batches of the cosine between
    the concatenated parameter gradients and the exact ones, plus per-tensor means.
    bias: on the first batch, relative norm of the seed-averaged gradient error.
    """
    seeds = tuple(seeds)
    if not seeds:
        raise ParameterError("grad_check needs at least one seed")
    if dataset is None:
        if len(model_spec.input_shape) != 3:
            raise ParameterError("grad_check needs a dataset for models without image input")
        channels, size, _ = model_spec.input_shape
        dataset = synthetic_dataset(
            num_samples=batch_size * len(seeds), num_classes=model_spec.num_classes,
            image_size=size, channels=channels,
        )
    report = GradCheckReport()
    batches = []
    for k, seed in enumerate(seeds):
        index = np.random.default_rng([seed, k]).choice(len(dataset), size=batch_size, replace=False)
        batches.append((dataset.images[index], dataset.labels[index]))

    if finite_differences:
        report.rel_errors = check_finite_differences(model_spec, batches[0], eps, max_coords)
        report.max_rel_error = max(report.rel_errors.values())
        logger.info("finite differences: max relative error %.3g", report.max_rel_error)

    model = Model(model_spec)
    names = [name for name, _ in model.named_parameters()]
    exact = [gradients(model, batch, BackwardStrategy.vanilla()) for batch in batches]
    for label, strategy in strategies.items():
        totals, per_param = [], {name: [] for name in names}
        for seed, batch, reference in zip(seeds, batches, exact):
            approx = gradients(model, batch, strategy, RngState(seed))
            totals.append(cosine_similarity(_flatten(approx, names), _flatten(reference, names)))
            for name in names:
                per_param[name].append(cosine_similarity(approx[name], reference[name]))
        report.cosine[label] = {
            "mean": float(np.mean(totals)),
            "min": float(np.min(totals)),
            "per_param": {name: float(np.mean(values)) for name, values in per_param.items()},
        }
        samples = [_flatten(gradients(model, batches[0], strategy, RngState(seed)), names) for seed in seeds]
        reference = _flatten(exact[0], names)
        report.bias[label] = relative_error(np.mean(samples, axis=0), reference)
        logger.info("%s: cosine %.4f (min %.4f), bias %.3g", label, report.cosine[label]["mean"],
                    report.cosine[label]["min"], report.bias[label])
    return report
