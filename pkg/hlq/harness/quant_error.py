"""Quantization-error study on heavy-tailed gradients, with and without the block Hadamard transform."""
import logging
from dataclasses import dataclass, field

import numpy as np

from config.settings import Config
from hlq.harness.gradcheck import cosine_similarity
from hlq.models.quantized import RngState
from hlq.models.tensor import Tensor, matmul
from hlq.ops.backprop import hq_gx, naive_quant_backward
from hlq.ops.hadamard import block_ht, make_plan
from hlq.ops.quantize import dequant, quantize

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 64


def heavy_tailed(shape, sigma, rng):
    """Random-sign entries with log-normal magnitudes."""
    magnitude = rng.lognormal(mean=0.0, sigma=sigma, size=shape)
    return (rng.choice((-1.0, 1.0), size=shape) * magnitude).astype(np.float32)


def _mse(a, b):
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def _histogram(values, bins=HISTOGRAM_BINS):
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64).ravel(), bins=bins)
    return {"counts": counts.tolist(), "edges": [float(e) for e in edges]}


@dataclass
class QuantErrorReport:
    bits: int
    trials: int
    shape: tuple
    sigma: float
    raw_mse_plain: list = field(default_factory=list)
    raw_mse_ht: list = field(default_factory=list)
    product_mse_plain: list = field(default_factory=list)
    product_mse_ht: list = field(default_factory=list)
    product_cosine_plain: list = field(default_factory=list)
    product_cosine_ht: list = field(default_factory=list)
    histograms: dict = field(default_factory=dict)

    @staticmethod
    def _fraction(better, worse, higher_wins=False):
        pairs = list(zip(better, worse))
        if not pairs:
            return 0.0
        wins = sum(1 for b, w in pairs if (b > w if higher_wins else b < w))
        return wins / len(pairs)

    @property
    def raw_win_fraction(self):
        """Share of trials where quantizing after the transform has the lower MSE."""
        return self._fraction(self.raw_mse_ht, self.raw_mse_plain)

    @property
    def product_win_fraction(self):
        return self._fraction(self.product_mse_ht, self.product_mse_plain)

    @property
    def cosine_win_fraction(self):
        return self._fraction(self.product_cosine_ht, self.product_cosine_plain, higher_wins=True)

    def summary(self):
        return {
            "bits": self.bits,
            "trials": self.trials,
            "shape": list(self.shape),
            "sigma": self.sigma,
            "raw_mse_plain": float(np.mean(self.raw_mse_plain)),
            "raw_mse_ht": float(np.mean(self.raw_mse_ht)),
            "product_mse_plain": float(np.mean(self.product_mse_plain)),
            "product_mse_ht": float(np.mean(self.product_mse_ht)),
            "raw_win_fraction": self.raw_win_fraction,
            "product_win_fraction": self.product_win_fraction,
            "cosine_win_fraction": self.cosine_win_fraction,
        }

    def to_dict(self):
        return {"summary": self.summary(), "histograms": self.histograms}


def quant_error_study(trials=100, shape=(16, 256), bits=4, seed=0, sigma=2.0, inner=64,
                      block_size=Config.BLOCK_SIZE, rounding="stochastic"):
    """Paired trials: quantize a heavy-tailed (M, O) gradient directly and after a block HT on O.

    raw: MSE of the quantized tensor against its (transformed) input.
    product: MSE and cosine of g_x = g_y . w (w is (O, inner) Gaussian) against the exact product.
    Histograms hold the first trial's values before and after the transform.
    """
    M, O = shape
    report = QuantErrorReport(bits, trials, tuple(shape), sigma)
    plan = make_plan(block_size, block_size, 1, tuple(range(block_size)))
    root = RngState(seed)
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        g_y = Tensor(heavy_tailed((M, O), sigma, rng))
        w = Tensor(rng.standard_normal((O, inner)).astype(np.float32) / np.sqrt(O))
        transformed = block_ht(g_y, plan)
        stream = root.split(trial)

        plain_q = dequant(quantize(g_y, bits, rounding, stream.split(0)))
        ht_q = dequant(quantize(transformed, bits, rounding, stream.split(1)))
        report.raw_mse_plain.append(_mse(plain_q.data, g_y.data))
        report.raw_mse_ht.append(_mse(ht_q.data, transformed.data))

        exact = matmul(g_y, w).data
        g_y3 = Tensor(g_y.data[None])
        x_dummy = Tensor(np.zeros((1, M, inner), dtype=np.float32))
        naive = naive_quant_backward(x_dummy, w, g_y3, bits, stream.split(2), rounding).g_x
        hq = hq_gx(g_y3, w, bits, stream.split(3), rounding, block_size)
        report.product_mse_plain.append(_mse(naive.data[0], exact))
        report.product_mse_ht.append(_mse(hq.data[0], exact))
        report.product_cosine_plain.append(cosine_similarity(naive.data[0], exact))
        report.product_cosine_ht.append(cosine_similarity(hq.data[0], exact))

        if trial == 0:
            report.histograms = {"before": _histogram(g_y.data), "after": _histogram(transformed.data)}
    logger.info(
        "quant-error study: HT wins %.0f%% raw, %.0f%% product over %d trials",
        100 * report.raw_win_fraction, 100 * report.product_win_fraction, trials,
    )
    return report
