"""Per-path ablation: quantization and low-rank treatments on g_x and g_w separately."""
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from config.settings import Config
from hlq.errors.handlers import ParameterError
from hlq.harness.train import train
from hlq.models.strategy import FP32, BackwardStrategy, GradPath
from run_queue import RunQueue

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationCell:
    grad_x: GradPath
    grad_w: GradPath

    @property
    def name(self):
        return f"{self.grad_x.label}/{self.grad_w.label}"

    def strategy(self, block_size=Config.BLOCK_SIZE, rounding="stochastic"):
        return BackwardStrategy.custom(self.grad_x, self.grad_w, block_size=block_size, rounding=rounding)


def ablation_grid(bits=4, rank=Config.RANK):
    """The five quantization rows plus HLA on each path alone."""
    plain = GradPath(bits=bits)
    transformed = GradPath(bits=bits, hadamard=True)
    low_rank = GradPath(rank=rank)
    return (
        AblationCell(FP32, FP32),
        AblationCell(FP32, plain),
        AblationCell(FP32, transformed),
        AblationCell(plain, FP32),
        AblationCell(transformed, FP32),
        AblationCell(FP32, low_rank),
        AblationCell(low_rank, FP32),
    )


def run_cell(model_spec, train_config, dataset):
    """Final validation accuracy of one (cell, seed) run."""
    history = train(model_spec, train_config, dataset)
    return history.final.val_accuracy


@dataclass
class AblationRow:
    grad_x: str
    grad_w: str
    accuracies: list = field(default_factory=list)

    @property
    def mean(self):
        return float(np.mean(self.accuracies))

    @property
    def spread(self):
        return float(np.std(self.accuracies))

    def to_dict(self):
        return {
            "g_x": self.grad_x,
            "g_w": self.grad_w,
            "accuracies": [round(a, 4) for a in self.accuracies],
            "mean": round(self.mean, 4),
            "spread": round(self.spread, 4),
        }


@dataclass
class AblationReport:
    seeds: tuple
    rows: dict = field(default_factory=dict)

    def row(self, grad_x, grad_w):
        return self.rows[f"{grad_x}/{grad_w}"]

    def wins(self, better, worse):
        """Seeds where row `better` beats row `worse`."""
        return sum(1 for a, b in zip(self.rows[better].accuracies, self.rows[worse].accuracies) if a > b)

    def orderings(self, bits=4):
        plain, transformed = f"{bits}-bit", f"{bits}-bit+HT"
        checks = {}
        if {f"{transformed}/FP", f"{plain}/FP"} <= self.rows.keys():
            checks["ht_helps_grad_x"] = self.wins(f"{transformed}/FP", f"{plain}/FP")
        if {"FP/HLA", "HLA/FP"} <= self.rows.keys():
            checks["hla_prefers_grad_w"] = self.wins("FP/HLA", "HLA/FP")
        if {f"FP/{transformed}", f"FP/{plain}", f"{transformed}/FP", f"{plain}/FP"} <= self.rows.keys():
            checks["grad_w_ht_gap"] = abs(self.rows[f"FP/{transformed}"].mean - self.rows[f"FP/{plain}"].mean)
            checks["grad_x_ht_gap"] = self.rows[f"{transformed}/FP"].mean - self.rows[f"{plain}/FP"].mean
        return checks

    def to_dict(self):
        return {
            "seeds": list(self.seeds),
            "rows": [row.to_dict() for row in self.rows.values()],
            "orderings": self.orderings(),
        }


def ablation(model_spec, train_config, dataset, seeds, cells=None, workers=1, rounding="stochastic"):
    """Train every cell once per seed; rows report mean and spread of final accuracy."""
    seeds = tuple(seeds)
    if not seeds:
        raise ParameterError("ablation needs at least one seed")
    cells = cells or ablation_grid(rank=train_config.strategy.grad_w.rank or Config.RANK)
    queue = RunQueue(workers)
    for cell in cells:
        strategy = cell.strategy(train_config.strategy.block_size, rounding)
        for seed in seeds:
            queue.add_run(
                f"{cell.name}#{seed}", run_cell,
                replace(model_spec, seed=seed), replace(train_config, strategy=strategy, seed=seed), dataset,
            )
    results = queue.run()
    report = AblationReport(seeds)
    for cell in cells:
        row = AblationRow(cell.grad_x.label, cell.grad_w.label)
        row.accuracies = [results[f"{cell.name}#{seed}"] for seed in seeds]
        report.rows[cell.name] = row
        logger.info("%-16s mean %.2f +- %.2f", cell.name, row.mean, row.spread)
    return report
