import logging
from dataclasses import replace

import hlq
from hlq.costmodel.catalog import load_catalog
from hlq.costmodel.flops import lbp_wht_dense_flops, memory_footprint
from hlq.harness.ablation import ablation, ablation_grid
from hlq.harness.data import batches
from hlq.harness.gradcheck import grad_check
from hlq.harness.layers import StepContext
from hlq.harness.model import Model, forward, layer_dims
from hlq.harness.quant_error import quant_error_study
from hlq.harness.train import fit, strategy_in_effect
from hlq.models.strategy import ACBPActivation
from hlq.models.tensor import LayerDims
from hlq.ops.acbp import acbp_pack
from results.store import ResultStore

logger = logging.getLogger(__name__)

COST_STRATEGIES = ("vanilla", "naive", "hq", "lbp-wht", "hlq")


class ExperimentRunner:
    """Runs one command's experiment, then processes and saves its reports."""

    def __init__(self, config):
        self.config = config
        self.store = ResultStore(config.out_dir)
        self.latest_data = {}

    def _summary(self, command, **extra):
        summary = {
            "command": command,
            "version": hlq.__version__,
            "config": self.config.effective(),
            "overrides": {key: list(v) if isinstance(v, tuple) else v for key, v in self.config.overrides.items()},
        }
        summary.update(extra)
        return summary

    def run_train(self):
        """Train the configured model on the first configured seed."""
        config = self.config
        seed = config.seeds[0]
        dataset = config.dataset()
        train_config = config.train_config(seed)
        train_set, val_set = dataset.split(train_config.val_fraction, seed)
        model = Model(config.model_spec(seed))
        history = fit(model, train_config, train_set, val_set)
        self.latest_data = {
            "history": history,
            "train_config": train_config,
            "model": model,
            "train_set": train_set,
        }
        return self.process_and_save_train()

    def process_and_save_train(self):
        history = self.latest_data["history"]
        train_config = self.latest_data["train_config"]
        written = [self.store.write_jsonl("metrics.jsonl", history.to_records(train_config.record_timing))]
        final = history.final
        written.append(self.store.write_json("summary.json", self._summary(
            "train",
            seed=train_config.seed,
            strategy=train_config.strategy.describe(),
            warmup_epochs=train_config.warmup_epochs,
            final={"train_loss": final.train_loss, "train_accuracy": final.train_accuracy,
                   "val_accuracy": final.val_accuracy},
        )))
        if self.config.get("experiment", "dump_acbp"):
            written.extend(self._dump_acbp())
        return written

    def _dump_acbp(self):
        """Pack the compressed activations one more forward pass keeps, one container per layer."""
        model = self.latest_data["model"]
        train_config = self.latest_data["train_config"]
        last_epoch = train_config.epochs - 1
        strategies = {
            name: strategy_in_effect(s, last_epoch, train_config.warmup_epochs, train_config.warmup_bits)
            for name, s in model.strategy_map(train_config.strategy).items()
        }
        batch = next(batches(self.latest_data["train_set"], train_config.batch_size, train_config.seed, last_epoch))
        fp = forward(model, batch, StepContext(strategies=strategies))
        written = []
        for layer, cache in zip(model.layers, fp.caches):
            gemm_cache = cache[0] if isinstance(cache, tuple) else cache
            stored = getattr(gemm_cache, "stored", None)
            if isinstance(stored, ACBPActivation):
                written.append(self.store.write_bytes(f"acbp/{layer.name}.acbp", acbp_pack(stored)))
        if not written:
            logger.warning("no layer keeps compressed activations under %s", train_config.strategy.name)
        return written

    def run_ablation(self):
        config = self.config
        train_config = config.train_config()
        self.latest_data = {
            "report": ablation(
                config.model_spec(), train_config, config.dataset(), config.seeds,
                cells=ablation_grid(config.get("ablation", "bits"), config.get("strategy", "rank")),
                workers=config.get("experiment", "workers"),
                rounding=config.get("ablation", "rounding"),
            ),
        }
        return self.process_and_save_ablation()

    def process_and_save_ablation(self):
        report = self.latest_data["report"]
        payload = report.to_dict()
        return [
            self.store.write_csv("ablation.csv", [
                {k: v for k, v in row.items() if k != "accuracies"} for row in payload["rows"]
            ], ["g_x", "g_w", "mean", "spread"]),
            self.store.write_json("ablation.json", self._summary("ablation", **payload)),
        ]

    def run_gradcheck(self):
        config = self.config
        seed = config.seeds[0]
        model_name = config.get("gradcheck", "model") or None
        strategies = {name: config.strategy(name) for name in config.get("gradcheck", "strategies")}
        seeds = config.seeds if len(config.seeds) > 1 else tuple(range(seed, seed + 20))
        self.latest_data = {
            "report": grad_check(
                config.model_spec(seed, model_name), strategies, seeds,
                batch_size=config.get("gradcheck", "batch_size"),
                max_coords=config.get("gradcheck", "max_coords"),
            ),
        }
        return self.process_and_save_gradcheck()

    def process_and_save_gradcheck(self):
        report = self.latest_data["report"]
        return [self.store.write_json("gradcheck.json", self._summary("gradcheck", **report.to_dict()))]

    def cost_layers(self):
        config = self.config
        batch = config.get("cost", "batch")
        if config.get("cost", "catalog"):
            layers = [(entry.name, entry.dims) for entry in load_catalog(config.get("cost", "catalog"))]
        else:
            layers = layer_dims(config.model_spec(), batch or config.get("train", "batch_size"))
        if batch is not None:
            layers = [(name, LayerDims(batch, d.L, d.I, d.O)) for name, d in layers]
        return layers

    def run_cost(self):
        config = self.config
        layers = self.cost_layers()
        reports = []
        for name in COST_STRATEGIES:
            reports.append(memory_footprint(layers, config.strategy(name)))
        reports.append(memory_footprint(layers, replace(config.strategy("hlq"), acbp=False), label="hlq-no-acbp"))
        for report in reports:
            for layer in report.layers:
                layer.overhead_op_bits = config.get("cost", "overhead_op_bits")
        self.latest_data = {"reports": reports, "layers": layers}
        return self.process_and_save_cost()

    def process_and_save_cost(self):
        reports = self.latest_data["reports"]
        rows = []
        for report in reports:
            rows.extend(layer.to_row() for layer in report.layers)
        n, r = self.config.get("strategy", "block_size"), self.config.get("strategy", "rank")
        dense = {name: lbp_wht_dense_flops(dims, n, r) for name, dims in self.latest_data["layers"]}
        return [
            self.store.write_csv("cost.csv", rows),
            self.store.write_json("cost.json", self._summary(
                "cost",
                reports=[report.to_dict() for report in reports],
                lbp_wht_dense_flops=dense,
            )),
        ]

    def run_quant_error(self):
        q = {key: self.config.get("quant_error", key) for key in ("trials", "bits", "sigma", "rows", "cols", "rounding")}
        self.latest_data = {
            "report": quant_error_study(
                trials=q["trials"], shape=(q["rows"], q["cols"]), bits=q["bits"], seed=self.config.seeds[0],
                sigma=q["sigma"], block_size=self.config.get("strategy", "block_size"), rounding=q["rounding"],
            ),
        }
        return self.process_and_save_quant_error()

    def process_and_save_quant_error(self):
        report = self.latest_data["report"]
        return [
            self.store.write_json("quant_error.json", self._summary("quant-error", **report.to_dict())),
            self.store.write_csv("quant_error_trials.csv", [
                {"trial": i, "raw_mse_plain": a, "raw_mse_ht": b, "product_mse_plain": c, "product_mse_ht": d}
                for i, (a, b, c, d) in enumerate(zip(
                    report.raw_mse_plain, report.raw_mse_ht, report.product_mse_plain, report.product_mse_ht,
                ))
            ]),
        ]

