import logging
from pathlib import Path

import click

from config.experiment import ExperimentConfig
from experiment_runner import ExperimentRunner
from hlq.errors.handlers import HLQError, handle_hlq_error
from hlq.models.tensor import crop_axis
from hlq.ops.acbp import acbp_unpack, read_header, verify_container
from hlq.ops.hadamard import block_ht, unproject_lowrank
from hlq.ops.quantize import dequant
from results.store import ResultStore

logger = logging.getLogger(__name__)

# global flag -> (section, key)
OVERRIDES = {
    "out": ("experiment", "out_dir"),
    "strategy": ("strategy", "name"),
    "bits_gx": ("strategy", "bits_gx"),
    "bits_gw": ("strategy", "bits_gw"),
    "rank": ("strategy", "rank"),
    "block": ("strategy", "block_size"),
}


def load_config(ctx):
    """Config file (or defaults) with the global flags applied on top."""
    options = ctx.obj
    if options["config_path"]:
        config = ExperimentConfig.from_file(options["config_path"])
    else:
        config = ExperimentConfig()
    if options["seed"] is not None:
        config.override("experiment", "seeds", (options["seed"],))
    for flag, (section, key) in OVERRIDES.items():
        config.override(section, key, options[flag])
    config.validate()
    return config


def fail(ctx, error):
    message, code = handle_hlq_error(error)
    click.echo(f"❌ {message}", err=True)
    ctx.exit(code)


def report_written(paths):
    for path in paths:
        click.echo(f"✅ wrote {path}")


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="INI experiment file.")
@click.option("--seed", type=int, help="Single seed; replaces [experiment] seeds.")
@click.option("--out", type=click.Path(file_okay=False), help="Output directory for reports.")
@click.option("--strategy", help="vanilla, naive, hq, lbp-wht or hlq.")
@click.option("--bits-gx", type=int)
@click.option("--bits-gw", type=int)
@click.option("--rank", type=int)
@click.option("--block", type=int, help="Hadamard block size n.")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
@click.pass_context
def cli(ctx, config_path, seed, out, strategy, bits_gx, bits_gw, rank, block, verbose):
    """Hadamard low-rank quantized backpropagation experiments."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    ctx.obj = {
        "config_path": config_path, "seed": seed, "out": out, "strategy": strategy,
        "bits_gx": bits_gx, "bits_gw": bits_gw, "rank": rank, "block": block,
    }


@cli.command()
@click.pass_context
def train(ctx):
    """Train the configured model and write metrics.jsonl and summary.json."""
    try:
        runner = ExperimentRunner(load_config(ctx))
        written = runner.run_train()
    except HLQError as e:
        return fail(ctx, e)
    final = runner.latest_data["history"].final
    report_written(written)
    click.echo(f"✅ final val accuracy {final.val_accuracy:.4f} (train loss {final.train_loss:.4f})")


@cli.command()
@click.pass_context
def ablation(ctx):
    """Train every g_x / g_w treatment pair over the configured seeds."""
    try:
        runner = ExperimentRunner(load_config(ctx))
        written = runner.run_ablation()
    except HLQError as e:
        return fail(ctx, e)
    report_written(written)
    report = runner.latest_data["report"]
    for claim, value in report.orderings(runner.config.get("ablation", "bits")).items():
        click.echo(f"   {claim}: {value}")


@cli.command()
@click.pass_context
def gradcheck(ctx):
    """Finite-difference check of exact gradients, cosine and bias of the approximate ones."""
    try:
        runner = ExperimentRunner(load_config(ctx))
        written = runner.run_gradcheck()
    except HLQError as e:
        return fail(ctx, e)
    report_written(written)
    report = runner.latest_data["report"]
    click.echo(f"✅ vanilla vs finite differences: max relative error {report.max_rel_error:.3g}")
    for label, cosine in report.cosine.items():
        click.echo(f"   {label}: cosine {cosine['mean']:.4f} (min {cosine['min']:.4f})")


@cli.command()
@click.pass_context
def cost(ctx):
    """FLOPs, BoPS and memory per layer for every strategy."""
    try:
        runner = ExperimentRunner(load_config(ctx))
        written = runner.run_cost()
    except HLQError as e:
        return fail(ctx, e)
    report_written(written)
    for report in runner.latest_data["reports"]:
        click.echo(f"   {report.strategy}: +{report.flops_overhead} FLOPs overhead, {report.backward_bops} backward BoPS, "
                   f"{report.total_bytes} bytes ({report.memory_reduction_pct:.1f}% saved)")


@cli.command("quant-error")
@click.pass_context
def quant_error(ctx):
    """Quantization error on heavy-tailed gradients with and without the Hadamard transform."""
    try:
        runner = ExperimentRunner(load_config(ctx))
        written = runner.run_quant_error()
    except HLQError as e:
        return fail(ctx, e)
    report_written(written)
    summary = runner.latest_data["report"].summary()
    click.echo(f"✅ HT wins {summary['raw_win_fraction']:.0%} raw, "
               f"{summary['product_win_fraction']:.0%} product trials")


@cli.group()
def acbp():
    """Inspect, verify or dump ACBP containers."""


def _read(path):
    return Path(path).read_bytes()


@acbp.command()
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def inspect(ctx, path):
    """Print the container header."""
    try:
        header = read_header(_read(path))
    except HLQError as e:
        return fail(ctx, e)
    click.echo(f"version={header.version}")
    click.echo(f"bits={header.bits}")
    click.echo(f"n={header.block_size}")
    click.echo(f"rank={header.rank}")
    click.echo(f"bases={list(header.basis_indices)}")
    click.echo(f"dims={list(header.dims)}")
    click.echo(f"scales={len(header.scales)}")
    click.echo(f"payload_bytes={header.payload_bytes}")


@acbp.command()
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def verify(ctx, path):
    """Check header, payload bounds and CRC."""
    try:
        header = verify_container(_read(path))
    except HLQError as e:
        return fail(ctx, e)
    click.echo(f"✅ {path}: {header.bits}-bit, dims {list(header.dims)}, CRC ok")


@acbp.command()
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.option("--axis", default=1, show_default=True, help="Axis the low-rank projection ran on.")
@click.option("--reconstruct", is_flag=True, help="Undo the projection instead of dumping coefficients.")
@click.pass_context
def dump(ctx, path, axis, reconstruct):
    """Write the dequantized tensor as .npy into the output directory."""
    try:
        activation = acbp_unpack(_read(path), target_axis=axis)
        values = dequant(activation.quantized)
        if reconstruct:
            extent = activation.original_shape[axis]
            if activation.plan.full_rank:
                values = crop_axis(block_ht(values, activation.plan), axis, extent)
            else:
                values = unproject_lowrank(values, activation.plan, extent)
        out_dir = ctx.obj["out"] or load_config(ctx).out_dir
        written = ResultStore(out_dir).write_array(f"{Path(path).stem}.npy", values.data)
    except HLQError as e:
        return fail(ctx, e)
    report_written([written])


if __name__ == "__main__":
    cli()
