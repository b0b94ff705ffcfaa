"""``filtermend`` command line: gen-data, train, analyze, adapt, eval, experiment.

Exit codes: 0 success, 2 usage, 3 I/O, 4 method failure.
"""
import csv
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from functools import wraps

import click
import numpy as np

from . import data, divergence, experiment
from . import net as toynet
from .adapt import AdaptConfig, fit_reconstruction, load_model, save_model
from .errors import FilterMendError, FormatError, NoReconstructionBasisError
from .sparse_select import write_path_csv
from .tensor import to_sample_matrix

EXIT_USAGE, EXIT_IO, EXIT_METHOD = 2, 3, 4

log = logging.getLogger("filtermend")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    bins: int = 64
    alpha: float = 1.0
    weight_floor: float = 1e-3
    grid_size: int = 50
    grid_ratio: float = 1e-3
    target_frac: float = 0.1
    layer: int = 1
    stage: str = "pre"

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep or key not in types:
                raise click.UsageError(f"config line {n}: cannot parse {raw!r}")
            try:
                values[key] = types[key](val.strip())
            except ValueError:
                raise click.UsageError(f"config line {n}: bad value for {key}: {val.strip()!r}") from None
        return cls(**values)

    def adapt_config(self):
        return AdaptConfig(bins=self.bins, alpha=self.alpha, weight_floor=self.weight_floor,
                           grid_size=self.grid_size, grid_ratio=self.grid_ratio, seed=self.seed,
                           layer=self.layer, stage=self.stage)


class IOFailure(click.ClickException):
    exit_code = EXIT_IO


class MethodFailure(click.ClickException):
    exit_code = EXIT_METHOD


def _guard(fn):
    """Translate library errors into the CLI exit-code contract."""

    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except (OSError, FormatError) as exc:
            raise IOFailure(str(exc)) from exc
        except (NoReconstructionBasisError, FilterMendError) as exc:
            raise MethodFailure(str(exc)) from exc

    return wrapper


def run_options(fn):
    opts = [
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--bins", type=click.IntRange(min=2), default=64, show_default=True),
        click.option("--alpha", type=click.FloatRange(min=0.0, min_open=True), default=1.0, show_default=True,
                     help="Additive histogram smoothing."),
        click.option("--weight-floor", type=click.FloatRange(min=0.0, min_open=True), default=1e-3,
                     show_default=True),
        click.option("--grid-size", type=click.IntRange(min=2), default=50, show_default=True),
        click.option("--grid-ratio", type=click.FloatRange(0.0, 1.0, min_open=True, max_open=True), default=1e-3,
                     show_default=True),
        click.option("--target-frac", type=click.FloatRange(0.0, 1.0, min_open=True), default=0.1,
                     show_default=True, help="Fraction of the target set made available."),
        click.option("--layer", type=click.IntRange(1, 2), default=1, show_default=True),
        click.option("--pre-activation/--post-activation", "pre_activation", default=True, show_default=True),
        click.option("--config", "config_path", type=click.Path(dir_okay=False),
                     help="key=value file; explicit flags win."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def resolve_config(ctx, params):
    """Merge the config file under flags given explicitly on the command line."""
    base = RunConfig()
    path = params.pop("config_path", None)
    if path:
        try:
            with open(path) as fh:
                base = RunConfig.from_text(fh.read())
        except OSError as exc:
            raise IOFailure(f"cannot read config {path}: {exc}") from exc
    params["stage"] = "pre" if params.pop("pre_activation") else "post"
    explicit = {}
    for name in ("seed", "bins", "alpha", "weight_floor", "grid_size", "grid_ratio", "target_frac", "layer", "stage"):
        flag = "pre_activation" if name == "stage" else name
        value = params.pop(name)
        if not path or ctx.get_parameter_source(flag) == click.core.ParameterSource.COMMANDLINE:
            explicit[name] = value
    return replace(base, **explicit)


def _load_split(data_dir, split):
    return data.load_bundle(os.path.join(data_dir, split))


def _ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {path}: {exc}") from exc


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose):
    """Detect shift-affected convolution filters and reconstruct them from unaffected ones."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-data")
@click.option("--kind", type=click.Choice(["shapes"]), default="shapes", show_default=True)
@click.option("--shift", type=click.Choice(["gray", "dark", "tint", "none"]), default="gray", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--per-class", type=click.IntRange(min=1), default=experiment.SOURCE_PER_CLASS, show_default=True)
@click.option("--target-per-class", type=click.IntRange(min=1), default=experiment.TARGET_PER_CLASS,
              show_default=True)
@click.option("--image-size", type=click.IntRange(min=16), default=28, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@_guard
def gen_data(kind, shift, seed, per_class, target_per_class, image_size, out_dir):
    """Write source and shifted target bundles (FTEN tensors plus JSON labels)."""
    _ensure_dir(out_dir)
    source = data.gen_shapes(per_class, image_size=image_size, seed=seed)
    target = data.gen_shapes(target_per_class, image_size=image_size, seed=seed + 2000)
    if shift != "none":
        target = data.apply_shift(target, shift, seed=seed)
    for name, bundle in (("source", source), ("target", target)):
        data.save_bundle(bundle, os.path.join(out_dir, name))
        px = bundle.images.data
        click.echo(f"{name}: {len(bundle)} images {px.shape[1:]} mean={px.mean():.4f} shift={bundle.metadata['shift']}")


@main.command()
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--epochs", type=click.IntRange(min=1), default=experiment.TRAIN_EPOCHS, show_default=True)
@click.option("--lr", type=click.FloatRange(min=0.0, min_open=True), default=experiment.TRAIN_LR, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@_guard
def train(data_dir, epochs, lr, seed, out_path):
    """Train a ToyNet on the source split."""
    source = _load_split(data_dir, "source")
    net = toynet.train(source, epochs=epochs, learning_rate=lr, seed=seed)
    toynet.save_net(net, out_path)
    click.echo(f"trained {epochs} epochs, final loss {net.loss_history[-1]:.5f}, "
               f"source accuracy {toynet.evaluate(net, source):.4f}")


def _responses(net, data_dir, cfg):
    source = _load_split(data_dir, "source")
    target = _load_split(data_dir, "target")
    available = data.take_fraction(target, cfg.target_frac, seed=cfg.seed)
    rs = toynet.capture_stage(net, source, cfg.layer, cfg.stage)
    rt = toynet.capture_stage(net, available, cfg.layer, cfg.stage)
    return rs, rt


@main.command()
@click.option("--net", "net_path", type=click.Path(dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@run_options
@click.pass_context
@_guard
def analyze(ctx, net_path, data_dir, out_dir, **params):
    """Per-filter KL and proxy A-distance, plus 2-D PCA projections."""
    cfg = resolve_config(ctx, params)
    net = toynet.load_net(net_path)
    rs, rt = _responses(net, data_dir, cfg)
    report = divergence.filter_kl_scores(to_sample_matrix(rs), to_sample_matrix(rt), cfg.bins, cfg.alpha)
    enough = min(rs.n_images, rt.n_images) >= divergence.MIN_A_DISTANCE_SAMPLES
    if enough:
        report.a_distance = divergence.filter_a_distances(rs, rt, seed=cfg.seed)
    else:
        log.warning("fewer than %d images in a domain; a_distance left as nan", divergence.MIN_A_DISTANCE_SAMPLES)
    _ensure_dir(out_dir)
    divergence.write_report_csv(report, os.path.join(out_dir, "divergence.csv"))
    with open(os.path.join(out_dir, "projection.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filter", "domain", "image", "pc1", "pc2"])
        for j in range(report.n_filters):
            ps, pt = divergence.pca_projection(divergence.per_image_features(rs, j),
                                               divergence.per_image_features(rt, j))
            for domain, proj in (("source", ps), ("target", pt)):
                for i, (a, b) in enumerate(proj):
                    writer.writerow([j, domain, i, f"{a:.6f}", f"{b:.6f}"])
    med = float(np.median(report.kl))
    click.echo(f"kl median {med:.6f} max {report.kl.max():.6f} (filter {int(np.argmax(report.kl))})")


@main.command()
@click.option("--net", "net_path", type=click.Path(dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="Model file (FREC).")
@click.option("--paths-dir", type=click.Path(file_okay=False), help="Write per-filter path diagnostics here.")
@run_options
@click.pass_context
@_guard
def adapt(ctx, net_path, data_dir, out_path, paths_dir, **params):
    """Fit a reconstruction model (bad filters, selected predictors, OLS coefficients)."""
    cfg = resolve_config(ctx, params)
    net = toynet.load_net(net_path)
    rs, rt = _responses(net, data_dir, cfg)
    model = fit_reconstruction(rs, rt, cfg.adapt_config())
    save_model(model, out_path)
    if paths_dir:
        _ensure_dir(paths_dir)
        for l, path in sorted(model.diagnostics["paths"].items()):
            if path.score is not None:
                write_path_csv(path, os.path.join(paths_dir, f"path_filter{l:02d}.csv"))
    click.echo(f"bad filters: {len(model.bad_filters)} of {model.n_filters} {list(model.bad_filters)}")
    for l in model.bad_filters:
        click.echo(f"  filter {l}: lambda={model.lambdas[l]:.6g} predictors={list(model.selected[l])}")
    for w in model.warnings:
        click.echo(f"warning: {w}", err=True)


@main.command("eval")
@click.option("--net", "net_path", type=click.Path(dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--split", type=click.Choice(["source", "target"]), default="target", show_default=True)
@click.option("--model", "model_path", type=click.Path(dir_okay=False))
@_guard
def eval_cmd(net_path, data_dir, split, model_path):
    """Print ``accuracy,n,adapted`` for one split."""
    net = toynet.load_net(net_path)
    bundle = _load_split(data_dir, split)
    model = load_model(model_path) if model_path else None
    acc = toynet.evaluate(net, bundle, model)
    click.echo(f"{acc:.6f},{len(bundle)},{int(model is not None)}")


EXPERIMENT_COLUMNS = {
    "headline": ["seed", "layer", "n_target", "n_bad", "acc_src_base", "acc_src_adapted", "acc_tgt_base",
                 "acc_tgt_adapted"],
    "few-samples": ["n_target", "seed", "acc_base", "acc_adapted"],
    "layers": ["seed", "layer", "n_target", "n_bad", "acc_tgt_base", "acc_tgt_adapted"],
}


@main.command("experiment")
@click.argument("which", type=click.Choice(sorted(EXPERIMENT_COLUMNS)))
@click.option("--seeds", type=click.IntRange(min=1), default=None, help="Number of seeds (default 5, few-samples 3).")
@click.option("--shift", type=click.Choice(["gray", "dark", "tint"]), default="gray", show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@run_options
@click.pass_context
@_guard
def experiment_cmd(ctx, which, seeds, shift, out_path, **params):
    """Seeded sweeps: headline shift run, few-samples, or layer comparison."""
    cfg = resolve_config(ctx, params)
    acfg = cfg.adapt_config()
    if which == "few-samples":
        rows = experiment.few_samples(range(seeds or 3), shift=shift, config=acfg)
        for n in experiment.FEW_SAMPLE_COUNTS:
            sub = [r for r in rows if r["n_target"] == n]
            click.echo(f"n_target={n}: base {np.mean([r['acc_base'] for r in sub]):.4f} "
                       f"adapted {np.mean([r['acc_adapted'] for r in sub]):.4f}")
    elif which == "layers":
        rows = experiment.layers(range(seeds or 5), shift, cfg.target_frac, acfg)
        for layer in (1, 2):
            sub = [r for r in rows if r["layer"] == layer]
            click.echo(f"layer {layer}: mean improvement {experiment.mean_improvement(sub):+.3f} points")
    else:
        rows = experiment.headline(range(seeds or 5), shift, cfg.target_frac, acfg)
        click.echo(f"mean target improvement {experiment.mean_improvement(rows):+.3f} points")
    experiment.write_rows(rows, out_path, EXPERIMENT_COLUMNS[which])


@main.command("show-config")
@run_options
@click.pass_context
def show_config(ctx, **params):
    """Print the merged run configuration as key=value lines."""
    click.echo(resolve_config(ctx, params).to_text(), nl=False)


if __name__ == "__main__":
    sys.exit(main())
