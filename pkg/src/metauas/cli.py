"""Command-line interface.

One executable with subcommands:

    metauas synth       synthesize a change-pair dataset from a corpus
    metauas train       train the change segmentation network
    metauas eval        evaluate a checkpoint on a dataset tree
    metauas predict     one query + one prompt -> anomaly map PNG
    metauas bench       parameter counts and forward latency
    metauas toy-corpus  generate a demo corpus (no external data needed)

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.
All commands accept --config (YAML) and repeated --set section.key=value
overrides; flags win over the file, which wins over defaults.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import __version__
from .config import RunConfig, load_config, save_config
from .errors import ConfigError, DataError


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(2, str(exc))
        except DataError as exc:
            _fail(3, str(exc))
        except click.ClickException:
            raise
        except Exception as exc:          # noqa: BLE001 - CLI boundary
            _fail(4, f"{type(exc).__name__}: {exc}")
    return wrapper


def config_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="YAML config file.")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Override a config value, e.g. --set train.lr=3e-4.")(fn)
    return fn


def _load(config_path, overrides, extra: list[str] = ()) -> RunConfig:
    return load_config(config_path, list(overrides) + list(extra))


@click.group()
@click.version_option(__version__, prog_name="metauas")
def main():
    """One-prompt anomaly segmentation toolkit."""


@main.command()
@click.option("--corpus", required=True, type=click.Path(), help="Instance-annotated corpus root.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Dataset output directory.")
@click.option("--workers", default=1, show_default=True, help="Parallel worker processes.")
@click.option("--seed", type=int, default=None, help="Override synth.seed.")
@config_options
@handle_errors
def synth(corpus, out_dir, workers, seed, config_path, overrides):
    """Synthesize prompt/query/mask pair triplets plus a manifest."""
    extra = [f"synth.seed={seed}"] if seed is not None else []
    cfg = _load(config_path, overrides, extra)
    from .synth import build_dataset
    manifest = build_dataset(corpus, out_dir, cfg.synth, workers=workers)
    counts = {s: sum(c.values()) for s, c in manifest["counts"].items()}
    click.echo(f"wrote {counts.get('train', 0)} train / {counts.get('val', 0)} val pairs "
               f"to {out_dir}")


@main.command()
@click.option("--data", "dataset_dir", required=True, type=click.Path(),
              help="Synthesized dataset directory (with manifest.json).")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Run directory.")
@click.option("--seed", type=int, default=None, help="Override train.seed.")
@config_options
@handle_errors
def train(dataset_dir, out_dir, seed, config_path, overrides):
    """Train the change segmentation network on synthesized pairs."""
    extra = [f"train.seed={seed}"] if seed is not None else []
    cfg = _load(config_path, overrides, extra)
    from .trainer import fit
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    result = fit(dataset_dir, cfg.model, cfg.train, out)
    last = result.history[-1] if result.history else {}
    click.echo(f"final checkpoint: {result.checkpoint}")
    if "val_pixel_auroc" in last:
        click.echo(f"val pixel-AUROC: {last['val_pixel_auroc']:.4f}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(), help="Trained checkpoint.")
@click.option("--data", "dataset_root", required=True, type=click.Path(),
              help="Dataset tree: <root>/<class>/{train,test,ground_truth}.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Report directory.")
@click.option("--policy", type=click.Choice(["fixed-random", "pool-match", "best-match"]),
              default=None, help="Override eval.policy.")
@click.option("--seeds", default=None, help="Comma-separated seeds, e.g. 0,1,2.")
@click.option("--save-maps", is_flag=True, help="Also write per-image 16-bit map PNGs.")
@config_options
@handle_errors
def eval_cmd(checkpoint, dataset_root, out_dir, policy, seeds, save_maps, config_path, overrides):
    """Evaluate a checkpoint; writes report.json and report.txt."""
    extra = []
    if policy is not None:
        extra.append(f"eval.policy={policy}")
    if seeds is not None:
        extra.append(f"eval.seeds=[{seeds}]")
    if save_maps:
        extra.append("eval.save_maps=true")
    cfg = _load(config_path, overrides, extra)
    from .runner import run_eval
    from .segnet import load_checkpoint
    model, _ = load_checkpoint(checkpoint)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    payload = run_eval(model, dataset_root, cfg.eval, out, checkpoint_name=str(checkpoint))
    click.echo((out / "report.txt").read_text())
    mean_stats = payload["aggregate"]["mean"]
    click.echo(f"mean pixel-AUROC: {mean_stats['pixel_auroc']['mean']:.4f}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(), help="Trained checkpoint.")
@click.option("--query", "query_path", required=True, type=click.Path(), help="Query image.")
@click.option("--prompt", "prompt_path", required=True, type=click.Path(),
              help="Normal prompt image.")
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Output map PNG (a .json sidecar is written next to it).")
@handle_errors
def predict(checkpoint, query_path, prompt_path, out_path):
    """Segment anomalies in one query given one normal prompt."""
    from .inference import predict as predict_one
    from .inference import save_map
    from .segnet import load_checkpoint
    from .synth.corpus import load_image
    model, _ = load_checkpoint(checkpoint)
    amap = predict_one(model, load_image(query_path), load_image(prompt_path),
                       query_id=str(query_path), prompt_id=str(prompt_path))
    save_map(amap, out_path)
    click.echo(f"image score: {amap.image_score:.6f}")
    click.echo(f"map: {out_path}")


@main.command()
@click.option("--checkpoint", type=click.Path(), default=None,
              help="Bench a trained checkpoint (otherwise built from config).")
@click.option("--iters", default=100, show_default=True, help="Timed runs per batch size.")
@click.option("--batch-sizes", default="1,32", show_default=True)
@config_options
@handle_errors
def bench(checkpoint, iters, batch_sizes, config_path, overrides):
    """Report parameter counts and median forward latency."""
    from .runner import run_bench
    if checkpoint is not None:
        from .segnet import load_checkpoint
        model, _ = load_checkpoint(checkpoint)
    else:
        cfg = _load(config_path, overrides)
        from .segnet import ChangeSegmenter
        model = ChangeSegmenter(cfg.model)
    sizes = tuple(int(b) for b in batch_sizes.split(","))
    out = run_bench(model, batch_sizes=sizes, iters=iters)
    click.echo(json.dumps(out, indent=2, sort_keys=True))


@main.command("toy-corpus")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--images", default=60, show_default=True)
@click.option("--size", default=96, show_default=True)
@click.option("--seed", default=0, show_default=True)
@handle_errors
def toy_corpus(out_dir, images, size, seed):
    """Generate a small procedural corpus for demos and smoke tests."""
    from .synth import generate_toy_corpus
    generate_toy_corpus(out_dir, n_images=images, size=size, seed=seed)
    click.echo(f"wrote {images} corpus records to {out_dir}")


if __name__ == "__main__":
    main()
