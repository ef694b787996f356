"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure
(missing inputs, divergence, unreadable files), 3 gradient check failure.
"""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from ._schema import ConfigError, canonical_json
from .config import RunConfig, load_config, with_seed
from .data import (DatasetFormatError, bicubic_resize, generate_synthetic_dataset, load_dataset, load_pairs,
                   make_lr_pair, normalize, read_ppm, save_dataset, save_pairs, to_pixels, write_ppm)
from .evaluation import SettingsError, _ROUTES, evaluate_setting, psnr, report_csv, required_modes
from .gradcheck import TOLERANCE, run_suite, summarize
from .networks import CheckpointError, JointNetwork, load_checkpoint, save_checkpoint
from .optimizer import MODES, TrainingDiverged, lr_at, metrics_csv, train

log = logging.getLogger("jointfh")

EXIT_VALIDATION, EXIT_RUNTIME, EXIT_GRADCHECK = 1, 2, 3


class RuntimeFailure(click.ClickException):
    exit_code = EXIT_RUNTIME


class ValidationFailure(click.ClickException):
    exit_code = EXIT_VALIDATION


class Run:
    """Resolved configuration plus output layout for one command."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.hash = cfg.hash

    def dir(self, name: str) -> Path:
        p = Path(getattr(self.cfg.paths, name))
        return p if p.is_absolute() else self.out / p

    def checkpoint(self, mode: str) -> Path:
        return self.dir("checkpoint_dir") / f"{mode}.ckpt"


def _resolve(ctx: click.Context, seed: int | None, which: str) -> Run:
    try:
        cfg = with_seed(load_config(ctx.obj["config"]), seed, which)
    except (ConfigError, OSError) as exc:
        raise ValidationFailure(str(exc)) from exc
    return Run(cfg, Path(ctx.obj["out"]))


def _write(path: Path, data: bytes | str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, str):
            data = data.encode()
        path.write_bytes(data)
    except OSError as exc:
        raise RuntimeFailure(f"cannot write {path}: {exc}") from exc


def _load_data(run: Run, split: str):
    d = run.dir("data_dir")
    try:
        ds = load_dataset(d / f"{split}.jfds")
        pairs = load_pairs(d / "pairs.csv") if split == "test" else None
    except FileNotFoundError as exc:
        raise RuntimeFailure(f"dataset file missing: {exc.filename} (run gen-data first)") from exc
    except DatasetFormatError as exc:
        raise RuntimeFailure(str(exc)) from exc
    return ds, pairs


def _load_ckpt(path: Path, what: str) -> JointNetwork:
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise RuntimeFailure(f"{what}: {exc}") from exc


seed_option = click.option("--seed", type=click.IntRange(min=0), default=None,
                           help="Override the seed from the config.")


@click.group()
@click.option("--config", "config", type=click.Path(dir_okay=False), default=None,
              help="JSON run configuration (strict keys).")
@click.option("--out", "out", type=click.Path(file_okay=False), default="runs", show_default=True,
              help="Directory that relative output paths are resolved against.")
@click.option("-v", "--verbose", is_flag=True, help="Log training progress.")
@click.pass_context
def cli(ctx, config, out, verbose):
    """Joint face hallucination and recognition on synthetic identities."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"config": config, "out": out}


@cli.command("gen-data")
@seed_option
@click.pass_context
def gen_data(ctx, seed):
    """Generate the synthetic dataset and verification pairs."""
    run = _resolve(ctx, seed, "data")
    data = generate_synthetic_dataset(run.cfg.data, run.cfg.data_seed)
    d = run.dir("data_dir")
    try:
        d.mkdir(parents=True, exist_ok=True)
        save_dataset(data.train, d / "train.jfds")
        save_dataset(data.test, d / "test.jfds")
        save_pairs(data.pairs, d / "pairs.csv")
    except OSError as exc:
        raise RuntimeFailure(f"cannot write dataset to {d}: {exc}") from exc
    manifest = {"config_hash": run.hash, "data_seed": run.cfg.data_seed, "n_train": len(data.train),
                "n_test": len(data.test), "n_pairs": len(data.pairs)}
    _write(d / "dataset.json", canonical_json(manifest) + "\n")
    click.echo(f"wrote {len(data.train)} train / {len(data.test)} test images and "
               f"{len(data.pairs)} pairs to {d} [config {run.hash}]")


def _train_mode(run: Run, mode: str, srnet_path: Path | None = None) -> JointNetwork:
    train_ds, _ = _load_data(run, "train")
    if len(train_ds) == 0:
        raise RuntimeFailure("training split is empty")
    tcfg = run.cfg.train_config(mode)
    net = JointNetwork.build(run.cfg.net, tcfg.seed)
    if mode == "frnet-hallucinated":
        src = _load_ckpt(srnet_path or run.checkpoint("srnet-only"), "frnet-hallucinated needs a trained SRNET")
        if src.cfg != net.cfg:
            raise RuntimeFailure("the SRNET checkpoint was built with a different network config")
        trained = dict(src.srnet.named_parameters())
        for name, arr in net.srnet.named_parameters():
            arr[...] = trained[name]
    rows: list[list] = []

    def progress(step, losses):
        rows.append([step, losses["loss_total"], losses["loss_h"], losses["loss_c"], losses["loss_d"],
                     *lr_at(tcfg, step)])
        if step % 50 == 0:
            log.info("%s step %d loss %.4f", mode, step, losses["loss_total"])

    metrics = run.dir("metrics_dir") / f"{mode}.csv"
    try:
        net, _ = train(net, train_ds, tcfg, progress=progress)
    except TrainingDiverged as exc:
        _write(metrics, metrics_csv(rows))
        raise RuntimeFailure(f"{mode}: training diverged ({exc}); partial log in {metrics}") from exc
    _write(metrics, metrics_csv(rows))
    _write(metrics.with_suffix(".json"), canonical_json({"config_hash": run.hash, "mode": mode,
                                                         "steps": len(rows)}) + "\n")
    ckpt = run.checkpoint(mode)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, ckpt, meta={"config_hash": run.hash, "mode": mode})
    return net


@cli.command("train")
@click.option("--mode", type=click.Choice(MODES), required=True, help="Training regime.")
@click.option("--srnet", "srnet_path", type=click.Path(dir_okay=False), default=None,
              help="SRNET checkpoint for frnet-hallucinated (default: the srnet-only checkpoint).")
@seed_option
@click.pass_context
def train_cmd(ctx, mode, srnet_path, seed):
    """Train one regime and write its checkpoint and metrics log."""
    run = _resolve(ctx, seed, "train")
    _train_mode(run, mode, Path(srnet_path) if srnet_path else None)
    click.echo(f"wrote {run.checkpoint(mode)} [config {run.hash}]")


def _evaluate(run: Run, settings, train_missing: bool = False):
    test, pairs = _load_data(run, "test")
    if len(pairs) == 0:
        raise RuntimeFailure("the pair list is empty")
    artifacts = {}
    direct = {m for s in settings for m in _ROUTES[s][:2] if m}
    for mode in required_modes(settings):
        path = run.checkpoint(mode)
        if mode not in direct and run.checkpoint("frnet-hallucinated").exists():
            continue  # srnet-only is only needed to train frnet-hallucinated
        if not path.exists() and train_missing:
            log.info("training missing artifact %s", mode)
            artifacts[mode] = _train_mode(run, mode)
            continue
        if not path.exists():
            users = [s for s in settings if mode in _ROUTES[s][:2]] or list(settings)
            raise RuntimeFailure(f"setting {users[0]} needs the '{mode}' checkpoint at {path}")
        artifacts[mode] = _load_ckpt(path, f"'{mode}' checkpoint")
    ec = run.cfg.eval
    try:
        return [evaluate_setting(s, artifacts, test, pairs, folds=ec.folds, pca_dim=ec.pca_dim,
                                 fpr_target=ec.fpr_target, seed=run.cfg.train.seed, config_hash=run.hash)
                for s in sorted(settings)]
    except (SettingsError, ValueError) as exc:
        raise RuntimeFailure(str(exc)) from exc


@cli.command("eval")
@click.option("--setting", type=click.IntRange(1, 6), required=True, help="Setting id 1-6.")
@seed_option
@click.pass_context
def eval_cmd(ctx, setting, seed):
    """Evaluate one setting from existing checkpoints."""
    run = _resolve(ctx, seed, "train")
    text = report_csv(_evaluate(run, [setting]))
    _write(run.dir("report_dir") / f"setting-{setting}.csv", text)
    click.echo(text, nl=False)


@cli.command("settings")
@click.option("--train-missing", is_flag=True, help="Train regimes whose checkpoints are absent.")
@seed_option
@click.pass_context
def settings_cmd(ctx, train_missing, seed):
    """Evaluate the configured settings matrix and write one report."""
    run = _resolve(ctx, seed, "train")
    text = report_csv(_evaluate(run, run.cfg.eval.settings, train_missing))
    _write(run.dir("report_dir") / "settings.csv", text)
    click.echo(text, nl=False)


def _corrupt(grads):
    # test hook: a wrong analytic gradient the checker must flag
    grads["srnet.0.weight"] = grads["srnet.0.weight"] * 1.5


@cli.command("gradcheck")
@click.option("--seeds", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--h", "h", type=float, default=1e-3, show_default=True, help="Finite-difference step.")
@click.option("--corrupt-gradient", is_flag=True, hidden=True)
def gradcheck_cmd(seeds, h, corrupt_gradient):
    """Finite-difference checks of every layer, loss term and the joint network."""
    worst = summarize(run_suite(seeds, h, corrupt=_corrupt if corrupt_gradient else None))
    ok = True
    for name, res in worst.items():
        passed = res.max_rel_error < TOLERANCE
        ok &= passed
        click.echo(f"{'PASS' if passed else 'FAIL'} {name:<22} max_rel_error={res.max_rel_error:.3e} "
                   f"checked={res.n_checked} step_reduced={res.n_step_reduced} "
                   f"skipped_at_kink={res.n_skipped_at_kink}")
    if not ok:
        sys.exit(EXIT_GRADCHECK)


@cli.command("hallucinate")
@click.option("--checkpoint", "ckpt", type=click.Path(dir_okay=False), required=True)
@click.option("--input", "image", type=click.Path(dir_okay=False), required=True, help="P6 PPM image.")
@click.option("--output", "output", type=click.Path(dir_okay=False), default=None,
              help="Output PPM (default: <out>/images/<input>-sr.ppm).")
@click.option("--low-res", is_flag=True, help="Input is already low resolution; no ground truth panel.")
@click.pass_context
def hallucinate_cmd(ctx, ckpt, image, output, low_res):
    """Write LR-upscaled | hallucinated | ground-truth panels side by side."""
    run = _resolve(ctx, None, "train")
    net = _load_ckpt(Path(ckpt), "hallucinate")
    try:
        img = read_ppm(image)
    except (OSError, ValueError) as exc:
        raise RuntimeFailure(f"bad image {image}: {exc}") from exc
    if low_res:
        h, w = img.shape[1:]
        lr_up = normalize(np.clip(bicubic_resize(img, size=(4 * h, 4 * w)), 0, 255))
        gt = None
    else:
        try:
            lr_up, gt = make_lr_pair(img)
        except ValueError as exc:
            raise RuntimeFailure(f"bad image {image}: {exc}") from exc
    sr = net.hallucinate(lr_up[None])[0]
    panels = [to_pixels(lr_up), to_pixels(sr)] + ([to_pixels(gt)] if gt is not None else [])
    out = Path(output) if output else run.dir("image_dir") / f"{Path(image).stem}-sr.ppm"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out, np.concatenate(panels, axis=2), comment=f"config {run.hash}")
    msg = f"wrote {out}"
    if gt is not None:
        msg += (f" (bicubic {psnr(panels[0], panels[2]):.2f} dB, "
                f"hallucinated {psnr(panels[1], panels[2]):.2f} dB)")
    click.echo(msg)


@cli.command("show-config")
@click.pass_context
def show_config(ctx):
    """Print the resolved configuration and its hash."""
    run = _resolve(ctx, None, "train")
    click.echo(json.dumps(asdict(run.cfg), indent=2, sort_keys=True))
    click.echo(f"config hash {run.hash}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="jointfh", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        exc.show()
        return EXIT_VALIDATION
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_RUNTIME
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_RUNTIME
    except ConfigError as exc:
        click.echo(f"Error: {exc}", err=True)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - report, never traceback
        log.debug("unhandled", exc_info=True)
        click.echo(f"Error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
