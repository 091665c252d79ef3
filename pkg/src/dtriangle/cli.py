"""``dtri`` command line: train, eval, map, recover, sample, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__
from .config import ConfigError, apply_overrides, dump_kv, read_kv_file, split_sections
from .data import DataSet, Synthetic2D, load_idx, materialize_mnist, sample_synthetic
from .images import write_grid
from .landscape import ANALYTIC, LandscapeConfig, map_landscape
from .metrics import EvalReport, energy_gap, mode_coverage, recon_mse, uniform_probes
from .models import CheckpointError, ModelConfig, _atomic_write, generate, load_models, sample_prior
from .occlusion import IncompleteDataset, MaskError, parse_mask_tag, recovery_panel, train_incomplete
from .optim import stream
from .trainer import TrainConfig, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | mnist | idx
    images: str = ""
    labels: str = ""
    limit: int = 0
    downsample: bool = False
    digits: tuple[int, ...] = ()
    per_class: int = 0
    holdout: int = 0
    n: int = 2000
    kind: str = "gaussian_mixture"
    std: float = 0.3
    radius: float = 2.0
    cache_dir: str = "~/.cache/dtriangle"

    def __post_init__(self):
        if self.source not in ("synthetic", "mnist", "idx"):
            raise ValueError(f"data.source must be synthetic, mnist or idx, got {self.source!r}")


@dataclass
class MapConfig:
    starts: str = "train"  # train | samples | noise | both
    n_starts: int = 200
    low: float = -1.5
    high: float = 1.5

    def __post_init__(self):
        if self.starts not in ("train", "samples", "noise", "both"):
            raise ValueError("map.starts must be train, samples, noise or both")


@dataclass
class OcclusionConfig:
    mask: str = "P.5"
    update_every: int = 0  # 0 means once per epoch
    panel: int = 8


@dataclass
class EvalConfig:
    n_probes: int = 1000
    probe_low: float = -1.0
    probe_high: float = 1.0
    assign_radius: float = 0.9
    n_samples: int = 1000


SECTIONS = {
    "": TrainConfig,
    "model": ModelConfig,
    "data": DataConfig,
    "landscape": LandscapeConfig,
    "map": MapConfig,
    "occlusion": OcclusionConfig,
    "eval": EvalConfig,
}


class UsageError(Exception):
    pass


def load_run_config(path: str | None, seed: int | None = None) -> dict[str, object]:
    """Parse a config file into one dataclass per section (defaults when ``path`` is None)."""
    values = read_kv_file(path) if path else {}
    grouped = split_sections(values, [s for s in SECTIONS if s])
    out = {}
    for sec, cls in SECTIONS.items():
        try:
            base = cls()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        out[sec] = apply_overrides(base, grouped.get(sec, {}), f"{sec}." if sec else "")
    if seed is not None:
        out[""] = dataclasses.replace(out[""], seed=seed)
    return out


def load_dataset(dc: DataConfig, seed: int) -> DataSet:
    if dc.source == "synthetic":
        spec = Synthetic2D(kind=dc.kind, std=dc.std, radius=dc.radius)
        return sample_synthetic(spec, dc.n, stream(seed, "data", 1 << 20))
    if dc.source == "mnist":
        imgs, lbls = materialize_mnist(os.path.expanduser(dc.cache_dir))
    else:
        if not dc.images:
            raise ConfigError("data.images is required for data.source = idx")
        imgs, lbls = dc.images, (dc.labels or None)
    ds = load_idx(imgs, lbls, downsample=dc.downsample)
    if dc.digits:
        ds = ds.with_labels(dc.digits)
    if dc.per_class:
        ds = ds.per_class(dc.per_class)
    if dc.limit:
        ds = ds.subset(np.arange(min(dc.limit, len(ds))))
    return ds


def split_holdout(ds: DataSet, holdout: int) -> tuple[DataSet, DataSet | None]:
    if holdout <= 0:
        return ds, None
    if holdout >= len(ds):
        raise ConfigError(f"data.holdout {holdout} leaves no training data")
    n = len(ds) - holdout
    return ds.subset(np.arange(n)), ds.subset(np.arange(n, len(ds)))


def prepare_out(path: str, force: bool) -> str:
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise UsageError(f"output directory {path} exists and is not empty (use --force)")
    os.makedirs(path, exist_ok=True)
    return path


def write_text(path: str, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


def write_snapshot(out: str, cfg: dict[str, object], command: str) -> None:
    write_text(os.path.join(out, "config.txt"), dump_kv(cfg))
    manifest = {"command": command, "version": __version__, "checkpoint_format": "DTRI1", "seed": cfg[""].seed}
    write_text(os.path.join(out, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _is_image(shape) -> bool:
    return len(shape) == 3


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    out = prepare_out(args.out, args.force)
    tc, dc = cfg[""], cfg["data"]
    train_ds, _ = split_holdout(load_dataset(dc, tc.seed), dc.holdout)
    mc = dataclasses.replace(cfg["model"], signal_shape=train_ds.signal_shape)
    cfg["model"] = mc
    write_snapshot(out, cfg, "train")
    callbacks = []
    if _is_image(mc.signal_shape):
        z_fixed = sample_prior(64, mc.latent_dim, stream(tc.seed, "probe"))

        def grid(state, _values):
            t = state.iteration - 1
            if t % tc.log_interval == 0:
                imgs = generate(state.models.gen, z_fixed, "none").data
                write_grid(os.path.join(out, f"samples_{t:07d}.pgm"), imgs)

        callbacks.append(grid)
    train(tc, train_ds, mc, callbacks, out_dir=out)
    print(f"trained {tc.iterations} iterations -> {out}")
    return EXIT_OK


def _load_checkpoint(path: str | None):
    if not path:
        raise UsageError("--checkpoint is required")
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    models, meta = load_models(path)
    return models, meta


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    models, _ = _load_checkpoint(args.checkpoint)
    out = prepare_out(args.out, args.force)
    tc, dc, ec = cfg[""], cfg["data"], cfg["eval"]
    ds = load_dataset(dc, tc.seed)
    train_ds, test_ds = split_holdout(ds, dc.holdout)
    test_ds = test_ds or train_ds
    shape = models.config.signal_shape
    if tuple(test_ds.signal_shape) != tuple(shape):
        raise ConfigError(f"data shape {test_ds.signal_shape} does not match checkpoint {shape}")
    probes = uniform_probes(shape, ec.n_probes, stream(tc.seed, "probe"), ec.probe_low, ec.probe_high)
    report = EvalReport(
        recon_mse=recon_mse(test_ds.examples, models.gen, models.inf),
        energy_gap=energy_gap(models.en, test_ds.examples, probes),
    )
    if dc.source == "synthetic" and dc.kind == "gaussian_mixture":
        rng = stream(tc.seed, "probe", 1)
        z = sample_prior(ec.n_samples, models.config.latent_dim, rng)
        samples = generate(models.gen, z, "gaussian", rng=rng).data
        report.mode_coverage = mode_coverage(samples, Synthetic2D().means, ec.assign_radius)
    write_text(os.path.join(out, "eval.json"), report.to_json() + "\n")
    print(report.to_json())
    return EXIT_OK


def _map_starts(models, shape, mc: MapConfig, ds: DataSet | None, seed: int):
    parts = []
    if mc.starts in ("train", "both"):
        parts.append(ds.examples)
    if mc.starts in ("samples", "both"):
        rng = stream(seed, "probe", 2)
        parts.append(generate(models.gen, sample_prior(mc.n_starts, models.config.latent_dim, rng), "none").data)
    if mc.starts == "noise":
        parts.append(uniform_probes(shape, mc.n_starts, stream(seed, "probe", 3), mc.low, mc.high))
    return np.concatenate(parts)


def cmd_map(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    tc, lc, mc = cfg[""], cfg["landscape"], cfg["map"]
    labels = None
    if args.analytic:
        if args.analytic not in ANALYTIC:
            raise UsageError(f"unknown analytic energy {args.analytic!r}; choose from {', '.join(ANALYTIC)}")
        energy, shape = ANALYTIC[args.analytic]
        if mc.n_starts < 1:
            raise ConfigError("map.n_starts must be >= 1")
        out = prepare_out(args.out, args.force)
        starts = uniform_probes(shape, mc.n_starts, stream(tc.seed, "probe", 3), mc.low, mc.high)
    else:
        models, _ = _load_checkpoint(args.checkpoint)
        shape = models.config.signal_shape
        ds = None
        if mc.starts in ("train", "both"):
            ds, _ = split_holdout(load_dataset(cfg["data"], tc.seed), cfg["data"].holdout)
            labels = ds.labels
            if tuple(ds.signal_shape) != tuple(shape):
                raise ConfigError(f"data shape {ds.signal_shape} does not match checkpoint {shape}")
        out = prepare_out(args.out, args.force)
        starts = _map_starts(models, shape, mc, ds, tc.seed)
        if mc.starts == "both":
            labels = None
        energy = models.en
    if len(starts) == 0:
        raise ValueError("no start points to map")
    write_snapshot(out, cfg, "map")
    bm, dg = map_landscape(energy, starts, lc, labels)
    write_text(os.path.join(out, "dg.json"), dg.to_json() + "\n")
    write_text(os.path.join(out, "dg.dot"), dg.to_dot())
    rows = ["basin,size,min_energy,purity"]
    for b in range(len(bm.minima)):
        pur = "" if bm.purity is None or b not in bm.purity else repr(bm.purity[b])
        rows.append(f"{b},{int(bm.counts[b])},{float(bm.energies[b])!r},{pur}")
    write_text(os.path.join(out, "basins.csv"), "\n".join(rows) + "\n")
    if _is_image(shape):
        for b in bm.basins(lc.min_basin_size):
            imgs = starts[bm.exemplars[b]]
            write_grid(os.path.join(out, f"basin_{b}_E{bm.energies[b]:.4f}.pgm"), imgs, cols=len(imgs))
    print(f"{len(bm.minima)} minima, {len(bm.basins(lc.min_basin_size))} basins of size >= {lc.min_basin_size} -> {out}")
    return EXIT_OK


def cmd_recover(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    tc, dc, oc = cfg[""], cfg["data"], cfg["occlusion"]
    tag = args.mask or oc.mask
    spec = parse_mask_tag(tag)
    ds = load_dataset(dc, tc.seed)
    if not _is_image(ds.signal_shape):
        raise ConfigError("recover needs image data")
    H, W = ds.signal_shape[-2:]
    if spec.kind != "salt_pepper" and spec.size > min(H, W):
        raise MaskError(f"block of size {spec.size} does not fit in a {H}x{W} image")
    out = prepare_out(args.out, args.force)
    mc = dataclasses.replace(cfg["model"], signal_shape=ds.signal_shape)
    cfg["model"] = mc
    cfg["occlusion"] = dataclasses.replace(oc, mask=tag)
    write_snapshot(out, cfg, "recover")
    inc = IncompleteDataset.from_images(ds.examples, spec, tc.seed, ds.labels)
    res = train_incomplete(tc, mc, inc, oc.update_every or None, out_dir=out)
    write_grid(os.path.join(out, "recovery.pgm"), recovery_panel(inc, oc.panel), cols=min(oc.panel, len(inc)))
    print(f"recovery error {res.final_error:.4f} (zero-fill baseline {res.baseline:.4f}) -> {out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    models, _ = _load_checkpoint(args.checkpoint)
    out = prepare_out(args.out, args.force)
    seed = 0 if args.seed is None else args.seed
    z = sample_prior(args.n, models.config.latent_dim, stream(seed, "probe", 4))
    x = generate(models.gen, z, "none").data
    if _is_image(models.config.signal_shape):
        write_grid(os.path.join(out, "samples.pgm"), x)
    else:
        lines = [",".join(f"x{i}" for i in range(x.shape[1]))] + [",".join(repr(float(v)) for v in row) for row in x]
        write_text(os.path.join(out, "samples.csv"), "\n".join(lines) + "\n")
    print(f"{args.n} samples -> {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import full_suite

    results = full_suite(0 if args.seed is None else args.seed)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    if args.out:
        out = prepare_out(args.out, args.force)
        write_text(os.path.join(out, "gradcheck.txt"), "\n".join(r.line() for r in results) + "\n")
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "map": cmd_map,
    "recover": cmd_recover,
    "sample": cmd_sample,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtri", description="Divergence-triangle training and landscape tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", metavar="PATH", help="key = value config file")
        sp.add_argument("--out", metavar="DIR", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
        return sp

    common(sub.add_parser("train", help="train the three models"))
    common(sub.add_parser("eval", help="write an evaluation report")).add_argument("--checkpoint", metavar="PATH")
    sp = common(sub.add_parser("map", help="map an energy landscape"))
    sp.add_argument("--checkpoint", metavar="PATH")
    sp.add_argument("--analytic", metavar="NAME", help=f"analytic energy instead of a checkpoint ({', '.join(ANALYTIC)})")
    common(sub.add_parser("recover", help="train on occluded images and recover them")).add_argument(
        "--mask", metavar="TAG", help="P.5, P.7, MB10, B20, B30 or kind:args"
    )
    sp = common(sub.add_parser("sample", help="write a grid of generator samples"))
    sp.add_argument("--checkpoint", metavar="PATH")
    sp.add_argument("--n", type=int, default=64)
    common(sub.add_parser("gradcheck", help="finite-difference gradient checks"), out_required=False)
    return p


def _thread_limit():
    n = int(os.environ.get("DTRI_THREADS", "1") or 1)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        import contextlib

        return contextlib.nullcontext()
    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except (ConfigError, UsageError, MaskError) as exc:
        print(f"dtri {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, FloatingPointError, ValueError, OSError, KeyError) as exc:
        print(f"dtri {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
