"""Command-line runner: one subcommand per experiment.

Each run merges defaults, an optional JSON config file and command-line
flags (flags win), validates the result, writes its artifacts under
``--out`` and finishes with ``manifest.json`` listing every file and its
SHA-256. A failed run deletes whatever it had written and leaves a
manifest with ``status: "failed"``.
"""

from __future__ import annotations

import argparse
import contextlib
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from threadpoolctl import threadpool_limits

from . import __version__
from .config import (
    CONFIGS,
    EvalMemorizationConfig,
    EvalSpatialConfig,
    ReproConfig,
    SampleConfig,
    Score2DConfig,
    SensitivityConfig,
    ShapesGenConfig,
    SpectrumConfig,
    TrainConfig,
)
from .denoiser_theory import masked_sensitivity_shift
from .flow_trainer import AdamState, SSDLossConfig, VelocityModel, train
from .io import (
    atomic_write_bytes,
    image_grid,
    load_checkpoint,
    read_pgm,
    save_checkpoint,
    sha256_file,
    write_csv,
    write_json,
    write_pgm,
)
from .masking import masked_covariance, spectrum_report
from .numerics import CovarianceModel, RngStream, mix64
from .sampler import TimeGrid, batch_generate
from .score_lab import Gaussian2DConfig, GridSpec, draw_training_points, score_error_field
from .shapes_bench import (
    ShapeDataset,
    generate_shapes,
    memorization_metric,
    scatter_metric,
    sensitivity_stats,
)

MANIFEST = "manifest.json"

# stream ids for the distinct random consumers of one seed
DATA_STREAM = 0
INIT_STREAM = 1
TRAIN_STREAM = 2
SENSITIVITY_STREAM = 3


class ConfigError(ValueError):
    pass


class RunContext:
    """Output directory bookkeeping for one run."""

    def __init__(self, out: Path, threads: int):
        self.out = out
        self.threads = threads
        self.written: list[Path] = []
        self.executor: ThreadPoolExecutor | None = None

    def path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        if p not in self.written:
            self.written.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.written:
            with contextlib.suppress(FileNotFoundError):
                p.unlink()
        # drop directories we emptied, deepest first
        for d in sorted({p.parent for p in self.written}, key=lambda q: len(q.parts), reverse=True):
            if d != self.out:
                with contextlib.suppress(OSError):
                    d.rmdir()
        self.written.clear()


# ---------------------------------------------------------------- datasets


def write_dataset(ctx: RunContext, ds: ShapeDataset, seed: int, prefix: str = "") -> None:
    records = []
    for i, img in enumerate(ds.images):
        name = f"{prefix}images/{i:05d}.pgm"
        write_pgm(ctx.path(name), img, maxval=1)
        records.append(
            {"file": f"images/{i:05d}.pgm", "kind": ds.kinds[i], "row": ds.anchors[i][0], "col": ds.anchors[i][1], "area": ds.areas[i]}
        )
    meta = {
        "seed": seed,
        "n": len(ds),
        "height": ds.shape[0],
        "width": ds.shape[1],
        "tri_side": ds.tri_side,
        "sq_side": ds.sq_side,
        "min_area": ds.min_area,
        "images": records,
    }
    write_json(ctx.path(f"{prefix}dataset.json"), meta)
    write_pgm(ctx.path(f"{prefix}preview.pgm"), image_grid(ds.images[:64].astype(float), cols=8))


def load_dataset(path: str | os.PathLike) -> ShapeDataset:
    root = Path(path)
    if root.is_file():
        root = root.parent
    meta_path = root / "dataset.json"
    if not meta_path.exists():
        raise ConfigError(f"data: no dataset.json under {root}")
    meta = json.loads(meta_path.read_text())
    imgs = []
    for rec in meta["images"]:
        img, maxval = read_pgm(root / rec["file"])
        imgs.append((img > 0).astype(np.uint8) if maxval == 1 else (img * 2 > maxval).astype(np.uint8))
    return ShapeDataset(
        images=np.stack(imgs),
        kinds=[r["kind"] for r in meta["images"]],
        anchors=[(r["row"], r["col"]) for r in meta["images"]],
        areas=[r["area"] for r in meta["images"]],
        tri_side=meta["tri_side"],
        sq_side=meta["sq_side"],
    )


def save_array(ctx: RunContext, rel: str, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr, dtype="<f8"), allow_pickle=False)
    atomic_write_bytes(ctx.path(rel), buf.getvalue())


def load_samples(path: str) -> np.ndarray:
    p = Path(path)
    if p.is_dir():
        p = p / "samples.npy"
    if not p.exists():
        raise ConfigError(f"samples: {p} does not exist")
    arr = np.load(p, allow_pickle=False)
    if arr.ndim == 2:
        side = math.isqrt(arr.shape[1])
        if side * side != arr.shape[1]:
            raise ConfigError("samples: flat samples must have a square pixel count")
        arr = arr.reshape(-1, side, side)
    return arr


def image_shape(dim: int, height: int | None, width: int | None) -> tuple[int, int]:
    if height and width:
        if height * width != dim:
            raise ConfigError(f"height*width = {height * width} does not match model dim {dim}")
        return height, width
    side = math.isqrt(dim)
    if side * side != dim:
        raise ConfigError(f"model dim {dim} is not square; set height and width")
    return side, side


# ---------------------------------------------------------------- subcommands


def run_spectrum(cfg: SpectrumConfig, ctx: RunContext) -> dict:
    if cfg.cov_file:
        sigma = np.loadtxt(cfg.cov_file, delimiter=",", ndmin=2)
    else:
        sigma = np.array([[1.0, cfg.rho], [cfg.rho, 1.0]])
    cov = CovarianceModel.from_matrix(sigma, method=cfg.method)
    rep = spectrum_report(cov, cfg.eta)
    rows = [
        (i, rep.lambda_[i], rep.lambda_tilde[i], rep.beta[i] if rep.defined[i] else "nan", int(rep.defined[i]), rep.diag_energy[i])
        for i in range(len(rep.lambda_))
    ]
    write_csv(ctx.path("spectrum.csv"), ["index", "lambda", "lambda_tilde", "beta", "defined", "diag_energy"], rows)
    mc = masked_covariance(cov, cfg.eta)
    write_csv(ctx.path("masked_cov.csv"), [f"c{j}" for j in range(mc.shape[1])], mc.tolist())
    return {"beta": [r[3] for r in rows]}


def run_score2d(cfg: Score2DConfig, ctx: RunContext) -> dict:
    g = Gaussian2DConfig(rho=cfg.rho, t=cfg.t, n_points=cfg.n_points)
    data = draw_training_points(g, cfg.seed)
    res = score_error_field(
        g,
        data,
        cfg.eta,
        GridSpec(cfg.lo, cfg.hi, cfg.resolution),
        n_masks=cfg.n_masks,
        seed=cfg.seed,
        error_norm=cfg.error_norm,
        per_point=cfg.mask_mode == "per_point",
        executor=ctx.executor,
    )
    grid = res.population.grid
    write_csv(ctx.path("data.csv"), ["x1", "x2"], data.tolist())
    write_csv(
        ctx.path("scores.csv"),
        ["x1", "x2", "pop_s1", "pop_s2", "emp_s1", "emp_s2", "mask_s1", "mask_s2"],
        np.column_stack([grid, res.population.vectors, res.empirical.vectors, res.masked.vectors]).tolist(),
    )
    write_csv(
        ctx.path("errors.csv"),
        ["x1", "x2", "emp_err", "mask_err"],
        np.column_stack([grid, res.empirical_error.abs_error, res.masked_error.abs_error]).tolist(),
    )
    summary = {"config": cfg.model_dump(mode="json", exclude={"threads"}), **res.summary()}
    write_json(ctx.path("summary.json"), summary)
    return res.summary()


def run_shapes_gen(cfg: ShapesGenConfig, ctx: RunContext) -> dict:
    ds = generate_shapes(RngStream(cfg.seed, DATA_STREAM), cfg.n, cfg.height, cfg.width, cfg.tri_side, cfg.sq_side)
    write_dataset(ctx, ds, cfg.seed)
    return {"n": len(ds), "triangles": ds.kinds.count("triangle"), "squares": ds.kinds.count("square")}


def _train_model(cfg, data: np.ndarray, image_shape, eta: float, seed: int) -> tuple[VelocityModel, list[float]]:
    # preconditioning uses the root-mean-square pixel value of the training set
    sigma_data = float(np.sqrt(np.mean(data * data))) if cfg.precondition else None
    if sigma_data == 0.0:
        raise ValueError("cannot precondition on an all-zero dataset")
    model = VelocityModel(
        data.shape[1],
        cfg.hidden,
        cfg.time_freqs,
        RngStream(seed, INIT_STREAM),
        skip=cfg.skip,
        sigma_data=sigma_data,
        local_hidden=cfg.local_hidden,
        image_shape=tuple(image_shape),
    )
    opt = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
    res = train(
        model,
        data,
        SSDLossConfig(eta, cfg.normalize_by_unmasked),
        opt,
        cfg.epochs,
        cfg.batch_size,
        RngStream(seed, TRAIN_STREAM),
    )
    return res.model, res.epoch_loss


def _write_training(ctx: RunContext, model: VelocityModel, losses: list[float], prefix: str = "") -> None:
    save_checkpoint(model, ctx.path(f"{prefix}model.ssdm"))
    write_csv(ctx.path(f"{prefix}loss.csv"), ["epoch", "mean_loss"], [(i + 1, v) for i, v in enumerate(losses)])


def run_train(cfg: TrainConfig, ctx: RunContext) -> dict:
    ds = load_dataset(cfg.data)
    model, losses = _train_model(cfg, ds.flat(), ds.shape, cfg.eta, cfg.seed)
    _write_training(ctx, model, losses)
    return {"final_loss": losses[-1], "n_params": model.n_params()}


def _sample(model, n, shape, seed, intervals, method, final_euler, snapshot_times, chunk, executor):
    grid = TimeGrid.uniform(intervals)
    run = batch_generate(
        model,
        n,
        model.dim,
        grid,
        seed,
        snapshot_times=snapshot_times,
        method=method,
        final_euler=final_euler,
        chunk=chunk,
        executor=executor,
    )
    return grid, run, run.terminal.reshape(n, *shape)


def run_sample(cfg: SampleConfig, ctx: RunContext) -> dict:
    model = load_checkpoint(cfg.model)
    shape = image_shape(model.dim, cfg.height, cfg.width)
    grid, run, imgs = _sample(
        model, cfg.n, shape, cfg.seed, cfg.intervals, cfg.method, cfg.final_euler, cfg.snapshot_times, cfg.chunk, ctx.executor
    )
    save_array(ctx, "samples.npy", imgs)
    if cfg.preview:
        write_pgm(ctx.path("samples.pgm"), image_grid(imgs[: cfg.preview]))
    for t, snap in zip(run.snapshot_times, run.snapshots):
        write_pgm(ctx.path(f"snapshot_t{t:.4f}.pgm"), image_grid(snap[: max(cfg.preview, 1)].reshape(-1, *shape)))
    info = {"times": grid.times.tolist(), "nfe": run.nfe, "seed": cfg.seed, "method": cfg.method, "final_euler": cfg.final_euler}
    write_json(ctx.path("sampling.json"), info)
    return {"nfe": run.nfe}


def run_eval_spatial(cfg: EvalSpatialConfig, ctx: RunContext) -> dict:
    imgs = load_samples(cfg.samples)
    rep = scatter_metric(imgs, cfg.threshold, cfg.min_area, executor=ctx.executor)
    write_csv(
        ctx.path("clusters.csv"),
        ["index", "n_scattered", "sizes"],
        [(i, len(s), ";".join(map(str, s))) for i, s in enumerate(rep.cluster_sizes)],
    )
    summary = {**rep.as_dict(), "threshold": cfg.threshold, "min_area": cfg.min_area}
    write_json(ctx.path("spatial.json"), summary)
    return summary


def run_eval_memorization(cfg: EvalMemorizationConfig, ctx: RunContext) -> dict:
    imgs = load_samples(cfg.samples)
    ds = load_dataset(cfg.data)
    rep = memorization_metric(np.clip(imgs.reshape(len(imgs), -1), 0.0, 1.0), ds.flat())
    write_csv(ctx.path("memorization.csv"), ["index", "d_mem", "nearest"], [(i, d, j) for i, (d, j) in enumerate(zip(rep.d_mem, rep.nearest))])
    summary = {"n": int(rep.d_mem.size), "mean": rep.mean, "std": rep.std}
    write_json(ctx.path("memorization.json"), summary)
    return summary


def _heatmap_rows(*maps: np.ndarray):
    h, w = maps[0].shape
    return [(r, c, *(m[r, c] for m in maps)) for r in range(h) for c in range(w)]


def _histogram_rows(values: np.ndarray, bins: int):
    counts, edges = np.histogram(values, bins=bins)
    return [(edges[i], edges[i + 1], int(counts[i])) for i in range(bins)]


def run_sensitivity(cfg: SensitivityConfig, ctx: RunContext) -> dict:
    ds = load_dataset(cfg.data)
    h, w = ds.shape
    x, y = cfg.pixel if cfg.pixel is not None else (w // 2, h // 2)
    if not (0 <= x < w and 0 <= y < h):
        raise ConfigError(f"pixel: {(x, y)} lies outside the {w}x{h} image")
    if cfg.analytic:
        flat = ds.flat()
        centred = flat - flat.mean(axis=0)
        cov = CovarianceModel.from_matrix(centred.T @ centred / len(flat))
        full, masked = masked_sensitivity_shift(cov, cfg.eta, cfg.t, snr_power=cfg.snr_power)
        q = y * w + x
        rf, rm = full[q].reshape(h, w), masked[q].reshape(h, w)
        write_csv(ctx.path("heatmap.csv"), ["row", "col", "full", "masked"], _heatmap_rows(rf, rm))
        summary = {
            "mode": "analytic",
            "pixel": [x, y],
            "t": cfg.t,
            "eta": cfg.eta,
            "l1_full": float(np.abs(rf).sum()),
            "l1_masked": float(np.abs(rm).sum()),
        }
    else:
        model = load_checkpoint(cfg.model)
        if model.dim != h * w:
            raise ConfigError(f"model dim {model.dim} does not match {h}x{w} data")
        stats = sensitivity_stats(
            model, ds.images, cfg.t, (x, y), cfg.n_images, cfg.n_noise, seed=mix64(cfg.seed ^ SENSITIVITY_STREAM), executor=ctx.executor
        )
        write_csv(ctx.path("heatmap.csv"), ["row", "col", "mean_magnitude"], _heatmap_rows(stats.heatmaps.mean(axis=0)))
        write_csv(ctx.path("l1.csv"), ["index", "l1_norm"], list(enumerate(stats.l1_norms)))
        write_csv(ctx.path("l1_hist.csv"), ["lo", "hi", "count"], _histogram_rows(stats.l1_norms, cfg.bins))
        write_csv(ctx.path("pixel_hist.csv"), ["lo", "hi", "count"], _histogram_rows(stats.pixel_magnitudes, cfg.bins))
        summary = {"mode": "model", **stats.summary()}
    write_json(ctx.path("sensitivity.json"), summary)
    return summary


def run_repro(cfg: ReproConfig, ctx: RunContext) -> dict:
    ds = generate_shapes(RngStream(cfg.seed, DATA_STREAM), cfg.n_train)
    write_dataset(ctx, ds, cfg.seed, prefix="data/")
    data = ds.flat()
    sample_seed = mix64(cfg.seed)
    results = {}
    for name, eta in (("baseline", 0.0), ("ssd", cfg.eta)):
        model, losses = _train_model(cfg, data, ds.shape, eta, cfg.seed)
        _write_training(ctx, model, losses, prefix=f"{name}/")
        _, _, imgs = _sample(model, cfg.n_samples, ds.shape, sample_seed, cfg.intervals, "heun", False, (), 256, ctx.executor)
        save_array(ctx, f"{name}/samples.npy", imgs)
        write_pgm(ctx.path(f"{name}/samples.pgm"), image_grid(imgs[:256]))
        spatial = scatter_metric(imgs, cfg.threshold, ds.min_area, executor=ctx.executor)
        mem = memorization_metric(np.clip(imgs.reshape(len(imgs), -1), 0.0, 1.0), data)
        sens = sensitivity_stats(
            model,
            ds.images,
            cfg.t,
            n_images=cfg.sensitivity_images,
            n_noise=cfg.n_noise,
            seed=mix64(cfg.seed ^ SENSITIVITY_STREAM),
            executor=ctx.executor,
        )
        results[name] = {
            "eta": eta,
            "final_loss": losses[-1],
            **spatial.as_dict(),
            "d_mem_mean": mem.mean,
            "d_mem_std": mem.std,
            "sensitivity_l1_mean": float(np.mean(sens.l1_norms)),
            "sensitivity_pixel_iqr": sens.iqr(),
        }
    b, s = results["baseline"], results["ssd"]
    metrics = ["n_scatter_clusters", "n_inconsistent_images", "d_mem_mean", "sensitivity_l1_mean", "sensitivity_pixel_iqr", "final_loss"]
    rows = [(m, b[m], s[m], (b[m] / s[m]) if s[m] else "inf") for m in metrics]
    write_csv(ctx.path("comparison.csv"), ["metric", "baseline", "ssd", "baseline_over_ssd"], rows)
    write_json(ctx.path("comparison.json"), results)
    return results


RUNNERS = {
    "spectrum": run_spectrum,
    "score2d": run_score2d,
    "shapes-gen": run_shapes_gen,
    "train": run_train,
    "sample": run_sample,
    "eval-spatial": run_eval_spatial,
    "eval-memorization": run_eval_memorization,
    "sensitivity": run_sensitivity,
    "repro": run_repro,
}


# ---------------------------------------------------------------- argument parsing


def _flag_type(annotation):
    """argparse converter for a pydantic field annotation."""
    text = str(annotation)
    if annotation is bool:
        return None
    if annotation is int:
        return int
    if annotation is float:
        return float
    if "list[int]" in text or "tuple[int, int]" in text:
        return lambda s: [int(v) for v in s.split(",") if v]
    if "list[float]" in text:
        return lambda s: [float(v) for v in s.split(",") if v]
    if "int" in text and "Optional" in text:
        return int
    return str


def _add_fields(p: argparse.ArgumentParser, model) -> None:
    for name, field in model.model_fields.items():
        if name in ("seed", "threads"):
            continue
        flag = "--" + name.replace("_", "-")
        help_text = f"default: {field.default!r}" if not field.is_required() else "required"
        if field.annotation is bool:
            p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS, help=help_text)
        else:
            p.add_argument(flag, dest=name, type=_flag_type(field.annotation), default=argparse.SUPPRESS, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssdlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ssdlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, model in CONFIGS.items():
        p = sub.add_parser(name, help=(RUNNERS[name].__doc__ or name))
        p.add_argument("--config", type=Path, help="JSON file with config values")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS)
        _add_fields(p, model)
    return parser


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(part) for part in e["loc"]) or "config"
        lines.append(f"  {loc}: {e['msg']}")
    return "\n".join(lines)


def resolve_config(command: str, args: argparse.Namespace):
    values: dict = {}
    if args.config is not None:
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config: top level must be a JSON object")
    skip = {"command", "config", "out"}
    values.update({k: v for k, v in vars(args).items() if k not in skip})
    try:
        return CONFIGS[command].model_validate(values)
    except ValidationError as exc:
        raise ConfigError("invalid configuration:\n" + _format_validation(exc)) from exc


def _write_manifest(ctx: RunContext, command: str, cfg, status: str, elapsed: float, error: str | None = None, result=None):
    outputs = []
    for p in sorted(ctx.written):
        if p.exists():
            outputs.append({"path": p.relative_to(ctx.out).as_posix(), "sha256": sha256_file(p), "bytes": p.stat().st_size})
    manifest = {
        "artifact": "ssdlab",
        "version": __version__,
        "command": command,
        "config": cfg.model_dump(mode="json") if cfg is not None else None,
        "status": status,
        "wall_clock_seconds": round(elapsed, 3),
        "outputs": outputs,
    }
    if error:
        manifest["error"] = error
    if result is not None:
        manifest["result"] = result
    ctx.out.mkdir(parents=True, exist_ok=True)
    write_json(ctx.out / MANIFEST, manifest)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
    except ConfigError as exc:
        print(f"ssdlab {args.command}: {exc}", file=sys.stderr)
        return 2
    ctx = RunContext(args.out, cfg.threads)
    start = time.perf_counter()
    try:
        with threadpool_limits(limits=1), contextlib.ExitStack() as stack:
            if cfg.threads > 1:
                ctx.executor = stack.enter_context(ThreadPoolExecutor(cfg.threads))
            result = RUNNERS[args.command](cfg, ctx)
    except Exception as exc:  # noqa: BLE001 - reported and turned into an exit status
        ctx.cleanup()
        msg = f"{type(exc).__name__}: {exc}"
        _write_manifest(ctx, args.command, cfg, "failed", time.perf_counter() - start, error=msg)
        print(f"ssdlab {args.command}: failed: {msg}", file=sys.stderr)
        return 1
    _write_manifest(ctx, args.command, cfg, "ok", time.perf_counter() - start, result=result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
