"""Command-line entry point: gen, train, infer, eval, ablate-steps, bench.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, baselines, dataset, flow, metrics, nn, pipeline
from .config import ConfigError, RunConfig, from_dict, load_config
from .nn import NonFiniteError

log = logging.getLogger("ckmflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _out_dir(args, cfg: RunConfig, command: str) -> Path:
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        root = os.environ.get("CKMFLOW_OUT") or cfg.out or "ckmflow_out"
        out = Path(root) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(out: Path, cfg: RunConfig, args) -> None:
    """Config echo plus the provenance needed to re-run."""
    (out / "config.json").write_text(cfg.to_json() + "\n")
    run = {
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": cfg.seed,
        "versions": {"ckmflow": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")


def _read_dataset(path) -> dataset.Dataset:
    try:
        return dataset.read_dataset(path)
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found: {path}") from exc
    except dataset.DatasetFormatError as exc:
        raise DataError(str(exc)) from exc


def _task_opts(cfg: RunConfig) -> pipeline.TaskAOptions:
    d = cfg.degradation
    return pipeline.TaskAOptions(d.factor, d.noise_sigma, d.mask_mode, d.tau_b)


def _infer_cfg(cfg: RunConfig, steps: int | None = None, seed: int | None = None) -> flow.InferenceConfig:
    i = cfg.inference
    return flow.InferenceConfig(
        steps=steps if steps is not None else i.steps,
        seed=cfg.seed if seed is None else seed,
        hermitian_projection=i.hermitian_projection,
        psd_clip=i.psd_clip,
    )


def _ddpm_cfg(cfg: RunConfig, seed: int | None = None) -> baselines.DdpmConfig:
    d = cfg.ddpm
    return baselines.DdpmConfig(d.T, d.beta_start, d.beta_end, cfg.seed if seed is None else seed)


def _load_model(path) -> tuple[pipeline.TrainedModel, RunConfig]:
    if path is None:
        raise UsageError("this method needs --checkpoint")
    try:
        net, params, _, meta = nn.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except (ValueError, KeyError) as exc:
        raise DataError(str(exc)) from exc
    train_cfg = from_dict(meta["config"])
    model = pipeline.TrainedModel(
        meta["method"], meta["task"], net, params, flow.Normalizer.from_dict(meta["normalizer"]), meta
    )
    return model, train_cfg


def _subset(n: int, cfg: RunConfig, split: str) -> np.ndarray:
    if split == "all":
        return np.arange(n)
    train_idx, test_idx = pipeline.split_indices(n, cfg.data.test_fraction_pct)
    return test_idx if split == "test" else train_idx


def _timed_predictions(method, inputs, index, model, cfg: RunConfig, steps=None, warmup: int = 2):
    """Per-record reconstruction with wall-clock timing; ``warmup`` untimed calls first."""
    def one(i):
        seed = pipeline.sample_seed(cfg.seed, int(i))
        return pipeline.predict(
            method, inputs, [i], model, _infer_cfg(cfg, steps, seed), _ddpm_cfg(cfg, seed), cfg.data.knn_k
        )[0]

    for _ in range(min(warmup, len(index))):
        one(index[0])
    preds, times = [], []
    for i in index:
        t0 = time.perf_counter()
        preds.append(one(i))
        times.append((time.perf_counter() - t0) * 1e3)
    return preds, times


def _write_prediction(out: Path, i: int, task: str, pred: np.ndarray) -> None:
    stem = out / f"rec_{i:06d}"
    if task == "a":
        np.asarray(pred, dtype="<f4").tofile(f"{stem}.f32")
        dataset.write_pgm(f"{stem}.pgm", np.clip(np.rint(pred), 0, 255).astype(np.uint8))
    else:
        flow.complex_to_planes(pred).astype("<f4").tofile(f"{stem}.f32")
        mag = metrics.magnitude_image(pred)
        dataset.write_pgm(f"{stem}_mag.pgm", np.rint(255 * mag).astype(np.uint8))


def _read_prediction(path: Path, task: str, dims) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4").astype(np.float64)
    if task == "a":
        return raw.reshape(dims)
    n = dims[0]
    return flow.planes_to_complex(raw.reshape(2, n, n))


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args, cfg: RunConfig) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out = _out_dir(args, cfg, "gen")
    path = out / (args.name or f"task_{args.task}_{args.count}_{cfg.seed}.ckmf")
    ds = dataset.generate_dataset(
        args.task, args.count, cfg.seed, cfg.scene, cfg.propagation, cfg.data.ring_spacing, args.jobs, path
    )
    _echo(out, cfg, args)
    print(f"records {len(ds)}")
    print(f"file {path}")
    print(f"sha256 {dataset.file_sha256(path)}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    ds = _read_dataset(args.data)
    if ds.task != args.task:
        raise DataError(f"dataset holds task {ds.task} records, --task {args.task} requested")
    if args.epochs is not None:
        if args.epochs < 1:
            raise UsageError("--epochs must be >= 1")
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    out = _out_dir(args, cfg, "train")
    method = args.method
    inputs = pipeline.task_inputs(ds, _task_opts(cfg), cfg.seed)
    train_idx, test_idx = pipeline.split_indices(len(ds), cfg.data.test_fraction_pct)
    if len(train_idx) == 0:
        raise DataError("training split is empty")
    c_tr, x_tr = inputs.cond[train_idx], inputs.targets[train_idx]
    normalizer = flow.Normalizer.fit(ds.task, c_tr)

    params = adam = None
    start, losses, best = 0, [], float("inf")
    if args.resume:
        try:
            net, params, adam, meta = nn.load_checkpoint(args.resume)
        except FileNotFoundError as exc:
            raise DataError(f"checkpoint not found: {args.resume}") from exc
        if meta.get("method") != method or meta.get("task") != ds.task or adam is None:
            raise DataError("resume needs a last.ckmw of the same method and task")
        normalizer = flow.Normalizer.from_dict(meta["normalizer"])
        start, losses, best = meta["epoch"], list(meta["losses"]), meta["best_loss"]
    else:
        net = pipeline.make_net(
            method, ds.task, inputs.cond.shape[1], inputs.targets.shape[1],
            cfg.net.base_width, cfg.net.depth_for(ds.task), cfg.net.time_embed_dim,
        )
    _echo(out, cfg, args)
    (out / "stats.json").write_text(json.dumps(normalizer.to_dict(), indent=2) + "\n")
    (out / "split.json").write_text(json.dumps({"train": train_idx.tolist(), "test": test_idx.tolist()}) + "\n")

    def meta_for(epoch):
        return {
            "method": method, "task": ds.task, "epoch": epoch, "losses": losses, "best_loss": best,
            "normalizer": normalizer.to_dict(), "config": cfg.to_dict(),
        }

    def on_epoch(epoch, loss, result):
        nonlocal best
        losses.append(loss)
        if loss < best:
            best = loss
            nn.save_checkpoint(out / "best.ckmw", net, result.params, None, meta_for(epoch + 1))
        nn.save_checkpoint(out / "last.ckmw", net, result.params, result.adam, meta_for(epoch + 1))
        _write_rows(out / "loss.csv", ["epoch", "mean_loss"], [[k, f"{v:.9g}"] for k, v in enumerate(losses)])
        print(f"epoch {epoch} loss {loss:.6f}", flush=True)

    tcfg = flow.TrainConfig(cfg.train.batch_size, cfg.train.lr, cfg.train.epochs, cfg.seed, ds.task)
    pipeline.train_method(
        method, normalizer.norm_cond(c_tr), normalizer.norm_target(x_tr), net, tcfg, _ddpm_cfg(cfg),
        params=params, adam=adam, start_epoch=start, on_epoch=on_epoch,
    )
    print(f"run directory {out}")
    return EXIT_OK


def _method_setup(args, cfg: RunConfig, task: str):
    """Resolve model and effective config (learned methods adopt the training-time degradation)."""
    model = None
    if args.method in pipeline.LEARNED:
        model, train_cfg = _load_model(args.checkpoint)
        if model.method != args.method:
            raise UsageError(f"checkpoint holds a {model.method} model, not {args.method}")
        if model.task != task:
            raise DataError(f"checkpoint is for task {model.task}, data is task {task}")
        cfg = replace(cfg, degradation=train_cfg.degradation)
    try:
        pipeline.check_applicable(args.method, task)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return model, cfg


def cmd_infer(args, cfg: RunConfig) -> int:
    if args.steps is not None and args.steps < 1:
        raise UsageError("--steps must be >= 1")
    ds = _read_dataset(args.data)
    model, cfg = _method_setup(args, cfg, ds.task)
    out = _out_dir(args, cfg, "infer")
    index = _subset(len(ds), cfg, args.split)
    if args.limit is not None:
        index = index[: args.limit]
    inputs = pipeline.task_inputs(ds, _task_opts(cfg), cfg.seed)
    preds, times = _timed_predictions(args.method, inputs, index, model, cfg, args.steps)
    for i, p in zip(index, preds):
        _write_prediction(out, int(i), ds.task, p)
    rows = [[int(i), f"{t:.4f}"] for i, t in zip(index, times)]
    rows += [["mean", f"{np.mean(times):.4f}"], ["std", f"{np.std(times):.4f}"]]
    _write_rows(out / "timing.csv", ["record", "ms"], rows)
    manifest = {
        "method": args.method, "task": ds.task, "indices": [int(i) for i in index],
        "dims": list(inputs.truth(0).shape), "steps": args.steps or cfg.inference.steps,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    _echo(out, cfg, args)
    print(f"{len(index)} reconstructions written to {out} (mean {np.mean(times):.2f} ms/sample)")
    return EXIT_OK


def _truths(ds: dataset.Dataset) -> np.ndarray:
    if ds.task == "a":
        return ds.gain_maps().astype(np.float64)
    return flow.planes_to_complex(ds.targets())


def _eval_dir(pred_dir: Path, ds: dataset.Dataset, truths, include_time: bool) -> metrics.MetricsReport:
    manifest_path = pred_dir / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        method, indices = manifest["method"], manifest["indices"]
        if manifest["task"] != ds.task:
            raise DataError(f"{pred_dir}: predictions are for task {manifest['task']}")
    else:
        method, indices = pred_dir.name, list(range(len(ds)))
    errors, preds, gts = [], [], []
    dims = truths.shape[1:]
    for i in indices:
        path = pred_dir / f"rec_{i:06d}.f32"
        if i >= len(ds):
            errors.append(f"record {i} not in truth set")
        elif not path.exists():
            errors.append(f"missing {path.name}")
        else:
            preds.append(_read_prediction(path, ds.task, dims))
            gts.append(truths[i])
    if preds:
        rep = metrics.evaluate(method, preds, gts, ds.task)
    else:
        rep = metrics.MetricsReport(method, ds.task)
    rep.errors = errors
    timing = pred_dir / "timing.csv"
    if include_time and timing.exists():
        for row in csv.reader(timing.open()):
            if row and row[0] == "mean":
                rep.aggregate["time_ms_per_sample"] = float(row[1])
    return rep


def cmd_eval(args, cfg: RunConfig) -> int:
    ds = _read_dataset(args.truth)
    if args.task and args.task != ds.task:
        raise DataError(f"truth dataset is task {ds.task}")
    out = _out_dir(args, cfg, "eval")
    truths = _truths(ds)
    reports = [_eval_dir(Path(p), ds, truths, args.include_time) for p in args.pred]
    metrics.write_report_csv(out / "metrics.csv", reports)
    print(metrics.format_table(reports))
    bad = [r for r in reports if r.errors]
    for r in bad:
        print(f"{r.method}: {'; '.join(r.errors)}", file=sys.stderr)
    return EXIT_DATA if bad else EXIT_OK


def _score(task: str, preds, truths) -> float:
    if task == "a":
        return float(np.mean([metrics.ssim(t, p) for t, p in zip(truths, preds)]))
    return metrics.msi(list(truths), list(preds))


def cmd_ablate_steps(args, cfg: RunConfig) -> int:
    try:
        steps_list = [int(s) for s in args.steps_list.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --steps-list: {args.steps_list}") from exc
    if not steps_list or min(steps_list) < 1:
        raise UsageError("--steps-list needs positive integers")
    ds = _read_dataset(args.data)
    args.method = "gfm"
    model, cfg = _method_setup(args, cfg, ds.task)
    out = _out_dir(args, cfg, "ablate-steps")
    index = _subset(len(ds), cfg, args.split)
    inputs = pipeline.task_inputs(ds, _task_opts(cfg), cfg.seed)
    truths = [inputs.truth(i) for i in index]
    label = "SSIM" if ds.task == "a" else "MSI"
    scores = {n: _score(ds.task, pipeline.predict("gfm", inputs, index, model, _infer_cfg(cfg, n)), truths)
              for n in steps_list}
    # timing rounds cycle through every N so drift on a shared core hits all N alike;
    # the minimum is kept because wall time only ever errs upwards
    best = {n: float("inf") for n in steps_list}
    pipeline.predict("gfm", inputs, index[:1], model, _infer_cfg(cfg, steps_list[0]))
    for _ in range(max(args.repeats, 1)):
        for n in steps_list:
            t0 = time.perf_counter()
            pipeline.predict("gfm", inputs, index, model, _infer_cfg(cfg, n))
            best[n] = min(best[n], time.perf_counter() - t0)
    rows = []
    for n in steps_list:
        ms = best[n] * 1e3 / len(index)
        rows.append([n, f"{scores[n]:.6f}", f"{ms:.4f}"])
        print(f"N={n:<4d} {label} {scores[n]:.4f}  {ms:.2f} ms/sample", flush=True)
    _write_rows(out / "ablation.csv", ["Steps", label, "Time(ms)"], rows)
    _echo(out, cfg, args)
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    ds = _read_dataset(args.data)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        try:
            pipeline.check_applicable(m, ds.task)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    out = _out_dir(args, cfg, "bench")
    _echo(out, cfg, args)
    inputs = pipeline.task_inputs(ds, _task_opts(cfg), cfg.seed)
    train_idx, test_idx = pipeline.split_indices(len(ds), cfg.data.test_fraction_pct)
    if len(test_idx) == 0:
        raise DataError("test split is empty")
    normalizer = flow.Normalizer.fit(ds.task, inputs.cond[train_idx])
    tcfg = flow.TrainConfig(cfg.train.batch_size, cfg.train.lr, cfg.train.epochs, cfg.seed, ds.task)

    models = {}
    for m in methods:
        if m not in pipeline.LEARNED:
            continue
        ckpt = Path(args.checkpoint_dir) / f"{m}.ckmw" if args.checkpoint_dir else None
        if ckpt is not None and ckpt.exists():
            models[m] = _load_model(ckpt)[0]
            continue
        net = pipeline.make_net(
            m, ds.task, inputs.cond.shape[1], inputs.targets.shape[1],
            cfg.net.base_width, cfg.net.depth_for(ds.task), cfg.net.time_embed_dim,
        )
        print(f"training {m} ({tcfg.epochs} epochs)", flush=True)
        res = pipeline.train_method(
            m, normalizer.norm_cond(inputs.cond[train_idx]), normalizer.norm_target(inputs.targets[train_idx]),
            net, tcfg, _ddpm_cfg(cfg),
        )
        meta = {
            "method": m, "task": ds.task, "epoch": res.epochs_done, "losses": res.losses,
            "best_loss": res.best_loss, "normalizer": normalizer.to_dict(), "config": cfg.to_dict(),
        }
        nn.save_checkpoint(out / f"{m}.ckmw", net, res.params, None, meta)
        models[m] = pipeline.TrainedModel(m, ds.task, net, res.params, normalizer, meta)

    truths = [inputs.truth(i) for i in test_idx]
    timing_idx = np.resize(test_idx, max(args.timing_samples, 1))
    reports, mean_ms = [], {}
    with threadpool_limits(limits=1):
        for m in methods:
            preds, _ = _timed_predictions(m, inputs, test_idx, models.get(m), cfg, warmup=0)
            _, times = _timed_predictions(m, inputs, timing_idx, models.get(m), cfg)
            reports.append(metrics.evaluate(m, preds, truths, ds.task))
            mean_ms[m] = float(np.mean(times))
            print(f"{m}: done ({mean_ms[m]:.2f} ms/sample)", flush=True)
    # wall time stays out of bench.csv so that file is reproducible byte for byte
    metrics.write_report_csv(out / "bench.csv", reports)
    gfm_ms = mean_ms.get("gfm")
    rows = []
    for m in methods:
        ratio = mean_ms[m] / gfm_ms if gfm_ms else float("nan")
        rows.append([m, f"{mean_ms[m]:.4f}", f"{ratio:.4f}"])
    _write_rows(out / "timing_ratios.csv", ["method", "time_ms_per_sample", "ratio_vs_gfm"], rows)
    for r in reports:
        r.aggregate["time_ms_per_sample"] = mean_ms[r.method]
    print(metrics.format_table(reports))
    if "ddpm" in mean_ms and gfm_ms:
        print(f"ddpm/gfm time ratio {mean_ms['ddpm'] / gfm_ms:.2f} (T={cfg.ddpm.T}, N={cfg.inference.steps})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--jobs", type=int, help="worker / BLAS thread bound (1 = bit reproducible)")
    common.add_argument("--out", help="output directory")

    p = _Parser(prog="ckmflow", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a dataset file")
    g.add_argument("--task", choices=["a", "b"], required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--name", help="file name inside the output directory")

    t = sub.add_parser("train", parents=[common], help="train a learned method")
    t.add_argument("--task", choices=["a", "b"], required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--method", choices=pipeline.LEARNED, default="gfm")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="continue from a last.ckmw checkpoint")

    i = sub.add_parser("infer", parents=[common], help="reconstruct records")
    i.add_argument("--data", required=True)
    i.add_argument("--method", choices=baselines.METHODS, default="gfm")
    i.add_argument("--checkpoint")
    i.add_argument("--steps", type=int)
    i.add_argument("--split", choices=["all", "test", "train"], default="all")
    i.add_argument("--limit", type=int)

    e = sub.add_parser("eval", parents=[common], help="score prediction directories")
    e.add_argument("--pred", action="append", required=True, help="prediction directory (repeatable)")
    e.add_argument("--truth", required=True)
    e.add_argument("--task", choices=["a", "b"])
    e.add_argument("--include-time", action="store_true", help="copy mean wall time from timing.csv")

    a = sub.add_parser("ablate-steps", parents=[common], help="SSIM/MSI and time versus Euler steps")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--steps-list", default="1,2,4,8,10,20,50")
    a.add_argument("--split", choices=["all", "test", "train"], default="all")
    a.add_argument("--repeats", type=int, default=3, help="timing repeats per N (minimum is kept)")

    b = sub.add_parser("bench", parents=[common], help="train and compare methods on one dataset")
    b.add_argument("--data", required=True)
    b.add_argument("--methods", default=",".join(baselines.METHODS))
    b.add_argument("--epochs", type=int)
    b.add_argument("--checkpoint-dir", help="reuse <method>.ckmw files found here")
    b.add_argument("--timing-samples", type=int, default=20)
    return p


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate-steps": cmd_ablate_steps,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    for key, default in (("config", None), ("seed", None), ("jobs", 1), ("out", None)):
        if not hasattr(args, key):
            setattr(args, key, default)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise UsageError("--seed must be non-negative")
            cfg = cfg.replace(seed=args.seed)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        with threadpool_limits(limits=args.jobs):
            return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"ckmflow: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"ckmflow: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"ckmflow: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"ckmflow: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
