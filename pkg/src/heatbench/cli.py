"""Command-line orchestration: heatmap computation, region-perturbation
evaluation, the perturbation-operator study, and the training-progress
correlation experiment.

Subcommands:

  heatmap            render + export one heatmap per (image, method)
  evaluate           MoRF (optionally LeRF) curves, AOPC/ABPC report
  perturb-study      one method, all four operators, both directions
  train-correlation  SGD checkpoints, accuracy vs. AOPC, rank correlation

Every run writes a manifest (config, seeds, package version) sufficient to
reproduce its outputs byte-exactly; worker count never changes results
because each (image, repeat) trajectory owns a derived random stream and
aggregation is order-independent.

Options can come from a flat key-value config file (`--config run.cfg`,
lines like `seed = 7`); explicit command-line flags override file entries.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import METHOD_NAMES, compute_heatmap, render_heatmap
from .complexity import (ComplexityRow, encode_image, image_entropy,
                         write_report_csv)
from .datahub import Dataset, FORMATS, dataset_stats, load_dataset
from .netcore import (Model, TrainConfig, forward, load_model, make_small_cnn,
                      save_model, train_sgd)
from .perturbeval import (OPERATORS, PerturbationConfig, aopc, aopc_series,
                          abpc, build_region_grid, lerf_curve, morf_curve,
                          order_regions, scaled_step_count)

RENDER_MODES = ("signed-diverging", "magnitude")
RAW_FORMATS = ("f64", "csv")


@dataclass
class RunConfig:
    model: str | None = None
    data: str | None = None
    data_format: str = "idx"
    methods: tuple[str, ...] = ("lrp-ab-2",)
    method: str = "lrp-ab-2"
    operator: str = "uniform"
    steps: int | None = None          # None: scaled to the image size
    repeats: int = 10
    seed: int = 0
    samples: int = 500
    window: int = 9
    blur_sigma: float = 3.0
    out: str = "heatbench-out"
    workers: int = 1
    lerf: bool = False
    render_mode: str = "signed-diverging"
    raw_format: str = "f64"
    # train-correlation only
    eval_data: str | None = None
    learning_rate: float = 0.06
    batch_size: int = 32
    epochs: int = 20
    checkpoints: int = 6

    def validate(self, *, need_model: bool) -> None:
        if not self.methods:
            raise ValueError("methods list must not be empty")
        for m in (*self.methods, self.method):
            if m not in METHOD_NAMES:
                raise ValueError(f"unknown method {m!r}; valid methods: "
                                 f"{', '.join(METHOD_NAMES)}")
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown operator {self.operator!r}; valid: "
                             f"{', '.join(OPERATORS)}")
        if self.data_format not in FORMATS:
            raise ValueError(f"unknown data format {self.data_format!r}; "
                             f"valid: {', '.join(FORMATS)}")
        if self.data is None:
            raise ValueError("--data is required")
        for label, path in (("--data", self.data),
                            ("--model", self.model if need_model else None),
                            ("--eval-data", self.eval_data)):
            if path is not None and not Path(path).exists():
                raise ValueError(f"{label} path {path} does not exist")
        if need_model and self.model is None:
            raise ValueError("--model is required")


def _parse_config_file(path: str) -> dict:
    """Flat `key = value` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce(name: str, text: str, target_type) -> object:
    if target_type is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {name}: expected a boolean, got {text!r}")
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    if name == "methods":
        return tuple(m.strip() for m in text.split(",") if m.strip())
    return text


def build_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig()
    field_types = {f.name: f for f in fields(RunConfig)}
    if getattr(args, "config", None):
        for key, text in _parse_config_file(args.config).items():
            if key not in field_types:
                raise ValueError(f"unknown config key {key!r}")
            current = getattr(config, key)
            base = type(current) if current is not None else str
            if key in ("steps",):
                base = int
            if key in ("model", "data", "eval_data"):
                base = str
            setattr(config, key, _coerce(key, text, base))
    for key in field_types:
        value = getattr(args, key, None)
        if value is not None:
            if key == "methods":
                value = tuple(m.strip() for m in value.split(",") if m.strip())
            setattr(config, key, value)
    return config


def _manifest_items(command: str, config: RunConfig) -> list[tuple[str, str]]:
    items = [("command", command), ("version", __version__)]
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(value)
        items.append((f.name, str(value)))
    return items


def write_manifest(out_dir: Path, command: str, config: RunConfig,
                   status: str, extra: list[tuple[str, str]] = ()) -> None:
    lines = [f"{k} = {v}" for k, v in _manifest_items(command, config)]
    lines += [f"{k} = {v}" for k, v in extra]
    lines.append(f"status = {status}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _image_seed(seed: int, image_key: int) -> int:
    return int(np.random.SeedSequence((seed, image_key)).generate_state(1)[0])


def _load_sample(config: RunConfig) -> tuple[Dataset, np.ndarray, list[int]]:
    dataset = load_dataset(config.data, config.data_format)
    count = min(config.samples, len(dataset))
    return dataset, dataset.images[:count], list(range(count))


def _resolve_steps(config: RunConfig, height: int, width: int) -> int:
    if config.steps is not None:
        return config.steps
    return scaled_step_count(height, width, config.window)


def evaluate_methods(model: Model, images: np.ndarray, methods: tuple[str, ...],
                     pconfig: PerturbationConfig, stats, *,
                     with_lerf: bool = False, workers: int = 1,
                     image_keys: list[int] | None = None) -> dict:
    """Per-method MoRF (and optionally LeRF) curve matrices over a batch of
    images. Returns {method: {"morf": (n, L+1) array, "lerf": ...}}."""
    keys = image_keys if image_keys is not None else list(range(len(images)))
    h, w = images.shape[2], images.shape[3]
    regions = build_region_grid(h, w, pconfig.window)

    def one_image(i: int) -> dict:
        image = images[i]
        _, trace = forward(model, image)
        out: dict[str, dict[str, np.ndarray]] = {}
        for method in methods:
            heatmap = compute_heatmap(model, image, method,
                                      seed=_image_seed(pconfig.seed, keys[i]),
                                      trace=trace)
            ordering = order_regions(heatmap, regions)
            out[method] = {"morf": morf_curve(model, image, ordering, pconfig,
                                              stats, image_key=keys[i]).values}
            if with_lerf:
                out[method]["lerf"] = lerf_curve(model, image, ordering, pconfig,
                                                 stats, image_key=keys[i]).values
        return out

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_image = list(pool.map(one_image, range(len(images))))
    else:
        per_image = [one_image(i) for i in range(len(images))]

    results: dict[str, dict[str, np.ndarray]] = {}
    for method in methods:
        results[method] = {"morf": np.stack([r[method]["morf"] for r in per_image])}
        if with_lerf:
            results[method]["lerf"] = np.stack([r[method]["lerf"] for r in per_image])
    return results


def _write_curves_csv(path: Path, rows: list[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "method", "operator", "k", "f_value"])
        writer.writerows(rows)


def _curve_rows(keys: list[int], method: str, operator: str,
                values: np.ndarray) -> list[tuple]:
    return [(keys[i], method, operator, k, repr(float(v)))
            for i in range(values.shape[0])
            for k, v in enumerate(values[i])]


def cmd_heatmap(config: RunConfig, out_dir: Path) -> None:
    model = load_model(config.model)
    _, images, keys = _load_sample(config)
    rows = []
    for i, key in enumerate(keys):
        for method in config.methods:
            heatmap = compute_heatmap(model, images[i], method,
                                      seed=_image_seed(config.seed, key))
            stem = f"heatmap_img{key:05d}_{method}"
            rendered = render_heatmap(heatmap, config.render_mode)
            png = encode_image(rendered, "lossless")
            (out_dir / f"{stem}.png").write_bytes(png)
            jpeg = encode_image(rendered, "lossy-q90")
            (out_dir / f"{stem}.jpg").write_bytes(jpeg)
            rows.append(ComplexityRow(key, method, image_entropy(rendered),
                                      len(png), len(jpeg)))
            if config.raw_format == "f64":
                (out_dir / f"{stem}.f64").write_bytes(
                    np.ascontiguousarray(heatmap.scores, dtype="<f8").tobytes())
            else:
                with open(out_dir / f"{stem}.csv", "w", newline="",
                          encoding="utf-8") as f:
                    csv.writer(f).writerows(
                        [repr(float(v)) for v in row] for row in heatmap.scores)
    write_report_csv(rows, out_dir / "complexity.csv")
    print(f"wrote {len(keys) * len(config.methods)} heatmaps "
          f"({len(keys)} images x {len(config.methods)} methods) to {out_dir}")


def cmd_evaluate(config: RunConfig, out_dir: Path) -> None:
    model = load_model(config.model)
    dataset, images, keys = _load_sample(config)
    steps = _resolve_steps(config, images.shape[2], images.shape[3])
    pconfig = PerturbationConfig(operator=config.operator, steps=steps,
                                 repeats=config.repeats, seed=config.seed,
                                 window=config.window,
                                 blur_sigma=config.blur_sigma)
    stats = dataset_stats(dataset, with_dirichlet=config.operator == "dirichlet")
    results = evaluate_methods(model, images, config.methods, pconfig, stats,
                               with_lerf=config.lerf, workers=config.workers)

    morf_rows, lerf_rows = [], []
    for method in config.methods:
        morf_rows += _curve_rows(keys, method, config.operator,
                                 results[method]["morf"])
        if config.lerf:
            lerf_rows += _curve_rows(keys, method, config.operator,
                                     results[method]["lerf"])
    _write_curves_csv(out_dir / "curves.csv", morf_rows)
    if config.lerf:
        _write_curves_csv(out_dir / "curves_lerf.csv", lerf_rows)

    with open(out_dir / "report.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "operator", "AOPC", "ABPC", "n_images", "seed"])
        for method in config.methods:
            area = aopc(results[method]["morf"])
            between = (repr(abpc(results[method]["lerf"], results[method]["morf"]))
                       if config.lerf else "")
            writer.writerow([method, config.operator, repr(area), between,
                             len(keys), config.seed])

    # AOPC as a function of the step count, absolute and relative to the
    # random baseline (when present among the methods)
    series = {m: aopc_series(results[m]["morf"]) for m in config.methods}
    baseline = series.get("random")
    with open(out_dir / "aopc_steps.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "operator", "k", "aopc", "aopc_rel_random"])
        for method in config.methods:
            for k, value in enumerate(series[method]):
                rel = repr(float(value - baseline[k])) if baseline is not None else ""
                writer.writerow([method, config.operator, k, repr(float(value)), rel])
    print(f"evaluated {len(config.methods)} methods on {len(keys)} images "
          f"(operator={config.operator}, L={steps}) -> {out_dir}")


def cmd_perturb_study(config: RunConfig, out_dir: Path) -> None:
    model = load_model(config.model)
    dataset, images, keys = _load_sample(config)
    steps = _resolve_steps(config, images.shape[2], images.shape[3])
    stats = dataset_stats(dataset, with_dirichlet=True)

    morf_rows, lerf_rows, table = [], [], []
    for operator in OPERATORS:
        pconfig = PerturbationConfig(operator=operator, steps=steps,
                                     repeats=config.repeats, seed=config.seed,
                                     window=config.window,
                                     blur_sigma=config.blur_sigma)
        results = evaluate_methods(model, images, (config.method,), pconfig,
                                   stats, with_lerf=True, workers=config.workers)
        curves = results[config.method]
        morf_rows += _curve_rows(keys, config.method, operator, curves["morf"])
        lerf_rows += _curve_rows(keys, config.method, operator, curves["lerf"])
        table.append((operator, repr(abpc(curves["lerf"], curves["morf"])),
                      repr(aopc(curves["morf"])), pconfig.effective_repeats,
                      len(keys), config.seed))
    _write_curves_csv(out_dir / "study_curves_morf.csv", morf_rows)
    _write_curves_csv(out_dir / "study_curves_lerf.csv", lerf_rows)
    with open(out_dir / "study_abpc.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["operator", "ABPC", "AOPC_morf", "repeats_used",
                         "n_images", "seed"])
        writer.writerows(table)
    print(f"perturbation study: method={config.method}, {len(OPERATORS)} "
          f"operators x 2 directions on {len(keys)} images -> {out_dir}")


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    ranks[order] = np.arange(1, len(x) + 1)
    for v in np.unique(x):
        mask = x == v
        if mask.sum() > 1:
            ranks[mask] = ranks[mask].mean()
    return ranks


def spearman(a, b) -> float | None:
    """Spearman rank correlation with average ranks for ties; None when
    undefined (fewer than two points, or a constant series)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 2:
        return None
    ra = _average_ranks(a) - (len(a) + 1) / 2
    rb = _average_ranks(b) - (len(b) + 1) / 2
    denom = float(np.sqrt((ra * ra).sum() * (rb * rb).sum()))
    if denom == 0:
        return None
    return float((ra * rb).sum() / denom)


def cmd_train_correlation(config: RunConfig, out_dir: Path) -> None:
    train_data = load_dataset(config.data, config.data_format)
    eval_data = (load_dataset(config.eval_data, config.data_format)
                 if config.eval_data else train_data)
    c, h, w = train_data.images.shape[1:]
    rng = np.random.default_rng(config.seed)
    model = make_small_cnn((c, h, w), train_data.n_classes, rng)

    updates_per_epoch = -(-len(train_data) // config.batch_size)
    total = updates_per_epoch * config.epochs
    interval = max(1, total // max(1, config.checkpoints - 1))
    tconfig = TrainConfig(learning_rate=config.learning_rate,
                          batch_size=config.batch_size, epochs=config.epochs,
                          seed=config.seed, checkpoint_interval=interval)
    checkpoints = train_sgd(model, train_data, tconfig, eval_data=eval_data)

    steps = _resolve_steps(config, h, w)
    pconfig = PerturbationConfig(operator=config.operator, steps=steps,
                                 repeats=config.repeats, seed=config.seed,
                                 window=config.window,
                                 blur_sigma=config.blur_sigma)
    stats = dataset_stats(eval_data,
                          with_dirichlet=config.operator == "dirichlet")
    count = min(config.samples, len(eval_data))
    images = eval_data.images[:count]

    rows = []
    for cp in checkpoints:
        results = evaluate_methods(cp.model, images, (config.method,), pconfig,
                                   stats, workers=config.workers)
        area = aopc(results[config.method]["morf"])
        rows.append((cp.iteration, cp.test_accuracy, area))
        save_model(cp.model, out_dir / f"checkpoint_{cp.iteration:06d}.hbm")

    with open(out_dir / "checkpoints.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "test_accuracy", "aopc"])
        for iteration, acc, area in rows:
            writer.writerow([iteration, repr(float(acc)), repr(float(area))])

    rho = spearman([r[1] for r in rows], [r[2] for r in rows])
    rho_text = "undefined" if rho is None else repr(rho)
    with open(out_dir / "correlation.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["n_checkpoints", "spearman_accuracy_aopc"])
        writer.writerow([len(rows), rho_text])
    print(f"{len(rows)} checkpoints (method={config.method}); "
          f"spearman(accuracy, AOPC) = {rho_text} -> {out_dir}")


def _add_common(parser: argparse.ArgumentParser, *, model: bool) -> None:
    parser.add_argument("--config", help="flat key = value config file; "
                        "explicit flags override file entries")
    if model:
        parser.add_argument("--model", help="model file (.hbm)")
    parser.add_argument("--data", help="dataset path")
    parser.add_argument("--data-format", dest="data_format", choices=FORMATS,
                        help="dataset on-disk format (default: idx)")
    parser.add_argument("--seed", type=int, help="global random seed (default 0)")
    parser.add_argument("--samples", type=int,
                        help="number of images to use (default 500)")
    parser.add_argument("--out", help="output directory (default heatbench-out)")
    parser.add_argument("--workers", type=int,
                        help="worker threads over images; never changes results")


def _add_perturbation(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--operator", choices=OPERATORS,
                        help="information-removal operator (default uniform)")
    parser.add_argument("--steps", type=int,
                        help="perturbation steps L (default: scaled to the "
                             "image size, 100 at 227x227 with window 9)")
    parser.add_argument("--repeats", type=int,
                        help="trajectories per image for stochastic operators "
                             "(default 10)")
    parser.add_argument("--window", type=int,
                        help="square region extent in pixels (default 9)")
    parser.add_argument("--blur-sigma", dest="blur_sigma", type=float,
                        help="Gaussian sigma for the blur operator (default "
                             "3.0; shrink on small images to keep it local)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heatbench",
        description="Explanation heatmaps for small convolutional classifiers "
                    "and their region-perturbation evaluation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("heatmap", help="render and export heatmaps")
    _add_common(p, model=True)
    p.add_argument("--methods", help="comma-separated method list; valid: "
                   + ", ".join(METHOD_NAMES))
    p.add_argument("--render-mode", dest="render_mode", choices=RENDER_MODES)
    p.add_argument("--raw-format", dest="raw_format", choices=RAW_FORMATS,
                   help="raw score export: flat little-endian float64 (f64) "
                        "or CSV grid")
    p.set_defaults(func=cmd_heatmap, need_model=True)

    p = sub.add_parser("evaluate", help="MoRF/LeRF curves and AOPC/ABPC report")
    _add_common(p, model=True)
    _add_perturbation(p)
    p.add_argument("--methods", help="comma-separated method list; valid: "
                   + ", ".join(METHOD_NAMES))
    p.add_argument("--lerf", action=argparse.BooleanOptionalAction,
                   help="also run least-relevant-first curves and ABPC")
    p.set_defaults(func=cmd_evaluate, need_model=True)

    p = sub.add_parser("perturb-study",
                       help="compare all four operators with one method")
    _add_common(p, model=True)
    _add_perturbation(p)
    p.add_argument("--method", choices=METHOD_NAMES,
                   help="heatmap method (default lrp-ab-2)")
    p.set_defaults(func=cmd_perturb_study, need_model=True)

    p = sub.add_parser("train-correlation",
                       help="train checkpoints, correlate accuracy with AOPC")
    _add_common(p, model=False)
    _add_perturbation(p)
    p.add_argument("--method", choices=METHOD_NAMES,
                   help="heatmap method (default lrp-ab-2)")
    p.add_argument("--eval-data", dest="eval_data",
                   help="held-out dataset for accuracy/AOPC (default: training data)")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoints", type=int,
                   help="number of checkpoints across training (default 6)")
    p.set_defaults(func=cmd_train_correlation, need_model=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = build_config(args)
        config.validate(need_model=args.need_model)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        write_manifest(out_dir, args.command, config, "running")
        args.func(config, out_dir)
        write_manifest(out_dir, args.command, config, "ok")
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        write_manifest(out_dir, args.command, config, f"failed: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
