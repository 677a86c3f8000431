"""Command-line interface: train, sample, orbit, path, eval, contour, diag.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import hp_field_types, load_checkpoint, parse_hp_value, save_checkpoint
from .datasets import (LabeledDataset, gen_concentric_circles, gen_rotated_glyphs, gen_swiss_roll,
                       load_dataset_csv, save_dataset_csv, select_anchors)
from .errors import ConfigurationError, DimensionError, DomainError, NumericFailure, NumericInputError
from .evaluation import (GridSpec, estimated_log_likelihood, posterior_contour, prior_samples,
                         reconstruction_mse, training_diagnostics, write_key_values)
from .model import Hyperparameters, sample_posterior
from .svg import CATEGORICAL, Figure, ramp_color
from .train import TrainingLog, train
from .transport import infer_coefficients_batch, interpolate_path, orbit

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DATASETS = ("swiss_roll", "circles", "glyphs")
DEFAULT_TRAIN_SIZE = {"swiss_roll": 1000, "circles": 400, "glyphs": 200}


@dataclass
class RunConfig:
    hp: Hyperparameters
    dataset: str = "swiss_roll"
    anchor_strategy: str = "even"
    seed: int = 0
    data_seed: int | None = None
    num_train: int | None = None
    glyph_side: int = 16
    explicit: set = field(default_factory=set)


RUN_KEYS = {"dataset": str, "anchor_strategy": str, "seed": int, "data_seed": int, "num_train": int,
            "glyph_side": int}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors.

    Hyperparameter defaults follow the chosen dataset's preset.
    """
    types = hp_field_types()
    run, hp_vals, seen = {}, {}, set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in seen:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        if key in RUN_KEYS:
            run[key] = parse_hp_value(key, value, RUN_KEYS[key])
        elif key in types:
            hp_vals[key] = parse_hp_value(key, value, types[key])
        else:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
    dataset = run.get("dataset", "swiss_roll")
    if dataset not in DATASETS:
        raise ConfigurationError(f"{source}: dataset must be one of {DATASETS}, got {dataset!r}")
    if dataset == "glyphs":
        side = run.get("glyph_side", 16)
        base = dict(data_dim=side * side, decoder_output="sigmoid", anchors_per_class=8,
                    num_operators=1, closest_anchor_only=True)
        base.update(hp_vals)
        hp = Hyperparameters.swiss_roll(**base)
    elif dataset == "circles":
        hp = Hyperparameters.concentric_circles(**hp_vals)
    else:
        hp = Hyperparameters.swiss_roll(**hp_vals)
    strategy = run.get("anchor_strategy", "per_sample_rotations" if dataset == "glyphs" else "even")
    return RunConfig(hp, dataset, strategy, run.get("seed", 0), run.get("data_seed"),
                     run.get("num_train"), run.get("glyph_side", 16), set(hp_vals) | set(run))


def read_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def build_dataset(cfg: RunConfig):
    """Training set and anchors for a run; deterministic in ``data_seed``."""
    rng = np.random.default_rng(cfg.seed if cfg.data_seed is None else cfg.data_seed)
    n = cfg.num_train or DEFAULT_TRAIN_SIZE[cfg.dataset]
    if cfg.dataset == "glyphs":
        ds, anchors = gen_rotated_glyphs(n, cfg.glyph_side, rng, cfg.hp.anchors_per_class)
        if cfg.anchor_strategy != "per_sample_rotations":
            anchors = select_anchors(ds, cfg.anchor_strategy, cfg.hp.anchors_per_class, rng)
        return ds, anchors
    gen = gen_swiss_roll if cfg.dataset == "swiss_roll" else gen_concentric_circles
    ds = gen(n, rng, data_dim=cfg.hp.data_dim)
    return ds, select_anchors(ds, cfg.anchor_strategy, cfg.hp.anchors_per_class, rng)


# --- helpers ----------------------------------------------------------------

def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (str, int, np.integer)) else _fmt(v) for v in row])


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


def _ckpt_dataset(ckpt: Path, data):
    path = Path(data) if data else ckpt.parent / "dataset.csv"
    if not path.exists():
        raise ConfigurationError(f"dataset file {path} not found (pass --data)")
    ds = load_dataset_csv(path)
    groups = path.with_name(path.stem + "_groups.csv")
    if groups.exists():
        ds.groups = read_table(groups)[1][:, 0].astype(np.int64)
    return ds


def _parse_row(text: str, ds: LabeledDataset | None, what: str) -> np.ndarray:
    """A comma-separated input vector, or an integer row index into the dataset."""
    if "," in text:
        try:
            return np.array([float(v) for v in text.split(",")])
        except ValueError:
            raise ConfigurationError(f"{what}: cannot parse vector {text!r}") from None
    try:
        k = int(text)
    except ValueError:
        raise ConfigurationError(f"{what}: expected a row index or comma-separated vector, got {text!r}") from None
    if ds is None or not 0 <= k < len(ds):
        raise ConfigurationError(f"{what}: row {k} out of range")
    return ds.inputs[k]


def _out_dir(args, ckpt_or_log) -> Path:
    out = Path(args.out) if args.out else Path(ckpt_or_log).parent
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands --------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = read_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, anchors = build_dataset(cfg)
    progress = None
    if args.verbose:
        def progress(step, row, model):
            if step % 100 == 0:
                print(f"step {step} {row.phase} objective {row.objective:.6g} lr_psi {row.lr_psi:.3g}",
                      file=sys.stderr)
    model, log = train(cfg.hp, ds.inputs, ds.anchor_keys, anchors, cfg.seed,
                       log_path=out / "log.csv", progress=progress)
    log.write_timing_csv(out / "timing.csv")
    save_checkpoint(model, cfg.hp, out / "model.ckpt")
    save_dataset_csv(ds, out / "dataset.csv")
    if ds.groups is not None:
        write_table(out / "dataset_groups.csv", ["group"], [[int(g)] for g in ds.groups])
    Z = model.encode(ds.inputs)
    param = ds.params if ds.params is not None else np.zeros(len(ds))
    write_table(out / "latents.csv", ["label", "param"] + [f"z{i + 1}" for i in range(Z.shape[1])],
                [[int(l), p, *z] for l, p, z in zip(ds.labels, param, Z)])
    if Z.shape[1] == 2:
        _latent_svg(out / "latents.csv", model.encode(model.anchors.points), ds.kind, out / "latents.svg")
    print(f"trained {len(log)} steps; wrote {out}/model.ckpt, log.csv, latents.csv")
    return EXIT_OK


def _latent_svg(csv_path, anchor_codes, kind, svg_path) -> None:
    _, tab = read_table(csv_path)
    labels, param, Z = tab[:, 0].astype(int), tab[:, 1], tab[:, 2:4]
    fig = Figure("latent codes")
    if kind == "swiss_roll":
        t = (param - param.min()) / max(np.ptp(param), 1e-12)
        fig.scatter(Z, [ramp_color(v) for v in t], label=None)
    else:
        for k in np.unique(labels):
            fig.scatter(Z[labels == k], CATEGORICAL[k % len(CATEGORICAL)], label=f"class {k}")
    fig.markers(anchor_codes, "#000000", label="anchors")
    fig.save(svg_path)


def cmd_sample(args) -> int:
    model, hp = load_checkpoint(args.ckpt)
    rng = np.random.default_rng(args.seed)
    out = _out_dir(args, args.ckpt)
    d = model.dictionary.latent_dim
    zcols = [f"z{i + 1}" for i in range(d)]
    xcols = [f"x{i + 1}" for i in range(model.decoder.output_dim)]
    if args.n < 1:
        raise ConfigurationError("--n must be >= 1")
    if args.mode == "posterior":
        ds = _ckpt_dataset(Path(args.ckpt), args.data)
        rows = rng.integers(0, len(ds), size=args.n)
        b = hp.laplace_scale if args.b_vis is None else args.b_vis
        g = hp.gamma_post if args.gamma_vis is None else args.gamma_vis
        Z, _, _ = sample_posterior(model, ds.inputs[rows], hp, rng, b=b, gamma=g)
        tags, tagname = rows, "row"
    else:
        label = args.cls if args.cls is not None else int(model.anchors.labels[0])
        Z, tags = prior_samples(model, label, args.n, 1.0 if args.b_vis is None else args.b_vis,
                                0.0 if args.gamma_vis is None else args.gamma_vis, rng, hp)
        tagname = "anchor"
    X = model.decode(Z)
    path = out / f"samples_{args.mode}.csv"
    write_table(path, [tagname] + zcols + xcols, [[int(t), *z, *x] for t, z, x in zip(tags, Z, X)])
    print(f"wrote {path}")
    return EXIT_OK


def cmd_orbit(args) -> int:
    model, hp = load_checkpoint(args.ckpt)
    out = _out_dir(args, args.ckpt)
    src = args.start
    if src.startswith("anchor:"):
        try:
            i = int(src.split(":", 1)[1])
            x0 = model.anchors.points[i]
        except (ValueError, IndexError):
            raise ConfigurationError(f"--from {src!r}: no such anchor") from None
    elif src.startswith("encode:"):
        ds = _ckpt_dataset(Path(args.ckpt), args.data) if "," not in src else None
        x0 = _parse_row(src.split(":", 1)[1], ds, "--from")
    else:
        raise ConfigurationError(f"--from must be anchor:<i> or encode:<row>, got {src!r}")
    if x0.shape[0] != model.encoder.input_dim:
        raise ConfigurationError(f"--from vector has {x0.shape[0]} entries, expected {model.encoder.input_dim}")
    if not 0 <= args.op < model.dictionary.num_operators:
        raise ConfigurationError(f"--op {args.op} outside [0, {model.dictionary.num_operators})")
    if args.steps < 0:
        raise ConfigurationError("--steps must be >= 0")
    s = hp.latent_scale
    pts = orbit(model.dictionary, args.op, s * model.encode(x0), args.steps, args.extent) / s
    _write_curve(out / "orbit.csv", pts, model)
    _curve_svg(out / "orbit.csv", out / "orbit.svg", "operator orbit", Path(args.ckpt).parent / "latents.csv")
    print(f"wrote {out}/orbit.csv")
    return EXIT_OK


def _write_curve(path, pts, model):
    X = model.decode(pts)
    write_table(path, ["t"] + [f"z{i + 1}" for i in range(pts.shape[1])]
                + [f"x{i + 1}" for i in range(X.shape[1])],
                [[k, *z, *x] for k, (z, x) in enumerate(zip(pts, X))])


def _curve_svg(csv_path, svg_path, title, background) -> None:
    _, tab = read_table(csv_path)
    if tab.shape[1] < 3:
        return
    fig = Figure(title)
    if Path(background).exists():
        _, bg = read_table(background)
        if bg.shape[1] >= 4:
            fig.scatter(bg[:, 2:4], "#999999", size=1.2)
    fig.line(tab[:, 1:3], "#d62728", label=title)
    fig.markers(tab[:1, 1:3], "#0000ff", label="start")
    fig.save(svg_path)


def cmd_path(args) -> int:
    model, hp = load_checkpoint(args.ckpt)
    out = _out_dir(args, args.ckpt)
    ds = None
    if "," not in args.start or "," not in args.to:
        ds = _ckpt_dataset(Path(args.ckpt), args.data)
    xa, xb = _parse_row(args.start, ds, "--from"), _parse_row(args.to, ds, "--to")
    if args.steps < 1:
        raise ConfigurationError("--steps must be >= 1")
    s = hp.latent_scale
    za, zb = s * model.encode(xa), s * model.encode(xb)
    settings = hp.inference_settings(hp.zeta_p)
    if args.restarts:
        settings = replace(settings, num_restarts=args.restarts)
    res = infer_coefficients_batch(model.dictionary, zb[None], za[None], settings,
                                   np.random.default_rng(args.seed))
    c = res.coefficients[0]
    pts = interpolate_path(model.dictionary, c, za, args.steps) / s
    _write_curve(out / "path.csv", pts, model)
    write_table(out / "path_coefficients.csv", [f"c{m + 1}" for m in range(c.size)], [list(c)])
    _curve_svg(out / "path.csv", out / "path.svg", "transport path", Path(args.ckpt).parent / "latents.csv")
    print("c* = " + " ".join(_fmt(v) for v in c))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, hp = load_checkpoint(args.ckpt)
    out = _out_dir(args, args.ckpt)
    ds = _ckpt_dataset(Path(args.ckpt), args.data)
    if args.points > len(ds):
        raise ConfigurationError(f"--points {args.points} exceeds dataset size {len(ds)}")
    ll = estimated_log_likelihood(model, ds.inputs, ds.anchor_keys, hp, args.points, args.samples,
                                  np.random.default_rng(args.seed))
    mse = reconstruction_mse(model, ds.inputs)
    rows = [("M", hp.num_operators), ("N_a", hp.anchors_per_class), ("num_points", args.points),
            ("num_samples", args.samples), ("log_likelihood", ll), ("mse", mse)]
    write_key_values(out / "eval.csv", rows)
    print(f"{'M':>3} {'N_a':>4} {'LL':>14} {'MSE':>12}")
    print(f"{hp.num_operators:>3} {hp.anchors_per_class:>4} {ll:>14.2f} {mse:>12.4g}")
    return EXIT_OK


def cmd_contour(args) -> int:
    model, hp = load_checkpoint(args.ckpt)
    out = _out_dir(args, args.ckpt)
    ds = None if "," in args.input else _ckpt_dataset(Path(args.ckpt), args.data)
    x = _parse_row(args.input, ds, "--input")
    if args.res < 2:
        raise ConfigurationError("--res must be >= 2")
    grid = GridSpec.around(model.encode(x), args.half_width, args.res)
    cg = posterior_contour(model, x, hp, grid, np.random.default_rng(args.seed))
    cg.write_csv(out / "contour.csv")
    print(f"wrote {out}/contour.csv")
    return EXIT_OK


def cmd_diag(args) -> int:
    log_path = Path(args.log)
    log = TrainingLog.read_csv(log_path, log_path.with_name("timing.csv"))
    dictionary = None
    ckpt = Path(args.ckpt) if args.ckpt else log_path.with_name("model.ckpt")
    if ckpt.exists():
        dictionary = load_checkpoint(ckpt)[0].dictionary
    summary = training_diagnostics(log, dictionary)
    out = _out_dir(args, log_path)
    write_key_values(out / "diag.csv", summary.as_rows())
    for k, v in summary.as_rows():
        print(f"{k}: {v}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vaells", description="Transport-operator VAE toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    def ckpt_cmd(name, func, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--ckpt", required=True)
        c.add_argument("--out", default=None, help="output directory (default: next to the checkpoint)")
        c.add_argument("--data", default=None, help="dataset CSV (default: dataset.csv next to the checkpoint)")
        c.add_argument("--seed", type=int, default=0)
        c.set_defaults(func=func)
        return c

    s = ckpt_cmd("sample", cmd_sample, "posterior or prior samples with decoded outputs")
    s.add_argument("--mode", choices=("posterior", "prior"), required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--b-vis", dest="b_vis", type=float, default=None)
    s.add_argument("--gamma-vis", dest="gamma_vis", type=float, default=None)
    s.add_argument("--class", dest="cls", type=int, default=None)

    o = ckpt_cmd("orbit", cmd_orbit, "orbit of one operator from a starting latent")
    o.add_argument("--op", type=int, required=True)
    o.add_argument("--steps", type=int, required=True)
    o.add_argument("--from", dest="start", required=True, help="anchor:<i> or encode:<row>")
    o.add_argument("--extent", type=float, default=10.0, help="flow time covered by the orbit")

    q = ckpt_cmd("path", cmd_path, "inferred transport path between two inputs")
    q.add_argument("--from", dest="start", required=True)
    q.add_argument("--to", required=True)
    q.add_argument("--steps", type=int, default=50)
    q.add_argument("--restarts", type=int, default=None)

    e = ckpt_cmd("eval", cmd_eval, "importance-weighted log-likelihood and reconstruction MSE")
    e.add_argument("--points", type=int, default=500)
    e.add_argument("--samples", type=int, default=100)

    c = ckpt_cmd("contour", cmd_contour, "posterior contour grid around an encoded input")
    c.add_argument("--input", required=True)
    c.add_argument("--res", type=int, default=40)
    c.add_argument("--half-width", dest="half_width", type=float, default=0.5)

    d = sub.add_parser("diag", help="training diagnostics from a log CSV")
    d.add_argument("--log", required=True)
    d.add_argument("--ckpt", default=None)
    d.add_argument("--out", default=None)
    d.set_defaults(func=cmd_diag)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigurationError, DimensionError, DomainError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFailure, NumericInputError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run_cli())
