"""Command-line pipeline: ``spackle <subcommand> [options]``.

Every option may also come from a JSON config file (``--config``); values
given on the command line win over the file, which wins over built-in
defaults. The resolved configuration is written to ``config.json`` in the
output directory, and feeding that file back reproduces the run.

Exit codes: 0 success, 1 runtime failure, 2 usage error (including an
unknown subcommand), 3 validation failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import math
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import model as mdl
from . import training as tr
from .dataset_io import DatasetError, generate_synthetic, load_dataset, observed_from_counts, save_dataset
from .hexgrid import UnknownSpotError, build_indices, hex_neighbors
from .preprocess import (DEFAULT_MAX_RADIUS, DegenerateStatisticError, load_provenance, median_complete,
                         normalize, rank_genes, save_provenance, select_genes, write_moran_tsv)

log = logging.getLogger("spackle")

EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION = 1, 2, 3
PROVENANCE_FILE = "provenance.tsv"
CHECKPOINT_FILE = "checkpoint.ckpt"


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# option tables: name -> (type, default, help). Names double as config keys.
# --------------------------------------------------------------------------

COMMON = {
    "seed": (int, 0, "global seed"),
    "threads": (int, None, "BLAS/kernel threads (default: all cores)"),
    "out": (str, None, "output directory"),
}
DATA = {"data": (str, None, "input dataset directory")}
CKPT = {"checkpoint": (str, None, "checkpoint file")}
MODEL = {
    "d_k": (int, 128, "model width"),
    "layers": (int, 2, "encoder layers"),
    "heads": (int, 4, "attention heads"),
    "ffn_dim": (int, None, "feed-forward width (default 4*d_k)"),
    "ring_embedding": (bool, False, "add a learned per-ring token embedding"),
    "dtype": (str, "float32", "float32 or float64"),
}
TRAIN = {
    "batch_size": (int, 256, "blocks per step"),
    "iterations": (int, 10_000, "optimizer steps"),
    "lr": (float, 1e-3, "Adam learning rate"),
    "rho": (float, 0.30, "training mask rate"),
    "val_every": (int, 100, "steps between validations"),
    "standardize": (bool, True, "z-score genes with training statistics before masking"),
    "max_radius": (int, DEFAULT_MAX_RADIUS, "median-completion radius used for validation corruption"),
}

COMMANDS = {
    "synth": dict(
        help="generate a synthetic hex-lattice dataset",
        options={
            **COMMON,
            "slides": (int, 2, "number of slides"),
            "rows": (int, 30, "lattice rows per slide"),
            "cols": (int, 30, "lattice columns per slide"),
            "genes": (int, 32, "number of genes"),
            "dropout": (float, 0.3, "per-entry dropout probability"),
            "smoothness": (float, 6.0, "field wavelength scale, in spot pitches"),
        },
        required=("out",),
    ),
    "validate": dict(help="check a dataset directory", options={**COMMON, **DATA}, required=("data",)),
    "normalize": dict(
        help="log1p TPM normalization",
        options={
            **COMMON, **DATA,
            "zeros_are_missing": (bool, False, "treat zero counts as unobserved before normalizing"),
            "drop_empty_spots": (bool, False, "drop spots with zero library size instead of failing"),
        },
        required=("data", "out"),
    ),
    "select-genes": dict(
        help="keep the top-k genes by Moran's I",
        options={**COMMON, **DATA, "k": (int, 32, "genes to keep")},
        required=("data", "out"),
    ),
    "median-complete": dict(
        help="adaptive median pre-completion",
        options={**COMMON, **DATA, "max_radius": (int, DEFAULT_MAX_RADIUS, "largest hop radius tried")},
        required=("data", "out"),
    ),
    "train": dict(help="train the completion model", options={**COMMON, **DATA, **MODEL, **TRAIN},
                  required=("data",), run_dir=True),
    "lr-search": dict(
        help="short runs over a learning-rate grid",
        options={**COMMON, **DATA, **MODEL, **TRAIN,
                 "grid": (str, "1e-2,1e-3,1e-4,1e-5", "comma-separated learning rates"),
                 "budget": (int, 1000, "iterations per grid point")},
        required=("data",), run_dir=True,
    ),
    "complete": dict(help="fill every originally missing entry with model output",
                     options={**COMMON, **DATA, **CKPT}, required=("data", "checkpoint", "out")),
    "evaluate": dict(
        help="score model and median completion on synthetically hidden entries",
        options={**COMMON, **DATA, **CKPT, "rho": (float, 0.3, "fraction of observed entries hidden"),
                 "split": (str, "val", "split to corrupt"),
                 "max_radius": (int, DEFAULT_MAX_RADIUS, "median radius for re-completion")},
        required=("data", "checkpoint"), run_dir=True,
    ),
    "sweep": dict(
        help="evaluate over a range of corruption rates",
        options={**COMMON, **DATA, **CKPT,
                 "rhos": (str, "0.1,0.2,0.3,0.4,0.5,0.6,0.7", "comma-separated corruption rates"),
                 "split": (str, "val", "split to corrupt"),
                 "max_radius": (int, DEFAULT_MAX_RADIUS, "median radius for re-completion"),
                 "svg": (bool, False, "also write sweep.svg")},
        required=("data", "checkpoint"), run_dir=True,
    ),
    "neighbors": dict(
        help="dump the canonical neighbor list of one spot",
        options={**COMMON, **DATA, "spot": (str, None, "spot id or ordinal"),
                 "hops": (int, 2, "1 or 2")},
        required=("data", "spot"),
    ),
}


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spackle", description="Spatial transcriptomics completion pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", required=True)
    for name, spec in COMMANDS.items():
        p = sub.add_parser(name, help=spec["help"], description=spec["help"],
                           argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of option values (command line wins)")
        for key, (typ, default, help_) in spec["options"].items():
            shown = f"{help_} (default: {default})" if default is not None else help_
            if typ is bool:
                p.add_argument(_flag(key), dest=key, action=argparse.BooleanOptionalAction, help=shown)
            else:
                p.add_argument(_flag(key), dest=key, type=typ, help=shown)
    return parser


def resolve_config(command: str, cli_values: dict) -> dict:
    """Merge built-in defaults, the optional config file and command-line values."""
    spec = COMMANDS[command]
    resolved = {key: default for key, (_, default, _) in spec["options"].items()}
    cfg_path = cli_values.pop("config", None)
    if cfg_path:
        try:
            file_values = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {cfg_path}: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError(f"config file {cfg_path} must hold a JSON object")
        file_values.pop("command", None)
        unknown = sorted(set(file_values) - set(resolved))
        if unknown:
            raise ConfigError(f"unknown keys for '{command}' in {cfg_path}: {', '.join(unknown)}")
        for key, value in file_values.items():
            resolved[key] = _coerce(key, spec["options"][key][0], value)
    resolved.update(cli_values)
    missing = [k for k in spec.get("required", ()) if resolved.get(k) is None]
    if missing and not (spec.get("run_dir") and missing == ["out"]):
        raise ConfigError(f"'{command}' needs {', '.join(_flag(m) for m in missing)}")
    if spec.get("run_dir") and resolved.get("out") is None:
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        resolved["out"] = str(Path("runs") / f"{stamp}_seed{resolved['seed']}")
    return resolved


def _coerce(key, typ, value):
    if value is None:
        return None
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be true or false")
        return value
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} must be {typ.__name__}, got {value!r}") from None


def echo_config(command: str, cfg: dict) -> None:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **cfg}
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _floats(text: str, what: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"could not parse {what} {text!r}") from None
    if not values:
        raise ConfigError(f"{what} is empty")
    return values


# --------------------------------------------------------------------------
# helpers shared by subcommands
# --------------------------------------------------------------------------


def _load_completed(path):
    ds = load_dataset(path)
    prov_path = Path(path) / PROVENANCE_FILE
    if ds.completion is None or not prov_path.exists():
        raise DatasetError(f"{path} is not median-completed; run 'spackle median-complete' first")
    return ds, load_provenance(prov_path, ds)


def _model_config(cfg, g) -> mdl.ModelConfig:
    return mdl.ModelConfig(g=g, d_k=cfg["d_k"], num_layers=cfg["layers"], num_heads=cfg["heads"],
                           ffn_dim=cfg["ffn_dim"], ring_embedding=cfg["ring_embedding"], dtype=cfg["dtype"])


def _train_config(cfg) -> tr.TrainConfig:
    return tr.TrainConfig(batch_size=cfg["batch_size"], max_iterations=cfg["iterations"], learning_rate=cfg["lr"],
                          rho=cfg["rho"], val_every=cfg["val_every"], seed=cfg["seed"],
                          max_radius_hops=cfg["max_radius"], standardize=cfg["standardize"])


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_metrics_tsv(history, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iteration\ttrain_mse\tval_mse\n")
        for it, train_mse, val_mse in history:
            fh.write(f"{it}\t{_fmt(train_mse)}\t{_fmt(val_mse)}\n")


def write_sweep_svg(pairs, path, width=480, height=320, pad=48) -> None:
    """Minimal line chart of MSE against corruption rate for both methods."""
    rhos = [p[0].rho for p in pairs]
    series = {"spackle": [p[0].mse for p in pairs], "median": [p[1].mse for p in pairs]}
    lo_x, hi_x = min(rhos), max(rhos)
    hi_y = max(max(v) for v in series.values()) * 1.05 or 1.0

    def xy(r, m):
        x = pad + (r - lo_x) / ((hi_x - lo_x) or 1.0) * (width - 2 * pad)
        y = height - pad - m / hi_y * (height - 2 * pad)
        return f"{x:.1f},{y:.1f}"

    colors = {"spackle": "#1f77b4", "median": "#d62728"}
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-size="12">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">masked fraction</text>',
             f'<text x="12" y="{height / 2}" transform="rotate(-90 12 {height / 2})" text-anchor="middle">MSE</text>']
    for i, (name, ys) in enumerate(series.items()):
        pts = " ".join(xy(r, m) for r, m in zip(rhos, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{colors[name]}" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad - 70}" y="{pad + 16 * i}" fill="{colors[name]}">{name}</text>')
    for r in rhos:
        parts.append(f'<text x="{xy(r, 0).split(",")[0]}" y="{height - pad + 16}" text-anchor="middle">{r:g}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def _write_summary(out: Path, title: str, lines: list[str]) -> None:
    (out / "summary.md").write_text(f"# {title}\n\n" + "\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth(cfg):
    ds = generate_synthetic(cfg["slides"], cfg["rows"], cfg["cols"], cfg["genes"], cfg["dropout"],
                            cfg["smoothness"], cfg["seed"])
    save_dataset(ds, cfg["out"])
    print(f"wrote {ds.num_spots} spots x {ds.g} genes to {cfg['out']}")


def cmd_validate(cfg):
    ds = load_dataset(cfg["data"])
    prov_path = Path(cfg["data"]) / PROVENANCE_FILE
    if prov_path.exists():
        load_provenance(prov_path, ds)
    missing = int((~ds.observed).sum())
    print(f"ok: {ds.num_spots} spots, {ds.g} genes, {len(ds.slide_ids)} slides, "
          f"{missing} unobserved entries ({missing / ds.observed.size:.1%})")


def cmd_normalize(cfg):
    ds = load_dataset(cfg["data"])
    if cfg["zeros_are_missing"]:
        ds = observed_from_counts(ds)
    out = normalize(ds, drop_empty_spots=cfg["drop_empty_spots"])
    save_dataset(out, cfg["out"])
    print(f"normalized {out.num_spots} spots -> {cfg['out']}")


def cmd_select_genes(cfg):
    ds = load_dataset(cfg["data"])
    scores = rank_genes(ds)
    out = select_genes(ds, cfg["k"], scores=scores)
    save_dataset(out, cfg["out"])
    write_moran_tsv(scores, Path(cfg["out"]) / "moran.tsv")
    print(f"kept {out.g} of {ds.g} genes -> {cfg['out']}")


def cmd_median_complete(cfg):
    ds = load_dataset(cfg["data"])
    out, prov = median_complete(ds, cfg["max_radius"])
    save_dataset(out, cfg["out"])
    save_provenance(prov, out, Path(cfg["out"]) / PROVENANCE_FILE)
    counts = prov.counts()
    print("completed: " + ", ".join(f"{k}={v}" for k, v in counts.items() if k != "model"))


def cmd_train(cfg):
    ds, prov = _load_completed(cfg["data"])
    out = Path(cfg["out"])

    def progress(it, train_mse, val, best):
        log.info("iter %d train %.5f val %.5f best %.5f", it, train_mse, val, best)

    ckpt = tr.train(ds, prov, _model_config(cfg, ds.g), _train_config(cfg), progress=progress)
    mdl.save_checkpoint(ckpt, out / CHECKPOINT_FILE)
    write_metrics_tsv(ckpt.extra["history"], out / "metrics.tsv")
    _write_summary(out, "Training run", [
        f"- dataset: `{cfg['data']}` ({ds.num_spots} spots, {ds.g} genes)",
        f"- parameters: {mdl.count_parameters(ckpt.params)}",
        f"- iterations: {cfg['iterations']} (batch {cfg['batch_size']}, lr {cfg['lr']:g}, rho {cfg['rho']:g})",
        f"- best validation MSE: {ckpt.best_val_mse:.6g} at iteration {ckpt.iteration}",
        f"- checkpoint: `{CHECKPOINT_FILE}`; curve: `metrics.tsv`",
    ])
    print(f"best val MSE {ckpt.best_val_mse:.6g} at iteration {ckpt.iteration}; run dir {out}")


def cmd_lr_search(cfg):
    ds, prov = _load_completed(cfg["data"])
    out = Path(cfg["out"])
    grid = _floats(cfg["grid"], "learning-rate grid")
    best, rows = tr.lr_search(ds, prov, _model_config(cfg, ds.g), _train_config(cfg), grid, budget=cfg["budget"])
    with open(out / "lr_search.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("learning_rate\tval_mse\tdiverged\n")
        for r in rows:
            fh.write(f"{r.learning_rate!r}\t{_fmt(r.val_mse) if r.val_mse != math.inf else 'inf'}\t{int(r.diverged)}\n")
    _write_summary(out, "Learning-rate search", [f"- grid: {grid}", f"- budget: {cfg['budget']} iterations",
                                                 f"- selected: {best:g}"])
    print(f"best learning rate {best:g}")


def _load_checkpoint_for(cfg, ds):
    return mdl.load_checkpoint(cfg["checkpoint"], expect_g=ds.g)


def cmd_complete(cfg):
    ds, prov = _load_completed(cfg["data"])
    ckpt = _load_checkpoint_for(cfg, ds)
    out, new_prov = tr.complete_dataset(ckpt, ds, prov)
    save_dataset(out, cfg["out"])
    save_provenance(new_prov, out, Path(cfg["out"]) / PROVENANCE_FILE)
    print(f"model-completed {int((~prov.real).sum())} entries -> {cfg['out']}")


def cmd_evaluate(cfg):
    ds, prov = _load_completed(cfg["data"])
    ckpt = _load_checkpoint_for(cfg, ds)
    pairs = tr.corruption_sweep(ckpt, ds, prov, [cfg["rho"]], cfg["seed"], split=cfg["split"],
                                max_radius_hops=cfg["max_radius"])
    out = Path(cfg["out"])
    tr.write_sweep_tsv(pairs, out / "evaluation.tsv")
    for r in pairs[0]:
        print(f"{r.method}\trho={r.rho:g}\tmse={r.mse:.6g}\tpcc={r.pcc:.4f}\tn={r.num_evaluated_entries}")


def cmd_sweep(cfg):
    ds, prov = _load_completed(cfg["data"])
    ckpt = _load_checkpoint_for(cfg, ds)
    rhos = _floats(cfg["rhos"], "rho list")
    pairs = tr.corruption_sweep(ckpt, ds, prov, rhos, cfg["seed"], split=cfg["split"],
                                max_radius_hops=cfg["max_radius"])
    out = Path(cfg["out"])
    tr.write_sweep_tsv(pairs, out / "sweep.tsv")
    if cfg["svg"]:
        write_sweep_svg(pairs, out / "sweep.svg")
    rows = ["| rho | SpaCKLE MSE | median MSE | median/SpaCKLE |", "|---|---|---|---|"]
    rows += [f"| {s.rho:g} | {s.mse:.5g} | {m.mse:.5g} | {m.mse / s.mse:.3f} |" for s, m in pairs]
    _write_summary(out, "Corruption sweep", [f"- checkpoint: `{cfg['checkpoint']}`", f"- split: {cfg['split']}", ""] + rows)
    for s, m in pairs:
        print(f"rho={s.rho:g}\tspackle={s.mse:.6g}\tmedian={m.mse:.6g}")


def cmd_neighbors(cfg):
    ds = load_dataset(cfg["data"])
    key = cfg["spot"]
    ids = {s.spot_id: i for i, s in enumerate(ds.spots)}
    if key in ids:
        ordinal = ids[key]
    elif key.isdigit() and int(key) < ds.num_spots:
        ordinal = int(key)
    else:
        raise DatasetError(f"unknown spot {key!r}")
    spot = ds.spots[ordinal]
    index = build_indices(ds)[spot.slide_id]
    print("slot\tspot_id\tarray_row\tarray_col")
    for slot, j in enumerate(hex_neighbors(index, spot.array_row, spot.array_col, cfg["hops"]), start=1):
        s = ds.spots[j]
        print(f"{slot}\t{s.spot_id}\t{s.array_row}\t{s.array_col}")


HANDLERS = {
    "synth": cmd_synth, "validate": cmd_validate, "normalize": cmd_normalize,
    "select-genes": cmd_select_genes, "median-complete": cmd_median_complete, "train": cmd_train,
    "lr-search": cmd_lr_search, "complete": cmd_complete, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
    "neighbors": cmd_neighbors,
}

VALIDATION_ERRORS = (DatasetError, ConfigError, mdl.ModelError, UnknownSpotError, DegenerateStatisticError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    values = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose")}
    try:
        cfg = resolve_config(ns.command, values)
        if cfg.get("out") is not None and ns.command not in ("validate", "neighbors"):
            echo_config(ns.command, cfg)
        threads = cfg["threads"] or os.cpu_count() or 1
        with threadpool_limits(limits=threads):
            HANDLERS[ns.command](cfg)
    except VALIDATION_ERRORS as exc:
        print(f"spackle: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (tr.TrainingError, FloatingPointError, OSError, ValueError) as exc:
        print(f"spackle: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
