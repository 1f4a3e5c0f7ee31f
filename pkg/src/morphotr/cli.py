"""Command-line pipeline: generate -> preprocess -> pretrain -> finetune -> correct -> evaluate -> report.

Each command writes its outputs plus one ``<primary output>.manifest.json`` recording the
command, config digest, seed, paths, timestamps and tool version.
Exit codes: 0 success, 1 configuration/validation error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import ConfigError, NumericError

log = logging.getLogger("morphotr")

SEED_ENV = "MORPHOTR_SEED"
METHODS = ("identity", "combat", "harmony", "sphering")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def resolve_seed(arg_seed, default: int = 0) -> int:
    if arg_seed is not None:
        return int(arg_seed)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return default


def _digest(path) -> str | None:
    if path is None:
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command: str, cfg: RunConfig, seed, inputs, outputs, started: float) -> None:
    manifest = {
        "command": command,
        "config_digest": cfg.digest or None,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "input_digests": {k: _digest(v) for k, v in inputs.items() if v is not None and Path(v).is_file()},
        "outputs": [str(p) for p in outputs],
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "version": __version__,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _manifest_path(primary) -> Path:
    primary = Path(primary)
    return primary.with_name(primary.stem + ".manifest.json")


# --------------------------------------------------------------------------- commands


def cmd_generate(args) -> list:
    from .dataio import generate_synthetic, save_csv

    cfg = load_config(args.config)
    synth = dataclasses.replace(cfg.synth, seed=resolve_seed(args.seed, cfg.synth.seed))
    ds, truth = generate_synthetic(synth)
    save_csv(ds, args.out)
    truth_path = Path(args.truth) if args.truth else Path(args.out).with_suffix(".truth.json")
    truth.to_json(truth_path)
    schema_path = Path(args.out).with_suffix(".schema.tsv")
    ds.schema.to_file(schema_path)
    log.info("generated %d profiles x %d features", *ds.X.shape)
    args._seed = synth.seed
    return [Path(args.out), truth_path, schema_path]


def _load(path, schema_path=None):
    from .dataio import load_csv
    from .schema import FeatureSchema

    schema = FeatureSchema.from_file(schema_path) if schema_path else None
    return load_csv(path, schema)


def cmd_preprocess(args) -> list:
    from .dataio import preprocess, save_csv

    ds = preprocess(_load(args.data, args.schema), clip=(args.clip_low, args.clip_high))
    save_csv(ds, args.out)
    schema_path = Path(args.out).with_suffix(".schema.tsv")
    ds.schema.to_file(schema_path)
    return [Path(args.out), schema_path]


def _stage_cfg(cfg: RunConfig, stage: int, seed: int, args):
    overrides = {"seed": seed}
    for key in ("epochs", "lr", "batch_size", "max_steps"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return dataclasses.replace(cfg.stages[stage], **overrides).validate()


def _train(model, ds, stage_cfg, out_dir: Path, source_override=None) -> list:
    from .encoder import save_checkpoint
    from .training import run_stage, write_trace

    res = run_stage(model, ds, stage_cfg, source_override=source_override)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / f"stage{stage_cfg.stage}.npz"
    trace = out_dir / f"stage{stage_cfg.stage}_loss.csv"
    save_checkpoint(res.model, ckpt, extra={"stage": stage_cfg.stage, "stage_config": dataclasses.asdict(stage_cfg)})
    write_trace(res.trace, trace)
    return [ckpt, trace]


def cmd_pretrain(args) -> list:
    from .encoder import CellPainTR

    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg.model.seed)
    ds = _load(args.data, args.schema)
    model = CellPainTR(ds.schema, sorted(set(ds.source)), dataclasses.replace(cfg.model, seed=seed))
    args._seed = seed
    return _train(model, ds, _stage_cfg(cfg, 1, seed, args), Path(args.out_dir))


def cmd_finetune(args) -> list:
    from .encoder import load_checkpoint

    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg.stages[args.stage].seed)
    model, _ = load_checkpoint(args.checkpoint)
    ds = _load(args.data, args.schema)
    if list(ds.schema.names) != list(model.schema.names):
        raise ConfigError("training data schema differs from the checkpoint schema")
    args._seed = seed
    return _train(model, ds, _stage_cfg(cfg, args.stage, seed, args), Path(args.out_dir))


def cmd_correct(args) -> list:
    from .dataio import Dataset, align_features, save_csv
    from .encoder import load_checkpoint
    from .schema import FeatureSchema

    model, _ = load_checkpoint(args.checkpoint)
    ds = _load(args.data, args.schema)
    if list(ds.schema.names) != list(model.schema.names):
        ds, rep = align_features(ds, model.schema)
        log.warning("feature alignment: %d of %d reference features matched (%.1f%%); %d input features dropped",
                    rep.matched, rep.n_reference, 100 * rep.overlap_fraction, len(rep.dropped))
    if args.source_id is not None:
        src = model.source_index([args.source_id] * len(ds))
    else:
        unknown = sorted(set(ds.source) - set(model.sources))
        if unknown:
            raise ConfigError(f"sources {unknown} are unknown to the checkpoint; pass --source-id "
                              f"with one of {list(model.sources)}")
        src = model.source_index(ds.source)
    emb = model.embed(ds.X, src, batch_size=args.batch_size)
    names = tuple(f"emb_{i:04d}" for i in range(emb.shape[1]))
    out = Dataset(emb, ds.meta.copy(), FeatureSchema(names, (0,) * len(names)))
    save_csv(out, args.out)
    return [Path(args.out)]


def baseline_embedding(method: str, ds, seed: int = 0) -> np.ndarray:
    from .baselines import combat_fit_transform, harmony_transform, sphering_transform

    if method == "identity":
        return ds.X.copy()
    if method == "combat":
        return combat_fit_transform(ds.X, ds.source)
    if method == "harmony":
        n_comp = min(20, ds.X.shape[0] - 1, ds.X.shape[1])
        return harmony_transform(ds.X, ds.source, n_components=n_comp, seed=seed)
    if method == "sphering":
        return sphering_transform(ds.X, ds.is_control)
    raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")


def cmd_evaluate(args) -> list:
    from .dataio import save_csv
    from .metrics import EmbeddingTable, evaluate_embedding, format_table, write_reports

    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg.evaluate.seed)
    args._seed = seed
    jobs = []
    if args.embeddings:
        names = args.names or [Path(p).stem for p in args.embeddings]
        if len(names) != len(args.embeddings):
            raise ConfigError("--names must match --embeddings one-to-one")
        for name, path in zip(names, args.embeddings):
            jobs.append((name, _load(path)))
    if args.method:
        if args.data is None:
            raise ConfigError("--method needs --data")
        base = _load(args.data, args.schema)
        for m in args.method:
            jobs.append((m, base if m == "identity" else _as_dataset(base, baseline_embedding(m, base, seed))))
    if not jobs:
        raise ConfigError("nothing to evaluate: give --embeddings and/or --method")
    if len({n for n, _ in jobs}) != len(jobs):
        raise ConfigError("duplicate method names")
    outputs = [Path(args.out)]
    reports = []
    for name, ds in jobs:
        reports.append(evaluate_embedding(EmbeddingTable.from_dataset(ds), name, cfg.evaluate.k,
                                          cfg.evaluate.resolution, seed))
        if args.emit_embeddings:
            d = Path(args.emit_embeddings)
            d.mkdir(parents=True, exist_ok=True)
            save_csv(ds, d / f"{name}.csv")
            outputs.append(d / f"{name}.csv")
    write_reports(reports, args.out)
    print(format_table(reports))
    return outputs


def _as_dataset(base, X):
    from .dataio import Dataset
    from .schema import FeatureSchema

    names = tuple(f"emb_{i:04d}" for i in range(X.shape[1]))
    return Dataset(X, base.meta.copy(), FeatureSchema(names, (0,) * len(names)))


def cmd_report(args) -> list:
    from .metrics import format_table, read_reports, write_reports
    from .plotting import plot_aggregates, plot_projection, project_2d

    reports = []
    for path in args.reports:
        reports.extend(read_reports(path))
    names = [r.method for r in reports]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise ConfigError(f"conflicting method names across reports: {dup}")
    reports.sort(key=lambda r: (-r.overall, r.method))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "comparison.csv", out / "comparison.txt", out / "aggregates.png"]
    write_reports(reports, outputs[0])
    table = format_table(reports)
    outputs[1].write_text(table + "\n")
    plot_aggregates(reports, outputs[2])
    print(table)
    for spec in args.embedding or []:
        if "=" not in spec:
            raise ConfigError(f"--embedding expects METHOD=PATH, got {spec!r}")
        method, path = spec.split("=", 1)
        ds = _load(path)
        P = project_2d(ds.X)
        proj = out / f"projection_{method}.csv"
        with open(proj, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "pc1", "pc2", "batch", "bio_label"])
            for i in range(len(ds)):
                w.writerow([f"{ds.meta['plate'][i]}:{ds.meta['well'][i]}", f"{P[i, 0]:.10g}", f"{P[i, 1]:.10g}",
                            ds.source[i], ds.moa[i]])
        fig = out / f"projection_{method}.png"
        plot_projection(P, ds.source, ds.moa, method, fig)
        outputs += [proj, fig]
    return outputs


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="morphotr", description="Batch correction of morphological profiles.")
    p.add_argument("--version", action="version", version=f"morphotr {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, config=True, seed=True):
        if config:
            sp.add_argument("--config", help="INI config file")
        if seed:
            sp.add_argument("--seed", type=int, help=f"global seed (falls back to ${SEED_ENV})")

    g = sub.add_parser("generate", help="synthetic dataset with planted batch effects")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--truth", help="ground-truth JSON (default: <out>.truth.json)")

    pp = sub.add_parser("preprocess", help="impute, per-plate MAD normalize, clip")
    common(pp, config=False, seed=False)
    pp.add_argument("--data", required=True)
    pp.add_argument("--schema")
    pp.add_argument("--out", required=True)
    pp.add_argument("--clip-low", type=float, default=0.01)
    pp.add_argument("--clip-high", type=float, default=0.99)

    for name, helptext in (("pretrain", "stage 1: masked reconstruction"),
                           ("finetune", "stage 2 or 3: contrastive fine-tuning")):
        t = sub.add_parser(name, help=helptext)
        common(t)
        t.add_argument("--data", required=True)
        t.add_argument("--schema")
        t.add_argument("--out-dir", required=True)
        t.add_argument("--epochs", type=int)
        t.add_argument("--lr", type=float)
        t.add_argument("--batch-size", type=int)
        t.add_argument("--max-steps", type=int)
        if name == "finetune":
            t.add_argument("--checkpoint", required=True)
            t.add_argument("--stage", type=int, choices=(2, 3), required=True)

    c = sub.add_parser("correct", help="embed profiles with a checkpoint")
    c.add_argument("--data", required=True)
    c.add_argument("--schema")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--source-id", help="proxy source token for profiles from unseen sources")
    c.add_argument("--batch-size", type=int, default=256)

    e = sub.add_parser("evaluate", help="score embeddings and/or inline baselines")
    common(e)
    e.add_argument("--embeddings", nargs="+", help="embedding CSV files")
    e.add_argument("--names", nargs="+", help="method name per embedding file")
    e.add_argument("--data", help="preprocessed dataset for --method")
    e.add_argument("--schema")
    e.add_argument("--method", nargs="+", choices=METHODS)
    e.add_argument("--emit-embeddings", help="directory for the evaluated embeddings")
    e.add_argument("--out", required=True)

    r = sub.add_parser("report", help="merge metric reports, export projections and figures")
    r.add_argument("--reports", nargs="+", required=True)
    r.add_argument("--embedding", action="append", help="METHOD=PATH; repeat for several methods")
    r.add_argument("--out-dir", required=True)
    return p


COMMANDS = {
    "generate": cmd_generate, "preprocess": cmd_preprocess, "pretrain": cmd_pretrain,
    "finetune": cmd_finetune, "correct": cmd_correct, "evaluate": cmd_evaluate, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    started = time.time()
    try:
        outputs = COMMANDS[args.command](args)
        inputs = {k: getattr(args, k, None) for k in ("config", "data", "schema", "checkpoint")}
        write_manifest(_manifest_path(outputs[0]), args.command, load_config(getattr(args, "config", None)),
                       getattr(args, "_seed", None), inputs, outputs, started)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
