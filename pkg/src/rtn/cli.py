"""Command-line entry point: ``rtn <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ABLATION_LADDER, VARIANTS, ConfigError, TrainConfig, dump_config, load_config
from .data import (DataFormatError, ShiftSpec, export_dataset, generate, load_manifest,
                   oracle_source_accuracy)
from .harness import (MetricsReport, NumericalError, ablate, classifier_shift_report,
                      gradcheck, layer_response_report, tiny_config, train)
from .network import forward, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("rtn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_spec_args(p):
    p.add_argument("--family", default="conditional_boundary",
                   choices=["conditional_boundary", "covariate_rotation"])
    p.add_argument("--severity", type=float, default=ShiftSpec.severity)
    p.add_argument("--n-s", type=int, default=ShiftSpec.n_s)
    p.add_argument("--n-t", type=int, default=ShiftSpec.n_t)
    p.add_argument("--noise", type=float, default=ShiftSpec.noise)
    p.add_argument("--classes", type=int, default=ShiftSpec.c)
    p.add_argument("--dim", type=int, default=ShiftSpec.d)
    p.add_argument("--data-seed", type=int, default=0)


def _spec_from(args) -> ShiftSpec:
    return ShiftSpec(family=args.family, severity=args.severity, n_s=args.n_s, n_t=args.n_t,
                     noise=args.noise, seed=args.data_seed, c=args.classes, d=args.dim)


def _add_train_args(p):
    p.add_argument("--config", help="key = value file mirroring TrainConfig")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--steps", type=int, help="override total_steps")


def _config_from(args, **defaults) -> TrainConfig:
    cfg = TrainConfig(**defaults)
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    changes = {k: v for k, v in (("seed", args.seed), ("variant", getattr(args, "variant", None)),
                                 ("lam", args.lam), ("gamma", args.gamma),
                                 ("total_steps", args.steps)) if v is not None}
    return cfg.replace(**changes)


def _dataset(args):
    if args.data:
        return load_manifest(args.data)
    return generate(_spec_from(args))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_curves(report: MetricsReport, path):
    evals = dict(zip(report.eval_steps, report.target_acc))
    n = len(report.loss_ce)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "source_ce", "mmd", "entropy", "target_acc"])
        for step in range(max(n, max(report.eval_steps) + 1)):
            row = [step]
            row += ([repr(report.loss_ce[step]), repr(report.loss_mmd[step]),
                     repr(report.loss_entropy[step])] if step < n else ["", "", ""])
            row.append(repr(evals[step]) if step in evals else "")
            if step < n or step in evals:
                w.writerow(row)


def write_predictions(net, target_x, path):
    out = forward(net, target_x)
    pred = np.argmax(out.f_t, axis=1)
    emb = out.fcb_feats[:, :2] if out.fcb_feats.shape[1] >= 2 else np.hstack(
        [out.fcb_feats, np.zeros((len(pred), 1))])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "predicted", "embed_x", "embed_y"])
        for i, (p, e) in enumerate(zip(pred, emb)):
            w.writerow([i, int(p), repr(float(e[0])), repr(float(e[1]))])


def cmd_gen_data(args):
    spec = _spec_from(args)
    ds = generate(spec)
    path = export_dataset(ds, _out(args))
    src_acc, tgt_acc = oracle_source_accuracy(ds, spec)
    print(f"wrote {path} (n_s={len(ds.source_x)}, n_t={len(ds.target_x)}, d={ds.d}, c={ds.c}); "
          f"true source rule: {100 * src_acc:.1f}% source, {100 * tgt_acc:.1f}% target")
    return EXIT_OK


def cmd_train(args):
    ds = _dataset(args)
    cfg = _config_from(args)
    net, report = train(ds, cfg)
    out = _out(args)
    (out / "report.json").write_text(report.to_json())
    (out / "timing.json").write_text(json.dumps({"wall_clock_s": report.wall_clock}) + "\n")
    (out / "config.txt").write_text(dump_config(cfg))
    write_curves(report, out / "curves.csv")
    write_predictions(net, ds.target_x, out / "predictions.csv")
    save_checkpoint(net, out / "model.json")
    print(f"{cfg.variant} seed {cfg.seed}: target accuracy {100 * report.final_target_acc:.2f}% "
          f"(source {100 * report.source_acc[-1]:.2f}%) -> {out}")
    return EXIT_OK


def cmd_ablate(args):
    ds = _dataset(args)
    cfg = _config_from(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = args.variants.split(",")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    table = ablate(ds, cfg, seeds, variants, workers=args.workers)
    out = _out(args)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "accuracy"])
        for v, s, acc in table.rows():
            w.writerow([v, s, repr(acc)])
    md = table.to_markdown()
    (out / "ablation.md").write_text(md)
    print(md, end="")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = tiny_config(seed=args.seed or 0)
    if args.config:
        cfg = load_config(args.config, cfg)
    result = gradcheck(cfg, tol=args.tol)
    for line in result.lines():
        print(line)
    print(f"max relative error {result.max_error:.3e} (tolerance {result.tol:g}): "
          f"{'PASS' if result.passed else 'FAIL'}")
    return EXIT_OK if result.passed else EXIT_NUMERIC


def render_report(path) -> str:
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        variants = list(dict.fromkeys(r["variant"] for r in rows))
        lines = ["| variant | runs | mean acc | std |", "|---|---|---|---|"]
        for v in variants:
            accs = np.array([float(r["accuracy"]) for r in rows if r["variant"] == v])
            lines.append(f"| {v} | {len(accs)} | {100 * accs.mean():.2f} | {100 * accs.std():.2f} |")
        return "\n".join(lines) + "\n"
    report = MetricsReport.from_json(path.read_text())
    cfg = report.config
    lines = [f"# {cfg.get('variant')} (seed {report.seed})", "",
             "| step | target acc | source acc |", "|---|---|---|"]
    for s, t, a in zip(report.eval_steps, report.target_acc, report.source_acc):
        lines.append(f"| {s} | {100 * t:.2f} | {100 * a:.2f} |")
    lines += ["", "| head | mean abs | std abs |", "|---|---|---|"]
    for head, st in report.layer_responses.items():
        lines.append(f"| {head} | {st['mean']:.4f} | {st['std']:.4f} |")
    lines += ["", "confusion (rows = true class):", ""]
    lines += ["    " + " ".join(f"{v:5d}" for v in row) for row in report.confusion]
    return "\n".join(lines) + "\n"


def cmd_report(args):
    print(render_report(args.path), end="")
    return EXIT_OK


def cmd_diag_layers(args):
    if args.model:
        net = load_checkpoint(args.model)
        ds = _dataset(args)
    else:
        ds = _dataset(args)
        net, _ = train(ds, _config_from(args, variant="mmd_ent_res"))
    stats = layer_response_report(net, ds.target_x)
    for head, st in stats.items():
        print(f"|{head}|  mean {st['mean']:.4f}  std {st['std']:.4f}")
    ratio = stats["delta_f"]["mean"] / stats["f_T"]["mean"]
    print(f"mean|delta_f| / mean|f_T| = {ratio:.4f}")
    if args.out:
        (_out(args) / "layers.json").write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_diag_shift(args):
    cfg = _config_from(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    severities = [float(s) for s in args.severities.split(",")]
    results = {}
    for sev in severities:
        for seed in seeds:
            spec = ShiftSpec(family="conditional_boundary", severity=sev, n_s=args.n_s,
                             n_t=args.n_t, noise=args.noise, seed=seed, c=args.classes, d=args.dim)
            r = classifier_shift_report(generate(spec), cfg.replace(seed=seed))
            results[(sev, seed)] = r
            print(f"severity {sev:.3f} seed {seed}: |W_s - W_t|_F = {r['frobenius_diff']:.4f} "
                  f"(bootstrap null {r['baseline_frobenius_diff']:.4f}); "
                  f"class cosines {np.round(r['cosine_per_class'], 3).tolist()}")
    medians = {sev: float(np.median([results[(sev, s)]["frobenius_diff"] for s in seeds]))
               for sev in severities}
    for sev, m in medians.items():
        print(f"severity {sev:.3f}: median divergence {m:.4f}")
    if args.out:
        doc = {"medians": {repr(k): v for k, v in medians.items()},
               "runs": [{"severity": k[0], "seed": k[1], **v} for k, v in results.items()]}
        (_out(args) / "shift.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rtn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic shift benchmark as CSV + manifest")
    _add_spec_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    for name, func, help_ in (("train", cmd_train, "train one variant"),
                              ("ablate", cmd_ablate, "run the variant ladder over seeds"),
                              ("diag-layers", cmd_diag_layers, "layer-response statistics")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data", help="dataset manifest; default: generate from the generator flags")
        _add_spec_args(p)
        _add_train_args(p)
        p.add_argument("--out", required=name != "diag-layers")
        p.set_defaults(func=func)
        if name == "ablate":
            p.add_argument("--seeds", default="0,1,2")
            p.add_argument("--variants", default=",".join(ABLATION_LADDER + ("multi_mmd",)))
            p.add_argument("--workers", type=int, default=1)
        if name == "diag-layers":
            p.add_argument("--model", help="checkpoint to inspect instead of training")

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render report.json or ablation.csv as markdown")
    p.add_argument("path")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("diag-shift", help="source vs target classifier divergence")
    _add_spec_args(p)
    _add_train_args(p)
    p.add_argument("--severities", default="0.0,0.6")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out")
    p.set_defaults(func=cmd_diag_shift)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DataFormatError as exc:
        print(f"rtn: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"rtn: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"rtn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"rtn: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
