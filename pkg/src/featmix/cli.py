"""``featmix`` command-line entry point.

Exit codes: 0 success, 1 usage or argument error, 2 failed gate (or an
incomplete sweep), 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from . import bench as benchmod
from .config import COMMAND_SECTIONS, RunConfig, fields_for, format_value, parse_value
from .core import ModalitySet, RandomSource
from .datagen import generate, load_dataset, save_dataset, save_dataset_csv
from .experiment import evaluate, mean_metrics, run_grid, train_and_eval
from .model import load_model, save_model, train
from .synth import MixingConfig
from .theory import TwoModalGaussian, verify_theorem1, verify_theorem2

EXIT_OK, EXIT_USAGE, EXIT_GATE, EXIT_IO = 0, 1, 2, 3

HELP = {
    "gen": "generate a synthetic train/test dataset",
    "train": "train a two-stream network",
    "eval": "score a dataset with a trained model",
    "verify": "Monte-Carlo checks of the low-likelihood and bounded-deviation properties",
    "sweep-n": "train and evaluate across numbers of swapped dimensions",
    "compare": "train the baseline and each synthesis method on the same data",
    "bench": "time the outlier synthesizers",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="featmix", description="Feature Mixing outlier synthesis toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for cmd in COMMAND_SECTIONS:
        sp = sub.add_parser(cmd, help=HELP[cmd])
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help="INI file; flags override its values")
        for f in fields_for(cmd):
            dest = f"{f.section}__{f.key}"
            helptext = f"{f.help} (default: {format_value(f.default) or 'unset'})".strip()
            sp.add_argument(f.flag, dest=dest, default=None, metavar=f.kind.upper(), help=helptext)
        if cmd == "eval":
            for a in sp._actions:
                if a.dest in ("paths__model", "paths__data"):
                    a.help = "required (here or in --config)"
    return p


def resolve(args) -> RunConfig:
    rc = RunConfig(args.command)
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc.strerror}") from None
        rc.update_from_ini(text, args.config)
    for f in fields_for(args.command):
        raw = getattr(args, f"{f.section}__{f.key}")
        if raw is not None:
            try:
                rc.set(f.section, f.key, parse_value(f.kind, raw))
            except ValueError as exc:
                raise UsageError(f"{f.flag}: {exc}") from None
    return rc


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc.strerror}") from None
    return out


def _write(path: Path, text: str):
    path.write_text(text)


def _scores_csv(scores, is_ood) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["score", "is_ood"])
    for s, o in zip(scores, is_ood):
        w.writerow([repr(float(s)), int(o)])
    return buf.getvalue()


# -- subcommands ---------------------------------------------------------

def cmd_gen(rc: RunConfig, out: Path) -> int:
    data = generate(rc.generator_spec())
    for split, lfs in data.items():
        save_dataset(lfs, out / f"{split}.fmd")
        if rc.get("data", "write_csv"):
            save_dataset_csv(lfs, out / f"{split}.csv")
    print(f"wrote {out / 'train.fmd'} ({data['train'].n_rows} rows) and "
          f"{out / 'test.fmd'} ({data['test'].n_rows} rows)")
    return EXIT_OK


def cmd_train(rc: RunConfig, out: Path) -> int:
    train_file = rc.get("data", "train_file")
    if train_file:
        tr = load_dataset(train_file).id_only()
    else:
        tr = generate(rc.generator_spec())["train"]
    net = rc.build_net(tr.features.widths, tr.n_classes)
    _, log = train(net, tr, rc.train_config())
    save_model(net, out / "model.fmn")
    log.write_csv(out / "train_log.csv")
    last = log.rows[-1]
    print(f"trained {rc.get('train', 'steps')} steps; final loss {last[1]:.4f}; wrote {out / 'model.fmn'}")
    return EXIT_OK


def cmd_eval(rc: RunConfig, out: Path) -> int:
    model, data = rc.get("paths", "model"), rc.get("paths", "data")
    if not model or not data:
        raise UsageError("eval needs --model and --data")
    net = load_model(model)
    test = load_dataset(data)
    report, scores = evaluate(net, test, **rc.score_kwargs())
    _write(out / "metrics.json", report.to_json() + "\n")
    _write(out / "metrics.csv", report.to_csv())
    _write(out / "scores.csv", _scores_csv(scores, test.is_ood))
    print(f"AUROC {report.auroc:.4f}  AUPR {report.aupr:.4f}  FPR@95 {report.fpr_at_95:.4f}  "
          f"ID acc {report.id_accuracy:.4f}")
    return EXIT_OK


def cmd_verify(rc: RunConfig, out: Path) -> int:
    v = lambda k: rc.get("verify", k)  # noqa: E731
    which = v("theorem")
    if which not in ("1", "2", "both"):
        raise UsageError("--theorem must be 1, 2 or both")
    if v("mu_offset") == 0:
        raise UsageError("--mu-offset 0 refused: the low-likelihood property needs mu_c != mu_l")
    d, n_swap = v("dim"), v("n_swap")
    if not 0 <= n_swap <= d:
        raise UsageError(f"--n-swap must lie in 0..{d}")
    root = RandomSource(rc.seed)
    ok = True
    if which in ("1", "both"):
        gen = TwoModalGaussian.isotropic(d, v("mu_offset"))
        rep = verify_theorem1(gen, MixingConfig(n_swap, rng=root.child("theorem1")), v("trials"),
                              exact_moments=v("exact_moments"))
        _write(out / "theorem1.json", rep.to_json() + "\n")
        _write(out / "theorem1.txt", rep.to_text())
        print(rep.to_text(), end="")
        ok &= rep.passed
    if which in ("2", "both"):
        x = TwoModalGaussian.isotropic(d, v("mu_offset")).sample(root.child("theorem2-data"), v("t2_rows"))
        ms = ModalitySet([x[:, :d], x[:, d:]])
        rep = verify_theorem2(ms, MixingConfig(n_swap, per_sample_masks=True, rng=root.child("theorem2")),
                              v("t2_trials"))
        _write(out / "theorem2.json", rep.to_json() + "\n")
        _write(out / "theorem2.txt", rep.to_text())
        print(rep.to_text(), end="")
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_GATE


def _widths_ok(rc: RunConfig, n_values):
    dims = rc.get("data", "dim_per_modality")
    feat = rc.get("model", "hidden")[1]
    bad = [n for n in n_values if not 0 <= n <= feat]
    if bad:
        raise UsageError(f"n values {bad} outside 0..{feat} (stream feature width; input widths {dims})")


def cmd_sweep(rc: RunConfig, out: Path) -> int:
    n_values = rc.get("sweep", "n_values")
    if not n_values:
        raise UsageError("--n-values is empty")
    _widths_ok(rc, n_values)
    seeds = [rc.seed + i for i in range(rc.get("sweep", "n_seeds"))]
    jobs = [(s, "feature_mixing" if n > 0 else "none", n) for n in n_values for s in seeds]
    par = rc.get("sweep", "parallel")
    rows, failure = [], None
    # chunks of one N at a time so a failure keeps the rows already finished
    for n in n_values:
        chunk = [j for j in jobs if j[2] == n]
        try:
            reps = run_grid(rc, chunk, par)
        except Exception as exc:  # recorded, then reported as an incomplete sweep
            failure = f"N={n}: {type(exc).__name__}: {exc}"
            break
        m = mean_metrics(reps)
        rows.append((n, m["fpr_at_95"], m["auroc"], m["id_accuracy"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["N", "fpr95", "auroc", "acc"])
    for r in rows:
        w.writerow([r[0]] + [repr(v) for v in r[1:]])
    _write(out / "sweep.csv", buf.getvalue())
    print(buf.getvalue(), end="")
    if failure:
        _write(out / "sweep.incomplete", failure + "\n")
        print(f"sweep incomplete: {failure}", file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


def cmd_compare(rc: RunConfig, out: Path) -> int:
    methods = ("none",) + tuple(m for m in rc.get("compare", "methods") if m != "none")
    results = {}
    for m in methods:
        r = train_and_eval(rc, synth=m)
        results[m] = r.metrics
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "fpr95", "auroc", "aupr", "acc"])
    for m, rep in results.items():
        w.writerow([m, repr(rep.fpr_at_95), repr(rep.auroc), repr(rep.aupr), repr(rep.id_accuracy)])
    _write(out / "compare.csv", buf.getvalue())
    doc = {m: json.loads(rep.to_json()) for m, rep in results.items()}
    _write(out / "compare.json", json.dumps(doc, indent=2) + "\n")
    print(f"{'method':<16}{'FPR@95':>9}{'AUROC':>9}{'AUPR':>9}{'ID acc':>9}")
    for m, rep in results.items():
        print(f"{m:<16}{rep.fpr_at_95:>9.4f}{rep.auroc:>9.4f}{rep.aupr:>9.4f}{rep.id_accuracy:>9.4f}")
    return EXIT_OK


def cmd_bench(rc: RunConfig, out: Path) -> int:
    b = lambda k: rc.get("bench", k)  # noqa: E731
    shape = b("shape")
    if shape == "custom":
        shape = (b("rows"), b("widths"))
    elif shape not in benchmod.SHAPES:
        raise UsageError(f"--bench-shape must be one of {sorted(benchmod.SHAPES)} or custom")
    unknown = [m for m in b("methods") if m not in benchmod.BENCH_METHODS]
    if unknown:
        raise UsageError(f"unknown bench methods {unknown}")
    settings = benchmod.BenchSettings(npmix_neighbors=b("npmix_neighbors"),
                                      vos_candidates=b("vos_candidates"), seed=rc.seed)
    results = benchmod.run_bench(b("methods"), shape, b("repeats"), settings)
    _write(out / "bench.csv", benchmod.results_csv(results))
    table = benchmod.format_table(results)
    _write(out / "bench.txt", table + "\n")
    try:
        ratios = benchmod.speedup_table(results)
        _write(out / "speedup.csv", "method,ratio\n" + "".join(f"{m},{r!r}\n" for m, r in ratios))
    except ValueError:
        pass
    print(table)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify,
    "sweep-n": cmd_sweep, "compare": cmd_compare, "bench": cmd_bench,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        rc = resolve(args)
        out = _outdir(args.out)
        _write(out / "config.resolved", rc.to_ini())
        return COMMANDS[args.command](rc, out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"featmix: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"featmix: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
