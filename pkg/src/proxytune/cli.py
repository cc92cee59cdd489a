"""Command-line entry point: ``proxytune <subcommand> --config cfg.json ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config error.
Failures print one line to stderr: ``error: <ExceptionType>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import sweep as S
from .errors import ConfigError
from .models import load_checkpoint, save_checkpoint
from .trainer import cpt_tune, finetune_plain


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proxytune", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", required=True, help="JSON config file")
        return sp

    sp = add("pretrain", "pretrain the frozen small and large models")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int)

    sp = add("finetune", "plain fine-tuning of the small model")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int)

    sp = add("cpt-tune", "tune the small model under the ensembled objective")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--alpha-train", type=float)
    sp.add_argument("--seed", type=int)

    sp = add("proxy-eval", "score a tuned checkpoint through the proxy ensemble")
    sp.add_argument("--tuned", required=True, help="tuned checkpoint file")
    sp.add_argument("--alpha-test", type=float, default=1.0)
    sp.add_argument("--seed", type=int)

    sp = add("sweep", "alpha_train x alpha_test accuracy grid")
    sp.add_argument("--out", help="grid CSV path (default: output.grid in config)")
    sp.add_argument("--workers", type=int, default=1)

    sp = add("compare", "baseline comparison report")
    sp.add_argument("--out", help="text report path (default: output.report in config)")
    sp.add_argument("--csv", help="also write the report as CSV")
    return p


def _world(spec: S.SweepSpec, seed):
    return S.build_world(spec, spec.seeds[0] if seed is None else seed)


def _save(ck, out_dir, name):
    save_checkpoint(ck, os.path.join(out_dir, f"{name}.ckpt"))
    if ck.report is not None:
        with open(os.path.join(out_dir, f"{name}.train.csv"), "w") as fh:
            fh.write(ck.report.to_text())


def _run(args, cfg: dict) -> None:
    spec = S.SweepSpec.from_config(cfg)
    outputs = dict(cfg.get("output", {}))
    cmd = args.command
    if cmd in ("pretrain", "finetune", "cpt-tune"):
        os.makedirs(args.out_dir, exist_ok=True)
        w = _world(spec, args.seed)
        if cmd == "pretrain":
            _save(w.small, args.out_dir, "small")
            _save(w.large, args.out_dir, "large")
        elif cmd == "finetune":
            base = S.train_config(spec.train, seed=w.seed)
            _save(finetune_plain(w.small.to_model(), w.train, base, w.test), args.out_dir, "finetuned")
        else:
            a = spec.cpt_alpha if args.alpha_train is None else args.alpha_train
            base = S.train_config(spec.train, seed=w.seed, alpha_train=a)
            _save(cpt_tune(w.triple(), w.train, base, w.test), args.out_dir, "cpt")
        print(f"wrote checkpoints to {args.out_dir}")
    elif cmd == "proxy-eval":
        if args.alpha_test < 0:
            raise ConfigError("alpha_test must be >= 0")
        w = _world(spec, args.seed)
        tuned = w.triple(load_checkpoint(args.tuned))
        acc = S.evaluate(tuned, w.test, args.alpha_test)
        print(json.dumps({"alpha_test": args.alpha_test, "accuracy": round(acc, 6),
                          "n": len(w.test)}))
    elif cmd == "sweep":
        out = args.out or outputs.get("grid")
        if not out:
            raise ConfigError("no output path: pass --out or set output.grid")
        grid = S.run_sweep(spec, workers=args.workers)
        S.emit_grid_csv(grid, out)
        mn, mf, dom = S.diagonal_dominance(grid, 0.2, 1.0) if len(grid.alpha_train) > 1 else (0, 0, False)
        print(f"wrote {out}; near={mn:.4f} far={mf:.4f} dominance={dom}")
    elif cmd == "compare":
        rep = S.compare(spec)
        out = args.out or outputs.get("report")
        if out:
            S.emit_report(rep, out, args.csv or outputs.get("report_csv"))
        sys.stdout.write(rep.to_text())


def cli_main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = S.load_config(args.config)
        _run(args, cfg)
    except ConfigError as e:
        print(f"error: ConfigError: {e}", file=sys.stderr)
        return 3
    except Exception as e:
        msg = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
