"""Command-line front end.

Subcommands: `run` (one experiment or baseline), `ablate` (detection and
strategy grids), `detect` (stage 1 standalone on an indicator-matrix file),
`plotdata` (per-round accuracy curves or a warm-up-length sweep, as CSV).
Exit codes: 0 success, 1 usage/config error, 2 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import build_experiment, default_config, parse_config, resolve_output
from .detection import fit_gmm, impute_missing, load_indicator_matrix, normalize_columns, split_clients
from .errors import ConfigurationError, NumericError, SimulatorError, UsageError
from .evaluation import (
    STAGE1_GRID,
    STAGE2_GRID,
    best_and_last,
    evaluate,
    run_ablation,
    run_baseline,
    run_t1_sweep,
    write_result_csv,
)
from .federation import run_experiment


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); usage errors must exit 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="noisefed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment (or a baseline) and write round records")
    run_p.add_argument("--config", help="experiment config file (defaults apply when omitted)")
    run_p.add_argument("--seed", type=int, help="override the run seed")
    run_p.add_argument("--out", help="round-record output path (line-delimited JSON)")
    run_p.add_argument("--baseline", choices=["fedavg", "fedavg_la"], help="run a single-stage baseline instead")
    run_p.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    abl_p = sub.add_parser("ablate", help="run the detection and strategy grids, write a CSV table")
    abl_p.add_argument("--config", help="experiment config file")
    abl_p.add_argument("--seed", type=int)
    abl_p.add_argument("--out", default="ablation.csv")
    abl_p.add_argument("--grid", choices=["stage1", "stage2", "both"], default="both")
    abl_p.add_argument("--repeats", type=int, default=100, help="mixture seeds per detection score")
    abl_p.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    det_p = sub.add_parser("detect", help="split clients of an exported indicator matrix")
    det_p.add_argument("matrix", help="indicator matrix file (tab-separated, NA for missing)")
    det_p.add_argument("--seed", type=int, default=0)
    det_p.add_argument("--repeats", type=int, default=1, help="fits; >1 reports per-client noisy frequency")
    det_p.add_argument("--out", help="optional CSV of per-client posteriors")

    plot_p = sub.add_parser("plotdata", help="emit plot-ready CSV series")
    plot_p.add_argument("--config")
    plot_p.add_argument("--seed", type=int)
    plot_p.add_argument("--out", default="plotdata.csv")
    plot_p.add_argument("--t1-sweep", help="comma-separated warm-up lengths, e.g. 6,8,10,12,14")
    plot_p.add_argument("--repeats", type=int, default=100)
    plot_p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    return parser


def _load_config(args):
    cfg = parse_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace

        from .config import _subseed
        from .noise import NoiseConfig
        from .data import PartitionConfig

        cfg = replace(
            cfg,
            seed=args.seed,
            partition=replace(cfg.partition, seed=_subseed(args.seed, 2)),
            noise=replace(
                cfg.noise,
                global_rate=cfg.noise.global_rate,
                seed=_subseed(args.seed, 3),
            ),
            protocol=replace(cfg.protocol, seed=args.seed),
        )
    return cfg


def cmd_run(args) -> int:
    cfg = _load_config(args)
    clients, test, proto, arch = build_experiment(cfg)
    if args.baseline:
        params, records = run_baseline(args.baseline, clients, proto, test, arch, threads=args.threads)
        detection = None
    else:
        params, detection, records = run_experiment(clients, proto, test, arch, threads=args.threads)
    out = resolve_output(args.out or cfg.out)
    with open(out, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    best, last = best_and_last(records)
    _, final_bacc = evaluate(params, test[0], test[1])
    print(f"wrote {len(records)} round records to {out}")
    print(f"final bacc={final_bacc:.4f}  best={best:.4f}  last10={last:.4f}")
    if detection is not None:
        print(f"detected noisy clients: {sorted(detection.noisy_ids)}")
        truth = sorted(cl.client_id for cl in clients if cl.is_noisy_truth)
        print(f"actually noisy clients: {truth}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    clients, test, proto, arch = build_experiment(cfg)
    from dataclasses import replace as dc_replace

    grids = {"stage1": STAGE1_GRID, "stage2": STAGE2_GRID, "both": STAGE1_GRID + STAGE2_GRID}
    cells = [dc_replace(cell, repetitions=args.repeats) for cell in grids[args.grid]]
    rows = run_ablation(cells, clients, proto, test, arch, threads=args.threads)
    out = resolve_output(args.out)
    write_result_csv(rows, out)
    print(f"wrote {len(rows)} ablation rows to {out}")
    for row in rows:
        best = "-" if row["best"] is None else f"{row['best']:.4f}"
        last = "-" if row["last"] is None else f"{row['last']:.4f}"
        print(
            f"{row['label']:<16} best={best} last={last} "
            f"re={row['recall']:.3f} pr={row['precision']:.3f} mr={row['match_ratio']:.3f}"
        )
    return 0


def cmd_detect(args) -> int:
    matrix = normalize_columns(impute_missing(load_indicator_matrix(args.matrix)))
    if args.repeats <= 1:
        result = split_clients(matrix, fit_gmm(matrix, seed=args.seed))
        print(f"clean clients: {sorted(result.clean_ids)}")
        print(f"noisy clients: {sorted(result.noisy_ids)}")
        rows = [
            {"client_id": cid, "noisy_posterior": result.noisy_posterior[cid]}
            for cid in sorted(result.noisy_posterior)
        ]
    else:
        counts = {cid: 0 for cid in matrix.client_ids}
        for rep in range(args.repeats):
            result = split_clients(matrix, fit_gmm(matrix, seed=args.seed + rep))
            for cid in result.noisy_ids:
                counts[cid] += 1
        print(f"noisy-flag frequency over {args.repeats} fits:")
        for cid in sorted(counts):
            print(f"  client {cid}: {counts[cid] / args.repeats:.3f}")
        rows = [
            {"client_id": cid, "noisy_frequency": counts[cid] / args.repeats} for cid in sorted(counts)
        ]
    if args.out:
        write_result_csv(rows, resolve_output(args.out))
    return 0


def cmd_plotdata(args) -> int:
    cfg = _load_config(args)
    clients, test, proto, arch = build_experiment(cfg)
    out = resolve_output(args.out)
    if args.t1_sweep:
        try:
            t1_values = [int(v) for v in args.t1_sweep.split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(f"--t1-sweep must be a comma-separated integer list: {exc}")
        if not t1_values or min(t1_values) < 1 or max(t1_values) >= proto.total_rounds:
            raise UsageError("--t1-sweep values must lie in [1, total_rounds)")
        rows = run_t1_sweep(clients, proto, t1_values, repetitions=args.repeats, arch=arch, threads=args.threads)
    else:
        _, _, records = run_experiment(clients, proto, test, arch, threads=args.threads)
        rows = [{"round": r.round_index, "stage": r.stage, "bacc": r.bacc} for r in records]
    write_result_csv(rows, out)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "run": cmd_run,
            "ablate": cmd_ablate,
            "detect": cmd_detect,
            "plotdata": cmd_plotdata,
        }[args.command]
        return handler(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, SimulatorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
