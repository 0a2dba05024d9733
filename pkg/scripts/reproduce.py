#!/usr/bin/env python3
"""Run bundled experiment configs through the CLI and print a short report.

    python scripts/reproduce.py                   # every bundled config, desk scale
    python scripts/reproduce.py decay_delta symmetric --full-scale
    python scripts/reproduce.py --report-only     # re-read existing results

Each config writes to <root>/<name>/ (default root: results/).
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path

from ksfv import cli
from ksfv.diagnostics import RunRecord, find_plateaus


def report(name: str, out: Path) -> list[str]:
    lines = []
    cfg = json.loads((out / "config.json").read_text())
    if cfg["command"] == "run":
        s = json.loads((out / "summary.json").read_text())
        rec = RunRecord.from_csv(out / "record.csv")
        lines.append(f"{s['status']} at t={s['final_time']:g}; max n {s['max_n']:.4g} at {tuple(s['argmax_center'])}")
        if s["status"] == "completed" and len(rec) > 2:
            for p in find_plateaus(rec["t"], rec["linf_n"]):
                lines.append(f"  Linf plateau [{p.t0:.3f}, {p.t1:.3f}] level {p.level:.4g}")
    elif cfg["command"] == "convergence":
        fit = cli.read_table(out / "orders.csv")[-1]
        lines.append("orders L1 %.3f, L2 %.3f, Linf %.3f" % (fit["order_l1"], fit["order_l2"], fit["order_linf"]))
    elif cfg["command"] == "decay":
        for r in cli.read_table(out / "rates.csv"):
            lines.append(f"{r['tag']}: rate {r['rate']:.4g}, monotone {r['monotone']}, {r['status']}")
    elif cfg["command"] == "inequalities":
        for r in cli.read_table(out / "inequalities.csv"):
            lines.append(f"{int(r['nx'])}x{int(r['ny'])}: CK violations {int(r['ck_violations'])}, "
                         f"LS max ratio {r['ls_max_ratio']:.3g} (C_L {r['ls_constant']:g})")
    return lines


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("names", nargs="*", help="bundled config names (default: all)")
    p.add_argument("--root", default="results")
    p.add_argument("--full-scale", action="store_true")
    p.add_argument("--report-only", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    names = args.names or sorted(q.stem for q in cli.CONFIG_DIR.glob("*.json"))
    codes = {}
    for name in names:
        out = Path(args.root) / name
        if not args.report_only:
            t0 = time.perf_counter()
            cmd = cli.ExperimentConfig.load(cli.bundled_config(name)).command
            extra = ["--full-scale"] if args.full_scale else []
            codes[name] = cli.main([cmd, "--config", name, "--out", str(out), *extra])
            print(f"[{name}] exit {codes[name]} in {time.perf_counter() - t0:.0f} s")
        if (out / "config.json").exists():
            try:
                for line in report(name, out):
                    print(f"[{name}] {line}")
            except (OSError, KeyError, ValueError) as exc:
                print(f"[{name}] no report: {exc}")
    # blow-up (3) is an expected outcome for the delta = 0 configs
    return int(any(c not in (cli.EXIT_OK, cli.EXIT_BLOWUP) for c in codes.values()))


if __name__ == "__main__":
    sys.exit(main())
