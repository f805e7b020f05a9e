"""Command-line front end: validate | price | moments | mc-check."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, load_config, parse_config
from .fitting import FitError
from .lattice import LatticeError, validate_generator
from .moments import MomentError, build_functional, moments_exact, moments_fd
from .montecarlo import estimate_price
from .pricers import PricingError, price
from .propagator import PropagatorError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VALIDATION = 0, 1, 2, 3
THREADS_ENV = "VOLMOMENTS_THREADS"
Z_PASS = 3.0

log = logging.getLogger("volmoments")


def _plain(o):
    return o.item() if hasattr(o, "item") else float(o)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_plain) + "\n")


def cmd_validate(cfg: RunConfig, out: Path) -> int:
    model = cfg.build_model()
    reports = []
    seen = set()
    for iv in model.time_grid.intervals:
        if id(iv.generator.entries) in seen:
            continue
        seen.add(id(iv.generator.entries))
        rep = validate_generator(iv.generator, model.prices, iv.generator.rate, absorbing=model.absorbing,
                                 tolerances=cfg.validation_tolerances())
        reports.append((iv, rep))
    doc = [{"interval": [iv.t0, iv.t1], "rate": iv.generator.rate, **rep.to_dict()} for iv, rep in reports]
    _write_json(out / "validation.json", doc)
    (out / "validation.txt").write_text("\n\n".join(
        f"interval [{iv.t0}, {iv.t1}] rate {iv.generator.rate}\n{rep.to_text()}" for iv, rep in reports) + "\n")
    for iv, rep in reports:
        print(f"[{iv.t0:g}, {iv.t1:g}] r={iv.generator.rate:g}: {'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if all(rep.passed for _, rep in reports) else EXIT_VALIDATION


def cmd_price(cfg: RunConfig, out: Path) -> int:
    from .plotting import term_structure_figures
    model = cfg.build_model()
    opts = cfg.options()
    specs = cfg.contracts(model)
    if not specs:
        raise ConfigError("$.contracts: price needs at least one contract")
    summaries = []
    with open(out / "prices.csv", "w", newline="") as fp, open(out / "breakdown.csv", "w", newline="") as fb:
        wp, wb = csv.writer(fp), csv.writer(fb)
        wp.writerow(["contract", "name", "kind", "T", "t", "headline", "aggregation", "skipped_mass",
                     "excluded_mass", "fallbacks"])
        wb.writerow(["contract", "name", "t", "y2", "weight", "payoff", "fit", "params", "m1", "m2", "m3"])
        for i, spec in enumerate(specs):
            try:
                rep = price(model, spec, opts)
            except (FitError, PricingError, MomentError) as e:
                raise type(e)(f"contract {i} ({spec.name}, t={spec.t}): {e}") from None
            d = rep.diagnostics
            fallbacks = sum(v for k, v in d.items() if k in ("pearson_to_chi", "deterministic", "moment_form"))
            wp.writerow([i, spec.name, spec.kind, spec.T, spec.t, repr(rep.headline), rep.aggregation,
                         repr(d.get("skipped_mass", 0.0)), repr(d.get("excluded_mass", 0.0)), fallbacks])
            rep.write_rows(wb, prefix=(i, spec.name, spec.t))
            summaries.append(rep.summary())
    _write_json(out / "summary.json", summaries)
    for path in term_structure_figures(summaries, out):
        log.info("wrote %s", path)
    for s in summaries:
        print(f"{s['name']:<28} t={s['t']:<5g} {s['headline']:.6f}")
    return EXIT_OK


def cmd_moments(cfg: RunConfig, out: Path) -> int:
    model = cfg.build_model()
    m = cfg.document["moments"]
    e = cfg.engine
    corr = cfg.corridor(m["corridor"], model.S0)
    f = build_functional(m["kind"], model, corr, indicator=e["indicator"], gamma_weight=e["gammaWeight"],
                         spot_weight=e["spotWeight"], constant=m["constant"])
    if e["method"] == "exact":
        bm = moments_exact(model, f, m["T"], m["t"], m["order"], floor=e["transitionFloor"])
    else:
        bm = moments_fd(model, f, m["T"], m["t"], m["order"], eps_base=e["epsBase"], floor=e["transitionFloor"])
    bm.to_csv(out / "moments.csv", model)
    unc = bm.unconditional()
    _write_json(out / "moments.json", {"kind": m["kind"], "T": m["T"], "t": m["t"],
                                       "unconditional": [float(x) for x in unc]})
    print("unconditional raw moments: " + ", ".join(f"m{k + 1}={x:.6g}" for k, x in enumerate(unc)))
    return EXIT_OK


def cmd_mc_check(cfg: RunConfig, out: Path) -> int:
    model = cfg.build_model()
    opts = cfg.options()
    e = cfg.engine
    ok = True
    with open(out / "mc_check.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["contract", "name", "kind", "T", "t", "engine", "mc", "se", "z", "excluded", "status"])
        for i, spec in enumerate(cfg.contracts(model)):
            eng = price(model, spec, opts).headline
            mc = estimate_price(model, spec, e["paths"], e["seed"] + i, opts, rv=e["mcRv"])
            z = mc.zscore(eng)
            status = "PASS" if abs(z) <= Z_PASS else "FAIL"
            ok &= status == "PASS"
            w.writerow([i, spec.name, spec.kind, spec.T, spec.t, repr(eng), repr(mc.mean), repr(mc.se),
                        repr(z), repr(mc.excluded), status])
            print(f"{spec.name:<28} t={spec.t:<5g} engine={eng:.6f} mc={mc.mean:.6f}+-{mc.se:.2g} "
                  f"z={z:+.2f} {status}")
    return EXIT_OK if ok else EXIT_VALIDATION


COMMANDS = {"validate": cmd_validate, "price": cmd_price, "moments": cmd_moments, "mc-check": cmd_mc_check}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="volmoments", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="JSON run configuration (defaults if omitted)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--seed", type=int, help="override engine.seed")
    p.add_argument("--threads", type=int, help=f"BLAS thread limit (else ${THREADS_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = args.threads or (int(os.environ[THREADS_ENV]) if os.environ.get(THREADS_ENV) else None)
    try:
        cfg = load_config(args.config) if args.config else parse_config({})
        if args.seed is not None:
            doc = cfg.document
            doc["engine"]["seed"] = args.seed
            cfg = parse_config(doc)
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "resolved_config.json").write_text(cfg.to_json() + "\n")
        with threadpool_limits(threads) if threads else nullcontext():
            return COMMANDS[args.command](cfg, args.out)
    except (ConfigError, LatticeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FitError, MomentError, PricingError, PropagatorError, FloatingPointError) as e:
        print(f"numeric failure [{type(e).__module__.split('.')[-1]}]: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
