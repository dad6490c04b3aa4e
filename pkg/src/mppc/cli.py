"""Command-line entry point (``mppc``)."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import (
    CalibrationError,
    RunSummary,
    calibrate_xt,
    correct_dark,
    dark_prime_from_run,
    pool_calibrations,
)
from .herald import fidelity_sweep, reference_povm
from .model import (
    DEFAULT_NMAX,
    DetectorParams,
    build_povm,
    dark_matrix,
    loss_matrix,
    total_matrix,
    xt_matrix,
)
from .oracle import SimConfig, simulate_block, simulate_heralded, simulate_run
from .reconstruct import fit_source, reconstruct_direct
from .sources import Fock, TwoModeSqueezed, mean_to_r, parse_source
from . import waveform as wf

log = logging.getLogger("mppc")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_MODEL = 4

OUTPUT_DIR_ENV = "MPPC_OUTPUT_DIR"

PAPER_ETA = 0.5
PAPER_EPS_D = 2.549e-3
PAPER_EPS_XT = 0.0975

EPILOG = f"""\
exit status:
  {EXIT_OK}  success
  {EXIT_INTERNAL}  unexpected internal error
  {EXIT_USAGE}  unknown subcommand or malformed flags
  {EXIT_INPUT}  input file missing, unreadable or malformed
  {EXIT_MODEL}  model or data error (invalid parameters, calibration failure, ...)

Without --output, results go to stdout, or into ${OUTPUT_DIR_ENV} when set.
"""


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# --- argument helpers ---------------------------------------------------------

def _common(p: argparse.ArgumentParser, *, variant: str = "chain") -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--nmax", type=int, default=DEFAULT_NMAX, help="truncation (default 40)")
    p.add_argument("--variant", choices=["paper", "chain", "first-order"], default=variant,
                   help=f"cross-talk kernel (default {variant})")
    p.add_argument("--xt-base", choices=["paper", "chain"], default="chain",
                   help="full kernel truncated by --variant first-order")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--output", "-o", type=Path, help="output file")


def _detector(p: argparse.ArgumentParser, eta=1.0, eps_d=None, eps_xt=0.0) -> None:
    p.add_argument("--eta", type=float, default=eta, help=f"detection efficiency (default {eta})")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--eps-d", type=float, default=None,
                   help=f"dark probability without cross-talk (default {eps_d or 0})")
    g.add_argument("--eps-d-prime", type=float, default=None,
                   help="measured one-click dark probability; corrected with --eps-xt")
    p.add_argument("--eps-xt", type=float, default=eps_xt,
                   help=f"cross-talk probability (default {eps_xt})")
    p.set_defaults(_eps_d_default=eps_d or 0.0)


def _params(args) -> DetectorParams:
    if args.eps_d_prime is not None:
        eps_d = correct_dark(args.eps_d_prime, args.eps_xt)
    elif args.eps_d is not None:
        eps_d = args.eps_d
    else:
        eps_d = args._eps_d_default
    return DetectorParams(eta=args.eta, eps_d=eps_d, eps_xt=args.eps_xt,
                          xt_variant=args.variant, n_max=args.nmax, xt_base=args.xt_base)


def _config(args) -> dict:
    skip = {"func", "output", "_eps_d_default"}
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def _load_json(path: Path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from None


def _load_run(path: Path) -> RunSummary:
    data = _load_json(path)
    # accept our own output envelope as well as a bare run summary
    if isinstance(data, dict) and "result" in data and isinstance(data["result"], dict):
        data = data["result"]
    try:
        return RunSummary.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


def _emit(args, text: str, default_name: str) -> None:
    target = args.output
    if target is None and os.environ.get(OUTPUT_DIR_ENV):
        target = Path(os.environ[OUTPUT_DIR_ENV]) / default_name
    if target is None:
        sys.stdout.write(text)
        return
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(text, encoding="utf-8")


def _envelope(args, result) -> str:
    return _json_text({"command": args.command, "version": __version__,
                       "config": _config(args), "result": result})


# --- subcommands -------------------------------------------------------------

def cmd_model_povm(args) -> None:
    povm = build_povm(_params(args), normalize=args.normalize)
    if args.format == "csv":
        header = ["k"] + [f"n{n}" for n in range(povm.n_outcomes)]
        rows = ([k] + list(row) for k, row in enumerate(povm.theta))
        _emit(args, _csv_text(header, rows), "povm.csv")
    else:
        _emit(args, _envelope(args, povm.to_dict()), "povm.json")


def cmd_model_matrix(args) -> None:
    params = _params(args)
    builders = {
        "loss": lambda: loss_matrix(params.eta, params.n_max),
        "dark": lambda: dark_matrix(params.eps_d, params.n_max),
        "xt": lambda: xt_matrix(params.eps_xt, params.n_max, params.xt_variant, params.xt_base),
        "total": lambda: total_matrix(params),
    }
    m = builders[args.kind]()
    if args.format == "csv":
        header = ["n"] + [f"m{m_}" for m_ in range(m.dim)]
        _emit(args, _csv_text(header, ([n] + list(r) for n, r in enumerate(m.entries))),
              f"{args.kind}.csv")
    else:
        _emit(args, _envelope(args, m.to_dict()), f"{args.kind}.json")


def _run_rows(run: RunSummary, n_max: int):
    hist = run.histogram(n_max)
    return ([n, int(c), c / run.pulses] for n, c in enumerate(hist))


def cmd_simulate_run(args) -> None:
    params = _params(args)
    source = parse_source(args.source)
    run = simulate_run(SimConfig(params, source, args.pulses, args.seed), workers=args.workers)
    if args.format == "csv":
        _emit(args, _csv_text(["n", "count", "frequency"], _run_rows(run, params.n_max)), "run.csv")
    else:
        _emit(args, _envelope(args, run.to_dict()), "run.json")


def cmd_simulate_herald(args) -> None:
    params = _params(args)
    r = args.r if args.r is not None else mean_to_r(args.mean)
    est = simulate_heralded(r, params, args.k, args.pulses, args.seed, workers=args.workers)
    result = est.to_dict() | {"r": r, "mean": TwoModeSqueezed(r).mean, "k": args.k}
    if args.format == "csv":
        _emit(args, _csv_text(list(result), [list(result.values())]), "herald.csv")
    else:
        _emit(args, _envelope(args, result), "herald.json")


def cmd_calibrate_xt(args) -> None:
    if args.dark is not None:
        dark = _load_run(args.dark)
        eps_d_prime = dark_prime_from_run(dark)
    elif args.eps_d_prime is not None:
        eps_d_prime = args.eps_d_prime
    else:
        raise InputError("calibrate xt needs --dark RUN.json or --eps-d-prime")
    results = [calibrate_xt(_load_run(p), eps_d_prime) for p in args.light]
    out = {"eps_d_prime": eps_d_prime, "runs": [r.to_dict() for r in results]}
    if len(results) == 1:
        out.update(results[0].to_dict())
    else:
        out["pooled"] = pool_calibrations(results).to_dict()
    if args.format == "csv":
        header = ["light", "eps_xt", "mean", "eps_d_prime", "eps_d", "residual", "iterations"]
        rows = ([str(p), r.eps_xt, r.mean, r.eps_d_prime, r.eps_d, r.residual, r.iterations]
                for p, r in zip(args.light, results))
        _emit(args, _csv_text(header, rows), "calibration.csv")
    else:
        _emit(args, _envelope(args, out), "calibration.json")


def cmd_reconstruct(args) -> None:
    params = _params(args)
    run = _load_run(args.input)
    p_meas = run.frequencies(params.n_max)
    if args.method == "direct":
        report = reconstruct_direct(p_meas, params)
    else:
        report = fit_source(p_meas, params, args.family, bounds=tuple(args.bounds))
    if args.format == "csv":
        raw = report.raw if report.raw is not None else report.estimate.values
        rows = ([n, p, r] for n, (p, r) in enumerate(zip(report.estimate.values, raw)))
        _emit(args, _csv_text(["n", "p", "raw"], rows), "reconstruction.csv")
    else:
        _emit(args, _envelope(args, report.to_dict()), "reconstruction.json")


def cmd_herald_sweep(args) -> None:
    params = _params(args)
    ideal_params = params.replace(eps_d=0.0, eps_xt=0.0)
    detectors = [
        ("mppc", build_povm(params, normalize=True)),
        ("mppc-unnormalized", build_povm(params, normalize=False)),
        ("mppc-no-dark-xt", build_povm(ideal_params, normalize=True)),
    ]
    ref_kind = "single-apd" if args.k == 1 else "two-apd"
    if args.k in (1, 2):
        detectors.append((ref_kind, reference_povm(ref_kind, args.ref_eta, params.n_max)))
    curves = fidelity_sweep(detectors, args.k, args.mean_min, args.mean_max, args.points, args.scale)
    if args.format == "csv":
        header = ["mean"] + [c.detector_label for c in curves]
        rows = ([m] + [c.fidelities[i] for c in curves] for i, m in enumerate(curves[0].means))
        _emit(args, _csv_text(header, rows), f"fidelity_k{args.k}.csv")
    else:
        _emit(args, _envelope(args, {"curves": [c.to_dict() for c in curves]}),
              f"fidelity_k{args.k}.json")


def _template(args) -> wf.PulseTemplate:
    return wf.PulseTemplate(amplitude=args.amplitude)


def cmd_waveform_synth(args) -> None:
    if args.output is None:
        raise InputError("waveform synth needs --output FILE")
    params = _params(args)
    source = parse_source(args.source)
    if isinstance(source, Fock) and source.n > params.n_max:
        raise ValueError("Fock number exceeds --nmax")
    # click numbers come from the generative detector model
    clicks = []
    remaining, block = args.pulses, 0
    while remaining > 0:
        _, c = simulate_block(params, source, block, args.seed, min(remaining, 1 << 16))
        clicks.append(np.minimum(c, params.n_max))
        remaining -= c.size
        block += 1
    clicks = np.concatenate(clicks)
    records = wf.synthesize_run(clicks, dark_rate=args.dark_rate, template=_template(args),
                                noise_sigma=args.noise * args.amplitude, seed=args.seed)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    if args.wave_format == "bin":
        with open(args.output, "wb") as fh:
            wf.write_binary(records, fh)
    else:
        with open(args.output, "w", encoding="utf-8") as fh:
            wf.write_json(records, fh)
    if args.truth is not None:
        truth = RunSummary.from_array(np.bincount(clicks, minlength=params.n_max + 1))
        args.truth.write_text(_envelope(args, truth.to_dict()), encoding="utf-8")


def cmd_waveform_process(args) -> None:
    try:
        records = wf.read_records(args.input)
    except OSError as exc:
        raise InputError(f"cannot read {args.input}: {exc.strerror or exc}") from None
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"{args.input}: malformed waveform file ({exc})") from None
    cfg = wf.AcquisitionConfig.for_amplitude(
        args.amplitude, pre_check_offset=args.pre_check, edge_window=args.edge_window,
        peak_offset=args.peak_offset)
    outcomes = [wf.post_select(r, cfg) for r in records]
    heights = [o.height for o in outcomes if isinstance(o, wf.Accepted)]
    if args.gain == "auto":
        est = wf.estimate_gain(heights)
        gain, offset = est.gain, est.baseline
    else:
        gain = float(args.gain)
        offset = args.offset
    run, rejected = wf.outcomes_to_counts(outcomes, gain, offset)
    if args.format == "csv":
        hist, edges = wf.height_histogram(heights, bins=args.bins)
        rows = ([lo, hi, int(c)] for lo, hi, c in zip(edges[:-1], edges[1:], hist))
        _emit(args, _csv_text(["height_lo", "height_hi", "count"], rows), "heights.csv")
    else:
        result = run.to_dict() | {"rejected": rejected, "records": len(records),
                                  "gain": gain, "offset": offset}
        _emit(args, _envelope(args, result), "run.json")


# --- parser ------------------------------------------------------------------

def _gain(text: str):
    if text == "auto":
        return text
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError("gain must be positive or 'auto'")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mppc", description=__doc__, epilog=EPILOG,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"mppc {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    top = parser.add_subparsers(dest="group", metavar="GROUP", parser_class=_Parser)
    top.required = True

    def group(name, help_):
        g = top.add_parser(name, help=help_, epilog=EPILOG,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        sub = g.add_subparsers(dest="action", metavar="ACTION", parser_class=_Parser)
        sub.required = True
        return sub

    def leaf(sub, name, func, help_, **kw):
        p = sub.add_parser(name, help=help_, epilog=EPILOG,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func, command=kw.pop("command"))
        return p

    model = group("model", "transfer matrices and POVMs")
    p = leaf(model, "povm", cmd_model_povm, "detector POVM theta[k][n]", command="model povm")
    _common(p, variant="paper")
    _detector(p)
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True)
    p = leaf(model, "matrix", cmd_model_matrix, "one transfer matrix", command="model matrix")
    _common(p, variant="paper")
    _detector(p)
    p.add_argument("--kind", choices=["loss", "dark", "xt", "total"], default="total")

    sim = group("simulate", "Monte Carlo detector simulation")
    p = leaf(sim, "run", cmd_simulate_run, "click histogram", command="simulate run")
    _common(p)
    _detector(p)
    p.add_argument("--source", required=True, help="coherent:MEAN, spdc-mean:M, spdc-r:R, fock:N")
    p.add_argument("--pulses", type=int, default=10**6)
    p.add_argument("--workers", type=int, default=1)
    p = leaf(sim, "herald", cmd_simulate_herald, "empirical heralding fidelity",
             command="simulate herald")
    _common(p)
    _detector(p, eta=PAPER_ETA, eps_d=PAPER_EPS_D, eps_xt=PAPER_EPS_XT)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--mean", type=float, help="per-mode mean photon number")
    src.add_argument("--r", type=float, help="squeeze parameter")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--pulses", type=int, default=10**6)
    p.add_argument("--workers", type=int, default=1)

    cal = group("calibrate", "dark and cross-talk calibration")
    p = leaf(cal, "xt", cmd_calibrate_xt, "cross-talk from coherent runs", command="calibrate xt")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--output", "-o", type=Path)
    d = p.add_mutually_exclusive_group()
    d.add_argument("--dark", type=Path, help="dark run summary (JSON)")
    d.add_argument("--eps-d-prime", type=float, help="measured one-click dark probability")
    p.add_argument("--light", type=Path, nargs="+", required=True, help="light run summaries")

    p = top.add_parser("reconstruct", help="photon-number reconstruction", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.set_defaults(func=cmd_reconstruct, command="reconstruct")
    _common(p)
    _detector(p)
    p.add_argument("--input", type=Path, required=True, help="measured run summary (JSON)")
    p.add_argument("--method", choices=["direct", "fit"], default="direct")
    p.add_argument("--family", choices=["coherent", "spdc-r"], default="coherent")
    p.add_argument("--bounds", type=float, nargs=2, default=[0.0, 10.0], metavar=("LO", "HI"))

    her = group("herald", "heralded-state fidelity")
    p = leaf(her, "sweep", cmd_herald_sweep, "Q(k|k) versus source brightness",
             command="herald sweep")
    _common(p)
    _detector(p, eta=PAPER_ETA, eps_d=PAPER_EPS_D, eps_xt=PAPER_EPS_XT)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--mean-min", type=float, default=1e-3)
    p.add_argument("--mean-max", type=float, default=1.0)
    p.add_argument("--points", type=int, default=61)
    p.add_argument("--scale", choices=["log", "linear"], default="log")
    p.add_argument("--ref-eta", type=float, default=0.5, help="reference APD efficiency")

    wav = group("waveform", "digitizer waveforms")
    p = leaf(wav, "synth", cmd_waveform_synth, "synthesize waveform records",
             command="waveform synth")
    _common(p)
    _detector(p)
    p.add_argument("--source", required=True)
    p.add_argument("--pulses", type=int, default=10**4)
    p.add_argument("--noise", type=float, default=0.02, help="sample noise, in pixel amplitudes")
    p.add_argument("--dark-rate", type=float, default=0.0, help="dark pulses per ns")
    p.add_argument("--amplitude", type=float, default=wf.DEFAULT_AMPLITUDE)
    p.add_argument("--wave-format", choices=["bin", "json"], default="bin")
    p.add_argument("--truth", type=Path, help="also write the injected click histogram here")
    p = leaf(wav, "process", cmd_waveform_process, "post-select and bin waveform records",
             command="waveform process")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--output", "-o", type=Path)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--gain", type=_gain, default="auto", help="volts per click, or 'auto'")
    p.add_argument("--offset", type=float, default=0.0)
    p.add_argument("--amplitude", type=float, default=wf.DEFAULT_AMPLITUDE,
                   help="single-pixel amplitude setting the default thresholds")
    p.add_argument("--pre-check", type=float, default=1.0)
    p.add_argument("--edge-window", type=float, default=3.0)
    p.add_argument("--peak-offset", type=float, default=5.0)
    p.add_argument("--bins", type=int, default=256)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except InputError as exc:
        print(f"mppc: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, CalibrationError, ZeroDivisionError) as exc:
        print(f"mppc: error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except Exception as exc:  # pragma: no cover - last resort
        print(f"mppc: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
