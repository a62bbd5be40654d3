"""Command-line pipeline: every stage is a subcommand reading and writing
plain files, so stages compose through the filesystem.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Diagnostics go to stderr; results go only to the named output files or
stdout. Reports are plot-ready CSVs with numbers at 12 significant digits,
byte-identical across runs with the same inputs.
"""

from __future__ import annotations

import argparse
import csv
import difflib
import json
import sys

import numpy as np

from . import ingest, predictor, repeatbuy, synth, timeseries
from .errors import AdliftError, MissingColumn
from .features import ImportanceVector, rank_factors

PROG = "adlift"

COMMANDS = ("synth", "build-tables", "rank", "train", "score", "pace",
            "fit-nbd", "survival", "adjust-churn", "forecast", "virtualize",
            "alarm")


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def emit_report(columns, rows, path, fmt: str = "csv") -> None:
    """Write a report with a deterministic column order and float format."""
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
    elif fmt == "json":
        doc = {"columns": list(columns),
               "rows": [[_fmt(v) if isinstance(v, float) else v for v in row]
                        for row in rows]}
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(doc, ensure_ascii=False, indent=2) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def _write_json(doc, path) -> None:
    text = json.dumps(doc, ensure_ascii=False, indent=2) + "\n"
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _info(msg: str) -> None:
    print(f"{PROG}: {msg}", file=sys.stderr)


# --- file formats -----------------------------------------------------------


def _load_schema(path) -> ingest.Schema:
    with open(path, encoding="utf-8") as fh:
        return ingest.Schema.from_json(fh.read())


def _save_tables(table: ingest.FactorTable, path) -> None:
    dictionary = table.dictionary
    doc = {
        "version": 1,
        "total": table.total,
        "factors": [
            {"name": name,
             "levels": dictionary.levels(i),
             "counts": table.counts[i].tolist()}
            for i, name in enumerate(dictionary.factor_names)],
    }
    _write_json(doc, path)


def _load_tables(path) -> ingest.FactorTable:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != 1:
        raise AdliftError(f"{path}: unsupported tables version {doc.get('version')!r}")
    factors = doc["factors"]
    dictionary = ingest.FactorDictionary([f["name"] for f in factors],
                                         [f["levels"] for f in factors])
    counts = [np.asarray(f["counts"], dtype=np.int64) for f in factors]
    return ingest.FactorTable(counts, doc["total"], dictionary)


def _load_importance(path) -> ImportanceVector:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    entries = sorted(doc["entries"], key=lambda e: e["index"])
    return ImportanceVector(method=doc["method"],
                            values=[e["value"] for e in entries],
                            alpha=doc.get("alpha"))


def _load_series(path) -> tuple[int, np.ndarray]:
    """Read an hourly series (count or forecast column) as (start_hour, values).

    Missing hours are filled with zero so the series is contiguous.
    """
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "hour" not in reader.fieldnames:
            raise MissingColumn(f"{path}: expected columns hour,count")
        value_col = "count" if "count" in reader.fieldnames else "forecast"
        if value_col not in reader.fieldnames:
            raise MissingColumn(f"{path}: expected a count or forecast column")
        pairs = [(int(row["hour"]), float(row[value_col])) for row in reader]
    if not pairs:
        raise AdliftError(f"{path}: empty series")
    pairs.sort()
    start = pairs[0][0]
    values = np.zeros(pairs[-1][0] - start + 1)
    for hour, value in pairs:
        values[hour - start] = value
    return start, values


def _load_forecast_csv(path) -> tuple[int, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "hour" not in reader.fieldnames \
                or "forecast" not in reader.fieldnames:
            raise MissingColumn(f"{path}: expected columns hour,forecast")
        pairs = [(int(row["hour"]), float(row["forecast"])) for row in reader]
    if not pairs:
        raise AdliftError(f"{path}: empty forecast")
    pairs.sort()
    hours = [h for h, _ in pairs]
    if hours != list(range(hours[0], hours[-1] + 1)):
        raise AdliftError(f"{path}: forecast hours must be contiguous")
    return hours[0], np.array([v for _, v in pairs])


def _load_freq(path, window_hours: float | None) -> repeatbuy.FrequencyTable:
    counts = {}
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "n" not in reader.fieldnames \
                or "count" not in reader.fieldnames:
            raise MissingColumn(f"{path}: expected columns n,count")
        for row in reader:
            counts[int(row["n"])] = int(row["count"])
    return repeatbuy.FrequencyTable(counts, window_hours)


def _load_survival(path) -> repeatbuy.SurvivalTable:
    rows = {}
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = {"browser", "tau_days", "deaths", "censored"}
        if reader.fieldnames is None or not needed <= set(reader.fieldnames):
            raise MissingColumn(f"{path}: expected columns browser,tau_days,"
                                "deaths,censored")
        for row in reader:
            rows[row["browser"]] = repeatbuy.SurvivalRow(
                tau_days=float(row["tau_days"]), deaths=int(row["deaths"]),
                censored=int(row["censored"]))
    return repeatbuy.SurvivalTable(rows=rows)


def _read_request_rows(path, factor_names) -> list[list[str]]:
    """Read raw level labels for the given factors, one row per request."""
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MissingColumn(f"{path}: empty input")
        positions = {name: j for j, name in enumerate(header)}
        missing = [name for name in factor_names if name not in positions]
        if missing:
            raise MissingColumn(f"{path}: missing columns {missing}")
        cols = [positions[name] for name in factor_names]
        return [[row[j] or ingest.MISSING_LEVEL for j in cols] for row in reader]


def _encoded_batch(model: predictor.SparseRateModel, path) -> ingest.RequestBatch:
    rows = _read_request_rows(path, model.factor_names)
    matrix = np.full((len(rows), model.m), -1, dtype=np.int32)
    for j, labels in enumerate(rows):
        matrix[j] = model.encode_labels(labels)
    return ingest.RequestBatch(matrix, np.zeros(len(rows), dtype=np.int8))


# --- subcommands ------------------------------------------------------------


def _cmd_synth(args) -> int:
    with open(args.spec, encoding="utf-8") as fh:
        spec = synth.SynthSpec.from_json(fh.read())
    seed = args.seed if args.seed is not None else spec.seed
    if args.out_requests:
        if spec.requests is None:
            raise AdliftError("spec has no 'requests' section")
        dictionary, batch = synth.gen_requests(spec.requests, seed)
        ingest.write_requests_csv(args.out_requests, spec.requests.schema(),
                                  dictionary, batch)
        _info(f"wrote {len(batch)} requests to {args.out_requests}")
    events = None
    if args.out_events or args.out_freq:
        if spec.population is None or spec.churn is None:
            raise AdliftError("spec needs 'population' and 'churn' sections for events")
        sample = synth.gen_gamma_poisson(spec.population, seed + 1)
        events = synth.apply_churn(sample, spec.churn, seed + 2)
        if args.out_events:
            ingest.write_events_csv(args.out_events, events)
            _info(f"wrote {len(events)} events to {args.out_events}")
        if args.out_freq:
            freq = repeatbuy.build_frequency_table(events,
                                                   spec.population.window_hours)
            emit_report(["n", "count"],
                        sorted(freq.counts.items()), args.out_freq)
            _info(f"wrote frequency table to {args.out_freq}")
    if args.out_series:
        if spec.intensity is None:
            raise AdliftError("spec has no 'intensity' section")
        times = synth.gen_inhomogeneous_poisson(spec.intensity, seed + 3)
        series, _ = ingest.aggregate_hourly(
            synth.events_from_times(times),
            (0, spec.intensity.n_hours * ingest.SECONDS_PER_HOUR))
        emit_report(["hour", "count"],
                    [(series.start_hour + i, int(c))
                     for i, c in enumerate(series.counts)], args.out_series)
        _info(f"wrote {len(series)} hourly counts to {args.out_series}")
    return 0


def _cmd_build_tables(args) -> int:
    schema = _load_schema(args.schema)
    with open(args.input, encoding="utf-8") as fh:
        dictionary, batch = ingest.parse_requests(
            fh, schema, delimiter="\t" if args.tab else ",")
    table = ingest.build_factor_table(batch, dictionary)
    _save_tables(table, args.out)
    _info(f"{table.total} records, {table.m} factors -> {args.out}")
    return 0


def _cmd_rank(args) -> int:
    table = _load_tables(args.tables)
    imp = rank_factors(table, method=args.method, alpha=args.alpha)
    rank_of = {int(f): pos + 1 for pos, f in enumerate(imp.ranking)}
    doc = {
        "method": imp.method,
        "alpha": imp.alpha,
        "entries": [{"factor": table.dictionary.factor_names[i],
                     "index": i,
                     "value": float(imp.values[i]),
                     "rank": rank_of[i]}
                    for i in range(imp.m)],
    }
    _write_json(doc, args.out)
    top = table.dictionary.factor_names[imp.ranking[0]]
    _info(f"ranked {imp.m} factors by {args.method}; strongest: {top}")
    return 0


def _cmd_train(args) -> int:
    table = _load_tables(args.tables)
    imp = _load_importance(args.importance)
    model = predictor.train(table, imp, epsilon=args.epsilon, beta=args.beta)
    predictor.save_model(model, args.out)
    active = int((model.importance > 0).sum())
    _info(f"trained model with {active}/{model.m} active factors -> {args.out}")
    return 0


def _cmd_score(args) -> int:
    model = predictor.load_model(args.model)
    batch = _encoded_batch(model, args.input)
    result = predictor.score_batch(model, batch)
    emit_report(["index", "score", "used_factors"],
                [(j, float(s), int(u))
                 for j, (s, u) in enumerate(zip(result.scores, result.used_factors))],
                args.out)
    _info(f"scored {len(result)} requests at "
          f"{result.throughput_rps:,.0f} req/s -> {args.out}")
    return 0


def _cmd_pace(args) -> int:
    model = predictor.load_model(args.model)
    batch = _encoded_batch(model, args.input)
    result = predictor.score_batch(model, batch)
    horizon = args.horizon if args.horizon is not None else len(batch)
    state = predictor.PacingState(target_total=args.target,
                                  horizon_requests=horizon,
                                  threshold=args.threshold,
                                  block_size=args.block, gamma=args.gamma)
    rows = []
    for j, scored in enumerate(result):
        show = predictor.pace(state, scored)
        rows.append((j, scored.score, 1 if show else 0, state.threshold))
    emit_report(["index", "score", "show", "threshold"], rows, args.out)
    _info(f"showed {state.shown_so_far}/{args.target} over {len(rows)} requests "
          f"-> {args.out}")
    return 0


def _cmd_fit_nbd(args) -> int:
    freq = _load_freq(args.freq, args.window_hours)
    model = repeatbuy.fit_nbd_truncated(freq)
    doc = {"k": model.k, "m": model.m, "variance": model.variance,
           "fit_method": model.fit_method,
           "gof": {"chi2": model.gof.statistic, "dof": model.gof.dof,
                   "pvalue": model.gof.pvalue, "bins": model.gof.n_bins}}
    _write_json(doc, args.out)
    _info(f"k={model.k:.4g} m={model.m:.4g} "
          f"gof p={model.gof.pvalue:.3g} -> {args.out}")
    return 0


def _cmd_survival(args) -> int:
    t0, t1 = args.window
    with open(args.events, encoding="utf-8") as fh:
        events = ingest.parse_cookie_events(fh)
    table = repeatbuy.estimate_survival(events, (t0, t1), guard_days=args.guard_days)
    emit_report(["browser", "tau_days", "deaths", "censored"],
                [(b, row.tau_days, row.deaths, row.censored)
                 for b, row in sorted(table.rows.items())], args.out)
    _info(f"estimated survival for {len(table.rows)} browsers -> {args.out}")
    return 0


def _cmd_adjust_churn(args) -> int:
    freq = _load_freq(args.freq, args.window_hours)
    survival = _load_survival(args.survival)
    if args.mix:
        mix = {}
        for part in args.mix.split(","):
            browser, _, weight = part.partition(":")
            mix[browser.strip()] = float(weight)
    else:
        sizes = {b: row.deaths + row.censored for b, row in survival.rows.items()}
        total = sum(sizes.values())
        mix = {b: size / total for b, size in sizes.items()}
    adj = repeatbuy.adjust_for_churn(freq, survival, mix,
                                     loyalty_threshold=args.threshold,
                                     seed=args.seed, mc_users=args.mc_users)
    doc = {"k": adj.k, "m": adj.m, "true_users": adj.true_users,
           "missing_loyal": adj.missing_loyal,
           "identities_per_user": adj.identities_per_user,
           "objective": adj.objective, "n_evals": adj.n_evals,
           "loyalty_threshold": args.threshold, "seed": args.seed}
    _write_json(doc, args.out)
    _info(f"adjusted k={adj.k:.4g} m={adj.m:.4g}, "
          f"missing loyal ~ {adj.missing_loyal:.0f} -> {args.out}")
    return 0


def _cmd_forecast(args) -> int:
    start, values = _load_series(args.series)
    r = None if args.r == "auto" else int(args.r)
    model = timeseries.ssa_fit(values, L=args.L, r=r)
    future = timeseries.ssa_forecast(model, args.horizon)
    rows = []
    for i in range(model.n):
        rows.append((start + i, _fmt(float(values[i])),
                     float(model.reconstructed[i])))
    for t in range(args.horizon):
        rows.append((start + model.n + t, "", float(future[t])))
    emit_report(["hour", "actual", "forecast"], rows, args.out)
    _info(f"SSA L={model.window} r={model.rank}; forecast {args.horizon}h "
          f"-> {args.out}")
    return 0


def _cmd_virtualize(args) -> int:
    start, values = _load_series(args.series)
    clock = timeseries.build_virtual_clock(values, start_hour=start)
    with open(args.events, encoding="utf-8") as fh:
        events = ingest.parse_cookie_events(fh)
    ts = np.array([e.timestamp for e in events], dtype=np.float64)
    virtual = timeseries.virtualize(clock, ts) if len(events) else np.empty(0)
    emit_report(["cookie_id", "browser", "timestamp", "virtual"],
                [(e.cookie_id, e.browser, e.timestamp, float(v))
                 for e, v in zip(events, virtual)], args.out)
    _info(f"virtualized {len(events)} events -> {args.out}")
    return 0


def _cmd_alarm(args) -> int:
    start, values = _load_series(args.series)
    fc_start, forecast = _load_forecast_csv(args.forecast)
    lo = max(start, fc_start)
    hi = min(start + len(values), fc_start + len(forecast))
    if lo >= hi:
        raise AdliftError("series and forecast hours do not overlap")
    actual = values[lo - start:hi - start]
    predicted = forecast[lo - fc_start:hi - fc_start]
    config = timeseries.AlarmConfig(sigma_multiplier=args.c,
                                    consecutive_hours=args.consecutive,
                                    residual_window=args.residual_window)
    report = timeseries.check_alarm(actual, predicted, config)
    doc = {"alarm_hour": None if report.alarm_hour is None
           else int(lo + report.alarm_hour),
           "fired": report.fired, "sigma": report.sigma,
           "hours_checked": report.hours_checked,
           "exceedances": [int(lo + t) for t in report.exceedances]}
    _write_json(doc, args.out)
    _info(f"ALARM at hour {doc['alarm_hour']}" if report.fired else "no alarm")
    return 0


# --- parser / dispatch -------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _window_arg(text: str) -> tuple[int, int]:
    try:
        t0, t1 = text.split(":")
        return int(t0), int(t1)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"window must look like t0:t1 in epoch seconds, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", parents=[], help="generate seeded synthetic data")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-requests")
    p.add_argument("--out-events")
    p.add_argument("--out-freq")
    p.add_argument("--out-series")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("build-tables", help="parse requests into contingency tables")
    p.add_argument("--schema", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--tab", action="store_true", help="tab-delimited input")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_tables)

    p = sub.add_parser("rank", help="rank factors by mutual information")
    p.add_argument("--tables", required=True)
    p.add_argument("--method", choices=["shannon", "renyi"], default="shannon")
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_rank)

    p = sub.add_parser("train", help="train the sparse rate model")
    p.add_argument("--tables", required=True)
    p.add_argument("--importance", required=True)
    p.add_argument("--epsilon", type=float, default=predictor.DEFAULT_EPSILON)
    p.add_argument("--beta", type=float, default=predictor.DEFAULT_BETA)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("score", help="score requests with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("pace", help="pace impressions toward a target total")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--block", type=int, default=1000)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_pace)

    p = sub.add_parser("fit-nbd", help="fit a zero-truncated NBD to frequencies")
    p.add_argument("--freq", required=True)
    p.add_argument("--window-hours", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit_nbd)

    p = sub.add_parser("survival", help="estimate cookie survival per browser")
    p.add_argument("--events", required=True)
    p.add_argument("--window", type=_window_arg, required=True,
                   metavar="T0:T1", help="epoch seconds, hour-aligned")
    p.add_argument("--guard-days", type=float, default=7.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_survival)

    p = sub.add_parser("adjust-churn", help="correct an NBD fit for cookie churn")
    p.add_argument("--freq", required=True)
    p.add_argument("--survival", required=True)
    p.add_argument("--window-hours", type=float, required=True)
    p.add_argument("--threshold", type=int, default=10,
                   help="loyalty threshold n0")
    p.add_argument("--mix", default=None,
                   help="browser mix like chrome:0.6,safari:0.4 "
                        "(default: proportional to survival cookie counts)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--mc-users", type=int, default=100_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_adjust_churn)

    p = sub.add_parser("forecast", help="SSA fit and forecast of an hourly series")
    p.add_argument("--series", required=True)
    p.add_argument("--L", type=int, default=None)
    p.add_argument("--r", default="auto")
    p.add_argument("--horizon", type=int, default=168)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_forecast)

    p = sub.add_parser("virtualize", help="rescale event times to virtual time")
    p.add_argument("--series", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_virtualize)

    p = sub.add_parser("alarm", help="check actual vs forecast for change alarms")
    p.add_argument("--series", required=True)
    p.add_argument("--forecast", required=True)
    p.add_argument("--c", type=float, default=3.0, dest="c",
                   help="sigma multiplier")
    p.add_argument("--h", type=int, default=2, dest="consecutive",
                   help="consecutive hours")
    p.add_argument("--R", type=int, default=168, dest="residual_window",
                   help="trailing residual window")
    p.add_argument("--out", default="-")
    p.set_defaults(func=_cmd_alarm)

    return parser


def dispatch(argv) -> int:
    """Run one subcommand; returns the process exit code."""
    argv = list(argv)
    if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
        close = difflib.get_close_matches(argv[0], COMMANDS, n=1)
        hint = f"; did you mean {close[0]!r}?" if close else ""
        print(f"{PROG}: unknown subcommand {argv[0]!r}{hint}", file=sys.stderr)
        return 1
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_help()
        return 0
    try:
        return args.func(args)
    except AdliftError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"{PROG}: io error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
