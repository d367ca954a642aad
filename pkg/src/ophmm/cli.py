"""Batch command-line interface.

Every subcommand reads its parameters from an optional JSON config
(``--config``), lets command-line flags override it, writes its outputs into
``--out`` together with ``manifest.json`` (inputs, effective config, seed and
content hashes) and exits with 0 on success, 2 on configuration errors, 3 on
data errors and 4 on numerical aborts. On failure a JSON error record is
printed to stderr and no partial output is left behind.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import shutil
import sys
import tempfile
import warnings

import numpy as np

from . import __version__
from . import io as fio
from .errors import ConfigError, DataError, NumericalError, OphmmError

log = logging.getLogger("ophmm")

STOCHASTIC = {"fit", "simulate", "simulate-replay", "bic"}


# ----------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file of parameters; flags override it")
    p.add_argument("--out", help="output directory (created if missing)")
    p.add_argument("--threads", type=int, help="worker threads for compiled kernels")
    p.add_argument("-v", "--verbose", action="store_true", default=None,
                   help="log progress to stderr")


def _data_args(p, positions=True):
    p.add_argument("--spikes", help="spike CSV cell_id,time_s")
    if positions:
        p.add_argument("--positions", help="position CSV time_s,x_px,y_px")
    p.add_argument("--grid", help="grid JSON")
    p.add_argument("--dt", type=float, help="bin width (s)")
    p.add_argument("--duration", type=float,
                   help="recording length (s); default: last event rounded up to a bin")
    p.add_argument("--n-cells", type=int, help="number of cells; default from data or model")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ophmm", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"ophmm {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("grid", help="build the spatial grid from position samples")
    _common(p)
    p.add_argument("--positions")
    p.add_argument("--cell-size", type=float, help="square side (px)")
    p.add_argument("--mask", help="JSON file with a rows x cols boolean array")

    p = sub.add_parser("bin", help="bin spikes (and positions) into a count table")
    _common(p)
    _data_args(p)
    p.add_argument("--epoch", choices=["RUN", "REST", "SIM"])

    p = sub.add_parser("fit", help="fit model size and parameters by SMC")
    _common(p)
    _data_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--H", type=int, help="number of particles")
    p.add_argument("--kappa-bar", type=int)
    p.add_argument("--ess-threshold", type=float)
    p.add_argument("--floor", type=int, help="positive-discrimination floor H*")
    p.add_argument("--alpha", type=float, help="Gamma shape of the rate prior")
    p.add_argument("--beta", type=float, help="Gamma rate of the rate prior")
    p.add_argument("--delta", type=float)
    p.add_argument("--omega", type=float)
    p.add_argument("--psi-scale", type=float, help="psi = psi_scale^2 * I (px^2)")
    p.add_argument("--spikes-only", action="store_true", default=None,
                   help="ignore positions (fit on spike likelihood only)")
    p.add_argument("--xi-method", choices=["exact", "completed_square"])
    p.add_argument("--kappa-method", choices=["bic", "kt"],
                   help="model-size rule: BIC over size-specific estimates or the K_T mode")
    p.add_argument("--progress-every", type=int)

    p = sub.add_parser("decode", help="decode positions from spikes")
    _common(p)
    _data_args(p)
    p.add_argument("--model", help="fitted model JSON (OP methods)")
    p.add_argument("--method", choices=["op-viterbi", "op-map", "bd", "lp"])
    p.add_argument("--viterbi", choices=["recursive", "exact"])
    p.add_argument("--train-spikes", help="RUN spikes for BD/LP fitting")
    p.add_argument("--train-positions", help="RUN positions for BD/LP fitting")
    p.add_argument("--train-duration", type=float)
    p.add_argument("--bd-prior", choices=["occupancy", "uniform"])
    p.add_argument("--lp-bandwidth", type=float, help="LP kernel bandwidth in grid cells")
    p.add_argument("--posterior-matrix", action="store_true", default=None,
                   help="also write posterior.bin (row-major float64 T x M)")

    p = sub.add_parser("templates", help="cut template trajectories from RUN positions")
    _common(p)
    p.add_argument("--positions")
    p.add_argument("--grid")
    p.add_argument("--dt", type=float)
    p.add_argument("--duration", type=float)
    p.add_argument("--regions", help='JSON file: [{"from": [labels], "to": [labels]}, ...]')
    p.add_argument("--collapse", action="store_true", default=None)
    p.add_argument("--both-directions", action="store_true", default=None)
    p.add_argument("--select", choices=["first", "median", "all"],
                   help="which traversal(s) of each region pair to keep")

    p = sub.add_parser("bic", help="BIC comparison of candidate models on REST spikes")
    _common(p)
    _data_args(p, positions=False)
    p.add_argument("--model", help="OP model fitted to RUN")
    p.add_argument("--rest-model", help="OP model fitted to the REST spikes")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-prior-samples", type=int)
    p.add_argument("--kappa-bar", type=int)
    p.add_argument("--train-spikes")
    p.add_argument("--train-positions")
    p.add_argument("--train-duration", type=float)

    p = sub.add_parser("detect-replay", help="template replay detection")
    _common(p)
    _data_args(p, positions=False)
    p.add_argument("--model")
    p.add_argument("--templates", help="templates JSON")
    p.add_argument("--omega-star", type=float)
    p.add_argument("--compressions", help='e.g. "1-20" or "1,2,5"')

    p = sub.add_parser("detect-swr", help="sharp-wave ripple detection")
    _common(p)
    p.add_argument("--lfp", help="LFP CSV time_s,value_uV or binary container")
    p.add_argument("--rate", type=float, help="sampling rate (Hz)")
    p.add_argument("--band", help='pass band "lo,hi" (Hz)')
    p.add_argument("--n-sd", type=float)
    p.add_argument("--min-duration", type=float)
    p.add_argument("--max-duration", type=float)
    p.add_argument("--min-amplitude", type=float)
    p.add_argument("--max-amplitude", type=float)
    p.add_argument("--merge-gap", type=float)

    p = sub.add_parser("correlate", help="replay/ripple cross-correlogram")
    _common(p)
    p.add_argument("--events", help="replay events CSV")
    p.add_argument("--swr", help="ripple events CSV")
    p.add_argument("--duration", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--max-lag", type=float)
    p.add_argument("--alpha-level", type=float, help="band level before Bonferroni")

    for name, hlp in (("simulate", "simulate RUN-like data from a model"),
                      ("simulate-replay", "simulate REST spikes with planted replays")):
        p = sub.add_parser(name, help=hlp)
        _common(p)
        p.add_argument("--model", help="ground-truth model JSON (needs --grid)")
        p.add_argument("--grid")
        p.add_argument("--protocol", choices=["linear-track", "t-maze"])
        p.add_argument("--T", type=int, help="number of bins")
        p.add_argument("--dt", type=float)
        p.add_argument("--seed", type=int)
        if name == "simulate-replay":
            p.add_argument("--templates")
            p.add_argument("--n-events", type=int, help="planted events per template")

    p = sub.add_parser("evaluate", help="ROC and Jaccard of detections against a ledger")
    _common(p)
    p.add_argument("--events")
    p.add_argument("--ledger")
    p.add_argument("--dt", type=float, help="base bin width of the ledger (s)")
    p.add_argument("--bin-dt", type=float, help="classification bin width (s)")
    p.add_argument("--omega-grid", help='comma-separated thresholds')

    p = sub.add_parser("report", help="aggregate results into plot-ready tables")
    _common(p)
    _data_args(p, positions=False)
    p.add_argument("--model")
    p.add_argument("--templates")
    p.add_argument("--events")
    p.add_argument("--correlogram")
    p.add_argument("--metrics", action="append", help="JSON files to merge (repeatable)")
    return ap


# ----------------------------------------------------------- config merge

DEFAULTS = {
    "cell_size": 10.0, "epoch": "RUN", "H": 1500, "kappa_bar": 10, "alpha": 0.5, "beta": 0.01,
    "delta": 4.0, "omega": 1.0, "psi_scale": None, "spikes_only": False, "xi_method": "exact",
    "kappa_method": "bic", "progress_every": 0, "method": "op-viterbi", "viterbi": "recursive",
    "bd_prior": "occupancy", "lp_bandwidth": 2.0, "posterior_matrix": False, "collapse": False,
    "both_directions": False, "select": "first", "n_prior_samples": 10,
    "omega_star": 20.0, "compressions": "1-20", "band": "120,250", "n_sd": 3.5,
    "min_duration": 0.03, "max_duration": 0.5, "min_amplitude": 20.0, "max_amplitude": 800.0,
    "merge_gap": 0.05, "tau": 0.25, "alpha_level": 0.05, "max_lag": 5.0, "T": 10_000, "n_events": 20,
    "omega_grid": "1,2,5,10,20,50,100,150,200,500,1000", "verbose": False,
}

_META = {"config", "out", "command"}


def resolve(ns: argparse.Namespace) -> dict:
    """Merge defaults, config file and explicit flags (in rising priority)."""
    file_cfg = {}
    if ns.config:
        file_cfg = fio.read_json(ns.config)
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
    keys = [k for k in vars(ns) if k not in _META]
    unknown = set(file_cfg) - set(keys) - {"out"}
    if unknown:
        raise ConfigError(f"unknown config keys for {ns.command}: {sorted(unknown)}")
    cfg = {}
    for k in keys:
        v = getattr(ns, k)
        if v is None:
            v = file_cfg.get(k, DEFAULTS.get(k))
        cfg[k] = v
    out = ns.out if ns.out is not None else file_cfg.get("out")
    if not out:
        raise ConfigError("an output directory is required (--out)")
    cfg["out"] = out
    if ns.command in STOCHASTIC and cfg.get("seed") is None:
        raise ConfigError(f"{ns.command} requires an explicit --seed")
    return cfg


def _echo(cfg: dict) -> dict:
    """The configuration as recorded in outputs (no paths of the run or thread counts)."""
    return {k: v for k, v in cfg.items() if k not in ("out", "threads", "verbose")}


def _need(cfg: dict, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise ConfigError(f"missing required parameter --{k.replace('_', '-')}")


def parse_compressions(spec) -> list:
    if isinstance(spec, (list, tuple)):
        items = list(spec)
    else:
        items = []
        for part in str(spec).split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                a, b = part.split("-", 1)
                items.extend(range(int(a), int(b) + 1))
            else:
                items.append(part)
    out = []
    for c in items:
        try:
            f = float(c)
        except (TypeError, ValueError):
            raise ConfigError(f"compression rate must be a positive integer, got {c!r}")
        if f != int(f) or f < 1:
            raise ConfigError(f"compression rate must be a positive integer, got {c!r}")
        out.append(int(f))
    if not out:
        raise ConfigError("no compression rates given")
    return sorted(set(out))


def _floats(spec) -> list:
    if isinstance(spec, (list, tuple)):
        return [float(v) for v in spec]
    try:
        return [float(v) for v in str(spec).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {spec!r}") from exc


# ------------------------------------------------------------ data access

def _grid(cfg):
    from .ingest import SpatialGrid
    _need(cfg, "grid")
    try:
        return SpatialGrid.load(cfg["grid"])
    except (OSError, KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, OphmmError):
            raise
        raise DataError(f"cannot load grid {cfg['grid']}: {exc}") from exc


def _model(path, grid):
    from .model import ModelParams
    return ModelParams.from_json(fio.read_json(path), grid)


def _recording(spikes_path, positions_path, dt, duration, n_cells):
    from .ingest import RawRecording
    spikes = fio.read_spikes_csv(spikes_path, n_cells)
    pt = pxy = None
    if positions_path:
        pt, pxy = fio.read_positions_csv(positions_path)
    if duration is None:
        last = max([st[-1] for st in spikes if st.size] + ([pt[-1]] if pt is not None and
                                                           pt.size else []) + [0.0])
        duration = max(1, math.ceil(last / dt - 1e-9)) * dt
        if last >= duration:
            duration += dt
    return RawRecording(spikes, float(duration), pt, pxy)


def _binned(cfg, grid=None, n_cells=None, epoch="RUN", spikes="spikes", positions="positions",
            duration="duration"):
    from .ingest import bin_spikes
    _need(cfg, spikes, "dt")
    rec = _recording(cfg[spikes], cfg.get(positions), cfg["dt"], cfg.get(duration),
                     cfg.get("n_cells") or n_cells)
    return bin_spikes(rec, cfg["dt"], grid if cfg.get(positions) else None, epoch)


def _inputs(cfg, *keys):
    return [cfg[k] for k in keys if cfg.get(k)]


# ------------------------------------------------------------ subcommands

def cmd_grid(cfg, out):
    from .ingest import build_grid
    _need(cfg, "positions", "cell_size")
    _, xy = fio.read_positions_csv(cfg["positions"])
    mask = None
    if cfg.get("mask"):
        mask = np.asarray(fio.read_json(cfg["mask"]), dtype=bool)
    g = build_grid(xy, cfg["cell_size"], mask)
    path = os.path.join(out, "grid.json")
    g.save(path)
    return _inputs(cfg, "positions", "mask"), [path]


def cmd_bin(cfg, out):
    grid = _grid(cfg) if cfg.get("grid") else None
    if cfg.get("positions") and grid is None:
        raise ConfigError("binning positions needs --grid")
    data = _binned(cfg, grid, epoch=cfg["epoch"])
    path = os.path.join(out, "binned.csv")
    lab = data.position
    header = ["bin", "label"] + [f"n{c}" for c in range(data.C)]
    fio.write_csv(path, header, ([t, "" if lab is None else int(lab[t]) + 1]
                                 + data.counts[t].tolist() for t in range(data.T)))
    return _inputs(cfg, "spikes", "positions", "grid"), [path]


def _hyper(cfg, grid):
    from .model import Hyperparams
    kw = dict(kappa_bar=cfg["kappa_bar"], alpha=cfg["alpha"], beta=cfg["beta"],
              delta=cfg["delta"], omega=cfg["omega"])
    if cfg.get("psi_scale") is not None:
        kw["psi"] = np.eye(2) * float(cfg["psi_scale"]) ** 2
    return Hyperparams.for_grid(grid, **kw)


def cmd_fit(cfg, out):
    from .smc import fit
    grid = _grid(cfg)
    data = _binned(cfg, grid)
    use_pos = not cfg["spikes_only"] and data.position is not None
    res = fit(data, grid, _hyper(cfg, grid), H=cfg["H"], seed=cfg["seed"],
              ess_threshold=cfg.get("ess_threshold"), floor=cfg.get("floor"),
              use_positions=use_pos, xi_method=cfg["xi_method"], threads=cfg.get("threads"),
              progress_every=cfg["progress_every"], kappa_method=cfg["kappa_method"])
    paths = [os.path.join(out, n) for n in
             ("model.json", "model_full.json", "kappa_posterior.csv", "diagnostics.csv",
              "fit.json")]
    if res.bic_rows:
        paths.append(os.path.join(out, "kappa_selection.csv"))
        fio.write_csv(paths[-1], ["k", "particle_mass", "loglik", "n_params", "bic"],
                      res.bic_rows)
    fio.write_json(paths[0], dict(res.params.to_json(), config=_echo(cfg)))
    fio.write_json(paths[1], dict(res.full.to_json(), config=_echo(cfg)))
    fio.write_csv(paths[2], ["k", "p"], ((k + 1, float(p))
                                         for k, p in enumerate(res.kappa_posterior)))
    Kb = cfg["kappa_bar"]
    fio.write_csv(paths[3], ["t", "ess", "resampled"] + [f"p{k}" for k in range(1, Kb + 1)],
                  ([t, float(e), r] + [float(v) for v in ph]
                   for t, e, r, ph in res.diagnostics_rows()))
    fio.write_json(paths[4], {"kappa_hat": res.kappa_hat, "kappa_method": res.kappa_method,
                              "phat": res.phat.tolist(),
                              "log_evidence": res.log_evidence,
                              "n_moves": res.system.n_moves, "T": data.T,
                              "config": _echo(cfg)})
    return _inputs(cfg, "spikes", "positions", "grid"), paths


def _train_bd(cfg, grid, C):
    from .decode import fit_bd
    _need(cfg, "train_spikes", "train_positions")
    train = _binned(cfg, grid, C, spikes="train_spikes", positions="train_positions",
                    duration="train_duration")
    return fit_bd(train, grid.M), train


def cmd_decode(cfg, out):
    from . import decode as D
    grid = _grid(cfg)
    method = cfg["method"]
    params = None
    C = cfg.get("n_cells")
    if method.startswith("op"):
        _need(cfg, "model")
        params = _model(cfg["model"], grid)
        C = params.C
    data = _binned(cfg, grid, C)
    truth = data.position
    spikes = data.spikes_only()
    if method == "op-viterbi":
        dec = D.viterbi_position(params, spikes, method=cfg["viterbi"])
    elif method == "op-map":
        dec = D.map_position(params, spikes)
    elif method == "bd":
        bd, _ = _train_bd(cfg, grid, data.C)
        dec = D.decode_bd(bd, spikes, cfg["bd_prior"])
    else:
        _need(cfg, "train_spikes", "train_positions")
        train = _binned(cfg, grid, data.C, spikes="train_spikes",
                        positions="train_positions", duration="train_duration")
        dec = D.decode_lp(D.fit_lp(train, grid, cfg["lp_bandwidth"]), spikes)
    cent = grid.centroids
    path = os.path.join(out, "decoded.csv")
    rows = []
    for t in range(dec.T):
        x = int(dec.estimates[t])
        pt = ""
        if truth is not None and dec.posterior is not None:
            pt = float(dec.posterior[t, truth[t]])
        rows.append((t, x + 1, float(cent[x, 0]), float(cent[x, 1]), pt))
    fio.write_csv(path, ["t", "label", "x_px", "y_px", "posterior_at_truth"], rows)
    outs = [path]
    if cfg["posterior_matrix"] and dec.posterior is not None:
        p = os.path.join(out, "posterior.bin")
        fio.write_matrix_binary(p, dec.posterior)
        outs.append(p)
    if truth is not None:
        med, mpp = D.decoding_metrics(dec, truth, grid)
        p = os.path.join(out, "metrics.json")
        fio.write_json(p, {"method": dec.method, "median_error_px": med,
                           "mean_posterior_at_truth": None if math.isnan(mpp) else mpp})
        outs.append(p)
    return _inputs(cfg, "model", "spikes", "positions", "grid", "train_spikes",
                   "train_positions"), outs


def cmd_templates(cfg, out):
    from .replay import extract_templates
    grid = _grid(cfg)
    _need(cfg, "positions", "dt", "regions")
    t, xy = fio.read_positions_csv(cfg["positions"])
    from .ingest import RawRecording, bin_spikes
    duration = cfg.get("duration") or (math.floor(t[-1] / cfg["dt"] + 1e-9) + 1) * cfg["dt"]
    rec = RawRecording((), float(duration), t, xy)
    data = bin_spikes(rec, cfg["dt"], grid)
    spec = fio.read_json(cfg["regions"])
    try:
        regions = [([int(v) - 1 for v in r["from"]], [int(v) - 1 for v in r["to"]])
                   for r in spec]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed regions file: {exc}") from exc
    tpls = extract_templates(data.position, regions, cfg["collapse"], cfg["both_directions"],
                             cfg["select"])
    if not tpls:
        raise DataError("no region pair was traversed; no templates produced")
    path = os.path.join(out, "templates.json")
    fio.write_json(path, {"dt": cfg["dt"], "templates": [tp.to_json() for tp in tpls]})
    return _inputs(cfg, "positions", "grid", "regions"), [path]


def _templates(path):
    from .replay import Template
    obj = fio.read_json(path)
    items = obj.get("templates", []) if isinstance(obj, dict) else obj
    tpls = [Template.from_json(o) for o in items]
    if not tpls:
        raise ConfigError("templates file holds no templates")
    ids = [tp.id for tp in tpls]
    if len(set(ids)) != len(ids):
        raise DataError("template ids must be unique")
    return tpls


def cmd_bic(cfg, out):
    from .conjugate import sample_prior
    from .model import Hyperparams
    from .replay import assess_fit
    grid = _grid(cfg)
    _need(cfg, "model", "rest_model")
    run = _model(cfg["model"], grid)
    rest = _model(cfg["rest_model"], grid)
    data = _binned(cfg, None, run.C, epoch="REST")
    hyper = Hyperparams.for_grid(grid, kappa_bar=cfg["kappa_bar"])
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg["seed"]), 37]))
    priors = [sample_prior(hyper, grid, run.C, rng) for _ in range(cfg["n_prior_samples"])]
    bd = None
    if cfg.get("train_spikes"):
        bd, _ = _train_bd(cfg, grid, run.C)
    rep = assess_fit(data, run, rest, priors, bd)
    path = os.path.join(out, "bic.csv")
    fio.write_csv(path, ["label", "loglik", "n_params", "bic"], rep.to_rows())
    p2 = os.path.join(out, "bic.json")
    fio.write_json(p2, {"gate_passes": bool(rep.gate_passes), "T": data.T})
    return _inputs(cfg, "model", "rest_model", "spikes", "grid", "train_spikes",
                   "train_positions"), [path, p2]


EVENT_HEADER = ["template_id", "c", "t_rep", "start_s", "end_s", "omega_log10"]


def cmd_detect_replay(cfg, out):
    from .replay import detect
    grid = _grid(cfg)
    _need(cfg, "model", "templates", "spikes", "dt")
    params = _model(cfg["model"], grid)
    tpls = _templates(cfg["templates"])
    comps = parse_compressions(cfg["compressions"])
    rec = _recording(cfg["spikes"], None, cfg["dt"], cfg.get("duration"), params.C)
    if rec.n_cells != params.C:
        raise DataError(f"spikes have {rec.n_cells} cells, model has {params.C}")
    events = detect(params, rec, tpls, comps, cfg["omega_star"], cfg["dt"])
    path = os.path.join(out, "events.csv")
    fio.write_csv(path, EVENT_HEADER, ((e.template_id, e.c, e.t_rep + 1, e.start_s, e.end_s,
                                        e.omega_log10) for e in events))
    return _inputs(cfg, "model", "templates", "spikes", "grid"), [path]


def read_events(path, base_dt: float) -> list:
    """Replay events from an events CSV (``t_rep`` is 1-based on disk)."""
    from .replay import ReplayEvent
    out = []
    try:
        for r in fio.read_csv_rows(path, EVENT_HEADER):
            tid, c, t = int(r[0]), int(r[1]), int(r[2]) - 1
            s0, s1, lg = float(r[3]), float(r[4]), float(r[5])
            a = int(round((s1 - s0) * c / base_dt))
            out.append(ReplayEvent(tid, t, c, lg * math.log(10.0), a, base_dt))
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed event row: {exc}") from exc
    return out


def cmd_detect_swr(cfg, out):
    from .events import detect_swr
    _need(cfg, "lfp")
    trace, rate, t0 = fio.read_lfp(cfg["lfp"], cfg.get("rate"))
    band = tuple(_floats(cfg["band"]))
    if len(band) != 2:
        raise ConfigError("band needs two frequencies")
    ev = detect_swr(trace, rate, band, cfg["n_sd"], cfg["min_duration"], cfg["max_duration"],
                    cfg["min_amplitude"], cfg["max_amplitude"], cfg["merge_gap"], t0)
    path = os.path.join(out, "swr.csv")
    fio.write_csv(path, ["peak_s", "start_s", "end_s", "amplitude_uV"],
                  ((e.peak_time, e.start_time, e.end_time, e.peak_amplitude) for e in ev))
    return _inputs(cfg, "lfp"), [path]


def cmd_correlate(cfg, out):
    from .events import cross_correlogram
    _need(cfg, "events", "swr", "duration")
    rep = [float(r[3]) for r in fio.read_csv_rows(cfg["events"], EVENT_HEADER)]
    rip = [float(r[0]) for r in fio.read_csv_rows(
        cfg["swr"], ["peak_s", "start_s", "end_s", "amplitude_uV"])]
    cg = cross_correlogram(rep, rip, cfg["tau"], cfg["max_lag"], cfg["duration"],
                           cfg["alpha_level"])
    path = os.path.join(out, "correlogram.csv")
    fio.write_csv(path, ["u", "J", "rho_hat", "sqrt_rho", "level", "lo", "hi"], cg.rows())
    return _inputs(cfg, "events", "swr"), [path]


def _truth(cfg):
    """Ground-truth model and grid from a protocol or a model JSON."""
    from . import sim
    if cfg.get("protocol"):
        proto = {"linear-track": sim.linear_track_protocol,
                 "t-maze": sim.tmaze_protocol}[cfg["protocol"]]()
        theta = proto.theta
        if cfg.get("dt") is not None:
            from .model import ModelParams
            theta = ModelParams(theta.P, theta.lam, theta.xi, theta.sigma, theta.grid, cfg["dt"])
        return theta, proto
    _need(cfg, "model")
    grid = _grid(cfg)
    theta = _model(cfg["model"], grid)
    if cfg.get("dt") is None and theta.dt is None:
        raise ConfigError("dt is required when the model carries none")
    return theta, None


def _write_truth(out, theta, proto):
    if proto is None:
        return []
    pg = os.path.join(out, "grid.json")
    pm = os.path.join(out, "model_true.json")
    theta.grid.save(pg)
    fio.write_json(pm, theta.to_json())
    return [pg, pm]


def cmd_simulate(cfg, out):
    from .ingest import spikes_to_recording
    from .sim import simulate
    theta, proto = _truth(cfg)
    dt = cfg.get("dt") or theta.dt
    ss = np.random.SeedSequence([int(cfg["seed"]), 11])
    r1, r2 = (np.random.default_rng(s) for s in ss.spawn(2))
    data, s = simulate(theta, int(cfg["T"]), r1, dt)
    rec = spikes_to_recording(data.counts, dt, r2, data.position, theta.grid)
    outs = [os.path.join(out, n) for n in ("spikes.csv", "positions.csv", "states.csv",
                                            "session.json")]
    fio.write_spikes_csv(outs[0], rec.spikes)
    fio.write_positions_csv(outs[1], rec.pos_times, rec.pos_xy)
    fio.write_csv(outs[2], ["t", "state", "label"],
                  ((t, int(s[t + 1]) + 1, int(data.position[t]) + 1) for t in range(data.T)))
    fio.write_json(outs[3], {"duration": rec.duration, "dt": dt, "C": data.C, "T": data.T})
    return _inputs(cfg, "model", "grid"), outs + _write_truth(out, theta, proto)


def cmd_simulate_replay(cfg, out):
    from .ingest import spikes_to_recording
    from .replay import Template
    from .sim import simulate, simulate_replay
    theta, proto = _truth(cfg)
    dt = cfg.get("dt") or theta.dt
    ss = np.random.SeedSequence([int(cfg["seed"]), 13])
    r0, r1, r2 = (np.random.default_rng(s) for s in ss.spawn(3))
    if cfg.get("templates"):
        tpls = _templates(cfg["templates"])
    elif proto is not None:
        run, _ = simulate(theta, int(cfg["T"]), r0, dt)
        tpls = proto.templates(run.position)
        if len(tpls) != len(proto.template_regions):
            raise NumericalError("simulated RUN did not traverse every template region")
    else:
        raise ConfigError("simulate-replay needs --templates or --protocol")
    data, ledger = simulate_replay(theta, int(cfg["T"]), tpls, int(cfg["n_events"]), r1, dt)
    rec = spikes_to_recording(data.counts, dt, r2)
    outs = [os.path.join(out, n) for n in ("spikes.csv", "ledger.json", "templates.json",
                                            "session.json")]
    fio.write_spikes_csv(outs[0], rec.spikes)
    fio.write_json(outs[1], dict(ledger.to_json(), dt=dt))
    fio.write_json(outs[2], {"dt": dt, "templates": [
        (tp if isinstance(tp, Template) else Template(i, tp)).to_json()
        for i, tp in enumerate(tpls)]})
    fio.write_json(outs[3], {"duration": rec.duration, "dt": dt, "C": data.C, "T": data.T})
    return _inputs(cfg, "model", "grid", "templates"), outs + _write_truth(out, theta, proto)


def _ledger(path):
    from .sim import PlantedLedger
    obj = fio.read_json(path)
    try:
        ev = [(int(e["template_id"]), int(e["start_bin"]), int(e["length"]))
              for e in obj["events"]]
        T = int(obj["T"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed ledger: {exc}") from exc
    return PlantedLedger(ev, np.zeros(0, dtype=np.int64), np.zeros(T, dtype=np.int64)), \
        obj.get("dt")


def cmd_evaluate(cfg, out):
    from .sim import classify_replay, detected_planted
    _need(cfg, "events", "ledger")
    ledger, ldt = _ledger(cfg["ledger"])
    dt = cfg.get("dt") or ldt
    if dt is None:
        raise ConfigError("the ledger bin width is required (--dt)")
    events = read_events(cfg["events"], dt)
    bin_dt = cfg.get("bin_dt") or dt
    n_bins = int(round(ledger.x.size * dt / bin_dt))
    grid = _floats(cfg["omega_grid"])
    roc = classify_replay(events, ledger, n_bins, bin_dt, grid, dt)
    path = os.path.join(out, "roc.csv")
    fio.write_csv(path, ["omega_star", "tp", "fp", "fn", "tn", "tpr", "fpr", "jaccard"],
                  ((om, b.tp, b.fp, b.fn, b.tn, b.tpr, b.fpr, b.jaccard) for om, b in roc))
    p2 = os.path.join(out, "evaluation.json")
    summary = {}
    for om in grid:
        sel = [e for e in events if e.log_omega > math.log(om)]
        summary[repr(float(om))] = int(detected_planted(sel, ledger, dt).sum())
    fio.write_json(p2, {"planted": len(ledger.events), "detected_by_omega_star": summary})
    return _inputs(cfg, "events", "ledger"), [path, p2]


def cmd_report(cfg, out):
    outs = []
    report: dict = {"version": __version__}
    if cfg.get("events"):
        rows = fio.read_csv_rows(cfg["events"], EVENT_HEADER)
        report["n_events"] = len(rows)
        report["events_by_template"] = {}
        for r in rows:
            report["events_by_template"][r[0]] = report["events_by_template"].get(r[0], 0) + 1
    if cfg.get("correlogram"):
        rows = fio.read_csv_rows(cfg["correlogram"],
                                 ["u", "J", "rho_hat", "sqrt_rho", "level", "lo", "hi"])
        above = [float(r[0]) for r in rows if r[6] and float(r[3]) > float(r[6])]
        below = [float(r[0]) for r in rows if r[5] and float(r[3]) < float(r[5])]
        report["correlogram"] = {"lags_above_band": above, "lags_below_band": below}
    for m in cfg.get("metrics") or []:
        report.setdefault("metrics", {})[os.path.basename(m)] = fio.read_json(m)
    if cfg.get("model") and cfg.get("spikes"):
        from .decode import position_posterior
        from .replay import ScoreScan
        grid = _grid(cfg)
        params = _model(cfg["model"], grid)
        data = _binned(cfg, None, params.C, epoch="REST")
        post = position_posterior(params, data)
        p = os.path.join(out, "posterior_heatmap.csv")
        fio.write_csv(p, ["t"] + [f"x{m + 1}" for m in range(grid.M)],
                      ([t] + post[t].tolist() for t in range(data.T)))
        outs.append(p)
        if cfg.get("templates"):
            tpls = _templates(cfg["templates"])
            scan = ScoreScan(params, data)
            traces = {tp.id: scan.log_omega(tp.labels) / math.log(10.0) for tp in tpls}
            p = os.path.join(out, "score_traces.csv")
            fio.write_csv(p, ["t"] + [f"template_{tp.id}_log10_omega" for tp in tpls],
                          ([t + 1] + [float(traces[tp.id][t]) if t < traces[tp.id].size else ""
                                      for tp in tpls] for t in range(data.T)))
            outs.append(p)
    p = os.path.join(out, "report.json")
    fio.write_json(p, report)
    outs.insert(0, p)
    return _inputs(cfg, "events", "correlogram", "model", "spikes", "grid", "templates") + \
        list(cfg.get("metrics") or []), outs


COMMANDS = {
    "grid": cmd_grid, "bin": cmd_bin, "fit": cmd_fit, "decode": cmd_decode,
    "templates": cmd_templates, "bic": cmd_bic, "detect-replay": cmd_detect_replay,
    "detect-swr": cmd_detect_swr, "correlate": cmd_correlate, "simulate": cmd_simulate,
    "simulate-replay": cmd_simulate_replay, "evaluate": cmd_evaluate, "report": cmd_report,
}


# ------------------------------------------------------------------- main

def _error(exc: Exception, code: int) -> int:
    rec = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(rec), file=sys.stderr)
    return code


def run(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    tmp = None
    try:
        cfg = resolve(ns)
        logging.basicConfig(level=logging.INFO if cfg.get("verbose") else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if cfg.get("threads") is not None:
            if cfg["threads"] < 1:
                raise ConfigError("threads must be positive")
            import numba
            numba.set_num_threads(min(int(cfg["threads"]), numba.config.NUMBA_NUM_THREADS))
        out = cfg["out"]
        os.makedirs(out, exist_ok=True)
        tmp = tempfile.mkdtemp(prefix=".partial-", dir=out)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            inputs, outputs = COMMANDS[ns.command](cfg, tmp)
        man = os.path.join(tmp, "manifest.json")
        fio.write_manifest(man, ns.command, __version__, _echo(cfg), inputs, outputs)
        for p in outputs + [man]:
            os.replace(p, os.path.join(out, os.path.basename(p)))
        return 0
    except OphmmError as exc:
        return _error(exc, exc.exit_code)
    except (FileNotFoundError, PermissionError) as exc:
        return _error(exc, DataError.exit_code)
    except MemoryError as exc:
        return _error(exc, NumericalError.exit_code)
    except Exception as exc:  # unexpected: still report as JSON and clean up
        log.debug("unexpected failure", exc_info=True)
        return _error(exc, OphmmError.exit_code)
    finally:
        if tmp is not None and os.path.isdir(tmp):
            shutil.rmtree(tmp, ignore_errors=True)


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
