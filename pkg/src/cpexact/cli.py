"""``cpx`` command-line front end.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import sys
from typing import Optional

import click
import numpy as np

from .model import ModelConfig, ModelError, TimeSeries, load_preset


def ingest_csv(path) -> TimeSeries:
    """One number per line; a non-numeric first line is taken as a header."""
    if path == "-":
        text = sys.stdin.read()
    else:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ModelError(f"cannot read {path}: {exc}") from None
    vals = []
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        try:
            v = float(s)
        except ValueError:
            if lineno == 1:
                continue
            raise ModelError(f"line {lineno}: cannot parse {s!r}") from None
        if not math.isfinite(v):
            raise ModelError(f"line {lineno}: non-finite value {s!r}")
        vals.append(v)
    if not vals:
        raise ModelError(f"no data in {path}")
    return TimeSeries(np.array(vals))


def _write(out: Optional[str], text: str) -> None:
    if out in (None, "-"):
        click.echo(text, nl=not text.endswith("\n"))
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _model(model: Optional[str], preset: Optional[str]) -> ModelConfig:
    if model and preset:
        raise click.UsageError("give either --model or --preset, not both")
    if model:
        return ModelConfig.from_json(model)
    if preset:
        return load_preset(preset)
    raise click.UsageError("a model is required: --model model.json or --preset name")


def _seed(seed: Optional[int]) -> int:
    if seed is None:
        seed = int(np.random.SeedSequence().entropy % (2**63))
        click.echo(f"seed: {seed}", err=True)
    return seed


def _pipeline(data_path, model, preset):
    from .forward import run_filter
    from .posterior import backward_weights

    data = ingest_csv(data_path)
    cfg = _model(model, preset)
    fwd = run_filter(data, cfg)
    return data, cfg, fwd, backward_weights(fwd)


def _csv(rows, header=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return repr(float(x))


data_opt = click.option("--data", "data_path", default="-", show_default=True, help="Series CSV ('-' for stdin).")
model_opt = click.option("--model", type=click.Path(exists=True, dir_okay=False), help="Model JSON.")
preset_opt = click.option("--preset", "model_preset", help="Bundled model preset name.")
out_opt = click.option("--out", default=None, help="Output path (stdout if omitted).")


@click.group()
def cli():
    """Exact Bayesian changepoint inference."""
    threads = os.environ.get("CPX_THREADS")
    if threads:
        import numba

        try:
            numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
        except ValueError:
            raise click.UsageError(f"CPX_THREADS must be an integer, got {threads!r}")


def _prune_flag(text: Optional[str]):
    if text is None:
        return None
    from .model import Pruning

    try:
        a, b = text.split(",")
        return Pruning(int(a), float(b))
    except ValueError:
        raise click.UsageError(f"--prune must look like T,Tprime, got {text!r}") from None


@cli.command("filter")
@data_opt
@model_opt
@preset_opt
@click.option("--prune", "prune_text", default=None, help="T,Tprime; overrides the model's pruning.")
@click.option("--density", default=None, help="Also write the run-length table as CSV (i, j, c_ji).")
@out_opt
def filter_cmd(data_path, model, model_preset, prune_text, density, out):
    """Run the forward filter and report the marginal likelihood."""
    from .forward import run_filter

    data = ingest_csv(data_path)
    cfg = _model(model, model_preset)
    pr = _prune_flag(prune_text)
    if pr is not None:
        cfg = cfg.replace(prune=pr)
    fwd = run_filter(data, cfg)
    res = {
        "n": data.n,
        "log_marginal_likelihood": fwd.log_marginal_likelihood(),
        "particles": fwd.grid.size,
        "max_live": int(fwd.particle_counts.max()),
        "clamped_steps": fwd.clamped_steps,
        "log_z": [float(v) for v in fwd.log_z],
        "particle_counts": [int(v) for v in fwd.particle_counts],
    }
    _write(out, json.dumps(res, indent=2) + "\n")
    if density:
        g = fwd.grid
        rows = ([int(i), int(j), _fmt(w)] for i, j, w in zip(g.i, g.j, g.w))
        _write(density, _csv(rows, ["i", "j", "c_ji"]))


@cli.command("map")
@data_opt
@model_opt
@preset_opt
@out_opt
def map_cmd(data_path, model, model_preset, out):
    """Most probable changepoint set."""
    from .posterior import map_segmentation

    _, _, _, bt = _pipeline(data_path, model, model_preset)
    cfg, val = map_segmentation(bt, with_value=True)
    _write(out, json.dumps({"changepoints": list(cfg.taus), "log_posterior": val}) + "\n")


@cli.command("sample")
@data_opt
@model_opt
@preset_opt
@click.option("--draws", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=None)
@out_opt
def sample_cmd(data_path, model, model_preset, draws, seed, out):
    """Exact posterior changepoint samples, one sorted list per line."""
    from .credible import SampleSet
    from .posterior import sample_changepoints

    if draws < 1:
        raise click.UsageError("--draws must be positive")
    data, _, _, bt = _pipeline(data_path, model, model_preset)
    rng = np.random.default_rng(_seed(seed))
    draws_ = sample_changepoints(bt, rng, draws)
    s = SampleSet([d.taus for d in draws_], data.n)
    if out in (None, "-"):
        buf = io.StringIO()
        buf.write(f"# n={data.n}\n")
        csv.writer(buf, lineterminator="\n").writerows(sorted(x) for x in s.samples)
        _write(None, buf.getvalue())
    else:
        s.to_csv(out)


@cli.command("entropy")
@data_opt
@model_opt
@preset_opt
def entropy_cmd(data_path, model, model_preset):
    """Entropy of the posterior changepoint law (nats)."""
    from .posterior import entropy

    _, _, _, bt = _pipeline(data_path, model, model_preset)
    click.echo(_fmt(entropy(bt)))


@cli.command("marginals")
@data_opt
@model_opt
@preset_opt
@out_opt
def marginals_cmd(data_path, model, model_preset, out):
    """Changepoint marginals and height summaries per timepoint."""
    from .pointwise import marginal_report

    _, _, _, bt = _pipeline(data_path, model, model_preset)
    rep = marginal_report(bt)
    rows = [[r[0]] + [_fmt(v) for v in r[1:]] for r in rep.rows()]
    _write(out, _csv(rows, ["i", "q_tilde", "mean", "sd", "skew", "band_lo", "band_hi"]))


@cli.command("em")
@data_opt
@model_opt
@preset_opt
@click.option("--targets", default="q", show_default=True, help="Comma list from q, tau, sigma, mu.")
@click.option("--tol", type=float, default=1e-6, show_default=True)
@click.option("--max-iter", type=int, default=200, show_default=True)
@click.option("--osc-window", type=int, default=8, show_default=True)
@out_opt
def em_cmd(data_path, model, model_preset, targets, tol, max_iter, osc_window, out):
    """Estimate parameters by EM; writes the full trace as JSON."""
    from .em import em_run

    data = ingest_csv(data_path)
    cfg = _model(model, model_preset)
    tg = [t.strip() for t in targets.split(",") if t.strip()]
    trace = em_run(data, cfg, tg, tol=tol, max_iter=max_iter, osc_window=osc_window)
    _write(out, json.dumps(trace.to_dict(), indent=2) + "\n")


def _range(text: str):
    try:
        a, b, k = text.split(":")
        a, b, k = float(a), float(b), int(k)
    except ValueError:
        raise click.UsageError(f"--range must look like a:b:steps, got {text!r}") from None
    if k < 1:
        raise click.UsageError("--range needs at least one step")
    return np.linspace(a, b, k)


@cli.command("loglik-grid")
@data_opt
@model_opt
@preset_opt
@click.option("--param", required=True, help="Parameter to vary (q, tau, sigma, ...).")
@click.option("--range", "rng_text", required=True, help="a:b:steps")
@out_opt
def loglik_grid_cmd(data_path, model, model_preset, param, rng_text, out):
    """Marginal log-likelihood and MAP size over a parameter grid."""
    from .em import _apply
    from .forward import run_filter
    from .posterior import backward_weights, map_segmentation

    data = ingest_csv(data_path)
    cfg = _model(model, model_preset)
    known = set(cfg.observation.params()) | {"q"}
    if param not in known:
        raise click.UsageError(f"unknown parameter {param!r}; choose from {sorted(known)}")
    rows = []
    for v in _range(rng_text):
        m = _apply(cfg, {param: float(v)})
        fwd = run_filter(data, m)
        mp = map_segmentation(backward_weights(fwd))
        rows.append([_fmt(v), _fmt(fwd.log_marginal_likelihood()), len(mp)])
    _write(out, _csv(rows, ["param", "loglik", "map_count"]))


def _window(text: str):
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise click.UsageError(f"--window must look like lo:hi, got {text!r}") from None
    if hi < lo:
        raise click.UsageError("empty window")
    return range(lo, hi + 1)


@cli.command("credible")
@click.option("--samples", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--n", "n_override", type=int, default=None, help="Series length if not recorded in the samples.")
@click.option("--alpha", type=float, default=None)
@click.option("--ilp", default=None, help="Write the covering program in LP format instead.")
@out_opt
def credible_cmd(samples, n_override, alpha, ilp, out):
    """Greedy credible-region ladder (or LP export with --ilp)."""
    from .credible import SampleSet, export_ilp, greedy_ladder

    s = SampleSet.from_csv(samples, n_override)
    if ilp:
        if alpha is None:
            raise click.UsageError("--ilp needs --alpha")
        export_ilp(s, alpha, ilp)
        return
    ladder = greedy_ladder(s)
    if alpha is not None:
        _write(out, ",".join(str(v) for v in sorted(ladder.region_for_alpha(alpha))) + "\n")
        return
    rows = [[_fmt(c), ",".join(str(v) for v in sorted(r))] for c, r in ladder.steps]
    _write(out, _csv(rows, ["coverage", "region"]))


@cli.command("ilp-export")
@click.option("--samples", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--n", "n_override", type=int, default=None)
@click.option("--alpha", type=float, required=True)
@click.option("--out", required=True, help="LP file to write.")
def ilp_export_cmd(samples, n_override, alpha, out):
    """Write the covering program for one alpha in LP format."""
    from .credible import SampleSet, export_ilp

    export_ilp(SampleSet.from_csv(samples, n_override), alpha, out)


@cli.command("importance")
@click.option("--samples", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--n", "n_override", type=int, default=None)
@click.option("--window", required=True, help="lo:hi (inclusive).")
def importance_cmd(samples, n_override, window):
    """Smallest alpha whose greedy region avoids the window."""
    from .credible import SampleSet, greedy_ladder, importance

    s = SampleSet.from_csv(samples, n_override)
    click.echo(_fmt(importance(greedy_ladder(s), _window(window))))


@cli.command("simulate")
@click.option("--preset", "sim_preset", type=click.Choice(["emstudy", "intro"]), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--n", type=int, default=None, help="Override the series length.")
@click.option("--k", type=int, default=None, help="Override the number of changepoints.")
@click.option("--allow-first", is_flag=True, help="Allow a changepoint at timepoint 1.")
@out_opt
@click.option("--truth", default=None, help="Write true changepoints and heights as JSON.")
def simulate_cmd(sim_preset, seed, n, k, allow_first, out, truth):
    """Generate a synthetic series."""
    from .simulate import gen_piecewise, preset_spec

    ov = {"allow_first": allow_first}
    if n is not None:
        ov["n"] = n
    if k is not None:
        ov["k"] = k
        ov["q"] = None
    spec = preset_spec(sim_preset, **ov)
    rng = np.random.default_rng(_seed(seed))
    data, tr = gen_piecewise(spec, rng)
    _write(out, "".join(_fmt(v) + "\n" for v in data.values))
    if truth:
        tr.to_json(truth)


@cli.command("median")
@data_opt
def median_cmd(data_path):
    """Robust location for the Laplace prior (data median)."""
    from .em import robust_median

    click.echo(_fmt(robust_median(ingest_csv(data_path).values)))


def main(argv=None) -> int:
    from .em import EMError

    try:
        cli.main(args=argv, prog_name="cpx", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except ModelError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except (ArithmeticError, EMError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 2
    return 0

