"""Command-line front end.

``ftsgc {simulate|fit|forecast|test-causality} --config FILE --seed N --out DIR``

The config file (TOML or JSON) holds :class:`RunConfig` fields under
their own names. ``--seed`` and ``--out`` override the file. Every report
is written with sorted keys and ``repr`` floats so identical invocations
produce identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evidence, gibbs, simulate, statespace
from .errors import ConfigError, DegenerateInput, FtsgcError
from .ingest import read_long_csv, read_many
from .model import (
    FULL,
    RESTRICTED,
    UNRESTRICTED,
    FunctionalSample,
    ModelSpec,
    kernel_surface,
    make_design,
    state_from_dict,
    state_to_dict,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("ftsgc")

SUBCOMMANDS = ("simulate", "fit", "forecast", "test-causality")
CHECKPOINT_VERSION = 1


@dataclass
class RunConfig:
    subcommand: str = ""
    input: list = field(default_factory=list)
    series: list | None = None
    response: str | None = None
    cause: str | None = None
    vector_series: list = field(default_factory=list)
    hypothesis: str | None = None
    M: int | None = None
    iterations: int = 1000
    burn_in: int | None = None
    thin: int = 1
    n_factors: int = 3
    mean_basis_size: int | None = None
    kernel_basis_size: int = 8
    horizons: list = field(default_factory=lambda: [1, 5])
    out: str = "."
    seed: int = 0
    checkpoint_every: int = 0
    stop_after: int | None = None
    resume_from: str | None = None
    workers: int = 1
    # simulation study
    scenarios: list = field(default_factory=lambda: list(simulate.SCENARIOS))
    T: int = 100
    replicates: int = 20
    test_size: int = 20
    noise_sd: float = 0.2
    gp_length: float = 0.2
    gp_sd: float = 1.0
    warmup: int = 50
    forecast_draws: int = 50

    def gibbs_config(self) -> gibbs.GibbsConfig:
        try:
            return gibbs.GibbsConfig(self.iterations, self.burn_in, self.thin, self.seed, self.n_factors,
                                     self.mean_basis_size, self.kernel_basis_size)
        except ValueError as exc:
            raise ConfigError(str(exc), operation="load_config") from None


def load_config(path: str | None, subcommand: str, seed: int | None = None, out: str | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}", operation="load_config") from None
        try:
            raw = json.loads(text) if p.suffix.lower() == ".json" else tomllib.loads(text)
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot parse config {p}: {exc}", operation="load_config") from None
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}", operation="load_config")
    if raw.get("subcommand", subcommand) != subcommand:
        raise ConfigError(f"config is for {raw['subcommand']!r}, not {subcommand!r}", operation="load_config")
    raw["subcommand"] = subcommand
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    cfg = RunConfig(**raw)
    if cfg.M is not None and cfg.M < 3:
        raise ConfigError("M must be at least 3", operation="load_config")
    if subcommand != "simulate":
        if not cfg.input:
            raise ConfigError("at least one input file is required", operation="load_config")
        for f in cfg.input:
            if not Path(f).is_file():
                raise ConfigError(f"input file {f} does not exist", operation="load_config")
    if any(int(h) < 1 for h in cfg.horizons):
        raise ConfigError("horizons must be at least 1", operation="load_config")
    cfg.gibbs_config()
    return cfg


# --------------------------------------------------------------------------
# output helpers


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


# --------------------------------------------------------------------------
# data and models


def ingest(path, series=None, vector_series=()) -> FunctionalSample:
    """Read one long-format CSV file (see :mod:`ftsgc.ingest`)."""
    return read_long_csv(path, series, vector_series)


def load_sample(cfg: RunConfig) -> FunctionalSample:
    order = cfg.series
    if cfg.response is not None or cfg.cause is not None:
        if cfg.response is None or cfg.cause is None:
            raise ConfigError("response and cause must be given together", operation="load_config")
        if cfg.response == cfg.cause:
            raise DegenerateInput("response and cause are the same series", operation="test_causality")
        order = [cfg.response, cfg.cause]
    sample = read_many(cfg.input, order, cfg.vector_series)
    if cfg.M is not None:
        for n, sid in enumerate(sample.series_ids):
            if sample.grid.kinds[n] == "functional" and sample.grid.sizes[n] != cfg.M:
                raise ConfigError(f"series {sid} has {sample.grid.sizes[n]} grid points, config says M={cfg.M}",
                                  operation="load_config")
    return sample


def _hypothesis(cfg: RunConfig, sample: FunctionalSample) -> ModelSpec:
    hyp = cfg.hypothesis or (UNRESTRICTED if cfg.response is not None else FULL)
    if hyp not in (FULL, UNRESTRICTED, RESTRICTED):
        raise ConfigError(f"unknown hypothesis {hyp!r}", operation="load_config")
    if sample.K < 2 and hyp != FULL:
        hyp = FULL
    return ModelSpec(hyp, sample.K)


def _design(cfg: RunConfig, sample: FunctionalSample, spec: ModelSpec):
    return make_design(sample.grid, spec, n_factors=cfg.n_factors, mean_basis_size=cfg.mean_basis_size,
                       kernel_basis_size=cfg.kernel_basis_size)


def posterior_to_dict(post: gibbs.PosteriorSample) -> dict:
    return {
        "thetas": [t.tolist() for t in post.thetas],
        "last_states": [a.tolist() for a in post.last_states],
        "iterations": list(post.iterations),
        "loglik": list(post.loglik),
        "logprior": list(post.logprior),
    }


def posterior_from_dict(d: dict, design, template) -> gibbs.PosteriorSample:
    return gibbs.PosteriorSample(
        design,
        [np.array(t, dtype=float) for t in d["thetas"]],
        [np.array(a, dtype=float) for a in d["last_states"]],
        list(d["iterations"]),
        list(d["loglik"]),
        list(d["logprior"]),
        template,
    )


def _checkpoint_text(cfg: RunConfig, spec: ModelSpec, next_iter: int, state, rng, post) -> str:
    return _dump_json({
        "version": CHECKPOINT_VERSION,
        "hypothesis": spec.hypothesis,
        "next_iteration": next_iter,
        "gibbs": dataclasses.asdict(cfg.gibbs_config()),
        "state": state_to_dict(state),
        "rng": rng.bit_generator.state,
        "posterior": posterior_to_dict(post),
    })


def fit_chain(cfg: RunConfig, sample: FunctionalSample, spec: ModelSpec, seed, checkpoint_name: str | None = None):
    """Run (or resume) one chain, writing checkpoints when asked."""
    design = _design(cfg, sample, spec)
    gcfg = cfg.gibbs_config()
    out = Path(cfg.out)
    if cfg.resume_from:
        try:
            ck = json.loads(Path(cfg.resume_from).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read checkpoint {cfg.resume_from}: {exc}", operation="resume") from None
        if ck.get("version") != CHECKPOINT_VERSION or ck.get("hypothesis") != spec.hypothesis:
            raise ConfigError("checkpoint does not match this run", operation="resume")
        if ck["gibbs"] != dataclasses.asdict(gcfg):
            raise ConfigError("checkpoint was written with different sampler settings", operation="resume")
        state = state_from_dict(ck["state"])
        rng = np.random.default_rng()
        rng.bit_generator.state = ck["rng"]
        start = int(ck["next_iteration"])
        post = posterior_from_dict(ck["posterior"], design, state)
    else:
        state, rng, start = None, np.random.default_rng(seed), 0
        post = None
    stop = gcfg.iterations if cfg.stop_after is None else min(cfg.stop_after, gcfg.iterations)
    holder = {"state": state}

    def callback(i, st, r, p):
        holder["state"] = st
        every = cfg.checkpoint_every
        if checkpoint_name and every and (i + 1) % every == 0 and i + 1 < stop:
            _write(out, checkpoint_name, _checkpoint_text(cfg, spec, i + 1, st, r, p))

    if state is None:
        state = gibbs.initialize(sample, design)
        holder["state"] = state
    post = gibbs.run_chain(sample, design, gcfg, state=state, rng=rng, start=start, posterior=post, stop=stop,
                           callback=callback)
    if post.template is None:
        post.template = holder["state"]
    if checkpoint_name:
        _write(out, checkpoint_name, _checkpoint_text(cfg, spec, max(stop, start), holder["state"], rng, post))
    return post, max(stop, start) >= gcfg.iterations


def posterior_summary(post: gibbs.PosteriorSample, sample: FunctionalSample) -> dict:
    design = post.design
    g = design.grid
    n = len(post)
    out = {"hypothesis": design.spec.hypothesis, "n_draws": n, "series": list(sample.series_ids),
           "tau": [t.tolist() for t in sample.tau_original]}
    if n == 0:
        return out
    states = [post.state(i) for i in range(n)]
    out["mean_curves"] = {
        sid: np.mean([design.mean_bases[k].evaluation_matrix @ s.mean_coeffs[k] for s in states], axis=0).tolist()
        for k, sid in enumerate(sample.series_ids)
    }
    out["obs_variance"] = dict(zip(sample.series_ids, np.mean([s.obs_variances for s in states], axis=0).tolist()))
    kernels = {}
    for (r, c) in design.free_blocks:
        surf = np.mean([kernel_surface(s.kernel.blocks[(r, c)].theta, design.kernel_bases[r], design.kernel_bases[c])
                        for s in states], axis=0)
        kernels[f"{sample.series_ids[r]}<-{sample.series_ids[c]}"] = surf.tolist()
    out["kernels"] = kernels
    out["innovation_error_variance"] = dict(zip(
        sample.series_ids, np.mean([[inn.error_variance for inn in s.innovation] for s in states], axis=0).tolist()))
    out["loglik_mean"] = float(np.mean(post.loglik))
    out["state_dim"] = g.state_dim
    return out


def forecast_rows(post: gibbs.PosteriorSample, sample: FunctionalSample, horizon: int) -> list:
    dlms = [post.dlm(i) for i in range(len(post))]
    fc = statespace.forecast(post.last_states, dlms, horizon)
    g = sample.grid
    last = int(sample.time_index[-1])
    rows = []
    for k, sid in enumerate(sample.series_ids):
        block = g.block(k)
        tau = sample.tau_original[k]
        for h in range(horizon):
            for j in range(g.sizes[k]):
                rows.append((last + h + 1, sid, float(tau[j]), float(fc.mean[h, block][j]),
                             float(fc.sd[h, block][j])))
    return rows


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: RunConfig) -> dict:
    try:
        base = simulate.SimStudyConfig(
            scenario=cfg.scenarios[0], T=cfg.T, m=cfg.M or 30, replicates=cfg.replicates,
            horizons=tuple(int(h) for h in cfg.horizons), noise_sd=cfg.noise_sd, gp_length=cfg.gp_length,
            gp_sd=cfg.gp_sd, warmup=cfg.warmup, test_size=cfg.test_size, forecast_draws=cfg.forecast_draws,
            seed=cfg.seed, gibbs=cfg.gibbs_config())
    except (ValueError, IndexError) as exc:
        raise ConfigError(str(exc), operation="cmd_simulate") from None
    result = simulate.replicate_study(base, cfg.scenarios)
    paths = {}
    for name, text in simulate.study_tables(result).items():
        paths[name] = _write(Path(cfg.out), name, text)
    return paths


def cmd_fit(cfg: RunConfig) -> dict:
    sample = load_sample(cfg)
    spec = _hypothesis(cfg, sample)
    post, done = fit_chain(cfg, sample, spec, cfg.seed, "checkpoint.json")
    paths = {"checkpoint.json": Path(cfg.out) / "checkpoint.json"}
    if done:
        paths["posterior.json"] = _write(Path(cfg.out), "posterior.json", _dump_json(posterior_summary(post, sample)))
    return paths


def cmd_forecast(cfg: RunConfig) -> dict:
    sample = load_sample(cfg)
    spec = _hypothesis(cfg, sample)
    post, done = fit_chain(cfg, sample, spec, cfg.seed, "checkpoint.json")
    if not done:
        return {"checkpoint.json": Path(cfg.out) / "checkpoint.json"}
    H = max(int(h) for h in cfg.horizons)
    text = _csv_text(("time", "series", "tau", "mean", "sd"), forecast_rows(post, sample, H))
    return {"forecast.csv": _write(Path(cfg.out), "forecast.csv", text)}


def _causality_chain(args):
    cfg, sample, hyp, seed = args
    post, _ = fit_chain(cfg, sample, ModelSpec(hyp, sample.K), seed)
    return evidence.log_marginal(post)


def check_distinct(sample: FunctionalSample) -> None:
    a, b = sample.values
    if a.shape == b.shape and np.array_equal(sample.grid.points[0], sample.grid.points[1]) \
            and np.array_equal(a, b, equal_nan=True):
        raise DegenerateInput("response and cause series are identical", operation="test_causality")


def cmd_test_causality(cfg: RunConfig) -> dict:
    if cfg.response is None or cfg.cause is None:
        raise ConfigError("test-causality needs response and cause series ids", operation="load_config")
    if cfg.resume_from or cfg.stop_after is not None:
        raise ConfigError("test-causality runs complete chains; resume_from/stop_after are fit options",
                          operation="load_config")
    sample = load_sample(cfg)
    check_distinct(sample)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    jobs = [(cfg, sample, UNRESTRICTED, seeds[0]), (cfg, sample, RESTRICTED, seeds[1])]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=2) as pool:
            estimates = list(pool.map(_causality_chain, jobs))
    else:
        estimates = [_causality_chain(j) for j in jobs]
    report = evidence.bayes_factor(*estimates)
    path = _write(Path(cfg.out), "report.json", report.to_json() + "\n")
    print(f"{cfg.cause} -> {cfg.response}: ln B12 = {report.log_bayes_factor:.3f} ({report.category})")
    return {"report.json": path}


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "forecast": cmd_forecast,
            "test-causality": cmd_test_causality}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ftsgc", description="Bayesian MFAR(1) fitting and functional Granger causality.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="TOML or JSON file with run settings")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.subcommand, args.seed, args.out)
        COMMANDS[args.subcommand](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FtsgcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
