"""Command-line pipeline with reproducible run manifests.

Subcommands: ``simulate`` (synthetic dataset + ground truth), ``fit``
(posterior sampling with a convergence gate), ``detect`` (posterior mean
outbreak probabilities), ``compare``/``evidence`` (log marginal likelihoods
and posterior model probabilities), ``ppc`` (posterior predictive bands),
``roc`` (classification scoring against known truth), and ``replay``
(re-run a recorded manifest).

Every command writes ``manifest.json`` capturing the resolved arguments,
config snapshot, seed, library versions, input digests, and output digests;
replaying a manifest reproduces the outputs byte for byte.  Exit codes:
0 success, 2 validation failure, 3 convergence-gate failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .data import edge_density, load_coordinates, load_surveillance, adjacency_from_distances
from .evaluation import posterior_predictive, relative_risks, roc_auc
from .evidence import log_marginal_likelihood, posterior_model_probs
from .hmm import smoothed_probs_batch, LikelihoodWorkspace
from .model import ModelSpec, stationary_distribution, transition_matrix
from .sampler import SamplerConfig, load_samples, run_mcmc, save_samples
from .simulator import SimulationConfig, simulate_dataset, write_dataset

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3


def parse_keyvalue(path) -> dict:
    """Plain-text `key=value` config files; `#` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_manifest(out_dir, command: str, args: dict, inputs: dict,
                   outputs: list, started: float, config_snapshot=None):
    out = Path(out_dir)
    manifest = {
        "command": command,
        "args": args,
        "config": config_snapshot or {},
        "seed": args.get("seed"),
        "versions": {
            "episurv": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "python": sys.version.split()[0],
        },
        "input_digests": {str(k): _sha256(v) for k, v in inputs.items()},
        "outputs": {name: _sha256(out / name) for name in outputs},
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def _load_data_dir(data_dir):
    d = Path(data_dir)
    return load_surveillance(d / "counts.csv", d / "populations.csv", d / "adjacency.csv"), {
        "counts": d / "counts.csv",
        "populations": d / "populations.csv",
        "adjacency": d / "adjacency.csv",
    }


def _write_probability_csv(path, probs, location_labels, time_labels):
    """T x I matrix with time rows and location columns."""
    frame = pd.DataFrame(probs.T, index=list(time_labels), columns=list(location_labels))
    frame.index.name = "time"
    frame.to_csv(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    started = time.time()
    mapping = parse_keyvalue(args.config) if args.config else {}
    kwargs = {}
    for key in ("variant",):
        if key in mapping:
            kwargs[key] = mapping[key]
    for key in ("n_times", "cycle_length", "seed"):
        if key in mapping:
            kwargs[key] = int(mapping[key])
    for key in ("intercept", "kappa_trend", "amplitude", "frequency",
                "kappa_spatial", "gamma01", "gamma10", "population_jitter"):
        if key in mapping:
            kwargs[key] = float(mapping[key])
    if "beta" in mapping:
        kwargs["beta"] = tuple(float(x) for x in mapping["beta"].split())
    if args.seed is not None:
        kwargs["seed"] = args.seed
    config = SimulationConfig(**kwargs)

    data, truth = simulate_dataset(config)
    out = Path(args.out)
    written = write_dataset(out, data, truth)
    inputs = {"config": args.config} if args.config else {}
    write_manifest(out, "simulate", _arg_dict(args), inputs, written, started,
                   config_snapshot=vars(config).copy() | {"beta": list(config.beta)})
    print(f"simulated {data.n_locations} locations x {data.n_times} months "
          f"(variant {config.variant}) -> {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    started = time.time()
    data, inputs = _load_data_dir(args.data)
    model_map = parse_keyvalue(args.model) if args.model else {}
    spec = ModelSpec.from_config(model_map)
    sampler_map = parse_keyvalue(args.sampler) if args.sampler else {}
    config = SamplerConfig.from_config(sampler_map)
    if args.seed is not None:
        config.seed = args.seed

    samples = run_mcmc(data, spec, config, n_jobs=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = save_samples(out, samples)

    if config.n_chains >= 2:
        values = np.asarray(samples.diagnostics["rhat"])
        table = pd.DataFrame({"parameter": list(samples.parameter_names),
                              "rhat": values})
        table.to_csv(out / "rhat.csv", index=False)
        written.append("rhat.csv")
    (out / "acceptance.json").write_text(
        json.dumps(samples.acceptance_rates, sort_keys=True, indent=1) + "\n")
    written.append("acceptance.json")
    for key in ("model", "sampler"):
        value = getattr(args, key)
        if value:
            inputs[key] = value
    write_manifest(out, "fit", _arg_dict(args), inputs, written, started,
                   config_snapshot={"model": spec.to_config(),
                                    "sampler": config.to_config()})

    if config.n_chains < 2:
        print("single chain: convergence diagnostic skipped", file=sys.stderr)
        return EXIT_OK
    max_rhat = samples.diagnostics["rhat_max"]
    print(f"fit variant {spec.variant}: max rhat {max_rhat:.4f} "
          f"over {len(samples.parameter_names)} parameters -> {out}")
    if args.rhat_gate and max_rhat > args.rhat_gate:
        print(f"convergence gate failed: max rhat {max_rhat:.4f} > {args.rhat_gate}",
              file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def _mean_outbreak_probabilities(data, spec, samples, max_draws=None):
    ws = LikelihoodWorkspace(data, spec)
    stacked = samples.stacked()
    layout = samples.layout
    if max_draws and max_draws < stacked.shape[0]:
        picks = np.linspace(0, stacked.shape[0] - 1, max_draws).astype(int)
        stacked = stacked[picks]
    total = np.zeros((data.n_locations, data.n_times))
    for row in stacked:
        params = layout.unpack(row)
        total += smoothed_probs_batch(
            ws.log_emissions(params),
            transition_matrix(params.gamma01, params.gamma10),
            stationary_distribution(params.gamma01, params.gamma10))
    return total / stacked.shape[0]


def cmd_detect(args) -> int:
    started = time.time()
    data, inputs = _load_data_dir(args.data)
    samples = load_samples(args.fit)
    probs = _mean_outbreak_probabilities(data, samples.spec, samples,
                                         max_draws=args.max_draws)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_probability_csv(out / "outbreak_probabilities.csv", probs,
                           data.location_labels, data.time_labels)
    risks = relative_risks(samples)
    pd.DataFrame({"location": list(data.location_labels),
                  "relative_risk": risks}).to_csv(out / "relative_risks.csv", index=False)
    inputs["fit_meta"] = Path(args.fit) / "samples_meta.json"
    write_manifest(out, "detect", _arg_dict(args), inputs,
                   ["outbreak_probabilities.csv", "relative_risks.csv"], started)
    print(f"outbreak probabilities ({data.n_times} x {data.n_locations}) -> {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    started = time.time()
    data, inputs = _load_data_dir(args.data)
    rows = []
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    for fit_dir in args.fits:
        samples = load_samples(fit_dir)
        estimate = log_marginal_likelihood(data, samples.spec, samples,
                                           n_samples=args.n_samples, rng=rng)
        rows.append({
            "model": samples.spec.variant,
            "log_marginal_likelihood": estimate.log_marginal,
            "mc_standard_error": estimate.mc_standard_error,
            "effective_sample_size": estimate.effective_sample_size,
        })
        inputs[f"fit_{samples.spec.variant}"] = Path(fit_dir) / "samples_meta.json"
    probs = posterior_model_probs([r["log_marginal_likelihood"] for r in rows])
    for row, prob in zip(rows, probs):
        row["posterior_model_probability"] = float(prob)
    table = pd.DataFrame(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "model_comparison.csv", index=False)
    write_manifest(out, "compare", _arg_dict(args), inputs,
                   ["model_comparison.csv"], started)
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_ppc(args) -> int:
    started = time.time()
    data, inputs = _load_data_dir(args.data)
    samples = load_samples(args.fit)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    band = posterior_predictive(data, samples.spec, samples, rng=rng,
                                max_draws=args.max_draws)
    observed = np.where(~data.missing, data.counts, 0).sum(axis=0)
    frame = pd.DataFrame({
        "time": list(data.time_labels),
        "observed": observed,
        "lower": band.lower,
        "mean": band.mean,
        "upper": band.upper,
    })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "posterior_predictive.csv", index=False)
    inputs["fit_meta"] = Path(args.fit) / "samples_meta.json"
    write_manifest(out, "ppc", _arg_dict(args), inputs,
                   ["posterior_predictive.csv"], started)
    print(f"coverage of observed totals: {band.coverage_fraction:.3f}")
    return EXIT_OK


def cmd_roc(args) -> int:
    started = time.time()
    truth_path = Path(args.truth)
    if truth_path.suffix == ".json":
        truth_states = np.asarray(json.loads(truth_path.read_text())["states"]).T
    else:
        truth_states = pd.read_csv(truth_path, index_col=0).to_numpy(dtype=float)
    scores_frame = pd.read_csv(args.scores, index_col=0)
    scores = scores_frame.to_numpy(dtype=float)
    labels = [str(c) for c in scores_frame.columns]
    if truth_states.shape != scores.shape:
        raise ValueError(f"truth shape {truth_states.shape} does not match "
                         f"scores shape {scores.shape}")

    subsets = {"overall": None}
    if args.locations:
        wanted = [s.strip() for s in args.locations.split(",")]
        missing = [w for w in wanted if w not in labels]
        if missing:
            raise ValueError(f"unknown locations in subset: {missing}")
        subsets["subset"] = [labels.index(w) for w in wanted]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    summary = {}
    for name, subset in subsets.items():
        curve = roc_auc(truth_states, scores, subset=subset)
        frame = pd.DataFrame(curve.points, columns=["fpr", "tpr"])
        frame.to_csv(out / f"roc_{name}.csv", index=False)
        written.append(f"roc_{name}.csv")
        summary[name] = curve.auc
    (out / "auc.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    written.append("auc.json")
    write_manifest(out, "roc", _arg_dict(args),
                   {"truth": args.truth, "scores": args.scores}, written, started)
    for name, auc in summary.items():
        print(f"AUC[{name}] = {auc:.4f}")
    return EXIT_OK


def cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    recorded = dict(manifest["args"])
    recorded["out"] = args.out
    command = manifest["command"]
    if command == "replay":
        raise ValueError("cannot replay a replay manifest")
    handler = _HANDLERS[command]
    return handler(argparse.Namespace(**recorded))


def _arg_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


_HANDLERS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "detect": cmd_detect,
    "compare": cmd_compare,
    "ppc": cmd_ppc,
    "roc": cmd_roc,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="episurv",
        description="Bayesian spatio-temporal outbreak surveillance pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a synthetic dataset with ground truth")
    p.add_argument("--config", help="key=value simulation config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="sample the posterior for one model")
    p.add_argument("--data", required=True, help="directory with counts/populations/adjacency CSVs")
    p.add_argument("--model", help="key=value model config (variant, cycle_length)")
    p.add_argument("--sampler", help="key=value sampler config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--rhat-gate", type=float, default=1.05,
                   help="fail (exit 3) when max rhat exceeds this; 0 disables")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("detect", help="posterior mean outbreak probabilities")
    p.add_argument("--data", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--max-draws", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("compare", aliases=["evidence"],
                       help="log marginal likelihoods and model probabilities")
    p.add_argument("--data", required=True)
    p.add_argument("--fits", nargs="+", required=True)
    p.add_argument("--n-samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ppc", help="posterior predictive bands for total counts")
    p.add_argument("--data", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--max-draws", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ppc)

    p = sub.add_parser("roc", help="ROC/AUC of outbreak scores against truth")
    p.add_argument("--truth", required=True, help="truth.json or 0/1 matrix CSV (time rows)")
    p.add_argument("--scores", required=True, help="probability matrix CSV (time rows)")
    p.add_argument("--locations", help="comma-separated location subset for a second curve")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("replay", help="re-run a recorded manifest into a new directory")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
