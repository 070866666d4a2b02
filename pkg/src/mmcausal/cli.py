"""Command-line front end: synthesize datasets, run discovery, evaluate a
finished run, and export graphs.

Exit codes are a stable scripting contract: 0 success, 1 runtime failure,
2 usage or configuration error.  Configuration precedence is CLI flags over
config file over built-in defaults.  The HTTP oracle reads its endpoint and
bearer token exclusively from the MCD_API_ENDPOINT / MCD_API_TOKEN
environment variables; neither is ever written to config files or logs.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from .embed import MockEmbeddingProvider
from .eval import GroundTruth, evaluate_run
from .graph import MixedGraph
from .mcr import SliceEmbedder, run_pipeline
from .oracle import HttpOracle, ScriptedOracle
from .storage import read_json, read_jsonl, read_samples, write_json, write_jsonl, write_samples, write_structured_csv
from .synth import ExogenousRecord, SCMSpec, lung_default_spec, mag_default_spec, sample_dataset
from .types import FactorSet, FactorSpec, PipelineConfig

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

TOKEN_ENV = "MCD_API_TOKEN"
ENDPOINT_ENV = "MCD_API_ENDPOINT"


class UsageError(Exception):
    """Bad flags, unreadable config, or missing inputs: exit code 2."""


def _fail(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def _load_config(args) -> PipelineConfig:
    """CLI flags > config file > defaults."""
    if getattr(args, "config", None):
        try:
            base = PipelineConfig.from_file(args.config)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}")
        except (ValueError, TypeError) as err:
            raise UsageError(f"bad config file {args.config}: {err}")
    else:
        base = PipelineConfig()
    overrides = {
        "seed": getattr(args, "seed", None),
        "iterations": getattr(args, "iterations", None),
        "oracle_backend": getattr(args, "oracle", None),
        "cd_backend": getattr(args, "cd", None),
    }
    try:
        return base.merged(overrides)
    except ValueError as err:
        raise UsageError(str(err))


# -- synth --------------------------------------------------------------------


def _resolve_scm(args) -> SCMSpec:
    chosen = [bool(args.mag_default), bool(args.lung_default), args.spec is not None]
    if sum(chosen) != 1:
        raise UsageError("pick exactly one of --mag-default, --lung-default, --spec PATH")
    if args.mag_default:
        return mag_default_spec()
    if args.lung_default:
        return lung_default_spec()
    try:
        return SCMSpec.from_dict(read_json(args.spec))
    except FileNotFoundError:
        raise UsageError(f"scm spec not found: {args.spec}")
    except (KeyError, ValueError, TypeError) as err:
        raise UsageError(f"invalid scm spec {args.spec}: {err}")


def cmd_synth(args) -> int:
    scm = _resolve_scm(args)
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    structured, samples, noise = sample_dataset(scm, args.n, seed=args.seed)
    write_json(out / "scm.json", scm.to_dict())
    write_samples(out / "samples.jsonl", samples)
    write_structured_csv(out / "structured.csv", structured)
    write_jsonl(out / "noise.jsonl", [noise[s.id].to_dict() for s in samples])
    write_json(out / "truth.json", GroundTruth.from_scm(scm).to_dict())
    print(f"wrote {len(samples)} samples over {len(scm.factor_set)} factors to {out}")
    return EXIT_OK


# -- discover -----------------------------------------------------------------


def _load_dataset(data_dir: Path):
    for name in ("scm.json", "samples.jsonl"):
        if not (data_dir / name).exists():
            raise UsageError(f"data directory {data_dir} lacks {name} (run synth first)")
    scm = SCMSpec.from_dict(read_json(data_dir / "scm.json"))
    samples = read_samples(data_dir / "samples.jsonl")
    return scm, samples


def _build_oracle(config: PipelineConfig, data_dir: Path, run_dir: Path, scm: SCMSpec):
    if config.oracle_backend == "scripted":
        noise_path = data_dir / "noise.jsonl"
        if not noise_path.exists():
            raise UsageError(f"scripted oracle needs {noise_path}")
        noise = {r["sample_id"]: ExogenousRecord.from_dict(r) for r in read_jsonl(noise_path)}
        (run_dir / "transcripts.jsonl").touch()
        return ScriptedOracle(scm, noise)
    # http: both env vars must be present before any network activity
    token = os.environ.get(TOKEN_ENV)
    endpoint = os.environ.get(ENDPOINT_ENV)
    if not token or not endpoint:
        raise UsageError(
            f"http oracle requires the {ENDPOINT_ENV} and {TOKEN_ENV} environment variables")
    return HttpOracle(endpoint, token, config.model,
                      batch_size=config.batch_size,
                      max_attempts=config.max_retries,
                      transcript_path=run_dir / "transcripts.jsonl")


def cmd_discover(args) -> int:
    config = _load_config(args)
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise UsageError(f"data directory not found: {data_dir}")
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    scm, samples = _load_dataset(data_dir)
    oracle = _build_oracle(config, data_dir, run_dir, scm)
    write_json(run_dir / "config.json", config.to_dict())
    embedder = SliceEmbedder.for_scm(scm, MockEmbeddingProvider(config.embedding_dim))
    truth = None
    if (data_dir / "truth.json").exists():
        truth = GroundTruth.from_file(data_dir / "truth.json")
    report = run_pipeline(samples, config, oracle, embedder,
                          target_name=scm.factor_set.target_name,
                          ground_truth=truth, run_dir=run_dir)
    for it in report.iterations:
        extra = f" eshd={it.metrics['eshd']}" if it.metrics else ""
        print(f"iteration {it.index}: {len(it.factor_names)} factors, "
              f"{it.graph.circle_count()} circle endpoints, "
              f"{it.gate['accepted']}/{it.gate['proposed']} counterfactuals kept{extra}")
    if report.status != "completed":
        _fail(f"pipeline failed: {report.error}")
        return EXIT_RUNTIME
    final = report.final_graph
    final.save(run_dir / "graph.json")
    (run_dir / "graph.dot").write_text(final.to_dot(), encoding="utf-8")
    from . import viz

    viz.plot_graph(final, run_dir / "graph.png", title="discovered graph")
    viz.plot_iteration_stats(report.to_dict(), run_dir / "iterations.png")
    print(f"stopped after {len(report.iterations)} iterations ({report.stop_reason}); "
          f"run artifacts in {run_dir}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    report_path = run_dir / "run-report.json"
    if not report_path.exists():
        raise UsageError(f"no run-report.json under {run_dir}")
    truth_path = Path(args.truth)
    if not truth_path.exists():
        raise UsageError(f"truth file not found: {truth_path}")
    report = read_json(report_path)
    iterations = report.get("iterations", [])
    if not iterations:
        _fail("run has no final graph (pipeline failed before iteration 1)")
        return EXIT_RUNTIME
    last = iterations[-1]
    graph = MixedGraph(last["graph"]["nodes"], last["graph"]["marks"])
    truth = GroundTruth.from_file(truth_path)
    target = truth.factor_set.target_name
    factors = FactorSet(
        tuple(FactorSpec(name, "", "+1", "0", "-1") for name in last["factors"]), target)
    bundle = evaluate_run(factors, graph, truth)
    width = max(len(k) for k in bundle.FIELDS)
    for key in bundle.FIELDS:
        value = getattr(bundle, key)
        shown = f"{value:.4f}" if isinstance(value, float) else str(value)
        print(f"{key.upper():<{width + 2}}{shown}")
    out_dir = Path(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(bundle.FIELDS)
        writer.writerow([repr(getattr(bundle, k)) for k in bundle.FIELDS])
    from . import viz

    viz.plot_metrics(bundle.to_dict(), out_dir / "metrics.png")
    print(f"metrics written to {out_dir / 'metrics.csv'}")
    return EXIT_OK


# -- export-dot -----------------------------------------------------------------


def cmd_export_dot(args) -> int:
    src = Path(args.graph)
    if not src.exists():
        raise UsageError(f"graph file not found: {src}")
    try:
        g = MixedGraph.load(src)
    except (KeyError, ValueError) as err:
        raise UsageError(f"not a graph file: {src} ({err})")
    out = Path(args.out) if args.out else src.with_suffix(".dot")
    out.write_text(g.to_dot(), encoding="utf-8")
    print(f"wrote {out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmcausal",
        description="Multimodal factor discovery, structure search, and "
                    "counterfactual augmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multimodal dataset")
    p.add_argument("--spec", help="path to an scm.json spec")
    p.add_argument("--mag-default", action="store_true",
                   help="use the bundled apple-review scenario")
    p.add_argument("--lung-default", action="store_true",
                   help="use the bundled clinical-note scenario")
    p.add_argument("--n", type=int, default=200, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output data directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("discover", help="run the iterative discovery pipeline")
    p.add_argument("--data", required=True, help="data directory from synth")
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--oracle", choices=["scripted", "http"], default=None)
    p.add_argument("--cd", choices=["fci", "pc"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("eval", help="score a finished run against ground truth")
    p.add_argument("--run", required=True, help="run directory from discover")
    p.add_argument("--truth", required=True, help="truth.json path")
    p.add_argument("--out", help="directory for metrics.csv (default: run dir)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-dot", help="convert a graph.json to Graphviz DOT")
    p.add_argument("graph", help="graph.json path")
    p.add_argument("--out", help="output .dot path")
    p.set_defaults(func=cmd_export_dot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as err:
        _fail(str(err))
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as err:  # unexpected runtime failure
        _fail(f"{type(err).__name__}: {err}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
