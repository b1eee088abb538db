"""Command line front end.

Subcommands:
  gen        draw samples from a JSON mixture description
  cluster    run the coordinator over in-process or remote hosts
  host       serve one data shard over TCP
  eval       permutation-minimal miss rate between two label files
  gap-study  primal/dual gap across sample sizes of one mixture

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys

from . import io as dio
from .coordinator import CoordinatorConfig, run_clustering
from .dataeval import (
    cluster_dataset,
    duality_gap_probe,
    generate_mixture,
    miss_rate,
    shard_dataset,
)
from .errors import (
    HostFailureError,
    NumericalError,
    ProtocolError,
    ValidationError,
)
from .model import Dataset, RegularizationConfig
from .transport import TcpTransport, serve_host

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad arguments; remap to 1 so that 2
    stays reserved for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dwclust",
                     description="decomposition-based covariance clustering")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    gen = sub.add_parser("gen", help="sample a synthetic mixture")
    gen.add_argument("--spec", required=True, help="mixture description (JSON)")
    gen.add_argument("--out", required=True, help="output sample CSV")
    gen.add_argument("--labels", required=True, help="output label CSV")
    gen.add_argument("--seed", type=int, required=True)

    cluster = sub.add_parser("cluster", help="cluster a dataset")
    cluster.add_argument("--data", help="sample CSV (in-process mode)")
    cluster.add_argument("--header", action="store_true",
                         help="skip the first line of --data")
    cluster.add_argument("--j", type=int, required=True, dest="n_clusters",
                         help="number of clusters")
    cluster.add_argument("--hosts", type=int,
                         help="number of in-process hosts")
    cluster.add_argument("--host-addrs",
                         help="comma-separated host:port list of running hosts")
    cluster.add_argument("--shard-policy", default="interleaved",
                         choices=["by-cluster", "contiguous", "interleaved"],
                         help="row placement for in-process hosts; by-cluster "
                              "assumes rows arrive grouped and maps to "
                              "contiguous blocks, one per host")
    cluster.add_argument("--sigma-n", type=float, default=0.0,
                         help="noise variance added to every cluster covariance")
    cluster.add_argument("--seed", type=int, default=0)
    cluster.add_argument("--out", required=True, help="result document (JSON)")
    cluster.add_argument("--trace", help="per-round primal/dual CSV")
    cluster.add_argument("--assignments", help="soft assignment matrix CSV")
    cluster.add_argument("--restarts", type=int, default=3)
    cluster.add_argument("--outer-rounds", type=int, default=50)
    cluster.add_argument("--dual-rounds", type=int, default=30)
    cluster.add_argument("--proportion-mode", default="fixed-uniform",
                         choices=["fixed-uniform", "optimize"])

    host = sub.add_parser("host", help="serve one shard over TCP")
    host.add_argument("--listen", required=True, help="bind address host:port "
                      "(port 0 picks a free port; the chosen one is printed)")
    host.add_argument("--data", required=True, help="shard sample CSV")
    host.add_argument("--header", action="store_true",
                      help="skip the first line of --data")

    ev = sub.add_parser("eval", help="compare two label files")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--truth", required=True)

    gap = sub.add_parser("gap-study", help="gap trend across sample sizes")
    gap.add_argument("--spec", required=True, help="mixture description (JSON)")
    gap.add_argument("--sizes", required=True,
                     help="comma-separated sample counts, e.g. 64,256,1024")
    gap.add_argument("--seed", type=int, default=0)
    gap.add_argument("--sigma-n", type=float, default=0.0)
    gap.add_argument("--out", required=True, help="output CSV")

    return parser


def _labels_path_for(out_path: str) -> str:
    if out_path.endswith(".json"):
        return out_path[: -len(".json")] + ".labels.csv"
    return out_path + ".labels.csv"


def _cmd_gen(args) -> int:
    spec = dio.load_mixture_spec(args.spec)
    data = generate_mixture(spec, seed=args.seed)
    dio.save_samples_csv(args.out, data.samples)
    dio.save_labels_csv(args.labels, data.labels)
    return 0


def _make_config(args) -> CoordinatorConfig:
    return CoordinatorConfig(
        n_clusters=args.n_clusters,
        regularization=RegularizationConfig(sigma_n_sq=args.sigma_n),
        max_outer_rounds=args.outer_rounds,
        dual_rounds=args.dual_rounds,
        proportion_mode=args.proportion_mode,
        restarts=args.restarts,
        seed=args.seed,
    )


def _cmd_cluster(args, parser) -> int:
    if (args.hosts is None) == (args.host_addrs is None):
        parser.error("exactly one of --hosts and --host-addrs is required")
    config = _make_config(args)

    if args.host_addrs is not None:
        addrs = []
        for item in args.host_addrs.split(","):
            hostname, _, port = item.strip().rpartition(":")
            if not hostname or not port.isdigit():
                parser.error(f"bad host address {item!r}, expected host:port")
            addrs.append((hostname, int(port)))
        transport = TcpTransport(addrs)
        try:
            result = run_clustering(transport, config)
        finally:
            transport.shutdown()
        labels = result.labels           # host order: all of host 0, then 1, ...
        soft = result.soft_assignments
    else:
        if args.data is None:
            parser.error("--data is required with --hosts")
        samples = dio.load_samples_csv(args.data, has_header=args.header)
        dataset = Dataset(samples=samples)
        policy = "contiguous" if args.shard_policy == "by-cluster" else args.shard_policy
        layout = shard_dataset(dataset, args.hosts, policy)
        outcome = cluster_dataset(dataset, layout, config)
        result = outcome.result
        labels = outcome.labels          # original row order
        soft = outcome.soft_assignments

    labels_path = _labels_path_for(args.out)
    dio.save_labels_csv(labels_path, labels)
    document = dio.result_document(result, config, labels_path=labels_path)
    dio.save_result_json(args.out, document)
    if args.trace:
        dio.save_trace_csv(args.trace, result)
    if args.assignments:
        dio.save_soft_assignments_csv(args.assignments, soft)
    return 0


def _cmd_host(args, parser) -> int:
    hostname, _, port = args.listen.rpartition(":")
    if not hostname or not port.isdigit():
        parser.error(f"bad --listen value {args.listen!r}, expected host:port")
    samples = dio.load_samples_csv(args.data, has_header=args.header)
    serve_host(samples, hostname, int(port),
               announce=lambda line: print(line, flush=True))
    return 0


def _cmd_eval(args) -> int:
    pred = dio.load_labels_csv(args.pred)
    truth = dio.load_labels_csv(args.truth)
    print(f"{miss_rate(pred, truth):.6f}")
    return 0


def _cmd_gap_study(args) -> int:
    spec = dio.load_mixture_spec(args.spec)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError as exc:
        raise ValidationError(f"bad --sizes value {args.sizes!r}") from exc
    if not sizes:
        raise ValidationError("--sizes lists no sample counts")
    config = CoordinatorConfig(
        n_clusters=spec.n_components,
        regularization=RegularizationConfig(sigma_n_sq=args.sigma_n),
        seed=args.seed,
    )
    report = duality_gap_probe(spec, sizes, seed=args.seed, config=config)
    dio.save_gap_report_csv(args.out, report)
    for entry in report.entries:
        print(f"N={entry.n_samples} primal={entry.primal_value:.6f} "
              f"dual={entry.dual_value:.6f} gap={entry.relative_gap:.3e}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen":
            return _cmd_gen(args)
        if args.command == "cluster":
            return _cmd_cluster(args, parser)
        if args.command == "host":
            return _cmd_host(args, parser)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "gap-study":
            return _cmd_gap_study(args)
        parser.error(f"unknown command {args.command!r}")
    except (ValidationError, NumericalError, ProtocolError, HostFailureError,
            OSError) as exc:
        print(f"dwclust: error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
