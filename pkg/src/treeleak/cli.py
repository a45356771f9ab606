"""Command line entry points.

Subcommands: run (config-driven experiment grid), gen-data (synthetic CSV),
attack (run label-inference methods against a transcript or model dump),
audit (replay a transcript against soundness and leakage checks), report
(aggregate finished run directories). Exit codes: 0 success, 1 runtime
failure, 2 invalid config or arguments.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import datasets
from .attack import (AttackParams, attack_cl, attack_id2graph, attack_uni,
                     attack_uni_cl, attacker_view_from_model,
                     attacker_view_from_transcript)
from .audit import audit_transcript
from .experiments import (CellError, ConfigError, atomic_write, load_config,
                          merge_reports, run_experiment, validate_config)
from .metrics import v_measure
from .protocol import PartyTranscript
from .trees import TreeModel

_CLI_DEFENSE = {"none": "none", "lp2st": "lp_mst", "id-lmid": "id_lmid",
                "reduced-leakage": "reduced_leakage"}


def _read_label_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        rows = [line.strip() for line in fh if line.strip()]
    if rows and not rows[0].lstrip("-").isdigit():
        rows = rows[1:]
    return np.asarray([int(r) for r in rows], dtype=np.int64)


def _read_matrix_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        records = list(csv.reader(fh))
    if not records:
        raise ValueError(f"{path}: empty feature file")
    try:
        float(records[0][0])
    except ValueError:
        records = records[1:]
    return np.asarray([[float(v) for v in rec] for rec in records],
                      dtype=np.float64)


def _apply_run_overrides(cfg, args):
    dfn = cfg.setdefault("defense", {})
    if args.defense is not None:
        kind = _CLI_DEFENSE[args.defense]
        if kind == "lp_mst" and args.graft:
            kind = "grafting_ldp"
        dfn["kind"] = kind
        dfn.pop("epsilon_grid", None)
        dfn.pop("xi_grid", None)
    if args.epsilon is not None:
        dfn["epsilon_grid"] = [args.epsilon]
    if args.xi is not None:
        dfn["xi_grid"] = [args.xi]
    if args.graft:
        dfn["graft"] = True
        if dfn.get("kind") == "lp_mst":
            dfn["kind"] = "grafting_ldp"
    if args.he_backend is not None:
        dfn["he_backend"] = args.he_backend
    if args.key_bits is not None:
        dfn["key_bits"] = args.key_bits
    if args.seeds is not None:
        cfg["seeds"] = [int(s) for s in args.seeds.split(",")]
    return cfg


def _cmd_run(args):
    cfg = load_config(args.config)
    cfg = validate_config(_apply_run_overrides(cfg, args))
    out_dir = args.out_dir or cfg.get("out_dir") or "runs"
    result = run_experiment(cfg, out_dir, threads=args.threads,
                            dump_transcripts=args.dump_transcripts,
                            emit_plotdata=args.emit_plotdata)
    for path in sorted(result["artifacts"].values()):
        print(path)
    return 0


def _cmd_gen_data(args):
    data = datasets.gen_synthetic(args.n, args.features, args.classes,
                                  args.cluster_spread, args.seed)
    lines = [",".join(list(data.feature_names) + ["label"])]
    for row, label in zip(data.features, data.labels):
        lines.append(",".join(f"{v:.10g}" for v in row) + f",{int(label)}")
    atomic_write(args.out, "\n".join(lines) + "\n")
    print(args.out)
    return 0


def _cmd_attack(args):
    if (args.transcript is None) == (args.model is None):
        raise ConfigError("$.attack: pass exactly one of --transcript/--model")
    features = _read_matrix_csv(args.features)
    if args.transcript:
        with open(args.transcript, "r", encoding="utf-8") as fh:
            transcript = PartyTranscript.from_json(fh.read())
        view = attacker_view_from_transcript(transcript)
    else:
        with open(args.model, "r", encoding="utf-8") as fh:
            model = TreeModel.from_json(fh.read())
        transcript = None
        view = attacker_view_from_model(model)
    if view.n != len(features):
        raise ConfigError(
            f"$.attack: feature rows ({len(features)}) do not match the "
            f"transcript row universe ({view.n})")

    params = AttackParams(eta=args.eta, alpha=args.alpha, seed=args.seed,
                          chunk_size=args.chunk_size,
                          chunk_weight=args.chunk_weight)
    truth = _read_label_csv(args.labels) if args.labels else None
    os.makedirs(args.out_dir, exist_ok=True)

    written = []
    for method in args.methods:
        if method == "id2graph":
            if transcript is None:
                # model-dump route: same pipeline over the model's own leaves
                from .attack import build_adjacency_chunked, kmeans_block, louvain
                graph = build_adjacency_chunked(view, params.eta,
                                                params.chunk_size,
                                                params.chunk_weight)
                communities = louvain(graph)
                labels, _, iters = kmeans_block(features, communities,
                                                params.alpha, args.class_count,
                                                params.seed)
                from .attack import ClusterResult
                res = ClusterResult(assignment=labels, method="id2graph",
                                    cluster_count=args.class_count,
                                    iterations=iters,
                                    modularity=communities.modularity,
                                    params={"eta": params.eta,
                                            "alpha": params.alpha,
                                            "seed": params.seed})
            else:
                res = attack_id2graph(transcript, features, args.class_count,
                                      params)
        elif method == "cl":
            res = attack_cl(features, args.class_count, args.seed)
        elif method == "uni":
            res = attack_uni(view)
        else:
            res = attack_uni_cl(view, features, args.class_count, args.seed)
        summary = res.summary_dict()
        if truth is not None:
            summary["v_measure"] = v_measure(truth, res.assignment)
        a_path = os.path.join(args.out_dir, f"assignment_{method}.csv")
        s_path = os.path.join(args.out_dir, f"summary_{method}.json")
        atomic_write(a_path, res.assignment_csv())
        atomic_write(s_path, json.dumps(summary, sort_keys=True, indent=2))
        written += [a_path, s_path]
    for path in written:
        print(path)
    return 0


def _cmd_audit(args):
    with open(args.transcript, "r", encoding="utf-8") as fh:
        transcript = PartyTranscript.from_json(fh.read())
    labels = _read_label_csv(args.labels) if args.labels else None
    class_count = args.class_count or (transcript.class_count if labels is not None
                                       else None)
    report = audit_transcript(transcript, labels=labels,
                              class_count=class_count, xi=args.xi)
    text = json.dumps(report.to_json_dict(), sort_keys=True, indent=2)
    if args.out:
        atomic_write(args.out, text)
    print(text)
    return 0 if report.ok else 1


def _cmd_report(args):
    result = merge_reports(args.run_dirs, args.out_dir)
    for path in sorted(result["artifacts"].values()):
        print(path)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="treeleak",
        description="Simulate split-finding federated training, attack the "
                    "transcripts, and measure the defenses.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out-dir", default=None)
    p_run.add_argument("--threads", type=int, default=None,
                       help="worker pool width (default: TREELEAK_THREADS or 1)")
    p_run.add_argument("--defense", choices=sorted(_CLI_DEFENSE),
                       default=None, help="override the config's defense")
    p_run.add_argument("--epsilon", type=float, default=None)
    p_run.add_argument("--xi", type=float, default=None)
    p_run.add_argument("--graft", action="store_true")
    p_run.add_argument("--he-backend", choices=["mock", "paillier"],
                       default=None)
    p_run.add_argument("--key-bits", type=int, choices=[512, 1024, 2048],
                       default=None)
    p_run.add_argument("--seeds", default=None, help="comma-separated ints")
    p_run.add_argument("--dump-transcripts", metavar="DIR", default=None)
    p_run.add_argument("--emit-plotdata", action="store_true")
    p_run.set_defaults(func=_cmd_run)

    p_gen = sub.add_parser("gen-data", help="write a synthetic CSV dataset")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--n", type=int, default=1000)
    p_gen.add_argument("--features", type=int, default=10)
    p_gen.add_argument("--classes", type=int, default=2)
    p_gen.add_argument("--cluster-spread", type=float, default=1.0)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.set_defaults(func=_cmd_gen_data)

    p_att = sub.add_parser("attack", help="attack a transcript or model dump")
    p_att.add_argument("--transcript", default=None)
    p_att.add_argument("--model", default=None)
    p_att.add_argument("--features", required=True,
                       help="CSV of the attacking party's feature slice")
    p_att.add_argument("--class-count", type=int, required=True)
    p_att.add_argument("--methods", nargs="+", default=["id2graph"],
                       choices=["id2graph", "cl", "uni", "uni_cl"])
    p_att.add_argument("--eta", type=float, default=1.0)
    p_att.add_argument("--alpha", type=float, default=3.0)
    p_att.add_argument("--chunk-size", type=int, default=1000)
    p_att.add_argument("--chunk-weight", type=float, default=100.0)
    p_att.add_argument("--seed", type=int, default=0)
    p_att.add_argument("--labels", default=None,
                       help="optional truth labels to score the attack")
    p_att.add_argument("--out-dir", default="attack_out")
    p_att.set_defaults(func=_cmd_attack)

    p_aud = sub.add_parser("audit", help="verify transcript soundness/leakage")
    p_aud.add_argument("--transcript", required=True)
    p_aud.add_argument("--labels", default=None)
    p_aud.add_argument("--class-count", type=int, default=None)
    p_aud.add_argument("--xi", type=float, default=None)
    p_aud.add_argument("--out", default=None)
    p_aud.set_defaults(func=_cmd_audit)

    p_rep = sub.add_parser("report", help="aggregate finished run directories")
    p_rep.add_argument("run_dirs", nargs="+")
    p_rep.add_argument("--out-dir", required=True)
    p_rep.set_defaults(func=_cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CellError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
