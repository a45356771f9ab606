"""Config-driven experiment orchestration.

A config names a dataset, a feature partition, a protocol setup, a defense
with a parameter grid, and a seed list. The runner executes every
(parameter, seed) cell: split, partition, federated training, attacks
against party 2's transcript, metrics. Defended runs are paired with a
no-defense baseline per seed for ciphertext-rate reporting. Reports land as
JSON plus flat CSVs whose bytes are reproducible run to run.
"""

import csv
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import jsonschema

from . import datasets
from .attack import (AttackParams, attack_cl, attack_id2graph, attack_uni,
                     attack_uni_cl, attacker_view_from_transcript)
from .metrics import UndefinedAUCError, aggregate, auc, v_measure
from .protocol import DefenseConfig, ProtocolConfig, comm_rate, train_federated

ATTACK_NAMES = ("id2graph", "cl", "uni", "uni_cl")

_NUM = {"type": "number"}
_INT = {"type": "integer"}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "protocol"],
    "properties": {
        "name": {"type": "string"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["csv", "synthetic"]},
                "path": {"type": "string"},
                "label_column": {"type": "string"},
                "class_count": {**_INT, "minimum": 2},
                "n": {**_INT, "minimum": 4},
                "features": {**_INT, "minimum": 1},
                "classes": {**_INT, "minimum": 2},
                "cluster_spread": {**_NUM, "minimum": 0},
                "seed": _INT,
                "subsample": {**_INT, "minimum": 4},
                "test_fraction": {**_NUM, "exclusiveMinimum": 0,
                                  "exclusiveMaximum": 1},
            },
        },
        "partition": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["random_half", "top_k_percentile_to_attacker",
                                  "explicit"]},
                "k_percent": {**_NUM, "exclusiveMinimum": 0, "maximum": 100},
                "explicit": {"type": "array",
                             "items": {"type": "array", "items": _INT}},
            },
        },
        "protocol": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "model_kind": {"enum": ["random_forest", "xgboost"]},
                "max_depth": {**_INT, "minimum": 1},
                "tree_count": {**_INT, "minimum": 1},
                "feature_subsample": {**_NUM, "exclusiveMinimum": 0,
                                      "maximum": 1},
                "percentile_count": {**_INT, "minimum": 1},
                "learning_rate": {**_NUM, "exclusiveMinimum": 0},
                "lambda_reg": {**_NUM, "minimum": 0},
                "gamma_reg": {**_NUM, "minimum": 0},
                "min_samples_split": {**_INT, "minimum": 2},
                "broadcast_policy": {"enum": ["eager", "on_division"]},
            },
        },
        "attacks": {
            "type": "array",
            "items": {"enum": list(ATTACK_NAMES)},
            "minItems": 1,
            "uniqueItems": True,
        },
        "attack_params": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eta": {**_NUM, "exclusiveMinimum": 0, "maximum": 1},
                "alpha": {**_NUM, "minimum": 0},
                "chunk_size": {**_INT, "minimum": 2},
                "chunk_weight": {**_NUM, "exclusiveMinimum": 0},
                "use_chunked": {"type": "boolean"},
                "include_internal_spaces": {"type": "boolean"},
            },
        },
        "defense": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["none", "lp_mst", "grafting_ldp", "id_lmid",
                                  "reduced_leakage"]},
                "epsilon_grid": {"type": "array", "items": _NUM, "minItems": 1},
                "xi_grid": {"type": "array", "items": _NUM, "minItems": 1},
                "stages": {"enum": [1, 2]},
                "graft": {"type": "boolean"},
                "he_backend": {"enum": ["mock", "paillier"]},
                "key_bits": {"enum": [512, 1024, 2048]},
            },
        },
        "seeds": {"type": "array", "items": _INT, "minItems": 1,
                  "uniqueItems": True},
        "out_dir": {"type": "string"},
    },
}


class ConfigError(ValueError):
    """Invalid experiment config; message carries the offending field path."""


class CellError(RuntimeError):
    """A grid cell failed; message names the cell."""


def _field_path(err):
    parts = ["$"] + [str(p) for p in err.absolute_path]
    return ".".join(parts)


def validate_config(cfg):
    """Schema-check plus cross-field rules; returns cfg with defaults set."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = jsonschema.exceptions.best_match(errors)
        raise ConfigError(f"{_field_path(e)}: {e.message}")

    cfg = json.loads(json.dumps(cfg))  # deep copy, JSON-clean
    ds = cfg["dataset"]
    if ds["kind"] == "csv":
        for key in ("path", "label_column"):
            if key not in ds:
                raise ConfigError(f"$.dataset.{key}: required for kind 'csv'")
    ds.setdefault("test_fraction", 0.2)

    part = cfg.setdefault("partition", {})
    part.setdefault("mode", "random_half")
    if part["mode"] == "top_k_percentile_to_attacker" and "k_percent" not in part:
        raise ConfigError("$.partition.k_percent: required for percentile mode")
    if part["mode"] == "explicit" and "explicit" not in part:
        raise ConfigError("$.partition.explicit: required for explicit mode")

    dfn = cfg.setdefault("defense", {})
    dfn.setdefault("kind", "none")
    if dfn["kind"] in ("lp_mst", "grafting_ldp") and "epsilon_grid" not in dfn:
        raise ConfigError(f"$.defense.epsilon_grid: required for {dfn['kind']}")
    if dfn["kind"] == "id_lmid" and "xi_grid" not in dfn:
        raise ConfigError("$.defense.xi_grid: required for id_lmid")
    dfn.setdefault("stages", 2)
    dfn.setdefault("graft", False)
    dfn.setdefault("he_backend", "mock")
    dfn.setdefault("key_bits", 512)

    cfg.setdefault("attacks", list(ATTACK_NAMES))
    cfg.setdefault("attack_params", {})
    cfg.setdefault("seeds", [0, 1, 2, 3, 4])
    cfg.setdefault("name", "experiment")
    return cfg


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"$: not valid JSON ({exc})") from exc
    return validate_config(cfg)


def build_dataset(ds_cfg):
    if ds_cfg["kind"] == "csv":
        data = datasets.load_csv(ds_cfg["path"], ds_cfg["label_column"],
                                 class_count=ds_cfg.get("class_count"))
        name = os.path.splitext(os.path.basename(ds_cfg["path"]))[0]
    else:
        data = datasets.gen_synthetic(
            ds_cfg.get("n", 1000), ds_cfg.get("features", 10),
            ds_cfg.get("classes", 2), ds_cfg.get("cluster_spread", 1.0),
            ds_cfg.get("seed", 0))
        name = "synthetic"
    sub = ds_cfg.get("subsample")
    if sub is not None and sub < data.n_samples:
        rng = np.random.default_rng(ds_cfg.get("seed", 0))
        keep = np.sort(rng.choice(data.n_samples, size=sub, replace=False))
        data = data.subset(keep)
    return name, data


def defense_grid(dfn):
    """(parameter value or None) per grid cell for the configured defense."""
    kind = dfn["kind"]
    if kind in ("lp_mst", "grafting_ldp"):
        return list(dfn["epsilon_grid"])
    if kind == "id_lmid":
        return list(dfn["xi_grid"])
    return [None]


_DEFENSE_STREAM = {"none": 0, "lp_mst": 1, "grafting_ldp": 1, "id_lmid": 2,
                   "reduced_leakage": 3}


def cell_seeds(seed, defense_kind):
    """Per-cell sub-seeds, order-independent across the grid.

    The training stream is keyed by (seed, defense family) only, so sweeps
    over a defense parameter are paired draw-for-draw, and the graft variant
    sees exactly the noisy labels of its plain counterpart.
    """
    ss = np.random.SeedSequence([seed, _DEFENSE_STREAM[defense_kind]])
    train_s, attack_s = (int(x) for x in ss.generate_state(2, dtype=np.uint64))
    return train_s, attack_s


def _defense_config(dfn, parameter):
    kind = dfn["kind"]
    kwargs = {"kind": kind, "stages": dfn["stages"], "graft": dfn["graft"],
              "he_backend": dfn["he_backend"], "key_bits": dfn["key_bits"]}
    if kind in ("lp_mst", "grafting_ldp"):
        kwargs["epsilon"] = parameter
    elif kind == "id_lmid":
        kwargs["xi"] = parameter
    return DefenseConfig(**kwargs)


def _protocol_config(cfg, parameter, train_seed, kind_override=None):
    dfn = dict(cfg["defense"])
    if kind_override is not None:
        dfn["kind"] = kind_override
    return ProtocolConfig(defense=_defense_config(dfn, parameter),
                          seed=train_seed, **cfg["protocol"])


def prepare_seed_data(cfg, data, seed):
    """Shared per-seed inputs: the split and the feature partition."""
    train, test = datasets.train_test_split(data, cfg["dataset"]["test_fraction"],
                                            seed)
    part = cfg["partition"]
    spec = datasets.PartitionSpec(mode=part["mode"],
                                  k_percent=part.get("k_percent"),
                                  seed=seed, explicit=part.get("explicit"))
    views = datasets.make_partition(train, spec)
    return train, test, views


def _broadcast_count(transcript):
    return sum(1 for e in transcript.events if e.kind == "broadcast")


def run_cell(cfg, dataset_name, data, parameter, seed, baseline_comm=None,
             attacks=None, dump_dir=None):
    """One grid cell: train under the defense, attack party 2, score."""
    attacks = cfg["attacks"] if attacks is None else attacks
    train, test, views = prepare_seed_data(cfg, data, seed)
    train_seed, attack_seed = cell_seeds(seed, cfg["defense"]["kind"])
    pconf = _protocol_config(cfg, parameter, train_seed)

    t0 = time.perf_counter()
    result = train_federated(pconf, views, train)
    train_secs = time.perf_counter() - t0

    row = {
        "dataset": dataset_name,
        "model": cfg["protocol"].get("model_kind", "random_forest"),
        "defense": cfg["defense"]["kind"],
        "parameter": parameter,
        "seed": seed,
        "ciphertexts": result.comm.total,
        "train_seconds": train_secs,
    }
    if baseline_comm is not None:
        row["comm_rate"] = comm_rate(result.comm, baseline_comm)
    elif cfg["defense"]["kind"] == "none":
        row["comm_rate"] = 1.0

    try:
        row["auc"] = auc(test.labels, result.model.predict_scores(test.features))
    except UndefinedAUCError:
        row["auc"] = None

    attacker_id = 2
    transcript = result.transcripts[attacker_id]
    attacker_view_cols = next(v.feature_indices for v in views
                              if v.party_id == attacker_id)
    local = train.features[:, attacker_view_cols]
    row["broadcasts"] = _broadcast_count(transcript)

    ap_overrides = dict(cfg["attack_params"])
    kind = cfg["protocol"].get("model_kind", "random_forest")
    if "eta" not in ap_overrides:
        params = AttackParams.for_model(kind, seed=attack_seed, **ap_overrides)
    else:
        params = AttackParams(seed=attack_seed, **ap_overrides)

    t1 = time.perf_counter()
    view = attacker_view_from_transcript(transcript)
    for method in attacks:
        if method == "id2graph":
            res = attack_id2graph(transcript, local, train.class_count, params)
        elif method == "cl":
            res = attack_cl(local, train.class_count, attack_seed)
        elif method == "uni":
            res = attack_uni(view, include_internal=params.include_internal_spaces)
        else:
            res = attack_uni_cl(view, local, train.class_count, attack_seed)
        row[f"v_{method}"] = v_measure(train.labels, res.assignment)
    row["attack_seconds"] = time.perf_counter() - t1

    if dump_dir is not None:
        os.makedirs(dump_dir, exist_ok=True)
        tag = f"{cfg['defense']['kind']}-{parameter}-seed{seed}"
        for pid, tr in result.transcripts.items():
            atomic_write(os.path.join(dump_dir, f"{tag}-party{pid}.json"),
                         tr.to_json())
    return row, result


def atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def rows_to_csv(rows, columns):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


ROW_COLUMNS = ("dataset", "model", "defense", "parameter", "seed",
               "v_id2graph", "v_cl", "v_uni", "v_uni_cl", "auc",
               "ciphertexts", "comm_rate", "broadcasts")
AGG_METRICS = ("v_id2graph", "v_cl", "v_uni", "v_uni_cl", "auc", "comm_rate",
               "ciphertexts", "broadcasts")


def worker_count(explicit=None):
    if explicit is not None:
        return max(1, explicit)
    env = os.environ.get("TREELEAK_THREADS")
    return max(1, int(env)) if env else 1


def run_experiment(cfg, out_dir, threads=None, dump_transcripts=None,
                   emit_plotdata=False):
    """Execute the full grid and write report artifacts under out_dir.

    Returns:
        dict with "rows", "aggregates", and "artifacts" (paths written).
    """
    cfg = validate_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    dataset_name, data = build_dataset(cfg["dataset"])
    grid = defense_grid(cfg["defense"])
    seeds = cfg["seeds"]
    pool = worker_count(threads)
    defended = cfg["defense"]["kind"] != "none"

    def _cell_name(param, seed):
        return f"(defense={cfg['defense']['kind']}, parameter={param}, seed={seed})"

    baselines = {}
    if defended:
        def _baseline(seed):
            train, _, views = prepare_seed_data(cfg, data, seed)
            train_seed, _ = cell_seeds(seed, "none")
            pconf = _protocol_config(cfg, None, train_seed, kind_override="none")
            return seed, train_federated(pconf, views, train)

        try:
            if pool > 1:
                with ThreadPoolExecutor(max_workers=pool) as ex:
                    for seed, res in ex.map(_baseline, seeds):
                        baselines[seed] = res
            else:
                for seed in seeds:
                    baselines[seed] = _baseline(seed)[1]
        except Exception as exc:
            raise CellError(f"baseline cell failed: {exc}") from exc

    dump_dir = None
    if dump_transcripts:
        dump_dir = (dump_transcripts if os.path.isabs(dump_transcripts)
                    else os.path.join(out_dir, dump_transcripts))

    def _run(cell):
        param, seed = cell
        base = baselines[seed].comm if defended else None
        try:
            row, _ = run_cell(cfg, dataset_name, data, param, seed,
                              baseline_comm=base, dump_dir=dump_dir)
        except Exception as exc:
            raise CellError(f"cell {_cell_name(param, seed)} failed: {exc}") from exc
        return row

    cells = [(param, seed) for param in grid for seed in seeds]
    if pool > 1:
        with ThreadPoolExecutor(max_workers=pool) as ex:
            rows = list(ex.map(_run, cells))
    else:
        rows = [_run(c) for c in cells]

    rows.sort(key=lambda r: (str(r["parameter"]), r["seed"]))
    for seed, res in sorted(baselines.items()):
        rows.append({"dataset": dataset_name, "model": rows[0]["model"],
                     "defense": "none", "parameter": None, "seed": seed,
                     "ciphertexts": res.comm.total, "comm_rate": 1.0})

    aggregates = aggregate(rows, ("dataset", "model", "defense", "parameter"),
                           AGG_METRICS)

    artifacts = {}
    rows_csv = rows_to_csv(rows, ROW_COLUMNS)
    artifacts["rows_csv"] = os.path.join(out_dir, "rows.csv")
    atomic_write(artifacts["rows_csv"], rows_csv)

    agg_cols = ["dataset", "model", "defense", "parameter", "n_seeds"]
    for mk in AGG_METRICS:
        agg_cols += [f"{mk}_mean", f"{mk}_std"]
    artifacts["report_csv"] = os.path.join(out_dir, "report.csv")
    atomic_write(artifacts["report_csv"], rows_to_csv(aggregates, agg_cols))

    report = {"name": cfg["name"], "dataset": dataset_name,
              "config": cfg, "rows": rows, "aggregates": aggregates,
              "auc_reduction": "macro one-vs-rest"}
    artifacts["report_json"] = os.path.join(out_dir, "report.json")
    atomic_write(artifacts["report_json"],
                 json.dumps(report, sort_keys=True, indent=2, default=str))

    if emit_plotdata:
        sweep_cols = ("defense", "parameter", "method", "v_mean", "v_std",
                      "auc_mean")
        sweep_rows = []
        for agg in aggregates:
            for method in ATTACK_NAMES:
                if f"v_{method}_mean" not in agg:
                    continue
                sweep_rows.append({
                    "defense": agg["defense"], "parameter": agg["parameter"],
                    "method": method, "v_mean": agg[f"v_{method}_mean"],
                    "v_std": agg[f"v_{method}_std"],
                    "auc_mean": agg.get("auc_mean")})
        artifacts["plot_sweep_csv"] = os.path.join(out_dir, "plot_sweep.csv")
        atomic_write(artifacts["plot_sweep_csv"],
                     rows_to_csv(sweep_rows, sweep_cols))

    return {"rows": rows, "aggregates": aggregates, "artifacts": artifacts}


def merge_reports(run_dirs, out_dir):
    """Aggregate rows.csv files from finished runs into one report."""
    rows = []
    for d in run_dirs:
        path = os.path.join(d, "rows.csv")
        with open(path, "r", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                row = dict(rec)
                for k in AGG_METRICS:
                    row[k] = float(row[k]) if row.get(k) else None
                row["seed"] = int(row["seed"]) if row.get("seed") else None
                rows.append(row)
    aggregates = aggregate(rows, ("dataset", "model", "defense", "parameter"),
                           AGG_METRICS)
    os.makedirs(out_dir, exist_ok=True)
    agg_cols = ["dataset", "model", "defense", "parameter", "n_seeds"]
    for mk in AGG_METRICS:
        agg_cols += [f"{mk}_mean", f"{mk}_std"]
    out_path = os.path.join(out_dir, "merged_report.csv")
    atomic_write(out_path, rows_to_csv(aggregates, agg_cols))
    return {"rows": rows, "aggregates": aggregates,
            "artifacts": {"merged_csv": out_path}}
