"""``softquery`` command-line entry point.

Every command writes a ``run.json`` next to its outputs recording the
resolved configuration and seeds together with SHA-256 digests of the inputs.
Failures print one JSON object on stderr and exit with a code that
identifies the error class.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (AffineCalibration, CalibratedBackend, CalibrationExample, CalibrationHyper,
                          hyper_dict, train_calibration)
from .confidence import ClosedWorldBackend, EmbeddingScorer, ScorerHyper, tabular_backend, train_embedding_scorer
from .dataset import (ALPHA_MODES, BETA_MODES, QUERY_TYPES, TRAIN_TYPES, DatasetConfig, build_dataset,
                      load_records)
from .errors import BudgetExceededError, ConfigError, SoftQueryError
from .inference import InferenceConfig, answer_query, rank_answers
from .kg import SPLITS, load_kg
from .metrics import evaluate_run, write_table_csv
from .oracle import DEFAULT_BUDGET, brute_force_utility
from .query import bind, format_query, parse_query
from .synthetic import mixed_queries, random_kg

log = logging.getLogger("softquery")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NOT_FOUND = 3
EXIT_BUDGET = BudgetExceededError.exit_code
EXIT_MISMATCH = 6


class OracleMismatch(SoftQueryError):
    exit_code = EXIT_MISMATCH


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def sub_seed(master: int, name: str) -> int:
    """Independent 32-bit seed for the named random stream."""
    seq = np.random.SeedSequence([int(master), zlib.crc32(name.encode())])
    return int(seq.generate_state(1)[0])


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fp:
        for block in iter(lambda: fp.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def digests(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            out[str(f)] = sha256(f)
    return out


def _require(path, what):
    if path is None:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def write_run_json(out_dir, command, config, seeds, inputs):
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    meta = {"command": command, "version": __version__, "config": config, "seeds": seeds,
            "inputs": digests(inputs)}
    (Path(out_dir) / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def make_backend(descriptor: str, kg):
    """``exact:<split>``, ``tabular:<path>`` or ``embedding:<checkpoint>``."""
    kind, _, arg = descriptor.partition(":")
    if kind == "exact":
        split = arg or "train"
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r} in backend {descriptor!r}")
        return ClosedWorldBackend(kg, split)
    if kind == "tabular":
        return tabular_backend(_require(arg, "tabular score file"), kg)
    if kind == "embedding":
        scorer = EmbeddingScorer.load(_require(arg, "embedding checkpoint"))
        if (scorer.num_entities, scorer.num_relations) != (kg.num_entities, kg.num_relations):
            raise ConfigError("embedding checkpoint does not match the KG vocabulary")
        return scorer
    raise ConfigError(f"unknown backend {descriptor!r}")


def _backend_inputs(descriptor):
    kind, _, arg = descriptor.partition(":")
    return [arg] if kind in ("tabular", "embedding") and arg else []


def _record_files(path):
    p = Path(path)
    return sorted(p.rglob("*.jsonl")) if p.is_dir() else [p]


def read_queries(path, kg):
    """``[(id, bound query)]`` from dataset JSONL files or a text file.

    Text lines are ``<id><TAB><query>`` or just ``<query>`` (id = line number);
    blank lines and lines starting with ``#`` are ignored.
    """
    p = _require(path, "query file")
    out = []
    if p.is_dir() or p.suffix == ".jsonl":
        for f in _record_files(p):
            for rec in load_records(f, check=False):
                out.append((rec.id, bind(rec.query, kg)))
        return out
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        qid, sep, text = line.partition("\t")
        if not sep:
            qid, text = str(lineno), line
        out.append((qid, bind(parse_query(text), kg)))
    return out


def read_predictions(path) -> dict:
    p = _require(path, "predictions file")
    preds = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise SoftQueryError(f"{p}:{lineno}: expected query_id, entity, utility")
        qid, ent, val = parts
        try:
            preds.setdefault(qid, {})[ent] = float(val)
        except ValueError:
            raise SoftQueryError(f"{p}:{lineno}: utility {val!r} is not a number") from None
    return preds


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_build_dataset(cfg):
    kg_dir = _require(cfg["kg_dir"], "--kg-dir")
    out = cfg["out"] or "dataset"
    seed = sub_seed(cfg["seed"], "dataset")
    ds = DatasetConfig(
        kg_dir=str(kg_dir), out_dir=out,
        train_types=tuple(cfg["train_types"]), eval_types=tuple(cfg["eval_types"]),
        n_train=cfg["n_train"], n_eval=cfg["n_eval"],
        alpha_mode=cfg["alpha_mode"], beta_mode=cfg["beta_mode"],
        hybrid_per_query=cfg["hybrid_per_query"], max_answers=cfg["max_answers"],
        seed=seed, exact=cfg["exact"], budget=cfg["budget"])
    report = build_dataset(ds)
    write_run_json(out, "build-dataset", cfg, {"master": cfg["seed"], "dataset": seed}, [kg_dir])
    print(json.dumps(report["counts"], sort_keys=True))


def cmd_answer(cfg):
    kg_dir = _require(cfg["kg_dir"], "--kg-dir")
    kg = load_kg(kg_dir)
    backend = make_backend(cfg["backend"], kg)
    cal_spec = cfg["calibration"] or "none"
    if cal_spec != "none":
        kind, _, arg = cal_spec.partition(":")
        if kind != "learned":
            raise ConfigError(f"unknown calibration {cal_spec!r}; use none or learned:<checkpoint>")
        if not isinstance(backend, EmbeddingScorer):
            raise ConfigError("learned calibration requires an embedding backend")
        backend = CalibratedBackend(backend, AffineCalibration.load(_require(arg, "calibration checkpoint")))
    config = InferenceConfig(delta1=cfg["delta1"], delta2=cfg["delta2"], debias=cfg["debias"] or 0.0,
                             cycle_budget=cfg["budget"])
    queries = read_queries(cfg["queries"], kg)
    out = Path(cfg["out"] or "answers")
    out.mkdir(parents=True, exist_ok=True)
    trace_fp = open(out / "trace.jsonl", "w", encoding="utf-8") if cfg["emit_trace"] else None
    try:
        with open(out / "predictions.tsv", "w", encoding="utf-8") as fp:
            for qid, q in queries:
                trace = [] if trace_fp else None
                u = answer_query(q, backend, config, trace)
                for e, v in rank_answers(u):
                    fp.write(f"{qid}\t{kg.entities[e]}\t{v!r}\n")
                for ev in trace or ():
                    trace_fp.write(json.dumps({"query_id": qid, **ev}, default=_jsonable, sort_keys=True) + "\n")
    finally:
        if trace_fp:
            trace_fp.close()
    inputs = [kg_dir, cfg["queries"], *_backend_inputs(cfg["backend"])]
    if cal_spec != "none":
        inputs.append(cal_spec.partition(":")[2])
    write_run_json(out, "answer", cfg, {"master": cfg["seed"]}, inputs)
    print(f"answered {len(queries)} queries -> {out / 'predictions.tsv'}")


def cmd_calibrate(cfg):
    kg_dir = _require(cfg["kg_dir"], "--kg-dir")
    kg = load_kg(kg_dir)
    backend = make_backend(cfg["backend"], kg)
    if not isinstance(backend, EmbeddingScorer):
        raise ConfigError("learned calibration requires an embedding backend")
    examples = []
    for f in _record_files(_require(cfg["queries"], "--queries")):
        for rec in load_records(f, check=False):
            targets = {kg.entity_index[e]: v for e, v in rec.test_answers.items()}
            examples.append(CalibrationExample(bind(rec.query, kg), targets))
    if not examples:
        raise ConfigError("no training queries found")
    seed = sub_seed(cfg["seed"], "training")
    hyper = CalibrationHyper(learning_rate=cfg["learning_rate"], epochs=cfg["epochs"],
                             batch_size=cfg["batch_size"], seed=seed, entity_l1=cfg["entity_l1"])
    history = []
    cal = train_calibration(backend, AffineCalibration.for_scorer(backend), examples, hyper, history)
    out = Path(cfg["out"] or "calibration")
    out.mkdir(parents=True, exist_ok=True)
    cal.save(out / "calibration.bin", meta={"hyper": hyper_dict(hyper), "loss_history": history})
    write_run_json(out, "calibrate", cfg, {"master": cfg["seed"], "training": seed},
                   [kg_dir, cfg["queries"], *_backend_inputs(cfg["backend"])])
    print(f"loss {history[0]:.6g} -> {history[-1]:.6g}" if history else "no epochs run")


def cmd_train_scorer(cfg):
    kg_dir = _require(cfg["kg_dir"], "--kg-dir")
    kg = load_kg(kg_dir)
    seed = sub_seed(cfg["seed"], "training")
    hyper = ScorerHyper(dim=cfg["dim"], epochs=cfg["epochs"], learning_rate=cfg["learning_rate"],
                        negatives=cfg["negatives"], seed=seed)
    history = []
    model = train_embedding_scorer(kg, hyper, history=history)
    out = Path(cfg["out"] or "scorer")
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "scorer.bin")
    write_run_json(out, "train-scorer", cfg, {"master": cfg["seed"], "training": seed}, [kg_dir])
    if history:
        print(f"train MSE {history[0]:.6g} -> {history[-1]:.6g}")


def cmd_evaluate(cfg):
    records = []
    for f in _record_files(_require(cfg["records"], "--records")):
        records.extend(load_records(f, max_answers=cfg["max_answers"]))
    preds = read_predictions(cfg["predictions"])
    order = None
    if cfg["kg_dir"]:
        order = load_kg(_require(cfg["kg_dir"], "--kg-dir")).entity_index
    report = evaluate_run(records, preds, order, cfg["ndcg_k"])
    out = Path(cfg["out"] or "evaluation")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    types = [t for t in QUERY_TYPES if t in report["types"]]
    write_table_csv(report, out / "table.csv", types)
    inputs = [cfg["records"], cfg["predictions"]] + ([cfg["kg_dir"]] if cfg["kg_dir"] else [])
    write_run_json(out, "evaluate", cfg, {"master": cfg["seed"]}, inputs)
    print(json.dumps(report["average"], sort_keys=True))


def cmd_oracle_check(cfg):
    seed = sub_seed(cfg["seed"], "oracle-check")
    rng = np.random.default_rng(seed)
    n, per_kg = cfg["n"], 13
    matches = total = 0
    failures = []
    while total < n:
        kg = random_kg(rng, int(rng.integers(5, cfg["entities"] + 1)), int(rng.integers(1, cfg["relations"] + 1)))
        backend = ClosedWorldBackend(kg, "train")
        for kind, q in mixed_queries(rng, kg, min(per_kg, n - total), max_existentials=cfg["max_existentials"]):
            total += 1
            u = answer_query(q, backend, InferenceConfig(cycle_budget=cfg["budget"]))
            v = brute_force_utility(q, backend, cfg["budget"])
            if np.array_equal(u, v):
                matches += 1
            elif len(failures) < 10:
                failures.append({"type": kind, "query": format_query(q)})
    summary = {"matches": matches, "total": total, "failures": failures}
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle_check.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        write_run_json(out, "oracle-check", cfg, {"master": cfg["seed"], "oracle-check": seed}, [])
    print(f"{matches}/{total} exact matches")
    if matches != total:
        raise OracleMismatch(f"{total - matches} of {total} queries differ from the oracle")


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

COMMON = {"seed": 0, "out": None, "config": None, "verbose": False}
DEFAULTS = {
    "build-dataset": {"kg_dir": None, "n_train": 100, "n_eval": 20, "alpha_mode": "hybrid",
                      "beta_mode": "random", "hybrid_per_query": False, "max_answers": 100,
                      "train_types": list(TRAIN_TYPES), "eval_types": list(QUERY_TYPES),
                      "exact": False, "budget": DEFAULT_BUDGET},
    "answer": {"kg_dir": None, "backend": "exact:train", "queries": None, "calibration": "none",
               "debias": 0.0, "delta1": None, "delta2": None, "budget": 10**6, "emit_trace": False},
    "calibrate": {"kg_dir": None, "backend": None, "queries": None, "learning_rate": 0.005,
                  "epochs": 100, "batch_size": 32, "entity_l1": 0.1},
    "train-scorer": {"kg_dir": None, "dim": 16, "epochs": 200, "learning_rate": 0.05, "negatives": 4},
    "evaluate": {"records": None, "predictions": None, "kg_dir": None, "ndcg_k": None,
                 "max_answers": 100},
    "oracle-check": {"n": 1000, "entities": 30, "relations": 5, "max_existentials": 3,
                     "budget": DEFAULT_BUDGET},
}
COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "answer": cmd_answer,
    "calibrate": cmd_calibrate,
    "train-scorer": cmd_train_scorer,
    "evaluate": cmd_evaluate,
    "oracle-check": cmd_oracle_check,
}


def _unit(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("must lie in [0, 1]")
    return v


def build_parser():
    parser = argparse.ArgumentParser(prog="softquery", description="Soft-query answering over uncertain KGs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=None)
        p.add_argument("--config", help="JSON file with option values; command-line flags win")
        p.add_argument("--seed", type=int, help="master seed (default 0)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--verbose", action="store_const", const=True)
        return p

    p = add("build-dataset", "sample soft queries and keep the useful ones")
    p.add_argument("--kg-dir")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-eval", type=int)
    p.add_argument("--alpha-mode", choices=ALPHA_MODES)
    p.add_argument("--beta-mode", choices=BETA_MODES)
    p.add_argument("--hybrid-per-query", action="store_const", const=True)
    p.add_argument("--max-answers", type=int)
    p.add_argument("--train-types", nargs="+", choices=TRAIN_TYPES)
    p.add_argument("--eval-types", nargs="+", choices=QUERY_TYPES)
    p.add_argument("--exact", action="store_const", const=True, help="compute answers with the oracle")
    p.add_argument("--budget", type=int)

    p = add("answer", "answer queries and write ranked predictions")
    p.add_argument("--kg-dir")
    p.add_argument("--backend", help="exact:<split> | tabular:<path> | embedding:<checkpoint>")
    p.add_argument("--queries", help="dataset JSONL file/directory or text file of queries")
    p.add_argument("--calibration", help="none | learned:<checkpoint>")
    p.add_argument("--debias", type=_unit, help="lower every necessity by this amount")
    p.add_argument("--delta1", type=_unit)
    p.add_argument("--delta2", type=_unit)
    p.add_argument("--budget", type=int, help="cycle-enumeration budget")
    p.add_argument("--emit-trace", action="store_const", const=True)

    p = add("calibrate", "fit the affine confidence calibration")
    p.add_argument("--kg-dir")
    p.add_argument("--backend", help="embedding:<checkpoint>")
    p.add_argument("--queries", help="training records (alpha = 0)")
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--entity-l1", type=float)

    p = add("train-scorer", "train the embedding confidence scorer")
    p.add_argument("--kg-dir")
    p.add_argument("--dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--negatives", type=int)

    p = add("evaluate", "score predictions against dataset records")
    p.add_argument("--records")
    p.add_argument("--predictions")
    p.add_argument("--kg-dir", help="optional; entity order for tie-breaking")
    p.add_argument("--ndcg-k", type=int)
    p.add_argument("--max-answers", type=int)

    p = add("oracle-check", "cross-check inference against brute force on random toy KGs")
    p.add_argument("--n", type=int)
    p.add_argument("--entities", type=int)
    p.add_argument("--relations", type=int)
    p.add_argument("--max-existentials", type=int)
    p.add_argument("--budget", type=int)
    return parser


def resolve_config(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(COMMON) | DEFAULTS[args.command]
    flags = {k: v for k, v in vars(args).items() if k != "command" and v is not None}
    if flags.get("config"):
        path = _require(flags["config"], "config file")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        loaded = {k.replace("-", "_"): v for k, v in loaded.items()}
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {unknown}")
        cfg.update(loaded)
    cfg.update(flags)
    return cfg


def _error_json(exc, code):
    return json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code})


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        logging.basicConfig(level=logging.INFO if cfg["verbose"] else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        COMMANDS[args.command](cfg)
    except FileNotFoundError as exc:
        print(_error_json(exc, EXIT_NOT_FOUND), file=sys.stderr)
        return EXIT_NOT_FOUND
    except SoftQueryError as exc:
        print(_error_json(exc, exc.exit_code), file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(_error_json(exc, EXIT_CONFIG), file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
