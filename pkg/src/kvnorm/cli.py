"""Command-line entry point: ``kvnorm {train,eval,sweep,analyze,replay}``.

Every command writes ``manifest.json`` into its output directory before any
other output. ``kvnorm replay MANIFEST --out DIR`` re-runs the recorded,
fully resolved configuration.

Config precedence: flags > ``--config`` JSON file > built-in defaults. The
seed falls back to ``$KVNORM_SEED`` when neither flag nor file sets it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from typing import Optional


from . import __version__, checkpoint
from .analysis import alr_heatmap, dim_zero_probe, dump_csv, norm_attention_dump
from .cache import (POLICY_ALIASES, PREFILL_EVICTION_MODES, CompressionConfig, EvictionLog,
                    Policy)
from .model import ModelConfig
from .train import TrainConfig, TrainingDiverged, loss_curve_csv, train
from .workloads import (PUNCTUATION_TOKENS, SPECIAL_TOKENS, EvalResult, corpus_chunks,
                        eval_lm, eval_retrieval, make_samples, results_csv, tokenize)

log = logging.getLogger("kvnorm")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


DEFAULTS = {
    "train": {
        "out": None, "seed": None, "threads": 1,
        "model": {}, "train": {},
    },
    "eval": {
        "model": None, "out": None, "seed": None, "threads": 1, "task": "passkey",
        "policy": "none", "ratio": None, "budget": None, "skip_layers": "0,1",
        "protect_recent": 1, "local_window": 8, "prefill_eviction": "stream", "corpus": None,
        "chunk_len": 128, "max_chunks": None, "num_samples": 100, "length": 128,
        "depths": "0,0.25,0.5,0.75,1", "key_len": 5, "audit_log": False,
    },
    "sweep": {
        "model": None, "out": None, "seed": None, "threads": 1, "task": "passkey",
        "policies": "l2-low,l2-high,random", "ratios": "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9",
        "depths": "0,0.25,0.5,0.75,1", "skip_layer_sets": None, "skip_layers": "0,1",
        "protect_recent": 1, "local_window": 8, "prefill_eviction": "stream", "corpus": None,
        "chunk_len": 128, "max_chunks": None, "num_samples": 100, "length": 128, "key_len": 5,
    },
    "analyze": {
        "model": None, "out": None, "seed": None, "threads": 1, "mode": "alr",
        "corpus": None, "chunk_len": 128, "max_chunks": 16, "last_steps": 1,
        "length": 128, "k_dims": 2, "probe_mode": "peak_dims", "layer": None, "head": 0,
        "target": None,
    },
}


# -- parsing helpers ----------------------------------------------------------

def parse_int_list(text) -> list[int]:
    if text is None:
        return []
    if isinstance(text, (list, tuple)):
        return [int(i) for i in text]
    text = str(text).strip()
    if text.lower() in ("", "none"):
        return []
    return [int(t) for t in text.split(",")]


def parse_float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(i) for i in text]
    return [float(t) for t in str(text).split(",") if t.strip()]


def parse_policy(name: str) -> Policy:
    if name in POLICY_ALIASES:
        return POLICY_ALIASES[name]
    try:
        return Policy(name)
    except ValueError:
        raise UsageError(f"unknown policy {name!r}; choose from {sorted(POLICY_ALIASES)}")


def build_compression(policy: str, ratio, budget, skip_layers, protect_recent: int,
                      local_window: int, seed: int, prefill_eviction: str = "stream"
                      ) -> CompressionConfig:
    p = parse_policy(policy)
    if prefill_eviction not in PREFILL_EVICTION_MODES:
        raise UsageError(f"--prefill-eviction must be one of {PREFILL_EVICTION_MODES}")
    kw = dict(skip_layers=parse_int_list(skip_layers), protect_recent=int(protect_recent),
              seed=int(seed), prefill_eviction=prefill_eviction)
    if p is Policy.FASTGEN_LITE:
        if ratio is not None or budget is not None:
            raise UsageError("fastgen takes no --ratio/--budget")
        return CompressionConfig(p, local_window=int(local_window),
                                 special_token_ids=SPECIAL_TOKENS,
                                 punctuation_token_ids=PUNCTUATION_TOKENS, **kw)
    if p is Policy.NONE:
        if ratio is not None or budget is not None:
            raise UsageError("--policy none conflicts with --ratio/--budget")
        return CompressionConfig(p, **kw)
    if (ratio is None) == (budget is None):
        raise UsageError(f"--policy {policy} needs exactly one of --ratio/--budget")
    try:
        return CompressionConfig(p, budget=None if budget is None else int(budget),
                                 ratio=None if ratio is None else float(ratio), **kw)
    except ValueError as e:
        raise UsageError(str(e))


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_text(path: str, text: str) -> None:
    checkpoint.atomic_write(path, text.encode("utf-8"))


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))


def _load_model(path: str):
    if not os.path.isfile(path):
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return checkpoint.load(path)
    except checkpoint.CheckpointError as e:
        raise UsageError(f"cannot load checkpoint {path}: {e}")


def _read_corpus(path: Optional[str]) -> list[int]:
    if not path or not os.path.isfile(path):
        raise UsageError(f"corpus not found: {path}")
    with open(path, "rb") as fh:
        return tokenize(fh.read())


def write_manifest(command: str, cfg: dict, outputs: list[str]) -> None:
    digests = {}
    paths = {k: cfg.get(k) for k in ("model", "corpus", "config")}
    if isinstance(cfg.get("train"), dict):
        paths["corpus"] = cfg["train"].get("corpus_path")
    for key, p in paths.items():
        if isinstance(p, str) and os.path.isfile(p):
            digests[key] = {"path": os.path.abspath(p), "sha256": file_digest(p)}
    # the output directory is chosen at replay time, so it stays out of the record
    manifest = {
        "command": command,
        "config": {k: v for k, v in cfg.items() if k != "out"},
        "version": __version__,
        "seeds": {"seed": cfg.get("seed")},
        "inputs": digests,
        "outputs": outputs,
    }
    write_text(os.path.join(cfg["out"], "manifest.json"),
               json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- commands -----------------------------------------------------------------

def cmd_train(cfg: dict) -> int:
    _require(cfg, "out")
    try:
        model_cfg = ModelConfig.from_dict(dict(cfg["model"]))
        train_dict = {"seed": cfg["seed"], **dict(cfg["train"])}
        train_cfg = TrainConfig.from_dict(train_dict)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}")
    out = cfg["out"]
    outputs = ["model.kvsq", "loss.csv"]
    write_manifest("train", cfg, outputs)
    weights, curve = train(model_cfg, train_cfg)
    checkpoint.save(weights, os.path.join(out, "model.kvsq"))
    write_text(os.path.join(out, "loss.csv"), loss_curve_csv(curve))
    return EXIT_OK


def _evaluate(cfg: dict, weights, compression: CompressionConfig, depths,
              audit: Optional[EvictionLog] = None) -> EvalResult:
    task = cfg["task"]
    if task == "lm":
        corpus = _read_corpus(cfg["corpus"])
        try:
            return eval_lm(weights, corpus, int(cfg["chunk_len"]), compression,
                           max_chunks=cfg["max_chunks"])
        except ValueError as e:
            raise UsageError(str(e))
    if task not in ("passkey", "needle"):
        raise UsageError(f"unknown task {task!r}")
    samples = make_samples(task, int(cfg["num_samples"]), int(cfg["seed"]), int(cfg["length"]),
                           depths, int(cfg["key_len"]))
    try:
        return eval_retrieval(weights, samples, compression, audit)
    except ValueError as e:
        raise UsageError(str(e))


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "model", "out")
    compression = build_compression(cfg["policy"], cfg["ratio"], cfg["budget"],
                                    cfg["skip_layers"], cfg["protect_recent"],
                                    cfg["local_window"], cfg["seed"], cfg["prefill_eviction"])
    weights = _load_model(cfg["model"])
    out = cfg["out"]
    outputs = ["result.json", "result.csv"] + (["eviction_log.csv"] if cfg["audit_log"] else [])
    write_manifest("eval", cfg, outputs)
    audit = EvictionLog() if cfg["audit_log"] else None
    res = _evaluate(cfg, weights, compression, parse_float_list(cfg["depths"]), audit)
    write_text(os.path.join(out, "result.json"), res.to_json() + "\n")
    write_text(os.path.join(out, "result.csv"), results_csv([res]))
    if audit is not None:
        write_text(os.path.join(out, "eviction_log.csv"), audit.to_csv())
    return EXIT_OK


SWEEP_EXTRA = ("depth", "achieved_ratio", "task")


def cmd_sweep(cfg: dict) -> int:
    _require(cfg, "model", "out")
    policies = [p for p in str(cfg["policies"]).split(",") if p.strip()]
    ratios = parse_float_list(cfg["ratios"])
    depths = parse_float_list(cfg["depths"]) if cfg["task"] != "lm" else [None]
    if cfg["skip_layer_sets"]:
        skip_sets = [",".join(str(i) for i in parse_int_list(s))
                     for s in str(cfg["skip_layer_sets"]).split(";")]
    else:
        skip_sets = [cfg["skip_layers"]]
    if not policies or not ratios or not depths:
        raise UsageError("sweep grids must be non-empty")
    cells = []
    for pol in policies:
        p = parse_policy(pol)
        for skip in skip_sets:
            cell_ratios = [None] if not p.budgeted else ratios
            for r in cell_ratios:
                comp = build_compression(pol, r, None, skip, cfg["protect_recent"],
                                         cfg["local_window"], cfg["seed"],
                                         cfg["prefill_eviction"])
                for d in depths:
                    cells.append((p.value, -1.0 if r is None else r,
                                  -1.0 if d is None else d, skip, comp, d))
    weights = _load_model(cfg["model"])
    write_manifest("sweep", cfg, ["sweep.csv"])
    cells.sort(key=lambda c: c[:4])
    results = []
    for *_, comp, d in cells:
        res = _evaluate(cfg, weights, comp, [d] if d is not None else [])
        res.depth = d
        res.task = cfg["task"]
        results.append(res)
    buf = [",".join(list(EvalResult.CSV_COLUMNS) + list(SWEEP_EXTRA)) + "\n"]
    for res in results:
        row = res.csv_row()
        row += ["" if res.depth is None else repr(res.depth),
                "" if res.achieved_ratio is None else repr(round(res.achieved_ratio, 12)),
                res.task]
        buf.append(",".join(row) + "\n")
    write_text(os.path.join(cfg["out"], "sweep.csv"), "".join(buf))
    return EXIT_OK


def _analysis_tokens(cfg: dict) -> list[int]:
    if cfg["corpus"]:
        toks = _read_corpus(cfg["corpus"])[:int(cfg["length"])]
    else:
        toks = make_samples("passkey", 1, int(cfg["seed"]), int(cfg["length"]), [0.5])[0].tokens
    if len(toks) < 2:
        raise UsageError("analysis needs at least two tokens")
    return toks


def cmd_analyze(cfg: dict) -> int:
    _require(cfg, "model", "out")
    mode = cfg["mode"]
    if mode not in ("alr", "dump", "probe"):
        raise UsageError("--mode must be alr, dump or probe")
    weights = _load_model(cfg["model"])
    out = cfg["out"]
    if mode == "alr":
        chunk_len = int(cfg["chunk_len"])
        if cfg["corpus"]:
            try:
                chunks = corpus_chunks(_read_corpus(cfg["corpus"]), chunk_len)
            except ValueError as e:
                raise UsageError(str(e))
            corpus_id = file_digest(cfg["corpus"])[:16]
        else:
            chunks = [s.tokens for s in make_samples("passkey", int(cfg["max_chunks"] or 16),
                                                     int(cfg["seed"]), chunk_len, [0.5])]
            corpus_id = f"passkey-seed-{cfg['seed']}"
        if cfg["max_chunks"]:
            chunks = chunks[:int(cfg["max_chunks"])]
        write_manifest("analyze", cfg, ["alr.csv", "alr_chunks.csv"])
        try:
            report = alr_heatmap(weights, chunks, chunk_len, int(cfg["last_steps"]), corpus_id)
        except ValueError as e:
            raise UsageError(str(e))
        write_text(os.path.join(out, "alr.csv"), report.to_csv())
        write_text(os.path.join(out, "alr_chunks.csv"), report.per_chunk_csv())
    elif mode == "dump":
        toks = _analysis_tokens(cfg)
        write_manifest("analyze", cfg, ["dump.csv"])
        write_text(os.path.join(out, "dump.csv"), dump_csv(norm_attention_dump(weights, toks)))
    else:
        toks = _analysis_tokens(cfg)
        write_manifest("analyze", cfg, ["probe.json"])
        try:
            res = dim_zero_probe(weights, toks, int(cfg["k_dims"]), cfg["probe_mode"],
                                 None if cfg["layer"] is None else int(cfg["layer"]),
                                 int(cfg["head"]),
                                 None if cfg["target"] is None else int(cfg["target"]),
                                 seed=int(cfg["seed"]))
        except ValueError as e:
            raise UsageError(str(e))
        write_text(os.path.join(out, "probe.json"), res.to_json() + "\n")
    return EXIT_OK


REQUIRED = {"train": ("out",), "eval": ("model", "out"), "sweep": ("model", "out"),
            "analyze": ("model", "out")}
COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "analyze": cmd_analyze}


# -- argument parsing -----------------------------------------------------------

def _common(p: argparse.ArgumentParser, model: bool = True) -> None:
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="64-bit seed (fallback: $KVNORM_SEED)")
    p.add_argument("--threads", type=int)
    if model:
        p.add_argument("--model", help="checkpoint path")


def _compression_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ratio", type=float)
    p.add_argument("--budget", type=int)
    p.add_argument("--skip-layers", dest="skip_layers",
                   help='comma-separated layer indices, default "0,1"; "none" for no skips')
    p.add_argument("--protect-recent", dest="protect_recent", type=int)
    p.add_argument("--local-window", dest="local_window", type=int)
    p.add_argument("--prefill-eviction", dest="prefill_eviction", choices=PREFILL_EVICTION_MODES,
                   help="evict after every prompt position (stream) or once at its end")


def _task_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=("lm", "passkey", "needle"))
    p.add_argument("--corpus", help="UTF-8 text file (lm task)")
    p.add_argument("--chunk-len", dest="chunk_len", type=int)
    p.add_argument("--max-chunks", dest="max_chunks", type=int)
    p.add_argument("--num-samples", dest="num_samples", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--key-len", dest="key_len", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvnorm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a toy model")
    _common(p, model=False)
    p.add_argument("--steps", type=int)
    p.add_argument("--task", choices=("passkey", "needle", "lm"))
    p.add_argument("--corpus", dest="corpus_path")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--num-layers", dest="num_layers", type=int)
    p.add_argument("--num-heads", dest="num_heads", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--d-ff", dest="d_ff", type=int)

    p = sub.add_parser("eval", help="evaluate one compression setting")
    _common(p)
    _task_flags(p)
    p.add_argument("--policy", choices=sorted(POLICY_ALIASES))
    _compression_flags(p)
    p.add_argument("--depths")
    p.add_argument("--audit-log", dest="audit_log", action="store_const", const=True)

    p = sub.add_parser("sweep", help="cross-product of policies x ratios x depths")
    _common(p)
    _task_flags(p)
    p.add_argument("--policies")
    p.add_argument("--ratios")
    p.add_argument("--depths")
    p.add_argument("--skip-layer-sets", dest="skip_layer_sets",
                   help='semicolon-separated skip sets, e.g. "0,1;0;none"')
    _compression_flags(p)

    p = sub.add_parser("analyze", help="ALr heatmap, norm/attention dump or probe")
    _common(p)
    p.add_argument("--mode", choices=("alr", "dump", "probe"))
    p.add_argument("--corpus")
    p.add_argument("--chunk-len", dest="chunk_len", type=int)
    p.add_argument("--max-chunks", dest="max_chunks", type=int)
    p.add_argument("--last-steps", dest="last_steps", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--k-dims", dest="k_dims", type=int)
    p.add_argument("--probe-mode", dest="probe_mode", choices=("peak_dims", "random_dims"))
    p.add_argument("--layer", type=int)
    p.add_argument("--head", type=int)
    p.add_argument("--target", type=int)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


_TRAIN_MODEL_KEYS = ("num_layers", "num_heads", "d_model", "d_ff")
_TRAIN_KEYS = ("steps", "task", "corpus_path", "batch_size", "lr")


def resolve(command: str, ns: argparse.Namespace) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if getattr(ns, "config", None):
        if not os.path.isfile(ns.config):
            raise UsageError(f"config file not found: {ns.config}")
        try:
            with open(ns.config) as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise UsageError(f"invalid config file: {e}")
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
        cfg["config"] = ns.config
    flags = {k: v for k, v in vars(ns).items()
             if v is not None and k not in ("command", "config", "verbose")}
    if command == "train":
        for k in _TRAIN_MODEL_KEYS:
            if k in flags:
                cfg["model"][k] = flags.pop(k)
        for k in _TRAIN_KEYS:
            if k in flags:
                cfg["train"][k] = flags.pop(k)
        if "d_model" in cfg["model"] and "num_heads" in cfg["model"]:
            cfg["model"].setdefault("d_head", cfg["model"]["d_model"] // cfg["model"]["num_heads"])
    cfg.update(flags)
    for key in ("model", "corpus", "config"):
        if isinstance(cfg.get(key), str) and cfg[key]:
            cfg[key] = os.path.abspath(cfg[key])
    if command == "train" and cfg["train"].get("corpus_path"):
        cfg["train"]["corpus_path"] = os.path.abspath(cfg["train"]["corpus_path"])
    if cfg.get("seed") is None:
        env = os.environ.get("KVNORM_SEED")
        try:
            cfg["seed"] = int(env) if env else 0
        except ValueError:
            raise UsageError(f"KVNORM_SEED is not an integer: {env!r}")
    return cfg


def run(command: str, cfg: dict) -> int:
    try:
        return COMMANDS[command](cfg)
    except UsageError as e:
        print(f"kvnorm {command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"kvnorm {command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"kvnorm {command}: I/O error: {e}", file=sys.stderr)
        return EXIT_USAGE


def replay(manifest_path: str, out: str) -> int:
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        command, cfg = manifest["command"], dict(manifest["config"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        print(f"kvnorm replay: error: unreadable manifest: {e}", file=sys.stderr)
        return EXIT_USAGE
    if command not in COMMANDS:
        print(f"kvnorm replay: error: unknown command {command!r}", file=sys.stderr)
        return EXIT_USAGE
    cfg["out"] = out
    return run(command, cfg)


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if ns.command == "replay":
        return replay(ns.manifest, ns.out)
    try:
        cfg = resolve(ns.command, ns)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"kvnorm {ns.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        _require(cfg, *REQUIRED[ns.command])
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"kvnorm {ns.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return run(ns.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
