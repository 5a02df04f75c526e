"""``effcode`` command-line tool.

    effcode <command> --config run.json --out DIR [--seed N] [--threads N] [--force]

Every run writes into ``DIR``: the resolved configuration (``config.json``),
one CSV per result table with a ``<name>.csv.json`` sidecar (config hash,
runtime, columns), binary artifacts, and ``summary.json``.
"""
import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from contextlib import nullcontext
from pathlib import Path

from .container import ContainerError
from .dataio import FormatError, IngestError
from .experiments import COMMANDS, ConfigError, config_from_dict, config_to_dict
from .infotheory import set_default_workers

log = logging.getLogger("effcode")


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    return hashlib.sha256(canonical_json(config_to_dict(cfg)).encode()).hexdigest()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float) or hasattr(v, "dtype"):
        v = v.item() if hasattr(v, "item") else v
        return repr(float(v)) if isinstance(v, float) else str(v)
    return str(v)


def write_csv(path, table):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.header)
        for row in table.rows:
            w.writerow([_cell(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    return obj


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc)


def prepare_out(out, force):
    out = Path(out)
    if out.exists():
        if not out.is_dir():
            raise ConfigError(f"{out} exists and is not a directory")
        if any(out.iterdir()) and not force:
            raise ConfigError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def run(command, cfg, out, threads=None):
    """Execute one command and write its outputs to ``out`` (must already exist)."""
    out = Path(out)
    digest = config_hash(cfg)
    (out / "config.json").write_text(json.dumps(config_to_dict(cfg), sort_keys=True, indent=2) + "\n")
    if threads:
        from threadpoolctl import threadpool_limits

        set_default_workers(threads)
        limit = threadpool_limits(limits=threads)
    else:
        limit = nullcontext()
    t0 = time.perf_counter()
    with limit:
        result = COMMANDS[command](cfg)
    runtime = time.perf_counter() - t0
    outputs = []
    for name, table in result.tables.items():
        fname = f"{name}.csv"
        write_csv(out / fname, table)
        side = {"command": command, "config_hash": digest, "columns": list(table.header),
                "rows": len(table.rows), "runtime_s": runtime}
        (out / f"{fname}.json").write_text(json.dumps(side, sort_keys=True, indent=2) + "\n")
        outputs.append(fname)
    for fname, write in result.artifacts.items():
        write(out / fname)
        outputs.append(fname)
    summary = {"command": command, "config_hash": digest, "seed": cfg.seed,
               "runtime_s": runtime, "threads": threads, "outputs": outputs,
               "results": _jsonable(result.summary)}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return result


def build_parser():
    p = argparse.ArgumentParser(prog="effcode", description="Structure learning with sparse coding.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the configuration seed")
    p.add_argument("--threads", type=int, help="cap worker threads (BLAS and neighbour search)")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = prepare_out(args.out, args.force)
        run(args.command, cfg, out, args.threads)
    except ConfigError as exc:
        print(f"effcode: config error: {exc}", file=sys.stderr)
        return 2
    except (IngestError, FormatError, ContainerError, OSError, ValueError) as exc:
        print(f"effcode: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
