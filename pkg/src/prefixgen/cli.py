"""Command-line entry point: ``prefixgen <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import warnings
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis, ndgrad, pipeline
from .condition_encoders import MissingAnchor, read_pocket
from .model import CHECKPOINT_VERSION, PrefixLM
from .molprops import PROPERTY_NAMES, EmptyMolecule, PropVec, StubVina, property_vector
from .smiles import SmilesError, detokenize, parse, tokenize, validate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

DATA_ERRORS = (SmilesError, EmptyMolecule, MissingAnchor, pipeline.EmptyDataset, pipeline.ConfigError,
               ndgrad.ChecksumMismatch, OSError, ValueError, KeyError, json.JSONDecodeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _version_text() -> str:
    return (f"prefixgen {__version__} (checkpoint v{CHECKPOINT_VERSION}, "
            f"tensor container v{ndgrad.FORMAT_VERSION}, dataset v{pipeline.DATASET_VERSION})")


def _write(out, text: str):
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _read_smiles_lines(path) -> list[str]:
    with open(path) as fh:
        return [line.split()[0] for line in fh if line.strip() and not line.startswith("#")]


def _load_conditions(path) -> PropVec:
    """JSON object with any of vina, qed, sa, logp, lipinski; absent keys stay unconditioned."""
    if path is None:
        return PropVec()
    with open(path) as fh:
        data = json.load(fh)
    unknown = set(data) - set(PROPERTY_NAMES) - {"pocket"}
    if unknown:
        raise ValueError(f"{path}: unknown condition keys {sorted(unknown)}")
    return PropVec.from_dict(data)


def _vina(args):
    return StubVina(getattr(args, "vina_constant", None))


# ---------------------------------------------------------------------------
# subcommands


def cmd_tokenize(args) -> int:
    items = [args.smiles] if args.smiles else _read_smiles_lines(args.input)
    lines = []
    for s in items:
        toks = tokenize(s)
        if args.check and detokenize(toks) != s:
            raise ValueError(f"round trip changed {s!r}")
        lines.append(" ".join(t.text for t in toks))
    _write(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_props(args) -> int:
    items = [args.smiles] if args.smiles else _read_smiles_lines(args.input)
    vina = _vina(args)
    rows = []
    for s in items:
        g = parse(s)
        report = validate(g)
        if not report.valid:
            raise ValueError(f"{s}: invalid molecule ({', '.join(report.reasons)})")
        rows.append(json.dumps({"smiles": s, **property_vector(g, vina).as_dict()}))
    _write(args.out, "\n".join(rows) + "\n")
    return EXIT_OK


def cmd_ingest(args) -> int:
    if args.synthetic:
        workdir = Path(args.workdir or (Path(args.out).parent if args.out else "."))
        src = pipeline.write_synthetic(workdir, args.synthetic, args.pockets, seed=args.seed or 0)
        pocket_dir = workdir
    elif args.input:
        src, pocket_dir = args.input, args.pocket_dir
    else:
        raise UsageError("ingest needs --in or --synthetic")
    ds = pipeline.ingest(src, pocket_dir, _vina(args), max_len=args.max_len)
    if args.out:
        pipeline.write_dataset(ds, args.out)
    else:
        for ex in ds.examples:
            sys.stdout.write(ex.to_json() + "\n")
    logging.info("ingested %d molecules, skipped %d", len(ds), ds.skipped)
    return EXIT_OK


def _train_config(args) -> pipeline.TrainConfig:
    overrides = {f.name: getattr(args, f"cfg_{f.name}") for f in dataclasses.fields(pipeline.TrainConfig)}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return pipeline.load_config(args.config, **overrides)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ds = pipeline.read_dataset(args.data, args.pocket_dir, args.trust_labels, _vina(args), cfg.max_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(pipeline.config_text(cfg))
    res = pipeline.train(cfg, ds, out, resume=args.resume, vina=_vina(args))
    logging.info("held-out loss %.4f -> %.4f; checkpoint %s", res.initial_heldout,
                 res.final_heldout, res.checkpoint)
    print(json.dumps({"initial_heldout": res.initial_heldout, "final_heldout": res.final_heldout,
                      "checkpoint": str(res.checkpoint)}))
    return EXIT_OK


def cmd_sample(args) -> int:
    model, _, _ = PrefixLM.load(args.ckpt)
    cond = _load_conditions(args.conditions)
    pocket = read_pocket(args.pocket) if args.pocket else None
    settings = [None] * args.n if args.unconditional else [cond] * args.n
    smiles = pipeline.sample_smiles(model, settings, [pocket] * args.n, seed=args.seed or 0,
                                    temperature=args.temperature, top_k=args.top_k or None,
                                    max_len=args.max_len)
    _write(args.out, "".join(s + "\n" for s in smiles))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, _, _ = PrefixLM.load(args.ckpt)
    ref = pipeline.read_dataset(args.data, trust_labels=True)
    train_fps = pipeline.read_dataset(args.train_data, trust_labels=True).fingerprints() \
        if args.train_data else None
    rep = pipeline.evaluate(model, ref, args.n, args.mode, args.property, args.scale, train_fps,
                            seed=args.seed or 0, temperature=args.temperature,
                            top_k=args.top_k or None, vina=_vina(args))
    _write(args.out, rep.to_json() + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    model, _, _ = PrefixLM.load(args.ckpt)
    ref = pipeline.read_dataset(args.data, trust_labels=True)
    scales = [float(s) for s in args.scales.split(",") if s.strip()]
    rows = pipeline.control_sweep(model, ref, args.property, scales, args.n, seed=args.seed or 0,
                                  temperature=args.temperature, top_k=args.top_k or None,
                                  vina=_vina(args))
    _write(args.out, pipeline.sweep_csv(rows))
    return EXIT_OK


def cmd_analyze(args) -> int:
    model, _, _ = PrefixLM.load(args.ckpt)
    pocket = read_pocket(args.pocket) if args.pocket else None
    if args.what == "attn":
        att = analysis.extract_prefix_attention(model, _load_conditions(args.conditions), pocket)
        _write(args.out, analysis.maps_csv(att.per_layer))
    else:
        rel = analysis.relation_matrix(model, _load_conditions(args.base), pocket, args.delta)
        _write(args.out, analysis.heatmap_csv(rel))
    return EXIT_OK


def cmd_embed_pocket(args) -> int:
    model, _, _ = PrefixLM.load(args.ckpt)
    g = read_pocket(args.pocket)
    anchor = args.anchor if args.anchor is not None else g.choose_anchor()
    with ndgrad.no_grad():
        emb = model.conditions.pocket(g, anchor)
    _write(args.out, json.dumps({"anchor": int(anchor),
                                 "embedding": [float(v) for v in emb.data]}) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _sampling_flags(p):
    p.add_argument("--temperature", type=float, default=1.0, help="softmax temperature; 0 = greedy")
    p.add_argument("--top-k", type=int, default=20, help="restrict sampling to the k best tokens (0 = all)")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master random seed")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread budget")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="prefixgen", description="Prefix-conditioned SMILES generation toolkit.")
    parser.add_argument("--version", action="version", version=_version_text())
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("tokenize", parents=[common], help="split SMILES into tokens (space separated)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--smiles", help="a single SMILES string")
    src.add_argument("--in", dest="input", help="file with one SMILES per line")
    p.add_argument("--check", action="store_true", help="fail unless tokens join back to the input")
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("props", parents=[common], help="compute properties; writes JSONL")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--smiles")
    src.add_argument("--in", dest="input")
    p.add_argument("--vina-constant", type=float, default=None,
                   help="docking stub returns this value (default: size-based estimate)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_props)

    p = sub.add_parser("ingest", parents=[common],
                       help="label a SMILES file (lines: SMILES [pocket_file]) into dataset JSONL")
    p.add_argument("--in", dest="input")
    p.add_argument("--pocket-dir", help="base directory for pocket files (default: SMILES file directory)")
    p.add_argument("--synthetic", type=int, default=0, metavar="N",
                   help="generate N grammar molecules plus synthetic pockets instead of reading --in")
    p.add_argument("--pockets", type=int, default=8, help="number of synthetic pockets")
    p.add_argument("--workdir", help="where synthetic corpus and pockets are written")
    p.add_argument("--max-len", type=int, default=128, help="skip molecules longer than this (tokens + 2)")
    p.add_argument("--vina-constant", type=float, default=None)
    p.add_argument("--out", help="dataset JSONL (default stdout)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common], help="train a model; writes checkpoints and a CSV log")
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--pocket-dir")
    p.add_argument("--trust-labels", action="store_true", help="use dataset labels instead of recomputing")
    p.add_argument("--vina-constant", type=float, default=None)
    grp = p.add_argument_group("config overrides (same keys as the config file)")
    for f in dataclasses.fields(pipeline.TrainConfig):
        if f.name == "seed":
            continue
        typ = {"int": int, "float": float}.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
        grp.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=typ, default=None,
                         help=f"default {f.default}")
    p.set_defaults(func=cmd_train, cfg_seed=None)

    p = sub.add_parser("sample", parents=[common], help="sample SMILES from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--conditions", help="JSON object of property conditions")
    p.add_argument("--pocket", help="pocket file")
    p.add_argument("--unconditional", action="store_true", help="use null rows for every condition")
    p.add_argument("--max-len", type=int, default=None)
    _sampling_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", parents=[common], help="validity, diversity, similarity, property stats")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset JSONL providing reference conditions")
    p.add_argument("--train-data", help="dataset for the similarity-to-training metric (default --data)")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--mode", choices=pipeline.CONDITION_MODES, default="ground_truth")
    p.add_argument("--property", choices=PROPERTY_NAMES)
    p.add_argument("--scale", type=float, default=0.0)
    p.add_argument("--vina-constant", type=float, default=None)
    _sampling_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common], help="control sweep over shifts of one property; CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--property", choices=PROPERTY_NAMES, required=True)
    p.add_argument("--scales", default="-2,0,2", help="comma separated shifts in native units; write --scales=-2,0,2 when the first is negative")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--vina-constant", type=float, default=None)
    _sampling_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", parents=[common], help="prefix attention maps or relation matrix; CSV")
    p.add_argument("what", choices=("attn", "relations"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--conditions", help="JSON conditions (attn)")
    p.add_argument("--base", help="JSON base conditions (relations)")
    p.add_argument("--pocket")
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("embed-pocket", parents=[common], help="pocket condition row as JSON")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pocket", required=True)
    p.add_argument("--anchor", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_embed_pocket)
    return parser


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if not args.verbose:
        warnings.simplefilter("ignore")
    np.seterr(all="ignore")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"prefixgen: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.DivergedLoss as exc:
        print(f"prefixgen: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except DATA_ERRORS as exc:
        print(f"prefixgen: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"prefixgen: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
