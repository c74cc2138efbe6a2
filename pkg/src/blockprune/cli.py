"""Command-line surface: prune, quantize, joint, simulate, eval, report.

Exit status: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io
from .errors import BlockPruneError, ConfigError, DataError, TrainingDivergence, UsageError
from .hwsim import SimConfig, report_block
from .model import PRUNABLE, BlockConfig, perplexity
from .pruner import PruneConfig, prune_model
from .quant import quantize_state

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
GRANULARITY_ALIASES = {"row": "per_row", "layer": "per_layer", "per_row": "per_row", "per_layer": "per_layer"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--checkpoint", help="checkpoint directory (default: synthetic toy model)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--model-seed", type=int, help="seed of the synthetic toy model")


def _calib_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--calib", help="raw little-endian uint32 token file")
    p.add_argument("--calib-sequences", type=int)
    p.add_argument("--calib-tokens", type=int)
    p.add_argument("--desk-scale", action="store_true",
                   help=f"use {io.DESK_SCALE[0]}x{io.DESK_SCALE[1]} calibration instead of "
                        f"{io.FULL_SCALE[0]}x{io.FULL_SCALE[1]}")


def _train_args(p: argparse.ArgumentParser, prune: bool, quant: bool) -> None:
    if prune:
        p.add_argument("--sparsity", type=float, dest="target_sparsity")
        p.add_argument("--granularity", choices=sorted(GRANULARITY_ALIASES))
        p.add_argument("--scope", choices=["layer", "attn_mlp", "block", "two_blocks"])
        p.add_argument("--metric", choices=["wanda", "magnitude"])
        p.add_argument("--lam", type=float)
        p.add_argument("--step", type=float, dest="sparsity_step")
        p.add_argument("--penalty", choices=["count", "surrogate"])
        p.add_argument("--two-stream", action="store_true", default=None)
    if quant:
        p.add_argument("--bits", type=int, dest="quant_bits")
        p.add_argument("--clip-lr", type=float, dest="clip_learning_rate")
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blockprune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("prune", help="learn per-block masks and write them with reports")
    _common(p); _calib_args(p); _train_args(p, prune=True, quant=False)

    p = sub.add_parser("quantize", help="learn clipping strengths only (no pruning)")
    _common(p); _calib_args(p); _train_args(p, prune=False, quant=True)

    p = sub.add_parser("joint", help="quantize then prune, learning masks and clips together")
    _common(p); _calib_args(p); _train_args(p, prune=True, quant=True)

    p = sub.add_parser("simulate", help="accelerator cycle report from mask files")
    p.add_argument("--masks", required=True, help="mask directory written by prune/joint")
    p.add_argument("--sim-config", help="JSON simulator config")
    p.add_argument("--tokens", type=int, help="dense activation columns")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("eval", help="perplexity of the dense model and, optionally, with masks")
    _common(p)
    p.add_argument("--masks", help="mask directory")
    p.add_argument("--eval-sequences", type=int)
    p.add_argument("--eval-tokens", type=int, default=io.DESK_SCALE[1])
    p.add_argument("--eval-file", help="raw uint32 token file for evaluation")

    p = sub.add_parser("report", help="merge run directories into one summary")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", required=True, help="output directory")
    return parser


# ------------------------------------------------------------------ helpers

def _resolve(args, **fixed) -> io.RunConfig:
    rc = io.RunConfig.from_file(args.config) if getattr(args, "config", None) else io.RunConfig()
    over = {}
    for key in io.RunConfig.keys():
        if hasattr(args, key):
            over[key] = getattr(args, key)
    if getattr(args, "granularity", None):
        over["granularity"] = GRANULARITY_ALIASES[args.granularity]
    if getattr(args, "desk_scale", False):
        over["calib_sequences"] = over.get("calib_sequences") or io.DESK_SCALE[0]
        over["calib_tokens"] = over.get("calib_tokens") or io.DESK_SCALE[1]
    rc = rc.updated(**over)
    if fixed:
        d = rc.to_dict()
        d.update(fixed)
        rc = io.RunConfig.from_dict(d)
    rc.prune.validate()
    return rc


def _model(args, rc: io.RunConfig):
    if getattr(args, "checkpoint", None):
        return io.load_checkpoint(args.checkpoint)
    return io.synth_model(BlockConfig(), rc.n_blocks, rc.vocab, rc.model_seed)


def _calibration(args, rc: io.RunConfig, vocab: int) -> io.CalibrationSet:
    pc = rc.prune
    if getattr(args, "calib", None):
        return io.load_token_file(args.calib, pc.calib_tokens, pc.calib_sequences)
    return io.synthetic_calibration(pc.calib_sequences, pc.calib_tokens, vocab, pc.seed, rc.chain_seed)


def _stanza(command: str, rc: io.RunConfig, calib: io.CalibrationSet | None, args) -> dict:
    return {
        "record": "run", "command": command, "package_version": __version__,
        "format_version": io.FORMAT_VERSION, "seed": rc.prune.seed, "config": rc.to_dict(),
        "checkpoint": getattr(args, "checkpoint", None),
        "calibration": None if calib is None else {**calib.provenance, "n_sequences": calib.n_sequences,
                                                   "seq_len": calib.seq_len},
    }


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _train(args, command: str, **fixed) -> int:
    rc = _resolve(args, **fixed)
    out = _out_dir(args)
    model = _model(args, rc)
    calib = _calibration(args, rc, model.vocab)
    pc = rc.prune
    print(f"{command}: {model.n_blocks} blocks, calibration {calib.n_sequences}x{calib.seq_len}", file=sys.stderr)

    def progress(rep):
        print(f"  block {rep.block}: recon={rep.recon_loss:.6g} sparsity={rep.block_sparsity:.4f} "
              f"steps={rep.steps}", file=sys.stderr)

    result = prune_model(model, calib.tokens, pc, progress)
    records = [_stanza(command, rc, calib, args)]
    records += [{"record": "block", **r.record()} for r in result.reports]
    if pc.prune:
        io.save_mask_set(result.masks, out / "masks")
        records.append({"record": "total", "global_sparsity": result.global_sparsity(),
                        "target_sparsity": pc.target_sparsity})
    if pc.quant_bits is not None:
        states = [{n: quantize_state(getattr(blk, n), qs[n]) for n in PRUNABLE}
                  for blk, qs in zip(model.blocks, result.quant)]
        weights = [{n: getattr(blk, n).data for n in PRUNABLE} for blk in model.blocks]
        io.save_quant_set(states, out / "quant", weights, (out / "masks") if pc.prune else None)
    io.write_jsonl(out / "report.jsonl", records, command)
    curves = out / "curves"
    curves.mkdir(exist_ok=True)
    for r in result.reports:
        io.write_curve_csv(curves / f"block{r.block}.csv", r.curve, {"block": r.block})
    io.write_jsonl(out / "timing.jsonl", [{"record": "timing", "block": r.block, "wall_time": r.wall_time}
                                          for r in result.reports], "timing")
    io.save_checkpoint(result.checkpoint, out / "checkpoint")
    if pc.prune:
        print(f"global sparsity {result.global_sparsity():.4f} -> {out}", file=sys.stderr)
    return EXIT_OK


def cmd_prune(args) -> int:
    return _train(args, "prune", prune=True, quant_bits=None)


def cmd_quantize(args) -> int:
    if getattr(args, "quant_bits", None) is None and not args.config:
        args.quant_bits = 4
    return _train(args, "quantize", prune=False)


def cmd_joint(args) -> int:
    if getattr(args, "quant_bits", None) is None and not args.config:
        args.quant_bits = 4
    return _train(args, "joint", prune=True)


def cmd_simulate(args) -> int:
    cfg = SimConfig.from_file(args.sim_config) if args.sim_config else SimConfig()
    masks = io.load_mask_set(args.masks)
    rep = report_block(masks, args.tokens, cfg)
    text = rep.to_text()
    print(text, end="")
    if args.out:
        out = _out_dir(args)
        io.write_jsonl(out / "sim.jsonl", rep.to_records(), "simulate")
        (out / "sim.txt").write_text(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = _resolve(args)
    model = _model(args, rc)
    n = args.eval_sequences or rc.eval_sequences
    if args.eval_file:
        toks = io.load_token_file(args.eval_file, args.eval_tokens, n).tokens
    else:
        # held-out draw from the same chain as the synthetic calibration set
        toks = io.markov_tokens(n, args.eval_tokens, model.vocab, rc.chain_seed, sample_seed=10_000 + rc.prune.seed)
    toks = toks.astype(np.int64)
    dense = perplexity(model, toks)
    rec = {"record": "eval", "dense_perplexity": dense, "n_sequences": int(toks.shape[0]),
           "seq_len": int(toks.shape[1])}
    print(f"dense perplexity  {dense:.4f}")
    if args.masks:
        masks = io.load_mask_set(args.masks)
        if len(masks) != model.n_blocks:
            raise DataError(f"mask set has {len(masks)} blocks, model has {model.n_blocks}")
        pruned = perplexity(model, toks, masks)
        rec["pruned_perplexity"] = pruned
        print(f"pruned perplexity {pruned:.4f}")
    if args.out:
        out = _out_dir(args)
        io.write_jsonl(out / "eval.jsonl", [_stanza("eval", rc, None, args), rec], "eval")
    return EXIT_OK


def cmd_report(args) -> int:
    out = _out_dir(args)
    summary = []
    curve_rows = []
    table_lines = []
    for run in args.runs:
        run = Path(run)
        recs = io.read_jsonl(run / "report.jsonl")
        stanza = next((r for r in recs if r.get("record") == "run"), {})
        blocks = [r for r in recs if r.get("record") == "block"]
        for b in blocks:
            summary.append({"record": "layer_sparsity", "run": str(run), "block": b["block"],
                            **{n: b["achieved"][n] for n in PRUNABLE}, "block_sparsity": b["block_sparsity"],
                            "recon_loss": b["recon_loss"]})
        tot = next((r for r in recs if r.get("record") == "total"), None)
        summary.append({"record": "run_summary", "run": str(run), "command": stanza.get("command"),
                        "seed": stanza.get("seed"), "n_blocks": len(blocks),
                        "global_sparsity": None if tot is None else tot["global_sparsity"],
                        "mean_recon_loss": float(np.mean([b["recon_loss"] for b in blocks])) if blocks else None})
        for csv_path in sorted((run / "curves").glob("block*.csv")):
            for row in io.read_curve_csv(csv_path):
                curve_rows.append({"run": str(run), **row})
        if blocks:
            table_lines.append(f"{run}")
            table_lines.append("  block | " + " | ".join(f"{n:>9}" for n in PRUNABLE) + " |     block")
            for b in blocks:
                cells = " | ".join(f"{100 * b['achieved'][n]:8.2f}%" for n in PRUNABLE)
                table_lines.append(f"  {b['block']:5d} | {cells} | {100 * b['block_sparsity']:8.2f}%")
    io.write_jsonl(out / "summary.jsonl", summary, "report")
    with open(out / "curves.csv", "w") as fh:
        fh.write(f"# format_version={io.FORMAT_VERSION}\n")
        cols = ["run", "block"] + list(io.CURVE_COLUMNS)
        fh.write(",".join(cols) + "\n")
        for r in curve_rows:
            fh.write(",".join(str(r.get(c, "")) for c in cols) + "\n")
    text = "\n".join(table_lines) + "\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"prune": cmd_prune, "quantize": cmd_quantize, "joint": cmd_joint,
            "simulate": cmd_simulate, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, BlockPruneError, ValueError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
