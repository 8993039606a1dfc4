"""Command-line pipeline: synth, calibrate, score, compress, eval, theory,
analyze and metrics.

Every subcommand is a pure function of its flags and input files, so reruns
write byte-identical artifacts. Errors exit with the code of their class;
bad command-line usage exits with 64.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import theory
from .analysis import alignment_report, jsd, ngram_diversity
from .calibration import TokenStream, calibrate, layer_fingerprint, load_stats, save_stats
from .errors import ConfigError, MoeCompressError
from .io import load_manifest, load_model, save_model, write_tokens
from .merge import MergedLayer
from .moe import GATE_MODES, SynthConfig, synth_model
from .pipeline import METHODS, compress, run_eval, subspace_experiment
from .prune import CRITERIA, PrunePlan, compute_saliency

USAGE_EXIT = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _with_gate_mode(layer, mode):
    if mode is None or mode == layer.router.gate_mode:
        return layer
    return replace(layer, router=replace(layer.router, gate_mode=mode))


def _tokens(args, d: int, split: str) -> TokenStream:
    if args.tokens:
        stream = TokenStream.from_file(args.tokens)
        if stream.d != d:
            raise ConfigError(f"token file has d={stream.d}, model has d={d}")
        return stream
    return TokenStream(d=d, count=args.count, seed=args.seed, split=split)


def cmd_synth(args) -> None:
    if args.what == "tokens":
        stream = TokenStream(d=args.d, count=args.count, seed=args.seed, split=args.split)
        write_tokens(args.out, stream.array())
        return
    cfg = SynthConfig(
        num_experts=args.num_experts, d=args.d, d_ff=args.d_ff, top_k=args.top_k, groups=args.groups,
        noise=args.noise, router_skew=args.router_skew, router_scale=args.router_scale,
        router_noise=args.router_noise, scale_spread=args.scale_spread,
        shared_experts=args.shared_experts, gate_mode=args.gate_mode or "renormalized",
    )
    layer = synth_model(cfg, args.seed)
    prov = {"seed": args.seed, "synth": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}}
    save_model(layer, args.out, provenance=prov)


def cmd_calibrate(args) -> None:
    layer = _with_gate_mode(load_model(args.model), args.gate_mode)
    stats = calibrate(layer, _tokens(args, layer.d, "calib"), active_only=args.active_only)
    save_stats(stats, args.out)
    sys.stdout.write(_dump({
        "token_count": stats.token_count, "nu": stats.nu.tolist(),
        "layer_id": stats.layer_id, "gate_mode": stats.gate_mode,
    }))


def cmd_score(args) -> None:
    stats = load_stats(args.stats)
    criteria = CRITERIA if args.criterion == "all" else (args.criterion,)
    report = {c: compute_saliency(stats, c).scores.tolist() for c in criteria}
    _emit(_dump(report), args.out)


def cmd_compress(args) -> None:
    layer = _with_gate_mode(load_model(args.model), args.gate_mode)
    stats = load_stats(args.stats)
    if stats.layer_id is not None and stats.layer_id != layer_fingerprint(layer):
        raise ConfigError("statistics were collected on a different model")
    compressed, plan = compress(layer, stats, args.method, args.ratio, args.max_cluster_size,
                                args.metric, seed=args.seed)
    plan_json = plan.to_json()
    prov = {"seed": args.seed, "method": args.method, "ratio": args.ratio,
            "gate_mode": layer.router.gate_mode, "source": Path(args.model).name}
    if isinstance(plan, PrunePlan):
        prov["keep"] = list(plan.keep)
    save_model(compressed, args.out, provenance=prov)
    Path(str(args.out) + ".plan.json").write_text(_dump(plan_json))


def cmd_eval(args) -> None:
    original = _with_gate_mode(load_model(args.original), args.gate_mode)
    compressed = load_model(args.compressed)
    prov = load_manifest(args.compressed).get("provenance", {})
    keep = None if isinstance(compressed, MergedLayer) else prov.get("keep")
    start = time.perf_counter()
    report = run_eval(original, compressed, _tokens(args, original.d, "eval"), keep)
    report.update(method=prov.get("method"), ratio=prov.get("ratio"), experts=compressed.num_experts)
    if isinstance(compressed, MergedLayer):
        sizes = np.bincount(compressed.index_map)
        report["singleton_fraction"] = float(np.mean(sizes == 1))
    if args.timing:
        report["runtime_s"] = time.perf_counter() - start
    _emit(_dump(report), args.out)


def cmd_theory(args) -> None:
    if args.scenario == "hierarchical":
        results = {}
        for conc in args.concentration or ["1,1,1,1"]:
            alpha = [float(v) for v in conc.split(",")]
            results[conc] = theory.dirichlet_cluster(alpha, args.samples or 200_000, args.seed).to_json()
        _emit(_dump(results), args.out)
        return
    build = theory.canonical_scenario if args.scenario == "canonical" else theory.synthesis_scenario
    sc = build(args.samples or 1_000_000, args.seed)
    _emit(_dump(theory.theory_report(sc).to_json()), args.out)


def cmd_analyze(args) -> None:
    layer = _with_gate_mode(load_model(args.model), args.gate_mode)
    if args.what == "alignment":
        a, b = layer.experts[args.i], layer.experts[args.j]
        _emit(_dump(alignment_report(a, b, args.rank, args.permute).to_json()), args.out)
        return
    tokens = _tokens(args, layer.d, "calib").array()
    report = subspace_experiment(layer, tokens, args.ratio, args.prune_criterion, args.merge_method)
    _emit(_dump(report.to_json()), args.out)
    if args.csv:
        Path(args.csv).write_text("\n".join(report.csv_rows()) + "\n")


def _vector(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")])


def cmd_metrics(args) -> None:
    if args.what == "jsd":
        value = jsd(_vector(args.p), _vector(args.q))
    else:
        text = Path(args.file).read_text() if args.file else args.text
        value = ngram_diversity(text, args.n)
    _emit(_dump({"metric": args.what, "value": value}), args.out)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--gate-mode", choices=GATE_MODES, default=None)
    common.add_argument("--out", default=None)

    parser = _Parser(prog="moecompress", description="Compress and analyse synthetic MoE layers.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def token_flags(p, count):
        p.add_argument("--tokens", help="token container; otherwise draw --count Gaussian tokens")
        p.add_argument("--count", type=int, default=count)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic model or token file")
    p.add_argument("what", choices=("model", "tokens"))
    d = SynthConfig()
    p.add_argument("--num-experts", type=int, default=d.num_experts)
    p.add_argument("--d", type=int, default=d.d)
    p.add_argument("--d-ff", type=int, default=d.d_ff)
    p.add_argument("--top-k", type=int, default=d.top_k)
    p.add_argument("--groups", type=int, default=d.groups)
    p.add_argument("--noise", type=float, default=d.noise)
    p.add_argument("--router-skew", type=float, default=d.router_skew)
    p.add_argument("--router-scale", type=float, default=d.router_scale)
    p.add_argument("--router-noise", type=float, default=d.router_noise)
    p.add_argument("--scale-spread", type=float, default=d.scale_spread)
    p.add_argument("--shared-experts", type=int, default=d.shared_experts)
    p.add_argument("--count", type=int, default=2048)
    p.add_argument("--split", choices=("calib", "eval"), default="calib")
    p.set_defaults(func=cmd_synth, needs_out=True)

    p = sub.add_parser("calibrate", parents=[common], help="accumulate routing statistics")
    p.add_argument("--model", required=True)
    token_flags(p, 2048)
    p.add_argument("--active-only", action="store_true")
    p.set_defaults(func=cmd_calibrate, needs_out=True)

    p = sub.add_parser("score", parents=[common], help="per-expert saliency scores")
    p.add_argument("--stats", required=True)
    p.add_argument("--criterion", choices=CRITERIA + ("all",), default="all")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("compress", parents=[common], help="prune or merge experts")
    p.add_argument("--model", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--max-cluster-size", type=int, default=None)
    p.add_argument("--metric", choices=("cosine", "euclidean"), default="cosine")
    p.set_defaults(func=cmd_compress, needs_out=True)

    p = sub.add_parser("eval", parents=[common], help="compare a compressed model with its original")
    p.add_argument("--original", required=True)
    p.add_argument("--compressed", required=True)
    token_flags(p, 1024)
    p.add_argument("--timing", action="store_true", help="include wall-clock runtime (not reproducible)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("theory", parents=[common], help="Monte-Carlo error estimates")
    p.add_argument("scenario", choices=("canonical", "synthesis", "hierarchical"))
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--concentration", action="append",
                   help="comma-separated Dirichlet parameters, last one for the rest of the layer")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("analyze", parents=[common], help="functional subspace or expert alignment")
    p.add_argument("what", choices=("subspace", "alignment"))
    p.add_argument("--model", required=True)
    token_flags(p, 2048)
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--prune-criterion", choices=CRITERIA, default="reap")
    p.add_argument("--merge-method", choices=("msmoe", "hcsmoe"), default="hcsmoe")
    p.add_argument("--csv", help="write projected points here")
    p.add_argument("--i", type=int, default=0)
    p.add_argument("--j", type=int, default=1)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--permute", action="store_true", help="weight-match j to i first")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("metrics", parents=[common], help="JSD or n-gram diversity")
    p.add_argument("what", choices=("jsd", "ngram"))
    p.add_argument("--p")
    p.add_argument("--q")
    p.add_argument("--text")
    p.add_argument("--file")
    p.add_argument("--n", type=int, default=1)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "needs_out", False) and args.out is None:
        parser.error(f"{args.command} requires --out")
    if args.command == "metrics":
        need = ("p", "q") if args.what == "jsd" else ()
        if any(getattr(args, k) is None for k in need) or (args.what == "ngram" and not (args.text or args.file)):
            parser.error("metrics jsd needs --p and --q; metrics ngram needs --text or --file")
    try:
        args.func(args)
    except MoeCompressError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
