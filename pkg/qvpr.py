#!/usr/bin/env python3
"""
qvpr - post-training quantization toolkit for place-recognition embedding networks

build -> calibrate -> quantize -> search -> encode -> eval -> bench -> plan
sweep and budget-sweep run the design-space grids end to end
"""

import argparse
import json
import logging
import re
import sys
from pathlib import Path
from typing import List, Optional

from calibration_manager import CalibrationManager, fit_head_codes
from config_loader import FAMILIES, ArchConfigLoader
from design_sweep import SWEEP_BUDGETS, SWEEP_PRECISIONS, sweep_budgets, sweep_design
from errors import ConfigError, QVPRError
from model_graph import build_backbone, fuse_conv_bn
from model_io import load_f32_model, load_model, save_model
from models import ArchConfig, LatencyModel, MemoryBudget, ModelGraph, SearchConfig
from mp_search import FitnessEvaluator, run_search
from perf_model import MIN_REPETITIONS, SUPPORTED_DIMS, bench_latency, check_memory, fit_k1_k2, plan_dim
from quant_engine import quantize_model
from report_generator import ReportGenerator
from retrieval_eval import (
    DEFAULT_PLACES,
    DEFAULT_QUERIES_PER_PLACE,
    encode_dataset,
    generate_synthetic,
    load_dataset,
    load_db,
    load_ground_truth,
    mean_triplet_loss,
    recall_at_k,
    save_dataset,
    save_db,
)
from tensor_core import load_batch_dir
from utils import CalibrationMethod, Fore, PoolingKind, Style, parse_int_list, parse_shape

logger = logging.getLogger("qvpr")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class QVPRArgumentParser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; qvpr reserves 2 for data errors"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> List[int]:
    try:
        values = list(parse_int_list(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _float_list(text: str) -> List[float]:
    try:
        values = [float(p) for p in text.split(',') if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _choice_list(choices):
    def parse(text: str) -> List[str]:
        values = [p.strip() for p in text.split(',') if p.strip()]
        unknown = [v for v in values if v not in choices]
        if not values or unknown:
            raise argparse.ArgumentTypeError(
                f"expected comma-separated values from {', '.join(choices)}, got {text!r}")
        return values
    return parse


def _shape(text: str):
    try:
        return parse_shape(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _status(message: str):
    print(f"{Fore.CYAN}{message}{Style.RESET_ALL}")


def _ok(message: str):
    print(f"{Fore.GREEN}{message}{Style.RESET_ALL}")


def _warn(message: str):
    print(f"{Fore.YELLOW}{message}{Style.RESET_ALL}")


def _write(path: Optional[str], text: str):
    if path:
        Path(path).write_text(re.sub(r'\x1b\[[0-9;]*m', '', text), encoding='utf-8')


def _fused(model: ModelGraph) -> ModelGraph:
    if model.is_fused:
        return model
    _warn("Model is not fused; folding BatchNorm layers first")
    return fuse_conv_bn(model)


def search_result_path(model_path: str) -> Path:
    """Default search result file: m.vprq -> m.search.txt beside the model"""
    return Path(model_path).with_suffix(".search.txt")


def _precisions(args):
    if args.precisions:
        return ArchConfigLoader.parse_precisions(args.precisions)
    return ArchConfigLoader.load_precisions(args.precisions_file)


# --- subcommands ----------------------------------------------------------

def cmd_build(args) -> int:
    if args.config:
        cfg = ArchConfigLoader.load_config(args.config)
    else:
        cfg = ArchConfig()
    overrides = {k: v for k, v in {
        'family': args.family, 'width': args.width, 'depth': args.depth, 'dim': args.dim,
        'pooling': args.pooling, 'seed': args.seed,
        'input': 'x'.join(map(str, args.input)) if args.input else None,
    }.items() if v is not None}
    base = {
        'family': cfg.family, 'width': cfg.width, 'depth': cfg.depth, 'dim': cfg.descriptor_dim,
        'pooling': cfg.pooling.value, 'seed': cfg.seed, 'input': 'x'.join(map(str, cfg.input_shape)),
        'bias': cfg.bias, 'projection': cfg.projection, 'expansion': cfg.expansion,
        'gem.p': cfg.gem_p, 'netvlad.clusters': cfg.clusters,
    }
    cfg = ArchConfigLoader.from_mapping({**base, **overrides}, source=args.config or "<flags>")

    _status(f"Building {cfg.family} (width {cfg.width}, depth {cfg.depth}, seed {cfg.seed})...")
    model = build_backbone(cfg)
    if args.calib:
        model = fit_head_codes(model, load_batch_dir(args.calib, model.input_shape), cfg.seed)
    size = save_model(model, args.out)
    _ok(f"Wrote {args.out}: {len(model.layers)} layers, {model.parameter_count()} parameters, {size} bytes")
    return EXIT_OK


def cmd_fuse(args) -> int:
    model = load_f32_model(args.model)
    fused = fuse_conv_bn(model)
    save_model(fused, args.out)
    _ok(f"Fused {len(model.layers) - len(fused.layers)} BatchNorm layers -> {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    model = _fused(load_f32_model(args.model))
    calib = load_batch_dir(args.calib, model.input_shape)
    method = CalibrationMethod(args.method)
    _status(f"Calibrating activation scales ({method.value}) over {len(calib)} samples...")
    params = CalibrationManager(debug=args.debug).activation_params(model, calib, method)
    report = ReportGenerator.calibration_csv(model, params, method.value)
    print(report, end='')
    _write(args.out, report)
    return EXIT_OK


def cmd_quantize(args) -> int:
    model = _fused(load_f32_model(args.model))
    config = _precisions(args)
    calib = load_batch_dir(args.calib, model.input_shape) if args.calib else None
    _status(f"Quantizing under [{config}] (mean {config.mean_bits:.2f} bits)...")
    qmodel = quantize_model(model, config, calib, CalibrationMethod(args.method),
                            CalibrationMethod(args.weight_method))
    size = save_model(qmodel, args.out)
    _ok(f"Wrote {args.out} ({size} bytes)")
    return EXIT_OK


def cmd_search(args) -> int:
    model = _fused(load_f32_model(args.model))
    calib = load_batch_dir(args.calib, model.input_shape)
    cfg = SearchConfig(population=args.pop, mutation_rate=args.mutation, tournament=args.tournament,
                       budget=args.budget, generations=args.gens, seed=args.seed,
                       fitness_samples=args.samples, threads=args.threads)
    _status(f"Searching precisions for {len(model.quantizable_layers())} layers under B={cfg.budget}...")
    evaluator = FitnessEvaluator(model, calib, cfg.fitness_samples, cfg.threads, CalibrationMethod(args.method))
    result = run_search(model, calib, cfg, evaluator=evaluator)

    text = ReportGenerator.search_result_text(result, cfg.budget, cfg.seed)
    out = args.out or str(search_result_path(args.model))
    _write(out, text)
    _write(args.trace, ReportGenerator.trace_csv(result.trace))
    _ok(f"Best [{result.best}] mean {result.best.mean_bits:.2f} bits, fitness {result.best_fitness:.6g} -> {out}")
    print(str(result.best))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    _status(f"Generating {args.places} places x {args.queries} queries (seed {args.seed})...")
    dataset = generate_synthetic(args.places, args.queries, tuple(args.input), args.noise,
                                 args.brightness, args.translation, args.seed)
    save_dataset(dataset, args.out)
    _ok(f"Wrote dataset to {args.out}")
    return EXIT_OK


def cmd_encode(args) -> int:
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    db = encode_dataset(model, dataset, args.side)
    save_db(db, args.out)
    _ok(f"Encoded {db.size} {args.side} -> {args.out} (D={db.dim}, {db.memory_bytes} bytes)")
    return EXIT_OK


def cmd_eval(args) -> int:
    queries = load_db(args.queries)
    refs = load_db(args.refs)
    gt = load_ground_truth(args.gt)
    rows = [(args.dataset, args.model_name, args.precision, k, recall_at_k(queries, refs, gt, k))
            for k in args.k]
    report = ReportGenerator.recall_csv(rows)
    print(report, end='')
    _write(args.out, report)
    if args.margin is not None:
        loss = mean_triplet_loss(queries, refs, args.margin, seed=args.seed)
        print(f"triplet_loss={loss!r}")
    return EXIT_OK


def cmd_bench(args) -> int:
    model = load_model(args.model)
    threads = args.threads if args.parallel else 1
    _status(f"Benchmarking N={args.n_list} D={args.d_list} ({args.reps} repetitions, {threads} thread(s))...")
    samples = bench_latency(model, args.n_list, args.d_list, args.reps, seed=args.seed, threads=threads)
    report = ReportGenerator.bench_csv(samples)
    print(report, end='')
    _write(args.out, report)
    return EXIT_OK


def cmd_plan(args) -> int:
    if args.latency:
        latency = fit_k1_k2(ReportGenerator.read_bench_csv(args.latency))
    elif args.k1 is not None and args.k2 is not None:
        latency = LatencyModel(k1=args.k1, k2=args.k2, tau_e=args.tau_e or 0.0)
    else:
        raise ConfigError("plan needs --latency CSV or both --k1 and --k2")
    plan = plan_dim(args.target, args.n, latency, args.tau_e, args.dims)
    report = ReportGenerator.plan_text(plan)
    if args.memory is not None and plan.feasible:
        mem = check_memory(MemoryBudget(args.memory, args.n, plan.dimension))
        report += f"memory_required={mem.required_bytes}\nmemory_ok={str(mem.passed).lower()}\n"
    print(report, end='')
    _write(args.out, report)
    if not plan.feasible:
        _warn(f"Infeasible: {plan.reason}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    dataset = load_dataset(args.data)
    base = ArchConfig(width=args.width, depth=args.depth, descriptor_dim=args.dim, seed=args.seed)
    cells = len(args.families) * len(args.poolings) * len(args.variants)
    _status(f"Sweeping {cells} family x pooling x precision cells over {dataset.num_places} places...")
    points = sweep_design(base, dataset, args.families, args.poolings, args.variants,
                          CalibrationMethod(args.method), args.reps, timing=not args.no_timing)
    report = ReportGenerator.design_csv(points)
    print(report, end='')
    _write(args.out, report)
    return EXIT_OK


def cmd_budget_sweep(args) -> int:
    model = _fused(load_f32_model(args.model))
    dataset = load_dataset(args.data)
    cfg = SearchConfig(population=args.pop, mutation_rate=args.mutation, tournament=args.tournament,
                       generations=args.gens, seed=args.seed, fitness_samples=args.samples,
                       threads=args.threads)
    _status(f"Searching under budgets {', '.join(f'{b:g}' for b in args.budgets)}...")
    points = sweep_budgets(model, dataset, cfg, args.budgets, CalibrationMethod(args.method),
                           args.reps, timing=not args.no_timing)
    report = ReportGenerator.budget_csv(points)
    print(report, end='')
    _write(args.out, report)
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = load_model(args.model)
    if args.output == "json":
        output = json.dumps(ReportGenerator.generate_json_report(model), indent=2)
    else:
        output = ReportGenerator.generate_summary(model)
    print(output)
    _write(args.save, output)
    return EXIT_OK


# --- parser ---------------------------------------------------------------

def _common_options(subcommand: bool) -> argparse.ArgumentParser:
    """--threads/--debug; subcommand copies leave values given before the subcommand alone"""
    common = argparse.ArgumentParser(add_help=False)
    threads_default = argparse.SUPPRESS if subcommand else None
    debug_default = argparse.SUPPRESS if subcommand else False
    common.add_argument("--threads", type=int, metavar="N", default=threads_default,
                        help="Worker threads (default: $QVPR_THREADS or 1)")
    common.add_argument("--debug", action="store_true", default=debug_default,
                        help="Enable debug logging and tracebacks")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options(subcommand=True)

    parser = QVPRArgumentParser(
        prog="qvpr",
        description="Post-training quantization design space for place-recognition embedding networks",
        epilog="""
        Examples:
        %(prog)s build --family mini-mobilenet --seed 7 --out m.vprq
        %(prog)s gen-data --out data/ --seed 7
        %(prog)s quantize --model m.vprq --precisions 8,8,8,8 --calib data/refs --out m.q8.vprq
        %(prog)s search --model m.vprq --calib data/refs --budget 10 --pop 16 --gens 300 --seed 7
        %(prog)s sweep --data data/ --seed 7 --out design.csv
        %(prog)s budget-sweep --model m.vprq --data data/ --seed 7 --out budgets.csv

        Environment Variables:
        QVPR_THREADS                          # Default for --threads
                """,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[_common_options(subcommand=False)],
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=QVPRArgumentParser)
    sub.required = True

    p = sub.add_parser("build", parents=[common], help="Build a seeded miniature backbone")
    p.add_argument("--config", metavar="PATH", help="Architecture config file ([model] section)")
    p.add_argument("--family", choices=["mini-mobilenet", "mini-resnet", "mini-vgg"])
    p.add_argument("--width", type=float, metavar="W", help="Width multiplier")
    p.add_argument("--depth", type=int, metavar="N", help="Number of blocks")
    p.add_argument("--input", type=_shape, metavar="CxHxW", help="Input shape")
    p.add_argument("--dim", type=int, metavar="D", help="Descriptor dimension")
    p.add_argument("--pooling", choices=["spoc", "mac", "gem", "netvlad"])
    p.add_argument("--seed", type=int, required=True, help="Weight initialization seed")
    p.add_argument("--calib", metavar="DIR", help="Samples for fitting NetVLAD codes")
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("fuse", parents=[common], help="Fold BatchNorm into preceding convolutions")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("calibrate", parents=[common], help="Report activation scales")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--calib", required=True, metavar="DIR", help="Directory of QTNS samples")
    p.add_argument("--method", choices=["maxabs", "kl"], default="maxabs")
    p.add_argument("--out", metavar="CSV")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize", parents=[common], help="Quantize under a precision list")
    p.add_argument("--model", required=True, metavar="PATH")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--precisions", metavar="LIST", help="Comma-separated bits per layer, e.g. 8,8,4,16")
    group.add_argument("--precisions-file", metavar="PATH", help="Search result file")
    p.add_argument("--calib", metavar="DIR", help="Directory of QTNS samples (needed below 16 bits)")
    p.add_argument("--method", choices=["maxabs", "kl"], default="maxabs", help="Activation calibration")
    p.add_argument("--weight-method", choices=["maxabs", "kl"], default="maxabs")
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("search", parents=[common], help="Genetic mixed-precision search")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--calib", required=True, metavar="DIR")
    p.add_argument("--budget", type=float, default=10.0, metavar="B", help="Average bit-width budget")
    p.add_argument("--pop", type=int, default=16, metavar="N", help="Population size")
    p.add_argument("--mutation", type=float, default=0.5, metavar="P", help="Mutation rate")
    p.add_argument("--tournament", type=int, default=4, metavar="C", help="Tournament sample size")
    p.add_argument("--gens", type=int, default=300, metavar="G", help="Offspring insertions")
    p.add_argument("--samples", type=int, default=8, metavar="L", help="Fitness sample size")
    p.add_argument("--method", choices=["maxabs", "kl"], default="maxabs")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", metavar="PATH", help="Search result file (default: <model>.search.txt)")
    p.add_argument("--trace", metavar="CSV", help="Best-fitness trace")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("gen-data", parents=[common], help="Generate a synthetic place dataset")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--places", type=int, default=DEFAULT_PLACES)
    p.add_argument("--queries", type=int, default=DEFAULT_QUERIES_PER_PLACE, help="Queries per place")
    p.add_argument("--input", type=_shape, default=(3, 32, 32), metavar="CxHxW")
    p.add_argument("--noise", type=float, default=0.1, help="Gaussian noise sigma")
    p.add_argument("--brightness", type=float, default=0.1, help="Max brightness shift")
    p.add_argument("--translation", type=int, default=1, help="Max shift in pixels")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("encode", parents=[common], help="Encode a dataset side into a descriptor DB")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--side", choices=["references", "queries"], default="references")
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("eval", parents=[common], help="Recall@k of query DB against reference DB")
    p.add_argument("--queries", required=True, metavar="DB")
    p.add_argument("--refs", required=True, metavar="DB")
    p.add_argument("--gt", required=True, metavar="PATH")
    p.add_argument("--k", type=int, nargs='+', default=[1])
    p.add_argument("--dataset", default="synthetic", help="Dataset label for the CSV")
    p.add_argument("--model-name", default="model", help="Model label for the CSV")
    p.add_argument("--precision", default="f32", help="Precision label for the CSV")
    p.add_argument("--margin", type=float, help="Also report the mean triplet loss with this margin")
    p.add_argument("--seed", type=int, default=0, help="Negative sampling seed for --margin")
    p.add_argument("--out", metavar="CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="Encode and retrieval latency grid")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--n-list", type=_int_list, default=[1000], metavar="N,..")
    p.add_argument("--d-list", type=_int_list, default=list(SUPPORTED_DIMS), metavar="D,..")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--parallel", action="store_true", help="Split retrieval over --threads workers")
    p.add_argument("--seed", type=int, required=True, help="Seed for the random databases")
    p.add_argument("--out", metavar="CSV")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plan", parents=[common], help="Recommend a descriptor dimension")
    p.add_argument("--latency", metavar="CSV", help="Bench CSV to fit k1, k2")
    p.add_argument("--k1", type=float, help="Seconds per descriptor dimension")
    p.add_argument("--k2", type=float, help="Seconds per map image")
    p.add_argument("--tau-e", type=float, help="Encode latency in seconds")
    p.add_argument("--target", type=float, required=True, metavar="T_LAT", help="Latency target in seconds")
    p.add_argument("--n", type=int, required=True, help="Map size")
    p.add_argument("--dims", type=_int_list, default=list(SUPPORTED_DIMS), metavar="D,..")
    p.add_argument("--memory", type=int, metavar="BYTES", help="Also check the database memory budget")
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_plan)

    defaults = ArchConfig()
    p = sub.add_parser("sweep", parents=[common], help="Recall/size/latency over backbone x pooling x precision")
    p.add_argument("--data", required=True, metavar="DIR", help="Dataset directory from gen-data")
    p.add_argument("--families", type=_choice_list(FAMILIES), default=list(FAMILIES), metavar="F,..")
    p.add_argument("--poolings", type=_choice_list([k.value for k in PoolingKind]),
                   default=[k.value for k in PoolingKind], metavar="P,..")
    p.add_argument("--variants", type=_choice_list(["f32", "f16", "int8", "int4"]),
                   default=list(SWEEP_PRECISIONS), metavar="V,..", help="Precisions to compare")
    p.add_argument("--width", type=float, default=defaults.width, metavar="W")
    p.add_argument("--depth", type=int, default=defaults.depth, metavar="N")
    p.add_argument("--dim", type=int, default=defaults.descriptor_dim, metavar="D")
    p.add_argument("--method", choices=["maxabs", "kl"], default="maxabs")
    p.add_argument("--reps", type=int, default=MIN_REPETITIONS, help="Encode timing repetitions")
    p.add_argument("--no-timing", action="store_true", help="Report tau_e as 0 for byte-stable output")
    p.add_argument("--seed", type=int, required=True, help="Weight initialization seed")
    p.add_argument("--out", metavar="CSV")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("budget-sweep", parents=[common], help="Search and evaluate under several budgets")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="DIR", help="Dataset directory from gen-data")
    p.add_argument("--budgets", type=_float_list, default=list(SWEEP_BUDGETS), metavar="B,..")
    p.add_argument("--pop", type=int, default=16, metavar="N", help="Population size")
    p.add_argument("--mutation", type=float, default=0.5, metavar="P", help="Mutation rate")
    p.add_argument("--tournament", type=int, default=4, metavar="C", help="Tournament sample size")
    p.add_argument("--gens", type=int, default=300, metavar="G", help="Offspring insertions")
    p.add_argument("--samples", type=int, default=8, metavar="L", help="Fitness sample size")
    p.add_argument("--method", choices=["maxabs", "kl"], default="maxabs")
    p.add_argument("--reps", type=int, default=MIN_REPETITIONS, help="Encode timing repetitions")
    p.add_argument("--no-timing", action="store_true", help="Report tau_e as 0 for byte-stable output")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", metavar="CSV")
    p.set_defaults(func=cmd_budget_sweep)

    p = sub.add_parser("inspect", parents=[common], help="Summarize a model file")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--output", choices=["text", "json"], default="text")
    p.add_argument("--save", metavar="FILE")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.debug else logging.WARNING,
                        format='%(asctime)s - %(levelname)s - %(message)s')
    try:
        args.threads = ArchConfigLoader.get_thread_count(args.threads)
        return args.func(args)
    except (QVPRError, ValueError, FileNotFoundError, OSError) as e:
        print(f"{Fore.RED}Error: {e}{Style.RESET_ALL}", file=sys.stderr)
        if args.debug:
            import traceback
            traceback.print_exc()
        return EXIT_DATA


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print(f"\n{Fore.YELLOW}Interrupted by user{Style.RESET_ALL}")
        sys.exit(EXIT_USAGE)
