#!/usr/bin/env python3
"""
Report generator for qvpr artefacts: CSV tables, plain-text results and model summaries
"""

import csv
import io
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

from errors import ConfigError
from models import (
    BudgetPoint,
    DesignPoint,
    LatencySample,
    ModelGraph,
    PlanResult,
    QuantizedModel,
    QuantParams,
    SearchResult,
)
from model_graph import layer_parameter_counts
from utils import Fore, Style, format_shape

RECALL_HEADER = ["dataset", "model", "precision", "k", "recall"]
BENCH_HEADER = ["N", "D", "precision", "tau_e", "tau_r", "tau_total", "repetitions"]
TRACE_HEADER = ["step", "best_fitness"]
CALIBRATION_HEADER = ["layer", "kind", "method", "bits", "scale"]
DESIGN_HEADER = ["family", "pooling", "precision", "recall@1", "file_bytes", "tau_e"]
BUDGET_HEADER = ["budget", "mean_bits", "precisions", "fitness", "recall@1", "file_bytes", "tau_e"]


def _csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _float(value: float) -> str:
    return repr(float(value))


class ReportGenerator:
    """Render qvpr results as CSV, text and coloured summaries"""

    @staticmethod
    def recall_csv(rows: Iterable[Tuple[str, str, str, int, float]]) -> str:
        """dataset,model,precision,k,recall"""
        return _csv(RECALL_HEADER, ((d, m, p, int(k), _float(r)) for d, m, p, k, r in rows))

    @staticmethod
    def bench_csv(samples: Iterable[LatencySample]) -> str:
        return _csv(BENCH_HEADER, (
            (s.n, s.dim, s.precision, _float(s.tau_e), _float(s.tau_r), _float(s.tau_total), s.repetitions)
            for s in samples
        ))

    @staticmethod
    def read_bench_csv(path: Union[str, Path]) -> List[LatencySample]:
        """Parse a bench CSV back into samples (tau_total is recomputed, not read)"""
        if not Path(path).exists():
            raise FileNotFoundError(f"Latency CSV not found at: {path}")
        with open(path, newline='', encoding='utf-8') as f:
            reader = csv.DictReader(f)
            missing = set(BENCH_HEADER) - set(reader.fieldnames or [])
            if missing:
                raise ConfigError(f"{path}: latency CSV lacks columns {sorted(missing)}")
            try:
                return [
                    LatencySample(n=int(row['N']), dim=int(row['D']), tau_e=float(row['tau_e']),
                                  tau_r=float(row['tau_r']), precision=row['precision'],
                                  repetitions=int(row['repetitions']))
                    for row in reader
                ]
            except ValueError as e:
                raise ConfigError(f"{path}: malformed latency row ({e})") from e

    @staticmethod
    def trace_csv(trace: Sequence[float]) -> str:
        return _csv(TRACE_HEADER, ((step, _float(f)) for step, f in enumerate(trace)))

    @staticmethod
    def search_result_text(result: SearchResult, budget: float, seed: int) -> str:
        """Comment header plus the precision list on the last line"""
        lines = [
            f"# budget={budget} seed={seed}",
            f"# best_fitness={_float(result.best_fitness)}",
            f"# mean_bits={result.best.mean_bits}",
            f"# steps={len(result.trace)} evaluated={len(result.evaluated)}",
            str(result.best),
        ]
        return "\n".join(lines) + "\n"

    @staticmethod
    def design_csv(points: Iterable[DesignPoint]) -> str:
        """family,pooling,precision,recall@1,file_bytes,tau_e"""
        return _csv(DESIGN_HEADER, (
            (p.family, p.pooling, p.precision, _float(p.recall_at_1), p.file_bytes, _float(p.tau_e))
            for p in points
        ))

    @staticmethod
    def budget_csv(points: Iterable[BudgetPoint]) -> str:
        return _csv(BUDGET_HEADER, (
            (_float(p.budget), _float(p.config.mean_bits), str(p.config), _float(p.fitness),
             _float(p.recall_at_1), p.file_bytes, _float(p.tau_e))
            for p in points
        ))

    @staticmethod
    def calibration_csv(model: ModelGraph, params: Dict[int, QuantParams], method: str) -> str:
        rows = []
        for index, p in sorted(params.items()):
            kind = model.layers[index].kind.value
            rows.append((index, kind, method, p.bits, _float(p.scale[0])))
        return _csv(CALIBRATION_HEADER, rows)

    @staticmethod
    def plan_text(plan: PlanResult) -> str:
        lines = [
            f"feasible={str(plan.feasible).lower()}",
            f"dimension={plan.dimension if plan.dimension is not None else 'none'}",
            f"raw_dimension={_float(plan.raw_dimension)}",
            f"slack={_float(plan.slack)}",
        ]
        if plan.reason:
            lines.append(f"reason={plan.reason}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def generate_summary(model: Union[ModelGraph, QuantizedModel]) -> str:
        """Human-readable model summary with colors"""
        quantized = isinstance(model, QuantizedModel)
        graph = model.graph if quantized else model
        counts = layer_parameter_counts(graph)
        report = []

        report.append(f"{Fore.CYAN}{Style.BRIGHT}{'=' * 60}")
        report.append(f"{Fore.CYAN}{Style.BRIGHT}qvpr model: {graph.arch}")
        report.append(f"{Fore.CYAN}{Style.BRIGHT}{'=' * 60}{Style.RESET_ALL}")
        report.append(f"  Input: {format_shape(graph.input_shape)}   Descriptor dim: {graph.descriptor_dim}")
        report.append(f"  Parameters: {Fore.BLUE}{graph.parameter_count()}{Style.RESET_ALL}")
        report.append(f"  Fused: {'yes' if graph.is_fused else 'no'}")
        if quantized:
            report.append(f"  Precisions: {Fore.GREEN}{model.config}{Style.RESET_ALL} "
                          f"(mean {model.config.mean_bits:.2f} bits, {model.method})")
        report.append("")
        report.append(f"{Style.BRIGHT}Layers:{Style.RESET_ALL}")

        for layer in graph.layers:
            dtypes = sorted({graph.weights[k].dtype.name.lower() for k in layer.params.values()})
            line = f"  [{layer.index:3d}] {layer.kind.value:<13}"
            if layer.params:
                line += f" params={counts[layer.index]:<8} dtype={'/'.join(dtypes)}"
            if layer.pooling is not None:
                line += f" pooling={layer.pooling.value}"
            lq = model.layer_quant.get(layer.index) if quantized else None
            if lq is not None:
                color = Fore.YELLOW if lq.precision == 4 else Fore.GREEN
                line += f" {color}{lq.precision}-bit{Style.RESET_ALL}"
            report.append(line)
        return "\n".join(report)

    @staticmethod
    def generate_json_report(model: Union[ModelGraph, QuantizedModel]) -> Dict[str, Any]:
        quantized = isinstance(model, QuantizedModel)
        graph = model.graph if quantized else model
        counts = layer_parameter_counts(graph)
        return {
            "arch": graph.arch,
            "input_shape": list(graph.input_shape),
            "descriptor_dim": graph.descriptor_dim,
            "parameters": graph.parameter_count(),
            "fused": graph.is_fused,
            "quantized": quantized,
            "precisions": list(model.config.bits) if quantized else None,
            "mean_bits": model.config.mean_bits if quantized else None,
            "layers": [
                {
                    "index": layer.index,
                    "kind": layer.kind.value,
                    "parameters": counts[layer.index],
                    "dtypes": {role: graph.weights[k].dtype.name.lower() for role, k in layer.params.items()},
                    "precision": model.layer_quant[layer.index].precision
                    if quantized and layer.index in model.layer_quant else None,
                }
                for layer in graph.layers
            ],
        }
