# cli.py
"""
opack — консольный драйвер: дизайн → абстракции → композиция → проверка → перенос δ.

Коды выхода: 0 — непрозрачна (opaque), 1 — нет, 2 — ошибка разбора или неразрешимый дизайн.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from config import settings
from abstraction import FiniteSystem, build_abstraction, build_network_abstractions, compose, export_dot, neighbor_values
from design import (
    Quantization,
    SmallGainViolation,
    check_notion,
    choose_quantization,
    design_parameters,
    epsilon_of,
    network_alpha,
)
from model import load_network, model_hash
from opacity import transfer_bound, verify
from relations import max_relation, validate_composed_function, validate_sopsf


logger = logging.getLogger("opack.cli")

EXIT_OPAQUE = 0
EXIT_NOT_OPAQUE = 1
EXIT_ERROR = 2


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.exc = exc


# ----------------------------
# Детерминированный JSON
# ----------------------------

def _round(obj: Any, digits: int) -> Any:
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return float(f"{obj:.{digits}g}")
    if isinstance(obj, dict):
        return {str(k): _round(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v, digits) for v in obj]
    if hasattr(obj, "item"):
        return _round(obj.item(), digits)
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_round(obj, settings.float_digits), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _emit(obj: Any, out: Optional[str]) -> None:
    text = dumps(obj)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
        logger.info("[PIPELINE] wrote %s", out)
    else:
        sys.stdout.write(text)


def _system_summary(t: FiniteSystem) -> Dict[str, Any]:
    return {
        "states": t.n_states,
        "secret": len(t.secret),
        "initial": len(t.initial),
        "inputs": len(t.inputs),
        "internal_inputs": t.n_internal,
        "transitions": sum(len(v) for v in t.transitions.values()),
    }


# ----------------------------
# Конвейер
# ----------------------------

def run_pipeline(
    model_file,
    precision: Optional[float] = None,
    notion: str = "init",
    delta_hat: float = 0.0,
    design_only: bool = False,
    reachable_only: bool = False,
    dot_dir=None,
    mu: Optional[float] = None,
    samples: Optional[int] = None,
    validate: int = 0,
    timings: bool = False,
    command: Optional[Sequence[str]] = None,
) -> Dict[str, Any]:
    """Полный прогон; возвращает RunReport (dict), код выхода — в поле exit_code."""
    notion = check_notion(notion)
    clock: Dict[str, float] = {}
    started = time.perf_counter()

    def stage(name: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except (ValueError, OSError) as exc:
            raise StageError(name, exc) from exc
        finally:
            clock[name] = time.perf_counter() - t0

    net = stage("model", load_network, model_file, samples=samples)
    varpi = precision if precision is not None else net.precision
    if varpi is None:
        raise StageError("design", ValueError("no precision given and the model declares none"))

    design = stage("design", design_parameters, net, float(varpi))
    quant = stage("design", choose_quantization, net, design, notion, mu)

    report: Dict[str, Any] = {
        "schema": settings.schema_version,
        "command": list(command) if command is not None else ["pipeline", str(model_file)],
        "model": {"file": Path(model_file).name, "sha256": model_hash(model_file), "name": net.name},
        "precision": float(varpi),
        "notion": notion,
        "delta_hat": float(delta_hat),
        "design": design.to_dict(),
        "epsilon": epsilon_of(network_alpha(net), design.varpi),
        "abstractions": None,
        "composed": None,
        "verdict": None,
        "lifted_delta": None,
    }

    if validate:
        check = stage("validate", validate_composed_function, net, design, quant, None, validate)
        report["composed_function"] = check.to_dict()

    if design_only:
        report["exit_code"] = EXIT_OPAQUE
        logger.info("[PIPELINE] %s: design only", net.name)
    else:
        abstractions = stage("abstract", build_network_abstractions, net, quant)
        report["abstractions"] = {str(s.index): _system_summary(a) for s, a in zip(net.subsystems, abstractions)}
        composed = stage("compose", compose, abstractions, design.phi, net)
        if reachable_only:
            composed = composed.restrict_reachable()
        report["composed"] = _system_summary(composed)

        verdict = stage("verify", verify, composed, notion, delta_hat)
        report["verdict"] = verdict.to_dict()
        if verdict.opaque:
            report["lifted_delta"] = transfer_bound(delta_hat, report["epsilon"])
        report["exit_code"] = EXIT_OPAQUE if verdict.opaque else EXIT_NOT_OPAQUE

        if dot_dir:
            out = Path(dot_dir)
            for s, a in zip(net.subsystems, abstractions):
                export_dot(a, out / f"subsystem{s.index}.dot")
            export_dot(composed, out / f"{net.name}.dot")
        logger.info(
            "[PIPELINE] %s: %d composed states, %s at delta=%g",
            net.name, composed.n_states, "opaque" if verdict.opaque else "not opaque", delta_hat,
        )

    if timings:
        clock["total"] = time.perf_counter() - started
        report["timings"] = clock
    return report


# ----------------------------
# Подкоманды
# ----------------------------

def _design_for(args) -> tuple:
    net = load_network(args.model, samples=args.samples)
    varpi = args.precision if args.precision is not None else net.precision
    if varpi is None:
        raise ValueError("no precision given and the model declares none")
    design = design_parameters(net, float(varpi))
    quant = choose_quantization(net, design, args.notion, args.mu)
    return net, design, quant


def cmd_design(args) -> int:
    _, design, _ = _design_for(args)
    _emit(design.to_dict(), args.out)
    return EXIT_OPAQUE


def cmd_abstract(args) -> int:
    net, design, quant = _design_for(args)
    sub = net.sub(args.subsystem)
    if args.q:
        quant = dict(quant)
        quant[sub.index] = Quantization.parse(args.q, sub.predecessors)
    system = build_abstraction(sub, quant[sub.index], neighbor_values(net, quant)[sub.index], strict=not args.loose)
    if args.out:
        system.save(args.out)
    _emit(_system_summary(system), None)
    return EXIT_OPAQUE


def cmd_compose(args) -> int:
    net, design, _ = _design_for(args)
    systems = [FiniteSystem.load(p) for p in args.systems]
    composed = compose(systems, design.phi, net)
    if args.reachable_only:
        composed = composed.restrict_reachable()
    if args.out:
        composed.save(args.out)
    _emit(_system_summary(composed), None)
    return EXIT_OPAQUE


def cmd_verify(args) -> int:
    system = FiniteSystem.load(args.system)
    verdict = verify(system, args.notion, args.delta)
    doc = verdict.to_dict()
    if args.transfer is not None and verdict.opaque:
        doc["lifted_delta"] = transfer_bound(args.delta, args.transfer)
    _emit(doc, args.out)
    return EXIT_OPAQUE if verdict.opaque else EXIT_NOT_OPAQUE


def cmd_validate_relation(args) -> int:
    lhs, rhs = FiniteSystem.load(args.lhs), FiniteSystem.load(args.rhs)
    rel = max_relation(lhs, rhs, args.epsilon, args.notion, args.strategy)
    _emit(rel.to_dict(), args.out)
    return EXIT_OPAQUE if rel.ok else EXIT_NOT_OPAQUE


def cmd_validate_sopsf(args) -> int:
    net = load_network(args.model, samples=args.samples)
    sub = net.sub(args.subsystem)
    design = design_parameters(net, args.precision if args.precision is not None else args.varpi)
    quant = dict(choose_quantization(net, design, args.notion, args.mu))
    quant[sub.index] = Quantization.parse(args.q, sub.predecessors)
    system = build_abstraction(sub, quant[sub.index], neighbor_values(net, quant)[sub.index], strict=False)
    report = validate_sopsf(sub, system, None, args.varpi, args.vartheta, args.notion, args.samples, args.seed)
    _emit(report.to_dict(), args.out)
    return EXIT_OPAQUE if report.passed else EXIT_NOT_OPAQUE


def cmd_pipeline(args) -> int:
    report = run_pipeline(
        args.model,
        precision=args.precision,
        notion=args.notion,
        delta_hat=args.delta,
        design_only=args.design_only,
        reachable_only=args.reachable_only,
        dot_dir=args.dot_dir,
        mu=args.mu,
        samples=args.samples,
        validate=args.validate,
        timings=args.timings,
        command=args.argv,
    )
    _emit(report, args.out)
    return report["exit_code"]


def cmd_export_dot(args) -> int:
    export_dot(FiniteSystem.load(args.system), args.out)
    return EXIT_OPAQUE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opack", description="Compositional opacity-preserving finite abstractions")
    parser.add_argument("--threads", type=int, default=None, help="Потоки для построения переходов (OPACK_THREADS).")
    parser.add_argument("--seed", type=int, default=None, help="Зерно выборок (OPACK_SEED).")
    sub = parser.add_subparsers(dest="command", required=True)

    def model_args(p, precision_required: bool = False):
        p.add_argument("--model", required=True, help="TOML-файл модели.")
        p.add_argument("--precision", type=float, default=None, required=precision_required, help="Точность ϖ сети.")
        p.add_argument("--notion", default="init", help="init | current | inf")
        p.add_argument("--mu", type=float, default=None, help="Шаг сетки внешних входов.")
        p.add_argument("--samples", type=int, default=None, help="Размер выборок (OPACK_SAMPLES).")
        p.add_argument("--out", default=None, help="Куда записать результат.")

    p = sub.add_parser("design", help="Подбор локальных параметров")
    model_args(p)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("abstract", help="Абстракция одной подсистемы")
    model_args(p)
    p.add_argument("--subsystem", type=int, required=True)
    p.add_argument("--q", default=None, help='"η,θ,μ[,φ]" вместо выбранных параметров.')
    p.add_argument("--loose", action="store_true", help="Не проверять границы η, μ, φ.")
    p.set_defaults(func=cmd_abstract)

    p = sub.add_parser("compose", help="Композиция абстракций подсистем")
    model_args(p)
    p.add_argument("--systems", nargs="+", required=True, help="JSON-файлы абстракций в порядке подсистем.")
    p.add_argument("--reachable-only", action="store_true")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("verify", help="Проверка непрозрачности конечной системы")
    p.add_argument("--system", required=True)
    p.add_argument("--notion", default="init")
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--transfer", type=float, default=None, help="ε для переноса вердикта на исходную систему.")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("validate-relation", help="Наибольшее отношение симуляции")
    p.add_argument("--lhs", required=True)
    p.add_argument("--rhs", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--notion", default="init")
    p.add_argument("--strategy", default="batch", choices=("batch", "worklist"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_validate_relation)

    p = sub.add_parser("validate-sopsf", help="Выборочная проверка функции симуляции подсистемы")
    model_args(p)
    p.add_argument("--subsystem", type=int, required=True)
    p.add_argument("--q", required=True, help='"η,θ,μ[,φ]"')
    p.add_argument("--varpi", type=float, required=True)
    p.add_argument("--vartheta", type=float, required=True)
    p.set_defaults(func=cmd_validate_sopsf)

    p = sub.add_parser("pipeline", help="Полный прогон")
    model_args(p)
    p.add_argument("--delta", type=float, default=0.0, help="δ̂ для проверки абстракции.")
    p.add_argument("--design-only", action="store_true")
    p.add_argument("--reachable-only", action="store_true")
    p.add_argument("--dot-dir", default=None)
    p.add_argument("--validate", type=int, default=0, help="Число выборок для проверки составной функции.")
    p.add_argument("--timings", action="store_true", help="Добавить время стадий (отчёт перестаёт быть побайтно стабильным).")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("export-dot", help="DOT-файл конечной системы")
    p.add_argument("--system", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_dot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=settings.log_level,
        format="%(asctime)s %(levelname)s [%(name)s] %(message)s",
    )
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    if args.threads is not None:
        settings.threads = args.threads
    if args.seed is not None:
        settings.seed = args.seed

    try:
        return args.func(args)
    except StageError as exc:
        if isinstance(exc.exc, SmallGainViolation):
            print(f"small-gain witness cycle: {' -> '.join(map(str, exc.exc.cycle))}", file=sys.stderr)
        logger.error("[PIPELINE] stage %s failed: %s", exc.stage, exc.exc)
        return EXIT_ERROR
    except SmallGainViolation as exc:
        print(f"small-gain witness cycle: {' -> '.join(map(str, exc.cycle))}", file=sys.stderr)
        logger.error("[PIPELINE] %s", exc)
        return EXIT_ERROR
    except (ValueError, OSError) as exc:
        logger.error("[PIPELINE] %s failed: %s", args.command, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    try:
        sys.exit(main())
    except Exception:
        import traceback
        traceback.print_exc()
        sys.exit(EXIT_ERROR)
