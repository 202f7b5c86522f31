from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any, Iterable


@dataclass
class ContractResult:
    name: str
    ok: bool
    value: float | None
    limit: float | None
    message: str

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _num(x: float) -> float | None:
    x = float(x)
    return x if math.isfinite(x) else None


def at_most(name: str, value: float, limit: float) -> ContractResult:
    ok = bool(value <= limit)
    return ContractResult(name, ok, _num(value), float(limit), f"{name}: {value:.6g} {'<=' if ok else '>'} {limit:.6g}")


def at_least(name: str, value: float, limit: float) -> ContractResult:
    ok = bool(value >= limit)
    return ContractResult(name, ok, _num(value), float(limit), f"{name}: {value:.6g} {'>=' if ok else '<'} {limit:.6g}")


def within(name: str, value: float, target: float, tol: float) -> ContractResult:
    gap = abs(value - target)
    ok = bool(gap <= tol)
    return ContractResult(name, ok, _num(value), float(tol),
                          f"{name}: |{value:.6g} - {target:.6g}| = {gap:.3g} {'<=' if ok else '>'} {tol:.3g}")


def holds(name: str, ok: bool, message: str = "") -> ContractResult:
    return ContractResult(name, bool(ok), None, None, message or f"{name}: {'holds' if ok else 'violated'}")


def tier(results: Iterable[ContractResult]) -> tuple[str, dict[str, Any]]:
    results = list(results)
    failed = [r.name for r in results if not r.ok]
    if not failed:
        return "PASS", {"ok": True, "contracts": len(results)}
    return "FAIL", {"ok": False, "contracts": len(results), "failed": failed}
