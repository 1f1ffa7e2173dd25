"""JSON problem files.

Layout (indices 0-based)::

    {"version": 1,
     "agents": [{"n": 2,
                 "objective": {"kind": "quadratic", "Q": [...], "q": [...], "c": 0.0},
                 "set": {"kind": "box", "lo": [...], "hi": [...]},
                 "A": {"rows": 3, "triplets": [[row, col, value], ...]}}],
     "b": [...]}

Unknown fields anywhere are rejected.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .problem import Ball, Box, ConvexObjective, CouplingBlock, PartitionedProblem, ProductSet

__all__ = ["ProblemFormatError", "load_problem", "loads_problem", "dump_problem", "dumps_problem",
           "set_from_dict", "objective_from_dict"]


class ProblemFormatError(ValueError):
    """Malformed problem document."""


def _fields(d, where, required, optional=()):
    if not isinstance(d, dict):
        raise ProblemFormatError(f"{where}: expected an object")
    unknown = set(d) - set(required) - set(optional)
    if unknown:
        raise ProblemFormatError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = [k for k in required if k not in d]
    if missing:
        raise ProblemFormatError(f"{where}: missing field(s) {missing}")


def set_from_dict(d, where="set"):
    kind = d.get("kind") if isinstance(d, dict) else None
    if kind == "box":
        _fields(d, where, ("kind", "lo", "hi"))
        return Box(d["lo"], d["hi"])
    if kind == "ball":
        _fields(d, where, ("kind", "center", "radius"))
        return Ball(d["center"], d["radius"])
    if kind == "product":
        _fields(d, where, ("kind", "factors"))
        return ProductSet(tuple(set_from_dict(f, f"{where}.factors[{k}]") for k, f in enumerate(d["factors"])))
    raise ProblemFormatError(f"{where}: unknown set kind {kind!r}")


def objective_from_dict(d, n, where="objective"):
    kind = d.get("kind") if isinstance(d, dict) else None
    if kind == "quadratic":
        _fields(d, where, ("kind", "q"), ("Q", "c"))
        Q = np.zeros((n, n)) if d.get("Q") is None else np.array(d["Q"], dtype=float).reshape(n, n)
        return ConvexObjective.quadratic(Q, d["q"], d.get("c", 0.0))
    if kind == "affine":
        _fields(d, where, ("kind", "q"), ("c",))
        return ConvexObjective.affine(d["q"], d.get("c", 0.0))
    raise ProblemFormatError(f"{where}: unknown objective kind {kind!r}")


def problem_from_dict(doc) -> PartitionedProblem:
    _fields(doc, "problem", ("version", "agents", "b"))
    if doc["version"] != 1:
        raise ProblemFormatError(f"unsupported version {doc['version']!r}")
    b = np.array(doc["b"], dtype=float).reshape(-1)
    objs, sets, blocks = [], [], []
    for i, a in enumerate(doc["agents"]):
        where = f"agents[{i}]"
        _fields(a, where, ("n", "objective", "set", "A"))
        n = int(a["n"])
        try:
            objs.append(objective_from_dict(a["objective"], n, f"{where}.objective"))
            sets.append(set_from_dict(a["set"], f"{where}.set"))
            _fields(a["A"], f"{where}.A", ("rows", "triplets"))
            if int(a["A"]["rows"]) != b.shape[0]:
                raise ProblemFormatError(f"{where}.A: rows={a['A']['rows']} but b has {b.shape[0]} entries")
            blocks.append(CouplingBlock.from_triplets(i, b.shape[0], n, a["A"]["triplets"]))
        except ProblemFormatError:
            raise
        except (ValueError, TypeError) as exc:
            raise ProblemFormatError(f"{where}: {exc}") from exc
    return PartitionedProblem(objs, sets, blocks, b)


def loads_problem(text: str) -> PartitionedProblem:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemFormatError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return problem_from_dict(doc)


def load_problem(path) -> PartitionedProblem:
    return loads_problem(Path(path).read_text())


def dumps_problem(problem: PartitionedProblem) -> str:
    return json.dumps(problem.to_dict(), indent=1, sort_keys=True) + "\n"


def dump_problem(problem: PartitionedProblem, path) -> None:
    Path(path).write_text(dumps_problem(problem))
