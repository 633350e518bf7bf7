"""Exact g-computation on finite treatment trees.

A tree lists subjects by their history of treatment and covariate values
in time order. Each complete history is a leaf with survivor and death
counts. Results are exact rationals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Union

from .errors import DomainError, PositivityError

__all__ = [
    "Variable",
    "TreatmentTree",
    "GResult",
    "g_compute",
    "naive_compare",
    "figure1_tree",
    "parse_regime",
]

OBSERVED = "observed"
RegimeValue = Union[int, str]


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str  # "treatment" or "covariate"
    aliases: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("treatment", "covariate"):
            raise DomainError(f"variable kind must be treatment or covariate, got {self.kind!r}")


@dataclass(frozen=True)
class TreatmentTree:
    """Leaf counts indexed by full histories (one value per variable)."""

    variables: tuple[Variable, ...]
    leaves: Mapping[tuple[int, ...], tuple[int, int]]

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        leaves = {tuple(int(v) for v in k): (int(s), int(d)) for k, (s, d) in dict(self.leaves).items()}
        for hist, (s, d) in leaves.items():
            if len(hist) != len(self.variables):
                raise DomainError(f"history {hist} does not assign every variable")
            if s < 0 or d < 0:
                raise DomainError(f"negative count at {hist}")
        object.__setattr__(self, "leaves", leaves)

    def position(self, name: str) -> int:
        for i, v in enumerate(self.variables):
            if name == v.name or name in v.aliases:
                return i
        raise DomainError(f"unknown variable {name!r}")

    def count(self, prefix: tuple[int, ...]) -> int:
        k = len(prefix)
        return sum(s + d for h, (s, d) in self.leaves.items() if h[:k] == prefix)

    def survivors(self, prefix: tuple[int, ...]) -> int:
        k = len(prefix)
        return sum(s for h, (s, _) in self.leaves.items() if h[:k] == prefix)

    def children(self, prefix: tuple[int, ...]) -> list[int]:
        k = len(prefix)
        return sorted({h[k] for h in self.leaves if h[:k] == prefix and self.count(h[: k + 1]) > 0})

    @property
    def total(self) -> int:
        return self.count(())

    def to_dict(self) -> dict:
        return {
            "variables": [{"name": v.name, "kind": v.kind, "aliases": list(v.aliases)} for v in self.variables],
            "leaves": [{"history": list(h), "survivors": s, "deaths": d} for h, (s, d) in sorted(self.leaves.items())],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TreatmentTree":
        try:
            variables = tuple(Variable(v["name"], v["kind"], tuple(v.get("aliases", ()))) for v in d["variables"])
            leaves = {tuple(x["history"]): (x["survivors"], x["deaths"]) for x in d["leaves"]}
        except (KeyError, TypeError) as exc:
            raise DomainError(f"malformed tree spec: {exc}") from exc
        return cls(variables, leaves)

    @classmethod
    def from_json(cls, text: str) -> "TreatmentTree":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class GResult:
    """Survival probability under a regime and its scale-up to a population."""

    probability: Fraction
    population: int

    @property
    def expected_survivors(self) -> Fraction:
        return self.probability * self.population

    def to_dict(self) -> dict:
        return {
            "probability": str(self.probability),
            "population": self.population,
            "expected_survivors": str(self.expected_survivors),
        }


def _normalize(tree: TreatmentTree, regime: Mapping[str, RegimeValue]) -> dict[int, RegimeValue]:
    out: dict[int, RegimeValue] = {}
    for name, val in regime.items():
        i = tree.position(name)
        if tree.variables[i].kind != "treatment":
            raise DomainError(f"{name!r} is a covariate and cannot be set by a regime")
        out[i] = val if val == OBSERVED else int(val)
    return out


def g_compute(tree: TreatmentTree, regime: Mapping[str, RegimeValue]) -> GResult:
    """Survival probability when treatments follow ``regime``.

    Treatments missing from ``regime`` or set to ``"observed"`` keep their
    observed conditional distribution. Covariates are integrated over their
    conditional law given the past. The population is the number of
    subjects whose leading treatments already agree with the regime, e.g.
    the AZT arm when AZT is fixed first.

    Raises :class:`PositivityError` naming the stratum where a required
    treatment value was never observed.
    """
    fixed = _normalize(tree, regime)
    names = [v.name for v in tree.variables]

    def rec(prefix: tuple[int, ...]) -> Fraction:
        i = len(prefix)
        if i == len(tree.variables):
            n = tree.count(prefix)
            return Fraction(tree.survivors(prefix), n)
        var = tree.variables[i]
        if var.kind == "treatment" and fixed.get(i, OBSERVED) != OBSERVED:
            v = fixed[i]
            if tree.count(prefix + (v,)) == 0:
                stratum = dict(zip(names, prefix))
                raise PositivityError(f"no subject with {var.name}={v} in stratum {stratum}", stratum=stratum)
            return rec(prefix + (v,))
        n = tree.count(prefix)
        return sum((Fraction(tree.count(prefix + (c,)), n) * rec(prefix + (c,)) for c in tree.children(prefix)), Fraction(0))

    if tree.total == 0:
        raise DomainError("empty tree")
    prob = rec(())
    lead: tuple[int, ...] = ()
    for i, var in enumerate(tree.variables):
        if var.kind == "treatment" and fixed.get(i, OBSERVED) != OBSERVED:
            lead += (fixed[i],)
        else:
            break
    return GResult(prob, tree.count(lead))


def naive_compare(
    tree: TreatmentTree, conditioning: Mapping[str, int] | None = None, by: str | None = None
) -> dict[int, dict]:
    """Crude survival by arm of ``by`` (default: first treatment), among subjects matching ``conditioning``."""
    conditioning = {tree.position(k): int(v) for k, v in (conditioning or {}).items()}
    arm = tree.position(by) if by else next(i for i, v in enumerate(tree.variables) if v.kind == "treatment")
    out: dict[int, dict] = {}
    for hist, (s, d) in sorted(tree.leaves.items()):
        if any(hist[i] != v for i, v in conditioning.items()):
            continue
        cell = out.setdefault(hist[arm], {"survivors": 0, "total": 0})
        cell["survivors"] += s
        cell["total"] += s + d
    for cell in out.values():
        cell["proportion"] = Fraction(cell["survivors"], cell["total"]) if cell["total"] else None
    return out


def figure1_tree() -> TreatmentTree:
    """The AZT / PCP / prophylaxis example with 32,000 patients.

    ``azt`` is given at baseline, ``pcp`` records whether PCP developed, and
    ``proph`` is prophylaxis given afterwards.
    """
    variables = (
        Variable("azt", "treatment", ("A0",)),
        Variable("pcp", "covariate", ("L1",)),
        Variable("proph", "treatment", ("A1",)),
    )
    leaves = {
        (1, 0, 0): (1000, 3000),
        (1, 0, 1): (3000, 1000),
        (1, 1, 1): (4000, 4000),
        (0, 1, 1): (10000, 6000),
    }
    return TreatmentTree(variables, leaves)


def parse_regime(text: str) -> dict[str, RegimeValue]:
    """Parse ``"azt=1,proph=observed"`` into a regime mapping."""
    out: dict[str, RegimeValue] = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise DomainError(f"regime entry {part!r} is not name=value")
        k, v = (s.strip() for s in part.split("=", 1))
        out[k] = OBSERVED if v == OBSERVED else int(v)
    return out
