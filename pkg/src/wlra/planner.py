"""Parameter accounting and rank budgets for factorized linear layers."""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BudgetError, InputError, ShapeError
from .linalg import read_header, read_matrix

RATIO_RESOLUTION = 1e-4


@dataclass(frozen=True)
class LinearLayerSpec:
    name: str
    in_dim: int
    out_dim: int
    has_bias: bool = False
    kind: str = ""

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise InputError(f"layer {self.name!r} has invalid dims {self.in_dim}x{self.out_dim}")

    @property
    def max_rank(self):
        return min(self.in_dim, self.out_dim)


@dataclass(frozen=True)
class PlanEntry:
    name: str
    rank: int
    params_before: int
    params_after: int


@dataclass
class CompressionPlan:
    entries: list
    total_before: int
    total_after: int
    budget: int
    ratio: float
    uncompressed_params: int = 0
    feasible: bool = True
    layers: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {
            "entries": [asdict(e) for e in self.entries],
            "total_before": self.total_before,
            "total_after": self.total_after,
            "budget": self.budget,
            "ratio": self.ratio,
            "uncompressed_params": self.uncompressed_params,
            "feasible": self.feasible,
        }


def params_dense(n, m, has_bias=False):
    return n * m + (m if has_bias else 0)


def params_factorized(n, m, r, has_bias=False):
    """Parameters of the two stacked layers (n x r, then r x m plus bias)."""
    return n * r + m * r + (m if has_bias else 0)


def break_even_rank(n, m):
    """Real-valued rank at which factorizing stops saving parameters."""
    return n * m / (n + m)


def rank_for_ratio(ratio, layer):
    """Round half-up, floor at 1, cap at full rank."""
    r = math.floor(ratio * layer.max_rank + 0.5)
    return int(min(max(r, 1), layer.max_rank))


def _total(layers, ratio, uncompressed):
    return uncompressed + sum(
        params_factorized(l.in_dim, l.out_dim, rank_for_ratio(ratio, l), l.has_bias)
        for l in layers
    )


def build_plan(layers, ranks, budget, ratio, uncompressed_params=0):
    entries = [
        PlanEntry(
            name=l.name,
            rank=r,
            params_before=params_dense(l.in_dim, l.out_dim, l.has_bias),
            params_after=params_factorized(l.in_dim, l.out_dim, r, l.has_bias),
        )
        for l, r in zip(layers, ranks)
    ]
    total_after = uncompressed_params + sum(e.params_after for e in entries)
    return CompressionPlan(
        entries=entries,
        total_before=uncompressed_params + sum(e.params_before for e in entries),
        total_after=total_after,
        budget=budget,
        ratio=ratio,
        uncompressed_params=uncompressed_params,
        feasible=total_after <= budget,
        layers=list(layers),
    )


def plan_uniform_ratio(layers, budget, uncompressed_params=0):
    """Largest uniform rank ratio whose factorized total fits ``budget``."""
    layers = list(layers)
    if not layers:
        raise InputError("no layers to plan")
    floor_total = _total(layers, 0.0, uncompressed_params)
    if budget < floor_total:
        raise BudgetError(
            f"budget {budget} is below the minimum achievable total {floor_total}",
            minimum=floor_total,
            budget=budget,
        )
    if _total(layers, 1.0, uncompressed_params) <= budget:
        ratio = 1.0
    else:
        lo, hi = 0.0, 1.0
        while hi - lo > RATIO_RESOLUTION:
            mid = 0.5 * (lo + hi)
            if _total(layers, mid, uncompressed_params) <= budget:
                lo = mid
            else:
                hi = mid
        ratio = lo
    ranks = [rank_for_ratio(ratio, l) for l in layers]
    return build_plan(layers, ranks, budget, ratio, uncompressed_params)


def apply_factorized(f, x, bias=None):
    """``(x A) B + bias`` for a vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    n, m = f.shape
    if x.shape[-1] != n:
        raise ShapeError(f"input length {x.shape[-1]} does not match {n}", expected=n)
    out = (x @ f.a) @ f.b
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (m,):
            raise ShapeError(f"bias shape {bias.shape} does not match ({m},)", expected=m)
        out = out + bias
    return out


def load_manifest(path):
    """Read a model manifest; layer dims come from the weight file headers.

    Returns ``(layers, uncompressed_params, raw)``.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(raw, dict) or not isinstance(raw.get("layers"), list) or not raw["layers"]:
        raise InputError("manifest needs a non-empty 'layers' list")
    base = os.path.dirname(os.path.abspath(path))
    layers = []
    for k, entry in enumerate(raw["layers"]):
        if not isinstance(entry, dict) or "name" not in entry or "weight_file" not in entry:
            raise InputError(f"layer {k} needs 'name' and 'weight_file'", index=k)
        wpath = entry["weight_file"]
        if not os.path.isabs(wpath):
            wpath = os.path.join(base, wpath)
        if wpath.lower().endswith(".csv"):
            rows, cols = read_matrix(wpath).shape
        else:
            rows, cols = read_header(wpath)
        layers.append(
            LinearLayerSpec(
                name=str(entry["name"]),
                in_dim=rows,
                out_dim=cols,
                has_bias=bool(entry.get("bias", False)),
                kind=str(entry.get("kind", "")),
            )
        )
    uncompressed = raw.get("uncompressed_params", 0)
    if not isinstance(uncompressed, int) or uncompressed < 0:
        raise InputError("'uncompressed_params' must be a nonnegative integer")
    return layers, uncompressed, raw
