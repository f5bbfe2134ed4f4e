"""Branch-portion repositories: master aggregation, branch mixing, checkpoints.

A repository holds ``n`` branch vectors for one side (client or server);
branch ``i`` on the client side pairs with branch ``i`` on the server side.
The master portion is the uniform branch mean, accumulated in branch order
so every caller reproduces it bit for bit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from korea_sfl.engine import ContractError, ParamVector

SIDES = ("client", "server")


@dataclass(frozen=True)
class PortionRepository:
    branches: tuple[ParamVector, ...]
    side: str

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if self.side not in SIDES:
            raise ContractError(f"side must be one of {SIDES}")
        if self.branches:
            size = len(self.branches[0])
            if any(len(b) != size for b in self.branches):
                raise ContractError("all branches in a repository must have the same length")

    def __len__(self) -> int:
        return len(self.branches)

    def __getitem__(self, i: int) -> ParamVector:
        return self.branches[i]

    @classmethod
    def replicate(cls, portion: ParamVector, n: int, side: str) -> "PortionRepository":
        return cls(tuple(ParamVector(portion.values.copy(), portion.spec_hash) for _ in range(n)), side)

    def replace(self, branches) -> "PortionRepository":
        return PortionRepository(tuple(branches), self.side)


@dataclass(frozen=True)
class MixCoefficient:
    """Master weight ``alpha`` of ``(w_i + alpha*m) / (1 + alpha)``.

    ``lam = 1/(1+alpha)`` is the equivalent branch weight of
    ``lam*w_i + (1-lam)*m``; ``alpha = inf`` collapses every branch to the master.
    """

    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")

    @property
    def lam(self) -> float:
        return 0.0 if math.isinf(self.alpha) else 1.0 / (1.0 + self.alpha)

    @classmethod
    def from_lambda(cls, lam: float) -> "MixCoefficient":
        if not 0.0 <= lam <= 1.0:
            raise ContractError(f"lambda must lie in [0, 1], got {lam}")
        return cls(math.inf if lam == 0.0 else 1.0 / lam - 1.0)


def mean_vector(vectors) -> np.ndarray:
    """Uniform mean, summed sequentially in the given order."""
    vectors = list(vectors)
    if not vectors:
        raise ContractError("cannot average an empty set of vectors")
    acc = vectors[0].copy()
    for v in vectors[1:]:
        acc += v
    return acc / len(vectors)


def master(repo: PortionRepository) -> ParamVector:
    if len(repo) == 0:
        raise ContractError("repository is empty")
    return ParamVector(mean_vector(b.values for b in repo.branches), repo.branches[0].spec_hash)


def mix(repo: PortionRepository, coeff: MixCoefficient) -> PortionRepository:
    lam = coeff.lam
    m = master(repo).values
    return repo.replace(ParamVector(lam * b.values + (1.0 - lam) * m, b.spec_hash) for b in repo.branches)


def mixing_diagnostics(repo_before: PortionRepository, repo_after: PortionRepository,
                       w_star) -> tuple[float, float, float]:
    """Mean squared distance to ``w_star`` before and after mixing, and of the master."""
    w_star = getattr(w_star, "values", w_star)
    if len(repo_before) != len(repo_after) or len(repo_before) == 0:
        raise ContractError("repositories must be non-empty and the same size")
    before = float(np.mean([np.sum((b.values - w_star) ** 2) for b in repo_before.branches]))
    after = float(np.mean([np.sum((b.values - w_star) ** 2) for b in repo_after.branches]))
    m = master(repo_after).values
    return before, after, float(np.sum((m - w_star) ** 2))


# Checkpoint: <stem>.bin holds, for every branch (client side first), a u64 LE
# element count followed by that many f64 LE values; <stem>.json describes it.

def save_checkpoint(stem, client_repo: PortionRepository, server_repo: PortionRepository,
                    round_: int, spec_hash: str) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    bin_path, meta_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    with open(bin_path, "wb") as fh:
        for repo in (client_repo, server_repo):
            for b in repo.branches:
                fh.write(struct.pack("<Q", len(b)))
                fh.write(np.ascontiguousarray(b.values, dtype="<f8").tobytes())
    meta = {
        "spec_hash": spec_hash,
        "round": round_,
        "sides": [
            {"side": r.side, "branches": len(r), "length": len(r[0]) if len(r) else 0,
             "segment_hash": r[0].spec_hash if len(r) else None}
            for r in (client_repo, server_repo)
        ],
    }
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return bin_path, meta_path


def load_checkpoint(stem) -> tuple[PortionRepository, PortionRepository, dict]:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    raw = stem.with_suffix(".bin").read_bytes()
    pos, repos = 0, []
    for side in meta["sides"]:
        branches = []
        for _ in range(side["branches"]):
            if pos + 8 > len(raw):
                raise ValueError(f"{stem}.bin is truncated")
            (count,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            values = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64)
            pos += 8 * count
            branches.append(ParamVector(values, side["segment_hash"]))
        repos.append(PortionRepository(tuple(branches), side["side"]))
    if pos != len(raw):
        raise ValueError(f"{stem}.bin has {len(raw) - pos} trailing bytes")
    return repos[0], repos[1], meta
