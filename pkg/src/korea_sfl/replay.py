"""Knowledge replay: score vectors, per-class quotas, assistants and feature extraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from korea_sfl.engine import ContractError, ParamVector, NetworkSpec, forward_client


@dataclass(frozen=True)
class SampleRequest:
    quotas: np.ndarray
    branch: int = 0
    round: int = 0

    @property
    def total(self) -> int:
        return int(self.quotas.sum())


@dataclass(frozen=True)
class ActivationPacket:
    features: np.ndarray
    labels: np.ndarray
    origin: int
    branch: int

    @property
    def rows(self) -> int:
        return self.labels.shape[0]


@dataclass
class HistoryBuffer:
    """Per-branch label histograms, one appended per round the branch trains."""

    per_branch: list[list[np.ndarray]] = field(default_factory=list)

    @classmethod
    def empty(cls, n: int) -> "HistoryBuffer":
        return cls([[] for _ in range(n)])

    def append(self, branch: int, hist: np.ndarray) -> None:
        self.per_branch[branch].append(np.asarray(hist).copy())

    def __getitem__(self, branch: int) -> list[np.ndarray]:
        return self.per_branch[branch]


def score_vector(history, decay_beta: float) -> np.ndarray:
    """Decay-weighted mean of the branch's normalised label histograms.

    The newest histogram has weight 1 and the one ``k`` rounds older has
    weight ``decay_beta**k``.  Empty histograms are skipped entirely.
    """
    if not 0 < decay_beta <= 1:
        raise ContractError(f"decay_beta must lie in (0, 1], got {decay_beta}")
    history = [np.asarray(h, dtype=np.float64) for h in history]
    if not history:
        raise ContractError("score vector needs at least one histogram")
    r = len(history) - 1
    num = np.zeros_like(history[0])
    den = 0.0
    for j, h in enumerate(history):
        total = h.sum()
        if total <= 0:
            continue
        w = decay_beta ** (r - j)
        num += w * (h / total)
        den += w
    if den == 0.0:
        raise ContractError("branch history holds no samples")
    return num / den


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def knowledge_request(sv, p_r: float, main_client_size: int, branch: int = 0, round_: int = 0
                      ) -> SampleRequest:
    """Per-class replay quotas favouring classes scored below the mean.

    ``round(|D_i| * p_r)`` samples (half-up) are split over positive-priority
    classes by the largest-remainder method; ties go to the lower class id.
    """
    if p_r < 0:
        raise ContractError(f"p_r must be non-negative, got {p_r}")
    sv = np.asarray(sv, dtype=np.float64)
    prior = np.maximum(0.0, sv.mean() - sv)
    quotas = np.zeros(sv.shape[0], dtype=np.int64)
    total = _round_half_up(main_client_size * p_r)
    psum = prior.sum()
    if psum <= 0 or total == 0:
        return SampleRequest(quotas, branch, round_)
    raw = total * prior / psum
    quotas = np.floor(raw).astype(np.int64)
    positive = np.flatnonzero(prior > 0)
    short = total - int(quotas.sum())
    if short > 0:
        rema = raw[positive] - quotas[positive]
        order = positive[np.argsort(-rema, kind="stable")]
        quotas[order[:short]] += 1
    return SampleRequest(quotas, branch, round_)


def select_assistant(pool, unfilled, already_used, rng, histograms) -> int | None:
    """Uniformly pick an unused pool client holding some still-unfilled class.

    ``histograms[k]`` is client ``k``'s class histogram.  Returns ``None``
    when no client qualifies.
    """
    need = np.asarray(unfilled) > 0
    qualified = [k for k in sorted(pool)
                 if k not in already_used and np.any(np.asarray(histograms[k])[need] > 0)]
    if not qualified:
        return None
    return qualified[int(rng.integers(len(qualified)))]


def knowledge_extract(client_portion: ParamVector, spec: NetworkSpec, x: np.ndarray, y: np.ndarray,
                      unfilled, rng, origin: int = -1, branch: int = 0):
    """Sample ``min(unfilled_c, available_c)`` rows per class and run them through the client portion.

    For each class in id order the rows are the first ``take`` entries of a
    permutation of that class's local rows.  Returns ``(packet, supplied)``.
    """
    unfilled = np.asarray(unfilled)
    chosen = []
    for c in np.flatnonzero(unfilled > 0):
        members = np.flatnonzero(y == c)
        take = min(int(unfilled[c]), members.size)
        if take:
            chosen.append(members[rng.permutation(members.size)[:take]])
    rows = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
    if rows.size:
        features, _ = forward_client(client_portion, spec, x[rows])
    else:
        features = np.zeros((0, spec.feature_dim))
    labels = y[rows]
    supplied = np.bincount(labels, minlength=unfilled.shape[0])
    return ActivationPacket(features, labels, origin, branch), supplied


@dataclass(frozen=True)
class ReplayResult:
    packets: tuple[ActivationPacket, ...]
    supplied: np.ndarray
    assistants: tuple[int, ...]

    @property
    def rows(self) -> int:
        return sum(p.rows for p in self.packets)


def collect_replay(client_portion: ParamVector, spec: NetworkSpec, request: SampleRequest, pool,
                   client_data, histograms, rng, max_assistants: int) -> ReplayResult:
    """Enlist assistants until the request is filled, none qualify, or ``max_assistants`` served.

    ``client_data(k)`` returns assistant ``k``'s ``(x, y)``.
    """
    unfilled = request.quotas.copy()
    supplied = np.zeros_like(unfilled)
    used: set[int] = set()
    packets, order = [], []
    for _ in range(max_assistants):
        if unfilled.sum() == 0:
            break
        a = select_assistant(pool, unfilled, used, rng, histograms)
        if a is None:
            break
        used.add(a)
        order.append(a)
        x, y = client_data(a)
        packet, got = knowledge_extract(client_portion, spec, x, y, unfilled, rng, a, request.branch)
        unfilled -= got
        supplied += got
        packets.append(packet)
    return ReplayResult(tuple(packets), supplied, tuple(order))
