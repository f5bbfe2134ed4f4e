"""Round loop for KoReA-SFL and the vanilla-SFL / FedAvg baselines.

All three algorithms share one local-training routine; they differ in how
branches are kept (repository + mixing vs. one shared model), whether replay
features are requested, and which messages cross the simulated network.

RNG contract (see :mod:`korea_sfl.rng`):

* main clients of round ``r``: ``stream(seed, "select", r).permutation(N)[:n]``,
  branch ``i`` trains on the ``i``-th entry;
* client ``k``'s batches in round ``r``: :func:`korea_sfl.data.batches`,
  local step ``s`` uses batch ``s mod len(batches)``;
* replay for branch ``i`` in round ``r``: one ``stream(seed, "replay", r, i)``
  consumed by assistant selection and extraction in turn.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from korea_sfl import rng as rngs
from korea_sfl.config import BlobsData, Config, dump_config
from korea_sfl.controller import FgnRecord, ProportionState, record_fgn, update_proportion
from korea_sfl.data import (Dataset, PartitionSpec, Partition, batches, holdout_split,
                            load_idx, make_blobs, partition)
from korea_sfl.engine import (DivergenceError, NetworkSpec, ParamVector, SplitModel, backward_client,
                              backward_server, evaluate, forward_client, forward_server, init_params,
                              sgd_step)
from korea_sfl.replay import collect_replay, knowledge_request, score_vector
from korea_sfl.repository import MixCoefficient, PortionRepository, master, mean_vector, mix, save_checkpoint

CHANNELS = (
    "client_portion_dispatch",
    "feature_upload",
    "score_dispatch",
    "assistant_portion_dispatch",
    "assistant_feature_upload",
    "gradient_dispatch",
    "portion_upload",
)

METRIC_COLUMNS = (
    "round", "accuracy", "mean_loss", "fgn_magnitude", "p_r",
    "bytes_client_dispatch", "bytes_features", "bytes_assistant_dispatch",
    "bytes_assistant_features", "bytes_gradients", "bytes_uploads", "bytes_total",
)

# metrics.csv byte column -> ledger channels it sums
COLUMN_CHANNELS = {
    "bytes_client_dispatch": ("client_portion_dispatch",),
    "bytes_features": ("feature_upload",),
    "bytes_assistant_dispatch": ("assistant_portion_dispatch", "score_dispatch"),
    "bytes_assistant_features": ("assistant_feature_upload",),
    "bytes_gradients": ("gradient_dispatch",),
    "bytes_uploads": ("portion_upload",),
}

FED, MAIN = "fed_server", "main_server"


def _client(k: int) -> str:
    return f"client{k}"


@dataclass(frozen=True)
class Message:
    channel: str
    payload_elements: int
    round: int
    src: str
    dst: str

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}")
        if self.payload_elements < 0:
            raise ValueError("payload_elements must be non-negative")


class CommLedger:
    """Per-round, per-channel byte totals."""

    def __init__(self, bytes_per_element: int = 4):
        self.bytes_per_element = bytes_per_element
        self.per_round: dict[int, dict[str, int]] = {}
        self.message_count = 0

    def record(self, msg: Message) -> None:
        row = self.per_round.setdefault(msg.round, dict.fromkeys(CHANNELS, 0))
        row[msg.channel] += msg.payload_elements * self.bytes_per_element
        self.message_count += 1

    def round_bytes(self, round_: int) -> dict[str, int]:
        return dict(self.per_round.get(round_, dict.fromkeys(CHANNELS, 0)))

    def totals(self) -> dict[str, int]:
        out = dict.fromkeys(CHANNELS, 0)
        for row in self.per_round.values():
            for ch, b in row.items():
                out[ch] += b
        return out

    @property
    def total_bytes(self) -> int:
        return sum(self.totals().values())


@dataclass(frozen=True)
class Experiment:
    """Everything a round needs that does not change between rounds."""

    config: Config
    spec: NetworkSpec
    train: Dataset
    test: Dataset
    part: Partition
    init: SplitModel

    @property
    def proto(self):
        return self.config.protocol

    @property
    def num_clients(self) -> int:
        return len(self.part.indices)

    def client_xy(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.part.indices[k]
        return self.train.x[idx], self.train.y[idx]


@dataclass(frozen=True)
class TrainerState:
    client_repo: PortionRepository
    server_repo: PortionRepository
    history: tuple[tuple[np.ndarray, ...], ...]
    proportion: ProportionState
    fgn: tuple[FgnRecord, ...]
    round: int = 0


@dataclass(frozen=True)
class RoundPlan:
    round: int
    main_clients: tuple[int, ...]
    assistants: tuple[tuple[int, ...], ...] = ()


@dataclass(frozen=True)
class RoundMetrics:
    round: int  # rounds completed; 0 is the initial model
    accuracy: float
    mean_loss: float
    per_class_recall: np.ndarray
    fgn_magnitude: float | None = None
    server_fgn_magnitude: float | None = None
    p_r: float = 0.0
    messages: tuple[Message, ...] = ()
    plan: RoundPlan | None = None
    main_rows_uploaded: int = 0
    main_rows_consumed: int = 0
    replay_rows_uploaded: int = 0
    replay_rows_consumed: int = 0


@dataclass
class _LocalResult:
    wc: ParamVector
    ws: ParamVector
    grad_sq: float
    server_grad_sq: float
    messages: list[Message] = field(default_factory=list)
    main_uploaded: int = 0
    main_consumed: int = 0
    replay_uploaded: int = 0
    replay_consumed: int = 0
    assistants: tuple[int, ...] = ()
    hist: np.ndarray | None = None


def build_experiment(config: Config) -> Experiment:
    ds = config.dataset
    if isinstance(ds, BlobsData):
        full = make_blobs(ds.num_classes, ds.dim, ds.samples_per_class, ds.spread, ds.seed, ds.separation)
        train, test = holdout_split(full, ds.test_fraction, ds.seed)
    else:
        train = load_idx(ds.train_images, ds.train_labels, ds.num_classes)
        test = load_idx(ds.test_images, ds.test_labels, ds.num_classes)
    pb = config.partition
    pspec = PartitionSpec(pb.num_clients, None if pb.iid else pb.dirichlet_beta, pb.seed)
    part = partition(train, pspec)
    spec = NetworkSpec.mlp(config.model.dims, config.model.split_at)
    return Experiment(config, spec, train, test, part, init_params(spec, config.protocol.seed))


def initial_state(exp: Experiment) -> TrainerState:
    proto = exp.proto
    n = proto.n if proto.algorithm == "korea" else 1
    return TrainerState(
        PortionRepository.replicate(exp.init.client_portion, n, "client"),
        PortionRepository.replicate(exp.init.server_portion, n, "server"),
        tuple(() for _ in range(n)),
        ProportionState(proto.p0 if proto.algorithm == "korea" else 0.0,
                        proto.p_min if proto.algorithm == "korea" else 0.0,
                        proto.p_max),
        (),
        0,
    )


def select_main_clients(seed: int, round_: int, num_clients: int, n: int) -> tuple[int, ...]:
    return tuple(int(k) for k in rngs.stream(seed, "select", round_).permutation(num_clients)[:n])


def _local_train(exp: Experiment, k: int, r: int, wc: ParamVector, ws: ParamVector,
                 replay_x: np.ndarray | None, replay_y: np.ndarray | None, split_messages: bool,
                 branch: int) -> _LocalResult:
    proto, spec = exp.proto, exp.spec
    order = batches(exp.part.indices[k], proto.batch_size, proto.seed, k, r)
    feat_dim = spec.feature_dim
    res = _LocalResult(wc, ws, 0.0, 0.0)
    for s in range(proto.E):
        b = order[s % len(order)]
        xb, yb = exp.train.x[b], exp.train.y[b]
        feats, ccache = forward_client(wc, spec, xb)
        if replay_y is not None and replay_y.size:
            fs, ys = np.concatenate([feats, replay_x]), np.concatenate([yb, replay_y])
            res.replay_consumed += replay_y.size
        else:
            fs, ys = feats, yb
        loss, _, scache = forward_server(ws, spec, fs, ys)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss in round {r}, branch {branch}, step {s}",
                                  {"round": r, "branch": branch, "client": k, "step": s, "loss": loss})
        gs, dfeat = backward_server(scache)
        gc = backward_client(ccache, dfeat[: len(b)])
        if s == proto.E - 1:
            res.server_grad_sq = float(gs.values @ gs.values)
            res.grad_sq = float(gc.values @ gc.values) + res.server_grad_sq
        try:
            ws = sgd_step(ws, gs, proto.eta)
            wc = sgd_step(wc, gc, proto.eta)
        except DivergenceError as err:
            raise DivergenceError(f"{err} in round {r}, branch {branch}, step {s}",
                                  {"round": r, "branch": branch, "client": k, "step": s, "loss": loss}) from None
        res.main_uploaded += len(b)
        res.main_consumed += len(b)
        if split_messages:
            res.messages.append(Message("feature_upload", len(b) * (feat_dim + 1), r, _client(k), MAIN))
            res.messages.append(Message("gradient_dispatch", len(b) * feat_dim, r, MAIN, _client(k)))
    res.wc, res.ws = wc, ws
    return res


def _korea_branch(exp: Experiment, state: TrainerState, r: int, i: int, k: int,
                  main_clients: tuple[int, ...]) -> _LocalResult:
    proto, spec = exp.proto, exp.spec
    wc, ws = state.client_repo[i], state.server_repo[i]
    pc = len(wc)
    msgs = [Message("client_portion_dispatch", pc, r, FED, _client(k))]

    hist = exp.part.histograms[k]
    sv = score_vector(state.history[i] + (hist,), proto.decay_beta)
    request = knowledge_request(sv, state.proportion.p, len(exp.part.indices[k]), i, r)

    replay_x = replay_y = None
    assistants: tuple[int, ...] = ()
    replay_rows = 0
    if request.total > 0 and proto.max_assistants > 0:
        chosen = set(main_clients)
        pool = [a for a in range(exp.num_clients) if a not in chosen]
        result = collect_replay(wc, spec, request, pool, exp.client_xy, exp.part.histograms,
                                rngs.stream(proto.seed, "replay", r, i), proto.max_assistants)
        assistants = result.assistants
        for pkt in result.packets:
            a = pkt.origin
            msgs.append(Message("score_dispatch", spec.num_classes, r, MAIN, _client(a)))
            msgs.append(Message("assistant_portion_dispatch", pc, r, FED, _client(a)))
            msgs.append(Message("assistant_feature_upload", pkt.rows * (spec.feature_dim + 1), r,
                                _client(a), MAIN))
        if result.rows:
            replay_x = np.concatenate([p.features for p in result.packets])
            replay_y = np.concatenate([p.labels for p in result.packets])
            replay_rows = result.rows

    res = _local_train(exp, k, r, wc, ws, replay_x, replay_y, True, i)
    res.messages = msgs + res.messages
    res.messages.append(Message("portion_upload", pc, r, _client(k), FED))
    res.replay_uploaded = replay_rows
    res.assistants = assistants
    res.hist = hist
    return res


def _shared_branch(exp: Experiment, state: TrainerState, r: int, i: int, k: int, split: bool) -> _LocalResult:
    wc, ws = state.client_repo[0], state.server_repo[0]
    res = _local_train(exp, k, r, wc, ws, None, None, split, i)
    size = len(wc) if split else len(wc) + len(ws)
    res.messages = ([Message("client_portion_dispatch", size, r, FED, _client(k))] + res.messages
                    + [Message("portion_upload", size, r, _client(k), FED)])
    return res


def _map_branches(fn, count: int, pool: ThreadPoolExecutor | None) -> list:
    if pool is None:
        return [fn(i) for i in range(count)]
    return list(pool.map(fn, range(count)))


def run_round(state: TrainerState, exp: Experiment, pool: ThreadPoolExecutor | None = None
              ) -> tuple[TrainerState, RoundMetrics]:
    """Execute one round; every reduction runs in branch order, so ``pool`` never changes results."""
    proto = exp.proto
    r = state.round
    main_clients = select_main_clients(proto.seed, r, exp.num_clients, proto.n)
    algo = proto.algorithm

    if algo == "korea":
        results = _map_branches(lambda i: _korea_branch(exp, state, r, i, main_clients[i], main_clients),
                                proto.n, pool)
        trained_c = PortionRepository(tuple(res.wc for res in results), "client")
        trained_s = PortionRepository(tuple(res.ws for res in results), "server")
        coeff = MixCoefficient(proto.alpha_mix)
        client_repo, server_repo = mix(trained_c, coeff), mix(trained_s, coeff)
        global_c, global_s = master(trained_c), master(trained_s)
        history = tuple(state.history[i] + (results[i].hist,) for i in range(proto.n))
    else:
        split = algo == "sfl"
        results = _map_branches(lambda i: _shared_branch(exp, state, r, i, main_clients[i], split),
                                proto.n, pool)
        global_c = ParamVector(mean_vector(res.wc.values for res in results), state.client_repo[0].spec_hash)
        global_s = ParamVector(mean_vector(res.ws.values for res in results), state.server_repo[0].spec_hash)
        client_repo = PortionRepository((global_c,), "client")
        server_repo = PortionRepository((global_s,), "server")
        history = state.history

    fgn = record_fgn(r, [res.grad_sq for res in results], proto.eta, [res.server_grad_sq for res in results])
    proportion = state.proportion
    if algo == "korea" and state.fgn:
        proportion = update_proportion(proportion, state.fgn[-1], fgn, proto.p_schedule)

    ev = evaluate(SplitModel(global_c, global_s, exp.spec), exp.test)
    messages = tuple(m for res in results for m in res.messages)
    metrics = RoundMetrics(
        round=r + 1,
        accuracy=ev.accuracy,
        mean_loss=ev.mean_loss,
        per_class_recall=ev.per_class_recall,
        fgn_magnitude=fgn.magnitude,
        server_fgn_magnitude=fgn.server_magnitude,
        p_r=state.proportion.p,
        messages=messages,
        plan=RoundPlan(r, main_clients, tuple(res.assistants for res in results)),
        main_rows_uploaded=sum(res.main_uploaded for res in results),
        main_rows_consumed=sum(res.main_consumed for res in results),
        replay_rows_uploaded=sum(res.replay_uploaded for res in results),
        replay_rows_consumed=sum(res.replay_consumed for res in results),
    )
    new_state = TrainerState(client_repo, server_repo, history, proportion, state.fgn + (fgn,), r + 1)
    return new_state, metrics


def global_model(state: TrainerState, spec: NetworkSpec) -> SplitModel:
    return SplitModel(master(state.client_repo), master(state.server_repo), spec)


def initial_metrics(state: TrainerState, exp: Experiment) -> RoundMetrics:
    # every branch is a copy of the initial model; averaging the copies is not bit-exact
    ev = evaluate(exp.init, exp.test)
    return RoundMetrics(0, ev.accuracy, ev.mean_loss, ev.per_class_recall, p_r=state.proportion.p)


@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    ledger: CommLedger
    state: TrainerState
    exp: Experiment


def train(config: Config, workers: int | None = None, on_round=None) -> RunResult:
    """Run all ``R`` rounds; ``on_round(state, exp)`` is called after each one."""
    exp = build_experiment(config)
    state = initial_state(exp)
    ledger = CommLedger(config.protocol.bytes_per_element)
    metrics = [initial_metrics(state, exp)]
    workers = config.protocol.workers if workers is None else workers
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for _ in range(config.protocol.R):
            state, m = run_round(state, exp, pool)
            for msg in m.messages:
                ledger.record(msg)
            metrics.append(m)
            if on_round is not None:
                on_round(state, exp)
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(metrics, ledger, state, exp)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_rows(result: RunResult) -> list[dict]:
    rows = []
    for m in result.metrics:
        per = result.ledger.round_bytes(m.round - 1) if m.round > 0 else dict.fromkeys(CHANNELS, 0)
        row = {"round": m.round, "accuracy": m.accuracy, "mean_loss": m.mean_loss,
               "fgn_magnitude": m.fgn_magnitude, "p_r": m.p_r}
        for col, chans in COLUMN_CHANNELS.items():
            row[col] = sum(per[c] for c in chans)
        row["bytes_total"] = sum(per.values())
        rows.append(row)
    return rows


def metrics_csv(result: RunResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in metrics_rows(result):
        writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def _nan_to_none(values) -> list:
    return [None if math.isnan(v) else float(v) for v in values]


def summary(result: RunResult) -> dict:
    ms = result.metrics
    best = max(ms, key=lambda m: (m.accuracy, -m.round))
    spec = result.exp.spec
    return {
        "algorithm": result.exp.proto.algorithm,
        "rounds": len(ms) - 1,
        "final_accuracy": ms[-1].accuracy,
        "final_mean_loss": ms[-1].mean_loss,
        "final_per_class_recall": _nan_to_none(ms[-1].per_class_recall),
        "best_accuracy": best.accuracy,
        "best_round": best.round,
        "bytes_per_channel": result.ledger.totals(),
        "bytes_total": result.ledger.total_bytes,
        "spec_hash": spec.spec_hash,
        "client_params": spec.param_count("client"),
        "server_params": spec.param_count("server"),
    }


def run_experiment(config: Config, workers: int | None = None) -> Path:
    """Train and write ``config.yaml``, ``metrics.csv``, ``summary.json`` and checkpoints.

    Returns the run directory (``config.output.dir``).
    """
    out = Path(config.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(config))

    interval = config.output.save_interval

    def checkpoint(state, exp):
        if interval and state.round % interval == 0:
            save_checkpoint(out / "checkpoints" / f"round_{state.round:05d}", state.client_repo,
                            state.server_repo, state.round, exp.spec.spec_hash)

    result = train(config, workers, checkpoint)
    state, exp = result.state, result.exp
    g = global_model(state, exp.spec)
    save_checkpoint(out / "final_model", PortionRepository((g.client_portion,), "client"),
                    PortionRepository((g.server_portion,), "server"), state.round, exp.spec.spec_hash)
    (out / "metrics.csv").write_text(metrics_csv(result))
    (out / "summary.json").write_text(json.dumps(summary(result), indent=2) + "\n")
    return out


def run_baseline_fedavg(config: Config, workers: int | None = None) -> Path:
    return run_experiment(config.model_copy(update={"protocol": config.protocol.model_copy(
        update={"algorithm": "fedavg"})}), workers)


def run_baseline_sfl(config: Config, workers: int | None = None) -> Path:
    return run_experiment(config.model_copy(update={"protocol": config.protocol.model_copy(
        update={"algorithm": "sfl"})}), workers)
