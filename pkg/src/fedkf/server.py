"""Server round loop with per-client cache slots.

The server keeps one cache slot per client holding that client's most recent
upload (initially the starting model). After each round it forms two
aggregates:

* ``aca`` -- size-weighted mean of the uploads received this round;
* ``oca`` -- size-weighted mean of all ``K`` cache slots, active or not.

Functions that touch server state accept only model weights and the client
sizes registered at setup; shards never reach them.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FedKFError, ProtocolError, ValidationError
from .models import ModelWeights, load_checkpoint, save_checkpoint, weighted_average

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SelectionPolicy:
    tau: float
    num_clients: int

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValidationError(f"tau must lie in (0, 1], got {self.tau}")
        if self.num_clients < 1:
            raise ValidationError("num_clients must be positive")
        if self.m > self.num_clients:
            raise ValidationError(f"cannot select {self.m} of {self.num_clients} clients")

    @property
    def m(self) -> int:
        return max(1, int(math.floor(self.tau * self.num_clients + 0.5)))


@dataclass(frozen=True)
class ServerState:
    cache: tuple[ModelWeights, ...]
    oca: ModelWeights
    aca: ModelWeights
    sizes: np.ndarray
    seed: int
    round: int = 0
    active: tuple[int, ...] = ()

    @classmethod
    def initial(cls, w0: ModelWeights, sizes: Sequence[int], seed: int) -> "ServerState":
        sizes = np.asarray(sizes, dtype=np.int64)
        if sizes.ndim != 1 or len(sizes) == 0:
            raise ValidationError("sizes must be a non-empty vector")
        return cls(tuple(w0 for _ in sizes), w0, w0, sizes, int(seed))

    @property
    def num_clients(self) -> int:
        return len(self.cache)


def round_seed(seed: int, t: int, *extra: int) -> int:
    """A 32-bit seed derived from ``(seed, t, *extra)``, independent of call order."""
    return int(np.random.SeedSequence([int(seed), int(t), *map(int, extra)]).generate_state(1)[0])


def select_active(state: ServerState, policy: SelectionPolicy, t: int | None = None) -> tuple[int, ...]:
    """Uniformly sample ``m`` distinct clients for round ``t`` (default: the next round)."""
    if policy.num_clients != state.num_clients:
        raise ValidationError("policy and state disagree on the number of clients")
    t = state.round + 1 if t is None else t
    rng = np.random.default_rng(round_seed(state.seed, t, 0))
    return tuple(sorted(int(k) for k in rng.choice(state.num_clients, size=policy.m, replace=False)))


def begin_round(state: ServerState, active: Sequence[int]) -> ServerState:
    return dataclasses.replace(state, round=state.round + 1, active=tuple(active))


def update_cache(state: ServerState, k: int, w_k: ModelWeights) -> ServerState:
    """Replace cache slot ``k`` with an upload from an active client."""
    if k not in state.active:
        raise ProtocolError(f"client {k} is not active in round {state.round}")
    if not w_k.same_layout(state.cache[k]):
        raise ProtocolError(f"upload {w_k.arch_id} does not match slot architecture {state.cache[k].arch_id}")
    cache = list(state.cache)
    cache[k] = w_k
    return dataclasses.replace(state, cache=tuple(cache))


def aggregate_oca(cache: Sequence[ModelWeights], sizes: Sequence[int]) -> ModelWeights:
    sizes = np.asarray(sizes, dtype=np.float64)
    if len(cache) != len(sizes):
        raise ValidationError("one size per cache slot is required")
    if sizes.sum() <= 0:
        raise ValidationError("client sizes sum to zero")
    return weighted_average(list(cache), sizes)


def aggregate_aca(active_weights: Sequence[ModelWeights], active_sizes: Sequence[int]) -> ModelWeights:
    if len(active_weights) == 0:
        raise ValidationError("no active uploads to aggregate")
    return weighted_average(list(active_weights), active_sizes)


def finish_round(state: ServerState, uploads: dict[int, ModelWeights]) -> ServerState:
    """Write uploads into their slots and recompute both aggregates."""
    for k in sorted(uploads):
        state = update_cache(state, k, uploads[k])
    oca = aggregate_oca(state.cache, state.sizes)
    if uploads:
        ks = sorted(uploads)
        aca = aggregate_aca([uploads[k] for k in ks], state.sizes[ks])
    else:
        aca = state.aca
    return dataclasses.replace(state, oca=oca, aca=aca)


# --------------------------------------------------------------------------
# Round records


@dataclass
class RoundRecord:
    round: int
    amp: float
    fm: float
    wlp: float
    per_client_acc: list[float]
    active_clients: list[int]
    mean_loss_s: float | None
    mean_loss_g: float | None
    wall_seconds: float
    aca: dict | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        return cls(**d)


RECORD_KEYS = frozenset(f.name for f in dataclasses.fields(RoundRecord))


def read_records(path) -> list[RoundRecord]:
    path = Path(path)
    if not path.exists():
        return []
    return [RoundRecord.from_dict(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]


def _nan_to_none(x: float) -> float | None:
    return None if x is None or math.isnan(x) else float(x)


# --------------------------------------------------------------------------
# Training loop


@dataclass
class _Checkpointing:
    directory: Path | None
    every: int

    def due(self, t: int, last: int) -> bool:
        return self.directory is not None and self.every > 0 and (t % self.every == 0 or t == last)


def _save_state(directory: Path, state: ServerState, extras: dict[str, ModelWeights], buffer: list[ModelWeights]):
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    save_checkpoint(tmp / "oca", state.oca, state.round)
    save_checkpoint(tmp / "aca", state.aca, state.round)
    for k, w in enumerate(state.cache):
        save_checkpoint(tmp / f"slot_{k:04d}", w, state.round)
    for name, w in extras.items():
        save_checkpoint(tmp / name, w, state.round)
    for i, w in enumerate(buffer):
        save_checkpoint(tmp / f"buffer_{i:02d}", w, state.round)
    meta = {"round": state.round, "extras": sorted(extras), "buffer": len(buffer), "sizes": state.sizes.tolist(), "seed": state.seed}
    (tmp / "state.json").write_text(json.dumps(meta))
    if directory.exists():
        shutil.rmtree(directory)
    tmp.rename(directory)


def _load_state(directory: Path):
    meta = json.loads((directory / "state.json").read_text())
    k = len(meta["sizes"])
    cache = tuple(load_checkpoint(directory / f"slot_{i:04d}")[0] for i in range(k))
    state = ServerState(
        cache=cache,
        oca=load_checkpoint(directory / "oca")[0],
        aca=load_checkpoint(directory / "aca")[0],
        sizes=np.asarray(meta["sizes"], dtype=np.int64),
        seed=meta["seed"],
        round=meta["round"],
    )
    extras = {name: load_checkpoint(directory / name)[0] for name in meta["extras"]}
    buffer = [load_checkpoint(directory / f"buffer_{i:02d}")[0] for i in range(meta["buffer"])]
    return state, extras, buffer


def run_training(config, shards=None, seed: int | None = None, run_dir=None, resume: bool = False):
    """Train with the configured algorithm and return ``(final_model, records)``.

    The final model is the cache-slot aggregate when ``use_t1`` is set and the
    algorithm's ordinary global model otherwise. When ``run_dir`` is given,
    records are appended to ``run_dir/records.jsonl`` as they are produced and
    checkpoints go under ``run_dir/checkpoints``.
    """
    from . import baselines
    from .client import client_update
    from .experiment import build_shards
    from .metrics import evaluate_profile, summarize
    from .models import init_classifier

    seed = config.seeds[0] if seed is None else int(seed)
    if shards is None:
        shards = build_shards(config)
    if len(shards) != config.partition.num_clients:
        raise ValidationError(f"config expects {config.partition.num_clients} clients, got {len(shards)} shards")
    algo = config.algorithm
    p = algo.params
    arch = config.classifier_arch(shards[0].train_x.shape[1:], len(shards[0].label_counts))
    hp = config.client_hyperparams(arch)
    policy = SelectionPolicy(config.tau, len(shards))

    w0 = init_classifier(arch, seed)
    state = ServerState.initial(w0, [s.n_train for s in shards], seed)
    # Model broadcast to baseline clients (for FedKF: the teacher).
    extras = {"global": w0}
    buffer: list[ModelWeights] = [w0] if algo.name == "fedgkd" else []

    records: list[RoundRecord] = []
    records_path = None
    ckpt = _Checkpointing(None, config.checkpoint_every)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        records_path = run_dir / "records.jsonl"
        ckpt = _Checkpointing(run_dir / "checkpoints", config.checkpoint_every)
        latest = run_dir / "checkpoints" / "state"
        if resume and latest.exists():
            state, extras, buffer = _load_state(latest)
            records = [r for r in read_records(records_path) if r.round <= state.round]
            log.info("resuming seed %d from round %d", seed, state.round)
        elif records_path.exists():
            records_path.unlink()
        records_path.write_text("".join(r.to_json() + "\n" for r in records))

    def eval_model(st: ServerState) -> ModelWeights:
        return st.oca if algo.use_t1 else extras["global"]

    for t in range(state.round + 1, config.rounds + 1):
        started = time.perf_counter()
        active = select_active(state, policy, t)
        state = begin_round(state, active)
        broadcast = extras["global"]
        teacher = fedgkd = None
        if algo.name == "fedgkd":
            fedgkd = baselines.fedgkd_teacher(_buffer_obj(buffer, int(p["buffer_size"])), broadcast)
        uploads: dict[int, ModelWeights] = {}
        losses_s, losses_g, qffl_losses = [], [], {}
        for k in active:
            cseed = round_seed(seed, t, 1, k)
            try:
                if algo.name == "fedkf":
                    res = client_update(k, broadcast, state.aca, shards[k], hp, cseed)
                elif algo.name == "fedprox":
                    res = baselines.fedprox_client_update(k, broadcast, shards[k], hp, cseed, p["mu"])
                elif algo.name == "fedgkd":
                    res = baselines.fedgkd_client_update(k, broadcast, fedgkd, shards[k], hp, cseed, p["gamma"])
                else:
                    if algo.name == "qffl":
                        qffl_losses[k] = baselines.local_loss(broadcast, shards[k])
                    res = baselines.local_train(broadcast, shards[k], hp, cseed)
            except FedKFError:
                if config.failure_policy == "abort":
                    raise
                log.warning("round %d: dropping client %d after failure", t, k, exc_info=True)
                continue
            uploads[k] = res.weights
            losses_s.append(res.mean_loss_s)
            losses_g.append(res.mean_loss_g)

        state = finish_round(state, uploads)
        if not uploads:
            log.warning("round %d: no uploads; models unchanged", t)
        elif algo.name == "qffl":
            ks = sorted(uploads)
            extras["global"] = baselines.qffl_aggregate(
                broadcast, [uploads[k] for k in ks], [qffl_losses[k] for k in ks], p["q"], hp.lr, state.sizes[ks]
            )
        elif algo.use_t1:
            extras["global"] = state.oca
        else:
            extras["global"] = state.aca
        if algo.name == "fedgkd":
            buffer = (buffer + [extras["global"]])[-int(p["buffer_size"]) :]

        if t % config.eval_every == 0 or t == config.rounds:
            summary = summarize(evaluate_profile(eval_model(state), shards))
            aca_summary = None
            if config.log_aca:
                aca_summary = {k: v for k, v in summarize(evaluate_profile(state.aca, shards)).items()}
            rec = RoundRecord(
                round=t,
                amp=summary["amp"],
                fm=summary["fm"],
                wlp=summary["wlp"],
                per_client_acc=summary["per_client_acc"],
                active_clients=list(active),
                mean_loss_s=_nan_to_none(float(np.mean(losses_s))) if losses_s else None,
                mean_loss_g=_nan_to_none(float(np.nanmean(losses_g))) if any(not math.isnan(g) for g in losses_g) else None,
                wall_seconds=time.perf_counter() - started,
                aca=aca_summary,
            )
            records.append(rec)
            if records_path is not None:
                with records_path.open("a") as fh:
                    fh.write(rec.to_json() + "\n")
            log.info("seed %d round %d: AMP %.4f FM %.5f WLP %.4f", seed, t, rec.amp, rec.fm, rec.wlp)
        if ckpt.due(t, config.rounds):
            save_checkpoint(ckpt.directory / f"round_{t:04d}", eval_model(state), t)
            _save_state(ckpt.directory / "state", state, extras, buffer)

    return eval_model(state), records


def _buffer_obj(models: list[ModelWeights], size: int):
    from .baselines import GlobalModelBuffer

    buf = GlobalModelBuffer(size)
    for w in models:
        buf.push(w)
    return buf
