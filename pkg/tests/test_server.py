import inspect
import json

import numpy as np
import pytest
import torch

from fedkf.errors import NonFiniteLossError, ProtocolError, ValidationError
from fedkf.models import ModelWeights, init_classifier
from fedkf.server import (
    RECORD_KEYS,
    SelectionPolicy,
    ServerState,
    aggregate_aca,
    aggregate_oca,
    begin_round,
    finish_round,
    read_records,
    run_training,
    select_active,
    update_cache,
)

from conftest import tiny_config
from helpers import scalar_weights, vector_weights


def _state(k=5, seed=0):
    (w0,) = scalar_weights(0.0)
    return ServerState.initial(w0, [1] * k, seed)


def test_full_participation_selects_everyone():
    assert select_active(_state(7), SelectionPolicy(1.0, 7)) == tuple(range(7))


def test_selection_count_for_twenty_clients():
    st = _state(20)
    for t in range(1, 30):
        active = select_active(st, SelectionPolicy(0.2, 20), t)
        assert len(active) == 4 == len(set(active))


def test_selection_is_deterministic_per_round():
    st = _state(20, seed=4)
    p = SelectionPolicy(0.2, 20)
    assert select_active(st, p, 3) == select_active(st, p, 3)
    assert len({select_active(st, p, t) for t in range(1, 20)}) > 1


@pytest.mark.parametrize("tau,k", [(1.5, 4), (0.0, 4), (0.5, 0)])
def test_selection_policy_validation(tau, k):
    with pytest.raises(ValidationError):
        SelectionPolicy(tau, k)


def test_initial_slots_hold_the_initial_model():
    (w0,) = scalar_weights(3.0)
    st = ServerState.initial(w0, [2, 3, 4], seed=0)
    assert all(s.equal(w0) for s in st.cache) and st.oca.equal(w0) and st.aca.equal(w0) and st.round == 0


def test_inactive_slots_keep_their_value():
    st = begin_round(_state(4), (1, 3))
    new = finish_round(st, dict(zip((1, 3), scalar_weights(5.0, 7.0))))
    assert new.cache[0].equal(st.cache[0]) and new.cache[2].equal(st.cache[2])
    assert float(new.cache[3].entries["w"]) == 7.0


def test_inactive_client_cannot_upload():
    st = begin_round(_state(4), (1,))
    with pytest.raises(ProtocolError):
        update_cache(st, 2, scalar_weights(1.0)[0])


def test_upload_with_other_architecture_is_rejected():
    st = begin_round(_state(2), (0,))
    with pytest.raises(ProtocolError):
        update_cache(st, 0, ModelWeights("other", {"v": torch.zeros(2)}))


def test_oca_hand_example():
    # (1 * 2 + 3 * 6) / 4
    out = aggregate_oca(scalar_weights(2.0, 6.0), [1, 3])
    assert float(out.entries["w"]) == pytest.approx(5.0)


def test_oca_matches_loop_oracle():
    rng = np.random.default_rng(0)
    ws = vector_weights(rng, 5, 50)
    sizes = rng.integers(1, 100, 5)
    expected = np.zeros(50)
    for w, n in zip(ws, sizes):
        expected += n * w.entries["w"].numpy()
    expected /= sizes.sum()
    assert np.abs(aggregate_oca(ws, sizes).entries["w"].numpy() - expected).max() < 1e-6


def test_aca_single_upload_and_equal_sizes():
    (w,) = scalar_weights(4.25)
    assert aggregate_aca([w], [17]).equal(w)
    out = aggregate_aca(scalar_weights(1.0, 2.0, 6.0), [5, 5, 5])
    assert float(out.entries["w"]) == pytest.approx(3.0)


def test_aca_equals_oca_when_everyone_uploads():
    rng = np.random.default_rng(1)
    (w0,) = scalar_weights(0.0)
    st = ServerState.initial(w0, [3, 1, 4, 1, 5], 0)
    st = begin_round(st, tuple(range(5)))
    st = finish_round(st, dict(enumerate(scalar_weights(*rng.normal(size=5)))))
    assert st.aca.max_abs_diff(st.oca) < 1e-12


def test_server_api_takes_no_samples():
    # clients can only hand over weights (and sizes registered at setup)
    for fn in (update_cache, finish_round, aggregate_oca, aggregate_aca):
        params = set(inspect.signature(fn).parameters)
        assert not params & {"x", "y", "features", "labels", "data", "samples", "shard", "label_counts"}


# -- round loop ---------------------------------------------------------------


def test_zero_rounds_returns_initial_model():
    cfg = tiny_config(rounds=0)
    final, records = run_training(cfg)
    from fedkf.experiment import build_shards

    shard = build_shards(cfg)[0]
    w0 = init_classifier(cfg.classifier_arch(shard.train_x.shape[1:], len(shard.label_counts)), 0)
    assert final.equal(w0) and records == []


def test_records_schema_and_file(tmp_path):
    cfg = tiny_config(rounds=3)
    _, records = run_training(cfg, run_dir=tmp_path)
    assert [r.round for r in records] == [1, 2, 3]
    lines = (tmp_path / "records.jsonl").read_text().splitlines()
    assert len(lines) == 3
    for line in lines:
        d = json.loads(line)
        assert set(d) == RECORD_KEYS
        assert 0 <= d["wlp"] <= d["amp"] <= 1 and d["fm"] >= 0
    assert [r.amp for r in read_records(tmp_path / "records.jsonl")] == [r.amp for r in records]


def test_eval_every_skips_rounds():
    _, records = run_training(tiny_config(rounds=5, eval_every=2))
    assert [r.round for r in records] == [2, 4, 5]


def test_first_round_broadcasts_initial_model(monkeypatch):
    seen = []
    from fedkf import client

    real = client.client_update

    def spy(k, w_t, w_s, shard, hp, seed, debug_dir=None):
        seen.append((w_t, w_s))
        return real(k, w_t, w_s, shard, hp, seed)

    monkeypatch.setattr(client, "client_update", spy)
    run_training(tiny_config(rounds=1))
    assert seen and all(t.equal(s) for t, s in seen)


def test_failure_policy_drop_and_abort(monkeypatch):
    from fedkf import client

    real = client.client_update

    def flaky(k, *args, **kw):
        if k == 1:
            raise NonFiniteLossError("boom")
        return real(k, *args, **kw)

    monkeypatch.setattr(client, "client_update", flaky)
    cfg = tiny_config(rounds=2, tau=1.0)
    with pytest.raises(NonFiniteLossError):
        run_training(cfg)
    _, records = run_training(cfg.replace(failure_policy="drop"))
    assert len(records) == 2


def test_resume_continues_identically(tmp_path):
    cfg = tiny_config(rounds=4, checkpoint_every=1)
    _, full = run_training(cfg, run_dir=tmp_path / "full")
    run_training(cfg.replace(rounds=2), run_dir=tmp_path / "part")
    _, resumed = run_training(cfg, run_dir=tmp_path / "part", resume=True)
    assert [r.round for r in resumed] == [1, 2, 3, 4]
    for a, b in zip(full, resumed):
        assert a.per_client_acc == b.per_client_acc
        assert a.mean_loss_s == pytest.approx(b.mean_loss_s, abs=1e-9)
    assert len((tmp_path / "part" / "records.jsonl").read_text().splitlines()) == 4


def test_checkpoints_are_written(tmp_path):
    run_training(tiny_config(rounds=3, checkpoint_every=2), run_dir=tmp_path)
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == ["round_0002", "round_0003", "state"]


def test_final_model_is_cache_aggregate():
    cfg = tiny_config(rounds=2)
    final, _ = run_training(cfg)
    assert final.is_finite()
    no_t1, _ = run_training(cfg.with_algorithm("fedkf", use_t1=False))
    assert not final.equal(no_t1)
