from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pfedsam import federation as fed
from pfedsam import numerics as nm
from pfedsam.data import default_client_specs, stack_samples
from pfedsam.errors import ConfigError, ProtocolError
from pfedsam.federation import (
    PRESETS,
    FedConfig,
    ServerState,
    client_global_update,
    client_personalized_update,
    make_clients,
    param_hash,
    run_experiment,
    run_round,
    server_aggregate,
    upload_names,
)
from pfedsam.losses import LossWeights, ce_loss
from pfedsam.optim import Adam
from pfedsam.rng import stream
from pfedsam.serialization import serialized_size


def start(preset, model_config, specs, cfg):
    clients, proto = make_clients(preset, model_config, specs, cfg.seed)
    names = upload_names(proto, not PRESETS[preset].personalize)
    return clients, proto, ServerState(0, proto.state(names))


# ---------------------------------------------------------------- aggregation


def test_aggregate_single_client_identity():
    payload = {"w": np.random.default_rng(0).normal(size=(3, 3)), "b": np.array(0.1)}
    out = server_aggregate([("only", 7, payload)])
    for k in payload:
        assert out[k].tobytes() == np.asarray(payload[k], dtype=float).tobytes()


def test_aggregate_equal_weights_mean():
    out = server_aggregate([("a", 5, {"x": np.array(1.0)}), ("b", 5, {"x": np.array(3.0)})])
    assert out["x"] == 2.0


def test_aggregate_weighted_hand_case():
    out = server_aggregate([("a", 1, {"x": np.array(0.0)}), ("b", 3, {"x": np.array(4.0)})])
    assert abs(float(out["x"]) - 3.0) <= 1e-12


@settings(max_examples=50)
@given(
    arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)),
    st.lists(st.integers(1, 50), min_size=4, max_size=4),
    st.permutations(range(4)),
)
def test_aggregate_convex_and_permutation_stable(values, sizes, perm):
    payloads = [(f"c{i}", sizes[i], {"p": values[i]}) for i in range(4)]
    out = server_aggregate(payloads)["p"]
    assert (out >= values.min(axis=0) - 1e-12).all() and (out <= values.max(axis=0) + 1e-12).all()
    shuffled = server_aggregate([payloads[i] for i in perm])["p"]
    assert np.abs(out - shuffled).max() <= 1e-12


def test_aggregate_errors():
    with pytest.raises(ProtocolError):
        server_aggregate([])
    with pytest.raises(ProtocolError):
        server_aggregate([("a", 1, {"x": 1.0}), ("a", 1, {"x": 2.0})])
    with pytest.raises(ProtocolError):
        server_aggregate([("a", 1, {"x": 1.0}), ("b", 1, {"y": 2.0})])
    with pytest.raises(ProtocolError):
        server_aggregate([("a", 1, {"x": np.zeros(2)}), ("b", 1, {"x": np.zeros(3)})])


# ---------------------------------------------------------------- client updates


def test_global_update_payload_is_global_shared(small_model_config, small_specs, fast_fed):
    # preset E has an L-MoE global model, so private names must be filtered out
    clients_e, _, server_e = start("E", small_model_config, small_specs[0][:2], fast_fed)
    payload, trace = client_global_update(clients_e[0], server_e.aggregated_global, fast_fed)
    part = clients_e[0].global_model.partition()
    assert set(payload) == part.global_shared
    assert not any(".lmoe." in n for n in payload)
    assert len(trace) > 0


def test_global_update_zero_lr_returns_incoming(small_model_config, small_specs, fast_fed):
    cfg = replace(fast_fed, learning_rate=0.0)
    clients, _, server = start("Ours", small_model_config, small_specs[0][:2], cfg)
    payload, _ = client_global_update(clients[0], server.aggregated_global, cfg)
    for k, v in server.aggregated_global.items():
        assert payload[k].tobytes() == v.tobytes()


def test_global_update_identical_clients_identical_payloads(small_model_config, small_specs, fast_fed):
    spec = small_specs[0][0]
    a, _, server = start("Ours", small_model_config, [spec], fast_fed)
    b, _, _ = start("Ours", small_model_config, [spec], fast_fed)
    pa, _ = client_global_update(a[0], server.aggregated_global, fast_fed)
    pb, _ = client_global_update(b[0], server.aggregated_global, fast_fed)
    assert param_hash(pa) == param_hash(pb)


def test_global_update_rejects_mismatched_map(small_model_config, small_specs, fast_fed):
    clients, _, server = start("Ours", small_model_config, small_specs[0][:2], fast_fed)
    bad = dict(server.aggregated_global)
    bad.pop(sorted(bad)[0])
    with pytest.raises(ProtocolError):
        client_global_update(clients[0], bad, fast_fed)
    with pytest.raises(ProtocolError):
        client_global_update(clients[0], {**server.aggregated_global, "block0.attn.q.lmoe.gate": np.zeros((4, 4))}, fast_fed)


def standalone_ce_trainer(model, train, cfg, client_id, round_index=0):
    images, masks = stack_samples(train)
    opt = Adam(model.trainable_params, cfg.learning_rate, (cfg.beta1, cfg.beta2))
    losses = []
    for epoch in range(cfg.local_epochs_personalized):
        order = stream(cfg.seed, "batches", "personalized", client_id, round_index, epoch).permutation(len(images))
        for i in range(0, len(images), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            model.zero_grad()
            logits, _ = model.forward_batch(images[idx])
            loss = ce_loss(logits, masks[idx])
            opt.step(nm.backward(loss))
            losses.append(loss.item())
    return losses


def test_personalized_update_without_aux_or_kd_is_ce_training(small_model_config, small_specs, fast_fed):
    cfg = replace(fast_fed, loss_weights=LossWeights(0.0, 0.0, 0.5))
    clients, _, server = start("Ours", small_model_config, small_specs[0][:2], cfg)
    client = clients[0]
    oracle_model = client.personalized_model.clone()
    trace = client_personalized_update(client, server.aggregated_global, cfg)
    oracle = standalone_ce_trainer(oracle_model, client.train, cfg, client.client_id)
    assert [row["total"] for row in trace] == oracle
    assert param_hash(client.personalized_model.state()) == param_hash(oracle_model.state())


def test_personalized_update_zero_lr_unchanged(small_model_config, small_specs, fast_fed):
    cfg = replace(fast_fed, learning_rate=0.0)
    clients, _, server = start("Ours", small_model_config, small_specs[0][:2], cfg)
    before = param_hash(clients[0].personalized_model.state())
    trace = client_personalized_update(clients[0], server.aggregated_global, cfg)
    assert trace and param_hash(clients[0].personalized_model.state()) == before


def test_one_epoch_one_batch_one_step(small_model_config, small_specs, fast_fed):
    clients, _, server = start("Ours", small_model_config, small_specs[0][:2], fast_fed)
    cfg = replace(fast_fed, batch_size=clients[0].n_train)
    assert len(client_personalized_update(clients[0], server.aggregated_global, cfg)) == 1


def test_teacher_params_immutable(small_model_config, small_specs, fast_fed):
    clients, _, server = start("Ours", small_model_config, small_specs[0][:2], fast_fed)
    teacher = server.aggregated_global
    before = param_hash(teacher)
    client_personalized_update(clients[0], teacher, fast_fed)
    assert param_hash(teacher) == before


def test_personalized_update_missing_teacher_keys(small_model_config, small_specs, fast_fed):
    clients, _, server = start("Ours", small_model_config, small_specs[0][:2], fast_fed)
    partial = dict(list(server.aggregated_global.items())[1:])
    with pytest.raises(ProtocolError):
        client_personalized_update(clients[0], partial, fast_fed)


# ---------------------------------------------------------------- rounds


def test_round_structure_and_purity(small_model_config, small_specs, fast_fed):
    clients, proto, server = start("Ours", small_model_config, small_specs[0], fast_fed)
    server, report = run_round(server, clients, fast_fed, "Ours")
    shared = clients[0].global_model.partition().global_shared
    assert set(server.aggregated_global) == shared
    for c in clients:
        for k, v in server.aggregated_global.items():
            assert c.global_model.trainable_params[k].data.tobytes() == v.tobytes()
    # private experts live only on the personalized models and differ per client
    private = sorted(clients[0].personalized_model.partition().local_private)
    states = [c.personalized_model.state(private) for c in clients]
    for i in range(len(states)):
        for j in range(i + 1, len(states)):
            assert param_hash(states[i]) != param_hash(states[j])
    for row in report.clients:
        assert set(row["payload_keys"]) == shared
        assert row["payload_bytes_up"] == serialized_size(server.aggregated_global)
    assert report.aggregation_weights == {c.client_id: c.n_train / sum(x.n_train for x in clients) for c in clients}


def test_teacher_is_round_start_snapshot(monkeypatch, small_model_config, small_specs, fast_fed):
    clients, _, server = start("Ours", small_model_config, small_specs[0][:2], fast_fed)
    seen = []
    real = fed.client_personalized_update

    def spy(client, teacher_params, cfg, round_index=0, distill=True):
        seen.append(param_hash(teacher_params))
        return real(client, teacher_params, cfg, round_index, distill)

    monkeypatch.setattr(fed, "client_personalized_update", spy)
    snapshot = param_hash(server.aggregated_global)
    run_round(server, clients, fast_fed, "Ours")
    assert seen == [snapshot, snapshot]


def test_round_deterministic(small_model_config, small_specs, fast_fed):
    reports = []
    for _ in range(2):
        clients, _, server = start("Ours", small_model_config, small_specs[0][:2], fast_fed)
        server, report = run_round(server, clients, fast_fed, "Ours")
        reports.append((report.to_dict(), param_hash(server.aggregated_global)))
    assert reports[0] == reports[1]


def test_serial_equals_threaded(small_model_config, small_specs, fast_fed):
    out = []
    for threads in (1, 4):
        exp = run_experiment("Ours", replace(fast_fed, rounds=2), small_model_config, small_specs[0], threads=threads)
        out.append(([r.to_dict() for r in exp.rounds], param_hash(exp.server.aggregated_global)))
    assert out[0] == out[1]


def test_payload_bytes_invariant_across_student_variant(small_model_config, small_specs, fast_fed):
    sizes = {}
    for preset in ("D", "Ours"):  # LoRA student vs L-MoE student, LoRA global
        exp = run_experiment(preset, fast_fed, small_model_config, small_specs[0][:2])
        sizes[preset] = [row["payload_bytes_up"] for rep in exp.rounds for row in rep.clients]
    assert sizes["D"] == sizes["Ours"]


@pytest.mark.parametrize("preset", ["C", "D", "E", "Ours"])
def test_personalizing_presets_never_upload_private(preset, small_model_config, small_specs, fast_fed):
    exp = run_experiment(preset, replace(fast_fed, rounds=2), small_model_config, small_specs[0][:2])
    for rep in exp.rounds:
        for row in rep.clients:
            assert not any(".lmoe." in k for k in row["payload_keys"])
    assert exp.base_hash_before == exp.base_hash_after


def test_fedavg_all_presets_upload_experts(small_model_config, small_specs, fast_fed):
    exp = run_experiment("B", fast_fed, small_model_config, small_specs[0][:2])
    assert any(".lmoe." in k for k in exp.rounds[0].clients[0]["payload_keys"])


def test_single_client_preset_a_is_centralized_training(small_model_config, small_specs, fast_fed):
    cfg = replace(fast_fed, rounds=2)
    spec = small_specs[0][0]
    clients, proto, server = start("A", small_model_config, [spec], cfg)
    for _ in range(cfg.rounds):
        server, _ = run_round(server, clients, cfg, "A")

    # centralized oracle: the same model trained on the same batches with no server in between
    oracle = proto.clone()
    images, masks = stack_samples(clients[0].train)
    for r in range(cfg.rounds):
        opt = Adam(oracle.trainable_params, cfg.learning_rate, (cfg.beta1, cfg.beta2))
        for epoch in range(cfg.local_epochs_global):
            order = stream(cfg.seed, "batches", "global", spec.client_id, r, epoch).permutation(len(images))
            for i in range(0, len(images), cfg.batch_size):
                idx = order[i : i + cfg.batch_size]
                oracle.zero_grad()
                opt.step(nm.backward(ce_loss(oracle.forward_batch(images[idx])[0], masks[idx])))
    assert param_hash(clients[0].global_model.state(oracle.trainable_params)) == param_hash(oracle.state(oracle.trainable_params))


def test_experiment_report_fields(small_model_config, small_specs, fast_fed):
    clients, unseen = small_specs
    exp = run_experiment("Ours", fast_fed, small_model_config, clients, unseen)
    assert [r.client_id for r in exp.results] == [c.client_id for c in clients]
    assert exp.unseen.model_kind == "global" and exp.unseen.n_samples == unseen.n_samples
    assert exp.payload_up_total == sum(exp.payload_up_by_client().values())
    assert 0 <= exp.mean_iou <= exp.mean_dice <= 1


def test_fedconfig_and_preset_validation():
    with pytest.raises(ConfigError):
        FedConfig(rounds=0)
    with pytest.raises(ConfigError):
        FedConfig(beta1=1.0)
    with pytest.raises(ConfigError):
        fed.get_preset("F")


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("PFSM_THREADS", "4")
    assert fed.thread_count() == 4
    monkeypatch.setenv("PFSM_THREADS", "0")
    assert fed.thread_count() == 1
    monkeypatch.setenv("PFSM_THREADS", "many")
    with pytest.raises(ConfigError):
        fed.thread_count()


def test_duplicate_client_ids_rejected(small_model_config, fast_fed):
    specs, _ = default_client_specs(10, 0)
    with pytest.raises(ConfigError):
        run_experiment("Ours", fast_fed, small_model_config, [specs[0], specs[0]])


def test_preset_table():
    assert {k: (p.student_variant, p.global_variant, p.personalize, p.distill) for k, p in PRESETS.items()} == {
        "A": (None, "lora", False, False),
        "B": (None, "lora_moe", False, False),
        "C": (None, "lora_moe", True, False),
        "D": ("lora", "lora", True, True),
        "E": ("lora_moe", "lora_moe", True, True),
        "Ours": ("lora_moe", "lora", True, True),
    }
