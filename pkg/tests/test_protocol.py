import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import brentq

from fedgems.attacks import AttackSpec, victims
from fedgems.data import SplitSpec, build_federated_data, generate_blobs
from fedgems.learning import OptimizerConfig, entropy, softmax
from fedgems.protocol import (
    ENSEMBLE,
    FALLBACK,
    SELF_DISTILL,
    SELF_TRAIN,
    ClientReport,
    DivergenceError,
    GlobalLogitPool,
    ProtocolConfig,
    ProtocolError,
    classify_reliability,
    client_select,
    client_train,
    compute_weights,
    dump_checkpoint,
    ensemble_target,
    entropy_weights,
    load_checkpoint,
    make_participants,
    route_sample,
    run_experiment,
    server_round,
)


def fed(K=3, spread=1.0, spc=40, C=3, seed=0, partition="iid"):
    ds = generate_blobs(C, 4, spc, spread, seed)
    return build_federated_data(ds, SplitSpec(0.5, seed=seed), K, partition, 0.5, seed)


def cfg(**kw):
    base = dict(rounds=3, seed=0, server_hidden_dim=8, client_hidden_dims=(0, 3),
                optimizer=OptimizerConfig(learning_rate=0.01))
    base.update(kw)
    return ProtocolConfig(**base)


def reports_from(rows, index=7):
    return [ClientReport(k, 1, np.array([index]), np.asarray([r], float)) for k, r in enumerate(rows)]


def test_reliability_definition():
    rs = reports_from([[0, 5, 0], [5, 0, 0], [0, 1, 0]])
    assert classify_reliability(rs, 1, 7) == ([0, 2], [1])
    assert classify_reliability(reports_from([[0, 1], [0, 2]]), 1, 7) == ([0, 1], [])


def test_reliability_tie_goes_to_lowest_class():
    assert classify_reliability(reports_from([[2, 2, 0]]), 0, 7) == ([0], [])


def test_missing_sample_is_a_protocol_error():
    with pytest.raises(ProtocolError):
        classify_reliability(reports_from([[1, 0]]), 0, 8)


def test_singleton_weight():
    assert compute_weights(reports_from([[3, 0, 0], [0, 3, 0]]), 0, 7) == {0: 1.0, 1: 0.0}


def _logits_with_entropy(h):
    # p = [a, (1-a)/2, (1-a)/2] with class 0 on top
    H = lambda a: -(a * np.log(a) + (1 - a) * np.log((1 - a) / 2))
    a = brentq(lambda a: H(a) - h, 0.34, 1 - 1e-12, xtol=1e-15)
    return np.log([a, (1 - a) / 2, (1 - a) / 2])


def test_two_client_entropy_weights():
    rows = [_logits_with_entropy(0.5), _logits_with_entropy(1.0)]
    assert entropy(softmax(rows[0])) == pytest.approx(0.5, abs=1e-12)
    w = compute_weights(reports_from(rows), 0, 7)
    assert [w[0], w[1]] == pytest.approx([0.7311, 0.2689], abs=1e-4)


def test_identical_clients_share_weight():
    w = compute_weights(reports_from([[2, 1, 0], [2, 1, 0]]), 0, 7)
    assert [w[0], w[1]] == [0.5, 0.5]


def test_zero_entropy_client_is_capped_not_overflowing():
    w = compute_weights(reports_from([[1e4, 0, 0], [2, 1, 0]]), 0, 7)
    assert np.isfinite(list(w.values())).all()
    assert w[0] == pytest.approx(1.0) and w[1] >= 0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 10_000))
def test_weight_simplex(K, C, seed):
    rng = np.random.default_rng(seed)
    logits = 3 * rng.standard_normal((K, 4, C))
    labels = rng.integers(0, C, 4)
    w, probs = entropy_weights(logits, labels)
    reliable = logits.argmax(axis=2) == labels
    assert np.all(w >= 0)
    assert np.all(w[~reliable] == 0)
    for b in range(4):
        if reliable[:, b].any():
            assert abs(w[:, b].sum() - 1) <= 1e-9
            hs = [entropy(probs[k, b]) for k in range(K) if reliable[k, b]]
            ws = [w[k, b] for k in range(K) if reliable[k, b]]
            order = np.argsort(hs)
            # lower entropy never gets less weight
            assert all(ws[order[i]] >= ws[order[i + 1]] - 1e-12 for i in range(len(hs) - 1))
        else:
            assert np.all(w[:, b] == 0)


def test_weights_strictly_decrease_with_entropy():
    rows = [_logits_with_entropy(h) for h in (0.3, 0.6, 0.9)]
    w = compute_weights(reports_from(rows), 0, 7)
    assert w[0] > w[1] > w[2] > 0


def test_route_sample_branches():
    pool = GlobalLogitPool(10, 3)
    pool.store([4], np.array([[3.0, 0, 0]]))
    assert route_sample([0, 5, 0], 1, pool, 4) == SELF_TRAIN
    assert route_sample([5, 0, 0], 1, pool, 4) == SELF_DISTILL
    assert route_sample([5, 0, 0], 1, pool, 5) == ENSEMBLE
    assert route_sample([5, 0, 0], 1, pool, 5, reliable_count=2) == ENSEMBLE
    assert route_sample([5, 0, 0], 1, pool, 5, reliable_count=0) == FALLBACK


def test_route_sample_ablation_fall_through():
    pool = GlobalLogitPool(10, 3)
    pool.store([4], np.array([[3.0, 0, 0]]))
    no_st = cfg(self_train_on=False)
    assert route_sample([0, 5, 0], 1, pool, 4, cfg=no_st) == SELF_DISTILL
    assert route_sample([0, 5, 0], 1, pool, 5, cfg=no_st) == ENSEMBLE
    no_sd = cfg(self_distill_on=False)
    assert route_sample([5, 0, 0], 1, pool, 4, cfg=no_sd) == ENSEMBLE
    no_ens = cfg(ensemble_distill_on=False)
    assert route_sample([5, 0, 0], 1, pool, 5, cfg=no_ens) == FALLBACK


def test_ensemble_target_is_order_independent():
    data = fed(K=4)
    c = cfg()
    _, clients = make_participants(c, data)
    idx = np.array([5, 1, 9])
    a, _ = client_select(clients, data.public_train, idx)
    b, _ = client_select(list(reversed(clients)), data.public_train, idx)
    assert [r.client_id for r in b] == [0, 1, 2, 3]
    y = data.public_train.y[np.sort(idx)]
    ta = ensemble_target(*entropy_weights(np.stack([r.logits for r in a]), y))
    tb = ensemble_target(*entropy_weights(np.stack([r.logits for r in b]), y))
    assert np.array_equal(ta, tb)


def test_client_select_empty_and_attack_diff():
    data = fed(K=5)
    _, clients = make_participants(cfg(), data)
    assert client_select(clients, data.public_train, []) == ([], [])
    idx = np.arange(10)
    honest, _ = client_select(clients, data.public_train, idx)
    spec = AttackSpec("PAF", seed=2)  # round 1 -> victim (1 + 2) % 5 = 3
    assert victims(spec, 1, 5) == [3]
    bad, who = client_select(clients, data.public_train, idx, spec, 1)
    assert who == [3]
    for k in range(5):
        same = np.array_equal(bad[k].logits, honest[k].logits)
        assert same == (k != 3)


def test_client_train_eps_one_is_supervised():
    data = fed()
    c = cfg(optimizer=OptimizerConfig(learning_rate=0.01, kd_weight=1.0), local_epochs=0)
    _, (a, *_) = make_participants(c, data)
    _, (b, *_) = make_participants(c, data)
    junk = np.random.default_rng(0).standard_normal((len(data.public_train), 3))
    client_train(a, junk, data.public_train, c, round_=2)
    # same batch order, plain CE on public labels
    rng = np.random.default_rng([c.seed, 4, 2, b.client_id])
    order = rng.permutation(len(data.public_train))
    for s in range(0, order.size, c.batch_size):
        bt = order[s : s + c.batch_size]
        b.step(data.public_train.X[bt], data.public_train.y[bt], c.optimizer)
    assert np.array_equal(a.model.params, b.model.params)


def test_kl_vanishes_when_teacher_matches_student():
    data = fed()
    _, (client, *_) = make_participants(cfg(), data)
    X, y = data.public_train.X[:8], data.public_train.y[:8]
    own = softmax(client.model.forward(X))
    eps = 0.75
    l_mix, g_mix, _ = client.model.loss_and_grad(X, y, np.full(8, eps), own)
    l_ce, g_ce, _ = client.model.loss_and_grad(X, y)
    assert l_mix == pytest.approx(eps * l_ce, abs=1e-12)
    assert g_mix == pytest.approx(eps * g_ce, abs=1e-12)


def test_client_train_deterministic_and_empty_shard(caplog):
    data = fed()
    c = cfg()
    logits = np.random.default_rng(1).standard_normal((len(data.public_train), 3))
    runs = []
    for _ in range(2):
        _, (cl, *_) = make_participants(c, data)
        client_train(cl, logits, data.public_train, c, 1)
        runs.append(cl.model.params)
    assert np.array_equal(*runs)
    cl.train = data.public_train.subset([])
    client_train(cl, None, data.public_train, c, 1)
    assert "empty private shard" in caplog.text
    with pytest.raises(ProtocolError):
        client_train(cl, logits[:3], data.public_train, c, 1)


def test_server_round_first_round_leans_on_clients():
    data = fed(K=4, spread=1.5, spc=100, C=5)
    c = cfg(optimizer=OptimizerConfig(learning_rate=0.001))
    server, clients = make_participants(c, data)
    for cl in clients:
        client_train(cl, None, data.public_train, dataclasses.replace(c, local_epochs=5), 1)
    pool = GlobalLogitPool(len(data.public_train), 5)
    res = server_round(server, data.public_train, pool, clients, c, 1)
    assert res.counts[ENSEMBLE] > res.counts[SELF_TRAIN]
    assert sum(res.counts.values()) == len(data.public_train)
    assert res.uploads.tolist() == [res.counts[ENSEMBLE] + res.counts[FALLBACK]] * 4


def test_converged_server_stops_asking_clients():
    data = fed(spread=0.05)
    res = run_experiment(cfg(rounds=12, optimizer=OptimizerConfig(learning_rate=0.05)), data)
    assert res.metrics[-1].n_ensemble == 0
    assert res.metrics[-1].uploaded_logits == 0


def test_eps_one_server_matches_standalone_bit_for_bit():
    data = fed()
    opt = OptimizerConfig(learning_rate=0.01, kd_weight=1.0)
    a = run_experiment(cfg(optimizer=opt), data)
    b = run_experiment(cfg(optimizer=opt, mode="standalone"), data)
    assert np.array_equal(a.server.model.params, b.server.model.params)


def test_round_invariants():
    data = fed(K=4, spread=1.5, spc=60, partition="dirichlet")
    c = cfg(rounds=4)
    gem = run_experiment(dataclasses.replace(c, mode="fedgem"), data)
    gems = run_experiment(c, data)
    N = len(data.public_train)
    for row in gems.metrics:
        assert row.n_selftrain + row.n_selfdistill + row.n_ensemble + row.n_fallback == N
    for row in gem.metrics:
        assert row.uploaded_logits == 4 * N
    pool = gems.pool
    idx = pool.indices()
    assert idx.size > 0
    assert np.array_equal(pool.logits[idx].argmax(axis=1), data.public_train.y[idx])
    assert gems.metrics[-1].kb_up_cum < gem.metrics[-1].kb_up_cum
    assert all(r.uploaded_logits <= 4 * N for r in gems.metrics)
    assert gems.metrics[-1].kb_down_cum == gem.metrics[-1].kb_down_cum


@pytest.mark.parametrize("flag, zeroed", [
    ("self_train_on", ("n_selftrain", "n_selfdistill")),
    ("self_distill_on", ("n_selfdistill",)),
    ("ensemble_distill_on", ("n_ensemble",)),
])
def test_ablation_zeroes_branch(flag, zeroed):
    data = fed(K=3, spread=1.5, spc=60)
    res = run_experiment(cfg(**{flag: False}), data)
    for col in zeroed:
        assert all(getattr(r, col) == 0 for r in res.metrics)


def test_config_requires_a_branch():
    with pytest.raises(ValueError):
        ProtocolConfig(self_train_on=False, self_distill_on=False, ensemble_distill_on=False)
    with pytest.raises(ValueError):
        ProtocolConfig(rounds=0)


def test_run_is_deterministic():
    data = fed(K=3, partition="dirichlet")
    c = cfg(attack=AttackSpec("OFOM"))
    a = run_experiment(c, data).metrics
    b = run_experiment(c, data).metrics
    assert a == b
    assert a[0].attack_kind == "OFOM"


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_divergence_is_reported():
    data = fed()
    c = cfg()
    server, clients = make_participants(c, data)
    server.model.params[:] = 1e308
    with pytest.raises(DivergenceError, match="round 1"):
        server_round(server, data.public_train, GlobalLogitPool(len(data.public_train), 3), clients, c, 1)


def test_checkpoint_round_trip(tmp_path):
    data = fed(K=3)
    res = run_experiment(cfg(rounds=2), data)
    path = tmp_path / "ck.bin"
    dump_checkpoint(path, 2, res.server, res.clients, res.pool, res.server_logits)
    back = load_checkpoint(path, data)
    assert back["round"] == 2
    assert np.array_equal(back["server"].model.params, res.server.model.params)
    assert back["server"].opt.t == res.server.opt.t
    assert np.array_equal(back["server"].opt.v, res.server.opt.v)
    for a, b in zip(back["clients"], res.clients):
        assert a.model.hidden_dim == b.model.hidden_dim
        assert np.array_equal(a.model.params, b.model.params)
        assert np.array_equal(a.opt.m, b.opt.m)
    assert np.array_equal(back["pool"].present, res.pool.present)
    assert np.array_equal(back["pool"].logits, res.pool.logits)
    assert np.array_equal(back["server_logits"], res.server_logits)
    raw = path.read_bytes()
    assert raw[:4] == b"FGCK" and int.from_bytes(raw[4:8], "little") == 1


def test_resume_from_checkpoint_matches_uninterrupted(tmp_path):
    data = fed(K=3)
    full = run_experiment(cfg(rounds=4), data)
    half = run_experiment(cfg(rounds=2), data)
    path = tmp_path / "ck.bin"
    dump_checkpoint(path, 2, half.server, half.clients, half.pool, half.server_logits)
    st_ = load_checkpoint(path, data)
    rest = run_experiment(cfg(rounds=4), data,
                          state=(st_["server"], st_["clients"], st_["pool"], st_["server_logits"]),
                          start_round=3)
    assert np.array_equal(rest.server.model.params, full.server.model.params)
    assert [r.server_acc for r in rest.metrics] == [r.server_acc for r in full.metrics[2:]]


def test_corrupt_checkpoint_rejected(tmp_path):
    data = fed(K=2)
    res = run_experiment(cfg(rounds=1), data)
    path = tmp_path / "ck.bin"
    dump_checkpoint(path, 1, res.server, res.clients, res.pool, res.server_logits)
    raw = bytearray(path.read_bytes())
    raw[40] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ProtocolError):
        load_checkpoint(path)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-20, 20)), st.integers(0, 3))
def test_poisoned_wrong_report_gets_zero_weight(honest, label):
    poisoned = honest.copy()
    poisoned[0] = 0.0
    poisoned[0, (label + 1) % 4] = 100.0
    w = compute_weights(reports_from(poisoned), label, 7)
    assert w[0] == 0.0
