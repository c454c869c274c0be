from __future__ import annotations

import numpy as np
import pytest

from fedmim.data import AugmentPolicy, LabelSplit, PartitionSpec, dirichlet_partition, subsample_labels
from fedmim.errors import ContractViolation, ProtocolError
from fedmim.evaluate import evaluate_params
from fedmim.fed import (
    METRIC_COLUMNS,
    AccessAudit,
    ClientState,
    ClientUpdate,
    FedConfig,
    FederatedData,
    LocalData,
    RoundState,
    Task,
    aggregate,
    client_update_finetune,
    client_update_pretrain,
    comm_cost,
    fedprox_penalty,
    local_train,
    run_stage,
    select_clients,
    semifl_consistency_loss,
    train_centralized,
)
from fedmim.model import ModelParams, init_finetune_params, init_pretrain_params, patchify
from fedmim.numerics import Tensor, backward
from fedmim.tokenizer import fit_codebook


def _random_params(rng, shapes):
    return ModelParams.from_arrays({name: rng.standard_normal(shape) for name, shape in shapes.items()})


def _distance(a: ModelParams, b: ModelParams) -> float:
    return float(np.sqrt(sum(np.sum((a[n].data - b[n].data) ** 2) for n in a)))


def _finetune_cfg(**kw) -> FedConfig:
    base = dict(num_clients=2, rounds=2, batch_size=4, stage="finetune", method="supervised", lr=0.01, seed=0)
    base.update(kw)
    return FedConfig(**base)


def _pretrain_cfg(**kw) -> FedConfig:
    base = dict(num_clients=2, rounds=2, batch_size=4, stage="pretrain", method="mae", lr=0.01, seed=0)
    base.update(kw)
    return FedConfig(**base)


@pytest.fixture
def mae_task(geometry, dims):
    return Task("mae", geometry, dims, mask_ratio=0.5, augment=AugmentPolicy(scale=(1.0, 1.25), flip_prob=0.5))


@pytest.fixture
def sup_task(geometry, dims):
    return Task("supervised", geometry, dims, augment=AugmentPolicy(flip_prob=0.5), consistency_augment=AugmentPolicy(flip_prob=0.5))


# ----------------------------------------------------------------------
# Agregação
# ----------------------------------------------------------------------
def test_aggregate_matches_weighted_mean():
    rng = np.random.default_rng(0)
    shapes = {"a": (3,), "b": (2, 4)}
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        updates = [
            ClientUpdate(int(k), _random_params(rng, shapes), int(rng.integers(1, 100)))
            for k in rng.permutation(n)
        ]
        merged = aggregate(updates)
        total = sum(u.num_samples for u in updates)
        for name in shapes:
            expected = sum(u.num_samples * u.params[name].data for u in updates) / total
            np.testing.assert_allclose(merged[name].data, expected, rtol=0, atol=1e-12)
        shuffled = [updates[i] for i in rng.permutation(n)]
        again = aggregate(shuffled)
        assert all(np.array_equal(merged[nm].data, again[nm].data) for nm in shapes)


def test_aggregate_single_client_is_identity():
    rng = np.random.default_rng(1)
    p = _random_params(rng, {"w": (5, 5)})
    merged = aggregate([ClientUpdate(3, p, 17)])
    assert np.array_equal(merged["w"].data, p["w"].data)


def test_aggregate_identical_params():
    rng = np.random.default_rng(2)
    p = _random_params(rng, {"w": (4,)})
    merged = aggregate([ClientUpdate(k, p.copy(), n) for k, n in enumerate([3, 9, 1])])
    np.testing.assert_allclose(merged["w"].data, p["w"].data, rtol=1e-14, atol=1e-15)


def test_aggregate_errors():
    rng = np.random.default_rng(3)
    with pytest.raises(ProtocolError):
        aggregate([])
    with pytest.raises(ProtocolError):
        aggregate([ClientUpdate(0, _random_params(rng, {"w": (2,)}), 0)])
    with pytest.raises(ContractViolation):
        aggregate([
            ClientUpdate(0, _random_params(rng, {"w": (2,)}), 1),
            ClientUpdate(1, _random_params(rng, {"w": (3,)}), 1),
        ])


def test_stage_weighting(tiny_data, geometry, dims, mae_task, sup_task):
    ds = tiny_data.train
    cs = ClientState(
        client_id=0,
        labeled=LocalData(ds, np.arange(3), 0),
        unlabeled=LocalData(ds, np.arange(3, 8), 0),
        optimizer=_pretrain_cfg().new_optimizer(),
    )
    pre = client_update_pretrain(cs, init_pretrain_params("mae", geometry, dims, 0), mae_task, _pretrain_cfg(num_clients=1))
    assert pre.num_samples == 8
    cs.optimizer = _finetune_cfg().new_optimizer()
    ft = client_update_finetune(cs, init_finetune_params(geometry, dims, 0), sup_task, _finetune_cfg(num_clients=1))
    assert ft.num_samples == 3
    with pytest.raises(ContractViolation):
        client_update_finetune(cs, init_finetune_params(geometry, dims, 0), sup_task, _pretrain_cfg(num_clients=1))


def test_overlapping_local_splits_rejected(tiny_data):
    ds = tiny_data.train
    with pytest.raises(ContractViolation):
        ClientState(0, LocalData(ds, [0, 1], 0), LocalData(ds, [1, 2], 0), _finetune_cfg().new_optimizer())


# ----------------------------------------------------------------------
# Seleção e configuração
# ----------------------------------------------------------------------
def test_select_all_clients_when_k_equals_n():
    assert select_clients(4, 4, np.random.default_rng(0)) == [0, 1, 2, 3]


def test_select_subset_is_sorted_and_seeded():
    a = select_clients(10, 3, np.random.default_rng(5))
    b = select_clients(10, 3, np.random.default_rng(5))
    assert a == b == sorted(set(a)) and len(a) == 3
    with pytest.raises(ContractViolation):
        select_clients(3, 4, np.random.default_rng(0))


def test_select_clients_marginal_frequency():
    rng = np.random.default_rng(0)
    counts = np.zeros(5)
    for _ in range(10000):
        counts[select_clients(5, 3, rng)] += 1
    np.testing.assert_allclose(counts / 10000, 3 / 5, atol=3 * np.sqrt(0.6 * 0.4 / 10000))


def test_fed_config_validation():
    assert FedConfig(num_clients=5, rounds=1).clients_per_round == 5
    with pytest.raises(ContractViolation):
        FedConfig(num_clients=2, rounds=1, clients_per_round=3)
    with pytest.raises(ContractViolation):
        FedConfig(num_clients=2, rounds=1, stage="finetune", method="mae")
    with pytest.raises(ContractViolation):
        FedConfig(num_clients=2, rounds=1, semifl=True)
    s = FedConfig(num_clients=1, rounds=3, local_epochs=2, warmup_rounds=1, lr=0.1).schedule
    assert (s.warmup, s.total, s.base_lr) == (2, 6, 0.1)


def test_round_state_validation(geometry, dims):
    p = init_finetune_params(geometry, dims, 0)
    with pytest.raises(ProtocolError):
        RoundState(1, "finetune", p, selected=[0], received=[(1, 5)])
    with pytest.raises(ProtocolError):
        RoundState(1, "finetune", p, selected=[0], received=[(0, 0)])


def test_comm_cost(geometry, dims):
    p = init_finetune_params(geometry, dims, 0)
    assert comm_cost(p, 7) == 7 * p.num_parameters()


# ----------------------------------------------------------------------
# FedProx
# ----------------------------------------------------------------------
def test_fedprox_penalty_value_and_gradient():
    local = ModelParams.from_arrays({"a": np.array([1.0, 2.0])})
    anchor = ModelParams.from_arrays({"a": np.array([0.0, 0.0])})
    value, grads = fedprox_penalty(local, anchor, 0.1)
    assert value == pytest.approx(0.25)
    np.testing.assert_allclose(grads["a"], [0.1, 0.2])
    assert fedprox_penalty(local, anchor, 0.0)[0] == 0.0
    with pytest.raises(ContractViolation):
        fedprox_penalty(local, anchor, -1.0)


def _local_run(tiny_data, geometry, dims, sup_task, mu, anchor=True, local_epochs=5):
    ds = tiny_data.train
    cfg = _finetune_cfg(num_clients=1, rounds=1, local_epochs=local_epochs, batch_size=len(ds), mu=mu)
    w_t = init_finetune_params(geometry, dims, 0, dtype=np.float64)
    params = w_t.copy()
    local_train(params, cfg.new_optimizer(), LocalData(ds, np.arange(len(ds)), 0), sup_task, cfg, 0, 0,
                anchor=w_t if anchor else None)
    return w_t, params


def test_fedprox_zero_mu_matches_plain_update(tiny_data, geometry, dims, sup_task):
    _, plain = _local_run(tiny_data, geometry, dims, sup_task, 0.0, anchor=False)
    _, prox = _local_run(tiny_data, geometry, dims, sup_task, 0.0, anchor=True)
    assert all(np.array_equal(plain[n].data, prox[n].data) for n in plain)


def test_fedprox_pulls_update_towards_global(tiny_data, geometry, dims, sup_task):
    w_t, free = _local_run(tiny_data, geometry, dims, sup_task, 0.0)
    _, pulled = _local_run(tiny_data, geometry, dims, sup_task, 1000.0)
    assert _distance(pulled, w_t) < _distance(free, w_t)


def test_fedprox_distance_strictly_decreases_with_mu(tiny_data, geometry, dims, sup_task):
    distances = []
    for mu in (0.0, 0.001, 0.1, 1.0):
        w_t, local = _local_run(tiny_data, geometry, dims, sup_task, mu)
        distances.append(_distance(local, w_t))
    assert all(a > b for a, b in zip(distances, distances[1:])), distances


def test_fedprox_first_step_does_not_depend_on_mu(tiny_data, geometry, dims, sup_task):
    # no primeiro passo w == w_t, então o termo proximal tem gradiente nulo
    distances = []
    for mu in (0.0, 0.001, 0.1, 1.0):
        w_t, local = _local_run(tiny_data, geometry, dims, sup_task, mu, local_epochs=1)
        distances.append(_distance(local, w_t))
    np.testing.assert_allclose(distances, distances[0], rtol=1e-12)


# ----------------------------------------------------------------------
# Rodadas completas
# ----------------------------------------------------------------------
@pytest.mark.parametrize("stage", ["pretrain", "finetune"])
def test_one_client_run_matches_centralized_trainer(tiny_data, geometry, dims, mae_task, sup_task, stage):
    ds = tiny_data.train
    part = dirichlet_partition(ds, PartitionSpec(1, 0.5, seed=0))
    data = FederatedData(ds, part)
    if stage == "pretrain":
        cfg, task = _pretrain_cfg(num_clients=1, rounds=5, local_epochs=2, batch_size=3, warmup_rounds=1), mae_task
        init = init_pretrain_params("mae", geometry, dims, 0, dtype=np.float64)
    else:
        cfg, task = _finetune_cfg(num_clients=1, rounds=5, local_epochs=2, batch_size=3, warmup_rounds=1), sup_task
        init = init_finetune_params(geometry, dims, 0, dtype=np.float64)

    rounds = []
    fed = run_stage(cfg, task, data, init, on_round=lambda state, w: rounds.append(w.copy()))
    central = train_centralized(cfg, task, data, init)
    assert len(rounds) == 5
    for name in init:
        np.testing.assert_allclose(fed.params[name].data, central.params[name].data, rtol=0, atol=1e-12)
    np.testing.assert_allclose(fed.metrics["loss"].to_numpy(), central.metrics["loss"].to_numpy(), rtol=0, atol=1e-12)


def test_run_stage_is_deterministic_across_thread_counts(tiny_data, tiny_partition, geometry, dims, mae_task):
    data = FederatedData(tiny_data.train, tiny_partition)
    init = init_pretrain_params("mae", geometry, dims, 0, dtype=np.float64)
    one = run_stage(_pretrain_cfg(threads=1), mae_task, data, init)
    many = run_stage(_pretrain_cfg(threads=3), mae_task, data, init)
    assert all(np.array_equal(one.params[n].data, many.params[n].data) for n in init)
    assert one.metrics.equals(many.metrics)
    assert list(one.metrics.columns) == METRIC_COLUMNS


def test_clients_only_touch_their_own_data(tiny_data, tiny_partition, geometry, dims, mae_task):
    audit = AccessAudit()
    data = FederatedData(tiny_data.train, tiny_partition)
    init = init_pretrain_params("mae", geometry, dims, 0, dtype=np.float64)
    run_stage(_pretrain_cfg(rounds=1), mae_task, data, init, audit=audit)
    for k, own in enumerate(tiny_partition.client_indices):
        assert np.array_equal(audit.touched(k), own)


def test_beit_stage_runs(tiny_data, tiny_partition, geometry, dims):
    public = patchify(tiny_data.public.images, geometry).reshape(-1, geometry.patch_dim)
    cb = fit_codebook(public, dims.codebook_size, iters=10, seed=0, restarts=1)
    task = Task("beit", geometry, dims, mask_ratio=0.5, min_block=1, codebook=cb)
    init = init_pretrain_params("beit", geometry, dims, 0, dtype=np.float64)
    res = run_stage(_pretrain_cfg(method="beit"), task, FederatedData(tiny_data.train, tiny_partition), init)
    assert res.params.is_finite()
    assert res.metrics["client_id"].notna().all()
    with pytest.raises(ContractViolation):
        Task("beit", geometry, dims)


def test_zero_rounds_returns_init(tiny_data, tiny_partition, geometry, dims, sup_task):
    init = init_finetune_params(geometry, dims, 0)
    res = run_stage(_finetune_cfg(rounds=0), sup_task, FederatedData(tiny_data.train, tiny_partition), init)
    assert res.params is init
    assert res.metrics.empty


def test_round_with_every_client_excluded(tiny_data, tiny_partition, geometry, dims, sup_task):
    empty = np.empty(0, dtype=np.int64)
    splits = [LabelSplit(empty, ix) for ix in tiny_partition.client_indices]
    data = FederatedData(tiny_data.train, tiny_partition, splits)
    with pytest.raises(ProtocolError, match="Rodada 1"):
        run_stage(_finetune_cfg(), sup_task, data, init_finetune_params(geometry, dims, 0))


def test_evaluator_rows(tiny_data, tiny_partition, geometry, dims, sup_task):
    data = FederatedData(tiny_data.train, tiny_partition)
    res = run_stage(
        _finetune_cfg(rounds=2, eval_interval=1),
        sup_task,
        data,
        init_finetune_params(geometry, dims, 0, dtype=np.float64),
        evaluator=lambda p: evaluate_params(p, tiny_data.test, geometry, dims),
    )
    evals = res.metrics[res.metrics["client_id"].isna()]
    assert evals["round"].tolist() == [1, 2]
    assert evals["accuracy"].between(0.0, 1.0).all()


# ----------------------------------------------------------------------
# Semi-FL
# ----------------------------------------------------------------------
def test_semifl_extra_client_joins_second_half(tiny_data, tiny_partition, geometry, dims, sup_task):
    splits = subsample_labels(tiny_partition, tiny_data.train, 0.5, seed=0)
    unlabeled = sum(s.unlabeled.size for s in splits)
    data = FederatedData(tiny_data.train, tiny_partition, splits)
    seen: list[RoundState] = []
    run_stage(
        _finetune_cfg(rounds=4, semifl=True),
        sup_task,
        data,
        init_finetune_params(geometry, dims, 0, dtype=np.float64),
        on_round=lambda state, w: seen.append(state),
    )
    assert [2 in s.selected for s in seen] == [False, False, True, True]
    assert dict(seen[-1].received)[2] == unlabeled
    for k, n in seen[0].received:
        assert n == splits[k].labeled.size


def test_consistency_loss(tiny_data, geometry, dims, sup_task):
    params = init_finetune_params(geometry, dims, 0, dtype=np.float64)
    images = tiny_data.train.images[:4]
    rng = np.random.default_rng(0)
    loss = semifl_consistency_loss(params, images, sup_task.consistency_augment, rng, sup_task)
    assert loss.item() == pytest.approx(np.log(2.0))
    backward(loss)
    assert params["cls/w"].grad is not None

    params.zero_grad()
    silent = semifl_consistency_loss(params, images, None, rng, sup_task, threshold=0.9)
    assert silent.item() == 0.0
    assert isinstance(silent, Tensor)

    weighted = semifl_consistency_loss(params, images, None, rng, sup_task, threshold=0.5)
    assert weighted.item() == pytest.approx(np.log(2.0))
