import copy
import hashlib
import json

import numpy as np
import pytest
import torch

from metalgan.advloss import LossError, LossWeights, discriminator_gradient, generator_gradient
from metalgan.datapipe import load_batch
from metalgan.metatrain import (
    TRACE_COLUMNS,
    TrainConfig,
    TrainingError,
    discriminator_pass,
    inner_loop,
    load_checkpoint,
    new_state,
    read_trace,
    reptile_update,
    sample_query_set,
    train_cgan,
    train_metalgan,
)
from metalgan.netcore import flatten_params, load_params
from metalgan.taskforge import TaskCluster


def small_cfg(**kw):
    base = dict(
        n_epochs=1, n_meta_iter=3, lr_g=1e-3, lr_d=1e-3, stepsize_ml=0.1, k=4, query_fraction=0.2,
        image_size=16, g_depth=2, g_width=4, d_blocks=2, d_width=4, seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


def digest(net):
    return hashlib.sha256(flatten_params(net).tobytes()).hexdigest()


# -- config ------------------------------------------------------------------


def test_config_defaults_follow_reported_setup():
    cfg = TrainConfig()
    assert (cfg.n_epochs, cfg.n_meta_iter) == (200, 100)
    assert cfg.lr_g == cfg.lr_d == 1e-4
    assert cfg.stepsize_ml == 1e-3
    assert (cfg.weights.w_adv, cfg.weights.w_l1) == (1, 100)
    assert cfg.k == 64 and cfg.query_fraction == 0.1


def test_config_json_round_trip(tmp_path):
    cfg = small_cfg(momentum=0.5, d_pass_max_batches=3)
    cfg.save(tmp_path / "c.json")
    assert TrainConfig.load(tmp_path / "c.json") == cfg
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["weights"] == {"w_adv": 1.0, "w_l1": 100.0}


@pytest.mark.parametrize("bad", [dict(mode="gan"), dict(lr_g=-1), dict(query_fraction=0), dict(batch_size=0),
                                 dict(image_size=18), dict(dtype="float16")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        small_cfg(**bad)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        TrainConfig.from_json({"n_epochs": 1, "typo": 3})


# -- query set ---------------------------------------------------------------


def test_query_set_size_fraction():
    ids = [f"i{n}" for n in range(500)]
    qs = sample_query_set(ids, 0.1, 0)
    assert len(qs) == 50 and len(set(qs.queries)) == 50


def test_query_set_full_fraction():
    ids = [f"i{n}" for n in range(37)]
    qs = sample_query_set(ids, 1.0, 3)
    assert sorted(qs.queries) == sorted(ids)


def test_query_set_deterministic():
    ids = list(range(200))
    assert sample_query_set(ids, 0.1, 9).queries == sample_query_set(ids, 0.1, 9).queries


def test_query_set_too_small():
    with pytest.raises(ValueError):
        sample_query_set(list(range(9)), 0.1, 0)


def test_query_set_resolves_clusters(tiny_index, tiny_clusters):
    qs = sample_query_set(tiny_index.train_ids, 0.5, 0, tiny_clusters)
    assert set(qs.resolved) == set(qs.queries)
    for q, cid in qs.resolved.items():
        assert 0 <= cid < tiny_clusters.k


# -- reptile update --------------------------------------------------------------


def test_reptile_fixed_point_and_full_step():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=100)
    assert reptile_update(theta, theta, 0.3).tobytes() == theta.tobytes()
    tilde = rng.normal(size=100)
    assert reptile_update(theta, tilde, 1.0).tobytes() == tilde.tobytes()
    assert reptile_update(theta, tilde, 0.0).tobytes() == theta.tobytes()


def test_reptile_small_example():
    out = reptile_update(np.array([1.0, 2.0]), np.array([3.0, 4.0]), 0.001)
    np.testing.assert_allclose(out, [1.002, 2.002], rtol=0, atol=1e-15)


def test_reptile_is_affine_interpolation():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=10_000), rng.normal(size=10_000)
    for lam in (1e-3, 0.1, 0.5, 0.9):
        ref = (1 - lam) * a + lam * b
        np.testing.assert_allclose(reptile_update(a, b, lam), ref, rtol=0, atol=4 * np.finfo(float).eps * 4)


def test_reptile_does_not_mutate_inputs():
    a, b = np.ones(5), np.zeros(5)
    reptile_update(a, b, 0.5)
    assert np.all(a == 1) and np.all(b == 0)


def test_reptile_length_mismatch():
    with pytest.raises(ValueError):
        reptile_update(np.zeros(3), np.zeros(4), 0.1)


# -- inner loop ------------------------------------------------------------------


@pytest.fixture
def nets():
    st = new_state(small_cfg())
    return st.g, st.d


def task_of(index, n=6):
    return TaskCluster(0, index.train_ids[:n], np.zeros(2))


@pytest.mark.parametrize("kw", [dict(n_meta_iter=0), dict(lr_g=0.0, n_meta_iter=4)])
def test_inner_loop_noops(nets, tiny_dataset, tiny_index, kw):
    g, d = nets
    theta = flatten_params(g)
    out = inner_loop(task_of(tiny_index), g, d, small_cfg(**kw), tiny_dataset, np.random.default_rng(0))
    assert out.tobytes() == theta.tobytes()


def test_inner_loop_single_step_replay(nets, tiny_dataset, tiny_index):
    g, d = nets
    cfg = small_cfg(n_meta_iter=1, lr_g=0.05)
    task = task_of(tiny_index)
    theta, d_before = flatten_params(g), digest(d)
    trace = []
    out = inner_loop(task, g, d, cfg, tiny_dataset, np.random.default_rng(11), trace)
    # replay: same rng draw, gradient bundle from the checked gradient routine
    batch = load_batch(task, tiny_dataset, cfg.batch_size, np.random.default_rng(11))
    bundle = generator_gradient(copy.deepcopy(g), d, batch, cfg.weights)
    np.testing.assert_allclose(out, theta - cfg.lr_g * bundle.vector, rtol=1e-6, atol=1e-7)
    assert len(trace) == 1
    assert abs(cfg.weights.w_adv * trace[0][0] + cfg.weights.w_l1 * trace[0][1] - bundle.loss_value) < 1e-4
    # outer generator and discriminator untouched
    assert flatten_params(g).tobytes() == theta.tobytes()
    assert digest(d) == d_before


def test_inner_loop_nonfinite_aborts(nets, tiny_dataset, tiny_index):
    g, d = nets
    load_params(g, np.full(flatten_params(g).size, np.nan, dtype=np.float32))
    with pytest.raises(LossError, match="inner step 0"):
        inner_loop(task_of(tiny_index), g, d, small_cfg(), tiny_dataset, np.random.default_rng(0))


# -- discriminator pass --------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(lr_d=0.0), dict(d_pass_max_batches=0)])
def test_discriminator_pass_noops(nets, tiny_dataset, tiny_index, kw):
    g, d = nets
    before = flatten_params(d)
    losses = discriminator_pass(task_of(tiny_index), d, g, small_cfg(**kw), tiny_dataset, np.random.default_rng(0))
    assert flatten_params(d).tobytes() == before.tobytes()
    assert len(losses) == (0 if kw.get("d_pass_max_batches") == 0 else 6)


def test_discriminator_pass_single_batch_replay(nets, tiny_dataset, tiny_index):
    g, d = nets
    cfg = small_cfg(lr_d=0.05, batch_size=2)
    task = task_of(tiny_index, n=2)
    theta, g_before = flatten_params(d), digest(g)
    ref_d = copy.deepcopy(d)
    order = np.random.default_rng(4).permutation(2)
    batch = tiny_dataset.pairs([task.member_ids[i] for i in order])
    bundle = discriminator_gradient(ref_d, g, batch)
    losses = discriminator_pass(task, d, g, cfg, tiny_dataset, np.random.default_rng(4))
    assert len(losses) == 1 and abs(losses[0] - bundle.loss_value) < 1e-5
    np.testing.assert_allclose(flatten_params(d), theta - cfg.lr_d * bundle.vector, rtol=1e-6, atol=1e-7)
    assert digest(g) == g_before


# -- full runs ---------------------------------------------------------------------


def test_metalgan_noop_composition(tiny_dataset, tiny_clusters):
    cfg = small_cfg(n_epochs=1, n_meta_iter=0, lr_d=0.0)
    init = new_state(cfg)
    res = train_metalgan(tiny_dataset, tiny_clusters, cfg)
    assert digest(res.g) == digest(init.g) and digest(res.d) == digest(init.d)


def test_metalgan_zero_rates_are_noop(tiny_dataset, tiny_clusters):
    cfg = small_cfg(n_epochs=2, lr_g=0.0, lr_d=0.0, stepsize_ml=0.0)
    init = new_state(cfg)
    res = train_metalgan(tiny_dataset, tiny_clusters, cfg)
    assert digest(res.g) == digest(init.g) and digest(res.d) == digest(init.d)


def test_metalgan_trace_accounting(tiny_dataset, tiny_clusters):
    cfg = small_cfg(n_epochs=2, n_meta_iter=3)
    res = train_metalgan(tiny_dataset, tiny_clusters, cfg)
    n_q = len(res.state.queries)
    assert n_q == round(0.2 * len(tiny_dataset.index.train_ids))
    assert len(res.generator_rows()) == cfg.n_epochs * n_q * cfg.n_meta_iter
    d_rows = [r for r in res.trace if r[5] is not None]
    sizes = {c.cluster_id: len(c) for c in tiny_clusters.clusters}
    expected = cfg.n_epochs * sum(sizes[res.state.queries.resolved[q]] for q in res.state.queries.queries)
    assert len(d_rows) == expected


def test_metalgan_rejects_k_mismatch(tiny_dataset, tiny_clusters):
    with pytest.raises(TrainingError):
        train_metalgan(tiny_dataset, tiny_clusters, small_cfg(k=5))


def test_metalgan_learns_something(tiny_dataset, tiny_clusters):
    cfg = small_cfg(n_epochs=1, n_meta_iter=2, stepsize_ml=0.5)
    init = new_state(cfg)
    res = train_metalgan(tiny_dataset, tiny_clusters, cfg)
    assert digest(res.g) != digest(init.g) and digest(res.d) != digest(init.d)


def test_cgan_zero_rates_noop_and_accounting(tiny_dataset):
    cfg = small_cfg(mode="cgan", n_epochs=2, lr_g=0.0, lr_d=0.0, batch_size=4)
    init = new_state(cfg)
    res = train_cgan(tiny_dataset, cfg)
    assert digest(res.g) == digest(init.g) and digest(res.d) == digest(init.d)
    n_batches = -(-len(tiny_dataset.index.train_ids) // 4)
    assert len(res.trace) == cfg.n_epochs * n_batches
    assert [r[0] for r in res.trace] == [e for e in range(2) for _ in range(n_batches)]


def test_mode_mismatch(tiny_dataset, tiny_clusters):
    with pytest.raises(TrainingError):
        train_cgan(tiny_dataset, small_cfg())
    with pytest.raises(TrainingError):
        train_metalgan(tiny_dataset, tiny_clusters, small_cfg(mode="cgan"))


# -- checkpoints, determinism, resume -------------------------------------------


def params_bytes(ck):
    return (ck / "params.bin").read_bytes()


def test_checkpoint_layout(tmp_path, tiny_dataset, tiny_clusters):
    cfg = small_cfg(n_epochs=2)
    res = train_metalgan(tiny_dataset, tiny_clusters, cfg, out_dir=tmp_path)
    assert [p.name for p in res.checkpoints] == ["epoch_0001", "epoch_0002"]
    manifest = json.loads((res.checkpoints[-1] / "manifest.json").read_text())
    assert {"arch", "epoch", "mode", "seed", "param_count"} <= set(manifest)
    assert manifest["mode"] == "metalgan" and manifest["epoch"] == 2
    assert manifest["param_count"] * 4 == (res.checkpoints[-1] / "params.bin").stat().st_size
    rows = read_trace(tmp_path / "loss_trace.csv")
    assert list(rows[0]) == TRACE_COLUMNS
    assert len(rows) == len(res.trace)
    back = load_checkpoint(res.checkpoints[-1])
    assert digest(back.g) == digest(res.g) and digest(back.d) == digest(res.d)


@pytest.mark.parametrize("mode", ["metalgan", "cgan"])
def test_identical_runs_are_bit_identical(tmp_path, tiny_dataset, tiny_clusters, mode):
    cfg = small_cfg(n_epochs=2, mode=mode)
    clusters = tiny_clusters if mode == "metalgan" else None
    run = train_metalgan if mode == "metalgan" else (lambda ds, _c, c, **kw: train_cgan(ds, c, **kw))
    a = run(tiny_dataset, clusters, cfg, out_dir=tmp_path / "a")
    b = run(tiny_dataset, clusters, cfg, out_dir=tmp_path / "b")
    for ca, cb in zip(a.checkpoints, b.checkpoints):
        assert params_bytes(ca) == params_bytes(cb)


@pytest.mark.parametrize("mode,momentum", [("metalgan", 0.0), ("cgan", 0.0), ("metalgan", 0.9)])
def test_resume_matches_uninterrupted(tmp_path, tiny_dataset, tiny_clusters, mode, momentum):
    full_cfg = small_cfg(n_epochs=4, mode=mode, momentum=momentum)
    half_cfg = small_cfg(n_epochs=2, mode=mode, momentum=momentum)
    if mode == "metalgan":
        full = train_metalgan(tiny_dataset, tiny_clusters, full_cfg, out_dir=tmp_path / "full")
        half = train_metalgan(tiny_dataset, tiny_clusters, half_cfg, out_dir=tmp_path / "half")
        rest = train_metalgan(tiny_dataset, tiny_clusters, full_cfg, out_dir=tmp_path / "half",
                              resume=half.checkpoints[-1])
    else:
        full = train_cgan(tiny_dataset, full_cfg, out_dir=tmp_path / "full")
        half = train_cgan(tiny_dataset, half_cfg, out_dir=tmp_path / "half")
        rest = train_cgan(tiny_dataset, full_cfg, out_dir=tmp_path / "half", resume=half.checkpoints[-1])
    assert rest.checkpoints[-1].name == "epoch_0004"
    assert params_bytes(rest.checkpoints[-1]) == params_bytes(full.checkpoints[-1])
    assert len(read_trace(tmp_path / "half" / "loss_trace.csv")) == len(full.trace)


def test_resume_rejects_architecture_change(tmp_path, tiny_dataset, tiny_clusters):
    res = train_metalgan(tiny_dataset, tiny_clusters, small_cfg(), out_dir=tmp_path)
    with pytest.raises(TrainingError):
        load_checkpoint(res.checkpoints[-1], small_cfg(g_width=8))


def test_parameter_isolation_across_epoch(tiny_dataset, tiny_clusters, monkeypatch):
    """inner_loop never touches D; discriminator_pass never touches G."""
    import metalgan.metatrain as mt

    real_inner, real_pass = mt.inner_loop, mt.discriminator_pass
    seen = []

    def inner(task, g, d, *a, **kw):
        before = digest(d), digest(g)
        out = real_inner(task, g, d, *a, **kw)
        seen.append(before == (digest(d), digest(g)))
        return out

    def dpass(task, d, g, *a, **kw):
        before = digest(g)
        out = real_pass(task, d, g, *a, **kw)
        seen.append(before == digest(g))
        return out

    monkeypatch.setattr(mt, "inner_loop", inner)
    monkeypatch.setattr(mt, "discriminator_pass", dpass)
    train_metalgan(tiny_dataset, tiny_clusters, small_cfg())
    assert seen and all(seen)
