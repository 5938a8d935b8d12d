import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgap import autodiff as ad
from tgap.data import build_bundle
from tgap.model import ModelConfig, TGAP
from tgap.synthetic import day, random_bundle
from tgap.train import Adam, ReduceOnPlateau, TrainConfig, TrainingError, clip_gradients, global_grad_norm, \
    load_checkpoint, save_checkpoint, train


@pytest.fixture(autouse=True)
def restore_dtype():
    prev = ad.get_dtype()
    yield
    ad.set_dtype(prev)


def _store_with_grads(grads):
    store = ad.ParamStore()
    for i, g in enumerate(grads):
        p = store.add(f"p{i}", np.zeros_like(g))
        p.grad = np.array(g, dtype=float)
    return store


def test_clip_leaves_small_gradients_alone():
    store = _store_with_grads([np.array([0.3, 0.4])])
    assert clip_gradients(store, 1.0) == 1.0
    np.testing.assert_array_equal(store.grad("p0"), [0.3, 0.4])


def test_clip_halves_at_twice_the_limit():
    store = _store_with_grads([np.array([3.0, 4.0]), np.array([[0.0]])])
    assert global_grad_norm(store) == 5.0
    assert clip_gradients(store, 2.5) == 0.5
    np.testing.assert_allclose(store.grad("p0"), [1.5, 2.0])


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 10))
def test_clipped_norm_never_exceeds_limit(seed, max_norm):
    rng = np.random.default_rng(seed)
    store = _store_with_grads([rng.normal(size=rng.integers(1, 6, 2)) * rng.uniform(0, 20) for _ in range(3)])
    clip_gradients(store, max_norm)
    assert global_grad_norm(store) <= max_norm + 1e-9


def test_adam_with_zero_gradient_keeps_parameters():
    store = _store_with_grads([np.zeros((2, 3))])
    store["p0"].data[:] = np.arange(6).reshape(2, 3)
    before = store["p0"].data.copy()
    opt = Adam(store)
    for _ in range(3):
        opt.step(store, 0.1)
    np.testing.assert_array_equal(store["p0"].data, before)


def test_adam_first_step_moves_by_learning_rate():
    store = _store_with_grads([np.array([2.0, -0.5])])
    Adam(store).step(store, 0.01)
    np.testing.assert_allclose(store["p0"].data, [-0.01, 0.01], rtol=1e-6)


def test_plateau_only_lowers_learning_rate():
    sched = ReduceOnPlateau(1.0, factor=0.1, patience=1)
    lrs = []
    for score in [0.1, 0.2, 0.2, 0.2, 0.3, 0.1, 0.1, 0.1, 0.1]:
        sched.step(score)
        lrs.append(sched.lr)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert lrs == pytest.approx([1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 0.01, 0.01, 0.001])


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_reduction_factor=1.5)


def _small_run(tmp_path, epochs, **kw):
    b = random_bundle(num_entities=12, num_edges=40, num_eval=6, seed=4)
    mcfg = ModelConfig(dim=8, heads=2, steps=2, max_core_nodes=3, edges_per_core=4, edges_per_step=3)
    tcfg = TrainConfig(epochs=epochs, batch_size=8, learning_rate=1e-2, plateau_patience=5, **kw)
    return b, mcfg, tcfg


def test_checkpoint_round_trip_is_exact(tmp_path):
    b = random_bundle(seed=0)
    m = TGAP(ModelConfig(dim=4, heads=2), b.num_entities, b.num_raw_relations, b.num_times, seed=3)
    opt = Adam(m.params)
    save_checkpoint(tmp_path / "a.npz", m, {"note": 1}, opt)
    m2, meta, opt2 = load_checkpoint(tmp_path / "a.npz")
    for name in m.params.names():
        assert m.params[name].data.tobytes() == m2.params[name].data.tobytes()
    assert meta["note"] == 1 and opt2.step_count == 0
    save_checkpoint(tmp_path / "b.npz", m2, {"note": 1}, opt2)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    b, mcfg, tcfg = _small_run(tmp_path, 2)
    train(b, mcfg, tcfg, out_dir=tmp_path / "full")
    _, _, first = _small_run(tmp_path, 1)
    train(b, mcfg, first, out_dir=tmp_path / "half")
    res = train(b, mcfg, tcfg, out_dir=tmp_path / "half", resume=tmp_path / "half" / "last.npz")
    for name in ("last.npz", "train_log.jsonl"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "half" / name).read_bytes(), name
    best = [load_checkpoint(tmp_path / d / "best.npz")[0].params.state_dict() for d in ("full", "half")]
    assert all(best[0][k].tobytes() == best[1][k].tobytes() for k in best[0])
    assert [h["epoch"] for h in res.history] == [2]


def test_training_writes_log_and_best_checkpoint(tmp_path):
    b, mcfg, tcfg = _small_run(tmp_path, 3)
    res = train(b, mcfg, tcfg, out_dir=tmp_path)
    lines = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [x["epoch"] for x in lines] == [1, 2, 3]
    assert {"loss", "lr", "valid"} <= set(lines[0])
    best = max(lines, key=lambda x: x["valid"]["hits1"])
    assert res.best_epoch == best["epoch"]
    _, meta, _ = load_checkpoint(tmp_path / "best.npz", b)
    assert meta["epoch"] == res.best_epoch


def test_non_finite_loss_aborts_with_dump(tmp_path):
    b, mcfg, tcfg = _small_run(tmp_path, 1)
    model = TGAP(mcfg, b.num_entities, b.num_raw_relations, b.num_times)
    model.params["flow.W_Q"].data[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(b, mcfg, tcfg, out_dir=tmp_path, model=model)
    dump = json.loads((tmp_path / "nan_batch_epoch1.json").read_text())
    assert len(dump["queries"]) == tcfg.batch_size


def _unique_key_records(n=30, num_entities=12, num_relations=3, num_days=6, seed=0):
    """Random facts where every (head, relation, time) and its reverse has one answer."""
    rng = np.random.default_rng(seed)
    keys, out = set(), []
    while len(out) < n:
        s, o = rng.choice(num_entities, 2, replace=False)
        r, t = int(rng.integers(num_relations)), int(rng.integers(num_days))
        if (s, r, t, 0) in keys or (o, r, t, 1) in keys:
            continue
        keys |= {(s, r, t, 0), (o, r, t, 1)}
        out.append((f"e{s}", f"r{r}", f"e{o}", day(t)))
    return out


def test_thirty_facts_can_be_memorised():
    recs = _unique_key_records()
    b = build_bundle("memorise", recs, recs, recs)
    mcfg = ModelConfig(dim=32, heads=2, steps=2, max_core_nodes=12, edges_per_core=20, edges_per_step=20)
    tcfg = TrainConfig(epochs=50, batch_size=4, learning_rate=2e-3, plateau_patience=50, dtype="float64",
                       mask_query_edges=False)
    res = train(b, mcfg, tcfg)
    losses = np.array([h["loss"] for h in res.history])
    window_means = losses.reshape(5, 10).mean(axis=1)
    assert np.all(np.diff(window_means) < 0), window_means
    assert losses[-1] < losses[0]
    assert res.best_valid_hits1 == 1.0
    assert math.isfinite(losses[-1])
