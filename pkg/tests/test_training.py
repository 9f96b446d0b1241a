import json

import numpy as np
import pytest
from conftest import params64, tiny_cfg, tiny_model

from minmaxvrp import diffcore as dc
from minmaxvrp import encoder as en
from minmaxvrp import problems as pb
from minmaxvrp import rollout as ro
from minmaxvrp import training as tr


def tiny_tc(kind="MTSP", **kw):
    base = dict(kind=kind, N=4, m_min=2, m_max=2, batch_size=4,
                epoch_size=8, epochs=2, K=2, lr=1e-3, seed=0,
                model=tiny_cfg(kind))
    base.update(kw)
    return tr.TrainConfig(**base)


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def test_config_rejects_bad_values():
    with pytest.raises(ValueError, match="K"):
        tiny_tc(K=1)
    with pytest.raises(ValueError, match="m_min"):
        tiny_tc(m_min=1)
    with pytest.raises(ValueError, match="m_max"):
        tiny_tc(m_max=9)
    with pytest.raises(ValueError, match="kind"):
        tr.TrainConfig(kind="MTSP", N=4, model=tiny_cfg("MPDP"))
    with pytest.raises(ValueError, match="single-depot"):
        tiny_tc(d_max=2)
    with pytest.raises(ValueError):
        tiny_tc(kind="MPDP", N=5)
    with pytest.raises(ValueError, match="routes"):
        tr.TrainConfig(kind="MPDP", N=6, m_max=4, model=tiny_cfg("MPDP"))
    with pytest.raises(ValueError):
        tiny_tc(lr=0.0)
    with pytest.raises(ValueError):
        tiny_tc(epochs=-1)


def test_config_roundtrip_and_unknown_keys():
    tc = tiny_tc(kind="MDVRP", d_min=2, d_max=3, N=6,
                 model=tiny_cfg("MDVRP"))
    rec = tc.to_dict()
    assert tr.TrainConfig.from_dict(rec).to_dict() == rec
    rec["momentum"] = 0.9
    with pytest.raises(ValueError, match="momentum"):
        tr.TrainConfig.from_dict(rec)


def test_config_defaults_model_from_kind():
    tc = tr.TrainConfig(kind="MTSP", N=6)
    assert tc.model.kind == "MTSP"
    assert tc.model.d_model == 32


# ---------------------------------------------------------------------------
# baseline and loss
# ---------------------------------------------------------------------------

def test_baseline_is_the_mean():
    assert tr.aps_baseline([2.0, 4.0]) == 3.0
    assert tr.aps_baseline([1.7] * 5) == 1.7
    vals = list(np.random.default_rng(0).uniform(1, 3, 60))
    assert abs(tr.aps_baseline(vals) - np.mean(vals)) < 1e-12
    with pytest.raises(ValueError):
        tr.aps_baseline([])


def test_identical_objectives_give_zero_loss_and_zero_step():
    # with N == M every rollout yields the same single-customer routes,
    # so all K objectives coincide and the advantage vanishes exactly
    cfg, params = tiny_model("MTSP")
    ins = pb.gen_uniform("MTSP", N=2, D=1, M=2, seed=3)
    before = {k: v.data.copy() for k, v in params.items()}
    loss, best, baselines = tr.aps_loss([ins], cfg, params, K=4,
                                        rng=np.random.default_rng(0))
    assert float(loss.data[0, 0]) == 0.0
    assert best[0] == baselines[0]
    dc.backward(loss)
    grads = [np.abs(p.grad).max() for p in params.values()]
    assert max(grads) == 0.0
    opt = dc.AdamState(params, lr=1e-3)
    dc.adam_step(params, opt)
    for k, v in params.items():
        assert np.array_equal(v.data, before[k])


def test_loss_matches_manual_recomputation():
    cfg, params = tiny_model("MTSP", seed=1)
    instances = [pb.gen_uniform("MTSP", N=5, D=1, M=2, seed=s)
                 for s in (0, 1)]
    K = 3
    loss, best, baselines = tr.aps_loss(instances, cfg, params, K,
                                        rng=np.random.default_rng(42))

    rng = np.random.default_rng(42)
    manual = 0.0
    for ins in instances:
        perms = ro.sample_permutations(ins.M, K, rng)
        results, logp = ro.decode_batch(ins, perms, cfg, params,
                                        mode="sample", rng=rng)
        objs = np.array([o for _r, o in results])
        manual += float(((objs - objs.mean())[:, None]
                         * logp.data.astype(np.float64)).sum())
        assert abs(baselines.pop(0) - objs.mean()) < 1e-12
        assert abs(best.pop(0) - objs.min()) < 1e-12
    manual /= len(instances) * K
    assert abs(float(loss.data[0, 0]) - manual) < 1e-5


def test_frozen_surrogate_gradient_matches_finite_differences():
    cfg = tiny_cfg("MTSP")
    params = params64(cfg, seed=5)
    ins = pb.gen_uniform("MTSP", N=5, D=1, M=2, seed=7)
    rng = np.random.default_rng(9)
    perms = ro.sample_permutations(2, 3, rng)
    results, _ = ro.decode_batch(ins, perms, cfg, params, mode="sample",
                                 rng=rng)
    forced = [ro.actions_from_solution(rs, o, ins)
              for (rs, _obj), o in zip(results, perms)]
    objs = [obj for _rs, obj in results]
    adv = [o - tr.aps_baseline(objs) for o in objs]
    f = tr.frozen_surrogate(ins, perms, forced, adv, cfg)
    rel = dc.grad_check(f, params, samples_per_param=2,
                        rng=np.random.default_rng(0))
    assert rel < 5e-3


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def test_train_smoke_and_reproducible_metrics():
    runs = []
    for _ in range(2):
        params, opt, metrics = tr.train(tiny_tc())
        assert len(metrics) == 2
        for row in metrics:
            assert set(row) == {"epoch", "mean_obj", "mean_baseline",
                                "lr", "wallclock"}
            assert np.isfinite(list(row.values())).all()
            assert row["mean_obj"] <= row["mean_baseline"] + 1e-12
            assert row["lr"] == 1e-3
        runs.append((params, [
            {k: v for k, v in row.items() if k != "wallclock"}
            for row in metrics]))
    assert runs[0][1] == runs[1][1]
    for k in runs[0][0]:
        assert np.array_equal(runs[0][0][k].data, runs[1][0][k].data)


def test_train_applies_lr_decay_and_callback():
    seen = []
    _, opt, metrics = tr.train(
        tiny_tc(epochs=3, lr_decay=0.5, epoch_size=4),
        on_epoch=lambda e, row, p, o: seen.append(e))
    assert seen == [0, 1, 2]
    assert [row["lr"] for row in metrics] == [1e-3, 5e-4, 2.5e-4]
    assert opt.lr == 1.25e-4


def test_train_divergence_guard():
    tc = tiny_tc(epochs=1)
    params = en.init_params(tc.model, np.random.default_rng(0))
    params["embed.customer.W"].data[:] = np.nan
    with pytest.raises(RuntimeError, match="diverged"):
        tr.train(tc, params=params)


def test_train_multi_depot_smoke():
    tc = tr.TrainConfig(kind="FMDVRP", N=4, d_min=2, d_max=2, batch_size=2,
                        epoch_size=4, epochs=1, K=2, model=tiny_cfg("FMDVRP"))
    _, _, metrics = tr.train(tc)
    assert len(metrics) == 1 and np.isfinite(metrics[0]["mean_obj"])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path):
    tc = tiny_tc(epochs=1, epoch_size=4)
    params, opt, _ = tr.train(tc)
    path = tmp_path / "model.ckpt"
    tr.save_checkpoint(path, tc.model, params, opt)
    cfg2, params2, opt2 = tr.load_checkpoint(path)
    assert cfg2.to_dict() == tc.model.to_dict()
    assert set(params2) == set(params)
    for k in params:
        assert np.array_equal(params[k].data, params2[k].data)
        assert params[k].data.dtype == params2[k].data.dtype
        assert np.array_equal(opt.m[k], opt2.m[k])
        assert np.array_equal(opt.v[k], opt2.v[k])
    assert (opt2.lr, opt2.step_count) == (opt.lr, opt.step_count)

    ins = pb.gen_uniform("MTSP", N=6, D=1, M=2, seed=77)
    r1 = ro.infer(ins, tc.model, params, n_per=2)
    r2 = ro.infer(ins, cfg2, params2, n_per=2)
    assert r1.solution.routes == r2.solution.routes
    assert r1.objective == r2.objective


def test_checkpoint_version_and_corruption_errors(tmp_path):
    cfg, params = tiny_model("MTSP")
    opt = dc.AdamState(params, lr=1e-3)
    path = tmp_path / "model.ckpt"
    tr.save_checkpoint(path, cfg, params, opt)
    payload = json.loads(path.read_text())
    payload["format_version"] = 99
    path.write_text(json.dumps(payload))
    with pytest.raises(ValueError, match="version"):
        tr.load_checkpoint(path)
    path.write_text("not a checkpoint{")
    with pytest.raises(ValueError):
        tr.load_checkpoint(path)


def test_finetune_rejects_mismatched_width(tmp_path):
    cfg, params = tiny_model("MTSP")
    opt = dc.AdamState(params, lr=1e-3)
    path = tmp_path / "model.ckpt"
    tr.save_checkpoint(path, cfg, params, opt)
    tc = tiny_tc(model=tiny_cfg("MTSP", d_model=32, d_ff=64))
    with pytest.raises(ValueError) as err:
        tr.finetune(path, tc)
    assert "16" in str(err.value) and "32" in str(err.value)


def test_finetune_zero_epochs_keeps_params(tmp_path):
    tc = tiny_tc(epochs=1, epoch_size=4)
    params, opt, _ = tr.train(tc)
    path = tmp_path / "model.ckpt"
    tr.save_checkpoint(path, tc.model, params, opt)
    tc2 = tiny_tc(epochs=0, lr=1e-5)
    params2, opt2, metrics = tr.finetune(path, tc2)
    assert metrics == []
    assert opt2.lr == 1e-5
    for k in params:
        assert np.array_equal(params[k].data, params2[k].data)


def test_finetune_runs_at_new_lr(tmp_path):
    tc = tiny_tc(epochs=1, epoch_size=4)
    params, opt, _ = tr.train(tc)
    path = tmp_path / "model.ckpt"
    tr.save_checkpoint(path, tc.model, params, opt)
    tc2 = tiny_tc(epochs=1, epoch_size=4, lr=1e-5)
    _, _, metrics = tr.finetune(path, tc2)
    assert metrics[0]["lr"] == 1e-5


# ---------------------------------------------------------------------------
# metrics text form
# ---------------------------------------------------------------------------

def test_metrics_text_roundtrip():
    rows = [{"epoch": 0, "mean_obj": 1.5, "mean_baseline": 1.75,
             "lr": 1e-3, "wallclock": 2.0}]
    text = tr.metrics_to_text(rows)
    assert text.count("\n") == 1
    assert tr.metrics_from_text(text) == rows
    assert tr.metrics_from_text("") == []
