import os

import numpy as np
import pytest
import torch

from tripyr.camera import Intrinsics
from tripyr.config import RunConfig, stream
from tripyr.synth import SceneFile, TrajectoryConfig, make_dataset
from tripyr.trainer import (LOG_HEADER, AdamState, FieldModel, GraphConsumedError, IterationPlan, LossWeights,
                            NumericalError, adam_step, backward, draw_plan, iteration_grids, iteration_loss,
                            load_checkpoint, loss_mask, loss_rgb, march_config, param_set, save_checkpoint,
                            total_loss, train)


def test_loss_rgb_examples():
    a = torch.rand(32, 4, 4, dtype=torch.float64)
    t = a[:3].clone()
    assert loss_rgb([a], [t]).item() == 0.0
    assert loss_rgb([a, a], [t + 0.25, t - 0.25]).item() == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        loss_rgb([a], [t[:, :2]])
    with pytest.raises(ValueError):
        loss_rgb([a], [])


def test_loss_rgb_loop_oracle():
    g = torch.Generator().manual_seed(0)
    maps = [torch.rand(32, 5, 5, generator=g, dtype=torch.float64) for _ in range(3)]
    tgts = [torch.rand(3, 5, 5, generator=g, dtype=torch.float64) for _ in range(3)]
    ref = 0.0
    for m, t in zip(maps, tgts):
        acc = 0.0
        for c in range(3):
            for i in range(5):
                for j in range(5):
                    acc += abs(m[c, i, j].item() - t[c, i, j].item())
        ref += acc / 75
    assert abs(loss_rgb(maps, tgts).item() - ref) <= 1e-12


def test_loss_mask_examples():
    assert loss_mask(torch.ones(3, 3), torch.ones(3, 3)).item() == 0.0
    assert loss_mask(torch.ones(3, 3), torch.zeros(3, 3)).item() == 1.0
    g = torch.Generator().manual_seed(1)
    a, b = torch.rand(4, 6, generator=g, dtype=torch.float64), torch.rand(4, 6, generator=g, dtype=torch.float64)
    ref = sum((a[i, j].item() - b[i, j].item()) ** 2 for i in range(4) for j in range(6)) / 24
    assert abs(loss_mask(a, b).item() - ref) <= 1e-12
    with pytest.raises(ValueError):
        loss_mask(a, b[:, :5])


def test_total_loss():
    assert total_loss(0.5, 0.2) == pytest.approx(0.5 + 0.1 * 0.2, abs=1e-15)
    assert total_loss(0.5, 0.2, LossWeights(mask=0.0)) == 0.5
    assert total_loss(1.0, 4.0, LossWeights(mask=0.25)) == 2.0
    with pytest.raises(ValueError):
        LossWeights(mask=-1.0)


def test_adam_zero_gradient_and_first_step():
    p = {"w": torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)}
    s = AdamState.for_params(p, lr=1e-3)
    adam_step(p, {"w": torch.zeros(3, dtype=torch.float64)}, s)
    assert torch.equal(p["w"], torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64))
    s = AdamState.for_params(p, lr=1e-3)
    g = torch.tensor([0.5, -4.0, 1e-3], dtype=torch.float64)
    before = p["w"].clone()
    adam_step(p, {"w": g}, s)
    # m_hat = g, v_hat = g^2 after one bias-corrected step
    np.testing.assert_allclose((before - p["w"]).numpy(), 1e-3 * g.sign().numpy(), rtol=1e-4)


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    w = rng.normal(size=4)
    p = {"w": torch.tensor(w)}
    s = AdamState.for_params(p, lr=0.01)
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step(p, {"w": torch.tensor(g)}, s)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"].numpy(), w, rtol=0, atol=1e-14)


def test_adam_nan_names_parameter():
    p = {"decoder.bias": torch.zeros(2)}
    s = AdamState.for_params(p)
    with pytest.raises(NumericalError, match="decoder.bias"):
        adam_step(p, {"decoder.bias": torch.tensor([0.0, float("nan")])}, s)
    assert s.step == 0


def test_param_set_registry():
    m = FieldModel(resolutions=(4, 8), channels=2, n_exp=2, n_frames=5, decoder_hidden=4, cond_hidden=4)
    names = list(param_set(m))
    assert names == list(param_set(m))
    assert len(names) == len(set(names))
    assert {"gamma", "pyramid.gains", "pyramid.planes.0", "pyramid.planes.1"} <= set(names)
    assert param_set(m)["gamma"].shape == (5, 32)


def test_backward_graph_reuse_raises():
    x = torch.ones(3, requires_grad=True)
    loss = (x.exp() * 2).sum()
    backward(loss, {"x": x})
    with pytest.raises(GraphConsumedError):
        backward(loss, {"x": x})


def test_draw_plan_streams():
    a = draw_plan(stream(5, "plan"), stream(5, "crop"), 10, 28, True)
    b = draw_plan(stream(5, "plan"), stream(5, "crop"), 10, 28, False)
    assert (a.frame, a.patch, a.quadrant, a.seed) == (b.frame, b.patch, b.quadrant, b.seed)
    assert b.crop == (28, 28)
    assert all(0 <= c <= 56 for c in a.crop)
    with pytest.raises(ValueError):
        IterationPlan(0, (0, 0), 16, 0, 0)


def test_iteration_grids_by_depth():
    plan = IterationPlan(0, (0, 0), 7, 2, 0)
    assert [(g.scale, g.patch) for g in iteration_grids(1, plan, 8)] == [(128, 0)]
    assert [(g.scale, g.patch) for g in iteration_grids(3, plan, 8)] == [(128, 0), (256, 2), (512, 7)]


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    sf = SceneFile(intrinsics=Intrinsics(32.0, 32.0, 16.0, 16.0, 32, 32), margin=6, oracle_samples=96,
                   trajectory=TrajectoryConfig(n_frames=10))
    make_dataset(sf, root, seed=0)
    return str(root)


def tiny_cfg(data, out, **kw):
    base = dict(dataset=data, output=str(out), iterations=6, checkpoint_every=3, n_samples=12, map_res=8,
                resolutions=(4, 8, 16), channels=4, decoder_hidden=8, cond_hidden=8, lr=5e-3)
    base.update(kw)
    return RunConfig(**base)


def test_gamma_rows_and_patch_gradients(tiny_data):
    from tripyr.synth import Manifest
    from tripyr.facegeom import record_intrinsics
    man = Manifest.load(tiny_data)
    cfg = tiny_cfg(tiny_data, "unused", jitter=False)
    model = FieldModel.from_config(cfg, man.n_exp, len(man.frames))
    with torch.no_grad():
        # the zero-initialized output layer blocks the gamma path until training moves it
        model.pyramid.cond.out.weight.normal_(0, 0.1)
    rec = man.train[2]
    plan = IterationPlan(2, rec.crop, 5, 1, 0)
    loss, _, _ = iteration_loss(model, rec, record_intrinsics(man.intrinsics, rec), man.image(rec), man.mask(rec),
                                iteration_grids(3, plan, 8), march_config(cfg, man, True), LossWeights(), 8)
    grads = backward(loss, param_set(model))
    g = grads["gamma"]
    assert torch.count_nonzero(g[rec.gamma_index]) > 0
    others = [r for r in range(g.shape[0]) if r != rec.gamma_index]
    assert torch.count_nonzero(g[others]) == 0


def test_config_round_trip(tmp_path):
    cfg = RunConfig(scene="s.txt", seed=9, resolutions=(8, 16), pyramid_depth=2, lr=3e-4, jitter=False,
                    init_std=0.125, verify_mode=True)
    assert RunConfig.parse(cfg.serialize()) == cfg
    cfg.save(tmp_path / "c.txt")
    assert RunConfig.load(tmp_path / "c.txt") == cfg
    with pytest.raises(ValueError):
        RunConfig.parse("bogus = 1\n")
    with pytest.raises(ValueError):
        RunConfig.parse("pyramid_depth = 2\n")
    with pytest.raises(ValueError):
        RunConfig.parse("lambda_perp = 0.5\n")
    with pytest.raises(ValueError):
        RunConfig.parse("iterations = ten\n")


def test_checkpoint_round_trip(tiny_data, tmp_path):
    from tripyr.synth import Manifest
    man = Manifest.load(tiny_data)
    cfg = tiny_cfg(tiny_data, tmp_path)
    model = FieldModel.from_config(cfg, man.n_exp, len(man.frames))
    params = param_set(model)
    state = AdamState.for_params(params, cfg.lr)
    with torch.no_grad():
        for p in params.values():
            p.normal_()
    adam_step(params, {k: torch.randn_like(p) for k, p in params.items()}, state)
    save_checkpoint(tmp_path / "ck", model, state, 17, cfg)
    m2, s2, it, cfg2 = load_checkpoint(tmp_path / "ck")
    assert it == 17 and cfg2 == cfg and s2.step == 1 and s2.lr == cfg.lr
    for k, p in param_set(m2).items():
        assert torch.equal(p, params[k]), k
        assert torch.equal(s2.m[k], state.m[k]) and torch.equal(s2.v[k], state.v[k])
    save_checkpoint(tmp_path / "ck2", m2, s2, 17, cfg2)
    for f in ("params.bin", "adam.bin", "manifest.txt"):
        assert (tmp_path / "ck" / f).read_bytes() == (tmp_path / "ck2" / f).read_bytes()


def read_log(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    return lines[0], [l.split(",") for l in lines[1:]]


def test_train_outputs_and_determinism(tiny_data, tmp_path):
    cfg = tiny_cfg(tiny_data, tmp_path / "a")
    r1 = train(cfg)
    train(cfg.replace(output=str(tmp_path / "b")))
    header, rows = read_log(tmp_path / "a" / "loss_log.csv")
    assert header == ",".join(LOG_HEADER)
    assert len(rows) == 6 and rows[2][4] != "" and rows[0][4] == ""
    assert [os.path.basename(c) for c in r1.checkpoints] == ["iter_000003", "iter_000006"]
    for rel in ("checkpoints/iter_000006/params.bin", "checkpoints/iter_000006/adam.bin", "loss_log.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    # text files name the output directory, the only intended difference
    for rel in ("config.txt", "checkpoints/iter_000006/manifest.txt"):
        a = (tmp_path / "a" / rel).read_text().replace(str(tmp_path / "a"), "OUT")
        b = (tmp_path / "b" / rel).read_text().replace(str(tmp_path / "b"), "OUT")
        assert a == b, rel


def test_first_logged_loss_matches_offline_recompute(tiny_data, tmp_path):
    from tripyr.synth import Manifest
    from tripyr.facegeom import augment_record, record_intrinsics
    cfg = tiny_cfg(tiny_data, tmp_path, iterations=1, checkpoint_every=1)
    res = train(cfg, write=False)
    man = Manifest.load(tiny_data)
    model = FieldModel.from_config(cfg, man.n_exp, len(man.frames))
    plan = draw_plan(stream(cfg.seed, "plan"), stream(cfg.seed, "crop"), len(man.train), man.margin, True)
    rec = augment_record(man.train[plan.frame], *plan.crop)
    loss, _, _ = iteration_loss(model, rec, record_intrinsics(man.intrinsics, rec), man.image(rec), man.mask(rec),
                                iteration_grids(3, plan, 8), march_config(cfg, man, True), LossWeights(), 8,
                                torch.Generator().manual_seed(plan.seed))
    assert loss.item() == res.rows[0][1]


def test_train_rejects_mismatched_window(tiny_data, tmp_path):
    with pytest.raises(ValueError, match="map_res"):
        train(tiny_cfg(tiny_data, tmp_path, map_res=16, resolutions=(4, 8, 16)))


def test_smoke_loss_halves(tiny_data, tmp_path):
    cfg = tiny_cfg(tiny_data, tmp_path, iterations=300, checkpoint_every=300, lr=2e-3, channels=8,
                   decoder_hidden=32)
    rows = train(cfg, write=False).rows
    first = np.mean([r[1] for r in rows[:10]])
    last = np.mean([r[1] for r in rows[-10:]])
    assert last <= 0.5 * first
