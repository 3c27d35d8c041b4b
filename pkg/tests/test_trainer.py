import dataclasses

import numpy as np
import pytest

from hysp_lab import autodiff as ad
from hysp_lab import trainer
from hysp_lab.checkpoint import encode
from hysp_lab.data import generate_dataset, amplitude_classes
from hysp_lab.errors import InvalidInput

from helpers import tiny_config


def params_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_zero_epochs_returns_initialisation(tiny_data):
    cfg = tiny_config(epochs=0)
    ckpt, rows = trainer.pretrain(cfg, tiny_data)
    assert rows == []
    assert encode(ckpt) == encode(trainer.init_checkpoint(cfg))


def test_same_seed_bit_identical(tiny_data, tmp_path):
    cfg = tiny_config()
    out = []
    for k in range(2):
        ckpt, rows = trainer.pretrain(cfg, tiny_data)
        trainer.write_metrics(rows, tmp_path / f"m{k}.csv")
        out.append((encode(ckpt), (tmp_path / f"m{k}.csv").read_bytes()))
    assert out[0] == out[1]


def test_threaded_views_match_serial(tiny_data, monkeypatch):
    cfg = tiny_config(epochs=1)
    serial = trainer.pretrain(cfg, tiny_data)[0]
    monkeypatch.setenv("HYSP_LAB_THREADS", "3")
    threaded = trainer.pretrain(cfg, tiny_data)[0]
    assert encode(serial) == encode(threaded)


def test_resume_matches_uninterrupted(tiny_data):
    cfg = tiny_config(epochs=2, select_best=False)
    full, rows = trainer.pretrain(cfg, tiny_data)
    half, _ = trainer.pretrain(cfg, tiny_data, stop_epoch=1)
    resumed, rest = trainer.pretrain(cfg, tiny_data, resume=half)
    assert [r.epoch for r in rest] == [1]
    assert rest[0].loss == rows[1].loss
    assert encode(resumed) == encode(full)


def test_resume_with_negative_queue(tiny_data):
    cfg = tiny_config(epochs=2, select_best=False, with_negatives=True, queue_capacity=10)
    full, _ = trainer.pretrain(cfg, tiny_data)
    half, _ = trainer.pretrain(cfg, tiny_data, stop_epoch=1)
    resumed, _ = trainer.pretrain(cfg, tiny_data, resume=half)
    assert full.queue.shape == (10, cfg.model.embed_dim)
    assert encode(resumed) == encode(full)


def test_metrics_rows(tiny_data):
    cfg = tiny_config(epochs=3)
    _, rows = trainer.pretrain(cfg, tiny_data)
    assert [r.epoch for r in rows] == [0, 1, 2]
    assert [r.alpha for r in rows] == [0.0, 1.0, 1.0]
    for r in rows:
        assert np.isfinite([r.loss, r.grad_norm]).all()
        assert 0 < r.radius_online < 1 and 0 < r.radius_target < 1


def test_metrics_csv_has_no_wall_time(tiny_data, tmp_path):
    _, rows = trainer.pretrain(tiny_config(epochs=1), tiny_data)
    trainer.write_metrics(rows, tmp_path / "m.csv", tmp_path / "t.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(trainer.METRIC_FIELDS)
    assert "wall_time" in (tmp_path / "t.csv").read_text()


def test_step_leaves_target_to_ema(tiny_data):
    """Backward never writes target parameters; only the EMA moves them."""
    cfg = tiny_config(epochs=1)
    ckpt = trainer.init_checkpoint(cfg)
    twin = ckpt.twin
    before = {k: v.copy() for k, v in twin.target.items()}
    x_on, x_tg = trainer._views(tiny_data[:8], cfg, 0)
    params = twin.online_tensors()
    from hysp_lab.model import twin_forward

    with ad.Tape() as tape:
        h, h_hat = twin_forward(x_on, x_tg, twin, params=params)
        loss = ad.mean(ad.poincare_loss(h, h_hat))
    ad.backward(tape, loss)
    assert params_equal(before, twin.target)

    online_before = {k: v.copy() for k, v in twin.online.items()}
    trainer._step(ckpt, x_on, x_tg, 1.0, None)
    a = twin.ema_coefficient
    for k in before:
        assert np.allclose(twin.target[k], a * before[k] + (1 - a) * twin.online[k], rtol=0, atol=1e-15)
    assert not params_equal(online_before, {k: twin.online[k] for k in online_before})


@pytest.mark.parametrize("flags, alpha0, alpha_end", [
    ({}, 0.0, 1.0),
    ({"without_curriculum": True}, 1.0, 1.0),
    ({"without_hyperbolic": True}, 0.0, 0.0),
    ({"with_negatives": True}, 0.0, 0.0),
])
def test_current_alpha(flags, alpha0, alpha_end):
    cfg = tiny_config(**flags)
    assert trainer.current_alpha(cfg, 0) == alpha0
    assert trainer.current_alpha(cfg, 50) == alpha_end


def test_negatives_drop_predictor():
    twin = trainer.build_twin(tiny_config(with_negatives=True))
    assert not any(k.startswith("predictor.") for k in twin.online)


def test_split_is_stratified_and_disjoint(tiny_data):
    train, test = trainer.split_dataset(tiny_data, 0.25, seed=0)
    ids_train = {s.sample_id for s in train}
    ids_test = {s.sample_id for s in test}
    assert not ids_train & ids_test
    assert ids_train | ids_test == {s.sample_id for s in tiny_data}
    assert [sum(s.class_id == c for s in test) for c in range(3)] == [2, 2, 2]


class TestProbe:
    def test_separable_features(self):
        rng = np.random.default_rng(0)
        y = np.repeat(np.arange(3), 30)
        x = np.eye(3)[y] * 5 + rng.normal(0, 0.1, (90, 3))
        params = trainer.fit_linear_classifier(x, y, 3, epochs=30, lr=0.5, batch_size=16)
        assert np.mean(np.argmax(x @ params["w"] + params["b"], 1) == y) == 1.0

    def test_random_labels_near_chance(self):
        rng = np.random.default_rng(0)
        n = 600
        x_train, x_test = rng.standard_normal((n, 8)), rng.standard_normal((n, 8))
        y_train, y_test = rng.integers(0, 3, n), rng.integers(0, 3, n)
        params = trainer.fit_linear_classifier(x_train, y_train, 3, epochs=20, lr=0.1, batch_size=32)
        acc = np.mean(np.argmax(x_test @ params["w"] + params["b"], 1) == y_test)
        # 4 binomial standard deviations around 1/3
        assert abs(acc - 1 / 3) < 4 * np.sqrt(1 / 3 * 2 / 3 / n)

    def test_label_fraction_bounds(self, tiny_data):
        ckpt = trainer.init_checkpoint(tiny_config())
        for bad in (0.0, 1.5):
            with pytest.raises(InvalidInput):
                trainer.linear_probe(ckpt, tiny_data, label_fraction=bad)

    def test_probe_result_shapes(self, tiny_data):
        ckpt = trainer.init_checkpoint(tiny_config())
        res = trainer.linear_probe(ckpt, tiny_data)
        assert 0 <= res.accuracy <= 1
        assert len(res.predictions) == len(res.labels) == len(res.sample_ids)

    def test_finetune_semi_supervised_runs(self, tiny_data):
        ckpt = trainer.init_checkpoint(tiny_config())
        res = trainer.linear_probe(ckpt, tiny_data, label_fraction=0.5, finetune_encoder=True)
        assert 0 <= res.accuracy <= 1
        # the checkpoint itself is untouched
        assert encode(ckpt) == encode(trainer.init_checkpoint(tiny_config()))

    def test_lr_drops(self):
        assert [trainer._lr_at(1.0, e, 100) for e in (0, 59, 60, 79, 80, 99)] == [1.0, 1.0, 0.1, 0.1,
                                                                                    pytest.approx(0.01)] + [pytest.approx(0.01)]


def test_selection_returns_an_offered_epoch(tiny_data):
    cfg = tiny_config(epochs=4, eval_every=2)
    ckpt, rows = trainer.pretrain(cfg, tiny_data)
    assert ckpt.epoch in (2, 4)
    assert len(rows) == 4


def test_hard_easy_partition(tiny_data):
    cfg = tiny_config(epochs=1)
    ckpt, _ = trainer.pretrain(cfg, trainer.train_part(tiny_data, cfg))
    out = trainer.hard_easy_split_experiment(ckpt, tiny_data, cfg)
    train_ids = {s.sample_id for s in trainer.train_part(tiny_data, cfg)}
    hard, easy = set(out["hard_ids"]), set(out["easy_ids"])
    assert not hard & easy and hard | easy == train_ids
    assert 0 <= out["n_hard"] - out["n_easy"] <= 1
    from hysp_lab.analytics import collect_records

    records = collect_records(ckpt, trainer.train_part(tiny_data, cfg), cfg.analytics.n_views)
    most_uncertain = max(records, key=lambda r: (r.uncertainty, -r.sample_id))
    assert most_uncertain.sample_id in hard
    assert all(0 <= out[k] <= 1 for k in ("full_acc", "hard_half_acc", "easy_half_acc"))


def test_ablation_grid_rows(tiny_data):
    rows = trainer.ablation_grid(tiny_config(epochs=2), tiny_data)
    assert [r["variant"] for r in rows] == list(trainer.ABLATIONS)
    assert all(r["all_losses_finite"] for r in rows)


def test_batch_sweep(tiny_data):
    ckpt = trainer.init_checkpoint(tiny_config())
    rows = trainer.batch_size_sweep(ckpt, tiny_data, sizes=(16, 4))
    assert [r["batch_size"] for r in rows] == [16, 4]


def test_embedding_gradient_mix():
    rng = np.random.default_rng(3)
    h = rng.uniform(-0.3, 0.3, (4, 5))
    g = rng.uniform(-0.3, 0.3, (4, 5))
    from hysp_lab.geometry import riemannian_grad_poincare
    from hysp_lab.objectives import cosine_grad

    mixed = trainer.embedding_gradient(h, g, 0.25)
    assert np.allclose(mixed, 0.25 * riemannian_grad_poincare(h, g) + 0.75 * cosine_grad(h, g))


def test_empty_dataset():
    with pytest.raises(InvalidInput):
        trainer.pretrain(tiny_config(), [])


def test_make_dataset_uses_config():
    cfg = tiny_config()
    ds = trainer.make_dataset(cfg)
    ref = generate_dataset(amplitude_classes(cfg.data.amplitudes, motion_frequency=cfg.data.motion_frequency,
                                             noise_sigma=cfg.data.noise_sigma), 8, 8, cfg.seed)
    assert all(np.array_equal(a.coords, b.coords) for a, b in zip(ds, ref))
    assert dataclasses.asdict(cfg.data)["n_per_class"] == 8


@pytest.mark.parametrize("n, size, expected", [(10, 4, [4, 4, 2]), (9, 4, [4, 5]), (1, 4, [1]), (8, 4, [4, 4])])
def test_batch_slices(n, size, expected):
    assert [s.stop - s.start for s in trainer.batch_slices(n, size)] == expected


def test_trailing_singleton_batch_trains():
    cfg = tiny_config(epochs=1, batch_size=4)
    data = trainer.make_dataset(cfg)[:9]
    _, rows = trainer.pretrain(cfg, data)
    assert np.isfinite(rows[0].loss)


@pytest.mark.slow
def test_curriculum_phases_near_boundary():
    """Angles train first while radii sit at the clamp; the radius gap opens once alpha ramps."""
    from scipy.stats import spearmanr
    from hysp_lab.config import load_config

    cfg = load_config(overrides={"seed": 0, "model": {"boundary_init_scale": 3.0}, "train": {"select_best": False}})
    data = trainer.train_part(trainer.make_dataset(cfg), cfg)
    _, rows = trainer.pretrain(cfg, data)
    gap = np.array([1 - r.radius_online**2 for r in rows])
    e1 = cfg.train.e1
    assert np.all(gap[:e1 + 1] < 1e-2)
    assert rows[e1 - 1].loss < rows[0].loss
    assert spearmanr(np.arange(e1, len(rows)), gap[e1:])[0] > 0
    assert gap[-1] > 100 * gap[0]


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the loss moves from cosine to Poincare distance, which has a larger scale")
def test_final_loss_below_first_epoch(desk):
    rows = desk[3]
    assert rows[-1].loss < rows[1].loss
