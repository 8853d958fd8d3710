"""Two-stage schedule: budget split, stage isolation, degenerate alphas."""

import copy

import numpy as np
import pytest

from twostage.adapt import (AdaptConfig, base_targets, compute_budget, init_classifier, run_2sfs,
                            run_single_stage, sample_batch, stage_one, stage_two)
from twostage.errors import ConfigurationError
from twostage.infer import selective_predict_many
from twostage.model import zero_shot_predict_many
from twostage.peft import STRATEGIES, attach

FAST = dict(M=6, k=2, lr=1e-3, batch=8)


class TestBudget:
    def test_reference_split(self):
        assert compute_budget(AdaptConfig(M=300, k=16, alpha=0.6)) == (4800, 2880, 1920)

    def test_low_alpha(self):
        assert compute_budget(AdaptConfig(M=300, k=16, alpha=0.3)) == (4800, 1440, 3360)

    @pytest.mark.parametrize("alpha", np.linspace(0, 1, 21).tolist())
    def test_split_sums_and_ceils(self, alpha):
        m, m1, m2 = compute_budget(AdaptConfig(M=7, k=3, alpha=alpha))
        assert m == 21 and m1 + m2 == m and m1 >= alpha * m - 1e-9 and m1 - 1 < alpha * m

    @pytest.mark.parametrize("bad", [dict(alpha=1.5), dict(alpha=-0.1), dict(M=0), dict(batch=0),
                                     dict(lr=0.0), dict(eval_interval=-1)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigurationError):
            AdaptConfig(**bad).validate()


class TestSampling:
    def test_labels_are_base_and_seeded(self, small_task):
        a = sample_batch(small_task, 50, np.random.default_rng(1))
        b = sample_batch(small_task, 50, np.random.default_rng(1))
        assert all(y in small_task.base for _, y in a)
        assert [y for _, y in a] == [y for _, y in b]

    def test_targets_index_ascending_base(self, small_task):
        t = base_targets(small_task)
        assert (np.array(small_task.base)[t] == small_task.shot_labels).all()


class TestClassifier:
    def test_rows_are_text_embeddings(self, model, small_task):
        clf = init_classifier(model, reversed(small_task.base))
        assert clf.base == small_task.base
        np.testing.assert_array_equal(clf.phi.data, model.encode_texts(small_task.base).data)


class TestIsolation:
    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_stages_touch_only_their_parameters(self, pretrained, small_task, strategy):
        model = copy.deepcopy(pretrained[0])
        cfg = AdaptConfig(**FAST, alpha=0.5, seed=1)
        omega = attach(strategy, model, rank=cfg.rank, ctx_len=cfg.ctx_len, seed=cfg.seed)
        frozen = model.registry_hash(exclude=omega.names)
        rng = np.random.default_rng(cfg.seed)
        stage_one(model, omega, small_task, cfg, 6, rng)
        assert model.registry_hash(exclude=omega.names) == frozen
        assert any(not np.array_equal(p.data, model_init) for (_, p), model_init in
                   zip(omega, _initial_omega(pretrained[0], strategy, cfg)))
        everything = model.registry_hash()
        clf = init_classifier(model, small_task.base)
        phi0 = clf.phi.data.copy()
        stage_two(model, clf, small_task, cfg, 6, rng)
        assert model.registry_hash() == everything
        assert not np.array_equal(clf.phi.data, phi0)

    def test_step_count(self, model, small_task):
        res = run_2sfs(model, "bitfit", small_task, AdaptConfig(**FAST, alpha=0.5), record=False)
        assert (res.steps, res.m1, res.m2) == (12, 6, 6)


def _initial_omega(pretrained, strategy, cfg):
    fresh = copy.deepcopy(pretrained)
    return [p.data for _, p in attach(strategy, fresh, rank=cfg.rank, ctx_len=cfg.ctx_len,
                                      seed=cfg.seed)]


class TestDegenerateAlpha:
    def test_alpha_one_is_zero_shot_under_omega(self, model, small_task):
        res = run_2sfs(model, "layernorm", small_task, AdaptConfig(**FAST, alpha=1.0), record=False)
        assert res.m2 == 0
        imgs = np.concatenate([small_task.eval_base_images, small_task.eval_novel_images])
        cats = small_task.candidates
        sel = selective_predict_many(imgs, cats, model, res.classifier)
        zs = zero_shot_predict_many(imgs, cats, model)
        assert (sel == zs).all()

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_alpha_zero_keeps_pretrained_model(self, pretrained, small_task, strategy):
        model = copy.deepcopy(pretrained[0])
        x = small_task.eval_base_images
        ref = pretrained[0].encode_images(x).data
        res = run_2sfs(model, strategy, small_task, AdaptConfig(**FAST, alpha=0.0), record=False)
        assert res.m1 == 0
        assert model.encode_images(x).data.tobytes() == ref.tobytes()
        injected = [n for n in res.omega if n not in pretrained[0].params]
        assert model.registry_hash(exclude=injected) == pretrained[0].registry_hash()
        for name, arr in res.omega.items():
            if name in pretrained[0].params:
                assert arr.tobytes() == pretrained[0].params[name].data.tobytes()

    def test_stage_one_prefix_matches_single_stage(self, pretrained, small_task):
        cfg = AdaptConfig(**FAST, alpha=0.5, seed=3)
        two = run_2sfs(copy.deepcopy(pretrained[0]), "layernorm", small_task, cfg, record=False)
        one = run_single_stage(copy.deepcopy(pretrained[0]), "layernorm", small_task,
                               cfg.replace(M=3), record=False)
        for name, arr in two.omega.items():
            assert arr.tobytes() == one.omega[name].tobytes()


class TestRecording:
    def test_curve_interval_and_endpoints(self, model, small_task):
        res = run_2sfs(model, "layernorm", small_task, AdaptConfig(**FAST, eval_interval=4))
        assert [r.iteration for r in res.curve.records] == [0, 4, 8, 12]
        assert all(r.novel_acc is not None for r in res.curve.records)

    def test_recording_does_not_change_training(self, pretrained, small_task):
        cfg = AdaptConfig(**FAST, eval_interval=2, seed=5)
        a = run_2sfs(copy.deepcopy(pretrained[0]), "lora", small_task, cfg, record=True)
        b = run_2sfs(copy.deepcopy(pretrained[0]), "lora", small_task, cfg, record=False)
        assert a.classifier.phi.data.tobytes() == b.classifier.phi.data.tobytes()
        assert a.metrics == b.metrics

    def test_deterministic(self, pretrained, small_task):
        cfg = AdaptConfig(**FAST, seed=2)
        a = run_single_stage(copy.deepcopy(pretrained[0]), "bitfit", small_task, cfg)
        b = run_single_stage(copy.deepcopy(pretrained[0]), "bitfit", small_task, cfg)
        assert a.curve.records == b.curve.records
