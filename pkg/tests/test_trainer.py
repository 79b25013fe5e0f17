from dataclasses import fields, replace

import numpy as np
import pytest
import torch

from fairpda.data import TargetBatch, batches_per_epoch, build_batches
from fairpda.errors import NumericalAbort, ValidationError
from fairpda.model import FairPDAModel, MixStyleConfig, ModelConfig
from fairpda.objectives import segment_counts, task_loss
from fairpda.trainer import Trainer, TrainProtocol, fold_predictions, load_model, run_experiment

FAST = dict(epochs=2, batch_size=8)


def make_trainer(tb, fold=0, model_cfg=None, **kw):
    train, _ = tb.plan.folds[fold]
    return Trainer(TrainProtocol(**{**FAST, **kw}), model_cfg or ModelConfig(), tb.store, train, sorted(tb.plan.uda_adaptation))


def source_target_idx(tb, fold=0):
    train, _ = tb.plan.folds[fold]
    src = tb.store.indices_for(train)
    return src, tb.store.indices_for(tb.plan.uda_adaptation)


class TestBatches:
    def test_deterministic_per_epoch(self, tiny_bench):
        src, tgt = source_target_idx(tiny_bench)
        run = lambda epoch: [(s.patient_ids, t.x) for s, t in build_batches(tiny_bench.store, src, tgt, "UDA", 8, 3, epoch)]
        a, b = run(0), run(0)
        assert [p for p, _ in a] == [p for p, _ in b]
        assert all(torch.equal(x, y) for (_, x), (_, y) in zip(a, b))
        assert [p for p, _ in run(1)] != [p for p, _ in a]

    def test_drops_incomplete_tail(self, tiny_bench):
        src, tgt = source_target_idx(tiny_bench)
        batches = list(build_batches(tiny_bench.store, src, tgt, "UDA", 8, 0, 0))
        assert len(batches) == len(src) // 8 == batches_per_epoch(len(src), 8)
        assert all(s.x.shape[0] == 8 and t.x.shape[0] == 8 for s, t in batches)
        seen = [i for s, _ in batches for i in s.patient_ids]
        assert len(seen) == len(src) - len(src) % 8

    def test_target_pool_cycles(self, tiny_bench):
        src, tgt = source_target_idx(tiny_bench)
        assert len(tgt) < len(src)
        batches = list(build_batches(tiny_bench.store, src, tgt, "UDA", 8, 0, 0))
        n_target = sum(t.x.shape[0] for _, t in batches)
        assert n_target > len(tgt)

    def test_target_batch_has_no_labels(self):
        assert {f.name for f in fields(TargetBatch)} == {"x", "dataset_code"}

    def test_dg_has_no_target(self, tiny_bench):
        src, _ = source_target_idx(tiny_bench)
        assert all(t is None for _, t in build_batches(tiny_bench.store, src, None, "DG", 8, 0, 0))

    def test_uda_without_target(self, tiny_bench):
        src, _ = source_target_idx(tiny_bench)
        with pytest.raises(ValidationError):
            list(build_batches(tiny_bench.store, src, np.array([], dtype=int), "UDA", 8, 0, 0))


def params_equal(m1, m2):
    s1, s2 = m1.state_dict(), m2.state_dict()
    return s1.keys() == s2.keys() and all(torch.equal(s1[k], s2[k]) for k in s1)


class TestResume:
    def test_resume_matches_straight_run(self, tiny_bench, tmp_path):
        straight = make_trainer(tiny_bench)
        straight.run()
        part = make_trainer(tiny_bench)
        k = straight.total_steps // 2 + 1  # lands mid-epoch
        part.run(until_step=k)
        part.save(tmp_path / "mid.ckpt")
        resumed = make_trainer(tiny_bench, seed=0)
        resumed.restore(tmp_path / "mid.ckpt")
        assert resumed.step == k
        resumed.run()
        assert resumed.history == straight.history
        assert params_equal(resumed.model, straight.model)

    def test_checkpoint_round_trip(self, tiny_bench, tmp_path):
        t = make_trainer(tiny_bench, epochs=1)
        t.run()
        t.save(tmp_path / "a.ckpt")
        model = load_model(tmp_path / "a.ckpt")
        assert params_equal(model, t.model)
        idx = tiny_bench.store.indices_for(tiny_bench.plan.uda_external_eval)
        assert np.array_equal(t.predict(idx), t.predict(idx))
        a = fold_predictions(t.model, tiny_bench.store, tiny_bench.plan, 0)
        b = fold_predictions(model, tiny_bench.store, tiny_bench.plan, 0)
        assert a == b


class TestAblations:
    def test_no_fairness_gender_head_untouched(self, tiny_bench):
        t = make_trainer(tiny_bench, epochs=1, no_fairness=True)
        before = {k: v.clone() for k, v in t.model.gender_disc.state_dict().items()}
        src, tgt = next(build_batches(tiny_bench.store, t.source_idx, t.target_idx, "UDA", 8, 0, 0))
        t.train_step(src, tgt)
        grads = [p.grad for p in t.model.gender_disc.parameters()]
        assert all(g is None or torch.count_nonzero(g) == 0 for g in grads)
        t.run()
        after = t.model.gender_disc.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)
        assert all(h["lambda_fair"] == 0.0 and h["loss_fair"] == 0.0 for h in t.history)

    def test_no_warmup_constant_lambdas(self, tiny_bench):
        t = make_trainer(tiny_bench, no_warmup=True)
        t.run()
        assert {h["lambda_d"] for h in t.history} == {1.0}
        assert {h["lambda_fair"] for h in t.history} == {0.5}

    def test_warmup_ramps(self, tiny_bench):
        t = make_trainer(tiny_bench)
        t.run()
        lam = [h["lambda_d"] for h in t.history]
        assert lam[0] == 0.0 and lam[-1] == 1.0 and lam == sorted(lam)

    def test_no_mixstyle_equals_mixstyle_off(self, tiny_bench):
        a = make_trainer(tiny_bench, epochs=1, no_mixstyle=True)
        b = make_trainer(tiny_bench, epochs=1, model_cfg=ModelConfig(mixstyle=MixStyleConfig(active=False)))
        a.run(), b.run()
        assert params_equal(a.model, b.model)
        x = torch.from_numpy(tiny_bench.store.x[:6]).unsqueeze(1)
        assert torch.equal(a.model.features(x), b.model.features(x))

    def test_erm_ignores_target(self, tiny_bench):
        t = make_trainer(tiny_bench, epochs=1, align_mode="none")
        assert not t.uses_target
        t.run()
        assert all(h["loss_d"] == 0.0 and h["gamma"] is None for h in t.history)

    @pytest.mark.parametrize("align", ["dann", "cdan", "partial_cdan", "coral"])
    def test_alignment_modes_run(self, tiny_bench, align):
        t = make_trainer(tiny_bench, epochs=1, align_mode=align)
        t.run()
        assert all(np.isfinite(h["objective"]) for h in t.history)
        if align == "partial_cdan":
            assert all(abs(sum(h["gamma"]) - 1) < 1e-5 for h in t.history)

    def test_dg_mode(self, tiny_bench):
        train, _ = tiny_bench.plan.folds[0]
        t = Trainer(TrainProtocol(mode="DG", **FAST), ModelConfig(), tiny_bench.store, train)
        t.run()
        assert t.target_idx is None


class TestLearning:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_task_loss_falls_over_200_steps(self, tiny_bench, seed):
        t = make_trainer(tiny_bench, seed=seed, epochs=100)
        t.run(until_step=200)
        losses = [h["loss_y"] for h in t.history]
        assert len(losses) == 200
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_full_ablation_is_a_plain_classifier(self, tiny_bench):
        """Every switch off reproduces a hand-written supervised loop step for step."""
        off = ModelConfig(mixstyle=MixStyleConfig(active=False))
        t = make_trainer(tiny_bench, model_cfg=off, align_mode="none", no_fairness=True, no_mixstyle=True, seed=5)
        t.run()

        store = tiny_bench.store
        torch.manual_seed(5)
        model = FairPDAModel(replace(off, input_shape=store.input_shape))
        x_train = store.x[t.source_idx]
        model.set_input_stats(float(x_train.mean()), float(x_train.std()))
        opt = torch.optim.Adam(model.parameters(), lr=1e-3, betas=(0.0, 0.999))
        counts = segment_counts(store.patient_of(t.source_idx))
        for epoch in range(FAST["epochs"]):
            for src, _ in build_batches(store, t.source_idx, None, "DG", FAST["batch_size"], 5, epoch):
                loss = task_loss(model(src.x, training=True).logits, src.y, "ce_pn", src.patient_ids, counts)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
        assert params_equal(model, t.model)


class TestSafety:
    def test_divergence_aborts_with_checkpoint(self, tiny_bench, tmp_path):
        t = make_trainer(tiny_bench, divergence_limit=1e-3)
        with pytest.raises(NumericalAbort):
            t.run(abort_checkpoint=tmp_path / "last_good.ckpt")
        assert (tmp_path / "last_good.ckpt").exists()
        assert t.step == 0

    def test_leakage_rejected(self, tiny_bench):
        plan = replace(tiny_bench.plan, folds=list(tiny_bench.plan.folds))
        train, test = plan.folds[0]
        plan.folds[0] = (list(train) + [test[0]], test)
        with pytest.raises(ValidationError, match="both train and evaluation"):
            run_experiment(TrainProtocol(**FAST), ModelConfig(), tiny_bench.store, plan, folds=[0])

    def test_zero_leakage_in_plan(self, tiny_bench):
        plan = tiny_bench.plan
        adapt, ext = plan.uda_adaptation, plan.uda_external_eval
        assert not adapt & ext
        for train, test in plan.folds:
            assert not set(train) & set(test)
            assert not set(train) & (adapt | ext)

    def test_experiment_artifacts(self, tiny_bench, tmp_path):
        rep = run_experiment(TrainProtocol(epochs=1, batch_size=8), ModelConfig(), tiny_bench.store, tiny_bench.plan, tmp_path, "tiny")
        assert {p.name for p in tmp_path.iterdir()} == {"fold0.ckpt", "fold1.ckpt", "fold0_losses.json", "fold1_losses.json", "report.json"}
        assert len(rep.folds) == 2
        ext = [p for p in rep.patient_predictions() if p.cohort == "external"]
        assert {p.patient_id for p in ext} == tiny_bench.plan.uda_external_eval
