import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from veinmatch import autodiff as ad
from veinmatch.data import LabeledSample, SynthSpec, split, synth_generate
from veinmatch.errors import ConstraintError, ContractError, DataError, ParameterError
from veinmatch.imaging import GrayImage
from veinmatch.model import BlockSpec, ModelSpec, build_model
from veinmatch.training import (AdamState, TrainConfig, TrainReport, adam_step,
                                classification_loss, cross_entropy, l2_penalty, make_batches,
                                mg_batch, multitask_loss, train)

SPEC = ModelSpec(input_height=32, input_width=32, blocks=(BlockSpec(1, 4), BlockSpec(1, 8)),
                 head_hidden=(16,), num_classes=4, reduction=2)


def fake_samples(n_ids, per_id, side=32, seed=0):
    rng = np.random.default_rng(seed)
    return [LabeledSample(GrayImage(rng.integers(1, 256, size=(side, side), dtype=np.uint8)),
                          f"id{i:02d}", 1, j)
            for i in range(n_ids) for j in range(per_id)]


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(theta=1.5), dict(lam=-1), dict(lr=0), dict(batch_k=1),
                                        dict(patience=0), dict(penalty_scope="some")])
    def test_invalid(self, kwargs):
        with pytest.raises(ParameterError):
            TrainConfig(**kwargs)

    def test_json_roundtrip(self):
        cfg = TrainConfig(theta=0.1, lam=0.5, freeze=("block1",))
        assert TrainConfig.from_json(cfg.to_json()) == cfg
        assert "lambda" in cfg.to_json()

    def test_unknown_key(self):
        with pytest.raises(ParameterError):
            TrainConfig.from_json({"thetta": 0.3})


class TestBatches:
    def test_exhaustive_small(self):
        batches = make_batches(fake_samples(2, 2), TrainConfig(batch_p=2, batch_k=2))
        assert len(batches) == 1 and sorted(batches[0].ids) == ["id00", "id00", "id01", "id01"]

    def test_ten_by_six(self):
        batches = make_batches(fake_samples(10, 6), TrainConfig(batch_p=2, batch_k=2))
        assert len(batches) == 15
        for b in batches:
            counts = {i: b.ids.count(i) for i in set(b.ids)}
            assert sorted(counts.values()) == [2, 2]
        used = [i for b in batches for i in b.indices]
        assert len(used) == len(set(used)) == 60

    def test_deterministic_per_epoch(self):
        data, cfg = fake_samples(6, 4), TrainConfig(batch_p=3, batch_k=2, seed=9)
        first = [b.indices for b in make_batches(data, cfg, epoch=1)]
        assert first == [b.indices for b in make_batches(data, cfg, epoch=1)]
        assert first != [b.indices for b in make_batches(data, cfg, epoch=2)]

    @given(st.integers(2, 6), st.integers(2, 3), st.lists(st.integers(2, 7), min_size=6, max_size=9),
           st.integers(0, 1000))
    def test_pk_invariant(self, p, k, sizes, seed):
        data = []
        for i, n in enumerate(sizes):
            data += [LabeledSample(GrayImage(np.ones((4, 4), np.uint8)), f"id{i}", 1, j) for j in range(n)]
        cfg = TrainConfig(batch_p=p, batch_k=k, seed=seed)
        if sum(n >= k for n in sizes) < p:
            with pytest.raises(DataError):
                make_batches(data, cfg)
            return
        used = []
        for b in make_batches(data, cfg):
            assert len(b.ids) == p * k
            assert sorted({b.ids.count(i) for i in b.ids}) == [k]
            used += b.indices
        assert len(used) == len(set(used))

    def test_too_few_identities(self):
        with pytest.raises(DataError):
            make_batches(fake_samples(1, 6), TrainConfig(batch_p=2, batch_k=2))


class TestLossTerms:
    @pytest.mark.parametrize("probs, labels, expect", [
        ([[1.0, 0.0], [0.0, 1.0]], [0, 1], 0.0),
        ([[0.25] * 4], [2], math.log(4)),
        ([[0.5, 0.5], [0.25, 0.75]], [0, 0], (math.log(2) + math.log(4)) / 2),
    ])
    def test_cross_entropy(self, probs, labels, expect):
        assert cross_entropy(np.array(probs), np.array(labels)).item() == pytest.approx(expect, abs=1e-6)

    def test_cross_entropy_uniform_value(self):
        assert round(cross_entropy(np.full((1, 4), 0.25), np.array([0])).item(), 6) == 1.386294

    def test_cross_entropy_floor(self):
        assert cross_entropy(np.array([[1.0, 0.0]]), np.array([1])).item() == pytest.approx(-math.log(1e-12))

    def test_l2_values(self):
        params = build_model(SPEC, 0)
        params.tensors["head.out.weight"] = np.zeros_like(params.tensors["head.out.weight"])
        assert l2_penalty(params).item() == 0.0
        params.tensors["head.out.weight"].flat[:2] = [3.0, 4.0]
        assert l2_penalty(params).item() == 5.0
        params.tensors["head.out.weight"] *= -2
        assert l2_penalty(params).item() == 10.0

    def test_l2_scope_all(self):
        params = build_model(SPEC, 0)
        every = np.sqrt(sum((v ** 2).sum() for v in params.tensors.values()))
        assert l2_penalty(params, scope="all").item() == pytest.approx(every)

    @pytest.mark.parametrize("emb, ids, expect", [
        ([[1, 0], [1, 0], [0, 1]], ["a", "a", "b"], 1.0),
        ([[1, 0], [0, 1], [1, 0]], ["a", "a", "b"], -0.5),
        ([[1, 2], [1, 2], [1, 2], [1, 2]], ["a", "a", "b", "b"], 0.0),
    ])
    def test_mg(self, emb, ids, expect):
        assert mg_batch(np.array(emb, float), ids).item() == pytest.approx(expect, abs=1e-12)

    def test_mg_needs_both_pair_kinds(self):
        with pytest.raises(ConstraintError):
            mg_batch(np.eye(2), ["a", "b"])

    def test_multitask_arithmetic(self):
        # CE = 1, MG = 0.5, lambda * ||w|| = 0.01
        spec = ModelSpec(input_height=8, input_width=8, blocks=(BlockSpec(1, 1),), head_hidden=(),
                         num_classes=2, spatial_attention=False, channel_attention=False)
        params = build_model(spec, 0)
        w = np.zeros((2, 16))
        w[0, 0] = 1.0
        params.tensors["head.out.weight"] = w
        logits = np.array([[0.0, 0.0], [0.0, 0.0]])
        p_true = math.exp(-1.0)
        logits[:, 0] = math.log(p_true / (1 - p_true))
        emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(0.75)], [0.5, math.sqrt(0.75)]])
        # pairs: a-a 1, b-b 1, and four a-b pairs of 0.5 -> MG = 1 - 0.5
        ids = ["a", "a", "b", "b"]
        logits = np.vstack([logits, logits])
        labels = np.array([0, 0, 0, 0])
        cfg = TrainConfig(theta=0.3, lam=0.01)
        got = multitask_loss(logits, labels, emb, ids, params, cfg).item()
        assert got == pytest.approx(0.3 + 0.35 + 0.01, abs=1e-12)

    def test_theta_zero_perfect_clusters(self):
        params = build_model(SPEC, 0)
        params.tensors["head.out.weight"] = np.zeros_like(params.tensors["head.out.weight"])
        emb = np.array([[1.0, 0], [1.0, 0], [0, 1.0], [0, 1.0]])
        loss = multitask_loss(np.zeros((4, 4)), np.zeros(4, int), emb, ["a", "a", "b", "b"], params,
                              TrainConfig(theta=0.0))
        assert loss.item() == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_theta_one_is_classification_loss(self, seed):
        rng = np.random.default_rng(seed)
        params = build_model(SPEC, seed)
        logits, labels = rng.normal(size=(4, 4)), rng.integers(0, 4, size=4)
        cfg = TrainConfig(theta=1.0, lam=float(rng.uniform(0, 1)))
        a = multitask_loss(logits, labels, rng.normal(size=(4, 3)), list("abcd"), params, cfg).item()
        ce = cross_entropy(ad.softmax(logits), labels).item()
        assert a == ce + cfg.lam * l2_penalty(params).item()
        assert a == classification_loss(logits, labels, params, cfg).item()


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = build_model(SPEC, 0)
        new, _ = adam_step(params, {k: np.zeros_like(v) for k, v in params.tensors.items()},
                           AdamState(), lr=0.1)
        assert all(np.array_equal(new.tensors[k], params.tensors[k]) for k in params.tensors)

    def test_first_step_is_minus_lr(self):
        params = build_model(SPEC, 0)
        lr, eps = 1e-3, 1e-8
        new, state = adam_step(params, {k: np.ones_like(v) for k, v in params.tensors.items()},
                               AdamState(), lr=lr, eps=eps)
        for k in params.tensors:
            np.testing.assert_allclose(new.tensors[k] - params.tensors[k], -lr / (1 + eps), rtol=1e-9)
        assert state.t == 1

    def test_frozen_gradient_rejected(self):
        from veinmatch.model import apply_freeze
        params = apply_freeze(build_model(SPEC, 0), ["block1"])
        with pytest.raises(ContractError):
            adam_step(params, {k: np.zeros_like(v) for k, v in params.tensors.items()}, AdamState(), 0.1)

    def test_missing_gradient_rejected(self):
        with pytest.raises(ContractError):
            adam_step(build_model(SPEC, 0), {}, AdamState(), 0.1)


@pytest.fixture(scope="module")
def tiny_split():
    samples = synth_generate(SynthSpec(identities=4, images_per_session=4, side=32, seed=1))
    return split(samples, 0, 0.25)


class TestTrain:
    def test_zero_epochs(self, tiny_split):
        params, report = train(tiny_split.train, tiny_split.validation, SPEC, TrainConfig(epochs=0))
        assert report.loss == [] and report.val_acc == []
        init = build_model(SPEC, 0)
        assert params.content_hash() == init.content_hash()

    def test_bit_identical_runs(self, tiny_split):
        cfg = TrainConfig(epochs=2, batch_p=2, lr=1e-3, seed=3)
        a, ra = train(tiny_split.train, tiny_split.validation, SPEC, cfg)
        b, rb = train(tiny_split.train, tiny_split.validation, SPEC, cfg)
        assert a.content_hash() == b.content_hash()
        assert ra.to_csv() == rb.to_csv()

    def test_frozen_block_unchanged(self, tiny_split):
        init = build_model(SPEC, 0)
        cfg = TrainConfig(epochs=3, batch_p=2, lr=1e-2, freeze=("block1.conv1",))
        params, _ = train(tiny_split.train, tiny_split.validation, SPEC, cfg)
        for name in ("block1.conv1.weight", "block1.conv1.bias"):
            assert np.array_equal(params.tensors[name], init.tensors[name])
        assert not np.array_equal(params.tensors["block2.conv1.weight"], init.tensors["block2.conv1.weight"])

    def test_full_freeze_changes_nothing(self, tiny_split):
        groups = build_model(SPEC, 0).groups()
        cfg = TrainConfig(epochs=3, batch_p=2, patience=5, freeze=tuple(groups), theta=1.0)
        params, report = train(tiny_split.train, tiny_split.validation, SPEC, cfg)
        assert params.content_hash() == build_model(SPEC, 0).content_hash()
        assert len(set(report.val_acc)) == 1

    def test_class_count_from_data(self, tiny_split):
        spec = ModelSpec(**{**SPEC.__dict__, "num_classes": 9})
        params, report = train(tiny_split.train, tiny_split.validation, spec, TrainConfig(epochs=1, batch_p=2))
        assert params.spec.num_classes == 4 and report.classes == ["id000", "id001", "id002", "id003"]

    def test_stray_validation_identity(self, tiny_split):
        with pytest.raises(DataError):
            train(tiny_split.train[:8], tiny_split.validation, SPEC, TrainConfig(epochs=1))

    def test_report_csv(self):
        rep = TrainReport(loss=[1.0], train_acc=[0.5], val_acc=[0.25], batch_mg=[0.1], val_loss=[2.0])
        assert rep.to_csv() == "epoch,loss,train_acc,val_acc,batch_mg_mean\n1,1,0.5,0.25,0.1\n"
