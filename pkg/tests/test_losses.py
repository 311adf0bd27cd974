"""Consistency losses and the twin-pass step: worked values, symmetry,
detachment, and the reduction to a single pass."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loradrop import tensor as T
from loradrop.errors import ContractError
from loradrop.losses import (
    CompensationKind,
    CompensationSpec,
    js_to_inference,
    kl_bidirectional,
    task_loss,
    twin_pass_step,
)
from loradrop.model import Model, ModelConfig
from loradrop.tensor import Tensor

SMALL = ModelConfig(num_layers=2, d_model=8, num_heads=2, d_ff=16, vocab_size=8,
                    max_len=6, lora_rank=2, num_classes=3)


def _kl_ref(p, q):
    """Independent oracle: direct sum with clamped logs."""
    p, q = np.asarray(p), np.asarray(q)
    return float(np.sum(p * (np.log(np.maximum(p, 1e-12)) - np.log(np.maximum(q, 1e-12)))))


class TestKLBidirectional:
    def test_identical_distributions(self):
        assert kl_bidirectional(Tensor([0.3, 0.7]), Tensor([0.3, 0.7])).item() == 0.0

    def test_worked_pair(self):
        p1, p2 = [0.5, 0.5], [0.25, 0.75]
        expected = 0.5 * (_kl_ref(p1, p2) + _kl_ref(p2, p1))
        got = kl_bidirectional(Tensor(p1), Tensor(p2)).item()
        assert abs(got - expected) <= 1e-15
        assert abs(_kl_ref(p1, p2) - 0.143841) <= 5e-7
        assert abs(_kl_ref(p2, p1) - 0.130812) <= 5e-7
        assert abs(got - 0.137327) <= 1e-6

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = rng.dirichlet(np.ones(5))
            q = rng.dirichlet(np.ones(5))
            a = kl_bidirectional(Tensor(p), Tensor(q)).item()
            b = kl_bidirectional(Tensor(q), Tensor(p)).item()
            assert a == b
            assert a >= 0.0

    @given(st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_nonnegative_and_zero_iff_equal(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(4))
        q = rng.dirichlet(np.ones(4))
        val = kl_bidirectional(Tensor(p), Tensor(q)).item()
        assert val >= 0.0
        if np.max(np.abs(p - q)) > 1e-6:
            assert val > 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            kl_bidirectional(Tensor([0.5, 0.5]), Tensor([0.2, 0.3, 0.5]))

    def test_invalid_distribution_rejected(self):
        with pytest.raises(ContractError):
            kl_bidirectional(Tensor([0.9, 0.3]), Tensor([0.5, 0.5]))

    def test_batched_mean(self):
        p = Tensor([[0.5, 0.5], [0.3, 0.7]])
        q = Tensor([[0.25, 0.75], [0.3, 0.7]])
        row0 = 0.5 * (_kl_ref([0.5, 0.5], [0.25, 0.75]) + _kl_ref([0.25, 0.75], [0.5, 0.5]))
        assert abs(kl_bidirectional(p, q).item() - row0 / 2) <= 1e-12


class TestJSToInference:
    def test_identical(self):
        assert js_to_inference(Tensor([0.4, 0.6]), Tensor([0.4, 0.6])).item() == 0.0

    def test_single_kl_term(self):
        got = js_to_inference(Tensor([0.5, 0.5]), Tensor([0.25, 0.75])).item()
        assert abs(got - _kl_ref([0.5, 0.5], [0.25, 0.75])) <= 1e-15
        assert abs(got - 0.143841) <= 5e-7

    def test_gradient_flows_only_into_train_branch(self):
        p_train = Tensor([0.5, 0.5], requires_grad=True)
        p_infer = Tensor([0.25, 0.75], requires_grad=True)
        T.backward(js_to_inference(p_train, p_infer))
        assert p_train.grad is not None
        assert p_infer.grad is None


class TestTaskLoss:
    def test_perfect_one_hot(self):
        p = np.full((1, 4), 1e-12)
        p[0, 2] = 1.0 - 3e-12
        assert task_loss(Tensor(p), [2]).item() <= 1e-10

    def test_uniform_is_log_c(self):
        for c in (2, 5, 32):
            p = np.full((3, c), 1.0 / c)
            got = task_loss(Tensor(p), [0, 1, c - 1]).item()
            assert abs(got - math.log(c)) <= 1e-12

    def test_mse_zero_at_target(self):
        assert task_loss(Tensor([1.0, -2.0]), [1.0, -2.0]).item() == 0.0

    def test_class_out_of_range(self):
        with pytest.raises(ContractError):
            task_loss(Tensor([[0.5, 0.5]]), [2])


class TestTwinPass:
    tokens = np.random.default_rng(0).integers(0, 8, size=(4, 6))
    targets = np.array([0, 1, 2, 0])

    def test_none_reduces_to_single_pass(self):
        m = Model(SMALL, [], init_seed=1)
        res = twin_pass_step((self.tokens, self.targets), m, CompensationSpec(), step_seed=1)
        assert res.total_loss == res.task_loss
        assert res.consistency_loss == 0.0
        assert res.p2 is None

    def test_identical_masks_give_zero_consistency(self):
        from loradrop.dropout import DropoutSpec, Position
        from loradrop.masks import StructuralPattern

        specs = [DropoutSpec(position=Position.FFN_HIDDEN, pattern=StructuralPattern.ELEMENT, rate=0.3)]
        m = Model(SMALL, specs, init_seed=1)
        rng = np.random.default_rng(8)
        for p in m.trainable_parameters().values():
            p.data = rng.normal(0.0, 0.3, size=p.data.shape)  # zero head would mask dropout
        comp = CompensationSpec(CompensationKind.KL_BIDIRECTIONAL, 1.0)
        res = twin_pass_step((self.tokens, self.targets), m, comp, step_seed=5,
                             force_same_masks=True)
        assert res.consistency_loss == 0.0
        res2 = twin_pass_step((self.tokens, self.targets), m, comp, step_seed=5)
        assert res2.consistency_loss > 0.0

    def test_total_is_task_plus_weighted_consistency(self):
        from loradrop.dropout import DropoutSpec, Position
        from loradrop.masks import StructuralPattern

        specs = [DropoutSpec(position=Position.FFN_HIDDEN, pattern=StructuralPattern.ELEMENT, rate=0.3)]
        m = Model(SMALL, specs, init_seed=1)
        comp = CompensationSpec(CompensationKind.KL_BIDIRECTIONAL, 1.0)
        res = twin_pass_step((self.tokens, self.targets), m, comp, step_seed=2)
        assert abs(res.total_loss - (res.task_loss + 1.0 * res.consistency_loss)) <= 1e-12

    def test_js_uses_inference_distribution(self):
        from loradrop.dropout import DropoutSpec, Position
        from loradrop.masks import StructuralPattern

        specs = [DropoutSpec(position=Position.FFN_HIDDEN, pattern=StructuralPattern.ELEMENT, rate=0.3)]
        m = Model(SMALL, specs, init_seed=1)
        comp = CompensationSpec(CompensationKind.JS_TO_INFERENCE, 0.5)
        res = twin_pass_step((self.tokens, self.targets), m, comp, step_seed=2)
        infer = m.forward(self.tokens, training=False).output.data
        np.testing.assert_array_equal(res.p2, infer)

    def test_backward_touches_branch_one_only(self):
        """Gradients equal a manual branch-1-only computation with the same
        masks, so branch 2 contributes nothing to the parameter updates."""
        from loradrop.dropout import DropoutSpec, Position
        from loradrop.masks import StructuralPattern

        specs = [DropoutSpec(position=Position.FFN_HIDDEN, pattern=StructuralPattern.ELEMENT, rate=0.3)]

        def grads_via_twin():
            m = Model(SMALL, specs, init_seed=1)
            comp = CompensationSpec(CompensationKind.KL_BIDIRECTIONAL, 0.7)
            res = twin_pass_step((self.tokens, self.targets), m, comp, step_seed=9)
            m.zero_grad()
            T.backward(res.loss)
            return {k: p.grad.copy() for k, p in m.trainable_parameters().items()}, res

        def grads_manual():
            m = Model(SMALL, specs, init_seed=1)
            res1 = m.forward(self.tokens, training=True, mask_seed=9, branch=0)
            with T.no_grad():
                res2 = m.forward(self.tokens, training=True, mask_seed=9, branch=1)
            loss = T.add(task_loss(res1.output, self.targets),
                         T.scale(kl_bidirectional(res1.output, Tensor(res2.output.data)), 0.7))
            m.zero_grad()
            T.backward(loss)
            return {k: p.grad.copy() for k, p in m.trainable_parameters().items()}

        twin, res = grads_via_twin()
        manual = grads_manual()
        for k in twin:
            np.testing.assert_array_equal(twin[k], manual[k])

    def test_regression_consistency_is_representation_distance(self):
        cfg = ModelConfig(num_layers=2, d_model=8, num_heads=2, d_ff=16, vocab_size=8,
                          max_len=6, lora_rank=2, head="regressor", num_classes=2)
        m = Model(cfg, [], init_seed=1)
        comp = CompensationSpec(CompensationKind.KL_BIDIRECTIONAL, 1.0)
        res = twin_pass_step((self.tokens, np.zeros(4)), m, comp, step_seed=3)
        # no dropout: both branches identical, distance zero
        assert res.consistency_loss == 0.0


class TestConsistencyWeightEffect:
    def test_larger_weight_reduces_dropout_sensitivity(self):
        """Training with the KL term makes the trained model's output
        distribution less mask-sensitive than training without it
        (median over 5 seeds of the post-training twin-pass KL)."""
        from loradrop.config import from_dict
        from loradrop.harness import train
        from loradrop.tasks import generate

        def post_training_sensitivity(weight, seed):
            doc = {
                "model": {"num_layers": 2, "d_model": 16, "num_heads": 2, "d_ff": 32,
                          "vocab_size": 8, "max_len": 8, "lora_rank": 2, "num_classes": 8},
                "task": {"vocab_size": 8, "seq_len": 8, "n_train": 64, "n_eval": 128,
                         "label_noise": 0.1, "data_seed": 2},
                "dropout": [{"position": "ffn_hidden", "pattern": "element", "rate": 0.3},
                            {"position": "attn_logits", "pattern": "column", "rate": 0.2}],
                "compensation": {"kind": "kl_bidirectional", "weight": weight},
                "optimizer": {"lr": 5e-3, "epochs": 30, "batch_size": 32, "eval_every": 15},
                "seed": seed,
            }
            cfg = from_dict(doc)
            res = train(cfg)
            data = generate(cfg.task)
            comp = CompensationSpec(CompensationKind.KL_BIDIRECTIONAL, 1.0)
            vals = []
            for probe_seed in range(4):
                out = twin_pass_step((data.eval_tokens[:32], data.eval_targets[:32]),
                                     res.model, comp, step_seed=1000 + probe_seed)
                vals.append(out.consistency_loss)
            return float(np.mean(vals))

        seeds = [1, 2, 3, 4, 5]
        without = [post_training_sensitivity(0.0, s) for s in seeds]
        with_kl = [post_training_sensitivity(1.0, s) for s in seeds]
        assert np.median(with_kl) <= np.median(without), (with_kl, without)
