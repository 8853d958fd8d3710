"""PEFT strategies: trainable-set sizes, forward preservation, LoRA merging."""

import copy

import numpy as np
import pytest

from conftest import random_images
from twostage.errors import ArgumentError, StateError
from twostage.model import DualEncoder, ModelConfig
from twostage.peft import STRATEGIES, attach, detach_strategy, merge_lora, peft_params


@pytest.fixture
def base_model():
    return DualEncoder(ModelConfig(seed=4))


def outputs(model, n=100, seed=9):
    return (model.encode_images(random_images(n, seed=seed)).data,
            model.encode_texts(range(model.config.n_classes)).data)


class TestCounts:
    @pytest.mark.parametrize("strategy,expected", [("layernorm", 640), ("bitfit", 928),
                                                   ("lora", 1536), ("prompt", 128)])
    def test_reference_architecture(self, base_model, strategy, expected):
        assert peft_params(strategy, base_model) == expected
        assert attach(strategy, base_model).n_scalars() == expected

    def test_layernorm_formula(self, base_model):
        E, d = 2, 32
        assert peft_params("layernorm", base_model) == 2 * 2 * (2 * E + 1) * d

    @pytest.mark.parametrize("rank", [1, 2, 4, 8])
    def test_lora_formula(self, base_model, rank):
        # q, k, v per block per tower, each r * (d_in + d_out)
        assert peft_params("lora", base_model, rank=rank) == 2 * 2 * 3 * rank * (32 + 32)

    @pytest.mark.parametrize("ctx_len", [1, 4, 8])
    def test_prompt_formula(self, base_model, ctx_len):
        assert peft_params("prompt", base_model, ctx_len=ctx_len) == ctx_len * 32

    def test_counts_do_not_mutate(self, base_model):
        before = base_model.registry_hash()
        for s in STRATEGIES:
            peft_params(s, base_model)
        assert base_model.registry_hash() == before and base_model.strategy is None


class TestAttach:
    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_forward_preserving(self, base_model, strategy):
        before = outputs(base_model)
        attach(strategy, base_model)
        after = outputs(base_model)
        for a, b in zip(before, after):
            assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_only_omega_trainable(self, base_model, strategy):
        omega = attach(strategy, base_model)
        trainable = {n for n, p in base_model.named_parameters() if p.requires_grad}
        assert trainable == set(omega.names)

    def test_modality_partition(self, base_model):
        omega = attach("layernorm", base_model)
        assert len(omega.vision) + len(omega.text) == len(omega)
        assert len(omega.vision) == len(omega.text) == 10

    def test_bitfit_excludes_layer_norm_shifts(self, base_model):
        omega = attach("bitfit", base_model)
        assert all("bias_" in n for n in omega.names)

    def test_prompt_is_text_only(self, base_model):
        omega = attach("prompt", base_model)
        assert omega.vision == [] and omega.names == ["text.prompt.ctx"]

    def test_unknown_strategy(self, base_model):
        with pytest.raises(ArgumentError):
            attach("adapter", base_model)
        with pytest.raises(ArgumentError):
            peft_params("adapter", base_model)

    def test_double_attach(self, base_model):
        attach("layernorm", base_model)
        with pytest.raises(StateError):
            attach("bitfit", base_model)

    def test_bad_rank_and_ctx(self, base_model):
        with pytest.raises(ArgumentError):
            attach("lora", base_model, rank=0)
        with pytest.raises(ArgumentError):
            attach("prompt", copy.deepcopy(base_model), ctx_len=20)

    def test_detach_restores_plain_backbone(self, base_model):
        before = outputs(base_model)
        attach("lora", base_model)
        detach_strategy(base_model)
        assert base_model.strategy is None and not base_model.lora
        np.testing.assert_array_equal(outputs(base_model)[0], before[0])


class TestLoraMerge:
    def perturb(self, model, seed=0):
        rng = np.random.default_rng(seed)
        for mod in model.lora.values():
            mod.B.data[...] = rng.normal(0, 0.1, size=mod.B.shape)

    @pytest.mark.parametrize("rank", [1, 2, 4])
    def test_merge_preserves_outputs(self, base_model, rank):
        attach("lora", base_model, rank=rank)
        self.perturb(base_model)
        before = outputs(base_model)
        merge_lora(base_model)
        after = outputs(base_model)
        assert not base_model.lora and base_model.lora_merged
        for a, b in zip(before, after):
            assert np.max(np.abs(a - b)) < 1e-10

    def test_adapter_changes_outputs(self, base_model):
        before = outputs(base_model)
        attach("lora", base_model)
        self.perturb(base_model)
        assert np.max(np.abs(outputs(base_model)[0] - before[0])) > 1e-4

    def test_merge_twice(self, base_model):
        attach("lora", base_model)
        merge_lora(base_model)
        with pytest.raises(StateError):
            merge_lora(base_model)

    def test_merge_without_adapters(self, base_model):
        with pytest.raises(StateError):
            merge_lora(base_model)
