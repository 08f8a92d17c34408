import numpy as np
import pytest

from secap.encoder import EncoderConfig
from secap.errors import ConfigurationError
from secap.gradcheck import check_parameter_gradients
from secap.losses import LossWeights
from secap.model import ABLATIONS, ModelConfig, SeCapModel

MICRO_ENC = dict(image_h=16, image_w=16, embed_dim=16, depth=1, heads=2, ffn_mult=2)


def micro_cfg(**kw):
    enc = EncoderConfig(**MICRO_ENC)
    merged = dict(encoder=enc, num_ids=2, num_views=2, prompt_len=4, seed=0)
    merged.update(kw)
    return ModelConfig(**merged)


def micro_batch(rng, b=4):
    images = rng.standard_normal((b, 3, 16, 16))
    ids = np.arange(b) % 2
    views = (np.arange(b) // 2) % 2
    return images, ids, views


class TestRegistry:
    def test_names_unique(self):
        model = SeCapModel(micro_cfg())
        names = [p.name for p in model.parameters()]
        assert len(names) == len(set(names))

    def test_same_seed_bit_identical(self):
        a = SeCapModel(micro_cfg())
        b = SeCapModel(micro_cfg())
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.name == pb.name
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_different_seed_differs(self):
        a = SeCapModel(micro_cfg())
        b = SeCapModel(micro_cfg(seed=1))
        assert any(pa.data.tobytes() != pb.data.tobytes()
                   for pa, pb in zip(a.parameters(), b.parameters()))

    @pytest.mark.parametrize("ablate", ABLATIONS)
    def test_every_parameter_receives_gradient(self, ablate, rng):
        model = SeCapModel(micro_cfg(ablate=ablate), dtype=np.float64)
        images, ids, views = micro_batch(rng)
        total, _ = model.compute_losses(images, ids, views, LossWeights())
        from secap.tensor import backward
        backward(total)
        missing = [p.name for p in model.parameters() if p.grad is None]
        assert not missing, missing

    def test_unknown_ablation_rejected(self):
        with pytest.raises(ConfigurationError):
            micro_cfg(ablate="no-encoder")


class TestAblationStructure:
    def test_full_model_has_all_parts(self, rng):
        model = SeCapModel(micro_cfg())
        images, ids, views = micro_batch(rng)
        _, parts = model.compute_losses(images, ids, views, LossWeights())
        assert parts.id_l is not None and parts.view is not None

    def test_no_prm_keeps_bank_without_calibration(self, rng):
        model = SeCapModel(micro_cfg(ablate="no-prm"))
        assert model.prm is None and model.bank is not None and model.lfrm is not None
        names = {p.name for p in model.parameters()}
        assert "prm.prompts" in names
        assert not any(".sa." in n and n.startswith("prm") for n in names)

    def test_no_vdt_drops_view_terms(self, rng):
        model = SeCapModel(micro_cfg(ablate="no-vdt"))
        images, ids, views = micro_batch(rng)
        _, parts = model.compute_losses(images, ids, views, LossWeights())
        assert parts.view is None and parts.orth is None
        assert parts.id_l is not None  # local branch still active

    def test_no_lfrm_drops_local_terms(self, rng):
        model = SeCapModel(micro_cfg(ablate="no-lfrm"))
        images, ids, views = micro_batch(rng)
        _, parts = model.compute_losses(images, ids, views, LossWeights())
        assert parts.id_l is None and parts.tri_l is None
        assert parts.view is not None  # decoupling still active

    def test_baseline_keeps_only_global_terms(self, rng):
        model = SeCapModel(micro_cfg(ablate="baseline"))
        images, ids, views = micro_batch(rng)
        _, parts = model.compute_losses(images, ids, views, LossWeights())
        assert parts.id_l is None and parts.view is None
        assert parts.id_g is not None and parts.tri_g is not None


class TestInference:
    def test_feature_dim_doubles_with_local_branch(self, rng):
        images, _, _ = micro_batch(rng)
        full = SeCapModel(micro_cfg()).inference_features(images)
        slim = SeCapModel(micro_cfg(ablate="baseline")).inference_features(images)
        assert full.shape == (4, 32)
        assert slim.shape == (4, 16)

    def test_inference_leaves_tape_empty(self, rng):
        from secap.tensor import tape
        images, _, _ = micro_batch(rng)
        SeCapModel(micro_cfg()).inference_features(images)
        assert not tape().entries

    def test_duplicate_images_give_identical_rows(self, rng):
        images, _, _ = micro_batch(rng, b=2)
        doubled = np.concatenate([images, images], axis=0)
        feats = SeCapModel(micro_cfg()).inference_features(doubled)
        np.testing.assert_array_equal(feats[:2], feats[2:])


class TestMicroBatchGradient:
    def test_full_loss_two_image_batch(self, rng):
        """Whole-model analytic gradients vs central differences, tiny config."""
        from secap.gradcheck import randomize_for_gradcheck
        model = SeCapModel(micro_cfg(), dtype=np.float64)
        randomize_for_gradcheck(model.parameters(), seed=2)
        images = rng.standard_normal((2, 3, 16, 16))
        ids = np.array([0, 1])
        views = np.array([0, 1])
        weights = LossWeights()

        def loss_fn():
            total, _ = model.compute_losses(images, ids, views, weights)
            return total

        worst, name, _ = check_parameter_gradients(
            model.parameters(), loss_fn, coords_per_param=3, seed=11)
        assert worst < 1e-4, name
