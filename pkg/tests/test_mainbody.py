import os
import tempfile
import unittest

import numpy as np
import torch

from engine import backbone, mainbody
from engine.backbone import BackboneConfig, ShapeError
from engine.gradcheck import check_gradients
from engine.losses import cross_entropy
from engine.mainbody import GapProfile, StaleMemoryError, UnfrozenMetaBranchError
from engine.tensor_ops import crop_and_upsample

CONFIG = BackboneConfig(n_classes=3, base_channels=4)


def _frozen_meta(seed=0, dtype=torch.float32):
    return backbone.init_backbone(CONFIG, seed=seed, dtype=dtype).freeze()


def _batch(seed, n=2, side=32, dtype=torch.float32):
    return torch.rand(n, 3, side, side, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def _profile(layers, branch="x1"):
    return GapProfile(branch=branch, scores=(0.0,) * CONFIG.head_index, tau=0.5, gap_layers=tuple(layers))


class GapDetectionTests(unittest.TestCase):
    def test_score_formula(self):
        self.assertAlmostEqual(mainbody.gap_score(2.0, 1.0, 1.0, 1.0), 1.0, places=6)
        self.assertAlmostEqual(mainbody.gap_score(1.0, 1.0, 3.0, 1.0), 2.0, places=6)

    def test_identical_calibration_falls_back_to_first_two_layers(self):
        x = _batch(1)
        profile = mainbody.detect_gaps(_frozen_meta(), x, x.clone(), 0.5, CONFIG)
        self.assertEqual(len(profile.scores), CONFIG.head_index)
        self.assertTrue(all(score == 0.0 for score in profile.scores))
        self.assertEqual(profile.gap_layers, (0, 1))

    def test_unfrozen_meta_branch_is_rejected(self):
        meta = backbone.init_backbone(CONFIG, seed=0)
        with self.assertRaises(UnfrozenMetaBranchError):
            mainbody.detect_gaps(meta, _batch(1), _batch(2), 0.5, CONFIG)

    def test_threshold_selection_and_fallback_ties(self):
        self.assertEqual(mainbody.select_gap_layers([0.1, 0.9, 0.2, 0.7], 0.5), (1, 3))
        self.assertEqual(mainbody.select_gap_layers([0.3, 0.1, 0.3, 0.1], 0.5), (0, 2))
        self.assertEqual(mainbody.select_gap_layers([0.0, 0.0, 0.0], 0.5), (0, 1))

    def test_different_magnifications_give_nonzero_scores_and_stable_gaps(self):
        meta = _frozen_meta(seed=2)
        coarse = torch.nn.functional.avg_pool2d(_batch(3, side=128), 4)
        fine = _batch(3, side=128)[..., 48:80, 48:80]
        first = mainbody.detect_gaps(meta, coarse, fine, 0.5, CONFIG)
        second = mainbody.detect_gaps(meta, coarse, fine, 0.5, CONFIG)
        self.assertTrue(any(score > 0 for score in first.scores))
        self.assertEqual(first, second)
        self.assertTrue(first.gap_layers)

    def test_raising_tau_never_enlarges_gap_set(self):
        rng = np.random.default_rng(6)
        taus = np.linspace(0.0, 1.0, 21)
        for _ in range(30):
            scores = tuple(float(s) for s in rng.uniform(0.0, 1.0, size=6))
            previous = None
            for tau in taus:
                chosen = mainbody.select_gap_layers(scores, float(tau))
                if previous is not None and any(s > tau for s in scores):
                    self.assertTrue(set(chosen) <= set(previous), (scores, tau))
                previous = chosen

    def test_detected_gaps_shrink_as_tau_rises(self):
        meta = _frozen_meta(seed=2)
        coarse = torch.nn.functional.avg_pool2d(_batch(3, side=128), 4)
        fine = _batch(3, side=128)[..., 48:80, 48:80]
        profiles = [mainbody.detect_gaps(meta, coarse, fine, tau, CONFIG) for tau in (0.1, 0.3, 0.5, 0.7, 0.9)]
        for low, high in zip(profiles, profiles[1:]):
            if any(score > high.tau for score in high.scores):
                self.assertTrue(set(high.gap_layers) <= set(low.gap_layers))
            else:
                self.assertEqual(len(high.gap_layers), mainbody.FALLBACK_LAYERS)

    def test_larger_deviation_never_lowers_score(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            mu3, v3 = float(rng.normal()), float(rng.uniform(0.1, 2.0))
            d = float(rng.uniform(0.0, 1.0))
            low = mainbody.gap_score(mu3 + d, mu3, v3, v3)
            high = mainbody.gap_score(mu3 + 2 * d, mu3, v3, v3)
            self.assertGreaterEqual(high, low)

    def test_non_gap_and_shared_profiles(self):
        profile = GapProfile("x1", (0.9, 0.1, 0.8, 0.05, 0.3, 0.2), 0.5, (0, 2))
        self.assertEqual(mainbody.non_gap_layers(profile, 6).gap_layers, (1, 3))
        shared = mainbody.shared_profiles({"x1": profile, "x2": profile.with_layers((4,))})
        self.assertEqual(shared["x1"].gap_layers, (0, 2, 4))
        self.assertEqual(shared["x2"].gap_layers, (0, 2, 4))

    def test_profile_file_round_trip(self):
        profile = GapProfile("x2", (0.25, 0.75), 0.5, (1,))
        with tempfile.TemporaryDirectory() as temp_dir:
            path = os.path.join(temp_dir, "gaps_x2.json")
            mainbody.save_profile(profile, path)
            self.assertEqual(mainbody.load_profile(path), profile)


class FeatureMemoryTests(unittest.TestCase):
    def test_meta_forward_records_gap_layers_only(self):
        meta = _frozen_meta()
        x3 = _batch(5)
        logits, memory = mainbody.meta_forward(meta, x3, (2, 4), (11, 12), CONFIG)
        plain, _ = backbone.forward(meta, x3, CONFIG)
        self.assertTrue(torch.equal(logits, plain))
        self.assertEqual(memory.layers(), (2, 4))
        self.assertEqual(memory.scope, (11, 12))
        for layer in (2, 4):
            self.assertEqual(tuple(memory.recall(layer, (11, 12)).shape[1:]), CONFIG.tap_shape(layer, 32))

    def test_stale_or_missing_entries_raise(self):
        _, memory = mainbody.meta_forward(_frozen_meta(), _batch(5), (2,), (7, 8), CONFIG)
        with self.assertRaises(StaleMemoryError) as ctx:
            memory.recall(2, (7, 9))
        self.assertEqual(ctx.exception.patch_ids, (7, 9))
        with self.assertRaises(StaleMemoryError):
            memory.recall(3, (7, 8))

    def test_entries_are_read_only(self):
        _, memory = mainbody.meta_forward(_frozen_meta(), _batch(5), (2,), (1,), CONFIG)
        with self.assertRaises(TypeError):
            memory.entries[5] = torch.zeros(1)


class MemRMTests(unittest.TestCase):
    def test_full_crop_becomes_constant_plane(self):
        a = torch.rand(1, 2, 16, 16, generator=torch.Generator().manual_seed(0))
        crop = crop_and_upsample(a, 16)
        self.assertEqual(tuple(crop.shape), (1, 2, 16, 16))
        for channel in range(2):
            self.assertTrue(torch.allclose(crop[0, channel], a[0, channel, 7, 7].expand(16, 16)))

    def test_zero_kernels_give_bias_broadcast(self):
        c = 3
        weights = {
            "conv_a.weight": torch.zeros(c, 2 * c, 3, 3),
            "conv_a.bias": torch.ones(c),
            "conv_b.weight": torch.zeros(c, c, 3, 3),
            "conv_b.bias": torch.tensor([0.5, -1.0, 2.0]),
        }
        a, b = torch.rand(2, c, 8, 8), torch.rand(2, c, 8, 8)
        out = mainbody.mem_rm(a, b, 4, weights)
        expected = weights["conv_b.bias"].view(1, c, 1, 1).expand_as(out)
        self.assertTrue(torch.equal(out, expected))

    def test_passthrough_kernels_return_relu_of_stream(self):
        c = 4
        conv_a = torch.zeros(c, 2 * c, 3, 3, dtype=torch.float64)
        conv_b = torch.zeros(c, c, 3, 3, dtype=torch.float64)
        for i in range(c):
            conv_a[i, i, 1, 1] = 1.0
            conv_b[i, i, 1, 1] = 1.0
        weights = {
            "conv_a.weight": conv_a,
            "conv_a.bias": torch.zeros(c, dtype=torch.float64),
            "conv_b.weight": conv_b,
            "conv_b.bias": torch.zeros(c, dtype=torch.float64),
        }
        generator = torch.Generator().manual_seed(3)
        a = torch.randn(1, c, 8, 8, generator=generator, dtype=torch.float64)
        b = torch.randn(1, c, 8, 8, generator=generator, dtype=torch.float64)
        out = mainbody.mem_rm(a, b, 2, weights)
        self.assertTrue(torch.allclose(out, torch.relu(b), atol=1e-12))

    def test_rejects_bad_ratio_and_shapes(self):
        weights = mainbody.memrm_layer_weights(mainbody.init_memrm_params(CONFIG, (1,), seed=0), 1)
        a = torch.zeros(1, 8, 8, 8)
        with self.assertRaises(ValueError):
            mainbody.mem_rm(a, a, 1.0, weights)
        with self.assertRaises(ShapeError):
            mainbody.mem_rm(a, torch.zeros(1, 8, 4, 4), 4, weights)

    def test_output_shape_matches_stream_for_random_configs(self):
        rng = np.random.default_rng(21)
        for case in range(200):
            blocks = int(rng.integers(1, 4))
            config = BackboneConfig(
                n_classes=int(rng.integers(2, 5)),
                base_channels=int(rng.integers(1, 5)),
                encoder_blocks=blocks,
                decoder_blocks=blocks,
            )
            side = 2**blocks * int(rng.integers(2, 5))
            layer = int(rng.integers(0, config.head_index))
            ratio = float(rng.choice([2.0, 4.0, 16.0]))
            with self.subTest(case=case, layer=layer):
                params = mainbody.init_memrm_params(config, (layer,), seed=case)
                shape = (1,) + config.tap_shape(layer, side)
                out = mainbody.mem_rm(
                    torch.rand(shape), torch.rand(shape), ratio, mainbody.memrm_layer_weights(params, layer)
                )
                self.assertEqual(tuple(out.shape), shape)

    def test_memrm_gradients_match_finite_differences(self):
        meta = _frozen_meta(seed=1, dtype=torch.float64)
        memrm = mainbody.init_memrm_params(CONFIG, (1, 3), seed=2, dtype=torch.float64)
        x3, x1 = _batch(1, dtype=torch.float64), _batch(2, dtype=torch.float64)
        y = torch.randint(0, 3, (2, 32, 32), generator=torch.Generator().manual_seed(3))
        profile = _profile((1, 3))
        _, memory = mainbody.meta_forward(meta, x3, (1, 3), (0, 1), CONFIG)

        def loss_fn(weights, relu_masks):
            logits, _ = mainbody.nonmeta_forward(
                meta, weights, memory, x1, profile, 16, (0, 1), CONFIG, relu_masks=relu_masks
            )
            return cross_entropy(logits, y)

        report = check_gradients(loss_fn, dict(memrm), n_coords=100, seed=4)
        self.assertEqual(len(report.checks), 100)
        self.assertEqual(report.failures(1e-5), [])


class NonMetaForwardTests(unittest.TestCase):
    def setUp(self):
        self.meta = _frozen_meta(seed=3)
        self.x3 = _batch(10)
        self.x1 = _batch(11)
        self.ids = (100, 101)

    def test_empty_gap_set_reduces_to_raw_meta_branch(self):
        _, memory = mainbody.meta_forward(self.meta, self.x3, (), self.ids, CONFIG)
        logits, _ = mainbody.nonmeta_forward(
            self.meta, {}, memory, self.x1, _profile(()), 16, self.ids, CONFIG
        )
        raw, _ = backbone.forward(self.meta, self.x1, CONFIG)
        self.assertTrue(torch.equal(logits, raw))
        with self.assertRaises(StaleMemoryError):
            mainbody.nonmeta_forward(self.meta, {}, memory, self.x1, _profile(()), 16, (1, 2), CONFIG)

    def test_only_gap_layer_memory_reaches_the_output(self):
        memrm = mainbody.init_memrm_params(CONFIG, (2,), seed=4)
        _, memory = mainbody.meta_forward(self.meta, self.x3, (2, 4), self.ids, CONFIG)
        base, _ = mainbody.nonmeta_forward(self.meta, memrm, memory, self.x1, _profile((2,)), 4, self.ids, CONFIG)

        entries = dict(memory.entries)
        entries[2] = entries[2] + 1.0
        changed_gap = mainbody.FeatureMemory(self.ids, entries)
        out_gap, _ = mainbody.nonmeta_forward(
            self.meta, memrm, changed_gap, self.x1, _profile((2,)), 4, self.ids, CONFIG
        )
        self.assertFalse(torch.allclose(base, out_gap))

        entries = dict(memory.entries)
        entries[4] = entries[4] + 1.0
        changed_other = mainbody.FeatureMemory(self.ids, entries)
        out_other, _ = mainbody.nonmeta_forward(
            self.meta, memrm, changed_other, self.x1, _profile((2,)), 4, self.ids, CONFIG
        )
        self.assertTrue(torch.equal(base, out_other))

    def test_memrm_parameter_names_and_missing_layers(self):
        memrm = mainbody.init_memrm_params(CONFIG, (4, 1), seed=0)
        self.assertEqual(mainbody.memrm_layers(memrm), (1, 4))
        self.assertEqual(tuple(memrm["gap1.conv_a.weight"].shape), (8, 16, 3, 3))
        self.assertTrue(torch.equal(memrm["gap4.conv_b.bias"], torch.zeros(4)))
        _, memory = mainbody.meta_forward(self.meta, self.x3, (2,), self.ids, CONFIG)
        with self.assertRaises(KeyError):
            mainbody.nonmeta_forward(self.meta, memrm, memory, self.x1, _profile((2,)), 4, self.ids, CONFIG)
