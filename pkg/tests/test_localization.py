import json

import numpy as np
import pytest

from ice.backends.synthetic import SyntheticBackend, make_world
from ice.core import BinaryMask, ContractViolation, ImageTensor, TextConcept, apply_mask, mask_iou
from ice.localization import (
    LocalizationConfig,
    LocalizationError,
    LocalizationResult,
    localize,
    pixel_proportion,
    read_manifest,
    write_manifest,
)


def _blank(world):
    return ImageTensor.from_array(np.zeros((world.height, world.width, 3)))


class TestPixelProportion:
    def test_nothing_masked(self):
        x = ImageTensor.from_array(np.zeros((4, 4, 3)))
        assert pixel_proportion(x, BinaryMask.empty(4, 4)) == 1.0

    def test_everything_masked(self):
        x = ImageTensor.from_array(np.zeros((4, 4, 3)))
        assert pixel_proportion(x, BinaryMask.full(4, 4)) == 0.0

    def test_half_masked(self):
        x = ImageTensor.from_array(np.zeros((4, 4, 3)))
        bits = np.zeros((4, 4), dtype=bool)
        bits.ravel()[:8] = True
        assert pixel_proportion(x, BinaryMask.from_array(bits)) == 0.5


class TestLocalize:
    def test_blank_image_empty_retrieval(self, world3, backend3):
        result = localize(_blank(world3), backend3.retrieve_concepts, backend3.segment, LocalizationConfig())
        assert result.termination == "empty_retrieval"
        assert result.records == ()
        assert result.final_proportion == 1.0

    def test_synthetic_world_exact_extraction(self, world3, backend3):
        result = localize(world3.image, backend3.retrieve_concepts, backend3.segment, LocalizationConfig())
        assert result.termination == "below_threshold"
        assert len(result.records) == 3
        by_cat = {s.category: s.region for s in world3.shapes}
        for rec in result.records:
            assert mask_iou(rec.mask, by_cat[rec.concept.label]) == 1.0
        areas = [rec.mask.count() for rec in result.records]
        assert areas == sorted(areas, reverse=True)

    def test_all_false_segmentor_degenerate(self, world3, backend3):
        calls = []

        def segmentor(x, c):
            calls.append(c.label)
            return BinaryMask.empty(world3.height, world3.width)

        result = localize(world3.image, backend3.retrieve_concepts, segmentor, LocalizationConfig())
        assert result.termination == "degenerate_mask"
        assert result.records == ()
        assert len(calls) == 1

    def test_constant_retriever_hits_iteration_cap(self, world3):
        tiny = np.zeros((world3.height, world3.width), dtype=bool)
        tiny[0, 0:6] = True  # above min coverage, far below tau progress

        def retriever(x, k):
            return [TextConcept("cube", 1.0)]

        calls = {"n": 0}

        def segmentor(x, c):
            start = 6 * calls["n"]
            calls["n"] += 1
            bits = np.zeros((world3.height, world3.width), dtype=bool)
            bits.ravel()[start : start + 6] = True
            return BinaryMask.from_array(bits)

        cfg = LocalizationConfig(max_iterations=5)
        result = localize(world3.image, retriever, segmentor, cfg)
        assert result.termination == "max_iterations"
        assert len(result.records) == 5

    def test_monotone_pixel_proportion(self, world3, backend3):
        result = localize(world3.image, backend3.retrieve_concepts, backend3.segment, LocalizationConfig())
        total = world3.height * world3.width
        rho = 1.0
        for rec in result.records:
            rho_next = rho - rec.mask.count() / total
            assert rho_next < rho
            rho = rho_next
        assert rho == pytest.approx(result.final_proportion, abs=1e-12)

    def test_order_consistency_replay(self, world3, backend3):
        result = localize(world3.image, backend3.retrieve_concepts, backend3.segment, LocalizationConfig())
        x = world3.image
        for rec in result.records:
            top = backend3.retrieve_concepts(x, 1)[0]
            assert top.label == rec.concept.label
            x = apply_mask(x, rec.mask)

    def test_masks_pairwise_disjoint(self, world3, backend3):
        result = localize(world3.image, backend3.retrieve_concepts, backend3.segment, LocalizationConfig())
        for i in range(len(result.records)):
            for j in range(i + 1, len(result.records)):
                inter = result.records[i].mask.bits & result.records[j].mask.bits
                assert not inter.any()

    def test_backend_errors_annotated_with_iteration(self, world3):
        def retriever(x, k):
            raise RuntimeError("boom")

        def segmentor(x, c):
            return BinaryMask.full(world3.height, world3.width)

        with pytest.raises(LocalizationError, match="iteration 0"):
            localize(world3.image, retriever, segmentor, LocalizationConfig())

    def test_requires_pixel_space(self, world3, backend3):
        with pytest.raises(ContractViolation):
            localize(world3.image.as_space("latent"), backend3.retrieve_concepts, backend3.segment, LocalizationConfig())

    def test_adversarial_stubs_always_halt(self, world3):
        rng = np.random.default_rng(0)
        cfg = LocalizationConfig(max_iterations=8)
        claimed = np.zeros((world3.height, world3.width), dtype=bool)

        def disjoint_random_segmentor(x, c):
            bits = (rng.random((world3.height, world3.width)) > 0.8) & ~claimed
            claimed[:] |= bits
            return BinaryMask.from_array(bits)

        stubs = [
            (lambda x, k: [TextConcept("cube", 1.0)], disjoint_random_segmentor),
            (lambda x, k: [TextConcept("cube", 1.0)],
             lambda x, c: BinaryMask.empty(world3.height, world3.width)),
            (lambda x, k: [], disjoint_random_segmentor),
        ]
        for retriever, segmentor in stubs:
            claimed[:] = False
            result = localize(world3.image, retriever, segmentor, cfg)
            assert result.termination in ("below_threshold", "max_iterations", "empty_retrieval", "degenerate_mask")
            assert len(result.records) <= cfg.max_iterations


class TestConfig:
    def test_validation(self):
        with pytest.raises(ContractViolation):
            LocalizationConfig(tau=0.0)
        with pytest.raises(ContractViolation):
            LocalizationConfig(max_iterations=0)

    def test_result_validation(self):
        with pytest.raises(ContractViolation):
            LocalizationResult(records=(), final_proportion=2.0, termination="below_threshold")
        with pytest.raises(ContractViolation):
            LocalizationResult(records=(), final_proportion=0.5, termination="whatever")


class TestManifest:
    def test_round_trip(self, tmp_path, world3, backend3):
        result = localize(world3.image, backend3.retrieve_concepts, backend3.segment, LocalizationConfig())
        write_manifest(result, world3.image, tmp_path / "img", config_hash="abc")
        again, image = read_manifest(tmp_path / "img")
        assert again.termination == result.termination
        assert again.final_proportion == pytest.approx(result.final_proportion, abs=0)
        assert len(again.records) == len(result.records)
        for a, b in zip(again.records, result.records):
            assert a.concept.label == b.concept.label
            assert a.concept.score == pytest.approx(b.concept.score, abs=0)
            assert np.array_equal(a.mask.bits, b.mask.bits)
        assert np.array_equal(image.data, world3.image.data)

    def test_records_carry_termination(self, tmp_path, world3, backend3):
        result = localize(world3.image, backend3.retrieve_concepts, backend3.segment, LocalizationConfig())
        path = write_manifest(result, world3.image, tmp_path / "img")
        doc = json.loads(path.read_text())
        assert all(entry["termination"] == result.termination for entry in doc["records"])
        assert [entry["mask"] for entry in doc["records"]] == [
            f"mask_{i}.png" for i in range(len(result.records))
        ]

    def test_checksum_tamper_rejected(self, tmp_path, world3, backend3):
        result = localize(world3.image, backend3.retrieve_concepts, backend3.segment, LocalizationConfig())
        path = write_manifest(result, world3.image, tmp_path / "img")
        doc = json.loads(path.read_text())
        doc["final_proportion"] = 0.42
        path.write_text(json.dumps(doc))
        with pytest.raises(ContractViolation, match="checksum"):
            read_manifest(tmp_path / "img")
