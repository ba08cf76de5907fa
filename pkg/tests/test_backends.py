import numpy as np
import pytest

from ice.backends import (
    DenoisePrediction,
    PromptSpec,
    UnknownConceptError,
    UnknownTokenError,
    UnknownWordError,
    add_noise,
    cumulative_alpha,
)
from ice.backends.synthetic import (
    COLOUR_RGB,
    SyntheticBackend,
    SyntheticWorld,
    ShapeSpec,
    load_world,
    make_world,
    save_world,
    tokenize,
)
from ice.core import (
    BinaryMask,
    ContractViolation,
    ImageTensor,
    NoiseSchedule,
    TextConcept,
    apply_mask,
    mask_iou,
)


class TestScheduleMath:
    def test_single_factor(self):
        sched = NoiseSchedule(1, (0.1,))
        assert cumulative_alpha(sched, 1) == pytest.approx(0.9, abs=1e-12)

    def test_two_factors(self):
        sched = NoiseSchedule(2, (0.1, 0.2))
        assert cumulative_alpha(sched, 2) == pytest.approx(0.72, abs=1e-12)

    def test_strictly_decreasing(self):
        sched = NoiseSchedule.linear(20, 0.05, 0.3)
        vals = [cumulative_alpha(sched, t) for t in range(1, 21)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        sched = NoiseSchedule(2, (0.1, 0.2))
        for t in (0, 3):
            with pytest.raises(ContractViolation):
                cumulative_alpha(sched, t)

    def test_add_noise_limits(self):
        x0 = ImageTensor.from_array(np.full((2, 2, 3), 0.5))
        eps = ImageTensor.from_array(np.ones((2, 2, 3)), space="latent")
        near_one = NoiseSchedule(1, (1e-12,))
        out = add_noise(x0, 1, eps, near_one)
        assert np.allclose(out.data, x0.data, atol=1e-5)
        crushed = NoiseSchedule(60, tuple([0.6] * 60))
        out = add_noise(x0, 60, eps, crushed)
        assert np.allclose(out.data, eps.data, atol=1e-5)

    def test_add_noise_exact_value(self):
        sched = NoiseSchedule(2, (0.1, 0.2))
        x0 = ImageTensor.from_array(np.ones((1, 1, 1)))
        eps = ImageTensor.from_array(np.zeros((1, 1, 1)), space="latent")
        out = add_noise(x0, 2, eps, sched)
        assert out.data[0, 0, 0] == pytest.approx(np.sqrt(0.72), abs=1e-12)
        assert out.space == "latent"

    def test_add_noise_linearity(self):
        sched = NoiseSchedule.linear(10, 0.02, 0.2)
        rng = np.random.default_rng(0)
        for _ in range(10):
            x1 = rng.standard_normal((3, 3, 3))
            x2 = rng.standard_normal((3, 3, 3))
            e1 = rng.standard_normal((3, 3, 3))
            e2 = rng.standard_normal((3, 3, 3))
            t = int(rng.integers(1, 11))

            def noisy(x, e):
                return add_noise(
                    ImageTensor.from_array(x, space="latent"),
                    t,
                    ImageTensor.from_array(e, space="latent"),
                    sched,
                ).data

            lhs = noisy(x1 + x2, e1 + e2)
            rhs = noisy(x1, e1) + noisy(x2, e2)
            assert np.allclose(lhs, rhs, atol=1e-12)


class TestPromptSpec:
    def test_render(self):
        p = PromptSpec.render("a photo of a {}", "<x> & <y>")
        assert p.rendered == "a photo of a <x> & <y>"

    def test_slot_count_enforced(self):
        with pytest.raises(ContractViolation):
            PromptSpec("no slot", "x", "no slot")
        with pytest.raises(ContractViolation):
            PromptSpec("{} {}", "x", "x x")

    def test_tokenize_groups(self):
        tokens, groups = tokenize("a photo of <a> & <b>, <c> & <d>")
        assert tokens == ("a", "photo", "of", "<a>", "<b>", "<c>", "<d>")
        assert groups == (("a", "photo", "of", "<a>", "<b>"), ("<c>", "<d>"))


class TestEncodeText:
    def test_deterministic(self, backend3):
        v1 = backend3.encode_text("a photo of a cube").vector
        v2 = backend3.encode_text("a photo of a cube").vector
        assert np.array_equal(v1, v2)

    def test_vocabulary_words_distinct(self, backend3):
        assert not np.array_equal(
            backend3.encode_text("colour").vector, backend3.encode_text("material").vector
        )

    def test_axis_name_distances_positive(self, backend3):
        names = ("object", "colour", "material")
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                d = np.sum((backend3.word_embedding(a) - backend3.word_embedding(b)) ** 2)
                assert d > 0.5

    def test_unregistered_token_errors(self, backend3):
        with pytest.raises(UnknownTokenError):
            backend3.encode_text("a photo of <nope>")

    def test_unknown_plain_words_hash_embed(self, backend3):
        v1 = backend3.encode_text("frobnicator").vector
        v2 = backend3.encode_text("frobnicator").vector
        assert np.array_equal(v1, v2)
        with pytest.raises(UnknownWordError):
            backend3.word_embedding("frobnicator")

    def test_nearest_vocabulary_word_deterministic(self, backend3):
        w = backend3.nearest_vocabulary_word("zzzunknown")
        assert w in backend3.vocabulary()
        assert backend3.nearest_vocabulary_word("zzzunknown") == w


class TestDenoiser:
    def test_attention_concentrates_on_region(self, world3, backend3):
        shape = world3.shapes[0]
        cond = backend3.encode_text(f"a photo of a {shape.category}")
        x_t = backend3.latent_image()
        pred = backend3.predict_noise(x_t, 10, cond)
        att = pred.attention[shape.category]
        down = att.weights
        grid_region = np.zeros_like(down, dtype=bool)
        from ice.core import resample_mask_nearest

        grid_region = resample_mask_nearest(shape.region, *backend3.attention_grid).bits
        assert down[grid_region].sum() >= 0.9

    def test_zero_noise_near_alpha_one(self, world3):
        sched = NoiseSchedule(10, tuple([0.005] * 10))
        backend = SyntheticBackend(world3, schedule=sched)
        gt = ", ".join(f"{s.category} & {s.colour} & {s.material}" for s in world3.shapes)
        cond = backend.encode_text(f"a photo of {gt}")
        x0 = backend.latent_image()
        eps = ImageTensor.from_array(np.zeros(x0.shape), space="latent")
        x_t = add_noise(x0, 1, eps, sched)
        pred = backend.predict_noise(x_t, 1, cond)
        assert float(np.abs(pred.noise_estimate.data).max()) <= 1e-6

    def test_prediction_deterministic(self, backend3):
        cond = backend3.encode_text("a photo of a cube")
        x_t = backend3.latent_image()
        a = backend3.predict_noise(x_t, 5, cond)
        b = backend3.predict_noise(x_t, 5, cond)
        assert np.array_equal(a.noise_estimate.data, b.noise_estimate.data)
        for key in a.attention:
            assert np.array_equal(a.attention[key].weights, b.attention[key].weights)

    def test_attention_normalized(self, backend3):
        cond = backend3.encode_text("a photo of a cube")
        pred = backend3.predict_noise(backend3.latent_image(), 5, cond)
        for att in pred.attention.values():
            assert att.total() == pytest.approx(1.0, abs=1e-6)

    def test_requires_latent_space(self, backend3, world3):
        cond = backend3.encode_text("a cube")
        with pytest.raises(ContractViolation):
            backend3.predict_noise(world3.image, 5, cond)


class TestRetrieverSegmentor:
    def test_round_trip_iou_one(self, world3, backend3):
        x = world3.image
        for shape in world3.shapes:
            top = backend3.retrieve_concepts(x, 1)[0]
            m = backend3.segment(x, TextConcept(shape.category, 1.0))
            assert mask_iou(m, shape.region) == 1.0
        assert top.label in {s.category for s in world3.shapes}

    def test_blank_image_empty_retrieval(self, world3, backend3):
        blank = ImageTensor.from_array(np.zeros((world3.height, world3.width, 3)))
        assert backend3.retrieve_concepts(blank, 3) == []

    def test_larger_visible_area_wins(self, world3, backend3):
        areas = {s.category: s.region.count() for s in world3.shapes}
        top = backend3.retrieve_concepts(world3.image, 1)[0]
        assert top.label == max(areas, key=areas.get)

    def test_masking_removes_from_retrieval(self, world3, backend3):
        shape = world3.shapes[0]
        x = apply_mask(world3.image, shape.region)
        labels = [c.label for c in backend3.retrieve_concepts(x, 5)]
        assert shape.category not in labels

    def test_segment_absent_concept_all_false(self, world3, backend3):
        absent = next(c for c in ("cone", "cube", "disc", "slab", "wedge", "sphere", "torus", "prism")
                      if c not in {s.category for s in world3.shapes})
        m = backend3.segment(world3.image, TextConcept(absent, 1.0))
        assert m.count() == 0

    def test_segment_unknown_label_errors(self, world3, backend3):
        with pytest.raises(UnknownConceptError):
            backend3.segment(world3.image, TextConcept("gizmo", 1.0))

    def test_segment_after_masking_all_false(self, world3, backend3):
        shape = world3.shapes[0]
        x = apply_mask(world3.image, shape.region)
        m = backend3.segment(x, TextConcept(shape.category, 1.0))
        assert m.count() == 0

    def test_retrieval_tie_broken_lexicographically(self):
        bits_a = np.zeros((16, 16), dtype=bool)
        bits_b = np.zeros((16, 16), dtype=bool)
        bits_a[0:4, 0:4] = True
        bits_b[8:12, 8:12] = True
        world = SyntheticWorld(
            16,
            16,
            (
                ShapeSpec("wedge", "red", "matte", BinaryMask.from_array(bits_a)),
                ShapeSpec("cone", "blue", "matte", BinaryMask.from_array(bits_b)),
            ),
            ("wedge", "cone"),
        )
        backend = SyntheticBackend(world, attention_grid=(4, 4))
        labels = [c.label for c in backend.retrieve_concepts(world.image, 2)]
        assert labels == ["cone", "wedge"]


class TestGenerate:
    def test_same_seed_bit_identical(self, backend3):
        cond = backend3.encode_text("a photo of a cube & red & matte")
        a = backend3.generate(cond, seed=11)
        b = backend3.generate(cond, seed=11)
        assert np.array_equal(a.data, b.data)

    def test_different_seeds_jitter(self, world3, backend3):
        shape = world3.shapes[0]
        cond = backend3.encode_text(f"a photo of a {shape.category} & {shape.colour} & {shape.material}")
        a = backend3.generate(cond, seed=0)
        b = backend3.generate(cond, seed=2)
        assert not np.array_equal(a.data, b.data)
        # same identity: both render the right colour somewhere
        rgb = np.asarray(COLOUR_RGB[shape.colour], dtype=float)
        for img in (a, b):
            painted = img.data.max(axis=2) > 0
            assert painted.any()
            mean = img.data[painted].mean(axis=0)
            assert np.argmax(rgb @ mean) is not None

    def test_gt_tokens_render_shape(self, world3, backend3):
        shape = world3.shapes[1]
        cond = backend3.encode_text(f"a photo of a {shape.category} & {shape.colour} & {shape.material}")
        img = backend3.generate(cond, seed=0)
        painted = img.data.max(axis=2) > 0
        inter = np.count_nonzero(painted & shape.region.bits)
        assert inter / shape.region.count() > 0.5


class TestWorldIO:
    def test_round_trip(self, tmp_path, world3):
        path = save_world(world3, tmp_path)
        again = load_world(path)
        assert again.height == world3.height and again.width == world3.width
        for a, b in zip(again.shapes, world3.shapes):
            assert (a.category, a.colour, a.material) == (b.category, b.colour, b.material)
            assert np.array_equal(a.region.bits, b.region.bits)
        assert np.array_equal(again.image.data, world3.image.data)

    def test_world_validation(self):
        bits = np.zeros((16, 16), dtype=bool)
        bits[0:4, 0:4] = True
        m = BinaryMask.from_array(bits)
        with pytest.raises(ContractViolation):
            SyntheticWorld(16, 16, (ShapeSpec("cube", "red", "matte", m),) * 2, ("cube",))

    def test_make_world_coverage(self):
        for k in (2, 3, 4, 5):
            w = make_world(seed=k, num_shapes=k)
            assert w.total_coverage() >= 0.95
            assert len(w.shapes) == k
            assert min(s.region.coverage() for s in w.shapes) > 0.05


class TestGradientSurfaces:
    def test_denoise_vjp_matches_fd(self, world3):
        backend = SyntheticBackend(world3)
        rng = np.random.default_rng(0)
        D = backend.embedding_dim
        backend.register_token("<t0>", rng.normal(0, 0.5, D))
        backend.register_token("<t1>", rng.normal(0, 0.5, D))
        cond = backend.encode_text("a photo of a <t0> & <t1>")
        x0 = backend.latent_image()
        eps = ImageTensor.from_array(rng.standard_normal(x0.shape), space="latent")
        x_t = add_noise(x0, 20, eps, backend.schedule)
        w = rng.standard_normal(x0.shape)

        def loss():
            return float(np.sum(w * backend.predict_noise(x_t, 20, cond).noise_estimate.data))

        token_grads, param_grads = backend.denoise_vjp(x_t, 20, cond, w)
        h = 1e-6
        for tok in ("<t0>", "<t1>"):
            base = backend.token_embedding(tok)
            fd = np.zeros(D)
            for i in range(D):
                for sgn in (1, -1):
                    v = base.copy()
                    v[i] += sgn * h
                    backend.set_token_embedding(tok, v)
                    fd[i] += sgn * loss()
                fd[i] /= 2 * h
            backend.set_token_embedding(tok, base)
            scale = np.abs(fd).max()
            assert np.abs(fd - token_grads[tok]).max() < 1e-6 * scale
            sig = (np.abs(fd) + np.abs(token_grads[tok])) > 1e-3 * scale
            rel = np.abs(fd - token_grads[tok])[sig] / (np.abs(fd) + np.abs(token_grads[tok]))[sig]
            assert rel.max() < 1e-6
        for name in ("render_scale", "render_bias"):
            base = backend.trainable_params()[name]
            fd = np.zeros_like(base)
            for i in range(base.size):
                for sgn in (1, -1):
                    v = base.copy()
                    v[i] += sgn * h
                    backend.set_trainable_param(name, v)
                    fd[i] += sgn * loss()
                fd[i] /= 2 * h
            backend.set_trainable_param(name, base)
            rel = np.abs(fd - param_grads[name]) / np.maximum(1e-8, np.abs(fd) + np.abs(param_grads[name]))
            assert rel.max() < 1e-5

    def test_attention_vjp_matches_fd(self, world3):
        backend = SyntheticBackend(world3)
        rng = np.random.default_rng(1)
        D = backend.embedding_dim
        backend.register_token("<t0>", rng.normal(0, 0.2, D))
        cond = backend.encode_text("a photo of a <t0>")
        gw = rng.standard_normal(backend.attention_grid)

        def loss():
            pred = backend.predict_noise(backend.latent_image(), 10, cond)
            return float(np.sum(gw * pred.attention["<t0>"].weights))

        grads = backend.attention_vjp(cond, {"<t0>": gw})
        base = backend.token_embedding("<t0>")
        h = 1e-6
        fd = np.zeros(D)
        for i in range(D):
            for sgn in (1, -1):
                v = base.copy()
                v[i] += sgn * h
                backend.set_token_embedding("<t0>", v)
                fd[i] += sgn * loss()
            fd[i] /= 2 * h
        backend.set_token_embedding("<t0>", base)
        scale = max(np.abs(fd).max(), 1e-12)
        assert np.abs(fd - grads["<t0>"]).max() < 1e-5 * scale
        sig = (np.abs(fd) + np.abs(grads["<t0>"])) > 1e-3 * scale
        rel = np.abs(fd - grads["<t0>"])[sig] / (np.abs(fd) + np.abs(grads["<t0>"]))[sig]
        assert rel.max() < 1e-5
