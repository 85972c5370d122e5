import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spurlab import scenario as sc


def make_record(label: int, fill: int) -> bytes:
    return bytes([label]) + bytes([fill] * 3072)


class TestCifarParsing:
    def test_two_records(self):
        data = make_record(3, 0) + make_record(9, 128)
        out = sc.read_cifar10_batch(data)
        assert len(out) == 2
        assert out[0][0] == 3 and out[1][0] == 9

    def test_standard_file_arithmetic(self):
        assert 10_000 * sc.CIFAR_RECORD_BYTES == 30_730_000

    def test_label_and_scaling(self):
        out = sc.read_cifar10_batch(make_record(6, 255))
        label, img = out[0]
        assert label == 6
        assert img.shape == (32, 32, 3)
        np.testing.assert_array_equal(img, np.ones((32, 32, 3), dtype=np.float32))

    def test_channel_planar_layout(self):
        # first 1024 bytes are the red plane, row-major
        payload = bytearray(3073)
        payload[0] = 0
        payload[1] = 200          # red at pixel (0, 0)
        payload[1 + 1024] = 100   # green at pixel (0, 0)
        payload[1 + 2048] = 50    # blue at pixel (0, 0)
        payload[1 + 33] = 77      # red at row 1, col 1
        _, img = sc.read_cifar10_batch(bytes(payload))[0]
        np.testing.assert_allclose(img[0, 0], [200 / 255, 100 / 255, 50 / 255], rtol=1e-6)
        assert img[1, 1, 0] == pytest.approx(77 / 255)

    def test_bad_length(self):
        with pytest.raises(sc.FormatError, match="multiple"):
            sc.read_cifar10_batch(b"\x00" * 100)

    def test_corrupt_label(self):
        with pytest.raises(sc.FormatError, match="label byte"):
            sc.read_cifar10_batch(make_record(10, 0))


class TestBinarize:
    @pytest.mark.parametrize("class_id,expected", [(1, 1), (6, 0), (4, 0), (0, 1), (7, 1), (8, 1), (9, 1)])
    def test_examples(self, class_id, expected):
        assert sc.binarize_label(class_id) == expected

    def test_partition_is_five_five(self):
        ones = [c for c in range(10) if sc.binarize_label(c) == 1]
        zeros = [c for c in range(10) if sc.binarize_label(c) == 0]
        assert len(ones) == 5 and len(zeros) == 5
        assert sorted(ones + zeros) == list(range(10))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            sc.binarize_label(10)


class TestInjectSquare:
    def test_corner_pixels(self):
        img = np.zeros((32, 32, 3), dtype=np.float32)
        out = sc.inject_square(img, (255, 0, 0), (0, 0))
        for r, c in [(0, 0), (0, 1), (1, 0), (1, 1)]:
            np.testing.assert_array_equal(out[r, c], [1.0, 0.0, 0.0])
        assert np.all(out[2:, :, :] == 0) and np.all(out[:, 2:, :] == 0)

    @settings(max_examples=40)
    @given(st.integers(min_value=0, max_value=30), st.integers(min_value=0, max_value=30),
           st.tuples(*[st.integers(min_value=0, max_value=255)] * 3))
    def test_changes_exactly_size_squared_pixels(self, row, col, color):
        rng = np.random.default_rng(0)
        img = rng.random((32, 32, 3)).astype(np.float32)
        out = sc.inject_square(img, color, (row, col))
        diff = np.any(out != img, axis=2)
        assert diff.sum() <= 4
        expect = np.asarray(color, dtype=np.float32) / 255.0
        np.testing.assert_array_equal(out[row:row + 2, col:col + 2].reshape(-1, 3),
                                      np.tile(expect, (4, 1)))

    def test_overflow_position(self):
        with pytest.raises(ValueError, match="does not fit"):
            sc.inject_square(np.zeros((32, 32, 3)), (1, 2, 3), (31, 31))


class TestSupport:
    def test_fifth_support_keeps_one_mode(self):
        out = sc.sample_support(0.2, 5, np.random.default_rng(0))
        assert len(out[0]) == 1 and len(out[1]) == 1

    def test_full_support_keeps_all(self):
        out = sc.sample_support(1.0, 5, np.random.default_rng(0))
        assert out[0] == (0, 1, 2, 3, 4) and out[1] == (0, 1, 2, 3, 4)

    def test_non_integer_product_rejected(self):
        with pytest.raises(ValueError, match="not an integer"):
            sc.sample_support(0.3, 5, np.random.default_rng(0))

    def test_resampled_per_task(self):
        spec = sc.SpuriousSpec(n_tasks=8, support_s=0.2, seed=3,
                               synth=sc.SynthSpec(n_train=20, n_test=20))
        scen = sc.build_scenario(spec)
        supports = {tuple(sorted(t.class_modes[0])) for t in scen.tasks}
        assert len(supports) > 1


class TestSynthSamples:
    def test_zero_std_hits_mode_mean(self):
        sspec = sc.SynthSpec(mode_std=1e-300)  # mode_std must stay positive
        means = sc.synth_mode_means(sspec, seed=0)
        s = sc.synth_sample(sspec, means, 1, 0, (2,), np.random.default_rng(0))
        np.testing.assert_allclose(s.x, means[1 * 5 + 2], atol=1e-290)

    def test_pattern_shifts_block(self):
        sspec = sc.SynthSpec(spurious_block=(0, 2))
        means = sc.synth_mode_means(sspec, seed=0)
        pattern = np.array([5.0, 5.0])
        rng_a, rng_b = np.random.default_rng(1), np.random.default_rng(1)
        clean = sc.synth_sample(sspec, means, 0, 0, (0, 1, 2, 3, 4), rng_a)
        spur = sc.synth_sample(sspec, means, 0, 0, (0, 1, 2, 3, 4), rng_b, pattern)
        np.testing.assert_allclose(spur.x[:2], clean.x[:2] + 5.0)
        np.testing.assert_allclose(spur.x[2:], clean.x[2:])
        assert spur.spurious_present and spur.spurious_id == 0

    def test_seeded_repeatability(self):
        sspec = sc.SynthSpec()
        means = sc.synth_mode_means(sspec, seed=0)
        a = sc.synth_sample(sspec, means, 1, 2, (0, 3), np.random.default_rng(9))
        b = sc.synth_sample(sspec, means, 1, 2, (0, 3), np.random.default_rng(9))
        np.testing.assert_array_equal(a.x, b.x)
        assert a.mode_id == b.mode_id


class TestBuildScenario:
    def test_exact_spurious_counts(self):
        spec = sc.SpuriousSpec(n_tasks=2, correlation_p=0.75, seed=5,
                               synth=sc.SynthSpec(n_train=1000, n_test=100))
        scen = sc.build_scenario(spec)
        for t in scen.tasks:
            assert sum(s.spurious_present for s in t.train) == 750

    @pytest.mark.parametrize("p,expected", [(1.0, 200), (0.0, 0)])
    def test_degenerate_correlations(self, p, expected):
        spec = sc.SpuriousSpec(n_tasks=1, correlation_p=p, seed=5,
                               synth=sc.SynthSpec(n_train=200, n_test=50))
        scen = sc.build_scenario(spec)
        assert sum(s.spurious_present for s in scen.tasks[0].train) == expected

    def test_clean_test_purity(self):
        spec = sc.SpuriousSpec(n_tasks=3, correlation_p=1.0, seed=11,
                               synth=sc.SynthSpec(n_train=50, n_test=80))
        scen = sc.build_scenario(spec)
        assert all(not s.spurious_present for s in scen.clean_test)
        assert all(s.spurious_id == -1 for s in scen.clean_test)

    def test_determinism_bit_identical(self):
        spec = sc.SpuriousSpec(n_tasks=3, correlation_p=0.5, support_s=0.6, seed=21,
                               synth=sc.SynthSpec(n_train=60, n_test=40))
        a, b = sc.build_scenario(spec), sc.build_scenario(spec)
        for ta, tb in zip(a.tasks, b.tasks):
            assert ta.class_modes == tb.class_modes
            for x, z in zip(ta.train + ta.eval_spurious, tb.train + tb.eval_spurious):
                assert x.x.tobytes() == z.x.tobytes()
                assert (x.y, x.mode_id, x.spurious_present, x.spurious_id, x.task_id) == \
                       (z.y, z.mode_id, z.spurious_present, z.spurious_id, z.task_id)
        for x, z in zip(a.clean_test, b.clean_test):
            assert x.x.tobytes() == z.x.tobytes()

    def test_task_ids_ordered(self):
        spec = sc.SpuriousSpec(n_tasks=4, seed=2, synth=sc.SynthSpec(n_train=20, n_test=20))
        scen = sc.build_scenario(spec)
        assert [t.task_id for t in scen.tasks] == [0, 1, 2, 3]
        for t in scen.tasks:
            assert all(s.task_id == t.task_id for s in t.train)

    def test_mode_consistent_with_label(self):
        spec = sc.SpuriousSpec(n_tasks=2, seed=4, synth=sc.SynthSpec(n_train=40, n_test=20))
        scen = sc.build_scenario(spec)
        for t in scen.tasks:
            for s in t.train:
                assert s.mode_id // 5 == s.y


class TestTaskColors:
    def test_within_task_separation(self):
        colors = sc.draw_task_colors(10, np.random.default_rng(0))
        for t in range(10):
            assert sc._linf(colors[t, 0], colors[t, 1]) >= 64

    def test_cross_task_same_class_separation(self):
        colors = sc.draw_task_colors(10, np.random.default_rng(1))
        for c in (0, 1):
            for t in range(10):
                for u in range(t):
                    assert sc._linf(colors[t, c], colors[u, c]) >= 32


class TestCifarScenario:
    @pytest.fixture()
    def cifar_files(self, tmp_path):
        rng = np.random.default_rng(0)
        def write(path, n):
            recs = []
            for i in range(n):
                label = i % 10
                recs.append(bytes([label]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes())
            path.write_bytes(b"".join(recs))
        train = tmp_path / "data_batch_1.bin"
        test = tmp_path / "test_batch.bin"
        write(train, 200)
        write(test, 50)
        return str(train), str(test)

    def test_build_and_count(self, cifar_files):
        train, test = cifar_files
        spec = sc.SpuriousSpec(n_tasks=2, correlation_p=0.5, seed=3, source="cifar10",
                               cifar_train_paths=(train,), cifar_test_paths=(test,))
        scen = sc.build_scenario(spec)
        assert scen.n_tasks == 2
        for t in scen.tasks:
            n = len(t.train)
            assert sum(s.spurious_present for s in t.train) == n // 2
            for s in t.train:
                assert s.y == sc.binarize_label(s.mode_id)
                assert s.x.shape == (32, 32, 3)
        assert all(not s.spurious_present for s in scen.clean_test)
        assert len(scen.clean_test) == 50

    def test_spurious_images_carry_task_color(self, cifar_files):
        train, test = cifar_files
        spec = sc.SpuriousSpec(n_tasks=1, correlation_p=1.0, seed=3, source="cifar10",
                               cifar_train_paths=(train,), cifar_test_paths=(test,))
        scen = sc.build_scenario(spec)
        colors = scen.spec.colors
        for s in scen.tasks[0].train[:20]:
            expect = colors[0, s.y].astype(np.float32) / 255.0
            found = np.any(np.all(np.isclose(s.x, expect, atol=1e-6), axis=2))
            assert found, "injected color not found in image"


class TestClassIncremental:
    def test_disjoint_classes(self):
        scen = sc.build_class_incremental_scenario(sc.SynthSpec(n_train=40, n_test=20), 5, seed=0)
        seen = set()
        for t in scen.tasks:
            assert not (seen & set(t.classes))
            seen |= set(t.classes)
        assert seen == set(range(10))

    def test_labels_are_modes(self):
        scen = sc.build_class_incremental_scenario(sc.SynthSpec(n_train=40, n_test=20), 5, seed=0)
        for t in scen.tasks:
            for s in t.train:
                assert s.y == s.mode_id and s.y in t.classes

    def test_bad_partition_rejected(self):
        with pytest.raises(ValueError, match="modes"):
            sc.build_class_incremental_scenario(sc.SynthSpec(), 3, seed=0)
