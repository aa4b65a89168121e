import math
import tempfile
from pathlib import Path
from unittest.mock import patch

import numpy as np
from django.test import SimpleTestCase

from .exceptions import ConfigError, DegenerateInputError, HamError, ShapeError
from .files import atomic_write_bytes, atomic_write_text
from .rng import make_rng
from .tensor import (
    abs_cosine,
    as_matrix,
    magnitude_order,
    magnitude_threshold,
    matmul,
    retained_count,
    top_k_mask,
    vectorize,
)

# ========== ЛИНЕЙНАЯ АЛГЕБРА ==========

class TensorTests(SimpleTestCase):
    """Тесты тензорного ядра"""

    def test_matmul_identity(self):
        """Единичная матрица слева ничего не меняет"""
        result = matmul([[1, 0], [0, 1]], [[3, 4], [5, 6]])
        np.testing.assert_array_equal(result, [[3, 4], [5, 6]])

    def test_matmul_dot_product(self):
        result = matmul([[1, 2]], [[3], [4]])
        np.testing.assert_array_equal(result, [[11]])

    def test_matmul_shape_mismatch(self):
        """Несовпадение внутренних размерностей — ShapeError"""
        with self.assertRaises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_matmul_associative_on_random_matrices(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
            np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-12)

    def test_vectorize_row_major(self):
        np.testing.assert_array_equal(vectorize([[1, 2], [3, 4]]), [1, 2, 3, 4])
        np.testing.assert_array_equal(vectorize([[7]]), [7])

    def test_vectorize_returns_copy(self):
        m = np.arange(4.0).reshape(2, 2)
        v = vectorize(m)
        v[0] = 100.0
        self.assertEqual(m[0, 0], 0.0)

    def test_as_matrix_reshape(self):
        m = as_matrix([1, 2, 3, 4, 5, 6], rows=2, cols=3)
        self.assertEqual(m.shape, (2, 3))
        self.assertEqual(m[1, 0], 4.0)
        with self.assertRaises(ShapeError):
            as_matrix([1, 2, 3], rows=2, cols=2)

    def test_abs_cosine_examples(self):
        self.assertAlmostEqual(abs_cosine([1, 2, 3], [1, 2, 3]), 1.0, places=12)
        self.assertEqual(abs_cosine([1, 0], [0, 1]), 0.0)
        self.assertEqual(abs_cosine([1, 0], [-1, 0]), 1.0)

    def test_abs_cosine_symmetric_and_scale_invariant(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            u, v = rng.normal(size=7), rng.normal(size=7)
            c = abs_cosine(u, v)
            self.assertGreaterEqual(c, 0.0)
            self.assertLessEqual(c, 1.0)
            self.assertAlmostEqual(c, abs_cosine(v, u), places=12)
            self.assertAlmostEqual(c, abs_cosine(-3.5 * u, 0.2 * v), places=12)

    def test_abs_cosine_zero_norm(self):
        """Вектор нулевой нормы — ошибка, а не 0"""
        with self.assertRaises(DegenerateInputError):
            abs_cosine([0, 0], [1, 2])

    def test_abs_cosine_length_mismatch(self):
        with self.assertRaises(ShapeError):
            abs_cosine([1, 2, 3], [1, 2])

# ========== ПОРОГ ПО МОДУЛЮ ==========

class MagnitudeTests(SimpleTestCase):
    """Тесты выбора top-k по модулю"""

    def test_threshold_selects_top_half(self):
        m = [[1, -2], [3, -4]]
        self.assertEqual(magnitude_threshold(m, 0.5), 3.0)
        np.testing.assert_array_equal(top_k_mask(m, 0.5), [[False, False], [True, True]])

    def test_full_keep_retains_everything(self):
        m = np.array([[0.5, -0.1], [2.0, 0.0]])
        self.assertTrue(top_k_mask(m, 1.0).all())
        self.assertLessEqual(magnitude_threshold(m, 1.0), np.abs(m).min())

    def test_ties_broken_by_row_major_index(self):
        """При равных модулях сохраняются элементы с меньшим индексом"""
        m = np.array([[1.0, -1.0, 1.0, -1.0]])
        np.testing.assert_array_equal(top_k_mask(m, 0.5), [[True, True, False, False]])
        np.testing.assert_array_equal(magnitude_order(m), [0, 1, 2, 3])

    def test_retained_count_is_ceil(self):
        self.assertEqual(retained_count(0.3, 10), 3)
        self.assertEqual(retained_count(0.6, 1024), 615)
        self.assertEqual(retained_count(0.01, 5), 1)
        self.assertEqual(retained_count(1.0, 7), 7)

    def test_invalid_keep_fraction(self):
        for bad in (0.0, -0.1, 1.5, math.nan):
            with self.assertRaises(ConfigError):
                retained_count(bad, 10)

    def test_mask_matches_full_sort_oracle(self):
        """Маска совпадает с полной сортировкой для всех k из сетки"""
        rng = np.random.default_rng(2)
        for k in [i / 10 for i in range(1, 11)]:
            m = rng.normal(size=(6, 9))
            flat = np.abs(m).reshape(-1)
            expected = set(sorted(range(flat.size), key=lambda i: (-flat[i], i))[:math.ceil(round(k * flat.size, 9))])
            got = set(np.flatnonzero(top_k_mask(m, k).reshape(-1)).tolist())
            self.assertEqual(got, expected)

# ========== СЛУЧАЙНОСТЬ ==========

class RngTests(SimpleTestCase):

    def test_same_seed_same_stream(self):
        a = make_rng(7, "adapter", 3).normal(size=5)
        b = make_rng(7, "adapter", 3).normal(size=5)
        np.testing.assert_array_equal(a, b)

    def test_keys_separate_streams(self):
        a = make_rng(7, "adapter", 3).normal(size=5)
        b = make_rng(7, "adapter", 4).normal(size=5)
        c = make_rng(7, "batches", 3).normal(size=5)
        self.assertFalse(np.array_equal(a, b))
        self.assertFalse(np.array_equal(a, c))

    def test_full_uint64_seed_range(self):
        make_rng(0)
        make_rng(2**64 - 1)
        for bad in (-1, 2**64):
            with self.assertRaises(ConfigError):
                make_rng(bad)

# ========== ФАЙЛЫ ==========

class AtomicWriteTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_write_creates_parents(self):
        path = atomic_write_text(self.root / "a" / "b" / "out.csv", "x,y\n1,2\n")
        self.assertEqual(path.read_text(encoding="utf-8"), "x,y\n1,2\n")

    def test_failed_write_keeps_old_file_and_no_temp(self):
        """Прерванная запись не оставляет ни половины файла, ни временных файлов"""
        target = self.root / "out.csv"
        atomic_write_bytes(target, b"old")
        with patch("core.files.os.replace", side_effect=OSError("disk full")):
            with self.assertRaises(OSError):
                atomic_write_bytes(target, b"new payload")
        self.assertEqual(target.read_bytes(), b"old")
        self.assertEqual(sorted(p.name for p in self.root.iterdir()), ["out.csv"])

    def test_errors_share_base_class(self):
        for exc in (ShapeError, DegenerateInputError, ConfigError):
            self.assertTrue(issubclass(exc, HamError))
            self.assertTrue(issubclass(exc, ValueError))
