"""
Tests for planted instance generation and the binary instance file.
"""
import numpy as np
import pytest

from bifamp.core.errors import InvalidArgumentError
from bifamp.schemas.problem import Application, ProblemSpec
from bifamp.services.instances import (
    MAGIC,
    decode_instance,
    encode_instance,
    generate,
    load_instance,
    save_instance,
    substream,
)


class TestGenerate:
    """Planted sampling."""

    def test_same_seed_same_arrays(self, dictionary_problem):
        """Regeneration is bit-identical."""
        first = generate(dictionary_problem, 40, seed=7)
        second = generate(dictionary_problem, 40, seed=7)
        assert np.array_equal(first.F0, second.F0)
        assert np.array_equal(first.X0, second.X0)
        assert np.array_equal(first.Y, second.Y)

    def test_dimensions_round_half_up(self):
        """M and P are rounded with ties up."""
        problem = ProblemSpec(application=Application.DICTIONARY, alpha=0.25, pi=1.5, rho=0.5)
        instance = generate(problem, 10, seed=0)
        assert (instance.m, instance.p) == (3, 15)
        assert instance.realized == {"alpha": 0.3, "pi": 1.5}

    def test_noiseless_observations_are_exact(self, dictionary_problem):
        """Delta = 0 gives Y = F0 X0 / sqrt(N) with scaled storage."""
        instance = generate(dictionary_problem, 30, seed=1)
        assert np.array_equal(instance.Y, instance.F0 @ instance.X0 / np.sqrt(30))

    def test_signal_density(self):
        """Nonzero fraction of X0 lies within 3 binomial sigma of rho."""
        problem = ProblemSpec(application=Application.DICTIONARY, alpha=0.5, pi=2.0, rho=0.2)
        X0 = generate(problem, 200, seed=3).X0
        band = 3.0 * np.sqrt(0.2 * 0.8 / X0.size)
        assert abs(np.mean(X0 != 0.0) - 0.2) < band

    def test_product_second_moment(self):
        """Entries of Z0 have second moment rho (x_mean^2 + x_var)."""
        problem = ProblemSpec(application=Application.DICTIONARY, alpha=1.0, pi=2.0, rho=0.3)
        Z0 = generate(problem, 300, seed=4).Z0
        assert np.mean(Z0 ** 2) == pytest.approx(0.3, rel=0.05)

    def test_completion_mask_count(self, completion_problem):
        """Exactly round(eps M P) entries are known."""
        instance = generate(completion_problem, 10, seed=2)
        assert instance.mask.sum() == round(0.55 * 40 * 40)

    def test_mask_does_not_move_planted_arrays(self, completion_problem):
        """Changing eps leaves F0 and X0 untouched."""
        first = generate(completion_problem, 10, seed=2)
        second = generate(completion_problem.with_value("eps", 0.3), 10, seed=2)
        assert np.array_equal(first.F0, second.F0)
        assert np.array_equal(first.X0, second.X0)

    def test_factor_analysis_row_classes(self):
        """Row variances follow the class weights exactly."""
        problem = ProblemSpec(application=Application.FACTOR_ANALYSIS, alpha=2.0, pi=1.0,
                              psi=[0.5, 2.0], psi_weights=[0.25, 0.75])
        psi = generate(problem, 20, seed=5).psi
        assert psi.shape == (40,)
        assert np.sum(psi == 0.5) == 10
        assert np.sum(psi == 2.0) == 30

    def test_calibration_estimate(self):
        """eta = 0 stores the factor itself as the estimate."""
        problem = ProblemSpec(application=Application.CS, alpha=0.5, pi=1.0, rho=0.3)
        instance = generate(problem, 20, seed=6)
        assert np.array_equal(instance.w_prime, instance.F0)

    def test_arrays_are_read_only(self, dictionary_problem):
        """Generated arrays cannot be modified in place."""
        instance = generate(dictionary_problem, 10, seed=0)
        with pytest.raises(ValueError):
            instance.Y[0, 0] = 1.0

    def test_too_small_rejected(self, dictionary_problem):
        """N < 2 is invalid."""
        with pytest.raises(InvalidArgumentError):
            generate(dictionary_problem, 1, seed=0)


class TestSubstreams:
    """Independent random streams per seed."""

    def test_streams_differ(self):
        """Different streams of one seed draw different numbers."""
        assert substream(3, 0).random() != substream(3, 1).random()

    def test_streams_are_reproducible(self):
        """Same (seed, stream) gives the same draws."""
        assert np.array_equal(substream(3, 2).random(5), substream(3, 2).random(5))


class TestInstanceFile:
    """Binary instance encoding."""

    @pytest.fixture
    def instance(self, completion_problem):
        return generate(completion_problem, 6, seed=11)

    def test_decode_restores_arrays(self, instance):
        """Every stored array and the problem survive the file."""
        decoded = decode_instance(encode_instance(instance))
        assert decoded.problem == instance.problem
        assert decoded.seed == 11
        assert np.array_equal(decoded.Y, instance.Y)
        assert np.array_equal(decoded.mask, instance.mask)
        assert np.array_equal(decoded.F0, instance.F0)

    def test_header_layout(self, instance):
        """Files start with the magic and format version 1."""
        data = encode_instance(instance)
        assert data[:8] == MAGIC
        assert int.from_bytes(data[8:12], "little") == 1

    def test_trailing_bytes_rejected(self, instance):
        """Extra bytes after the last array are an error."""
        with pytest.raises(InvalidArgumentError):
            decode_instance(encode_instance(instance) + b"\0")

    def test_wrong_magic_rejected(self, instance):
        """Foreign files are refused."""
        with pytest.raises(InvalidArgumentError):
            decode_instance(b"NOTBIFAM" + encode_instance(instance)[8:])

    def test_save_and_load(self, instance, tmp_path):
        """save_instance writes a file load_instance can read."""
        path = save_instance(instance, tmp_path / "nested" / "instance.bin")
        assert np.array_equal(load_instance(path).X0, instance.X0)
