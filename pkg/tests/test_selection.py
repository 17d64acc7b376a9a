import numpy as np
import pytest
from numpy.testing import assert_allclose

from varsel_engine.errors import ConfigError, InsufficientDrawsError
from varsel_engine.importance import ImportanceDraws
from varsel_engine.rng import stream_rng
from varsel_engine.selection import (
    CredibleBand,
    SelectionResult,
    select_variables,
    selected_names,
    selection_metrics,
    simultaneous_band,
)


def draws_of(values):
    return ImportanceDraws(values=np.asarray(values, dtype=float))


class TestSimultaneousBand:
    def test_three_draws_by_hand(self):
        band = simultaneous_band(draws_of([[0.0], [2.0], [4.0]]), alpha=0.05)
        assert band.center[0] == pytest.approx(2.0)
        assert band.lower[0] == pytest.approx(0.0, abs=1e-9)
        assert band.upper[0] == pytest.approx(4.0)

    def test_five_draws_by_hand(self):
        # sd=√2.5，t=(1.265, 0.632, 0, 0.632, 1.265)，k=⌈0.8·5⌉=4 → q·sd = 2
        band = simultaneous_band(draws_of([[0.0], [1.0], [2.0], [3.0], [4.0]]), alpha=0.2)
        assert band.center[0] == pytest.approx(2.0)
        assert band.lower[0] == pytest.approx(0.0, abs=1e-9)
        assert band.upper[0] == pytest.approx(4.0)
        assert select_variables(band).selected == ()

    def test_degenerate_draws(self):
        band = simultaneous_band(draws_of([[1.0, 0.0, -1.0]] * 5))
        assert not band.half_width.any()
        assert select_variables(band).selected == (0, 2)

    @pytest.mark.parametrize("seed", range(100))
    def test_covers_own_draws(self, seed):
        rng = stream_rng(seed, "band")
        M, P = int(rng.integers(2, 200)), int(rng.integers(1, 10))
        values = rng.normal(size=(M, P)) * rng.uniform(0.1, 5.0, size=P) + rng.normal(size=P)
        band = simultaneous_band(draws_of(values), alpha=0.1)
        covered = sum(band.covers(row) for row in values)
        assert covered >= 0.9 * M - 1e-9

    def test_smaller_alpha_gives_wider_band(self):
        values = stream_rng(3, "alpha").normal(size=(400, 4))
        narrow = simultaneous_band(draws_of(values), alpha=0.2)
        wide = simultaneous_band(draws_of(values), alpha=0.01)
        assert np.all(wide.half_width >= narrow.half_width)

    def test_column_permutation(self):
        values = stream_rng(4, "perm").normal(size=(100, 5)) + np.arange(5)
        order = [3, 0, 4, 1, 2]
        band = simultaneous_band(draws_of(values))
        permuted = simultaneous_band(draws_of(values[:, order]))
        assert_allclose(permuted.center, band.center[order])
        assert_allclose(permuted.half_width, band.half_width[order])

    def test_positive_scaling_keeps_selection(self):
        values = stream_rng(5, "scale").normal(size=(200, 6)) + [0.0, 3.0, 0.1, -4.0, 0.0, 2.0]
        base = select_variables(simultaneous_band(draws_of(values)))
        scaled = select_variables(simultaneous_band(draws_of(2.0 * values)))
        assert base.selected == scaled.selected

    def test_insufficient_draws(self):
        with pytest.raises(InsufficientDrawsError):
            simultaneous_band(draws_of([[1.0, 2.0]]))

    def test_invalid_alpha(self):
        with pytest.raises(ConfigError):
            simultaneous_band(draws_of([[1.0], [2.0]]), alpha=1.0)


class TestSelection:
    def test_excludes_zero(self):
        band = CredibleBand(level=0.95, center=[1.0, 0.5, -2.0], half_width=[0.5, 1.0, 1.0])
        result = select_variables(band)
        assert result.selected == (0, 2)
        assert selected_names(result) == ["x1", "x3"]
        assert 2 in result and 1 not in result

    def test_boundary_not_selected(self):
        band = CredibleBand(level=0.95, center=[1.0, -1.0], half_width=[1.0, 1.0])
        assert select_variables(band).selected == ()

    def test_to_dict_uses_variable_names(self, tmp_path):
        band = CredibleBand(level=0.95, center=[1.0, 0.0], half_width=[0.5, 0.5])
        data = select_variables(band).to_dict()
        assert data["selected"] == ["x1"]
        assert [v["selected"] for v in data["variables"]] == [True, False]

    def test_invalid_band(self):
        with pytest.raises(ConfigError):
            CredibleBand(level=0.95, center=[0.0], half_width=[-1.0])


class TestMetrics:
    def band(self, P):
        return CredibleBand(level=0.95, center=np.zeros(P), half_width=np.zeros(P))

    def result(self, selected, P=10):
        return SelectionResult(selected=tuple(selected), band=self.band(P))

    def test_one_false_discovery(self):
        quality = selection_metrics(self.result([0, 1, 2, 3, 4, 7]), range(5))
        assert quality.fdr == pytest.approx(1 / 6)
        assert quality.power == 1.0
        assert not quality.exact_recovery

    def test_partial_recovery(self):
        quality = selection_metrics(self.result([0, 1]), range(5))
        assert quality.fdr == 0.0
        assert quality.power == pytest.approx(0.4)

    def test_empty_selection(self):
        quality = selection_metrics(self.result([]), range(5))
        assert quality.fdr == 0.0
        assert quality.power == 0.0

    def test_exact_recovery(self):
        assert selection_metrics(self.result(range(5)), range(5)).exact_recovery

    def test_empty_truth(self):
        quality = selection_metrics(self.result([]), [])
        assert quality.power == 1.0 and quality.exact_recovery

    def test_truth_out_of_range(self):
        with pytest.raises(ConfigError):
            selection_metrics(self.result([0], P=3), [5])
