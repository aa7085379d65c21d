"""
Bad-value defense tests.

Missing, infinite or non-positive values must be rejected before any
estimator sees them, both from arrays and through the CLI (exit code 2).
"""
import numpy as np
import pytest

from pacsmr import cli
from pacsmr.errors import MissingValueError, NonPositiveSEError
from pacsmr.summary_data import SharedCorrelation, SummaryDataset, write_dataset
from utils import dataset_arrays
from integration.test_consts import EXIT_INVALID


def corrupt(ds, target, row, col, value):
    arrays = [np.array(a) for a in dataset_arrays(ds)]
    index = {"gamma_hat": 0, "se_x": 1, "gamma_outcome": 2, "se_y": 3}[target]
    if arrays[index].ndim == 1:
        arrays[index][row] = value
    else:
        arrays[index][row, col] = value
    return arrays


class TestArrayDefense:
    """Non-finite inputs raise instead of propagating."""

    @pytest.mark.parametrize("target", ["gamma_hat", "se_x", "gamma_outcome", "se_y"])
    @pytest.mark.parametrize("value", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, toy_dataset, target, value):
        with pytest.raises(MissingValueError):
            SummaryDataset.from_arrays(*corrupt(toy_dataset, target, 5, 1, value))

    @pytest.mark.parametrize("target", ["se_x", "se_y"])
    @pytest.mark.parametrize("value", [0.0, -0.01])
    def test_non_positive_se_rejected(self, toy_dataset, target, value):
        with pytest.raises(NonPositiveSEError):
            SummaryDataset.from_arrays(*corrupt(toy_dataset, target, 5, 1, value))

    def test_non_finite_sigma_rejected(self):
        with pytest.raises(MissingValueError):
            SharedCorrelation(np.array([[1.0, np.nan], [np.nan, 1.0]]))


class TestFileDefense:
    """The same checks reached from disk end in exit code 2."""

    @pytest.mark.parametrize("token", ["NA", "nan", "inf"])
    def test_bad_token_exit_code(self, toy_dataset, tmp_path, token, capsys):
        path = tmp_path / "data.tsv"
        write_dataset(toy_dataset, path)
        lines = path.read_text(encoding="utf-8").splitlines()
        cells = lines[3].split("\t")
        cells[1] = token
        lines[3] = "\t".join(cells)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        assert cli.main(["fit", "--data", str(path), "--method", "ivw",
                         "--out", str(tmp_path / "out")]) == EXIT_INVALID
        assert "row 3" in capsys.readouterr().err

    def test_bad_sigma_exit_code(self, toy_files, tmp_path):
        data_path, sigma_path = toy_files
        sigma_path.write_text("1,0.5,0\n0.5,1,0\n0,0,2\n", encoding="utf-8")
        assert cli.main(["fit", "--data", str(data_path), "--sigma", str(sigma_path),
                         "--method", "ivw", "--out", str(tmp_path / "out")]) == EXIT_INVALID
