import warnings

import numpy as np
import pytest

from heartdeform.config import fit_config, load_config
from heartdeform.errors import MeshValidationError
from heartdeform.plotting import plot_loss_curve, plot_volume_trace


def test_defaults_without_file():
    cfg = load_config(None)
    assert cfg == {"fit": {}, "loss": {}}
    fc = fit_config(cfg)
    assert fc.schedule == [75, 75, 600] and fc.iters_per_block == 300
    assert fc.loss.alpha == 1.0 and fc.loss.lambda3 == 0.5


def test_toml_and_json_agree(tmp_path):
    (tmp_path / "a.toml").write_text('[fit]\nschedule = [5, 9]\noptimizer = "gradient_descent_momentum"\n'
                                     "[loss]\nalpha = 0.3\nbeta = 2.0\n")
    (tmp_path / "a.json").write_text('{"fit": {"schedule": [5, 9], "optimizer": "gradient_descent_momentum"},'
                                     ' "loss": {"alpha": 0.3, "beta": 2.0}}')
    a = fit_config(load_config(tmp_path / "a.toml"))
    b = fit_config(load_config(tmp_path / "a.json"))
    assert a == b
    assert a.loss.beta == 2.0


def test_overrides_win_and_none_ignored(tmp_path):
    (tmp_path / "c.toml").write_text("[fit]\niters_per_block = 50\nstep_size = 0.02\n")
    fc = fit_config(load_config(tmp_path / "c.toml"), {"iters_per_block": 7, "step_size": None})
    assert fc.iters_per_block == 7 and fc.step_size == 0.02


def test_unsupervised_key_accepted(tmp_path):
    (tmp_path / "c.toml").write_text('[fit]\nunsupervised = ["aorta"]\n')
    cfg = load_config(tmp_path / "c.toml")
    assert cfg["fit"]["unsupervised"] == ["aorta"]
    fit_config(cfg)


@pytest.mark.parametrize(
    "text",
    [
        "[fit]\nlearning_rate = 1\n",
        "[loss]\ngamma = 1\n",
        "[solver]\nx = 1\n",
        "[fit\n",
        "[fit]\nschedule = []\n",
        "[loss]\nalpha = -1\n",
        '[fit]\nenergy = "harmonic"\n',
    ],
)
def test_bad_configs(tmp_path, text):
    (tmp_path / "c.toml").write_text(text)
    with pytest.raises(MeshValidationError):
        fit_config(load_config(tmp_path / "c.toml"))


def test_missing_config_file(tmp_path):
    with pytest.raises(MeshValidationError):
        load_config(tmp_path / "none.toml")


def test_nonmonotone_schedule_warns_only():
    with pytest.warns(UserWarning):
        fc = fit_config({"fit": {"schedule": [30, 10]}})
    assert fc.schedule == [30, 10]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit_config({"fit": {"schedule": [10, 10, 30]}})


def test_svg_deterministic(tmp_path):
    trace = np.array([[i, i // 10, 1.0 / (i + 1), 0.1] for i in range(30)], dtype=float)
    plot_loss_curve(trace, tmp_path / "a.svg")
    plot_loss_curve(trace, tmp_path / "b.svg")
    a = (tmp_path / "a.svg").read_bytes()
    assert a == (tmp_path / "b.svg").read_bytes()
    assert b"<svg" in a and b"<dc:date>" not in a
    vol = np.stack([np.linspace(0, 1, 50), 1e5 + 1e4 * np.sin(np.linspace(0, 6, 50))], 1)
    plot_volume_trace(vol, tmp_path / "v1.svg")
    plot_volume_trace(vol, tmp_path / "v2.svg")
    assert (tmp_path / "v1.svg").read_bytes() == (tmp_path / "v2.svg").read_bytes()
    assert b"volume (mL)" in (tmp_path / "v1.svg").read_bytes()
