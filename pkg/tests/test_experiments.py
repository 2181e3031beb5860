import numpy as np
import pytest

from weightextrap.data import EOS_FEATURES, EosConfig, gen_toy_eos
from weightextrap.experiments import (ConfigError, config_from_dict, focus_config, mask_key, prepare,
                                      resolve_mask, run_pipeline)
from weightextrap.netcore import NetworkSpec


def test_tipping_defaults():
    cfg = config_from_dict({})
    assert cfg.experiment == "tipping" and cfg.predictors.kind == "eof" and cfg.predictors.n_eof == 4
    assert cfg.sensitivity.n == 200 and [v.degree for v in cfg.regression] == [1, 2]
    assert focus_config(cfg).finetune_lr == pytest.approx(0.1 * cfg.parent.learning_rate)


def test_toy_eos_defaults():
    cfg = config_from_dict({"experiment": "toy_eos"})
    assert tuple(cfg.predictors.columns) == EOS_FEATURES
    assert cfg.sensitivity.selection == "quantile" and cfg.sensitivity.n_quantiles == 300
    assert cfg.split.eot == 2000


@pytest.mark.parametrize("d,path", [
    ({"experiment": "ocean"}, "experiment"),
    ({"sensitivity": {"mode": "online"}}, "sensitivity.mode"),
    ({"regression": [{"name": "a"}, {"name": "a"}]}, "regression"),
    ({"regression": [{"family": "forest"}]}, "regression[0].family"),
    ({"split": {"train_fraction": 0}}, "split.train_fraction"),
])
def test_config_errors_name_the_field(d, path):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(d)
    assert exc.value.path == path


def test_mask_selectors():
    spec = NetworkSpec([6, 16, 1], ["elu", "linear"])
    assert resolve_mask(spec, "all").all() and not resolve_mask(spec, "none").any()
    assert resolve_mask(spec, "final_layer").sum() == 17
    np.testing.assert_array_equal(resolve_mask(spec, [0]), spec.layer_mask([0]))
    assert mask_key([0, 1]) == "layers-0-1" and mask_key([]) == "none"
    with pytest.raises(ConfigError):
        resolve_mask(spec, [5])


def test_tipping_prepare_uses_training_eofs():
    cfg = config_from_dict({"split": {"eot": 900.0}})
    prep = prepare(cfg)
    assert prep.train_rows.size == 900 and prep.basis.k_leading == 4
    assert prep.net_inputs.shape == (2200, 4)
    # the basis is fitted on in-training fields only
    np.testing.assert_allclose(prep.net_inputs[:900].mean(axis=0), 0.0, atol=1e-10)


def test_eos_pipeline_windows_and_quantile_episodes():
    cfg = config_from_dict({"experiment": "toy_eos", "toy_eos": {"n_lat": 6, "n_lon": 6},
                            "sensitivity": {"n_quantiles": 20}})
    res = run_pipeline(cfg, parent_seed=0, ds=gen_toy_eos(EosConfig(n_lat=6, n_lon=6)))
    rep = res.reports["poly2"]
    assert [w.name for w in rep.windows] == ["full_period", "inside", "beyond"]
    assert rep["inside"].n + rep["beyond"].n == rep["full_period"].n == 6 * 6 * 102
