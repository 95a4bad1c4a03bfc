#!/usr/bin/env python
# -*- coding: utf-8 -*-
# @Filename:    test_config.py

"""TOML experiment configuration"""

# non-system, pip installs
import pytest
from fedcondi.config import AblationConfig, ExperimentConfig, dump_config, \
     load_config, loads_config
from fedcondi.errors import ConfigError

CUSTOM = """
seed = 11
output_dir = "runs/custom"

[data]
n_samples = 40
modalities = 2
length = 8
features = 1
test_fraction = 0.25

[missingness]
p_s = 0.8
p_w = 0.5
mode = "timestep"

[federation]
clients = 3
participation = 1
rounds = 4
lr = 0.01

[model]
embed_dim = 4
experts = 2
top_k = 1
mask_ratio_range = [0.2, 0.6]

[ablation]
no_cond = true
"""


def test_empty_file_gives_defaults():
    assert loads_config('') == ExperimentConfig()


def test_values_are_read():
    config = loads_config(CUSTOM)
    assert config.seed == 11
    assert config.data.length == 8
    assert config.missingness.mode == 'timestep'
    assert config.federation.participation == 1.0
    assert isinstance(config.federation.participation, float)
    assert config.model.mask_ratio_range == (0.2, 0.6)
    assert config.ablation.label == 'no_cond'
    assert config.missingness_config().seed == 11


def test_dump_and_load_agree(tmp_path):
    config = loads_config(CUSTOM)
    path = tmp_path / 'config.toml'
    path.write_text(dump_config(config))
    assert load_config(path) == config


def test_csv_schema_round_trip():
    config = loads_config('[data]\nsource = "csv"\ncsv_path = "x.csv"\n'
                          '[data.schema]\nvitals = ["hr", "sbp"]\n'
                          'labs = ["lac"]\n')
    assert list(config.data.schema.values()) == [('hr', 'sbp'), ('lac',)]
    assert loads_config(dump_config(config)) == config


@pytest.mark.parametrize('text', [
    'seeds = 1',
    '[federation]\nround = 3',
    '[cluster]\nsize = 2',
    '[missingness]\np_s = 1.5',
    '[federation]\nrounds = "ten"',
    '[federation]\nrounds = 2.5',
    '[federation]\nlr = true',
    '[ablation]\nno_cond = 1',
    'seed = true',
    'seed = -1',
    'seed = ',
    '[model]\ntop_k = 5\nexperts = 4',
    '[model]\nbeta_min = 0.3\nbeta_max = 0.2',
    '[model]\nmask_ratio_range = [0.9, 0.1]',
    '[model]\nmask_ratio_range = ["a", "b"]',
    '[model]\nmask_ratio_range = [0.2]',
    '[model]\nmask_ratio_range = 0.5',
    '[model]\nkernel = 4',
    '[model]\nencoder_kernel = 2',
    '[model]\ntime_dim = 7',
    '[model]\nhidden = 0',
    '[data]\nsource = "csv"',
    '[federation]\nclients = 4\nparticipation = 0.1',
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        loads_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / 'absent.toml')


def test_overrides_keep_unset_values():
    config = loads_config(CUSTOM)
    changed = config.with_overrides(seed=5, p_w=0.1, no_imputation=True)
    assert changed.seed == 5 and changed.missingness.p_w == 0.1
    assert changed.missingness.p_s == 0.8
    assert changed.output_dir == 'runs/custom'
    assert changed.ablation.label == 'no_imputation+no_cond'
    assert config.with_overrides() == config


def test_ablation_labels():
    assert AblationConfig().label == 'full'
    assert AblationConfig(no_imputation=True).label == 'no_imputation'


def test_model_section_builds_dims_and_schedule():
    model = loads_config(CUSTOM).model
    dims = model.dims(2, 2, 3)
    assert dims.fused_dim == 3 * 4 * 2
    assert dims.experts == 2 and dims.top_k == 1
    assert model.schedule().steps == 50
