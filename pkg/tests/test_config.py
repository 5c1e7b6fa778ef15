import json
import os

import pytest

from config import RESOLVED_NAME, defaults, load_config, merge
from utils.errors import ConfigError
from utils.key_resolver import normalize_key, suggest_key

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding='utf-8')
    return str(path)


def test_defaults_resolve():
    cfg = load_config()
    assert cfg.schedule.T == 128
    assert cfg.search.K == 5 and cfg.search.kernel == 'linear'
    assert cfg.search.seed == cfg.seed == 0
    assert cfg.train.steps == 4000


def test_example_config_loads():
    cfg = load_config(os.path.join(ROOT, 'configs', 'toy.toml'))
    assert cfg.search.time is True
    assert cfg.eval.seeds == [0, 1, 2, 3, 4]


def test_file_then_overrides(tmp_path):
    path = _write(tmp_path, 'run.toml', 'seed = 3\n[search]\nK = 4\nsteps = 10\n')
    cfg = load_config(path, {'search.K': 8, 'search.kernel': None, 'out': str(tmp_path)})
    assert (cfg.seed, cfg.search.seed) == (3, 3)
    assert cfg.search.K == 8 and cfg.search.steps == 10
    assert cfg.search.kernel == 'linear'
    assert cfg.source == path


def test_json_config(tmp_path):
    path = _write(tmp_path, 'run.json', json.dumps({'model': {'hidden': 32}}))
    assert load_config(path).model.hidden == 32


def test_unknown_key_gets_a_suggestion(tmp_path):
    path = _write(tmp_path, 'run.toml', '[search]\nstpes = 10\n')
    with pytest.raises(ConfigError, match="did you mean 'search.steps'") as info:
        load_config(path)
    assert info.value.field == 'search.stpes'
    assert info.value.exit_code == 2


def test_unknown_section(tmp_path):
    path = _write(tmp_path, 'run.toml', '[serach]\nK = 3\n')
    with pytest.raises(ConfigError, match="did you mean 'search'"):
        load_config(path)


@pytest.mark.parametrize('text', [
    '[search]\nK = "five"\n',
    '[search]\ntime = 1\n',
    '[eval]\nseeds = [0, "1"]\n',
    'search = 3\n',
    '[train]\nweighting = "vlb"\n',
    '[search]\nstride = "learned"\n',
    '[search]\nK = 500\n',
    '[sampling]\neta = 1.5\n',
    '[model]\ntime_dim = 7\n',
    '[data]\nkind = "swiss_roll"\n',
])
def test_invalid_values_are_config_errors(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, 'run.toml', text))


def test_ints_are_accepted_for_floats():
    raw = merge(defaults(), {'train': {'lr': 1}})
    assert raw['train']['lr'] == 1.0 and isinstance(raw['train']['lr'], float)


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'absent.toml'))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, 'run.yaml', 'seed: 1\n'))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, 'run.toml', 'seed = \n'))


def test_resolved_config_round_trips(tmp_path):
    cfg = load_config(overrides={'search.K': 7, 'search.time': True})
    path = cfg.write_resolved(str(tmp_path))
    assert os.path.basename(path) == RESOLVED_NAME
    again = load_config(path)
    assert again.config_hash() == cfg.config_hash()
    assert again.search.K == 7


def test_hash_tracks_content():
    a = load_config()
    assert a.config_hash() == load_config().config_hash()
    assert a.config_hash() != load_config(overrides={'search.K': 6}).config_hash()


def test_key_suggestions():
    assert normalize_key(' Batch-Size ') == 'batch_size'
    assert suggest_key('batch-size', ['batch_size', 'steps']) == 'batch_size'
    assert suggest_key('kernal', ['kernel', 'features']) == 'kernel'
    assert suggest_key('zzzz', ['kernel', 'features']) is None
