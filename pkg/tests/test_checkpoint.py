import json

import numpy as np
import pytest

from engine.optim import Adam
from models.checkpoint import decode_array, encode_array, load_checkpoint, save_checkpoint
from utils.errors import CheckpointError


@pytest.fixture
def saved(tmp_path):
    params = {'w': np.array([[1.5, -2.0], [0.25, 3.0]]), 'b': np.array([0.1])}
    opt = Adam(params, lr=0.01)
    opt.step({'w': np.ones((2, 2)), 'b': np.ones(1)})
    path = save_checkpoint(str(tmp_path / 'student.json'), 'student', params, {'d': 2}, 'abc123',
                           optimizer=opt.state_dict(), extra={'epoch': 4})
    return path, params, opt


def test_array_encoding_is_exact():
    arr = np.array([[np.pi, -1e-300], [1e300, 0.1]])
    np.testing.assert_array_equal(decode_array(encode_array(arr)), arr)


def test_load_restores_everything(saved):
    path, params, opt = saved
    payload = load_checkpoint(path, 'student', 'abc123')
    np.testing.assert_array_equal(payload['params']['w'], params['w'])
    assert payload['arch'] == {'d': 2}
    assert payload['extra'] == {'epoch': 4}
    assert payload['optimizer']['t'] == 1
    np.testing.assert_array_equal(payload['optimizer']['m']['w'], opt.m['w'])


def test_hash_not_checked_when_none(saved):
    path, _, _ = saved
    assert load_checkpoint(path, 'student')['config_hash'] == 'abc123'


@pytest.mark.parametrize('kind, config_hash', [('teacher', 'abc123'), ('student', 'other')])
def test_mismatch_rejected(saved, kind, config_hash):
    path, _, _ = saved
    with pytest.raises(CheckpointError):
        load_checkpoint(path, kind, config_hash)


@pytest.mark.parametrize('format_version', ['2.0', '0.9', '1.9'])
def test_incompatible_format(saved, format_version):
    path, _, _ = saved
    with open(path, encoding='utf-8') as f:
        payload = json.load(f)
    payload['format_version'] = format_version
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, 'student')


def test_unreadable_file(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{not json', encoding='utf-8')
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path), 'student')
