"""
Tests for the rvae command line
"""

import csv
import json
import math
import os
import sys

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import src.cli.sweep as sweep_module
from src.cli import main
from src.cli.charts import render_sweep_svg
from src.cli.manifest import MANIFEST_FILE, read_manifest
from src.core.numerics import make_rng
from src.core.vae_model import VaeParams, save_checkpoint
from src.data.idx import read_idx_images, write_idx_images
from src.utils.errors import TrainingDivergenceError


QUIET = ['--log-level', 'ERROR']
TINY = ['--epochs', '2', '--batch-size', '10', '--hidden', '6', '--latent', '2',
        '--eval-interval', '1', '--k', '4']


def _write_images(path, count, side=4, seed=0):
    images = make_rng(seed, 99).integers(0, 256, size=(count, side, side), dtype=np.uint8)
    write_idx_images(images, path)
    return path


def _last_line(text):
    return text.strip().splitlines()[-1]


@pytest.fixture
def idx_files(tmp_path):
    """A 40-image training file and an 8-image test file of 4x4 images"""
    train = _write_images(str(tmp_path / 'train-idx3-ubyte'), 40, seed=0)
    test = _write_images(str(tmp_path / 'test-idx3-ubyte'), 8, seed=1)
    return train, test


def test_make_noise(tmp_path, capsys):
    """2:1 on 100 images writes 150 images and a provenance sidecar"""
    images = _write_images(str(tmp_path / 'in-idx3-ubyte'), 100)
    out = str(tmp_path / 'mixed-idx3-ubyte')
    assert main(QUIET + ['make-noise', '--images', images, '--ratio', '2:1', '--out', out]) == 0
    assert _last_line(capsys.readouterr().out) == out
    assert read_idx_images(out).shape == (150, 4, 4)
    with open(out + '.provenance.csv', newline='') as f:
        rows = list(csv.DictReader(f))
    assert sum(r['provenance'] == 'noise' for r in rows) == 50


def test_missing_input_file(tmp_path, capsys):
    """A missing file exits 1 and names the path on stderr"""
    missing = str(tmp_path / 'absent-idx3-ubyte')
    code = main(QUIET + ['make-noise', '--images', missing, '--ratio', '1:1', '--out', str(tmp_path / 'o')])
    assert code == 1
    assert missing in capsys.readouterr().err


def test_bad_ratio_is_a_usage_error(tmp_path):
    """Malformed ratios are rejected by argument parsing"""
    with pytest.raises(SystemExit) as info:
        main(['make-noise', '--images', 'x', '--ratio', '2-1', '--out', str(tmp_path / 'o')])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(['make-noise', '--images', 'x', '--ratio', 'clean', '--out', str(tmp_path / 'o')])
    assert info.value.code == 2


def test_train_writes_run_directory(idx_files, tmp_path, capsys):
    """train writes manifest, metrics, checkpoint and evaluation files"""
    train, test = idx_files
    run_dir = str(tmp_path / 'run')
    code = main(QUIET + ['train', '--train', train, '--test', test, '--run-dir', run_dir,
                         '--ratio', '1:1', '--log-alpha', '-5', '--seed', '3'] + TINY)
    assert code == 0
    assert _last_line(capsys.readouterr().out) == run_dir
    for name in (MANIFEST_FILE, 'metrics.csv', 'checkpoint.rvae',
                 os.path.join('eval', 'test_ll.csv'), os.path.join('eval', 'test_ll.json')):
        assert os.path.isfile(os.path.join(run_dir, name)), name

    manifest = read_manifest(run_dir)
    assert manifest.ratio == '1:1'
    assert manifest.seed == 3 and manifest.mix_seed == 3
    assert manifest.config['log_alpha'] == -5.0
    assert manifest.finished_at
    with open(os.path.join(run_dir, 'eval', 'test_ll.json')) as f:
        assert math.isfinite(json.load(f)['mean_ll'])


def test_manifest_rerun_is_identical(idx_files, tmp_path):
    """Repeating a run from its manifest reproduces metrics.csv byte for byte"""
    train, test = idx_files
    first = str(tmp_path / 'first')
    second = str(tmp_path / 'second')
    assert main(QUIET + ['train', '--train', train, '--test', test, '--run-dir', first,
                         '--ratio', '2:1'] + TINY) == 0
    assert main(QUIET + ['train', '--manifest', os.path.join(first, MANIFEST_FILE),
                         '--run-dir', second]) == 0
    with open(os.path.join(first, 'metrics.csv'), 'rb') as f:
        a = f.read()
    with open(os.path.join(second, 'metrics.csv'), 'rb') as f:
        b = f.read()
    assert a == b


def test_manifest_refuses_changed_inputs(idx_files, tmp_path, capsys):
    """A changed input file makes the manifest unusable (exit 2)"""
    train, test = idx_files
    run_dir = str(tmp_path / 'run')
    assert main(QUIET + ['train', '--train', train, '--no-test', '--run-dir', run_dir] + TINY) == 0
    _write_images(train, 40, seed=5)
    code = main(QUIET + ['train', '--manifest', run_dir, '--run-dir', str(tmp_path / 'again')])
    assert code == 2
    assert 'sha256' in capsys.readouterr().err


class TestEval:
    """Test cases for the eval subcommand"""

    @pytest.fixture
    def zero_checkpoint(self, tmp_path):
        """A zero model over 28x28 images and a 3-image test file"""
        checkpoint = str(tmp_path / 'model' / 'checkpoint.rvae')
        os.makedirs(os.path.dirname(checkpoint))
        save_checkpoint(VaeParams.zeros(784, 5, 2), checkpoint)
        test = _write_images(str(tmp_path / 'test-idx3-ubyte'), 3, side=28)
        return checkpoint, test

    def test_zero_model(self, zero_checkpoint, capsys):
        """Test a zero model scores -784 log 2 with a single sample"""
        checkpoint, test = zero_checkpoint
        code = main(QUIET + ['eval', '--checkpoint', checkpoint, '--test', test,
                             '--hidden', '5', '--latent', '2', '--k', '1'])
        assert code == 0
        assert _last_line(capsys.readouterr().out) == f"{-784 * math.log(2.0):.6f}"
        assert os.path.isfile(os.path.join(os.path.dirname(checkpoint), 'eval', 'test_ll.csv'))

    def test_bad_magic(self, zero_checkpoint, capsys):
        """Test a corrupted checkpoint exits 1"""
        checkpoint, test = zero_checkpoint
        with open(checkpoint, 'r+b') as f:
            f.write(b'JUNK')
        code = main(QUIET + ['eval', '--checkpoint', checkpoint, '--test', test,
                             '--hidden', '5', '--latent', '2', '--k', '1'])
        assert code == 1
        assert 'magic' in capsys.readouterr().err

    def test_architecture_mismatch(self, zero_checkpoint, capsys):
        """Test loading into the wrong architecture exits 1 with both shape tables"""
        checkpoint, test = zero_checkpoint
        code = main(QUIET + ['eval', '--checkpoint', checkpoint, '--test', test,
                             '--hidden', '7', '--latent', '2', '--k', '1'])
        assert code == 1
        err = capsys.readouterr().err
        assert '784x7' in err and '784x5' in err


def test_gradcheck_passes(capsys):
    """Default gradient check exits 0"""
    assert main(QUIET + ['gradcheck']) == 0
    assert 'max relative error at h=1e-05' in capsys.readouterr().out


def test_gradcheck_catches_corruption(capsys):
    """A corrupted backward pass exits 4 and names the coordinate"""
    assert main(QUIET + ['gradcheck', '--corrupt-backward']) == 4
    assert 'worst coordinate: dec_out.b[' in capsys.readouterr().out


def _read_rows(path):
    with open(path, newline='') as f:
        return list(csv.reader(f))


def test_sweep_grid_and_chart(idx_files, tmp_path):
    """A 2 x (baseline + 2 alphas) grid writes rows in order and a reproducible chart"""
    train, test = idx_files
    out_dir = str(tmp_path / 'sweep')
    code = main(QUIET + ['sweep', '--train', train, '--test', test, '--out-dir', out_dir,
                         '--ratios', '1:1', 'clean', '--log-alphas', '-3', '-6', '--seeds', '0'] + TINY)
    assert code == 0
    rows = _read_rows(os.path.join(out_dir, 'sweep.csv'))
    assert rows[0] == ['ratio', 'log_alpha', 'seed', 'test_ll']
    assert [(r[0], r[1]) for r in rows[1:]] == [
        ('1:1', 'elbo'), ('1:1', '-3'), ('1:1', '-6'),
        ('clean', 'elbo'), ('clean', '-3'), ('clean', '-6'),
    ]
    assert all(math.isfinite(float(r[3])) for r in rows[1:])
    assert os.path.isdir(os.path.join(out_dir, 'runs', '1-1_-3_seed0'))

    redrawn = str(tmp_path / 'redrawn.svg')
    assert main(QUIET + ['chart', os.path.join(out_dir, 'sweep.csv'), '--out', redrawn]) == 0
    with open(os.path.join(out_dir, 'figure.svg'), 'rb') as f:
        original = f.read()
    with open(redrawn, 'rb') as f:
        assert f.read() == original


def test_sweep_partial_failure(idx_files, tmp_path, monkeypatch):
    """A failed run is recorded, the other rows survive and the exit code is 5"""
    train, test = idx_files
    real_execute = sweep_module.execute_run

    def flaky(config, *args, **kwargs):
        if config.objective == 'robust':
            raise TrainingDivergenceError('non-finite robust objective (nan)')
        return real_execute(config, *args, **kwargs)

    monkeypatch.setattr(sweep_module, 'execute_run', flaky)
    out_dir = str(tmp_path / 'sweep')
    code = main(QUIET + ['sweep', '--train', train, '--test', test, '--out-dir', out_dir,
                         '--ratios', '2:1', '--log-alphas', '-3', '--seeds', '0', '1'] + TINY)
    assert code == 5
    rows = _read_rows(os.path.join(out_dir, 'sweep.csv'))[1:]
    assert [r[3] == 'failed' for r in rows] == [False, False, True, True]
    assert os.path.isfile(os.path.join(out_dir, 'figure.svg'))


def test_chart_rejects_foreign_csv(tmp_path, capsys):
    """A CSV without the sweep header exits 1"""
    path = tmp_path / 'other.csv'
    path.write_text('a,b\n1,2\n')
    assert main(QUIET + ['chart', str(path)]) == 1
    assert 'header' in capsys.readouterr().err


def test_render_sweep_svg_is_deterministic():
    """Same rows, same SVG; failed rows are left out of the means"""
    rows = [
        {'ratio': '2:1', 'log_alpha': 'elbo', 'seed': '0', 'test_ll': '-110.5'},
        {'ratio': '2:1', 'log_alpha': '-50', 'seed': '0', 'test_ll': '-100.25'},
        {'ratio': '2:1', 'log_alpha': '-150', 'seed': '0', 'test_ll': '-104.0'},
        {'ratio': '2:1', 'log_alpha': '-150', 'seed': '1', 'test_ll': 'failed'},
    ]
    svg = render_sweep_svg(rows)
    assert svg == render_sweep_svg(rows)
    assert svg.startswith('<svg')
    assert 'ratio 2:1' in svg
    assert 'stroke-dasharray' in svg
    assert svg.count('<circle') == 2
    assert 'log alpha -150: -104.00' in svg
