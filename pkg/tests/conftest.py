"""
测试公共设置：把 src/ 加进 sys.path，注册 slow 标记和 hypothesis 配置
"""

import sys
from pathlib import Path

import hypothesis
import numpy as np
import pytest

SRC_DIR = Path(__file__).resolve().parent.parent / 'src'
sys.path.insert(0, str(SRC_DIR))

from tensor_io import gen_synthetic  # noqa: E402

hypothesis.settings.register_profile('default', max_examples=50, deadline=None)
hypothesis.settings.register_profile('fast', max_examples=5, deadline=None)
hypothesis.settings.load_profile('default')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: 全尺寸验收测试（几十秒到几分钟）')


@pytest.fixture
def small_matrix():
    """200×16 的聚类合成矩阵"""
    return gen_synthetic(V=200, n=16, clusters=8, noise_sigma=0.05, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def fast_config(tmp_path):
    """命令行测试用的小配置：小适配器、少迭代"""
    path = tmp_path / 'config.yaml'
    path.write_text(
        'grvq:\n'
        '  L: 2\n'
        '  kappa: 4\n'
        '  h: 8\n'
        '  g: 100\n'
        'adaptor:\n'
        '  m: 4\n'
        '  hidden: [16, 16]\n'
        '  iterations: 40\n'
        '  lr: 0.005\n'
        '  log_every: 0\n'
        'runtime:\n'
        '  seed: 0\n'
        '  threads: 1\n'
        'report:\n'
        '  format: json\n'
        '  param_terms: weights\n',
        encoding='utf-8'
    )
    return path
