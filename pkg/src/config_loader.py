#!/usr/bin/env python3
"""
配置加载

优先级：内置默认值 < config.yaml < 命令行参数
"""

import copy
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import yaml

from errors import InvalidSpec

logger = logging.getLogger(__name__)

THREADS_ENV = 'CARVQ_THREADS'
REPORT_FORMATS = ('json', 'table')


def get_default_config() -> Dict:
    """获取默认配置"""
    return {
        'grvq': {
            'L': 3,
            'kappa': 4,
            'h': 8,
            'g': 1024,
            'kmeans_tol': 1e-4,
            'kmeans_max_iter': 100,
            'allow_ragged': True,
        },
        'adaptor': {
            'm': 16,
            'hidden': [384, 512],
            'lr': 1e-3,
            'iterations': 500,
            'batch_size': None,
            'log_every': 50,
        },
        'scalar': {
            'bits': 4,
            'granularity': 'per-row',
        },
        'runtime': {
            'seed': 0,
            'threads': 1,
        },
        'report': {
            'format': 'table',
            'param_terms': 'weights',
        },
    }


def deep_merge(base: Dict, override: Dict) -> Dict:
    """递归合并，override 中的值覆盖 base（返回新字典）"""
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(config_file: Optional[str] = None) -> Dict:
    """
    加载配置文件，缺省项用默认值补齐

    文件不存在时给出警告并使用默认配置；文件内容不是合法 YAML 映射时报 InvalidSpec
    """
    defaults = get_default_config()
    if not config_file:
        return defaults

    config_path = Path(config_file)
    if not config_path.exists():
        logger.warning(f"⚠️  配置文件不存在: {config_file}，使用默认配置")
        return defaults

    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            loaded = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise InvalidSpec(f"配置文件解析失败 {config_file}: {e}") from e

    if loaded is None:
        loaded = {}
    if not isinstance(loaded, dict):
        raise InvalidSpec(f"配置文件顶层必须是映射: {config_file}")

    logger.info(f"✅ 已加载配置: {config_file}")
    return deep_merge(defaults, loaded)


def resolve_threads(flag: Optional[int], config: Dict) -> int:
    """--threads > CARVQ_THREADS > config.yaml"""
    if flag is not None:
        value = flag
    elif os.environ.get(THREADS_ENV):
        try:
            value = int(os.environ[THREADS_ENV])
        except ValueError as e:
            raise InvalidSpec(f"{THREADS_ENV} 必须是整数: {os.environ[THREADS_ENV]!r}") from e
    else:
        value = int(config.get('runtime', {}).get('threads', 1))
    if value < 1:
        raise InvalidSpec(f"线程数必须 ≥ 1: {value}")
    return value


@dataclass
class RunConfig:
    """一次命令行运行的完整配置"""

    subcommand: str
    seed: int = 0
    threads: int = 1
    report_format: str = 'table'
    param_terms: str = 'weights'
    settings: Dict = field(default_factory=get_default_config)

    def validate(self) -> 'RunConfig':
        if self.report_format not in REPORT_FORMATS:
            raise InvalidSpec(f"未知输出格式: {self.report_format}（可选 json / table）")
        if self.param_terms not in ('full', 'no-layernorm', 'weights'):
            raise InvalidSpec(f"未知的计数口径: {self.param_terms}")
        if self.threads < 1:
            raise InvalidSpec(f"线程数必须 ≥ 1: {self.threads}")
        return self

    def section(self, name: str) -> Dict:
        return dict(self.settings.get(name) or {})
