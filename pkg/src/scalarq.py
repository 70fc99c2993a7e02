#!/usr/bin/env python3
"""
标量量化基线（INT1-INT8）

非对称 min-max 仿射量化：scale = (max-min)/(2^N-1)，zero_point = min，
code = round((x-min)/scale) 并截断到 [0, 2^N-1]。
常数块（max == min）用 scale = 0 表示，全部编码为 0，反量化为 min。
"""

import logging
from dataclasses import dataclass
from typing import Dict, Union

import numpy as np

from bitpack import PackedIndexStream, pack_indices, unpack_indices
from errors import InvalidSpec
from tensor_io import EmbeddingMatrix

logger = logging.getLogger(__name__)

GRANULARITIES = ('per-row', 'per-matrix')

# scale / zero_point 固定用 binary32 存储
SQ_PARAM_BITS = 32


@dataclass
class SqParams:
    bits: int = 4
    granularity: str = 'per-row'

    def validate(self) -> 'SqParams':
        if not 1 <= self.bits <= 8:
            raise InvalidSpec(f"标量量化位数必须在 1..8 内: {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise InvalidSpec(f"未知粒度: {self.granularity}（可选 {', '.join(GRANULARITIES)}）")
        return self

    def to_dict(self) -> Dict:
        return {'bits': self.bits, 'granularity': self.granularity}

    @classmethod
    def from_dict(cls, d: Dict) -> 'SqParams':
        return cls(bits=int(d['bits']), granularity=d.get('granularity', 'per-row'))


@dataclass
class SqModel:
    """标量量化结果"""

    params: SqParams
    shape: tuple
    scales: np.ndarray
    zero_points: np.ndarray
    codes: PackedIndexStream

    @property
    def bits(self) -> int:
        return self.params.bits

    @property
    def block_count(self) -> int:
        return self.scales.size


def _blocks(data: np.ndarray, granularity: str) -> np.ndarray:
    """返回 (块数, 块长) 的视图"""
    if granularity == 'per-row':
        return data
    return data.reshape(1, -1)


def sq_quantize(
    M: Union[EmbeddingMatrix, np.ndarray],
    bits: int,
    granularity: str = 'per-row'
) -> SqModel:
    """按块做非对称 min-max 量化"""
    params = SqParams(bits=bits, granularity=granularity).validate()
    data = M.data if isinstance(M, EmbeddingMatrix) else np.asarray(M, dtype=np.float32)
    blocks = _blocks(data, granularity).astype(np.float64)
    levels = (1 << bits) - 1

    lo = blocks.min(axis=1)
    hi = blocks.max(axis=1)
    scales = ((hi - lo) / levels).astype(np.float32)
    zero_points = lo.astype(np.float32)

    # float32 舍入可能让最高码越过块最大值，逐 ulp 收回
    over = levels * scales.astype(np.float64) + zero_points.astype(np.float64) > hi
    while over.any():
        scales = np.where(over, np.nextafter(scales, np.float32(0)), scales)
        over = levels * scales.astype(np.float64) + zero_points.astype(np.float64) > hi

    s = scales.astype(np.float64)[:, None]
    safe = np.where(s > 0, s, 1.0)
    codes = np.rint((blocks - zero_points.astype(np.float64)[:, None]) / safe)
    codes = np.clip(codes, 0, levels)
    codes[np.broadcast_to(s == 0, codes.shape)] = 0

    degenerate = int((scales == 0).sum())
    if degenerate:
        logger.debug(f"{degenerate} 个常数块走退化路径")

    return SqModel(
        params=params,
        shape=data.shape,
        scales=scales,
        zero_points=zero_points,
        codes=pack_indices(codes.astype(np.int64).reshape(-1), bits),
    )


def sq_dequantize(model: SqModel) -> np.ndarray:
    """x̂ = code·scale + zero_point"""
    V, n = model.shape
    codes = _blocks(unpack_indices(model.codes).reshape(V, n), model.params.granularity)
    out = codes * model.scales.astype(np.float64)[:, None] + model.zero_points.astype(np.float64)[:, None]
    return out.reshape(V, n).astype(np.float32)
