#!/usr/bin/env python3
"""
嵌入矩阵读写 - .emb 容器格式

文件布局（所有整数小端）:
    0-7      魔数 b"CARVQEMB"
    8-11     u32 头部长度 H
    12..12+H UTF-8 JSON {"v": V, "n": n, "dtype": "f16"|"f32"}
    其余     行优先的系数
"""

import json
import struct
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from errors import InvalidSpec, IoFailure, MalformedHeader, NonFiniteData, ShapeMismatch

logger = logging.getLogger(__name__)

EMB_MAGIC = b'CARVQEMB'

# 存储 dtype -> (numpy 小端类型, 每个系数的位数)
STORAGE_DTYPES = {
    'f16': ('<f2', 16),
    'f32': ('<f4', 32),
}

PathLike = Union[str, Path]


@dataclass
class EmbeddingMatrix:
    """
    V×n 嵌入矩阵

    data 始终是 float32（工作精度），dtype 只记录来源/存储精度
    """

    data: np.ndarray
    dtype: str = 'f32'

    def __post_init__(self):
        if self.dtype not in STORAGE_DTYPES:
            raise InvalidSpec(f"不支持的 dtype: {self.dtype}（可选 f16 / f32）")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ShapeMismatch(f"嵌入矩阵必须是非空二维数组，实际形状 {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteData("嵌入矩阵包含 NaN/Inf")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    @property
    def source_precision(self) -> int:
        return STORAGE_DTYPES[self.dtype][1]


def _encode_header(v: int, n: int, dtype: str) -> bytes:
    return json.dumps({'v': v, 'n': n, 'dtype': dtype}, sort_keys=True, separators=(',', ':')).encode('utf-8')


def load_matrix(path: PathLike) -> EmbeddingMatrix:
    """
    读取 .emb 文件

    Raises:
        MalformedHeader: 魔数或 JSON 头部不合法
        ShapeMismatch: 声明的 V·n 与数据长度不符
        NonFiniteData: 数据包含 NaN/Inf
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"无法读取文件 {path}: {e}") from e

    if len(raw) < 12 or raw[:8] != EMB_MAGIC:
        raise MalformedHeader(f"不是 .emb 文件（魔数错误）: {path}")

    (header_len,) = struct.unpack('<I', raw[8:12])
    if 12 + header_len > len(raw):
        raise MalformedHeader(f"头部长度越界: {header_len}")

    try:
        header = json.loads(raw[12:12 + header_len].decode('utf-8'))
        v, n, dtype = int(header['v']), int(header['n']), header['dtype']
    except (ValueError, KeyError, TypeError) as e:
        raise MalformedHeader(f"JSON 头部无法解析: {e}") from e

    if dtype not in STORAGE_DTYPES:
        raise MalformedHeader(f"未知的 dtype: {dtype}")
    if v < 1 or n < 1:
        raise MalformedHeader(f"形状不合法: v={v}, n={n}")

    np_dtype, bits = STORAGE_DTYPES[dtype]
    payload = raw[12 + header_len:]
    itemsize = bits // 8
    if len(payload) != v * n * itemsize:
        raise ShapeMismatch(
            f"头部声明 {v}×{n}={v * n} 个系数，实际数据 {len(payload)} 字节"
            f"（{len(payload) / itemsize:g} 个系数）"
        )

    stored = np.frombuffer(payload, dtype=np_dtype)
    if not np.isfinite(stored).all():
        raise NonFiniteData(f"文件包含 NaN/Inf: {path}")

    logger.debug(f"读取 {path}: {v}×{n} {dtype}")
    return EmbeddingMatrix(stored.astype(np.float32).reshape(v, n), dtype=dtype)


def save_matrix(matrix: EmbeddingMatrix, path: PathLike, dtype: str = None):
    """
    写入 .emb 文件

    Args:
        matrix: 嵌入矩阵
        path: 输出路径
        dtype: 'f16' 或 'f32'，默认沿用 matrix.dtype；f16 使用就近偶数舍入
    """
    dtype = dtype or matrix.dtype
    if dtype not in STORAGE_DTYPES:
        raise InvalidSpec(f"不支持的 dtype: {dtype}")

    np_dtype, _ = STORAGE_DTYPES[dtype]
    stored = matrix.data.astype(np_dtype)
    if not np.isfinite(stored).all():
        # float32 超出 binary16 范围时会溢出为 Inf
        raise NonFiniteData(f"转换为 {dtype} 后出现溢出")

    v, n = matrix.shape
    header = _encode_header(v, n, dtype)
    try:
        with open(path, 'wb') as f:
            f.write(EMB_MAGIC)
            f.write(struct.pack('<I', len(header)))
            f.write(header)
            f.write(stored.tobytes())
    except OSError as e:
        raise IoFailure(f"无法写入文件 {path}: {e}") from e

    logger.debug(f"写入 {path}: {v}×{n} {dtype}")


def gen_synthetic(
    V: int,
    n: int,
    clusters: int,
    noise_sigma: float,
    seed: int,
    dtype: str = 'f32'
) -> EmbeddingMatrix:
    """
    生成聚类结构的合成嵌入矩阵

    每一行 = 某个高斯中心 + 各向同性噪声；每个中心至少出现一次。
    同样的参数总是得到同样的矩阵。
    """
    if V < 1 or n < 1:
        raise InvalidSpec(f"V 和 n 必须为正数: V={V}, n={n}")
    if clusters < 1 or clusters > V:
        raise InvalidSpec(f"clusters 必须在 [1, V] 内: clusters={clusters}, V={V}")
    if noise_sigma < 0:
        raise InvalidSpec(f"noise_sigma 不能为负: {noise_sigma}")

    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((clusters, n))
    labels = rng.permutation(np.arange(V) % clusters)
    data = centers[labels]
    if noise_sigma > 0:
        data = data + noise_sigma * rng.standard_normal((V, n))
    if dtype == 'f16':
        data = data.astype(np.float16)

    return EmbeddingMatrix(data.astype(np.float32), dtype=dtype)
