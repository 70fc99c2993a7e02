#!/usr/bin/env python3
"""
κ 位索引流打包

位序：第 i 个索引占据拼接位流的 [i·κ, (i+1)·κ) 位，低位在前；
字节内同样低位在前。末尾填充位必须为 0。
"""

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from errors import IndexOverflow, InvalidSpec, MalformedStream

MAX_KAPPA = 8


@dataclass(frozen=True)
class PackedIndexStream:
    """打包后的索引流"""

    kappa: int
    count: int
    data: bytes

    @property
    def nbits(self) -> int:
        return self.count * self.kappa


def packed_nbytes(count: int, kappa: int) -> int:
    """ceil(count·κ/8)"""
    return (count * kappa + 7) // 8


def _check_kappa(kappa: int):
    if not 1 <= kappa <= MAX_KAPPA:
        raise InvalidSpec(f"κ 必须在 1..{MAX_KAPPA} 内: {kappa}")


def pack_indices(indices: Union[Sequence[int], np.ndarray], kappa: int) -> PackedIndexStream:
    """
    把整数索引打包成 κ 位流

    Raises:
        IndexOverflow: 有索引 >= 2^κ 或为负数
    """
    _check_kappa(kappa)
    values = np.asarray(indices, dtype=np.int64).reshape(-1)
    if values.size and (values.min() < 0 or values.max() >= (1 << kappa)):
        raise IndexOverflow(f"索引超出 {kappa} 位范围 [0, {1 << kappa})")

    bits = ((values[:, None] >> np.arange(kappa, dtype=np.int64)) & 1).astype(np.uint8)
    data = np.packbits(bits.reshape(-1), bitorder='little').tobytes()
    return PackedIndexStream(kappa=kappa, count=int(values.size), data=data)


def unpack_indices(stream: PackedIndexStream) -> np.ndarray:
    """
    还原索引（pack_indices 的逆）

    Raises:
        MalformedStream: 缓冲区长度不对或填充位非零
    """
    _check_kappa(stream.kappa)
    expected = packed_nbytes(stream.count, stream.kappa)
    if len(stream.data) != expected:
        raise MalformedStream(f"缓冲区应为 {expected} 字节，实际 {len(stream.data)} 字节")

    bits = np.unpackbits(np.frombuffer(stream.data, dtype=np.uint8), bitorder='little')
    if bits[stream.nbits:].any():
        raise MalformedStream("填充位非零")

    bits = bits[:stream.nbits].reshape(stream.count, stream.kappa).astype(np.int64)
    return (bits << np.arange(stream.kappa, dtype=np.int64)).sum(axis=1)
