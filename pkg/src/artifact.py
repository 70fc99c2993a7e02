#!/usr/bin/env python3
"""
压缩产物容器（.carvq）

文件布局（所有整数小端）:
    0-7   魔数 b"CARVQART"
    8-11  u32 头部长度 H
    12..  UTF-8 JSON 元数据（键排序、无空白的规范形式）
    其余  各段数据，按元数据 sections 中声明的顺序依次排列

checksum 是 CRC32(不含 checksum 的规范 JSON + 全部段数据)，
因此头部和数据中任何一个字节被改动都能发现。
"""

import json
import struct
import zlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from accounting import AccountingReport, memory_report
from adaptor import Adaptor, AdaptorConfig, adaptor_forward, adaptor_forward_batch, param_shapes
from bitpack import PackedIndexStream, packed_nbytes, unpack_indices
from errors import (
    ChecksumMismatch,
    InvalidSpec,
    IoFailure,
    MalformedHeader,
    SectionLengthMismatch,
    TokenOutOfRange,
    UnknownVersion,
)
from grvq import Codebook, GroupCode, GrvqModel, GrvqParams, embed_lookup, grvq_reconstruct
from scalarq import SqModel, SqParams, sq_dequantize

logger = logging.getLogger(__name__)

ART_MAGIC = b'CARVQART'
FORMAT_VERSION = 1
SCHEMES = ('carvq', 'scalar', 'carvq+scalar-base')

_FLOAT_DTYPES = {16: '<f2', 32: '<f4'}

PathLike = Union[str, Path]


def _canonical(obj: Dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(',', ':'), ensure_ascii=True).encode('utf-8')


@dataclass
class CompressedArtifact:
    """一个完整的压缩产物：基础量化器 + 可选的修正适配器 + 元数据"""

    V: int
    n: int
    p: int
    scheme: str
    grvq: Optional[GrvqModel] = None
    adaptor: Optional[Adaptor] = None
    scalar: Optional[SqModel] = None
    seed: int = 0
    meta: Dict = field(default_factory=dict)

    def validate(self) -> 'CompressedArtifact':
        if self.scheme not in SCHEMES:
            raise InvalidSpec(f"未知方案: {self.scheme}")
        if self.p not in _FLOAT_DTYPES:
            raise InvalidSpec(f"存储精度只能是 16 或 32: {self.p}")
        if self.scheme == 'carvq' and (self.grvq is None or self.scalar is not None):
            raise InvalidSpec("carvq 方案需要 group RVQ 模型且不能带标量量化")
        if self.scheme == 'scalar' and (self.scalar is None or self.grvq is not None or self.adaptor is not None):
            raise InvalidSpec("scalar 方案只能包含标量量化模型")
        if self.scheme == 'carvq+scalar-base' and (self.scalar is None or self.adaptor is None or self.grvq is not None):
            raise InvalidSpec("carvq+scalar-base 方案需要标量量化模型和适配器")
        if self.grvq is not None:
            if tuple(self.grvq.shape) != (self.V, self.n):
                raise InvalidSpec(f"RVQ 模型形状 {self.grvq.shape} 与 {(self.V, self.n)} 不一致")
            if self.grvq.storage_bits != self.p:
                raise InvalidSpec(f"码本存储精度 {self.grvq.storage_bits} 与容器精度 {self.p} 不一致")
        if self.adaptor is not None:
            cfg = self.adaptor.config
            if (cfg.V, cfg.n) != (self.V, self.n):
                raise InvalidSpec(f"适配器形状 {(cfg.V, cfg.n)} 与 {(self.V, self.n)} 不一致")
        return self

    @cached_property
    def base_reconstruction(self) -> np.ndarray:
        """基础量化器的重建（不含适配器）"""
        if self.grvq is not None:
            return grvq_reconstruct(self.grvq)
        return sq_dequantize(self.scalar)

    def reconstruct(self) -> np.ndarray:
        """完整重建：基础重建 + 适配器修正"""
        base = self.base_reconstruction
        if self.adaptor is None:
            return base.copy()
        return base + adaptor_forward_batch(self.adaptor)

    def lookup(self, token_id: int) -> np.ndarray:
        """单个 token 的嵌入，与 reconstruct() 的对应行逐位一致"""
        if self.grvq is not None:
            return embed_lookup(self.grvq, self.adaptor, token_id)
        if not 0 <= token_id < self.V:
            raise TokenOutOfRange(f"token {token_id} 超出词表范围 [0, {self.V})")
        row = self.base_reconstruction[token_id]
        if self.adaptor is not None:
            row = row + adaptor_forward(self.adaptor, token_id)
        return row.copy()

    def accounting(self, terms: str = 'full') -> AccountingReport:
        return memory_report(
            self.V,
            self.n,
            self.p,
            self.scheme,
            grvq=self.grvq.params if self.grvq is not None else None,
            adaptor=self.adaptor.config if self.adaptor is not None else None,
            sq=self.scalar.params if self.scalar is not None else None,
            terms=terms
        )


def _sections(artifact: CompressedArtifact) -> List[Tuple[Dict, bytes]]:
    """按规范顺序列出 (描述, 数据)"""
    out = []
    float_dtype = _FLOAT_DTYPES[artifact.p]

    if artifact.grvq is not None:
        cbt = artifact.grvq.codebook_tensor.astype(float_dtype)
        out.append(({'name': 'codebooks', 'dtype': float_dtype, 'shape': list(cbt.shape)}, cbt.tobytes()))
        stream = artifact.grvq.packed_indices
        out.append((
            {'name': 'indices', 'dtype': 'packed', 'kappa': stream.kappa, 'count': stream.count},
            stream.data
        ))

    if artifact.scalar is not None:
        sq = artifact.scalar
        out.append((
            {'name': 'sq.codes', 'dtype': 'packed', 'kappa': sq.codes.kappa, 'count': sq.codes.count},
            sq.codes.data
        ))
        out.append(({'name': 'sq.scales', 'dtype': '<f4', 'shape': [sq.scales.size]}, sq.scales.astype('<f4').tobytes()))
        out.append((
            {'name': 'sq.zero_points', 'dtype': '<f4', 'shape': [sq.zero_points.size]},
            sq.zero_points.astype('<f4').tobytes()
        ))

    if artifact.adaptor is not None:
        for name in param_shapes(artifact.adaptor.config):
            value = artifact.adaptor.params[name].astype(float_dtype)
            out.append(({'name': f'adaptor.{name}', 'dtype': float_dtype, 'shape': list(value.shape)}, value.tobytes()))

    for desc, data in out:
        desc['nbytes'] = len(data)
    return out


def _base_meta(artifact: CompressedArtifact, sections: List[Dict]) -> Dict:
    return {
        'format_version': FORMAT_VERSION,
        'v': artifact.V,
        'n': artifact.n,
        'p': artifact.p,
        'scheme': artifact.scheme,
        'seed': artifact.seed,
        'grvq': artifact.grvq.params.to_dict() if artifact.grvq is not None else None,
        'adaptor': artifact.adaptor.config.to_dict() if artifact.adaptor is not None else None,
        'scalar': artifact.scalar.params.to_dict() if artifact.scalar is not None else None,
        'sections': sections,
    }


def write_container(artifact: CompressedArtifact, path: PathLike) -> int:
    """
    写入 .carvq 文件

    Returns:
        写入的总字节数（头部 + 各段）
    """
    artifact.validate()
    sections = _sections(artifact)
    payload = b''.join(data for _, data in sections)
    meta = _base_meta(artifact, [desc for desc, _ in sections])
    meta['checksum'] = zlib.crc32(_canonical(meta) + payload)
    header = _canonical(meta)

    try:
        with open(path, 'wb') as f:
            f.write(ART_MAGIC)
            f.write(struct.pack('<I', len(header)))
            f.write(header)
            f.write(payload)
    except OSError as e:
        raise IoFailure(f"无法写入文件 {path}: {e}") from e

    total = 12 + len(header) + len(payload)
    logger.info(f"💾 已写入 {path}（{total} 字节，其中数据 {len(payload)} 字节）")
    return total


def _parse_header(raw: bytes) -> Tuple[Dict, int]:
    if not raw or raw[:8] != ART_MAGIC[:len(raw)]:
        raise MalformedHeader("不是 .carvq 文件（魔数错误）")
    if len(raw) < 12:
        raise SectionLengthMismatch(f"文件被截断：只有 {len(raw)} 字节")
    (header_len,) = struct.unpack('<I', raw[8:12])
    if 12 + header_len > len(raw):
        raise SectionLengthMismatch(f"文件被截断：头部声明 {header_len} 字节")

    header = raw[12:12 + header_len]
    try:
        meta = json.loads(header.decode('utf-8'))
    except (UnicodeDecodeError, ValueError) as e:
        raise MalformedHeader(f"JSON 头部无法解析: {e}") from e
    if not isinstance(meta, dict):
        raise MalformedHeader("JSON 头部必须是对象")
    if meta.get('format_version') != FORMAT_VERSION:
        raise UnknownVersion(f"不支持的格式版本: {meta.get('format_version')}")
    if _canonical(meta) != header:
        raise MalformedHeader("JSON 头部不是规范形式")
    return meta, 12 + header_len


def _array(desc: Dict, data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=desc['dtype']).astype(np.float32).reshape(desc['shape'])


def _stream(desc: Dict, data: bytes) -> PackedIndexStream:
    stream = PackedIndexStream(kappa=int(desc['kappa']), count=int(desc['count']), data=bytes(data))
    if len(data) != packed_nbytes(stream.count, stream.kappa):
        raise SectionLengthMismatch(f"段 {desc['name']} 长度与 count·κ 不符")
    return stream


def read_container(path: PathLike) -> CompressedArtifact:
    """
    读取并校验 .carvq 文件，读完即可直接查表

    Raises:
        MalformedHeader / UnknownVersion / SectionLengthMismatch / ChecksumMismatch
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"无法读取文件 {path}: {e}") from e

    meta, offset = _parse_header(raw)
    try:
        descs = meta['sections']
        declared = sum(int(d['nbytes']) for d in descs)
        V, n, p, scheme = int(meta['v']), int(meta['n']), int(meta['p']), meta['scheme']
        checksum = meta['checksum']
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedHeader(f"元数据缺少字段: {e}") from e

    payload = raw[offset:]
    if len(payload) != declared:
        raise SectionLengthMismatch(f"各段声明共 {declared} 字节，实际 {len(payload)} 字节")

    unsigned = {k: v for k, v in meta.items() if k != 'checksum'}
    if zlib.crc32(_canonical(unsigned) + payload) != checksum:
        raise ChecksumMismatch(f"校验和不匹配: {path}")

    blobs = {}
    pos = 0
    for desc in descs:
        size = int(desc['nbytes'])
        blobs[desc['name']] = (desc, payload[pos:pos + size])
        pos += size

    try:
        artifact = CompressedArtifact(V=V, n=n, p=p, scheme=scheme, seed=meta.get('seed', 0), meta=meta)
        if meta.get('grvq') is not None:
            artifact.grvq = _load_grvq(meta['grvq'], blobs, V, n, p)
        if meta.get('scalar') is not None:
            artifact.scalar = _load_scalar(meta['scalar'], blobs, V, n)
        if meta.get('adaptor') is not None:
            artifact.adaptor = _load_adaptor(meta['adaptor'], blobs)
    except (KeyError, ValueError) as e:
        if isinstance(e, SectionLengthMismatch):
            raise
        raise SectionLengthMismatch(f"段数据与元数据不一致: {e}") from e

    logger.info(f"📂 已读取 {path}: {scheme}, {V}×{n} @ {p} bit")
    return artifact.validate()


def _load_grvq(params_dict: Dict, blobs: Dict, V: int, n: int, p: int) -> GrvqModel:
    params = GrvqParams.from_dict(params_dict).validate()
    cbt = _array(*blobs['codebooks'])
    stream = _stream(*blobs['indices'])

    if stream.kappa != params.kappa:
        raise SectionLengthMismatch(f"索引段 κ={stream.kappa} 与参数 κ={params.kappa} 不符")
    if n % params.h or stream.count != V * n // params.h * params.L:
        raise SectionLengthMismatch(f"索引段有 {stream.count} 个索引，V·n/h·L 与之不符")
    expected = (params.group_count(V, n), params.L, params.K, params.h)
    if cbt.shape != expected:
        raise SectionLengthMismatch(f"码本形状 {cbt.shape} 与参数要求的 {expected} 不符")
    indices = unpack_indices(stream).reshape(-1, params.L)

    groups = []
    for gi in range(cbt.shape[0]):
        groups.append(GroupCode(
            codebooks=[Codebook(cbt[gi, level].copy()) for level in range(params.L)],
            indices=indices[gi * params.g:(gi + 1) * params.g]
        ))
    return GrvqModel(params=params, shape=(V, n), groups=groups, packed_indices=stream, storage_bits=p)


def _load_scalar(params_dict: Dict, blobs: Dict, V: int, n: int) -> SqModel:
    return SqModel(
        params=SqParams.from_dict(params_dict),
        shape=(V, n),
        scales=_array(*blobs['sq.scales']),
        zero_points=_array(*blobs['sq.zero_points']),
        codes=_stream(*blobs['sq.codes'])
    )


def _load_adaptor(config_dict: Dict, blobs: Dict) -> Adaptor:
    config = AdaptorConfig.from_dict(config_dict)
    params = {name: _array(*blobs[f'adaptor.{name}']) for name in param_shapes(config)}
    return Adaptor(config, params)
