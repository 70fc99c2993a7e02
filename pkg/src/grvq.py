#!/usr/bin/env python3
"""
分组残差向量量化（group RVQ）

流程：
1. 把 V×n 嵌入矩阵按行切成 h 维子向量，得到 (nV/h)×h 的视图
2. 视图按连续的 g 行分组（最后一组可以不足 g 行）
3. 每组独立做 L 轮残差量化：每轮在上一轮残差上训练 2^κ 个中心的 K-Means 码本
4. 所有组的索引按 κ 位打包成一个索引流
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from adaptor import adaptor_forward
from bitpack import MAX_KAPPA, PackedIndexStream, pack_indices
from errors import (
    BadSubvectorDim,
    DimMismatch,
    IndexOutOfRange,
    InvalidSpec,
    TokenOutOfRange,
    TooFewPoints,
)
from tensor_io import EmbeddingMatrix

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1


@dataclass
class GrvqParams:
    """group RVQ 参数"""

    L: int = 3
    kappa: int = 4
    h: int = 8
    g: int = 1024
    seed: int = 0
    kmeans_tol: float = 1e-4
    kmeans_max_iter: int = 100
    allow_ragged: bool = True

    @property
    def K(self) -> int:
        return 1 << self.kappa

    def validate(self) -> 'GrvqParams':
        if self.L < 1:
            raise InvalidSpec(f"L 必须 >= 1: {self.L}")
        if not 1 <= self.kappa <= MAX_KAPPA:
            raise InvalidSpec(f"κ 必须在 1..{MAX_KAPPA} 内: {self.kappa}")
        if self.h < 1 or self.g < 1:
            raise InvalidSpec(f"h 和 g 必须为正数: h={self.h}, g={self.g}")
        if self.K > self.g:
            raise InvalidSpec(f"码本大小 K=2^κ={self.K} 不能超过组大小 g={self.g}")
        if self.kmeans_tol < 0 or self.kmeans_max_iter < 1:
            raise InvalidSpec("kmeans_tol 不能为负，kmeans_max_iter 必须 >= 1")
        return self

    def check_shape(self, V: int, n: int):
        """检查参数与矩阵形状是否相容"""
        if n % self.h:
            raise BadSubvectorDim(f"子向量维度 h={self.h} 不能整除嵌入维度 n={n}")
        if not self.allow_ragged and (n * V) % (self.g * self.h):
            raise InvalidSpec(f"g·h={self.g * self.h} 不能整除 n·V={n * V}（未启用尾组）")

    def group_count(self, V: int, n: int) -> int:
        return -(-(n * V) // (self.g * self.h))

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> 'GrvqParams':
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class Codebook:
    """一轮量化的码本：K×h 个中心"""

    centroids: np.ndarray

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def h(self) -> int:
        return self.centroids.shape[1]

    def to_storage(self, bits: int) -> 'Codebook':
        """按存储精度取整（16 位时经 binary16 往返），保证写盘无损"""
        if bits == 16:
            return Codebook(self.centroids.astype(np.float16).astype(np.float32))
        return self


@dataclass
class GroupCode:
    """一组的编码结果：L 个码本 + rows×L 的索引"""

    codebooks: List[Codebook]
    indices: np.ndarray

    @property
    def rows(self) -> int:
        return self.indices.shape[0]

    @property
    def L(self) -> int:
        return len(self.codebooks)


@dataclass
class GrvqModel:
    """整个矩阵的 group RVQ 结果"""

    params: GrvqParams
    shape: tuple
    groups: List[GroupCode]
    packed_indices: PackedIndexStream
    storage_bits: int = 32

    @property
    def group_count(self) -> int:
        return len(self.groups)

    @property
    def rows(self) -> int:
        V, n = self.shape
        return V * n // self.params.h

    @cached_property
    def codebook_tensor(self) -> np.ndarray:
        """(G, L, K, h) 的中心张量"""
        return np.stack([
            np.stack([cb.centroids for cb in code.codebooks]) for code in self.groups
        ])

    @cached_property
    def index_matrix(self) -> np.ndarray:
        """(nV/h, L) 的索引矩阵，行顺序与子向量视图一致"""
        return np.concatenate([code.indices for code in self.groups])


def derive_seed(seed: int, group_index: int, level: int) -> int:
    """
    由 (seed, 组号, 轮次) 派生 K-Means 种子

    只依赖位置，因此与组的处理顺序、线程数无关
    """
    x = _splitmix64(seed & _MASK64)
    x = _splitmix64(x ^ (group_index & _MASK64))
    return _splitmix64(x ^ (level & _MASK64))


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _as_array(M: Union[EmbeddingMatrix, np.ndarray]) -> np.ndarray:
    if isinstance(M, EmbeddingMatrix):
        return M.data
    return np.ascontiguousarray(M, dtype=np.float32)


def reshape_to_subvectors(M: Union[EmbeddingMatrix, np.ndarray], h: int) -> np.ndarray:
    """
    (V, n) -> (n·V/h, h)

    视图第 i·(n/h)+q 行是第 i 个 token 的第 q 个子向量
    """
    data = _as_array(M)
    n = data.shape[1]
    if h < 1 or n % h:
        raise BadSubvectorDim(f"子向量维度 h={h} 不能整除嵌入维度 n={n}")
    return data.reshape(-1, h)


def partition_groups(view: np.ndarray, g: int) -> List[np.ndarray]:
    """按连续的 g 行切组，最后一组可能不足 g 行"""
    return [view[start:start + g] for start in range(0, view.shape[0], g)]


def _sq_dist(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """
    (P, K) 的平方 L2 距离（float64）

    按维度顺序逐项累加，与逐点逐中心的线性扫描结果逐位一致
    """
    d = np.zeros((points.shape[0], centroids.shape[0]), dtype=np.float64)
    for j in range(points.shape[1]):
        diff = points[:, j, None] - centroids[None, :, j]
        d += diff * diff
    return d


def assign_nearest(points: np.ndarray, codebook: Codebook) -> np.ndarray:
    """
    每个点分配到最近的中心，距离相同时取编号最小的中心

    Raises:
        DimMismatch: 点和中心维度不同
    """
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[1] != codebook.h:
        raise DimMismatch(f"点的维度 {points.shape} 与码本维度 h={codebook.h} 不一致")
    d = _sq_dist(points.astype(np.float64), codebook.centroids.astype(np.float64))
    return d.argmin(axis=1).astype(np.int64)


def kmeans_inertia(points: np.ndarray, codebook: Codebook) -> float:
    """各点到最近中心的平方距离之和"""
    d = _sq_dist(np.asarray(points, dtype=np.float64), codebook.centroids.astype(np.float64))
    return float(d.min(axis=1).sum())


def _kmeans_pp_init(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    P = points.shape[0]
    chosen = [int(rng.integers(P))]
    d2 = _sq_dist(points, points[chosen[0]][None])[:, 0]

    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(P, p=d2 / total))
        else:
            # 剩下的点都与已选中心重合
            idx = int(rng.integers(P))
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dist(points, points[idx][None])[:, 0])

    return points[chosen].copy()


def kmeans(
    points: np.ndarray,
    K: int,
    tol: float = 1e-4,
    max_iter: int = 100,
    seed: int = 0
) -> Codebook:
    """
    Lloyd K-Means，k-means++ 初始化

    最大中心位移（L2）< tol 或达到 max_iter 时停止；
    空簇用离自己中心最远的点重新播种。

    Raises:
        TooFewPoints: 点数少于 K
    """
    pts32 = np.asarray(points, dtype=np.float32)
    P = pts32.shape[0]
    if P < K:
        raise TooFewPoints(f"点数 {P} 少于中心数 K={K}")

    # float32 的值在 float64 中求和是精确的（点数 < 2^29）
    pts = pts32.astype(np.float64)
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(pts, K, rng)

    for _ in range(max_iter):
        labels = _sq_dist(pts, centroids).argmin(axis=1)
        counts = np.bincount(labels, minlength=K)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, pts)

        new = centroids.copy()
        live = counts > 0
        new[live] = sums[live] / counts[live, None]

        empty = np.flatnonzero(~live)
        if empty.size:
            err = ((pts - new[labels]) ** 2).sum(axis=1)
            for j in empty:
                far = int(err.argmax())
                if err[far] <= 0:
                    break
                new[j] = pts[far]
                labels[far] = j
                err[far] = 0.0
            logger.debug(f"修复 {empty.size} 个空簇")

        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1).max()))
        centroids = new
        if shift < tol:
            break

    return Codebook(centroids.astype(np.float32))


def _small_block_codebook(residual: np.ndarray, K: int) -> Codebook:
    """行数不足 K 的尾组：直接把行本身当中心，其余补零"""
    centroids = np.zeros((K, residual.shape[1]), dtype=np.float32)
    centroids[:residual.shape[0]] = residual
    return Codebook(centroids)


def rvq_encode_group(
    block: np.ndarray,
    params: GrvqParams,
    group_index: int = 0,
    storage_bits: int = 32,
    allow_small: bool = False
) -> GroupCode:
    """
    单组 L 轮残差量化

    Args:
        block: g×h 子向量
        params: 量化参数
        group_index: 组号（参与种子派生）
        storage_bits: 码本存储精度，16 时中心先经 binary16 取整再计算残差
        allow_small: 允许行数不足 K（仅用于尾组）
    """
    K = params.K
    residual = np.array(block, dtype=np.float32)
    rows = residual.shape[0]
    small = rows < K
    if small and not allow_small:
        raise TooFewPoints(f"组 {group_index} 只有 {rows} 行，少于 K={K}")

    codebooks = []
    indices = np.zeros((rows, params.L), dtype=np.int64)

    for level in range(params.L):
        if small:
            cb = _small_block_codebook(residual, K)
        else:
            cb = kmeans(
                residual,
                K,
                tol=params.kmeans_tol,
                max_iter=params.kmeans_max_iter,
                seed=derive_seed(params.seed, group_index, level)
            )
        cb = cb.to_storage(storage_bits)
        idx = assign_nearest(residual, cb)
        residual = residual - cb.centroids[idx]
        codebooks.append(cb)
        indices[:, level] = idx

    return GroupCode(codebooks=codebooks, indices=indices)


def rvq_decode_group(code: GroupCode) -> np.ndarray:
    """第 i 行 = 各轮选中中心之和"""
    h = code.codebooks[0].h
    out = np.zeros((code.rows, h), dtype=np.float32)
    for level, cb in enumerate(code.codebooks):
        idx = code.indices[:, level]
        if idx.size and (idx.min() < 0 or idx.max() >= cb.K):
            raise IndexOutOfRange(f"第 {level} 轮索引超出码本范围 [0, {cb.K})")
        out += cb.centroids[idx]
    return out


def assemble_model(
    params: GrvqParams,
    shape: tuple,
    groups: List[GroupCode],
    storage_bits: int = 32
) -> GrvqModel:
    """把各组编码组装成模型，并打包索引流"""
    all_indices = np.concatenate([code.indices for code in groups]).reshape(-1)
    packed = pack_indices(all_indices, params.kappa)
    return GrvqModel(
        params=params,
        shape=tuple(shape),
        groups=groups,
        packed_indices=packed,
        storage_bits=storage_bits
    )


def grvq_compress(
    M: Union[EmbeddingMatrix, np.ndarray],
    params: GrvqParams,
    threads: int = 1,
    storage_bits: Optional[int] = None
) -> GrvqModel:
    """
    压缩整个嵌入矩阵

    各组互相独立，种子按位置派生，所以结果与 threads 无关
    """
    params.validate()
    data = _as_array(M)
    V, n = data.shape
    params.check_shape(V, n)
    if storage_bits is None:
        storage_bits = M.source_precision if isinstance(M, EmbeddingMatrix) else 32

    view = reshape_to_subvectors(data, params.h)
    blocks = partition_groups(view, params.g)
    total = len(blocks)
    if blocks[-1].shape[0] < params.g:
        logger.warning(f"⚠️  尾组只有 {blocks[-1].shape[0]} 行（g={params.g}）")

    logger.info(
        f"📦 group RVQ: {V}×{n} -> {view.shape[0]} 个 {params.h} 维子向量, "
        f"{total} 组, L={params.L}, K={params.K}"
    )

    step = max(1, total // 10)

    def encode(i: int) -> GroupCode:
        code = rvq_encode_group(
            blocks[i],
            params,
            group_index=i,
            storage_bits=storage_bits,
            allow_small=(i == total - 1)
        )
        if (i + 1) % step == 0:
            logger.info(f"   已完成第 {i + 1}/{total} 组")
        return code

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            groups = list(pool.map(encode, range(total)))
    else:
        groups = [encode(i) for i in range(total)]

    return assemble_model(params, (V, n), groups, storage_bits=storage_bits)


def grvq_reconstruct(model: GrvqModel) -> np.ndarray:
    """解码所有组并还原成 (V, n)"""
    parts = [rvq_decode_group(code) for code in model.groups]
    return np.concatenate(parts).reshape(model.shape)


def embed_lookup(model: GrvqModel, adaptor, token_id: int) -> np.ndarray:
    """
    单个 token 的嵌入：查表求和，再加上修正适配器的输出（如果有）

    与 grvq_reconstruct 对应行逐位一致
    """
    V, n = model.shape
    if not 0 <= token_id < V:
        raise TokenOutOfRange(f"token {token_id} 超出词表范围 [0, {V})")

    h, g = model.params.h, model.params.g
    per_token = n // h
    rows = token_id * per_token + np.arange(per_token)
    group_idx, local_idx = rows // g, rows % g
    cbt = model.codebook_tensor
    idx = model.index_matrix

    out = np.zeros((per_token, h), dtype=np.float32)
    for level in range(model.params.L):
        out += cbt[group_idx, level, idx[rows, level]]
    out = out.reshape(n)

    if adaptor is not None:
        out = out + adaptor_forward(adaptor, token_id)
    return out


def group_residual_norms(block: np.ndarray, code: GroupCode) -> Sequence[float]:
    """每轮之后的残差 Frobenius 范数"""
    residual = np.array(block, dtype=np.float32)
    norms = []
    for level, cb in enumerate(code.codebooks):
        residual = residual - cb.centroids[code.indices[:, level]]
        norms.append(float(np.linalg.norm(residual)))
    return norms
