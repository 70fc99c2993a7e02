#!/usr/bin/env python3
"""
修正适配器（Corrective Adaptor）

σ0: 每个 token 一行 m 维的可学习索引表
σ1: m -> m2 -> m3 -> n 的小 MLP，隐藏层为 dense -> ReLU -> LayerNorm，最后一层线性

训练目标是基础量化器（RVQ 或标量量化）的残差 M - base，损失为 L1，优化器 Adam。
前向、反向、Adam 全部用 numpy 手写。
"""

import json
import sys
import time
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, IO, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DivergedLoss, InvalidSpec, ShapeMismatch, TokenOutOfRange
from tensor_io import EmbeddingMatrix

logger = logging.getLogger(__name__)

LN_EPS = 1e-5
SIGMA0_STD = 0.02

ProgressCallback = Callable[[int, float, float], None]


@dataclass
class AdaptorConfig:
    """适配器结构与训练超参数"""

    V: int
    n: int
    m: int = 16
    hidden: Tuple[int, ...] = (384, 512)
    seed: int = 0
    lr: float = 1e-3
    iterations: int = 500
    batch_size: Optional[int] = None
    log_every: int = 50

    def __post_init__(self):
        self.hidden = tuple(int(x) for x in self.hidden)

    @property
    def dims(self) -> List[int]:
        """[m1=m, m2, ..., m_{k+1}]"""
        return [self.m, *self.hidden]

    @property
    def depth(self) -> int:
        """非线性层数 k"""
        return len(self.hidden)

    @property
    def effective_batch_size(self) -> int:
        return self.batch_size or self.V

    def validate(self) -> 'AdaptorConfig':
        if self.V < 1 or self.n < 1:
            raise InvalidSpec(f"V 和 n 必须为正数: V={self.V}, n={self.n}")
        if self.m < 1 or not self.hidden or min(self.hidden) < 1:
            raise InvalidSpec(f"m 与隐藏层维度必须为正数: m={self.m}, hidden={self.hidden}")
        if self.lr <= 0:
            raise InvalidSpec(f"学习率必须为正数: {self.lr}")
        if self.iterations < 0:
            raise InvalidSpec(f"迭代次数不能为负: {self.iterations}")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidSpec(f"batch_size 必须为正数: {self.batch_size}")
        return self

    def to_dict(self) -> Dict:
        return {
            'V': self.V,
            'n': self.n,
            'm': self.m,
            'hidden': list(self.hidden),
            'seed': self.seed,
            'lr': self.lr,
            'iterations': self.iterations,
            'batch_size': self.batch_size,
            'log_every': self.log_every,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> 'AdaptorConfig':
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class ParamCount:
    """参数量分项"""

    table: int
    weights: int
    biases: int
    layernorm: int

    @property
    def total(self) -> int:
        return self.table + self.weights + self.biases + self.layernorm

    @property
    def mlp(self) -> int:
        return self.weights + self.biases + self.layernorm

    def terms(self, kind: str = 'full') -> int:
        """
        按口径计数

        full: 全部存储的参数
        no-layernorm: 不计 LayerNorm 仿射参数
        weights: 只计 σ0 表和权重矩阵（偏置视为可忽略）
        """
        if kind == 'full':
            return self.total
        if kind == 'no-layernorm':
            return self.table + self.weights + self.biases
        if kind == 'weights':
            return self.table + self.weights
        raise InvalidSpec(f"未知的计数口径: {kind}（可选 full / no-layernorm / weights）")


def count_params(config: AdaptorConfig) -> ParamCount:
    """N_P = mV + Σ m_i·m_{i+1} + Σ m_{i+1} + m_{k+1}·n + n，再加 2·Σ m_{i+1} 的 LayerNorm 项"""
    dims = config.dims
    pairs = list(zip(dims[:-1], dims[1:]))
    return ParamCount(
        table=config.m * config.V,
        weights=sum(a * b for a, b in pairs) + dims[-1] * config.n,
        biases=sum(dims[1:]) + config.n,
        layernorm=2 * sum(dims[1:]),
    )


def param_shapes(config: AdaptorConfig) -> Dict[str, tuple]:
    """按固定顺序列出所有参数的形状（序列化也按此顺序）"""
    shapes = {'sigma0': (config.V, config.m)}
    dims = config.dims
    for i in range(1, config.depth + 1):
        shapes[f'W{i}'] = (dims[i], dims[i - 1])
        shapes[f'b{i}'] = (dims[i],)
        shapes[f'ln{i}_gain'] = (dims[i],)
        shapes[f'ln{i}_bias'] = (dims[i],)
    shapes['WL'] = (config.n, dims[-1])
    shapes['bL'] = (config.n,)
    return shapes


@dataclass
class Adaptor:
    """训练好的适配器：配置 + 参数字典"""

    config: AdaptorConfig
    params: Dict[str, np.ndarray]

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def to_storage(self, bits: int) -> 'Adaptor':
        """按存储精度取整，16 位时所有参数经 binary16 往返"""
        if bits != 16:
            return self
        return Adaptor(
            self.config,
            {k: v.astype(np.float16).astype(np.float32) for k, v in self.params.items()}
        )

    def astype(self, dtype) -> 'Adaptor':
        return Adaptor(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    @cached_property
    def _inference_params(self) -> Dict[str, np.ndarray]:
        # 推理统一用 float64 计算，参数训练完成后不再修改
        return {k: v.astype(np.float64) for k, v in self.params.items()}


@dataclass
class TrainReport:
    """训练记录"""

    loss_curve: List[float]
    initial_loss: float
    final_loss: float
    wall_time: float

    def to_dict(self) -> Dict:
        return {
            'iterations': len(self.loss_curve),
            'initial_loss': self.initial_loss,
            'final_loss': self.final_loss,
            'wall_time': self.wall_time,
        }


@dataclass
class AdamState:
    """Adam 的一阶/二阶矩和步数"""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def init_adaptor(config: AdaptorConfig) -> Adaptor:
    """
    随机初始化

    σ0 ~ N(0, 0.02²)；ReLU 层权重 He 初始化（方差 2/fan_in）；
    最后的线性层方差 1/fan_in；偏置为 0；LayerNorm 增益 1、偏置 0
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    shapes = param_shapes(config)
    params = {}

    for name, shape in shapes.items():
        if name == 'sigma0':
            value = rng.standard_normal(shape) * SIGMA0_STD
        elif name == 'WL':
            value = rng.standard_normal(shape) * np.sqrt(1.0 / shape[1])
        elif name.startswith('W'):
            value = rng.standard_normal(shape) * np.sqrt(2.0 / shape[1])
        elif name.endswith('_gain'):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = value.astype(np.float32)

    return Adaptor(config, params)


def _check_tokens(tokens: np.ndarray, V: int):
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        raise TokenOutOfRange(f"token 超出词表范围 [0, {V})")


def _layer_norm(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mu = a.mean(axis=-1, keepdims=True)
    var = a.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    return (a - mu) * inv, inv


def _forward(params: Dict[str, np.ndarray], tokens: np.ndarray, depth: int):
    """批量前向，返回输出和反向需要的缓存"""
    x = params['sigma0'][tokens]
    layers = []
    for i in range(1, depth + 1):
        z = x @ params[f'W{i}'].T + params[f'b{i}']
        a = np.maximum(z, 0)
        xhat, inv = _layer_norm(a)
        y = xhat * params[f'ln{i}_gain'] + params[f'ln{i}_bias']
        layers.append((x, z, xhat, inv))
        x = y
    out = x @ params['WL'].T + params['bL']
    return out, (layers, x)


def _backward(
    params: Dict[str, np.ndarray],
    tokens: np.ndarray,
    cache,
    dout: np.ndarray,
    depth: int
) -> Dict[str, np.ndarray]:
    layers, last = cache
    grads = {}
    grads['WL'] = dout.T @ last
    grads['bL'] = dout.sum(axis=0)
    dy = dout @ params['WL']

    for i in range(depth, 0, -1):
        x_in, z, xhat, inv = layers[i - 1]
        grads[f'ln{i}_gain'] = (dy * xhat).sum(axis=0)
        grads[f'ln{i}_bias'] = dy.sum(axis=0)
        dxhat = dy * params[f'ln{i}_gain']
        da = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dz = da * (z > 0)
        grads[f'W{i}'] = dz.T @ x_in
        grads[f'b{i}'] = dz.sum(axis=0)
        dy = dz @ params[f'W{i}']

    # 只有本批次出现的行会得到非零梯度
    dsigma = np.zeros_like(params['sigma0'])
    np.add.at(dsigma, tokens, dy)
    grads['sigma0'] = dsigma
    return grads


def adaptor_forward(adaptor: Adaptor, token_id: int) -> np.ndarray:
    """
    单个 token 的修正向量（n 维，float32）

    v = σ0[t]; a_i = LN(ReLU(W_i·a_{i-1} + b_i)); out = W_L·a_k + b_L
    """
    V = adaptor.config.V
    if not 0 <= token_id < V:
        raise TokenOutOfRange(f"token {token_id} 超出词表范围 [0, {V})")

    p = adaptor._inference_params
    x = p['sigma0'][token_id]
    for i in range(1, adaptor.config.depth + 1):
        a = np.maximum(p[f'W{i}'] @ x + p[f'b{i}'], 0)
        xhat, _ = _layer_norm(a)
        x = xhat * p[f'ln{i}_gain'] + p[f'ln{i}_bias']
    out = p['WL'] @ x + p['bL']
    return out.astype(np.float32)


def adaptor_forward_batch(adaptor: Adaptor, token_ids: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    逐 token 调用 adaptor_forward 并堆叠

    与单 token 查询逐位一致；token_ids 缺省为整个词表
    """
    if token_ids is None:
        token_ids = range(adaptor.config.V)
    token_ids = list(token_ids)
    out = np.empty((len(token_ids), adaptor.config.n), dtype=np.float32)
    step = max(1, len(token_ids) // 10)
    for row, t in enumerate(token_ids):
        out[row] = adaptor_forward(adaptor, int(t))
        if len(token_ids) >= 10000 and (row + 1) % step == 0:
            logger.info(f"   适配器输出 {row + 1}/{len(token_ids)}")
    return out


def adaptor_backward(
    adaptor: Adaptor,
    token_batch: Sequence[int],
    target_residuals: np.ndarray
) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    平均 L1 损失对所有参数的梯度

    损失 = mean |out - target|（对批次和维度求平均）；|x| 在 0 处的次梯度取 0

    Returns:
        (loss, grads)
    """
    cfg = adaptor.config
    tokens = np.asarray(token_batch, dtype=np.int64).reshape(-1)
    _check_tokens(tokens, cfg.V)
    targets = np.asarray(target_residuals)
    if targets.shape != (tokens.size, cfg.n):
        raise ShapeMismatch(f"目标形状应为 {(tokens.size, cfg.n)}，实际 {targets.shape}")

    out, cache = _forward(adaptor.params, tokens, cfg.depth)
    diff = out - targets
    loss = float(np.abs(diff).mean(dtype=np.float64))
    dout = (np.sign(diff) / diff.size).astype(out.dtype)
    grads = _backward(adaptor.params, tokens, cache, dout, cfg.depth)
    return loss, grads


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """带偏差修正的标准 Adam，原地更新 params"""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t

    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    return params, state


def mean_l1(adaptor: Adaptor, targets: np.ndarray, batch_size: Optional[int] = None) -> float:
    """整个词表上的平均 L1（训练路径，分批前向）"""
    V = adaptor.config.V
    bs = batch_size or V
    total = 0.0
    for start in range(0, V, bs):
        tokens = np.arange(start, min(start + bs, V))
        out, _ = _forward(adaptor.params, tokens, adaptor.config.depth)
        total += float(np.abs(out - targets[tokens]).sum(dtype=np.float64))
    return total / (V * adaptor.config.n)


class JsonlProgress:
    """把训练进度写成一行一个 JSON：{"iter", "loss", "seconds"}"""

    def __init__(self, target: Union[str, IO] = '-'):
        if target == '-':
            self.stream = sys.stderr
            self._own = False
        elif isinstance(target, str):
            self.stream = open(target, 'w', encoding='utf-8')
            self._own = True
        else:
            self.stream = target
            self._own = False

    def __call__(self, iteration: int, loss: float, seconds: float):
        record = {'iter': iteration, 'loss': loss, 'seconds': round(seconds, 3)}
        self.stream.write(json.dumps(record) + '\n')
        self.stream.flush()

    def close(self):
        if self._own:
            self.stream.close()


def train_adaptor(
    M: Union[EmbeddingMatrix, np.ndarray],
    base_recon: np.ndarray,
    config: AdaptorConfig,
    progress: Optional[ProgressCallback] = None
) -> Tuple[Adaptor, TrainReport]:
    """
    在基础重建的残差上训练适配器

    一次迭代 = 按固定的打乱顺序（由 seed 决定）完整遍历一遍词表，按 batch_size 分批。
    刻意过拟合：不做正则，也不留验证集。

    Raises:
        ShapeMismatch: M、base_recon 与配置的 (V, n) 不一致
        DivergedLoss: 损失出现 NaN/Inf
    """
    config.validate()
    data = M.data if isinstance(M, EmbeddingMatrix) else np.asarray(M, dtype=np.float32)
    base = np.asarray(base_recon, dtype=np.float32)
    expected = (config.V, config.n)
    if data.shape != expected or base.shape != expected:
        raise ShapeMismatch(f"矩阵 {data.shape}、基础重建 {base.shape} 与配置 {expected} 不一致")

    targets = (data - base).astype(np.float32)
    adaptor = init_adaptor(config)
    params = adaptor.params

    order = np.random.default_rng([config.seed, 1]).permutation(config.V)
    bs = config.effective_batch_size
    batches = [order[s:s + bs] for s in range(0, config.V, bs)]

    initial_loss = mean_l1(adaptor, targets, bs)
    logger.info(
        f"🧠 训练修正适配器: V={config.V}, n={config.n}, dims={config.dims}, "
        f"{config.iterations} 次迭代 × {len(batches)} 批, 初始 L1={initial_loss:.6f}"
    )

    state = AdamState()
    loss_curve = []
    start = time.time()

    for it in range(config.iterations):
        total = 0.0
        for tokens in batches:
            loss, grads = adaptor_backward(adaptor, tokens, targets[tokens])
            if not np.isfinite(loss):
                raise DivergedLoss(f"第 {it + 1} 次迭代损失发散: {loss}")
            total += loss * tokens.size
            adam_step(params, grads, state, lr=config.lr)

        epoch_loss = total / config.V
        loss_curve.append(epoch_loss)
        elapsed = time.time() - start
        if progress is not None:
            progress(it + 1, epoch_loss, elapsed)
        if config.log_every and (it + 1) % config.log_every == 0:
            logger.info(f"   迭代 {it + 1}/{config.iterations}  L1={epoch_loss:.6f}  ({elapsed:.1f}s)")

    trained = Adaptor(config, params)
    final_loss = mean_l1(trained, targets, bs)
    if not np.isfinite(final_loss):
        raise DivergedLoss(f"训练结束后损失发散: {final_loss}")

    report = TrainReport(
        loss_curve=loss_curve,
        initial_loss=initial_loss,
        final_loss=final_loss,
        wall_time=time.time() - start
    )
    logger.info(f"✅ 训练完成: L1 {initial_loss:.6f} -> {final_loss:.6f}（{report.wall_time:.1f}s）")
    return trained, report
