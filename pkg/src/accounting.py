#!/usr/bin/env python3
"""
位宽 / 字节 / FLOPs 核算

B_RVQ  = (L·h·2^κ·p + g·L·κ) / (g·h)
B_CA   = p·N_P / (n·V)
B_CARVQ = B_RVQ + B_CA

全部用 Fraction 精确计算，只在展示时按四舍五入保留 3 位小数
"""

import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal, localcontext
from fractions import Fraction
from typing import Dict, List, Optional, Sequence

from scipy import optimize

from adaptor import AdaptorConfig, count_params
from bitpack import packed_nbytes
from errors import InvalidSpec
from grvq import GrvqParams
from scalarq import SQ_PARAM_BITS, SqParams

logger = logging.getLogger(__name__)

GB = 10 ** 9

# 公开模型的嵌入矩阵形状 (V, n)
MODEL_SHAPES = {
    'llama-3.2-1b': (128256, 2048),
    'llama-3.2-3b': (128256, 3072),
    'llama-3.1-8b': (128256, 4096),
    'qwen2.5-7b': (152064, 3584),
    'phi-4': (100352, 5120),
}

# CARVQ-L 预设：K=16 (κ=4), h=8, g=1024, 适配器 [16, 384, 512]
PRESETS = {
    f'carvq-{L}': {'grvq': {'L': L, 'kappa': 4, 'h': 8, 'g': 1024}, 'adaptor': {'m': 16, 'hidden': [384, 512]}}
    for L in (1, 2, 3, 4)
}


def fmt_bpp(value: Fraction, decimals: int = 3) -> str:
    """精确值四舍五入（half-up）成字符串"""
    value = Fraction(value)
    with localcontext() as ctx:
        ctx.prec = 60
        d = Decimal(value.numerator) / Decimal(value.denominator)
        return str(d.quantize(Decimal(1).scaleb(-decimals), rounding=ROUND_HALF_UP))


def bpp_rvq(L: int, h: int, kappa: int, g: int, p: int) -> Fraction:
    """group RVQ 的平均位宽"""
    if min(L, h, kappa, g, p) < 1:
        raise InvalidSpec("L, h, κ, g, p 必须为正数")
    return Fraction(L * h * (1 << kappa) * p + g * L * kappa, g * h)


def bpp_ca(config: AdaptorConfig, p: int, terms: str = 'full') -> Fraction:
    """修正适配器的平均位宽，terms 见 ParamCount.terms"""
    n_p = count_params(config).terms(terms)
    return Fraction(p * n_p, config.n * config.V)


def bpp_total(
    params: Optional[GrvqParams],
    config: Optional[AdaptorConfig],
    p: int,
    terms: str = 'full'
) -> Fraction:
    """
    B_CARVQ = B_RVQ + B_CA（缺哪部分就不计哪部分）

    注意 terms 默认 'full'：LLaMA-3.2-3B 的 CARVQ-3 得到 2.406；
    只计 σ0 表和权重矩阵（terms='weights'，report.param_terms 的默认值）才是 2.405
    """
    total = Fraction(0)
    if params is not None:
        total += bpp_rvq(params.L, params.h, params.kappa, params.g, p)
    if config is not None:
        total += bpp_ca(config, p, terms)
    return total


def kappa_for_bpp(target: float, L: int, h: int, g: int, p: int) -> float:
    """
    求连续的 κ，使 B_RVQ(L, h, κ, g, p) 恰好等于 target

    用于和 INT-N 做等位宽对比，例如 3B 上 CARVQ-3 对 INT2 得 κ≈3.704，CARVQ-2 对 INT1 得 κ=3

    Raises:
        InvalidSpec: 参数非正，或 target 不在 κ∈(0, 64) 可达的范围内
    """
    if min(L, h, g, p) < 1:
        raise InvalidSpec("L, h, g, p 必须为正数")

    def excess(kappa: float) -> float:
        return L * kappa / h + L * p * 2.0 ** kappa / g - target

    if excess(0.0) >= 0:
        raise InvalidSpec(f"B_RVQ 最小约为 {excess(0.0) + target:.3f}，无法达到 {target}")
    if excess(64.0) <= 0:
        raise InvalidSpec(f"目标位宽 {target} 过大")
    return float(optimize.brentq(excess, 0.0, 64.0, xtol=1e-12))


def compression_ratio(p: int, bpp: Fraction) -> Fraction:
    """原始位宽 / 压缩后位宽"""
    return Fraction(p) / Fraction(bpp)


def rvq_section_bytes(params: GrvqParams, V: int, n: int, p: int) -> Dict[str, int]:
    """group RVQ 实际存储字节：码本按 p 位，索引按 κ 位打包"""
    groups = params.group_count(V, n)
    rows = V * n // params.h
    return {
        'codebooks': groups * params.L * params.K * params.h * p // 8,
        'indices': packed_nbytes(rows * params.L, params.kappa),
    }


def adaptor_section_bytes(config: AdaptorConfig, p: int) -> int:
    return count_params(config).total * p // 8


def sq_section_bytes(sq: SqParams, V: int, n: int) -> Dict[str, int]:
    blocks = V if sq.granularity == 'per-row' else 1
    return {
        'sq_codes': packed_nbytes(V * n, sq.bits),
        'sq_params': blocks * 2 * SQ_PARAM_BITS // 8,
    }


@dataclass
class AccountingReport:
    """核算结果；*_bytes 字段是精确字节数"""

    scheme: str
    V: int
    n: int
    p: int
    B_rvq: Optional[Fraction] = None
    B_sq: Optional[Fraction] = None
    B_ca: Optional[Fraction] = None
    B_ca_full: Optional[Fraction] = None
    terms: str = 'full'
    embedding_bytes_original: int = 0
    embedding_bytes_compressed: int = 0
    sections: Dict[str, int] = field(default_factory=dict)
    ca_flops: Optional[int] = None
    ca_param_bytes: Optional[int] = None

    @property
    def B_total(self) -> Fraction:
        return sum((b for b in (self.B_rvq, self.B_sq, self.B_ca) if b is not None), Fraction(0))

    @property
    def B_actual(self) -> Fraction:
        """按实际存储字节算出的位宽（含尾组、scale/zero_point 等开销）"""
        return Fraction(self.embedding_bytes_compressed * 8, self.V * self.n)

    @property
    def memory_gain(self) -> int:
        return self.embedding_bytes_original - self.embedding_bytes_compressed

    def to_dict(self) -> Dict:
        def num(x):
            return None if x is None else float(x)

        return {
            'scheme': self.scheme,
            'V': self.V,
            'n': self.n,
            'p': self.p,
            'terms': self.terms,
            'B_rvq': num(self.B_rvq),
            'B_sq': num(self.B_sq),
            'B_ca': num(self.B_ca),
            'B_ca_full': num(self.B_ca_full),
            'B_total': float(self.B_total),
            'precision': fmt_bpp(self.B_total),
            'B_actual': float(self.B_actual),
            'compression_ratio': float(compression_ratio(self.p, self.B_actual)) if self.embedding_bytes_compressed else None,
            'embedding_bytes_original': self.embedding_bytes_original,
            'embedding_bytes_compressed': self.embedding_bytes_compressed,
            'memory_gain_bytes': self.memory_gain,
            'memory_gain_gb': self.memory_gain / GB,
            'sections': dict(self.sections),
            'ca_flops': self.ca_flops,
            'ca_param_bytes': self.ca_param_bytes,
        }

    def table_rows(self) -> List[Sequence[str]]:
        rows = [('scheme', self.scheme), ('shape', f'{self.V}×{self.n} @ {self.p} bit')]
        for name, value in (('B_rvq', self.B_rvq), ('B_sq', self.B_sq), ('B_ca', self.B_ca)):
            if value is not None:
                rows.append((name, fmt_bpp(value)))
        rows.append(('precision', fmt_bpp(self.B_total)))
        if self.B_ca_full is not None and self.terms != 'full':
            rows.append(('B_ca (all params)', fmt_bpp(self.B_ca_full)))
        rows.append(('B_actual', fmt_bpp(self.B_actual)))
        rows.append(('original', f'{self.embedding_bytes_original} B ({self.embedding_bytes_original / GB:.3f} GB)'))
        rows.append(('compressed', f'{self.embedding_bytes_compressed} B ({self.embedding_bytes_compressed / GB:.3f} GB)'))
        rows.append(('mem. gain', f'{self.memory_gain} B ({self.memory_gain / GB:.3f} GB)'))
        for name, size in self.sections.items():
            rows.append((f'  {name}', f'{size} B'))
        if self.ca_flops is not None:
            rows.append(('CA MAC/token', str(self.ca_flops)))
            rows.append(('CA MLP bytes', str(self.ca_param_bytes)))
        return rows


def memory_report(
    V: int,
    n: int,
    p: int,
    scheme: str,
    grvq: Optional[GrvqParams] = None,
    adaptor: Optional[AdaptorConfig] = None,
    sq: Optional[SqParams] = None,
    terms: str = 'full'
) -> AccountingReport:
    """
    原始 = V·n·p/8 字节；压缩后 = 各段实际存储字节之和（码本/适配器按 p 位）
    """
    if V < 1 or n < 1 or p not in (16, 32):
        raise InvalidSpec(f"形状或精度不合法: V={V}, n={n}, p={p}")

    report = AccountingReport(scheme=scheme, V=V, n=n, p=p, terms=terms)
    report.embedding_bytes_original = V * n * p // 8

    if grvq is not None:
        report.B_rvq = bpp_rvq(grvq.L, grvq.h, grvq.kappa, grvq.g, p)
        report.sections.update(rvq_section_bytes(grvq, V, n, p))
    if sq is not None:
        report.B_sq = Fraction(sq.bits)
        report.sections.update(sq_section_bytes(sq, V, n))
    if adaptor is not None:
        report.B_ca = bpp_ca(adaptor, p, terms)
        report.B_ca_full = bpp_ca(adaptor, p, 'full')
        report.sections['adaptor'] = adaptor_section_bytes(adaptor, p)
        flops = flops_report(adaptor, p)
        report.ca_flops = flops['mac_per_token']
        report.ca_param_bytes = flops['param_bytes']

    report.embedding_bytes_compressed = sum(report.sections.values())
    return report


def flops_report(config: AdaptorConfig, p: int = 16) -> Dict:
    """
    适配器每个 token 的计算量与 MLP 参数字节

    MAC = Σ m_i·m_{i+1} + m_{k+1}·n；FLOPs 另给 2×MAC 口径。
    param_bytes 只计 MLP（不含 σ0 表），按 p 位存储。
    """
    count = count_params(config)
    macs = count.weights
    return {
        'mac_per_token': macs,
        'flops_per_token_2mac': 2 * macs,
        'param_bytes': count.mlp * p // 8,
        'param_mb': count.mlp * p / 8 / 1e6,
        'table_bytes': count.table * p // 8,
        'share_of_embedding': count.total / (config.V * config.n),
    }


def embedding_ratio(emb_params: float, other_params: float, emb_bits: float, other_bits: float) -> float:
    """嵌入层占整个模型内存的百分比"""
    if min(emb_params, other_params, emb_bits, other_bits) <= 0:
        raise InvalidSpec("参数量和位宽必须为正数")
    emb = Fraction(emb_params) * Fraction(emb_bits)
    other = Fraction(other_params) * Fraction(other_bits)
    return float(emb / (emb + other) * 100)


def preset(name: str) -> Dict:
    """CARVQ-L 预设（返回副本）"""
    key = name.lower()
    if key not in PRESETS:
        raise InvalidSpec(f"未知预设: {name}（可选 {', '.join(PRESETS)}）")
    p = PRESETS[key]
    return {'grvq': dict(p['grvq']), 'adaptor': {**p['adaptor'], 'hidden': list(p['adaptor']['hidden'])}}


def model_shape(name: str) -> tuple:
    key = name.lower()
    if key not in MODEL_SHAPES:
        raise InvalidSpec(f"未知模型: {name}（可选 {', '.join(MODEL_SHAPES)}）")
    return MODEL_SHAPES[key]


def render_table(rows: Sequence[Sequence[str]], header: Optional[Sequence[str]] = None) -> str:
    """对齐的纯文本表格"""
    all_rows = [list(map(str, r)) for r in ([header] if header else []) + list(rows)]
    widths = [max(len(r[i]) for r in all_rows) for i in range(len(all_rows[0]))]
    lines = []
    for k, r in enumerate(all_rows):
        lines.append('  '.join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
        if header and k == 0:
            lines.append('  '.join('-' * w for w in widths))
    return '\n'.join(lines)
