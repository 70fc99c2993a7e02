#!/usr/bin/env python3
"""
CARVQ 嵌入矩阵压缩工具（命令行入口）

子命令: compress | reconstruct | eval | compare | report | synth
退出码: 0 成功, 2 参数错误, 3 数据错误, 4 内部错误
"""

import argparse
import json
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from accounting import (
    MODEL_SHAPES,
    PRESETS,
    bpp_total,
    embedding_ratio,
    flops_report,
    fmt_bpp,
    kappa_for_bpp,
    memory_report,
    model_shape,
    preset,
    render_table,
)
from adaptor import AdaptorConfig, JsonlProgress, train_adaptor
from artifact import CompressedArtifact, read_container, write_container
from config_loader import RunConfig, deep_merge, load_config, resolve_threads
from errors import CarvqError, InvalidSpec, ShapeMismatch
from grvq import GrvqParams, grvq_compress, grvq_reconstruct
from scalarq import GRANULARITIES, SqParams, sq_dequantize, sq_quantize
from tensor_io import EmbeddingMatrix, gen_synthetic, load_matrix, save_matrix

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

SCHEMES = ('carvq', 'scalar', 'carvq+scalar-base')


def _num(x) -> Optional[float]:
    """JSON 与表格共用的数值精度（8 位有效数字）"""
    if x is None:
        return None
    return float(f"{float(x):.8g}")


def _fmt(x) -> str:
    if x is None:
        return '-'
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return f"{float(x):.8g}"


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.replace('x', ',').split(',') if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的整数: {text}") from e


def emit(payload, rows: Sequence[Sequence], header: Optional[Sequence[str]], fmt: str):
    """把结果打印到 stdout（json 或对齐表格）"""
    if fmt == 'json':
        print(json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True))
    else:
        print(render_table(rows, header))


# ---------------------------------------------------------------------------
# 参数合并
# ---------------------------------------------------------------------------

def build_run_config(args) -> RunConfig:
    settings = load_config(args.config)
    runtime = settings.get('runtime', {})
    report = settings.get('report', {})
    run = RunConfig(
        subcommand=args.command,
        seed=int(args.seed if args.seed is not None else runtime.get('seed', 0)),
        threads=resolve_threads(args.threads, settings),
        report_format=args.format or report.get('format', 'table'),
        param_terms=report.get('param_terms', 'weights'),
        settings=settings,
    )
    return run.validate()


def grvq_settings(run: RunConfig, args, preset_name: Optional[str] = None) -> GrvqParams:
    """config.yaml < 预设 < 命令行"""
    merged = run.section('grvq')
    name = preset_name or getattr(args, 'preset', None)
    if name:
        merged = deep_merge(merged, preset(name)['grvq'])
    flags = {
        'L': getattr(args, 'L', None),
        'kappa': getattr(args, 'kappa', None),
        'h': getattr(args, 'h', None),
        'g': getattr(args, 'g', None),
    }
    merged.update({k: v for k, v in flags.items() if v is not None})
    merged['seed'] = run.seed
    return GrvqParams.from_dict(merged).validate()


def adaptor_settings(run: RunConfig, args, V: int, n: int, preset_name: Optional[str] = None) -> AdaptorConfig:
    merged = run.section('adaptor')
    name = preset_name or getattr(args, 'preset', None)
    if name:
        merged = deep_merge(merged, preset(name)['adaptor'])
    flags = {
        'm': getattr(args, 'm', None),
        'hidden': getattr(args, 'hidden', None),
        'lr': getattr(args, 'lr', None),
        'iterations': getattr(args, 'iterations', None),
        'batch_size': getattr(args, 'batch_size', None),
    }
    merged.update({k: v for k, v in flags.items() if v is not None})
    merged.update({'V': V, 'n': n, 'seed': run.seed})
    return AdaptorConfig.from_dict(merged).validate()


def scalar_settings(run: RunConfig, args, bits: Optional[int] = None) -> SqParams:
    merged = run.section('scalar')
    if bits is not None:
        merged['bits'] = bits
    elif getattr(args, 'bits', None) is not None:
        merged['bits'] = args.bits
    if getattr(args, 'granularity', None):
        merged['granularity'] = args.granularity
    return SqParams.from_dict(merged).validate()


# ---------------------------------------------------------------------------
# 压缩流水线
# ---------------------------------------------------------------------------

def compress_matrix(
    M: EmbeddingMatrix,
    scheme: str,
    run: RunConfig,
    grvq_params: Optional[GrvqParams] = None,
    adaptor_config: Optional[AdaptorConfig] = None,
    sq_params: Optional[SqParams] = None,
    progress=None
):
    """
    按方案压缩一个矩阵

    Returns:
        (CompressedArtifact, TrainReport 或 None)
    """
    p = M.source_precision
    grvq_model = sq_model = adaptor = None
    train_report = None

    if scheme == 'carvq':
        grvq_model = grvq_compress(M, grvq_params, threads=run.threads, storage_bits=p)
        base = grvq_reconstruct(grvq_model) if adaptor_config is not None else None
    else:
        sq_model = sq_quantize(M, sq_params.bits, sq_params.granularity)
        base = sq_dequantize(sq_model) if adaptor_config is not None else None

    if adaptor_config is not None:
        adaptor, train_report = train_adaptor(M, base, adaptor_config, progress=progress)
        adaptor = adaptor.to_storage(p)

    artifact = CompressedArtifact(
        V=M.rows,
        n=M.cols,
        p=p,
        scheme=scheme,
        grvq=grvq_model,
        adaptor=adaptor,
        scalar=sq_model,
        seed=run.seed
    )
    return artifact.validate(), train_report


def reconstruction_metrics(original: np.ndarray, recon: np.ndarray, worst: int = 5) -> Dict:
    """MSE、平均/最大 L1（按 token 行平均）以及误差最大的几行"""
    if original.shape != recon.shape:
        raise ShapeMismatch(f"产物形状 {recon.shape} 与原矩阵 {original.shape} 不一致")
    diff = original.astype(np.float64) - recon.astype(np.float64)
    per_token = np.abs(diff).mean(axis=1)
    order = np.argsort(-per_token, kind='stable')[:worst]
    return {
        'mse': float(np.mean(diff * diff)),
        'mean_l1': float(np.abs(diff).mean()),
        'max_l1': float(per_token.max()),
        'worst_rows': [{'token': int(t), 'l1': float(per_token[t])} for t in order],
    }


# ---------------------------------------------------------------------------
# 子命令
# ---------------------------------------------------------------------------

def cmd_compress(args, run: RunConfig) -> int:
    """压缩 .emb 为 .carvq 并打印核算报告"""
    scheme = args.scheme
    use_adaptor = args.adaptor or scheme == 'carvq+scalar-base'
    if scheme == 'scalar' and args.adaptor:
        raise InvalidSpec("scalar 方案不带适配器；需要 INT-N 基础 + 适配器请用 --scheme carvq+scalar-base")

    # 先校验所有参数再开始干活
    grvq_params = grvq_settings(run, args) if scheme == 'carvq' else None
    sq_params = scalar_settings(run, args) if scheme != 'carvq' else None

    M = load_matrix(args.inp)
    V, n = M.shape
    if grvq_params is not None:
        grvq_params.check_shape(V, n)
    adaptor_config = adaptor_settings(run, args, V, n) if use_adaptor else None

    progress = JsonlProgress(args.progress) if args.progress else None
    try:
        artifact, train_report = compress_matrix(
            M, scheme, run,
            grvq_params=grvq_params,
            adaptor_config=adaptor_config,
            sq_params=sq_params,
            progress=progress
        )
    finally:
        if progress is not None:
            progress.close()

    file_bytes = write_container(artifact, args.out)
    report = artifact.accounting(terms=run.param_terms)

    payload = report.to_dict()
    payload['artifact'] = str(args.out)
    payload['file_bytes'] = file_bytes
    if train_report is not None:
        payload['training'] = train_report.to_dict()

    rows = report.table_rows() + [('file', f'{args.out} ({file_bytes} B)')]
    if train_report is not None:
        rows.append(('train L1', f'{_fmt(train_report.initial_loss)} -> {_fmt(train_report.final_loss)}'))
    emit(payload, rows, None, run.report_format)
    logger.info(f"✅ 压缩完成: precision {fmt_bpp(report.B_total)} bit/param")
    return 0


def cmd_reconstruct(args, run: RunConfig) -> int:
    """从 .carvq 重建 .emb（基础重建 + 适配器修正）"""
    artifact = read_container(args.inp)
    recon = artifact.reconstruct()
    save_matrix(EmbeddingMatrix(recon, dtype='f32'), args.out, dtype=args.dtype)

    payload = {'artifact': str(args.inp), 'out': str(args.out), 'V': artifact.V, 'n': artifact.n, 'dtype': args.dtype}
    rows = [(k, str(v)) for k, v in payload.items()]
    emit(payload, rows, None, run.report_format)
    logger.info(f"✅ 已重建 {args.out}")
    return 0


def cmd_eval(args, run: RunConfig) -> int:
    """对比产物重建与原矩阵"""
    artifact = read_container(args.artifact)
    M = load_matrix(args.inp)
    if M.shape != (artifact.V, artifact.n):
        raise ShapeMismatch(f"产物形状 {(artifact.V, artifact.n)} 与原矩阵 {M.shape} 不一致")

    metrics = reconstruction_metrics(M.data, artifact.reconstruct(), args.worst)
    report = artifact.accounting(terms=run.param_terms)

    payload = {
        'scheme': artifact.scheme,
        'mse': _num(metrics['mse']),
        'mean_l1': _num(metrics['mean_l1']),
        'max_l1': _num(metrics['max_l1']),
        'worst_rows': [{'token': w['token'], 'l1': _num(w['l1'])} for w in metrics['worst_rows']],
        'bpp': _num(report.B_total),
        'bpp_actual': _num(report.B_actual),
    }
    rows = [
        ('scheme', artifact.scheme),
        ('mse', _fmt(payload['mse'])),
        ('mean_l1', _fmt(payload['mean_l1'])),
        ('max_l1', _fmt(payload['max_l1'])),
        ('bpp', _fmt(payload['bpp'])),
        ('bpp_actual', _fmt(payload['bpp_actual'])),
    ]

    if artifact.adaptor is not None:
        base = reconstruction_metrics(M.data, artifact.base_reconstruction, 0)
        payload['base_mse'] = _num(base['mse'])
        payload['base_mean_l1'] = _num(base['mean_l1'])
        rows += [('base_mse', _fmt(payload['base_mse'])), ('base_mean_l1', _fmt(payload['base_mean_l1']))]

    rows += [(f'worst #{i + 1}', f"token {w['token']}  l1 {_fmt(w['l1'])}") for i, w in enumerate(payload['worst_rows'])]
    emit(payload, rows, None, run.report_format)
    return 0


def parse_scheme(text: str) -> Dict:
    """
    解析 compare 的方案名

    intN -> 标量 N 位；rvq-L -> 仅 group RVQ；carvq-L -> 预设 + 适配器；ca+intN -> INT-N 基础 + 适配器
    """
    name = text.strip().lower()
    try:
        if name.startswith('int'):
            return {'name': name, 'kind': 'scalar', 'bits': int(name[3:])}
        if name.startswith('ca+int'):
            return {'name': name, 'kind': 'carvq+scalar-base', 'bits': int(name[6:])}
        if name.startswith('rvq-'):
            return {'name': name, 'kind': 'rvq', 'L': int(name[4:])}
        if name.startswith('carvq-'):
            return {'name': name, 'kind': 'carvq', 'L': int(name[6:])}
    except ValueError:
        pass
    raise InvalidSpec(f"无法识别的方案: {text}（示例: int2, rvq-3, carvq-3, ca+int2）")


def cmd_compare(args, run: RunConfig) -> int:
    """同一矩阵上比较多个方案，按 bpp 排序"""
    specs = [parse_scheme(s) for s in args.schemes.split(',') if s.strip()]
    if not specs:
        raise InvalidSpec("--schemes 不能为空")

    M = load_matrix(args.inp)
    V, n = M.shape

    # 全部先校验
    plans = []
    for spec in specs:
        grvq_params = adaptor_config = sq_params = None
        if spec['kind'] in ('rvq', 'carvq'):
            base_preset = f"carvq-{spec['L']}" if f"carvq-{spec['L']}" in PRESETS else None
            grvq_params = grvq_settings(run, args, preset_name=base_preset)
            grvq_params.L = spec['L']
            grvq_params.validate().check_shape(V, n)
            if spec['kind'] == 'carvq':
                adaptor_config = adaptor_settings(run, args, V, n, preset_name=base_preset)
        else:
            sq_params = scalar_settings(run, args, bits=spec['bits'])
            if spec['kind'] == 'carvq+scalar-base':
                adaptor_config = adaptor_settings(run, args, V, n)
        scheme = 'carvq' if grvq_params is not None else ('scalar' if adaptor_config is None else 'carvq+scalar-base')
        plans.append((spec['name'], scheme, grvq_params, adaptor_config, sq_params))

    results = []
    for name, scheme, grvq_params, adaptor_config, sq_params in plans:
        logger.info(f"📊 方案 {name}")
        artifact, _ = compress_matrix(
            M, scheme, run,
            grvq_params=grvq_params,
            adaptor_config=adaptor_config,
            sq_params=sq_params
        )
        metrics = reconstruction_metrics(M.data, artifact.reconstruct(), 0)
        report = artifact.accounting(terms=run.param_terms)
        results.append({
            'scheme': name,
            'bpp': _num(report.B_total),
            'bpp_actual': _num(report.B_actual),
            'mse': _num(metrics['mse']),
            'mean_l1': _num(metrics['mean_l1']),
        })

    results.sort(key=lambda r: (r['bpp'], r['scheme']))
    header = ['scheme', 'bpp', 'bpp_actual', 'mse', 'mean_l1']
    rows = [[r['scheme']] + [_fmt(r[k]) for k in header[1:]] for r in results]
    emit({'rows': results}, rows, header, run.report_format)
    return 0


def cmd_report(args, run: RunConfig) -> int:
    """纯核算：只需要形状，不需要数据"""
    if args.model:
        V, n = model_shape(args.model)
        label = args.model.lower()
    elif args.shape:
        if len(args.shape) != 2:
            raise InvalidSpec(f"--shape 需要 V,n 两个数: {args.shape}")
        V, n = args.shape
        label = f'{V}x{n}'
    else:
        raise InvalidSpec("需要 --model 或 --shape")
    p = args.p

    explicit = args.preset or any(getattr(args, k) is not None for k in ('L', 'kappa', 'h', 'g'))
    names = [args.preset] if explicit else list(PRESETS)

    entries = []
    for name in names:
        grvq_params = grvq_settings(run, args, preset_name=name)
        grvq_params.check_shape(V, n)
        config = adaptor_settings(run, args, V, n, preset_name=name)
        report = memory_report(V, n, p, 'carvq', grvq=grvq_params, adaptor=config, terms=run.param_terms)
        entries.append({
            'preset': name or 'custom',
            'L': grvq_params.L,
            'kappa': grvq_params.kappa,
            'h': grvq_params.h,
            'g': grvq_params.g,
            'B_rvq': fmt_bpp(report.B_rvq),
            'B_ca': fmt_bpp(report.B_ca),
            'precision': fmt_bpp(bpp_total(grvq_params, config, p, run.param_terms)),
            'B_ca_full': fmt_bpp(report.B_ca_full),
            'B_actual': fmt_bpp(report.B_actual),
            'compressed_bytes': report.embedding_bytes_compressed,
            'memory_gain_bytes': report.memory_gain,
        })

    flops = flops_report(config, p)
    payload = {
        'model': label,
        'V': V,
        'n': n,
        'p': p,
        'terms': run.param_terms,
        'original_bytes': V * n * p // 8,
        'rows': entries,
        'flops': {k: (_num(v) if isinstance(v, float) else v) for k, v in flops.items()},
    }

    if args.other_params is not None:
        emb_params = args.emb_params if args.emb_params is not None else V * n
        payload['embedding_ratio'] = _num(
            embedding_ratio(emb_params, args.other_params, args.emb_bits, args.other_bits)
        )

    if args.match_bits is not None:
        payload['kappa_match'] = [
            {
                'preset': e['preset'],
                'L': e['L'],
                'target': _num(args.match_bits),
                'kappa': _num(kappa_for_bpp(args.match_bits, e['L'], e['h'], e['g'], p)),
            }
            for e in entries
        ]

    header = ['preset', 'L', 'kappa', 'B_rvq', 'B_ca', 'precision', 'B_ca_full', 'B_actual', 'compressed_bytes']
    rows = [[str(e[k]) for k in header] for e in entries]
    if run.report_format == 'json':
        emit(payload, rows, header, 'json')
    else:
        print(f"{label}: V={V}, n={n}, p={p}, terms={run.param_terms}, original {payload['original_bytes']} B")
        print(render_table(rows, header))
        print(render_table([
            ('CA MAC/token', str(flops['mac_per_token'])),
            ('CA FLOPs/token (2·MAC)', str(flops['flops_per_token_2mac'])),
            ('CA MLP bytes', str(flops['param_bytes'])),
            ('CA MLP MB', _fmt(flops['param_mb'])),
            ('CA params / embedding', _fmt(flops['share_of_embedding'])),
        ]))
        for m in payload.get('kappa_match', []):
            print(f"{m['preset']}: B_rvq = {_fmt(m['target'])} 时 κ = {m['kappa']:.3f}")
        if 'embedding_ratio' in payload:
            print(f"embedding ratio: {_fmt(payload['embedding_ratio'])} %")
    return 0


def cmd_synth(args, run: RunConfig) -> int:
    """生成合成嵌入矩阵"""
    M = gen_synthetic(args.V, args.n, args.clusters, args.noise, run.seed, dtype=args.dtype)
    save_matrix(M, args.out)
    payload = {'out': str(args.out), 'V': args.V, 'n': args.n, 'clusters': args.clusters,
               'noise_sigma': args.noise, 'seed': run.seed, 'dtype': args.dtype}
    emit(payload, [(k, str(v)) for k, v in payload.items()], None, run.report_format)
    logger.info(f"✅ 已生成 {args.out}")
    return 0


COMMANDS = {
    'compress': cmd_compress,
    'reconstruct': cmd_reconstruct,
    'eval': cmd_eval,
    'compare': cmd_compare,
    'report': cmd_report,
    'synth': cmd_synth,
}


# ---------------------------------------------------------------------------
# 参数解析
# ---------------------------------------------------------------------------

def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', '-c', default='config.yaml', help='配置文件（默认: config.yaml）')
    common.add_argument('--threads', type=int, default=None, help='组级并行线程数（也可用 CARVQ_THREADS）')
    common.add_argument('--seed', type=int, default=None, help='随机种子（默认取配置 runtime.seed）')
    common.add_argument('--format', choices=['json', 'table'], default=None, help='输出格式')
    common.add_argument('--quiet', '-q', action='store_true', help='只输出警告和错误日志')
    common.add_argument('--verbose', '-v', action='store_true', help='输出调试日志')
    return common


def _add_grvq_flags(p: argparse.ArgumentParser):
    p.add_argument('-L', type=int, default=None, help='残差量化轮数 L')
    p.add_argument('--kappa', type=int, default=None, help='索引位数 κ（码本大小 2^κ）')
    p.add_argument('-h', dest='h', type=int, default=None, help='子向量维度 h')
    p.add_argument('-g', type=int, default=None, help='每组子向量数 g')
    p.add_argument('--preset', choices=sorted(PRESETS), default=None, help='CARVQ-L 预设')
    p.add_argument('--help', action='help', help='显示帮助')


def _add_adaptor_flags(p: argparse.ArgumentParser):
    p.add_argument('--m', type=int, default=None, help='σ0 表的宽度 m')
    p.add_argument('--hidden', type=_int_list, default=None, help='隐藏层维度，如 384,512')
    p.add_argument('--lr', type=float, default=None, help='Adam 学习率')
    p.add_argument('--iterations', type=int, default=None, help='训练迭代次数')
    p.add_argument('--batch-size', type=int, default=None, help='每批 token 数（默认整个词表）')


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog='carvq_cli.py',
        description='🧩 CARVQ 嵌入矩阵压缩工具（group RVQ + 修正适配器）',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
📖 使用示例:

  # 1. 生成一个合成矩阵
  python carvq_cli.py synth --out m.emb --V 2000 --n 64 --clusters 64 --noise 0.05

  # 2. CARVQ-3 压缩（带修正适配器）
  python carvq_cli.py compress --in m.emb --out m.carvq --preset carvq-3 --adaptor

  # 3. 评估重建误差
  python carvq_cli.py eval --artifact m.carvq --in m.emb

  # 4. 多方案对比
  python carvq_cli.py compare --in m.emb --schemes int2,int3,carvq-2,carvq-3

  # 5. 只看位宽核算
  python carvq_cli.py report --model llama-3.2-3b
  python carvq_cli.py report --model llama-3.2-3b --preset carvq-3 --match-bits 2
        """
    )
    sub = parser.add_subparsers(dest='command', metavar='<command>')
    sub.required = True

    # -h 被子向量维度占用，compress / compare / report 改用 --help
    p = sub.add_parser('compress', parents=[common], add_help=False, help='压缩 .emb -> .carvq')
    p.add_argument('--in', dest='inp', required=True, help='输入 .emb 文件')
    p.add_argument('--out', required=True, help='输出 .carvq 文件')
    p.add_argument('--scheme', choices=SCHEMES, default='carvq', help='压缩方案（默认: carvq）')
    p.add_argument('--adaptor', action='store_true', help='训练修正适配器')
    p.add_argument('--bits', type=int, default=None, help='标量量化位数')
    p.add_argument('--granularity', choices=GRANULARITIES, default=None, help='标量量化粒度')
    p.add_argument('--progress', default=None, help='训练进度 JSONL 输出（- 表示 stderr）')
    _add_grvq_flags(p)
    _add_adaptor_flags(p)

    p = sub.add_parser('reconstruct', parents=[common], help='.carvq -> 重建 .emb')
    p.add_argument('--in', dest='inp', required=True, help='输入 .carvq 文件')
    p.add_argument('--out', required=True, help='输出 .emb 文件')
    p.add_argument('--dtype', choices=['f32', 'f16'], default='f32', help='输出精度（默认: f32）')

    p = sub.add_parser('eval', parents=[common], help='评估重建误差')
    p.add_argument('--artifact', required=True, help='.carvq 文件')
    p.add_argument('--in', dest='inp', required=True, help='原始 .emb 文件')
    p.add_argument('--worst', type=int, default=5, help='列出误差最大的行数（默认: 5）')

    p = sub.add_parser('compare', parents=[common], add_help=False, help='多方案对比')
    p.add_argument('--in', dest='inp', required=True, help='输入 .emb 文件')
    p.add_argument('--schemes', required=True, help='逗号分隔，如 int2,int3,carvq-2,ca+int2')
    p.add_argument('--granularity', choices=GRANULARITIES, default=None, help='标量量化粒度')
    _add_grvq_flags(p)
    _add_adaptor_flags(p)

    p = sub.add_parser('report', parents=[common], add_help=False, help='位宽 / 内存 / FLOPs 核算')
    p.add_argument('--model', choices=sorted(MODEL_SHAPES), default=None, help='已知模型形状')
    p.add_argument('--shape', type=_int_list, default=None, help='自定义形状 V,n')
    p.add_argument('--p', type=int, choices=[16, 32], default=16, help='原始精度（默认: 16）')
    p.add_argument('--emb-params', type=float, default=None, help='嵌入层参数量（默认 V·n）')
    p.add_argument('--other-params', type=float, default=None, help='其余参数量（给出时计算嵌入层内存占比）')
    p.add_argument('--emb-bits', type=float, default=16, help='嵌入层位宽（默认: 16）')
    p.add_argument('--other-bits', type=float, default=16, help='其余参数位宽（默认: 16）')
    p.add_argument('--match-bits', type=float, default=None, help='求使 B_rvq 等于该位宽的连续 κ（与 INT-N 等位宽对比）')
    _add_grvq_flags(p)
    _add_adaptor_flags(p)

    p = sub.add_parser('synth', parents=[common], help='生成合成嵌入矩阵')
    p.add_argument('--out', required=True, help='输出 .emb 文件')
    p.add_argument('--V', type=int, required=True, help='词表大小')
    p.add_argument('--n', type=int, required=True, help='嵌入维度')
    p.add_argument('--clusters', type=int, default=16, help='聚类中心数（默认: 16）')
    p.add_argument('--noise', type=float, default=0.05, help='噪声标准差（默认: 0.05）')
    p.add_argument('--dtype', choices=['f32', 'f16'], default='f32', help='存储精度（默认: f32）')

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """命令行接口"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    root = logging.getLogger()
    if args.verbose:
        root.setLevel(logging.DEBUG)
    elif args.quiet:
        root.setLevel(logging.WARNING)

    try:
        run = build_run_config(args)
        return COMMANDS[args.command](args, run)
    except CarvqError as e:
        print(json.dumps(e.to_dict(), ensure_ascii=False))
        logger.error(f"❌ {e.code}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("⚠️  用户中断")
        return 4
    except Exception as e:
        logger.exception(f"❌ 内部错误: {e}")
        print(json.dumps({'error': 'internal', 'message': str(e), 'exit_code': 4}, ensure_ascii=False))
        return 4


if __name__ == '__main__':
    exit(main())
