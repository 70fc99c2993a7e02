#!/usr/bin/env python3
"""
错误类型定义
所有可预期的失败都抛出 CarvqError 的子类，命令行入口据此决定退出码
"""

import re
from typing import Dict


class CarvqError(ValueError):
    """CARVQ 工具链的基础异常"""

    exit_code = 3

    @property
    def code(self) -> str:
        # MalformedHeader -> malformed_header
        return re.sub(r'(?<!^)(?=[A-Z])', '_', type(self).__name__).lower()

    def to_dict(self) -> Dict:
        return {
            'error': self.code,
            'message': str(self),
            'exit_code': self.exit_code,
        }


class UsageError(CarvqError):
    """参数或配置不合法（退出码 2）"""

    exit_code = 2


class DataError(CarvqError):
    """输入数据或文件内容有问题（退出码 3）"""

    exit_code = 3


# 参数类
class InvalidSpec(UsageError):
    pass


# 数据类
class MalformedHeader(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class NonFiniteData(DataError):
    pass


class IoFailure(DataError):
    pass


class BadSubvectorDim(UsageError):
    pass


class TooFewPoints(DataError):
    pass


class DimMismatch(DataError):
    pass


class IndexOutOfRange(DataError):
    pass


class TokenOutOfRange(DataError):
    pass


class IndexOverflow(DataError):
    pass


class MalformedStream(DataError):
    pass


class DivergedLoss(DataError):
    pass


class ChecksumMismatch(DataError):
    pass


class UnknownVersion(DataError):
    pass


class SectionLengthMismatch(DataError):
    pass
