# app/osm_engine/errors.py

"""
数值引擎的异常体系。每类异常携带命令行退出码：
2 = 配置/参数错误，3 = 数值失败，4 = 校验失败。
"""


class OsmError(Exception):
    """引擎异常基类。"""
    exit_code = 3


class InvalidArgumentError(OsmError, ValueError):
    """非法参数：非正的网格数、区域尺寸或 p，以及无法整除的子区域划分。"""
    exit_code = 2


class ConfigError(OsmError):
    """配置文件解析或校验失败。"""
    exit_code = 2

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"第 {line} 行: {message}"
        super().__init__(message)


class ContractViolation(OsmError):
    """在前置条件之外调用了某个操作。"""
    exit_code = 3


class ProtocolError(OsmError):
    """迹交换协议被破坏（缺少某个有向迹值）。"""
    exit_code = 3


class SingularMatrixError(OsmError):
    """分解时遇到非正主元。"""
    exit_code = 3


class NumericFailure(OsmError):
    """特征值不收敛、CG 不收敛或收敛因子无定义。"""
    exit_code = 3


class VerificationFailure(OsmError):
    """交叉验证或不动点检验未通过。"""
    exit_code = 4
