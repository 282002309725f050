"""统一的异常类型，CLI 据此映射退出码"""


class RandSEError(ValueError):
    """所有库内错误的基类（数据 / 模型设定错误，CLI 退出码 2）"""


class InvalidDataset(RandSEError):
    pass


class RankDeficient(RandSEError):
    """设计矩阵数值上奇异（多重共线性）"""


class MissingInstrument(RandSEError):
    pass


class WeakInstrument(RandSEError):
    pass


class SingleCluster(RandSEError):
    pass


class NonpositiveVariance(RandSEError):
    pass


class UnsupportedSpec(RandSEError):
    pass


class DegenerateSpec(RandSEError):
    pass


class InvalidSpec(RandSEError):
    pass


class InvalidLevel(RandSEError):
    pass


class InvalidGamma(RandSEError):
    pass


class DimensionMismatch(RandSEError):
    pass


class EmptyRecords(RandSEError):
    pass


class AllReplicationsFailed(RandSEError):
    pass


class ExcessiveExclusions(RandSEError):
    """被剔除的重复次数超过 1%"""


class ConfigError(RandSEError):
    """配置文件或命令行覆盖项有误（未知键、无法解析的值）"""


class AcceptanceFailure(Exception):
    """--assert 模式下容差检验未通过（退出码 3）"""

    def __init__(self, failures):
        self.failures = list(failures)
        names = ", ".join(f[0] for f in self.failures)
        super().__init__(f"验收检验未通过: {names}")
