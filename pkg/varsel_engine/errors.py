"""
错误体系 (Error Hierarchy)

所有模块抛出的异常都从 VarselError 派生，
CLI 通过 to_dict() 输出机器可读的错误 JSON。
"""

from typing import Any, Dict, Optional


class VarselError(Exception):
    """基类"""

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_dict(self) -> dict:
        return {
            "error": type(self).__name__,
            "message": self.message,
            **self.details,
        }


class ConfigError(VarselError, ValueError):
    """配置错误：形状不符、参数越界、空网格等"""


class NumericError(VarselError, ArithmeticError):
    """
    数值错误：权重或中间量出现非有限值

    Args:
        draw: 出错的网络权重（可选）
        draw_index: 出错的后验样本序号（可选）
    """

    def __init__(
        self,
        message: str,
        draw: Optional[Any] = None,
        draw_index: Optional[int] = None,
        **details: Any
    ):
        if draw_index is not None:
            details["draw_index"] = draw_index
        super().__init__(message, **details)
        self.draw = draw
        self.draw_index = draw_index

    def with_index(self, draw_index: int) -> "NumericError":
        """附上样本序号后重新构造"""
        details = {k: v for k, v in self.details.items() if k != "draw_index"}
        return NumericError(
            f"draw {draw_index}: {self.message}",
            draw=self.draw,
            draw_index=draw_index,
            **details
        )


class SamplerFailure(VarselError, RuntimeError):
    """采样失败：所有提议都发散"""


class InsufficientDrawsError(VarselError, ValueError):
    """后验样本数不足"""


class DegenerateVarianceError(VarselError, ValueError):
    """方差退化（常数真值、零标准差）"""
