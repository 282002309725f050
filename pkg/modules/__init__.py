# 随机化实验下回归标准误的估计、oracle 方差与 Monte Carlo 检验
__version__ = "0.1.0"
