"""
CSV 数据的读写（逗号分隔、'.' 小数点、必须有表头、UTF-8）
列约定：
    y        结果变量（必需）
    d        关注的回归变量（必需）
    v        工具变量（可选）
    group    组级分配的组号（可选，要求 d 组内为常数）
    cluster  聚类变量（可选，缺省时使用 group）
    const    常数列（可选）
    w1, w2.. 控制变量 W，按编号排序；若没有非零常数列，则在最前面补一列常数 1
    其余列   忽略并给出警告
"""
import logging
import os
import re
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from modules.errors import InvalidDataset
from modules.linmodel import Dataset

logger = logging.getLogger(__name__)

RESERVED = ("y", "d", "v", "group", "cluster")
CONTROL_PATTERN = re.compile(r"w(\d+)")


def _constant_first(frame: pd.DataFrame) -> pd.DataFrame:
    """把第一个非零常数列移到最前；没有时补一列 const"""
    for col in frame.columns:
        values = frame[col].to_numpy(dtype=float)
        if values.size and values[0] != 0 and np.all(values == values[0]):
            rest = [c for c in frame.columns if c != col]
            return frame[[col] + rest]
    logger.info("控制变量中没有常数列，已自动补充截距列 const")
    out = frame.copy()
    out.insert(0, "const", 1.0)
    return out


def _control_columns(columns) -> List[str]:
    numbered = []
    for c in columns:
        match = CONTROL_PATTERN.fullmatch(c)
        if match:
            numbered.append((int(match.group(1)), c))
    numbered.sort()
    selected = (["const"] if "const" in columns else []) + [c for _, c in numbered]
    ignored = [c for c in columns if c not in RESERVED and c not in selected]
    if ignored:
        logger.warning(f"以下列既不是保留列也不是控制变量 (const, w1, w2, ...)，已忽略: {ignored}")
    return selected


def read_dataset(path: str) -> Tuple[Dataset, Optional[np.ndarray]]:
    """读取 CSV，返回 (Dataset, 聚类变量)"""
    if not os.path.isfile(path):
        raise InvalidDataset(f"数据文件不存在: {path}")
    try:
        frame = pd.read_csv(path, sep=",", decimal=".", encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        logger.error(f"读取 CSV 失败: {e}")
        raise InvalidDataset(f"无法解析 CSV {path}: {e}")

    frame.columns = [str(c).strip() for c in frame.columns]
    for required in ("y", "d"):
        if required not in frame.columns:
            raise InvalidDataset(f"CSV 缺少必需列 {required}")
    controls = frame[_control_columns(frame.columns)]
    try:
        controls = controls.astype(float)
        Y = frame["y"].to_numpy(dtype=float)
        D = frame["d"].to_numpy(dtype=float)
        V = frame["v"].to_numpy(dtype=float) if "v" in frame.columns else None
    except ValueError as e:
        raise InvalidDataset(f"CSV 含有非数值内容: {e}")
    controls = _constant_first(controls)

    group_ids = None
    if "group" in frame.columns:
        group_ids, _ = pd.factorize(frame["group"], sort=False)
    cluster_ids = None
    if "cluster" in frame.columns:
        cluster_ids, _ = pd.factorize(frame["cluster"], sort=False)
    elif group_ids is not None:
        cluster_ids = group_ids

    data = Dataset(Y=Y, D=D, W=controls.to_numpy(), group_ids=group_ids, V=V)
    logger.info(f"读取数据 {path}: n={data.n}, d_w={data.d_w}, 控制变量 {list(controls.columns)}")
    return data, cluster_ids


def write_dataset(data: Dataset, path: str, cluster_ids: Optional[np.ndarray] = None) -> None:
    """按与 read_dataset 相同的列约定写出"""
    columns = {"y": data.Y, "d": data.D}
    if data.V is not None:
        columns["v"] = data.V
    if data.group_ids is not None:
        columns["group"] = data.group_ids
    if cluster_ids is not None:
        columns["cluster"] = np.asarray(cluster_ids)
    frame = pd.DataFrame(columns)
    for k in range(data.d_w):
        frame["const" if k == 0 else f"w{k}"] = data.W[:, k]
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, index=False, encoding="utf-8", float_format="%.17g")
    logger.info(f"数据已写出: {path}")
