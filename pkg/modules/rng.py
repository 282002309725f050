"""
随机数流的派生规则（计数器式，版本化）
seed_r = hash64(base_seed, rep_index)；组件流 = Philox(key = hash64(seed_r, label))
同一 (base_seed, rep_index) 在任何并行度下都得到同样的抽样
"""
import hashlib
import struct

import numpy as np

DERIVATION_VERSION = "philox4x64-blake2b64-v1"
MASK64 = (1 << 64) - 1


def hash64(*parts) -> int:
    """对整数 / 字符串序列做 64 位 BLAKE2b 摘要"""
    h = hashlib.blake2b(digest_size=8, person=b"randse-seed")
    for part in parts:
        if isinstance(part, str):
            h.update(b"s" + part.encode("utf-8"))
        else:
            h.update(b"i" + struct.pack("<Q", int(part) & MASK64))
    return int.from_bytes(h.digest(), "little")


def replication_seed(base_seed: int, rep_index: int) -> int:
    return hash64(base_seed, rep_index)


def make_stream(seed: int, label: str) -> np.random.Generator:
    """为 seed 下的某个组件（按标签区分）生成独立的 Philox 计数器流，各组件互不共享"""
    return np.random.Generator(np.random.Philox(key=hash64(seed, label)))

