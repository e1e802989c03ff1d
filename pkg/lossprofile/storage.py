"""LPRF 配列コンテナとチェックポイントの永続化層。

フォーマット:
    magic "LPRF" | version (u16 LE) | header length (u32 LE) | JSON header | payload

header は {"arrays": [{name, dtype, shape, offset, nbytes}, ...], "meta": {...}}。
payload はリトルエンディアンの生バイト列を header の順に連結したもの。
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import PersistenceError, UnsupportedVersionError

MAGIC = b"LPRF"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sHI")

_ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "<i4", "|i1", "|u1", "|b1"}

PathLike = Union[str, Path]


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    if array.dtype.byteorder == ">" or (array.dtype.byteorder == "=" and not np.little_endian):
        array = array.astype(array.dtype.newbyteorder("<"))
    if array.dtype.str not in _ALLOWED_DTYPES:
        raise PersistenceError(f"保存できない dtype です: {array.dtype}")
    return array


def encode_arrays(arrays: Mapping[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> bytes:
    """配列辞書を LPRF のバイト列にする。"""
    entries, chunks, offset = [], [], 0
    for name in arrays:
        arr = _little_endian(np.asarray(arrays[name]))
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    try:
        header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    except (TypeError, ValueError) as e:
        raise PersistenceError(f"メタデータを JSON にできません: {e}") from e
    return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)


def decode_arrays(blob: bytes, source: str = "<bytes>") -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """LPRF のバイト列を (配列辞書, meta) に戻す。"""
    if len(blob) < _PREAMBLE.size:
        raise PersistenceError(f"ファイルが途中で切れています: {source}")
    magic, version, header_len = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise PersistenceError(f"LPRF 形式ではありません: {source}")
    if version > FORMAT_VERSION:
        raise UnsupportedVersionError(f"未対応のフォーマットバージョンです: {version} (対応: {FORMAT_VERSION}) {source}")
    if version < 1:
        raise PersistenceError(f"不正なフォーマットバージョンです: {version} {source}")

    start = _PREAMBLE.size
    if len(blob) < start + header_len:
        raise PersistenceError(f"ヘッダが途中で切れています: {source}")
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
        entries = header["arrays"]
        meta = header.get("meta", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise PersistenceError(f"ヘッダが壊れています: {source}: {e}") from e

    payload = memoryview(blob)[start + header_len:]
    arrays: Dict[str, np.ndarray] = {}
    expected_end = 0
    for entry in entries:
        try:
            name, dtype_str = entry["name"], entry["dtype"]
            shape = tuple(int(s) for s in entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise PersistenceError(f"配列エントリが壊れています: {source}: {entry}") from e
        if dtype_str not in _ALLOWED_DTYPES:
            raise PersistenceError(f"未知の dtype です: {name} {dtype_str}")
        dtype = np.dtype(dtype_str)
        count = int(np.prod(shape, dtype=np.int64))
        if count * dtype.itemsize != nbytes:
            raise PersistenceError(
                f"ヘッダの要素数とバイト数が一致しません: {name} shape={shape} dtype={dtype_str} nbytes={nbytes}"
            )
        if offset != expected_end:
            raise PersistenceError(f"配列のオフセットが不連続です: {name} offset={offset}")
        if offset + nbytes > len(payload):
            raise PersistenceError(f"ペイロードが途中で切れています: {name} {source}")
        arrays[name] = np.frombuffer(payload[offset:offset + nbytes], dtype=dtype).reshape(shape).copy()
        expected_end = offset + nbytes
    if expected_end != len(payload):
        raise PersistenceError(
            f"ペイロード長がヘッダと一致しません: header={expected_end} payload={len(payload)} {source}"
        )
    return arrays, meta


def _write_atomic(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as e:
        raise PersistenceError(f"書き込みに失敗しました: {path}: {e}") from e


def save_arrays(path: PathLike, arrays: Mapping[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    _write_atomic(path, encode_arrays(arrays, meta))
    return path


def load_arrays(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise PersistenceError(f"読み込みに失敗しました: {path}: {e}") from e
    return decode_arrays(blob, source=str(path))


def save_array(path: PathLike, array: np.ndarray, name: str = "array", meta: Optional[Dict[str, Any]] = None) -> Path:
    """単一マップ（損失プロファイルなど）の保存"""
    return save_arrays(path, {name: array}, meta)


def load_array(path: PathLike) -> np.ndarray:
    arrays, _ = load_arrays(path)
    if len(arrays) != 1:
        raise PersistenceError(f"単一配列のファイルではありません: {path} ({len(arrays)} 個)")
    return next(iter(arrays.values()))


@dataclass
class Checkpoint:
    """3 ネットワークのパラメータ・Adam 状態・カウンタ・設定スナップショット"""
    arrays: Dict[str, np.ndarray]
    counters: Dict[str, int] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def network(self, prefix: str) -> Dict[str, np.ndarray]:
        """'<prefix>/' で始まる配列だけをプレフィックスを外して返す。"""
        head = prefix + "/"
        return {k[len(head):]: a for k, a in self.arrays.items() if k.startswith(head)}


def save_checkpoint(path: PathLike, checkpoint: Checkpoint) -> Path:
    meta = {"kind": "checkpoint", "counters": checkpoint.counters, "config": checkpoint.config}
    return save_arrays(path, checkpoint.arrays, meta)


def load_checkpoint(path: PathLike) -> Checkpoint:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "checkpoint":
        raise PersistenceError(f"チェックポイントではありません: {path}")
    return Checkpoint(
        arrays=arrays,
        counters={k: int(v) for k, v in meta.get("counters", {}).items()},
        config=meta.get("config", {}),
    )
