"""Binary checkpoint format.

::

    magic     8 bytes   b"SKDCKPT1"
    count     u32 LE    number of records
    record    u32 LE name length | UTF-8 name | u8 dtype tag | u8 rank |
              rank x u64 LE dims | raw little-endian values

dtype tags: 0 = float32, 1 = float64.  Architecture settings are stored as
float64 records under ``config.*`` so a file is self-describing.
"""

import copy
import struct

import numpy as np

from .errors import FormatError, IoError
from .model import Classifier, EncoderConfig, MlpHeadConfig, NetworkSet

MAGIC = b"SKDCKPT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def write_records(records, path):
    chunks = [MAGIC, struct.pack("<I", len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            arr = arr.astype(np.float64)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(chunks))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path!r}: {exc}") from exc


def read_records(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path!r}: {exc}") from exc

    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint: need {n} bytes for {what} at byte offset {pos}, file has {len(buf)}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    magic = take(8, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0 (expected {MAGIC!r})")
    (count,) = struct.unpack("<I", take(4, "record count"))
    records = {}
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"record name at byte offset {start + 4} is not UTF-8") from exc
        tag, rank = struct.unpack("<BB", take(2, f"dtype/rank of {name!r}"))
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for {name!r} at byte offset {pos - 2}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"dims of {name!r}"))
        dtype = _DTYPES[tag]
        size = int(np.prod(dims)) if rank else 1
        raw = take(size * dtype.itemsize, f"values of {name!r}")
        records[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last record at byte offset {pos}")
    return records


def _encoder_records(cfg):
    return {
        "config.encoder.conv_blocks": np.array(cfg.conv_blocks, dtype=np.float64).reshape(-1, 2),
        "config.encoder.in_channels": np.array([cfg.in_channels], dtype=np.float64),
        "config.encoder.input_size": np.array([cfg.input_size], dtype=np.float64),
    }


def _encoder_config(records):
    try:
        blocks = tuple((int(c), int(s)) for c, s in records["config.encoder.conv_blocks"])
        return EncoderConfig(
            conv_blocks=blocks,
            in_channels=int(records["config.encoder.in_channels"][0]),
            input_size=int(records["config.encoder.input_size"][0]),
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint lacks config record {exc.args[0]!r}") from None


def _check_encoder(found, expected):
    if expected is None:
        return
    if found.conv_blocks != expected.conv_blocks:
        for i, (a, b) in enumerate(zip(found.conv_blocks, expected.conv_blocks)):
            if a != b:
                raise FormatError(f"encoder block {i}: checkpoint has (channels, stride) {a}, expected {b}")
        raise FormatError(f"encoder depth: checkpoint has {len(found.conv_blocks)} blocks, expected {len(expected.conv_blocks)}")
    if found.feature_dim != expected.feature_dim:
        raise FormatError(f"feature_dim: checkpoint {found.feature_dim}, expected {expected.feature_dim}")
    if found.in_channels != expected.in_channels:
        raise FormatError(f"in_channels: checkpoint {found.in_channels}, expected {expected.in_channels}")
    if found.input_size != expected.input_size:
        raise FormatError(f"input_size: checkpoint {found.input_size}, expected {expected.input_size}")


def _fill(records, params, buffers):
    for p in params:
        if p.name not in records:
            raise FormatError(f"checkpoint has no record for parameter {p.name!r}")
        arr = records[p.name]
        if arr.shape != p.shape:
            raise FormatError(f"{p.name}: checkpoint dims {arr.shape}, model expects {p.shape}")
        p.data = arr.copy()
        p.momentum_buffer = np.zeros_like(p.data)
    for name, buf in buffers.items():
        if name not in records:
            raise FormatError(f"checkpoint has no record for buffer {name!r}")
        arr = records[name]
        if arr.shape != buf.shape:
            raise FormatError(f"{name}: checkpoint dims {arr.shape}, model expects {buf.shape}")
        buf[...] = arr


def save_checkpoint(net, path):
    records = _encoder_records(net.encoder_cfg)
    records["config.head"] = np.array([net.head_cfg.hidden_dim, net.head_cfg.output_dim], dtype=np.float64)
    records["config.num_logits"] = np.array([net.num_logits], dtype=np.float64)
    records["config.sigma"] = np.array([net.sigma], dtype=np.float64)
    for p in net.online_parameters() + net.target_parameters():
        records[p.name] = p.data
    records.update(net.named_buffers())
    write_records(records, path)


def load_checkpoint(path, expected_encoder=None):
    records = read_records(path)
    enc = _encoder_config(records)
    _check_encoder(enc, expected_encoder)
    try:
        hidden, out = (int(v) for v in records["config.head"])
        k = int(records["config.num_logits"][0])
        sigma = float(records["config.sigma"][0])
    except KeyError as exc:
        raise FormatError(f"checkpoint lacks config record {exc.args[0]!r}") from None
    net = NetworkSet(enc, MlpHeadConfig(hidden, out), k, sigma, seed=0)
    dtype = records[net.encoder.parameters()[0].name].dtype if net.encoder.parameters()[0].name in records else np.float32
    net.cast(dtype)
    _fill(records, net.online_parameters() + net.target_parameters(), net.named_buffers())
    return net


def save_classifier(clf, path):
    records = _encoder_records(clf.encoder.cfg)
    records["config.num_classes"] = np.array([clf.num_classes], dtype=np.float64)
    for p in clf.parameters():
        records[p.name] = p.data
    records.update(clf.encoder.buffers())
    write_records(records, path)


def load_classifier(path, class_names=None):
    records = read_records(path)
    enc_cfg = _encoder_config(records)
    try:
        n_classes = int(records["config.num_classes"][0])
    except KeyError:
        raise FormatError("not a classifier checkpoint: missing 'config.num_classes'") from None
    clf = build_classifier(enc_cfg, n_classes, class_names=class_names, seed=0)
    first = clf.encoder.parameters()[0].name
    if first in records:
        dtype = records[first].dtype
        for p in clf.parameters():
            p.data = p.data.astype(dtype)
    _fill(records, clf.parameters(), clf.encoder.buffers())
    return clf


def build_classifier(enc_cfg, num_classes, encoder=None, class_names=None, seed=0):
    """Linear classifier on a copy of ``encoder`` (fresh weights if None)."""
    if encoder is None:
        net = NetworkSet(enc_cfg, MlpHeadConfig(8, 8), 2, 1.0, seed)
        encoder = net.encoder
    else:
        encoder = copy.deepcopy(encoder)
    prefix = encoder.parameters()[0].name.split(".block")[0]
    encoder.rename(prefix, "classifier.encoder")
    return Classifier(encoder, num_classes, class_names=class_names, rng=np.random.default_rng(seed))
