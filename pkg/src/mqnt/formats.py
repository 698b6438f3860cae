"""Bit-exact file formats: model snapshots, token corpora, results.

Three custom little-endian containers (documented byte-by-byte in
docs/formats.md):

* ``MQNT0001`` model files: canonical JSON header + 64-byte-aligned
  tensor payload.  FP tensors are stored as f32, quantized tensors stay
  packed (codes, scales, zero points, outliers); files carry a CRC-64
  of the payload, written always and verified by default.
* ``MQTK0001`` corpus files: u32 token stream with an optional record
  index and JSON metadata block, the carrier for bundled datasets.
* results: CSV with a schema-version first line, plus a JSON mirror.

All writers are canonical (fixed field order, sorted keys, no
timestamps) and atomic (temp file + rename), so saving identical
in-memory objects twice yields identical bytes.
"""

import json
import os
import struct

import numpy as np

from .calibration import DatasetHandle, Record
from .errors import ChecksumError, FileFormatError, SchemaVersionError
from .grids import QuantizedTensor
from .model import LayerRef, ModelConfig, TinyDecoder

MODEL_MAGIC = b"MQNT0001"
CORPUS_MAGIC = b"MQTK0001"
MODEL_VERSION = 1
RESULTS_VERSION = 1
_ALIGN = 64

RESULT_COLUMNS = (
    "method", "w_bits", "a_bits", "calib_id", "test_id", "shift", "iid",
    "shots", "metric", "value", "n_items", "status", "reason", "wall_time",
    "provenance",
)

# ------------------------------------------------------------------ crc64

# CRC-64/XZ: reflected poly, init and xorout all-ones
_CRC_POLY = 0xC96C5795D7870F42
_CRC_TABLE = []
for _b in range(256):
    _c = _b
    for _ in range(8):
        _c = (_c >> 1) ^ _CRC_POLY if _c & 1 else _c >> 1
    _CRC_TABLE.append(_c)


def crc64(data, value=0):
    """CRC-64/XZ of ``data``; pass a previous value to continue a stream."""
    crc = value ^ 0xFFFFFFFFFFFFFFFF
    for byte in bytes(data):
        crc = _CRC_TABLE[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def _atomic_write(path, blob):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _pad(n):
    return (-n) % _ALIGN


# ------------------------------------------------------------ model files

_SCHEMES = ("asymmetric", "symmetric")


def _encode_qpack(q):
    head = struct.pack(
        "<IIIIBBBBI",
        q.rows, q.cols, q.n_groups, q.outlier_count,
        q.bits, _SCHEMES.index(q.scheme), q.act_bits,
        0 if q.input_scales is None else 1,
        q.group_size,
    )
    parts = [head]
    if q.bits == 16:
        parts.append(np.ascontiguousarray(q.values, dtype="<f8").tobytes())
    else:
        parts.append(np.ascontiguousarray(q.scales, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(q.zero_points, dtype="<i4").tobytes())
        parts.append(struct.pack("<Q", len(q.codes)))
        parts.append(q.codes)
    for r, c, v in q.outliers:
        parts.append(struct.pack("<IId", r, c, v))
    if q.input_scales is not None:
        parts.append(np.ascontiguousarray(q.input_scales, dtype="<f8").tobytes())
    return b"".join(parts)


def _decode_qpack(blob, where):
    try:
        rows, cols, n_groups, n_out, bits, scheme_ix, act_bits, has_is, group_size = (
            struct.unpack_from("<IIIIBBBBI", blob, 0)
        )
        off = struct.calcsize("<IIIIBBBBI")
        if bits == 16:
            values = np.frombuffer(blob, "<f8", rows * cols, off).reshape(rows, cols)
            off += rows * cols * 8
            scales = zps = None
            codes = b""
        else:
            values = None
            scales = np.frombuffer(blob, "<f8", rows * n_groups, off).reshape(rows, n_groups)
            off += rows * n_groups * 8
            zps = np.frombuffer(blob, "<i4", rows * n_groups, off).astype(np.int64).reshape(rows, n_groups)
            off += rows * n_groups * 4
            (codes_len,) = struct.unpack_from("<Q", blob, off)
            off += 8
            codes = bytes(blob[off : off + codes_len])
            if len(codes) != codes_len:
                raise FileFormatError(f"truncated codes in {where}")
            off += codes_len
        outliers = []
        for _ in range(n_out):
            r, c, v = struct.unpack_from("<IId", blob, off)
            outliers.append((int(r), int(c), float(v)))
            off += 16
        input_scales = None
        if has_is:
            input_scales = np.frombuffer(blob, "<f8", cols, off).copy()
            off += cols * 8
    except (struct.error, ValueError) as e:
        raise FileFormatError(f"truncated quantized tensor in {where}: {e}") from e
    return QuantizedTensor(
        rows=int(rows), cols=int(cols), bits=int(bits), group_size=int(group_size),
        scheme=_SCHEMES[scheme_ix], codes=codes,
        scales=None if scales is None else scales.copy(),
        zero_points=zps, outliers=outliers,
        input_scales=input_scales, act_bits=int(act_bits),
        values=None if values is None else values.copy(),
    )


def _ref_for(key, n_layers):
    if key == "lm_head":
        return LayerRef(n_layers, "lm_head")
    _, b, name = key.split(".")
    return LayerRef(int(b), name)


def encode_model(model):
    """Serialize a TinyDecoder (FP or partially quantized) to bytes."""
    quantized = {ref.param_key(): q for ref, q in model.quantized_layers().items()}
    entries = []
    regions = []
    offset = 0
    for name in sorted(model.params):
        if name in quantized:
            q = quantized[name]
            blob = _encode_qpack(q)
            entry = {
                "name": name, "dtype": "qpack",
                "shape": [q.rows, q.cols],
                "quant": {"w_bits": q.bits, "a_bits": q.act_bits,
                          "group_size": q.group_size, "scheme": q.scheme},
                "outliers": q.outlier_count,
            }
        else:
            arr = model.params[name]
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entry = {"name": name, "dtype": "f32", "shape": list(arr.shape),
                     "quant": None, "outliers": 0}
        entry["offset"] = offset
        entry["length"] = len(blob)
        entries.append(entry)
        regions.append(blob)
        regions.append(b"\x00" * _pad(len(blob)))
        offset += len(blob) + _pad(len(blob))
    payload = b"".join(regions)
    header = {
        "version": MODEL_VERSION,
        "config": model.config.to_dict(),
        "tensors": entries,
        "crc64": crc64(payload),
    }
    htext = _canonical_json(header).encode("utf-8")
    prefix = MODEL_MAGIC + struct.pack("<I", len(htext)) + htext
    return prefix + b"\x00" * _pad(len(prefix)) + payload


def save_model(model, path):
    _atomic_write(path, encode_model(model))


def decode_model(blob, verify_checksum=True):
    if blob[:8] != MODEL_MAGIC:
        raise FileFormatError("bad magic at offset 0")
    if len(blob) < 12:
        raise FileFormatError("truncated header length at offset 8")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    if 12 + hlen > len(blob):
        raise FileFormatError("truncated header at offset 12")
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    if header.get("version") != MODEL_VERSION:
        raise SchemaVersionError(f"model file version {header.get('version')}, expected {MODEL_VERSION}")
    payload_start = 12 + hlen + _pad(12 + hlen)
    payload = blob[payload_start:]
    if verify_checksum and crc64(payload) != header["crc64"]:
        raise ChecksumError(f"payload checksum mismatch from offset {payload_start}")

    spans = []
    for e in header["tensors"]:
        lo, hi = e["offset"], e["offset"] + e["length"]
        if hi > len(payload):
            raise FileFormatError(f"tensor {e['name']} exceeds file bounds at offset {payload_start + lo}")
        if lo % _ALIGN:
            raise FileFormatError(f"tensor {e['name']} misaligned at offset {payload_start + lo}")
        spans.append((lo, hi, e["name"]))
    for (lo1, hi1, n1), (lo2, hi2, n2) in zip(sorted(spans), sorted(spans)[1:]):
        if hi1 > lo2:
            raise FileFormatError(f"regions {n1} and {n2} overlap at offset {payload_start + lo2}")

    cfg = ModelConfig(**header["config"])
    params = {}
    qtensors = {}
    for e in header["tensors"]:
        region = payload[e["offset"] : e["offset"] + e["length"]]
        if e["dtype"] == "f32":
            arr = np.frombuffer(region, "<f4").astype(np.float64).reshape(e["shape"])
            params[e["name"]] = arr
        elif e["dtype"] == "qpack":
            qtensors[e["name"]] = _decode_qpack(region, e["name"])
        else:
            raise FileFormatError(f"unknown dtype {e['dtype']!r} for tensor {e['name']}")
    # quantized layers re-enter through replace_weights so the runtime
    # state (dequant cache) matches a freshly quantized model
    for name, q in qtensors.items():
        params[name] = q.dequantize()
    model = TinyDecoder(cfg, params=params)
    for name, q in qtensors.items():
        model.replace_weights(_ref_for(name, cfg.n_layers), q)
    return model


def load_model(path, verify_checksum=True):
    with open(path, "rb") as fh:
        return decode_model(fh.read(), verify_checksum)


# ----------------------------------------------------------- corpus files

_FLAG_INDEX = 1
_FLAG_META = 2


def encode_corpus(tokens, vocab_size, records=None, metadata=None):
    """Serialize a token stream; ``records`` is a list of (offset, length)
    pairs in token units."""
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.ndim != 1:
        raise FileFormatError("token stream must be 1-d")
    bad = np.nonzero((tok < 0) | (tok >= vocab_size))[0]
    if bad.size:
        raise FileFormatError(f"token id out of range at position {int(bad[0])}")
    flags = (_FLAG_INDEX if records is not None else 0) | (_FLAG_META if metadata is not None else 0)
    parts = [
        CORPUS_MAGIC,
        struct.pack("<IQB3x", vocab_size, tok.size, flags),
        tok.astype("<u4").tobytes(),
    ]
    if records is not None:
        parts.append(struct.pack("<I", len(records)))
        for off, length in records:
            if off < 0 or off + length > tok.size:
                raise FileFormatError(f"record region ({off},{length}) exceeds token count {tok.size}")
            parts.append(struct.pack("<QQ", off, length))
    if metadata is not None:
        mblob = _canonical_json(metadata).encode("utf-8")
        parts.append(struct.pack("<I", len(mblob)))
        parts.append(mblob)
    return b"".join(parts)


def save_corpus(path, tokens, vocab_size, records=None, metadata=None):
    _atomic_write(path, encode_corpus(tokens, vocab_size, records, metadata))


def decode_corpus(blob):
    if blob[:8] != CORPUS_MAGIC:
        raise FileFormatError("bad magic at offset 0")
    try:
        vocab_size, n_tokens, flags = struct.unpack_from("<IQB3x", blob, 8)
        off = 8 + struct.calcsize("<IQB3x")
        if off + 4 * n_tokens > len(blob):
            raise FileFormatError(f"truncated token stream at offset {off}")
        tok = np.frombuffer(blob, "<u4", n_tokens, off).astype(np.int64)
        off += 4 * n_tokens
        records = None
        if flags & _FLAG_INDEX:
            (n_rec,) = struct.unpack_from("<I", blob, off)
            off += 4
            records = []
            for _ in range(n_rec):
                roff, rlen = struct.unpack_from("<QQ", blob, off)
                if roff + rlen > n_tokens:
                    raise FileFormatError(f"record region ({roff},{rlen}) exceeds token count {n_tokens}")
                records.append((int(roff), int(rlen)))
                off += 16
        metadata = None
        if flags & _FLAG_META:
            (mlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            raw = blob[off : off + mlen]
            if len(raw) != mlen:
                raise FileFormatError(f"truncated metadata at offset {off}")
            metadata = json.loads(raw.decode("utf-8"))
    except struct.error as e:
        raise FileFormatError(f"truncated corpus file: {e}") from e
    bad = np.nonzero(tok >= vocab_size)[0]
    if bad.size:
        raise FileFormatError(f"token id out of range at position {int(bad[0])}")
    return tok, vocab_size, records, metadata


def load_corpus(path):
    with open(path, "rb") as fh:
        return decode_corpus(fh.read())


def save_dataset(path, handle):
    """Write a DatasetHandle as a CorpusFile with index + metadata."""
    tokens = []
    index = []
    off = 0
    for r in handle.records:
        index.append((off, r.tokens.size))
        tokens.append(r.tokens)
        off += r.tokens.size
    metadata = {
        "dataset_id": handle.dataset_id,
        "split": handle.split,
        "task": handle.task,
        "choices": list(handle.choices),
        "subject_tag": handle.subject_tag,
        "golds": [r.gold for r in handle.records],
        "subjects": [r.subject for r in handle.records],
        "fields": [r.fields for r in handle.records],
    }
    stream = np.concatenate(tokens) if tokens else np.zeros(0, dtype=np.int64)
    save_corpus(path, stream, vocab_size=256, records=index, metadata=metadata)


def load_dataset(path):
    """Read a CorpusFile back into a DatasetHandle."""
    tok, _, records, metadata = load_corpus(path)
    if records is None or metadata is None:
        raise FileFormatError(f"{path} has no record index/metadata; not a dataset file")
    recs = []
    for i, (off, length) in enumerate(records):
        recs.append(Record(
            tokens=tok[off : off + length],
            fields=metadata["fields"][i],
            gold=metadata["golds"][i],
            subject=metadata["subjects"][i],
        ))
    return DatasetHandle(
        dataset_id=metadata["dataset_id"], split=metadata["split"],
        records=recs, subject_tag=metadata.get("subject_tag"),
        task=metadata["task"], choices=list(metadata["choices"]),
    )


# ---------------------------------------------------------------- results

def _results_header_line():
    return f"# mqnt-results v{RESULTS_VERSION}"


def _row_text(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_results(path, results):
    """Write RunResult rows; CSV for .csv paths, JSON mirror otherwise."""
    rows = [r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in results]
    if str(path).endswith(".json"):
        doc = {"schema_version": RESULTS_VERSION, "results": rows}
        _atomic_write(path, (_canonical_json(doc) + "\n").encode("utf-8"))
        return
    lines = [_results_header_line(), ",".join(RESULT_COLUMNS)]
    for row in rows:
        cells = []
        for col in RESULT_COLUMNS:
            text = _row_text(row.get(col))
            if any(ch in text for ch in ",\"\n"):
                text = '"' + text.replace('"', '""') + '"'
            cells.append(text)
        lines.append(",".join(cells))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def _check_results_version(version):
    if version != RESULTS_VERSION:
        raise SchemaVersionError(
            f"results schema v{version} not supported (writer is v{RESULTS_VERSION})"
        )


def read_results(path):
    """Round-trip reader; returns RunResult rows."""
    import csv
    import io as _io

    from .harness import RunResult

    with open(path, "rb") as fh:
        raw = fh.read().decode("utf-8")
    if str(path).endswith(".json"):
        doc = json.loads(raw)
        _check_results_version(doc.get("schema_version"))
        return [RunResult.from_dict(r) for r in doc["results"]]
    lines = raw.splitlines()
    if not lines or not lines[0].startswith("# mqnt-results v"):
        raise FileFormatError("missing results schema-version line")
    _check_results_version(int(lines[0].rsplit("v", 1)[1]))
    reader = csv.DictReader(_io.StringIO("\n".join(lines[1:])))
    out = []
    for row in reader:
        out.append(RunResult.from_dict({
            "method": row["method"],
            "w_bits": int(row["w_bits"]),
            "a_bits": int(row["a_bits"]),
            "calib_id": row["calib_id"],
            "test_id": row["test_id"],
            "shift": row["shift"],
            "iid": row["iid"] == "true",
            "shots": int(row["shots"]),
            "metric": row["metric"],
            "value": float(row["value"]) if row["value"] else None,
            "n_items": int(row["n_items"]) if row["n_items"] else 0,
            "status": row["status"],
            "reason": row["reason"],
            "wall_time": float(row["wall_time"]) if row["wall_time"] else 0.0,
            "provenance": row["provenance"],
        }))
    return out
