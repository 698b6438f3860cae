"""File-format round trips against hand-built byte oracles."""

import json
import struct
from pathlib import Path

import numpy as np
import pytest

from mqnt import formats, synth
from mqnt.errors import ChecksumError, FileFormatError, SchemaVersionError
from mqnt.harness import RunResult
from mqnt.model import ModelConfig, TinyDecoder
from mqnt.quantizers import MethodSpec, compose_quantize

GOLD = Path(__file__).parent / "golden" / "formats"


def small_model(seed=0):
    cfg = ModelConfig(vocab_size=64, context_len=32, d_model=16,
                      n_layers=1, n_heads=2, d_ff=32)
    return TinyDecoder(cfg, seed=seed)


def calib_seqs(n=4, seed=1):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 64, 24) for _ in range(n)]


# ------------------------------------------------------------------ crc64

def ref_crc64(data):
    # bit-at-a-time reflected CRC, independent of the table in formats.py
    poly = 0xC96C5795D7870F42
    crc = 0xFFFFFFFFFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
    return crc ^ 0xFFFFFFFFFFFFFFFF


def test_crc64_check_value():
    # published check value for this polynomial/init/xorout combination
    assert formats.crc64(b"123456789") == 0x995DC9BBDF1939FA


def test_crc64_empty():
    assert formats.crc64(b"") == 0


def test_crc64_matches_bitwise_reference():
    rng = np.random.default_rng(7)
    for n in (1, 2, 17, 63, 256):
        blob = rng.integers(0, 256, n, dtype=np.uint8).tobytes()
        assert formats.crc64(blob) == ref_crc64(blob)


def test_crc64_streaming():
    whole = formats.crc64(b"123456789")
    part = formats.crc64(b"6789", value=formats.crc64(b"12345"))
    assert part == whole


# ------------------------------------------------------------ model files

def test_model_fp_round_trip_bit_exact():
    m = small_model()
    blob = formats.encode_model(m)
    m2 = formats.decode_model(blob)
    assert m2.config == m.config
    for name in m.params:
        # params are kept f32-representable, so f32 storage is lossless
        assert np.array_equal(m2.params[name], m.params[name]), name
    probe = np.arange(12) % 64
    assert np.array_equal(m2.forward(probe), m.forward(probe))


def test_model_encode_is_canonical():
    m = small_model()
    assert formats.encode_model(m) == formats.encode_model(m)
    # and stable across a round trip
    m2 = formats.decode_model(formats.encode_model(m))
    assert formats.encode_model(m2) == formats.encode_model(m)


@pytest.mark.parametrize("method,w_bits,a_bits", [
    ("rtn", 3, 16),        # plain grouped codes
    ("spqr", 3, 16),       # outlier triples
    ("smoothquant", 4, 8), # input_scales + act_bits
    ("rtn", 16, 8),        # f64 values row (no codes)
])
def test_model_quantized_round_trip(method, w_bits, a_bits):
    m = small_model()
    spec = MethodSpec.from_dict({"method": method, "w_bits": w_bits,
                                 "a_bits": a_bits, "group_size": 8})
    compose_quantize(m, calib_seqs(), spec)
    m2 = formats.decode_model(formats.encode_model(m))

    orig = {r.param_key(): q for r, q in m.quantized_layers().items()}
    back = {r.param_key(): q for r, q in m2.quantized_layers().items()}
    assert sorted(orig) == sorted(back)
    for key, q in orig.items():
        p = back[key]
        assert (p.rows, p.cols, p.bits, p.group_size, p.scheme, p.act_bits) == \
            (q.rows, q.cols, q.bits, q.group_size, q.scheme, q.act_bits)
        assert p.codes == q.codes
        if q.bits != 16:
            assert np.array_equal(p.scales, q.scales)
            assert np.array_equal(p.zero_points, q.zero_points)
        else:
            assert np.array_equal(p.values, q.values)
        assert p.outliers == q.outliers
        if q.input_scales is None:
            assert p.input_scales is None
        else:
            assert np.array_equal(p.input_scales, q.input_scales)
        assert np.array_equal(p.dequantize(), q.dequantize())

    probe = np.arange(20) % 64
    assert np.array_equal(m2.forward(probe), m.forward(probe))


def test_model_header_sorted_and_aligned():
    blob = formats.encode_model(small_model())
    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12:12 + hlen])
    names = [e["name"] for e in header["tensors"]]
    assert names == sorted(names)
    for e in header["tensors"]:
        assert e["offset"] % 64 == 0


def _rewrite_header(blob, mutate):
    """Re-emit a model blob with a mutated header; payload untouched."""
    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12:12 + hlen])
    mutate(header)
    htext = json.dumps(header, sort_keys=True,
                       separators=(",", ":"), ensure_ascii=False).encode()
    prefix = blob[:8] + struct.pack("<I", len(htext)) + htext
    payload_start = 12 + hlen + (-(12 + hlen)) % 64
    return prefix + b"\x00" * ((-len(prefix)) % 64) + blob[payload_start:]


def test_model_checksum_detects_payload_flip():
    blob = bytearray(formats.encode_model(small_model()))
    blob[-1] ^= 0x01
    with pytest.raises(ChecksumError):
        formats.decode_model(bytes(blob))
    # opting out skips verification entirely
    formats.decode_model(bytes(blob), verify_checksum=False)


def test_model_bad_magic():
    blob = b"XXXX0001" + formats.encode_model(small_model())[8:]
    with pytest.raises(FileFormatError, match="magic"):
        formats.decode_model(blob)


def test_model_truncation():
    blob = formats.encode_model(small_model())
    with pytest.raises(FileFormatError):
        formats.decode_model(blob[:10])
    with pytest.raises(FileFormatError):
        formats.decode_model(blob[:40])


def test_model_future_version_rejected():
    blob = _rewrite_header(formats.encode_model(small_model()),
                           lambda h: h.update(version=2))
    with pytest.raises(SchemaVersionError):
        formats.decode_model(blob)


def test_model_region_bounds_checked():
    def push_out(h):
        h["tensors"][-1]["offset"] = 1 << 40
    blob = _rewrite_header(formats.encode_model(small_model()), push_out)
    with pytest.raises(FileFormatError, match="bounds"):
        formats.decode_model(blob)


def test_model_region_overlap_checked():
    def overlap(h):
        h["tensors"][1]["offset"] = h["tensors"][0]["offset"]
    blob = _rewrite_header(formats.encode_model(small_model()), overlap)
    with pytest.raises(FileFormatError, match="overlap"):
        formats.decode_model(blob)


def test_model_misalignment_checked():
    def shift(h):
        h["tensors"][0]["offset"] += 4
    blob = _rewrite_header(formats.encode_model(small_model()), shift)
    with pytest.raises(FileFormatError, match="misaligned"):
        formats.decode_model(blob)


def test_model_save_load_file(tmp_path):
    m = small_model()
    path = tmp_path / "m.mqnt"
    formats.save_model(m, path)
    m2 = formats.load_model(path)
    probe = np.arange(8)
    assert np.array_equal(m2.forward(probe), m.forward(probe))


# ----------------------------------------------------------- corpus files

MINI_TOKENS = [72, 105, 33, 10]  # "Hi!\n"
MINI_RECORDS = [(0, 2), (2, 2)]
MINI_META = {"dataset_id": "mini"}


def test_corpus_golden_bytes():
    blob = formats.encode_corpus(MINI_TOKENS, 256, MINI_RECORDS, MINI_META)
    assert blob == (GOLD / "mini_corpus.mqtk").read_bytes()


def test_corpus_docs_hexdump_matches_fixture():
    # the byte-level docs embed a dump of the same fixture; keep them honest
    text = (Path(__file__).parents[1] / "docs" / "formats.md").read_text()
    chunks = []
    for line in text.splitlines():
        if len(line) >= 10 and line[8:10] == ": " and line[:8].isalnum():
            chunks.append(bytes.fromhex(line[10:49].replace(" ", "")))
    assert b"".join(chunks) == (GOLD / "mini_corpus.mqtk").read_bytes()


def test_corpus_round_trip():
    tok, vocab, records, meta = formats.decode_corpus(
        formats.encode_corpus(MINI_TOKENS, 256, MINI_RECORDS, MINI_META))
    assert tok.tolist() == MINI_TOKENS
    assert vocab == 256
    assert records == MINI_RECORDS
    assert meta == MINI_META


def test_corpus_optional_blocks():
    tok, vocab, records, meta = formats.decode_corpus(
        formats.encode_corpus([1, 2, 3], 16))
    assert records is None and meta is None
    assert tok.tolist() == [1, 2, 3]


def test_corpus_random_round_trips():
    rng = np.random.default_rng(3)
    for _ in range(5):
        n = int(rng.integers(1, 200))
        toks = rng.integers(0, 900, n)
        cuts = sorted(rng.integers(0, n, 2).tolist())
        recs = [(cuts[0], cuts[1] - cuts[0])]
        blob = formats.encode_corpus(toks, 900, recs, {"n": n})
        tok, _, records, meta = formats.decode_corpus(blob)
        assert np.array_equal(tok, toks)
        assert records == recs and meta == {"n": n}


def test_corpus_token_out_of_range_names_position():
    with pytest.raises(FileFormatError, match="position 2"):
        formats.encode_corpus([0, 1, 99], 16)


def test_corpus_record_bounds():
    with pytest.raises(FileFormatError, match="record region"):
        formats.encode_corpus([1, 2, 3], 16, records=[(2, 5)])


def test_corpus_bad_magic_and_truncation():
    blob = formats.encode_corpus(MINI_TOKENS, 256, MINI_RECORDS, MINI_META)
    with pytest.raises(FileFormatError, match="magic"):
        formats.decode_corpus(b"NOPE" + blob[4:])
    for cut in (12, 25, len(blob) - 3):
        with pytest.raises(FileFormatError):
            formats.decode_corpus(blob[:cut])


def test_dataset_round_trip(tmp_path):
    h = synth.build_dataset("mnli_pairs", n=12)
    path = tmp_path / "d.mqtk"
    formats.save_dataset(path, h)
    h2 = formats.load_dataset(path)
    assert (h2.dataset_id, h2.split, h2.task, h2.subject_tag) == \
        (h.dataset_id, h.split, h.task, h.subject_tag)
    assert h2.choices == h.choices
    assert len(h2.records) == len(h.records)
    for a, b in zip(h.records, h2.records):
        assert np.array_equal(a.tokens, b.tokens)
        assert a.fields == b.fields
        assert a.gold == b.gold
        assert a.subject == b.subject
    # re-encode of the loaded handle reproduces the file byte for byte
    path2 = tmp_path / "d2.mqtk"
    formats.save_dataset(path2, h2)
    assert path2.read_bytes() == path.read_bytes()


def test_plain_corpus_is_not_a_dataset(tmp_path):
    path = tmp_path / "c.mqtk"
    formats.save_corpus(path, [1, 2, 3], vocab_size=16)
    with pytest.raises(FileFormatError, match="dataset"):
        formats.load_dataset(path)


# ---------------------------------------------------------------- results

def sample_rows():
    return [
        RunResult(method="gptq", w_bits=4, a_bits=16, calib_id="a", test_id="b",
                  shift="cross_dataset", iid=False, shots=3, metric="accuracy",
                  value=0.625, n_items=8, wall_time=1.25, provenance="deadbeef"),
        RunResult(method="fp16", w_bits=16, a_bits=16, calib_id="b", test_id="b",
                  shift="iid", iid=True, shots=0, metric="ppl",
                  value=0.1 + 0.2, n_items=100, wall_time=0.5, provenance="deadbeef"),
        RunResult(method="rtn", w_bits=2, a_bits=16, calib_id="a", test_id="a",
                  shift="iid", iid=True, shots=0, metric="accuracy",
                  value=None, n_items=0, status="failed",
                  reason='SizeError: need "more, data"', wall_time=0.0,
                  provenance="deadbeef"),
    ]


@pytest.mark.parametrize("name", ["r.csv", "r.json"])
def test_results_round_trip(tmp_path, name):
    rows = sample_rows()
    path = tmp_path / name
    formats.write_results(path, rows)
    back = formats.read_results(path)
    assert back == rows  # repr floats survive, commas/quotes in reason survive


def test_results_csv_json_agree(tmp_path):
    rows = sample_rows()
    formats.write_results(tmp_path / "r.csv", rows)
    formats.write_results(tmp_path / "r.json", rows)
    assert formats.read_results(tmp_path / "r.csv") == \
        formats.read_results(tmp_path / "r.json")


def test_results_empty(tmp_path):
    for name in ("e.csv", "e.json"):
        formats.write_results(tmp_path / name, [])
        assert formats.read_results(tmp_path / name) == []


def test_results_version_line(tmp_path):
    path = tmp_path / "r.csv"
    formats.write_results(path, sample_rows())
    assert path.read_text().splitlines()[0] == "# mqnt-results v1"


def test_results_future_version_rejected(tmp_path):
    path = tmp_path / "r.csv"
    formats.write_results(path, sample_rows())
    text = path.read_text().replace("# mqnt-results v1", "# mqnt-results v9", 1)
    path.write_text(text)
    with pytest.raises(SchemaVersionError):
        formats.read_results(path)

    jpath = tmp_path / "r.json"
    formats.write_results(jpath, sample_rows())
    doc = json.loads(jpath.read_text())
    doc["schema_version"] = 9
    jpath.write_text(json.dumps(doc))
    with pytest.raises(SchemaVersionError):
        formats.read_results(jpath)


def test_results_missing_version_line(tmp_path):
    path = tmp_path / "r.csv"
    formats.write_results(path, sample_rows())
    body = "\n".join(path.read_text().splitlines()[1:]) + "\n"
    path.write_text(body)
    with pytest.raises(FileFormatError):
        formats.read_results(path)


def test_write_results_is_canonical(tmp_path):
    rows = sample_rows()
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    formats.write_results(a, rows)
    formats.write_results(b, rows)
    assert a.read_bytes() == b.read_bytes()
