import json
import struct

import numpy as np
import pytest

from mmreg import DisplacementField, Landmark, LandmarkSet, LossSpec, OptimConfig, Volume
from mmreg.errors import (FormatError, MmregError, NonFiniteDataError, ShapeError,
                          TruncatedDataError, UnsupportedDatatypeError, UnsupportedFormatError)
from mmreg.io import (config_document, dumps_report, parse_config, parse_landmarks, read_config,
                      read_field, read_field_spacing, read_landmarks, read_volume, write_field,
                      write_landmarks, write_report, write_volume)


@pytest.fixture
def vol(rng):
    return Volume(rng.random((1, 5, 6, 7)).astype(np.float32), spacing=(0.5, 1.0, 2.0))


def patch(path, offset, fmt, *values):
    raw = bytearray(path.read_bytes())
    struct.pack_into(fmt, raw, offset, *values)
    path.write_bytes(bytes(raw))


def test_volume_round_trip_bitwise(tmp_path, vol, rng):
    write_volume(tmp_path / "v.nii", vol)
    assert read_volume(tmp_path / "v.nii") == vol
    three = Volume(rng.random((3, 4, 4, 5)).astype(np.float32))
    write_volume(tmp_path / "c.nii", three)
    assert read_volume(tmp_path / "c.nii") == three


def test_header_layout(tmp_path, vol):
    write_volume(tmp_path / "v.nii", vol)
    raw = (tmp_path / "v.nii").read_bytes()
    assert len(raw) == 352 + 4 * vol.data.size
    assert struct.unpack_from("<i", raw, 0)[0] == 348
    assert struct.unpack_from("<8h", raw, 40)[:4] == (3, 7, 6, 5)
    assert struct.unpack_from("<hh", raw, 70) == (16, 32)
    assert struct.unpack_from("<3f", raw, 80) == (0.5, 1.0, 2.0)
    assert struct.unpack_from("<f", raw, 108)[0] == 352.0
    assert raw[344:348] == b"n+1\x00"
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4", offset=352), vol.data.ravel())


def test_field_round_trip(tmp_path, rng):
    for u in (DisplacementField(np.zeros((3, 2, 3, 4), np.float32)),
              DisplacementField(rng.normal(size=(3, 4, 4, 4)).astype(np.float32))):
        write_field(tmp_path / "u.nii", u, (2.0, 2.0, 2.0))
        assert read_field(tmp_path / "u.nii") == u
        assert read_field_spacing(tmp_path / "u.nii") == (2.0, 2.0, 2.0)


def test_read_field_rejects_two_components(tmp_path, rng):
    write_volume(tmp_path / "v.nii", Volume(rng.random((2, 3, 3, 3)).astype(np.float32)))
    with pytest.raises(ShapeError):
        read_field(tmp_path / "v.nii")


def test_two_file_magic(tmp_path, vol):
    p = tmp_path / "v.nii"
    write_volume(p, vol)
    patch(p, 344, "4s", b"ni1\x00")
    with pytest.raises(UnsupportedFormatError) as exc:
        read_volume(p)
    assert exc.value.field == "magic"


def test_int16_datatype(tmp_path, vol):
    p = tmp_path / "v.nii"
    write_volume(p, vol)
    patch(p, 70, "<h", 4)
    with pytest.raises(UnsupportedDatatypeError) as exc:
        read_volume(p)
    assert "4" in str(exc.value)


def test_truncated_and_non_finite(tmp_path, vol):
    p = tmp_path / "v.nii"
    write_volume(p, vol)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(TruncatedDataError):
        read_volume(p)
    write_volume(p, vol)
    patch(p, 352, "<f", float("nan"))
    with pytest.raises(NonFiniteDataError):
        read_volume(p)


def test_missing_file(tmp_path):
    with pytest.raises(FormatError):
        read_volume(tmp_path / "nope.nii")


def test_nifti_fuzz_never_crashes(tmp_path, rng):
    good = tmp_path / "g.nii"
    write_volume(good, Volume(rng.random((2, 3, 4, 5)).astype(np.float32)))
    base = good.read_bytes()
    p = tmp_path / "f.nii"
    outcomes = {"ok": 0, "error": 0}
    for i in range(1000):
        raw = bytearray(base)
        kind = i % 3
        if kind == 0:
            raw = raw[:int(rng.integers(0, len(raw)))]
        elif kind == 1:
            for _ in range(int(rng.integers(1, 6))):
                raw[int(rng.integers(0, 352))] = int(rng.integers(0, 256))
        else:
            for _ in range(int(rng.integers(1, 4))):
                pos = int(rng.integers(0, len(raw) - 1))
                raw[pos] = int(rng.integers(0, 256))
            raw = raw[:int(rng.integers(300, len(raw) + 1))]
        p.write_bytes(bytes(raw))
        try:
            read_volume(p)
            outcomes["ok"] += 1
        except MmregError:
            outcomes["error"] += 1
    assert outcomes["ok"] + outcomes["error"] == 1000
    assert outcomes["error"] > 300


def test_landmark_round_trip(tmp_path, rng):
    ls = LandmarkSet(tuple(Landmark(f"p{i}", tuple(rng.normal(size=3) * 10), tuple(rng.normal(size=3)))
                           for i in range(10)))
    write_landmarks(tmp_path / "l.csv", ls)
    assert read_landmarks(tmp_path / "l.csv") == ls


def test_landmark_parse_examples():
    ls = parse_landmarks("id,fx,fy,fz,mx,my,mz\nL1,1,2,3,4,5,6\n")
    assert ls.entries == (Landmark("L1", (1.0, 2.0, 3.0), (4.0, 5.0, 6.0)),)


@pytest.mark.parametrize("text,line,field", [
    ("x,y\n", 1, "header"),
    ("id,fx,fy,fz,mx,my,mz\nL1,1,2,3,4,5\n", 2, "columns"),
    ("id,fx,fy,fz,mx,my,mz\nL1,1,2,3,4,5,6\nL1,1,2,3,4,5,6\n", 3, "id"),
    ("id,fx,fy,fz,mx,my,mz\nL1,1,2,abc,4,5,6\n", 2, "fz"),
    ("id,fx,fy,fz,mx,my,mz\nL1,1,2,3,4,nan,6\n", 2, "my"),
])
def test_landmark_errors(text, line, field):
    with pytest.raises(FormatError) as exc:
        parse_landmarks(text)
    assert exc.value.line == line and exc.value.field == field
    if field == "id":
        assert "L1" in str(exc.value)


def test_landmark_csv_fuzz(rng):
    base = "id,fx,fy,fz,mx,my,mz\nL1,1,2,3,4,5,6\nL2,0.5,1e1,-3,4,5,6\n"
    alphabet = list(',"\n\r\x00abc-.e9 ')
    for _ in range(1000):
        chars = list(base)
        for _ in range(int(rng.integers(1, 5))):
            op = rng.integers(3)
            pos = int(rng.integers(0, len(chars) + 1))
            if op == 0 and pos < len(chars):
                del chars[pos]
            elif op == 1:
                chars.insert(pos, str(rng.choice(alphabet)))
            else:
                chars = chars[:pos]
        try:
            parse_landmarks("".join(chars))
        except MmregError:
            pass


def test_config_defaults_and_weights(tmp_path):
    spec, cfg = parse_config({})
    assert spec == LossSpec() and cfg == OptimConfig()
    spec, _ = parse_config({"metrics": [{"name": "mse", "weight": 0.5}, {"name": "ncc", "weight": 0.5}]})
    assert spec.metrics == (("mse", 0.5), ("ncc", 0.5))
    spec, _ = parse_config({"metrics": [{"name": "MSE"}, {"name": "ncc"}]})
    assert spec.metrics == (("mse", 0.5), ("ncc", 0.5))
    doc = config_document(LossSpec(lam=0.2), OptimConfig(iterations=7))
    assert parse_config(json.loads(json.dumps(doc))) == (LossSpec(lam=0.2), OptimConfig(iterations=7))


@pytest.mark.parametrize("doc", [
    {"metrics": [{"name": "mse", "weight": -0.1}]},
    {"metrics": []},
    {"metrics": [{"name": "ssd"}]},
    {"metrics": [{"name": "mse", "weight": 1.0}, {"name": "ncc"}]},
    {"lambda": "1"},
    {"iterations": 2.5},
    {"ncc_window": 4},
    {"learning_rate": True},
    {"bogus": 1},
    [1, 2],
])
def test_config_errors(doc):
    with pytest.raises(FormatError):
        parse_config(doc)


def test_read_config_malformed_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"lambda": 1,\n}')
    with pytest.raises(FormatError) as exc:
        read_config(p)
    assert exc.value.line == 2


def test_report_json_deterministic(tmp_path):
    doc = {"a": np.float64(1.5), "b": (1, 2), "c": np.arange(3)}
    assert dumps_report(doc) == dumps_report(doc)
    write_report(tmp_path / "r.json", doc)
    assert json.loads((tmp_path / "r.json").read_text()) == {"a": 1.5, "b": [1, 2], "c": [0, 1, 2]}
    with pytest.raises(ValueError):
        dumps_report({"x": float("nan")})
