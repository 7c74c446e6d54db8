import numpy as np
import pytest
import yaml

from beliefgeom import io
from beliefgeom.config import (
    PAPER_PROFILE,
    SCHEMA_VERSION,
    ConfigError,
    build_config,
    config_hash,
    default_config,
    dump_config,
    load_config,
    stage_rng,
    stage_seed,
)


# ---- activation dumps

def _dump(n=50, d=8, dtype=np.float32, beliefs=True):
    rng = np.random.default_rng(0)
    meta = {"seq_id": np.repeat(np.arange(n // 5 + 1), 5)[:n], "position": np.arange(n) % 5}
    if beliefs:
        meta["belief/mess3"] = rng.dirichlet(np.ones(3), n)
    return io.ActivationDump(rng.standard_normal((n, d)).astype(dtype), meta, {"layer": 1})


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int32, np.int64, np.uint8])
def test_dump_roundtrips_bit_exactly(tmp_path, dtype):
    d = _dump(dtype=dtype)
    io.write_dump(tmp_path / "a.bgad", d)
    back = io.read_dump(tmp_path / "a.bgad")
    assert back.data.dtype == np.dtype(dtype) and back.data.tobytes() == d.data.tobytes()
    assert back.info == {"layer": 1}
    for k, v in d.meta.items():
        assert back.meta[k].tobytes() == v.tobytes()


def test_header_layout(tmp_path):
    io.write_dump(tmp_path / "a.bgad", io.ActivationDump(np.zeros((3, 2), np.float32)))
    raw = (tmp_path / "a.bgad").read_bytes()
    assert raw[:4] == b"BGAD"
    assert raw[4:6] == (1).to_bytes(2, "little") and raw[6] == 1 and raw[7] == 2
    assert raw[8:16] == (3).to_bytes(8, "little") and raw[16:24] == (2).to_bytes(8, "little")
    assert len(raw) == 24 + 4 + 2 + 24  # "{}" info, 6 float32


def test_empty_dump_is_accepted(tmp_path):
    io.write_dump(tmp_path / "e.bgad", io.ActivationDump(np.zeros((0, 128), np.float32)))
    assert io.read_dump(tmp_path / "e.bgad").n_rows == 0


def test_truncated_payload_reports_byte_counts(tmp_path):
    p = tmp_path / "a.bgad"
    io.write_dump(p, _dump(beliefs=False))
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(io.CorruptionError) as exc:
        io.read_dump(p)
    assert (exc.value.expected, exc.value.actual) == (50 * 8 * 4, 50 * 8 * 4 - 10)


def test_bad_magic_and_version(tmp_path):
    p = tmp_path / "a.bgad"
    io.write_dump(p, _dump(beliefs=False))
    raw = p.read_bytes()
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(io.FormatError):
        io.read_dump(p)
    p.write_bytes(raw[:4] + (9).to_bytes(2, "little") + raw[6:])
    with pytest.raises(io.FormatError):
        io.read_dump(p)


def test_dump_validation():
    with pytest.raises(io.FormatError):
        io.ActivationDump(np.zeros(5))
    with pytest.raises(io.FormatError):
        io.ActivationDump(np.zeros((5, 2)), {"seq_id": np.zeros(4)})
    with pytest.raises(io.FormatError):
        io.write_dump("/nonexistent/x", io.ActivationDump(np.zeros((2, 2), np.complex64)))


def test_missing_beliefs_message():
    d = _dump(beliefs=False)
    assert not d.has_beliefs()
    with pytest.raises(ValueError, match="ground-truth beliefs"):
        d.require_beliefs()
    assert list(_dump().require_beliefs()) == ["mess3"]


def test_container_roundtrip_and_truncation(tmp_path):
    t = {"w": np.arange(12, dtype=np.float64).reshape(3, 4), "k": np.array(3, dtype=np.int64)}
    p = tmp_path / "c.bin"
    io.write_container(p, b"BGSA", t, {"hash": "abc"})
    back, info = io.read_container(p, b"BGSA")
    assert info == {"hash": "abc"} and back["w"].tobytes() == t["w"].tobytes() and back["k"].shape == ()
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(io.CorruptionError):
        io.read_container(p, b"BGSA")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    io.atomic_write_text(tmp_path / "sub" / "x.txt", "hello")
    assert (tmp_path / "sub" / "x.txt").read_text() == "hello"
    assert [f.name for f in (tmp_path / "sub").iterdir()] == ["x.txt"]


# ---- config

def test_defaults_validate_and_hash_is_stable():
    a, b = build_config(), build_config()
    assert config_hash(a) == config_hash(b) and len(config_hash(a)) == 16
    b["seed"] = 1
    assert config_hash(a) != config_hash(b)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="sae.kk"):
        build_config({"sae": {"kk": 3}})


@pytest.mark.parametrize("over", [
    {"lm": {"d_model": 130}},
    {"sae": {"k_grid": [0]}},
    {"aanet": {"Ks": [2, 3]}},
    {"validation": {"i_thresh": 0.9}},
    {"data": {"layers": [3]}},
    {"data": {"source": "web"}},
])
def test_invalid_values_rejected(over):
    with pytest.raises(ConfigError):
        build_config(over)


def test_yaml_roundtrip_and_schema_check(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(default_config()))
    assert load_config(p) == default_config()
    assert load_config(p, seed=7)["seed"] == 7
    raw = yaml.safe_load(p.read_text())
    raw["schema_version"] = SCHEMA_VERSION + 1
    p.write_text(yaml.safe_dump(raw))
    with pytest.raises(ConfigError, match="schema_version"):
        load_config(p)


def test_paper_profile_is_a_valid_override():
    cfg = build_config(PAPER_PROFILE)
    assert cfg["aanet"]["restarts"] == 5 and cfg["lm"]["steps"] == 50_000


def test_named_streams_are_independent_and_reproducible():
    a = stage_rng(0, "train-sae").random(5)
    assert (a == stage_rng(0, "train-sae").random(5)).all()
    assert not (a == stage_rng(0, "cluster").random(5)).any()
    assert not (a == stage_rng(1, "train-sae").random(5)).any()
    assert stage_seed(0, "x") == stage_seed(0, "x") != stage_seed(0, "y")
