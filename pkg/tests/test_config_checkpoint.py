import json
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from animal2vec import FormatError, StateError
from animal2vec import checkpoint as ckpt
from animal2vec import config as conf
from tiny import tiny_model


def test_defaults_parse_and_roundtrip():
    cfg = conf.load()
    assert conf.parse(conf.dumps(cfg)) == cfg
    assert conf.config_hash(cfg) == conf.config_hash(dict(cfg))


def test_parse_types_comments_and_overrides(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("# desk\nmask.p = 0.065   # start prob\nmask.M=10\n\n"
                    "pretrain.masked_loss_only = off\n", encoding="utf-8")
    cfg = conf.load(path, {"model.layers": "3", "seed": 4})
    assert cfg["mask.p"] == 0.065 and cfg["mask.M"] == 10
    assert cfg["pretrain.masked_loss_only"] is False
    assert cfg["model.layers"] == 3 and cfg["seed"] == 4


@pytest.mark.parametrize("text, match", [
    ("nonsense.key = 1", "unknown key"),
    ("mask.M = ten", "cannot parse"),
    ("just words", "key = value"),
    ("pretrain.masked_loss_only = maybe", "cannot parse"),
])
def test_parse_errors(text, match):
    with pytest.raises(conf.ConfigError, match=match):
        conf.parse(text)


def test_hash_changes_with_any_value():
    cfg = conf.load()
    assert conf.config_hash(cfg) != conf.config_hash({**cfg, "mask.p": 0.16})


def test_layout_parsing():
    assert conf.parse_layout("64x10x5, 8x3x2") == ((64, 10, 5), (8, 3, 2))
    with pytest.raises(conf.ConfigError, match="CHxWIDTHxSTRIDE"):
        conf.parse_layout("64x10")


def test_desk_frontend_rate():
    fc = conf.frontend_config(conf.load())
    assert fc.effective_rate == pytest.approx(200.0)


_arrays = st.dictionaries(
    st.text("abcdefgh.", min_size=1, max_size=8),
    st.one_of(hnp.arrays(st.sampled_from([np.float32, np.float64, np.int64, np.int32, np.uint8,
                                          np.bool_]),
                         hnp.array_shapes(min_dims=0, max_dims=3, max_side=4))),
    max_size=5)


@settings(max_examples=40, deadline=None)
@given(arrays=_arrays)
def test_container_roundtrip_bit_exact(tmp_path_factory, arrays):
    path = tmp_path_factory.mktemp("ck") / "x.a2v"
    ckpt.save_arrays(path, arrays, {"k": [1, "two"]})
    back, meta = ckpt.load_arrays(path)
    assert meta == {"k": [1, "two"]}
    assert list(back) == list(arrays)
    for name, a in arrays.items():
        assert back[name].dtype == a.dtype and back[name].shape == a.shape
        assert back[name].tobytes() == np.asarray(a, order="C").tobytes()


def test_container_layout_is_documented(tmp_path):
    path = tmp_path / "x.a2v"
    ckpt.save_arrays(path, {"w": np.arange(3, dtype=np.float64)}, {"a": 1})
    raw = path.read_bytes()
    assert raw[:8] == b"A2VCKPT\0"
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    assert header["arrays"][0] == {"name": "w", "dtype": "f64", "shape": [3], "offset": 0,
                                   "nbytes": 24}
    assert np.frombuffer(raw[12 + n:], "<f8").tolist() == [0.0, 1.0, 2.0]


def test_big_endian_input_stored_little_endian(tmp_path):
    a = np.arange(4, dtype=">f4")
    ckpt.save_arrays(tmp_path / "x.a2v", {"a": a}, {})
    back, _ = ckpt.load_arrays(tmp_path / "x.a2v")
    np.testing.assert_array_equal(back["a"], a)


def test_version_mismatch_rejected(tmp_path):
    path = tmp_path / "x.a2v"
    ckpt.save_arrays(path, {}, {})
    raw = bytearray(path.read_bytes())
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    header["format_version"] = 99
    body = json.dumps(header).encode()
    path.write_bytes(bytes(raw[:8]) + struct.pack("<I", len(body)) + body)
    with pytest.raises(StateError, match="format 99"):
        ckpt.load_arrays(path)


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x.a2v").write_bytes(b"RIFF....")
    with pytest.raises(FormatError):
        ckpt.load_arrays(tmp_path / "x.a2v")


def test_module_roundtrip_and_shape_error_names_array(tmp_path):
    a = tiny_model(n_classes=2, seed=1)
    ckpt.save_arrays(tmp_path / "m.a2v", ckpt.module_arrays("model", a), {})
    arrays, _ = ckpt.load_arrays(tmp_path / "m.a2v")
    b = tiny_model(n_classes=2, seed=2)
    ckpt.load_module(b, "model", arrays)
    for (k, va), vb in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(va, vb), k
    wrong = tiny_model(n_classes=3)
    with pytest.raises(StateError, match=r"model\.head\.\S+"):
        ckpt.load_module(wrong, "model", arrays)
    arrays.pop("model.head.proj.weight")
    with pytest.raises(StateError, match="lacks model.head.proj.weight"):
        ckpt.load_module(b, "model", arrays)


def test_optimizer_roundtrip(tmp_path):
    model = torch.nn.Linear(3, 2)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-2)
    for _ in range(3):
        opt.zero_grad()
        model(torch.randn(4, 3)).pow(2).sum().backward()
        opt.step()
    arrays, groups = ckpt.optimizer_arrays("optim", opt)
    ckpt.save_arrays(tmp_path / "o.a2v", arrays, {"groups": groups})
    back, meta = ckpt.load_arrays(tmp_path / "o.a2v")
    opt2 = torch.optim.AdamW(model.parameters(), lr=5.0)
    ckpt.load_optimizer(opt2, "optim", back, meta["groups"])
    s1, s2 = opt.state_dict(), opt2.state_dict()
    assert s1["param_groups"] == s2["param_groups"]
    for idx in s1["state"]:
        for key in s1["state"][idx]:
            assert torch.equal(torch.as_tensor(s1["state"][idx][key]),
                               torch.as_tensor(s2["state"][idx][key]))


def test_rng_state_roundtrip(tmp_path):
    torch.manual_seed(123)
    torch.rand(5)
    ckpt.save_arrays(tmp_path / "r.a2v", {"rng": torch.get_rng_state()}, {})
    expected = torch.rand(8)
    back, _ = ckpt.load_arrays(tmp_path / "r.a2v")
    torch.set_rng_state(torch.as_tensor(back["rng"]))
    assert torch.equal(torch.rand(8), expected)


def test_inconsistent_schedule_is_config_error():
    cfg = conf.load(overrides={"finetune.total_steps": 10, "finetune.frozen_steps": 20})
    with pytest.raises(conf.ConfigError, match="frozen_steps"):
        conf.finetune_config(cfg, 0)
