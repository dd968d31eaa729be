import numpy as np
import pytest
import torch

from spin.config import ModelConfig
from spin.encoding import (
    EncodedDataset,
    EncodingError,
    export_encoding,
    import_encoding,
    load_checkpoint,
    params_fingerprint,
    save_checkpoint,
)
from spin.model import SpinModel
from spin.schema import CATEGORICAL, INPUT, TARGET, Attribute, Schema

SCHEMA = Schema(tuple(
    [Attribute(f"x{i}", CATEGORICAL, INPUT, 4) for i in range(5)] + [Attribute("y", CATEGORICAL, TARGET, 4)]
))
HEADER = 8 + 2 + 3 * 4 + 1 + 3 * 8


def make_model(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = dict(e=8, h=3, f=2, depth=2, dropout=0.0)
    cfg.update(kw)
    return SpinModel(SCHEMA, ModelConfig(**cfg)).eval()


def rows(n, seed=0):
    return np.random.default_rng(seed).integers(4, size=(n, 6)).astype(float)


def encoded(model, n=20):
    h_d = model.encode_rows(rows(n), np.zeros((n, 6), bool))
    return EncodedDataset.from_model(model, h_d, n), h_d


def test_roundtrip_predictions_identical(tmp_path):
    model = make_model()
    enc, h_d = encoded(model)
    export_encoding(enc, tmp_path / "enc.bin")
    back = import_encoding(tmp_path / "enc.bin", model)
    q = rows(7, seed=1)
    masked = np.zeros((7, 6), bool)
    masked[:, 5] = True
    direct = model.predict_rows(q, masked, h_d)
    loaded = model.predict_rows(q, masked, back)
    for a, b in zip(direct.groups, loaded.groups):
        assert torch.equal(a.out, b.out)


def test_double_roundtrip_exact(tmp_path, double):
    model = make_model()
    enc, h_d = encoded(model)
    export_encoding(enc, tmp_path / "enc.bin", dtype=np.float64)
    back = import_encoding(tmp_path / "enc.bin")
    assert back.h_d.dtype == np.float64
    assert np.array_equal(back.h_d, h_d.numpy())


@pytest.mark.parametrize("n", [5, 500])
def test_file_size_independent_of_n(tmp_path, n):
    model = make_model()
    enc, _ = encoded(model, n)
    size = export_encoding(enc, tmp_path / "enc.bin")
    assert size == HEADER + 3 * 2 * 8 * 4
    assert (tmp_path / "enc.bin").stat().st_size == size


def test_tampered_payload_rejected(tmp_path):
    model = make_model()
    enc, _ = encoded(model)
    path = tmp_path / "enc.bin"
    export_encoding(enc, path)
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(EncodingError, match="checksum"):
        import_encoding(path)


def test_tampered_checksum_rejected(tmp_path):
    model = make_model()
    enc, _ = encoded(model)
    path = tmp_path / "enc.bin"
    export_encoding(enc, path)
    blob = bytearray(path.read_bytes())
    blob[HEADER - 1] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(EncodingError, match="checksum"):
        import_encoding(path)


def test_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"nope")
    with pytest.raises(EncodingError, match="short"):
        import_encoding(path)
    path.write_bytes(b"X" * 100)
    with pytest.raises(EncodingError, match="magic"):
        import_encoding(path)


def test_fingerprint_mismatch_rejected(tmp_path):
    model = make_model()
    enc, _ = encoded(model)
    export_encoding(enc, tmp_path / "enc.bin")
    other = make_model(seed=1)
    with pytest.raises(EncodingError, match="parameters"):
        import_encoding(tmp_path / "enc.bin", other)
    with pytest.raises(EncodingError):
        other.predict_rows(rows(2), np.zeros((2, 6), bool), enc)


def test_schema_mismatch_rejected():
    model = make_model()
    enc, _ = encoded(model)
    schema = Schema(tuple(Attribute(a.name, CATEGORICAL, a.role, 5) for a in SCHEMA.attributes))
    torch.manual_seed(0)
    other = SpinModel(schema, model.cfg)
    with pytest.raises(EncodingError, match="schema"):
        enc.check_compatible(other)


def test_params_fingerprint_tracks_values():
    a, b = make_model(), make_model()
    assert params_fingerprint(a) == params_fingerprint(b)
    with torch.no_grad():
        b.h_d0[0, 0, 0] += 1e-6
    assert params_fingerprint(a) != params_fingerprint(b)


def test_checkpoint_roundtrip(tmp_path):
    model = make_model()
    save_checkpoint(tmp_path / "ck.bin", model, {"note": "x"}, {"extra/step": torch.tensor(3)})
    meta, tensors, fp = load_checkpoint(tmp_path / "ck.bin")
    assert meta == {"note": "x"}
    assert fp == params_fingerprint(model)
    assert tensors["extra/step"].item() == 3
    for name, p in model.state_dict().items():
        assert torch.equal(tensors[f"param/{name}"], p)


def test_checkpoint_corruption_rejected(tmp_path):
    model = make_model()
    path = tmp_path / "ck.bin"
    save_checkpoint(path, model, {})
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0x10
    path.write_bytes(bytes(blob))
    with pytest.raises(EncodingError, match="corrupt"):
        load_checkpoint(path)
