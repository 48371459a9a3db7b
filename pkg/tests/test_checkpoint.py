import numpy as np
import pytest

from dpnet import checkpoint
from dpnet.checkpoint import CheckpointError
from dpnet.model import ModelConfig, build_dpn
from dpnet.optim import AdamState, adam_step
from dpnet.tensor import Rng


def _trained_state(bn=False):
    m = build_dpn(ModelConfig.tiny(channels=(4, 4), downsample_after=(0,), batch_norm=bn), Rng(0))
    st = AdamState()
    x = Rng(1).uniform(0, 1, (4, 1, 28, 28))
    for _ in range(2):
        loss, _, grads, tape = m.loss_and_grads(x, np.array([0, 1, 2, 3]))
        m.update_running_stats(tape)
        adam_step(m.named_parameters(), grads, st)
    return m, st


def test_save_load_round_trip_is_byte_identical(tmp_path):
    m, st = _trained_state(bn=True)
    p1 = checkpoint.save(tmp_path / "a.dpnc", m, st, {"epoch": 3, "best_accuracy": 0.5})
    m2, st2, extra = checkpoint.load(p1)
    p2 = checkpoint.save(tmp_path / "b.dpnc", m2, st2, extra)
    assert p1.read_bytes() == p2.read_bytes()
    assert extra == {"epoch": 3, "best_accuracy": 0.5}
    assert st2.t == st.t
    for k, v in m.named_parameters().items():
        assert np.array_equal(v, m2.named_parameters()[k])
    for k, v in m.buffers().items():
        assert np.array_equal(v, m2.buffers()[k])


def test_layout_header(tmp_path):
    m, _ = _trained_state()
    raw = checkpoint.save(tmp_path / "c.dpnc", m).read_bytes()
    assert raw[:4] == b"DPNC" and raw[4:6] == b"\x01\x00"
    assert raw[6:38] == m.config.digest()


def test_truncation_names_the_entry(tmp_path):
    m, st = _trained_state()
    raw = checkpoint.dumps(m.config, checkpoint.collect(m, st))
    with pytest.raises(CheckpointError, match="payload"):
        checkpoint.loads(raw[:-5])
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint.loads(raw + b"\0")


def test_digest_mismatch_detected(tmp_path):
    m, _ = _trained_state()
    raw = bytearray(checkpoint.dumps(m.config, checkpoint.collect(m)))
    raw[10] ^= 0xFF
    with pytest.raises(CheckpointError, match="digest"):
        checkpoint.loads(bytes(raw))


def test_missing_entry_and_shape_mismatch():
    m, _ = _trained_state()
    entries = checkpoint.collect(m)
    entries.pop("param/fc.bias")
    with pytest.raises(CheckpointError, match="missing"):
        checkpoint.restore(m.config, entries)
    entries = checkpoint.collect(m)
    entries["param/fc.bias"] = np.zeros(3)
    with pytest.raises(CheckpointError, match="shape"):
        checkpoint.restore(m.config, entries)


def test_unsupported_dtype():
    with pytest.raises(CheckpointError):
        checkpoint.encode_entry("x", np.zeros(2, dtype=np.complex128))
