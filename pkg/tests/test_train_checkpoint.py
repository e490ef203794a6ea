import filecmp
import struct

import numpy as np
import pytest

from holodx import checkpoint as ck
from holodx import numerics as nx
from holodx.memory_injection import MemoryBank
from holodx.train import LOG_COLUMNS, AdamW, NumericFailure, Trainer, clip_grad_norm

from conftest import tiny_run_config


def count_instances(root, cls):
    """Objects of ``cls`` reachable from ``root`` through attributes, lists, tuples and dicts."""
    seen, stack, found = set(), [root], 0
    while stack:
        obj = stack.pop()
        if id(obj) in seen or isinstance(obj, (np.ndarray, str, bytes, int, float, type(None))):
            continue
        seen.add(id(obj))
        found += isinstance(obj, cls)
        if isinstance(obj, dict):
            stack.extend(obj.values())
        elif isinstance(obj, (list, tuple, set)):
            stack.extend(obj)
        elif hasattr(obj, "__dict__"):
            stack.extend(vars(obj).values())
    return found


def make_trainer(cohort, bank, **train):
    return Trainer(tiny_run_config(**train), cohort.schema, bank, cohort.train)


# -- optimiser ---------------------------------------------------------------------

def test_first_adamw_step_is_signed_learning_rate():
    w = nx.Tensor(np.array([[2.0, -1.0], [0.5, 3.0]]), requires_grad=True)
    b = nx.Tensor(np.array([1.0, -4.0]), requires_grad=True)
    w.grad, b.grad = np.array([[0.3, -2.0], [1e-3, 0.0]]), np.array([-5.0, 0.25])
    opt = AdamW({"w": w, "b": b}.items(), lr=0.1, weight_decay=0.5)
    w0, b0 = w.data.copy(), b.data.copy()
    opt.step()
    # bias-corrected moments equal g and g^2 after one step
    want_w = w0 * (1 - 0.1 * 0.5) - 0.1 * w.grad / (np.abs(w.grad) + 1e-8)
    want_b = b0 - 0.1 * b.grad / (np.abs(b.grad) + 1e-8)  # vectors are not decayed
    np.testing.assert_allclose(w.data, want_w, rtol=1e-12)
    np.testing.assert_allclose(b.data, want_b, rtol=1e-12)


def test_adamw_minimises_a_quadratic():
    x = nx.Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = AdamW([("x", x)], lr=0.05, weight_decay=0.0)
    for _ in range(2000):
        x.grad = 2 * (x.data - np.array([1.0, 2.0]))
        opt.step()
    np.testing.assert_allclose(x.data, [1.0, 2.0], atol=1e-3)


def test_clip_grad_norm_scales_to_cap():
    a = nx.Tensor(np.zeros(2), requires_grad=True)
    b = nx.Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8], rtol=1e-9)
    a.grad = np.array([0.1, 0.0])
    b.grad = np.array([0.0])
    clip_grad_norm([a, b], 1.0)
    np.testing.assert_array_equal(a.grad, [0.1, 0.0])


# -- trainer ---------------------------------------------------------------------------

def test_step_fills_queues_and_logs(small_cohort, small_bank, tmp_path):
    log = tmp_path / "log.tsv"
    tr = Trainer(tiny_run_config(), small_cohort.schema, small_bank, small_cohort.train, log_path=log)
    tr.fit(max_steps=3)
    assert all(len(q) == 12 for q in tr.queues.values())
    rows = log.read_text().splitlines()
    assert rows[0].split("\t") == list(LOG_COLUMNS) and len(rows) == 4
    assert all(np.isfinite(r["total"]) and r["grad_norm"] > 0 for r in tr.history)


def test_ema_follows_online_weights(small_cohort, small_bank):
    tr = make_trainer(small_cohort, small_bank)
    pair = tr.model.momentum_pairs[0]
    online = dict(pair.online.named_parameters())
    mom = {k: t.data.copy() for k, t in dict(pair.momentum.named_parameters()).items()}
    tr.fit(max_steps=1)
    m = tr.model.cfg.momentum
    for k, t in pair.momentum.named_parameters():
        np.testing.assert_allclose(t.data, m * mom[k] + (1 - m) * online[k].data, rtol=1e-5, atol=1e-7)


def test_prototypes_refresh_at_start_and_midpoint(small_cohort, small_bank):
    tr = make_trainer(small_cohort, small_bank)
    assert tr.batches_per_epoch == 7
    tr.fit(epochs=2)
    mem = tr.model.memory.layers[0].memory
    # epoch 0 batch 0 finds an empty bank; then 0:3, 1:0, 1:3 rebuild
    assert mem.rebuilds == 3 and (mem.epoch, mem.batch_index) == (1, 3)
    assert mem.keys.shape == (2, 4, 8)


def test_no_memory_model_allocates_no_bank(small_cohort, small_bank):
    tr = make_trainer(small_cohort, small_bank, use_memory=False)
    tr.fit(max_steps=2)
    assert count_instances(tr, MemoryBank) == 0
    assert count_instances(make_trainer(small_cohort, small_bank), MemoryBank) == 1


def test_loss_mask_equals_zero_weight(small_cohort, small_bank):
    masked = make_trainer(small_cohort, small_bank, loss_mask=("res_i", "res_t"))
    cfg = tiny_run_config()
    cfg.loss.restore = 0.0
    zeroed = Trainer(cfg, small_cohort.schema, small_bank, small_cohort.train)
    masked.fit(max_steps=4)
    zeroed.fit(max_steps=4)
    a, b = dict(masked.model.named_parameters()), dict(zeroed.model.named_parameters())
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes(), k


def test_non_finite_loss_raises(small_cohort, small_bank):
    tr = make_trainer(small_cohort, small_bank)
    next(iter(tr.model.head.named_parameters()))[1].data[...] = np.nan
    before = tr.step_count
    with pytest.raises(NumericFailure):
        tr.fit(max_steps=1)
    assert tr.step_count == before and tr.opt.t == 0


# -- checkpoints --------------------------------------------------------------------

def test_round_trip_is_byte_identical_and_resumes_exactly(small_cohort, small_bank, tmp_path):
    a = make_trainer(small_cohort, small_bank)
    a.fit(max_steps=9)  # crosses an epoch boundary and a prototype refresh
    ck.save_checkpoint(a, tmp_path / "a.ckpt")
    b = ck.load_checkpoint(tmp_path / "a.ckpt", small_cohort.schema, small_bank, small_cohort.train)
    ck.save_checkpoint(b, tmp_path / "b.ckpt")
    assert filecmp.cmp(tmp_path / "a.ckpt", tmp_path / "b.ckpt", shallow=False)
    a.fit(max_steps=4)
    b.fit(max_steps=4)
    assert [r["total"] for r in a.history[-4:]] == [r["total"] for r in b.history[-4:]]
    ck.save_checkpoint(a, tmp_path / "a2.ckpt")
    ck.save_checkpoint(b, tmp_path / "b2.ckpt")
    assert filecmp.cmp(tmp_path / "a2.ckpt", tmp_path / "b2.ckpt", shallow=False)


def test_identical_seeds_give_identical_checkpoints(small_cohort, small_bank, tmp_path):
    for name, seed in (("x", 3), ("y", 3), ("z", 4)):
        t = make_trainer(small_cohort, small_bank, seed=seed)
        t.fit(max_steps=3)
        ck.save_checkpoint(t, tmp_path / f"{name}.ckpt")
    assert filecmp.cmp(tmp_path / "x.ckpt", tmp_path / "y.ckpt", shallow=False)
    assert not filecmp.cmp(tmp_path / "x.ckpt", tmp_path / "z.ckpt", shallow=False)


def test_checkpoint_header_layout(small_cohort, small_bank, tmp_path):
    t = make_trainer(small_cohort, small_bank)
    t.fit(max_steps=1)
    ck.save_checkpoint(t, tmp_path / "c.ckpt")
    header, arrays = ck.read_checkpoint(tmp_path / "c.ckpt")
    assert header["counters"]["step"] == 1 and header["format_version"] == ck.FORMAT_VERSION
    for name, p in t.model.named_parameters():
        np.testing.assert_array_equal(arrays[f"param/{name}"], p.data)
    assert any(k.startswith("queue/") for k in arrays) and any(k.startswith("bank/") for k in arrays)


def test_version_mismatch_and_bad_magic(tmp_path):
    path = tmp_path / "v.ckpt"
    ck.write_checkpoint(path, {"x": 1}, {"a": np.zeros(2, np.float32)})
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", 7)
    path.write_bytes(bytes(raw))
    with pytest.raises(ck.CheckpointVersionError, match="7"):
        ck.read_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(ValueError):
        ck.read_checkpoint(path)
