import numpy as np
import pytest

from holodx import numerics as nx
from holodx.knowledge_injection import (KnowledgeGate, KnowledgeInjection, KnowledgeLayer, build_joint_sequence,
                                        fuse_cls, kag)

from conftest import tiny_model_config

D, HEADS = 8, 2


def f64(rng, shape, grad=False):
    return nx.Tensor(rng.standard_normal(shape), requires_grad=grad)


def saturated_gate(rng, logit):
    layer = KnowledgeGate(rng, D, HEADS, np.float64)
    layer.gate.weight.data[:] = 0.0
    layer.gate.bias.data[:] = logit
    return layer


@pytest.mark.parametrize("seed", range(5))
def test_open_gate_passes_hidden_state_through(seed):
    rng = np.random.default_rng(seed)
    layer = saturated_gate(rng, 20.0)
    h, k = f64(rng, (2, 5, D)), f64(rng, (2, 3, D))
    kag(layer, h, k)
    np.testing.assert_allclose(layer.last_pre_norm.data, h.data, atol=1e-6, rtol=0)


@pytest.mark.parametrize("seed", range(5))
def test_closed_gate_passes_attention_through(seed):
    rng = np.random.default_rng(seed)
    layer = saturated_gate(rng, -20.0)
    h, k = f64(rng, (2, 5, D)), f64(rng, (2, 3, D))
    kag(layer, h, k)
    np.testing.assert_allclose(layer.last_pre_norm.data, layer.last_attention.data, atol=1e-6, rtol=0)


def test_gate_is_per_token_and_channel(rng):
    layer = KnowledgeGate(rng, D, HEADS, np.float64)
    h = f64(rng, (2, 5, D))
    layer(h, f64(rng, (2, 3, D)))
    g = layer.last_gate.data
    assert g.shape == h.shape
    assert np.ptp(g, axis=-1).max() > 0 and np.ptp(g, axis=1).max() > 0


def test_gate_bias_initialisation():
    layer = KnowledgeGate(np.random.default_rng(0), D, HEADS, np.float64, gate_bias=2.0)
    np.testing.assert_array_equal(layer.gate.bias.data, 2.0)


def test_saturated_open_gate_cuts_knowledge_gradient(rng):
    def knowledge_grad(logit):
        r = np.random.default_rng(3)
        layer = saturated_gate(r, logit)
        h, k = f64(r, (1, 4, D)), f64(r, (1, 3, D), grad=True)
        w = r.standard_normal((1, 4, D))
        nx.backward((layer(h, k) * nx.Tensor(w)).sum())
        return np.abs(k.grad).max()

    assert knowledge_grad(20.0) < 1e-6 * knowledge_grad(0.0)


def test_ungated_variant_adds_attention(rng):
    layer = KnowledgeGate(rng, D, HEADS, np.float64, gated=False)
    h = f64(rng, (2, 4, D))
    layer(h, f64(rng, (2, 3, D)))
    np.testing.assert_array_equal(layer.last_pre_norm.data, h.data + layer.last_attention.data)
    assert layer.last_gate is None


def test_padded_knowledge_rows_are_ignored(rng):
    layer = KnowledgeGate(rng, D, HEADS, np.float64)
    h = f64(rng, (1, 4, D))
    k = rng.standard_normal((1, 3, D))
    k_junk = k.copy()
    k_junk[:, 2] = 1e3
    mask = np.array([[True, True, False]])
    a = layer(h, nx.Tensor(k), mask).data
    b = layer(h, nx.Tensor(k_junk), mask).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_empty_knowledge_is_rejected(rng):
    layer = KnowledgeGate(rng, D, HEADS, np.float64)
    with pytest.raises(nx.ContractViolation):
        layer(f64(rng, (1, 4, D)), f64(rng, (1, 0, D)))


def test_backbone_layer_skips_knowledge(rng):
    layer = KnowledgeLayer(rng, D, HEADS, np.float64, use_knowledge=False)
    assert layer.kag is None
    assert not any(n.startswith("kag") for n, _ in layer.named_parameters())
    h = f64(rng, (1, 4, D))
    a = layer(h).data
    b = layer(h, f64(rng, (1, 3, D))).data
    np.testing.assert_array_equal(a, b)


def test_injection_stack_depth():
    cfg = tiny_model_config(kl_layers=3)
    inj = KnowledgeInjection(np.random.default_rng(0), cfg)
    assert len(inj.layers) == 3


def test_joint_sequence_and_masks(rng):
    hi, ht = f64(rng, (2, 3, D)), f64(rng, (2, 4, D))
    tmask = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], dtype=bool)
    joint, mask = build_joint_sequence(hi, ht, None, tmask)
    assert joint.shape == (2, 7, D)
    np.testing.assert_array_equal(mask[:, :3], True)
    np.testing.assert_array_equal(mask[:, 3:], tmask)
    with pytest.raises(nx.ShapeError):
        build_joint_sequence(hi, f64(rng, (2, 4, D + 1)))


def test_fuse_cls_picks_class_rows(rng):
    joint = f64(rng, (2, 7, D))
    know = f64(rng, (2, 3, D))
    h, seq = fuse_cls(joint, 3, know)
    np.testing.assert_array_equal(seq.data[:, 0], joint.data[:, 0])
    np.testing.assert_array_equal(seq.data[:, 1], joint.data[:, 3])
    np.testing.assert_array_equal(seq.data[:, 2], know.data[:, 0])
    assert h.shape == (2, 3 * D)
    h2, _ = fuse_cls(joint, 3)
    assert h2.shape == (2, 2 * D)
