import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neatlab import adapters as ad
from neatlab import tensor as T
from neatlab.errors import ConfigWarning, ContractError, ShapeError
from neatlab.tensor import Tape, Tensor, backward

from test_tensor import naive_matmul


def relu(x):
    return np.maximum(x, 0.0)


def straight_line_neat(w0, theta_in, mids, theta_out, act, s, residual, out_act):
    # plain-numpy recomputation of the adapter delta
    sig = relu if act == "relu" else (lambda z: np.sin(2 * np.pi * z))
    h = sig(w0 @ theta_in)
    for m in mids:
        z = sig(h @ m)
        h = h + z if residual else z
    out = h @ theta_out
    if out_act:
        out = sig(out)
    return s * out


def random_neat(rng, d1, d2, r, depth, activation="relu", residual=False, scaling=1.0, out_act=False, dropout_p=0.0):
    base = ad.FrozenLinear(rng.standard_normal((d1, d2)))
    adapter = ad.NeatAdapter(
        Tensor(rng.standard_normal((d2, r)), trainable=True),
        Tensor(rng.standard_normal((r, d2)), trainable=True),
        [Tensor(rng.standard_normal((r, r)) / np.sqrt(r), trainable=True) for _ in range(depth - 2)],
        activation=activation, scaling=scaling, residual=residual,
        output_activation=out_act, dropout_p=dropout_p,
    )
    return ad.AdaptedLayer(base, adapter)


def quiet_init(*args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConfigWarning)
        return ad.init_adapter(*args, **kwargs)


configs = st.fixed_dictionaries({
    "kind": st.sampled_from(["neat", "lora"]),
    "d1": st.integers(1, 10),
    "d2": st.integers(1, 10),
    "r": st.integers(1, 6),
    "depth": st.integers(2, 6),
    "activation": st.sampled_from(["relu", "sine"]),
    "residual": st.booleans(),
    "output_activation": st.booleans(),
    "scaling": st.floats(0.1, 4.0),
    "seed": st.integers(0, 2**31),
})


def build(cfg):
    depth = cfg["depth"] if cfg["kind"] == "neat" else 2
    adapter = quiet_init(
        cfg["kind"], (cfg["d1"], cfg["d2"], cfg["r"], depth), cfg["seed"],
        activation=cfg["activation"], scaling=cfg["scaling"], residual=cfg["residual"],
        output_activation=cfg["output_activation"],
    )
    base = ad.FrozenLinear(np.random.default_rng(cfg["seed"] + 1).standard_normal((cfg["d1"], cfg["d2"])))
    return ad.AdaptedLayer(base, adapter)


# -- hand-computed deltas ----------------------------------------------------


def test_neat_hand_example():
    layer = ad.AdaptedLayer(
        ad.FrozenLinear(np.eye(2)),
        ad.NeatAdapter(Tensor([[1.0], [0.0]]), Tensor([[2.0, 0.0]])),
    )
    np.testing.assert_array_equal(ad.delta(layer).data, [[2.0, 0.0], [0.0, 0.0]])


def test_lora_hand_example():
    adapter = ad.LoraAdapter(Tensor([[1.0], [0.0]]), Tensor([[0.0, 3.0]]))
    np.testing.assert_array_equal(ad.lora_delta(adapter).data, [[0.0, 3.0], [0.0, 0.0]])


def test_zero_output_layer_gives_zero_delta(rng):
    layer = random_neat(rng, 5, 4, 2, 3)
    layer.adapter.theta_out.data[:] = 0.0
    assert np.all(ad.delta(layer).data == 0.0)


@pytest.mark.parametrize("activation", ["relu", "sine"])
@pytest.mark.parametrize("residual", [False, True])
@pytest.mark.parametrize("out_act", [False, True])
def test_neat_matches_straight_line_oracle(activation, residual, out_act):
    rng = np.random.default_rng(7)
    layer = random_neat(rng, 8, 5, 3, 4, activation, residual, 0.7, out_act)
    a = layer.adapter
    expected = straight_line_neat(
        layer.base.weight, a.theta_in.data, [m.data for m in a.intermediates], a.theta_out.data,
        activation, 0.7, residual, out_act,
    )
    np.testing.assert_allclose(ad.delta(layer).data, expected, atol=1e-12, rtol=0)


def test_lora_matches_triple_loop(rng):
    a, b = rng.standard_normal((6, 2)), rng.standard_normal((2, 4))
    got = ad.lora_delta(ad.LoraAdapter(Tensor(a), Tensor(b), scaling=1.5)).data
    np.testing.assert_allclose(got, 1.5 * naive_matmul(a, b), atol=1e-12, rtol=0)


def test_shape_errors_name_the_stage(rng):
    base = ad.FrozenLinear(rng.standard_normal((5, 4)))
    bad = ad.NeatAdapter(Tensor(np.ones((3, 2))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="theta_in"):
        ad.neat_delta(base, bad)
    with pytest.raises(ShapeError, match="intermediate"):
        ad.NeatAdapter(Tensor(np.ones((4, 2))), Tensor(np.ones((2, 4))), [Tensor(np.ones((3, 3)))])
    with pytest.raises(ShapeError, match="theta_out"):
        ad.NeatAdapter(Tensor(np.ones((4, 2))), Tensor(np.ones((3, 4))))
    layer = ad.AdaptedLayer(base, ad.LoraAdapter(Tensor(np.ones((5, 2))), Tensor(np.ones((2, 3)))))
    with pytest.raises(ShapeError, match="LoRA"):
        ad.delta(layer)
    with pytest.raises(ShapeError):
        ad.adapted_forward(ad.AdaptedLayer(base), Tensor(np.ones((5, 2))))


def test_invalid_hyperparameters():
    with pytest.raises(ValueError):
        ad.NeatAdapter(Tensor(np.ones((2, 1))), Tensor(np.ones((1, 2))), activation="tanh")
    with pytest.raises(ValueError):
        ad.LoraAdapter(Tensor(np.ones((2, 1))), Tensor(np.ones((1, 2))), dropout_p=1.0)
    with pytest.raises(ValueError):
        ad.init_adapter("lora", (4, 4, 1, 3), 0)
    with pytest.raises(ValueError):
        ad.init_adapter("neat", (4, 4, 1, 1), 0)
    with pytest.raises(ValueError):
        ad.init_adapter("bitfit", (4, 4, 1, 2), 0)


# -- forward and gradients ---------------------------------------------------


def test_no_adapter_is_exact_base_forward(rng):
    base = ad.FrozenLinear(rng.standard_normal((4, 3)))
    x = rng.standard_normal((3, 5))
    y = ad.adapted_forward(ad.AdaptedLayer(base), Tensor(x)).data
    np.testing.assert_array_equal(y, base.weight @ x)


def test_gradients_flow_only_into_adapter(rng):
    layer = random_neat(rng, 5, 4, 2, 3)
    x = Tensor(rng.standard_normal((4, 3)))
    w_before = layer.base.weight.copy()
    with Tape() as tape:
        loss = T.sum(ad.adapted_forward(layer, x))
    backward(loss, tape)
    assert all(p.grad is not None for p in layer.adapter.parameters())
    np.testing.assert_array_equal(layer.base.weight, w_before)
    assert not layer.base.weight.flags.writeable


def test_frozen_weight_is_read_only(rng):
    base = ad.FrozenLinear(rng.standard_normal((3, 3)))
    with pytest.raises(ValueError):
        base.weight[0, 0] = 1.0


def test_neat_dropout_acts_on_first_hidden_layer(rng):
    layer = random_neat(rng, 6, 4, 3, 2, dropout_p=0.5)
    x = Tensor(rng.standard_normal((4, 2)))
    with Tape() as tape:
        ad.adapted_forward(layer, x, training=True, rng=np.random.default_rng(0))
    assert "dropout" in tape.ops()
    eval_a = ad.adapted_forward(layer, x).data
    eval_b = ad.adapted_forward(layer, x).data
    np.testing.assert_array_equal(eval_a, eval_b)
    with pytest.raises(ContractError):
        ad.adapted_forward(layer, x, training=True)


def test_lora_dropout_acts_on_input(rng):
    base = ad.FrozenLinear(rng.standard_normal((5, 4)))
    adapter = ad.LoraAdapter(Tensor(rng.standard_normal((5, 2))), Tensor(rng.standard_normal((2, 4))), 1.0, 0.5)
    x = rng.standard_normal((4, 3))
    y = ad.adapted_forward(ad.AdaptedLayer(base, adapter), Tensor(x), True, np.random.default_rng(3)).data
    mask = (np.random.default_rng(3).random(x.shape) >= 0.5) / 0.5
    expected = base.weight @ x + (adapter.A.data @ adapter.B.data) @ (x * mask)
    np.testing.assert_allclose(y, expected, atol=1e-12)


@given(st.integers(0, 2**31), st.floats(0.1, 5.0))
def test_scaling_linearity(seed, s):
    rng = np.random.default_rng(seed)
    layer = random_neat(rng, 5, 4, 2, 4, "sine", True, s)
    d1 = ad.delta(layer).data
    layer.adapter.scaling = 2 * s
    d2 = ad.delta(layer).data
    np.testing.assert_allclose(d2, 2 * d1, atol=1e-12 * max(1.0, np.abs(d1).max()), rtol=0)


# -- initialization, accounting, merge --------------------------------------


@given(configs)
def test_zero_init_identity(cfg):
    layer = build(cfg)
    assert np.all(ad.delta(layer).data == 0.0)
    x = np.random.default_rng(cfg["seed"]).standard_normal((cfg["d2"], 3))
    y = ad.adapted_forward(layer, Tensor(x)).data
    np.testing.assert_allclose(y, layer.base.weight @ x, atol=1e-12, rtol=0)


def test_init_determinism_and_seed_sensitivity():
    a = quiet_init("neat", (8, 6, 2, 4), 11)
    b = quiet_init("neat", (8, 6, 2, 4), 11)
    c = quiet_init("neat", (8, 6, 2, 4), 12)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))


def test_init_scales_follow_fan_in():
    a = ad.init_adapter("neat", (64, 400, 8, 3), 0)
    assert np.std(a.theta_in.data) == pytest.approx(1 / np.sqrt(400), rel=0.05)
    lora = ad.init_adapter("lora", (400, 64, 8, 2), 0)
    assert np.std(lora.A.data) == pytest.approx(1 / np.sqrt(8), rel=0.05)
    assert np.all(lora.B.data == 0)


def test_rank_warning():
    with pytest.warns(ConfigWarning):
        ad.init_adapter("lora", (4, 3, 3, 2), 0)


@pytest.mark.parametrize(
    "kind,dims,expected",
    [
        ("lora", (768, 768, 8, 2), 12288),
        ("neat", (768, 768, 8, 2), 12288),
        ("neat", (768, 768, 8, 4), 12416),
        ("lora", (64, 16, 4, 2), 320),
        ("neat", (64, 16, 8, 2), 256),
    ],
)
def test_param_count_values(kind, dims, expected):
    assert ad.param_count(quiet_init(kind, dims, 0)) == expected


@given(configs)
def test_param_count_matches_enumeration(cfg):
    adapter = build(cfg).adapter
    enumerated = sum(1 for p in adapter.parameters() if p.trainable for _ in np.ndindex(p.shape))
    assert ad.param_count(adapter) == enumerated
    d1, d2, r = cfg["d1"], cfg["d2"], cfg["r"]
    if cfg["kind"] == "lora":
        assert enumerated == r * (d1 + d2)
    else:
        assert enumerated == 2 * r * d2 + (cfg["depth"] - 2) * r * r
    assert ad.param_count(None) == 0


@given(configs)
def test_merge_matches_adapted_forward(cfg):
    layer = build(cfg)
    rng = np.random.default_rng(cfg["seed"] + 2)
    for p in layer.adapter.parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.5
    merged = ad.merge(layer)
    x = Tensor(rng.standard_normal((cfg["d2"], 4)))
    ya = ad.adapted_forward(layer, x).data
    ym = merged.forward(x).data
    np.testing.assert_allclose(ym, ya, atol=1e-12 * max(1.0, np.abs(ya).max()), rtol=0)


def test_merge_of_zero_init_is_bitwise_base(rng):
    base = ad.FrozenLinear(rng.standard_normal((5, 4)))
    layer = ad.AdaptedLayer(base, quiet_init("neat", (5, 4, 2, 3), 0))
    merged = ad.merge(layer)
    assert merged.weight.tobytes() == base.weight.tobytes()
    assert ad.merge(layer).weight.tobytes() == merged.weight.tobytes()
    assert merged.weight is not base.weight


def test_merge_without_adapter():
    with pytest.raises(ContractError):
        ad.merge(ad.AdaptedLayer(ad.FrozenLinear(np.eye(2))))
