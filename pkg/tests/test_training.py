import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neatlab import adapters as ad
from neatlab.errors import ConfigError, ConfigWarning, ParseError, TrainingError
from neatlab.tensor import Tensor
from neatlab.training import (
    AdapterConfig,
    LinearSchedule,
    Model,
    OptimizerState,
    TaskSpec,
    TrainConfig,
    attach_adapters,
    compare_budget,
    evaluate,
    finetune,
    load_csv,
    make_task,
    pretrain,
    run_sweep,
    teacher_forward,
)

pytestmark = pytest.mark.filterwarnings("ignore:adapter rank")

FAST = TrainConfig(epochs=3, lr=1e-2, batch_size=16, warmup_steps=5)


@pytest.fixture(scope="module")
def teacher():
    return make_task(TaskSpec(shift=0.5, n_train=128, n_val=32))


@pytest.fixture(scope="module")
def base(teacher):
    return pretrain(teacher, (16,), 10, 0)[0]


# -- optimizer --------------------------------------------------------------


def test_schedule_values():
    s = LinearSchedule(4, 12)
    assert [s.factor(t) for t in range(0, 13, 2)] == [0.0, 0.5, 1.0, 0.75, 0.5, 0.25, 0.0]
    assert LinearSchedule(0, 10).factor(0) == 1.0


@given(st.integers(0, 50), st.integers(1, 200))
def test_schedule_nonincreasing_after_warmup(warmup, extra):
    s = LinearSchedule(warmup, warmup + extra)
    vals = [s.factor(t) for t in range(warmup, warmup + extra + 3)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert all(0.0 <= v <= 1.0 for v in vals)


def test_adam_first_step_matches_closed_form():
    p = Tensor([[1.0, -2.0]], trainable=True)
    opt = OptimizerState([p], lr=0.1)
    p.grad = np.array([[0.5, -3.0]])
    opt.step()
    # bias-corrected first step moves each coordinate by lr * g / (|g| + eps')
    np.testing.assert_allclose(p.data, [[0.9, -1.9]], atol=1e-8)
    assert opt.m[0].shape == p.shape and opt.v[0].shape == p.shape


def test_decoupled_weight_decay():
    p = Tensor([[2.0]], trainable=True)
    opt = OptimizerState([p], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros((1, 1))
    opt.step()
    assert p.data[0, 0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_zero_lr_and_zero_gradient_leave_parameters():
    p = Tensor([[1.0, 2.0]], trainable=True)
    before = p.data.copy()
    opt = OptimizerState([p], lr=0.0)
    p.grad = np.ones((1, 2))
    opt.step()
    np.testing.assert_array_equal(p.data, before)
    opt = OptimizerState([p], lr=0.1)
    p.grad = np.zeros((1, 2))
    opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_optimizer_divergence_reports_step():
    p = Tensor([[1e308]], trainable=True)
    opt = OptimizerState([p], lr=1.0, weight_decay=-1e10)
    p.grad = np.zeros((1, 1))
    with np.errstate(over="ignore"), pytest.raises(TrainingError, match="step 0"):
        opt.step()


# -- tasks ------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["teacher_regression", "invariant_shift"])
def test_task_regeneration_is_bit_identical(kind):
    spec = TaskSpec(kind=kind, noise=0.1, shift=0.3, seed=3)
    a, b = make_task(spec), make_task(spec)
    for name in ("x_train", "y_train", "x_val", "y_val"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_noiseless_teacher_is_exact(teacher):
    np.testing.assert_array_equal(teacher_forward(teacher.teacher, teacher.x_val), teacher.y_val)
    model = Model([ad.AdaptedLayer(ad.FrozenLinear(w), None, i) for i, w in enumerate(teacher.teacher)])
    assert evaluate(model, teacher, "val")["loss"] <= 1e-12


def test_invariant_task_satisfies_invariance():
    data = make_task(TaskSpec(kind="invariant_shift", d_in=6, d_out=10, n_train=20))
    loss = data.invariant_loss
    rng = np.random.default_rng(0)
    for _ in range(10):
        w = rng.standard_normal((10, 6))
        assert abs(loss(w) - loss(loss.projector() @ w)) <= 1e-12 * max(1.0, loss(w))
    assert data.full_batch
    np.testing.assert_array_equal(data.y_train, loss.Z)


def test_task_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec(kind="images")
    with pytest.raises(ValueError):
        TaskSpec(n_train=0)
    with pytest.raises(ValueError):
        TaskSpec(kind="csv_classification")


def write(tmp_path, text, name="d.csv", mode="w"):
    p = tmp_path / name
    if mode == "wb":
        p.write_bytes(text)
    else:
        p.write_text(text)
    return p


def test_csv_loading_and_split(tmp_path):
    rows = "\n".join(f"{i * 0.1},{-i},{i % 2}" for i in range(20))
    p = write(tmp_path, "x1,x2,label\n" + rows + "\n")
    x, y, header = load_csv(p)
    assert x.shape == (20, 2) and header == ["x1", "x2", "label"]
    data = make_task(TaskSpec(kind="csv_classification", csv_path=str(p), val_fraction=0.25))
    assert data.x_train.shape == (2, 15) and data.x_val.shape == (2, 5)
    assert data.n_classes == 2


@pytest.mark.parametrize(
    "body,line,msg",
    [
        ("a,b,label\n1,2,0\n3,,1\n", 3, "missing"),
        ("a,b,label\n1,2,0\n1,2\n", 3, "fields"),
        ("a,b,label\n1,x,0\n", 2, "bad feature"),
        ("a,b,label\n1,2,0.5\n", 2, "not an integer"),
        ("a,b,label\n1,2,-1\n", 2, "negative"),
        ("a,b,label\n1,nan,1\n", 2, "non-finite"),
        ("", 1, "empty"),
        ("a,b,label\n", 2, "no data"),
    ],
)
def test_csv_errors_carry_line_numbers(tmp_path, body, line, msg):
    with pytest.raises(ParseError, match=msg) as exc:
        load_csv(write(tmp_path, body))
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value)


def test_csv_rejects_non_utf8(tmp_path):
    with pytest.raises(ParseError, match="UTF-8"):
        load_csv(write(tmp_path, b"a,label\n\xff\xfe,1\n", mode="wb"))


# -- pretrain / finetune ----------------------------------------------------


def test_pretrain_zero_epochs_is_frozen_random_init(teacher):
    m1, metrics = pretrain(teacher, (16,), 0, 5)
    m2, _ = pretrain(teacher, (16,), 0, 5)
    assert len(m1.layers) == 2 and m1.layers[0].base.shape == (16, 8)
    assert m1.base_checksum() == m2.base_checksum()
    assert metrics.epochs == 0


@pytest.mark.parametrize("seed", range(5))
def test_pretrain_improves_loss(teacher, seed):
    _, metrics = pretrain(teacher, (16,), 5, seed)
    assert metrics.train_loss[-1] <= metrics.train_loss[0]


def test_pretrain_is_deterministic(teacher):
    assert pretrain(teacher, (16,), 3, 1)[0].base_checksum() == pretrain(teacher, (16,), 3, 1)[0].base_checksum()


def test_pretrain_divergence_reports_step(teacher):
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match="step"):
        pretrain(teacher, (16,), 5, 0, TrainConfig(lr=1e200, warmup_steps=0, batch_size=32))


def test_finetune_zero_epochs_equals_base(teacher, base):
    _, metrics = finetune(base, teacher, replace(FAST, epochs=0), AdapterConfig(kind="neat", r=4), 0)
    assert metrics.epochs == 0
    assert metrics.train_loss == [evaluate(base, teacher, "train")["loss"]]
    assert metrics.val_loss == [evaluate(base, teacher, "val")["loss"]]


@pytest.mark.parametrize("seed", range(5))
def test_finetune_neat_reduces_loss(teacher, base, seed):
    model, metrics = finetune(base, teacher, FAST, AdapterConfig(kind="neat", r=4, alpha=4.0), seed)
    assert metrics.train_loss[-1] < metrics.train_loss[0]
    assert metrics.epochs == FAST.epochs and len(metrics.val_loss) == FAST.epochs + 1
    assert model.base_checksum() == base.base_checksum()


def test_finetune_is_deterministic(teacher, base):
    cfg = AdapterConfig(kind="lora", r=2, alpha=2.0)
    a = finetune(base, teacher, FAST, cfg, 3)[1]
    b = finetune(base, teacher, FAST, cfg, 3)[1]
    assert a.train_loss == b.train_loss and a.val_loss == b.val_loss


def test_merged_model_matches_adapted(teacher, base):
    model, _ = finetune(base, teacher, FAST, AdapterConfig(kind="neat", r=4, depth=3, alpha=4.0), 0)
    for split in ("train", "val"):
        a = evaluate(model, teacher, split)["loss"]
        m = evaluate(model.merged(), teacher, split)["loss"]
        assert abs(a - m) <= 1e-12 * max(1.0, a)


def test_targeting(base):
    cfg = AdapterConfig(kind="neat", r=2, target_layers=(1,))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConfigWarning)
        model = attach_adapters(base, cfg, 0)
        assert model.layers[0].adapter is None and model.layers[1].adapter is not None
        with pytest.raises(ConfigError, match="out of range"):
            attach_adapters(base, replace(cfg, target_layers=(5,)), 0)


def test_classification_accuracy_of_constant_predictor():
    rng = np.random.default_rng(0)
    n = 400
    labels = np.repeat([0, 1], n // 2)
    from neatlab.training.tasks import Dataset

    x = rng.standard_normal((3, n))
    data = Dataset("classification", x, labels, x, labels, n_classes=2)
    w = np.zeros((2, 3))
    model = Model([ad.AdaptedLayer(ad.FrozenLinear(w))])
    ev = evaluate(model, data, "val")
    # ties go to class 0, which is exactly half the balanced labels
    assert ev["accuracy"] == pytest.approx(0.5)
    assert ev["loss"] == pytest.approx(math.log(2))


# -- comparison and sweeps --------------------------------------------------


@pytest.fixture(scope="module")
def invariant():
    data = make_task(TaskSpec(kind="invariant_shift", d_in=8, d_out=20, n_train=32, n_val=16))
    return data, pretrain(data, (), 0, 0)[0]


def test_constructed_neat_matches_trained_lora(invariant):
    data, base = invariant
    cfg = TrainConfig(epochs=10, lr=1e-2, warmup_steps=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConfigWarning)
        rec = compare_budget(base, data, 2, cfg, [0, 1], AdapterConfig(alpha=2.0, dropout=0.0))
    assert rec.mode == "invariant"
    assert [(m.seed, m.arm) for m in rec.runs] == [(0, "lora"), (0, "neat"), (1, "lora"), (1, "neat")]
    assert rec.max_constructed_gap() <= 1e-9
    assert rec.constructed[0]["param_budget"] == 2 * (2 * 2) * 8
    assert rec.warnings  # r(d1 + d2) = 56 vs 2 * (2r) * d2 = 64


def test_budget_mismatch_warns(invariant):
    data, base = invariant
    with pytest.warns(ConfigWarning, match="budgets differ"):
        rec = compare_budget(base, data, 2, replace(FAST, epochs=0), [0])
    assert rec.warnings


def test_zero_epoch_comparison_ties(invariant):
    data, base = invariant
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConfigWarning)
        rec = compare_budget(base, data, 2, replace(FAST, epochs=0), [0])
    losses = {m.arm: m.train_loss[-1] for m in rec.runs}
    assert losses["lora"] == losses["neat"] == rec.constructed[0]["train_loss"]


def test_comparison_exploratory_and_parallel_matches_serial(teacher, base):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConfigWarning)
        serial = compare_budget(base, teacher, 2, FAST, [0, 1])
        parallel = compare_budget(base, teacher, 2, FAST, [0, 1], workers=3)
    assert serial.mode == "exploratory"
    assert [m.to_dict() for m in serial.runs] == [m.to_dict() for m in parallel.runs]


@pytest.mark.parametrize(
    "axis,values",
    [("depth", [2, 4, 6]), ("activation", ["relu", "sine"]), ("targeting", ["all", "suffix"])],
)
def test_sweeps_produce_finite_losses(teacher, base, axis, values):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConfigWarning)
        rec = run_sweep(base, teacher, axis, values, AdapterConfig(kind="neat", r=4, alpha=4.0), FAST, [0, 1])
    summary = rec.summary()
    assert [s["value"] for s in summary] == values
    assert all(math.isfinite(s["mean_final_val_loss"]) for s in summary)
    if axis == "depth":
        assert [s["param_budget"] for s in summary] == [2 * 4 * 8 + 2 * 4 * 16 + (d - 2) * 32 for d in values]
