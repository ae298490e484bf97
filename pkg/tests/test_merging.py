import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mergerisk import autodiff as ad
from mergerisk.data import generate_tasks
from mergerisk.merging import (Adapter, AmConfig, AmDivergenceError, MergedModel,
                               MergeSpec, RsConfig, ada_merge, forward_merged, merge,
                               surgery_l1, task_arithmetic, ties_merge, train_surgery,
                               weight_average)
from mergerisk.nets import LayoutError, ModelSpec, Network, ParameterVector
from mergerisk.training import finetune, pretrain

VEC_LAYOUT = (("w.w", (2,)),)


def vec(values):
    return ParameterVector(np.asarray(values, dtype=np.float64), VEC_LAYOUT)


def test_weight_average_arithmetic_mean():
    out = weight_average([vec([1.0, 2.0]), vec([3.0, 4.0])])
    assert np.array_equal(out.data, [2.0, 3.0])


def test_weight_average_idempotent_on_copies():
    theta = vec([0.3, -0.7])
    out = weight_average([theta.copy() for _ in range(5)])
    assert np.array_equal(out.data, theta.data)


def test_weight_average_matches_direct_formula(rng):
    models = [vec(rng.normal(size=2)) for _ in range(3)]
    out = weight_average(models)
    direct = (models[0].data + models[1].data + models[2].data) / 3
    assert np.abs(out.data - direct).max() < 1e-15


def test_weight_average_rejects_single_model():
    with pytest.raises(ValueError):
        weight_average([vec([1.0, 2.0])])


def test_weight_average_layout_mismatch_named():
    other = ParameterVector(np.zeros(3), (("w.w", (3,)),))
    with pytest.raises(LayoutError, match="w.w"):
        weight_average([vec([1.0, 2.0]), other])


def test_task_arithmetic_equals_wa_at_inverse_count(rng):
    theta0 = vec(rng.normal(size=2))
    models = [vec(rng.normal(size=2)) for _ in range(4)]
    ta = task_arithmetic(theta0, models, scale=1 / 4)
    wa = weight_average(models)
    assert np.abs(ta.data - wa.data).max() < 1e-12


def test_task_arithmetic_identity_on_zero_vectors():
    theta0 = vec([0.4, -0.2])
    models = [theta0.copy(), theta0.copy()]
    for lam in (0.1, 1.0, 3.0):
        out = task_arithmetic(theta0, models, scale=lam)
        assert np.array_equal(out.data, theta0.data)


def test_task_arithmetic_hand_example():
    theta0 = vec([0.0, 0.0])
    out = task_arithmetic(theta0, [vec([1.0, 0.0]), vec([0.0, 2.0])], scale=0.5)
    assert np.array_equal(out.data, [0.5, 1.0])


def test_ties_conflict_free_mean():
    theta0 = vec([0.0, 0.0])
    out = ties_merge(theta0, [vec([2.0, 0.0]), vec([4.0, 0.0])],
                     scale=1.0, trim_fraction=1.0)
    assert np.array_equal(out.data, [3.0, 0.0])


def test_ties_single_model_reduces_to_trim():
    theta0 = ParameterVector(np.zeros(4), (("w.w", (4,)),))
    tau = np.array([0.1, -3.0, 0.2, 2.0])
    model = ParameterVector(tau.copy(), theta0.layout)
    out = ties_merge(theta0, [model], scale=1.0, trim_fraction=0.5)
    assert np.array_equal(out.data, [0.0, -3.0, 0.0, 2.0])


def test_ties_sign_tie_contributes_zero():
    theta0 = vec([0.0, 0.0])
    out = ties_merge(theta0, [vec([1.0, -3.0]), vec([-1.0, -5.0])],
                     scale=1.0, trim_fraction=1.0)
    assert np.array_equal(out.data, [0.0, -4.0])


def test_ties_equals_ta_without_conflicts(rng):
    """Same-sign task vectors, full trim: elect/merge means coincide with the
    plain sum wherever every task touches the coordinate."""
    theta0 = ParameterVector(rng.normal(size=6), (("w.w", (6,)),))
    tau = np.abs(rng.normal(size=(3, 6))) + 0.1
    models = [ParameterVector(theta0.data + tau[i], theta0.layout) for i in range(3)]
    tm = ties_merge(theta0, models, scale=0.7, trim_fraction=1.0)
    # mean of agreeing values times T equals the sum -> matches TA at scale/T
    ta = task_arithmetic(theta0, models, scale=0.7 / 3)
    assert np.abs(tm.data - ta.data).max() < 1e-12


def test_merge_never_changes_layout(rng):
    theta0 = ParameterVector(rng.normal(size=6), (("w.w", (2, 3)),))
    models = [ParameterVector(theta0.data + rng.normal(size=6), theta0.layout)
              for _ in range(2)]
    for out in (weight_average(models),
                task_arithmetic(theta0, models, 0.5),
                ties_merge(theta0, models, 0.5, 0.5)):
        assert out.layout == theta0.layout


@pytest.fixture(scope="module")
def trained():
    tasks = generate_tasks(seed=33, num_tasks=2, input_dim=16, classes_per_task=3,
                           n_train=160, n_test=96, noise_sigma=0.12)
    net = Network(ModelSpec(arch="mlp", input_dim=16, image_shape=(4, 4),
                            num_tasks=2, classes_per_task=3, hidden=(12, 8)))
    theta0 = pretrain(net, tasks, epochs=2, seed=1)
    models = [finetune(net, theta0, t, epochs=6, lr=0.03, seed=t.task_id) for t in tasks]
    return net, tasks, theta0, models


def test_am_zero_iterations_equals_ta_at_initial(trained):
    net, tasks, theta0, models = trained
    inputs = [t.x_eval for t in tasks]
    cfg = AmConfig(iterations=0, initial_lambda=0.4)
    merged, lam, curve = ada_merge(net, theta0, models, inputs, cfg)
    ta = task_arithmetic(theta0, models, scale=0.4)
    assert np.abs(merged.data - ta.data).max() < 1e-12
    assert curve == []


def test_am_entropy_curve_decreases(trained):
    net, tasks, theta0, models = trained
    inputs = [t.x_eval for t in tasks]
    cfg = AmConfig(iterations=40, learning_rate=1e-4, initial_lambda=0.3)
    _, _, curve = ada_merge(net, theta0, models, inputs, cfg)
    assert curve[-1] < curve[0]
    # full-batch with a small step: any transient increase stays negligible
    assert max(np.diff(curve)) < 1e-4


def test_am_taskwise_equals_layerwise_on_single_group(trained):
    """With a single layer group the per-layer coefficients collapse to the
    per-task ones."""

    class OneGroupNet:
        def __init__(self):
            self.layout = (("w.w", (2, 3)), ("w.b", (3,)))
            self.spec = None

        def param_tensors(self, params, requires_grad=True):
            return {k: ad.Tensor(v, requires_grad=requires_grad)
                    for k, v in params.unflatten().items()}

        def logits_ad(self, p, x, task):
            return ad.matmul(x, p["w.w"]) + p["w.b"]

    net = OneGroupNet()
    rng = np.random.default_rng(2)
    theta0 = ParameterVector(rng.normal(size=9), net.layout)
    models = [ParameterVector(theta0.data + rng.normal(size=9), net.layout)
              for _ in range(2)]
    inputs = [rng.uniform(size=(8, 2)) for _ in range(2)]
    task_merged, _, _ = ada_merge(net, theta0, models, inputs,
                                  AmConfig(iterations=25, mode="taskwise"))
    layer_merged, _, _ = ada_merge(net, theta0, models, inputs,
                                   AmConfig(iterations=25, mode="layerwise"))
    assert np.abs(task_merged.data - layer_merged.data).max() < 1e-10


def test_am_needs_inputs(trained):
    net, tasks, theta0, models = trained
    with pytest.raises(ValueError, match="unlabeled"):
        merge(net, theta0, models, MergeSpec(method="am"), None)


def test_surgery_zero_bias_limit(trained):
    """Merged model equal to the individual model: the adapter stays near zero."""
    net, tasks, theta0, models = trained
    base = MergedModel(params=models[0].copy(), method="wa")
    out = train_surgery(net, base, [models[0], models[1]],
                        [tasks[0].x_eval, tasks[1].x_eval],
                        RsConfig(rank=4, iterations=200, seed=0))
    z = net.features_np(models[0], tasks[0].x_eval)
    phi = out.adapters[0](z)
    assert np.abs(phi).mean() < 0.05 * np.abs(z).mean()


def test_surgery_reduces_l1_objective(trained):
    net, tasks, theta0, models = trained
    base = merge(net, theta0, models, MergeSpec(method="wa"), None)
    inputs = [t.x_eval for t in tasks]
    repaired = train_surgery(net, base, models, inputs,
                             RsConfig(rank=4, iterations=300, seed=1))
    for t, theta_t in enumerate(models):
        before = surgery_l1(net, base, theta_t, inputs[t], t)
        after = surgery_l1(net, repaired, theta_t, inputs[t], t)
        assert after < before


def test_adapter_parameter_count(trained):
    net, tasks, theta0, models = trained
    base = merge(net, theta0, models, MergeSpec(method="wa"), None)
    out = train_surgery(net, base, models, [t.x_eval for t in tasks],
                        RsConfig(rank=4, iterations=10, seed=0))
    k = net.spec.feature_dim
    for adapter in out.adapters.values():
        assert adapter.u.size + adapter.v.size == 2 * k * 4


def test_surgery_rank_bound(trained):
    net, tasks, theta0, models = trained
    base = merge(net, theta0, models, MergeSpec(method="wa"), None)
    with pytest.raises(ValueError, match="rank"):
        train_surgery(net, base, models, [t.x_eval for t in tasks],
                      RsConfig(rank=99, iterations=5))


def test_surgery_refuses_double_application(trained):
    net, tasks, theta0, models = trained
    base = merge(net, theta0, models, MergeSpec(method="wa"), None)
    once = train_surgery(net, base, models, [t.x_eval for t in tasks],
                         RsConfig(rank=2, iterations=5))
    with pytest.raises(ValueError, match="adapters"):
        train_surgery(net, once, models, [t.x_eval for t in tasks],
                      RsConfig(rank=2, iterations=5))


def test_surgery_leaves_backbone_untouched(trained):
    net, tasks, theta0, models = trained
    base = merge(net, theta0, models, MergeSpec(method="wa"), None)
    snapshot = base.params.data.copy()
    train_surgery(net, base, models, [t.x_eval for t in tasks],
                  RsConfig(rank=4, iterations=50, seed=3))
    assert np.array_equal(base.params.data, snapshot)


def test_forward_merged_plain_equals_network(trained, rng):
    net, tasks, theta0, models = trained
    model = MergedModel(params=models[0], method="wa")
    x = rng.uniform(size=(6, 16))
    assert np.array_equal(forward_merged(net, model, x, 0),
                          net.proba_np(models[0], x, 0))


def test_forward_merged_zero_adapter_identity(trained, rng):
    net, tasks, theta0, models = trained
    k = net.spec.feature_dim
    zero = {t: Adapter(v=np.zeros((k, 2)), u=np.zeros((2, k))) for t in range(2)}
    with_adapter = MergedModel(params=models[0], method="wa_rs", adapters=zero)
    without = MergedModel(params=models[0], method="wa")
    x = rng.uniform(size=(6, 16))
    assert np.array_equal(forward_merged(net, with_adapter, x, 1),
                          forward_merged(net, without, x, 1))


def test_forward_merged_distribution(trained, rng):
    net, tasks, theta0, models = trained
    model = MergedModel(params=models[0], method="wa")
    p = forward_merged(net, model, rng.uniform(size=(5, 16)), 0)
    assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-12


def test_forward_merged_unknown_task(trained, rng):
    net, tasks, theta0, models = trained
    model = MergedModel(params=models[0], method="wa")
    with pytest.raises(LayoutError):
        forward_merged(net, model, rng.uniform(size=(2, 16)), 9)


def test_merges_deterministic(trained):
    net, tasks, theta0, models = trained
    inputs = [t.x_eval for t in tasks]
    for spec in (MergeSpec(method="am", am=AmConfig(iterations=20)),
                 MergeSpec(method="tm", scale=0.5)):
        a = merge(net, theta0, models, spec, inputs)
        b = merge(net, theta0, models, spec, inputs)
        assert np.array_equal(a.params.data, b.params.data)
    rs = RsConfig(rank=3, iterations=30, seed=5)
    base = merge(net, theta0, models, MergeSpec(method="wa"), None)
    r1 = train_surgery(net, base, models, inputs, rs)
    r2 = train_surgery(net, base, models, inputs, rs)
    for t in r1.adapters:
        assert np.array_equal(r1.adapters[t].u, r2.adapters[t].u)
        assert np.array_equal(r1.adapters[t].v, r2.adapters[t].v)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5))
def test_ta_wa_identity_property(seed, count):
    g = np.random.default_rng(seed)
    layout = (("w.w", (7,)),)
    theta0 = ParameterVector(g.normal(size=7), layout)
    models = [ParameterVector(g.normal(size=7), layout) for _ in range(count)]
    ta = task_arithmetic(theta0, models, 1.0 / count)
    wa = weight_average(models)
    assert np.abs(ta.data - wa.data).max() < 1e-12


def test_merge_spec_validation():
    with pytest.raises(ValueError):
        MergeSpec(method="nope")
    with pytest.raises(ValueError):
        MergeSpec(method="ta", scale=0.0)
    with pytest.raises(ValueError):
        MergeSpec(method="tm", trim_fraction=0.0)
