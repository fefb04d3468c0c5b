import numpy as np
import pytest

from anodev2.models import (BASELINE_TARGETS, OVERHEAD_BOUNDS, ModelSpec, build_model,
                            count_parameters)
from anodev2.gradcheck import model_fd_report, tiny_resnet4


def layer_sum(arch):
    """Hand count of trainable scalars, layer by layer."""
    conv = lambda ci, co, k, bias: ci * co * k * k + (co if bias else 0)  # noqa: E731
    bn = lambda c: 2 * c  # noqa: E731
    fc = lambda i, o: i * o + o  # noqa: E731
    block = lambda c: 2 * (conv(c, c, 3, False) + bn(c))  # noqa: E731
    if arch == "alexnet":
        return (conv(3, 64, 5, True) + bn(64) + conv(64, 64, 5, True) + bn(64)
                + fc(4096, 384) + fc(384, 192) + fc(192, 10))
    stem = conv(3, 16, 3, False) + bn(16)
    if arch == "resnet4":
        return stem + block(16) + fc(256, 10)
    down = conv(16, 32, 3, False) + bn(32) + conv(32, 32, 3, False) + bn(32) + conv(16, 32, 1, False) + bn(32)
    return stem + 2 * block(16) + down + block(32) + fc(128, 10)


@pytest.mark.parametrize("arch", ["alexnet", "resnet4", "resnet10"])
def test_baseline_counts(arch):
    total = count_parameters(build_model(ModelSpec(arch))).total
    assert total == layer_sum(arch) == BASELINE_TARGETS[arch]


@pytest.mark.parametrize("arch", ["alexnet", "resnet4", "resnet10"])
@pytest.mark.parametrize("variant", ["anodev2_c1", "anodev2_c2"])
def test_variant_overhead_within_bound(arch, variant):
    model = build_model(ModelSpec(arch, variant))
    report = count_parameters(model)
    over = report.total / BASELINE_TARGETS[arch] - 1
    assert 0 < over <= OVERHEAD_BOUNDS[variant]
    n_rda = sum(v for k, v in report.counts.items() if model.kinds[k] == "rda")
    n_evolved = sum(1 for k in report.counts if model.kinds[k] == "rda")
    assert n_rda == 4 * n_evolved


def test_report_total_and_csv():
    r = count_parameters(build_model(ModelSpec("resnet4")))
    assert r.total == sum(r.counts.values())
    lines = r.to_csv().splitlines()
    assert lines[0] == "layer,count" and lines[-1] == "total,7706"


def test_running_stats_not_counted():
    m = build_model(ModelSpec("resnet4", "anodev2_c1"))
    assert not set(m.buffers()) & set(count_parameters(m).counts)


@pytest.mark.parametrize("arch,fc_in", [("alexnet", 4096), ("resnet4", 256), ("resnet10", 128)])
def test_forward_shapes(arch, fc_in):
    m = build_model(ModelSpec(arch, precision="float32"))
    fc = "fc1.weight" if arch == "alexnet" else "fc.weight"
    assert m.params[fc].shape[1] == fc_in
    x = np.random.default_rng(0).standard_normal((1, 3, 32, 32))
    assert m.forward(x, train=False).shape == (1, 10)


def test_ode_blocks_where_residuals_are():
    names = lambda spec: sorted(b.name for b in build_model(spec).ode_blocks)  # noqa: E731
    assert names(ModelSpec("alexnet", "anodev2_c1")) == ["conv2"]
    assert names(ModelSpec("resnet4", "anodev2_c2")) == ["layer1_1"]
    assert names(ModelSpec("resnet10", "anodev2_c1")) == ["layer1_1", "layer1_2", "layer2_2"]
    assert names(ModelSpec("resnet10")) == []


def test_identical_images_identical_logits():
    m = build_model(ModelSpec("resnet4", "anodev2_c1", width=4, input_hw=8))
    x = np.repeat(np.random.default_rng(1).standard_normal((1, 3, 8, 8)), 2, axis=0)
    out = m.forward(x, train=False)
    np.testing.assert_array_equal(out[0], out[1])


def test_same_seed_same_weights_across_variants():
    a = build_model(ModelSpec("resnet4"), seed=3)
    b = build_model(ModelSpec("resnet4", "anodev2_c1"), seed=3)
    np.testing.assert_array_equal(a.params["layer1_1.conv1.weight"], b.params["layer1_1.conv1.weight"])
    np.testing.assert_array_equal(a.params["fc.weight"], b.params["fc.weight"])
    np.testing.assert_array_equal(b.params["layer1_1.conv0.rda"], [0.01, 0, 0, 0])


def test_frozen_single_step_variant_equals_baseline_bitwise():
    spec = dict(architecture="resnet4", width=4, input_hw=8, nonlinearity="identity")
    base = build_model(ModelSpec(**spec), seed=2)
    ode = build_model(ModelSpec(variant="anodev2_c1", n_z=1, **spec), seed=2)
    for k, v in ode.params.items():
        if ode.kinds[k] == "rda":
            v[:] = 0
    x = np.random.default_rng(0).standard_normal((2, 3, 8, 8))
    np.testing.assert_array_equal(base.forward(x, train=False), ode.forward(x, train=False))


def test_unknown_spec_fields():
    with pytest.raises(ValueError, match="architecture"):
        ModelSpec("vgg")
    with pytest.raises(ValueError, match="variant"):
        ModelSpec("resnet4", "c3")


@pytest.mark.parametrize("config", [0, 1, 2])
def test_width_reduced_resnet4_gradcheck(config):
    model, x, y = tiny_resnet4(config, seed=3)
    assert model_fd_report(model, x, y).max_error() <= 1e-5
