import numpy as np
import pytest

from voxdiff.errors import ConfigError, DimensionError
from voxdiff.gradcheck import TINY_PLAN, _draw, check_srb, check_vdm
from voxdiff.sparse_conv import REGULAR, SUBMANIFOLD, ConvSpec, build_rulebook, conv_backward
from voxdiff.vdm import (
    SRBSpec,
    VDMSpec,
    VDMStage,
    build_vdm,
    only_diffusion_spec,
    parameters,
    srb_backward,
    srb_forward,
    vdm_backward,
    vdm_forward,
    vdm_output_shape,
)
from voxdiff.voxel_grid import SparseTensor, densify

from helpers import random_tensor
from oracles import dense_conv3d, regular_active_set

SMALL_PLAN = ((4, 3), (3, 4), (4, 5))


def identity_srb(channels):
    spec = SRBSpec.create(channels)
    spec.conv1.weights[13] = np.eye(channels)
    spec.conv2.weights[13] = np.eye(channels)
    return spec


def test_srb_zero_weights_passes_skip():
    rng = np.random.default_rng(0)
    t = random_tensor(rng, (4, 4, 4), channels=3)
    t = t.with_features(np.abs(t.features))
    out = srb_forward(t, SRBSpec.create(3))
    assert out == t


def test_srb_identity_kernels_double_input():
    rng = np.random.default_rng(1)
    t = random_tensor(rng, (4, 4, 4), channels=2)
    t = t.with_features(np.abs(t.features))
    out = srb_forward(t, identity_srb(2))
    np.testing.assert_array_equal(out.features, 2 * t.features)


def _dense_subm(dense, mask, spec):
    out = dense_conv3d(dense, spec.weights, spec.bias, spec.kernel, spec.stride, spec.padding)
    return out * mask[..., None]


def test_srb_matches_dense_composition():
    rng = np.random.default_rng(2)
    for _ in range(5):
        t = random_tensor(rng, (5, 5, 5), channels=2)
        spec = SRBSpec.create(2, rng=rng)
        mask = np.zeros(t.shape, bool)
        mask[tuple(t.coords.T)] = True
        x = densify(t)
        h = np.maximum(_dense_subm(x, mask, spec.conv1), 0)
        h = _dense_subm(h, mask, spec.conv2)
        expected = np.maximum(x + h, 0)
        out = srb_forward(t, spec)
        got = expected[tuple(out.coords.T)]
        assert np.abs(out.features - got).max() <= 1e-9
        np.testing.assert_array_equal(out.coords, t.coords)


def test_srb_validation():
    with pytest.raises(ConfigError):
        SRBSpec(ConvSpec.create(2, 2, 3, 1), ConvSpec.create(2, 2, 3, mode=SUBMANIFOLD))
    with pytest.raises(ConfigError):
        SRBSpec(ConvSpec.create(2, 3, 3, mode=SUBMANIFOLD), ConvSpec.create(3, 3, 3, mode=SUBMANIFOLD))
    with pytest.raises(DimensionError):
        srb_forward(random_tensor(np.random.default_rng(0), (3, 3, 3), 3), SRBSpec.create(2))


def test_full_vdm_resolution_and_channels():
    rng = np.random.default_rng(3)
    spec = build_vdm(2, rng=rng)
    t = random_tensor(rng, (8, 16, 16), channels=2, density=0.05)
    out = vdm_forward(t, spec)
    assert out.shape == (8, 4, 4)
    assert out.channels == 128
    assert vdm_output_shape((8, 16, 16), spec) == (8, 4, 4)
    assert spec.stride_product() == (1, 4, 4)


def test_default_wiring():
    spec = build_vdm(2, rng=np.random.default_rng(0))
    assert spec.lift.shape == (2, 64)
    widths = [(st.subm.in_channels, st.subm.out_channels) for st in spec.stages]
    assert widths == [(64, 32), (32, 64), (64, 128)]
    strides = [st.spconv.stride for st in spec.stages]
    assert strides == [(1, 2, 2), (1, 2, 2), (1, 1, 1)]
    assert all(st.spconv.kernel == (3, 3, 3) and st.spconv.padding == (1, 1, 1) for st in spec.stages)
    assert build_vdm(2, rng=np.random.default_rng(0), z_stride=2).stride_product() == (4, 4, 4)


def test_vdm_spec_validation():
    spec = build_vdm(2, rng=np.random.default_rng(0), channel_plan=SMALL_PLAN, lift_channels=4)
    with pytest.raises(ConfigError):
        VDMSpec(spec.lift, spec.stages[:1])
    with pytest.raises(ConfigError):
        VDMSpec(spec.lift, spec.stages[1:])
    with pytest.raises(ConfigError):
        build_vdm(2, channel_plan=((64, 32), (64, 64)))
    with pytest.raises(ConfigError):
        VDMSpec(spec.lift, (), True, ConvSpec.create(4, 4, 3, 2))


def test_only_diffusion_single_voxel():
    spec = build_vdm(1, rng=np.random.default_rng(0), only_diffusion=True)
    t = SparseTensor([[2, 2, 2]], [[1.0]], (5, 5, 5))
    out = vdm_forward(t, spec)
    assert out.num_active == 27
    assert out.shape == (5, 5, 5)
    assert out.channels == 64


@pytest.mark.parametrize("seed", range(3))
def test_active_set_matches_stagewise_oracle(seed):
    rng = np.random.default_rng(seed)
    spec = build_vdm(2, rng=rng, channel_plan=SMALL_PLAN, lift_channels=4)
    t = random_tensor(rng, (4, 16, 16), channels=2, density=0.03)
    active = {tuple(c) for c in t.coords.tolist()}
    shape = t.shape
    for st in spec.stages:
        # submanifold layers keep the set; each regular conv dilates it
        sp = st.spconv
        active = regular_active_set(active, shape, sp.kernel, sp.stride, sp.padding)
        shape = tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(shape, sp.kernel, sp.stride, sp.padding))
    out = vdm_forward(t, spec)
    assert {tuple(c) for c in out.coords.tolist()} == active
    assert out.shape == shape


def test_only_diffusion_superset():
    rng = np.random.default_rng(4)
    spec = build_vdm(2, rng=rng, only_diffusion=True, lift_channels=4)
    for _ in range(10):
        t = random_tensor(rng, (4, 6, 6), channels=2, density=rng.uniform(0.02, 0.5))
        out = vdm_forward(t, spec)
        assert {tuple(c) for c in t.coords.tolist()} <= {tuple(c) for c in out.coords.tolist()}


def test_empty_input_totality():
    spec = build_vdm(2, rng=np.random.default_rng(0))
    out = vdm_forward(SparseTensor.empty((8, 16, 16), 2), spec)
    assert out.num_active == 0
    assert out.shape == (8, 4, 4) and out.channels == 128
    od = build_vdm(2, rng=np.random.default_rng(0), only_diffusion=True)
    out = vdm_forward(SparseTensor.empty((3, 3, 3), 2), od)
    assert out.num_active == 0 and out.channels == 64


def test_lifted_input_accepted():
    rng = np.random.default_rng(5)
    spec = build_vdm(2, rng=rng, channel_plan=SMALL_PLAN, lift_channels=4)
    t = random_tensor(rng, (4, 8, 8), channels=2)
    lifted = t.with_features(t.features @ spec.lift)
    assert vdm_forward(lifted, spec) == vdm_forward(t, spec)
    with pytest.raises(DimensionError):
        vdm_forward(random_tensor(rng, (4, 8, 8), channels=3), spec)


def test_determinism():
    t = random_tensor(np.random.default_rng(6), (4, 8, 8), channels=2)
    a = vdm_forward(t, build_vdm(2, rng=np.random.default_rng(42)))
    b = vdm_forward(t, build_vdm(2, rng=np.random.default_rng(42)))
    assert a == b


def test_backward_zero_grad():
    rng = np.random.default_rng(7)
    spec = build_vdm(2, rng=rng, channel_plan=SMALL_PLAN, lift_channels=4)
    t = random_tensor(rng, (4, 8, 8), channels=2)
    out = vdm_forward(t, spec)
    gi, grads = vdm_backward(t, spec, np.zeros_like(out.features))
    assert not gi.any()
    assert set(grads) == set(parameters(spec))
    assert all(not g.any() for g in grads.values())


def test_backward_geometry_mismatch():
    rng = np.random.default_rng(7)
    spec = build_vdm(2, rng=rng, channel_plan=SMALL_PLAN, lift_channels=4)
    t = random_tensor(rng, (4, 8, 8), channels=2)
    with pytest.raises(DimensionError):
        vdm_backward(t, spec, np.zeros((1, 5)))


def test_only_diffusion_backward_reduces_to_conv_backward():
    rng = np.random.default_rng(8)
    conv = ConvSpec.create(2, 3, 3, 1, mode=REGULAR, rng=rng)
    spec = only_diffusion_spec(conv)
    t = random_tensor(rng, (4, 5, 5), channels=2)
    out = vdm_forward(t, spec)
    g = rng.normal(size=out.features.shape)
    gi, grads = vdm_backward(t, spec, g)
    ci, cw, cb = conv_backward(t, conv, build_rulebook(t, conv), g)
    np.testing.assert_array_equal(grads["diffusion.weight"], cw)
    np.testing.assert_array_equal(grads["diffusion.bias"], cb)
    np.testing.assert_array_equal(gi, ci)


def test_srb_backward_finite_differences():
    t, spec = _draw(3, lambda r: (random_tensor(r, (4, 5, 5), 2), SRBSpec.create(2, rng=r)))
    report = check_srb(t, spec, 1e-5)
    assert report.passed, report.worst


def test_srb_backward_input_gradient_is_adjoint_on_linear_region():
    t, spec = _draw(4, lambda r: (random_tensor(r, (4, 5, 5), 2), SRBSpec.create(2, rng=r)))
    g = np.random.default_rng(0).normal(size=t.features.shape)
    gi, _ = srb_backward(t, spec, g)
    step = 1e-6
    d = np.random.default_rng(1).normal(size=t.features.shape)
    up = srb_forward(t.with_features(t.features + step * d), spec).features
    down = srb_forward(t.with_features(t.features - step * d), spec).features
    directional = np.sum(g * (up - down) / (2 * step))
    assert abs(directional - np.sum(gi * d)) <= 1e-6 * max(1.0, abs(directional))


def test_full_stack_backward_finite_differences():
    def make(r):
        return random_tensor(r, (4, 8, 8), 2), build_vdm(2, rng=r, channel_plan=TINY_PLAN, lift_channels=3)

    t, spec = _draw(11, make)
    report = check_vdm(t, spec, 1e-5)
    assert report.passed, report.worst
    assert len(report.errors) == len(parameters(spec))


def test_manual_stage_construction():
    rng = np.random.default_rng(9)
    stages = []
    width = 4
    for i, cout in enumerate((3, 4, 5)):
        stride = (1, 2, 2) if i < 2 else (1, 1, 1)
        stages.append(VDMStage(
            ConvSpec.create(width, cout, 3, mode=SUBMANIFOLD, rng=rng),
            SRBSpec.create(cout, rng=rng),
            ConvSpec.create(cout, cout, 3, stride, rng=rng),
        ))
        width = cout
    spec = VDMSpec(rng.normal(size=(2, 4)), tuple(stages))
    assert spec.out_channels == 5
    assert [n for n, _ in spec.layers()][:4] == [
        "stage0.subm", "stage0.srb.conv1", "stage0.srb.conv2", "stage0.spconv"]
