import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from rawdn.color_transform import color_forward, color_inverse, transform_variance
from rawdn.denoise_net import (
    ConvStage,
    DenoiserState,
    ModelWeights,
    StageOverrides,
    count_macs,
    count_params,
    denoise_sequence,
    denoise_stage,
    downsample,
    downsample_variance,
    fuse,
    fusion_weights,
    load_weights,
    propagate_variance,
    raw_variance,
    read_checkpoint,
    refine,
    refine_weights,
    run_sequence,
    save_weights,
    sidecar_path,
    step,
    upsample,
)
from rawdn.errors import BadMagicError, DataError, RangeError, ShapeMismatchError, TruncatedPayloadError, \
    UnknownTensorError
from rawdn.noise_model import VAR_FLOOR, NoiseParams
from rawdn.raw_data import Sequence

P = NoiseParams(0.01, 0.0004)
F64 = torch.float64


def random_weights(seed=0, widths=(16, 32, 16), scales=3, dtype=F64) -> ModelWeights:
    w = ModelWeights(widths, scales, seed=seed).to(dtype)
    w.reset_parameters(seed, zero_final=False, final_scale=0.5)
    with torch.no_grad():
        for stage in w.stages():
            for conv in stage.convs():
                conv.bias.uniform_(-0.1, 0.1, generator=torch.Generator().manual_seed(seed))
    return w


def rand(*shape, seed=0, lo=0.0, hi=1.0, dtype=F64):
    return lo + (hi - lo) * torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


# stage maps ---------------------------------------------------------------------------------

def test_zero_weights_give_half_maps():
    w = ModelWeights().double()
    for stage in w.stages():
        for conv in stage.convs():
            torch.nn.init.zeros_(conv.weight)
            torch.nn.init.zeros_(conv.bias)
    z, prev, v = rand(1, 4, 8, 8, seed=1), rand(1, 4, 8, 8, seed=2), rand(1, 4, 8, 8, seed=3)
    assert torch.equal(fusion_weights(z, prev, v, w), torch.full((1, 1, 8, 8), 0.5, dtype=F64))
    assert torch.equal(refine_weights(z, prev, v, w), torch.full((1, 1, 8, 8), 0.5, dtype=F64))


def test_default_init_is_identity_residual_and_half_maps():
    w = ModelWeights().double()
    fused, z, v = rand(2, 4, 8, 8, seed=1), rand(2, 4, 8, 8, seed=2), rand(2, 4, 8, 8, seed=3)
    assert torch.equal(denoise_stage(fused, z, v, w), fused)
    assert (fusion_weights(z, fused, v, w) == 0.5).all()


@given(st.integers(0, 1000), st.integers(2, 12), st.integers(2, 12))
def test_stage_maps_strictly_inside_unit_interval(seed, h, wd):
    w = random_weights(seed % 7, widths=(4, 6, 4))
    z, prev, v = rand(1, 4, h, wd, seed=seed), rand(1, 4, h, wd, seed=seed + 1), rand(1, 4, h, wd, seed=seed + 2)
    for m in (fusion_weights(z, prev, v, w), refine_weights(z, prev, v, w)):
        assert m.shape == (1, 1, h, wd)
        assert ((m > 0) & (m < 1)).all()
    assert denoise_stage(prev, z, v, w).shape == (1, 4, h, wd)


def test_stage_maps_deterministic():
    w = random_weights(2)
    z, prev, v = rand(1, 4, 8, 8, seed=1), rand(1, 4, 8, 8, seed=2), rand(1, 4, 8, 8, seed=3)
    assert torch.equal(fusion_weights(z, prev, v, w), fusion_weights(z, prev, v, w))
    assert torch.equal(refine_weights(z, prev, v, w), refine_weights(z, prev, v, w))


def test_fusion_uses_absolute_difference():
    w = random_weights(3)
    z, prev, v = rand(1, 4, 8, 8, seed=1), rand(1, 4, 8, 8, seed=2), rand(1, 4, 8, 8, seed=3)
    assert torch.equal(fusion_weights(z, prev, v, w), fusion_weights(prev, z, v, w))


def test_stage_shape_mismatch():
    w = ModelWeights()
    with pytest.raises(ShapeMismatchError):
        fusion_weights(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 8, 6), torch.zeros(1, 4, 8, 8), w)
    with pytest.raises(ShapeMismatchError):
        denoise_stage(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 4, 8), torch.zeros(1, 4, 8, 8), w)


def test_conv_stage_layout():
    s = ConvStage(8, 16, 1, "sigmoid")
    for conv in s.convs():
        assert conv.kernel_size == (3, 3) and conv.padding_mode == "reflect"
    assert count_params(s.layer1) == 8 * 16 * 9 + 16 == 1168


# fuse / propagate / refine ----------------------------------------------------------------------

def test_fuse_endpoints_and_midpoint():
    z, prev = rand(1, 4, 3, 3, seed=1), rand(1, 4, 3, 3, seed=2)
    one, zero = torch.ones(1, 1, 3, 3, dtype=F64), torch.zeros(1, 1, 3, 3, dtype=F64)
    assert torch.equal(fuse(z, prev, one), z)
    assert torch.equal(fuse(z, prev, zero), prev)
    mid = fuse(torch.full((1, 4, 1, 1), 0.4, dtype=F64), torch.full((1, 4, 1, 1), 0.2, dtype=F64),
               torch.full((1, 1, 1, 1), 0.5, dtype=F64))
    assert mid.flatten().tolist() == pytest.approx([0.3] * 4, abs=1e-15)


def test_fuse_rejects_out_of_range_weights():
    with pytest.raises(RangeError):
        fuse(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 2), torch.full((1, 1, 2, 2), 1.5))
    with pytest.raises(RangeError):
        refine(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 2), torch.full((1, 1, 2, 2), -0.1))


def test_propagate_variance_examples():
    vz, vp = torch.full((1, 4, 2, 2), 0.04, dtype=F64), torch.full((1, 4, 2, 2), 0.02, dtype=F64)
    assert torch.equal(propagate_variance(torch.ones(1, 1, 2, 2, dtype=F64), vz, vp), vz)
    half = propagate_variance(torch.full((1, 1, 2, 2), 0.5, dtype=F64), vz, vp)
    assert torch.allclose(half, torch.full_like(half, 0.015), rtol=1e-14)


def test_propagate_variance_floor():
    out = propagate_variance(torch.full((1, 1, 1, 1), 0.5), torch.zeros(1, 4, 1, 1), torch.zeros(1, 4, 1, 1))
    assert (out == VAR_FLOOR).all()


def test_refine_endpoints():
    fused, den = rand(1, 4, 3, 3, seed=1), rand(1, 4, 3, 3, seed=2)
    assert torch.equal(refine(fused, den, torch.ones(1, 1, 3, 3, dtype=F64)), den)
    assert torch.equal(refine(fused, den, torch.zeros(1, 1, 3, 3, dtype=F64)), fused)
    assert torch.equal(refine(fused, fused, rand(1, 1, 3, 3, seed=3)), fused)


unit = st.floats(0, 1)
value = st.floats(-2, 2)


@given(value, value, unit)
def test_convex_combinations_bounded(a, b, g):
    x, y, m = (torch.tensor(v, dtype=F64).reshape(1, 1, 1, 1) for v in (a, b, g))
    for out in (fuse(x, y, m), refine(x, y, m)):
        assert min(a, b) - 1e-15 <= out.item() <= max(a, b) + 1e-15


@given(unit, st.floats(1e-8, 1), st.floats(1e-8, 1))
def test_propagated_variance_not_above_inputs(g, vz, vp):
    gamma = torch.tensor(g, dtype=F64).reshape(1, 1, 1, 1)
    out = propagate_variance(gamma, torch.tensor(vz, dtype=F64).reshape(1, 1, 1, 1),
                             torch.tensor(vp, dtype=F64).reshape(1, 1, 1, 1))
    assert out.item() <= max(vz, vp) * (1 + 1e-12)


# pyramid -------------------------------------------------------------------------------------

def test_pyramid_exact_on_constant_image():
    c = torch.full((1, 4, 8, 8), 0.37, dtype=F64)
    assert torch.equal(downsample(c), torch.full((1, 4, 4, 4), 0.37, dtype=F64))
    assert torch.allclose(upsample(downsample(c)), c, rtol=0, atol=1e-15)


def test_downsample_variance_is_mean_over_four():
    v = rand(1, 4, 4, 4, seed=4)
    expected = v.reshape(1, 4, 2, 2, 2, 2).mean(dim=(3, 5)) / 4
    assert torch.allclose(downsample_variance(v), expected, rtol=1e-14)


def test_constant_frame_zero_weights_passes_through():
    w = ModelWeights().double()
    z = torch.full((1, 4, 16, 16), 0.42, dtype=F64)
    state, outs = DenoiserState(), []
    for _ in range(3):
        out, state = step(state, z, P, w)
        outs.append(out)
    for out in outs:
        assert (out - z).abs().max().item() < 1e-12


# step ----------------------------------------------------------------------------------------

def test_first_frame_identity_any_weights():
    for seed in range(3):
        w = random_weights(seed)
        z = rand(1, 4, 16, 16, seed=seed, lo=-0.1, hi=1.1)
        _, state = step(DenoiserState(), z, P, w)
        assert torch.equal(state.fused[0], color_forward(z, w.color.M))
        for s in range(1, w.scales):
            assert torch.equal(state.fused[s], downsample(state.fused[s - 1]))


def test_first_frame_variance_is_transformed_raw_variance():
    w = random_weights(1)
    z = rand(1, 4, 8, 8, seed=5)
    _, state = step(DenoiserState(), z, P, w)
    expected = transform_variance(raw_variance(z, P), w.color.M)
    assert torch.allclose(state.variance[0], expected, rtol=1e-14)


def test_state_shapes_and_floor():
    w = random_weights(2)
    state = DenoiserState()
    for t in range(3):
        _, state = step(state, rand(1, 4, 16, 8, seed=t), NoiseParams(0.0, 0.0), w)
        for s in range(3):
            assert state.fused[s].shape == (1, 4, 16 // 2**s, 8 // 2**s)
            assert state.variance[s].shape == state.fused[s].shape
            assert (state.variance[s] >= VAR_FLOOR).all()
    assert state.t == 3


def test_unbatched_frames_accepted():
    w = random_weights(3)
    z = rand(4, 8, 8, seed=1)
    out, _ = step(DenoiserState(), z, P, w)
    batched, _ = step(DenoiserState(), z[None], P, w)
    assert out.shape == (4, 8, 8)
    assert torch.equal(out, batched[0])


def test_step_shape_errors():
    w = ModelWeights()
    with pytest.raises(ShapeMismatchError):
        step(DenoiserState(), torch.zeros(1, 4, 6, 8), P, w)  # 6 not divisible by 4
    _, state = step(DenoiserState(), torch.zeros(1, 4, 8, 8), P, w)
    with pytest.raises(ShapeMismatchError):
        step(state, torch.zeros(1, 4, 16, 8), P, w)
    with pytest.raises(ShapeMismatchError):
        step(DenoiserState(), torch.zeros(1, 3, 8, 8), P, w)


def direct_stages(w, frames, params):
    """One-scale pipeline written out stage by stage, no pyramid."""
    prev = prev_var = None
    outs = []
    inv = torch.linalg.inv(w.color.M)
    for z in frames:
        zc = color_forward(z, w.color.M)
        v = torch.clamp(transform_variance(raw_variance(z, params), w.color.M), min=w.eps_var)
        if prev is None:
            prev, prev_var = zc, v
            gamma = fusion_weights(zc, prev, v, w)
            fused, var = fuse(zc, prev, gamma), v
        else:
            gamma = fusion_weights(zc, prev, v, w)
            fused, var = fuse(zc, prev, gamma), propagate_variance(gamma, v, prev_var, w.eps_var)
        den = denoise_stage(fused, zc, var, w)
        omega = refine_weights(den, fused, var, w)
        outs.append(color_forward(refine(fused, den, omega), inv))
        prev, prev_var = fused, var
    return torch.stack(outs, dim=1)


def test_single_scale_equals_direct_stages():
    w = random_weights(4, scales=1)
    frames = rand(2, 3, 4, 6, 10, seed=9)
    expected = direct_stages(w, frames.unbind(1), P)
    assert torch.allclose(run_sequence(w, frames, P), expected, rtol=0, atol=1e-14)


def test_weight_sharing_by_identity():
    w = random_weights(5)
    calls = {name: [] for name in ("fusion", "denoise", "refine")}
    hooks = [getattr(w, name).register_forward_hook(
        lambda mod, inp, out, name=name: calls[name].append((mod, tuple(p for p in mod.parameters()), inp[0].shape)))
        for name in calls]
    step(DenoiserState(), rand(1, 4, 16, 16, seed=1), P, w)
    for h in hooks:
        h.remove()
    assert [c[2][-1] for c in calls["fusion"]] == [16, 8, 4]
    assert [c[2][-1] for c in calls["denoise"]] == [16, 8, 4]
    assert [c[2][-1] for c in calls["refine"]] == [16]
    for name, entries in calls.items():
        module, params = entries[0][0], entries[0][1]
        assert all(e[0] is module for e in entries)
        assert all(all(p is q for p, q in zip(e[1], params)) for e in entries)
    # one set of stage parameters only
    assert count_params(w) == sum(count_params(s) for s in w.stages()) + 16


def test_zero_weight_static_scene_has_no_drift():
    w = ModelWeights().double()
    z = rand(1, 4, 16, 16, seed=2)
    state, prev = DenoiserState(), None
    for _ in range(10):
        out, state = step(state, z, P, w)
        if prev is not None:
            assert (out - prev).abs().max().item() < 1e-5
        prev = out


def test_denoise_sequence_single_frame():
    # default init: zero residual, so frame 0 is the color round trip of z_0
    w = ModelWeights()
    seq = Sequence(rand(1, 4, 8, 8, seed=3).numpy())
    out = denoise_sequence(seq, P, w)
    z = torch.from_numpy(np.array(seq.data))
    with torch.no_grad():
        expected = color_inverse(color_forward(z, w.color.M), w.color.M)
    assert out.length == 1
    assert np.allclose(out.data, expected.numpy(), rtol=0, atol=1e-6)
    assert np.allclose(out.data, seq.data, rtol=1e-5, atol=1e-6)


def test_denoise_sequence_deterministic_and_length():
    w = random_weights(7, dtype=torch.float32)
    seq = Sequence(rand(5, 4, 8, 8, seed=4).numpy())
    a, b = denoise_sequence(seq, P, w), denoise_sequence(seq, P, w)
    assert a == b and a.length == 5


def test_running_mean_override():
    w = random_weights(8)
    z = rand(1, 12, 4, 8, 8, seed=5)
    ov = StageOverrides(gamma=lambda t, s: 1.0 / (t + 1), omega=lambda t, s: 0.0, skip_denoise=True)
    out = run_sequence(w, z, P, ov)
    running = torch.cumsum(z, dim=1) / torch.arange(1, 13, dtype=F64).reshape(1, 12, 1, 1, 1)
    assert (out - running).abs().max().item() < 1e-6


def test_denoise_sequence_requires_packed():
    with pytest.raises(ShapeMismatchError):
        denoise_sequence(Sequence(np.zeros((1, 1, 4, 4))), P, ModelWeights())


# counting --------------------------------------------------------------------------------------

def conv_params(cin, cout):
    return cin * cout * 9 + cout


def test_param_count_matches_shape_walk():
    f, d, r = 16, 32, 16
    expected = (16
                + conv_params(8, f) + conv_params(f, f) + conv_params(f, 1)
                + conv_params(12, d) + conv_params(d, d) + conv_params(d, 4)
                + conv_params(12, r) + conv_params(r, r) + conv_params(r, 1))
    assert expected == 21750
    assert count_params(ModelWeights()) == expected < 350_000


def test_mac_count_matches_hand_sum():
    # per packed pixel: color 3 x 16; fusion (8*16+16*16+16)*9 = 3600 and denoise
    # (12*32+32*32+32*4)*9 = 13824 at scales 1, 1/4, 1/16; refine (12*16+16*16+16)*9 = 4176
    per_pixel = 48 + (3600 + 13824) * (1 + 1 / 4 + 1 / 16) + 4176
    assert count_macs(ModelWeights(), 64, 64, 25) == int(per_pixel * 64 * 64 * 25) == 2_774_323_200


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 4))
def test_mac_count_scales_by_four(h, wd, frames):
    w = ModelWeights(widths=(4, 6, 4))
    assert count_macs(w, 8 * h, 8 * wd, frames) * 4 == count_macs(w, 16 * h, 16 * wd, frames)


# checkpoints -------------------------------------------------------------------------------------

def test_checkpoint_round_trip_byte_identical(tmp_path):
    w = random_weights(9, widths=(4, 6, 4), scales=2, dtype=torch.float32)
    save_weights(w, tmp_path / "a.rvdw")
    loaded = load_weights(tmp_path / "a.rvdw")
    assert loaded.widths == (4, 6, 4) and loaded.scales == 2
    save_weights(loaded, tmp_path / "b.rvdw")
    assert (tmp_path / "a.rvdw").read_bytes() == (tmp_path / "b.rvdw").read_bytes()
    for name, t in w.named_tensors().items():
        assert torch.equal(loaded.named_tensors()[name], t)


def test_checkpoint_names(tmp_path):
    save_weights(ModelWeights(), tmp_path / "m.rvdw")
    names = list(read_checkpoint(tmp_path / "m.rvdw"))
    assert "color.M" in names and "fusion.layer1.kernel" in names and "refine.out.bias" in names
    assert len(names) == 19


def test_checkpoint_truncated(tmp_path):
    save_weights(ModelWeights(), tmp_path / "m.rvdw")
    blob = (tmp_path / "m.rvdw").read_bytes()
    (tmp_path / "m.rvdw").write_bytes(blob[:-10])
    with pytest.raises(TruncatedPayloadError):
        load_weights(tmp_path / "m.rvdw")


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "m.rvdw").write_bytes(b"RVDS\0\0\0\0")
    with pytest.raises(BadMagicError):
        load_weights(tmp_path / "m.rvdw")


def test_checkpoint_width_mismatch_names_tensor(tmp_path):
    save_weights(ModelWeights(widths=(16, 32, 16)), tmp_path / "m.rvdw")
    with pytest.raises(ShapeMismatchError, match="fusion.layer1.kernel"):
        load_weights(tmp_path / "m.rvdw", widths=(32, 32, 16))


def test_checkpoint_unknown_and_missing_tensors(tmp_path):
    small = ModelWeights(widths=(4, 6, 4))
    save_weights(small, tmp_path / "m.rvdw")
    blob = (tmp_path / "m.rvdw").read_bytes()
    (tmp_path / "x.rvdw").write_bytes(blob.replace(b"color.M", b"color.Q"))
    sidecar_path(tmp_path / "x.rvdw").write_text(sidecar_path(tmp_path / "m.rvdw").read_text())
    with pytest.raises(UnknownTensorError):
        load_weights(tmp_path / "x.rvdw")
    # header count of zero: every tensor missing
    (tmp_path / "e.rvdw").write_bytes(b"RVDW" + (1).to_bytes(4, "little") + (0).to_bytes(4, "little"))
    with pytest.raises(DataError, match="lacks"):
        load_weights(tmp_path / "e.rvdw")
