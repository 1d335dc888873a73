import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rand
from xview.fusion import FUSION_MODES, BidirectionalFusion, GatedMix, fuse, gated_mix
from xview.substrate import grad_check, init_uniform_


def block(mode="bix", d=8, heads=2, granularity="position", seed=0):
    return init_uniform_(BidirectionalFusion(d, heads, mode, granularity).double(), torch.Generator().manual_seed(seed))


def test_unknown_mode_and_reserved_mode():
    with pytest.raises(ValueError):
        BidirectionalFusion(8, mode="sum")
    with pytest.raises(NotImplementedError):
        BidirectionalFusion(8, mode="bix_deformable")
    assert "bix_deformable" in FUSION_MODES


def test_length_mismatch_is_explained():
    with pytest.raises(ValueError, match="k_ratio"):
        block()(rand(5, 8), rand(4, 8))
    with pytest.raises(ValueError, match="k_ratio"):
        fuse(rand(2, 3), rand(3, 3))


def test_gate_limits():
    z, r = rand(4, 3), rand(4, 3, seed=1)
    lin = torch.nn.Linear(6, 1).double()
    with torch.no_grad():
        lin.weight.zero_()
        lin.bias.fill_(-1e4)
    out, g = gated_mix(z, r, lin)
    assert torch.equal(out, z) and float(g.max()) == 0.0
    with torch.no_grad():
        lin.bias.fill_(1e4)
    out, g = gated_mix(z, r, lin)
    assert torch.equal(out, r)


def test_gate_half_is_midpoint():
    z, r = rand(4, 3), rand(4, 3, seed=1)
    lin = torch.nn.Linear(6, 1).double()
    with torch.no_grad():
        lin.weight.zero_()
        lin.bias.zero_()
    out, _ = gated_mix(z, r, lin)
    assert torch.allclose(out, 0.5 * (z + r), atol=1e-15)


def test_channel_gate_shape():
    out, g = GatedMix(8, "channel").double()(rand(5, 8), rand(5, 8, seed=1))
    assert g.shape == (5, 8) and out.shape == (5, 8)
    with pytest.raises(ValueError):
        GatedMix(8, "frame")


def test_force_zero_gates_reproduces_average():
    z_ego, z_exo = rand(6, 8), rand(6, 8, seed=1)
    gated = block("bix")
    gated.force_zero_gates = True
    plain = block("average")
    assert torch.equal(gated(z_ego, z_exo).fused, plain(z_ego, z_exo).fused)


def test_single_direction_variants_freeze_one_gate():
    z_ego, z_exo = rand(6, 8), rand(6, 8, seed=1)
    e2 = block("exo2ego")(z_ego, z_exo)
    assert torch.equal(e2.f_exo, z_exo) and float(e2.gamma_x.abs().max()) == 0.0
    x2 = block("ego2exo")(z_ego, z_exo)
    assert torch.equal(x2.f_ego, z_ego) and float(x2.gamma_e.abs().max()) == 0.0


def test_single_token_streams():
    f = block()
    e, x = rand(1, 8), rand(1, 8, seed=1)
    state = f(e, x)
    assert torch.allclose(state.e_star, f.exo_to_ego.out_proj(f.exo_to_ego.v_proj(x)), atol=1e-14)
    assert torch.allclose(state.x_star, f.ego_to_exo.out_proj(f.ego_to_exo.v_proj(e)), atol=1e-14)


def test_swapping_views_swaps_roles():
    # with tied direction parameters the block is symmetric in its two inputs
    f = block()
    f.ego_to_exo.load_state_dict(f.exo_to_ego.state_dict())
    f.gate_exo.load_state_dict(f.gate_ego.state_dict())
    a, b = rand(5, 8), rand(5, 8, seed=1)
    assert torch.allclose(f(a, b).fused, f(b, a).fused, atol=1e-14)


def test_concat_modes():
    e, x = rand(4, 8), rand(4, 8, seed=1)
    assert block("concat_time")(e, x).fused.shape == (8, 8)
    assert block("concat_channel")(e, x).fused.shape == (4, 8)
    with pytest.raises(ValueError):
        block("concat_channel")(e, x[:3])
    assert block("concat_time")(e, x[:3]).fused.shape == (7, 8)


@settings(deadline=None, max_examples=20)
@given(st.integers(1, 7), st.sampled_from(["bix", "exo2ego", "ego2exo", "average", "concat_channel"]))
def test_output_shape_matches_ego(k, mode):
    assert block(mode)(rand(k, 8), rand(k, 8, seed=1)).fused.shape == (k, 8)


@pytest.mark.parametrize("granularity", ["position", "channel"])
def test_fusion_gradcheck(granularity):
    f = block("bix", d=4, heads=2, granularity=granularity, seed=3)
    rep = grad_check(lambda e, x: f(e, x).fused, [rand(3, 4, seed=1), rand(3, 4, seed=2)], tol=1e-6)
    assert rep.passed, rep
