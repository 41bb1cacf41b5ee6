"""Objective terms: hand-checked values, endpoint identities, detach rules."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdfrecon import autodiff as ad
from sdfrecon import losses, tensogrid

from conftest import sphere_sdf


# --- color ---------------------------------------------------------------


def test_color_loss_zero_when_equal():
    tape = ad.Tape(recording=False)
    c = tape.const(np.random.default_rng(0).random((16, 3)).astype(np.float32))
    assert losses.color_loss(c, c.data.copy()).data == 0.0


def test_color_loss_single_pixel_value():
    tape = ad.Tape(recording=False)
    c = tape.const(np.ones((1, 3), dtype=np.float32))
    out = losses.color_loss(c, np.zeros((1, 3), dtype=np.float32))
    assert np.isclose(out.data, 3.0)


def test_color_loss_matches_hand_sum():
    tape = ad.Tape(recording=False)
    c = tape.const(np.array([[0.2, 0.4, 0.6], [1.0, 0.0, 0.5]], dtype=np.float32))
    gt = np.array([[0.0, 0.5, 0.5], [0.9, 0.1, 0.5]], dtype=np.float32)
    ref = (((c.data - gt) ** 2).sum(axis=1)).mean()
    assert np.isclose(losses.color_loss(c, gt).data, ref, rtol=1e-6)


# --- roughness-aware blending ---------------------------------------------


def _per_ray_pair(rng, n=8):
    tape = ad.Tape(recording=False)
    l_rad = tape.const(rng.random(n).astype(np.float32))
    l_ref = tape.const(rng.random(n).astype(np.float32))
    return tape, l_rad, l_ref


def test_roughness_weight_one_is_radiance_loss():
    tape, l_rad, l_ref = _per_ray_pair(np.random.default_rng(1))
    out = losses.roughness_aware_loss(l_rad, l_ref, np.ones(8))
    assert np.isclose(out.data, l_rad.data.mean(), rtol=1e-7)


def test_roughness_weight_zero_is_reflectance_loss():
    tape, l_rad, l_ref = _per_ray_pair(np.random.default_rng(2))
    out = losses.roughness_aware_loss(l_rad, l_ref, np.zeros(8))
    assert np.isclose(out.data, l_ref.data.mean(), rtol=1e-7)


def test_roughness_weight_half_is_midpoint():
    tape, l_rad, l_ref = _per_ray_pair(np.random.default_rng(3))
    out = losses.roughness_aware_loss(l_rad, l_ref, np.full(8, 0.5))
    assert np.isclose(out.data, 0.5 * (l_rad.data + l_ref.data).mean(), rtol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_roughness_blend_stays_between_losses(seed):
    rng = np.random.default_rng(seed)
    tape, l_rad, l_ref = _per_ray_pair(rng)
    r_bar = rng.random(8)
    blend = r_bar * l_rad.data + (1 - r_bar) * l_ref.data
    lo = np.minimum(l_rad.data, l_ref.data)
    hi = np.maximum(l_rad.data, l_ref.data)
    assert np.all(blend >= lo - 1e-7) and np.all(blend <= hi + 1e-7)
    out = losses.roughness_aware_loss(l_rad, l_ref, r_bar)
    assert lo.mean() - 1e-6 <= out.data <= hi.mean() + 1e-6


def test_roughness_weighting_path_carries_no_gradient():
    # r_bar is composited outside the tape; the weighting path must leave
    # the roughness parameters untouched even though the values depend on them
    store = ad.ParamStore()
    r_param = store.add("r", np.array([0.2, -0.3, 0.8, 0.1]))
    c_param = store.add("c", np.array([0.5, 0.1, 0.9, 0.4]))
    tape = ad.Tape()
    r = ad.sigmoid(tape.leaf(r_param))
    w = np.full((4, 3), 1 / 3.0)
    r_bar = losses.composite_roughness(w, np.repeat(r.data[:, None], 3, axis=1))
    cv = tape.leaf(c_param)
    l_rad = ad.mul(cv, cv)
    l_ref = ad.mul(cv, 0.5)
    out = losses.roughness_aware_loss(l_rad, l_ref, r_bar)
    tape.backward(out)
    assert np.all(r_param.grad == 0.0)
    assert np.any(c_param.grad != 0.0)


def test_roughness_shading_path_still_has_gradient():
    store = ad.ParamStore()
    r_param = store.add("r", np.array([0.2, -0.3, 0.8, 0.1]))
    tape = ad.Tape()
    r = ad.sigmoid(tape.leaf(r_param))
    r_bar = np.clip(r.data, 0, 1)
    l_rad = tape.const(np.full(4, 0.25))
    l_ref = ad.mul(ad.sub(r, 0.3), ad.sub(r, 0.3))  # shading depends on r
    out = losses.roughness_aware_loss(l_rad, l_ref, r_bar)
    tape.backward(out)
    assert np.any(r_param.grad != 0.0)


def test_composite_roughness_empty_ray_defaults_to_one():
    w = np.array([[0.0, 0.0], [0.5, 0.25]])
    r = np.array([[0.3, 0.3], [0.2, 0.8]])
    out = losses.composite_roughness(w, r)
    assert out[0] == 1.0
    assert np.isclose(out[1], (0.5 * 0.2 + 0.25 * 0.8) / 0.75)


# --- eikonal and hessian ----------------------------------------------------


def test_eikonal_zero_for_unit_linear_sdf():
    p = np.random.default_rng(4).uniform(-0.5, 0.5, (64, 3)).astype(np.float32)
    tape = ad.Tape(recording=False)
    out = losses.eikonal_loss(tape, p, lambda t, pv: pv[:, 2], h=0.01)
    assert out.data < 1e-10


def test_eikonal_one_for_doubled_linear_sdf():
    p = np.random.default_rng(5).uniform(-0.5, 0.5, (64, 3)).astype(np.float32)
    tape = ad.Tape(recording=False)
    out = losses.eikonal_loss(tape, p, lambda t, pv: ad.mul(pv[:, 2], 2.0), h=0.01)
    assert np.isclose(out.data, 1.0, atol=1e-5)


def test_eikonal_small_on_fitted_sphere(sphere_fit):
    grid, dec = sphere_fit["grid"], sphere_fit["decoder"]
    rng = np.random.default_rng(6)
    p = rng.uniform(-0.85, 0.85, (512, 3)).astype(np.float32)
    tape = ad.Tape(recording=False)
    out = losses.eikonal_loss(
        tape, p, lambda t, pv: tensogrid.query_sdf(t, pv, grid, dec)[0],
        h=grid.cell_size,
    )
    assert out.data < 0.01


def test_hessian_zero_for_linear_sdf():
    p = np.random.default_rng(7).uniform(-0.5, 0.5, (64, 3))
    tape = ad.Tape(recording=False)
    out = losses.hessian_loss(tape, p, lambda t, pv: pv[:, 0], h=0.02)
    assert out.data < 1e-9


def test_hessian_of_squared_norm_is_thirty_six():
    # FD Laplacian is exact on quadratics: lap = 6, squared = 36
    p = np.random.default_rng(8).uniform(-0.5, 0.5, (64, 3)).astype(np.float64)
    tape = ad.Tape(recording=False)
    out = losses.hessian_loss(
        tape, p, lambda t, pv: ad.reduce_sum(ad.mul(pv, pv), axis=1), h=0.05
    )
    assert np.isclose(out.data, 36.0, rtol=1e-6)


def test_hessian_matches_plain_numpy_stencil(sphere_fit):
    grid, dec = sphere_fit["grid"], sphere_fit["decoder"]
    rng = np.random.default_rng(9)
    p = rng.uniform(-0.7, 0.7, (128, 3)).astype(np.float32)
    h = grid.cell_size
    tape = ad.Tape(recording=False)
    out = losses.hessian_loss(
        tape, p, lambda t, pv: tensogrid.query_sdf(t, pv, grid, dec)[0], h=h
    )
    s7 = tensogrid.query_sdf_values(tensogrid.stencil_points(p, h), grid, dec)
    s7 = s7.reshape(7, len(p))
    lap = (s7[1] + s7[2] + s7[3] + s7[4] + s7[5] + s7[6] - 6 * s7[0]) / h**2
    assert np.isclose(out.data, (lap**2).mean(), rtol=1e-5)


# --- mask and occlusion cross-entropies -------------------------------------


def test_mask_loss_zero_when_opacity_matches():
    tape = ad.Tape(recording=False)
    w = tape.const(np.ones(8))
    assert losses.mask_loss(w, np.ones(8)).data < 1e-4


def test_mask_loss_clamped_when_fully_wrong():
    tape = ad.Tape(recording=False)
    w = tape.const(np.zeros(4))
    out = losses.mask_loss(w, np.ones(4))
    assert np.isclose(out.data, -np.log(1e-5), rtol=1e-4)


def test_mask_loss_matches_hand_bce():
    tape = ad.Tape(recording=False)
    w = tape.const(np.array([0.9, 0.2]))
    m = np.array([1.0, 0.0])
    ref = -np.mean([np.log(0.9), np.log(0.8)])
    assert np.isclose(losses.mask_loss(w, m).data, ref, rtol=1e-6)


def test_occlusion_bce_uniform_is_log_two():
    tape = ad.Tape(recording=False)
    u = tape.const(np.full(8, 0.5))
    assert np.isclose(losses.occlusion_bce(u, np.full(8, 0.5)).data, np.log(2), rtol=1e-6)


# --- stabilization -----------------------------------------------------------


def test_stabilization_schedule_endpoints_and_midpoint():
    tape = ad.Tape(recording=False)
    c = tape.const(np.full((4, 3), 0.5, dtype=np.float32))
    mag = (c.data**2).sum(axis=1).mean()
    assert np.isclose(losses.stabilization_loss(c, 0, 100).data, mag, rtol=1e-6)
    assert np.isclose(losses.stabilization_loss(c, 50, 100).data, 0.5 * mag, rtol=1e-6)
    assert losses.stabilization_loss(c, 100, 100).data == 0.0
    assert losses.stabilization_loss(c, 250, 100).data == 0.0


# --- material smoothness ------------------------------------------------------


def _mat_tuple(tape, arrs):
    return tuple(tape.const(a.astype(np.float32)) for a in arrs)


def test_material_reg_zero_for_constant_material():
    tape = ad.Tape(recording=False)
    arrs = [np.full((8, 3), 0.4), np.full((8, 1), 0.2), np.full((8, 1), 0.7)]
    out = losses.material_reg_loss(_mat_tuple(tape, arrs), _mat_tuple(tape, arrs))
    assert out.data == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_material_reg_nonnegative(seed):
    rng = np.random.default_rng(seed)
    tape = ad.Tape(recording=False)
    a = _mat_tuple(tape, [rng.random((4, 3)), rng.random((4, 1)), rng.random((4, 1))])
    b = _mat_tuple(tape, [rng.random((4, 3)), rng.random((4, 1)), rng.random((4, 1))])
    assert losses.material_reg_loss(a, b).data >= 0.0


def test_material_reg_prefers_smoother_field():
    # same jitter, two synthetic materials: slowly vs rapidly varying albedo
    rng = np.random.default_rng(10)
    p = rng.uniform(-0.8, 0.8, (256, 3)).astype(np.float32)
    q = losses.jitter_points(p, np.random.default_rng(11))

    def mats(fn, pts, tape):
        a = fn(pts)
        return _mat_tuple(tape, [a, np.zeros((len(pts), 1)), np.zeros((len(pts), 1))])

    smooth = lambda pts: 0.5 + 0.1 * pts
    rough = lambda pts: 0.5 + 0.1 * np.sin(40.0 * pts)
    tape = ad.Tape(recording=False)
    l_smooth = losses.material_reg_loss(mats(smooth, p, tape), mats(smooth, q, tape))
    l_rough = losses.material_reg_loss(mats(rough, p, tape), mats(rough, q, tape))
    assert l_rough.data > 3.0 * l_smooth.data


def test_jitter_points_stay_in_ball_and_box():
    rng = np.random.default_rng(12)
    p = rng.uniform(-0.99, 0.99, (512, 3)).astype(np.float32)
    q = losses.jitter_points(p, rng, radius=0.01)
    clipped = np.any((q == -1.0) | (q == 1.0), axis=1)
    d = np.linalg.norm(q - p, axis=1)
    assert np.all(d[~clipped] <= 0.01 + 1e-6)
    assert np.all(np.abs(q) <= 1.0)


# --- stage assembly ------------------------------------------------------------


def _unit_terms(keys):
    tape = ad.Tape(recording=False)
    return {k: tape.const(np.float32(1.0)) for k in keys}


def test_geometry_total_unit_terms_hessian_mode():
    terms = _unit_terms(["c", "e", "g", "h", "t", "o", "s"])
    total, report = losses.geometry_stage_total(terms, losses.LossWeights(), mask_mode=False)
    assert np.isclose(total.data, 3.70001, atol=1e-9)
    assert abs(report.total - report.recomputed_total()) < 1e-6


def test_geometry_total_unit_terms_mask_mode():
    terms = _unit_terms(["c", "e", "g", "mask", "t", "o", "s"])
    total, report = losses.geometry_stage_total(terms, losses.LossWeights(), mask_mode=True)
    assert np.isclose(total.data, 3.20051, atol=1e-9)
    assert abs(report.total - report.recomputed_total()) < 1e-6


def test_geometry_total_rejects_wrong_term_set():
    terms = _unit_terms(["c", "e", "g", "h", "t", "o"])  # missing s
    with pytest.raises(ValueError):
        losses.geometry_stage_total(terms, losses.LossWeights(), mask_mode=False)
    terms = _unit_terms(["c", "e", "g", "h", "t", "o", "s", "mask"])  # both modes
    with pytest.raises(ValueError):
        losses.geometry_stage_total(terms, losses.LossWeights(), mask_mode=False)


def test_material_total_and_report():
    terms = _unit_terms(["c", "m"])
    total, report = losses.material_stage_total(terms, losses.LossWeights())
    assert np.isclose(total.data, 1.1, rtol=1e-7)
    rec = json.loads(report.log_line(step=7))
    assert rec["step"] == 7 and np.isclose(rec["total"], 1.1)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        losses.LossWeights(lambda_e=-0.1)
