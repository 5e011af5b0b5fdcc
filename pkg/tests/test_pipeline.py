import numpy as np
import pytest

from sfdeblur.core import EnergyParams
from sfdeblur.datagen import gt_model
from sfdeblur.energy import FeatureCorrespondences, total_energy
from sfdeblur.geometry import TWO_FRAME_KEYS
from sfdeblur.metrics import psnr, segmentation_prf
from sfdeblur.pipeline import (InitialState, PipelineError, PipelineInput, PipelineOptions,
                               initialize, read_trace_csv, run_pipeline, write_trace_csv)
from sfdeblur.superpixels import init_labels, moving_mask, partition_from_labels

QUICK = PipelineOptions(superpixels=60, sceneflow_rounds=1, deblur_iters=10)


def gt_init(bundle) -> InitialState:
    model = gt_model(bundle)
    part = partition_from_labels(model.labels)
    return InitialState(model, part, init_labels(part, bundle.prior_mask, 2), FeatureCorrespondences(), [], {})


def test_input_validation(small_bundle):
    b = small_bundle
    partial = {k: v for k, v in b.blurred.items() if k != (1, 1)}
    with pytest.raises(ValueError, match="missing"):
        PipelineInput(partial, b.prior_mask, b.rig)
    odd = dict(b.blurred)
    odd[(0, 1)] = odd[(0, 1)][:-1]
    with pytest.raises(ValueError, match="shape"):
        PipelineInput(odd, b.prior_mask, b.rig)
    with pytest.raises(ValueError, match="mask"):
        PipelineInput(b.blurred, b.prior_mask[:-1], b.rig)


def test_zero_outer_iterations_returns_initialisation(small_bundle):
    b = small_bundle
    inp = PipelineInput(b.blurred, b.prior_mask, b.rig, EnergyParams(outer_iters=0), 0, QUICK)
    init = initialize(inp)
    out = run_pipeline(inp, init)
    assert out.model is init.model and [t.stage for t in out.trace] == ["init"]
    for k in b.blurred:
        np.testing.assert_array_equal(out.latents[k], b.blurred[k])
    np.testing.assert_array_equal(out.moving_mask, moving_mask(init.model))


def test_initialisation_finds_the_moving_object(small_bundle):
    b = small_bundle
    init = initialize(PipelineInput(b.blurred, b.prior_mask, b.rig, options=QUICK))
    assert len(init.hypotheses) >= 2
    assert init.model.objects.max() >= 2
    _, recall, f = segmentation_prf(moving_mask(init.model), b.moving_mask)
    assert f >= 0.6 and recall >= 0.6
    assert set(init.disparity) == {0, 1}


def test_gt_initialised_run_improves_images_and_keeps_segmentation(small_bundle, tmp_path):
    b = small_bundle
    inp = PipelineInput(b.blurred, b.prior_mask, b.rig, EnergyParams(outer_iters=1), 0, QUICK)
    out = run_pipeline(inp, gt_init(b))
    totals = [t.energy.total for t in out.trace]
    assert all(y <= x for x, y in zip(totals, totals[1:]))
    assert [t.stage for t in out.trace] == ["init", "deblur", "sceneflow", "deblur"]
    for k in b.latent:
        assert psnr(out.latents[k], b.latent[k]) > psnr(b.blurred[k], b.latent[k])
    assert segmentation_prf(out.moving_mask, b.moving_mask)[2] >= 0.95
    e = total_energy(out.model, out.partition, out.latents, b.blurred, FeatureCorrespondences(), b.rig,
                     EnergyParams())
    assert e.total == pytest.approx(totals[-1])

    write_trace_csv(tmp_path / "trace.csv", out.trace)
    back = read_trace_csv(tmp_path / "trace.csv")
    assert [t.stage for t in back] == [t.stage for t in out.trace]
    assert [t.energy.total for t in back] == pytest.approx(totals, rel=1e-12)
    assert "seconds" not in (tmp_path / "trace.csv").read_text().splitlines()[0]


def test_stage_failures_name_the_stage(small_bundle):
    b = small_bundle
    flat = {k: np.full_like(v, 0.5) for k, v in b.blurred.items()}
    with pytest.raises(PipelineError, match="plane fitting"):
        run_pipeline(PipelineInput(flat, b.prior_mask, b.rig, options=QUICK))


def test_trace_csv_rejects_missing_columns(tmp_path):
    (tmp_path / "t.csv").write_text("iteration,stage,total\n0,init,1.0\n")
    with pytest.raises(ValueError, match="missing trace columns"):
        read_trace_csv(tmp_path / "t.csv")


def test_two_frame_mode(small_bundle):
    b = small_bundle
    opts = PipelineOptions(superpixels=60, sceneflow_rounds=1, deblur_iters=5, two_frame=True)
    inp = PipelineInput(b.blurred, b.prior_mask, b.rig, EnergyParams(outer_iters=1), 0, opts)
    assert sorted(inp.blurred) == sorted(TWO_FRAME_KEYS)
    out = run_pipeline(inp, gt_init(b))
    assert sorted(out.latents) == sorted(TWO_FRAME_KEYS)
    np.testing.assert_array_equal(out.flow_bwd, -out.flow_fwd)


def test_run_is_deterministic(small_bundle):
    b = small_bundle
    opts = PipelineOptions(superpixels=60, sceneflow_rounds=1, deblur_iters=3)
    inp = PipelineInput(b.blurred, b.prior_mask, b.rig, EnergyParams(outer_iters=1), 5, opts)
    o1, o2 = run_pipeline(inp), run_pipeline(inp)
    for k in o1.latents:
        np.testing.assert_array_equal(o1.latents[k], o2.latents[k])
    np.testing.assert_array_equal(o1.flow_fwd, o2.flow_fwd)
    assert [t.energy.total for t in o1.trace] == [t.energy.total for t in o2.trace]
