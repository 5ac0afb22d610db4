import numpy as np
import pytest

from app.models.config import with_overrides
from app.services.heads import total_loss
from app.services.model import MultiScaleModel
from app.services.params import ForwardContext
from app.services.transfer import detach_cls


def _images(rng, n=3):
    return rng.random((n, 64, 64, 3))


def test_forward_shapes(micro, micro_params, rng):
    params, buffers = micro_params
    output = MultiScaleModel(micro).forward(params, ForwardContext(buffers=buffers), _images(rng))
    assert output.predictions.heads == ["stage1", "stage2", "stage3", "stage4", "concat"]
    for probs in output.predictions.probs.values():
        assert probs.shape == (3, micro.num_classes)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0)
    assert [output.selections[s].k for s in micro.msps_stages] == list(micro.k_schedule)
    assert output.states == []


def test_gradients_cover_every_parameter(micro, micro_params, rng):
    params, buffers = micro_params
    targets = np.array([0, 1, 3])
    loss, grads, _ = MultiScaleModel(micro).loss_and_grads(params, ForwardContext(buffers=buffers), _images(rng), targets)
    assert loss > 0
    assert set(grads) == set(params)
    for name, g in grads.items():
        assert g.shape == params[name].shape, name


def test_sgd_step_lowers_loss(micro, micro_params, rng):
    params, buffers = micro_params
    model = MultiScaleModel(micro)
    images, targets = _images(rng, 4), np.array([0, 1, 2, 3])
    loss, grads, _ = model.loss_and_grads(params, ForwardContext(buffers=buffers), images, targets)
    stepped = {k: v - 1e-4 * grads[k] for k, v in params.items()}
    after = total_loss(model.forward(stepped, ForwardContext(buffers=buffers), images).predictions, targets, micro.alpha_schedule)
    assert after < loss


def test_predict_matches_forward(micro, micro_params, rng):
    params, buffers = micro_params
    model = MultiScaleModel(micro)
    images = _images(rng, 5)
    batched = model.predict(params, buffers, images, batch_size=2)
    whole = model.forward(params, ForwardContext(buffers=buffers, training=False, keep_cache=False), images)
    for name in whole.predictions.heads:
        np.testing.assert_allclose(batched.probs[name], whole.predictions.probs[name], atol=1e-12)


def test_simple_attach_routes_cls_to_its_stage(micro, rng):
    config = with_overrides(micro, ctt_mode="simple_attach")
    model = MultiScaleModel(config)
    params, buffers = model.init_params(np.float64, 0.2)
    _, grads, _ = model.loss_and_grads(params, ForwardContext(buffers=buffers), _images(rng), np.array([0, 1, 2]))
    assert set(grads) == set(params)
    assert not any(name.startswith("transfer.") for name in params)


def test_global_pool_has_no_cls_rows(micro, rng):
    config = with_overrides(micro, ctt_mode="global_pool")
    model = MultiScaleModel(config)
    params, buffers = model.init_params(np.float64, 0.2)
    ctx = ForwardContext(buffers=buffers, training=False, keep_cache=False, retain_maps=True)
    output = model.forward(params, ctx, _images(rng, 2))
    assert output.states[0].outputs[1].shape == (2, config.k_schedule[0], config.channels(1))


def test_bare_backbone(micro, rng):
    model = MultiScaleModel(with_overrides(micro, msps_stages=[]))
    params, buffers = model.init_params(np.float64, 0.2)
    output = model.forward(params, ForwardContext(buffers=buffers), _images(rng))
    assert output.predictions.heads == ["backbone"]
    assert output.selections == {}
    _, grads, _ = model.loss_and_grads(params, ForwardContext(buffers=buffers), _images(rng), np.array([0, 1, 2]))
    assert set(grads) == set(params)


def test_same_seed_same_parameters(micro):
    a, _ = MultiScaleModel(micro).init_params()
    b, _ = MultiScaleModel(micro).init_params()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c, _ = MultiScaleModel(with_overrides(micro, seed=4)).init_params()
    assert not np.array_equal(a["cls_token"], c["cls_token"])


@pytest.mark.parametrize("stage", [1, 2, 3, 4])
def test_each_stage_loss_reaches_the_global_class_token(micro, rng, stage):
    model = MultiScaleModel(with_overrides(micro, ctt_mode="ctt_2mlp"))
    params, buffers = model.init_params(np.float64, 0.2)
    output = model.forward(params, ForwardContext(buffers=buffers), _images(rng))
    cache = output.cache
    grad_logits = {name: np.zeros_like(z) for name, z in output.predictions.logits.items()}
    grad_logits[f"stage{stage}"] = rng.standard_normal(grad_logits[f"stage{stage}"].shape)

    g_outputs = model.heads.stage_predictions_backward(params, grad_logits, cache["heads"], {})
    g_tokens = model.msca.backward(params, g_outputs, cache["msca"], {})
    g_cls_g = sum(
        model.transfer.transfer_backward(params, detach_cls(g_tokens[s])[1], s, cache["transfer"][s], {})
        for s in model.stages
    )
    assert g_cls_g.shape == (3, micro.channels(4))
    assert np.linalg.norm(g_cls_g) > 1e-8
