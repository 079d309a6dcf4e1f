import numpy as np
import pytest
import torch

from attnda.attention import compute_cam
from attnda.models import (
    ModelSpec,
    ReversalBoundary,
    Recognizer,
    build_model,
    global_average_pool,
    load_checkpoint,
    save_checkpoint,
)


def tiny(**kw):
    torch.manual_seed(0)
    return build_model(ModelSpec(class_count=3, **kw))


def test_tiny_cnn_zero_weights_zero_maps():
    model = tiny()
    with torch.no_grad():
        for p in model.extractor.parameters():
            p.zero_()
    model.eval()
    fm = model.features(torch.rand(2, 1, 28, 28))
    assert fm.shape == (2, 32, 7, 7)
    assert torch.all(fm == 0)


def test_resnet18_like_feature_shape():
    torch.manual_seed(0)
    model = build_model(ModelSpec(extractor_kind="resnet18-like", class_count=5, in_channels=3, image_size=224))
    model.eval()
    with torch.no_grad():
        fm = model.features(torch.rand(1, 3, 224, 224))
    assert fm.shape == (1, 512, 7, 7)
    assert model.discriminator.net[0].out_features == 1024


def test_lenet_like_shapes_and_gradcam_attention():
    torch.manual_seed(0)
    model = build_model(ModelSpec(extractor_kind="lenet-like", class_count=10, image_size=28))
    model.eval()
    fm = model.features(torch.rand(3, 1, 28, 28))
    assert fm.shape == (3, 50, 4, 4)
    attn = model.attention(fm)
    assert attn.shape == (3, 10, 4, 4)
    assert torch.all(attn >= 0)
    assert model.discriminator.net[0].out_features == 100


def test_wrong_spatial_size_rejected():
    torch.manual_seed(0)
    model = build_model(ModelSpec(extractor_kind="lenet-like", image_size=28))
    with pytest.raises(ValueError):
        model.features(torch.rand(1, 1, 32, 32))
    with pytest.raises(ValueError):
        tiny().features(torch.rand(1, 3, 28, 28))


def test_inference_deterministic():
    model = tiny()
    model.eval()
    x = torch.rand(4, 1, 28, 28)
    with torch.no_grad():
        assert torch.equal(model(x), model(x))


def test_gap():
    assert torch.all(global_average_pool(torch.full((3, 4, 5), 2.5)) == 2.5)
    assert float(global_average_pool(torch.tensor([[[1.0, 2.0], [3.0, 4.0]]]))[0]) == 2.5
    fm = torch.randn(4, 3, 3)
    perm = torch.tensor([2, 0, 3, 1])
    assert torch.equal(global_average_pool(fm[perm]), global_average_pool(fm)[perm])


def test_classify_zero_weights_uniform_and_simplex():
    model = tiny()
    with torch.no_grad():
        model.classifier.weight.zero_()
    p = model.classify(torch.randn(5, 32))
    torch.testing.assert_close(p, torch.full((5, 3), 1 / 3))
    model2 = tiny()
    p2 = model2.classify(torch.randn(5, 32))
    torch.testing.assert_close(p2.sum(1), torch.ones(5), atol=1e-6, rtol=0)


def test_argmax_invariant_to_logit_shift():
    logits = torch.randn(6, 4)
    assert torch.equal(torch.softmax(logits, -1).argmax(1), torch.softmax(logits + 7.0, -1).argmax(1))


def test_classifier_is_bias_free_and_shared_with_cam():
    model = tiny()
    assert model.classifier.bias is None
    fm = torch.rand(2, 32, 7, 7)
    with torch.no_grad():
        model.classifier.weight[1].mul_(3.0)
    # the CAM weights observe the mutation: same storage
    assert model.class_weights.data_ptr() == model.classifier.weight.data_ptr()
    torch.testing.assert_close(model.attention(fm), compute_cam(fm, model.classifier.weight))
    # logits equal the spatial mean of the CAM (no bias term)
    torch.testing.assert_close(model.head(global_average_pool(fm)), model.attention(fm).mean(dim=(-2, -1)))


def test_discriminator_zero_weights_half():
    model = tiny()
    with torch.no_grad():
        for p in model.discriminator.parameters():
            p.zero_()
    assert torch.all(model.discriminate(torch.randn(4, 32)) == 0.5)


def test_reversal_forward_identity():
    z = torch.randn(3, 5)
    assert torch.equal(ReversalBoundary(0.0)(z), z)
    assert torch.equal(ReversalBoundary(1.0)(z), z)


@pytest.mark.parametrize("coefficient", [0.0, 0.5, 1.0, 2.0])
def test_reversal_gradient_matches_finite_difference(coefficient):
    torch.manual_seed(1)
    w1 = torch.randn(4, 3, dtype=torch.float64)
    w2 = torch.randn(4, dtype=torch.float64)
    x = torch.randn(3, dtype=torch.float64)

    def head(z):
        return torch.tanh(z @ w1.T) @ w2

    def f(v):
        return head(torch.sin(v))

    v = x.clone().requires_grad_()
    head(ReversalBoundary(coefficient)(torch.sin(v))).backward()
    eps = 1e-6
    fd = torch.zeros(3, dtype=torch.float64)
    for i in range(3):
        e = torch.zeros(3, dtype=torch.float64)
        e[i] = eps
        fd[i] = (f(x + e) - f(x - e)) / (2 * eps)
    torch.testing.assert_close(v.grad, -coefficient * fd, rtol=1e-6, atol=1e-9)


def test_dropout_only_in_training_mode():
    model = tiny()
    z = torch.randn(8, 32)
    model.eval()
    with torch.no_grad():
        assert torch.equal(model.discriminate(z), model.discriminate(z))
    model.train()
    torch.manual_seed(0)
    with torch.no_grad():
        a = model.discriminate(z)
        b = model.discriminate(z)
    assert not torch.equal(a, b)


def test_checkpoint_roundtrip(tmp_path):
    model = tiny()
    path = save_checkpoint(tmp_path / "ck.pt", model, {"seed": 1}, 17)
    loaded, payload = load_checkpoint(path, expect=model.spec)
    assert payload["iteration"] == 17 and payload["config"] == {"seed": 1}
    assert payload["format_version"] == 1
    assert set(payload["params"]) == {"extractor", "classifier", "discriminator"}
    assert payload["shapes"]["classifier.weight"] == [3, 32]
    for (n1, a), (n2, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2 and torch.equal(a, b)


def test_checkpoint_mismatch_rejected(tmp_path):
    model = tiny()
    path = save_checkpoint(tmp_path / "ck.pt", model, {}, 0)
    with pytest.raises(ValueError, match="K=3"):
        load_checkpoint(path, expect=ModelSpec(class_count=5))
    with pytest.raises(ValueError, match="feature channels"):
        load_checkpoint(path, expect=ModelSpec(class_count=3, widths=(8, 16, 64)))
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")


def test_model_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(extractor_kind="vgg")
    with pytest.raises(ValueError):
        ReversalBoundary(-1.0)
