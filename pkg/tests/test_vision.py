import numpy as np
import pytest

from cvdcm import vision
from cvdcm.errors import NonFiniteError, ValidationError, WeightFileError
from cvdcm.images import hflip, resize
from cvdcm.vision import (
    ExtractorConfig,
    backward,
    forward,
    forward_with_cache,
    init_weights,
    load_weights,
    patchify,
    save_weights,
)

SMALL = dict(resolution=8, patch_size=4, embed_dim=8, num_heads=2, feature_dim=3)


def fd_check(config, weights, images, upstream, h=1e-4):
    """Max relative error between the analytic gradient and central differences."""
    grads = backward(config, weights, images, upstream)
    worst = 0.0
    for name, w in weights.items():
        num = np.zeros_like(w)
        flat = w.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = np.sum(forward(config, weights, images) * upstream)
            flat[i] = old - h
            fm = np.sum(forward(config, weights, images) * upstream)
            flat[i] = old
            num.reshape(-1)[i] = (fp - fm) / (2 * h)
        ana = grads[name]
        mask = np.maximum(np.abs(ana), np.abs(num)) > 1e-6
        if mask.any():
            rel = np.abs(ana - num)[mask] / np.maximum(np.abs(ana), np.abs(num))[mask]
            worst = max(worst, rel.max())
    return worst


def kink_free_instance(cfg, seed, margin=2e-3):
    """Random weights/images whose ReLU pre-activations all sit at least ``margin`` from zero.

    Central differences with h = 1e-4 are only meaningful where the function is smooth.
    """
    for attempt in range(100):
        rng = np.random.default_rng([seed, attempt])
        w = init_weights(cfg, seed * 1000 + attempt)
        for k in w:
            if k.endswith(".b") or k.endswith(".g"):
                w[k] = w[k] + rng.normal(0, 0.1, w[k].shape)
        images = rng.random((2, 8, 8, 3))
        upstream = rng.normal(size=(2, cfg.feature_dim))
        _, cache = forward_with_cache(cfg, w, images)
        if all(np.abs(c["u"]).min() > margin for c in cache["blocks"]):
            return cfg, w, images, upstream
    raise RuntimeError("no kink-free instance found")


def test_patchify_shapes():
    assert patchify(np.zeros((224, 224, 3)), 16).shape == (196, 768)
    assert patchify(np.zeros((8, 8, 3)), 4).shape == (4, 48)
    with pytest.raises(ValidationError, match="divisible"):
        patchify(np.zeros((10, 10, 3)), 4)


def test_patchify_ordering():
    img = np.arange(4 * 4 * 3, dtype=float).reshape(4, 4, 3)
    p = patchify(img, 2)
    # second patch is the top-right block; inside it rows then columns then channels
    np.testing.assert_array_equal(p[1], img[0:2, 2:4, :].reshape(-1))
    np.testing.assert_array_equal(p[2], img[2:4, 0:2, :].reshape(-1))


def test_zero_weights_linear_pool_gives_zero():
    cfg = ExtractorConfig(variant="linear-pool")
    w = vision.zeros_like(init_weights(cfg, 0))
    z = forward(cfg, w, np.random.default_rng(0).random((32, 32, 3)))
    np.testing.assert_array_equal(z, np.zeros(16))


@pytest.mark.parametrize("variant", vision.VARIANTS)
def test_output_shape_and_determinism(variant):
    cfg = ExtractorConfig(variant=variant)
    w = init_weights(cfg, 3)
    img = np.random.default_rng(5).random((32, 32, 3))
    z1 = forward(cfg, w, img)
    z2 = forward(cfg, w, img.copy())
    assert z1.shape == (16,)
    assert np.array_equal(z1, z2)
    batch = forward(cfg, w, np.stack([img, img]))
    assert batch.shape == (2, 16)
    assert np.array_equal(batch[0], batch[1])


def test_uint8_and_float_inputs_agree():
    cfg = ExtractorConfig()
    w = init_weights(cfg, 1)
    px = np.random.default_rng(2).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    np.testing.assert_array_equal(forward(cfg, w, px), forward(cfg, w, px / 255.0))


def test_wrong_resolution_rejected():
    cfg = ExtractorConfig()
    with pytest.raises(ValidationError):
        forward(cfg, init_weights(cfg), np.zeros((16, 16, 3)))


def test_nan_names_layer():
    cfg = ExtractorConfig()
    w = init_weights(cfg)
    w["block0.attn.wv"][0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="block0.attn"):
        forward(cfg, w, np.full((32, 32, 3), 0.5))


def test_config_invariants():
    with pytest.raises(ValidationError):
        ExtractorConfig(embed_dim=30, num_heads=4)
    with pytest.raises(ValidationError):
        ExtractorConfig(resolution=30, patch_size=8)
    with pytest.raises(ValidationError):
        ExtractorConfig(feature_dim=0)
    with pytest.raises(ValidationError):
        ExtractorConfig(variant="resnet")


def test_default_param_count_desk_scale():
    assert vision.num_params(init_weights(ExtractorConfig())) < 100_000


def test_init_is_seeded_and_glorot():
    cfg = ExtractorConfig()
    a, b = init_weights(cfg, 4), init_weights(cfg, 4)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    limit = np.sqrt(6 / (cfg.patch_dim + cfg.embed_dim))
    assert np.abs(a["embed.w"]).max() <= limit
    assert np.all(a["block0.ln1.g"] == 1) and np.all(a["block0.ln1.b"] == 0)


def test_attention_rows_sum_to_one():
    cfg = ExtractorConfig(num_blocks=2)
    w = init_weights(cfg, 0)
    _, cache = forward_with_cache(cfg, w, np.random.default_rng(0).random((3, 32, 32, 3)))
    for att in vision.attention_maps(cache):
        np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-10)


def test_permutation_invariance_without_positions():
    cfg = ExtractorConfig(resolution=16, patch_size=8)
    w = init_weights(cfg, 0)
    img = np.random.default_rng(1).random((16, 16, 3))
    swapped = img.copy()
    swapped[:8, :8], swapped[8:, 8:] = img[8:, 8:], img[:8, :8]
    np.testing.assert_allclose(forward(cfg, w, img), forward(cfg, w, swapped), atol=1e-12)


def test_zero_upstream_zero_gradient():
    cfg = ExtractorConfig(**SMALL)
    w = init_weights(cfg, 0)
    g = backward(cfg, w, np.random.default_rng(0).random((2, 8, 8, 3)), np.zeros((2, 3)))
    assert all(np.all(v == 0) for v in g.values())
    assert {k: v.shape for k, v in g.items()} == {k: v.shape for k, v in w.items()}


def test_upstream_shape_mismatch():
    cfg = ExtractorConfig(**SMALL)
    with pytest.raises(ValidationError):
        backward(cfg, init_weights(cfg), np.zeros((2, 8, 8, 3)), np.zeros((2, 4)))


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize(
    "extra",
    [dict(variant="linear-pool"), dict(variant="tiny-attn"), dict(variant="tiny-attn", num_blocks=2, positional=True)],
    ids=["linear-pool", "tiny-attn", "tiny-attn-2blk-pos"],
)
def test_gradient_matches_finite_differences(seed, extra):
    cfg = ExtractorConfig(**{**SMALL, **extra})
    cfg, w, images, upstream = kink_free_instance(cfg, seed)
    assert fd_check(cfg, w, images, upstream) < 1e-4


def test_linear_pool_head_gradient_is_outer_product():
    cfg = ExtractorConfig(**SMALL, variant="linear-pool")
    w = init_weights(cfg, 2)
    rng = np.random.default_rng(2)
    images = rng.random((3, 8, 8, 3))
    up = rng.normal(size=(3, 3))
    _, cache = forward_with_cache(cfg, w, images)
    g = backward(cfg, w, images, up, cache=cache)
    np.testing.assert_allclose(g["head.w"], cache["pooled"].T @ up, rtol=1e-13)
    assert fd_check(cfg, w, images, up) < 1e-4


def test_hflip_properties():
    img = np.random.default_rng(0).integers(0, 256, (6, 5, 3), dtype=np.uint8)
    assert np.array_equal(hflip(hflip(img)), img)
    np.testing.assert_array_equal(hflip(img).sum(axis=(0, 1)), img.sum(axis=(0, 1)))
    assert np.array_equal(hflip(img)[:, 0], img[:, -1])


def test_resize_identity_and_constant():
    img = np.random.default_rng(0).random((12, 12, 3))
    assert np.array_equal(resize(img, 12), img)
    const = np.full((20, 20, 3), 0.25)
    np.testing.assert_allclose(resize(const, (8, 8)), 0.25)
    assert resize(np.zeros((64, 48, 3), dtype=np.uint8), 32).shape == (32, 32, 3)


def test_resize_downsample_by_two_averages_blocks():
    img = np.random.default_rng(3).random((8, 8, 3))
    out = resize(img, 4)
    expected = img.reshape(4, 2, 4, 2, 3).mean(axis=(1, 3))
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_weight_roundtrip(tmp_path):
    cfg = ExtractorConfig()
    w = vision.snap_float32(init_weights(cfg, 9))
    path = tmp_path / "w.bin"
    save_weights(w, path, cfg)
    w2 = load_weights(path, cfg)
    assert all(np.array_equal(w[k], w2[k]) for k in w)
    img = np.random.default_rng(0).random((32, 32, 3))
    assert np.array_equal(forward(cfg, w, img), forward(cfg, w2, img))


def test_weight_file_truncated(tmp_path):
    cfg = ExtractorConfig()
    path = tmp_path / "w.bin"
    save_weights(init_weights(cfg), path, cfg)
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(WeightFileError):
        load_weights(path)
    path.write_bytes(raw[:10])
    with pytest.raises(WeightFileError):
        load_weights(path)


def test_weight_file_corrupted(tmp_path):
    cfg = ExtractorConfig()
    path = tmp_path / "w.bin"
    save_weights(init_weights(cfg), path, cfg)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(WeightFileError, match="checksum"):
        load_weights(path)


def test_weight_file_config_mismatch(tmp_path):
    cfg = ExtractorConfig()
    path = tmp_path / "w.bin"
    save_weights(init_weights(cfg), path, cfg)
    with pytest.raises(WeightFileError):
        load_weights(path, ExtractorConfig(feature_dim=8))
