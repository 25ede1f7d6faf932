import math

import pytest
import torch

from rsktseg import cma
from rsktseg.cma import CostVolume, DegenerateInputError, RotationRequiresSquareError
from rsktseg.foundation import ClassVocabulary, EncoderSpec, ToyEncoder, encode_text, rot90


def cosine_oracle(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


@pytest.fixture
def clip():
    return ToyEncoder(EncoderSpec("toy-clip-visual", embed_dim=32, num_layers=2, seed=1))


@pytest.fixture
def dino():
    return ToyEncoder(EncoderSpec("toy-dino", embed_dim=32, num_layers=2, seed=2))


@pytest.fixture
def text():
    return encode_text(EncoderSpec("toy-text", embed_dim=32), ClassVocabulary(["building", "tree", "water"]))


def test_cosine_identity_orthogonal_and_scalar_oracle():
    v = torch.tensor([[[3.0, 4.0]]])
    assert cma.cosine_cost(v, torch.tensor([[[3.0, 4.0]]])).item() == pytest.approx(1.0)
    assert cma.cosine_cost(v, torch.tensor([[[-4.0, 3.0]]])).item() == pytest.approx(0.0, abs=1e-7)
    expected = cosine_oracle([3, 4], [4, 3])
    assert expected == pytest.approx(0.96)
    assert cma.cosine_cost(v, torch.tensor([[[4.0, 3.0]]])).item() == pytest.approx(expected, rel=1e-6)


def test_cosine_matches_oracle_on_random_grid(f64):
    g = torch.Generator().manual_seed(0)
    vis = torch.randn(2, 3, 5, generator=g)
    txt = torch.randn(4, 2, 5, generator=g)
    out = cma.cosine_cost(vis, txt)
    assert out.shape == (2, 3, 4, 2)
    for h in range(2):
        for w in range(3):
            for n in range(4):
                for p in range(2):
                    assert out[h, w, n, p].item() == pytest.approx(cosine_oracle(vis[h, w].tolist(), txt[n, p].tolist()), abs=1e-12)


def test_cosine_zero_norm_names_index():
    vis = torch.ones(2, 2, 3)
    vis[1, 0] = 0
    with pytest.raises(DegenerateInputError, match=r"\(1, 0\)"):
        cma.cosine_cost(vis, torch.ones(1, 1, 3))
    with pytest.raises(DegenerateInputError, match="text"):
        cma.cosine_cost(torch.ones(1, 1, 3), torch.zeros(2, 1, 3))


def test_constant_image_gives_four_identical_volumes(clip, text):
    img = torch.ones(64, 64, 3) * torch.tensor([0.3, 0.6, 0.1])
    vols = cma.multi_rotation_costs(img, clip, text)
    assert [v.source for v in vols] == list(cma.CLIP_SOURCES)
    for v in vols[1:]:
        assert torch.allclose(v.values, vols[0].values, atol=1e-6)


def test_rot0_volume_is_plain_cosine_cost(clip, text):
    img = torch.rand(64, 64, 3)
    vols = cma.multi_rotation_costs(img, clip, text)
    assert torch.equal(vols[0].values, cma.cosine_cost(clip(img).final, text))


def test_rotated_input_permutes_aligned_sources(f64, text):
    clip = ToyEncoder(EncoderSpec("toy-clip-visual", embed_dim=32, num_layers=2, seed=1))
    img = torch.rand(64, 64, 3)
    base = cma.multi_rotation_costs(img, clip, text.double())
    rotated = cma.multi_rotation_costs(rot90(img, 1), clip, text.double())
    for i in range(4):
        expected = rot90(base[(i + 1) % 4].values, 1)
        assert torch.allclose(rotated[i].values, expected, rtol=1e-10, atol=1e-12)


def test_rotation_requires_square(clip, text):
    with pytest.raises(RotationRequiresSquareError):
        cma.multi_rotation_costs(torch.rand(64, 32, 3), clip, text)


def test_dino_cost_contracts(dino, text):
    const = torch.ones(64, 64, 3) * 0.5
    vol = cma.dino_cost(const, dino, text)
    assert vol.source == "dino"
    assert vol.values.shape == (4, 4, 3, 2)
    flat = vol.values.reshape(16, -1)
    assert torch.allclose(flat, flat[:1].expand_as(flat), atol=1e-6)
    rnd = cma.dino_cost(torch.rand(64, 64, 3), dino, text).values
    assert rnd.min() >= -1 - 1e-6 and rnd.max() <= 1 + 1e-6


def _vols(values):
    return [CostVolume(torch.full((1, 1, 1, 1), v), s) for v, s in zip(values, cma.SOURCES)]


def test_fuse_mean_of_identical_is_identity():
    v = torch.rand(2, 2, 3, 2)
    clip = [CostVolume(v.clone(), s) for s in cma.CLIP_SOURCES]
    assert torch.allclose(cma.fuse_costs(clip, CostVolume(v.clone(), "dino"), "mean"), v)


def test_fuse_cat_width_and_order():
    vols = _vols([0.1, 0.2, 0.3, 0.4, 0.5])
    out = cma.fuse_costs(vols[:4], vols[4], "cat")
    assert out.shape[-1] == 5
    assert out.flatten().tolist() == pytest.approx([0.1, 0.2, 0.3, 0.4, 0.5])
    assert cma.fused_width("cat", 3) == 15


def test_fuse_separate_groups_clip_then_dino():
    vols = _vols([0.2, 0.2, 0.2, 0.2, 0.6])
    out = cma.fuse_costs(vols[:4], vols[4], "separate")
    assert out.flatten().tolist() == pytest.approx([0.2, 0.6])


def test_fuse_errors():
    vols = _vols([0.1] * 5)
    with pytest.raises(ValueError):
        cma.fuse_costs(vols[:4], CostVolume(torch.zeros(1, 1, 2, 1), "dino"), "mean")
    with pytest.raises(ValueError):
        cma.fuse_costs(vols[:4], vols[4], "max")


def test_project_cost_cases():
    fused = torch.rand(2, 2, 3, 10)
    assert torch.count_nonzero(cma.project_cost(fused, torch.zeros(8, 10), torch.zeros(8))) == 0
    assert cma.project_cost(torch.full((1, 1, 1, 1), 0.5), torch.tensor([[2.0]]), torch.zeros(1)).item() == pytest.approx(1.0)
    proj = cma.CostProjection(5 * 2, 64)
    assert proj(torch.rand(4, 4, 3, 10)).shape == (4, 4, 3, 64)
    with pytest.raises(ValueError):
        proj(torch.rand(4, 4, 3, 4))


def test_class_permutation_permutes_volumes(clip, dino, text):
    img = torch.rand(64, 64, 3)
    perm = torch.tensor([2, 0, 1])
    base = cma.multi_rotation_costs(img, clip, text)
    permuted = cma.multi_rotation_costs(img, clip, text[perm])
    for a, b in zip(base, permuted):
        assert torch.equal(a.values[:, :, perm], b.values)
    assert torch.equal(cma.dino_cost(img, dino, text).values[:, :, perm], cma.dino_cost(img, dino, text[perm]).values)


def test_cat_fusion_rotation_permutes_clip_slots(f64):
    # block-constant image: every 16x16 patch is rotation-invariant, so the
    # dino slot rotates with the grid as well
    from rsktseg.synthetic import make_samples

    img = make_samples(1, 3, seed=3, noise=0.0)[0].image
    clip = ToyEncoder(EncoderSpec("toy-clip-visual", embed_dim=32, num_layers=2, seed=1))
    dino = ToyEncoder(EncoderSpec("toy-dino", embed_dim=32, num_layers=2, seed=2))
    text = encode_text(EncoderSpec("toy-text", embed_dim=32), ClassVocabulary(["a", "b"]))
    P = text.shape[1]

    def cat(image):
        return cma.fuse_costs(cma.multi_rotation_costs(image, clip, text), cma.dino_cost(image, dino, text), "cat")

    a = cat(img)
    b = cat(rot90(img, 1))
    for i in range(4):
        slot_b = b[..., i * P:(i + 1) * P]
        slot_a = rot90(a[..., ((i + 1) % 4) * P:((i + 1) % 4 + 1) * P], 1)
        assert torch.allclose(slot_b, slot_a, atol=1e-12)
