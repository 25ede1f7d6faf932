import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rsktseg.foundation import (
    ClassVocabulary,
    DimensionMismatchError,
    EncoderSpec,
    ImageSample,
    ToyEncoder,
    build_encoder,
    class_text_mean,
    encode_image,
    encode_text,
    load_tensor,
    rot90,
    save_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
)


def rot90_oracle(grid):
    """Counter-clockwise quarter turn by explicit index mapping: out[i][j] = in[j][H-1-i]."""
    H = len(grid)
    W = len(grid[0])
    return [[grid[j][W - 1 - i] for j in range(H)] for i in range(W)]


def test_rot90_identity_cases():
    t = torch.arange(24.0).reshape(2, 3, 4)
    assert torch.equal(rot90(t, 0), t)
    assert torch.equal(rot90(t, 4), t)
    assert torch.equal(rot90(t, -4), t)


def test_rot90_small_grid_matches_index_oracle():
    grid = [[1, 2], [3, 4]]
    expected = rot90_oracle(grid)
    assert expected == [[2, 4], [1, 3]]
    assert rot90(torch.tensor(grid), 1).tolist() == expected


def test_rot90_rectangular_and_repeated_against_oracle():
    rng = np.random.default_rng(0)
    grid = rng.integers(0, 100, size=(3, 5)).tolist()
    out = grid
    for k in range(1, 4):
        out = rot90_oracle(out)
        assert rot90(torch.tensor(grid), k).tolist() == out


def test_rot90_carries_trailing_axes():
    t = torch.randn(4, 4, 3, 2)
    r = rot90(t, 1)
    for c in range(3):
        for p in range(2):
            assert r[..., c, p].tolist() == rot90_oracle(t[..., c, p].tolist())


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(-10, 10))
def test_rot90_group_laws(h, w, k):
    t = torch.randn(h, w, 2)
    four = t
    for _ in range(4):
        four = rot90(four, k)
    assert torch.equal(four, t)
    assert torch.equal(rot90(rot90(t, 1), 3), t)


def test_encode_image_shape_and_determinism():
    spec = EncoderSpec("toy-clip-visual", patch_size=16, embed_dim=64, num_layers=8, seed=3)
    img = torch.rand(64, 64, 3)
    a = encode_image(spec, img)
    b = encode_image(spec, img)
    assert a.final.shape == (4, 4, 64)
    assert torch.equal(a.final, b.final)
    assert sorted(a.intermediates) == list(range(9))
    assert all(v.shape == (4, 4, 64) for v in a.intermediates.values())
    assert torch.isfinite(a.final).all()


def test_identical_specs_give_bitwise_identical_parameters():
    spec = EncoderSpec("toy-dino", num_layers=3, seed=11)
    pa = dict(ToyEncoder(spec).named_parameters())
    pb = dict(ToyEncoder(spec).named_parameters())
    assert all(torch.equal(pa[k], pb[k]) for k in pa)
    pc = dict(ToyEncoder(EncoderSpec("toy-dino", num_layers=3, seed=12)).named_parameters())
    assert not torch.equal(pa["patch_embed.weight"], pc["patch_embed.weight"])


def test_constant_image_gives_constant_grid():
    spec = EncoderSpec("toy-clip-visual", seed=5)
    img = torch.ones(64, 64, 3) * torch.tensor([0.2, 0.5, 0.9])
    out = encode_image(spec, img).final.reshape(-1, 64)
    ref = out[0]
    for cell in out:
        assert torch.allclose(cell, ref, rtol=1e-6, atol=1e-6 * ref.abs().max().item())


def test_encode_image_rejects_indivisible_size():
    with pytest.raises(DimensionMismatchError):
        encode_image(EncoderSpec("toy-dino"), torch.rand(60, 64, 3))


def test_encode_text_contract():
    spec = EncoderSpec("toy-text", embed_dim=64, seed=1)
    vocab = ClassVocabulary(["building", "tree", "water"], ["a photo of {}.", "{} from above"])
    t = encode_text(spec, vocab)
    assert t.shape == (3, 2, 64)
    assert torch.allclose(t.norm(dim=-1), torch.ones(3, 2), atol=1e-6)
    assert torch.equal(t, encode_text(spec, vocab))
    assert class_text_mean(t).shape == (3, 64)


def test_distinct_class_names_have_distinct_embeddings():
    spec = EncoderSpec("toy-text", embed_dim=64)
    names = ["building", "tree", "water", "road", "car", "ship", "harbor", "plane"]
    t = encode_text(spec, ClassVocabulary(names, ["{}"]))[:, 0]
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            cos = float(t[i] @ t[j]) / (float(t[i].norm()) * float(t[j].norm()))
            assert cos < 0.99


def test_vocabulary_validation():
    with pytest.raises(ValueError):
        ClassVocabulary([])
    with pytest.raises(ValueError):
        ClassVocabulary(["a", "a"])
    with pytest.raises(ValueError):
        ClassVocabulary(["a"], ["no placeholder"])
    with pytest.raises(ValueError):
        ClassVocabulary(["a"], ["{} and {}"])
    with pytest.raises(ValueError):
        encode_text(EncoderSpec("toy-dino"), ClassVocabulary(["a"]))


def test_image_sample_label_validation():
    s = ImageSample(torch.rand(4, 4, 3), torch.tensor([[0, 1, 255, 2]] * 4))
    s.validate_labels(3)
    with pytest.raises(ValueError, match="label value 3"):
        ImageSample(torch.rand(2, 2, 3), torch.tensor([[0, 3], [1, 1]])).validate_labels(3)


def test_tensor_file_roundtrip(tmp_path):
    t = torch.randn(2, 3, 4)
    save_tensor(tmp_path / "t.rskt", t)
    back = load_tensor(tmp_path / "t.rskt")
    assert back.shape == t.shape
    assert torch.equal(back, t.float())


def test_tensor_file_layout():
    buf = tensor_to_bytes(torch.tensor([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"RSKT"
    assert buf[4] == 1 and buf[5] == 2
    assert int.from_bytes(buf[6:10], "little") == 1
    assert int.from_bytes(buf[10:14], "little") == 3
    assert np.frombuffer(buf[14:], dtype="<f4").tolist() == [1.0, 2.0, 3.0]
    with pytest.raises(ValueError):
        tensor_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(ValueError):
        tensor_from_bytes(buf[:-4])


def test_external_encoder_serves_stored_features(tmp_path):
    final = torch.randn(4, 4, 8)
    save_tensor(tmp_path / "final.rskt", final)
    save_tensor(tmp_path / "layer_3.rskt", final * 2)
    enc = build_encoder(EncoderSpec("external", embed_dim=8, source=str(tmp_path)))
    out = enc(torch.rand(64, 64, 3))
    assert torch.allclose(out.final, final.to(out.final.dtype))
    assert torch.allclose(out.layer(3), 2 * final.to(out.final.dtype))
    with pytest.raises(DimensionMismatchError):
        enc(torch.rand(32, 32, 3))
    with pytest.raises(KeyError):
        out.layer(7)
