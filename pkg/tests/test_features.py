import numpy as np
import pytest
import torch

from maskdiff.backbone import DEFAULT_TAPS
from maskdiff.conditioning import ConditionSource
from maskdiff.features import (FeatureExtractor, FeaturePyramid, cached_pyramids, extract_pyramid,
                               fuse_maps, fuse_pyramid, read_pyramid, validate_blocks, write_pyramid)


def test_pyramid_widths_and_shapes(tiny_ckpt, small_corpus):
    ex = FeatureExtractor(tiny_ckpt)
    cfg = tiny_ckpt.model_config
    pyr = ex(small_corpus[0].image)
    assert pyr.blocks == list(DEFAULT_TAPS)
    assert pyr.widths == [cfg.decoder_block_width(b) for b in DEFAULT_TAPS]
    assert ex.in_width == cfg.tap_width(DEFAULT_TAPS)
    for b, f in pyr.entries:
        lvl = cfg.decoder_block_stage(b)
        assert f.shape[1:] == (64 >> lvl, 64 >> lvl)


def test_extraction_is_pure(tiny_ckpt, small_corpus):
    img = small_corpus[1].image
    a = extract_pyramid(tiny_ckpt, img)
    b = extract_pyramid(tiny_ckpt, img)
    assert all(torch.equal(x, y) for (_, x), (_, y) in zip(a.entries, b.entries))
    # batching does not change per-image results beyond float noise
    many = FeatureExtractor(tiny_ckpt).pyramids(small_corpus.images()[:4])
    assert all(torch.allclose(x, y, atol=1e-5) for (_, x), (_, y) in zip(many[1].entries, a.entries))


def test_condition_flag_changes_features(tiny_ckpt, small_corpus):
    img = small_corpus[2].image
    on = extract_pyramid(tiny_ckpt, img, blocks=[9])
    off = extract_pyramid(tiny_ckpt, img, blocks=[9], use_condition=False)
    assert not torch.equal(on.entries[0][1], off.entries[0][1])


def test_block_validation():
    assert validate_blocks([9, 1, 3]) == [1, 3, 9]
    for bad in ([], [0], [11], [2, 2]):
        with pytest.raises(ValueError):
            validate_blocks(bad)
    with pytest.raises(ValueError):
        FeaturePyramid([(3, torch.zeros(1, 2, 2)), (1, torch.zeros(1, 2, 2))])


def test_backbone_weights_untouched(tiny_ckpt, small_corpus):
    ex = FeatureExtractor(tiny_ckpt)
    before = {k: v.clone() for k, v in ex.model.state_dict().items()}
    ex.pyramids(small_corpus.images()[:2])
    assert all(not p.requires_grad for p in ex.model.parameters())
    assert all(torch.equal(before[k], v) for k, v in ex.model.state_dict().items())


def test_fuse_examples():
    a = torch.randn(64, 16, 16)
    assert torch.equal(fuse_maps([a], 16), a)
    out = fuse_maps([a, torch.randn(128, 8, 8)], 16)
    assert out.shape == (192, 16, 16)
    const = torch.full((3, 4, 4), 2.5)
    assert torch.allclose(fuse_maps([const], 16), torch.full((3, 16, 16), 2.5))
    with pytest.raises(ValueError):
        fuse_maps([], 16)
    pyr = FeaturePyramid([(1, a), (5, torch.randn(8, 32, 32))])
    dm = fuse_pyramid(pyr, 32)
    assert dm.values.shape == (72, 32, 32) and dm.block_source == [1, 5]


def test_pyramid_file_roundtrip(tmp_path):
    pyr = FeaturePyramid([(1, torch.randn(4, 8, 8)), (9, torch.randn(2, 32, 32))], 50)
    write_pyramid(tmp_path / "x.pyr", pyr)
    back = read_pyramid(tmp_path / "x.pyr")
    assert back.blocks == [1, 9] and back.extraction_timestep == 50
    assert all(torch.equal(x, y) for (_, x), (_, y) in zip(pyr.entries, back.entries))
    (tmp_path / "bad.pyr").write_bytes(b"nope")
    with pytest.raises(ValueError):
        read_pyramid(tmp_path / "bad.pyr")


def test_cache_hits_equal_fresh(tiny_ckpt, small_corpus, tmp_path):
    ex = FeatureExtractor(tiny_ckpt, blocks=[1, 3])
    imgs = small_corpus.images()[:3]
    first = cached_pyramids(ex, imgs, tmp_path)
    files = sorted(p.name for p in (tmp_path / ex.cache_key()).iterdir())
    assert files == ["syn_00000.pyr", "syn_00001.pyr", "syn_00002.pyr"]
    second = cached_pyramids(ex, imgs, tmp_path)
    for a, b in zip(first, second):
        assert all(torch.equal(x, y) for (_, x), (_, y) in zip(a.entries, b.entries))
    other = FeatureExtractor(tiny_ckpt, t_fix=10, blocks=[1, 3])
    assert other.cache_key() != ex.cache_key()
