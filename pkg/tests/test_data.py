import shutil

import numpy as np
import pytest
import torch
from PIL import Image

from diffinv.data import (
    check_split_integrity,
    file_digest,
    load_image_dir,
    load_manifest,
    load_private_images,
    load_public_images,
    preprocess,
    random_flip,
    save_image,
    scan_corpus,
    split_dataset,
    write_manifest,
)
from diffinv.errors import ConfigError, IngestionError, SplitIntegrityError


def test_scan_corpus_finds_integer_classes(corpus_dir):
    classes = scan_corpus(corpus_dir)
    assert sorted(classes) == [1, 2, 3, 4]
    assert all(len(v) == 6 for v in classes.values())
    # sorted file lists
    for files in classes.values():
        assert files == sorted(files)


def test_scan_rejects_non_integer_dir(tmp_path):
    (tmp_path / "classA").mkdir()
    Image.new("RGB", (8, 8)).save(tmp_path / "classA" / "0.png")
    with pytest.raises(IngestionError, match="classA"):
        scan_corpus(tmp_path)


def test_scan_missing_and_empty(tmp_path):
    with pytest.raises(IngestionError):
        scan_corpus(tmp_path / "nope")
    (tmp_path / "1").mkdir()
    with pytest.raises(IngestionError, match="no class"):
        scan_corpus(tmp_path)


def test_preprocess_center_crop_geometry(tmp_path):
    arr = np.zeros((80, 100, 3), dtype=np.uint8)
    arr[:, 10:90] = 200  # center 80x80 region is bright
    path = tmp_path / "img.png"
    Image.fromarray(arr).save(path)
    out = preprocess(path, 64)
    assert out.shape == (3, 64, 64)
    # the crop took the bright middle, not the black margins
    assert out.min() > 0.0


def test_preprocess_identity_crop_and_range(tmp_path):
    arr = np.zeros((64, 64, 3), dtype=np.uint8)
    path = tmp_path / "black.png"
    Image.fromarray(arr).save(path)
    out = preprocess(path, 64)
    assert out.shape == (3, 64, 64)
    assert torch.all(out == -1.0)
    arr[:] = 255
    Image.fromarray(arr).save(path)
    assert torch.all(preprocess(path, 64) == 1.0)


def test_preprocess_undecodable(tmp_path):
    path = tmp_path / "fake.png"
    path.write_text("not an image")
    with pytest.raises(IngestionError, match="decode"):
        preprocess(path, 16)


def test_split_partitions_by_label(corpus_dir, tiny_cfg):
    split = split_dataset(corpus_dir, [1, 3], tiny_cfg)
    assert split.label_map == {1: 1, 3: 2}
    assert len(split.private) == 12
    assert len(split.public) == 12
    assert {lab for _, _, lab in split.private} == {1, 2}
    private_paths = {rel for rel, _, _ in split.private}
    assert all(rel.startswith(("1/", "3/")) for rel in private_paths)
    assert all(rel.startswith(("2/", "4/")) for rel, _ in split.public)


def test_split_all_private_rejected(corpus_dir, tiny_cfg):
    tiny_cfg.num_classes = 4
    with pytest.raises(ConfigError, match="public"):
        split_dataset(corpus_dir, [1, 2, 3, 4], tiny_cfg)


def test_split_missing_class_rejected(corpus_dir, tiny_cfg):
    with pytest.raises(ConfigError, match="absent"):
        split_dataset(corpus_dir, [1, 9], tiny_cfg)


def test_split_class_count_must_match_config(corpus_dir, tiny_cfg):
    tiny_cfg.num_classes = 3
    with pytest.raises(ConfigError, match="num_classes"):
        split_dataset(corpus_dir, [1, 3], tiny_cfg)


def test_manifest_rerun_byte_identical(corpus_dir, tiny_cfg, tmp_path):
    split = split_dataset(corpus_dir, [1, 3], tiny_cfg)
    write_manifest(split, tmp_path / "a.json")
    split2 = split_dataset(corpus_dir, [1, 3], tiny_cfg)
    write_manifest(split2, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_manifest_round_trip(corpus_dir, tiny_cfg, tmp_path):
    split = split_dataset(corpus_dir, [1, 3], tiny_cfg)
    write_manifest(split, tmp_path / "split.json")
    loaded = load_manifest(tmp_path / "split.json", verify_digests=True)
    assert loaded.label_map == split.label_map
    assert loaded.private == split.private
    assert loaded.public == split.public


def test_manifest_detects_tampered_file(corpus_dir, tiny_cfg, tmp_path):
    work = tmp_path / "copy"
    shutil.copytree(corpus_dir, work)
    cfg = tiny_cfg
    cfg.data.source_dir = str(work)
    split = split_dataset(work, [1, 3], cfg)
    write_manifest(split, tmp_path / "split.json")
    victim = work / split.private[0][0]
    victim.write_bytes(b"\x89PNG tampered")
    with pytest.raises(SplitIntegrityError, match="digest"):
        load_manifest(tmp_path / "split.json", verify_digests=True)


def test_manifest_bad_format_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(IngestionError, match="format"):
        load_manifest(path)


def test_shared_content_across_sides_rejected(tmp_path, tiny_cfg):
    root = tmp_path / "corpus"
    for c in ("1", "2"):
        (root / c).mkdir(parents=True)
    img = Image.fromarray(np.full((8, 8, 3), 120, dtype=np.uint8))
    img.save(root / "1" / "a.png")
    shutil.copy(root / "1" / "a.png", root / "2" / "b.png")
    cfg = tiny_cfg
    cfg.num_classes = 1
    with pytest.raises(SplitIntegrityError, match="identical content"):
        split_dataset(root, [1], cfg)


def test_integrity_checks_label_coverage(corpus_dir, tiny_cfg):
    split = split_dataset(corpus_dir, [1, 3], tiny_cfg)
    split.private = [(p, d, 1) for p, d, _ in split.private]  # drop label 2
    with pytest.raises(SplitIntegrityError, match="labels"):
        check_split_integrity(split)


def test_image_loaders(corpus_dir, tiny_cfg):
    split = split_dataset(corpus_dir, [1, 3], tiny_cfg)
    private = load_private_images(split, 16)
    public = load_public_images(split, 16)
    assert private.images.shape == (12, 3, 16, 16)
    assert sorted(private.labels.unique().tolist()) == [0, 1]
    assert public.images.shape == (12, 3, 16, 16)
    assert torch.all(public.labels == -1)
    assert private.images.min() >= -1.0 and private.images.max() <= 1.0


def test_file_digest_is_content_hash(tmp_path):
    a = tmp_path / "a.bin"
    b = tmp_path / "b.bin"
    a.write_bytes(b"hello")
    b.write_bytes(b"hello")
    assert file_digest(a) == file_digest(b)
    b.write_bytes(b"world")
    assert file_digest(a) != file_digest(b)


def test_random_flip_probabilities():
    x = torch.arange(2 * 3 * 4 * 4, dtype=torch.float32).reshape(2, 3, 4, 4)
    gen = torch.Generator().manual_seed(0)
    none = random_flip(x, gen, p=0.0)
    assert torch.equal(none, x)
    gen = torch.Generator().manual_seed(0)
    flipped = random_flip(x, gen, p=1.0)
    assert torch.equal(flipped, torch.flip(x, dims=[-1]))
    gen_a = torch.Generator().manual_seed(5)
    gen_b = torch.Generator().manual_seed(5)
    assert torch.equal(random_flip(x, gen_a), random_flip(x, gen_b))


def test_save_image_round_trip(tmp_path):
    x = torch.rand(3, 16, 16) * 2 - 1
    save_image(x, tmp_path / "r" / "1" / "000.png")
    back = preprocess(tmp_path / "r" / "1" / "000.png", 16)
    assert (back - x).abs().max() <= 1.0 / 127.5 + 1e-6


def test_load_image_dir(tmp_path):
    for c in (1, 2):
        for i in range(2):
            save_image(torch.zeros(3, 8, 8), tmp_path / "rec" / str(c) / f"{i:03d}.png")
    data = load_image_dir(tmp_path / "rec", 8)
    assert data.images.shape == (4, 3, 8, 8)
    assert data.labels.tolist() == [0, 0, 1, 1]
    with pytest.raises(IngestionError):
        load_image_dir(tmp_path / "missing", 8)
    (tmp_path / "rec" / "oops").mkdir()
    with pytest.raises(IngestionError, match="oops"):
        load_image_dir(tmp_path / "rec", 8)
