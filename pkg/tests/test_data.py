import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from privoptics.data import (AttributePair, CorpusError, DatasetSplit, load_attribute_corpus, load_corpus,
                             preprocess_image, read_attribute_table, read_partition, save_corpus,
                             synthesize_toy, trivial_accuracy)


def test_preprocess_celeba_size():
    raw = np.random.default_rng(0).integers(0, 256, (218, 178, 3), dtype=np.uint8)
    out = preprocess_image(raw)
    assert out.shape == (64, 64) and out.dtype == np.float32
    assert 0.0 <= out.min() and out.max() <= 1.0


def test_preprocess_white_is_one():
    out = preprocess_image(np.full((200, 180, 3), 255, dtype=np.uint8))
    np.testing.assert_allclose(out, 1.0, atol=1e-6)


def test_preprocess_rejects_small():
    with pytest.raises(ValueError):
        preprocess_image(np.zeros((100, 200, 3), dtype=np.uint8))


def test_bilinear_checkerboard_by_hand():
    # 2x2 checkerboard upsampled to 4x4 (half-pixel centres, edge clamped):
    # sample points 0, .25, .75, 1 on each axis of f(y, x) = y(1-x) + x(1-y)
    board = np.array([[0.0, 1.0], [1.0, 0.0]])
    expected = np.array([
        [0.00, 0.250, 0.750, 1.00],
        [0.25, 0.375, 0.625, 0.75],
        [0.75, 0.625, 0.375, 0.25],
        [1.00, 0.750, 0.250, 0.00],
    ])
    np.testing.assert_allclose(preprocess_image(board, crop=2, size=4), expected, atol=1e-6)
    # 4x4 checkerboard down to 2x2 averages each 2x2 tile
    big = np.indices((4, 4)).sum(0) % 2
    np.testing.assert_allclose(preprocess_image(big.astype(float), crop=4, size=2), 0.5, atol=1e-6)


def test_luma_weights():
    rgb = np.zeros((170, 170, 3), dtype=np.uint8)
    rgb[..., 0] = 255
    np.testing.assert_allclose(preprocess_image(rgb), 0.299, atol=1e-6)


@given(st.integers(170, 260), st.integers(170, 260), st.integers(0, 1000))
def test_preprocess_range_property(h, w, seed):
    raw = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
    out = preprocess_image(raw)
    assert out.shape == (64, 64) and 0 <= out.min() and out.max() <= 1


def test_trivial_accuracy():
    assert trivial_accuracy([1, 1, 1, 0]) == 0.75
    assert trivial_accuracy([0, 1]) == 0.5
    with pytest.raises(ValueError):
        trivial_accuracy([])


@given(st.lists(st.integers(0, 1), min_size=1, max_size=200))
def test_trivial_accuracy_bounds(labels):
    assert 0.5 <= trivial_accuracy(labels) <= 1.0


def _write_celeba(root, n=10, flags=None):
    img_dir = root / "img_align_celeba"
    img_dir.mkdir(parents=True)
    rng = np.random.default_rng(1)
    names = [f"{i:06d}.jpg" for i in range(1, n + 1)]
    rows = []
    for i, name in enumerate(reversed(names)):
        Image.fromarray(rng.integers(0, 256, (218, 178, 3), dtype=np.uint8)).save(img_dir / name, format="PNG")
        f = flags[i] if flags else ("1" if i % 2 else "-1", "-1" if i % 3 else "1")
        rows.append(f"{name} {f[0]} {f[1]}")
    table = root / "list_attr_celeba.txt"
    table.write_text(f"{n}\nSmiling Male\n" + "\n".join(rows) + "\n")
    return img_dir, table, names


def test_attribute_table_parsing(tmp_path):
    _, table, names = _write_celeba(tmp_path)
    got_names, header, flags = read_attribute_table(table)
    assert got_names == sorted(names)
    assert header == ["Smiling", "Male"]
    assert set(np.unique(flags)) <= {0, 1}


def test_minus_one_maps_to_zero(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("Smiling Male\na.jpg -1 1\n")
    _, _, flags = read_attribute_table(p)
    assert flags.tolist() == [[0, 1]]


def test_malformed_flag(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("Smiling\na.jpg 0\n")
    with pytest.raises(CorpusError):
        read_attribute_table(p)


def test_ratio_split_sizes(tmp_path):
    img_dir, table, names = _write_celeba(tmp_path)
    for seed in (0, 1, 2):
        data = load_attribute_corpus(img_dir, table, ((0.8, 0.1, 0.1), seed))
        assert data.sizes() == (8, 1, 1)
        ids = [i for p in data.parts().values() for i in p.ids]
        assert sorted(ids) == sorted(names) and len(set(ids)) == 10


def test_official_partition(tmp_path):
    img_dir, table, names = _write_celeba(tmp_path)
    part = tmp_path / "list_eval_partition.txt"
    part.write_text("\n".join(f"{n} {0 if i < 6 else (1 if i < 8 else 2)}" for i, n in enumerate(names)))
    assert read_partition(part)[names[7]] == 1
    data = load_attribute_corpus(img_dir, table, part)
    assert data.sizes() == (6, 2, 2)
    assert list(data.train.ids) == sorted(data.train.ids)


def test_worker_count_does_not_change_order(tmp_path):
    img_dir, table, _ = _write_celeba(tmp_path)
    a = load_attribute_corpus(img_dir, table, ((0.8, 0.1, 0.1), 0), workers=0)
    b = load_attribute_corpus(img_dir, table, ((0.8, 0.1, 0.1), 0), workers=4)
    assert a.content_hash() == b.content_hash()


def test_missing_image_and_unknown_attribute(tmp_path):
    img_dir, table, names = _write_celeba(tmp_path)
    with pytest.raises(KeyError):
        load_attribute_corpus(img_dir, table, ((0.8, 0.1, 0.1), 0), attributes=["Eyeglasses"])
    (img_dir / names[0]).unlink()
    with pytest.raises(FileNotFoundError):
        load_attribute_corpus(img_dir, table, ((0.8, 0.1, 0.1), 0))


def test_toy_balanced_and_sized():
    data = synthesize_toy(1000, 11)
    assert data.sizes() == (800, 100, 100)
    for attr in ("blob_side", "stripe_orient"):
        y = np.concatenate([p.labels_of(attr) for p in data.parts().values()])
        assert (y == 1).sum() == 500
    imgs = data.train.images
    assert imgs.shape[1:] == (64, 64) and imgs.min() >= 0 and imgs.max() <= 1
    assert synthesize_toy(10, 0).sizes() == (8, 1, 1)


def test_toy_deterministic():
    a, b = synthesize_toy(50, 4), synthesize_toy(50, 4)
    assert a.content_hash() == b.content_hash()
    assert synthesize_toy(50, 5).content_hash() != a.content_hash()


def test_toy_rejects_odd_or_small():
    for n in (8, 11):
        with pytest.raises(ValueError):
            synthesize_toy(n, 0)


def test_toy_labels_independent():
    data = synthesize_toy(10000, 0)
    z = np.concatenate([p.labels_of("blob_side") for p in data.parts().values()])
    y = np.concatenate([p.labels_of("stripe_orient") for p in data.parts().values()])
    table = np.array([[np.sum((z == a) & (y == b)) for b in (0, 1)] for a in (0, 1)], dtype=float)
    expected = table.sum(1, keepdims=True) * table.sum(0, keepdims=True) / table.sum()
    chi2 = ((table - expected) ** 2 / expected).sum()
    # one degree of freedom: p > 0.01 <=> chi2 < 6.635
    assert chi2 < 6.635


def test_toy_linearly_detectable():
    from sklearn.linear_model import LogisticRegression

    data = synthesize_toy(1000, 2)
    xtr = data.train.images.reshape(len(data.train), -1)
    xte = data.test.images.reshape(len(data.test), -1)
    for attr in ("blob_side", "stripe_orient"):
        clf = LogisticRegression(max_iter=2000).fit(xtr, data.train.labels_of(attr))
        assert clf.score(xte, data.test.labels_of(attr)) >= 0.95


def test_toy_splits_disjoint():
    data = synthesize_toy(200, 1)
    ids = [set(p.ids) for p in data.parts().values()]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert sum(map(len, ids)) == 200


def test_corpus_cache_roundtrip_and_corruption(tmp_path, tiny_toy):
    save_corpus(tiny_toy, tmp_path, {"seed": 3, "n": 40})
    back = load_corpus(tmp_path)
    assert back.content_hash() == tiny_toy.content_hash()
    meta = json.loads((tmp_path / "manifest.json").read_text())
    meta["content_hash"] = "0" * 64
    (tmp_path / "manifest.json").write_text(json.dumps(meta))
    with pytest.raises(CorpusError):
        load_corpus(tmp_path)


def test_attribute_pair(tiny_toy):
    with pytest.raises(ValueError):
        AttributePair("Male", "Male")
    AttributePair("blob_side", "stripe_orient").check(tiny_toy)
    with pytest.raises(KeyError):
        AttributePair("blob_side", "Male").check(tiny_toy)
