import numpy as np
import pytest
import torch
import cv2

from poisonlab import datasets as ds
from poisonlab.attack import PerturbationSet
from poisonlab.imageops import linf_norm

EPS = 16 / 255


def make_pset(dataset, eps=EPS, seed=0):
    gen = torch.Generator().manual_seed(seed)
    deltas = {c: (torch.rand(dataset.image_shape, generator=gen) * 2 - 1) * eps
              for c in range(dataset.num_classes)}
    return PerturbationSet(mode="classwise", epsilon=eps, deltas=deltas)


# -- synthetic generator ------------------------------------------------------

def test_generator_deterministic(tiny_spec, tiny_data):
    again = ds.generate_synthetic_signs(tiny_spec)
    assert torch.equal(again[0].images, tiny_data[0].images)
    assert torch.equal(again[1].images, tiny_data[1].images)
    assert torch.equal(again[0].labels, tiny_data[0].labels)


def test_generator_sizes():
    spec = ds.SyntheticSignSpec(num_classes=10, train_per_class=200, eval_per_class=50)
    # size arithmetic only; rendering 2000 images is cheap but not free
    train, predict = ds.generate_synthetic_signs(
        ds.SyntheticSignSpec(num_classes=10, train_per_class=5, eval_per_class=2))
    assert len(train) == 50 and len(predict) == 20
    assert spec.train_per_class * spec.num_classes == 2000


def test_generator_rejects_too_many_classes():
    with pytest.raises(ValueError):
        ds.generate_synthetic_signs(ds.SyntheticSignSpec(num_classes=99))


def test_train_and_eval_streams_disjoint(tiny_data):
    train, predict = tiny_data
    # no eval image appears verbatim in the train split
    flat_train = train.images.flatten(1)
    for img in predict.images[:10]:
        assert not (flat_train == img.flatten()).all(dim=1).any()


def test_template_separation():
    # classes share a fill color, so the floor reflects shape/glyph pixels
    # only (circle vs octagon with the same glyph is the tightest pair)
    n = 15
    templates = [ds._render_template(k, 32) for k in range(n)]
    for a in range(n):
        for b in range(a + 1, n):
            assert np.abs(templates[a] - templates[b]).mean() >= 0.008


def test_pixel_range(tiny_train):
    assert tiny_train.images.min() >= 0.0 and tiny_train.images.max() <= 1.0


# -- directory loader ---------------------------------------------------------

def _write_png(path, value):
    img = np.full((40, 40, 3), value, dtype=np.uint8)
    cv2.imwrite(str(path), img)


def test_load_directory_roundtrip(tmp_path):
    for cls, value in [(0, 10), (1, 200)]:
        d = tmp_path / "train" / f"{cls:05d}"
        d.mkdir(parents=True)
        _write_png(d / "a.png", value)
        _write_png(d / "b.png", value)
    loaded = ds.load_directory_dataset(tmp_path, "train", image_size=32)
    assert len(loaded) == 4
    assert loaded.num_classes == 2
    assert loaded.images.shape == (4, 3, 32, 32)
    assert torch.allclose(loaded.images[0], torch.full((3, 32, 32), 10 / 255))


def test_load_directory_single_class(tmp_path):
    d = tmp_path / "train" / "00000"
    d.mkdir(parents=True)
    _write_png(d / "only.png", 128)
    loaded = ds.load_directory_dataset(tmp_path, "train")
    assert len(loaded) == 1 and loaded.num_classes == 1


def test_load_directory_errors(tmp_path):
    with pytest.raises(ds.DatasetError, match="missing split"):
        ds.load_directory_dataset(tmp_path, "train")
    empty = tmp_path / "train" / "00000"
    empty.mkdir(parents=True)
    with pytest.raises(ds.DatasetError, match="empty class"):
        ds.load_directory_dataset(tmp_path, "train")
    bad = empty / "broken.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(ds.DatasetError, match="broken.png"):
        ds.load_directory_dataset(tmp_path, "train")


def test_load_directory_index_csv(tmp_path):
    d = tmp_path / "train"
    (d / "imgs").mkdir(parents=True)
    _write_png(d / "imgs" / "x.png", 50)
    (d / "index.csv").write_text("imgs/x.png,3\n")
    loaded = ds.load_directory_dataset(tmp_path, "train")
    assert loaded.labels.tolist() == [3]
    assert loaded.num_classes == 4


# -- poison mixing ------------------------------------------------------------

def test_mix_full_proportion(tiny_train):
    pset = make_pset(tiny_train)
    poisoned, manifest = ds.mix_poison(tiny_train, pset, 1.0, seed=42)
    assert manifest.poisoned_indices == list(range(len(tiny_train)))
    assert torch.equal(poisoned.labels, tiny_train.labels)


def test_mix_zero_proportion_is_identity(tiny_train):
    pset = make_pset(tiny_train)
    poisoned, manifest = ds.mix_poison(tiny_train, pset, 0.0, seed=42)
    assert manifest.poisoned_indices == []
    assert torch.equal(poisoned.images, tiny_train.images)


def test_mix_untouched_outside_indices_and_bounded(tiny_train):
    pset = make_pset(tiny_train)
    poisoned, manifest = ds.mix_poison(tiny_train, pset, 0.5, seed=42)
    chosen = set(manifest.poisoned_indices)
    assert len(chosen) == round(0.5 * len(tiny_train))
    for i in range(len(tiny_train)):
        if i in chosen:
            assert linf_norm(poisoned.images[i] - tiny_train.images[i]) <= EPS + 1e-7
        else:
            assert torch.equal(poisoned.images[i], tiny_train.images[i])


def test_mix_indices_reproducible(tiny_train):
    a = ds.poison_indices(len(tiny_train), 0.3, seed=9)
    b = ds.poison_indices(len(tiny_train), 0.3, seed=9)
    assert a == b == sorted(set(a))


def test_mix_shape_mismatch_rejected(tiny_train):
    pset = make_pset(tiny_train)
    pset.deltas = {c: torch.zeros(3, 8, 8) for c in pset.deltas}
    with pytest.raises(ValueError, match="shape"):
        ds.mix_poison(tiny_train, pset, 1.0, seed=42)


# -- persistence --------------------------------------------------------------

def test_delta_file_roundtrip(tmp_path):
    t = torch.rand(3, 16, 16)
    ds.write_delta(tmp_path / "d.bin", t)
    assert torch.equal(ds.read_delta(tmp_path / "d.bin"), t)


def test_delta_file_truncated(tmp_path):
    ds.write_delta(tmp_path / "d.bin", torch.rand(3, 4, 4))
    raw = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "d.bin").write_bytes(raw[:-8])
    with pytest.raises(ds.IntegrityError):
        ds.read_delta(tmp_path / "d.bin")


def test_save_load_poisoned_roundtrip(tiny_train, tmp_path):
    pset = make_pset(tiny_train)
    poisoned, manifest = ds.mix_poison(tiny_train, pset, 0.5, seed=1)
    ds.save_poisoned(poisoned, manifest, tmp_path / "out")
    loaded, loaded_manifest = ds.load_poisoned(tmp_path / "out")
    assert torch.equal(loaded.images, poisoned.images)
    assert torch.equal(loaded.labels, poisoned.labels)
    assert loaded_manifest.poisoned_indices == manifest.poisoned_indices


def test_load_poisoned_tampered_manifest(tiny_train, tmp_path):
    pset = make_pset(tiny_train)
    poisoned, manifest = ds.mix_poison(tiny_train, pset, 0.5, seed=1)
    root = ds.save_poisoned(poisoned, manifest, tmp_path / "out")
    tampered = ds.PoisonManifest.from_json((root / "manifest.json").read_text())
    tampered.poisoned_indices = tampered.poisoned_indices[:-1]
    (root / "manifest.json").write_text(tampered.to_json())
    with pytest.raises(ds.IntegrityError):
        ds.load_poisoned(root)


def test_load_poisoned_tampered_pixels(tiny_train, tmp_path):
    pset = make_pset(tiny_train)
    poisoned, manifest = ds.mix_poison(tiny_train, pset, 1.0, seed=1)
    root = ds.save_poisoned(poisoned, manifest, tmp_path / "out")
    img = cv2.imread(str(root / "images" / "000000.tiff"), cv2.IMREAD_UNCHANGED)
    cv2.imwrite(str(root / "images" / "000000.tiff"), img * 0.5)
    with pytest.raises(ds.IntegrityError, match="hash"):
        ds.load_poisoned(root)
