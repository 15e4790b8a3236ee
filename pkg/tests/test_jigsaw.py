import numpy as np
import pytest

from eisnet import jigsaw
from eisnet.oracles import jigsaw_label_oracle


@pytest.fixture(scope="module")
def pset():
    return jigsaw.default_permutation_set()


def test_default_set_shape_and_identity(pset):
    assert len(pset) == 31
    assert np.array_equal(pset.perms[0], np.arange(9))


def test_default_set_distinct(pset):
    assert len({tuple(r) for r in pset.perms}) == 31


def test_default_set_min_hamming(pset):
    # exhaustive pairwise check of the shipped set
    best = 9
    for i in range(1, 31):
        for j in range(i + 1, 31):
            best = min(best, int((pset.perms[i] != pset.perms[j]).sum()))
    assert best == pset.min_hamming
    assert best >= 5


def test_regeneration_reproduces_shipped_set(pset):
    regen = jigsaw.generate_permutation_set(pset.seed)
    assert np.array_equal(regen.perms, pset.perms)


def test_generator_rejects_malformed_set():
    bad = np.tile(np.arange(9), (31, 1))
    with pytest.raises(ValueError, match="distinct"):
        jigsaw.PermutationSet(perms=bad, seed=0, min_hamming=0)
    shifted = jigsaw.generate_permutation_set(1).perms.copy()
    shifted[0] = shifted[1]
    with pytest.raises(ValueError, match="identity"):
        jigsaw.PermutationSet(perms=shifted, seed=0, min_hamming=0)


def test_shuffle_identity_and_inverse(pset):
    rng = np.random.default_rng(0)
    img = rng.random((3, 9, 9)).astype(np.float32)
    assert np.array_equal(jigsaw.shuffle_image(img, pset.perms[0]), img)
    for cls in range(1, 31):
        p = pset.perms[cls]
        shuffled = jigsaw.shuffle_image(img, p)
        assert not np.array_equal(shuffled, img)
        assert np.array_equal(jigsaw.unshuffle_image(shuffled, p), img)


def test_shuffle_preserves_pixel_multiset(pset):
    img = np.random.default_rng(1).random((3, 6, 6))
    shuffled = jigsaw.shuffle_image(img, pset.perms[7])
    assert np.array_equal(np.sort(img, axis=None), np.sort(shuffled, axis=None))


def test_shuffle_rejects_indivisible_side():
    with pytest.raises(ValueError, match="divisible"):
        jigsaw.shuffle_image(np.zeros((3, 8, 8)), np.arange(9))


def test_batch_boundaries(pset):
    rng = np.random.default_rng(2)
    imgs = rng.random((8, 3, 9, 9)).astype(np.float32)
    out, labels = jigsaw.make_jigsaw_batch(imgs, pset, 0.0, rng)
    assert np.all(labels == 0)
    assert np.array_equal(out, imgs)
    out, labels = jigsaw.make_jigsaw_batch(imgs, pset, 1.0, rng)
    assert np.all(labels != 0)


def test_batch_label_rederivation_oracle(pset):
    rng = np.random.default_rng(3)
    imgs = rng.random((200, 3, 9, 9)).astype(np.float32)
    out, labels = jigsaw.make_jigsaw_batch(imgs, pset, 0.6, rng)
    for orig, got, label in zip(imgs, out, labels):
        assert jigsaw_label_oracle(orig, got, pset.perms) == label


def test_set_file_roundtrip(tmp_path, pset):
    path = tmp_path / "perms.txt"
    jigsaw.save_permutation_set(path, pset)
    loaded = jigsaw.load_permutation_set(path)
    assert np.array_equal(loaded.perms, pset.perms)
    assert loaded.min_hamming == pset.min_hamming
    assert loaded.seed == pset.seed


def test_aux_loss_uniform_and_confident():
    loss, _ = jigsaw.aux_loss(np.zeros((4, 31)), [0, 5, 10, 30])
    assert loss == pytest.approx(np.log(31), abs=1e-12)
    confident = np.zeros((1, 31))
    confident[0, 12] = 1000.0
    loss, _ = jigsaw.aux_loss(confident, [12])
    assert loss < 1e-9


def test_aux_loss_grad_rows_sum_zero():
    rng = np.random.default_rng(4)
    _, grad = jigsaw.aux_loss(rng.standard_normal((5, 31)), rng.integers(31, size=5))
    assert np.all(np.abs(grad.sum(axis=1)) < 1e-9)


def test_aux_loss_rejects_out_of_range():
    with pytest.raises(ValueError):
        jigsaw.aux_loss(np.zeros((1, 31)), [31])
