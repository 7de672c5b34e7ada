import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from irisinvert.extractor import (EmbeddingNet, ExtractorConfig, ExtractorSchedule, augmented_template,
                                  cosine_distance, cosine_matrix, extract_embedding, make_templates,
                                  semi_hard_triplet_loss, train_extractor, triplet_loss)
from irisinvert.nn import ConfigurationError

from oracles import cosine_d

SMALL = ExtractorConfig((32, 32), 8, (4, 8), use_flip_augmentation=True)


def triplet_oracle(a, p, n, margin):
    out = 0.0
    for ai, pi, ni in zip(a, p, n):
        out += max(0.0, sum((x - y) ** 2 for x, y in zip(ai, pi)) - sum((x - y) ** 2 for x, y in zip(ai, ni)) + margin)
    return out / len(a)


def semi_hard_oracle(emb, labels, margin):
    emb = np.asarray(emb, dtype=np.float64)
    n = len(labels)
    d = [[float(np.sum((emb[i] - emb[j]) ** 2)) for j in range(n)] for i in range(n)]
    losses = []
    for i in range(n):
        for j in range(n):
            if i == j or labels[i] != labels[j]:
                continue
            negs = [d[i][k] for k in range(n) if labels[k] != labels[i]]
            harder = [v for v in negs if v > d[i][j]]
            dn = min(harder) if harder else max(negs)
            losses.append(max(0.0, d[i][j] - dn + margin))
    return float(np.mean(losses))


def test_triplet_loss_oracle():
    rng = np.random.default_rng(0)
    a, p, n = (rng.normal(size=(6, 5)) for _ in range(3))
    got = triplet_loss(torch.tensor(a), torch.tensor(p), torch.tensor(n), 0.3).item()
    assert got == pytest.approx(triplet_oracle(a, p, n, 0.3), abs=1e-12)


def test_triplet_loss_zero_when_separated():
    a = torch.zeros(3, 2)
    assert triplet_loss(a, a, a + 10.0, 0.2).item() == 0.0


@given(st.integers(0, 10_000))
def test_semi_hard_oracle(seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), 3)
    emb = rng.normal(size=(9, 4))
    got = semi_hard_triplet_loss(torch.tensor(emb), torch.tensor(labels), 0.2).item()
    assert got == pytest.approx(semi_hard_oracle(emb, labels, 0.2), abs=1e-10)


def test_semi_hard_needs_positives():
    with pytest.raises(ValueError):
        semi_hard_triplet_loss(torch.randn(3, 2), torch.tensor([0, 1, 2]), 0.2)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ExtractorConfig((30, 32), 8, (4, 8))
    with pytest.raises(ConfigurationError):
        ExtractorConfig((32, 32), 0, (4,))
    assert ExtractorConfig(embedding_dim=8).template_dim == 16
    assert ExtractorConfig(embedding_dim=8, use_flip_augmentation=False).template_dim == 8


def test_embeddings_unit_norm_and_shape():
    net = EmbeddingNet(SMALL, seed=0)
    x = np.random.default_rng(0).random((5, 32, 32)).astype(np.float32)
    e = extract_embedding(x, net)
    assert e.shape == (5, 8)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-6)
    t = make_templates(x, net)
    assert t.shape == (5, 16)
    np.testing.assert_allclose(np.linalg.norm(t, axis=1), 1.0, atol=1e-6)


def test_flip_template_is_concatenation():
    net = EmbeddingNet(SMALL, seed=1)
    x = np.random.default_rng(1).random((3, 32, 32)).astype(np.float32)
    t = augmented_template(x, net)
    raw = np.concatenate([extract_embedding(x, net), extract_embedding(x[:, :, ::-1].copy(), net)], axis=1)
    np.testing.assert_allclose(t, raw / np.linalg.norm(raw, axis=1, keepdims=True), atol=1e-6)
    # a mirrored image swaps the halves
    tm = augmented_template(x[:, :, ::-1].copy(), net)
    np.testing.assert_allclose(tm[:, :8], t[:, 8:], atol=1e-5)


def test_wrong_input_shape():
    net = EmbeddingNet(SMALL)
    with pytest.raises(ConfigurationError):
        net(torch.zeros(1, 1, 16, 32))


def test_cosine_helpers_match_oracle():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
    m = cosine_matrix(a, b)
    for i in range(4):
        for j in range(3):
            assert m[i, j] == pytest.approx(cosine_d(a[i], b[j]), abs=1e-12)
            assert cosine_distance(a[i], b[j]) == pytest.approx(m[i, j], abs=1e-12)
    with pytest.raises(ValueError):
        cosine_distance(np.zeros(3), np.ones(3))


def test_training_errors():
    x = np.zeros((4, 32, 32), np.float32)
    with pytest.raises(ValueError, match="two classes"):
        train_extractor(x, [0, 0, 0, 0], SMALL)
    with pytest.raises(ValueError, match="two training images"):
        train_extractor(x, [0, 0, 0, 1], SMALL)


def blobs(n_classes=4, per=6, seed=0):
    rng = np.random.default_rng(seed)
    protos = rng.random((n_classes, 32, 32))
    x = np.concatenate([np.clip(p + 0.05 * rng.normal(size=(per, 32, 32)), 0, 1) for p in protos])
    return x.astype(np.float32), np.repeat(np.arange(n_classes), per)


def test_training_separates_classes_and_is_deterministic():
    x, y = blobs()
    sched = ExtractorSchedule(epochs=6, min_epochs=6, steps_per_epoch=10, classes_per_batch=4,
                              samples_per_class=3, lr=1e-3, seed=4)
    net, hist = train_extractor(x, y, SMALL, sched)
    assert len(hist) == 6 and hist[-1]["holdout_rank1"] == 1.0
    net2, hist2 = train_extractor(x, y, SMALL, sched)
    assert hist == hist2
    for (k, a), (_, b) in zip(net.state_dict().items(), net2.state_dict().items()):
        assert torch.equal(a, b), k
