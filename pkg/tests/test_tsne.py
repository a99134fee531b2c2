import numpy as np
import pytest

from nodulenet.tsne import (DegenerateInputError, conditional_probabilities, tsne_embed, write_embedding_svg,
                            write_embedding_tsv)


def test_perplexity_is_matched():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 3))
    d2 = ((x[:, None] - x[None]) ** 2).sum(-1)
    P = conditional_probabilities(d2, 10.0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        H = -np.nansum(np.where(P > 0, P * np.log(P), 0.0), axis=1)
    np.testing.assert_allclose(H, np.log(10.0), atol=1e-4)


def test_duplicate_points_stay_close():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(60, 8))
    x[1] = x[0]
    y = tsne_embed(x, perplexity=10, iterations=500, seed=0).points
    d = np.sqrt(((y[:, None] - y[None]) ** 2).sum(-1))[np.triu_indices(60, 1)]
    assert np.linalg.norm(y[0] - y[1]) <= np.quantile(d, 0.1)


def test_deterministic_and_validated():
    x = np.random.default_rng(2).normal(size=(20, 4))
    a = tsne_embed(x, perplexity=5, iterations=300, seed=3)
    b = tsne_embed(x, perplexity=5, iterations=300, seed=3)
    assert np.array_equal(a.points, b.points) and np.isfinite(a.points).all()
    with pytest.raises(ValueError):
        tsne_embed(x, perplexity=7)
    with pytest.raises(ValueError):
        tsne_embed(x[:4], perplexity=1)
    with pytest.raises(DegenerateInputError):
        tsne_embed(np.ones((10, 3)), perplexity=2)


def test_outputs(tmp_path):
    x = np.random.default_rng(2).normal(size=(12, 4))
    r = tsne_embed(x, perplexity=3, iterations=250, seed=0, labels=[i % 6 for i in range(12)],
                   ids=[f"n{i}" for i in range(12)])
    write_embedding_tsv(r, tmp_path / "e.tsv")
    write_embedding_svg(r, tmp_path / "e.svg")
    rows = (tmp_path / "e.tsv").read_text().splitlines()
    assert rows[0] == "id\tx\ty\tlabel" and len(rows) == 13 and rows[1].endswith("solid")
    svg = (tmp_path / "e.svg").read_text()
    assert svg.count("<circle") == 12 + 6 and "spiculated" in svg
