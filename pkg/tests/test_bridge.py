import numpy as np
import pytest
import torch

from vspkit.bridge import Projection, project, textualize
from vspkit.corpus import DEFAULT_TEMPLATES, VisemeSpec, default_lexicon, generate_corpus
from vspkit.dedup import deduplicate
from vspkit.quantizer import assign, fit_corpus


def test_zero_input_gives_bias():
    p = Projection(5, 7, seed=1)
    with torch.no_grad():
        p.bias.copy_(torch.arange(7.0))
    out = project(p, np.zeros((3, 5), dtype=np.float32))
    assert out.shape == (3, 7)
    assert torch.equal(out, torch.arange(7.0).expand(3, 7))


def test_identity_weight():
    p = Projection(4, 4)
    with torch.no_grad():
        p.weight.copy_(torch.eye(4))
    x = torch.randn(6, 4)
    assert torch.equal(project(p, x), x)


def test_matches_naive_matmul():
    p = Projection(6, 3, seed=2).double()
    with torch.no_grad():
        p.bias.normal_()
    x = np.random.default_rng(0).normal(size=(5, 6))
    w, b = p.weight.detach().numpy(), p.bias.detach().numpy()
    expected = np.array([[sum(x[r, i] * w[o, i] for i in range(6)) + b[o] for o in range(3)] for r in range(5)])
    np.testing.assert_allclose(project(p, torch.as_tensor(x)).detach().numpy(), expected, atol=1e-12)


def test_init_is_seeded_and_bounded():
    a, b = Projection(24, 16, seed=3), Projection(24, 16, seed=3)
    assert torch.equal(a.weight, b.weight)
    assert a.weight.abs().max().item() <= 1 / np.sqrt(24)
    assert torch.count_nonzero(a.bias) == 0


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        project(Projection(4, 2), np.zeros((3, 5)))


def test_textualize_picks_cosine_nearest():
    table = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    emb = torch.tensor([[5.0, 0.1], [0.0, 2.0], [3.0, 3.2], [0.0, 0.0]])
    assert textualize(emb, table) == [0, 1, 2, 0]


def test_textualize_matches_brute_force():
    rng = np.random.default_rng(4)
    table = rng.normal(size=(30, 8))
    emb = rng.normal(size=(40, 8))
    expected = []
    for e in emb:
        sims = [float(e @ t / (np.linalg.norm(e) * np.linalg.norm(t))) for t in table]
        expected.append(int(np.argmax(sims)))
    assert textualize(emb, table) == expected


def test_textualize_errors():
    with pytest.raises(ValueError):
        textualize(torch.zeros(2, 3), torch.zeros(0, 3))
    with pytest.raises(ValueError):
        textualize(torch.zeros(2, 3), torch.zeros(4, 2))


def test_no_consecutive_identical_reduced_rows():
    spec = VisemeSpec.default()
    corpus = generate_corpus(spec, default_lexicon(), 20, DEFAULT_TEMPLATES, seed=6)
    cb = fit_corpus(corpus, k=spec.n_visemes, seed=0, n_init=3)
    p = Projection(spec.d_vis, 32, seed=0)
    for s in corpus:
        out = deduplicate(s.features, assign(cb, s.features))
        proj = project(p, out.reduced).detach()
        assert not torch.any(torch.all(proj[1:] == proj[:-1], dim=1))
