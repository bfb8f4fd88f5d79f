import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gkd.errors import ParameterError
from gkd.graphs import build_inter_graph, build_intra_graph, cosine_similarity, outer_node


def np_cos(a, b):
    a, b = np.ravel(a), np.ravel(b)
    na, nb = np.sqrt(sum(x * x for x in a)), np.sqrt(sum(x * x for x in b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def brute_intra(anchor, aug, mode):
    a_node = np.array([[x * y for y in anchor] for x in anchor])
    nodes, edges = [], []
    for z in aug:
        other = z
        left = z if mode == "self" else anchor
        node = np.array([[x * y for y in other] for x in left])
        nodes.append(node)
        edges.append(np_cos(a_node, node))
    return a_node, np.array(nodes), np.array(edges)


def brute_inter(aug):
    k = len(aug)
    return np.array([[np_cos(aug[i], aug[j]) for j in range(k)] for i in range(k)])


latents = st.tuples(st.integers(1, 8), st.integers(2, 4)).flatmap(
    lambda ck: st.tuples(
        arrays(np.float64, ck[0], elements=st.floats(-2, 2, allow_subnormal=False)),
        arrays(np.float64, (ck[1], ck[0]), elements=st.floats(-2, 2, allow_subnormal=False)),
    )
)


class TestCosine:
    def test_known_values(self):
        assert cosine_similarity(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 3.0])).item() == 0.0
        assert cosine_similarity(torch.tensor([1.0, 1.0]), torch.tensor([-2.0, -2.0])).item() == pytest.approx(-1.0)

    def test_zero_vector_gives_zero(self):
        z = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        out = cosine_similarity(z, torch.ones(3, dtype=torch.float64))
        out.backward()
        assert out.item() == 0.0 and torch.all(z.grad == 0)

    def test_width_mismatch(self):
        with pytest.raises(ParameterError):
            cosine_similarity(torch.ones(2), torch.ones(3))


class TestIntraGraph:
    @settings(max_examples=80, deadline=None)
    @given(latents, st.sampled_from(["self", "cross"]))
    def test_matches_brute_force(self, lat, mode):
        anchor, aug = lat
        g = build_intra_graph(torch.from_numpy(anchor), torch.from_numpy(aug), mode)
        a_node, nodes, edges = brute_intra(anchor, aug, mode)
        np.testing.assert_allclose(g.anchor_node.numpy(), a_node, atol=1e-7)
        np.testing.assert_allclose(g.aug_nodes.numpy(), nodes, atol=1e-7)
        np.testing.assert_allclose(g.edges.numpy(), edges, atol=1e-7)

    @settings(max_examples=80, deadline=None)
    @given(latents)
    def test_self_nodes_symmetric_psd_rank_one(self, lat):
        anchor, aug = lat
        g = build_intra_graph(torch.from_numpy(anchor), torch.from_numpy(aug))
        for node in g.nodes.numpy():
            np.testing.assert_allclose(node, node.T, atol=1e-12)
            vals = np.sort(np.linalg.eigvalsh(node))[::-1]
            assert vals[-1] >= -1e-9 * max(vals[0], 1.0)
            if vals[0] > 1e-9:
                assert abs(vals[1]) < 1e-6 * vals[0] if len(vals) > 1 else True

    @settings(max_examples=80, deadline=None)
    @given(latents, st.sampled_from(["self", "cross"]))
    def test_edges_bounded(self, lat, mode):
        g = build_intra_graph(torch.from_numpy(lat[0]), torch.from_numpy(lat[1]), mode)
        assert torch.all(g.edges.abs() <= 1.0)

    @settings(max_examples=40, deadline=None)
    @given(latents)
    def test_self_edge_is_squared_latent_cosine(self, lat):
        anchor, aug = lat
        g = build_intra_graph(torch.from_numpy(anchor), torch.from_numpy(aug))
        expect = [np_cos(anchor, z) ** 2 for z in aug]
        np.testing.assert_allclose(g.edges.numpy(), expect, atol=1e-9)

    def test_batched_equals_per_sample(self):
        rng = np.random.default_rng(0)
        anchor, aug = rng.normal(size=(3, 5)), rng.normal(size=(3, 4, 5))
        g = build_intra_graph(torch.from_numpy(anchor), torch.from_numpy(aug))
        for b in range(3):
            gb = build_intra_graph(torch.from_numpy(anchor[b]), torch.from_numpy(aug[b]))
            torch.testing.assert_close(g.edges[b], gb.edges)
            torch.testing.assert_close(g.nodes[b], gb.nodes)
        assert g.nodes.shape == (3, 5, 5, 5)

    def test_errors(self):
        with pytest.raises(ParameterError):
            build_intra_graph(torch.ones(3), torch.ones(2, 4))
        with pytest.raises(ParameterError):
            build_intra_graph(torch.ones(3), torch.ones(2, 3), node_mode="sideways")
        with pytest.raises(ParameterError):
            build_intra_graph(torch.ones(3), torch.ones(3))

    def test_outer_node(self):
        z = torch.tensor([1.0, 2.0])
        torch.testing.assert_close(outer_node(z), torch.tensor([[1.0, 2.0], [2.0, 4.0]]))


class TestInterGraph:
    @settings(max_examples=80, deadline=None)
    @given(latents)
    def test_matches_brute_force(self, lat):
        aug = lat[1]
        g = build_inter_graph(torch.from_numpy(aug))
        np.testing.assert_allclose(g.edges.numpy(), brute_inter(aug), atol=1e-7)
        assert g.nodes is not None and g.nodes.shape == aug.shape

    @settings(max_examples=80, deadline=None)
    @given(latents)
    def test_symmetric_unit_diagonal(self, lat):
        aug = lat[1]
        e = build_inter_graph(torch.from_numpy(aug)).edges.numpy()
        np.testing.assert_allclose(e, e.T, atol=1e-12)
        norms = np.linalg.norm(aug, axis=1)
        for i, n in enumerate(norms):
            assert e[i, i] == pytest.approx(1.0 if n >= 1e-12 else 0.0, abs=1e-12)
        assert np.all(np.abs(e) <= 1.0)

    def test_needs_two(self):
        with pytest.raises(ParameterError):
            build_inter_graph(torch.ones(1, 4))
