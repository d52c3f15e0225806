from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from meshphys import autodiff as ad
from meshphys.fileio import packaged_topology_path, read_topology
from meshphys.model import (ArchitectureSpec, block_assignment, build_model, load_checkpoint,
                            preprocess, reduced_spec, save_checkpoint)
from meshphys.pooling import normalized_adjacency
from meshphys.stgraph import build_adjacency, grid8_adjacency


@pytest.fixture(scope="module")
def topo852():
    return read_topology(packaged_topology_path())


def _small(variant="graph", n=16, channels=(4, 4), pool_layers=(1,), seed=0, adj=None):
    pos = np.random.default_rng(seed).normal(size=(n, 3))
    adj = grid8_adjacency(4, n // 4) if adj is None else adj
    spec = ArchitectureSpec(channels=channels, pool_layers=pool_layers, smooth_layer=1,
                            variant=variant)
    return build_model(spec, pos, adj, seed=seed, dtype=np.float64)


def test_default_parameter_budget(topo852):
    adj = build_adjacency(topo852, "shared_vertex")
    model = build_model(ArchitectureSpec(), topo852.face_centroids(), adj)
    count = model.num_parameters()
    print(f"default parameter count = {count}")
    assert abs(count - 470_000) / 470_000 < 0.15
    assert model.hierarchy.node_counts == [852, 213, 53, 13]
    stmap = build_model(ArchitectureSpec(variant="stmap"), topo852.face_centroids(), adj)
    assert 0.5 <= stmap.num_parameters() / count <= 2.0


def test_parameter_names_unique_and_stable():
    a, b = _small(seed=1), _small(seed=2)
    assert list(a.params) == list(b.params)
    assert len(set(a.params)) == len(a.params)


def test_layer1_shape_on_852_nodes(topo852):
    adj = build_adjacency(topo852, "shared_vertex")
    model = build_model(ArchitectureSpec(), topo852.face_centroids(), adj)
    x = ad.Tensor(np.random.default_rng(0).normal(size=(1, 3, 32, 852)).astype(np.float32))
    with ad.no_grad():
        assert model.mktcb(x, 1).shape == (1, 16, 32, 852)


def test_mktcb_zero_input_zero_output():
    model = _small()
    with ad.no_grad():
        out = model.mktcb(ad.Tensor(np.zeros((2, 3, 16, 16))), 1)
    assert np.array_equal(out.data, np.zeros((2, 4, 16, 16)))


def test_gates_sum_to_one_and_can_be_forced(rng):
    model = _small()
    x = rng.normal(size=(3, 3, 16, 16))
    with ad.no_grad():
        model(x)
        for g in model.last_gates:
            assert np.allclose(g.sum(axis=1), 1.0, atol=1e-6)
        model(x, force_equal_gates=True)
    assert all(np.allclose(g, 1.0 / 3) for g in model.last_gates)


def test_sgcb_self_only_is_per_node(rng):
    n = 8
    model = _small(n=n, adj=sp.eye_array(n, format="csr"), pool_layers=())
    assert np.allclose(model._propagation[0], np.eye(n))
    x = rng.normal(size=(2, 4, 10, n))
    with ad.no_grad():
        full = model.sgcb(ad.Tensor(x), 1, 0).data
    # each node's output depends only on its own input
    x2 = x.copy()
    x2[..., 3] += 1.0
    model.eval()
    with ad.no_grad():
        a = model.sgcb(ad.Tensor(x), 1, 0).data
        b = model.sgcb(ad.Tensor(x2), 1, 0).data
    changed = np.abs(a - b).max(axis=(0, 1, 2)) > 0
    assert changed.tolist() == [i == 3 for i in range(n)]
    assert full.shape == x.shape


def test_propagation_operator_dense_oracle():
    a = sp.csr_array(np.array([[1, 1, 0, 0], [1, 1, 1, 1], [0, 1, 1, 0], [0, 1, 0, 1]], float))
    d = a.sum(1)
    ref = a.toarray() / np.sqrt(np.outer(d, d))
    assert np.allclose(normalized_adjacency(a).toarray(), ref)
    full = normalized_adjacency(np.ones((5, 5))).toarray()
    x = np.random.default_rng(0).normal(size=5)
    assert np.allclose(full @ x, x.mean())


def test_sgcb_permutation_equivariant(rng):
    n = 8
    adj = grid8_adjacency(2, 4)
    perm = rng.permutation(n)
    model = _small(n=n, adj=adj, pool_layers=())
    permuted = _small(n=n, adj=sp.csr_array(adj.toarray()[np.ix_(perm, perm)]), pool_layers=())
    permuted.load_state_dict(model.state_dict())
    x = rng.normal(size=(2, 4, 10, n))
    model.eval()
    permuted.eval()
    with ad.no_grad():
        a = model.sgcb(ad.Tensor(x), 1, 0).data
        b = permuted.sgcb(ad.Tensor(x[..., perm]), 1, 0).data
    assert np.allclose(a[..., perm], b, atol=1e-12)


def test_sgpb_identity_and_global(rng):
    model = _small(n=16, pool_layers=(1,))
    x = ad.Tensor(rng.normal(size=(1, 4, 8, 16)))
    pooled = model.sgpb(x, 0).data
    assign = model.hierarchy.assignments[0]
    for k in range(assign.max() + 1):
        assert np.allclose(pooled[..., k], x.data[..., assign == k].mean(-1))
    one = _small(n=4, pool_layers=(1,), adj=grid8_adjacency(2, 2))
    assert one.hierarchy.node_counts == [4, 1]
    y = ad.Tensor(rng.normal(size=(1, 4, 8, 4)))
    assert np.allclose(one.sgpb(y, 0).data[..., 0], y.data.mean(-1))


@pytest.mark.parametrize("variant", ["graph", "stmap"])
@pytest.mark.parametrize("t", [9, 16, 23])
def test_forward_preserves_length(variant, t, rng):
    model = _small(variant)
    with ad.no_grad():
        y, (tap, adj) = model(rng.normal(size=(2, 3, t, 16)))
    assert y.shape == (2, t)
    assert tap.shape[-1] == adj.shape[0]


def test_identical_clips_identical_outputs_in_eval(rng):
    model = _small().eval()
    clip = rng.normal(size=(3, 16, 16))
    with ad.no_grad():
        y, _ = model(np.stack([clip, clip, clip]))
        y2, _ = model(np.stack([clip, clip, clip]))
    assert np.array_equal(y.data[0], y.data[1]) and np.array_equal(y.data, y2.data)


def test_stmap_not_permutation_equivariant(rng):
    model = _small("stmap").eval()
    x = rng.normal(size=(1, 3, 16, 16))
    perm = rng.permutation(16)
    with ad.no_grad():
        a, _ = model(x)
        b, _ = model(x[..., perm])
    assert not np.allclose(a.data, b.data)
    assert block_assignment(10, 4).tolist() == [0, 0, 0, 0, 1, 1, 1, 1, 1, 1]


def test_forward_rejects_wrong_nodes(rng):
    with pytest.raises(ValueError):
        _small()(rng.normal(size=(1, 3, 16, 15)))


def test_preprocess_masked_standardisation(rng):
    x = rng.normal(3.0, 2.0, size=(2, 3, 10, 6))
    occ = np.zeros((2, 10, 6), bool)
    occ[:, :3, 0] = True
    z = preprocess(x, occ)
    vis = ~occ[:, None]
    vis = np.broadcast_to(vis, z.shape)
    for b in range(2):
        for c in range(3):
            v = z[b, c][vis[b, c]]
            assert abs(v.mean()) < 1e-12 and abs(v.std() - 1) < 1e-12
    assert np.all(z[np.broadcast_to(occ[:, None], z.shape)] == 0)


def test_checkpoint_round_trip(tmp_path, rng):
    spec = reduced_spec()
    pos = rng.normal(size=(16, 3))
    model = build_model(spec, pos, grid8_adjacency(4, 4), seed=3)
    x = rng.normal(size=(2, 3, 16, 16)).astype(np.float32)
    model.train()
    with ad.no_grad():
        model(x)                     # move running stats off their defaults
    path = tmp_path / "m.mph"
    save_checkpoint(str(path), model, {"note": "x"})
    ck = load_checkpoint(str(path))
    assert ck.metadata == {"note": "x"}
    assert ck.model.spec == spec
    for k, v in model.state_dict().items():
        assert np.array_equal(v, ck.model.state_dict()[k])
    assert np.array_equal(model.predict(x), ck.model.predict(x))
    save_checkpoint(str(tmp_path / "m2.mph"), ck.model, {"note": "x"})
    assert path.read_bytes() == (tmp_path / "m2.mph").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.mph"
    p.write_bytes(b"XXXX" + b"\0" * 16)
    with pytest.raises(ValueError):
        load_checkpoint(str(p))


def test_spec_validation():
    with pytest.raises(ValueError):
        ArchitectureSpec(kernels=(3, 4))
    with pytest.raises(ValueError):
        ArchitectureSpec(pool_layers=(6,))
    with pytest.raises(ValueError):
        ArchitectureSpec(variant="cnn")
