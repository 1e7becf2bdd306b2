import math

import numpy as np
import pytest

from simt.autodiff import Graph
from simt.tasks import (AngleTaskFamily, ClusterFamily, FlatDatasetError, SinusoidFamily,
                        accuracy, angular_loss, ce_loss, dump_flat_dataset, load_flat_dataset,
                        mse_loss, one_hot, sample_batch, sample_episode)


@pytest.fixture(scope="module")
def family():
    return ClusterFamily.synthetic(num_latent_classes=12, feature_dim=4, examples_per_class=30, seed=1)


def test_counting(family):
    ep = sample_episode(family, 5, 1, 15, np.random.default_rng(0))
    assert ep.x_s.shape == (5, 4) and ep.x_q.shape == (75, 4)
    assert sorted(ep.y_s) == list(range(5))
    assert np.array_equal(np.bincount(ep.y_q), [15] * 5)
    assert len(set(ep.class_map)) == 5


def test_determinism(family):
    a = sample_episode(family, 3, 2, 4, np.random.default_rng(9))
    b = sample_episode(family, 3, 2, 4, np.random.default_rng(9))
    assert all(np.array_equal(getattr(a, k), getattr(b, k))
               for k in ("x_s", "y_s", "x_q", "y_q", "class_map"))


def test_support_query_disjoint(family):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        ep = sample_episode(family, 5, 1, 5, rng)
        assert not set(ep.support_idx) & set(ep.query_idx)
    ep = SinusoidFamily().sample_episode(1, 5, 10, rng)
    assert not set(ep.support_idx) & set(ep.query_idx)


def test_insufficient_classes(family):
    with pytest.raises(ValueError):
        sample_episode(family, 13, 1, 1, np.random.default_rng(0))


def test_split_disjoint(family):
    a, b, c = family.split((6, 3, 3))
    assert not set(a.class_ids) & set(b.class_ids) and not set(b.class_ids) & set(c.class_ids)


def test_batch_stacking():
    b = sample_batch(SinusoidFamily(), 4, 1, 5, 10, np.random.default_rng(0))
    assert b.x_s.shape == (4, 5, 1) and b.y_q.shape == (4, 10, 1) and b.num_tasks == 4


def test_sinusoid_targets():
    ep = SinusoidFamily().sample_episode(1, 5, 10, np.random.default_rng(3))
    a, ph = ep.task_params["amplitude"], ep.task_params["phase"]
    assert np.allclose(ep.y_s, a * np.sin(ep.x_s + ph), rtol=0, atol=1e-15)
    assert 0.1 <= a <= 5.0


def test_angle_targets_in_range():
    ep = AngleTaskFamily().sample_episode(1, 20, 20, np.random.default_rng(0))
    y = np.concatenate([ep.y_s, ep.y_q])
    assert np.all((y >= 0) & (y < 2 * math.pi))


def test_mse_examples():
    g = Graph()
    assert mse_loss(g.constant([[1.0], [2.0]]), [[1.0], [2.0]]).value == 0.0
    assert mse_loss(g.constant([[0.0]]), [[3.0]]).value == 9.0


def test_mse_oracle():
    rng = np.random.default_rng(0)
    p, y = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    expect = sum(sum((p[i, j] - y[i, j]) ** 2 for j in range(3)) for i in range(6)) / 6
    assert abs(mse_loss(Graph().constant(p), y).value - expect) < 1e-12


def test_angular_examples():
    g = Graph()
    assert angular_loss(g.constant([[0.7]]), [[0.7]]).value == 0.0
    assert angular_loss(g.constant([[0.0]]), [[math.pi]]).value == pytest.approx(4.0, abs=1e-15)
    assert angular_loss(g.constant([[0.3 + 2 * math.pi]]), [[0.3]]).value == pytest.approx(0.0, abs=1e-15)


def test_ce_examples():
    g = Graph()
    logits = 1000.0 * one_hot(np.array([2, 0]), 3)
    assert ce_loss(g.constant(logits), np.array([2, 0])).value == pytest.approx(0.0, abs=1e-300)
    assert ce_loss(g.constant(np.zeros((4, 5))), np.array([0, 1, 2, 3])).value == pytest.approx(
        math.log(5), abs=1e-15)


def test_ce_oracle():
    rng = np.random.default_rng(1)
    z, y = rng.standard_normal((7, 4)), rng.integers(0, 4, 7)
    expect = -sum(z[i, y[i]] - math.log(sum(math.exp(v) for v in z[i])) for i in range(7)) / 7
    assert abs(ce_loss(Graph().constant(z), y).value - expect) < 1e-12
    assert accuracy(z, y) == np.mean(z.argmax(-1) == y)


def test_flat_roundtrip(tmp_path):
    fam = ClusterFamily.synthetic(num_latent_classes=3, feature_dim=5, examples_per_class=20, seed=2)
    path = tmp_path / "ds.txt"
    dump_flat_dataset(fam, path)
    back = load_flat_dataset(path)
    assert back.num_latent_classes == 3
    a = sample_episode(fam, 3, 2, 3, np.random.default_rng(5))
    b = sample_episode(back, 3, 2, 3, np.random.default_rng(5))
    assert np.array_equal(a.x_s, b.x_s) and np.array_equal(a.x_q, b.x_q)


def test_flat_truncated_reports_offset(tmp_path):
    fam = ClusterFamily.synthetic(num_latent_classes=2, feature_dim=3, examples_per_class=4, seed=0)
    path = tmp_path / "ds.txt"
    dump_flat_dataset(fam, path)
    data = path.read_bytes()
    cut = len(data) - 7
    path.write_bytes(data[:cut])
    with pytest.raises(FlatDatasetError) as e:
        load_flat_dataset(path)
    assert e.value.offset == data[:cut].rfind(b"\n") + 1
    assert f"byte offset {e.value.offset}" in str(e.value)


@pytest.mark.parametrize("body,offset_line", [
    ("SIMT-DS v1 2 2\n0 1.0 2.0\n1 1.0\n", 2),
    ("SIMT-DS v1 2 2\n0 1.0 2.0\n5 1.0 2.0\n", 2),
    ("SIMT-DS v1 2 2\n0 1.0 x\n", 1),
    ("BAD\n", 0),
])
def test_flat_malformed(tmp_path, body, offset_line):
    path = tmp_path / "ds.txt"
    path.write_text(body)
    with pytest.raises(FlatDatasetError) as e:
        load_flat_dataset(path)
    lines = body.split("\n")
    assert e.value.offset == sum(len(l) + 1 for l in lines[:offset_line])
