import numpy as np
import pytest

from dapsearch.dam import balance_lambda
from dapsearch.synthworld import (
    SOURCE,
    TARGET,
    Scene,
    SnapshotFormatError,
    WorldConfig,
    generate_dataset,
    load_snapshot,
    parse_snapshot,
    patch_boxes,
    render_patch_features,
    render_roi_features,
    save_snapshot,
    snapshot_bytes,
    snapshot_hash,
)
from dapsearch.trainer import TrainConfig, Trainer


def make_scene(boxes, apps, clutter_boxes=None, clutter_apps=None, w=100.0, h=60.0):
    dim = np.shape(apps)[1] if len(apps) else 3
    return Scene("x", TARGET, w, h, np.array(boxes, float).reshape(-1, 4), np.arange(len(boxes)),
                 np.array(apps, float).reshape(-1, dim),
                 np.zeros((0, 4)) if clutter_boxes is None else np.array(clutter_boxes, float),
                 np.zeros((0, dim)) if clutter_apps is None else np.array(clutter_apps, float))


class TestGenerate:
    def test_deterministic(self, small_world):
        a = generate_dataset(small_world, seed=3)
        b = generate_dataset(small_world, seed=3)
        assert snapshot_bytes(a) == snapshot_bytes(b)
        assert snapshot_bytes(a) != snapshot_bytes(generate_dataset(small_world, seed=4))

    def test_equal_counts_give_neutral_balance(self):
        snap = generate_dataset(WorldConfig(n_source_scenes=40, n_target_scenes=40, n_test_scenes=4), seed=0)
        assert balance_lambda(len(snap.source_train), len(snap.target_train)) == 0.5

    def test_instance_count(self):
        cfg = WorldConfig(n_source_scenes=20, n_target_scenes=0, n_test_scenes=0, min_instances=3, max_instances=3)
        snap = generate_dataset(cfg, seed=1)
        assert sum(sc.n_instances for sc in snap.source_train) == 60

    def test_configured_counts_and_domains(self, small_snapshot):
        cfg = small_snapshot.config
        assert len(small_snapshot.source_train) == cfg.n_source_scenes
        assert len(small_snapshot.target_train) == cfg.n_target_scenes
        assert len(small_snapshot.target_test) == cfg.n_test_scenes
        assert {sc.domain for sc in small_snapshot.source_train} == {SOURCE}
        assert {sc.domain for sc in small_snapshot.target_train + small_snapshot.target_test} == {TARGET}

    def test_identity_pools_are_disjoint(self, small_snapshot):
        pools = [{int(i) for sc in split for i in sc.identities}
                 for split in (small_snapshot.source_train, small_snapshot.target_train, small_snapshot.target_test)]
        assert not (pools[0] & pools[1]) and not (pools[0] & pools[2]) and not (pools[1] & pools[2])

    def test_queries_have_gallery_ground_truth(self, small_snapshot):
        test = small_snapshot.target_test
        for si, ii in small_snapshot.queries:
            ident = test[si].identities[ii]
            assert any(ident in sc.identities for j, sc in enumerate(test) if j != si)

    @pytest.mark.parametrize("bad", [dict(dim=1), dict(nuisance_dims=15), dict(min_instances=0),
                                     dict(target_condition=0.5), dict(target_noise=-1.0), dict(n_target_ids=0)])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            generate_dataset(WorldConfig(**bad))


class TestRender:
    def test_exact_box_gives_appearance(self):
        sc = make_scene([[10, 10, 20, 30]], [[1.0, 2.0, 3.0]])
        out = render_roi_features(sc, sc.boxes, np.array([5.0, 5.0, 5.0]))
        np.testing.assert_allclose(out[0], [1.0, 2.0, 3.0])

    def test_disjoint_box_gives_texture(self):
        sc = make_scene([[10, 10, 20, 30]], [[1.0, 2.0, 3.0]])
        t = np.array([0.1, -0.2, 0.3])
        np.testing.assert_allclose(render_roi_features(sc, [[50, 10, 60, 30]], t)[0], t)

    def test_half_overlap(self):
        # box shifted by half its width: inter 50, union 150 -> IOU 1/3
        app, t = np.array([3.0, 0.0, -3.0]), np.array([1.0, 1.0, 1.0])
        sc = make_scene([[0, 0, 10, 10]], [app])
        out = render_roi_features(sc, [[5, 0, 15, 10]], t)[0]
        np.testing.assert_allclose(out, app / 3 + 2 * t / 3, atol=1e-12)

    def test_noise_is_seeded(self):
        sc = make_scene([[0, 0, 10, 10]], [[1.0, 0.0, 0.0]])
        a = render_roi_features(sc, sc.boxes, np.zeros(3), 0.1, np.random.default_rng(0))
        b = render_roi_features(sc, sc.boxes, np.zeros(3), 0.1, np.random.default_rng(0))
        np.testing.assert_array_equal(a, b)

    def test_single_patch_is_whole_image(self):
        sc = make_scene([[10, 10, 20, 30]], [[1.0, 2.0, 3.0]])
        t = np.zeros(3)
        out = render_patch_features(sc, 1, t)
        assert out.shape == (1, 1, 3)
        np.testing.assert_allclose(out[0, 0], render_roi_features(sc, [[0, 0, 100, 60]], t)[0])

    def test_empty_scene_patches_are_texture(self):
        sc = make_scene([], np.zeros((0, 3)))
        t = np.array([0.5, -0.5, 2.0])
        out = render_patch_features(sc, 4, t)
        np.testing.assert_allclose(out, np.broadcast_to(t, (4, 4, 3)))

    def test_instance_inside_one_patch(self):
        # 4x4 grid on 100x60: patch (2, 3) spans x 75..100, y 30..45
        sc = make_scene([[80, 33, 90, 42]], [[9.0, 9.0, 9.0]])
        t = np.zeros(3)
        out = render_patch_features(sc, 4, t)
        carries = np.abs(out).sum(axis=2) > 0
        assert carries[2, 3] and carries.sum() == 1
        assert patch_boxes(sc, 4).shape == (16, 4)


class TestSnapshotIO:
    def test_round_trip(self, small_snapshot, tmp_path):
        path = save_snapshot(small_snapshot, tmp_path / "w.jsonl")
        loaded = load_snapshot(path)
        assert loaded == small_snapshot
        assert snapshot_hash(loaded) == snapshot_hash(small_snapshot)

    def test_truncated_file(self, small_snapshot):
        text = snapshot_bytes(small_snapshot).decode()
        lines = text.splitlines()
        with pytest.raises(SnapshotFormatError, match="truncated"):
            parse_snapshot("\n".join(lines[:-2]) + "\n")
        with pytest.raises(SnapshotFormatError, match="line 1"):
            parse_snapshot(text[:200])

    def test_bad_scene_line_is_named(self, small_snapshot):
        lines = snapshot_bytes(small_snapshot).decode().splitlines()
        lines[3] = '{"split": "source_train"}'
        with pytest.raises(SnapshotFormatError, match="line 4"):
            parse_snapshot("\n".join(lines))

    def test_empty_input(self):
        with pytest.raises(SnapshotFormatError):
            parse_snapshot("")

    def test_zero_target_scenes_load_but_trainer_rejects(self, tmp_path):
        snap = generate_dataset(WorldConfig(n_source_scenes=4, n_target_scenes=0, n_test_scenes=2), seed=0)
        loaded = load_snapshot(save_snapshot(snap, tmp_path / "w.jsonl"))
        assert loaded.target_train == []
        with pytest.raises(ValueError, match="target"):
            Trainer(loaded, TrainConfig())


class TestWorldProperties:
    def _appearances(self, snap, split):
        return np.vstack([sc.appearances for sc in split])

    def test_domain_gap_is_linearly_separable(self):
        snap = generate_dataset(WorldConfig(), seed=2)
        xs = self._appearances(snap, snap.source_train)
        xt = self._appearances(snap, snap.target_train)
        X = np.vstack([xs, xt])
        y = np.r_[np.zeros(len(xs)), np.ones(len(xt))]
        idx = np.random.default_rng(0).permutation(len(y))
        tr, te = idx[: len(y) // 2], idx[len(y) // 2:]
        A = np.hstack([X, np.ones((len(X), 1))])
        w = np.linalg.lstsq(A[tr], 2 * y[tr] - 1, rcond=None)[0]
        acc = np.mean((A[te] @ w > 0) == y[te])
        assert acc > 0.9
        assert not np.allclose(xs.mean(axis=0), xt.mean(axis=0), atol=0.1)

    def test_identity_consistency(self):
        snap = generate_dataset(WorldConfig(), seed=2)
        dom = snap.domain(TARGET)
        rng = np.random.default_rng(0)
        ids = sorted(snap.bank.latents)
        r1 = np.array([dom.appearance(snap.bank.latents[i], rng) for i in ids])
        r2 = np.array([dom.appearance(snap.bank.latents[i], rng) for i in ids])
        r1 /= np.linalg.norm(r1, axis=1, keepdims=True)
        r2 /= np.linalg.norm(r2, axis=1, keepdims=True)
        cos = r1 @ r2.T
        same = np.diag(cos)
        off = cos[~np.eye(len(ids), dtype=bool)]
        assert same.mean() > off.mean()
        assert np.mean(same > cos.max(axis=1, where=~np.eye(len(ids), dtype=bool), initial=-1)) > 0.9
