import math

import numpy as np
import pytest
import torch
from sklearn.base import clone

from stageprune.calib import CalibrationSet, StagePartition, build_stage_calibration
from stageprune.exceptions import DegenerateActivations, InvalidConfig, InvalidInput
from stageprune.linalg import damped_inverse, gram, spd_inverse
from stageprune.prune import (
    BLOCKS_ID,
    BlockRedundancy,
    OBSPruner,
    StructureSpec,
    WandaPruner,
    apply_group_mask,
    block_cosine,
    build_stage_trajectories,
    default_mlp_group_size,
    layerdrop_scores,
    layerdrop_trajectory,
    model_structures,
    obs_compensation,
    obs_importance,
    obs_prune_layer,
    removed_count,
    wanda_prune_layer,
    wanda_scores,
)
from stageprune.toydiff import DenoiserModel, ModelConfig


def _instance(rng, d_out=5, d_in=8, n=40):
    return rng.standard_normal((d_out, d_in)), rng.standard_normal((d_in, n))


def _ls_update(W, X, M):
    """Best rewrite of the remaining columns so (W' X) tracks (W X), by normal equations."""
    R = [j for j in range(W.shape[1]) if j not in set(M)]
    XR = X[R]
    target = W @ X
    WR = np.linalg.solve(XR @ XR.T, XR @ target.T).T
    out = np.zeros_like(W)
    out[:, R] = WR
    return out


class TestOBS:
    def test_single_column_closed_form(self, rng):
        W, X = _instance(rng)
        Hinv = spd_inverse(gram(X))
        for j in range(W.shape[1]):
            assert obs_importance(W, Hinv, [j]) == pytest.approx(np.sum(W[:, j] ** 2) / Hinv[j, j], rel=1e-12)

    def test_importance_is_least_squares_error(self, rng):
        W, X = _instance(rng)
        M = [1, 5]
        Hinv = spd_inverse(gram(X))
        best = _ls_update(W, X, M)
        err = np.sum(((best - W) @ X) ** 2)
        assert obs_importance(W, Hinv, M) == pytest.approx(err, rel=1e-8)

    def test_compensation_matches_normal_equations(self, rng):
        W, X = _instance(rng)
        M = [0, 3, 4]
        delta = obs_compensation(W, spd_inverse(gram(X)), M)
        np.testing.assert_allclose(W + delta, _ls_update(W, X, M), atol=1e-9)
        assert np.all((W + delta)[:, M] == 0)

    def test_compensation_never_hurts(self, rng):
        for _ in range(20):
            W, X = _instance(rng, n=12)
            H = gram(X)
            M = list(rng.choice(8, size=2, replace=False))
            Hinv = damped_inverse(H)
            delta = obs_compensation(W, Hinv, M)
            masked = W.copy()
            masked[:, M] = 0
            assert np.sum(((W + delta - W) @ X) ** 2) <= np.sum(((masked - W) @ X) ** 2) + 1e-12

    def test_sequential_equals_joint_least_squares(self, rng):
        W, X = _instance(rng, d_in=9, n=60)
        spec = StructureSpec.contiguous("l", 9, 3)
        traj = obs_prune_layer(W, gram(X), spec, 2, damping=0.0)
        removed = spec.indices(traj.removed(2))
        np.testing.assert_allclose(traj.weight(2), _ls_update(W, X, list(removed)), atol=1e-8)

    def test_first_step_picks_cheapest_group(self, rng):
        W, X = _instance(rng, d_in=8)
        spec = StructureSpec.contiguous("l", 8, 2)
        H = gram(X)
        traj = obs_prune_layer(W, H, spec, 1)
        Hinv = damped_inverse(H)
        costs = [obs_importance(W, Hinv, list(g)) for g in spec.groups]
        assert traj.order[0] == int(np.argmin(costs))
        assert traj.steps[0].importance == pytest.approx(min(costs))

    def test_ties_go_to_lowest_index(self):
        W = np.ones((2, 4))
        X = np.eye(4)
        traj = obs_prune_layer(W, gram(X), StructureSpec.contiguous("l", 4, 1), 4)
        assert traj.order == (0, 1, 2, 3)

    def test_trajectory_structure(self, rng):
        W, X = _instance(rng)
        spec = StructureSpec.contiguous("l", 8, 2)
        traj = obs_prune_layer(W, gram(X), spec, 4)
        assert traj.max_level == 4 and len(traj.snapshots) == 5
        assert np.array_equal(traj.weight(0), W)
        assert np.all(traj.weight(4) == 0)
        for k in range(1, 5):
            assert np.all(traj.weight(k)[:, spec.indices(traj.removed(k))] == 0)
            np.testing.assert_allclose(traj.weight(k - 1) + traj.steps[k - 1].delta, traj.weight(k), atol=1e-12)

    def test_bad_config(self, rng):
        W, X = _instance(rng)
        with pytest.raises(InvalidConfig):
            obs_prune_layer(W, gram(X), StructureSpec.contiguous("l", 8, 2), 5)
        with pytest.raises(InvalidConfig):
            obs_prune_layer(W, gram(X), StructureSpec.contiguous("l", 5, 1, axis="rows"), 1)


class TestOBSPruner:
    def test_fit_transform(self, rng):
        W, X = _instance(rng)
        p = OBSPruner(weight=W, group_size=2, max_level=3, level=0).fit(X.T)
        np.testing.assert_allclose(p.transform(X.T), X.T @ W.T)
        assert p.importances_.shape == (3,)
        p.set_params(level=3)
        assert np.all(p.pruned_weight()[:, p.spec_.indices(p.trajectory_.removed(3))] == 0)

    def test_params_and_clone(self, rng):
        W, _ = _instance(rng)
        p = OBSPruner(weight=W, group_size=4, damping=0.1)
        assert p.get_params()["group_size"] == 4
        assert clone(p).damping == 0.1

    def test_feature_mismatch(self, rng):
        W, X = _instance(rng)
        with pytest.raises(ValueError):
            OBSPruner(weight=W).fit(X.T[:, :3])


def _wanda_loops(W, X):
    d_out, d_in = W.shape
    S = np.zeros_like(W)
    for i in range(d_out):
        for j in range(d_in):
            S[i, j] = abs(W[i, j]) * math.sqrt(math.fsum(v * v for v in X[j]))
    return S


class TestWanda:
    def test_elementwise_matches_loops(self, rng):
        W, X = _instance(rng)
        spec = StructureSpec.contiguous("l", 5, 1, axis="rows")
        s = wanda_scores(W, X, spec, aggregate="channel")
        assert np.array_equal(s.elementwise, _wanda_loops(W, X))

    def test_group_aggregates(self, rng):
        W, X = _instance(rng, d_out=6)
        S = _wanda_loops(W, X)
        rows = StructureSpec("l", ((0, 1, 2), (3, 4, 5)), axis="rows")
        head = wanda_scores(W, X, rows, aggregate="head").group_scores
        chan = wanda_scores(W, X, rows, aggregate="channel").group_scores
        np.testing.assert_allclose(head, [S[:3].sum() / 3, S[3:].sum() / 3])
        np.testing.assert_allclose(chan, [S[:3].sum() / 8 / 3, S[3:].sum() / 8 / 3])
        cols = StructureSpec.contiguous("l", 8, 4)
        np.testing.assert_allclose(wanda_scores(W, X, cols).group_scores, [S[:, :4].sum() / 4, S[:, 4:].sum() / 4])

    def test_selection_is_bottom_k(self, rng):
        W, X = _instance(rng, d_out=12)
        spec = StructureSpec.contiguous("l", 12, 1, axis="rows")
        s = wanda_scores(W, X, spec, aggregate="channel")
        traj = wanda_prune_layer(s, 12)
        for k in range(13):
            oracle = sorted(range(12), key=lambda g: s.group_scores[g])[:k]
            assert traj.removed(k) == tuple(sorted(oracle))

    def test_ties_lowest_index(self):
        spec = StructureSpec.contiguous("l", 4, 1, axis="rows")
        s = wanda_scores(np.ones((4, 2)), np.ones((2, 3)), spec, aggregate="channel")
        assert wanda_prune_layer(s, 4).order == (0, 1, 2, 3)

    def test_mask_only(self, rng):
        W, X = _instance(rng)
        spec = StructureSpec.contiguous("l", 5, 1, axis="rows")
        traj = wanda_prune_layer(wanda_scores(W, X, spec), 2)
        assert traj.kind == "mask" and traj.snapshots is None
        with pytest.raises(InvalidInput):
            traj.weight(1)
        masked = apply_group_mask(W, spec, traj.removed(2))
        keep = [i for i in range(5) if i not in traj.removed(2)]
        assert np.array_equal(masked[keep], W[keep])

    def test_estimator(self, rng):
        W, X = _instance(rng, d_out=6)
        p = WandaPruner(weight=W, group_size=2, level=1).fit(X.T)
        out = p.transform(X.T)
        dead = p.spec_.indices(p.trajectory_.removed(1))
        assert np.all(out[:, dead] == 0)


class TestLayerDrop:
    def test_cosine_zero_norm_is_nan(self):
        c = block_cosine(np.zeros((1, 3)), np.ones((1, 3)))
        assert np.isnan(c[0])
        assert block_cosine(np.ones((1, 3)), np.ones((1, 3)))[0] == pytest.approx(1.0)

    def test_identity_block_detected(self, model, data, sched):
        m = DenoiserModel(model.config)
        m.load_state_dict(model.state_dict())
        with torch.no_grad():
            for lin in (m.blocks[2].attn.proj, m.blocks[2].mlp.fc2):
                lin.weight.zero_()
                lin.bias.zero_()
        calib = build_stage_calibration(data, 0, StagePartition(1, 1000), sched, size=64)
        scores = layerdrop_scores(m, calib)
        assert scores[2].score == pytest.approx(1.0, abs=1e-12)
        assert layerdrop_trajectory(scores, 1).order == (2,)

    def test_ranking_and_ties(self):
        scores = [BlockRedundancy(0, 0.5, 1), BlockRedundancy(1, 0.9, 1), BlockRedundancy(2, 0.9, 1)]
        traj = layerdrop_trajectory(scores, 3)
        assert traj.order == (1, 2, 0) and traj.layer_id == BLOCKS_ID and traj.kind == "drop"

    def test_all_zero_activations(self):
        m = DenoiserModel(ModelConfig())
        with torch.no_grad():
            for p in m.parameters():
                p.zero_()
        calib = CalibrationSet(0, np.zeros((2, 16, 16), np.float32), np.array([1, 2]), np.array([0, 0]),
                               np.array([0, 1]), 0)
        with pytest.raises(DegenerateActivations):
            layerdrop_scores(m, calib)


class TestStages:
    def test_removed_count(self):
        assert removed_count(8, 16, 16) == 8
        assert removed_count(8, 2, 16) == 1
        assert removed_count(7, 2, 16) == 0
        assert removed_count(16, 2, 16) == 2
        with pytest.raises(InvalidInput):
            removed_count(17, 2, 16)

    def test_structures(self, model):
        assert default_mlp_group_size(64, 16) == 4
        obs = model_structures(model, "obs", 4)
        assert [s.layer_id for s in obs[:2]] == ["blocks.0.attn.proj", "blocks.0.mlp.fc2"]
        assert obs[0].n_groups == 2 and obs[1].n_groups == 16
        wanda = model_structures(model, "wanda", 4)
        assert wanda[0].groups[1][:3] == (16, 17, 18) and len(wanda[0].groups[1]) == 48
        with pytest.raises(InvalidConfig):
            model_structures(model, "magnitude")

    def test_trajectories_cover_stages(self, model, calibs10):
        trajs = build_stage_trajectories(model, "wanda", calibs10[:2], 16)
        assert len(trajs) == 2 * 8
        assert trajs[(1, "blocks.3.mlp.fc1")].max_level == 16

    def test_layerdrop_l_max_bounded_by_depth(self, model, calibs10):
        with pytest.raises(InvalidConfig):
            build_stage_trajectories(model, "layerdrop", calibs10[:1], 5)
