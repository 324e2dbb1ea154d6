import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urctrans.data import PhantomConfig, generate_phantom_scan
from urctrans.pretrain import (
    ROTATIONS,
    AugmentConfig,
    PretrainConfig,
    build_pretrain_corpus,
    ema_update,
    info_nce,
    init_heads,
    init_pretrain_state,
    load_corpus,
    make_batch,
    predict,
    pretrain_run,
    pretrain_step,
    project,
    random_view,
    rotate_cube,
    save_corpus,
    symmetric_info_nce,
)
from urctrans.tensorcore import Tape, Tensor, check_gradients, l2_normalize
from urctrans.vit3d import TINY_CONFIG

AUG = AugmentConfig(S1=16, S2=12)


def unit_rows(r, B, p):
    x = r.standard_normal((B, p))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def pairwise_oracle(q, k, tau, exclude=False):
    B = len(q)
    total = 0.0
    for i in range(B):
        pos = math.exp(sum(q[i, t] * k[i, t] for t in range(q.shape[1])) / tau)
        den = 0.0
        for j in range(B):
            if exclude and j == i:
                continue
            den += math.exp(sum(q[i, t] * k[j, t] for t in range(q.shape[1])) / tau)
        total += -math.log(pos / den)
    return total / B


@pytest.fixture(scope="module")
def corpus256():
    cubes = []
    for s in range(4):
        vol, _ = generate_phantom_scan(PhantomConfig(shape=(64, 64, 64), candidate_extent=12, seed=100 + s))
        cubes += build_pretrain_corpus([vol], 16)[0]
    assert len(cubes) == 256
    return cubes


class TestViews:
    def test_constant_low_cube(self, rng):
        v = random_view(np.full((16, 16, 16), -2000.0), rng, AUG)
        assert v.shape == (12, 12, 12) and not v.any()

    def test_high_voxel_maps_to_one(self):
        aug = AugmentConfig(S1=4, S2=2, low_range=(-1100, -1100), high_range=(700, 700))
        v = random_view(np.full((4, 4, 4), 700.0), np.random.default_rng(0), aug)
        assert (v == 1.0).all()

    def test_replay_bytes(self, corpus256):
        a = random_view(corpus256[0], np.random.default_rng(9), AUG)
        b = random_view(corpus256[0], np.random.default_rng(9), AUG)
        assert a.tobytes() == b.tobytes()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_range(self, seed):
        r = np.random.default_rng(seed)
        v = random_view(r.uniform(-3000, 3000, (16, 16, 16)), r, AUG)
        assert v.min() >= 0.0 and v.max() <= 1.0

    def test_wrong_cube_size(self, rng):
        with pytest.raises(ValueError):
            random_view(np.zeros((12, 12, 12)), rng, AUG)

    def test_bad_augment_configs(self):
        with pytest.raises(ValueError):
            AugmentConfig(S1=12, S2=12)
        with pytest.raises(ValueError):
            AugmentConfig(low_range=(-1000, 700), high_range=(600, 800))


class TestRotations:
    def test_group_of_24_proper_rotations(self):
        assert len(ROTATIONS) == 24
        for perm, flips in ROTATIONS:
            m = np.eye(3)[list(perm)] * np.array([-1 if f else 1 for f in flips])[:, None]
            assert round(np.linalg.det(m)) == 1

    def test_distinct_images(self, rng):
        x = rng.standard_normal((3, 3, 3))
        images = {rotate_cube(x, i).tobytes() for i in range(24)}
        assert len(images) == 24

    def test_multiset_preserved(self, rng):
        x = rng.standard_normal((4, 4, 4))
        for i in range(24):
            np.testing.assert_array_equal(np.sort(rotate_cube(x, i), axis=None), np.sort(x, axis=None))


class TestEma:
    def test_m_one_and_zero(self, rng):
        on, tg = {"a": rng.standard_normal(3)}, {"a": rng.standard_normal(3)}
        np.testing.assert_array_equal(ema_update(on, tg, 1.0)["a"], tg["a"])
        np.testing.assert_array_equal(ema_update(on, tg, 0.0)["a"], on["a"])

    def test_hand_value(self):
        out = ema_update({"a": np.array(1.0), "b": np.array(-2.0)}, {"a": np.array(3.0), "b": np.array(4.0)}, 0.99)
        assert abs(out["a"] - (0.99 * 3.0 + 0.01 * 1.0)) < 1e-12
        assert abs(out["b"] - (0.99 * 4.0 + 0.01 * -2.0)) < 1e-12

    def test_structure_preserved_over_updates(self, rng):
        on = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(4), "pred": rng.standard_normal(2)}
        tg = {"a": on["a"].copy(), "b": on["b"].copy()}
        for _ in range(10):
            tg = ema_update(on, tg, 0.9)
        assert sum(v.size for v in tg.values()) == 10 and set(tg) == {"a", "b"}

    def test_mismatch(self, rng):
        with pytest.raises(ValueError):
            ema_update({"a": np.zeros(2)}, {"a": np.zeros(3)}, 0.5)
        with pytest.raises(ValueError):
            ema_update({}, {"a": np.zeros(3)}, 0.5)


class TestInfoNCE:
    def test_orthonormal_pair(self):
        e = np.eye(2)
        assert info_nce(Tensor(e), e, 1.0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-9)

    @pytest.mark.parametrize("B", [2, 5, 6, 11, 64, 1024])
    def test_identical_features(self, B):
        q = np.tile(unit_rows(np.random.default_rng(B), 1, 8), (B, 1))
        assert info_nce(Tensor(q), q, 0.2).item() == math.log(B)

    @pytest.mark.parametrize("exclude", [False, True])
    def test_pairwise_oracle(self, rng, exclude):
        q, k = unit_rows(rng, 7, 5), unit_rows(rng, 7, 5)
        assert abs(info_nce(Tensor(q), k, 0.2, exclude).item() - pairwise_oracle(q, k, 0.2, exclude)) < 1e-10

    def test_symmetric_is_average(self, rng):
        qa, kb, qb, ka = (unit_rows(rng, 4, 3) for _ in range(4))
        expected = 0.5 * (pairwise_oracle(qa, kb, 0.2) + pairwise_oracle(qb, ka, 0.2))
        assert symmetric_info_nce(Tensor(qa), kb, Tensor(qb), ka, 0.2).item() == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 12), st.integers(0, 2**31 - 1))
    def test_nonnegative_and_permutation_invariant(self, B, seed):
        r = np.random.default_rng(seed)
        q, k = unit_rows(r, B, 4), unit_rows(r, B, 4)
        base = info_nce(Tensor(q), k, 0.2).item()
        assert base >= 0.0
        perm = r.permutation(B)
        assert abs(info_nce(Tensor(q[perm]), k[perm], 0.2).item() - base) <= 1e-12

    def test_rejects_unnormalized(self, rng):
        q = unit_rows(rng, 3, 4)
        with pytest.raises(ValueError):
            info_nce(Tensor(q * 1.01), q, 0.2)
        with pytest.raises(ValueError):
            info_nce(Tensor(q[:1]), q[:1], 0.2)
        with pytest.raises(ValueError):
            info_nce(Tensor(q), q, 0.0)

    def test_key_branch_is_constant(self, rng):
        q0, k0 = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
        with Tape() as tape:
            q, k = tape.watch(q0), tape.watch(k0)
            loss = info_nce(q, k, 0.2)
        g = tape.backward(loss)
        assert not g[k.node].any() and g[q.node].any()


class TestHeads:
    def test_gradients(self, rng):
        params = {k: v.astype(np.float64) + 0.1 * rng.standard_normal(v.shape) for k, v in init_heads(6, 8, 4, rng).items()}
        feat_a, feat_b = rng.standard_normal((5, 6)), rng.standard_normal((5, 6))
        ka = l2_normalize(Tensor(rng.standard_normal((5, 4)))).data
        kb = l2_normalize(Tensor(rng.standard_normal((5, 4)))).data

        def loss(p):
            qa = l2_normalize(predict(project(Tensor(feat_a), p), p))
            qb = l2_normalize(predict(project(Tensor(feat_b), p), p))
            return symmetric_info_nce(qa, kb, qb, ka, 0.2)

        # a bias feeding batch-norm is cancelled by the mean subtraction,
        # so its gradient is zero and only absolute agreement is meaningful
        pre_bn = {"proj.fc1.bias", "proj.fc2.bias", "proj.fc3.bias", "pred.fc1.bias"}
        results = check_gradients(loss, params)
        for r in results:
            if r.name in pre_bn:
                assert r.analytic_norm < 1e-12 and r.numeric_norm < 1e-8
            else:
                assert r.rel_error < 1e-4, r

    def test_projection_output_standardized(self, rng):
        z = project(Tensor(rng.standard_normal((16, 6))), init_heads(6, 8, 4, rng, np.float64)).data
        np.testing.assert_allclose(z.mean(0), 0.0, atol=1e-10)


class TestCorpus:
    @pytest.mark.parametrize("shape,count", [((96, 96, 96), 1), ((192, 96, 96), 2), ((200, 200, 200), 8)])
    def test_counts(self, shape, count):
        cubes, sources = build_pretrain_corpus([np.zeros(shape, np.float32)], 96)
        assert len(cubes) == count and sources == [0] * count
        assert all(c.shape == (96, 96, 96) for c in cubes)

    def test_small_volume_warns(self):
        with pytest.warns(UserWarning):
            cubes, _ = build_pretrain_corpus([np.zeros((50, 96, 96))], 96)
        assert cubes == []

    def test_tiles_are_disjoint_blocks(self):
        v = np.arange(8**3, dtype=np.float32).reshape(8, 8, 8)
        cubes, _ = build_pretrain_corpus([v], 4)
        np.testing.assert_array_equal(cubes[1], v[:4, :4, 4:])

    def test_save_load(self, tmp_path, rng):
        cubes = [rng.standard_normal((4, 4, 4)).astype(np.float32) for _ in range(3)]
        save_corpus(tmp_path, cubes, ["a", "a", "b"])
        back, src = load_corpus(tmp_path)
        assert src == ["a", "a", "b"]
        assert all(x.tobytes() == y.tobytes() for x, y in zip(cubes, back))


class TestStep:
    def test_batch_pairs_share_source(self, corpus256):
        batch = make_batch(corpus256, [3, 7], AUG, seed=0, step=0)
        assert batch.views_a.shape == (2, 12, 12, 12)
        assert list(batch.source_ids) == [3, 7]
        assert batch.views_a.tobytes() != batch.views_b.tobytes()

    def test_make_batch_threads_match_serial(self, corpus256, monkeypatch):
        serial = make_batch(corpus256, range(8), AUG, seed=1, step=4)
        monkeypatch.setenv("URCTRANS_THREADS", "4")
        threaded = make_batch(corpus256, range(8), AUG, seed=1, step=4)
        assert serial.views_a.tobytes() == threaded.views_a.tobytes()

    def test_identical_seeds_identical_losses(self, corpus256):
        cfg = PretrainConfig(batch_size=16, steps=3, lr=1e-3)
        runs = [pretrain_run(corpus256[:32], TINY_CONFIG, AUG, cfg, seed=4).losses for _ in range(2)]
        assert runs[0] == runs[1]

    def test_first_loss_near_ln_b(self, corpus256):
        for seed in range(3):
            state = init_pretrain_state(TINY_CONFIG, PretrainConfig(), seed)
            loss = pretrain_step(make_batch(corpus256, range(64), AUG, seed, 0), state)
            assert abs(loss - math.log(64)) <= 0.15 * math.log(64)

    def test_target_excludes_prediction_head(self):
        state = init_pretrain_state(TINY_CONFIG, PretrainConfig())
        assert set(state.online) - set(state.target) == {k for k in state.online if k.startswith("pred.")}

    def test_mismatched_view_size(self, corpus256):
        with pytest.raises(ValueError):
            pretrain_run(corpus256, TINY_CONFIG, AugmentConfig(S1=16, S2=8), PretrainConfig(steps=1))

    def test_checkpoints_written(self, corpus256, tmp_path):
        cfg = PretrainConfig(batch_size=8, steps=4, checkpoint_every=2)
        pretrain_run(corpus256[:16], TINY_CONFIG, AUG, cfg, checkpoint_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["pretrain_step_000002.uctk", "pretrain_step_000004.uctk"]

    @pytest.mark.slow
    def test_two_hundred_steps_reduce_loss(self, corpus256):
        cfg = PretrainConfig(batch_size=64, steps=200, lr=1e-3)
        state = pretrain_run(corpus256, TINY_CONFIG, AUG, cfg, seed=0)
        assert len(state.losses) == 200
        assert state.losses[-1] < state.losses[0]
